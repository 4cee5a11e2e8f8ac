use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{synth_generate, Dataset, SynthSpec};
use crate::joint_loss::WeightingMode;

fn toy_data(n: usize, seed: u64) -> Dataset {
    synth_generate(&SynthSpec {
        samples: n,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn toy(fusion: Fusion, weighting: WeightingMode, seed: u64) -> MultimodalModel {
    let config = ModelConfig::toy_preset().with_fusion(fusion);
    build_model(&config, weighting, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn toy_forward_shapes_and_normalization() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let audio = random_tensor(&mut rng, &[1, 256]);
        let video = random_tensor(&mut rng, &[4, 1, 12, 12]);
        let out = model
            .predict(Inputs {
                audio: Some(&audio),
                video: Some(&video),
            })
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].len(), out[1].len()), (4, 2));
        for head in &out {
            let total: f64 = head.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn dynamic_mode_starts_at_even_weights() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 3);
    assert_eq!(model.task_weights().unwrap().as_slice(), &[0.5, 0.5]);
    let id = model.params().find(LAMBDA).unwrap();
    assert_eq!(model.params().get(id).data(), &[0.0, 0.0]);
    let fixed = toy(Fusion::Concat, WeightingMode::uniform_static(2), 3);
    assert!(fixed.params().find(LAMBDA).is_none());
    assert_eq!(fixed.task_weights().unwrap().as_slice(), &[0.5, 0.5]);
}

#[test]
fn builds_are_deterministic_per_seed() {
    let bits = |m: &MultimodalModel| -> Vec<u64> {
        m.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let a = toy(Fusion::Concat, WeightingMode::dynamic(2), 11);
    let b = toy(Fusion::Concat, WeightingMode::dynamic(2), 11);
    let c = toy(Fusion::Concat, WeightingMode::dynamic(2), 12);
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn invalid_chain_is_a_configuration_error() {
    let mut config = ModelConfig::toy_preset();
    config.speech.as_mut().unwrap()[0].kernel = 1000;
    let err = build_model(&config, WeightingMode::dynamic(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Config { ref stage, .. } if stage == "speech.0.conv"), "{err}");
    let err = build_model(&ModelConfig::toy_preset(), WeightingMode::dynamic(3), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(err.is_err());
}

#[test]
fn eval_mode_is_deterministic() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 2);
    let data = toy_data(3, 1);
    for s in data.samples() {
        assert_eq!(model.predict(s).unwrap(), model.predict(s).unwrap());
    }
}

#[test]
fn unimodal_models_ignore_the_unused_modality() {
    let data = toy_data(5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let audio_only = toy(Fusion::AudioOnly, WeightingMode::dynamic(2), 4);
    let video_only = toy(Fusion::VideoOnly, WeightingMode::dynamic(2), 4);
    for s in data.samples() {
        let mut other = s.clone();
        other.video = random_tensor(&mut rng, &[4, 1, 12, 12]);
        assert_eq!(audio_only.predict(s).unwrap(), audio_only.predict(&other).unwrap());
        let mut other = s.clone();
        other.audio = random_tensor(&mut rng, &[1, 256]);
        assert_eq!(video_only.predict(s).unwrap(), video_only.predict(&other).unwrap());
    }
    // and the multimodal model does react to both
    let both = toy(Fusion::Concat, WeightingMode::dynamic(2), 4);
    let s = &data.samples()[0];
    let mut other = s.clone();
    other.video = random_tensor(&mut rng, &[4, 1, 12, 12]);
    assert_ne!(both.predict(s).unwrap(), both.predict(&other).unwrap());
}

#[test]
fn missing_modality_is_an_input_error() {
    let data = toy_data(1, 0);
    let s = &data.samples()[0];
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 0);
    let err = model
        .predict(Inputs {
            audio: Some(&s.audio),
            video: None,
        })
        .unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    let audio_only = toy(Fusion::AudioOnly, WeightingMode::dynamic(2), 0);
    assert!(audio_only
        .predict(Inputs {
            audio: Some(&s.audio),
            video: None,
        })
        .is_ok());
    let wrong = Tensor::zeros(&[1, 100]);
    assert!(model
        .predict(Inputs {
            audio: Some(&wrong),
            video: Some(&s.video),
        })
        .is_err());
}

#[test]
fn every_parameter_is_registered_once_and_reached() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 6);
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    let unique: HashSet<&str> = names.iter().copied().collect();
    assert_eq!(unique.len(), names.len());
    for prefix in ["speech.0.conv", "speech.1.conv", "visual.stem", "visual.group3.block0", "lstm.1", "head.gender", LAMBDA] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix} missing from {names:?}");
    }

    let data = toy_data(4, 3);
    let batch: Vec<&Sample> = data.samples().iter().collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape).unwrap();
    let loss = batch_loss(&model, &mut tape, &bound, &batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = tape.backward(loss.joint).unwrap();
    let grads = model.params().collect_grads(&tape, &bound, &g);
    for ((name, _), grad) in model.params().iter().zip(&grads) {
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} receives no gradient");
    }
}

#[test]
fn static_batch_joint_is_the_mean_of_task_losses() {
    let model = toy(Fusion::Concat, WeightingMode::uniform_static(2), 8);
    let data = toy_data(6, 4);
    let batch: Vec<&Sample> = data.samples().iter().collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape).unwrap();
    let loss = batch_loss(&model, &mut tape, &bound, &batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = tape.value(loss.task_losses[0]).item().unwrap();
    let b = tape.value(loss.task_losses[1]).item().unwrap();
    let j = tape.value(loss.joint).item().unwrap();
    assert!((j - (a + b) / 2.0).abs() <= 1e-12);
}

#[test]
fn toy_model_gradients_match_finite_differences() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 21);
    let data = toy_data(2, 21);
    let batch: Vec<&Sample> = data.samples().iter().collect();
    let report = model_gradcheck(&model, &batch, 50, 1e-2, 99, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    assert_eq!(report.entries.len(), 52);
    assert_eq!(report.entries.iter().filter(|e| e.name == LAMBDA).count(), 2);
    assert!(report.worst() < 1e-4, "{:?}", report.failures(1e-4));
}

#[test]
fn mean_readout_is_supported() {
    let mut config = ModelConfig::toy_preset();
    config.readout = Readout::Mean;
    let model = build_model(&config, WeightingMode::dynamic(2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = toy_data(1, 1);
    let out = model.predict(&data.samples()[0]).unwrap();
    assert_eq!((out[0].len(), out[1].len()), (4, 2));
    let last = toy(Fusion::Concat, WeightingMode::dynamic(2), 1);
    assert_ne!(out, last.predict(&data.samples()[0]).unwrap());
}

#[test]
fn toy_forward_backward_is_fast() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 0);
    let data = toy_data(1, 0);
    let batch = [&data.samples()[0]];
    let run = || {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape).unwrap();
        let loss = batch_loss(&model, &mut tape, &bound, &batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.backward(loss.joint).unwrap();
    };
    run();
    let start = Instant::now();
    run();
    let elapsed = start.elapsed();
    assert!(elapsed.as_millis() < 100, "{elapsed:?}");
}

#[test]
fn checkpoint_round_trip_is_bitwise_exact() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 31);
    let bytes = encode_checkpoint(model.params());
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(model.params(), &path).unwrap();
    let mut other = toy(Fusion::Concat, WeightingMode::dynamic(2), 32);
    load_checkpoint(other.params_mut(), &path).unwrap();
    assert_eq!(encode_checkpoint(other.params()), bytes);
    let data = toy_data(1, 0);
    assert_eq!(model.predict(&data.samples()[0]).unwrap(), other.predict(&data.samples()[0]).unwrap());
}

#[test]
fn checkpoint_errors() {
    let model = toy(Fusion::Concat, WeightingMode::dynamic(2), 1);
    let mut bytes = encode_checkpoint(model.params());
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    bytes[0] = b'X';
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    let static_model = toy(Fusion::Concat, WeightingMode::uniform_static(2), 1);
    let entries = decode_checkpoint(&encode_checkpoint(static_model.params())).unwrap();
    let mut target = model.clone();
    assert!(restore(target.params_mut(), entries).is_err());
}
