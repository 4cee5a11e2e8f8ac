use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{synth_generate, SynthSpec};
use crate::joint_loss::{grad_lambda, BalancingFactors, SIMPLEX_TOLERANCE};
use crate::models::LAMBDA;

fn data(n: usize, seed: u64) -> Dataset {
    synth_generate(&SynthSpec {
        samples: n,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn config(modality: Modality, weighting: WeightingMode, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::new(modality, weighting)
    }
}

fn toy() -> ModelConfig {
    ModelConfig::toy_preset()
}

fn bits(model: &MultimodalModel) -> Vec<u64> {
    model.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 1, 3);
    let mut model = cfg.build(&toy()).unwrap();
    let before = bits(&model);
    let mut opt = Optimizer::new(OptimizerSpec::sgd(0.0), model.params(), vec![]).unwrap();
    let d = data(4, 1);
    let batch: Vec<&Sample> = d.samples().iter().collect();
    let first = optimize_step(&mut model, &mut opt, &batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let second = optimize_step(&mut model, &mut opt, &batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(bits(&model), before);
    assert_eq!(first, second);
}

#[test]
fn static_step_records_the_mean_of_task_losses() {
    let cfg = config(Modality::Multimodal, WeightingMode::uniform_static(2), 1, 4);
    let mut model = cfg.build(&toy()).unwrap();
    let mut opt = cfg.optimizer_for(&model).unwrap();
    let d = data(16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in d.samples().chunks(4) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let rec = optimize_step(&mut model, &mut opt, &batch, &mut rng).unwrap();
        assert_eq!(rec.weights, vec![0.5, 0.5]);
        assert!((rec.joint - (rec.losses[0] + rec.losses[1]) / 2.0).abs() <= 1e-12);
    }
}

#[test]
fn first_dynamic_step_favours_the_smaller_loss() {
    let d = data(8, 3);
    let batch: Vec<&Sample> = d.samples().iter().collect();
    for seed in 0..5 {
        let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 1, seed);
        let mut model = cfg.build(&toy()).unwrap();
        let lr = 0.1;
        let mut opt = Optimizer::new(OptimizerSpec::sgd(lr), model.params(), vec![]).unwrap();
        let rec = optimize_step(&mut model, &mut opt, &batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(rec.weights, vec![0.5, 0.5]);
        assert_ne!(rec.losses[0], rec.losses[1]);

        let expected = grad_lambda(&BalancingFactors::zeros(2), &rec.losses).unwrap();
        let lambda = model.params().get(model.params().find(LAMBDA).unwrap()).data().to_vec();
        for (l, g) in lambda.iter().zip(&expected) {
            assert!((l + lr * g).abs() <= 1e-12 * (1.0 + g.abs()), "{l} vs {}", -lr * g);
        }
        let w = model.task_weights().unwrap();
        let smaller = if rec.losses[0] < rec.losses[1] { 0 } else { 1 };
        assert!(w.as_slice()[smaller] > 0.5);
    }
}

#[test]
fn untrained_model_predicts_near_uniform() {
    let d = data(200, 4);
    for seed in 0..10 {
        let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 1, seed);
        let model = cfg.build(&toy()).unwrap();
        let eval = evaluate(&model, &d, &model.task_weights().unwrap()).unwrap();
        assert!((eval.task_means[0] - 4f64.ln()).abs() < 0.15, "{:?}", eval.task_means);
        assert!((eval.task_means[1] - 2f64.ln()).abs() < 0.15, "{:?}", eval.task_means);
    }
}

#[test]
fn evaluation_is_deterministic_and_consistent() {
    let d = data(30, 5);
    let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 1, 5);
    let model = cfg.build(&toy()).unwrap();
    let before = bits(&model);
    let w = TaskWeights::new(vec![0.3, 0.7]).unwrap();
    let a = evaluate(&model, &d, &w).unwrap();
    let b = evaluate(&model, &d, &w).unwrap();
    assert_eq!(a, b);
    assert_eq!(bits(&model), before);
    assert!((a.joint_sum - a.joint_mean * 30.0).abs() <= 1e-9);
    for (s, m) in a.task_sums.iter().zip(&a.task_means) {
        assert!((s - m * 30.0).abs() <= 1e-9);
    }
    assert!((a.joint_mean - (0.3 * a.task_means[0] + 0.7 * a.task_means[1])).abs() <= 1e-12);

    let empty = Dataset::new(d.dims(), vec![]).unwrap();
    assert!(matches!(evaluate(&model, &empty, &w), Err(Error::Argument { .. })));
}

#[test]
fn epoch_count_contract() {
    let d = data(20, 6);
    let (tr, va, _) = split_622(&d, 0).unwrap();
    let cfg = config(Modality::Audio, WeightingMode::dynamic(2), 0, 1);
    assert!(cfg.validate().is_err());
    assert!(cfg.build(&toy()).is_err());

    let cfg = config(Modality::Audio, WeightingMode::dynamic(2), 1, 1);
    let out = train(cfg.build(&toy()).unwrap(), &tr, &va, &cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].epoch, 1);
    assert_eq!(out.initial.epoch, 0);
    assert_eq!(out.curve().len(), 2);
}

#[test]
fn config_validation() {
    let mut cfg = config(Modality::Video, WeightingMode::dynamic(2), 1, 0);
    cfg.batch_size = 0;
    assert!(cfg.validate().is_err());
    cfg.batch_size = 8;
    cfg.optimizer.learning_rate = 0.0;
    assert!(cfg.validate().is_err());
    cfg.optimizer.learning_rate = 1e-3;
    cfg.weighting = WeightingMode::Dynamic {
        initial: BalancingFactors::zeros(2),
        lambda_lr: Some(-1.0),
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn config_serde_round_trip_and_unknown_keys() {
    let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 7, 9);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
    let bad = json.replacen("\"epochs\"", "\"epoch_count\"", 1);
    let err = serde_json::from_str::<TrainConfig>(&bad).unwrap_err().to_string();
    assert!(err.contains("epoch_count"), "{err}");
}

#[test]
fn training_replays_bitwise() {
    let d = data(30, 7);
    let (tr, va, _) = split_622(&d, 1).unwrap();
    let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 3, 11);
    let a = train(cfg.build(&toy()).unwrap(), &tr, &va, &cfg).unwrap();
    let b = train(cfg.build(&toy()).unwrap(), &tr, &va, &cfg).unwrap();
    assert_eq!(curve_csv(&a.curve()).unwrap(), curve_csv(&b.curve()).unwrap());
    assert_eq!(a.curve(), b.curve());
    assert_eq!(bits(&a.model), bits(&b.model));
    let other = TrainConfig { seed: 12, ..cfg.clone() };
    let c = train(other.build(&toy()).unwrap(), &tr, &va, &other).unwrap();
    assert_ne!(a.curve(), c.curve());
}

#[test]
fn dynamic_training_learns_and_stays_on_the_simplex() {
    let d = data(100, 8);
    let (tr, va, _) = split_622(&d, 2).unwrap();
    for seed in 1..=5 {
        let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 30, seed);
        let out = train(cfg.build(&toy()).unwrap(), &tr, &va, &cfg).unwrap();
        assert_eq!(out.initial.weights, vec![0.5, 0.5]);
        let first = &out.records[0];
        let last = out.final_record();
        assert!(last.train_joint_mean < first.train_joint_mean, "seed {seed}");
        for r in out.curve() {
            assert!(r.weights.iter().all(|&w| w > 0.0));
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
            let w = TaskWeights::new(r.weights.clone()).unwrap();
            assert!((joint_loss_value(&w, &r.val_task_nll).unwrap() - r.val_joint_mean).abs() <= 1e-10);
            assert!((joint_loss_value(&w, &r.train_task_nll).unwrap() - r.train_joint_mean).abs() <= 1e-10);
        }
        let best = out.best_record();
        assert!(out.records.iter().all(|r| r.val_joint_mean >= best.val_joint_mean));
    }
}

#[test]
fn divergence_aborts_with_context() {
    let d = data(20, 9);
    let (tr, va, _) = split_622(&d, 0).unwrap();
    let mut cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 2, 1);
    cfg.optimizer = OptimizerSpec::sgd(1e300);
    let err = train(cfg.build(&toy()).unwrap(), &tr, &va, &cfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(matches!(err, Error::Training { epoch: 1, .. }), "{err}");
}

#[test]
fn lambda_learning_rate_override_applies_to_lambda_only() {
    let d = data(8, 10);
    let batch: Vec<&Sample> = d.samples().iter().collect();
    let mut cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 1, 2);
    cfg.optimizer = OptimizerSpec::sgd(1e-12);
    cfg.weighting = WeightingMode::Dynamic {
        initial: BalancingFactors::zeros(2),
        lambda_lr: Some(1.0),
    };
    let mut model = cfg.build(&toy()).unwrap();
    let mut opt = cfg.optimizer_for(&model).unwrap();
    let rec = optimize_step(&mut model, &mut opt, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = grad_lambda(&BalancingFactors::zeros(2), &rec.losses).unwrap();
    let lambda = model.params().get(model.lambda_id().unwrap()).data().to_vec();
    assert!((lambda[0] + g[0]).abs() < 1e-12 && (lambda[1] + g[1]).abs() < 1e-12);
}

#[test]
fn suite_report_shape() {
    let d = data(40, 11);
    let template = config(Modality::Multimodal, WeightingMode::dynamic(2), 2, 0);
    let report = run_suite(&d, &toy(), &template, 3, 4).unwrap();
    let flags: Vec<(&str, bool, bool, bool)> = report.rows().map(|r| (r.name.as_str(), r.audio, r.video, r.dynamic)).collect();
    assert_eq!(
        flags,
        vec![
            ("UM-dynamic-A", true, false, true),
            ("UM-dynamic-V", false, true, true),
            ("MM-static", true, true, false),
            ("MM-dynamic", true, true, true),
        ]
    );
    assert_eq!((report.seed, report.data_seed), (3, 4));
    let fixed = &report.runs[2];
    assert_eq!(fixed.curve.len(), 3);
    assert!(fixed.curve.iter().all(|r| r.weights == vec![0.5, 0.5]));
    assert_eq!(report.runs[3].curve[0].weights, vec![0.5, 0.5]);
    for row in report.rows() {
        assert!((row.final_weights.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
    }

    let again = run_suite(&d, &toy(), &template, 3, 4).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());

    let summary = aggregate(&[report.clone(), again]).unwrap();
    assert_eq!(summary.rows.len(), 4);
    assert_eq!(summary.row("MM-static").unwrap().weights, vec![0.5, 0.5]);
    assert_eq!(summary.row("MM-dynamic").unwrap().val_joint_mean, report.row("MM-dynamic").unwrap().final_val_joint_mean);
    let table = summary.table();
    for col in ["Model", "Modality", "Task Weights", "Validation NLL"] {
        assert!(table.lines().next().unwrap().contains(col));
    }
    assert!(aggregate(&[]).is_err());
}

#[test]
fn csv_layout() {
    let d = data(20, 12);
    let (tr, va, _) = split_622(&d, 0).unwrap();
    let cfg = config(Modality::Multimodal, WeightingMode::dynamic(2), 2, 1);
    let out = train(cfg.build(&toy()).unwrap(), &tr, &va, &cfg).unwrap();
    let csv = curve_csv(&out.curve()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!((first[5], first[6]), ("0.5", "0.5"));
    for (line, rec) in lines[1..].iter().zip(out.curve()) {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields[3].to_bits(), rec.val_joint_mean.to_bits());
        assert_eq!(fields[8].to_bits(), rec.val_task_nll[1].to_bits());
    }
}
