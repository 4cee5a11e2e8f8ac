//! Finite-difference verification scopes, as run by `mmtl gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{central_difference, finite_diff_check, relative_error, richardson_difference, Tape, Tensor, Var};
use crate::data::{synth_generate, Sample, SynthSpec};
use crate::error::Result;
use crate::joint_loss::{grad_lambda, joint_loss, joint_loss_value, task_weights, task_weights_on_tape, BalancingFactors, WeightingMode};
use crate::layers::{BottleneckBlock, Bound, ConvLayer, Dense, LstmLayer, ParamStore};
use crate::models::{build_model, model_gradcheck, ModelConfig};

/// Largest relative error observed for one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScopeReport {
    pub scope: String,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl ScopeReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !(c.relative_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Tape gradients of linear maps against central differences; tolerance 1e-9.
pub fn core_scope(seed: u64) -> Result<ScopeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = random_tensor(&mut rng, &[5, 7]);
    let v = random_tensor(&mut rng, &[7]);
    let k = random_tensor(&mut rng, &[2, 3, 3, 3]);
    let r = random_tensor(&mut rng, &[2, 4, 4]);
    let eps = 1e-3;
    let mut checks = Vec::new();
    let mut push = |name: &str, err: f64| {
        checks.push(CheckResult {
            name: name.into(),
            relative_error: err,
        })
    };
    push(
        "matvec",
        finite_diff_check(
            |t, x| {
                let w = t.constant(m.clone())?;
                let y = t.matvec(w, x)?;
                t.sum(y)
            },
            &random_tensor(&mut rng, &[7]),
            eps,
        )?,
    );
    push(
        "dot",
        finite_diff_check(
            |t, x| {
                let c = t.constant(v.clone())?;
                t.dot(x, c)
            },
            &random_tensor(&mut rng, &[7]),
            eps,
        )?,
    );
    push(
        "scale_add",
        finite_diff_check(
            |t, x| {
                let a = t.scale(x, -2.5)?;
                let b = t.add(a, x)?;
                t.sum(b)
            },
            &random_tensor(&mut rng, &[4, 3]),
            eps,
        )?,
    );
    push(
        "conv",
        finite_diff_check(
            |t, x| {
                let kv = t.constant(k.clone())?;
                let y = t.conv(x, kv, &[1, 1])?;
                let rv = t.constant(r.clone())?;
                let p = t.mul(y, rv)?;
                t.sum(p)
            },
            &random_tensor(&mut rng, &[3, 6, 6]),
            eps,
        )?,
    );
    Ok(ScopeReport {
        scope: "core".into(),
        tolerance: 1e-9,
        checks,
    })
}

/// Worst relative error per parameter of `store` for the scalar `loss`.
fn parameter_errors(
    store: &mut ParamStore,
    loss: impl Fn(&mut Tape, &Bound) -> Result<Var>,
    eps: f64,
) -> Result<Vec<CheckResult>> {
    let eval = |store: &ParamStore, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let y = loss(&mut tape, &bound)?;
        let value = tape.value(y).item()?;
        let g = if grads {
            let g = tape.backward(y)?;
            store.collect_grads(&tape, &bound, &g)
        } else {
            Vec::new()
        };
        Ok((value, g))
    };
    let (_, grads) = eval(store, true)?;
    let mut out = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let mut worst = 0.0f64;
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let numeric = central_difference(
                |x| {
                    store.get_mut(id).data_mut()[i] = x;
                    Ok(eval(store, false)?.0)
                },
                orig,
                eps,
            )?;
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(grads[id.index()].data()[i], numeric));
        }
        out.push(CheckResult {
            name: store.name(id).to_string(),
            relative_error: worst,
        });
    }
    Ok(out)
}

/// Every parameter of a small dense, convolutional, recurrent and bottleneck
/// layer against central differences; tolerance 1e-5.
pub fn layers_scope(seed: u64) -> Result<ScopeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let eps = 1e-5;

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", 5, 3, &mut rng)?;
    let x = random_tensor(&mut rng, &[5]);
    checks.extend(parameter_errors(
        &mut store,
        |t, b| {
            let xv = t.constant(x.clone())?;
            let y = dense.forward(t, b, xv)?;
            let lp = t.log_softmax(y)?;
            t.nll(lp, 1)
        },
        eps,
    )?);

    let mut store = ParamStore::new();
    let conv = ConvLayer::new(&mut store, "conv", 2, 3, &[3], &[2], 0, true, &mut rng)?;
    let x = random_tensor(&mut rng, &[2, 11]);
    let r = random_tensor(&mut rng, &[3, 5]);
    checks.extend(parameter_errors(
        &mut store,
        |t, b| {
            let xv = t.constant(x.clone())?;
            let y = conv.forward(t, b, xv)?;
            let rv = t.constant(r.clone())?;
            let p = t.mul(y, rv)?;
            t.sum(p)
        },
        eps,
    )?);

    let mut store = ParamStore::new();
    let lstm = LstmLayer::new(&mut store, "lstm", 3, 4, &mut rng)?;
    let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[3])).collect();
    let r = random_tensor(&mut rng, &[4]);
    checks.extend(parameter_errors(
        &mut store,
        |t, b| {
            let seq = xs.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let (h0, c0) = lstm.zero_state(t)?;
            let out = lstm.forward(t, b, &seq, h0, c0)?;
            let rv = t.constant(r.clone())?;
            t.dot(out.h, rv)
        },
        eps,
    )?);

    let mut store = ParamStore::new();
    let block = BottleneckBlock::new(&mut store, "bottleneck", 2, 3, 4, 2, &mut rng)?;
    let x = random_tensor(&mut rng, &[2, 5, 5]);
    let r = random_tensor(&mut rng, &[4, 3, 3]);
    checks.extend(parameter_errors(
        &mut store,
        |t, b| {
            let xv = t.constant(x.clone())?;
            let y = block.forward(t, b, xv)?;
            let rv = t.constant(r.clone())?;
            let p = t.mul(y, rv)?;
            t.sum(p)
        },
        eps,
    )?);

    Ok(ScopeReport {
        scope: "layers".into(),
        tolerance: 1e-5,
        checks,
    })
}

/// Closed-form balancing-factor gradient against Richardson-refined central
/// differences and the tape, over `cases` random factor and loss vectors;
/// tolerance 1e-8.
pub fn lambda_scope(seed: u64, cases: usize) -> Result<ScopeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fd: f64 = 0.0;
    let mut ad: f64 = 0.0;
    for _ in 0..cases {
        let k = rng.random_range(2..=4);
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let losses: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..5.0)).collect();
        let closed = grad_lambda(&BalancingFactors::new(l.clone())?, &losses)?;

        let mut tape = Tape::new();
        let lv = tape.param(Tensor::vector(l.clone()))?;
        let w = task_weights_on_tape(&mut tape, lv)?;
        let vars = losses
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect::<Result<Vec<_>>>()?;
        let j = joint_loss(&mut tape, w, &vars)?;
        let auto = tape.backward(j)?.get_or_zeros(&tape, lv);

        for i in 0..k {
            let numeric = richardson_difference(
                |x| {
                    let mut p = l.clone();
                    p[i] = x;
                    joint_loss_value(&task_weights(&BalancingFactors::new(p)?)?, &losses)
                },
                l[i],
                1e-2,
            )?;
            fd = fd.max(relative_error(closed[i], numeric));
            ad = ad.max(relative_error(closed[i], auto.data()[i]));
        }
    }
    Ok(ScopeReport {
        scope: "lambda".into(),
        tolerance: 1e-8,
        checks: vec![
            CheckResult {
                name: "lambda.finite_difference".into(),
                relative_error: fd,
            },
            CheckResult {
                name: "lambda.autodiff".into(),
                relative_error: ad,
            },
        ],
    })
}

/// Toy multimodal model with dynamic weighting: `picks` sampled weights plus
/// every balancing factor; tolerance 1e-4.
pub fn model_scope(seed: u64, picks: usize) -> Result<ScopeReport> {
    let model = build_model(
        &ModelConfig::toy_preset(),
        WeightingMode::dynamic(2),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let data = synth_generate(&SynthSpec {
        samples: 2,
        seed,
        ..SynthSpec::default()
    })?;
    let batch: Vec<&Sample> = data.samples().iter().collect();
    let report = model_gradcheck(&model, &batch, picks, 1e-2, seed, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(ScopeReport {
        scope: "model".into(),
        tolerance: 1e-4,
        checks: report
            .entries
            .into_iter()
            .map(|e| CheckResult {
                name: format!("{}[{}]", e.name, e.index),
                relative_error: e.relative_error,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes_its_tolerance() {
        for report in [
            core_scope(0).unwrap(),
            layers_scope(0).unwrap(),
            lambda_scope(0, 100).unwrap(),
            model_scope(0, 50).unwrap(),
        ] {
            assert!(report.passed(), "{}: {:?}", report.scope, report.failures());
            assert!(!report.checks.is_empty());
        }
    }

    #[test]
    fn failures_respect_the_tolerance() {
        let report = ScopeReport {
            scope: "x".into(),
            tolerance: 1e-3,
            checks: vec![
                CheckResult {
                    name: "a".into(),
                    relative_error: 1e-4,
                },
                CheckResult {
                    name: "b".into(),
                    relative_error: 1e-2,
                },
            ],
        };
        assert_eq!(report.failures().len(), 1);
        assert_eq!(report.failures()[0].name, "b");
        assert_eq!(report.worst(), 1e-2);
    }
}
