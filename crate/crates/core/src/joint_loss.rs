//! Dynamic joint-loss weighting.
//!
//! Each task `i` owns an unconstrained balancing factor `λ_i`. The task
//! weights are the softmax of the factor vector,
//!
//! ```text
//! w_i = exp(λ_i) / Σ_j exp(λ_j)
//! ```
//!
//! and the training objective is the convex combination
//! `L_joint = Σ_i w_i · L_i` of the per-task negative log-likelihoods. The
//! factors are trained by gradient descent together with the network. Since
//! the task losses do not depend on `λ`, the gradient has the closed form
//!
//! ```text
//! ∂L_joint/∂λ_i = w_i · (L_i − L_joint)
//! ```
//!
//! which pushes weight toward tasks whose loss is below the current joint
//! value. With two tasks this is the emotion/gender pair; everything here is
//! written for any `K ≥ 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, Tape, Var};
use crate::error::{Error, Result};

/// Tolerance on `Σ w = 1` for user-supplied weights.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// Learnable balancing factors, one per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BalancingFactors(Vec<f64>);

impl BalancingFactors {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::argument("balancing_factors", "need at least one task"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "balancing_factors" });
        }
        Ok(Self(values))
    }

    /// All-zero factors, i.e. uniform task weights.
    pub fn zeros(tasks: usize) -> Self {
        assert!(tasks >= 1, "need at least one task");
        Self(vec![0.0; tasks])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for BalancingFactors {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BalancingFactors> for Vec<f64> {
    fn from(b: BalancingFactors) -> Self {
        b.0
    }
}

/// A point on the probability simplex: one non-negative weight per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TaskWeights(Vec<f64>);

impl TaskWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::argument("task_weights", "need at least one task"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "task_weights" });
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::argument(
                "task_weights",
                format!("weights {values:?} must lie in [0, 1]"),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::argument(
                "task_weights",
                format!("weights {values:?} sum to {total}, not 1"),
            ));
        }
        Ok(Self(values))
    }

    pub fn uniform(tasks: usize) -> Self {
        assert!(tasks >= 1, "need at least one task");
        Self(vec![1.0 / tasks as f64; tasks])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for TaskWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TaskWeights> for Vec<f64> {
    fn from(w: TaskWeights) -> Self {
        w.0
    }
}

/// How per-task losses are combined during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeightingMode {
    /// Fixed weights chosen before training.
    Static { weights: TaskWeights },
    /// Softmax of learnable factors. `lambda_lr` overrides the optimizer
    /// learning rate for the factors only.
    Dynamic {
        initial: BalancingFactors,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda_lr: Option<f64>,
    },
}

impl WeightingMode {
    /// Dynamic weighting with all factors starting at zero.
    pub fn dynamic(tasks: usize) -> Self {
        WeightingMode::Dynamic {
            initial: BalancingFactors::zeros(tasks),
            lambda_lr: None,
        }
    }

    /// Static uniform weighting (0.5 / 0.5 for two tasks).
    pub fn uniform_static(tasks: usize) -> Self {
        WeightingMode::Static {
            weights: TaskWeights::uniform(tasks),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, WeightingMode::Dynamic { .. })
    }

    pub fn tasks(&self) -> usize {
        match self {
            WeightingMode::Static { weights } => weights.len(),
            WeightingMode::Dynamic { initial, .. } => initial.len(),
        }
    }
}

/// Per-task losses, their weights and the combined value, all in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLossRecord {
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub joint: f64,
}

impl JointLossRecord {
    pub fn new(weights: &TaskWeights, losses: &[f64]) -> Result<Self> {
        Ok(Self {
            joint: joint_loss_value(weights, losses)?,
            losses: losses.to_vec(),
            weights: weights.as_slice().to_vec(),
        })
    }
}

/// Softmax of the balancing factors.
pub fn task_weights(lambda: &BalancingFactors) -> Result<TaskWeights> {
    if lambda.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "task_weights" });
    }
    Ok(TaskWeights(softmax_values(&lambda.0)))
}

fn check_losses(op: &'static str, tasks: usize, losses: &[f64]) -> Result<()> {
    if losses.len() != tasks {
        return Err(Error::argument(
            op,
            format!("{} losses for {} tasks", losses.len(), tasks),
        ));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// `Σ w_i · L_i` on plain values.
pub fn joint_loss_value(weights: &TaskWeights, losses: &[f64]) -> Result<f64> {
    check_losses("joint_loss", weights.len(), losses)?;
    Ok(weights.0.iter().zip(losses).map(|(w, l)| w * l).sum())
}

/// `Σ w_i · L_i` on the tape. `weights` is a rank-1 node (constant for static
/// weighting, the softmax of the factor leaf for dynamic weighting) and each
/// loss a one-element node.
pub fn joint_loss(tape: &mut Tape, weights: Var, losses: &[Var]) -> Result<Var> {
    let k = tape.value(weights).len();
    if losses.len() != k {
        return Err(Error::argument(
            "joint_loss",
            format!("{} losses for {} weights", losses.len(), k),
        ));
    }
    let stacked = tape.stack(losses)?;
    tape.dot(weights, stacked)
}

/// Task weights on the tape as the softmax of a factor node.
pub fn task_weights_on_tape(tape: &mut Tape, lambda: Var) -> Result<Var> {
    tape.softmax(lambda)
}

/// Closed-form gradient of the joint loss with respect to the factors:
/// `w_i · (L_i − L_joint)`. Its components always sum to zero.
pub fn grad_lambda(lambda: &BalancingFactors, losses: &[f64]) -> Result<Vec<f64>> {
    check_losses("grad_lambda", lambda.len(), losses)?;
    let w = task_weights(lambda)?;
    let joint = joint_loss_value(&w, losses)?;
    Ok(w.0.iter().zip(losses).map(|(wi, li)| wi * (li - joint)).collect())
}

/// One plain gradient-descent step on the factors: `λ' = λ − step · grad`.
pub fn update_lambda(lambda: &BalancingFactors, grad: &[f64], step_size: f64) -> BalancingFactors {
    debug_assert_eq!(lambda.len(), grad.len());
    debug_assert!(step_size >= 0.0);
    BalancingFactors(
        lambda
            .0
            .iter()
            .zip(grad)
            .map(|(l, g)| l - step_size * g)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, relative_error, richardson_difference, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lam(v: &[f64]) -> BalancingFactors {
        BalancingFactors::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_factors_give_even_split() {
        assert_eq!(task_weights(&lam(&[0.0, 0.0])).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn inverse_softmax_of_reported_weights() {
        let gap = (0.6377f64 / 0.3623).ln();
        let w = task_weights(&lam(&[0.0, gap])).unwrap();
        assert!((w.as_slice()[0] - 0.3623).abs() < 5e-5);
        assert!((w.as_slice()[1] - 0.6377).abs() < 5e-5);
        // the rounded gap quoted to four places also lands on the same weights
        let w = task_weights(&lam(&[0.0, 0.5653])).unwrap();
        assert_eq!(format!("{:.4}", w.as_slice()[0]), "0.3623");
        assert_eq!(format!("{:.4}", w.as_slice()[1]), "0.6377");
    }

    #[test]
    fn equal_factors_are_uniform_for_three_tasks() {
        for c in [-7.0, 0.0, 2.5, 300.0] {
            let w = task_weights(&lam(&[c, c, c])).unwrap();
            for v in w.as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_factors_are_rejected() {
        assert!(BalancingFactors::new(vec![0.0, f64::NAN]).is_err());
        assert!(BalancingFactors::new(vec![]).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        let half = TaskWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(joint_loss_value(&half, &[2.0, 4.0]).unwrap(), 3.0);
        let w = TaskWeights::new(vec![0.3623, 0.6377]).unwrap();
        assert!((joint_loss_value(&w, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((joint_loss_value(&w, &[2.0, 1.0]).unwrap() - 1.3623).abs() < 1e-15);
        assert!(joint_loss_value(&w, &[1.0]).is_err());
    }

    #[test]
    fn joint_loss_on_tape_matches_values() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(vec![0.3623, 0.6377])).unwrap();
        let a = tape.constant(Tensor::scalar(2.0)).unwrap();
        let b = tape.constant(Tensor::scalar(1.0)).unwrap();
        let j = joint_loss(&mut tape, w, &[a, b]).unwrap();
        assert!((tape.value(j).item().unwrap() - 1.3623).abs() < 1e-15);
        assert!(joint_loss(&mut tape, w, &[a]).is_err());
    }

    #[test]
    fn task_weights_reject_off_simplex() {
        assert!(TaskWeights::new(vec![0.5, 0.6]).is_err());
        assert!(TaskWeights::new(vec![1.5, -0.5]).is_err());
        assert!(TaskWeights::new(vec![1.0]).is_ok());
    }

    #[test]
    fn grad_lambda_examples() {
        assert_eq!(grad_lambda(&lam(&[0.0, 0.0]), &[2.0, 4.0]).unwrap(), vec![-0.5, 0.5]);
        assert_eq!(grad_lambda(&lam(&[0.3, -1.0]), &[1.7, 1.7]).unwrap(), vec![0.0, 0.0]);
        assert!(grad_lambda(&lam(&[0.0, 0.0]), &[f64::INFINITY, 1.0]).is_err());
    }

    #[test]
    fn grad_lambda_agrees_with_finite_differences_at_origin() {
        // L_joint(λ) = w(λ)·(2, 4); oracle independent of the closed form
        let f = |i: usize, x: f64| {
            let mut l = vec![0.0, 0.0];
            l[i] = x;
            let w = task_weights(&lam(&l)).unwrap();
            joint_loss_value(&w, &[2.0, 4.0])
        };
        let g0 = central_difference(|x| f(0, x), 0.0, 1e-5).unwrap();
        let g1 = central_difference(|x| f(1, x), 0.0, 1e-5).unwrap();
        assert!((g0 + 0.5).abs() < 1e-9 && (g1 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn update_examples() {
        let l = lam(&[0.0, 0.0]);
        assert_eq!(update_lambda(&l, &[0.0, 0.0], 0.1), l);
        let next = update_lambda(&l, &[-0.5, 0.5], 0.1);
        assert!((next.as_slice()[0] - 0.05).abs() < 1e-15);
        assert!((next.as_slice()[1] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn descent_favours_the_easier_task() {
        let losses = [2.0, 1.0];
        let mut l = BalancingFactors::zeros(2);
        let mut prev = task_weights(&l).unwrap().as_slice()[1];
        for _ in 0..100 {
            let g = grad_lambda(&l, &losses).unwrap();
            l = update_lambda(&l, &g, 0.1);
            let w2 = task_weights(&l).unwrap().as_slice()[1];
            assert!(w2 > prev);
            prev = w2;
        }
        assert!(prev > 0.6);
    }

    #[test]
    fn single_task_is_degenerate() {
        let w = task_weights(&lam(&[3.7])).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        assert_eq!(joint_loss_value(&w, &[0.81]).unwrap(), 0.81);
        assert_eq!(grad_lambda(&lam(&[3.7]), &[0.81]).unwrap(), vec![0.0]);
    }

    #[test]
    fn static_half_weights_equal_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let half = TaskWeights::uniform(2);
        for _ in 0..1000 {
            let (a, b) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
            let j = joint_loss_value(&half, &[a, b]).unwrap();
            assert!((j - (a + b) / 2.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn weighting_mode_serde_round_trip() {
        let modes = [
            WeightingMode::dynamic(2),
            WeightingMode::uniform_static(2),
            WeightingMode::Dynamic {
                initial: lam(&[0.0, 0.0]),
                lambda_lr: Some(0.01),
            },
        ];
        for m in modes {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<WeightingMode>(&s).unwrap(), m);
        }
        let bad = r#"{"kind":"static","weights":[0.9,0.3]}"#;
        assert!(serde_json::from_str::<WeightingMode>(bad).is_err());
    }

    proptest! {
        #[test]
        fn weights_stay_on_simplex(l in proptest::collection::vec(-20.0f64..20.0, 1..6)) {
            let w = task_weights(&lam(&l)).unwrap();
            prop_assert!(w.as_slice().iter().all(|&v| v > 0.0));
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weights_are_shift_invariant(l in proptest::collection::vec(-20.0f64..20.0, 1..6), c in -50.0f64..50.0) {
            let a = task_weights(&lam(&l)).unwrap();
            let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
            let b = task_weights(&lam(&shifted)).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn gradient_components_sum_to_zero(
            l in proptest::collection::vec(-5.0f64..5.0, 2..6),
            seed in 0u64..10_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let losses: Vec<f64> = l.iter().map(|_| rng.random_range(0.0..5.0)).collect();
            let g = grad_lambda(&lam(&l), &losses).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_finite_differences_and_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let l: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let losses: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..4.0)).collect();
            let closed = grad_lambda(&lam(&l), &losses).unwrap();

            let mut tape = Tape::new();
            let lv = tape.param(Tensor::vector(l.clone())).unwrap();
            let w = task_weights_on_tape(&mut tape, lv).unwrap();
            let lvars: Vec<Var> = losses
                .iter()
                .map(|&x| tape.constant(Tensor::scalar(x)).unwrap())
                .collect();
            let j = joint_loss(&mut tape, w, &lvars).unwrap();
            let auto = tape.backward(j).unwrap().get(lv).unwrap().clone();

            for i in 0..2 {
                let numeric = richardson_difference(
                    |x| {
                        let mut p = l.clone();
                        p[i] = x;
                        joint_loss_value(&task_weights(&lam(&p))?, &losses)
                    },
                    l[i],
                    1e-2,
                )
                .unwrap();
                assert!(relative_error(closed[i], numeric) < 1e-8, "{l:?} {losses:?} {} {numeric}", closed[i]);
                assert!(relative_error(closed[i], auto.data()[i]) < 1e-8);
            }
        }
    }

    #[test]
    fn network_gradient_decomposes_over_tasks() {
        // shared parameter θ feeding two task losses
        let theta = Tensor::vector(vec![0.4, -0.9, 1.3]);
        let weights = [0.3, 0.7];
        let losses = |tape: &mut Tape, t: Var| -> Vec<Var> {
            let sq = tape.mul(t, t).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let th = tape.tanh(t).unwrap();
            let l2 = tape.sum(th).unwrap();
            vec![l1, l2]
        };
        let mut tape = Tape::new();
        let t = tape.param(theta.clone()).unwrap();
        let ls = losses(&mut tape, t);
        let w = tape.constant(Tensor::vector(weights.to_vec())).unwrap();
        let j = joint_loss(&mut tape, w, &ls).unwrap();
        let joint_grad = tape.backward(j).unwrap().get(t).unwrap().clone();

        let mut combined = vec![0.0; 3];
        for (k, wk) in weights.iter().enumerate() {
            let mut tape = Tape::new();
            let t = tape.param(theta.clone()).unwrap();
            let ls = losses(&mut tape, t);
            let g = tape.backward(ls[k]).unwrap().get(t).unwrap().clone();
            for (c, gv) in combined.iter_mut().zip(g.data()) {
                *c += wk * gv;
            }
        }
        for (a, b) in joint_grad.data().iter().zip(&combined) {
            assert!(relative_error(*a, *b) < 1e-10);
        }
    }
}
