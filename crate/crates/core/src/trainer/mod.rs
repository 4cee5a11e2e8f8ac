//! Optimization loop, dataset evaluation and the four-configuration
//! experiment suite (audio-only, video-only, static and dynamic multimodal).

mod optim;
mod report;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind, OptimizerSpec};
pub use report::{aggregate, curve_csv, ConfigRun, ExperimentReport, ReportRow, SuiteSummary, SummaryRow, CSV_HEADER};

use crate::autodiff::Tape;
use crate::data::{split_622, Dataset, Sample};
use crate::error::{Error, Result};
use crate::joint_loss::{joint_loss_value, JointLossRecord, TaskWeights, WeightingMode};
use crate::layers::Mode;
use crate::models::{batch_loss, build_model, Fusion, ModelConfig, MultimodalModel};

/// Which input streams a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Multimodal,
}

impl Modality {
    pub fn fusion(self) -> Fusion {
        match self {
            Modality::Audio => Fusion::AudioOnly,
            Modality::Video => Fusion::VideoOnly,
            Modality::Multimodal => Fusion::Concat,
        }
    }
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    8
}

/// Everything that defines one training run apart from the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub modality: Modality,
    pub weighting: WeightingMode,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Adam defaults, 30 epochs, batch size 8, seed 0.
    pub fn new(modality: Modality, weighting: WeightingMode) -> Self {
        Self {
            modality,
            weighting,
            optimizer: OptimizerSpec::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::argument("train_config", "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("train_config", "batch size must be at least 1"));
        }
        if let WeightingMode::Dynamic {
            lambda_lr: Some(lr), ..
        } = self.weighting
        {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::argument("train_config", format!("lambda learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    /// Builds the model for this run from `base`, switched to this run's
    /// modality, with weights drawn from the run seed.
    pub fn build(&self, base: &ModelConfig) -> Result<MultimodalModel> {
        self.validate()?;
        let config = base.clone().with_fusion(self.modality.fusion());
        build_model(&config, self.weighting.clone(), &mut init_rng(self.seed))
    }

    /// Optimizer state for `model`, including the λ learning-rate override.
    pub fn optimizer_for(&self, model: &MultimodalModel) -> Result<Optimizer> {
        let overrides = match (&self.weighting, model.lambda_id()) {
            (
                WeightingMode::Dynamic {
                    lambda_lr: Some(lr), ..
                },
                Some(id),
            ) => vec![(id, *lr)],
            _ => Vec::new(),
        };
        Optimizer::new(self.optimizer, model.params(), overrides)
    }
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One gradient step on `batch`: forward in train mode, batch-mean task
/// NLLs, weighted combination, backward and an update of every parameter
/// (the balancing factors included). The returned record carries the weights
/// the step was computed with.
pub fn optimize_step(
    model: &mut MultimodalModel,
    optimizer: &mut Optimizer,
    batch: &[&Sample],
    rng: &mut ChaCha8Rng,
) -> Result<JointLossRecord> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let loss = batch_loss(model, &mut tape, &bound, batch, Mode::Train, rng)?;
    let losses = loss
        .task_losses
        .iter()
        .map(|&v| tape.value(v).item())
        .collect::<Result<Vec<_>>>()?;
    let weights = TaskWeights::new(tape.value(loss.weights).data().to_vec())?;
    let joint = tape.value(loss.joint).item()?;
    if !joint.is_finite() {
        return Err(Error::NonFinite { op: "joint_loss" });
    }
    let grads = tape.backward(loss.joint)?;
    let grads = model.params().collect_grads(&tape, &bound, &grads);
    optimizer.step(model.params_mut(), &grads)?;
    Ok(JointLossRecord {
        losses,
        weights: weights.as_slice().to_vec(),
        joint,
    })
}

/// Dataset-level NLLs in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub task_means: Vec<f64>,
    pub task_sums: Vec<f64>,
    pub joint_mean: f64,
    pub joint_sum: f64,
}

/// Eval-mode NLLs over `dataset` combined with `weights`. Per-sample values
/// are computed independently and summed in dataset order, so the result
/// does not depend on thread scheduling.
pub fn evaluate(model: &MultimodalModel, dataset: &Dataset, weights: &TaskWeights) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::argument("evaluate", "empty dataset"));
    }
    let k = model.head_count();
    if weights.len() != k {
        return Err(Error::argument("evaluate", format!("{} weights for {k} tasks", weights.len())));
    }
    let per_sample: Vec<Vec<f64>> = dataset
        .samples()
        .par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let logp = model.predict(s)?;
            Ok(logp.iter().enumerate().map(|(t, lp)| -lp[s.label(t)]).collect())
        })
        .collect::<Result<_>>()?;
    let mut task_sums = vec![0.0; k];
    for nll in &per_sample {
        for (acc, v) in task_sums.iter_mut().zip(nll) {
            *acc += v;
        }
    }
    let n = dataset.len() as f64;
    let task_means: Vec<f64> = task_sums.iter().map(|s| s / n).collect();
    let joint_mean = joint_loss_value(weights, &task_means)?;
    let joint_sum = joint_loss_value(weights, &task_sums)?;
    if !joint_sum.is_finite() {
        return Err(Error::NonFinite { op: "evaluate" });
    }
    Ok(Evaluation {
        samples: dataset.len(),
        task_means,
        task_sums,
        joint_mean,
        joint_sum,
    })
}

/// Train and validation NLLs after one epoch, with the weights in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_joint_mean: f64,
    pub train_joint_sum: f64,
    pub val_joint_mean: f64,
    pub val_joint_sum: f64,
    /// Training-set mean NLL per task.
    pub train_task_nll: Vec<f64>,
    /// Validation-set mean NLL per task.
    pub val_task_nll: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EpochRecord {
    fn measure(model: &MultimodalModel, epoch: usize, train: &Dataset, val: &Dataset) -> Result<Self> {
        let weights = model.task_weights()?;
        let tr = evaluate(model, train, &weights)?;
        let va = evaluate(model, val, &weights)?;
        Ok(Self {
            epoch,
            train_joint_mean: tr.joint_mean,
            train_joint_sum: tr.joint_sum,
            val_joint_mean: va.joint_mean,
            val_joint_sum: va.joint_sum,
            train_task_nll: tr.task_means,
            val_task_nll: va.task_means,
            weights: weights.as_slice().to_vec(),
        })
    }

    /// Validation minus training joint mean NLL.
    pub fn generalization_gap(&self) -> f64 {
        self.val_joint_mean - self.train_joint_mean
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultimodalModel,
    /// State before the first update (epoch 0).
    pub initial: EpochRecord,
    /// One record per trained epoch, numbered from 1.
    pub records: Vec<EpochRecord>,
    /// Index into `records` of the lowest validation joint mean NLL.
    pub best: usize,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &EpochRecord {
        self.records.last().expect("at least one epoch")
    }

    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best]
    }

    /// The epoch-0 record followed by every trained epoch.
    pub fn curve(&self) -> Vec<EpochRecord> {
        std::iter::once(self.initial.clone()).chain(self.records.iter().cloned()).collect()
    }
}

/// Runs `config.epochs` epochs of shuffled mini-batch updates, measuring
/// train and validation NLL after each. Shuffling and dropout draw from a
/// stream of the run seed distinct from the one used for initialization.
pub fn train(mut model: MultimodalModel, train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::argument("train", "training and validation sets must be non-empty"));
    }
    if model.weighting().is_dynamic() != config.weighting.is_dynamic() {
        return Err(Error::argument("train", "model weighting does not match the configuration"));
    }
    let mut optimizer = config.optimizer_for(&model)?;
    let mut rng = train_rng(config.seed);
    let wrap = |epoch: usize, batch: usize| {
        move |e: Error| Error::Training {
            epoch,
            batch,
            source: Box::new(e),
        }
    };

    let initial = EpochRecord::measure(&model, 0, train_set, val_set).map_err(wrap(0, 0))?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples()[i]).collect();
            optimize_step(&mut model, &mut optimizer, &batch, &mut rng).map_err(wrap(epoch, b))?;
            batches = b + 1;
        }
        records.push(EpochRecord::measure(&model, epoch, train_set, val_set).map_err(wrap(epoch, batches))?);
    }
    let best = records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_joint_mean.total_cmp(&b.1.val_joint_mean))
        .map(|(i, _)| i)
        .expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        initial,
        records,
        best,
    })
}

/// Names of the suite configurations, in report order.
pub const SUITE: [&str; 4] = ["UM-dynamic-A", "UM-dynamic-V", "MM-static", "MM-dynamic"];

/// The four suite configurations derived from `template` (whose optimizer,
/// epochs, batch size, seed and λ learning rate are shared).
pub fn suite_configs(template: &TrainConfig, tasks: usize) -> Vec<(&'static str, TrainConfig)> {
    let lambda_lr = match template.weighting {
        WeightingMode::Dynamic { lambda_lr, .. } => lambda_lr,
        WeightingMode::Static { .. } => None,
    };
    let dynamic = match WeightingMode::dynamic(tasks) {
        WeightingMode::Dynamic { initial, .. } => WeightingMode::Dynamic { initial, lambda_lr },
        s => s,
    };
    let with = |modality, weighting| TrainConfig {
        modality,
        weighting,
        ..template.clone()
    };
    vec![
        (SUITE[0], with(Modality::Audio, dynamic.clone())),
        (SUITE[1], with(Modality::Video, dynamic.clone())),
        (SUITE[2], with(Modality::Multimodal, WeightingMode::uniform_static(tasks))),
        (SUITE[3], with(Modality::Multimodal, dynamic)),
    ]
}

/// Trains the four suite configurations on the same `split_622(data_seed)`
/// partition of `dataset`, each seeded with `seed`. Configurations run in
/// parallel and are reported in fixed order.
pub fn run_suite(dataset: &Dataset, base: &ModelConfig, template: &TrainConfig, seed: u64, data_seed: u64) -> Result<ExperimentReport> {
    let (train_set, val_set, _) = split_622(dataset, data_seed)?;
    let template = TrainConfig {
        seed,
        ..template.clone()
    };
    let runs = suite_configs(&template, base.heads.len())
        .into_par_iter()
        .map(|(name, config)| -> Result<ConfigRun> {
            let model = config.build(base)?;
            let outcome = train(model, &train_set, &val_set, &config).map_err(|e| Error::Suite {
                config: name.to_string(),
                source: Box::new(e),
            })?;
            Ok(ConfigRun::new(name, &config, &outcome))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::new(seed, data_seed, runs))
}

#[cfg(test)]
mod tests;
