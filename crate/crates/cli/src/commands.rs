use std::path::Path;
use std::time::Instant;

use serde_json::json;

use mmtl_core::data::{load_dataset, encode_dataset, split_622, synth_generate, Dataset, SynthSpec, EMOTIONS, GENDERS};
use mmtl_core::joint_loss::WeightingMode;
use mmtl_core::models::{encode_checkpoint, ModelConfig};
use mmtl_core::trainer::{self, aggregate, curve_csv, Modality, TrainConfig};
use mmtl_core::verify::{self, ScopeReport};

use crate::config::{check_dims, RunConfig};
use crate::manifest::Outputs;
use crate::{CliError, GradcheckArgs, Scope, SuiteArgs, SynthArgs, TrainArgs};

fn to_json<T: serde::Serialize>(value: &T) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::to_value(value).map_err(mmtl_core::Error::from)?)
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn fraction(count: usize, total: usize) -> String {
    if total == 0 {
        "-".into()
    } else {
        format!("{:.3}", count as f64 / total as f64)
    }
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! apply {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$flag { spec.$($field).+ = v; })*
        };
    }
    apply!(
        n => samples,
        seed => seed,
        audio_len => dims.audio_len,
        frames => dims.frames,
        channels => dims.channels,
        height => dims.height,
        width => dims.width,
        noise => noise,
        video_noise => video_noise,
    );
    spec.validate()?;
    let data = synth_generate(&spec)?;
    let mut outputs = Outputs::default();
    outputs.write(&args.out, &encode_dataset(&data))?;

    let (emotions, genders) = data.label_counts();
    println!("samples: {}", data.len());
    for (name, count) in EMOTIONS.iter().zip(emotions) {
        println!("emotion {name:<10} {count:>6}  {}", fraction(count, data.len()));
    }
    for (name, count) in GENDERS.iter().zip(genders) {
        println!("gender  {name:<10} {count:>6}  {}", fraction(count, data.len()));
    }

    let mut manifest = args.out.clone().into_os_string();
    manifest.push(".manifest.json");
    outputs.finish(Path::new(&manifest), to_json(&spec)?, vec![spec.seed], start.elapsed())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let data = load(&args.data)?;
    check_dims(&config.model, data.dims())?;
    let (train_set, val_set, _) = split_622(&data, args.data_seed)?;
    let model = config.train.build(&config.model)?;
    let outcome = trainer::train(model, &train_set, &val_set, &config.train)?;

    let mut outputs = Outputs::default();
    outputs.write(&args.out.join("curves.csv"), curve_csv(&outcome.curve())?.as_bytes())?;
    outputs.write(&args.out.join("model.ckpt"), &encode_checkpoint(outcome.model.params()))?;

    let last = outcome.final_record();
    let best = outcome.best_record();
    println!(
        "final epoch {}: val joint NLL {:.4} (sum {:.2}), weights {:?}",
        last.epoch, last.val_joint_mean, last.val_joint_sum, last.weights
    );
    println!(
        "best epoch {}: val joint NLL {:.4} (sum {:.2}), weights {:?}",
        best.epoch, best.val_joint_mean, best.val_joint_sum, best.weights
    );
    let snapshot = json!({
        "run": to_json(&config)?,
        "data": args.data,
        "data_seed": args.data_seed,
    });
    outputs.finish(&args.out.join("manifest.json"), snapshot, vec![config.train.seed], start.elapsed())
}

pub fn suite(args: &SuiteArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            model: ModelConfig::toy_preset(),
            train: TrainConfig::new(Modality::Multimodal, WeightingMode::dynamic(2)),
        },
    };
    let data = load(&args.data)?;
    check_dims(&config.model, data.dims())?;

    let mut outputs = Outputs::default();
    let mut reports = Vec::with_capacity(args.seeds.len());
    for &seed in &args.seeds {
        let report = trainer::run_suite(&data, &config.model, &config.train, seed, args.data_seed)?;
        let dir = args.out.join(format!("seed-{seed}"));
        outputs.write(&dir.join("report.json"), report.to_json()?.as_bytes())?;
        for run in &report.runs {
            outputs.write(&dir.join(format!("{}.csv", run.row.name)), curve_csv(&run.curve)?.as_bytes())?;
        }
        reports.push(report);
    }
    let summary = aggregate(&reports)?;
    let summary_json = serde_json::to_string_pretty(&summary).map_err(mmtl_core::Error::from)?;
    outputs.write(&args.out.join("summary.json"), summary_json.as_bytes())?;
    print!("{}", summary.table());

    let snapshot = json!({
        "run": to_json(&config)?,
        "data": args.data,
        "data_seed": args.data_seed,
    });
    outputs.finish(&args.out.join("manifest.json"), snapshot, args.seeds.clone(), start.elapsed())
}

fn run_scope(scope: Scope, seed: u64) -> Result<ScopeReport, CliError> {
    Ok(match scope {
        Scope::Core => verify::core_scope(seed)?,
        Scope::Layers => verify::layers_scope(seed)?,
        Scope::Model => verify::model_scope(seed, 50)?,
        Scope::Lambda => verify::lambda_scope(seed, 100)?,
    })
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let scopes = if args.scope.is_empty() {
        vec![Scope::Core, Scope::Layers, Scope::Lambda, Scope::Model]
    } else {
        args.scope.clone()
    };
    let mut offending = Vec::new();
    for scope in scopes {
        let report = run_scope(scope, args.seed)?;
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<7} max relative error {:.3e} (tolerance {:.0e}) {status}",
            report.scope,
            report.worst(),
            report.tolerance
        );
        offending.extend(report.failures().iter().map(|c| format!("{}:{}", report.scope, c.name)));
    }
    if offending.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(offending.join(", ")))
    }
}
