use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::{json, Map, Value};
use trifuse::checkpoint::Checkpoint;
use trifuse::data::{parse_sample_line, Dataset, DatasetHeader, EmotionLabel, MultimodalSample};
use trifuse::metrics::{argmax, export_epoch_curve};
use trifuse::{evaluate, generate_synthetic, AblationMode, Error, EvalReport, Model, Result, SynthSpec, Trainer};

use crate::config::{Prepared, RunArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

/// Reference rows printed next to ablation results: (model, macro AUC, weighted F1).
pub const PUBLISHED: [(&str, f64, f64); 2] = [
    ("text-only transformer", 0.685, 0.653),
    ("weighted-fusion transformer", 0.817, 0.795),
];
const PUBLISHED_NOTE: &str = "published, not reproduced";

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

#[derive(Debug, Serialize)]
pub struct SplitReport<'a> {
    pub split: &'a str,
    pub mode: AblationMode,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub spec: SynthSpec,
}

pub fn synth(args: SynthArgs) -> Result<String> {
    let dataset = generate_synthetic(&args.spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    dataset.save_jsonl(&args.out)?;
    let sidecar = args.out.with_extension("spec.json");
    write(&sidecar, serde_json::to_string_pretty(&args.spec)? + "\n")?;
    Ok(format!(
        "wrote {} samples to {} (spec in {})",
        dataset.len(),
        args.out.display(),
        sidecar.display()
    ))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

pub fn train(args: RunArgs) -> Result<String> {
    let run = args.resolve()?.prepare()?;
    create_out_dir(&run.out_dir)?;
    write(&run.out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&run.config)? + "\n")?;

    let train_split = run.dataset.nonempty_split(&run.config.train_split)?;
    let val_split = match &run.val_split {
        Some(name) => run.dataset.split(name)?,
        None => Vec::new(),
    };
    let model = Model::new(run.model_config.clone(), run.config.train.seed)?;
    for s in train_split.iter().chain(&val_split) {
        model.check_sample(s)?;
    }
    let mode = run.config.mode;
    let mut trainer = Trainer::new(model, run.config.train.clone(), mode)?;
    let outcome = match trainer.fit(&train_split, &val_split) {
        Ok(o) => o,
        Err(Error::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            last_good.save(run.out_dir.join(CHECKPOINT_FILE))?;
            export_epoch_curve(trainer.history(), run.out_dir.join(CURVE_FILE))?;
            return Err(Error::Diverged {
                epoch,
                reason,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    trainer.checkpoint().save(run.out_dir.join(CHECKPOINT_FILE))?;
    export_epoch_curve(&outcome.history, run.out_dir.join(CURVE_FILE))?;

    let samples = run.dataset.nonempty_split(&run.report_split)?;
    let report = SplitReport {
        split: &run.report_split,
        mode,
        report: evaluate(&outcome.model, &samples, run.config.train.batch_size, mode)?,
    };
    let line = to_json(&report)?;
    write(&run.out_dir.join(REPORT_FILE), format!("{line}\n"))?;
    Ok(line)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defaults to the mode stored in the checkpoint
    #[arg(long)]
    pub mode: Option<AblationMode>,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    trifuse::data::load_jsonl(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

pub fn eval(args: EvalArgs) -> Result<String> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let samples = dataset.nonempty_split(&args.split)?;
    let model = checkpoint.selected_model()?;
    for s in &samples {
        model.check_sample(s)?;
    }
    if args.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mode = args.mode.unwrap_or(checkpoint.mode);
    to_json(&SplitReport {
        split: &args.split,
        mode,
        report: evaluate(&model, &samples, args.batch_size, mode)?,
    })
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A sample line, or a dataset file (use --id to choose); `-` reads stdin
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub id: Option<String>,
    /// Defaults to the mode stored in the checkpoint
    #[arg(long)]
    pub mode: Option<AblationMode>,
}

/// Accepts either a bare sample line or a dataset file, from which `id`
/// picks the sample (optional when it holds exactly one).
fn read_sample(path: &Path, id: Option<&str>) -> Result<MultimodalSample> {
    let text = if path == Path::new("-") {
        std::io::read_to_string(std::io::stdin()).map_err(|e| Error::Config(format!("stdin: {e}")))?
    } else {
        if !path.is_file() {
            return Err(Error::Config(format!("sample file {} does not exist", path.display())));
        }
        std::fs::read_to_string(path).map_err(|e| io_error(path, e))?
    };
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut samples = if serde_json::from_str::<DatasetHeader>(first).is_ok() {
        Dataset::from_jsonl(&text)?.samples
    } else {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                parse_sample_line(l).map_err(|e| Error::Line {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    match id {
        Some(id) => samples
            .into_iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("no sample with id \"{id}\""))),
        None if samples.len() == 1 => Ok(samples.swap_remove(0)),
        None => Err(Error::Config(format!(
            "expected exactly one sample, found {}; pick one with --id",
            samples.len()
        ))),
    }
}

pub fn predict(args: PredictArgs) -> Result<String> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let sample = read_sample(&args.sample, args.id.as_deref())?;
    let model = checkpoint.selected_model()?;
    let mode = args.mode.unwrap_or(checkpoint.mode);
    let probs = model.predict(&sample, mode)?;
    let probs = probs.data();
    let mut named = Map::new();
    for label in EmotionLabel::ALL {
        named.insert(label.name().to_owned(), json!(probs[label.code()]));
    }
    let label = EmotionLabel::from_code(argmax(probs)).unwrap_or(EmotionLabel::Neutral);
    to_json(&json!({ "label": label.name(), "probs": Value::Object(named) }))
}

#[derive(Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_auc: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_auc: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<SeedResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn run_mode(run: &Prepared, mode: AblationMode, seed: u64) -> Result<SeedResult> {
    let train_split = run.dataset.nonempty_split(&run.config.train_split)?;
    let val_split = match &run.val_split {
        Some(name) => run.dataset.split(name)?,
        None => Vec::new(),
    };
    let config = trifuse::TrainConfig {
        seed,
        ..run.config.train.clone()
    };
    let model = Model::new(run.model_config.clone(), seed)?;
    let outcome = trifuse::train(model, &train_split, &val_split, &config, mode)?;
    let samples = run.dataset.nonempty_split(&run.report_split)?;
    let report = evaluate(&outcome.model, &samples, config.batch_size, mode)?;
    Ok(SeedResult {
        seed,
        accuracy: report.accuracy,
        weighted_f1: report.weighted_f1,
        macro_auc: report.macro_auc,
        best_epoch: outcome.best_epoch,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_row(run: &Prepared, mode: AblationMode, seeds: &[u64]) -> AblationRow {
    let results: Result<Vec<SeedResult>> = seeds.iter().map(|&s| run_mode(run, mode, s)).collect();
    match results {
        Ok(results) => AblationRow {
            mode,
            status: "ok",
            accuracy: Some(mean(results.iter().map(|r| r.accuracy))),
            weighted_f1: Some(mean(results.iter().map(|r| r.weighted_f1))),
            macro_auc: Some(mean(results.iter().map(|r| r.macro_auc))),
            seeds: results,
            error: None,
        },
        Err(e) => AblationRow {
            mode,
            status: "failed",
            accuracy: None,
            weighted_f1: None,
            macro_auc: None,
            seeds: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

pub fn ablation_table(rows: &[AblationRow], split: &str, seeds: &[u64]) -> String {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut out = format!("split: {split}, seeds: {}\n\n", seeds.join(","));
    let _ = writeln!(out, "{:<30} {:>9} {:>11} {:>9}  status", "model", "accuracy", "weighted_f1", "macro_auc");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
    for r in rows {
        let status = match &r.error {
            Some(e) => format!("failed: {e}"),
            None => r.status.to_owned(),
        };
        let _ = writeln!(
            out,
            "{:<30} {:>9} {:>11} {:>9}  {status}",
            r.mode.name(),
            cell(r.accuracy),
            cell(r.weighted_f1),
            cell(r.macro_auc)
        );
    }
    for (name, auc, f1) in PUBLISHED {
        let _ = writeln!(out, "{name:<30} {:>9} {f1:>11.3} {auc:>9.3}  {PUBLISHED_NOTE}", "-");
    }
    out
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated modes (default: all four)
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<AblationMode>,
    /// Comma-separated seeds; rows report the mean (default: the run seed)
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

/// Returns the text table and whether every mode succeeded.
pub fn ablate(args: AblateArgs) -> Result<(String, bool)> {
    let run = args.run.resolve()?.prepare()?;
    let mut modes: Vec<AblationMode> = Vec::new();
    for m in if args.modes.is_empty() { AblationMode::ALL.to_vec() } else { args.modes } {
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    let seeds = args.seeds.unwrap_or_else(|| vec![run.config.train.seed]);
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    create_out_dir(&run.out_dir)?;
    write(&run.out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&run.config)? + "\n")?;

    let rows: Vec<AblationRow> = modes.iter().map(|&m| ablation_row(&run, m, &seeds)).collect();
    let published: Vec<Value> = PUBLISHED
        .iter()
        .map(|(name, auc, f1)| json!({ "model": name, "macro_auc": auc, "weighted_f1": f1, "note": PUBLISHED_NOTE }))
        .collect();
    let doc = json!({
        "split": run.report_split,
        "seeds": seeds,
        "rows": rows,
        "published": published,
    });
    write(&run.out_dir.join("ablation.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    let table = ablation_table(&rows, &run.report_split, &seeds);
    write(&run.out_dir.join("ablation.txt"), &table)?;
    let all_ok = rows.iter().all(|r| r.error.is_none());
    Ok((table, all_ok))
}
