//! Run configuration: a JSON file with command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use trifuse::config::{ModelConfig, TextMode, N_CLASSES};
use trifuse::data::{Dataset, DatasetHeader};
use trifuse::{AblationMode, Error, Result, TrainConfig};

/// Model hyperparameters that are not fixed by the dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        let m = ModelConfig::default();
        Architecture {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            dropout_p: m.dropout_p,
            max_seq_len: m.max_seq_len,
            layer_norm_eps: m.layer_norm_eps,
        }
    }
}

impl Architecture {
    pub fn model_config(&self, header: &DatasetHeader) -> ModelConfig {
        let (d_text, vocab_size) = match header.text_mode {
            TextMode::Embeddings => (header.text_dim(), 0),
            TextMode::Tokens => (0, header.text_dim()),
        };
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            dropout_p: self.dropout_p,
            d_img: header.d_img,
            d_audio: header.d_audio,
            text_mode: header.text_mode,
            d_text,
            vocab_size,
            max_seq_len: self.max_seq_len,
            n_classes: N_CLASSES,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub mode: AblationMode,
    pub train_split: String,
    /// Model-selection split; defaults to `val` when the dataset has one.
    pub val_split: Option<String>,
    /// Split scored in the final report; defaults to the first nonempty of
    /// `test`, the validation split, and the training split.
    pub report_split: Option<String>,
    pub model: Architecture,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out_dir: None,
            mode: AblationMode::Full,
            train_split: "train".into(),
            val_split: None,
            report_split: None,
            model: Architecture::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Flags shared by `train` and `ablate`; each one overrides the config file.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset JSONL file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// full, text_only, image_only or audio_only
    #[arg(long)]
    pub mode: Option<AblationMode>,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub val_split: Option<String>,
    #[arg(long)]
    pub report_split: Option<String>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gaussian feature-noise standard deviation
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Probability of blanking one modality per training sample
    #[arg(long)]
    pub modality_dropout: Option<f64>,
    /// Stop after this many epochs without improvement (0 disables)
    #[arg(long)]
    pub patience: Option<usize>,
    /// Global gradient-norm cap (0 disables)
    #[arg(long)]
    pub grad_clip: Option<f64>,

    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub layer_norm_eps: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if self.data.is_some() {
            c.data = self.data;
        }
        if self.out.is_some() {
            c.out_dir = self.out;
        }
        set(&mut c.mode, self.mode);
        set(&mut c.train_split, self.train_split);
        if self.val_split.is_some() {
            c.val_split = self.val_split;
        }
        if self.report_split.is_some() {
            c.report_split = self.report_split;
        }

        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.adam_eps, self.adam_eps);
        set(&mut t.seed, self.seed);
        set(&mut t.augmentation.gaussian_sigma, self.noise_sigma);
        set(&mut t.augmentation.modality_dropout_p, self.modality_dropout);
        set(&mut t.early_stop_patience, self.patience);
        set(&mut t.grad_clip_norm, self.grad_clip);

        let m = &mut c.model;
        set(&mut m.d_model, self.d_model);
        set(&mut m.n_heads, self.n_heads);
        set(&mut m.n_layers, self.n_layers);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.dropout_p, self.dropout);
        set(&mut m.max_seq_len, self.max_seq_len);
        set(&mut m.layer_norm_eps, self.layer_norm_eps);

        c.validate()?;
        Ok(c)
    }
}

/// A validated run with its dataset loaded and splits chosen.
pub struct Prepared {
    pub config: RunConfig,
    pub model_config: ModelConfig,
    pub dataset: Dataset,
    pub out_dir: PathBuf,
    pub val_split: Option<String>,
    pub report_split: String,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let data = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (--data or \"data\")".into()))?;
        if !data.is_file() {
            return Err(Error::Config(format!("dataset {} does not exist", data.display())));
        }
        if self.out_dir.is_none() {
            return Err(Error::Config("no output directory given (--out or \"out_dir\")".into()));
        }
        self.train.validate()
    }

    pub fn prepare(self) -> Result<Prepared> {
        let dataset = trifuse::data::load_jsonl(self.data.as_deref().unwrap_or(Path::new("")))?;
        let model_config = self.model.model_config(&dataset.header);
        model_config.validate()?;
        dataset.nonempty_split(&self.train_split)?;
        let has = |name: &str| dataset.split_names().contains(&name);

        let val_split = match &self.val_split {
            Some(name) => {
                dataset.split(name)?;
                Some(name.clone())
            }
            None => has("val").then(|| "val".to_owned()),
        };
        let report_split = match &self.report_split {
            Some(name) => {
                dataset.nonempty_split(name)?;
                name.clone()
            }
            None => ["test", val_split.as_deref().unwrap_or(""), &self.train_split]
                .into_iter()
                .find(|name| has(name) && dataset.split(name).is_ok_and(|s| !s.is_empty()))
                .unwrap_or(&self.train_split)
                .to_owned(),
        };
        let out_dir = self.out_dir.clone().unwrap_or_default();
        Ok(Prepared {
            config: self,
            model_config,
            dataset,
            out_dir,
            val_split,
            report_split,
        })
    }
}
