//! Run configuration: preset defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dynvfl::data::{generate_synthetic, load_csv, CsvSchema, Dataset, SyntheticSpec};
use dynvfl::federation::{DatasetPreset, PipelineConfig};
use dynvfl::he::{HeMode, KeyMode};
use dynvfl::training::Optimizer;
use dynvfl::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Bcw,
    Dcc,
    Har,
    Synthetic,
}

impl From<PresetArg> for DatasetPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Bcw => DatasetPreset::Bcw,
            PresetArg::Dcc => DatasetPreset::Dcc,
            PresetArg::Har => DatasetPreset::Har,
            PresetArg::Synthetic => DatasetPreset::Synthetic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeModeArg {
    Mock,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

/// Where the data comes from and how to read it.
#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Dataset preset; picks hyperparameter defaults and the file layout.
    #[arg(long, value_enum, default_value = "bcw")]
    pub dataset: PresetArg,
    /// Delimited file with a header row. Defaults to data/wdbc.csv for bcw;
    /// synthetic data is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label column (overrides the preset layout).
    #[arg(long)]
    pub label_column: Option<String>,
    /// Label value mapped to the positive class; other values become class 0.
    #[arg(long)]
    pub positive_label: Option<String>,
    /// Identifier column, excluded from the features.
    #[arg(long)]
    pub id_column: Option<String>,
    /// Further columns to drop, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub drop_columns: Vec<String>,
    /// Rows of generated data when no file is given for `synthetic`.
    #[arg(long, default_value_t = 2000)]
    pub synth_samples: usize,
}

impl DataArgs {
    fn schema(&self) -> CsvSchema {
        let mut s = match self.dataset {
            PresetArg::Bcw => CsvSchema::bcw(),
            PresetArg::Dcc => CsvSchema {
                id_column: Some("ID".into()),
                label_column: "default payment next month".into(),
                positive_label: Some("1".into()),
                ..Default::default()
            },
            PresetArg::Har => CsvSchema::new("Activity"),
            PresetArg::Synthetic => CsvSchema::canonical(),
        };
        if let Some(l) = &self.label_column {
            s.label_column = l.clone();
        }
        if let Some(p) = &self.positive_label {
            s.positive_label = Some(p.clone());
        }
        if let Some(i) = &self.id_column {
            s.id_column = Some(i.clone());
        }
        s.drop_columns.extend(self.drop_columns.iter().cloned());
        s
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match (&self.data, self.dataset) {
            (Some(path), _) => load_csv(path, &self.schema()),
            (None, PresetArg::Bcw) => load_csv("data/wdbc.csv", &self.schema()),
            (None, PresetArg::Synthetic) => generate_synthetic(&SyntheticSpec {
                samples: self.synth_samples,
                seed,
                ..SyntheticSpec::default()
            }),
            (None, other) => Err(Error::Config {
                field: "data".into(),
                reason: format!("dataset {:?} needs --data PATH", DatasetPreset::from(other).name()),
            }),
        }
    }
}

/// Hyperparameter flags; each one overrides the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// JSON config file; keys are the fields of the resolved config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rep_dim: Option<usize>,
    #[arg(long)]
    pub ae_hidden: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub classifier_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ae_epochs: Option<usize>,
    #[arg(long)]
    pub ren_epochs: Option<usize>,
    #[arg(long)]
    pub perturber_epochs: Option<usize>,
    #[arg(long)]
    pub classifier_epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    pub he_mode: Option<HeModeArg>,
    #[arg(long)]
    pub he_bits: Option<u64>,
    #[arg(long)]
    pub split_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Re-fit estimator and perturber at every timestamp.
    #[arg(long)]
    pub retrain_estimators: bool,
}

fn read_file(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if !value.is_object() {
        return Err(Error::Config {
            field: "config".into(),
            reason: format!("{} must hold a JSON object", path.display()),
        });
    }
    Ok(value)
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Precedence: flags, then the config file, then the preset.
pub fn resolve(preset: DatasetPreset, o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::preset(preset);
    if let Some(path) = &o.config {
        let mut value = serde_json::to_value(&cfg)?;
        merge(&mut value, read_file(path)?);
        cfg = serde_json::from_value(value).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })?;
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = o.$field.clone() { cfg.$field = v; } )* };
    }
    set!(seed, rep_dim, ae_hidden, delta, temperature, lambda, lr, batch_size);
    set!(ae_epochs, ren_epochs, perturber_epochs, classifier_epochs, split_fraction, test_fraction);
    if o.classifier_lr.is_some() {
        cfg.classifier_lr = o.classifier_lr;
    }
    if let Some(opt) = o.optimizer {
        cfg.classifier_optimizer = match opt {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        };
    }
    if let Some(m) = o.he_mode {
        cfg.he.mode = match m {
            HeModeArg::Mock => HeMode::Mock,
            HeModeArg::Real => HeMode::Real,
        };
    }
    if let Some(bits) = o.he_bits {
        cfg.he.modulus_bits = bits;
        if bits < dynvfl::he::MIN_CRYPTO_BITS {
            cfg.he.key_mode = KeyMode::Test;
        }
    }
    if o.retrain_estimators {
        cfg.retrain_estimators = true;
    }
    cfg.validate()?;
    Ok(cfg)
}
