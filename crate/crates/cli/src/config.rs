//! Experiment configuration file (TOML). Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//! n_orders = 30
//! methods = ["CE", "LwF", "EWC"]
//! holdouts = [0, 2, 4, 6, 8, 10, 15]
//! fixed_holdout = 6
//! output_dir = "results/ws"
//!
//! [dataset]
//! standardize = true
//! [dataset.source]
//! kind = "csv"
//! path = "ws_features.csv"
//! [dataset.split]
//! mode = "stratified"
//! train_fraction = 0.7
//! seed = 0
//!
//! [network]
//! hidden = [32, 16, 16]
//!
//! [train]
//! epochs = 200
//! batch_size = 15
//! learning_rate = 0.01
//! weight_decay = 1e-4
//! scheduler = { effective_after = 50, step = 40, factor = 0.01 }
//! ```

use std::path::{Path, PathBuf};

use inclearn::data::{CsvSchema, SplitMode, SplitSpec, SyntheticSpec};
use inclearn::engine::TrainSettings;
use inclearn::losses::{LossConfig, MasFunctional, Method};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_orders")]
    pub n_orders: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Memory sizes S to run; 0 disables replay.
    #[serde(default = "default_holdouts")]
    pub holdouts: Vec<usize>,
    /// S reported in the with-replay column of the summary.
    #[serde(default = "default_fixed_holdout")]
    pub fixed_holdout: usize,
    /// Adds a joint-training run per order.
    #[serde(default = "yes")]
    pub offline: bool,
    /// Worker threads; absent means one per available core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
}

fn default_orders() -> usize {
    30
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_holdouts() -> Vec<usize> {
    vec![0, 2, 4, 6, 8, 10, 15]
}

fn default_fixed_holdout() -> usize {
    6
}

fn yes() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    /// Z-scores features with statistics of the training side.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn default_split() -> SplitSpec {
    SplitSpec {
        mode: SplitMode::Stratified,
        train_fraction: 0.7,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// One feature file, split by `dataset.split`.
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    /// Pre-split train and test files; `dataset.split` is ignored.
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16, 16],
        }
    }
}

/// Method hyperparameters; each method reads only its own entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    pub lwf_lambda: f64,
    pub ewc_lambda: f64,
    pub rwc_lambda: f64,
    pub mas_lambda: f64,
    pub mas_functional: MasFunctional,
    pub lucir_lambda_base: f64,
    pub lucir_margin: f64,
    pub lucir_top_k: usize,
    pub ilos_beta: f64,
    pub temperature: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        let lucir = LossConfig::new(Method::LucirDisMr);
        Self {
            lwf_lambda: LossConfig::new(Method::Lwf).lambda,
            ewc_lambda: LossConfig::new(Method::Ewc).lambda,
            rwc_lambda: LossConfig::new(Method::Rwc).lambda,
            mas_lambda: LossConfig::new(Method::Mas).lambda,
            mas_functional: lucir.mas_functional,
            lucir_lambda_base: lucir.lambda_base,
            lucir_margin: lucir.margin,
            lucir_top_k: lucir.top_k,
            ilos_beta: lucir.beta,
            temperature: lucir.temperature,
        }
    }
}

impl Hyperparameters {
    pub fn loss_config(&self, method: Method) -> LossConfig {
        let lambda = match method {
            Method::Lwf => self.lwf_lambda,
            Method::Ewc => self.ewc_lambda,
            Method::Rwc => self.rwc_lambda,
            Method::Mas => self.mas_lambda,
            _ => 0.0,
        };
        LossConfig {
            method,
            lambda,
            lambda_base: self.lucir_lambda_base,
            margin: self.lucir_margin,
            top_k: self.lucir_top_k,
            beta: self.ilos_beta,
            temperature: self.temperature,
            mas_functional: self.mas_functional,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_owned(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        match &mut self.dataset.source {
            DataSource::Csv { path, .. } => fix(path),
            DataSource::Files { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DataSource::Synthetic(_) => {}
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.n_orders == 0 {
            return invalid("n_orders must be at least 1".into());
        }
        if self.methods.is_empty() && !self.offline {
            return invalid("nothing to run: no methods and offline disabled".into());
        }
        if self.holdouts.is_empty() && !self.methods.is_empty() {
            return invalid("holdouts must list at least one S value".into());
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return invalid("methods contains duplicates".into());
        }
        let mut s = self.holdouts.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.holdouts.len() {
            return invalid("holdouts contains duplicates".into());
        }
        if self.workers == Some(0) {
            return invalid("workers must be at least 1".into());
        }
        if self.network.hidden.contains(&0) {
            return invalid("hidden layer widths must be positive".into());
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for &m in &self.methods {
            self.hyperparameters
                .loss_config(m)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{m}: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset.source]
kind = "synthetic"
n_classes = 4
dim = 3
separation = 3.0
samples_per_class = 20
"#;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.n_orders, 30);
        assert_eq!(c.fixed_holdout, 6);
        assert_eq!(c.holdouts, vec![0, 2, 4, 6, 8, 10, 15]);
        assert_eq!(c.methods.len(), 9);
        assert_eq!(c.network.hidden, vec![32, 16, 16]);
        assert_eq!(c.train, TrainSettings::ws());
        assert!(c.dataset.standardize);
    }

    #[test]
    fn round_trips() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
        let custom = format!("workers = 2\nmethods = [\"CE\", \"LUCIR-DIS+MR\"]\n{MINIMAL}");
        let c = parse(&custom).unwrap();
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            parse(&format!("sed = 1\n{MINIMAL}")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(parse(&format!("{MINIMAL}colour = 1\n")).is_err());
        assert!(parse(&format!("[train]\nepoch = 3\n{MINIMAL}")).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(
            parse(&format!("methods = [\"SI\"]\n{MINIMAL}")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            parse(&format!("n_orders = 0\n{MINIMAL}")),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse(&format!("holdouts = [2, 2]\n{MINIMAL}")),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse(&format!("[hyperparameters]\nilos_beta = 1.5\n{MINIMAL}")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn per_method_lambdas() {
        let h = Hyperparameters::default();
        assert_eq!(h.loss_config(Method::Lwf).lambda, 1.6);
        assert_eq!(h.loss_config(Method::Mas).lambda, 0.25);
        assert_eq!(h.loss_config(Method::Ce).lambda, 0.0);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "output_dir = \"out\"\n[dataset.source]\nkind = \"csv\"\npath = \"d.csv\"\n",
        )
        .unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert!(
            matches!(&c.dataset.source, DataSource::Csv { path: p, .. } if p == &dir.path().join("d.csv"))
        );
    }
}
