//! Run configuration: a versioned TOML file. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};

use memdec::corpus::TokenMode;
use memdec::distribution::InterpParams;
use memdec::lm::ModelConfig;
use memdec::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

/// A configuration problem, reported with the dotted path of the field.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config field `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub corpus: CorpusSection,
    pub plm: ModelSpec,
    pub memdec: ModelSpec,
    #[serde(default = "default_interp")]
    pub interp: InterpParams,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub manifest: ManifestSection,
}

fn default_interp() -> InterpParams {
    InterpParams::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Holds `<corpus>/{train,valid,test}.txt` for both corpora.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub mode: TokenMode,
    pub max_vocab: usize,
    pub general: String,
    pub domain: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            mode: TokenMode::Char,
            max_vocab: 256,
            general: "general".into(),
            domain: "domain".into(),
        }
    }
}

/// Model shape without the vocabulary size, which comes from the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    /// Defaults to the last layer.
    #[serde(default)]
    pub key_layer: Option<usize>,
}

impl ModelSpec {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            context_len: self.context_len,
            vocab_size,
            key_layer: self.key_layer.unwrap_or(self.n_layers),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub plm: TrainConfig,
    pub memdec: TrainConfig,
    pub dapt: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub context_len: usize,
    pub score_len: usize,
    pub alpha_grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            context_len: 64,
            score_len: 32,
            alpha_grid: vec![0.4, 0.6, 0.8, 0.9],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmup: usize,
    pub repetitions: usize,
    /// Tokens of the test split used for timing.
    pub max_tokens: usize,
    pub parallel: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            warmup: 1,
            repetitions: 3,
            max_tokens: 2048,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Fraction of the memory decoder's step budget.
    pub budget_frac: f64,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection { budget_frac: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct AblationSection {
    /// Steps per loss; 0 means a fifth of the memory decoder budget.
    pub steps: usize,
}


#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestSection {
    /// Record zero for timestamps and wall times so identical runs write
    /// identical files.
    pub deterministic_clock: bool,
}

impl Default for ManifestSection {
    fn default() -> Self {
        ManifestSection {
            deterministic_clock: true,
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), ov)
    }

    /// Parses and validates; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, ov: &Overrides) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::new("", e.message().trim()))?;
        for stage in ["plm", "memdec", "dapt"] {
            let section = table
                .get("train")
                .and_then(|t| t.get(stage))
                .and_then(|t| t.as_table());
            for key in ["seed", "beta"] {
                if section.is_some_and(|s| s.contains_key(key)) {
                    let owner = if key == "seed" { "seed" } else { "interp.beta" };
                    return Err(ConfigError::new(
                        format!("train.{stage}.{key}"),
                        format!("set `{owner}` instead"),
                    ));
                }
            }
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| ConfigError::new(e.path().to_string(), e.inner()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::new(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", cfg.version),
            ));
        }
        cfg.apply(ov);
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(o) = &ov.out {
            self.paths.out_dir = std::env::current_dir().unwrap_or_default().join(o);
        }
        let i = &mut self.interp;
        i.alpha = ov.alpha.unwrap_or(i.alpha);
        i.lambda = ov.lambda.unwrap_or(i.lambda);
        i.k = ov.k.unwrap_or(i.k);
        i.tau = ov.tau.unwrap_or(i.tau);
        i.beta = ov.beta.unwrap_or(i.beta);
        for t in [&mut self.train.plm, &mut self.train.memdec, &mut self.train.dapt] {
            t.seed = self.seed;
        }
        self.train.memdec.beta = self.interp.beta;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.paths.data_dir.is_dir() {
            return Err(ConfigError::new(
                "paths.data_dir",
                format!("{} is not a directory", self.paths.data_dir.display()),
            ));
        }
        for name in [&self.corpus.general, &self.corpus.domain] {
            for split in ["train", "valid", "test"] {
                let f = self.paths.data_dir.join(name).join(format!("{split}.txt"));
                if !f.is_file() {
                    return Err(ConfigError::new(
                        "paths.data_dir",
                        format!("missing corpus file {}", f.display()),
                    ));
                }
            }
        }
        if self.corpus.max_vocab < 2 {
            return Err(ConfigError::new("corpus.max_vocab", "must be at least 2"));
        }
        for (name, spec) in [("plm", &self.plm), ("memdec", &self.memdec)] {
            spec.with_vocab(2)
                .validate()
                .map_err(|e| ConfigError::new(name, e))?;
        }
        let i = &self.interp;
        if i.k == 0 {
            return Err(ConfigError::new("interp.k", "must be at least 1"));
        }
        if !(i.tau > 0.0 && i.tau.is_finite()) {
            return Err(ConfigError::new("interp.tau", "must be positive"));
        }
        for (name, v) in [("lambda", i.lambda), ("alpha", i.alpha), ("beta", i.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::new(
                    format!("interp.{name}"),
                    format!("{v} outside [0, 1]"),
                ));
            }
        }
        for (name, t) in [
            ("plm", &self.train.plm),
            ("memdec", &self.train.memdec),
            ("dapt", &self.train.dapt),
        ] {
            t.validate()
                .map_err(|e| ConfigError::new(format!("train.{name}"), e))?;
        }
        let e = &self.eval;
        if !(0 < e.score_len && e.score_len < e.context_len) {
            return Err(ConfigError::new(
                "eval.score_len",
                "need 0 < score_len < context_len",
            ));
        }
        for (name, spec) in [("plm", &self.plm), ("memdec", &self.memdec)] {
            if e.context_len > spec.context_len {
                return Err(ConfigError::new(
                    "eval.context_len",
                    format!("exceeds {name}.context_len {}", spec.context_len),
                ));
            }
        }
        if e.alpha_grid.is_empty() || e.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(ConfigError::new(
                "eval.alpha_grid",
                "needs at least one weight, all in [0, 1]",
            ));
        }
        if self.bench.repetitions < 3 {
            return Err(ConfigError::new("bench.repetitions", "must be at least 3"));
        }
        if self.bench.max_tokens < 2 {
            return Err(ConfigError::new("bench.max_tokens", "must be at least 2"));
        }
        let b = self.transfer.budget_frac;
        if !(b > 0.0 && b <= 1.0) {
            return Err(ConfigError::new("transfer.budget_frac", "must be in (0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration. Locations are left out;
    /// input contents are hashed separately in the manifest.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
        };
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn corpus_file(&self, corpus: &str, split: &str) -> PathBuf {
        self.paths.data_dir.join(corpus).join(format!("{split}.txt"))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }
}
