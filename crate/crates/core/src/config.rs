//! The one structured configuration document shared by every command, with
//! strict key checking, `key=value` overrides, canonical normalization, and a
//! content hash used to name output directories.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};

/// Encoder/decoder sizes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of self-attention layers.
    pub layers: usize,
    /// Token representation width.
    pub token_dim: usize,
    pub heads: usize,
    /// Feed-forward inner width.
    pub ff_dim: usize,
    /// Label embedding width.
    pub label_dim: usize,
    pub gcn_layers: usize,
    /// Decoder GRU hidden width.
    pub hidden_dim: usize,
    /// Per-argument token cap applied at load time.
    pub max_arg_len: usize,
    /// Symmetric degree normalization of the label-graph adjacency.
    pub normalize_adjacency: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            token_dim: 64,
            heads: 4,
            ff_dim: 256,
            label_dim: 100,
            gcn_layers: 2,
            hidden_dim: 64,
            max_arg_len: 64,
            normalize_adjacency: false,
        }
    }
}

impl ModelConfig {
    /// Longest token sequence the encoder accepts: both arguments plus the
    /// three special tokens.
    pub fn max_seq_len(&self) -> usize {
        2 * self.max_arg_len + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.gcn_layers == 0 {
            return Err(Error::config("model.layers and model.gcn_layers must be >= 1"));
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.token_dim {} must be divisible by model.heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.token_dim == 0
            || self.ff_dim == 0
            || self.label_dim == 0
            || self.hidden_dim == 0
            || self.max_arg_len == 0
        {
            return Err(Error::config("model dimensions must be positive"));
        }
        Ok(())
    }
}

/// The model variants studied by the ablation grid.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Take label embeddings straight from the initial node embeddings.
    pub no_gcn: bool,
    /// Replace level-specific label attention with decoder-state queries.
    pub no_label_attention: bool,
    /// Drop the previous-prediction summary from the decoder input.
    pub no_prev_pred: bool,
    /// Train the sequence decoder alone, without the auxiliary decoder.
    pub no_mutual_learning: bool,
    /// Replace both decoders with independent per-level softmax heads.
    pub multitask_baseline: bool,
    /// Evaluate by averaging the two decoders' distributions.
    pub ensemble_eval: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the decoder-agreement KL terms.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// Vocabulary frequency threshold.
    pub min_count: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Run model selection after every batch instead of every epoch.
    pub per_batch_validation: bool,
    /// Feed gold labels instead of predicted distributions into the decoder's
    /// previous-prediction summary during training.
    pub teacher_forcing: bool,
    /// Let the auxiliary objective also update the encoder.
    pub aux_updates_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 15,
            dropout: 0.2,
            min_count: 1,
            patience: None,
            per_batch_validation: false,
            teacher_forcing: false,
            aux_updates_encoder: false,
        }
    }
}

/// Which distributions drive prediction at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TopDown,
    BottomUp,
    Ensemble,
    Multitask,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TopDown => "top_down",
            Scheme::BottomUp => "bottom_up",
            Scheme::Ensemble => "ensemble",
            Scheme::Multitask => "multitask",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scheme: Scheme,
    /// Include per-level distributions in prediction dumps.
    pub dump_distributions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { scheme: Scheme::TopDown, dump_distributions: false }
    }
}

/// Paths to an on-disk corpus. When absent, commands fall back to generating
/// the synthetic corpus in memory from `synthetic`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub hierarchy: Option<String>,
    pub train: Option<String>,
    pub valid: Option<String>,
    pub test: Option<String>,
}

impl DataConfig {
    pub fn is_external(&self) -> bool {
        self.hierarchy.is_some()
    }
}

/// Settings for the gradient verification command. The model here is
/// deliberately tiny so the central-difference sweep stays fast.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub step: f64,
    pub samples_per_param: usize,
    pub instances: usize,
    pub model: ModelConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            samples_per_param: 4,
            instances: 4,
            model: ModelConfig {
                layers: 1,
                token_dim: 16,
                heads: 2,
                ff_dim: 32,
                label_dim: 8,
                gcn_layers: 2,
                hidden_dim: 16,
                max_arg_len: 64,
                normalize_adjacency: false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Add the six-point sweep over the agreement coefficient.
    pub lambda_sweep: bool,
}

/// The full run configuration document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed list for multi-seed commands (ablation, repeated runs).
    pub seeds: Vec<u64>,
    pub out_root: String,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            seeds: vec![1, 2, 3, 4, 5],
            out_root: "runs".to_string(),
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Parse a config document and apply `key.path=value` overrides before
    /// type-checking. Values parse as JSON when possible, else as strings.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        for entry in overrides {
            let (path, raw) = entry.split_once('=').ok_or_else(|| {
                Error::config(format!("override '{entry}' is not of the form key=value"))
            })?;
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gradcheck.model.validate()?;
        self.synthetic.validate()?;
        if self.train.lambda < 0.0 {
            return Err(Error::config(format!(
                "train.lambda = {} must be >= 0",
                self.train.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.train.dropout) {
            return Err(Error::config(format!(
                "train.dropout = {} outside [0, 1)",
                self.train.dropout
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be >= 1"));
        }
        if self.train.min_count == 0 {
            return Err(Error::config("train.min_count must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be nonempty"));
        }
        let flags = self.ablation;
        if flags.multitask_baseline
            && (flags.no_label_attention || flags.no_prev_pred || flags.ensemble_eval)
        {
            return Err(Error::config(
                "multitask_baseline cannot combine with decoder-specific flags",
            ));
        }
        if flags.ensemble_eval && flags.no_mutual_learning {
            return Err(Error::config(
                "ensemble_eval requires the auxiliary decoder (mutual learning)",
            ));
        }
        Ok(())
    }

    /// Canonical form used for hashing and training behavior: disabling
    /// mutual learning and setting the agreement coefficient to zero are the
    /// same run, so both spellings normalize to one config.
    pub fn normalized(&self) -> RunConfig {
        let mut out = self.clone();
        if out.ablation.multitask_baseline {
            out.ablation.no_mutual_learning = true;
        }
        if out.train.lambda == 0.0 {
            out.ablation.no_mutual_learning = true;
        }
        if out.ablation.no_mutual_learning {
            out.train.lambda = 0.0;
        }
        out
    }

    /// Hex content hash of the normalized config (directory naming). The
    /// output root is excluded: it locates results, it does not identify the
    /// experiment.
    pub fn hash(&self) -> String {
        let mut canonical_cfg = self.normalized();
        canonical_cfg.out_root = String::new();
        let canonical = serde_json::to_string(&canonical_cfg).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn set_path(
    root: &mut serde_json::Value,
    path: &str,
    new_value: serde_json::Value,
) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::config(format!(
                "override path '{path}' descends into a non-object at '{part}'"
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new_value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::config(format!("empty override path '{path}'")))
}
