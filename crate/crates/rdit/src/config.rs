//! Experiment configuration: architecture, training, sampling, and data
//! knobs, plus the named architecture presets.
//!
//! Config files are JSON documents with flat dotted keys, e.g.
//!
//! ```json
//! { "model.depth": 12, "model.dual.mode": "compact_dual" }
//! ```
//!
//! Unknown keys are rejected so typos surface immediately. Omitted keys take
//! defaults. `serialize` emits every key, and `load` of that document
//! round-trips to an identical config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{RditError, Result};

/// How class information reaches the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// No auxiliary tokens.
    None,
    /// Free learnable tokens, excluded from the loss.
    Registers,
    /// Duplicated class-embedding tokens appended to the sequence.
    InContext,
}

/// Which dual-stream strategy a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMode {
    Single,
    FullDual,
    CompactDual,
}

/// Transformer components that can get register-specific parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualComponent {
    Adaln,
    Mlp,
    Attention,
    Rmsnorm,
}

impl fmt::Display for DualComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DualComponent::Adaln => "adaln",
            DualComponent::Mlp => "mlp",
            DualComponent::Attention => "attention",
            DualComponent::Rmsnorm => "rmsnorm",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub mode: DualMode,
    /// Components with register-specific parameters; kept sorted.
    pub dualize: Vec<DualComponent>,
    /// Full-dual adaLN keeps a second copy in every block (not only the
    /// register-bearing ones) when set.
    pub adaln_full_dual_all_layers: bool,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            mode: DualMode::Single,
            dualize: Vec::new(),
            adaln_full_dual_all_layers: true,
        }
    }
}

impl DualConfig {
    pub fn has(&self, c: DualComponent) -> bool {
        self.mode != DualMode::Single && self.dualize.contains(&c)
    }
}

/// Full architectural description of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// SwiGLU inner size.
    pub mlp_hidden: usize,
    /// Patch edge in pixels.
    pub patch: usize,
    /// Image edge in pixels.
    pub image: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub cond_mode: CondMode,
    /// Auxiliary-token count (registers or in-context tokens).
    pub n_reg: usize,
    /// First block index (inclusive) where auxiliary tokens are present.
    pub reg_start: usize,
    /// Last block index (inclusive) where auxiliary tokens are present.
    pub reg_end: usize,
    pub dual: DualConfig,
    pub lora_rank: usize,
}

impl ModelConfig {
    pub fn n_patch(&self) -> usize {
        let g = self.image / self.patch;
        g * g
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Token count at the input of block `layer`.
    pub fn tokens_at(&self, layer: usize) -> usize {
        self.n_patch() + if self.aux_at(layer) { self.n_reg } else { 0 }
    }

    /// Whether auxiliary tokens are present in block `layer`.
    pub fn aux_at(&self, layer: usize) -> bool {
        self.n_reg > 0
            && self.cond_mode != CondMode::None
            && layer >= self.reg_start
            && layer <= self.reg_end
    }

    /// Index of the null (dropped) class label.
    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(RditError::ConfigInvalid { field: field.into(), message })
        };
        if self.depth == 0 {
            return fail("model.depth", "must be >= 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(
                "model.heads",
                format!("heads ({}) must divide width ({})", self.heads, self.width),
            );
        }
        if self.width % 4 != 0 {
            return fail(
                "model.width",
                "must be divisible by 4 (2-D sinusoidal positional embedding)".into(),
            );
        }
        if self.mlp_hidden == 0 {
            return fail("model.mlp_hidden", "must be > 0".into());
        }
        if self.patch == 0 || self.image == 0 || self.image % self.patch != 0 {
            return fail(
                "model.patch",
                format!("image ({}) must be divisible by patch ({})", self.image, self.patch),
            );
        }
        if self.channels == 0 {
            return fail("model.channels", "must be > 0".into());
        }
        if self.n_reg > 0 {
            if self.cond_mode == CondMode::None {
                return fail("model.n_reg", "requires cond_mode registers or in_context".into());
            }
            if self.reg_start > self.reg_end || self.reg_end >= self.depth {
                return fail(
                    "model.reg_end",
                    format!(
                        "need 0 <= reg_start ({}) <= reg_end ({}) < depth ({})",
                        self.reg_start, self.reg_end, self.depth
                    ),
                );
            }
        }
        if self.cond_mode == CondMode::InContext && self.num_classes == 0 {
            return fail("model.num_classes", "in_context conditioning needs classes".into());
        }
        match self.dual.mode {
            DualMode::Single => {
                if !self.dual.dualize.is_empty() {
                    return fail("model.dual.dualize", "must be empty in single mode".into());
                }
            }
            DualMode::FullDual | DualMode::CompactDual => {
                if self.dual.dualize.is_empty() {
                    return fail("model.dual.dualize", "dual mode with nothing dualized".into());
                }
                let mut seen = self.dual.dualize.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != self.dual.dualize.len() {
                    return fail("model.dual.dualize", "duplicate component".into());
                }
            }
        }
        if self.lora_rank == 0
            && self.dual.mode == DualMode::CompactDual
            && (self.dual.has(DualComponent::Adaln) || self.dual.has(DualComponent::Attention))
        {
            return fail("model.lora_rank", "compact adaLN/attention needs lora_rank > 0".into());
        }
        Ok(())
    }
}

/// Time-sampling distribution used during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDist {
    Uniform,
    LogitNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub label_dropout: f64,
    pub seed: u64,
    pub warmup: usize,
    pub grad_accum: usize,
    pub ckpt_every: usize,
    pub time_dist: TimeDist,
    pub logit_mu: f64,
    pub logit_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            steps: 2000,
            lr: 1e-4,
            weight_decay: 1e-4,
            ema_decay: 0.9999,
            label_dropout: 0.1,
            seed: 42,
            warmup: 500,
            grad_accum: 1,
            ckpt_every: 500,
            time_dist: TimeDist::LogitNormal,
            logit_mu: 0.0,
            logit_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: &str| {
            Err(RditError::ConfigInvalid { field: field.into(), message: into_msg(message) })
        };
        if self.batch == 0 {
            return fail("train.batch", "must be positive");
        }
        if self.steps == 0 {
            return fail("train.steps", "must be positive");
        }
        if self.lr <= 0.0 {
            return fail("train.lr", "must be positive");
        }
        if self.weight_decay <= 0.0 {
            return fail("train.weight_decay", "must be positive");
        }
        if self.ema_decay <= 0.0 || self.ema_decay >= 1.0 {
            return fail("train.ema_decay", "must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return fail("train.label_dropout", "must be in [0, 1)");
        }
        if self.grad_accum == 0 {
            return fail("train.grad_accum", "must be positive");
        }
        if self.ckpt_every == 0 {
            return fail("train.ckpt_every", "must be positive");
        }
        if self.logit_sigma <= 0.0 {
            return fail("train.logit_sigma", "must be positive");
        }
        Ok(())
    }
}

fn into_msg(m: &str) -> String {
    m.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 50, guidance: 1.5 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(RditError::ConfigInvalid {
                field: "sample.steps".into(),
                message: "must be positive".into(),
            });
        }
        if self.guidance < 0.0 {
            return Err(RditError::ConfigInvalid {
                field: "sample.guidance".into(),
                message: "must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// "synthetic" or a directory of class subfolders.
    pub source: String,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: "synthetic".into(), per_class: 128, seed: 7 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(RditError::ConfigInvalid {
                field: "data.per_class".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Everything one experiment needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        preset("toy").expect("toy preset")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.data.validate()
    }
}

// ---------------------------------------------------------------------------
// Presets.
// ---------------------------------------------------------------------------

/// Named architecture presets.
///
/// B/L/H widths and head counts follow standard ViT sizing with a SwiGLU
/// inner size of round(8/3 * width), which keeps per-block parameter mass
/// equal to a 4x GELU MLP. Register windows scale the 4..11-of-12 window
/// with depth.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let (depth, width, heads, mlp_hidden, image, patch) = match name {
        "B/16" => (12, 768, 12, 2048, 256, 16),
        "L/16" => (24, 1024, 16, 2730, 256, 16),
        "H/16" => (32, 1280, 16, 3413, 256, 16),
        "B/32" => (12, 768, 12, 2048, 512, 32),
        "L/32" => (24, 1024, 16, 2730, 512, 32),
        "toy" => (8, 64, 4, 171, 32, 4),
        other => return Err(RditError::UnknownPreset(other.into())),
    };
    let toy = name == "toy";
    let cfg = ModelConfig {
        depth,
        width,
        heads,
        mlp_hidden,
        patch,
        image,
        channels: 3,
        num_classes: if toy { 4 } else { 1000 },
        cond_mode: CondMode::Registers,
        n_reg: if toy { 8 } else { 32 },
        reg_start: depth * 4 / 12,
        reg_end: depth - 1,
        dual: DualConfig::default(),
        lora_rank: 128,
    };
    debug_assert!(cfg.validate().is_ok());
    Ok(cfg)
}

pub const PRESET_NAMES: [&str; 6] = ["B/16", "L/16", "H/16", "B/32", "L/32", "toy"];

// ---------------------------------------------------------------------------
// Flat-key (de)serialization.
// ---------------------------------------------------------------------------

macro_rules! flat_keys {
    ($($key:literal => $field:expr),+ $(,)?) => {{
        let mut m: BTreeMap<String, Value> = BTreeMap::new();
        $(m.insert($key.to_string(), serde_json::to_value(&$field).expect("serializable"));)+
        m
    }};
}

/// Serialize to the flat dotted-key document (all keys present).
pub fn serialize(cfg: &ExperimentConfig) -> String {
    let m = to_flat_map(cfg);
    let mut out = String::from("{\n");
    let last = m.len().saturating_sub(1);
    for (i, (k, v)) in m.iter().enumerate() {
        out.push_str(&format!("  {}: {}", Value::String(k.clone()), v));
        if i != last {
            out.push(',');
        }
        out.push('\n');
    }
    out.push('}');
    out.push('\n');
    out
}

fn to_flat_map(cfg: &ExperimentConfig) -> BTreeMap<String, Value> {
    flat_keys! {
        "model.depth" => cfg.model.depth,
        "model.width" => cfg.model.width,
        "model.heads" => cfg.model.heads,
        "model.mlp_hidden" => cfg.model.mlp_hidden,
        "model.patch" => cfg.model.patch,
        "model.image" => cfg.model.image,
        "model.channels" => cfg.model.channels,
        "model.num_classes" => cfg.model.num_classes,
        "model.cond_mode" => cfg.model.cond_mode,
        "model.n_reg" => cfg.model.n_reg,
        "model.reg_start" => cfg.model.reg_start,
        "model.reg_end" => cfg.model.reg_end,
        "model.lora_rank" => cfg.model.lora_rank,
        "model.dual.mode" => cfg.model.dual.mode,
        "model.dual.dualize" => cfg.model.dual.dualize,
        "model.dual.adaln_full_dual_all_layers" => cfg.model.dual.adaln_full_dual_all_layers,
        "train.batch" => cfg.train.batch,
        "train.steps" => cfg.train.steps,
        "train.lr" => cfg.train.lr,
        "train.weight_decay" => cfg.train.weight_decay,
        "train.ema_decay" => cfg.train.ema_decay,
        "train.label_dropout" => cfg.train.label_dropout,
        "train.seed" => cfg.train.seed,
        "train.warmup" => cfg.train.warmup,
        "train.grad_accum" => cfg.train.grad_accum,
        "train.ckpt_every" => cfg.train.ckpt_every,
        "train.time_dist" => cfg.train.time_dist,
        "train.logit_mu" => cfg.train.logit_mu,
        "train.logit_sigma" => cfg.train.logit_sigma,
        "sample.steps" => cfg.sample.steps,
        "sample.guidance" => cfg.sample.guidance,
        "data.source" => cfg.data.source,
        "data.per_class" => cfg.data.per_class,
        "data.seed" => cfg.data.seed,
    }
}

fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &Value) -> Result<()> {
    fn de<T: serde::de::DeserializeOwned>(key: &str, v: &Value) -> Result<T> {
        serde_json::from_value(v.clone()).map_err(|e| RditError::ConfigParse {
            location: key.to_string(),
            message: e.to_string(),
        })
    }
    match key {
        "model.depth" => cfg.model.depth = de(key, value)?,
        "model.width" => cfg.model.width = de(key, value)?,
        "model.heads" => cfg.model.heads = de(key, value)?,
        "model.mlp_hidden" => cfg.model.mlp_hidden = de(key, value)?,
        "model.patch" => cfg.model.patch = de(key, value)?,
        "model.image" => cfg.model.image = de(key, value)?,
        "model.channels" => cfg.model.channels = de(key, value)?,
        "model.num_classes" => cfg.model.num_classes = de(key, value)?,
        "model.cond_mode" => cfg.model.cond_mode = de(key, value)?,
        "model.n_reg" => cfg.model.n_reg = de(key, value)?,
        "model.reg_start" => cfg.model.reg_start = de(key, value)?,
        "model.reg_end" => cfg.model.reg_end = de(key, value)?,
        "model.lora_rank" => cfg.model.lora_rank = de(key, value)?,
        "model.dual.mode" => cfg.model.dual.mode = de(key, value)?,
        "model.dual.dualize" => {
            let mut list: Vec<DualComponent> = de(key, value)?;
            list.sort();
            cfg.model.dual.dualize = list;
        }
        "model.dual.adaln_full_dual_all_layers" => {
            cfg.model.dual.adaln_full_dual_all_layers = de(key, value)?
        }
        "train.batch" => cfg.train.batch = de(key, value)?,
        "train.steps" => cfg.train.steps = de(key, value)?,
        "train.lr" => cfg.train.lr = de(key, value)?,
        "train.weight_decay" => cfg.train.weight_decay = de(key, value)?,
        "train.ema_decay" => cfg.train.ema_decay = de(key, value)?,
        "train.label_dropout" => cfg.train.label_dropout = de(key, value)?,
        "train.seed" => cfg.train.seed = de(key, value)?,
        "train.warmup" => cfg.train.warmup = de(key, value)?,
        "train.grad_accum" => cfg.train.grad_accum = de(key, value)?,
        "train.ckpt_every" => cfg.train.ckpt_every = de(key, value)?,
        "train.time_dist" => cfg.train.time_dist = de(key, value)?,
        "train.logit_mu" => cfg.train.logit_mu = de(key, value)?,
        "train.logit_sigma" => cfg.train.logit_sigma = de(key, value)?,
        "sample.steps" => cfg.sample.steps = de(key, value)?,
        "sample.guidance" => cfg.sample.guidance = de(key, value)?,
        "data.source" => cfg.data.source = de(key, value)?,
        "data.per_class" => cfg.data.per_class = de(key, value)?,
        "data.seed" => cfg.data.seed = de(key, value)?,
        unknown => {
            return Err(RditError::ConfigParse {
                location: unknown.to_string(),
                message: "unknown key".into(),
            })
        }
    }
    Ok(())
}

/// Parse a flat-key document into a config (defaults filled, validated).
pub fn load_str(doc: &str) -> Result<ExperimentConfig> {
    let root: Value = serde_json::from_str(doc).map_err(|e| RditError::ConfigParse {
        location: format!("line {}", e.line()),
        message: e.to_string(),
    })?;
    let map = root.as_object().ok_or_else(|| RditError::ConfigParse {
        location: "document root".into(),
        message: "expected a JSON object of dotted keys".into(),
    })?;
    let mut cfg = ExperimentConfig::default();
    for (k, v) in map {
        apply_key(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config document from disk; `<name>.json` is also tried.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let candidate = if path.exists() {
        path.to_path_buf()
    } else {
        let with_ext = path.with_extension("json");
        if with_ext.exists() {
            with_ext
        } else {
            return Err(RditError::ConfigParse {
                location: path.display().to_string(),
                message: "file not found".into(),
            });
        }
    };
    let doc = std::fs::read_to_string(&candidate)?;
    load_str(&doc)
}

/// Apply `key=value` overrides (after file load). Values are parsed as JSON
/// where possible, otherwise taken as strings.
pub fn apply_overrides(cfg: &mut ExperimentConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| RditError::ConfigParse {
            location: s.clone(),
            message: "expected key=value".into(),
        })?;
        let value = serde_json::from_str::<Value>(raw)
            .unwrap_or_else(|_| Value::String(raw.to_string()));
        apply_key(cfg, key, &value)?;
    }
    cfg.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_all_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(preset("XL/8"), Err(RditError::UnknownPreset(_))));
    }

    #[test]
    fn b16_preset_dimensions() {
        let cfg = preset("B/16").unwrap();
        assert_eq!((cfg.depth, cfg.width, cfg.patch, cfg.image), (12, 768, 16, 256));
        assert_eq!(cfg.n_patch(), 256);
        assert_eq!((cfg.n_reg, cfg.reg_start, cfg.reg_end), (32, 4, 11));
    }

    #[test]
    fn toy_preset_register_window() {
        let cfg = preset("toy").unwrap();
        assert_eq!((cfg.depth, cfg.width, cfg.image, cfg.patch), (8, 64, 32, 4));
        assert_eq!((cfg.n_reg, cfg.reg_start, cfg.reg_end), (8, 2, 7));
    }

    #[test]
    fn register_window_out_of_range_rejected() {
        let mut cfg = preset("B/16").unwrap();
        cfg.reg_end = 12; // depth is 12, max valid index is 11
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("reg_end"), "{err}");
    }

    #[test]
    fn table4_window_accepted() {
        let mut cfg = preset("B/16").unwrap();
        cfg.n_reg = 32;
        cfg.reg_start = 4;
        cfg.reg_end = 11;
        cfg.validate().unwrap();
    }

    #[test]
    fn single_mode_with_dualize_rejected() {
        let mut cfg = preset("B/16").unwrap();
        cfg.dual.dualize = vec![DualComponent::Mlp];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn in_context_needs_classes() {
        let mut cfg = preset("toy").unwrap();
        cfg.cond_mode = CondMode::InContext;
        cfg.num_classes = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let doc = r#"{ "model.depht": 12 }"#;
        let err = load_str(doc).unwrap_err();
        assert!(err.to_string().contains("model.depht"), "{err}");
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = load_str(r#"{ "model.width": 128, "model.heads": 8 }"#).unwrap();
        assert_eq!(cfg.model.width, 128);
        assert_eq!(cfg.model.depth, preset("toy").unwrap().depth);
        assert_eq!(cfg.train.batch, TrainConfig::default().batch);
    }

    #[test]
    fn overrides_apply_after_load() {
        let mut cfg = load_str("{}").unwrap();
        apply_overrides(
            &mut cfg,
            &[
                "train.lr=0.001".to_string(),
                "model.dual.mode=compact_dual".to_string(),
                r#"model.dual.dualize=["mlp","adaln","rmsnorm"]"#.to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.model.dual.mode, DualMode::CompactDual);
        assert_eq!(
            cfg.model.dual.dualize,
            vec![DualComponent::Adaln, DualComponent::Mlp, DualComponent::Rmsnorm]
        );
    }

    #[test]
    fn bad_override_naming_invariant() {
        let mut cfg = load_str("{}").unwrap();
        let err = apply_overrides(&mut cfg, &["train.ema_decay=1.5".to_string()]).unwrap_err();
        assert!(err.to_string().contains("ema_decay"), "{err}");
    }

    fn arb_valid_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            2usize..6,            // depth
            prop::sample::select(vec![8usize, 16, 32]), // width (div by 4)
            prop::sample::select(vec![1usize, 2, 4]),   // heads
            1usize..64,           // mlp_hidden
            prop::sample::select(vec![(8usize, 2usize), (8, 4), (16, 4)]), // (image, patch)
            0usize..3,            // cond selector
            0usize..8,            // n_reg
            any::<bool>(),        // dual?
        )
            .prop_flat_map(|(depth, width, heads, mlp, (image, patch), cond, n_reg, dual)| {
                (Just((depth, width, heads, mlp, image, patch, cond, n_reg, dual)), 0..depth, 0..depth)
            })
            .prop_map(|((depth, width, heads, mlp, image, patch, cond, n_reg, dual), a, b)| {
                let cond_mode = match cond {
                    0 => CondMode::None,
                    1 => CondMode::Registers,
                    _ => CondMode::InContext,
                };
                let n_reg = if cond_mode == CondMode::None { 0 } else { n_reg };
                let mut cfg = ExperimentConfig::default();
                cfg.model = ModelConfig {
                    depth,
                    width,
                    heads,
                    mlp_hidden: mlp,
                    patch,
                    image,
                    channels: 3,
                    num_classes: 5,
                    cond_mode,
                    n_reg,
                    reg_start: a.min(b),
                    reg_end: a.max(b),
                    dual: if dual && n_reg > 0 {
                        DualConfig {
                            mode: DualMode::CompactDual,
                            dualize: vec![DualComponent::Adaln, DualComponent::Mlp],
                            adaln_full_dual_all_layers: false,
                        }
                    } else {
                        DualConfig::default()
                    },
                    lora_rank: 4,
                };
                cfg
            })
            .prop_filter("valid", |cfg| cfg.validate().is_ok())
    }

    proptest! {
        #[test]
        fn serialize_then_load_round_trips(cfg in arb_valid_config()) {
            let doc = serialize(&cfg);
            let restored = load_str(&doc).unwrap();
            prop_assert_eq!(cfg, restored);
        }
    }
}
