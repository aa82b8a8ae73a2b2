use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvMap, KvWriter};
use crate::processing::patch_count;
use crate::tsvdr::TruncationPolicy;

/// Which parts of the framework a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// TSVDR denoising and the enhanced embedding.
    Full,
    /// TSVDR denoising with a plain projection embedding.
    DataProcessingOnly,
    /// Enhanced embedding without denoising.
    LocalEnhancementOnly,
    /// Moving-average trend/seasonal split, each part through its own
    /// enhanced stack, no denoising.
    Seasonal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::DataProcessingOnly,
        Variant::LocalEnhancementOnly,
        Variant::Seasonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DataProcessingOnly => "data_processing_only",
            Variant::LocalEnhancementOnly => "local_enhancement_only",
            Variant::Seasonal => "seasonal",
        }
    }

    pub fn embedding(self) -> Embedding {
        match self {
            Variant::DataProcessingOnly => Embedding::Plain,
            _ => Embedding::Enhanced,
        }
    }

    pub fn uses_tsvdr(self) -> bool {
        matches!(self, Variant::Full | Variant::DataProcessingOnly)
    }

    pub fn branches(self) -> usize {
        if self == Variant::Seasonal {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    Enhanced,
    Plain,
}

impl Embedding {
    pub fn name(self) -> &'static str {
        match self {
            Embedding::Enhanced => "enhanced",
            Embedding::Plain => "plain",
        }
    }
}

impl FromStr for Embedding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhanced" => Ok(Embedding::Enhanced),
            "plain" => Ok(Embedding::Plain),
            _ => Err(Error::Config(format!("unknown embedding {s:?}"))),
        }
    }
}

/// Architecture and preprocessing hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub truncation: TruncationPolicy,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub embedding: Embedding,
    pub variant: Variant,
    /// Moving-average window of the seasonal variant.
    pub ma_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 432,
            horizon: 144,
            patch_len: 16,
            stride: 8,
            truncation: TruncationPolicy::default(),
            d_model: 128,
            n_heads: 8,
            n_layers: 3,
            d_ff: 256,
            kernel_size: 3,
            dilations: vec![1, 2],
            dropout: 0.0,
            embedding: Embedding::Enhanced,
            variant: Variant::Full,
            ma_window: 25,
        }
    }
}

const KEYS: [&str; 16] = [
    "lookback",
    "horizon",
    "patch_len",
    "stride",
    "tsvdr_mode",
    "tsvdr_threshold",
    "d_model",
    "n_heads",
    "n_layers",
    "d_ff",
    "kernel_size",
    "dilations",
    "dropout",
    "embedding",
    "variant",
    "ma_window",
];

impl ModelConfig {
    /// The tiny configuration used for full-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            lookback: 16,
            horizon: 3,
            patch_len: 4,
            stride: 2,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            d_ff: 8,
            ma_window: 5,
            ..Default::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.embedding = variant.embedding();
        self
    }

    pub fn num_patches(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.stride).unwrap_or(0)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.horizon == 0 || self.lookback == 0 {
            return cfg("lookback and horizon must be >= 1".into());
        }
        patch_count(self.lookback, self.patch_len, self.stride).map_err(|e| Error::Config(e.to_string()))?;
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return cfg(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.kernel_size == 0 {
            return cfg("d_ff and kernel_size must be >= 1".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return cfg("dilations must be a non-empty list of positive integers".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} not in [0, 1)", self.dropout));
        }
        self.truncation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.embedding != self.variant.embedding() {
            return cfg(format!(
                "variant {} requires embedding {}",
                self.variant,
                self.variant.embedding().name()
            ));
        }
        if self.variant == Variant::Seasonal && (self.ma_window == 0 || self.ma_window >= self.lookback) {
            return Err(Error::Parameter(format!(
                "moving-average window {} must be in 1..{}",
                self.ma_window, self.lookback
            )));
        }
        Ok(())
    }

    /// Reads model keys from `map`, starting from the defaults. A variant
    /// given without an embedding selects the variant's embedding.
    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let mut c = ModelConfig::default();
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = map.take($key)? {
                    $slot = v;
                }
            };
        }
        field!("lookback", c.lookback);
        field!("horizon", c.horizon);
        field!("patch_len", c.patch_len);
        field!("stride", c.stride);
        field!("d_model", c.d_model);
        field!("n_heads", c.n_heads);
        field!("n_layers", c.n_layers);
        field!("d_ff", c.d_ff);
        field!("kernel_size", c.kernel_size);
        field!("dropout", c.dropout);
        field!("ma_window", c.ma_window);
        if let Some(d) = map.take_list("dilations")? {
            c.dilations = d;
        }
        let mode: Option<String> = map.take("tsvdr_mode")?;
        let threshold: Option<f64> = map.take("tsvdr_threshold")?;
        c.truncation = match (mode.as_deref(), threshold) {
            (None, None) => c.truncation,
            (Some("absolute"), Some(t)) => TruncationPolicy::Absolute(t),
            (Some("relative"), Some(t)) | (None, Some(t)) => TruncationPolicy::Relative(t),
            (Some("relative"), None) => TruncationPolicy::default(),
            (Some(m), _) => {
                return Err(Error::Config(format!(
                    "tsvdr_mode {m:?} needs a tsvdr_threshold and must be absolute or relative"
                )))
            }
        };
        if let Some(v) = map.take::<String>("variant")? {
            c = c.with_variant(v.parse()?);
        }
        if let Some(e) = map.take::<String>("embedding")? {
            c.embedding = e.parse()?;
        }
        Ok(c)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        let dil: Vec<String> = self.dilations.iter().map(usize::to_string).collect();
        w.put("lookback", self.lookback)
            .put("horizon", self.horizon)
            .put("patch_len", self.patch_len)
            .put("stride", self.stride)
            .put("tsvdr_mode", self.truncation.mode_name())
            .put("tsvdr_threshold", fmt_f64(self.truncation.value()))
            .put("d_model", self.d_model)
            .put("n_heads", self.n_heads)
            .put("n_layers", self.n_layers)
            .put("d_ff", self.d_ff)
            .put("kernel_size", self.kernel_size)
            .put("dilations", dil.join(","))
            .put("dropout", fmt_f64(self.dropout))
            .put("embedding", self.embedding.name())
            .put("variant", self.variant)
            .put("ma_window", self.ma_window);
    }

    /// Names of every key [`ModelConfig::from_kv`] understands.
    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }
}
