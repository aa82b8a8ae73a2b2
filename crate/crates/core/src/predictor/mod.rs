//! Transformer predictor and model assembly.
//!
//! Each channel's tokens get a learnable positional table (shared across
//! channels) added, pass through `n_layers` post-norm encoder layers, are
//! flattened with the token index varying slowest and are mapped to the
//! horizon by one dense layer. Channels never mix after denoising: every
//! layer acts on each `(window, channel)` sequence separately.
//!
//! ```
//! use dplet::predictor::{count_params, ModelConfig, Variant};
//!
//! let base = ModelConfig::default();
//! let seasonal = base.clone().with_variant(Variant::Seasonal);
//! assert_eq!(count_params(&seasonal), 2 * count_params(&base));
//! ```

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::{Embedding, ModelConfig, Variant};
pub use model::{
    count_params, encode, encoder_layer, head, head_param_count, model_forward, moving_average,
    param_breakdown, param_specs, seasonal_decompose, Model, Prepared,
};
pub use params::{Bound, Init, ParamSpec, ParamStore};
