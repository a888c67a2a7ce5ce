//! The two-branch masked-prediction encoder: conv feature extractor, span
//! masking, shared transformer blocks, and layer-wise fusion.

mod config;
mod layers;
mod loss;
mod mask;
mod model;

pub use config::{ConvLayer, EncoderConfig, FusionConfig, FusionVariant, MaskingConfig, Placement};
pub use layers::{Attention, Block, FusionSite};
pub use loss::{combine, masked_ce_terms, masked_prediction_loss, MaskedTerms};
pub use mask::{span_mask, MaskSet};
pub use model::{Forward, ModelSidecar, Provenance, SiteTrace, SslModel};
