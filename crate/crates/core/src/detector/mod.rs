//! Detection skeleton: boxes, feature extraction, RoI pooling, region
//! proposals, and the cascade wiring.

pub mod bbox;
pub mod cascade;
pub mod checkpoint;
pub mod features;
pub mod rpn;

pub use bbox::{decode_box, encode_box, BBox};
pub use cascade::{
    blrpn_forward, cascade_forward, BlrpnModel, CascadeModel, CascadeStage, ModelConfig,
    StageOutput,
};
pub use checkpoint::Checkpoint;
pub use features::{roi_pool, FeatureMap, ImageData, ToyBackbone};
pub use rpn::{generate_anchors, rpn_propose, RpnConfig, RpnHead};
