//! Capsule network: embedding, front-end, convolutional capsules, routing to
//! class capsules, margin loss and the optional reconstruction decoder.

pub mod config;
pub mod layers;
pub mod loss;
pub mod network;
pub mod routing;

pub use config::{Frontend, ModelConfig};
pub use layers::{
    elu_gate_forward, frontend_forward, primary_capsules_forward, reconstruct_forward, DecoderParams, FrontendWeights,
    GateConvParams, PrimaryCapsuleParams,
};
pub use loss::{margin_loss_value as margin_loss, Margins};
pub use network::{CapsNet, Forward, LossVars};
pub use routing::{
    capsule_dim_perturb, classify, dynamic_route, dynamic_route_observed, static_route, ClassCapsules, Routing,
    RoutingState,
};
