//! Vector-neuron layers: the SE(3)-equivariant family (row-stochastic
//! weights, learned origins) and the SO(3)-equivariant family it extends.

pub mod contract;
pub mod func;
pub mod nn;

pub use contract::{Contract, OutputAction};
pub use func::{
    channel_mean_norms, translation_invariant, vn_batchnorm, vn_invariant, vn_leaky_relu, vn_linear, vn_meanpool,
    vn_relu, vnt_leaky_relu, vnt_linear, vnt_maxpool, vnt_relu, MaxPoolSelection, RowStochasticWeights,
    VectorFeature, VectorFeatureSet,
};
pub use nn::{
    run_stack, run_stack_features, Ctx, Features, Layer, LayerKind, Mode, Named, NonlinearityConfig, ParamId, ParamStore,
};
