//! Sparse 2D feature maps, differentiable layers, Adam and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod mat;
pub mod optim;
pub mod param;
pub mod sparse;
pub mod tape;

pub use layers::{attention, mlp3, Attention, Conv, Linear, Mlp3, ResBlock};
pub use mat::Mat;
pub use optim::{adam_step, Adam};
pub use param::{ParamId, ParamStore, Parameter};
pub use sparse::{
    pointwise, sparse_avg_pool, strided_sparse_conv, submanifold_conv, upsample_concat, Pointwise,
    SparseFeatureMap, SparseLayout,
};
pub use tape::{CircleGroups, CircleParams, Graph, Var};
pub mod gradcheck;
