//! Feature network (backbone + four-branch pyramid) and per-pixel
//! hypercolumn gathering.

mod gather;
mod net;
mod plan;

pub use gather::{gather_batch, gather_hypercolumn, scatter_batch_grad, Hypercolumn, Segment};
pub use net::{FeatureNet, LayerInfo, Registry};
pub use plan::{pyramid_windows, FeatureNetConfig, LayerShape, NetPlan};

/// Layers whose features make up a hypercolumn, in concatenation order.
pub const HYPERCOLUMN_LAYERS: [&str; 7] = [
    "conv3", "conv4", "conv5", "conv6_1", "conv6_2", "conv6_3", "conv6_4",
];

/// Pyramid pool sizes relative to the conv5 side (2, 4, 7, 14 on a 28-cell map).
pub const PYRAMID_RATIOS: [f64; 4] = [2.0 / 28.0, 4.0 / 28.0, 7.0 / 28.0, 14.0 / 28.0];
