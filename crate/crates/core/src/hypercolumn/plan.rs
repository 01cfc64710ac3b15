use serde::{Deserialize, Serialize};

use super::{HYPERCOLUMN_LAYERS, PYRAMID_RATIOS};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{conv_output_extent, pool_output_extent};

/// Backbone stride: four 2×2 max-pools.
pub const BACKBONE_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureNetConfig {
    pub in_channels: usize,
    /// Output channels of the five backbone stages.
    pub stage_channels: [usize; 5],
    /// 3×3 convolutions per stage.
    pub convs_per_stage: [usize; 5],
    /// Output depth shared by all pyramid branches.
    pub branch_channels: usize,
    /// Explicit pool windows; derived from the conv5 extent when absent.
    pub pyramid_windows: Option<[usize; 4]>,
    /// Keep probability of the dropout applied to pyramid outputs in training.
    pub pyramid_keep_prob: f64,
    pub l2_epsilon: f64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig::desk()
    }
}

impl FeatureNetConfig {
    /// Miniature backbone for 64×64 inputs.
    pub fn desk() -> Self {
        FeatureNetConfig {
            in_channels: 3,
            stage_channels: [16, 32, 32, 64, 64],
            convs_per_stage: [2; 5],
            branch_channels: 128,
            pyramid_windows: None,
            pyramid_keep_prob: 0.9,
            l2_epsilon: crate::tensor::DEFAULT_L2_EPSILON,
        }
    }

    /// VGG16 conv1–conv5 widths with 1024-deep pyramid branches.
    pub fn full_scale() -> Self {
        FeatureNetConfig {
            in_channels: 3,
            stage_channels: [64, 128, 256, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            branch_channels: 1024,
            pyramid_windows: None,
            pyramid_keep_prob: 0.5,
            l2_epsilon: crate::tensor::DEFAULT_L2_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.branch_channels == 0
            || self.stage_channels.contains(&0)
            || self.convs_per_stage.contains(&0)
        {
            return Err(invalid!("feature net widths and depths must be positive"));
        }
        if !(self.pyramid_keep_prob > 0.0 && self.pyramid_keep_prob <= 1.0) {
            return Err(invalid!(
                "pyramid keep probability must lie in (0, 1], got {}",
                self.pyramid_keep_prob
            ));
        }
        if !(self.l2_epsilon > 0.0) {
            return Err(invalid!("l2 epsilon must be positive"));
        }
        if let Some(w) = self.pyramid_windows {
            if w.contains(&0) || (0..4).any(|i| (i + 1..4).any(|j| w[i] == w[j])) {
                return Err(invalid!("pyramid windows must be 4 distinct positive sizes, got {w:?}"));
            }
        }
        Ok(())
    }

    /// Shapes of every hypercolumn layer for an `h`×`w` input, without
    /// allocating weights.
    pub fn plan(&self, h: usize, w: usize) -> Result<NetPlan> {
        self.validate()?;
        if h == 0 || w == 0 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(shape_err!(
                "input {h}×{w} must be a positive multiple of {BACKBONE_STRIDE} on both sides"
            ));
        }
        let mut layers = Vec::with_capacity(7);
        for (stage, stride) in [(2usize, 4usize), (3, 8), (4, 16)] {
            layers.push(LayerShape {
                id: HYPERCOLUMN_LAYERS[stage - 2].to_string(),
                channels: self.stage_channels[stage],
                height: h / stride,
                width: w / stride,
                stride,
            });
        }
        let (c5h, c5w) = (h / BACKBONE_STRIDE, w / BACKBONE_STRIDE);
        let windows = match self.pyramid_windows {
            Some(ws) => ws,
            None => pyramid_windows(c5h.min(c5w))?,
        };
        let mut pooled = Vec::with_capacity(4);
        for (b, &win) in windows.iter().enumerate() {
            let ph = pool_output_extent(c5h, win, win)?;
            let pw = pool_output_extent(c5w, win, win)?;
            let k = branch_kernel(ph, pw);
            let oh = conv_output_extent(ph.div_ceil(k) * k, k, k, 0)?;
            let ow = conv_output_extent(pw.div_ceil(k) * k, k, k, 0)?;
            pooled.push((ph, pw));
            layers.push(LayerShape {
                id: HYPERCOLUMN_LAYERS[3 + b].to_string(),
                channels: self.branch_channels,
                height: oh,
                width: ow,
                stride: BACKBONE_STRIDE * win * k,
            });
        }
        Ok(NetPlan {
            input: (h, w),
            conv5: (c5h, c5w),
            windows,
            pooled,
            layers,
        })
    }
}

/// Branch kernel side: 3, clamped to a smaller pooled map.
pub(crate) fn branch_kernel(ph: usize, pw: usize) -> usize {
    3.min(ph).min(pw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input pixels per feature-map cell along each axis.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NetPlan {
    pub input: (usize, usize),
    pub conv5: (usize, usize),
    pub windows: [usize; 4],
    /// Pooled map extents per pyramid branch, before the branch convolution.
    pub pooled: Vec<(usize, usize)>,
    pub layers: Vec<LayerShape>,
}

impl NetPlan {
    pub fn hypercolumn_len(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }
}

/// Four distinct pool windows for a conv5 map of side `side`, nearest to the
/// reference ratios. Divisors of `side` are used when there are enough of
/// them; otherwise any size up to `side` (the last window is clipped).
pub fn pyramid_windows(side: usize) -> Result<[usize; 4]> {
    if side < 4 {
        return Err(shape_err!(
            "conv5 side {side} is too small for four distinct pyramid windows"
        ));
    }
    let divisors: Vec<usize> = (1..=side).filter(|d| side % d == 0).collect();
    let candidates: Vec<usize> = if divisors.len() >= 4 {
        divisors
    } else {
        (1..=side).collect()
    };
    let mut out = [0usize; 4];
    let mut lo = 0; // first admissible candidate index
    for (i, ratio) in PYRAMID_RATIOS.iter().enumerate() {
        let target = ratio * side as f64;
        let hi = candidates.len() - (4 - i); // leave room for the rest
        let pick = (lo..=hi)
            .min_by(|&a, &b| {
                let da = (candidates[a] as f64 - target).abs();
                let db = (candidates[b] as f64 - target).abs();
                da.partial_cmp(&db).expect("finite").then(a.cmp(&b))
            })
            .expect("non-empty range");
        out[i] = candidates[pick];
        lo = pick + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_shapes() {
        let plan = FeatureNetConfig::full_scale().plan(448, 448).unwrap();
        assert_eq!(plan.conv5, (28, 28));
        assert_eq!(plan.windows, [2, 4, 7, 14]);
        assert_eq!(plan.pooled, vec![(14, 14), (7, 7), (4, 4), (2, 2)]);
        assert_eq!(plan.hypercolumn_len(), 256 + 512 + 512 + 4 * 1024);
    }

    #[test]
    fn desk_shapes() {
        let plan = FeatureNetConfig::desk().plan(64, 64).unwrap();
        assert_eq!(plan.conv5, (4, 4));
        assert_eq!(plan.windows, [1, 2, 3, 4]);
        assert_eq!(plan.hypercolumn_len(), 32 + 64 + 64 + 4 * 128);
        let sides: Vec<_> = plan.layers.iter().map(|l| (l.height, l.stride)).collect();
        assert_eq!(sides, vec![(16, 4), (8, 8), (4, 16), (2, 48), (1, 64), (1, 96), (1, 64)]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let err = FeatureNetConfig::desk().plan(60, 64).unwrap_err();
        assert!(err.to_string().contains("multiple of 16"));
    }

    #[test]
    fn windows_are_distinct_and_ordered() {
        for side in 4..=40 {
            let w = pyramid_windows(side).unwrap();
            assert!(w.windows(2).all(|p| p[0] < p[1]), "{side}: {w:?}");
            assert!(w[3] <= side);
        }
        assert_eq!(pyramid_windows(28).unwrap(), [2, 4, 7, 14]);
        assert!(pyramid_windows(3).is_err());
    }
}
