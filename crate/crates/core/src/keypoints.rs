//! Keypoint extraction: block-average downsampling, a U-Net producing
//! per-keypoint heatmap volumes, and soft-argmax over normalized cell
//! centers.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::cell_center;
use crate::nn::{conv_spec, Conv, UNet, UNetShape};
use crate::ops;
use crate::tensor::{Tensor, TensorError};
use crate::weights::{WeightError, WeightSpec, WeightStore};

/// Per-frame 3D keypoints in normalized `[-1, 1]` coordinates, `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    points: Vec<[f32; 3]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("keypoint set is empty".into()));
        }
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|v| !v.is_finite() || v.abs() > 1.0))
        {
            return Err(Error::Malformed(format!(
                "keypoint {i} {p:?} is outside [-1, 1]"
            )));
        }
        Ok(KeypointSet { points })
    }

    pub fn splat(k: usize, p: [f32; 3]) -> Result<Self> {
        Self::new(vec![p; k])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }
}

/// Normalized heatmaps `[K, D, H, W]`; each keypoint's volume sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapVolume {
    values: Tensor,
}

impl HeatmapVolume {
    /// Joint softmax over each keypoint's `D·H·W` cells.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        logits.expect_rank("heatmaps", 4)?;
        let k = logits.dim(0);
        let cells = logits.len() / k;
        let flat = logits.clone().reshape(&[k, cells])?;
        let soft = ops::softmax_axis(&flat, 1)?;
        Ok(HeatmapVolume {
            values: soft.reshape(logits.shape())?,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// `s`×`s` block average of a `[3,H,W]` frame.
pub fn downsample_frame(frame: &Tensor, s: usize) -> Result<Tensor> {
    frame.expect_rank("downsample_frame", 3)?;
    Ok(ops::block_average(frame, s)?)
}

/// Soft-argmax: softmax over all cells of each keypoint volume, then the
/// expectation of the normalized cell-center coordinates.
pub fn heatmaps_to_keypoints(logits: &Tensor) -> Result<KeypointSet> {
    logits.expect_rank("heatmaps_to_keypoints", 4)?;
    if !logits.is_finite() {
        return Err(TensorError::Invalid {
            op: "heatmaps_to_keypoints",
            msg: "non-finite logits".into(),
        }
        .into());
    }
    let (k, d, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let cells = d * h * w;
    let xs: Vec<f64> = (0..w).map(|i| cell_center(i, w) as f64).collect();
    let ys: Vec<f64> = (0..h).map(|i| cell_center(i, h) as f64).collect();
    let zs: Vec<f64> = (0..d).map(|i| cell_center(i, d) as f64).collect();
    let mut points = Vec::with_capacity(k);
    let mut weights = vec![0f64; cells];
    for vol in logits.data().chunks(cells) {
        let max = vol.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut total = 0f64;
        for (wt, &v) in weights.iter_mut().zip(vol) {
            *wt = (v as f64 - max).exp();
            total += *wt;
        }
        let mut acc = [0f64; 3];
        for (idx, &wt) in weights.iter().enumerate() {
            let p = wt / total;
            acc[0] += p * xs[idx % w];
            acc[1] += p * ys[(idx / w) % h];
            acc[2] += p * zs[idx / (w * h)];
        }
        points.push(acc.map(|v| v.clamp(-1.0, 1.0) as f32));
    }
    KeypointSet::new(points)
}

/// Frame → keypoints network: U-Net followed by a 1×1 projection to `K·D`
/// heatmap channels.
#[derive(Clone, Debug)]
pub struct KeypointExtractor {
    keypoints: usize,
    depth: usize,
    downsample: usize,
    levels: usize,
    unet: UNet,
    head: Conv,
}

fn extractor_shape(cfg: &ModelConfig) -> UNetShape {
    UNetShape {
        in_channels: 3,
        base: cfg.extractor_channels,
        levels: cfg.extractor_levels,
    }
}

impl KeypointExtractor {
    pub const PREFIX: &'static str = "extractor";

    pub fn weight_spec(cfg: &ModelConfig) -> WeightSpec {
        let mut spec = WeightSpec::default();
        extractor_shape(cfg).spec(&mut spec, Self::PREFIX);
        conv_spec(
            &mut spec,
            "extractor.head",
            cfg.extractor_channels,
            cfg.keypoints * cfg.depth,
            1,
        );
        spec
    }

    pub fn load(store: &WeightStore, cfg: &ModelConfig) -> std::result::Result<Self, WeightError> {
        Ok(KeypointExtractor {
            keypoints: cfg.keypoints,
            depth: cfg.depth,
            downsample: cfg.downsample,
            levels: cfg.extractor_levels,
            unet: UNet::load(store, Self::PREFIX, extractor_shape(cfg))?,
            head: Conv::load(
                store,
                "extractor.head",
                cfg.extractor_channels,
                cfg.keypoints * cfg.depth,
                1,
            )?,
        })
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    /// Raw heatmap logits `[K, D, h, w]` for an already downsampled frame.
    pub fn unet_forward(&self, exec: Exec, frame: &Tensor) -> Result<Tensor> {
        frame.expect_rank("unet_forward", 3)?;
        frame.expect_axis("unet_forward", 0, "channels", 3)?;
        let m = 1 << self.levels;
        let (h, w) = (frame.dim(1), frame.dim(2));
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "U-Net input {w}x{h} is not divisible by {m}"
            )));
        }
        let features = self.unet.forward(exec, frame)?;
        let logits = self.head.forward(exec, &features)?;
        Ok(logits.reshape(&[self.keypoints, self.depth, h, w])?)
    }

    pub fn extract(&self, exec: Exec, frame: &Tensor) -> Result<KeypointSet> {
        let small = downsample_frame(frame, self.downsample)?;
        let logits = self.unet_forward(exec, &small)?;
        heatmaps_to_keypoints(&logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_block_mean() {
        let f = Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(downsample_frame(&f, 2).unwrap().data(), &[3.0]);
        let f = Tensor::from_fn(&[3, 4, 6], |i| i as f32);
        assert_eq!(downsample_frame(&f, 1).unwrap(), f);
        assert!(downsample_frame(&f, 4).is_err());
        let c = Tensor::full(&[3, 8, 8], 0.25);
        assert_eq!(downsample_frame(&c, 4).unwrap(), Tensor::full(&[3, 2, 2], 0.25));
    }

    #[test]
    fn uniform_logits_give_centroid() {
        let kp = heatmaps_to_keypoints(&Tensor::full(&[15, 4, 6, 8], 0.3)).unwrap();
        assert_eq!(kp.len(), 15);
        for p in kp.points() {
            for v in p {
                assert!(v.abs() < 1e-6, "{p:?}");
            }
        }
    }

    #[test]
    fn saturated_cell_wins() {
        let mut logits = Tensor::zeros(&[2, 4, 8, 8]);
        let at = logits.offset(&[1, 3, 2, 5]);
        logits.data_mut()[at] = 1e4;
        let kp = heatmaps_to_keypoints(&logits).unwrap();
        let p = kp.points()[1];
        assert!((p[0] - cell_center(5, 8)).abs() < 1e-4);
        assert!((p[1] - cell_center(2, 8)).abs() < 1e-4);
        assert!((p[2] - cell_center(3, 4)).abs() < 1e-4);
    }

    #[test]
    fn keypoint_set_bounds() {
        assert!(KeypointSet::new(vec![[1.0, -1.0, 0.0]]).is_ok());
        assert!(KeypointSet::new(vec![[1.01, 0.0, 0.0]]).is_err());
        assert!(KeypointSet::new(vec![[f32::NAN, 0.0, 0.0]]).is_err());
        assert!(KeypointSet::new(vec![]).is_err());
    }

    #[test]
    fn heatmap_volumes_normalize() {
        let logits = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 31) % 13) as f32 * 0.7 - 4.0);
        let hv = HeatmapVolume::from_logits(&logits).unwrap();
        for vol in hv.values().data().chunks(32) {
            let s: f64 = vol.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
