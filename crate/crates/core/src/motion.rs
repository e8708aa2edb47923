//! Sparse-to-dense motion: per-keypoint constant displacement candidates plus
//! a background identity candidate, Gaussian heatmap guidance, and a U-Net
//! predicting a candidate mask and an occlusion map. The dense flow is the
//! per-cell mask-weighted combination of the candidates.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{cell_center, grid_sample_with, SampleGrid};
use crate::keypoints::KeypointSet;
use crate::nn::{conv_spec, Conv, UNet, UNetShape};
use crate::ops;
use crate::tensor::{Tensor, TensorError};
use crate::weights::{WeightError, WeightSpec, WeightStore};

/// `(D, H, W)` of the motion grid.
pub type GridShape = (usize, usize, usize);

fn check_pair(a: &KeypointSet, b: &KeypointSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(crate::codec::CodecError::KeypointCount {
            expected: a.len(),
            got: b.len(),
        }
        .into());
    }
    Ok(())
}

fn grid_coords(shape: GridShape) -> Vec<[f64; 3]> {
    let (d, h, w) = shape;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push([
                    cell_center(x, w) as f64,
                    cell_center(y, h) as f64,
                    cell_center(z, d) as f64,
                ]);
            }
        }
    }
    out
}

/// `H_k(p) = exp(−‖grid(p) − kp_k‖² / (2σ²))`, shape `[K, D, H, W]`.
pub fn gaussian_heatmap(kps: &KeypointSet, grid: GridShape, sigma2: f32) -> Result<Tensor> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!("sigma2 must be positive, got {sigma2}")));
    }
    let coords = grid_coords(grid);
    let denom = 2.0 * sigma2 as f64;
    let mut data = Vec::with_capacity(kps.len() * coords.len());
    for kp in kps.points() {
        let kp = kp.map(|v| v as f64);
        data.extend(coords.iter().map(|c| {
            let d2: f64 = (0..3).map(|a| (c[a] - kp[a]).powi(2)).sum();
            (-d2 / denom).exp() as f32
        }));
    }
    let (d, h, w) = grid;
    Ok(Tensor::new(&[kps.len(), d, h, w], data)?)
}

/// `H(kp_inter) − H(kp_ref)`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapDiff {
    values: Tensor,
}

impl HeatmapDiff {
    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

pub fn heatmap_difference(
    kp_ref: &KeypointSet,
    kp_inter: &KeypointSet,
    grid: GridShape,
    sigma2: f32,
) -> Result<HeatmapDiff> {
    check_pair(kp_ref, kp_inter)?;
    let a = gaussian_heatmap(kp_inter, grid, sigma2)?;
    let b = gaussian_heatmap(kp_ref, grid, sigma2)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(HeatmapDiff {
        values: Tensor::new(a.shape(), data)?,
    })
}

/// Warp candidates `[K+1, D, H, W, 3]`: candidate 0 is the identity grid,
/// candidate `k ≥ 1` is the identity shifted by `kp_ref[k−1] − kp_inter[k−1]`
/// (a backward map into the reference).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMotionField {
    candidates: Tensor,
}

impl SparseMotionField {
    pub fn new(candidates: Tensor) -> Result<Self> {
        if candidates.rank() != 5 || candidates.dim(4) != 3 {
            return Err(TensorError::Invalid {
                op: "SparseMotionField",
                msg: format!("expected [K+1,D,H,W,3], got {:?}", candidates.shape()),
            }
            .into());
        }
        Ok(SparseMotionField { candidates })
    }

    pub fn candidates(&self) -> &Tensor {
        &self.candidates
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.dim(0)
    }

    pub fn grid_shape(&self) -> GridShape {
        (
            self.candidates.dim(1),
            self.candidates.dim(2),
            self.candidates.dim(3),
        )
    }

    pub fn candidate(&self, k: usize) -> SampleGrid {
        let (d, h, w) = self.grid_shape();
        let n = d * h * w * 3;
        let data = self.candidates.data()[k * n..(k + 1) * n].to_vec();
        SampleGrid::new(Tensor::new(&[d, h, w, 3], data).expect("slice of a valid field"))
            .expect("candidate grids are volumetric")
    }
}

pub fn sparse_motion(
    kp_ref: &KeypointSet,
    kp_inter: &KeypointSet,
    grid: GridShape,
) -> Result<SparseMotionField> {
    check_pair(kp_ref, kp_inter)?;
    let (d, h, w) = grid;
    let identity = SampleGrid::identity(d, h, w).into_tensor();
    let mut data = Vec::with_capacity(identity.len() * (kp_ref.len() + 1));
    data.extend_from_slice(identity.data());
    for (r, i) in kp_ref.points().iter().zip(kp_inter.points()) {
        let shift = [r[0] - i[0], r[1] - i[1], r[2] - i[2]];
        data.extend(
            identity
                .data()
                .chunks(3)
                .flat_map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]),
        );
    }
    SparseMotionField::new(Tensor::new(&[kp_ref.len() + 1, d, h, w, 3], data)?)
}

/// Warps `texture [C,D,H,W]` with every candidate; channel block `k` of the
/// result is the texture sampled through candidate `k`.
pub fn coarse_deform(exec: Exec, texture: &Tensor, sparse: &SparseMotionField) -> Result<Tensor> {
    texture.expect_rank("coarse_deform", 4)?;
    let (c, d, h, w) = (texture.dim(0), texture.dim(1), texture.dim(2), texture.dim(3));
    let mut data = Vec::with_capacity(texture.len() * sparse.num_candidates());
    for k in 0..sparse.num_candidates() {
        let warped = grid_sample_with(exec, texture, &sparse.candidate(k))?;
        data.extend_from_slice(warped.data());
    }
    Ok(Tensor::new(&[sparse.num_candidates() * c, d, h, w], data)?)
}

/// `flow(p) = Σ_k mask[k](p) · candidates[k](p)`.
///
/// Terms are added in sorted order, so the result does not depend on the
/// order of the candidates.
pub fn compose_flow(mask: &Tensor, sparse: &SparseMotionField) -> Result<Tensor> {
    mask.expect_rank("compose_flow", 4)?;
    let n = sparse.num_candidates();
    let (d, h, w) = sparse.grid_shape();
    mask.expect_axis("compose_flow", 0, "candidates", n)?;
    mask.expect_axis("compose_flow", 1, "depth", d)?;
    mask.expect_axis("compose_flow", 2, "height", h)?;
    mask.expect_axis("compose_flow", 3, "width", w)?;
    let cells = d * h * w;
    let m = mask.data();
    let cand = sparse.candidates().data();
    let mut out = vec![0f32; cells * 3];
    let mut terms = vec![0f64; n];
    for p in 0..cells {
        for a in 0..3 {
            for (k, t) in terms.iter_mut().enumerate() {
                *t = m[k * cells + p] as f64 * cand[(k * cells + p) * 3 + a] as f64;
            }
            terms.sort_by(f64::total_cmp);
            out[p * 3 + a] = terms.iter().sum::<f64>() as f32;
        }
    }
    Ok(Tensor::new(&[d, h, w, 3], out)?)
}

/// Dense motion for one inter frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMotion {
    /// `[D, H, W, 3]`
    pub flow: Tensor,
    /// `[1, H, W]`, sigmoid output
    pub occlusion: Tensor,
    /// `[K+1, D, H, W]`, softmax over candidates
    pub mask: Tensor,
}

impl DenseMotion {
    pub fn flow_grid(&self) -> SampleGrid {
        SampleGrid::new(self.flow.clone()).expect("flow is a volumetric grid")
    }

    /// Writes `<stem>.flow.f32`, `<stem>.occlusion.f32`, `<stem>.mask.f32`
    /// (raw little-endian) and a `<stem>.json` shape sidecar.
    pub fn dump(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Shapes<'a> {
            flow: &'a [usize],
            occlusion: &'a [usize],
            mask: &'a [usize],
            dtype: &'static str,
            byte_order: &'static str,
        }
        for (name, t) in [("flow", &self.flow), ("occlusion", &self.occlusion), ("mask", &self.mask)] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("{stem}.{name}.f32")),
            )?);
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
            f.flush()?;
        }
        let shapes = Shapes {
            flow: self.flow.shape(),
            occlusion: self.occlusion.shape(),
            mask: self.mask.shape(),
            dtype: "f32",
            byte_order: "little",
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_vec_pretty(&shapes).map_err(std::io::Error::other)?,
        )
    }
}

/// U-Net over `concat(heatmap diff, coarse features)` with a mask head and
/// an occlusion head.
#[derive(Clone, Debug)]
pub struct DenseMotionNet {
    keypoints: usize,
    depth: usize,
    texture_channels: usize,
    sigma2: f32,
    unet: UNet,
    mask_head: Conv,
    occlusion_head: Conv,
}

fn motion_shape(cfg: &ModelConfig) -> UNetShape {
    let k = cfg.keypoints;
    UNetShape {
        in_channels: (k + (k + 1) * cfg.texture_channels) * cfg.depth,
        base: cfg.motion_channels,
        levels: cfg.motion_levels,
    }
}

impl DenseMotionNet {
    pub const PREFIX: &'static str = "motion";

    pub fn weight_spec(cfg: &ModelConfig) -> WeightSpec {
        let mut spec = WeightSpec::default();
        motion_shape(cfg).spec(&mut spec, Self::PREFIX);
        conv_spec(
            &mut spec,
            "motion.mask",
            cfg.motion_channels,
            (cfg.keypoints + 1) * cfg.depth,
            3,
        );
        conv_spec(&mut spec, "motion.occlusion", cfg.motion_channels, 1, 3);
        spec
    }

    pub fn load(store: &WeightStore, cfg: &ModelConfig) -> std::result::Result<Self, WeightError> {
        Ok(DenseMotionNet {
            keypoints: cfg.keypoints,
            depth: cfg.depth,
            texture_channels: cfg.texture_channels,
            sigma2: cfg.sigma2,
            unet: UNet::load(store, Self::PREFIX, motion_shape(cfg))?,
            mask_head: Conv::load(
                store,
                "motion.mask",
                cfg.motion_channels,
                (cfg.keypoints + 1) * cfg.depth,
                3,
            )?,
            occlusion_head: Conv::load(store, "motion.occlusion", cfg.motion_channels, 1, 3)?,
        })
    }

    /// Mask `[K+1, D, H, W]` and occlusion `[1, H, W]` from the guidance
    /// tensor and coarse features.
    pub fn predict(&self, exec: Exec, diff: &HeatmapDiff, coarse: &Tensor) -> Result<(Tensor, Tensor)> {
        let (k, d) = (self.keypoints, self.depth);
        let dv = diff.values();
        dv.expect_rank("dense_motion", 4)?;
        dv.expect_axis("dense_motion", 0, "keypoints", k)?;
        dv.expect_axis("dense_motion", 1, "depth", d)?;
        coarse.expect_rank("dense_motion", 4)?;
        coarse.expect_axis("dense_motion", 0, "channels", (k + 1) * self.texture_channels)?;
        coarse.expect_axis("dense_motion", 1, "depth", d)?;
        let (h, w) = (dv.dim(2), dv.dim(3));
        coarse.expect_axis("dense_motion", 2, "height", h)?;
        coarse.expect_axis("dense_motion", 3, "width", w)?;

        let guide = dv.clone().reshape(&[k * d, h, w])?;
        let feats = coarse.clone().reshape(&[coarse.dim(0) * d, h, w])?;
        let input = ops::elementwise(&guide, Some(&feats), ops::ElementwiseKind::ConcatChannels)?;
        let hidden = self.unet.forward(exec, &input)?;
        let mask_logits = self.mask_head.forward(exec, &hidden)?.reshape(&[k + 1, d, h, w])?;
        let mask = ops::softmax_axis(&mask_logits, 0)?;
        let occlusion = ops::sigmoid(&self.occlusion_head.forward(exec, &hidden)?);
        Ok((mask, occlusion))
    }

    /// Full motion estimation for one (reference, inter) keypoint pair.
    pub fn estimate(
        &self,
        exec: Exec,
        texture: &Tensor,
        kp_ref: &KeypointSet,
        kp_inter: &KeypointSet,
    ) -> Result<DenseMotion> {
        texture.expect_rank("estimate_motion", 4)?;
        let grid = (texture.dim(1), texture.dim(2), texture.dim(3));
        let sparse = sparse_motion(kp_ref, kp_inter, grid)?;
        let coarse = coarse_deform(exec, texture, &sparse)?;
        let diff = heatmap_difference(kp_ref, kp_inter, grid, self.sigma2)?;
        let (mask, occlusion) = self.predict(exec, &diff, &coarse)?;
        let flow = compose_flow(&mask, &sparse)?;
        Ok(DenseMotion {
            flow,
            occlusion,
            mask,
        })
    }
}
