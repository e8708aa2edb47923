//! Forward-only loss terms and their weighted total.
//!
//! The functional forms here are the crate's own choices: hinge spread prior
//! for keypoints, multi-scale L1 for perceptual, least-squares generator
//! side for adversarial, L1 for equivariance and vertices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{grid_sample_with, SampleGrid};
use crate::keypoints::{KeypointExtractor, KeypointSet};
use crate::ops;
use crate::synthesis::VertexSet;
use crate::tensor::{Tensor, TensorError};

pub const LAMBDA_EQU: f64 = 10.0;
pub const LAMBDA_KP: f64 = 10.0;
pub const LAMBDA_PER: f64 = 10.0;
pub const LAMBDA_ADV: f64 = 1.0;
pub const LAMBDA_VER: f64 = 100.0;

/// Default hinge radius of the keypoint spread prior.
pub const DEFAULT_TAU: f64 = 0.1;

/// `x' = a·[x, y] + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }
}

/// Thin-plate spline: affine part plus radial terms `w_i·U(|p − c_i|)` with
/// `U(r) = r² ln r²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinPlate {
    pub affine: Affine,
    pub controls: Vec<[f64; 2]>,
    pub weights: Vec<[f64; 2]>,
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// `dU/d(r²)`, used for the Jacobian.
fn tps_kernel_deriv(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2.ln() + 1.0
    }
}

impl ThinPlate {
    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let mut q = self.affine.apply(p);
        for (c, w) in self.controls.iter().zip(&self.weights) {
            let u = tps_kernel((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2));
            q[0] += w[0] * u;
            q[1] += w[1] * u;
        }
        q
    }

    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let mut j = self.affine.a;
        for (c, w) in self.controls.iter().zip(&self.weights) {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            let g = 2.0 * tps_kernel_deriv(dx * dx + dy * dy);
            for r in 0..2 {
                j[r][0] += w[r] * g * dx;
                j[r][1] += w[r] * g * dy;
            }
        }
        j
    }
}

/// Planar transform used by the equivariance term.
///
/// The image is resampled at `G(y)` for every output position `y`, so a
/// feature at `p` in the source moves to `G⁻¹(p)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Affine(Affine),
    ThinPlate(ThinPlate),
}

fn det2(j: [[f64; 2]; 2]) -> f64 {
    j[0][0] * j[1][1] - j[0][1] * j[1][0]
}

const MIN_DET: f64 = 1e-6;

impl Transform {
    pub fn identity() -> Self {
        Transform::Affine(Affine::IDENTITY)
    }

    /// The sampling map `G`.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Transform::Affine(a) => a.apply(p),
            Transform::ThinPlate(t) => t.apply(p),
        }
    }

    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        match self {
            Transform::Affine(a) => a.a,
            Transform::ThinPlate(t) => t.jacobian(p),
        }
    }

    /// Rejects transforms whose Jacobian vanishes or flips sign anywhere on
    /// a 17×17 lattice over `[-1, 1]²`.
    pub fn check_invertible(&self) -> Result<()> {
        if let Transform::ThinPlate(t) = self {
            if t.controls.len() != t.weights.len() {
                return Err(Error::Config(format!(
                    "thin-plate transform has {} controls but {} weights",
                    t.controls.len(),
                    t.weights.len()
                )));
            }
        }
        let reference = match self {
            Transform::Affine(a) => a.det(),
            Transform::ThinPlate(_) => det2(self.jacobian([0.0, 0.0])),
        };
        let n = 17;
        for iy in 0..n {
            for ix in 0..n {
                let p = [
                    -1.0 + 2.0 * ix as f64 / (n - 1) as f64,
                    -1.0 + 2.0 * iy as f64 / (n - 1) as f64,
                ];
                let d = det2(self.jacobian(p));
                if !d.is_finite() || d.abs() < MIN_DET || d.signum() != reference.signum() {
                    return Err(Error::Config(format!(
                        "transform is not invertible near ({:.3}, {:.3})",
                        p[0], p[1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// `G⁻¹(q)`: closed form for affine maps, Newton iteration otherwise.
    pub fn invert(&self, q: [f64; 2]) -> Result<[f64; 2]> {
        let solve = |j: [[f64; 2]; 2], r: [f64; 2]| -> Option<[f64; 2]> {
            let d = det2(j);
            if d.abs() < MIN_DET {
                return None;
            }
            Some([
                (j[1][1] * r[0] - j[0][1] * r[1]) / d,
                (j[0][0] * r[1] - j[1][0] * r[0]) / d,
            ])
        };
        let singular = || Error::Config("transform is not invertible".into());
        match self {
            Transform::Affine(a) => solve(a.a, [q[0] - a.t[0], q[1] - a.t[1]]).ok_or_else(singular),
            Transform::ThinPlate(_) => {
                let mut p = q;
                for _ in 0..64 {
                    let g = self.apply(p);
                    let r = [q[0] - g[0], q[1] - g[1]];
                    if r[0].abs().max(r[1].abs()) < 1e-12 {
                        return Ok(p);
                    }
                    let step = solve(self.jacobian(p), r).ok_or_else(singular)?;
                    p = [p[0] + step[0], p[1] + step[1]];
                }
                let g = self.apply(p);
                if (q[0] - g[0]).abs().max((q[1] - g[1]).abs()) < 1e-9 {
                    Ok(p)
                } else {
                    Err(Error::Config("thin-plate inverse did not converge".into()))
                }
            }
        }
    }

    /// Resamples a `[C,H,W]` image at `G` of every pixel center.
    pub fn warp_image(&self, exec: Exec, image: &Tensor) -> Result<Tensor> {
        image.expect_rank("warp_image", 3)?;
        let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
        let mut grid = SampleGrid::identity_planar(h, w).into_tensor();
        for cell in grid.data_mut().chunks_mut(2) {
            let q = self.apply([cell[0] as f64, cell[1] as f64]);
            cell[0] = q[0] as f32;
            cell[1] = q[1] as f32;
        }
        let vol = image.clone().reshape(&[c, 1, h, w])?;
        let out = grid_sample_with(exec, &vol, &SampleGrid::new(grid)?)?;
        Ok(out.reshape(&[c, h, w])?)
    }
}

/// Mean absolute x/y difference between keypoints of the transformed frame
/// and the transformed keypoints of the frame.
pub fn equivariance_loss(
    exec: Exec,
    frame: &Tensor,
    transform: &Transform,
    extractor: &KeypointExtractor,
) -> Result<f64> {
    transform.check_invertible()?;
    let base = extractor.extract(exec, frame)?;
    let warped = extractor.extract(exec, &transform.warp_image(exec, frame)?)?;
    let mut acc = 0f64;
    for (p, q) in base.points().iter().zip(warped.points()) {
        let moved = transform.invert([p[0] as f64, p[1] as f64])?;
        acc += (q[0] as f64 - moved[0]).abs() + (q[1] as f64 - moved[1]).abs();
    }
    Ok(acc / (2 * base.len()) as f64)
}

/// `Σ_{i<j} max(0, 2τ − ‖p_i − p_j‖)² + (mean z)²`.
pub fn keypoint_prior_loss(kps: &KeypointSet, tau: f64) -> f64 {
    let pts = kps.points();
    let mut spread = 0f64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            let d = (0..3)
                .map(|k| (a[k] as f64 - b[k] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            spread += (2.0 * tau - d).max(0.0).powi(2);
        }
    }
    let mean_z = pts.iter().map(|p| p[2] as f64).sum::<f64>() / pts.len() as f64;
    spread + mean_z * mean_z
}

/// Feature hook for the perceptual term: maps a `[3,H,W]` image to a list of
/// feature tensors compared by mean absolute difference.
pub trait FeatureExtractor {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

/// Raw pixels at full, half and quarter resolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelPyramid;

impl FeatureExtractor for PixelPyramid {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        image.expect_rank("perceptual_loss", 3)?;
        Ok(vec![
            image.clone(),
            ops::block_average(image, 2)?,
            ops::block_average(image, 4)?,
        ])
    }
}

fn mean_abs_diff(op: &'static str, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible {
            op,
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        }
        .into());
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn perceptual_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    perceptual_loss_with(&PixelPyramid, a, b)
}

pub fn perceptual_loss_with(fx: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible {
            op: "perceptual_loss",
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        }
        .into());
    }
    let (fa, fb) = (fx.features(a)?, fx.features(b)?);
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::Config("feature extractor returned mismatched outputs".into()));
    }
    let mut acc = 0f64;
    for (x, y) in fa.iter().zip(&fb) {
        acc += mean_abs_diff("perceptual_loss", x, y)?;
    }
    Ok(acc / fa.len() as f64)
}

/// `mean((logits − 1)²)`.
pub fn adversarial_loss_value(fake_logits: &Tensor) -> f64 {
    let sum: f64 = fake_logits
        .data()
        .iter()
        .map(|&l| (l as f64 - 1.0).powi(2))
        .sum();
    sum / fake_logits.len() as f64
}

pub fn vertex_loss(pred: &VertexSet, reference: &VertexSet) -> Result<f64> {
    mean_abs_diff("vertex_loss", pred.coords(), reference.coords())
}

/// The five unweighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub equ: f64,
    pub kp: f64,
    pub per: f64,
    pub adv: f64,
    pub ver: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub equ: f64,
    pub kp: f64,
    pub per: f64,
    pub adv: f64,
    pub ver: f64,
    pub total: f64,
}

/// Weighted sum, accumulated left to right in the order equ, kp, per, adv, ver.
pub fn total_loss(t: LossTerms) -> Result<LossBreakdown> {
    let terms = [t.equ, t.kp, t.per, t.adv, t.ver];
    if let Some(v) = terms.iter().find(|v| !v.is_finite()) {
        return Err(Error::Malformed(format!("non-finite loss term {v}")));
    }
    let lambdas = [LAMBDA_EQU, LAMBDA_KP, LAMBDA_PER, LAMBDA_ADV, LAMBDA_VER];
    let mut total = 0f64;
    for (l, v) in lambdas.iter().zip(terms) {
        total += l * v;
    }
    Ok(LossBreakdown {
        equ: t.equ,
        kp: t.kp,
        per: t.per,
        adv: t.adv,
        ver: t.ver,
        total,
    })
}

impl LossBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}
