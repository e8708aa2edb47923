//! Normalized coordinate grids and grid-sample warping.
//!
//! Coordinates follow the align-corners = false convention: the center of
//! cell `i` on an axis of size `S` sits at `(2i + 1)/S − 1`. The last grid
//! axis stores `(x, y, z)` = (width, height, depth) coordinates.

use crate::exec::Exec;
use crate::tensor::{Result, Tensor, TensorError};

/// Normalized center of cell `i` on an axis of `size` cells.
pub fn cell_center(i: usize, size: usize) -> f32 {
    ((2 * i + 1) as f64 - size as f64) as f32 / size as f32
}

/// Continuous cell position of a normalized coordinate.
fn unnormalize(coord: f32, size: usize) -> f64 {
    let pos = ((coord as f64 + 1.0) * size as f64 - 1.0) * 0.5;
    // Cell centers are stored as f32, so anything within a few ulps of an
    // integer position addresses that cell exactly.
    let snap = size as f64 * 4.0 * f32::EPSILON as f64;
    let r = pos.round();
    if (pos - r).abs() <= snap {
        r
    } else {
        pos
    }
}

/// Sampling grid: `[D,H,W,3]` volumetric or `[H,W,2]` planar.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    tensor: Tensor,
}

impl SampleGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match (tensor.rank(), tensor.shape().last()) {
            (4, Some(3)) | (3, Some(2)) => Ok(SampleGrid { tensor }),
            _ => Err(TensorError::Invalid {
                op: "SampleGrid",
                msg: format!(
                    "expected [D,H,W,3] or [H,W,2], got {:?}",
                    tensor.shape()
                ),
            }),
        }
    }

    /// Grid whose every cell holds its own normalized center.
    pub fn identity(depth: usize, height: usize, width: usize) -> Self {
        let t = Tensor::from_fn(&[depth, height, width, 3], |i| {
            let axis = i % 3;
            let cell = i / 3;
            let x = cell % width;
            let y = (cell / width) % height;
            let z = cell / (width * height);
            match axis {
                0 => cell_center(x, width),
                1 => cell_center(y, height),
                _ => cell_center(z, depth),
            }
        });
        SampleGrid { tensor: t }
    }

    pub fn identity_planar(height: usize, width: usize) -> Self {
        let t = Tensor::from_fn(&[height, width, 2], |i| {
            let cell = i / 2;
            if i % 2 == 0 {
                cell_center(cell % width, width)
            } else {
                cell_center(cell / width, height)
            }
        });
        SampleGrid { tensor: t }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn is_planar(&self) -> bool {
        self.tensor.rank() == 3
    }

    /// `(D, H, W)`; planar grids report depth 1.
    pub fn spatial(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        if self.is_planar() {
            (1, s[0], s[1])
        } else {
            (s[0], s[1], s[2])
        }
    }

    fn components(&self) -> usize {
        if self.is_planar() {
            2
        } else {
            3
        }
    }

    /// Coordinate triple of cell `idx` (flattened `D·H·W` index).
    fn coord(&self, idx: usize) -> [f32; 3] {
        let n = self.components();
        let v = &self.tensor.data()[idx * n..idx * n + n];
        [v[0], v[1], if n == 3 { v[2] } else { 0.0 }]
    }
}

/// Corner indices and weights of one trilinear sample with border clamping.
struct Stencil {
    idx: [usize; 8],
    w: [f64; 8],
}

fn axis_taps(coord: f32, size: usize) -> (usize, usize, f64) {
    let pos = unnormalize(coord, size).clamp(0.0, (size - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, pos - i0 as f64)
}

fn stencil(c: [f32; 3], d: usize, h: usize, w: usize) -> Stencil {
    let (x0, x1, tx) = axis_taps(c[0], w);
    let (y0, y1, ty) = axis_taps(c[1], h);
    let (z0, z1, tz) = axis_taps(c[2], d);
    let mut s = Stencil {
        idx: [0; 8],
        w: [0.0; 8],
    };
    let mut n = 0;
    for (z, wz) in [(z0, 1.0 - tz), (z1, tz)] {
        for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
            for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                s.idx[n] = (z * h + y) * w + x;
                s.w[n] = wz * wy * wx;
                n += 1;
            }
        }
    }
    s
}

/// Trilinear (bilinear when `D = 1`) sampling of a `[C,D,H,W]` input at the
/// grid coordinates, clamping out-of-range coordinates to the border.
pub fn grid_sample(input: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    grid_sample_with(Exec::default(), input, grid)
}

pub fn grid_sample_with(exec: Exec, input: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    const OP: &str = "grid_sample";
    input.expect_rank(OP, 4)?;
    let (c, d, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (gd, gh, gw) = grid.spatial();
    if grid.is_planar() && d != 1 {
        return Err(TensorError::Axis {
            op: OP,
            axis: 1,
            name: "depth",
            expected: 1,
            got: d,
        });
    }
    input.expect_axis(OP, 1, "depth", gd)?;
    input.expect_axis(OP, 2, "height", gh)?;
    input.expect_axis(OP, 3, "width", gw)?;
    if !grid.tensor().is_finite() {
        return Err(TensorError::Invalid {
            op: OP,
            msg: "grid holds non-finite coordinates".into(),
        });
    }

    let cells = d * h * w;
    let x = input.data();
    // One output row (fixed depth and height) per chunk, all channels.
    let rows = d * h;
    let mut staged = vec![0f32; rows * c * w];
    exec.for_each_chunk(&mut staged, c * w, |row, out| {
        for ox in 0..w {
            let s = stencil(grid.coord(row * w + ox), d, h, w);
            for ch in 0..c {
                let plane = &x[ch * cells..(ch + 1) * cells];
                let mut acc = 0f64;
                for (&i, &wt) in s.idx.iter().zip(&s.w) {
                    if wt != 0.0 {
                        acc += wt * plane[i] as f64;
                    }
                }
                out[ch * w + ox] = acc as f32;
            }
        }
    });
    // staged is [rows, C, W]; reorder into [C, rows, W].
    let mut out = vec![0f32; c * cells];
    for row in 0..rows {
        for ch in 0..c {
            let src = &staged[(row * c + ch) * w..(row * c + ch + 1) * w];
            out[ch * cells + row * w..ch * cells + (row + 1) * w].copy_from_slice(src);
        }
    }
    Tensor::new(&[c, d, h, w], out)
}
