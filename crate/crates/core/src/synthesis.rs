//! Feature refinement, frame generation and vertex regression over the
//! warped, occlusion-gated texture feature.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::config::{ModelConfig, VERTEX_COUNT};
use crate::error::Result;
use crate::exec::Exec;
use crate::grid::{grid_sample_with, SampleGrid};
use crate::nn::{conv_spec, Conv};
use crate::ops::{self, ElementwiseKind};
use crate::tensor::Tensor;
use crate::weights::{WeightError, WeightSpec, WeightStore};

/// Encodes the decoded key-reference frame into a volumetric texture
/// feature `[C, D, H, W]` on the motion grid.
#[derive(Clone, Debug)]
pub struct TextureEncoder {
    channels: usize,
    depth: usize,
    factor: usize,
    conv: Conv,
}

impl TextureEncoder {
    pub fn weight_spec(cfg: &ModelConfig) -> WeightSpec {
        let mut spec = WeightSpec::default();
        conv_spec(&mut spec, "texture.conv", 3, cfg.texture_channels * cfg.depth, 3);
        spec
    }

    pub fn load(store: &WeightStore, cfg: &ModelConfig) -> std::result::Result<Self, WeightError> {
        Ok(TextureEncoder {
            channels: cfg.texture_channels,
            depth: cfg.depth,
            factor: 1 << cfg.generator_levels,
            conv: Conv::load(store, "texture.conv", 3, cfg.texture_channels * cfg.depth, 3)?,
        })
    }

    pub fn forward(&self, exec: Exec, frame: &Tensor) -> Result<Tensor> {
        frame.expect_rank("texture", 3)?;
        let small = ops::block_average(frame, self.factor)?;
        let (h, w) = (small.dim(1), small.dim(2));
        let feat = self.conv.forward_relu(exec, &small)?;
        Ok(feat.reshape(&[self.channels, self.depth, h, w])?)
    }
}

/// `occlusion ⊙ mean_D(warp(texture, flow))`, shape `[C, H, W]`.
pub fn refine_feature(texture: &Tensor, flow: &Tensor, occlusion: &Tensor) -> Result<Tensor> {
    refine_feature_with(Exec::default(), texture, flow, occlusion)
}

pub fn refine_feature_with(
    exec: Exec,
    texture: &Tensor,
    flow: &Tensor,
    occlusion: &Tensor,
) -> Result<Tensor> {
    texture.expect_rank("refine_feature", 4)?;
    occlusion.expect_rank("refine_feature", 3)?;
    occlusion.expect_axis("refine_feature", 0, "channels", 1)?;
    let warped = grid_sample_with(exec, texture, &SampleGrid::new(flow.clone())?)?;
    let planar = warped.mean_axis(1)?;
    Ok(ops::elementwise(&planar, Some(occlusion), ElementwiseKind::Hadamard)?)
}

/// Conv/upsample stack ending in a sigmoid; output `[3, H·2^L, W·2^L]`.
#[derive(Clone, Debug)]
pub struct FrameGenerator {
    input: Conv,
    ups: Vec<Conv>,
    output: Conv,
}

impl FrameGenerator {
    pub fn weight_spec(cfg: &ModelConfig) -> WeightSpec {
        let g = cfg.generator_channels;
        let mut spec = WeightSpec::default();
        conv_spec(&mut spec, "generator.input", cfg.texture_channels, g, 3);
        for l in 0..cfg.generator_levels {
            conv_spec(&mut spec, &format!("generator.up{l}"), g, g, 3);
        }
        conv_spec(&mut spec, "generator.output", g, 3, 3);
        spec
    }

    pub fn load(store: &WeightStore, cfg: &ModelConfig) -> std::result::Result<Self, WeightError> {
        let g = cfg.generator_channels;
        Ok(FrameGenerator {
            input: Conv::load(store, "generator.input", cfg.texture_channels, g, 3)?,
            ups: (0..cfg.generator_levels)
                .map(|l| Conv::load(store, &format!("generator.up{l}"), g, g, 3))
                .collect::<std::result::Result<_, _>>()?,
            output: Conv::load(store, "generator.output", g, 3, 3)?,
        })
    }

    pub fn forward(&self, exec: Exec, refined: &Tensor) -> Result<Tensor> {
        let mut x = self.input.forward_relu(exec, refined)?;
        for conv in &self.ups {
            x = conv.forward_relu(exec, &ops::upsample_nearest2x(&x)?)?;
        }
        Ok(ops::sigmoid(&self.output.forward(exec, &x)?))
    }
}

/// Predicted 2D body vertices, `[VERTEX_COUNT, 2]` row-major `(x, y)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSet {
    coords: Tensor,
}

#[derive(Debug, Error)]
pub enum VertexFileError {
    #[error("vertex file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an S2DV vertex file")]
    BadMagic,
    #[error("vertex file declares {0} vertices, expected {VERTEX_COUNT}")]
    Count(u32),
    #[error("vertex file length {got} bytes, expected {want}")]
    Length { got: usize, want: usize },
}

pub const VERTEX_MAGIC: &[u8; 4] = b"S2DV";

impl VertexSet {
    pub fn new(coords: Tensor) -> Result<Self> {
        coords.expect_rank("VertexSet", 2)?;
        coords.expect_axis("VertexSet", 0, "vertices", VERTEX_COUNT)?;
        coords.expect_axis("VertexSet", 1, "xy", 2)?;
        Ok(VertexSet { coords })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn vertex(&self, i: usize) -> [f32; 2] {
        let d = self.coords.data();
        [d[2 * i], d[2 * i + 1]]
    }

    /// `"S2DV" | count u32 | (x f32, y f32) × count`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.coords.len() * 4);
        out.extend_from_slice(VERTEX_MAGIC);
        out.extend_from_slice(&(VERTEX_COUNT as u32).to_le_bytes());
        for v in self.coords.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, VertexFileError> {
        if buf.len() < 8 || &buf[..4] != VERTEX_MAGIC {
            return Err(VertexFileError::BadMagic);
        }
        let count = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if count as usize != VERTEX_COUNT {
            return Err(VertexFileError::Count(count));
        }
        let want = 8 + VERTEX_COUNT * 8;
        if buf.len() != want {
            return Err(VertexFileError::Length {
                got: buf.len(),
                want,
            });
        }
        let data = buf[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(VertexSet {
            coords: Tensor::new(&[VERTEX_COUNT, 2], data).expect("length checked"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, VertexFileError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "index,x,y")?;
        for i in 0..VERTEX_COUNT {
            let [x, y] = self.vertex(i);
            writeln!(f, "{i},{x},{y}")?;
        }
        f.flush()
    }
}

/// Channel-preserving bottleneck residual block:
/// `x + expand1×1(relu(conv3×3(relu(reduce1×1(x)))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    reduce: Conv,
    conv: Conv,
    expand: Conv,
}

impl ResBlock {
    fn load(store: &WeightStore, b: usize, c: usize, hidden: usize) -> std::result::Result<Self, WeightError> {
        Ok(ResBlock {
            reduce: Conv::load(store, &format!("vertex.res{b}.reduce"), c, hidden, 1)?,
            conv: Conv::load(store, &format!("vertex.res{b}.conv"), hidden, hidden, 3)?,
            expand: Conv::load(store, &format!("vertex.res{b}.expand"), hidden, c, 1)?,
        })
    }

    fn spec(spec: &mut WeightSpec, b: usize, c: usize, hidden: usize) {
        conv_spec(spec, &format!("vertex.res{b}.reduce"), c, hidden, 1);
        conv_spec(spec, &format!("vertex.res{b}.conv"), hidden, hidden, 3);
        conv_spec(spec, &format!("vertex.res{b}.expand"), hidden, c, 1);
    }

    fn forward(&self, exec: Exec, x: &Tensor) -> Result<Tensor> {
        let h = self.reduce.forward_relu(exec, x)?;
        let h = self.conv.forward_relu(exec, &h)?;
        let f = self.expand.forward(exec, &h)?;
        Ok(ops::elementwise(x, Some(&f), ElementwiseKind::Add)?)
    }
}

/// ResBlocks → spatial mean → fully-connected map to `2·VERTEX_COUNT` →
/// sigmoid → reshape.
#[derive(Clone, Debug)]
pub struct VertexHead {
    blocks: Vec<ResBlock>,
    fc_weight: Tensor,
    fc_bias: Tensor,
}

impl VertexHead {
    pub fn weight_spec(cfg: &ModelConfig) -> WeightSpec {
        let c = cfg.texture_channels;
        let mut spec = WeightSpec::default();
        for b in 0..cfg.res_blocks {
            ResBlock::spec(&mut spec, b, c, cfg.res_hidden);
        }
        spec.push("vertex.fc.weight", &[2 * VERTEX_COUNT, c]);
        spec.push("vertex.fc.bias", &[2 * VERTEX_COUNT]);
        spec
    }

    pub fn load(store: &WeightStore, cfg: &ModelConfig) -> std::result::Result<Self, WeightError> {
        let c = cfg.texture_channels;
        let blocks = (0..cfg.res_blocks)
            .map(|b| ResBlock::load(store, b, c, cfg.res_hidden))
            .collect::<std::result::Result<_, _>>()?;
        Ok(VertexHead {
            blocks,
            fc_weight: store.get("vertex.fc.weight", &[2 * VERTEX_COUNT, c])?.clone(),
            fc_bias: store.get("vertex.fc.bias", &[2 * VERTEX_COUNT])?.clone(),
        })
    }

    /// Global descriptor: spatial mean of the residual-block output.
    pub fn descriptor(&self, exec: Exec, refined: &Tensor) -> Result<Tensor> {
        let mut x = refined.clone();
        for block in &self.blocks {
            x = block.forward(exec, &x)?;
        }
        Ok(ops::reduce_pool_adaptive(&x)?)
    }

    pub fn forward(&self, exec: Exec, refined: &Tensor) -> Result<VertexSet> {
        let pooled = self.descriptor(exec, refined)?;
        let flat = ops::linear_with(exec, &pooled, &self.fc_weight, &self.fc_bias)?;
        VertexSet::new(ops::sigmoid(&flat).reshape(&[VERTEX_COUNT, 2])?)
    }
}
