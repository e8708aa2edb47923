//! Layers shared by the forward-only networks.

use crate::error::Result;
use crate::exec::Exec;
use crate::ops;
use crate::tensor::Tensor;
use crate::weights::{WeightError, WeightSpec, WeightStore};

/// Square-kernel, stride-1, "same"-padded convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

pub fn conv_spec(spec: &mut WeightSpec, name: &str, in_ch: usize, out_ch: usize, kernel: usize) {
    spec.push(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel]);
    spec.push(format!("{name}.bias"), &[out_ch]);
}

impl Conv {
    pub fn load(
        store: &WeightStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> std::result::Result<Self, WeightError> {
        Ok(Conv {
            weight: store
                .get(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel])?
                .clone(),
            bias: store.get(&format!("{name}.bias"), &[out_ch])?.clone(),
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.bias.dim(0)
    }

    pub fn forward(&self, exec: Exec, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d_with(exec, x, &self.weight, &self.bias, 1, self.padding)?)
    }

    pub fn forward_relu(&self, exec: Exec, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(&self.forward(exec, x)?))
    }
}

/// Encoder/decoder with skip connections: `levels` 3×3 conv + 2× average-pool
/// stages, a bottleneck conv, then mirrored upsample + concat + conv stages.
/// Output has `base` channels at the input resolution.
#[derive(Clone, Debug)]
pub struct UNet {
    enc: Vec<Conv>,
    mid: Conv,
    dec: Vec<Conv>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetShape {
    pub in_channels: usize,
    pub base: usize,
    pub levels: usize,
}

impl UNetShape {
    fn enc_channels(&self, i: usize) -> (usize, usize) {
        let inp = if i == 0 {
            self.in_channels
        } else {
            self.base << (i - 1)
        };
        (inp, self.base << i)
    }

    fn mid_channels(&self) -> usize {
        self.base << (self.levels - 1)
    }

    fn dec_channels(&self, j: usize) -> (usize, usize) {
        let below = if j + 1 == self.levels {
            self.mid_channels()
        } else {
            self.base << (j + 1)
        };
        (below + (self.base << j), self.base << j)
    }

    pub fn spec(&self, spec: &mut WeightSpec, prefix: &str) {
        for i in 0..self.levels {
            let (a, b) = self.enc_channels(i);
            conv_spec(spec, &format!("{prefix}.enc{i}"), a, b, 3);
        }
        let m = self.mid_channels();
        conv_spec(spec, &format!("{prefix}.mid"), m, m, 3);
        for j in 0..self.levels {
            let (a, b) = self.dec_channels(j);
            conv_spec(spec, &format!("{prefix}.dec{j}"), a, b, 3);
        }
    }
}

impl UNet {
    pub fn load(
        store: &WeightStore,
        prefix: &str,
        shape: UNetShape,
    ) -> std::result::Result<Self, WeightError> {
        let enc = (0..shape.levels)
            .map(|i| {
                let (a, b) = shape.enc_channels(i);
                Conv::load(store, &format!("{prefix}.enc{i}"), a, b, 3)
            })
            .collect::<std::result::Result<_, _>>()?;
        let m = shape.mid_channels();
        let mid = Conv::load(store, &format!("{prefix}.mid"), m, m, 3)?;
        let dec = (0..shape.levels)
            .map(|j| {
                let (a, b) = shape.dec_channels(j);
                Conv::load(store, &format!("{prefix}.dec{j}"), a, b, 3)
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(UNet { enc, mid, dec })
    }

    pub fn forward(&self, exec: Exec, input: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut x = input.clone();
        for conv in &self.enc {
            let y = conv.forward_relu(exec, &x)?;
            x = ops::block_average(&y, 2)?;
            skips.push(y);
        }
        x = self.mid.forward_relu(exec, &x)?;
        for (conv, skip) in self.dec.iter().zip(skips.iter()).rev() {
            let up = ops::upsample_nearest2x(&x)?;
            let cat = ops::elementwise(&up, Some(skip), ops::ElementwiseKind::ConcatChannels)?;
            x = conv.forward_relu(exec, &cat)?;
        }
        Ok(x)
    }
}
