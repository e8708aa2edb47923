//! Sequence encode/decode and rate accounting.
//!
//! Keypoint extraction and per-frame synthesis fan out over frames; the
//! keypoint stream is always coded in frame order.

use serde::{Serialize, Serializer};

use crate::codec::{
    quantize, KeypointStreamDecoder, KeypointStreamEncoder, QuantStep, QuantizedKeypointSet,
};
use crate::config::ModelConfig;
use crate::container::{Container, ContainerHeader, KeyframeCodec, VERSION};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frame_io;
use crate::keypoints::{KeypointExtractor, KeypointSet};
use crate::motion::{DenseMotion, DenseMotionNet};
use crate::synthesis::{refine_feature_with, FrameGenerator, TextureEncoder, VertexHead, VertexSet};
use crate::tensor::{Tensor, TensorError};
use crate::weights::{WeightSpec, WeightStore};

/// Every network of the codec, loaded from one weight store.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub extractor: KeypointExtractor,
    pub texture: TextureEncoder,
    pub motion: DenseMotionNet,
    pub generator: FrameGenerator,
    pub vertex: VertexHead,
}

impl Models {
    pub fn weight_spec(cfg: &ModelConfig) -> WeightSpec {
        let mut spec = KeypointExtractor::weight_spec(cfg);
        spec.extend(TextureEncoder::weight_spec(cfg));
        spec.extend(DenseMotionNet::weight_spec(cfg));
        spec.extend(FrameGenerator::weight_spec(cfg));
        spec.extend(VertexHead::weight_spec(cfg));
        spec
    }

    pub fn load(store: &WeightStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate().map_err(Error::Config)?;
        Ok(Models {
            config: cfg.clone(),
            extractor: KeypointExtractor::load(store, cfg)?,
            texture: TextureEncoder::load(store, cfg)?,
            motion: DenseMotionNet::load(store, cfg)?,
            generator: FrameGenerator::load(store, cfg)?,
            vertex: VertexHead::load(store, cfg)?,
        })
    }

    /// Seeded random weights for every network.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<(Self, WeightStore)> {
        cfg.validate().map_err(Error::Config)?;
        let store = Self::weight_spec(cfg).random(seed);
        Ok((Self::load(&store, cfg)?, store))
    }
}

/// How the key-reference frame is carried.
#[derive(Clone, Debug, Default)]
pub enum KeyframeInput {
    /// Lossless PNG of the first frame.
    #[default]
    Png,
    /// Pre-encoded payload stored opaquely, plus the image its decoder yields.
    External { payload: Vec<u8>, decoded: Tensor },
}

#[derive(Clone, Debug)]
pub struct EncodeOptions {
    pub quant: QuantStep,
    pub fps_num: u16,
    pub fps_den: u16,
    pub keyframe: KeyframeInput,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            quant: QuantStep::DEFAULT,
            fps_num: 25,
            fps_den: 1,
            keyframe: KeyframeInput::Png,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub container: Container,
    pub report: RdReport,
    /// Coded keypoints per frame; entry 0 is the key-reference seed.
    pub quantized: Vec<QuantizedKeypointSet>,
}

fn check_sizes(cfg: &ModelConfig, frames: &[Tensor]) -> Result<(usize, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("no frames to encode".into()))?;
    for (index, f) in frames.iter().enumerate() {
        f.expect_rank("encode_sequence", 3)?;
        f.expect_axis("encode_sequence", 0, "channels", 3)?;
        if f.dim(1) != first.dim(1) || f.dim(2) != first.dim(2) {
            return Err(Error::FrameSize {
                index,
                want_w: first.dim(2),
                want_h: first.dim(1),
                got_w: f.dim(2),
                got_h: f.dim(1),
            });
        }
    }
    let (h, w) = (first.dim(1), first.dim(2));
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Config(format!("frame {w}x{h} exceeds 65535")));
    }
    cfg.check_frame(h, w).map_err(Error::Config)?;
    Ok((h, w))
}

fn check_image(what: &str, img: &Tensor, h: usize, w: usize) -> Result<()> {
    if img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != h || img.dim(2) != w {
        return Err(Error::Malformed(format!(
            "{what} has shape {:?}, expected [3, {h}, {w}]",
            img.shape()
        )));
    }
    Ok(())
}

pub fn encode_sequence(
    models: &Models,
    exec: Exec,
    frames: &[Tensor],
    opts: &EncodeOptions,
) -> Result<Encoded> {
    let cfg = &models.config;
    let (h, w) = check_sizes(cfg, frames)?;
    if opts.fps_num == 0 || opts.fps_den == 0 {
        return Err(Error::Config("fps must be non-zero".into()));
    }
    let (codec, payload, key) = match &opts.keyframe {
        KeyframeInput::Png => {
            let payload = frame_io::encode_png(&frames[0])?;
            let key = frame_io::decode_image(&payload)?;
            (KeyframeCodec::Png, payload, key)
        }
        KeyframeInput::External { payload, decoded } => {
            check_image("external key-reference image", decoded, h, w)?;
            (KeyframeCodec::External, payload.clone(), decoded.clone())
        }
    };
    if payload.len() > u32::MAX as usize {
        return Err(Error::Config("key-reference payload exceeds 4 GiB".into()));
    }

    // The decoder only sees the decoded key-reference, so the stream is
    // seeded from it rather than from the source frame.
    let kp_ref = models.extractor.extract(exec, &key)?;
    let inter = &frames[1..];
    let kps: Vec<KeypointSet> = exec.try_map(inter.len(), |i| models.extractor.extract(exec, &inter[i]))?;

    let seed = quantize(&kp_ref, opts.quant);
    let mut enc = KeypointStreamEncoder::new(opts.quant, seed.clone());
    let mut quantized = vec![seed];
    let mut records = Vec::with_capacity(kps.len());
    for k in &kps {
        let (q, bits) = enc.encode(k)?;
        quantized.push(q);
        records.push(bits);
    }

    let container = Container {
        header: ContainerHeader {
            version: VERSION,
            width: w as u16,
            height: h as u16,
            keypoints: cfg.keypoints as u8,
            q_log2: opts.quant.log2(),
            depth: cfg.depth as u8,
            fps_num: opts.fps_num,
            fps_den: opts.fps_den,
            keyframe_codec: codec,
        },
        keyframe: payload,
        records,
    };
    let bytes = container.to_bytes();
    let report = RdReport::from_container(&container)?;
    Ok(Encoded {
        bytes,
        container,
        report,
        quantized,
    })
}

#[derive(Clone, Debug, Default)]
pub struct DecodeOptions {
    /// Decoded key-reference image for externally coded payloads.
    pub keyframe_sidecar: Option<Tensor>,
    /// Keep per-frame dense motion in the output.
    pub keep_motion: bool,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: ContainerHeader,
    /// All frames, key-reference first.
    pub frames: Vec<Tensor>,
    /// One vertex set per inter frame.
    pub vertices: Vec<VertexSet>,
    /// Decoded keypoints per frame; entry 0 is the key-reference seed.
    pub quantized: Vec<QuantizedKeypointSet>,
    /// Present when requested, one per inter frame.
    pub motion: Vec<DenseMotion>,
}

pub fn decode_sequence(
    models: &Models,
    exec: Exec,
    bytes: &[u8],
    opts: &DecodeOptions,
) -> Result<Decoded> {
    let container = Container::parse(bytes)?;
    let header = container.header.clone();
    let cfg = &models.config;
    if header.keypoints as usize != cfg.keypoints || header.depth as usize != cfg.depth {
        return Err(Error::Config(format!(
            "container has K={} D={}, weights expect K={} D={}",
            header.keypoints, header.depth, cfg.keypoints, cfg.depth
        )));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    cfg.check_frame(h, w)
        .map_err(|e| Error::Malformed(format!("container frame size: {e}")))?;

    let key = match header.keyframe_codec {
        KeyframeCodec::Png => frame_io::decode_image(&container.keyframe)?,
        KeyframeCodec::External => opts.keyframe_sidecar.clone().ok_or_else(|| {
            Error::Malformed("external key-reference payload needs a sidecar image".into())
        })?,
    };
    check_image("key-reference image", &key, h, w)?;

    let step = header.quant_step();
    let seed = quantize(&models.extractor.extract(exec, &key)?, step);
    let mut dec = KeypointStreamDecoder::new(step, seed.clone());
    let mut quantized = vec![seed];
    for (index, r) in container.records.iter().enumerate() {
        let q = dec.decode(r).map_err(|e| {
            Error::Malformed(format!("keypoint record {index}: {e}"))
        })?;
        quantized.push(q);
    }
    let points: Vec<KeypointSet> = quantized
        .iter()
        .map(|q| q.dequantize(step))
        .collect::<std::result::Result<_, _>>()?;

    let texture = models.texture.forward(exec, &key)?;
    let kp_ref = &points[0];
    let per_frame = exec.try_map(points.len() - 1, |i| -> Result<_> {
        let motion = models.motion.estimate(exec, &texture, kp_ref, &points[i + 1])?;
        let refined = refine_feature_with(exec, &texture, &motion.flow, &motion.occlusion)?;
        let frame = models.generator.forward(exec, &refined)?;
        let vertices = models.vertex.forward(exec, &refined)?;
        Ok((frame, vertices, opts.keep_motion.then_some(motion)))
    })?;

    let mut frames = vec![key];
    let mut vertices = Vec::with_capacity(per_frame.len());
    let mut motion = Vec::new();
    for (f, v, m) in per_frame {
        frames.push(f);
        vertices.push(v);
        motion.extend(m);
    }
    Ok(Decoded {
        header,
        frames,
        vertices,
        quantized,
        motion,
    })
}

/// `bits · fps_num / (fps_den · frames · 1000)`.
pub fn bitrate_kbps(bits: u64, frames: usize, fps_num: u16, fps_den: u16) -> Result<f64> {
    if frames == 0 {
        return Err(Error::Config("bitrate of an empty sequence".into()));
    }
    if fps_den == 0 {
        return Err(Error::Config("fps denominator is zero".into()));
    }
    Ok(bits as f64 * fps_num as f64 / (fps_den as f64 * frames as f64 * 1000.0))
}

/// `10·log10(1 / MSE)` over `[0, 1]` pixels; identical frames give `+∞`.
pub fn psnr_sanity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible {
            op: "psnr",
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        }
        .into());
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = se / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

fn finite_or_string<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    #[serde(untagged)]
    enum Db {
        Finite(f64),
        Text(&'static str),
    }
    let mapped: Option<Vec<Db>> = v.as_ref().map(|v| {
        v.iter()
            .map(|&x| if x.is_finite() { Db::Finite(x) } else { Db::Text("inf") })
            .collect()
    });
    mapped.serialize(s)
}

/// Rate accounting of one container, with optional per-frame PSNR.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RdReport {
    pub frames: usize,
    pub fps_num: u16,
    pub fps_den: u16,
    pub total_bits: u64,
    pub keyframe_bits: u64,
    pub keypoint_bits: u64,
    pub header_bits: u64,
    /// Keypoint bits per frame; entry 0 is the key-reference (always 0).
    pub per_frame_bits: Vec<u64>,
    pub kbps: f64,
    pub keypoint_kbps: f64,
    /// Per-frame PSNR in dB; identical frames are reported as `"inf"`.
    #[serde(serialize_with = "finite_or_string")]
    pub psnr_db: Option<Vec<f64>>,
}

impl RdReport {
    pub fn from_container(c: &Container) -> Result<Self> {
        let mut per_frame_bits = vec![0];
        per_frame_bits.extend(c.keypoint_bits());
        let keypoint_bits: u64 = per_frame_bits.iter().sum();
        let total_bits = 8 * c.byte_len() as u64;
        let frames = c.frame_count();
        let (n, d) = (c.header.fps_num, c.header.fps_den);
        Ok(RdReport {
            frames,
            fps_num: n,
            fps_den: d,
            total_bits,
            keyframe_bits: 8 * c.keyframe.len() as u64,
            keypoint_bits,
            header_bits: c.header_bits(),
            per_frame_bits,
            kbps: bitrate_kbps(total_bits, frames, n, d)?,
            keypoint_kbps: bitrate_kbps(keypoint_bits, frames, n, d)?,
            psnr_db: None,
        })
    }

    pub fn kbps(&self) -> Result<f64> {
        bitrate_kbps(self.total_bits, self.frames, self.fps_num, self.fps_den)
    }

    /// Adds PSNR of each decoded frame against its reference.
    pub fn with_psnr(mut self, decoded: &[Tensor], reference: &[Tensor]) -> Result<Self> {
        if decoded.len() != reference.len() {
            return Err(Error::Config(format!(
                "{} reference frames for {} decoded frames",
                reference.len(),
                decoded.len()
            )));
        }
        self.psnr_db = Some(
            decoded
                .iter()
                .zip(reference)
                .map(|(a, b)| psnr_sanity(a, b))
                .collect::<Result<_>>()?,
        );
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}
