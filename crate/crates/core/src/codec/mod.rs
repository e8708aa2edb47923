//! Keypoint stream coding: uniform quantization, temporal prediction from
//! the previously coded frame, zigzag + order-0 Exp-Golomb binarization, and
//! context-adaptive binary arithmetic coding.
//!
//! Each inter frame is an independently terminated arithmetic code; the
//! context models carry over from frame to frame and are reset only when a
//! new key-reference frame seeds the predictor.

pub mod arith;
pub mod context;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::KeypointSet;
use arith::{ArithDecoder, ArithEncoder};
pub use context::{BinModel, CoderState};

/// Largest residual magnitude the binarization accepts.
pub const MAX_RESIDUAL: i64 = 1 << 20;
/// Longest legal Exp-Golomb prefix (covers zigzag values up to `2^21`).
const MAX_PREFIX: u32 = 21;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("quantization step exponent {0} outside 2..=12")]
    InvalidQuantStep(u8),
    #[error("keypoint count mismatch: expected {expected}, got {got}")]
    KeypointCount { expected: usize, got: usize },
    #[error("residual {0} exceeds the coder limit of 2^20")]
    ResidualOverflow(i64),
    #[error("payload holds {got} bytes but its {bits}-bit length needs {want}")]
    PayloadLength { bits: u32, want: usize, got: usize },
    #[error("non-zero padding after the last payload bit")]
    NonZeroPadding,
    #[error("corrupt Exp-Golomb prefix")]
    CorruptPrefix,
    #[error("decoded index {index} lies outside the coordinate range ±{limit}")]
    IndexOutOfRange { index: i64, limit: i64 },
    #[error("stream unusable after an earlier decode error")]
    Poisoned,
}

/// Quantization step `2^-q_log2`, `q_log2 ∈ [2, 12]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantStep(u8);

impl QuantStep {
    pub const DEFAULT: QuantStep = QuantStep(6);

    pub fn new(q_log2: u8) -> Result<Self, CodecError> {
        if (2..=12).contains(&q_log2) {
            Ok(QuantStep(q_log2))
        } else {
            Err(CodecError::InvalidQuantStep(q_log2))
        }
    }

    pub fn log2(self) -> u8 {
        self.0
    }

    pub fn step(self) -> f64 {
        (-(self.0 as f64)).exp2()
    }

    /// Largest index magnitude of a coordinate in `[-1, 1]`.
    pub fn index_limit(self) -> i64 {
        1 << self.0
    }
}

impl Default for QuantStep {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedKeypointSet {
    points: Vec<[i32; 3]>,
}

impl QuantizedKeypointSet {
    pub fn new(points: Vec<[i32; 3]>) -> Self {
        QuantizedKeypointSet { points }
    }

    pub fn zeros(k: usize) -> Self {
        Self::new(vec![[0; 3]; k])
    }

    pub fn points(&self) -> &[[i32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `index · q` per coordinate; fails on indices beyond `±2^q_log2`.
    pub fn dequantize(&self, step: QuantStep) -> Result<KeypointSet, CodecError> {
        self.check_range(step)?;
        if self.points.is_empty() {
            return Err(CodecError::KeypointCount { expected: 1, got: 0 });
        }
        let q = step.step();
        let points = self
            .points
            .iter()
            .map(|p| p.map(|i| (i as f64 * q) as f32))
            .collect();
        Ok(KeypointSet::new(points).expect("in-range indices dequantize into [-1, 1]"))
    }

    fn check_range(&self, step: QuantStep) -> Result<(), CodecError> {
        let limit = step.index_limit();
        for &i in self.points.iter().flatten() {
            if (i as i64).abs() > limit {
                return Err(CodecError::IndexOutOfRange {
                    index: i as i64,
                    limit,
                });
            }
        }
        Ok(())
    }
}

/// `index = round_half_away_from_zero(coord / q)`.
pub fn quantize(kps: &KeypointSet, step: QuantStep) -> QuantizedKeypointSet {
    let scale = (step.log2() as f64).exp2();
    QuantizedKeypointSet::new(
        kps.points()
            .iter()
            .map(|p| p.map(|c| (c as f64 * scale).round() as i32))
            .collect(),
    )
}

/// Per-coordinate integer difference to the previously coded frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResidualSet {
    values: Vec<[i32; 3]>,
}

impl ResidualSet {
    pub fn new(values: Vec<[i32; 3]>) -> Self {
        ResidualSet { values }
    }

    pub fn values(&self) -> &[[i32; 3]] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0)
    }

    /// Inverse of [`predict_residual`].
    pub fn apply(&self, previous: &QuantizedKeypointSet) -> Result<QuantizedKeypointSet, CodecError> {
        check_count(previous.len(), self.len())?;
        Ok(QuantizedKeypointSet::new(
            self.values
                .iter()
                .zip(previous.points())
                .map(|(r, p)| [0, 1, 2].map(|a| p[a].wrapping_add(r[a])))
                .collect(),
        ))
    }
}

fn check_count(expected: usize, got: usize) -> Result<(), CodecError> {
    if expected != got {
        return Err(CodecError::KeypointCount { expected, got });
    }
    Ok(())
}

pub fn predict_residual(
    current: &QuantizedKeypointSet,
    previous_coded: &QuantizedKeypointSet,
) -> Result<ResidualSet, CodecError> {
    check_count(previous_coded.len(), current.len())?;
    Ok(ResidualSet::new(
        current
            .points()
            .iter()
            .zip(previous_coded.points())
            .map(|(c, p)| [0, 1, 2].map(|a| c[a].wrapping_sub(p[a])))
            .collect(),
    ))
}

/// Signed → unsigned interleave: 0, −1, 1, −2, 2 … → 0, 1, 2, 3, 4 …
pub fn zigzag(v: i64) -> u64 {
    if v >= 0 {
        (v as u64) << 1
    } else {
        ((-v as u64) << 1) - 1
    }
}

pub fn unzigzag(u: u64) -> i64 {
    if u & 1 == 0 {
        (u >> 1) as i64
    } else {
        -(((u + 1) >> 1) as i64)
    }
}

/// Arithmetic-coded payload of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KeypointBitstream {
    bytes: Vec<u8>,
    bit_count: u32,
}

impl KeypointBitstream {
    /// Validates that `bytes` is exactly `ceil(bit_count / 8)` long with zero
    /// padding after the last coded bit.
    pub fn new(bytes: Vec<u8>, bit_count: u32) -> Result<Self, CodecError> {
        let want = (bit_count as usize).div_ceil(8);
        if bytes.len() != want {
            return Err(CodecError::PayloadLength {
                bits: bit_count,
                want,
                got: bytes.len(),
            });
        }
        let tail = bit_count % 8;
        if tail != 0 && bytes[want - 1] & (0xff >> tail) != 0 {
            return Err(CodecError::NonZeroPadding);
        }
        Ok(KeypointBitstream { bytes, bit_count })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_count(&self) -> u32 {
        self.bit_count
    }
}

fn encode_value(enc: &mut ArithEncoder, state: &mut CoderState, axis: usize, r: i64) {
    let v = zigzag(r) + 1;
    let m = 63 - v.leading_zeros();
    for pos in 0..=m as usize {
        let bit = pos < m as usize;
        let model = state.prefix_model(axis, pos);
        enc.encode(bit, model.p0());
        model.update(bit);
    }
    for i in (0..m).rev() {
        enc.encode_bypass((v >> i) & 1 == 1);
    }
}

fn decode_value(
    dec: &mut ArithDecoder<'_>,
    state: &mut CoderState,
    axis: usize,
) -> Result<i64, CodecError> {
    let mut m = 0u32;
    loop {
        let model = state.prefix_model(axis, m as usize);
        let bit = dec.decode(model.p0());
        model.update(bit);
        if !bit {
            break;
        }
        m += 1;
        if m > MAX_PREFIX {
            return Err(CodecError::CorruptPrefix);
        }
    }
    let mut v = 1u64;
    for _ in 0..m {
        v = (v << 1) | dec.decode_bypass() as u64;
    }
    let r = unzigzag(v - 1);
    if r.abs() > MAX_RESIDUAL {
        return Err(CodecError::ResidualOverflow(r));
    }
    Ok(r)
}

/// Codes one frame of residuals, advancing `state`.
pub fn encode_frame(
    residuals: &ResidualSet,
    state: &mut CoderState,
) -> Result<KeypointBitstream, CodecError> {
    if let Some(&r) = residuals
        .values()
        .iter()
        .flatten()
        .find(|&&r| (r as i64).abs() > MAX_RESIDUAL)
    {
        return Err(CodecError::ResidualOverflow(r as i64));
    }
    let mut enc = ArithEncoder::new();
    for point in residuals.values() {
        for (axis, &r) in point.iter().enumerate() {
            encode_value(&mut enc, state, axis, r as i64);
        }
    }
    let (bytes, bits) = enc.finish();
    KeypointBitstream::new(bytes, bits as u32)
}

/// Decodes `k` residual triples, advancing `state` exactly as the encoder did.
pub fn decode_frame(
    bits: &KeypointBitstream,
    state: &mut CoderState,
    k: usize,
) -> Result<ResidualSet, CodecError> {
    let mut dec = ArithDecoder::new(bits.bytes());
    let mut values = Vec::with_capacity(k);
    for _ in 0..k {
        let mut p = [0i32; 3];
        for (axis, slot) in p.iter_mut().enumerate() {
            *slot = decode_value(&mut dec, state, axis)? as i32;
        }
        values.push(p);
    }
    Ok(ResidualSet::new(values))
}

/// Encoder side of one keypoint stream.
#[derive(Clone, Debug)]
pub struct KeypointStreamEncoder {
    step: QuantStep,
    state: CoderState,
    previous: QuantizedKeypointSet,
}

impl KeypointStreamEncoder {
    /// Starts a stream seeded by the key-reference frame's quantized keypoints.
    pub fn new(step: QuantStep, seed: QuantizedKeypointSet) -> Self {
        KeypointStreamEncoder {
            step,
            state: CoderState::new(),
            previous: seed,
        }
    }

    pub fn state(&self) -> &CoderState {
        &self.state
    }

    pub fn previous(&self) -> &QuantizedKeypointSet {
        &self.previous
    }

    /// Quantizes, predicts and codes one inter frame.
    pub fn encode(&mut self, kps: &KeypointSet) -> Result<(QuantizedKeypointSet, KeypointBitstream), CodecError> {
        let q = quantize(kps, self.step);
        let residual = predict_residual(&q, &self.previous)?;
        let bits = encode_frame(&residual, &mut self.state)?;
        self.previous = q.clone();
        Ok((q, bits))
    }
}

/// Decoder side of one keypoint stream. Any error poisons it.
#[derive(Clone, Debug)]
pub struct KeypointStreamDecoder {
    step: QuantStep,
    state: CoderState,
    previous: QuantizedKeypointSet,
    poisoned: bool,
}

impl KeypointStreamDecoder {
    pub fn new(step: QuantStep, seed: QuantizedKeypointSet) -> Self {
        KeypointStreamDecoder {
            step,
            state: CoderState::new(),
            previous: seed,
            poisoned: false,
        }
    }

    pub fn state(&self) -> &CoderState {
        &self.state
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn decode(&mut self, bits: &KeypointBitstream) -> Result<QuantizedKeypointSet, CodecError> {
        if self.poisoned {
            return Err(CodecError::Poisoned);
        }
        let result = decode_frame(bits, &mut self.state, self.previous.len())
            .and_then(|r| r.apply(&self.previous))
            .and_then(|q| q.check_range(self.step).map(|_| q));
        match result {
            Ok(q) => {
                self.previous = q.clone();
                Ok(q)
            }
            Err(e) => {
                self.poisoned = true;
                Err(e)
            }
        }
    }
}

/// Exact keypoint-stream bit counts; entry 0 is the key-reference frame,
/// which is never coded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitReport {
    pub per_frame: Vec<u64>,
    pub total: u64,
}

pub fn measure_bits(frames: &[KeypointSet], step: QuantStep) -> Result<BitReport, CodecError> {
    let Some(first) = frames.first() else {
        return Ok(BitReport {
            per_frame: Vec::new(),
            total: 0,
        });
    };
    let mut enc = KeypointStreamEncoder::new(step, quantize(first, step));
    let mut per_frame = vec![0];
    for kps in &frames[1..] {
        let (_, bits) = enc.encode(kps)?;
        per_frame.push(bits.bit_count() as u64);
    }
    let total = per_frame.iter().sum();
    Ok(BitReport { per_frame, total })
}
