//! `S2DC` container: fixed header, key-reference payload, then one
//! keypoint record per inter frame until end of input.
//!
//! ```text
//! magic "S2DC" | version u8 | width u16 | height u16 | K u8 | q_log2 u8
//! | depth u8 | fps_num u16 | fps_den u16 | keyframe tag u8
//! | keyframe_len u32 | keyframe bytes
//! { bit_len u32 | ceil(bit_len / 8) payload bytes }*
//! ```
//!
//! Integers are little-endian; payload bits are MSB-first.

use serde::Serialize;
use thiserror::Error;

use crate::codec::{CodecError, KeypointBitstream, QuantStep};

pub const MAGIC: &[u8; 4] = b"S2DC";
pub const VERSION: u8 = 1;
/// Serialized header size up to and including the key-reference length field.
pub const HEADER_BYTES: usize = 21;
/// Per-record framing overhead.
pub const RECORD_HEADER_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("not an S2DC container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("container truncated in {0}")]
    Truncated(&'static str),
    #[error("unknown key-reference codec tag {0}")]
    UnknownKeyframeTag(u8),
    #[error("invalid header field {field}: {msg}")]
    InvalidField { field: &'static str, msg: String },
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: CodecError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeCodec {
    /// Lossless PNG of the key-reference frame.
    Png,
    /// Externally produced bitstream; the decoded image arrives as a sidecar.
    External,
}

impl KeyframeCodec {
    pub fn tag(self) -> u8 {
        match self {
            KeyframeCodec::Png => 0,
            KeyframeCodec::External => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, ContainerError> {
        match tag {
            0 => Ok(KeyframeCodec::Png),
            1 => Ok(KeyframeCodec::External),
            t => Err(ContainerError::UnknownKeyframeTag(t)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContainerHeader {
    pub version: u8,
    pub width: u16,
    pub height: u16,
    pub keypoints: u8,
    pub q_log2: u8,
    pub depth: u8,
    pub fps_num: u16,
    pub fps_den: u16,
    pub keyframe_codec: KeyframeCodec,
}

impl ContainerHeader {
    pub fn quant_step(&self) -> QuantStep {
        QuantStep::new(self.q_log2).expect("validated at parse")
    }

    pub fn fps(&self) -> f64 {
        self.fps_num as f64 / self.fps_den as f64
    }

    pub fn validate(&self) -> Result<(), ContainerError> {
        let bad = |field, msg: &str| {
            Err(ContainerError::InvalidField {
                field,
                msg: msg.to_string(),
            })
        };
        if self.version != VERSION {
            return Err(ContainerError::UnsupportedVersion(self.version));
        }
        if self.width == 0 || self.height == 0 {
            return bad("size", "zero frame dimension");
        }
        if self.keypoints == 0 {
            return bad("keypoints", "must be at least 1");
        }
        if QuantStep::new(self.q_log2).is_err() {
            return bad("q_log2", "outside 2..=12");
        }
        if self.depth == 0 {
            return bad("depth", "must be at least 1");
        }
        if self.fps_num == 0 || self.fps_den == 0 {
            return bad("fps", "numerator and denominator must be non-zero");
        }
        Ok(())
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.keypoints);
        out.push(self.q_log2);
        out.push(self.depth);
        out.extend_from_slice(&self.fps_num.to_le_bytes());
        out.extend_from_slice(&self.fps_den.to_le_bytes());
        out.push(self.keyframe_codec.tag());
    }
}

/// A parsed container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub keyframe: Vec<u8>,
    pub records: Vec<KeypointBitstream>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        if self.buf.len() - self.pos < n {
            return Err(ContainerError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.header.write(&mut out);
        out.extend_from_slice(&(self.keyframe.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.keyframe);
        for r in &self.records {
            out.extend_from_slice(&r.bit_count().to_le_bytes());
            out.extend_from_slice(r.bytes());
        }
        out
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES
            + self.keyframe.len()
            + self
                .records
                .iter()
                .map(|r| RECORD_HEADER_BYTES + r.bytes().len())
                .sum::<usize>()
    }

    /// Parses only the fixed header, checking magic and version first.
    pub fn parse_header(buf: &[u8]) -> Result<ContainerHeader, ContainerError> {
        let mut c = Cursor { buf, pos: 0 };
        Self::read_header(&mut c)
    }

    fn read_header(c: &mut Cursor<'_>) -> Result<ContainerHeader, ContainerError> {
        if c.take(4, "magic").map_err(|_| ContainerError::BadMagic)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = c.u8("version")?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let header = ContainerHeader {
            version,
            width: c.u16("header")?,
            height: c.u16("header")?,
            keypoints: c.u8("header")?,
            q_log2: c.u8("header")?,
            depth: c.u8("header")?,
            fps_num: c.u16("header")?,
            fps_den: c.u16("header")?,
            keyframe_codec: KeyframeCodec::from_tag(c.u8("header")?)?,
        };
        header.validate()?;
        Ok(header)
    }

    /// Parses a complete container; every byte must belong to a record.
    pub fn parse(buf: &[u8]) -> Result<Self, ContainerError> {
        let mut c = Cursor { buf, pos: 0 };
        let header = Self::read_header(&mut c)?;
        let klen = c.u32("keyframe length")? as usize;
        let keyframe = c.take(klen, "keyframe payload")?.to_vec();
        let mut records = Vec::new();
        while !c.at_end() {
            let bits = c.u32("record length")?;
            let payload = c.take((bits as usize).div_ceil(8), "record payload")?;
            let r = KeypointBitstream::new(payload.to_vec(), bits).map_err(|source| {
                ContainerError::Record {
                    index: records.len(),
                    source,
                }
            })?;
            records.push(r);
        }
        Ok(Container {
            header,
            keyframe,
            records,
        })
    }

    /// Frames in the sequence, key-reference included.
    pub fn frame_count(&self) -> usize {
        1 + self.records.len()
    }

    pub fn keypoint_bits(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.bit_count() as u64).collect()
    }

    /// Framing overhead in bits: fixed header, record length fields and the
    /// byte padding of each record.
    pub fn header_bits(&self) -> u64 {
        let total = 8 * self.byte_len() as u64;
        total - 8 * self.keyframe.len() as u64 - self.keypoint_bits().iter().sum::<u64>()
    }
}
