//! Binary arithmetic coder with 32-bit integer interval arithmetic and
//! bit-granular output (MSB-first).
//!
//! Probabilities are 16-bit fixed point: `p0` is the probability of a zero
//! bin scaled by 65536. Zero bins take the lower part of the interval.
//!
//! Termination writes the fewest bits that pin a value inside the final
//! interval, assuming the decoder reads zeros past the end of the payload.

const TOP: u64 = (1 << 32) - 1;
const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
pub const PROB_ONE: u32 = 1 << 16;
pub const PROB_HALF: u32 = 1 << 15;

#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn push(&mut self, bit: bool) {
        if self.bits.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.last_mut().unwrap();
            *last |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }

    pub fn bit_count(&self) -> u64 {
        self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Reads bits MSB-first, yielding zeros past the end.
#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn next_bit(&mut self) -> u64 {
        let byte = (self.pos / 8) as usize;
        let bit = match self.bytes.get(byte) {
            Some(b) => (b >> (7 - self.pos % 8)) & 1,
            None => 0,
        };
        self.pos += 1;
        bit as u64
    }
}

fn split(low: u64, high: u64, p0: u32) -> u64 {
    debug_assert!(p0 > 0 && p0 < PROB_ONE);
    let range = high - low + 1;
    let r0 = ((range * p0 as u64) >> 16).clamp(1, range - 1);
    low + r0 - 1
}

#[derive(Clone, Debug)]
pub struct ArithEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for ArithEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithEncoder {
    pub fn new() -> Self {
        ArithEncoder {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::default(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, bit: bool, p0: u32) {
        let mid = split(self.low, self.high, p0);
        if bit {
            self.low = mid + 1;
        } else {
            self.high = mid;
        }
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    pub fn encode_bypass(&mut self, bit: bool) {
        self.encode(bit, PROB_HALF);
    }

    /// Bits emitted so far, excluding termination.
    pub fn bits_so_far(&self) -> u64 {
        self.out.bit_count()
    }

    /// Terminates the code; returns the payload and its exact bit length.
    pub fn finish(mut self) -> (Vec<u8>, u64) {
        let n = (0..=32u32)
            .find(|&n| {
                if n == 0 {
                    return self.low == 0 && self.pending == 0;
                }
                let unit = 1u64 << (32 - n);
                self.low.div_ceil(unit) * unit <= self.high
            })
            .expect("a 32-bit value always fits");
        if n > 0 {
            let unit = 1u64 << (32 - n);
            let v = self.low.div_ceil(unit) * unit;
            self.emit(v & HALF != 0);
            for i in 1..n {
                self.out.push(v & (HALF >> i) != 0);
            }
        }
        let bits = self.out.bit_count();
        (self.out.into_bytes(), bits)
    }
}

#[derive(Clone, Debug)]
pub struct ArithDecoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    input: BitReader<'a>,
}

impl<'a> ArithDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut input = BitReader::new(bytes);
        let mut value = 0;
        for _ in 0..32 {
            value = (value << 1) | input.next_bit();
        }
        ArithDecoder {
            low: 0,
            high: TOP,
            value,
            input,
        }
    }

    pub fn decode(&mut self, p0: u32) -> bool {
        let mid = split(self.low, self.high, p0);
        let bit = self.value > mid;
        if bit {
            self.low = mid + 1;
        } else {
            self.high = mid;
        }
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.input.next_bit();
        }
        bit
    }

    pub fn decode_bypass(&mut self) -> bool {
        self.decode(PROB_HALF)
    }
}
