//! Adaptive binary probability models.

use super::arith::PROB_ONE;

/// Count cap; reaching it halves both counts.
const COUNT_LIMIT: u32 = 1024;
/// Coding probabilities are clamped to `[1/64, 63/64]`.
pub const PROB_MIN: u32 = PROB_ONE / 64;
pub const PROB_MAX: u32 = PROB_ONE - PROB_MIN;

/// Prefix bin positions with their own context; later positions share the last.
pub const PREFIX_CONTEXTS: usize = 17;
pub const AXES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BinModel {
    zeros: u16,
    ones: u16,
}

impl Default for BinModel {
    fn default() -> Self {
        BinModel { zeros: 1, ones: 1 }
    }
}

impl BinModel {
    /// Probability of a zero bin, 16-bit fixed point.
    pub fn p0(&self) -> u32 {
        let total = self.zeros as u32 + self.ones as u32;
        ((self.zeros as u32 * PROB_ONE) / total).clamp(PROB_MIN, PROB_MAX)
    }

    pub fn probability_of_zero(&self) -> f64 {
        self.p0() as f64 / PROB_ONE as f64
    }

    pub fn counts(&self) -> (u16, u16) {
        (self.zeros, self.ones)
    }

    pub fn update(&mut self, bit: bool) {
        if bit {
            self.ones += 1;
        } else {
            self.zeros += 1;
        }
        if self.zeros as u32 + self.ones as u32 > COUNT_LIMIT {
            self.zeros = self.zeros.div_ceil(2);
            self.ones = self.ones.div_ceil(2);
        }
    }
}

/// All adaptive contexts of one keypoint stream: one model per coordinate
/// axis and Exp-Golomb prefix position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct CoderState {
    prefix: [[BinModel; PREFIX_CONTEXTS]; AXES],
}

impl CoderState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn prefix_model(&mut self, axis: usize, position: usize) -> &mut BinModel {
        &mut self.prefix[axis][position.min(PREFIX_CONTEXTS - 1)]
    }

    pub fn models(&self) -> impl Iterator<Item = &BinModel> {
        self.prefix.iter().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_stays_bounded() {
        let mut m = BinModel::default();
        assert_eq!(m.p0(), PROB_ONE / 2);
        for _ in 0..5000 {
            m.update(false);
            assert!(m.p0() >= PROB_MIN && m.p0() <= PROB_MAX);
        }
        assert_eq!(m.p0(), PROB_MAX);
        for _ in 0..5000 {
            m.update(true);
            assert!(m.p0() >= PROB_MIN && m.p0() <= PROB_MAX);
        }
        assert_eq!(m.p0(), PROB_MIN);
    }

    #[test]
    fn zero_run_is_monotone() {
        let mut m = BinModel::default();
        let mut last = m.p0();
        for _ in 0..3000 {
            m.update(false);
            assert!(m.p0() >= last);
            last = m.p0();
        }
    }

    #[test]
    fn late_positions_share_a_context() {
        let mut s = CoderState::new();
        s.prefix_model(1, 40).update(true);
        assert_eq!(s.prefix_model(1, 16).counts(), (1, 2));
        assert_eq!(s.prefix_model(0, 16).counts(), (1, 1));
    }
}
