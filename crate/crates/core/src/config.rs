//! Network topology. None of these sizes are fixed by the codec itself; the
//! defaults are desk-scale and can be overridden from a TOML file.

use serde::{Deserialize, Serialize};

/// Number of predicted body vertices.
pub const VERTEX_COUNT: usize = 10475;
pub const DEFAULT_KEYPOINTS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Keypoints per frame.
    pub keypoints: usize,
    /// Depth cells of heatmaps, texture features and flows.
    pub depth: usize,
    /// Frame downsampling factor ahead of the keypoint U-Net.
    pub downsample: usize,
    pub extractor_levels: usize,
    pub extractor_channels: usize,
    /// Texture feature channels per depth slice.
    pub texture_channels: usize,
    pub motion_levels: usize,
    pub motion_channels: usize,
    /// Gaussian heatmap variance in normalized units.
    pub sigma2: f32,
    /// 2× upsampling stages in the frame generator. The motion grid is the
    /// frame size divided by `2^generator_levels`.
    pub generator_levels: usize,
    pub generator_channels: usize,
    pub res_blocks: usize,
    /// Bottleneck width inside each vertex-head residual block.
    pub res_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            keypoints: DEFAULT_KEYPOINTS,
            depth: 4,
            downsample: 2,
            extractor_levels: 3,
            extractor_channels: 16,
            texture_channels: 8,
            motion_levels: 2,
            motion_channels: 16,
            sigma2: 0.01,
            generator_levels: 2,
            generator_channels: 16,
            res_blocks: 3,
            res_hidden: 4,
        }
    }
}

impl ModelConfig {
    /// Smallest frame-size multiple every stage can handle.
    pub fn frame_multiple(&self) -> usize {
        let extractor = self.downsample << self.extractor_levels;
        let synthesis = 1 << (self.generator_levels + self.motion_levels);
        lcm(extractor, synthesis)
    }

    pub fn motion_grid(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (
            self.depth,
            height >> self.generator_levels,
            width >> self.generator_levels,
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            (self.keypoints >= 1 && self.keypoints <= 255, "keypoints must be in 1..=255"),
            (self.depth >= 1 && self.depth <= 255, "depth must be in 1..=255"),
            (self.downsample >= 1, "downsample must be at least 1"),
            (self.extractor_levels >= 1, "extractor_levels must be at least 1"),
            (self.motion_levels >= 1, "motion_levels must be at least 1"),
            (self.extractor_channels >= 1, "extractor_channels must be at least 1"),
            (self.motion_channels >= 1, "motion_channels must be at least 1"),
            (self.texture_channels >= 1, "texture_channels must be at least 1"),
            (self.generator_channels >= 1, "generator_channels must be at least 1"),
            (self.res_hidden >= 1, "res_hidden must be at least 1"),
            (self.sigma2 > 0.0 && self.sigma2.is_finite(), "sigma2 must be positive"),
            (self.extractor_levels + self.motion_levels + self.generator_levels < 16, "too many levels"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg.to_string()),
            None => Ok(()),
        }
    }

    pub fn check_frame(&self, height: usize, width: usize) -> Result<(), String> {
        let m = self.frame_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(format!(
                "frame {width}x{height} must be a non-zero multiple of {m} in both dimensions"
            ));
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
