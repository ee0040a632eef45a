use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

pub const CONFIG_VERSION: u32 = 1;

/// Fixed line height every image is scaled to; pages use `LINE_HEIGHT · L`.
pub const LINE_HEIGHT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnLayerSpec {
    /// `(height, width)`
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub out_channels: usize,
}

impl CnnLayerSpec {
    pub const fn new(kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2], out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            out_channels,
        }
    }
}

impl fmt::Display for CnnLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kernel {}x{}, stride {}x{}, padding {}x{}, {} channels",
            self.kernel[0],
            self.kernel[1],
            self.stride[0],
            self.stride[1],
            self.padding[0],
            self.padding[1],
            self.out_channels
        )
    }
}

/// The eight-layer stack. The wide 3×5 and 2×7 kernels close it.
///
/// Paddings are 1 on layers 1–6, then `(1, 2)` and `(0, 3)` so that width
/// shrinks by exactly 8 and a 64-pixel band collapses to one row.
/// Layer 8 strides 2 vertically: on a 64-pixel line its input is 2 rows
/// high and the stride has no effect, while on a `64·L` page it halves the
/// remaining `2L` rows to `L`.
pub const DEFAULT_STACK: [CnnLayerSpec; 8] = [
    CnnLayerSpec::new([3, 3], [2, 1], [1, 1], 64),
    CnnLayerSpec::new([5, 5], [2, 2], [1, 1], 128),
    CnnLayerSpec::new([3, 3], [2, 2], [1, 1], 128),
    CnnLayerSpec::new([3, 3], [1, 2], [1, 1], 256),
    CnnLayerSpec::new([3, 3], [2, 1], [1, 1], 256),
    CnnLayerSpec::new([3, 3], [1, 1], [1, 1], 512),
    CnnLayerSpec::new([3, 5], [2, 1], [1, 2], 512),
    CnnLayerSpec::new([2, 7], [2, 1], [0, 3], 512),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Two post-norm Transformer encoder blocks.
    Transformer,
    /// Two bidirectional LSTM layers.
    Blstm,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Backend::Transformer),
            "blstm" => Ok(Backend::Blstm),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-width stack, roughly 12–14M parameters.
    Paper,
    /// Channels and hidden width divided by four.
    Toy,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub version: u32,
    pub cnn: Vec<CnnLayerSpec>,
    pub backend: Backend,
    pub backend_layers: usize,
    /// Feed-forward width of each encoder block, or per-direction LSTM width.
    pub hidden_dim: usize,
    /// Attention heads (Transformer back-end only).
    pub heads: usize,
    pub dropout: f64,
    /// Alphabet size including the blank.
    pub n_symbols: usize,
    pub oversample_l: usize,
}

impl ModelConfig {
    pub fn profile(profile: Profile, backend: Backend, n_symbols: usize, oversample_l: usize) -> Self {
        let (div, heads) = match profile {
            Profile::Paper => (1, 8),
            Profile::Toy => (4, 4),
        };
        let cnn = DEFAULT_STACK
            .iter()
            .map(|s| CnnLayerSpec {
                out_channels: s.out_channels / div,
                ..*s
            })
            .collect();
        Self {
            version: CONFIG_VERSION,
            cnn,
            backend,
            backend_layers: 2,
            hidden_dim: 256 / div,
            heads,
            dropout: 0.1,
            n_symbols,
            oversample_l,
        }
    }

    pub fn paper(backend: Backend, n_symbols: usize) -> Self {
        Self::profile(Profile::Paper, backend, n_symbols, 1)
    }

    pub fn toy(backend: Backend, n_symbols: usize) -> Self {
        Self::profile(Profile::Toy, backend, n_symbols, 1)
    }

    pub fn with_oversample(mut self, l: usize) -> Self {
        self.oversample_l = l;
        self
    }

    /// Channels leaving the CNN, i.e. the width of every sequence vector.
    pub fn feature_dim(&self) -> usize {
        self.cnn.last().map_or(1, |s| s.out_channels)
    }

    /// Input image height this config expects: `64 · L`.
    pub fn input_height(&self) -> usize {
        LINE_HEIGHT * self.oversample_l
    }

    pub fn blank(&self) -> usize {
        self.n_symbols - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.cnn.is_empty() {
            return Err(Error::Config("empty CNN stack".into()));
        }
        for (i, s) in self.cnn.iter().enumerate() {
            if s.kernel.contains(&0) || s.stride.contains(&0) || s.out_channels == 0 {
                return Err(Error::Config(format!("CNN layer {}: {s}", i + 1)));
            }
        }
        if self.n_symbols < 2 {
            return Err(Error::Config("alphabet needs a symbol and the blank".into()));
        }
        if self.oversample_l == 0 {
            return Err(Error::Config("oversample factor L must be positive".into()));
        }
        if self.backend_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("empty back-end".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.backend == Backend::Transformer && (self.heads == 0 || !self.feature_dim().is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.feature_dim(),
                self.heads
            )));
        }
        Ok(())
    }

    /// Spatial extent `(H', W')` after the CNN stack.
    ///
    /// Every layer's unpadded input must be at least as large as its kernel;
    /// otherwise the window would cover more padding than image and the
    /// input counts as too small for the stack.
    pub fn output_lengths(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("empty input {height}x{width}")));
        }
        let (mut h, mut w) = (height, width);
        for (i, s) in self.cnn.iter().enumerate() {
            if h < s.kernel[0] || w < s.kernel[1] {
                return Err(Error::Config(format!(
                    "input {height}x{width} too small: layer {} receives {h}x{w} for a {}x{} kernel",
                    i + 1,
                    s.kernel[0],
                    s.kernel[1]
                )));
            }
            h = conv_output_extent(h, s.kernel[0], s.stride[0], s.padding[0])
                .ok_or_else(|| Error::Config(format!("layer {} collapses height", i + 1)))?;
            w = conv_output_extent(w, s.kernel[1], s.stride[1], s.padding[1])
                .ok_or_else(|| Error::Config(format!("layer {} collapses width", i + 1)))?;
        }
        Ok((h, w))
    }

    /// Cumulative stride along the width axis.
    pub fn width_factor(&self) -> usize {
        self.cnn.iter().map(|s| s.stride[1]).product()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default() -> ModelConfig {
        ModelConfig::paper(Backend::Transformer, 80)
    }

    #[test]
    fn stack_kernels_and_channels() {
        let kernels: Vec<[usize; 2]> = DEFAULT_STACK.iter().map(|s| s.kernel).collect();
        assert_eq!(
            kernels,
            vec![[3, 3], [5, 5], [3, 3], [3, 3], [3, 3], [3, 3], [3, 5], [2, 7]]
        );
        let channels: Vec<usize> = DEFAULT_STACK.iter().map(|s| s.out_channels).collect();
        assert_eq!(channels, vec![64, 128, 128, 256, 256, 512, 512, 512]);
        // Layer 8 strides 2 in height, which is
        // inert on 64-pixel lines (see DEFAULT_STACK).
        let strides: Vec<[usize; 2]> = DEFAULT_STACK.iter().map(|s| s.stride).collect();
        assert_eq!(&strides[..7], &[[2, 1], [2, 2], [2, 2], [1, 2], [2, 1], [1, 1], [2, 1]]);
        assert_eq!(strides[7][1], 1);
        assert_eq!(default().width_factor(), 8);
    }

    #[test]
    fn line_and_page_lengths() {
        let c = default();
        assert_eq!(c.output_lengths(64, 1024).unwrap(), (1, 128));
        assert_eq!(c.output_lengths(64 * 24, 1152).unwrap(), (24, 144));
        assert!(matches!(c.output_lengths(64, 8), Err(Error::Config(_))));
    }

    #[test]
    fn width_divides_by_eight_over_range() {
        let c = default();
        for w in (64..=4096).step_by(8) {
            assert_eq!(c.output_lengths(64, w).unwrap(), (1, w / 8), "W={w}");
        }
        for l in 1..=32 {
            assert_eq!(c.output_lengths(64 * l, 512).unwrap().0, l, "L={l}");
        }
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = ModelConfig::toy(Backend::Blstm, 12).with_oversample(4);
        let text = c.to_toml();
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), c);
        let bad = text.replace("n_symbols = 12", "n_symbols = 1");
        assert!(ModelConfig::from_toml(&bad).is_err());
        let mut heads = ModelConfig::toy(Backend::Transformer, 12);
        heads.heads = 3;
        assert!(heads.validate().is_err());
    }

    #[test]
    fn toy_profile_divides_by_four() {
        let c = ModelConfig::toy(Backend::Transformer, 12);
        let channels: Vec<usize> = c.cnn.iter().map(|s| s.out_channels).collect();
        assert_eq!(channels, vec![16, 32, 32, 64, 64, 128, 128, 128]);
        assert_eq!(c.hidden_dim, 64);
    }
}
