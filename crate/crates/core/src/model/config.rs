use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Network hyperparameters. `C{channels}DF{downsample_factor}` names a variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    /// Frequency downsampling factor of the spectrum encoder: 4 or 8.
    pub downsample_factor: usize,
    pub n_amft_blocks: usize,
    pub attn_heads: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub dense_depth: usize,
    /// Depthwise kernel of the Conformer convolution module.
    pub conv_kernel: usize,
    pub vad_hidden: usize,
    /// Power-law exponent applied to the input magnitude.
    pub compress_exponent: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::variant(48, 4)
    }
}

impl ModelConfig {
    pub fn variant(channels: usize, downsample_factor: usize) -> Self {
        Self {
            channels,
            downsample_factor,
            n_amft_blocks: 2,
            attn_heads: 4,
            n_fft: 512,
            hop: 256,
            dense_depth: 4,
            conv_kernel: 7,
            vad_hidden: 128,
            compress_exponent: 0.3,
        }
    }

    /// Reduced configuration for gradient checks: C = 8, 64-point FFT,
    /// F' = 33 -> 17 -> 9.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            n_fft: 64,
            hop: 32,
            vad_hidden: 8,
            conv_kernel: 3,
            ..Self::variant(8, 4)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels > 0, "channels must be positive");
        ensure!(
            matches!(self.downsample_factor, 4 | 8),
            "downsample factor must be 4 or 8, got {}",
            self.downsample_factor
        );
        ensure!(self.attn_heads > 0 && self.channels % self.attn_heads == 0, "heads {} must divide channels {}", self.attn_heads, self.channels);
        ensure!(self.n_amft_blocks > 0, "need at least one fusion block");
        ensure!(self.n_fft >= 8 && self.n_fft % 2 == 0, "n_fft must be even and >= 8");
        ensure!(self.hop > 0 && self.n_fft % self.hop == 0, "hop must divide n_fft");
        ensure!(self.dense_depth > 0 && self.conv_kernel > 0 && self.vad_hidden > 0, "layer sizes must be positive");
        ensure!(self.compress_exponent > 0.0 && self.compress_exponent <= 1.0, "compression exponent must lie in (0, 1]");
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_down(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Frequency sizes along the encoder: [F, ceil(F/2), ...].
    pub fn freq_chain(&self) -> Vec<usize> {
        let mut v = vec![self.n_bins()];
        for _ in 0..self.n_down() {
            let last = *v.last().unwrap();
            v.push(last.div_ceil(2));
        }
        v
    }

    pub fn reduced_bins(&self) -> usize {
        *self.freq_chain().last().unwrap()
    }

    /// Frames produced for a waveform of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        let half = self.n_fft / 2;
        if len + half <= self.n_fft {
            1
        } else {
            1 + (len + half - self.n_fft).div_ceil(self.hop)
        }
    }

    pub fn name(&self) -> String {
        format!("C{}DF{}", self.channels, self.downsample_factor)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    /// Parses `C36DF4`, `C48DF8`, ...; only 36/48/60 and 4/8 are accepted.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant {s:?}; expected C{{36,48,60}}DF{{4,8}}"));
        let rest = s.trim().strip_prefix('C').ok_or_else(bad)?;
        let (c, df) = rest.split_once("DF").ok_or_else(bad)?;
        let c: usize = c.parse().map_err(|_| bad())?;
        let df: usize = df.parse().map_err(|_| bad())?;
        if !matches!(c, 36 | 48 | 60) || !matches!(df, 4 | 8) {
            return Err(bad());
        }
        Ok(Self::variant(c, df))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_and_chains() {
        let c: ModelConfig = "C48DF4".parse().unwrap();
        assert_eq!(c.freq_chain(), vec![257, 129, 65]);
        let c8: ModelConfig = "C36DF8".parse().unwrap();
        assert_eq!(c8.reduced_bins(), 33);
        assert_eq!(ModelConfig::tiny().freq_chain(), vec![33, 17, 9]);
        assert!("C50DF4".parse::<ModelConfig>().is_err());
        assert!("48DF4".parse::<ModelConfig>().is_err());
        assert_eq!(c.to_string(), "C48DF4");
        assert_eq!(c.n_frames(80_000), 313);
        assert_eq!(c.n_frames(1), 1);
        assert_eq!(ModelConfig::tiny().n_frames(128), 4);
        for v in ["C36DF4", "C48DF4", "C60DF4", "C36DF8", "C48DF8", "C60DF8"] {
            v.parse::<ModelConfig>().unwrap().validate().unwrap();
        }
    }
}
