//! Float ECG-TCN: architecture, forward/backward passes and Adam training.

mod layers;
mod network;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use layers::{
    dropout_fwd, he_uniform_init, relu, relu_backward, BatchNorm, BnCache, Conv1d, Dense, Mode,
};
pub use network::{argmax, softmax, Network, ResidualBlock, SkipBranch, Tape, TensorRole};
pub use train::{
    adam_step, cross_entropy, train, AdamState, EpochStats, Precision, TrainConfig, TrainOutcome,
};

/// Scalar type of the float network (`f32` for training, `f64` for gradient checks).
pub trait Real: Float + FromPrimitive + Sum + Send + Sync + Debug + Default + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite conversion")
}

/// Multichannel 1D signal stored channel-major (`data[c * length + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub length: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, length: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || length == 0 || data.len() != channels * length {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{length} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
        })
    }

    pub fn zeros(channels: usize, length: usize) -> Self {
        Self {
            channels,
            length,
            data: vec![T::zero(); channels * length],
        }
    }

    /// Single-channel map from raw samples.
    pub fn from_signal(samples: &[f32]) -> Self {
        Self {
            channels: 1,
            length: samples.len(),
            data: samples.iter().map(|&v| real(v as f64)).collect(),
        }
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[T] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            length: self.length,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.channels != other.channels || self.length != other.length {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.channels, self.length, other.channels, other.length
            )));
        }
        Ok(Self {
            channels: self.channels,
            length: self.length,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }
}

/// Architecture hyperparameters of the ECG-TCN.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input_len: usize,
    /// Channels produced by the entry 1x1 convolution.
    pub entry_filters: usize,
    /// Filters in every residual block.
    pub block_filters: usize,
    /// Kernel length in every residual block.
    pub block_kernel: usize,
    /// Number of residual blocks; block `i` uses dilation `2^i`.
    pub levels: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::ecg5000()
    }
}

impl ArchConfig {
    /// 140 samples, F1 = 2, FT = 11, KT = 11, three blocks, five classes.
    pub fn ecg5000() -> Self {
        Self {
            input_len: 140,
            entry_filters: 2,
            block_filters: 11,
            block_kernel: 11,
            levels: 3,
            n_classes: 5,
            dropout_p: 0.3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.levels).map(|i| 1usize << i).collect()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.block_kernel, self.levels)
    }

    /// True when one output step can see the whole input window.
    pub fn covers_input(&self) -> bool {
        self.receptive_field() >= self.input_len
    }

    /// Channels at the network's last feature map.
    pub fn feature_channels(&self) -> usize {
        if self.levels == 0 {
            self.entry_filters
        } else {
            self.block_filters
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("entry_filters", self.entry_filters),
            ("block_filters", self.block_filters),
            ("block_kernel", self.block_kernel),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Usage(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Usage(format!(
                "dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.levels > 16 {
            return Err(Error::Usage(format!(
                "{} levels is unreasonably deep",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Input steps visible to one output of `levels` stacked blocks, each holding
/// two causal convolutions of kernel `kernel` at dilation `2^i`:
/// `1 + 2 (K - 1)(2^L - 1)`.
pub fn receptive_field(kernel: usize, levels: usize) -> usize {
    1 + 2 * (kernel - 1) * ((1usize << levels) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Walks tap offsets of both convs in every block and returns the span.
    fn simulated_reach(kernel: usize, levels: usize) -> usize {
        let mut reach = 0;
        for l in 0..levels {
            reach += 2 * (kernel - 1) * (1 << l);
        }
        reach + 1
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(11, 3), 141);
        assert!(ArchConfig::ecg5000().covers_input());
        for l in 0..6 {
            assert_eq!(receptive_field(1, l), 1);
        }
        assert_eq!(receptive_field(2, 1), 3);
        for k in 1..8 {
            for l in 0..5 {
                assert_eq!(receptive_field(k, l), simulated_reach(k, l));
            }
        }
    }

    #[test]
    fn default_dilations() {
        assert_eq!(ArchConfig::ecg5000().dilations(), vec![1, 2, 4]);
    }
}
