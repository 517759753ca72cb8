//! Time-domain signals, WAV files and the STFT front end.

mod stft;
mod wav;

pub use stft::{
    hamming, istft, istft_multi, stft, stft_multi, ComplexSpectrogram, StftConfig, HAMMING_OLA_GAIN,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, SampleFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multichannel real signal; every channel has the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSignal {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl TimeSignal {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if let Some(first) = channels.first() {
            if channels.iter().any(|c| c.len() != first.len()) {
                return Err(Error::dim("channels have different lengths"));
            }
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}
