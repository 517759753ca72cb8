//! Hamming-windowed STFT with 50% overlap and its overlap-add inverse.
//!
//! The signal is padded with `frame_len - hop` zeros on the left, so frame `n`
//! starts at sample `n * hop - (frame_len - hop)` and every input sample is
//! covered by exactly two frames. The periodic Hamming window sums to 1.08
//! across any two overlapping frames, which is the synthesis normalizer.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TimeSignal;

/// Sum of two periodic Hamming windows offset by half their length.
pub const HAMMING_OLA_GAIN: f64 = 1.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
}

impl StftConfig {
    /// Half-overlap configuration for an even `frame_len`.
    pub fn new(frame_len: usize) -> Result<Self> {
        Self::with_hop(frame_len, frame_len / 2)
    }

    pub fn with_hop(frame_len: usize, hop: usize) -> Result<Self> {
        if frame_len < 2 || frame_len % 2 != 0 {
            return Err(Error::config(format!("frame length must be even and >= 2, got {frame_len}")));
        }
        if hop != frame_len / 2 {
            return Err(Error::config(format!(
                "only 50% overlap is supported: hop must be {}, got {hop}",
                frame_len / 2
            )));
        }
        Ok(Self { frame_len, hop })
    }

    pub fn freq_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frames needed to cover `len` samples twice.
    pub fn frames_for(&self, len: usize) -> usize {
        if len == 0 {
            0
        } else {
            len.div_ceil(self.hop) + 1
        }
    }

    fn lead(&self) -> usize {
        self.frame_len - self.hop
    }
}

/// Periodic Hamming window `0.54 - 0.46 cos(2πt/L)`.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| 0.54 - 0.46 * (2.0 * PI * t as f64 / len as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, stored frequency-major (`f * frames + n`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpectrogram {
    pub freq_bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(freq_bins: usize, frames: usize, frame_len: usize, hop: usize, sample_rate: u32) -> Self {
        Self {
            freq_bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); freq_bins * frames],
            frame_len,
            hop,
            sample_rate,
        }
    }

    /// Same geometry, new coefficients.
    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != self.freq_bins * self.frames {
            return Err(Error::dim("spectrogram data length does not match geometry"));
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    #[inline]
    pub fn get(&self, f: usize, n: usize) -> Complex64 {
        self.data[f * self.frames + n]
    }

    #[inline]
    pub fn set(&mut self, f: usize, n: usize, v: Complex64) {
        self.data[f * self.frames + n] = v;
    }

    pub fn row(&self, f: usize) -> &[Complex64] {
        &self.data[f * self.frames..(f + 1) * self.frames]
    }

    /// `|s(f,n)|²`, frequency-major.
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.freq_bins == other.freq_bins
            && self.frames == other.frames
            && self.frame_len == other.frame_len
            && self.hop == other.hop
    }

    /// CSV dump with header `f,n,re,im`, one frame after another.
    pub fn write_csv_complex(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "f,n,re,im")?;
        for n in 0..self.frames {
            for f in 0..self.freq_bins {
                let v = self.get(f, n);
                writeln!(w, "{f},{n},{:e},{:e}", v.re, v.im)?;
            }
        }
        Ok(())
    }

    /// CSV dump with header `f,n,power`, one frame after another.
    pub fn write_csv_power(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "f,n,power")?;
        for n in 0..self.frames {
            for f in 0..self.freq_bins {
                writeln!(w, "{f},{n},{:e}", self.get(f, n).norm_sqr())?;
            }
        }
        Ok(())
    }
}

struct Planned {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan(len: usize) -> Planned {
    let mut planner = FftPlanner::new();
    Planned {
        forward: planner.plan_fft_forward(len),
        inverse: planner.plan_fft_inverse(len),
    }
}

/// Analyze one channel.
pub fn stft(samples: &[f64], sample_rate: u32, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    let cfg = StftConfig::with_hop(cfg.frame_len, cfg.hop)?;
    let frames = cfg.frames_for(samples.len());
    let bins = cfg.freq_bins();
    let window = hamming(cfg.frame_len);
    let fft = plan(cfg.frame_len).forward;
    let mut out = ComplexSpectrogram::zeros(bins, frames, cfg.frame_len, cfg.hop, sample_rate);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.frame_len];
    let lead = cfg.lead() as isize;
    for n in 0..frames {
        let start = (n * cfg.hop) as isize - lead;
        for (i, slot) in buf.iter_mut().enumerate() {
            let t = start + i as isize;
            let x = if t >= 0 && (t as usize) < samples.len() {
                samples[t as usize]
            } else {
                0.0
            };
            *slot = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out.set(f, n, buf[f]);
        }
    }
    Ok(out)
}

/// Analyze every channel of a signal.
pub fn stft_multi(signal: &TimeSignal, cfg: StftConfig) -> Result<Vec<ComplexSpectrogram>> {
    signal
        .channels
        .iter()
        .map(|ch| stft(ch, signal.sample_rate, cfg))
        .collect()
}

/// Overlap-add synthesis, trimmed or zero-extended to `original_length` samples.
pub fn istft(spec: &ComplexSpectrogram, original_length: usize) -> Result<Vec<f64>> {
    if spec.frame_len == 0 || spec.hop == 0 {
        return Err(Error::contract("spectrogram carries no frame geometry"));
    }
    let cfg = StftConfig::with_hop(spec.frame_len, spec.hop)
        .map_err(|e| Error::contract(format!("spectrogram geometry is not invertible: {e}")))?;
    if spec.freq_bins != cfg.freq_bins() || spec.data.len() != spec.freq_bins * spec.frames {
        return Err(Error::contract("spectrogram shape does not match its frame geometry"));
    }
    let len = cfg.frame_len;
    let lead = cfg.lead() as isize;
    let inverse = plan(len).inverse;
    let mut out = vec![0.0; original_length];
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    let nyquist = len / 2;
    for n in 0..spec.frames {
        for f in 0..=nyquist {
            let mut v = spec.get(f, n);
            if f == 0 || f == nyquist {
                v.im = 0.0;
            }
            buf[f] = v;
            if f != 0 && f != nyquist {
                buf[len - f] = v.conj();
            }
        }
        inverse.process(&mut buf);
        let start = (n * cfg.hop) as isize - lead;
        for (i, v) in buf.iter().enumerate() {
            let t = start + i as isize;
            if t >= 0 && (t as usize) < original_length {
                out[t as usize] += v.re / (len as f64 * HAMMING_OLA_GAIN);
            }
        }
    }
    Ok(out)
}

/// Synthesize a multichannel signal, one spectrogram per channel.
pub fn istft_multi(specs: &[ComplexSpectrogram], original_length: usize) -> Result<TimeSignal> {
    let sample_rate = specs
        .first()
        .map(|s| s.sample_rate)
        .ok_or_else(|| Error::contract("no spectrograms to synthesize"))?;
    let channels = specs
        .iter()
        .map(|s| istft(s, original_length))
        .collect::<Result<Vec<_>>>()?;
    TimeSignal::new(channels, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_dft(frame: &[f64], k: usize) -> Complex64 {
        let len = frame.len() as f64;
        frame
            .iter()
            .enumerate()
            .map(|(t, &x)| Complex64::from_polar(x, -2.0 * PI * k as f64 * t as f64 / len))
            .sum()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(StftConfig::new(7).is_err());
        assert!(StftConfig::with_hop(8, 2).is_err());
        assert!(StftConfig::with_hop(8, 4).is_ok());
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = stft(&[0.0; 100], 8000, StftConfig::new(16).unwrap()).unwrap();
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        let back = istft(&s, 100).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_signal_matches_direct_dft() {
        let cfg = StftConfig::new(8).unwrap();
        let s = stft(&[1.0; 64], 8000, cfg).unwrap();
        let w = hamming(8);
        let win_sum: f64 = w.iter().sum();
        for n in 2..s.frames - 2 {
            assert!((s.get(0, n).norm() - win_sum).abs() < 1e-10);
            for k in 1..=4 {
                let oracle = direct_dft(&w, k);
                assert!((s.get(k, n) - oracle).norm() < 1e-10);
            }
            for k in 2..=4 {
                assert!(s.get(k, n).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_bin_tone_concentrates_energy() {
        let len = 32;
        let k0 = 5;
        let x: Vec<f64> = (0..512)
            .map(|t| (2.0 * PI * k0 as f64 * t as f64 / len as f64).cos())
            .collect();
        let s = stft(&x, 8000, StftConfig::new(len).unwrap()).unwrap();
        for n in 2..s.frames - 2 {
            let total: f64 = (0..s.freq_bins).map(|f| s.get(f, n).norm_sqr()).sum();
            let near: f64 = (k0 - 1..=k0 + 1).map(|f| s.get(f, n).norm_sqr()).sum();
            assert!(near / total > 1.0 - 1e-12);
            assert!(s.get(k0, n).norm() > 2.0 * s.get(k0 + 1, n).norm());
        }
    }

    #[test]
    fn round_trip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = StftConfig::new(256).unwrap();
        let sx = stft(&x, 16000, cfg).unwrap();
        let sy = stft(&y, 16000, cfg).unwrap();
        let back = istft(&sx, x.len()).unwrap();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");

        let sum = sx.with_data(sx.data.iter().zip(&sy.data).map(|(a, b)| a + b).collect()).unwrap();
        let lhs = istft(&sum, 4096).unwrap();
        let rhs: Vec<f64> = back.iter().zip(istft(&sy, 4096).unwrap()).map(|(a, b)| a + b).collect();
        let lin = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(lin < 1e-12);
    }

    #[test]
    fn istft_requires_geometry() {
        let mut s = ComplexSpectrogram::zeros(5, 3, 8, 4, 8000);
        s.frame_len = 0;
        assert!(matches!(istft(&s, 10), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_headers() {
        let s = ComplexSpectrogram::zeros(2, 1, 2, 1, 8000);
        let mut buf = Vec::new();
        s.write_csv_power(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "f,n,power\n0,0,0e0\n1,0,0e0\n");
        let mut buf = Vec::new();
        s.write_csv_complex(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("f,n,re,im\n"));
    }
}
