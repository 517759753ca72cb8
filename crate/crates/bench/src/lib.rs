//! Shared fixtures for the kernel benchmarks.

use mvae_core::mixsim::{default_classes, derive_seed, gen_utterance, mix, MixSpec};
use mvae_core::signal::{stft_multi, ComplexSpectrogram, StftConfig, TimeSignal};

/// A seeded two-source instantaneous mixture of `secs` seconds at 8 kHz.
pub fn mixture(secs: f64, seed: u64) -> TimeSignal {
    let specs = default_classes();
    let sources: Vec<TimeSignal> = [0, 3]
        .iter()
        .enumerate()
        .map(|(j, &k)| gen_utterance(&specs[k], secs, 8000, derive_seed(&[seed, j as u64])).unwrap())
        .collect();
    mix(&sources, &MixSpec::random_instantaneous(2, seed)).unwrap().mixture
}

pub fn mixture_spectrogram(secs: f64, frame: usize, seed: u64) -> Vec<ComplexSpectrogram> {
    stft_multi(&mixture(secs, seed), StftConfig::new(frame).unwrap()).unwrap()
}
