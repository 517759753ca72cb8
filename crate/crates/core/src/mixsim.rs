//! Deterministic synthetic sources and mixtures.
//!
//! Each source class is a harmonic generator with its own pitch range,
//! formant-like spectral envelope and syllabic amplitude modulation. Mixing is
//! either instantaneous (`x = A s`) or convolutive with seeded impulse responses:
//! a direct-path tap followed by an exponentially decaying Gaussian tail.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cvae::TrainingExample;
use crate::error::{Error, Result};
use crate::signal::{stft, write_wav, SampleFormat, StftConfig, TimeSignal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceClassSpec {
    pub class_id: usize,
    pub name: String,
    pub pitch_range_hz: (f64, f64),
    pub formants: Vec<Formant>,
    pub am_rate_range_hz: (f64, f64),
    pub harmonics: usize,
}

impl SourceClassSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pitch_range_hz;
        if !(lo > 50.0 && hi < 500.0 && lo <= hi) {
            return Err(Error::config(format!(
                "class {}: pitch range ({lo}, {hi}) must lie inside (50, 500) Hz",
                self.class_id
            )));
        }
        if self.formants.is_empty() || self.formants.iter().any(|f| f.gain <= 0.0 || f.bandwidth_hz <= 0.0) {
            return Err(Error::config(format!("class {}: envelope gains must be positive", self.class_id)));
        }
        if self.harmonics == 0 {
            return Err(Error::config("harmonic count must be positive"));
        }
        let (alo, ahi) = self.am_rate_range_hz;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::config("invalid amplitude-modulation range"));
        }
        Ok(())
    }

    fn envelope(&self, freq: f64) -> f64 {
        0.02 + self
            .formants
            .iter()
            .map(|fm| {
                let d = (freq - fm.center_hz) / fm.bandwidth_hz;
                fm.gain * (-0.5 * d * d).exp()
            })
            .sum::<f64>()
    }
}

fn formants(list: &[(f64, f64, f64)]) -> Vec<Formant> {
    list.iter()
        .map(|&(center_hz, bandwidth_hz, gain)| Formant {
            center_hz,
            bandwidth_hz,
            gain,
        })
        .collect()
}

/// Two high-pitched and two low-pitched classes with distinct envelopes.
pub fn default_classes() -> Vec<SourceClassSpec> {
    vec![
        SourceClassSpec {
            class_id: 0,
            name: "high-a".into(),
            pitch_range_hz: (210.0, 260.0),
            formants: formants(&[(800.0, 150.0, 1.0), (1500.0, 200.0, 0.6), (2900.0, 300.0, 0.3)]),
            am_rate_range_hz: (3.0, 4.5),
            harmonics: 30,
        },
        SourceClassSpec {
            class_id: 1,
            name: "high-b".into(),
            pitch_range_hz: (165.0, 205.0),
            formants: formants(&[(400.0, 120.0, 1.0), (2300.0, 250.0, 0.7), (3200.0, 300.0, 0.4)]),
            am_rate_range_hz: (2.0, 3.0),
            harmonics: 30,
        },
        SourceClassSpec {
            class_id: 2,
            name: "low-a".into(),
            pitch_range_hz: (110.0, 140.0),
            formants: formants(&[(650.0, 150.0, 1.0), (1100.0, 150.0, 0.8), (2400.0, 250.0, 0.25)]),
            am_rate_range_hz: (3.5, 5.0),
            harmonics: 40,
        },
        SourceClassSpec {
            class_id: 3,
            name: "low-b".into(),
            pitch_range_hz: (85.0, 105.0),
            formants: formants(&[(300.0, 100.0, 1.0), (900.0, 150.0, 0.6), (2100.0, 250.0, 0.3)]),
            am_rate_range_hz: (1.5, 2.5),
            harmonics: 40,
        },
    ]
}

/// Mixes several integers into one seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Synthesize one unit-RMS utterance of `spec`.
pub fn gen_utterance(spec: &SourceClassSpec, duration_s: f64, sample_rate: u32, seed: u64) -> Result<TimeSignal> {
    spec.validate()?;
    if duration_s < 0.5 {
        return Err(Error::config(format!("utterances must last at least 0.5 s, got {duration_s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let len = (duration_s * sr).round() as usize;
    let (plo, phi) = spec.pitch_range_hz;
    let base = rng.gen_range(plo..=phi);
    let glide = rng.gen_range(-0.08..0.08);
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let am_rate = rng.gen_range(spec.am_rate_range_hz.0..=spec.am_rate_range_hz.1);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let harmonic_phase: Vec<f64> = (0..spec.harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let time = t as f64 / sr;
        let progress = t as f64 / len.max(1) as f64 - 0.5;
        let f0 = (base * (1.0 + glide * progress + 0.03 * (2.0 * PI * vib_rate * time + vib_phase).sin()))
            .clamp(plo, phi);
        phase += 2.0 * PI * f0 / sr;
        let mut value = 0.0;
        for (h, ph) in harmonic_phase.iter().enumerate() {
            let freq = f0 * (h + 1) as f64;
            if freq >= 0.45 * sr {
                break;
            }
            value += spec.envelope(freq) * (phase * (h + 1) as f64 + ph).sin();
        }
        let gate = 0.5 - 0.5 * (2.0 * PI * am_rate * time + am_phase).cos();
        let noise: f64 = rng.sample(StandardNormal);
        out.push(value * (0.03 + gate.powf(1.5)) + 0.003 * noise);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    TimeSignal::mono(out, sample_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub utterances_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Share of each class assigned to the training split.
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances_per_class: 40,
            duration_s: 1.0,
            sample_rate: 8000,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub class_id: usize,
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub signal: TimeSignal,
}

/// One manifest record per utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class_id: usize,
    pub path: String,
    pub split: Split,
    pub seed: u64,
}

/// Generate every class's utterances; the first `train_fraction` of each class go to training.
pub fn gen_corpus(specs: &[SourceClassSpec], cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    if specs.is_empty() || cfg.utterances_per_class == 0 {
        return Err(Error::config("corpus needs at least one class and one utterance per class"));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::config("train fraction must be in [0, 1]"));
    }
    let n_train = (cfg.utterances_per_class as f64 * cfg.train_fraction).round() as usize;
    let mut out = Vec::with_capacity(specs.len() * cfg.utterances_per_class);
    for spec in specs {
        for index in 0..cfg.utterances_per_class {
            let seed = derive_seed(&[cfg.seed, spec.class_id as u64, index as u64]);
            out.push(Utterance {
                class_id: spec.class_id,
                index,
                seed,
                split: if index < n_train { Split::Train } else { Split::Eval },
                signal: gen_utterance(spec, cfg.duration_s, cfg.sample_rate, seed)?,
            });
        }
    }
    Ok(out)
}

/// Write utterances as float32 WAV files plus `manifest.json` under `dir`.
pub fn write_corpus(utterances: &[Utterance], dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(utterances.len());
    for u in utterances {
        let name = format!("class{}_{:04}.wav", u.class_id, u.index);
        write_wav(dir.join(&name), &u.signal, SampleFormat::Float32)?;
        manifest.push(ManifestEntry {
            class_id: u.class_id,
            path: name,
            split: u.split,
            seed: u.seed,
        });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Normalized training examples for the train and eval splits, in corpus order.
pub fn training_examples(
    utterances: &[Utterance],
    stft_cfg: StftConfig,
    num_classes: usize,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>)> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for u in utterances {
        let spec = stft(u.signal.channel(0), u.signal.sample_rate, stft_cfg)?;
        let ex = TrainingExample::from_spectrogram(&spec, u.class_id, num_classes)?;
        match u.split {
            Split::Train => train.push(ex),
            Split::Eval => eval.push(ex),
        }
    }
    Ok((train, eval))
}

/// Read `manifest.json`, resolving paths relative to `dir`.
pub fn read_manifest(dir: &Path) -> Result<Vec<(ManifestEntry, PathBuf)>> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.path);
            (e, p)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MixMode {
    /// `x_i = Σ_j A[i][j] s_j`.
    Instantaneous { matrix: Vec<Vec<f64>> },
    /// `x_i = Σ_j rirs[i][j] * s_j`.
    Convolutive { rirs: Vec<Vec<Vec<f64>>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub mode: MixMode,
    pub seed: u64,
    /// Sensor noise level; `None` disables noise.
    pub snr_db: Option<f64>,
}

/// Longest synthetic impulse response.
pub const MAX_RIR_TAPS: usize = 2048;
/// Amplitude of the reverberant tail relative to the direct path.
pub const RIR_TAIL_GAIN: f64 = 0.1;

impl MixSpec {
    pub fn instantaneous(matrix: Vec<Vec<f64>>) -> Self {
        Self {
            mode: MixMode::Instantaneous { matrix },
            seed: 0,
            snr_db: None,
        }
    }

    /// Unit diagonal, off-diagonal gains uniform in [0.3, 0.7).
    pub fn random_instantaneous(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xA11]));
        let matrix = (0..channels)
            .map(|i| {
                (0..channels)
                    .map(|j| if i == j { 1.0 } else { rng.gen_range(0.3..0.7) })
                    .collect()
            })
            .collect();
        Self {
            mode: MixMode::Instantaneous { matrix },
            seed,
            snr_db: None,
        }
    }

    /// Convolutive mixing with [`synthetic_rirs`].
    pub fn convolutive(channels: usize, decay_ms: f64, sample_rate: u32, seed: u64) -> Result<Self> {
        Ok(Self {
            mode: MixMode::Convolutive {
                rirs: synthetic_rirs(channels, decay_ms, sample_rate, seed)?,
            },
            seed,
            snr_db: None,
        })
    }
}

/// Impulse responses `rirs[i][j]` from source `j` to microphone `i`: a direct
/// path (gain 1 on the diagonal, 0.6 off it, 0-3 samples of delay) followed by
/// Gaussian noise whose amplitude falls 60 dB over `decay_ms`.
pub fn synthetic_rirs(channels: usize, decay_ms: f64, sample_rate: u32, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    if decay_ms <= 0.0 || !decay_ms.is_finite() {
        return Err(Error::config("decay time must be positive"));
    }
    let decay_samples = decay_ms * 1e-3 * sample_rate as f64;
    let len = (decay_samples.ceil() as usize).clamp(8, MAX_RIR_TAPS);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xC0DE]));
    let mut rirs = vec![vec![Vec::new(); channels]; channels];
    for (i, row) in rirs.iter_mut().enumerate() {
        for (j, rir) in row.iter_mut().enumerate() {
            let mut h = vec![0.0; len];
            let delay = if i == j { 0 } else { rng.gen_range(1..=3) };
            h[delay] = if i == j { 1.0 } else { 0.6 };
            for (t, tap) in h.iter_mut().enumerate().skip(delay + 1) {
                let n: f64 = rng.sample(StandardNormal);
                *tap += RIR_TAIL_GAIN * n * 10f64.powf(-3.0 * (t - delay) as f64 / decay_samples);
            }
            *rir = h;
        }
    }
    Ok(rirs)
}

/// Ratio of extreme singular values.
pub fn condition_number(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    let m = DMatrix::from_fn(n, n, |r, c| matrix[r][c]);
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// A multichannel mixture with the per-source images that add up to it.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: TimeSignal,
    /// `images[j]` is source `j` as observed at every microphone.
    pub images: Vec<TimeSignal>,
}

fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 || k >= x.len() {
            continue;
        }
        for (dst, &src) in out[k..].iter_mut().zip(x) {
            *dst += hk * src;
        }
    }
    out
}

/// Mix `sources` (mono, equal length) into as many channels as sources.
pub fn mix(sources: &[TimeSignal], spec: &MixSpec) -> Result<Mixture> {
    let count = sources.len();
    let first = sources.first().ok_or_else(|| Error::config("no sources to mix"))?;
    if sources.iter().any(|s| s.num_channels() != 1) {
        return Err(Error::dim("sources must be mono"));
    }
    if sources.iter().any(|s| s.len() != first.len() || s.sample_rate != first.sample_rate) {
        return Err(Error::dim("sources must share length and sample rate"));
    }
    let len = first.len();
    let sr = first.sample_rate;
    let images: Vec<Vec<Vec<f64>>> = match &spec.mode {
        MixMode::Instantaneous { matrix } => {
            if matrix.len() != count || matrix.iter().any(|r| r.len() != count) {
                return Err(Error::dim(format!("mixing matrix must be {count}x{count}")));
            }
            let cond = condition_number(matrix);
            if !(cond < 1e6) {
                return Err(Error::config(format!("mixing matrix is singular (condition number {cond:e})")));
            }
            (0..count)
                .map(|j| {
                    (0..count)
                        .map(|i| sources[j].channels[0].iter().map(|&s| matrix[i][j] * s).collect())
                        .collect()
                })
                .collect()
        }
        MixMode::Convolutive { rirs } => {
            if rirs.len() != count || rirs.iter().any(|r| r.len() != count) {
                return Err(Error::dim(format!("impulse responses must be {count}x{count}")));
            }
            if rirs.iter().flatten().any(|h| h.is_empty() || h.len() > MAX_RIR_TAPS) {
                return Err(Error::config(format!("impulse responses must have 1..={MAX_RIR_TAPS} taps")));
            }
            (0..count)
                .map(|j| {
                    (0..count)
                        .map(|i| convolve_same(&sources[j].channels[0], &rirs[i][j]))
                        .collect()
                })
                .collect()
        }
    };

    let mut channels = vec![vec![0.0; len]; count];
    for image in &images {
        for (dst, src) in channels.iter_mut().zip(image) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    if let Some(snr) = spec.snr_db {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 0x5EED]));
        for ch in &mut channels {
            let power = ch.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
            let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
            for v in ch.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += sigma * n;
            }
        }
    }
    Ok(Mixture {
        mixture: TimeSignal::new(channels, sr)?,
        images: images
            .into_iter()
            .map(|img| TimeSignal::new(img, sr))
            .collect::<Result<_>>()?,
    })
}
