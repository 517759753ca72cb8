//! Conditional VAE over power spectrograms.
//!
//! Encoder: two gated convolution blocks (`F+C → 64`, stride 1; `64+C → 32`,
//! stride 2) followed by two stride-2 convolution heads emitting the latent
//! mean and log-variance. Decoder: two gated transposed-convolution blocks
//! (stride 2 each) and a stride-1 transposed convolution to `F` channels that
//! emits `log σ²`. The class label is tiled over time and concatenated to the
//! input of every layer. Gated blocks compute `BN(a) ⊙ sigmoid(BN(g))`.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, read_model, save_model, write_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    elbo_batch, train, validation_elbo, ElboTerms, EpochLog, TrainConfig, TrainOutcome,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_output_len, deconv_output_len, BatchMoments, Mode, NdArray, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::signal::ComplexSpectrogram;

/// Bounds applied to every log-variance the networks emit.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;
/// Added to power before the log feeding the encoder.
pub const LOG_POWER_EPS: f64 = 1e-8;
/// Shortest input the encoder accepts.
pub const MIN_FRAMES: usize = 8;

const KERNEL: usize = 5;
const PAD: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeArch {
    pub freq_bins: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Channels of the first and second encoder blocks (mirrored by the decoder).
    pub hidden: [usize; 2],
    pub kernel: usize,
    /// Total time downsampling of the encoder.
    pub downsampling: usize,
}

impl CvaeArch {
    pub fn new(freq_bins: usize, num_classes: usize, latent_dim: usize) -> Result<Self> {
        let arch = Self {
            freq_bins,
            num_classes,
            latent_dim,
            hidden: [64, 32],
            kernel: KERNEL,
            downsampling: 4,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_bins == 0 || self.num_classes == 0 || self.latent_dim == 0 {
            return Err(Error::config("frequency bins, classes and latent size must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden channel counts must be positive"));
        }
        if self.kernel != KERNEL || self.downsampling != 4 {
            return Err(Error::config(format!(
                "unsupported architecture: kernel {} / downsampling {}",
                self.kernel, self.downsampling
            )));
        }
        Ok(())
    }

    /// Latent frames for an `n`-frame input.
    pub fn latent_frames(&self, n: usize) -> usize {
        n.div_ceil(2).div_ceil(2)
    }
}

/// Provenance and validation data stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub epochs: usize,
    pub seed: u64,
    pub validation_elbo: Option<f64>,
    pub validation_seed: u64,
    pub validation_examples: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    kernel: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct GatedIdx {
    a: ConvIdx,
    bn_a: BnIdx,
    g: ConvIdx,
    bn_g: BnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    enc1: GatedIdx,
    enc2: GatedIdx,
    mu: ConvIdx,
    logvar: ConvIdx,
    dec1: GatedIdx,
    dec2: GatedIdx,
    out: ConvIdx,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
    stats_names: Vec<String>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, transposed: bool) -> ConvIdx {
        let shape = if transposed {
            vec![c_in, c_out, KERNEL]
        } else {
            vec![c_out, c_in, KERNEL]
        };
        ConvIdx {
            kernel: self.push(format!("{name}.kernel"), shape, c_in * KERNEL),
            bias: self.push(format!("{name}.bias"), vec![c_out], 0),
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnIdx {
        self.stats_names.push(name.to_string());
        BnIdx {
            gamma: self.push(format!("{name}.gamma"), vec![channels], 0),
            beta: self.push(format!("{name}.beta"), vec![channels], 0),
            stats: self.stats_names.len() - 1,
        }
    }

    fn gated(&mut self, name: &str, c_in: usize, c_out: usize, transposed: bool) -> GatedIdx {
        GatedIdx {
            a: self.conv(&format!("{name}.a"), c_in, c_out, transposed),
            bn_a: self.bn(&format!("{name}.a.bn"), c_out),
            g: self.conv(&format!("{name}.g"), c_in, c_out, transposed),
            bn_g: self.bn(&format!("{name}.g.bn"), c_out),
        }
    }
}

fn build_layout(arch: &CvaeArch) -> (Layout, LayoutBuilder) {
    let (f, c, dz) = (arch.freq_bins, arch.num_classes, arch.latent_dim);
    let [h1, h2] = arch.hidden;
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        fan_in: Vec::new(),
        stats_names: Vec::new(),
    };
    let layout = Layout {
        enc1: b.gated("enc1", f + c, h1, false),
        enc2: b.gated("enc2", h1 + c, h2, false),
        mu: b.conv("enc.mu", h2 + c, dz, false),
        logvar: b.conv("enc.logvar", h2 + c, dz, false),
        dec1: b.gated("dec1", dz + c, h2, true),
        dec2: b.gated("dec2", h2 + c, h1, true),
        out: b.conv("dec.out", h1 + c, f, true),
    };
    (layout, b)
}

/// Trained (or freshly initialized) encoder and decoder.
#[derive(Clone, Debug)]
pub struct CvaeModel {
    arch: CvaeArch,
    layout: Layout,
    names: Vec<String>,
    stats_names: Vec<String>,
    params: Vec<NdArray>,
    stats: Vec<RunningStats>,
    pub info: ModelInfo,
}

impl CvaeModel {
    /// Kernels drawn from `N(0, 1/fan_in)`, biases and shifts zero, scales one.
    pub fn new(arch: CvaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, b) = build_layout(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .names
            .iter()
            .zip(&b.shapes)
            .zip(&b.fan_in)
            .map(|((name, shape), &fan_in)| {
                if name.ends_with(".kernel") {
                    let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
                    let len = shape.iter().product();
                    NdArray::new(shape.clone(), (0..len).map(|_| dist.sample(&mut rng)).collect())
                } else if name.ends_with(".gamma") {
                    Ok(NdArray::full(shape, 1.0))
                } else {
                    Ok(NdArray::zeros(shape))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = b
            .stats_names
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let bn_channels = b.shapes[param_index_of_stats(&layout, i).gamma].clone()[0];
                RunningStats::identity(bn_channels)
            })
            .collect();
        Ok(Self {
            arch,
            layout,
            names: b.names,
            stats_names: b.stats_names,
            params,
            stats,
            info: ModelInfo::default(),
        })
    }

    /// Rebuild a model from stored arrays; names and shapes must match `arch`.
    pub fn from_parts(
        arch: CvaeArch,
        params: Vec<(String, NdArray)>,
        stats: Vec<(String, RunningStats)>,
        info: ModelInfo,
    ) -> Result<Self> {
        let mut model = Self::new(arch, 0)?;
        if params.len() != model.params.len() || stats.len() != model.stats.len() {
            return Err(Error::contract(format!(
                "expected {} parameters and {} normalization layers, got {} and {}",
                model.params.len(),
                model.stats.len(),
                params.len(),
                stats.len()
            )));
        }
        for (slot, (name, value)) in params.into_iter().enumerate() {
            if name != model.names[slot] || value.shape() != model.params[slot].shape() {
                return Err(Error::contract(format!(
                    "parameter {slot}: expected {} {:?}, got {name} {:?}",
                    model.names[slot],
                    model.params[slot].shape(),
                    value.shape()
                )));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            model.params[slot] = value;
        }
        for (slot, (name, rs)) in stats.into_iter().enumerate() {
            let channels = model.stats[slot].mean.len();
            if name != model.stats_names[slot] || rs.mean.len() != channels || rs.var.len() != channels {
                return Err(Error::contract(format!("running statistics {slot} do not match {name}")));
            }
            model.stats[slot] = rs;
        }
        model.info = info;
        Ok(model)
    }

    pub fn arch(&self) -> &CvaeArch {
        &self.arch
    }

    pub fn params(&self) -> &[NdArray] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NdArray] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(NdArray::len).sum()
    }

    pub(crate) fn fold_moments(&mut self, moments: &[(usize, BatchMoments)]) {
        for (idx, m) in moments {
            self.stats[*idx].update(&m.mean, &m.var, m.count);
        }
    }

    /// Put every parameter on `tape`; `trainable` decides whether they collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    fn check_label(&self, c: &[f64]) -> Result<()> {
        check_simplex(c, self.arch.num_classes)
    }

    /// Latent mean and log-variance, each `[D_z, ceil(N/4)]`, in eval mode.
    pub fn encode(&self, power: &NdArray, c: &[f64]) -> Result<(NdArray, NdArray)> {
        self.check_label(c)?;
        let (f, n) = self.check_power(power)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(log_power(power).reshape(&[1, f, n])?);
        let cv = tape.constant(NdArray::new(vec![1, c.len()], c.to_vec())?);
        let mut pass = Pass::new(self, vars, Mode::Eval);
        let (mu, lv) = pass.encode(&mut tape, x, cv)?;
        let nz = self.arch.latent_frames(n);
        Ok((
            tape.value(mu).clone().reshape(&[self.arch.latent_dim, nz])?,
            tape.value(lv).clone().reshape(&[self.arch.latent_dim, nz])?,
        ))
    }

    /// Decoder log-variance `[F, n_frames]` in eval mode.
    pub fn decode(&self, z: &NdArray, c: &[f64], n_frames: usize) -> Result<NdArray> {
        self.check_label(c)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(NdArray::new(vec![1, c.len()], c.to_vec())?);
        let out = self.decode_with(&mut tape, &vars, zv, cv, n_frames)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode decoder on an existing tape: `z [D_z, N_z]`, `c [1, C]` → `[F, n_frames]`.
    pub fn decode_with(&self, tape: &mut Tape, vars: &[Var], z: Var, c: Var, n_frames: usize) -> Result<Var> {
        let zs = tape.value(z).shape().to_vec();
        let z3 = match zs.as_slice() {
            [dz, nz] => tape.reshape(z, &[1, *dz, *nz])?,
            [1, _, _] => z,
            _ => return Err(Error::dim(format!("latent code must be [D_z, N_z], got {zs:?}"))),
        };
        let mut pass = Pass::new(self, vars.to_vec(), Mode::Eval);
        let out = pass.decode(tape, z3, c, n_frames)?;
        tape.reshape(out, &[self.arch.freq_bins, n_frames])
    }

    fn check_power(&self, power: &NdArray) -> Result<(usize, usize)> {
        let [f, n] = *power.shape() else {
            return Err(Error::dim(format!("power spectrogram must be [F, N], got {:?}", power.shape())));
        };
        if f != self.arch.freq_bins {
            return Err(Error::dim(format!("model expects {} bins, got {f}", self.arch.freq_bins)));
        }
        if n < MIN_FRAMES {
            return Err(Error::contract(format!("need at least {MIN_FRAMES} frames, got {n}")));
        }
        if power.data().iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("power must be finite and non-negative"));
        }
        Ok((f, n))
    }

    /// Single-draw ELBO of one example in eval mode.
    pub fn elbo(&self, power: &NdArray, c: &[f64], eps: &NdArray) -> Result<f64> {
        self.check_label(c)?;
        let (f, n) = self.check_power(power)?;
        let nz = self.arch.latent_frames(n);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let batch = Batch {
            power: power.clone().reshape(&[1, f, n])?,
            labels: NdArray::new(vec![1, c.len()], c.to_vec())?,
            eps: eps.clone().reshape(&[1, self.arch.latent_dim, nz])?,
        };
        let terms = elbo_batch(self, &mut tape, &vars, &batch, Mode::Eval)?;
        Ok(tape.value(terms.elbo).item())
    }
}

fn param_index_of_stats(layout: &Layout, stats: usize) -> BnIdx {
    let all = [layout.enc1, layout.enc2, layout.dec1, layout.dec2];
    all.iter()
        .flat_map(|g| [g.bn_a, g.bn_g])
        .find(|b| b.stats == stats)
        .expect("every statistics slot belongs to a gated block")
}

pub fn check_simplex(c: &[f64], classes: usize) -> Result<()> {
    if c.len() != classes {
        return Err(Error::dim(format!("label has {} entries, model has {classes} classes", c.len())));
    }
    let sum: f64 = c.iter().sum();
    if c.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract("label must lie on the probability simplex"));
    }
    Ok(())
}

pub fn one_hot(class: usize, classes: usize) -> Result<Vec<f64>> {
    if class >= classes {
        return Err(Error::config(format!("class {class} out of range for {classes} classes")));
    }
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    Ok(v)
}

pub fn log_power(power: &NdArray) -> NdArray {
    power.map(|p| (p + LOG_POWER_EPS).ln())
}

/// `z = μ + exp(½ log σ²) ⊙ ε`, with `log σ²` clamped to `[-20, 20]`.
pub fn reparameterize(mu: &NdArray, log_var: &NdArray, eps: &NdArray) -> Result<NdArray> {
    mu.check_same_shape(log_var)?;
    mu.check_same_shape(eps)?;
    let sigma = log_var.map(|lv| (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp());
    let scaled = sigma.zip_map(eps, |s, e| s * e)?;
    mu.zip_map(&scaled, |m, s| m + s)
}

/// `½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_divergence(mu: &NdArray, log_var: &NdArray) -> Result<f64> {
    mu.check_same_shape(log_var)?;
    Ok(0.5
        * mu.data()
            .iter()
            .zip(log_var.data())
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>())
}

/// `Σ [−log σ² − p / σ²]` for a log-variance map.
pub fn reconstruction_term(power: &[f64], log_var: &[f64]) -> f64 {
    power.iter().zip(log_var).map(|(p, o)| -o - p * (-o).exp()).sum()
}

/// Normalized power spectrogram with a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// `[F, N]`, mean exactly one.
    pub power: NdArray,
    pub label: Vec<f64>,
    pub class_id: usize,
}

impl TrainingExample {
    pub fn from_power(power: NdArray, class_id: usize, num_classes: usize) -> Result<Self> {
        if power.rank() != 2 {
            return Err(Error::dim("training power must be [F, N]"));
        }
        if power.data().iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract("power must be finite and non-negative"));
        }
        let mean = power.sum() / power.len() as f64;
        if mean <= 0.0 {
            return Err(Error::contract("training example has zero power"));
        }
        Ok(Self {
            power: power.map(|p| p / mean),
            label: one_hot(class_id, num_classes)?,
            class_id,
        })
    }

    pub fn from_spectrogram(spec: &ComplexSpectrogram, class_id: usize, num_classes: usize) -> Result<Self> {
        let power = NdArray::new(vec![spec.freq_bins, spec.frames], spec.power())?;
        Self::from_power(power, class_id, num_classes)
    }

    pub fn frames(&self) -> usize {
        self.power.shape()[1]
    }
}

/// Inputs for one ELBO evaluation: power `[B, F, N]`, labels `[B, C]`, noise `[B, D_z, N_z]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub power: NdArray,
    pub labels: NdArray,
    pub eps: NdArray,
}

/// One forward pass through the network on a tape.
pub(crate) struct Pass<'m> {
    model: &'m CvaeModel,
    vars: Vec<Var>,
    mode: Mode,
    pub(crate) moments: Vec<(usize, BatchMoments)>,
}

impl<'m> Pass<'m> {
    pub(crate) fn new(model: &'m CvaeModel, vars: Vec<Var>, mode: Mode) -> Self {
        Self {
            model,
            vars,
            mode,
            moments: Vec::new(),
        }
    }

    fn with_label(&self, tape: &mut Tape, x: Var, c: Var) -> Result<Var> {
        let n = tape.value(x).shape()[2];
        let tiled = tape.tile_time(c, n)?;
        tape.concat_channels(x, tiled)
    }

    fn conv(&self, tape: &mut Tape, idx: ConvIdx, x: Var, stride: usize) -> Result<Var> {
        tape.conv1d(x, self.vars[idx.kernel], self.vars[idx.bias], stride, PAD)
    }

    fn deconv(&self, tape: &mut Tape, idx: ConvIdx, x: Var, stride: usize, target: usize) -> Result<Var> {
        let n = tape.value(x).shape()[2];
        let base = deconv_output_len(n, KERNEL, stride, PAD, 0).unwrap_or(0);
        if target < base || target - base >= stride {
            return Err(Error::contract(format!(
                "a latent length of {n} cannot be upsampled to {target} frames"
            )));
        }
        tape.deconv1d_padded(x, self.vars[idx.kernel], self.vars[idx.bias], stride, PAD, target - base)
    }

    fn bn(&mut self, tape: &mut Tape, idx: BnIdx, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.vars[idx.gamma], self.vars[idx.beta]);
        match self.mode {
            Mode::Train => {
                let (out, m) = tape.batch_norm_train(x, gamma, beta)?;
                self.moments.push((idx.stats, m));
                Ok(out)
            }
            Mode::Eval => tape.batch_norm_eval(x, gamma, beta, &self.model.stats[idx.stats]),
        }
    }

    fn gated(&mut self, tape: &mut Tape, idx: GatedIdx, x: Var, c: Var, stride: usize, up_to: Option<usize>) -> Result<Var> {
        let input = self.with_label(tape, x, c)?;
        let (a, g) = match up_to {
            None => (self.conv(tape, idx.a, input, stride)?, self.conv(tape, idx.g, input, stride)?),
            Some(t) => (
                self.deconv(tape, idx.a, input, stride, t)?,
                self.deconv(tape, idx.g, input, stride, t)?,
            ),
        };
        let a = self.bn(tape, idx.bn_a, a)?;
        let g = self.bn(tape, idx.bn_g, g)?;
        tape.glu(a, g)
    }

    /// `x [B, F, N]` log-power, `c [B, C]` → clamped `(μ, log σ²)`.
    pub(crate) fn encode(&mut self, tape: &mut Tape, x: Var, c: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).shape()[2];
        if n < MIN_FRAMES {
            return Err(Error::contract(format!("need at least {MIN_FRAMES} frames, got {n}")));
        }
        let l = self.model.layout.clone();
        let h = self.gated(tape, l.enc1, x, c, 1, None)?;
        let h = self.gated(tape, l.enc2, h, c, 2, None)?;
        let h = self.with_label(tape, h, c)?;
        let mu = self.conv(tape, l.mu, h, 2)?;
        let lv = self.conv(tape, l.logvar, h, 2)?;
        debug_assert_eq!(
            tape.value(mu).shape()[2],
            conv_output_len(n.div_ceil(2), KERNEL, 2, PAD).unwrap_or(0)
        );
        Ok((mu, tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    /// `z [B, D_z, N_z]`, `c [B, C]` → clamped log-variance `[B, F, n_frames]`.
    pub(crate) fn decode(&mut self, tape: &mut Tape, z: Var, c: Var, n_frames: usize) -> Result<Var> {
        let arch = &self.model.arch;
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 3 || shape[1] != arch.latent_dim {
            return Err(Error::dim(format!("latent code shape {shape:?} does not match D_z = {}", arch.latent_dim)));
        }
        if n_frames < MIN_FRAMES || shape[2] != arch.latent_frames(n_frames) {
            return Err(Error::contract(format!(
                "latent length {} is inconsistent with {n_frames} output frames",
                shape[2]
            )));
        }
        let l = self.model.layout.clone();
        let h = self.gated(tape, l.dec1, z, c, 2, Some(n_frames.div_ceil(2)))?;
        let h = self.gated(tape, l.dec2, h, c, 2, Some(n_frames))?;
        let h = self.with_label(tape, h, c)?;
        let out = self.deconv(tape, l.out, h, 1, n_frames)?;
        Ok(tape.clamp(out, LOG_VAR_MIN, LOG_VAR_MAX))
    }
}
