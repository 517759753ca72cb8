//! Multichannel separation with a CVAE source model.
//!
//! Every source `j` has variance `v_j = g_j · exp(decode(z_j, c_j))` with
//! `c_j = softmax(u_j)`. One outer iteration visits each source in turn and
//! (a) applies the iterative-projection update to `w_j`, (b) takes Adam steps
//! on `(z_j, u_j)`, (c) sets `g_j` in closed form. With the guard enabled a
//! latent step is only kept if it does not lower the source's likelihood term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, AdamConfig, AdamState, NdArray, Tape, Var};
use crate::cvae::{check_simplex, one_hot, CvaeModel, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::ilrma::{ilrma_run, IlrmaConfig};
use crate::lgm::{
    apply_demixing, ip_update, log_likelihood, mixture_dims, projection_back, source_term, weighted_covariance,
    DemixingSystem, SourceVariances, VARIANCE_FLOOR,
};
use crate::signal::{istft_multi, stft_multi, ComplexSpectrogram, StftConfig, TimeSignal};

/// Halvings tried before a latent step is rejected.
pub const GUARD_HALVINGS: usize = 5;

/// A generative source model usable by [`mvae_separate`].
pub trait SourceModel {
    fn freq_bins(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Shape of the latent code for `n_frames` frames.
    fn latent_shape(&self, n_frames: usize) -> (usize, usize);
    /// Record `log σ²` (`F × n_frames` values, frequency-major) from `z` and `c [1, C]`.
    fn decode_on_tape(&self, tape: &mut Tape, z: Var, c: Var, n_frames: usize) -> Result<Var>;
    /// Initial latent code for a unit-mean-power spectrogram `[F, N]`.
    fn init_latent(&self, power: &NdArray, c: &[f64]) -> Result<NdArray>;
}

impl SourceModel for CvaeModel {
    fn freq_bins(&self) -> usize {
        self.arch().freq_bins
    }

    fn num_classes(&self) -> usize {
        self.arch().num_classes
    }

    fn latent_shape(&self, n_frames: usize) -> (usize, usize) {
        (self.arch().latent_dim, self.arch().latent_frames(n_frames))
    }

    fn decode_on_tape(&self, tape: &mut Tape, z: Var, c: Var, n_frames: usize) -> Result<Var> {
        let vars = self.bind(tape, false);
        self.decode_with(tape, &vars, z, c, n_frames)
    }

    fn init_latent(&self, power: &NdArray, c: &[f64]) -> Result<NdArray> {
        Ok(self.encode(power, c)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvaeConfig {
    pub outer_iters: usize,
    pub psi_steps: usize,
    pub psi_lr: f64,
    pub warm_start_iters: usize,
    pub ilrma_bases: usize,
    pub seed: u64,
    pub guard: bool,
    /// Known class per source; `None` estimates the class posteriors.
    pub fixed_classes: Option<Vec<usize>>,
}

impl Default for MvaeConfig {
    fn default() -> Self {
        Self {
            outer_iters: 40,
            psi_steps: 10,
            psi_lr: 1e-2,
            warm_start_iters: 30,
            ilrma_bases: 2,
            seed: 0,
            guard: true,
            fixed_classes: None,
        }
    }
}

impl MvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.psi_steps == 0 || self.warm_start_iters == 0 || self.ilrma_bases == 0 {
            return Err(Error::config("iteration counts and bases must be at least 1"));
        }
        if !(self.psi_lr > 0.0 && self.psi_lr.is_finite()) {
            return Err(Error::config("latent learning rate must be positive"));
        }
        Ok(())
    }
}

/// Latent state of one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceState {
    pub z: NdArray,
    /// Class logits; ignored when `fixed_class` is set.
    pub u: Vec<f64>,
    pub g: f64,
    pub fixed_class: Option<usize>,
}

impl SourceState {
    pub fn class_posterior(&self) -> Vec<f64> {
        match self.fixed_class {
            Some(k) => {
                let mut c = vec![0.0; self.u.len()];
                c[k] = 1.0;
                c
            }
            None => softmax(&self.u),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeparationState {
    pub demixing: DemixingSystem,
    pub sources: Vec<SourceState>,
}

/// One JSON line of the iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvaeIteration {
    pub iter: usize,
    pub loglik: f64,
    pub g: Vec<f64>,
    pub class_posteriors: Vec<Vec<f64>>,
    /// Latent steps rejected by the guard or for non-finite gradients.
    pub rejected_steps: usize,
}

fn decode_value(model: &dyn SourceModel, src: &SourceState, n_frames: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let z = tape.constant(src.z.clone());
    let c = class_input(&mut tape, src, false)?;
    let out = model.decode_on_tape(&mut tape, z, c, n_frames)?;
    Ok(tape.value(out).data().to_vec())
}

fn class_input(tape: &mut Tape, src: &SourceState, trainable: bool) -> Result<Var> {
    let classes = src.u.len();
    match src.fixed_class {
        Some(k) => Ok(tape.constant(NdArray::new(vec![1, classes], one_hot(k, classes)?)?)),
        None => {
            let u = tape.leaf(NdArray::new(vec![1, classes], src.u.clone())?, trainable);
            tape.softmax(u)
        }
    }
}

fn variances_from(log_var: &[f64], g: f64, freq_bins: usize, n_frames: usize) -> Result<SourceVariances> {
    SourceVariances::new(
        freq_bins,
        n_frames,
        log_var
            .iter()
            .map(|o| g * o.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp())
            .collect(),
    )
}

/// `v_j(f,n) = g_j · exp(decode(z_j, softmax(u_j)))`, floored.
pub fn source_variances(model: &dyn SourceModel, src: &SourceState, n_frames: usize) -> Result<SourceVariances> {
    let o = decode_value(model, src, n_frames)?;
    variances_from(&o, src.g, model.freq_bins(), n_frames)
}

/// The source's likelihood term `−Σ (log v + p / v)`.
pub fn psi_objective(model: &dyn SourceModel, src: &SourceState, power: &[f64], n_frames: usize) -> Result<f64> {
    Ok(source_term(power, &source_variances(model, src, n_frames)?))
}

/// Outcome of [`update_psi`].
#[derive(Clone, Debug, PartialEq)]
pub struct PsiReport {
    /// Objective before the first step and after every step.
    pub objective: Vec<f64>,
    pub rejected: usize,
}

fn psi_gradients(
    model: &dyn SourceModel,
    src: &SourceState,
    power: &[f64],
    n_frames: usize,
) -> Result<(NdArray, Option<NdArray>)> {
    let mut tape = Tape::new();
    let z = tape.param(src.z.clone());
    let u = match src.fixed_class {
        None => Some(tape.param(NdArray::new(vec![1, src.u.len()], src.u.clone())?)),
        Some(_) => None,
    };
    let c = match u {
        Some(u) => tape.softmax(u)?,
        None => class_input(&mut tape, src, false)?,
    };
    let o = model.decode_on_tape(&mut tape, z, c, n_frames)?;
    let len = tape.value(o).len();
    if len != power.len() {
        return Err(Error::dim(format!("model produced {len} values for {} bins", power.len())));
    }
    let o = tape.reshape(o, &[len])?;
    // log v = clamp(o + log g, log floor, ∞), matching the floored variances.
    let shifted = tape.add_scalar(o, src.g.ln());
    let log_v = tape.clamp(shifted, VARIANCE_FLOOR.ln(), f64::INFINITY);
    let neg = tape.scale(log_v, -1.0);
    let inv = tape.exp(neg);
    let p = tape.constant(NdArray::from_vec(power.to_vec()));
    let ratio = tape.mul(p, inv)?;
    let a = tape.sum(log_v);
    let b = tape.sum(ratio);
    let loss = tape.add(a, b)?;
    let grads = tape.backward(loss)?;
    Ok((grads.get(z), u.map(|u| grads.get(u))))
}

fn shifted(src: &SourceState, dz: &NdArray, du: Option<&NdArray>, factor: f64) -> Result<SourceState> {
    let mut out = src.clone();
    out.z = src.z.zip_map(dz, |a, d| a + factor * d)?;
    if let Some(du) = du {
        for (u, d) in out.u.iter_mut().zip(du.data()) {
            *u += factor * d;
        }
    }
    Ok(out)
}

/// Adam ascent on the source's likelihood term over `z` (and `u` unless the class is fixed).
pub fn update_psi(
    model: &dyn SourceModel,
    src: &mut SourceState,
    power: &[f64],
    n_frames: usize,
    steps: usize,
    lr: f64,
    guard: bool,
) -> Result<PsiReport> {
    let mut params = vec![src.z.clone()];
    if src.fixed_class.is_none() {
        params.push(NdArray::from_vec(src.u.clone()));
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), &params);
    let mut current = psi_objective(model, src, power, n_frames)?;
    let mut report = PsiReport {
        objective: vec![current],
        rejected: 0,
    };
    for _ in 0..steps {
        let (gz, gu) = psi_gradients(model, src, power, n_frames)?;
        let mut grads = vec![gz];
        if let Some(gu) = gu {
            grads.push(NdArray::from_vec(gu.into_data()));
        }
        let deltas = match adam.direction(&grads) {
            Ok(d) => d,
            Err(Error::NonFinite(_)) => {
                report.rejected += 1;
                report.objective.push(current);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut accepted = None;
        let tries = if guard { GUARD_HALVINGS + 1 } else { 1 };
        let mut factor = 1.0;
        for _ in 0..tries {
            let candidate = shifted(src, &deltas[0], deltas.get(1), factor)?;
            let value = psi_objective(model, &candidate, power, n_frames)?;
            if value.is_finite() && (!guard || value >= current) {
                accepted = Some((candidate, value));
                break;
            }
            factor *= 0.5;
        }
        match accepted {
            Some((candidate, value)) => {
                *src = candidate;
                current = value;
            }
            None => report.rejected += 1,
        }
        report.objective.push(current);
    }
    Ok(report)
}

/// Closed-form scale `g_j = mean(|y_j|² / σ²)`.
pub fn update_g(model: &dyn SourceModel, src: &SourceState, power: &[f64], n_frames: usize) -> Result<f64> {
    let o = decode_value(model, src, n_frames)?;
    if o.len() != power.len() {
        return Err(Error::dim("power and model output sizes differ"));
    }
    let g = power
        .iter()
        .zip(&o)
        .map(|(p, o)| p / o.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp())
        .sum::<f64>()
        / power.len() as f64;
    Ok(g.max(VARIANCE_FLOOR))
}

/// Most probable class per source and its probability; ties go to the lowest index.
pub fn classify_sources(state: &SeparationState) -> Vec<(usize, f64)> {
    state.sources.iter().map(|s| argmax(&s.class_posterior())).collect()
}

pub fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
}

/// Separated spectrograms, time signals and diagnostics.
#[derive(Clone, Debug)]
pub struct MvaeOutput {
    /// Source `j` projected back to microphone 0.
    pub spectrograms: Vec<ComplexSpectrogram>,
    pub state: SeparationState,
    pub log: Vec<MvaeIteration>,
    pub warm_start_loglik: Vec<f64>,
}

fn powers(w: &DemixingSystem, x: &[ComplexSpectrogram]) -> Result<Vec<Vec<f64>>> {
    Ok(apply_demixing(w, x)?.iter().map(ComplexSpectrogram::power).collect())
}

fn all_variances(model: &dyn SourceModel, sources: &[SourceState], n: usize) -> Result<Vec<SourceVariances>> {
    sources.iter().map(|s| source_variances(model, s, n)).collect()
}

fn record(
    iter: usize,
    model: &dyn SourceModel,
    state: &SeparationState,
    x: &[ComplexSpectrogram],
    rejected_steps: usize,
) -> Result<MvaeIteration> {
    let n = x[0].frames;
    let loglik = log_likelihood(&state.demixing, x, &all_variances(model, &state.sources, n)?)?;
    if !loglik.is_finite() {
        return Err(Error::NonFinite(format!("log-likelihood at iteration {iter}")));
    }
    Ok(MvaeIteration {
        iter,
        loglik,
        g: state.sources.iter().map(|s| s.g).collect(),
        class_posteriors: state.sources.iter().map(SourceState::class_posterior).collect(),
        rejected_steps,
    })
}

/// Initialize the latent state of every source from the current outputs.
pub fn init_sources(
    model: &dyn SourceModel,
    w: &DemixingSystem,
    x: &[ComplexSpectrogram],
    fixed: Option<&[usize]>,
) -> Result<Vec<SourceState>> {
    let (_, f_bins, n) = mixture_dims(x)?;
    let classes = model.num_classes();
    powers(w, x)?
        .into_iter()
        .enumerate()
        .map(|(j, p)| {
            let mean = (p.iter().sum::<f64>() / p.len() as f64).max(VARIANCE_FLOOR);
            let fixed_class = fixed.map(|f| f[j]);
            let mut src = SourceState {
                z: NdArray::zeros(&[0]),
                u: vec![0.0; classes],
                g: mean,
                fixed_class,
            };
            let c = src.class_posterior();
            check_simplex(&c, classes)?;
            let normalized = NdArray::new(vec![f_bins, n], p.iter().map(|v| v / mean).collect())?;
            src.z = model.init_latent(&normalized, &c)?;
            Ok(src)
        })
        .collect()
}

/// Run the full algorithm on mixture spectrograms.
pub fn mvae_separate_spec(x: &[ComplexSpectrogram], model: &dyn SourceModel, cfg: &MvaeConfig) -> Result<MvaeOutput> {
    cfg.validate()?;
    let (i_ch, f_bins, n) = mixture_dims(x)?;
    if f_bins != model.freq_bins() {
        return Err(Error::dim(format!(
            "model expects {} frequency bins, mixture has {f_bins}",
            model.freq_bins()
        )));
    }
    if let Some(fixed) = &cfg.fixed_classes {
        if fixed.len() != i_ch || fixed.iter().any(|&k| k >= model.num_classes()) {
            return Err(Error::config(format!(
                "fixed classes must name one of {} classes for each of {i_ch} sources",
                model.num_classes()
            )));
        }
    }
    let warm = ilrma_run(
        x,
        &IlrmaConfig {
            iterations: cfg.warm_start_iters,
            bases: cfg.ilrma_bases,
            seed: cfg.seed,
            log_likelihood: true,
        },
    )?;
    let warm_start_loglik = warm.log.iter().filter_map(|l| l.loglik).collect();
    let mut state = SeparationState {
        sources: init_sources(model, &warm.demixing, x, cfg.fixed_classes.as_deref())?,
        demixing: warm.demixing,
    };
    let mut log = vec![record(0, model, &state, x, 0)?];

    for iter in 1..=cfg.outer_iters {
        let mut rejected = 0;
        for j in 0..i_ch {
            let v = source_variances(model, &state.sources[j], n)?;
            for (f, sigma) in weighted_covariance(x, &v)?.iter().enumerate() {
                ip_update(&mut state.demixing, sigma, j, f)?;
            }
            let y = apply_demixing(&state.demixing, x)?;
            let power = y[j].power();
            let src = &mut state.sources[j];
            rejected += update_psi(model, src, &power, n, cfg.psi_steps, cfg.psi_lr, cfg.guard)?.rejected;
            let before = psi_objective(model, src, &power, n)?;
            let previous = src.g;
            src.g = update_g(model, src, &power, n)?;
            if cfg.guard && psi_objective(model, src, &power, n)? < before {
                src.g = previous;
            }
        }
        log.push(record(iter, model, &state, x, rejected)?);
    }

    let y = apply_demixing(&state.demixing, x)?;
    let spectrograms = y
        .iter()
        .map(|yj| projection_back(yj, &x[0]).map(|p| p.spectrogram))
        .collect::<Result<_>>()?;
    Ok(MvaeOutput {
        spectrograms,
        state,
        log,
        warm_start_loglik,
    })
}

/// STFT, separate, project back to microphone 0, inverse STFT.
pub fn mvae_separate(
    mixture: &TimeSignal,
    stft_cfg: StftConfig,
    model: &dyn SourceModel,
    cfg: &MvaeConfig,
) -> Result<(Vec<TimeSignal>, MvaeOutput)> {
    let x = stft_multi(mixture, stft_cfg)?;
    let out = mvae_separate_spec(&x, model, cfg)?;
    let signals = out
        .spectrograms
        .iter()
        .map(|s| istft_multi(std::slice::from_ref(s), mixture.len()))
        .collect::<Result<_>>()?;
    Ok((signals, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `log σ² = z`, with `z` shaped `[F, N]`.
    struct IdentityDecoder {
        f: usize,
    }

    impl SourceModel for IdentityDecoder {
        fn freq_bins(&self) -> usize {
            self.f
        }
        fn num_classes(&self) -> usize {
            1
        }
        fn latent_shape(&self, n: usize) -> (usize, usize) {
            (self.f, n)
        }
        fn decode_on_tape(&self, tape: &mut Tape, z: Var, _c: Var, _n: usize) -> Result<Var> {
            Ok(tape.clamp(z, LOG_VAR_MIN, LOG_VAR_MAX))
        }
        fn init_latent(&self, power: &NdArray, _c: &[f64]) -> Result<NdArray> {
            Ok(NdArray::zeros(power.shape()))
        }
    }

    fn state(z: NdArray, g: f64) -> SourceState {
        SourceState {
            z,
            u: vec![0.0],
            g,
            fixed_class: None,
        }
    }

    #[test]
    fn variances_scale_with_g() {
        let m = IdentityDecoder { f: 2 };
        let z = NdArray::new(vec![2, 2], vec![0.1, -0.4, 1.0, 0.0]).unwrap();
        let one = source_variances(&m, &state(z.clone(), 1.0), 2).unwrap();
        let two = source_variances(&m, &state(z, 2.0), 2).unwrap();
        for (a, b) in one.data.iter().zip(&two.data) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn g_examples() {
        let m = IdentityDecoder { f: 2 };
        let z = NdArray::new(vec![2, 2], vec![0.1, -0.4, 1.0, 0.0]).unwrap();
        let sigma: Vec<f64> = z.data().iter().map(|v| v.exp()).collect();
        let s = state(z, 5.0);
        assert!((update_g(&m, &s, &sigma, 2).unwrap() - 1.0).abs() < 1e-12);
        let doubled: Vec<f64> = sigma.iter().map(|v| 2.0 * v).collect();
        assert!((update_g(&m, &s, &doubled, 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_decoder_reaches_closed_form() {
        let m = IdentityDecoder { f: 2 };
        let power = vec![0.5, 2.0, 4.0, 1.0, 0.1, 3.0];
        let mut s = state(NdArray::zeros(&[2, 3]), 1.5);
        let rep = update_psi(&m, &mut s, &power, 3, 3000, 0.05, true).unwrap();
        assert!(rep.objective.windows(2).all(|w| w[1] >= w[0]));
        for (z, p) in s.z.data().iter().zip(&power) {
            assert!((z - (p / 1.5_f64).ln()).abs() < 1e-3, "{z} vs {}", (p / 1.5_f64).ln());
        }
    }

    #[test]
    fn classify_examples() {
        let st = |u: Vec<f64>| SeparationState {
            demixing: DemixingSystem::identity(1, 1),
            sources: vec![SourceState {
                z: NdArray::zeros(&[1]),
                u,
                g: 1.0,
                fixed_class: None,
            }],
        };
        let (k, p) = classify_sources(&st(vec![5.0, 0.0, 0.0, 0.0]))[0];
        assert_eq!(k, 0);
        // e^5 / (e^5 + 3); with two classes the same logit gives 0.9933
        assert!((p - 5f64.exp() / (5f64.exp() + 3.0)).abs() < 1e-12);
        assert!((p - 0.9802).abs() < 1e-4);
        assert_eq!(classify_sources(&st(vec![0.0; 4]))[0], (0, 0.25));
    }
}
