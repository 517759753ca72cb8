//! ILRMA: NMF source variances with majorization-minimization factor updates,
//! interleaved with iterative-projection demixing updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgm::{
    apply_demixing, ip_update, log_likelihood, mixture_dims, weighted_covariance, DemixingSystem,
    SourceVariances, VARIANCE_FLOOR,
};
use crate::signal::ComplexSpectrogram;

/// Nonnegative factors of one source: basis `b_k(f)` (F×K) and activations `h_k(n)` (K×N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfFactors {
    pub freq_bins: usize,
    pub frames: usize,
    pub rank: usize,
    /// `basis[f * rank + k]`
    pub basis: Vec<f64>,
    /// `activation[k * frames + n]`
    pub activation: Vec<f64>,
}

impl NmfFactors {
    pub fn new(freq_bins: usize, frames: usize, rank: usize, basis: Vec<f64>, activation: Vec<f64>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("NMF rank must be at least 1"));
        }
        if basis.len() != freq_bins * rank || activation.len() != rank * frames {
            return Err(Error::dim("NMF factor sizes do not match F, N, K"));
        }
        let mut out = Self {
            freq_bins,
            frames,
            rank,
            basis,
            activation,
        };
        out.basis.iter_mut().for_each(|b| *b = b.max(VARIANCE_FLOOR));
        out.activation.iter_mut().for_each(|h| *h = h.max(VARIANCE_FLOOR));
        Ok(out)
    }

    /// Factors drawn i.i.d. uniform on `[0.1, 1.0)`.
    pub fn random(freq_bins: usize, frames: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let basis = (0..freq_bins * rank).map(|_| rng.gen_range(0.1..1.0)).collect();
        let activation = (0..rank * frames).map(|_| rng.gen_range(0.1..1.0)).collect();
        Self::new(freq_bins, frames, rank, basis, activation)
    }

    /// Unfloored model `Σ_k b_k(f) h_k(n)`.
    fn raw_model(&self) -> Vec<f64> {
        let (fb, nf, k) = (self.freq_bins, self.frames, self.rank);
        let mut v = vec![0.0; fb * nf];
        for f in 0..fb {
            let row = &mut v[f * nf..(f + 1) * nf];
            for kk in 0..k {
                let b = self.basis[f * k + kk];
                for (dst, &h) in row.iter_mut().zip(&self.activation[kk * nf..(kk + 1) * nf]) {
                    *dst += b * h;
                }
            }
        }
        v
    }

    pub fn variances(&self) -> SourceVariances {
        let mut v = self.raw_model();
        v.iter_mut().for_each(|x| *x = x.max(VARIANCE_FLOOR));
        SourceVariances {
            freq_bins: self.freq_bins,
            frames: self.frames,
            data: v,
        }
    }
}

/// Factors for every source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfModel {
    pub sources: Vec<NmfFactors>,
}

/// `v_j(f,n) = Σ_k b_{j,k}(f) h_{j,k}(n)`, floored.
pub fn nmf_variances(model: &NmfModel, j: usize) -> Result<SourceVariances> {
    model
        .sources
        .get(j)
        .map(NmfFactors::variances)
        .ok_or_else(|| Error::dim(format!("no NMF factors for source {j}")))
}

/// Itakura-Saito objective `Σ_{f,n} (log v + p / v)`.
pub fn is_objective(power: &[f64], v: &SourceVariances) -> f64 {
    power.iter().zip(&v.data).map(|(&p, &var)| var.ln() + p / var).sum()
}

fn check_power(factors: &NmfFactors, power: &[f64]) -> Result<()> {
    if power.len() != factors.freq_bins * factors.frames {
        return Err(Error::dim("power map does not match the NMF factors"));
    }
    Ok(())
}

/// MM update of the basis:
/// `b ← b · sqrt( Σ_n p h / v² / Σ_n h / v )`.
pub fn mm_update_basis(factors: &mut NmfFactors, power: &[f64]) -> Result<()> {
    check_power(factors, power)?;
    let v = factors.variances();
    let (fb, nf, k) = (factors.freq_bins, factors.frames, factors.rank);
    for f in 0..fb {
        let vf = &v.data[f * nf..(f + 1) * nf];
        let pf = &power[f * nf..(f + 1) * nf];
        for kk in 0..k {
            let h = &factors.activation[kk * nf..(kk + 1) * nf];
            let mut num = 0.0;
            let mut den = 0.0;
            for n in 0..nf {
                num += pf[n] * h[n] / (vf[n] * vf[n]);
                den += h[n] / vf[n];
            }
            let b = &mut factors.basis[f * k + kk];
            *b = (*b * (num / den).sqrt()).max(VARIANCE_FLOOR);
        }
    }
    Ok(())
}

/// MM update of the activations:
/// `h ← h · sqrt( Σ_f p b / v² / Σ_f b / v )`.
pub fn mm_update_activation(factors: &mut NmfFactors, power: &[f64]) -> Result<()> {
    check_power(factors, power)?;
    let v = factors.variances();
    let (fb, nf, k) = (factors.freq_bins, factors.frames, factors.rank);
    let mut num = vec![0.0; k * nf];
    let mut den = vec![0.0; k * nf];
    for f in 0..fb {
        let vf = &v.data[f * nf..(f + 1) * nf];
        let pf = &power[f * nf..(f + 1) * nf];
        for kk in 0..k {
            let b = factors.basis[f * k + kk];
            let (nrow, drow) = (&mut num[kk * nf..(kk + 1) * nf], &mut den[kk * nf..(kk + 1) * nf]);
            for n in 0..nf {
                nrow[n] += pf[n] * b / (vf[n] * vf[n]);
                drow[n] += b / vf[n];
            }
        }
    }
    for ((h, &a), &d) in factors.activation.iter_mut().zip(&num).zip(&den) {
        *h = (*h * (a / d).sqrt()).max(VARIANCE_FLOOR);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlrmaConfig {
    pub iterations: usize,
    /// NMF bases per source.
    pub bases: usize,
    pub seed: u64,
    /// Record the log-likelihood after every iteration.
    pub log_likelihood: bool,
}

impl Default for IlrmaConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            bases: 2,
            seed: 0,
            log_likelihood: true,
        }
    }
}

/// One line of the iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlrmaIteration {
    pub iter: usize,
    pub loglik: Option<f64>,
    /// Mean `|y_j(f,n)|²` per source.
    pub per_source_power: Vec<f64>,
    /// Demixing-vector updates skipped as numerically singular.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct IlrmaOutput {
    pub demixing: DemixingSystem,
    pub nmf: NmfModel,
    /// Entry 0 describes the initial state; entry `t` the state after iteration `t`.
    pub log: Vec<IlrmaIteration>,
}

/// Run ILRMA from `W(f) = I`.
pub fn ilrma_run(x: &[ComplexSpectrogram], cfg: &IlrmaConfig) -> Result<IlrmaOutput> {
    let (i_ch, f_bins, _) = mixture_dims(x)?;
    ilrma_run_from(x, cfg, DemixingSystem::identity(i_ch, f_bins))
}

/// Run ILRMA from a given demixing system.
pub fn ilrma_run_from(x: &[ComplexSpectrogram], cfg: &IlrmaConfig, init: DemixingSystem) -> Result<IlrmaOutput> {
    let (i_ch, f_bins, frames) = mixture_dims(x)?;
    if cfg.iterations == 0 {
        return Err(Error::config("ILRMA needs at least one iteration"));
    }
    if init.channels() != i_ch || init.freq_bins() != f_bins {
        return Err(Error::dim("initial demixing system does not match the mixture"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nmf = NmfModel {
        sources: (0..i_ch)
            .map(|_| NmfFactors::random(f_bins, frames, cfg.bases, &mut rng))
            .collect::<Result<_>>()?,
    };
    let mut w = init;
    let mut log = Vec::with_capacity(cfg.iterations + 1);
    log.push(record(0, &w, x, &nmf, 0, cfg.log_likelihood)?);

    for iter in 1..=cfg.iterations {
        let mut skipped = 0;
        for j in 0..i_ch {
            let v = nmf.sources[j].variances();
            let sigmas = weighted_covariance(x, &v)?;
            for (f, sigma) in sigmas.iter().enumerate() {
                if ip_update(&mut w, sigma, j, f)?.skipped() {
                    skipped += 1;
                }
            }
        }
        let y = apply_demixing(&w, x)?;
        for (factors, yj) in nmf.sources.iter_mut().zip(&y) {
            let power = yj.power();
            mm_update_basis(factors, &power)?;
            mm_update_activation(factors, &power)?;
        }
        check_finite(&w, &nmf)?;
        log.push(record(iter, &w, x, &nmf, skipped, cfg.log_likelihood)?);
    }
    Ok(IlrmaOutput { demixing: w, nmf, log })
}

fn check_finite(w: &DemixingSystem, nmf: &NmfModel) -> Result<()> {
    let w_ok = w
        .matrices
        .iter()
        .all(|m| m.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
    let nmf_ok = nmf
        .sources
        .iter()
        .all(|s| s.basis.iter().chain(&s.activation).all(|v| v.is_finite()));
    if w_ok && nmf_ok {
        Ok(())
    } else {
        Err(Error::NonFinite("ILRMA parameters".into()))
    }
}

fn record(
    iter: usize,
    w: &DemixingSystem,
    x: &[ComplexSpectrogram],
    nmf: &NmfModel,
    skipped: usize,
    with_ll: bool,
) -> Result<IlrmaIteration> {
    let y = apply_demixing(w, x)?;
    let per_source_power = y
        .iter()
        .map(|s| s.power().iter().sum::<f64>() / s.data.len().max(1) as f64)
        .collect();
    let loglik = if with_ll {
        let v: Vec<SourceVariances> = nmf.sources.iter().map(NmfFactors::variances).collect();
        Some(log_likelihood(w, x, &v)?)
    } else {
        None
    };
    Ok(IlrmaIteration {
        iter,
        loglik,
        per_source_power,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_basis_constant_activation() {
        let f = NmfFactors::new(3, 2, 1, vec![1.0; 3], vec![3.0; 2]).unwrap();
        assert!(f.variances().data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn disjoint_supports_add() {
        // basis 0 lives on f=0, basis 1 on f=1
        let basis = vec![2.0, 0.0, 0.0, 5.0];
        let act = vec![1.0, 3.0, 0.5, 0.25];
        let f = NmfFactors::new(2, 2, 2, basis, act).unwrap();
        let v = f.variances();
        let oracle = |fi: usize, n: usize| {
            let b = [[2.0, VARIANCE_FLOOR], [VARIANCE_FLOOR, 5.0]];
            let h = [[1.0, 3.0], [0.5, 0.25]];
            (0..2).map(|k| b[fi][k] * h[k][n]).sum::<f64>()
        };
        for fi in 0..2 {
            for n in 0..2 {
                assert!((v.get(fi, n) - oracle(fi, n)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_activation_is_floored() {
        let f = NmfFactors::new(2, 2, 1, vec![1.0; 2], vec![0.0; 2]).unwrap();
        assert!(f.activation.iter().all(|&h| h == VARIANCE_FLOOR));
        assert!(f.variances().data.iter().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn stationary_point_leaves_factors() {
        let mut f = NmfFactors::new(2, 3, 1, vec![1.0, 2.0], vec![0.5, 1.0, 4.0]).unwrap();
        let power = f.variances().data;
        let before = f.clone();
        mm_update_basis(&mut f, &power).unwrap();
        mm_update_activation(&mut f, &power).unwrap();
        for (a, b) in f.basis.iter().chain(&f.activation).zip(before.basis.iter().chain(&before.activation)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_basis_activation_step() {
        let mut f = NmfFactors::new(4, 2, 1, vec![1.0; 4], vec![1.0; 2]).unwrap();
        let power = vec![4.0; 8];
        mm_update_activation(&mut f, &power).unwrap();
        assert!(f.activation.iter().all(|&h| (h - 2.0).abs() < 1e-15));
    }
}
