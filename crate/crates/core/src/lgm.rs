//! Local Gaussian model shared by ILRMA and MVAE: demixing, log-likelihood,
//! weighted spatial covariances, iterative-projection updates and
//! projection-back rescaling.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ComplexSpectrogram;

pub type CMatrix = DMatrix<Complex64>;

/// Lower bound applied to every source variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Minimum |det W(f)| accepted after an update.
pub const DET_FLOOR: f64 = 1e-12;
/// Minimum eigenvalue below which Σ is regularized before solving.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Diagonal loading (relative to trace / I) for rank-deficient Σ.
pub const REGULARIZATION: f64 = 1e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Per-frequency demixing matrices `W(f)` whose columns are the vectors `w_j(f)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemixingSystem {
    pub matrices: Vec<CMatrix>,
}

impl DemixingSystem {
    pub fn identity(channels: usize, freq_bins: usize) -> Self {
        Self {
            matrices: vec![CMatrix::identity(channels, channels); freq_bins],
        }
    }

    pub fn from_matrices(matrices: Vec<CMatrix>) -> Result<Self> {
        let i = matrices.first().map_or(0, |m| m.nrows());
        if matrices.iter().any(|m| m.nrows() != i || m.ncols() != i) {
            return Err(Error::dim("demixing matrices must all be square of the same size"));
        }
        Ok(Self { matrices })
    }

    pub fn channels(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn freq_bins(&self) -> usize {
        self.matrices.len()
    }

    /// Demixing vector `w_j(f)`.
    pub fn vector(&self, j: usize, f: usize) -> DVector<Complex64> {
        self.matrices[f].column(j).into_owned()
    }

    /// Reorder sources: new source `k` is old source `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let matrices = self
            .matrices
            .iter()
            .map(|m| CMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, order[c])]))
            .collect();
        Self { matrices }
    }
}

/// Variances `v_j(f,n)` of one source, frequency-major and floored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceVariances {
    pub freq_bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl SourceVariances {
    /// Wraps `data`, raising every entry to [`VARIANCE_FLOOR`].
    pub fn new(freq_bins: usize, frames: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != freq_bins * frames {
            return Err(Error::dim(format!(
                "variance map needs {} entries, got {}",
                freq_bins * frames,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("source variance".into()));
        }
        for v in &mut data {
            *v = v.max(VARIANCE_FLOOR);
        }
        Ok(Self {
            freq_bins,
            frames,
            data,
        })
    }

    #[inline]
    pub fn get(&self, f: usize, n: usize) -> f64 {
        self.data[f * self.frames + n]
    }
}

/// Mixture channels must share one geometry; returns `(I, F, N)`.
pub fn mixture_dims(x: &[ComplexSpectrogram]) -> Result<(usize, usize, usize)> {
    let first = x.first().ok_or_else(|| Error::dim("mixture has no channels"))?;
    if x.iter().any(|c| !c.same_geometry(first)) {
        return Err(Error::dim("mixture channels have different STFT geometry"));
    }
    Ok((x.len(), first.freq_bins, first.frames))
}

fn check_system(w: &DemixingSystem, i: usize, f: usize) -> Result<()> {
    if w.channels() != i || w.freq_bins() != f {
        return Err(Error::dim(format!(
            "demixing system is {}x{} over {} bins, mixture is {i} channels over {f} bins",
            w.channels(),
            w.channels(),
            w.freq_bins()
        )));
    }
    Ok(())
}

/// Separated components `y_j(f,n) = w_j(f)ᴴ x(f,n)`.
pub fn apply_demixing(w: &DemixingSystem, x: &[ComplexSpectrogram]) -> Result<Vec<ComplexSpectrogram>> {
    let (i_ch, f_bins, frames) = mixture_dims(x)?;
    check_system(w, i_ch, f_bins)?;
    let mut out = vec![x[0].with_data(vec![ZERO; f_bins * frames])?; i_ch];
    for f in 0..f_bins {
        let m = &w.matrices[f];
        for (j, y) in out.iter_mut().enumerate() {
            let row = &mut y.data[f * frames..(f + 1) * frames];
            for (i, xi) in x.iter().enumerate() {
                let coef = m[(i, j)].conj();
                if coef == ZERO {
                    continue;
                }
                for (dst, &src) in row.iter_mut().zip(xi.row(f)) {
                    *dst += coef * src;
                }
            }
        }
    }
    Ok(out)
}

/// `log|det W(f)|`, rejecting (near-)singular matrices.
pub fn log_abs_det(m: &CMatrix) -> Result<f64> {
    let det = m.clone().determinant().norm();
    if !det.is_finite() || det <= DET_FLOOR {
        return Err(Error::Singular(format!("|det W(f)| = {det:e}")));
    }
    Ok(det.ln())
}

/// `2N Σ_f log|det W(f)|`.
pub fn log_det_term(w: &DemixingSystem, frames: usize) -> Result<f64> {
    let mut total = 0.0;
    for m in &w.matrices {
        total += log_abs_det(m)?;
    }
    Ok(2.0 * frames as f64 * total)
}

/// `-Σ_{f,n} (log v + |y|² / v)` for one source.
pub fn source_term(power: &[f64], v: &SourceVariances) -> f64 {
    power
        .iter()
        .zip(&v.data)
        .map(|(&p, &var)| -(var.ln() + p / var))
        .sum()
}

/// Log-likelihood of the demixing system up to constant terms:
/// `2N Σ_f log|det W(f)| − Σ_{f,n,j} (log v_j + |w_jᴴ x|² / v_j)`.
pub fn log_likelihood(w: &DemixingSystem, x: &[ComplexSpectrogram], v: &[SourceVariances]) -> Result<f64> {
    let (i_ch, f_bins, frames) = mixture_dims(x)?;
    check_system(w, i_ch, f_bins)?;
    if v.len() != i_ch || v.iter().any(|s| s.freq_bins != f_bins || s.frames != frames) {
        return Err(Error::dim("variance maps do not match the mixture"));
    }
    let y = apply_demixing(w, x)?;
    let mut ll = log_det_term(w, frames)?;
    for (yj, vj) in y.iter().zip(v) {
        ll += source_term(&yj.power(), vj);
    }
    Ok(ll)
}

/// `Σ_j(f) = (1/N) Σ_n x(f,n) x(f,n)ᴴ / v_j(f,n)` for every frequency.
pub fn weighted_covariance(x: &[ComplexSpectrogram], v: &SourceVariances) -> Result<Vec<CMatrix>> {
    let (i_ch, f_bins, frames) = mixture_dims(x)?;
    if v.freq_bins != f_bins || v.frames != frames {
        return Err(Error::dim("variance map does not match the mixture"));
    }
    let mut out = Vec::with_capacity(f_bins);
    let mut inv = vec![0.0; frames];
    for f in 0..f_bins {
        for (n, slot) in inv.iter_mut().enumerate() {
            *slot = 1.0 / v.get(f, n);
        }
        let mut m = CMatrix::zeros(i_ch, i_ch);
        for a in 0..i_ch {
            let xa = x[a].row(f);
            for b in a..i_ch {
                let xb = x[b].row(f);
                let mut acc = ZERO;
                for n in 0..frames {
                    acc += xa[n] * xb[n].conj() * inv[n];
                }
                acc /= frames as f64;
                m[(a, b)] = acc;
                m[(b, a)] = acc.conj();
            }
            m[(a, a)].im = 0.0;
        }
        out.push(m);
    }
    Ok(out)
}

/// What happened to one demixing vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IpOutcome {
    Updated,
    /// Σ was diagonally loaded before solving.
    Regularized,
    /// The system was numerically singular; `w_j(f)` was left unchanged.
    Skipped,
}

impl IpOutcome {
    pub fn skipped(self) -> bool {
        self == IpOutcome::Skipped
    }
}

/// Iterative-projection update of `w_j(f)`:
/// `w_j ← (Wᴴ Σ_j)⁻¹ e_j`, then `w_j ← w_j / sqrt(w_jᴴ Σ_j w_j)`.
pub fn ip_update(w: &mut DemixingSystem, sigma: &CMatrix, j: usize, f: usize) -> Result<IpOutcome> {
    let i_ch = w.channels();
    if sigma.nrows() != i_ch || sigma.ncols() != i_ch || j >= i_ch || f >= w.freq_bins() {
        return Err(Error::dim("ip_update arguments do not match the demixing system"));
    }
    let mut outcome = IpOutcome::Updated;
    let mut sigma = sigma.clone();
    let min_eig = sigma.clone().symmetric_eigenvalues().min();
    if !(min_eig > EIGEN_FLOOR) {
        let trace = sigma.trace().re;
        let load = REGULARIZATION * trace.max(EIGEN_FLOOR) / i_ch as f64;
        for d in 0..i_ch {
            sigma[(d, d)] += Complex64::new(load, 0.0);
        }
        outcome = IpOutcome::Regularized;
    }

    let current = &w.matrices[f];
    let system = current.adjoint() * &sigma;
    let mut e = DVector::from_element(i_ch, ZERO);
    e[j] = ONE;
    let Some(mut wj) = system.lu().solve(&e) else {
        return Ok(IpOutcome::Skipped);
    };
    let quad = (wj.adjoint() * &sigma * &wj)[(0, 0)].re;
    if !(quad.is_finite() && quad > 0.0) || wj.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Ok(IpOutcome::Skipped);
    }
    wj /= Complex64::new(quad.sqrt(), 0.0);

    let previous = current.column(j).into_owned();
    w.matrices[f].set_column(j, &wj);
    let det = w.matrices[f].clone().determinant().norm();
    if !(det.is_finite() && det > DET_FLOOR) {
        w.matrices[f].set_column(j, &previous);
        return Ok(IpOutcome::Skipped);
    }
    Ok(outcome)
}

/// Result of [`projection_back`].
#[derive(Clone, Debug)]
pub struct ProjectedSource {
    pub spectrogram: ComplexSpectrogram,
    /// Frequencies where the component was identically zero (scale forced to 0).
    pub zero_bins: Vec<usize>,
}

/// Per-frequency least-squares rescaling of `y` to best fit `reference`.
pub fn projection_back(y: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<ProjectedSource> {
    if !y.same_geometry(reference) {
        return Err(Error::dim("component and reference have different geometry"));
    }
    let mut out = y.clone();
    let mut zero_bins = Vec::new();
    for f in 0..y.freq_bins {
        let (ys, xs) = (y.row(f), reference.row(f));
        let energy: f64 = ys.iter().map(|c| c.norm_sqr()).sum();
        let scale = if energy > 0.0 {
            ys.iter().zip(xs).map(|(a, b)| b * a.conj()).sum::<Complex64>() / energy
        } else {
            zero_bins.push(f);
            ZERO
        };
        for n in 0..y.frames {
            out.set(f, n, ys[n] * scale);
        }
    }
    Ok(ProjectedSource {
        spectrogram: out,
        zero_bins,
    })
}
