//! BSS-eval style SDR/SIR/SAR, scale-invariant SDR and permutation alignment.
//!
//! Each estimate is projected by least squares onto the span of every
//! reference delayed by `0..L` samples (delays truncate at the signal end).
//! The part explained by the true reference's own delays is the target, the
//! rest of the in-span part is interference, the out-of-span residual is
//! artifacts. All ratios are clamped to ±[`METRIC_CLAMP_DB`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRIC_CLAMP_DB: f64 = 100.0;
pub const DEFAULT_PROJ_TAPS: usize = 32;
/// Largest source count accepted by the exhaustive permutation search.
pub const MAX_ALIGN_SOURCES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    /// Reference index.
    pub source: usize,
    /// Estimate index matched to this reference.
    pub estimate: usize,
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub proj_taps: usize,
    /// `permutation[r]` is the estimate assigned to reference `r`.
    pub permutation: Vec<usize>,
    pub sources: Vec<SourceMetrics>,
    pub mean_sdr: Option<f64>,
    pub mean_sir: Option<f64>,
    pub mean_sar: Option<f64>,
}

impl EvalReport {
    /// `source,sdr,sir,sar` rows; undefined values are left empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("source,sdr,sir,sar\n");
        for s in &self.sources {
            out.push_str(&format!("{},{},{},{}\n", s.source, cell(s.sdr), cell(s.sir), cell(s.sar)));
        }
        out
    }
}

pub fn to_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -METRIC_CLAMP_DB;
    }
    if den <= 0.0 {
        return METRIC_CLAMP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CLAMP_DB, METRIC_CLAMP_DB)
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<usize> {
    let len = references
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::contract("at least one reference is required"))?;
    if estimates.len() != references.len() {
        return Err(Error::dim(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    if estimates.iter().chain(references).any(|s| s.len() != len) {
        return Err(Error::dim("estimates and references must share one length"));
    }
    if len == 0 {
        return Err(Error::contract("signals are empty"));
    }
    Ok(len)
}

/// Least-squares projector onto the delayed-reference span.
struct Projector {
    len: usize,
    taps: usize,
    refs: Vec<Vec<f64>>,
    /// Pseudo-inverse of the full Gram matrix.
    all_pinv: DMatrix<f64>,
    /// Pseudo-inverse of each reference's own `taps × taps` Gram block.
    own_pinv: Vec<DMatrix<f64>>,
}

fn pinv(m: DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * svd.singular_values.len() as f64;
    svd.pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .expect("svd computed with both factors")
}

impl Projector {
    fn new(references: &[Vec<f64>], taps: usize) -> Self {
        let len = references[0].len();
        let j = references.len();
        let n = j * taps;
        // <r_a shifted by d1, r_b shifted by d2> over the truncated support.
        let mut gram = DMatrix::<f64>::zeros(n, n);
        for a in 0..j {
            for d1 in 0..taps {
                for b in 0..j {
                    for d2 in 0..taps {
                        let (r, c) = (a * taps + d1, b * taps + d2);
                        if c < r {
                            continue;
                        }
                        let v = shifted_dot(&references[a], d1, &references[b], d2, len);
                        gram[(r, c)] = v;
                        gram[(c, r)] = v;
                    }
                }
            }
        }
        let own_pinv = (0..j)
            .map(|a| pinv(gram.view((a * taps, a * taps), (taps, taps)).into_owned()))
            .collect();
        Self {
            len,
            taps,
            refs: references.to_vec(),
            all_pinv: pinv(gram),
            own_pinv,
        }
    }

    fn correlations(&self, x: &[f64], sources: std::ops::Range<usize>) -> DVector<f64> {
        let mut out = DVector::zeros(sources.len() * self.taps);
        for (k, a) in sources.enumerate() {
            for d in 0..self.taps {
                out[k * self.taps + d] = shifted_dot(&self.refs[a], d, x, 0, self.len);
            }
        }
        out
    }

    fn synthesize(&self, coeffs: &DVector<f64>, first_source: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (idx, &c) in coeffs.iter().enumerate() {
            let a = first_source + idx / self.taps;
            let d = idx % self.taps;
            if c == 0.0 || d >= self.len {
                continue;
            }
            for (o, r) in out[d..].iter_mut().zip(&self.refs[a]) {
                *o += c * r;
            }
        }
        out
    }

    fn project_all(&self, x: &[f64]) -> Vec<f64> {
        let corr = self.correlations(x, 0..self.refs.len());
        self.synthesize(&(&self.all_pinv * corr), 0)
    }

    fn project_own(&self, x: &[f64], target: usize) -> Vec<f64> {
        let corr = self.correlations(x, target..target + 1);
        self.synthesize(&(&self.own_pinv[target] * corr), target)
    }
}

fn shifted_dot(a: &[f64], da: usize, b: &[f64], db: usize, len: usize) -> f64 {
    // sum_t a[t - da] b[t - db] for t in 0..len
    let start = da.max(db);
    if start >= len {
        return 0.0;
    }
    dot(&a[start - da..len - da], &b[start - db..len - db])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn decompose(projector: &Projector, estimate: &[f64], all: &[f64], target: usize) -> Decomposition {
    let s_target = projector.project_own(estimate, target);
    let e_interf: Vec<f64> = all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = estimate.iter().zip(all).map(|(e, p)| e - p).collect();
    let t = energy(&s_target);
    let noise: Vec<f64> = e_interf.iter().zip(&e_artif).map(|(i, a)| i + a).collect();
    Decomposition {
        sdr: to_db(t, energy(&noise)),
        sir: to_db(t, energy(&e_interf)),
        sar: to_db(energy(all), energy(&e_artif)),
    }
}

/// Metrics for every (estimate, reference) pair: `table[e][r]`, `None` where
/// the reference has zero energy.
pub fn metric_table(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    proj_taps: usize,
) -> Result<Vec<Vec<Option<Decomposition>>>> {
    check_lengths(estimates, references)?;
    if proj_taps == 0 {
        return Err(Error::config("projection needs at least one tap"));
    }
    let projector = Projector::new(references, proj_taps);
    Ok(estimates
        .iter()
        .map(|est| {
            let all = projector.project_all(est);
            (0..references.len())
                .map(|r| (energy(&references[r]) > 0.0).then(|| decompose(&projector, est, &all, r)))
                .collect()
        })
        .collect())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                prefix.push(k);
                rec(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn best_permutation(table: &[Vec<Option<Decomposition>>]) -> Result<Vec<usize>> {
    let n = table.len();
    if n > MAX_ALIGN_SOURCES {
        return Err(Error::contract(format!(
            "permutation search supports at most {MAX_ALIGN_SOURCES} sources, got {n}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let score = perm
            .iter()
            .enumerate()
            .map(|(r, &e)| table[e][r].map_or(-METRIC_CLAMP_DB, |d| d.sir))
            .sum::<f64>()
            / n as f64;
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}

/// Assignment of estimates to references with the highest mean SIR; the
/// lexicographically first permutation wins ties.
pub fn align_permutation(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<Vec<usize>> {
    best_permutation(&metric_table(estimates, references, DEFAULT_PROJ_TAPS)?)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Align estimates to references, then report per-source and mean metrics.
pub fn bss_eval(estimates: &[Vec<f64>], references: &[Vec<f64>], proj_taps: usize) -> Result<EvalReport> {
    let table = metric_table(estimates, references, proj_taps)?;
    let permutation = best_permutation(&table)?;
    let sources: Vec<SourceMetrics> = permutation
        .iter()
        .enumerate()
        .map(|(r, &e)| {
            let d = table[e][r];
            SourceMetrics {
                source: r,
                estimate: e,
                sdr: d.map(|d| d.sdr),
                sir: d.map(|d| d.sir),
                sar: d.map(|d| d.sar),
            }
        })
        .collect();
    Ok(EvalReport {
        proj_taps,
        mean_sdr: mean(sources.iter().map(|s| s.sdr)),
        mean_sir: mean(sources.iter().map(|s| s.sir)),
        mean_sar: mean(sources.iter().map(|s| s.sar)),
        permutation,
        sources,
    })
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::dim("estimate and reference lengths differ"));
    }
    let r2 = energy(reference);
    if r2 <= 0.0 {
        return Err(Error::contract("reference has zero energy"));
    }
    let alpha = dot(estimate, reference) / r2;
    let target: Vec<f64> = reference.iter().map(|r| alpha * r).collect();
    let noise: f64 = estimate.iter().zip(&target).map(|(e, t)| (e - t).powi(2)).sum();
    Ok(to_db(energy(&target), noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn exact_match_clamps_high() {
        let refs = vec![noise(600, 1), noise(600, 2)];
        let rep = bss_eval(&refs, &refs, 8).unwrap();
        assert_eq!(rep.permutation, vec![0, 1]);
        for s in &rep.sources {
            assert!(s.sdr.unwrap() > 99.0 && s.sir.unwrap() > 99.0 && s.sar.unwrap() > 99.0, "{s:?}");
        }
    }

    #[test]
    fn orthogonal_noise_at_twenty_db() {
        let refs = vec![noise(800, 3), noise(800, 4)];
        let projector = Projector::new(&refs, 8);
        let raw = noise(800, 5);
        let proj = projector.project_all(&raw);
        let mut orth: Vec<f64> = raw.iter().zip(&proj).map(|(a, b)| a - b).collect();
        let scale = (energy(&refs[0]) / energy(&orth) / 100.0).sqrt();
        orth.iter_mut().for_each(|v| *v *= scale);
        let est0: Vec<f64> = refs[0].iter().zip(&orth).map(|(a, b)| a + b).collect();
        let rep = bss_eval(&[est0, refs[1].clone()], &refs, 8).unwrap();
        let s = &rep.sources[0];
        assert!((s.sdr.unwrap() - 20.0).abs() < 0.1, "{s:?}");
        assert!((s.sar.unwrap() - 20.0).abs() < 0.1, "{s:?}");
        assert!(s.sir.unwrap() > 99.0, "{s:?}");
    }

    #[test]
    fn scale_invariance() {
        let refs = vec![noise(500, 6), noise(500, 7)];
        let est = vec![
            refs[0].iter().zip(&refs[1]).map(|(a, b)| a + 0.2 * b).collect::<Vec<_>>(),
            refs[1].iter().zip(&noise(500, 8)).map(|(a, b)| a + 0.3 * b).collect(),
        ];
        let scaled: Vec<Vec<f64>> = est.iter().map(|e| e.iter().map(|v| -2.5 * v).collect()).collect();
        let a = bss_eval(&est, &refs, 4).unwrap();
        let b = bss_eval(&scaled, &refs, 4).unwrap();
        for (x, y) in a.sources.iter().zip(&b.sources) {
            assert!((x.sdr.unwrap() - y.sdr.unwrap()).abs() < 1e-8);
            assert!((x.sir.unwrap() - y.sir.unwrap()).abs() < 1e-8);
            assert!((x.sar.unwrap() - y.sar.unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn swapped_estimates_give_swap() {
        let refs = vec![noise(400, 9), noise(400, 10)];
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        assert_eq!(align_permutation(&swapped, &refs).unwrap(), vec![1, 0]);
        assert_eq!(align_permutation(&refs, &refs).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_reference_is_null() {
        let refs = vec![noise(300, 11), vec![0.0; 300]];
        let rep = bss_eval(&[refs[0].clone(), noise(300, 12)], &refs, 4).unwrap();
        assert!(rep.sources[1].sdr.is_none());
        assert!(rep.sources[0].sdr.is_some());
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("null"));
    }

    #[test]
    fn si_sdr_examples() {
        let r = noise(256, 13);
        let e: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_sdr(&e, &r).unwrap(), METRIC_CLAMP_DB);
        // equal-power orthogonal noise
        let n = noise(256, 14);
        let k = dot(&n, &r) / energy(&r);
        let mut orth: Vec<f64> = n.iter().zip(&r).map(|(a, b)| a - k * b).collect();
        let s = (energy(&r) / energy(&orth)).sqrt();
        orth.iter_mut().for_each(|v| *v *= s);
        let est: Vec<f64> = r.iter().zip(&orth).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&est, &r).unwrap().abs() < 1e-9);
        assert!(si_sdr(&est, &[0.0; 256]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let refs = vec![noise(200, 15)];
        let csv = bss_eval(&refs, &refs, 2).unwrap().to_csv();
        assert!(csv.starts_with("source,sdr,sir,sar\n0,"));
    }
}
