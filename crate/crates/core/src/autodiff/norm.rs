use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::array::NdArray;
use super::tape::{BatchNormSaved, Op, Tape, Var};

/// Variance stabilizer added before the square root.
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance. Empty vectors mean "never populated".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Mean 0, variance 1 for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn is_populated(&self) -> bool {
        !self.mean.is_empty()
    }

    /// Blend in one batch's statistics (`batch_var` is the biased estimate over `count` values).
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize) {
        if !self.is_populated() {
            *self = Self::identity(batch_mean.len());
        }
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = BATCHNORM_MOMENTUM;
        for c in 0..batch_mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * batch_mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * batch_var[c] * unbias;
        }
    }
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn layout(x: &NdArray) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, n] => Ok((1, c, n)),
        [b, c, n] => Ok((b, c, n)),
        _ => Err(Error::dim(format!(
            "batch norm input must be [C, N] or [B, C, N], got {:?}",
            x.shape()
        ))),
    }
}

impl Tape {
    /// Normalize each channel with its own batch statistics, then apply `gamma`, `beta`.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments)> {
        let x = self.value(input);
        let (batch, channels, n) = layout(x)?;
        self.check_affine(gamma, beta, channels)?;
        if n == 0 || batch == 0 {
            return Err(Error::dim("batch norm over an empty batch"));
        }
        let count = batch * n;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for (row, xs) in x.data().chunks(n).enumerate() {
            mean[row % channels] += xs.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (row, xs) in x.data().chunks(n).enumerate() {
            let m = mean[row % channels];
            var[row % channels] += xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let out = self.normalize(input, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchMoments { mean, var, count }))
    }

    /// Normalize with fixed statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, stats: &RunningStats) -> Result<Var> {
        if !stats.is_populated() {
            return Err(Error::State("batch norm eval mode needs populated running statistics".into()));
        }
        let (_, channels, _) = layout(self.value(input))?;
        self.check_affine(gamma, beta, channels)?;
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(Error::dim("running statistics do not match channel count"));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mean = stats.mean.clone();
        self.normalize(input, gamma, beta, &mean, inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, channels: usize) -> Result<()> {
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::dim(format!("gamma and beta must be [{channels}]")));
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (_, channels, n) = layout(x)?;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for (row, (xh, y)) in normalized
            .data_mut()
            .chunks_mut(n)
            .zip(out.data_mut().chunks_mut(n))
            .enumerate()
        {
            let c = row % channels;
            for (h, o) in xh.iter_mut().zip(y.iter_mut()) {
                *h = (*h - mean[c]) * inv_std[c];
                *o = gv[c] * *h + bv[c];
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm(BatchNormSaved {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            }),
        ))
    }

    pub(super) fn batchnorm_backward(
        &self,
        saved: &BatchNormSaved,
        g: &NdArray,
        grads: &mut [Option<NdArray>],
    ) -> Result<()> {
        let (batch, channels, n) = layout(self.value(saved.input))?;
        let gamma = self.value(saved.gamma).data();
        let xhat = saved.normalized.data();
        let mut sum_g = vec![0.0; channels];
        let mut sum_gx = vec![0.0; channels];
        for (row, (gs, hs)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
            let c = row % channels;
            sum_g[c] += gs.iter().sum::<f64>();
            sum_gx[c] += gs.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>();
        }
        if self.requires_grad(saved.gamma) {
            self.accumulate(grads, saved.gamma, NdArray::from_vec(sum_gx.clone()));
        }
        if self.requires_grad(saved.beta) {
            self.accumulate(grads, saved.beta, NdArray::from_vec(sum_g.clone()));
        }
        if self.requires_grad(saved.input) {
            let count = (batch * n) as f64;
            let mut gx = g.clone();
            for (row, (gs, hs)) in gx.data_mut().chunks_mut(n).zip(xhat.chunks(n)).enumerate() {
                let c = row % channels;
                let scale = gamma[c] * saved.inv_std[c];
                if saved.batch_stats {
                    for (gv, &h) in gs.iter_mut().zip(hs) {
                        *gv = scale * (*gv - sum_g[c] / count - h * sum_gx[c] / count);
                    }
                } else {
                    gs.iter_mut().for_each(|gv| *gv *= scale);
                }
            }
            self.accumulate(grads, saved.input, gx);
        }
        Ok(())
    }
}

/// Batch normalization over `[C, N]` or `[B, C, N]` with running-statistics bookkeeping.
///
/// Train mode normalizes with batch statistics and folds them into `running`;
/// eval mode reads `running` and fails if it was never populated.
pub fn batchnorm1d(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (out, moments) = tape.batch_norm_train(input, gamma, beta)?;
            running.update(&moments.mean, &moments.var, moments.count);
            Ok(out)
        }
        Mode::Eval => tape.batch_norm_eval(input, gamma, beta, running),
    }
}
