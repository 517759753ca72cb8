//! ELBO on a tape and the Adam training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{log_power, Batch, CvaeArch, CvaeModel, Pass, TrainingExample, MIN_FRAMES};
use crate::autodiff::{AdamConfig, AdamState, BatchMoments, Mode, NdArray, Tape, Var};
use crate::error::{Error, Result};
use crate::mixsim::derive_seed;

/// Scalars recorded by [`elbo_batch`]; all are sums over the batch.
pub struct ElboTerms {
    pub elbo: Var,
    pub kl: Var,
    pub recon: Var,
    pub(crate) moments: Vec<(usize, BatchMoments)>,
}

/// Record the batch ELBO `Σ_b [Σ(−o − p e^{−o}) − KL]` on `tape`.
pub fn elbo_batch(model: &CvaeModel, tape: &mut Tape, vars: &[Var], batch: &Batch, mode: Mode) -> Result<ElboTerms> {
    let arch = model.arch();
    let [b, f, n] = *batch.power.shape() else {
        return Err(Error::dim("batch power must be [B, F, N]"));
    };
    if f != arch.freq_bins || batch.labels.shape() != [b, arch.num_classes] {
        return Err(Error::dim(format!(
            "batch {:?} / labels {:?} do not match the architecture",
            batch.power.shape(),
            batch.labels.shape()
        )));
    }
    if batch.eps.shape() != [b, arch.latent_dim, arch.latent_frames(n)] {
        return Err(Error::dim(format!("noise draw has shape {:?}", batch.eps.shape())));
    }
    let mut pass = Pass::new(model, vars.to_vec(), mode);
    let x = tape.constant(log_power(&batch.power));
    let c = tape.constant(batch.labels.clone());
    let (mu, lv) = pass.encode(tape, x, c)?;
    let half = tape.scale(lv, 0.5);
    let sd = tape.exp(half);
    let eps = tape.constant(batch.eps.clone());
    let noise = tape.mul(sd, eps)?;
    let z = tape.add(mu, noise)?;
    let o = pass.decode(tape, z, c, n)?;

    let p = tape.constant(batch.power.clone());
    let neg = tape.scale(o, -1.0);
    let inv = tape.exp(neg);
    let ratio = tape.mul(p, inv)?;
    let s_log = tape.sum(o);
    let s_ratio = tape.sum(ratio);
    let both = tape.add(s_log, s_ratio)?;
    let recon = tape.scale(both, -1.0);

    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(lv);
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, lv)?;
    let count = tape.value(t).len() as f64;
    let t = tape.sum(t);
    let t = tape.add_scalar(t, -count);
    let kl = tape.scale(t, 0.5);
    let elbo = tape.sub(recon, kl)?;
    Ok(ElboTerms {
        elbo,
        kl,
        recon,
        moments: pass.moments,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent_dim: usize,
    /// Random crop length per example and epoch; `None` uses the shortest example.
    pub crop_frames: Option<usize>,
    pub validation_seed: u64,
    /// Skip the check that at least two classes appear in the training set.
    pub allow_single_class: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 16,
            lr: 3e-3,
            seed: 0,
            latent_dim: 16,
            crop_frames: Some(32),
            validation_seed: 1,
            allow_single_class: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-example ELBO over the epoch's crops.
    pub mean_elbo: f64,
    pub mean_kl: f64,
    pub mean_recon: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final model, or the last finite one when training diverged.
    pub model: CvaeModel,
    pub log: Vec<EpochLog>,
    /// Where a non-finite ELBO or gradient stopped training.
    pub diverged: Option<String>,
}

fn validate_dataset(data: &[TrainingExample], cfg: &TrainConfig) -> Result<(usize, usize, usize)> {
    let first = data.first().ok_or_else(|| Error::config("training set is empty"))?;
    let f = first.power.shape()[0];
    let c = first.label.len();
    if data.iter().any(|e| e.power.shape()[0] != f || e.label.len() != c) {
        return Err(Error::dim("training examples disagree on bins or classes"));
    }
    let mut classes: Vec<usize> = data.iter().map(|e| e.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 && !cfg.allow_single_class {
        return Err(Error::config("training needs at least two classes"));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("epochs, batch size and learning rate must be positive"));
    }
    let shortest = data.iter().map(TrainingExample::frames).min().unwrap_or(0);
    let crop = cfg.crop_frames.unwrap_or(shortest).min(shortest);
    if crop < MIN_FRAMES {
        return Err(Error::config(format!("examples must provide at least {MIN_FRAMES} frames")));
    }
    Ok((f, c, crop))
}

fn crop(example: &TrainingExample, start: usize, len: usize) -> Vec<f64> {
    let n = example.frames();
    example
        .power
        .data()
        .chunks(n)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect()
}

fn normal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Train a fresh model on `data`; `eval` (may be empty) feeds the stored validation ELBO.
pub fn train(data: &[TrainingExample], eval: &[TrainingExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (f, c, crop_len) = validate_dataset(data, cfg)?;
    let arch = CvaeArch::new(f, c, cfg.latent_dim)?;
    let mut model = CvaeModel::new(arch.clone(), derive_seed(&[cfg.seed, 0x1417]))?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nz = arch.latent_frames(crop_len);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut elbo_sum, mut kl_sum, mut recon_sum) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let b = chunk.len();
            let mut power = Vec::with_capacity(b * f * crop_len);
            let mut labels = Vec::with_capacity(b * c);
            for &k in chunk {
                let ex = &data[k];
                let start = rng.gen_range(0..=ex.frames() - crop_len);
                power.extend(crop(ex, start, crop_len));
                labels.extend_from_slice(&ex.label);
            }
            let batch = Batch {
                power: NdArray::new(vec![b, f, crop_len], power)?,
                labels: NdArray::new(vec![b, c], labels)?,
                eps: NdArray::new(vec![b, arch.latent_dim, nz], normal(&mut rng, b * arch.latent_dim * nz))?,
            };
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let terms = elbo_batch(&model, &mut tape, &vars, &batch, Mode::Train)?;
            let elbo = tape.value(terms.elbo).item();
            if !elbo.is_finite() {
                diverged = Some(format!("non-finite ELBO at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            let loss = tape.scale(terms.elbo, -1.0 / b as f64);
            elbo_sum += elbo;
            kl_sum += tape.value(terms.kl).item();
            recon_sum += tape.value(terms.recon).item();
            let grads = tape.backward(loss)?;
            let grads: Vec<NdArray> = vars.iter().map(|&v| grads.get(v)).collect();
            match adam.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    diverged = Some(format!("non-finite {what} at epoch {epoch}, step {step}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            model.fold_moments(&terms.moments);
        }
        let count = data.len() as f64;
        log.push(EpochLog {
            epoch,
            mean_elbo: elbo_sum / count,
            mean_kl: kl_sum / count,
            mean_recon: recon_sum / count,
        });
    }

    model.info.epochs = log.len();
    model.info.seed = cfg.seed;
    model.info.validation_seed = cfg.validation_seed;
    model.info.validation_examples = eval.len();
    model.info.validation_elbo = if eval.is_empty() {
        None
    } else {
        Some(validation_elbo(&model, eval, cfg.validation_seed)?)
    };
    Ok(TrainOutcome { model, log, diverged })
}

/// Mean eval-mode ELBO of full-length examples with seeded noise draws.
pub fn validation_elbo(model: &CvaeModel, examples: &[TrainingExample], seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let arch = model.arch();
    let mut total = 0.0;
    for (k, ex) in examples.iter().enumerate() {
        let nz = arch.latent_frames(ex.frames());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64]));
        let eps = NdArray::new(vec![arch.latent_dim, nz], normal(&mut rng, arch.latent_dim * nz))?;
        total += model.elbo(&ex.power, &ex.label, &eps)?;
    }
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize, f: usize, n: usize) -> Vec<TrainingExample> {
        let mut out = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                let mut rng = ChaCha8Rng::seed_from_u64((c * 100 + k) as u64);
                let data = (0..f * n)
                    .map(|i| {
                        let bin = i / n;
                        let peak = if bin % classes == c { 4.0 } else { 0.2 };
                        peak * rng.gen_range(0.5..1.5)
                    })
                    .collect();
                out.push(TrainingExample::from_power(NdArray::new(vec![f, n], data).unwrap(), c, classes).unwrap());
            }
        }
        out
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 4,
            lr: 3e-3,
            latent_dim: 4,
            crop_frames: Some(8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_improves_and_is_deterministic() {
        let data = toy(2, 4, 6, 12);
        let a = train(&data, &data[..2], &small_cfg(15)).unwrap();
        let b = train(&data, &data[..2], &small_cfg(15)).unwrap();
        assert!(a.diverged.is_none());
        assert!(a.log.last().unwrap().mean_elbo > a.log[0].mean_elbo);
        assert!(a.log.iter().all(|e| e.mean_kl >= 0.0));
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.model.info.validation_elbo, b.model.info.validation_elbo);
    }

    #[test]
    fn single_class_needs_opt_in() {
        let data = toy(1, 4, 6, 12);
        assert!(matches!(train(&data, &[], &small_cfg(1)), Err(Error::Config(_))));
        let mut cfg = small_cfg(10);
        cfg.allow_single_class = true;
        let out = train(&data, &[], &cfg).unwrap();
        assert!(out.log.last().unwrap().mean_elbo > out.log[0].mean_elbo);
    }

    #[test]
    fn identical_examples_share_gradients() {
        let data = toy(2, 1, 6, 8);
        let model = CvaeModel::new(CvaeArch::new(6, 2, 4).unwrap(), 3).unwrap();
        let ex = &data[0];
        let eps = normal(&mut ChaCha8Rng::seed_from_u64(9), 4 * 2);
        let grads_for = |copies: usize| {
            let batch = Batch {
                power: NdArray::new(vec![copies, 6, 8], ex.power.data().repeat(copies)).unwrap(),
                labels: NdArray::new(vec![copies, 2], ex.label.repeat(copies)).unwrap(),
                eps: NdArray::new(vec![copies, 4, 2], eps.repeat(copies)).unwrap(),
            };
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let terms = elbo_batch(&model, &mut tape, &vars, &batch, Mode::Train).unwrap();
            let loss = tape.scale(terms.elbo, -1.0 / copies as f64);
            let g = tape.backward(loss).unwrap();
            vars.iter().map(|&v| g.get(v)).collect::<Vec<_>>()
        };
        let one = grads_for(1);
        let three = grads_for(3);
        for (a, b) in one.iter().zip(&three) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }
}
