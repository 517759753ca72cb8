use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::Args;
use serde::Serialize;
use serde_json::{json, Map, Value};

use mvae_core::cvae::{load_model, save_model, train as train_cvae, CvaeModel, TrainConfig};
use mvae_core::ilrma::{ilrma_run, IlrmaConfig};
use mvae_core::lgm::{apply_demixing, projection_back};
use mvae_core::metrics::{bss_eval, si_sdr};
use mvae_core::mixsim::{
    default_classes, derive_seed, gen_corpus, gen_utterance, mix as mix_sources, read_manifest, training_examples,
    write_corpus, CorpusConfig, MixMode, MixSpec, Split, Utterance,
};
use mvae_core::mvae::{classify_sources, mvae_separate, MvaeConfig};
use mvae_core::signal::{istft, read_wav, stft_multi, write_wav, ComplexSpectrogram, SampleFormat, StftConfig, TimeSignal};

use crate::config::{ResolvedConfig, Resolver};
use crate::error::CliError;
use crate::Common;

const DEFAULT_FRAME: usize = 4096;
const ILRMA_ITERS: usize = 100;
const MVAE_ITERS: usize = 40;

/// An output directory plus everything `report.json` needs.
struct Run {
    out: PathBuf,
    config: ResolvedConfig,
    timings: bool,
    started: Instant,
    outputs: Vec<String>,
}

fn begin(out: &Path, common: &Common, mut r: Resolver) -> Result<Run, CliError> {
    let threads = r.value("threads", common.threads, 1usize)?;
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let config = r.finish()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved"), config.to_text())?;
    Ok(Run {
        out: out.to_path_buf(),
        config,
        timings: common.timings,
        started: Instant::now(),
        outputs: vec!["config.resolved".into()],
    })
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(path, format!("{:#}\n", serde_json::to_value(value)?))?;
        Ok(())
    }

    fn write_lines<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut text = String::new();
        for row in rows {
            text.push_str(&serde_json::to_string(row)?);
            text.push('\n');
        }
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn finish(mut self, command: &str, body: Value) -> Result<(), CliError> {
        let mut report = Map::new();
        report.insert("command".into(), json!(command));
        report.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        report.insert("config_hash".into(), json!(self.config.hash()));
        report.insert("config".into(), json!(self.config.entries));
        if let Value::Object(fields) = body {
            report.extend(fields);
        }
        if self.timings {
            report.insert("timings".into(), json!({ "total_s": self.started.elapsed().as_secs_f64() }));
        }
        self.outputs.push("report.json".into());
        self.outputs.sort();
        report.insert("outputs".into(), json!(self.outputs));
        fs::write(self.out.join("report.json"), format!("{:#}\n", Value::Object(report)))?;
        Ok(())
    }
}

fn parse_list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("--{key}: `{}`: {e}", s.trim())))
        })
        .collect()
}

fn load_wav(path: impl AsRef<Path>) -> Result<TimeSignal, CliError> {
    let path = path.as_ref();
    read_wav(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn open_model(path: &str) -> Result<CvaeModel, CliError> {
    load_model(path).map_err(|e| match e {
        mvae_core::Error::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(format!("{path}: {other}")),
    })
}

fn stft_config(frame: usize, hop: Option<usize>) -> Result<StftConfig, CliError> {
    Ok(match hop {
        Some(h) => StftConfig::with_hop(frame, h)?,
        None => StftConfig::new(frame)?,
    })
}

fn non_decreasing(ll: &[f64]) -> bool {
    ll.windows(2).all(|w| w[1] - w[0] >= -1e-9 * (1.0 + w[0].abs()))
}

#[derive(Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of built-in source classes to use.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Utterance length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

pub fn corpus(a: &CorpusArgs) -> Result<(), CliError> {
    let d = CorpusConfig::default();
    let specs = default_classes();
    let mut r = Resolver::load(a.common.config.as_deref())?;
    let classes = r.value("classes", a.classes, specs.len())?;
    let cfg = CorpusConfig {
        utterances_per_class: r.value("per-class", a.per_class, d.utterances_per_class)?,
        duration_s: r.value("duration", a.duration, d.duration_s)?,
        sample_rate: r.value("sample-rate", a.sample_rate, d.sample_rate)?,
        seed: r.value("seed", a.seed, d.seed)?,
        train_fraction: r.value("train-fraction", a.train_fraction, d.train_fraction)?,
    };
    if classes == 0 || classes > specs.len() {
        return Err(CliError::Usage(format!("--classes must be between 1 and {}", specs.len())));
    }
    let mut run = begin(&a.out, &a.common, r)?;
    let utts = gen_corpus(&specs[..classes], &cfg)?;
    let manifest = write_corpus(&utts, &run.out)?;
    run.outputs.push("manifest.json".into());
    let train = manifest.iter().filter(|e| e.split == Split::Train).count();
    let body = json!({
        "classes": specs[..classes].iter().map(|s| json!({ "id": s.class_id, "name": s.name })).collect::<Vec<_>>(),
        "utterances": manifest.len(),
        "train": train,
        "eval": manifest.len() - train,
    });
    run.finish("corpus", body)
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus directory containing manifest.json.
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Frames per random training crop; 0 uses the shortest example.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_seed: Option<u64>,
    #[arg(long)]
    pub allow_single_class: bool,
    #[command(flatten)]
    pub common: Common,
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let d = TrainConfig::default();
    let mut r = Resolver::load(a.common.config.as_deref())?;
    let corpus_dir: String = r.required("corpus", a.corpus.clone())?;
    let crop = r.value("crop", a.crop, d.crop_frames.unwrap_or(0))?;
    let cfg = TrainConfig {
        epochs: r.value("epochs", a.epochs, d.epochs)?,
        batch: r.value("batch", a.batch, d.batch)?,
        lr: r.value("lr", a.lr, d.lr)?,
        seed: r.value("seed", a.seed, d.seed)?,
        latent_dim: r.value("latent-dim", a.latent_dim, d.latent_dim)?,
        crop_frames: (crop > 0).then_some(crop),
        validation_seed: r.value("validation-seed", a.validation_seed, d.validation_seed)?,
        allow_single_class: r.switch("allow-single-class", a.allow_single_class)?,
    };
    let frame = r.value("frame", a.frame, DEFAULT_FRAME)?;
    let hop = r.optional("hop", a.hop)?;
    let stft_cfg = stft_config(frame, hop)?;
    let mut run = begin(&a.out, &a.common, r)?;

    let entries = read_manifest(Path::new(&corpus_dir))?;
    let num_classes = entries.iter().map(|(e, _)| e.class_id + 1).max().unwrap_or(0);
    let utts = entries
        .into_iter()
        .enumerate()
        .map(|(index, (e, path))| {
            Ok(Utterance {
                class_id: e.class_id,
                index,
                seed: e.seed,
                split: e.split,
                signal: load_wav(&path)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (train_set, eval_set) = training_examples(&utts, stft_cfg, num_classes)?;
    let outcome = train_cvae(&train_set, &eval_set, &cfg)?;
    save_model(&outcome.model, run.path("model.ckpt"))?;
    run.write_lines("train_log.jsonl", &outcome.log)?;

    let first = outcome.log.first().map(|l| l.mean_elbo);
    let last = outcome.log.last().map(|l| l.mean_elbo);
    let body = json!({
        "train_examples": train_set.len(),
        "eval_examples": eval_set.len(),
        "num_classes": num_classes,
        "num_parameters": outcome.model.num_parameters(),
        "epochs_run": outcome.log.len(),
        "first_elbo": first,
        "final_elbo": last,
        "min_kl": outcome.log.iter().map(|l| l.mean_kl).reduce(f64::min),
        "validation_elbo": outcome.model.info.validation_elbo,
        "diverged": outcome.diverged,
    });
    let diverged = outcome.diverged.clone();
    run.finish("train", body)?;
    match diverged {
        Some(msg) => Err(CliError::Data(format!("training diverged ({msg}); kept the last finite model"))),
        None => Ok(()),
    }
}

#[derive(Args)]
pub struct MixArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated mono WAV files.
    #[arg(long, conflicts_with = "classes")]
    pub sources: Option<String>,
    /// Comma-separated class ids to synthesize instead of reading files.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// instantaneous or convolutive
    #[arg(long)]
    pub mode: Option<String>,
    /// Rows separated by `;`, entries by `,`; random when omitted.
    #[arg(long)]
    pub matrix: Option<String>,
    #[arg(long)]
    pub decay_ms: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

pub fn mix(a: &MixArgs) -> Result<(), CliError> {
    let mut r = Resolver::load(a.common.config.as_deref())?;
    let sources: Option<String> = r.optional("sources", a.sources.clone())?;
    let classes: Option<String> = r.optional("classes", a.classes.clone())?;
    let mode: String = r.value("mode", a.mode.clone(), "instantaneous".into())?;
    let matrix: Option<String> = r.optional("matrix", a.matrix.clone())?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let snr_db = r.optional("snr-db", a.snr_db)?;
    let (duration, sample_rate) = if classes.is_some() {
        (
            Some(r.value("duration", a.duration, 1.0f64)?),
            Some(r.value("sample-rate", a.sample_rate, CorpusConfig::default().sample_rate)?),
        )
    } else {
        (r.optional("duration", a.duration)?, r.optional("sample-rate", a.sample_rate)?)
    };
    let decay_ms = if mode == "convolutive" {
        Some(r.value("decay-ms", a.decay_ms, 200.0f64)?)
    } else {
        r.optional("decay-ms", a.decay_ms)?
    };

    let signals: Vec<TimeSignal> = match (&sources, &classes) {
        (Some(list), None) => {
            if duration.is_some() || sample_rate.is_some() {
                return Err(CliError::Usage("--duration and --sample-rate only apply to --classes".into()));
            }
            list.split(',').map(|p| load_wav(p.trim())).collect::<Result<_, CliError>>()?
        }
        (None, Some(list)) => {
            let ids: Vec<usize> = parse_list("classes", list)?;
            let specs = default_classes();
            ids.iter()
                .enumerate()
                .map(|(j, &c)| {
                    let spec = specs
                        .get(c)
                        .ok_or_else(|| CliError::Usage(format!("unknown class {c}")))?;
                    let s = derive_seed(&[seed, j as u64, c as u64]);
                    Ok(gen_utterance(spec, duration.unwrap_or(1.0), sample_rate.unwrap_or(8000), s)?)
                })
                .collect::<Result<_, CliError>>()?
        }
        _ => return Err(CliError::Usage("give exactly one of --sources or --classes".into())),
    };
    let count = signals.len();
    let mut spec = match mode.as_str() {
        "instantaneous" => {
            if decay_ms.is_some() {
                return Err(CliError::Usage("--decay-ms needs --mode convolutive".into()));
            }
            match &matrix {
                Some(text) => {
                    let rows = text
                        .split(';')
                        .map(|row| parse_list::<f64>("matrix", row))
                        .collect::<Result<Vec<_>, _>>()?;
                    let mut s = MixSpec::instantaneous(rows);
                    s.seed = seed;
                    s
                }
                None => MixSpec::random_instantaneous(count, seed),
            }
        }
        "convolutive" => {
            if matrix.is_some() {
                return Err(CliError::Usage("--matrix needs --mode instantaneous".into()));
            }
            let sr = signals.first().map_or(8000, |s| s.sample_rate);
            MixSpec::convolutive(count, decay_ms.unwrap_or(200.0), sr, seed)?
        }
        other => return Err(CliError::Usage(format!("unknown mix mode `{other}`"))),
    };
    spec.snr_db = snr_db;
    let mut run = begin(&a.out, &a.common, r)?;
    let mixed = mix_sources(&signals, &spec)?;
    write_wav(run.path("mixture.wav"), &mixed.mixture, SampleFormat::Float32)?;
    for (j, image) in mixed.images.iter().enumerate() {
        write_wav(run.path(&format!("image{j}.wav")), image, SampleFormat::Float32)?;
        let reference = TimeSignal::mono(image.channels[0].clone(), image.sample_rate)?;
        write_wav(run.path(&format!("reference{j}.wav")), &reference, SampleFormat::Float32)?;
    }
    run.write_json("mix.json", &spec)?;
    let mut body = json!({
        "channels": count,
        "samples": mixed.mixture.len(),
        "sample_rate": mixed.mixture.sample_rate,
        "mode": mode,
    });
    match &spec.mode {
        MixMode::Instantaneous { matrix } => {
            body["condition_number"] = json!(mvae_core::mixsim::condition_number(matrix));
        }
        MixMode::Convolutive { rirs } => {
            body["rir_taps"] = json!(rirs.iter().flatten().map(Vec::len).max());
        }
    }
    run.finish("mix", body)
}

#[derive(Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Multichannel mixture WAV.
    #[arg(long)]
    pub input: Option<String>,
    /// ilrma or mvae
    #[arg(long)]
    pub algo: Option<String>,
    /// Trained checkpoint, required by mvae.
    #[arg(long)]
    pub model: Option<String>,
    /// Outer iterations (default 100 for ilrma, 40 for mvae).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub warm_start_iters: Option<usize>,
    /// Known class per source, e.g. `0,2`.
    #[arg(long)]
    pub fix_class: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// STFT frame; mvae defaults to the model's frame.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub bases: Option<usize>,
    #[arg(long)]
    pub psi_steps: Option<usize>,
    #[arg(long)]
    pub psi_lr: Option<f64>,
    /// Reject latent steps that lower the objective.
    #[arg(long)]
    pub guard: Option<bool>,
    /// Write each separated power spectrogram as CSV.
    #[arg(long)]
    pub dump_spectrograms: bool,
    #[command(flatten)]
    pub common: Common,
}

fn to_signals(specs: &[ComplexSpectrogram], len: usize, sr: u32) -> Result<Vec<TimeSignal>, CliError> {
    specs
        .iter()
        .map(|s| Ok(TimeSignal::mono(istft(s, len)?, sr)?))
        .collect()
}

pub fn separate(a: &SeparateArgs) -> Result<(), CliError> {
    let mut r = Resolver::load(a.common.config.as_deref())?;
    let input: String = r.required("input", a.input.clone())?;
    let algo: String = r.value("algo", a.algo.clone(), "ilrma".into())?;
    let model_path: Option<String> = r.optional("model", a.model.clone())?;
    let is_mvae = match algo.as_str() {
        "ilrma" => false,
        "mvae" => true,
        other => return Err(CliError::Usage(format!("unknown algorithm `{other}`, expected ilrma or mvae"))),
    };
    if is_mvae && model_path.is_none() {
        return Err(CliError::Usage("--algo mvae requires --model <checkpoint>".into()));
    }
    if !is_mvae && model_path.is_some() {
        return Err(CliError::Usage("--model only applies to --algo mvae".into()));
    }
    let d = MvaeConfig::default();
    let iters = r.value("iters", a.iters, if is_mvae { MVAE_ITERS } else { ILRMA_ITERS })?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let bases = r.value("bases", a.bases, d.ilrma_bases)?;
    let dump = r.switch("dump-spectrograms", a.dump_spectrograms)?;
    let (warm, psi_steps, psi_lr, guard, fixed) = if is_mvae {
        let fixed: Option<String> = r.optional("fix-class", a.fix_class.clone())?;
        (
            r.value("warm-start-iters", a.warm_start_iters, d.warm_start_iters)?,
            r.value("psi-steps", a.psi_steps, d.psi_steps)?,
            r.value("psi-lr", a.psi_lr, d.psi_lr)?,
            r.value("guard", a.guard, d.guard)?,
            fixed.map(|f| parse_list::<usize>("fix-class", &f)).transpose()?,
        )
    } else {
        let mvae_only = [
            ("warm-start-iters", a.warm_start_iters.is_some()),
            ("fix-class", a.fix_class.is_some()),
            ("psi-steps", a.psi_steps.is_some()),
            ("psi-lr", a.psi_lr.is_some()),
            ("guard", a.guard.is_some()),
        ];
        if let Some((key, _)) = mvae_only.iter().find(|(_, set)| *set) {
            return Err(CliError::Usage(format!("--{key} only applies to --algo mvae")));
        }
        (0, 0, 0.0, false, None)
    };
    let model: Option<CvaeModel> = model_path.as_deref().map(open_model).transpose()?;
    let frame_default = model.as_ref().map_or(DEFAULT_FRAME, |m| 2 * (m.arch().freq_bins - 1));
    let frame = r.value("frame", a.frame, frame_default)?;
    let hop = r.optional("hop", a.hop)?;
    let stft_cfg = stft_config(frame, hop)?;
    let mut run = begin(&a.out, &a.common, r)?;

    let mixture = load_wav(&input)?;
    let (len, sr) = (mixture.len(), mixture.sample_rate);
    let mut body = json!({ "algo": algo, "channels": mixture.num_channels(), "samples": len });
    let spectrograms = match &model {
        None => {
            let x = stft_multi(&mixture, stft_cfg)?;
            let out = ilrma_run(
                &x,
                &IlrmaConfig {
                    iterations: iters,
                    bases,
                    seed,
                    log_likelihood: true,
                },
            )?;
            run.write_lines("loglik.jsonl", &out.log)?;
            let ll: Vec<f64> = out.log.iter().filter_map(|l| l.loglik).collect();
            body["iterations"] = json!(iters);
            body["final_loglik"] = json!(ll.last());
            body["loglik_nondecreasing"] = json!(non_decreasing(&ll));
            body["skipped_updates"] = json!(out.log.iter().map(|l| l.skipped).sum::<usize>());
            apply_demixing(&out.demixing, &x)?
                .iter()
                .map(|y| projection_back(y, &x[0]).map(|p| p.spectrogram))
                .collect::<Result<Vec<_>, _>>()?
        }
        Some(model) => {
            let cfg = MvaeConfig {
                outer_iters: iters,
                psi_steps,
                psi_lr,
                warm_start_iters: warm,
                ilrma_bases: bases,
                seed,
                guard,
                fixed_classes: fixed,
            };
            let (_, out) = mvae_separate(&mixture, stft_cfg, model, &cfg)?;
            run.write_lines("loglik.jsonl", &out.log)?;
            let ll: Vec<f64> = out.log.iter().map(|l| l.loglik).collect();
            body["iterations"] = json!(iters);
            body["warm_start_iterations"] = json!(warm);
            body["warm_start_final_loglik"] = json!(out.warm_start_loglik.last());
            body["final_loglik"] = json!(ll.last());
            body["loglik_nondecreasing"] = json!(non_decreasing(&ll));
            body["rejected_steps"] = json!(out.log.iter().map(|l| l.rejected_steps).sum::<usize>());
            body["classes"] = json!(classify_sources(&out.state)
                .iter()
                .enumerate()
                .map(|(j, (c, p))| json!({ "source": j, "class": c, "probability": p }))
                .collect::<Vec<_>>());
            out.spectrograms
        }
    };
    for (j, s) in to_signals(&spectrograms, len, sr)?.iter().enumerate() {
        write_wav(run.path(&format!("source{j}.wav")), s, SampleFormat::Float32)?;
    }
    if dump {
        for (j, s) in spectrograms.iter().enumerate() {
            let file = fs::File::create(run.path(&format!("source{j}_power.csv")))?;
            s.write_csv_power(std::io::BufWriter::new(file))?;
        }
    }
    run.finish("separate", body)
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated estimate WAVs (channel 0 is scored).
    #[arg(long)]
    pub estimates: Option<String>,
    /// Comma-separated reference WAVs.
    #[arg(long)]
    pub references: Option<String>,
    /// Channel taken from multichannel reference files.
    #[arg(long)]
    pub ref_channel: Option<usize>,
    /// Length of the distortion-filter projection.
    #[arg(long)]
    pub proj_taps: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn read_channel(path: &str, channel: usize) -> Result<(Vec<f64>, u32), CliError> {
    let s = load_wav(path.trim())?;
    if channel >= s.num_channels() {
        return Err(CliError::Data(format!("{path} has no channel {channel}")));
    }
    let sr = s.sample_rate;
    Ok((s.channels.into_iter().nth(channel).unwrap_or_default(), sr))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut r = Resolver::load(a.common.config.as_deref())?;
    let estimates: String = r.required("estimates", a.estimates.clone())?;
    let references: String = r.required("references", a.references.clone())?;
    let ref_channel = r.value("ref-channel", a.ref_channel, 0usize)?;
    let taps = r.value("proj-taps", a.proj_taps, mvae_core::metrics::DEFAULT_PROJ_TAPS)?;
    let mut run = begin(&a.out, &a.common, r)?;

    let est = estimates
        .split(',')
        .map(|p| read_channel(p, 0))
        .collect::<Result<Vec<_>, _>>()?;
    let refs = references
        .split(',')
        .map(|p| read_channel(p, ref_channel))
        .collect::<Result<Vec<_>, _>>()?;
    if est.iter().chain(&refs).any(|(_, sr)| *sr != refs[0].1) {
        return Err(CliError::Data("estimates and references must share a sample rate".into()));
    }
    let est: Vec<Vec<f64>> = est.into_iter().map(|(s, _)| s).collect();
    let refs: Vec<Vec<f64>> = refs.into_iter().map(|(s, _)| s).collect();
    let report = bss_eval(&est, &refs, taps)?;
    let si: Vec<Option<f64>> = report
        .permutation
        .iter()
        .zip(&refs)
        .map(|(&e, reference)| si_sdr(&est[e], reference).ok())
        .collect();
    run.write_json("eval.json", &report)?;
    fs::write(run.path("eval.csv"), report.to_csv())?;
    let body = json!({
        "proj_taps": report.proj_taps,
        "permutation": report.permutation,
        "sources": report.sources,
        "mean_sdr": report.mean_sdr,
        "mean_sir": report.mean_sir,
        "mean_sar": report.mean_sar,
        "si_sdr": si,
    });
    run.finish("eval", body)
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Also write inspect.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let mut r = Resolver::load(a.common.config.as_deref())?;
    let path: String = r.required("model", a.model.clone())?;
    r.finish()?;
    let model = open_model(&path)?;
    let shapes: Vec<Value> = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| json!({ "name": n, "shape": p.shape() }))
        .collect();
    let stats: Vec<&str> = model.running_stats().map(|(n, _)| n).collect();
    let meta = json!({
        "arch": model.arch(),
        "info": model.info,
        "frame_len": 2 * (model.arch().freq_bins - 1),
        "num_parameters": model.num_parameters(),
        "parameters": shapes,
        "running_stats": stats,
    });
    let text = format!("{meta:#}\n");
    print!("{text}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("inspect.json"), text)?;
    }
    Ok(())
}
