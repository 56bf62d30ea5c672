use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use interdiff::body::BodyProxy;
use interdiff::config::Config;
use interdiff::corrector::{schedulers, write_report, CorrectionMode, CorrectorConfig};
use interdiff::data::io::{list_sequences, load_sequence, save_sequence, to_json};
use interdiff::data::synthetic::{generate_corpus, scenario_kinds};
use interdiff::data::Clip;
use interdiff::eval::{autoregressive_rollout, best_of, candidate_seed, evaluate, MetricsReport};
use interdiff::pipeline::{Correction, SampleRequest, Sampler};
use interdiff::predictor::{InteractionPredictor, StgnnModel};
use interdiff::training::{
    load_predictor, predictor_samples, save_predictor, train_denoiser, train_predictor, training_windows, DenoiserBundle,
};
use interdiff::types::Split;
use log::info;

#[derive(Parser)]
#[command(name = "interdiff", version, about = "Diffusion forecasting of human-object interactions with contact-anchored correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, one sequence file per clip.
    GenData(GenData),
    /// Train the interaction denoiser.
    TrainDiffusion(Train),
    /// Train the interaction predictor used by the correction step.
    TrainPredictor(Train),
    /// Sample futures for the past frames of a sequence file.
    Sample(Sample),
    /// Generate a long sequence by repeated sampling.
    Rollout(Rollout),
    /// Best-of-Many metrics of sampled files against ground truth.
    Eval(Eval),
    /// Convert a sequence file to JSON or CSV.
    Export(Export),
}

#[derive(Args)]
struct GenData {
    /// Scenario kinds, comma separated; clips cycle through them.
    #[arg(long, value_delimiter = ',', default_value = "carry")]
    scenario: Vec<String>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Packed binary files instead of JSON.
    #[arg(long)]
    binary: bool,
    /// Body definition and split come from here when given.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Correct {
    /// Predictor checkpoint; needed by --correct.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    correct: bool,
    /// Supplies corrector defaults and the body definition.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eps_penetration: Option<f64>,
    #[arg(long)]
    eps_contact: Option<f64>,
    #[arg(long)]
    late_fraction: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Registered correction scheduler (gated, always, never).
    #[arg(long)]
    scheduler: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mesh,
    Skeletal,
}

impl From<ModeArg> for CorrectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mesh => CorrectionMode::Mesh,
            ModeArg::Skeletal => CorrectionMode::Skeletal,
        }
    }
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    past: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    #[command(flatten)]
    correct: Correct,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Rollout {
    #[arg(long)]
    past: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    #[command(flatten)]
    correct: Correct,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    /// Sampled files named `<clip>.s<k>.json`, or `<clip>.json` for one candidate.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth files named `<clip>.json` / `<clip>.hoib`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "mesh")]
    mode: ModeArg,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Export {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn gen_data(a: &GenData) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let body = config.data.body()?;
    for kind in &a.scenario {
        scenario_kinds().get(kind)?;
    }
    let kinds: Vec<&str> = a.scenario.iter().map(String::as_str).collect();
    let clips = generate_corpus(&kinds, a.count, a.frames, config.data.split, a.seed, &body)?;
    fs::create_dir_all(&a.out)?;
    let ext = if a.binary { "hoib" } else { "json" };
    for (i, c) in clips.iter().enumerate() {
        save_sequence(&c.clip, a.out.join(format!("clip_{i:05}.{ext}")))?;
    }
    info!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn log_every(step: usize, total: usize) -> bool {
    step % 100 == 0 || step + 1 == total
}

fn train_diffusion(a: &Train) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let body = config.data.body()?;
    let clips = config.data.clips(&body)?;
    let windows = training_windows(&clips, config.data.split, config.train.window_stride, &body, config.canonical)?;
    info!("{} clips, {} training windows", clips.len(), windows.len());
    let steps = config.train.steps;
    let bundle = train_denoiser(&windows, config.model.clone(), &config.diffusion, &config.loss, &config.train, config.canonical, &mut |step, l| {
        if log_every(step, steps) {
            info!("step {step}: total {:.5} (h {:.5}, o {:.5}, vh {:.5}, vo {:.5})", l.total, l.human, l.object, l.human_velocity, l.object_velocity);
        }
    })?;
    bundle.save(&a.out)?;
    info!("denoiser with {} parameters saved to {}", bundle.net.parameter_count(), a.out.display());
    Ok(())
}

fn train_predictor_cmd(a: &Train) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let body = config.data.body()?;
    let clips = config.data.clips(&body)?;
    let train = config.predictor_train();
    let windows = training_windows(&clips, config.data.split, train.window_stride, &body, config.canonical)?;
    let pconfig = config.predictor_config();
    let samples = predictor_samples(&windows, &pconfig, &body)?;
    info!("{} clips, {} training windows", clips.len(), samples.len());
    let steps = train.steps;
    let model = train_predictor(&samples, pconfig, &config.predictor_weights(), &train, &body, &mut |step, l| {
        if log_every(step, steps) {
            info!("step {step}: total {:.5} (o {:.5}, vo {:.5}, c {:.5}, p {:.5})", l.total, l.object, l.object_velocity, l.contact, l.penetration);
        }
    })?;
    save_predictor(&model, config.canonical, &a.out)?;
    info!("predictor with {} parameters saved to {}", model.parameter_count(), a.out.display());
    Ok(())
}

fn corrector_config(c: &Correct, config: &Config) -> Result<(CorrectorConfig, String)> {
    let mut cfg = config.corrector.config();
    if let Some(v) = c.eps_penetration {
        cfg.eps_penetration = v;
    }
    if let Some(v) = c.eps_contact {
        cfg.eps_contact = v;
    }
    if let Some(v) = c.late_fraction {
        cfg.late_fraction = v;
    }
    if let Some(v) = c.stride {
        cfg.stride = v;
    }
    if let Some(m) = c.mode {
        cfg.mode = m.into();
    }
    cfg.validate()?;
    let scheduler = c.scheduler.clone().unwrap_or_else(|| config.corrector.scheduler.clone());
    schedulers().get(&scheduler)?;
    Ok((cfg, scheduler))
}

/// Loaded models behind a sampler.
struct Models {
    bundle: DenoiserBundle,
    predictor: Option<StgnnModel>,
    body: BodyProxy,
    corrector: CorrectorConfig,
    scheduler: String,
}

impl Models {
    fn load(denoiser: &Path, c: &Correct) -> Result<Self> {
        let config = load_config(c.config.as_deref())?;
        let bundle = DenoiserBundle::load(denoiser).with_context(|| format!("loading denoiser {}", denoiser.display()))?;
        let predictor = match (&c.predictor, c.correct) {
            (Some(p), true) => {
                let (model, canonical) = load_predictor(p).with_context(|| format!("loading predictor {}", p.display()))?;
                if canonical != bundle.canonical {
                    bail!("predictor and denoiser were trained in different canonical frames");
                }
                if model.split() != bundle.split {
                    bail!("predictor split {:?} differs from denoiser split {:?}", model.split(), bundle.split);
                }
                Some(model)
            }
            (None, true) => bail!("--correct needs --predictor"),
            (_, false) => None,
        };
        let (corrector, scheduler) = corrector_config(c, &config)?;
        Ok(Self {
            bundle,
            predictor,
            body: config.data.body()?,
            corrector,
            scheduler,
        })
    }

    fn with_sampler<T>(&self, f: impl FnOnce(&dyn Sampler) -> Result<T>) -> Result<T> {
        match &self.predictor {
            Some(model) => {
                let ip = InteractionPredictor { model, body: &self.body };
                let correction = Correction {
                    config: self.corrector,
                    scheduler: schedulers().get(&self.scheduler)?,
                    model: &ip,
                };
                f(&self.bundle.sampler(&self.body, Some(correction)))
            }
            None => f(&self.bundle.sampler(&self.body, None)),
        }
    }

    fn request(&self, path: &Path) -> Result<(Clip, SampleRequest)> {
        let clip = load_sequence(path)?;
        let h = self.bundle.split.past;
        if clip.seq.frames() < h {
            bail!("{} has {} frames, the denoiser needs {h} past frames", path.display(), clip.seq.frames());
        }
        let window = Split::new(h, clip.seq.frames() - h)?;
        let seq = clip.seq.window(0, window)?;
        let request = SampleRequest::from_clip(&Clip { seq, shape: clip.shape.clone() });
        Ok((clip, request))
    }
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn sample(a: &Sample) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    let models = Models::load(&a.denoiser, &a.correct)?;
    let (clip, request) = models.request(&a.past)?;
    fs::create_dir_all(&a.out)?;
    let name = stem(&a.past);
    models.with_sampler(|sampler| {
        for k in 0..a.n {
            let out = sampler
                .sample(std::slice::from_ref(&request), candidate_seed(a.seed, k))
                .with_context(|| format!("candidate {k}"))?;
            let seq = out.sequences.into_iter().next().context("sampler returned nothing")?;
            save_sequence(&Clip { seq, shape: clip.shape.clone() }, a.out.join(format!("{name}.s{k}.json")))?;
            if models.predictor.is_some() {
                let f = fs::File::create(a.out.join(format!("{name}.s{k}.corrections.jsonl")))?;
                write_report(&out.report, std::io::BufWriter::new(f))?;
            }
        }
        Ok(())
    })?;
    info!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn rollout(a: &Rollout) -> Result<()> {
    let models = Models::load(&a.denoiser, &a.correct)?;
    let (clip, request) = models.request(&a.past)?;
    let out = models.with_sampler(|sampler| Ok(autoregressive_rollout(sampler, std::slice::from_ref(&request), a.frames, a.seed)?))?;
    if let Some(seq) = out.sequences.into_iter().next() {
        save_sequence(&Clip { seq, shape: clip.shape }, &a.out)?;
    }
    match out.error {
        Some(e) => Err(anyhow::Error::new(e).context(format!("rollout stopped after {} of {} frames", out.frames, a.frames))),
        None => {
            info!("{} frames in {} rounds written to {}", out.frames, out.rounds, a.out.display());
            Ok(())
        }
    }
}

fn eval(a: &Eval) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let body = config.data.body()?;
    let mode: CorrectionMode = a.mode.into();
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for p in list_sequences(&a.pred)? {
        groups.entry(stem(&p)).or_default().push(p);
    }
    if groups.is_empty() {
        bail!("no sequence files in {}", a.pred.display());
    }
    let gt_files: BTreeMap<String, PathBuf> = list_sequences(&a.gt)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut per_clip = Vec::new();
    let mut best = Vec::new();
    for (name, files) in &groups {
        let gt_path = gt_files.get(name).with_context(|| format!("no ground truth for {name} in {}", a.gt.display()))?;
        let gt = load_sequence(gt_path)?;
        let mut candidates = Vec::new();
        for f in files {
            let pred = load_sequence(f)?;
            let window = gt.seq.window(0, pred.seq.split).with_context(|| format!("{} is longer than its ground truth", f.display()))?;
            let truth = Clip { seq: window, shape: gt.shape.clone() };
            candidates.push(vec![evaluate(&pred.seq, &truth, &body, mode).with_context(|| format!("evaluating {}", f.display()))?]);
        }
        let b = best_of(&candidates, candidates.len())?[0];
        per_clip.push(serde_json::json!({ "clip": name, "candidates": files.len(), "metrics": b }));
        best.push(b);
    }
    let mean = MetricsReport::mean(&best)?;
    let report = serde_json::json!({
        "metrics": mean,
        "clips": best.len(),
        "per_clip": per_clip,
        "config": {
            "pred": a.pred,
            "gt": a.gt,
            "mode": mode,
            "units": { "mpjpe_h": "mm", "mpjpe_o": "mm", "trans_err": "mm", "rot_err": "1e-3", "pene": "1e-2 %", "pene_fraction": "fraction" },
            "run": config,
        },
    });
    fs::write(&a.report, serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string_pretty(&mean)?);
    Ok(())
}

fn export(a: &Export) -> Result<()> {
    let clip = load_sequence(&a.seq)?;
    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    match a.format {
        Format::Json => sink.write_all(to_json(&clip)?.as_bytes())?,
        Format::Csv => {
            let seq = &clip.seq;
            let mut w = csv::Writer::from_writer(sink);
            let mut header = vec!["frame".to_string(), "phase".to_string()];
            for j in 0..seq.joint_count() {
                header.extend(["x", "y", "z"].map(|c| format!("j{j}_{c}")));
            }
            header.extend((0..6).map(|k| format!("rot6d_{k}")));
            header.extend(["tx", "ty", "tz"].map(String::from));
            w.write_record(&header)?;
            for (i, (h, o)) in seq.human.iter().zip(&seq.object).enumerate() {
                let phase = if i < seq.split.past { "past" } else { "future" };
                let mut row = vec![i.to_string(), phase.to_string()];
                row.extend(h.joints.iter().flat_map(|p| [p.x, p.y, p.z]).map(|v| v.to_string()));
                row.extend(o.features().iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
            return Ok(());
        }
    }
    sink.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDiffusion(a) => train_diffusion(a),
        Command::TrainPredictor(a) => train_predictor_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Rollout(a) => rollout(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
