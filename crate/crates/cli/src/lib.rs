//! Command-line front end: synthesis, training, parameter counts, the oracle
//! suite and toy-corpus generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixtts_core::checkpoint::{load_checkpoint, save_checkpoint};
use mixtts_core::corpus::{make_toy_corpus, save_mel, DatasetManifest};
use mixtts_core::diagnostics::{count_parameters, plot_attention, plot_mel, verify_model};
use mixtts_core::synth::{sample_grid, synthesize, vocode, SynthesisRequest, SynthesisResult};
use mixtts_core::trainer::fit;
use mixtts_core::{ConfigFile, Error, Model32};

pub const VOCODER_ENV: &str = "MIXTTS_VOCODER";

#[derive(Parser, Debug)]
#[command(name = "mixtts", version, about = "Phoneme-to-mel synthesis with a flow post-net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a mel-spectrogram from phoneme text.
    Synth(SynthArgs),
    /// Synthesize every (temperature, seed) pair of a grid.
    Grid(GridArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Print per-module parameter counts of a config.
    CountParams(CountArgs),
    /// Run the numerical oracle suite on a checkpoint.
    Verify(VerifyArgs),
    /// Write a procedural toy corpus.
    MakeToy(ToyArgs),
    /// Run an external vocoder on a mel file.
    Vocode(VocodeArgs),
}

#[derive(Args, Debug)]
pub struct RequestArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Phonemes separated by spaces, words by `|`, e.g. "HH AH0 | L OW1".
    #[arg(long)]
    pub text: String,
    /// Post-net sampling temperature.
    #[arg(long, default_value_t = mixtts_core::synth::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Standard deviation of the prior latent draw.
    #[arg(long, default_value_t = mixtts_core::synth::DEFAULT_PRIOR_TEMPERATURE)]
    pub prior_temperature: f64,
    /// Fix a word's duration in frames, as WORD_INDEX=FRAMES. Repeatable.
    #[arg(long = "override-duration", value_parser = parse_override)]
    pub overrides: Vec<(usize, usize)>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub request: RequestArgs,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    #[arg(long, default_value = "out.mel1")]
    pub out: PathBuf,
    /// Also write the coarse mel next to `--out`.
    #[arg(long)]
    pub coarse: bool,
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub plot_attention: Option<PathBuf>,
    /// Shell command run with the mel path appended after writing it.
    #[arg(long)]
    pub vocoder: Option<String>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub request: RequestArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    pub temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1237,1239,3237")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write a PNG next to each mel.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Preset name (normal, small, toy, micro) or TOML path.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the configured number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print a loss line every N steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long, default_value = "normal")]
    pub config: String,
    /// Overrides the number of post-net sharing groups.
    #[arg(long)]
    pub shared_groups: Option<usize>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub max_words: usize,
}

#[derive(Args, Debug)]
pub struct VocodeArgs {
    #[arg(long)]
    pub mel: PathBuf,
    /// Shell command; falls back to the MIXTTS_VOCODER environment variable.
    #[arg(long)]
    pub vocoder: Option<String>,
}

fn parse_override(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, f) = s.split_once('=').ok_or_else(|| format!("expected WORD_INDEX=FRAMES, got {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad word index in {s:?}"))?;
    let f = f.trim().parse().map_err(|_| format!("bad frame count in {s:?}"))?;
    Ok((w, f))
}

fn load_model(path: &Path) -> Result<Model32> {
    let ck = load_checkpoint::<f32>(path, None).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model)
}

fn request(args: &RequestArgs, seed: u64) -> Result<SynthesisRequest> {
    let mut overrides = BTreeMap::new();
    for &(w, f) in &args.overrides {
        if overrides.insert(w, f).is_some() {
            bail!("word {w} has more than one duration override");
        }
    }
    Ok(SynthesisRequest {
        phoneme_text: args.text.clone(),
        seed,
        temperature: args.temperature,
        prior_temperature: args.prior_temperature,
        duration_overrides: overrides,
    })
}

/// Adds a hint when the input looks like orthographic text.
fn explain(e: Error, text: &str) -> anyhow::Error {
    if matches!(e, Error::UnknownPhoneme { .. }) && text.chars().any(|c| c.is_ascii_lowercase()) {
        anyhow::Error::new(e).context("input must be phonemes separated by spaces with `|` between words (run a g2p tool first)")
    } else {
        e.into()
    }
}

fn write_outputs(r: &SynthesisResult, out: &Path, plot: Option<&Path>) -> Result<()> {
    save_mel(&r.mel, out)?;
    if let Some(p) = plot {
        plot_mel(&r.mel.frames, p)?;
    }
    Ok(())
}

pub fn run_synth(a: &SynthArgs) -> Result<i32> {
    let model = load_model(&a.request.ckpt)?;
    let req = request(&a.request, a.seed)?;
    let r = synthesize(&model, &req).map_err(|e| explain(e, &req.phoneme_text))?;
    write_outputs(&r, &a.out, a.plot.as_deref())?;
    if a.coarse {
        save_mel(&r.coarse_mel, a.out.with_extension("coarse.mel1"))?;
    }
    if let Some(p) = &a.plot_attention {
        plot_attention(&r.attention, &r.word_ids, &r.frame_word_ids, p)?;
    }
    println!("wrote {} ({} frames, word durations {:?})", a.out.display(), r.mel.n_frames(), r.used_word_durations);
    match &a.vocoder {
        Some(cmd) => {
            let code = vocode(&a.out, Some(cmd))?;
            if code != 0 {
                eprintln!("vocoder exited with status {code}");
            }
            Ok(code)
        }
        None => Ok(0),
    }
}

pub fn run_grid(a: &GridArgs) -> Result<i32> {
    let model = load_model(&a.request.ckpt)?;
    let req = request(&a.request, 0)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let results = sample_grid(&model, &req, &a.temperatures, &a.seeds).map_err(|e| explain(e, &req.phoneme_text))?;
    for ((t, s), r) in &results {
        let out = a.out_dir.join(format!("T{t:.2}_S{s}.mel1"));
        let plot = a.plot.then(|| out.with_extension("png"));
        write_outputs(r, &out, plot.as_deref())?;
        println!("{}", out.display());
    }
    Ok(0)
}

pub fn run_train(a: &TrainArgs) -> Result<i32> {
    let cfg = ConfigFile::load(&a.config)?;
    let mut train = cfg.train.clone();
    if let Some(s) = a.steps {
        train.max_steps = s;
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    train.validate()?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let every = a.log_every.max(1);
    let trainer = fit::<f32>(&manifest, &cfg.model(), &train, Some(&a.out_dir), |step, lb| {
        if step % every == 0 {
            println!("step {step} {lb}");
        }
    })?;
    std::fs::write(a.out_dir.join("config.toml"), ConfigFile::from_parts(&cfg.model(), &train).to_toml())?;
    let path = a.out_dir.join("model.ckpt");
    save_checkpoint(&path, &trainer.model, Some(&trainer.opt), trainer.step)?;
    println!("wrote {}", path.display());
    Ok(0)
}

pub fn run_count(a: &CountArgs) -> Result<i32> {
    let mut model = ConfigFile::load(&a.config)?.model();
    if let Some(g) = a.shared_groups {
        model.post_net.shared_groups = g;
    }
    println!("{}", count_parameters(&model)?);
    Ok(0)
}

pub fn run_verify(a: &VerifyArgs) -> Result<i32> {
    let model = load_model(&a.ckpt)?;
    let report = verify_model(&model, a.seed);
    println!("{report}");
    Ok(if report.all_passed() { 0 } else { 1 })
}

pub fn run_make_toy(a: &ToyArgs) -> Result<i32> {
    if a.count == 0 || a.max_words == 0 {
        bail!("--count and --max-words must be positive");
    }
    make_toy_corpus(a.seed, a.count, a.max_words).write(&a.out)?;
    println!("wrote {} utterances to {}", a.count, a.out.join("manifest.tsv").display());
    Ok(0)
}

pub fn run_vocode(a: &VocodeArgs) -> Result<i32> {
    let env = std::env::var(VOCODER_ENV).ok();
    let cmd = a.vocoder.as_deref().or(env.as_deref());
    Ok(vocode(&a.mel, cmd)?)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Grid(a) => run_grid(a),
        Command::Train(a) => run_train(a),
        Command::CountParams(a) => run_count(a),
        Command::Verify(a) => run_verify(a),
        Command::MakeToy(a) => run_make_toy(a),
        Command::Vocode(a) => run_vocode(a),
    }
}
