use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use densecap::io::{read_json, DatasetManifest};
use densecap::pipeline::{run_pipeline, Mode, Run};
use densecap::synth::{gen_synthetic, Layout, SynthSpec};
use densecap::PipelineConfig;

/// Dense video captioning pipeline over manifest-described datasets.
#[derive(Debug, Parser)]
#[command(name = "densecap", version)]
struct Cli {
    /// Pipeline configuration (JSON); unspecified fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory that receives every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted events into the run directory.
    GenSynth(SynthArgs),
    /// Decode proposal maps into ranked proposals.
    Propose(ManifestArg),
    /// Train the matcher and pair paragraph sentences with proposals.
    Match(ManifestArg),
    /// Caption every proposal.
    Caption(ManifestArg),
    /// Score proposals, captions and retrieval against ground truth.
    Eval(ManifestArg),
    /// Distill teacher outputs into a student output per video.
    DistillDemo(ManifestArg),
}

#[derive(Debug, Args)]
struct ManifestArg {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    Tiled,
    Scattered,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Full generator spec (JSON); flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    /// Boundary bump width of the proposal maps (0 = one-hot).
    #[arg(long)]
    proposal_sharpness: Option<f64>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_synth(args: &SynthArgs, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    let mut spec: SynthSpec = match &args.spec {
        Some(p) => read_json(p).with_context(|| format!("loading synth spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    spec.videos = args.videos.unwrap_or(spec.videos);
    spec.length = args.length.unwrap_or(spec.length);
    spec.events_per_video = args.events.unwrap_or(spec.events_per_video);
    spec.proposal_sharpness = args.proposal_sharpness.unwrap_or(spec.proposal_sharpness);
    if let Some(l) = args.layout {
        spec.layout = match l {
            LayoutArg::Tiled => Layout::Tiled,
            LayoutArg::Scattered => Layout::Scattered,
        };
    }
    spec.seed = seed.unwrap_or(spec.seed);
    let data = gen_synthetic(&spec).map_err(|e| e.in_stage("gen-synth"))?;
    Ok(data.write(out).map_err(|e| e.in_stage("gen-synth"))?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, whatever the backtrace settings
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (mode, manifest) = match &cli.command {
        Command::GenSynth(args) => {
            let path = gen_synth(args, cli.seed, &cli.out)?;
            println!("{}", path.display());
            return Ok(());
        }
        Command::Propose(m) => (Mode::Propose, &m.manifest),
        Command::Match(m) => (Mode::TrainMatch, &m.manifest),
        Command::Caption(m) => (Mode::Caption, &m.manifest),
        Command::Eval(m) => (Mode::Eval, &m.manifest),
        Command::DistillDemo(m) => (Mode::DistillDemo, &m.manifest),
    };
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let (manifest, base) = DatasetManifest::load(manifest).map_err(|e| e.in_stage(mode.stage()))?;
    let run = Run {
        manifest: &manifest,
        base,
        cfg: &cfg,
        out: cli.out.clone(),
    };
    for path in run_pipeline(&run, mode)? {
        println!("{}", path.display());
    }
    Ok(())
}
