use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;

use privneuron::pipeline::{Pipeline, PipelineConfig, Stage};

/// Cross-lingual PII leakage experiments on a small self-trained transformer.
#[derive(Debug, Parser)]
#[command(name = "privneuron", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the multilingual PII corpus and its split.
    GenCorpus(Common),
    /// Pretrain on every language.
    Pretrain(Common),
    /// Fine-tune on the memorized records of one language.
    Finetune(Common),
    /// Probe MRR before and after fine-tuning, with the shuffled-name control.
    Eval(Common),
    /// Layer-wise logit-lens traces for high-risk instances.
    TraceLens(Common),
    /// Cross-language hidden-state similarity per layer.
    TraceSim(Common),
    /// Integrated-gradient attribution over FFN neurons.
    Attribute(Common),
    /// Privacy neuron selection and the universal/specific partition.
    Select(Common),
    /// Evaluate every configured intervention strategy.
    Intervene(Common),
    /// Assemble report.json from the stage artifacts.
    Report(Common),
    /// Run every stage, or up to `--stage`.
    RunAll {
        #[command(flatten)]
        common: Common,
        /// Last stage to run.
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted config override such as `finetune.epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: privneuron::Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, until) = match &cli.command {
        Command::GenCorpus(c) => (c, Stage::GenCorpus),
        Command::Pretrain(c) => (c, Stage::Pretrain),
        Command::Finetune(c) => (c, Stage::Finetune),
        Command::Eval(c) => (c, Stage::Eval),
        Command::TraceLens(c) => (c, Stage::TraceLens),
        Command::TraceSim(c) => (c, Stage::TraceSim),
        Command::Attribute(c) => (c, Stage::Attribute),
        Command::Select(c) => (c, Stage::Select),
        Command::Intervene(c) => (c, Stage::Intervene),
        Command::Report(c) => (c, Stage::Report),
        Command::RunAll { common, stage } => (common, stage.unwrap_or(Stage::Report)),
    };
    let pipeline = Pipeline::new(common.config()?)?;
    let out = pipeline.out_dir().to_path_buf();
    let outcome = pipeline.run(until)?;
    for (stage, record) in &outcome.manifest.stages {
        let status = if outcome.executed.contains(stage) { "ran" } else { "reused" };
        println!("{stage:<11} {status:<6} {}", out.join(stage.name()).join(&record.key).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
