use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wormhole::config::RunConfig;
use wormhole::pipeline::{self, Layout, Workspace};
use wormhole::runtime::{Channel, Mode};

#[derive(Parser)]
#[command(
    name = "wormhole",
    version,
    about = "Latent multi-agent communication through the image-token span"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill one codec per configured agent.
    TrainCodec(Common),
    /// Fit the hub registry from trained codecs.
    Align(Common),
    /// Run one multi-agent episode and write its trace.
    RunMas {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ChannelArg::Wormhole)]
        channel: ChannelArg,
        /// Defaults to `runtime.mode` from the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compare the wormhole and text channels over seeded episodes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides the config's `run.output_dir`.
    #[arg(long, env = "WORMHOLE_OUT")]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Text,
    Wormhole,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Chained,
    Independent,
}

impl Common {
    fn load(&self) -> Result<(Workspace, Layout)> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        let root = self.out.clone().unwrap_or_else(|| cfg.output_dir().to_path_buf());
        Ok((Workspace::new(cfg)?, Layout::new(root)))
    }
}

fn train_codec(common: &Common) -> Result<()> {
    let (ws, layout) = common.load()?;
    let trained = ws.train_codecs()?;
    pipeline::save_training(&layout, &trained)?;
    for (id, (_, r)) in &trained {
        println!(
            "{id}: loss {:.4} -> {:.4}, boundary KL {:.5} -> {:.5}, {} steps, {}",
            r.initial_loss,
            r.final_loss,
            r.initial_kl,
            r.final_kl,
            r.steps.len(),
            layout.codec(id).display()
        );
    }
    Ok(())
}

fn align(common: &Common) -> Result<()> {
    let (ws, layout) = common.load()?;
    let codecs = pipeline::load_codecs(&layout, &ws)?;
    let outcome = ws.align(&codecs)?;
    pipeline::save_alignment(&layout, &outcome)?;
    println!(
        "reference {}, {} agents, {} parameters",
        outcome.registry.reference,
        outcome.registry.len(),
        outcome.param_count
    );
    for r in &outcome.residuals {
        println!("{}: out rms {:.3e}, in rms {:.3e}", r.agent, r.out_rms, r.in_rms);
    }
    println!("{}", layout.registry().display());
    Ok(())
}

fn run_mas(common: &Common, channel: ChannelArg, mode: Option<ModeArg>) -> Result<()> {
    let (ws, layout) = common.load()?;
    let codecs = pipeline::arc_codecs(pipeline::load_codecs(&layout, &ws)?);
    let registry = pipeline::load_registry(&layout)?;
    let agents = ws.agents(&codecs)?;
    let channel = match channel {
        ChannelArg::Text => Channel::Text,
        ChannelArg::Wormhole => Channel::Wormhole,
    };
    let mode = match mode {
        Some(ModeArg::Chained) => Mode::Chained,
        Some(ModeArg::Independent) => Mode::Independent,
        None => ws.config.runtime.mode,
    };
    let budget = ws.config.runtime.text_budget;
    let episode = ws.run_episode(&agents, &registry, channel, mode, &ws.task(), budget)?;
    let path = pipeline::save_trace(&layout, &episode)?;
    for r in &episode.trace.roles {
        println!(
            "{} {} ({}): {} steps, {} generated, payload {}",
            r.index, r.role, r.agent, r.backbone_steps, r.generated_tokens, r.payload_reals
        );
    }
    println!("answer {:?}", episode.answer);
    println!("{}", path.display());
    Ok(())
}

fn bench(common: &Common, workers: usize) -> Result<()> {
    let (ws, layout) = common.load()?;
    let codecs = pipeline::arc_codecs(pipeline::load_codecs(&layout, &ws)?);
    let registry = pipeline::load_registry(&layout)?;
    let result = ws.bench(&codecs, &registry, workers)?;
    pipeline::save_bench(&layout, &result)?;
    print!("{}", result.table());
    println!("{}", layout.bench_records().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::TrainCodec(c) => train_codec(c),
        Command::Align(c) => align(c),
        Command::RunMas { common, channel, mode } => run_mas(common, *channel, *mode),
        Command::Bench { common, workers } => bench(common, *workers),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
