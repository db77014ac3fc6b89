use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lgc::infoplane::BitDepth;
use lgc::trainer::{CompressorKind, PatternKind};
use lgc_cli::commands::{bench_table, describe, InfoplaneOptions};
use lgc_cli::{bench_codec, cmd_train, infoplane_from_dump, parse_config, read_dump, selfcheck, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "lgc", version, about = "Learned gradient compression simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics, ledgers, the resolved config and a summary.
    Train(RunArgs),
    /// Per-layer entropy and mutual information between two nodes' gradients.
    Infoplane(InfoArgs),
    /// Pack/unpack round trips and timings for every payload kind.
    BenchCodec {
        #[arg(long, default_value_t = 200)]
        payloads: usize,
        #[arg(long, default_value_t = 10_000)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient checks and protocol properties.
    Selfcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Ps,
    Ring,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompressorArg {
    None,
    SparseGd,
    Dgc,
    Lgc,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pattern: Option<PatternArg>,
    #[arg(long, value_enum)]
    compressor: Option<CompressorArg>,
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Args)]
struct InfoArgs {
    /// Gradient dump written by `train`; without it the config is trained first.
    #[arg(long, conflicts_with = "config")]
    dump: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    /// Fixed quantizer depth instead of the per-layer adaptive one.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long, default_value_t = 0)]
    node_a: usize,
    #[arg(long, default_value_t = 1)]
    node_b: usize,
    /// Also write whitespace-separated columns for gnuplot.
    #[arg(long)]
    gnuplot: bool,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            pattern: self.pattern.map(|p| match p {
                PatternArg::Ps => PatternKind::Ps,
                PatternArg::Ring => PatternKind::Ring,
            }),
            compressor: self.compressor.map(|c| match c {
                CompressorArg::None => CompressorKind::None,
                CompressorArg::SparseGd => CompressorKind::SparseGd,
                CompressorArg::Dgc => CompressorKind::Dgc,
                CompressorArg::Lgc => CompressorKind::Lgc,
            }),
            nodes: self.nodes,
        });
        let v = cfg.violations();
        if !v.is_empty() {
            anyhow::bail!("invalid config after overrides:\n  {}", v.join("\n  "));
        }
        Ok(cfg)
    }
}

fn train(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.load()?;
    println!("{}", describe(&cfg));
    let report = cmd_train(&cfg)?;
    println!("{}", report.line);
    if let Some(r) = &report.infoplane {
        println!("{}", r.line());
    }
    println!("wrote {} files to {}", report.files.len(), cfg.output.dir.display());
    Ok(())
}

fn infoplane(args: &InfoArgs) -> anyhow::Result<()> {
    let (dump, mut opts, dir) = match &args.dump {
        Some(path) => {
            let dir = args.run.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let opts = InfoplaneOptions::from_config(&ExperimentConfig::default());
            (read_dump(path)?, opts, dir)
        }
        None => {
            let mut cfg = args.run.load()?;
            cfg.train.record_gradients = true;
            let report = cmd_train(&cfg)?;
            println!("{}", report.line);
            let dump = report.output.gradients.context("training produced no gradient dump")?;
            (dump, InfoplaneOptions::from_config(&cfg), cfg.output.dir.clone())
        }
    };
    if let Some(b) = args.bits {
        opts.depth = BitDepth::Fixed(b);
    }
    opts.node_a = args.node_a;
    opts.node_b = args.node_b;
    opts.gnuplot = args.gnuplot;
    let report = infoplane_from_dump(&dump, &opts, &dir)?;
    for l in &report.summary.layers {
        println!(
            "layer {} H {:.4} H|X {:.4} MI {:.4} MI/H {:.4}",
            l.layer, l.h_marginal, l.h_conditional, l.mi, l.mi_over_h
        );
    }
    println!("{}", report.line());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Infoplane(a) => infoplane(a),
        Command::BenchCodec { payloads, max_len, seed } => bench_codec(*payloads, *max_len, *seed).and_then(|rows| {
            print!("{}", bench_table(&rows));
            let bad: usize = rows.iter().map(|r| r.mismatches).sum();
            anyhow::ensure!(bad == 0, "{bad} payloads did not round-trip");
            Ok(())
        }),
        Command::Selfcheck => {
            let checks = selfcheck::selfcheck();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed == 0 {
                Ok(())
            } else {
                Err(anyhow::anyhow!("{failed} check(s) failed"))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
