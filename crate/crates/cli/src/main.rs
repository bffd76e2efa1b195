//! `hedgelab` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hedgelab::analysis::{self, alignment, hedging_degree, loss_curve};
use hedgelab::config::{ExperimentConfig, ExperimentKind};
use hedgelab::experiments::{self, build_sae, matryoshka_for};
use hedgelab::feature_model::sample_batch;
use hedgelab::io::checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint};
use hedgelab::io::stream::{StreamReader, StreamWriter};
use hedgelab::rng::{stream_rng, STREAM_CONTINUE, STREAM_DATA};
use hedgelab::trainer::{continue_train_pair, train, BatchSource, SyntheticSource};

#[derive(Parser)]
#[command(name = "hedgelab", version, about = "Feature hedging and absorption toy experiments for sparse autoencoders")]
struct Cli {
    /// Worker threads for seed-parallel runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a toy feature model into an activation stream file.
    GenStream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: u64,
    },
    /// Train one SAE from a config's [features]/[sae]/[train] sections.
    Train {
        #[command(flatten)]
        common: Common,
        /// Width to train (default: the first of sae.widths).
        #[arg(long)]
        width: Option<usize>,
        /// Train on this activation stream instead of the toy model.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Append new latents to a checkpoint.
    Extend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_new: usize,
        #[arg(long, default_value_t = 0.1)]
        init_norm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend a checkpoint and continue training it and the original on the same batches.
    ContinuePair {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_new: usize,
        #[arg(long)]
        samples: u64,
        #[arg(long, default_value_t = 0.1)]
        init_norm: f64,
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Sample offset into the stream.
        #[arg(long, default_value_t = 0)]
        offset: u64,
    },
    /// Alignment and classification of a checkpoint against a config's toy features.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Hedging degree of a base/extended checkpoint pair.
    HedgingDegree {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        extended: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form loss curve of a single tied latent between parent and child.
    LossCurve {
        #[arg(long)]
        p_alone: f64,
        #[arg(long)]
        p_both: f64,
        #[arg(long, default_value_t = 0.0)]
        l1: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation sweep from a correlation_sweep config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds (comma separated) overriding the config.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Run a config-driven experiment over all its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds (comma separated) overriding the config.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Print a checkpoint header.
    Inspect { checkpoint: PathBuf },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let (cfg, _) = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(cfg)
}

fn toy_source(cfg: &ExperimentConfig, seed: u64, stream: u64) -> Result<SyntheticSource> {
    let f = cfg.features.as_ref().context("config has no [features] section")?;
    Ok(SyntheticSource::new(f.basis(seed)?, f.firing()?, stream_rng(seed, stream))?)
}

fn run_experiment(config: &Path, out: Option<&Path>, seeds: Option<Vec<u64>>, expect: Option<ExperimentKind>) -> Result<ExitCode> {
    if let Some(kind) = expect {
        let cfg = load_config(config)?;
        if cfg.kind != kind {
            bail!("{} is a {} config, expected {}", config.display(), cfg.kind.name(), kind.name());
        }
    }
    let outcome = experiments::run_file(config, out, seeds);
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
    }
    if let Some(m) = &outcome.manifest {
        println!("{} finished in {:.1}s (complete: {})", m.name, m.wall_time_seconds, m.complete);
    }
    Ok(ExitCode::from(outcome.status as u8))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenStream { common, samples } => {
            let cfg = load_config(&common.config)?;
            let mut src = toy_source(&cfg, common.seed, STREAM_DATA)?;
            let mut w = StreamWriter::create(&common.out, src.basis.dims())?;
            let mut left = samples;
            while left > 0 {
                let n = left.min(4096) as usize;
                let batch = sample_batch(&src.basis, &src.firing, n, &mut src.rng)?;
                w.append(batch.x.view())?;
                left -= n as u64;
            }
            println!("wrote {} samples to {}", w.finish()?, common.out.display());
        }
        Command::Train { common, width, stream } => {
            let cfg = load_config(&common.config)?;
            let sae = cfg.sae.as_ref().context("config has no [sae] section")?;
            let tc = cfg.train.as_ref().context("config has no [train] section")?;
            let w = width.unwrap_or(sae.widths[0]);
            let (params, mut source): (_, Box<dyn BatchSource>) = match stream {
                Some(path) => {
                    let reader = StreamReader::open(&path)?;
                    (build_sae(sae, w, reader.dims(), matryoshka_for(sae, w), None, common.seed)?, Box::new(reader))
                }
                None => {
                    let src = toy_source(&cfg, common.seed, STREAM_DATA)?;
                    let p = build_sae(sae, w, src.basis.dims(), matryoshka_for(sae, w), Some(&src.basis), common.seed)?;
                    (p, Box::new(src))
                }
            };
            let (state, log) = train(source.as_mut(), tc, params)?;
            save_checkpoint(&Checkpoint::from_state(&state, tc.l1_coeff, common.seed, true), &common.out)?;
            let log_path = common.out.with_extension("log.csv");
            log.table().write(&log_path)?;
            println!("saved {} and {}", common.out.display(), log_path.display());
        }
        Command::Extend { checkpoint, n_new, init_norm, seed, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (l1, has_opt) = (ckpt.l1_coeff, ckpt.optimizer.is_some());
            let state = ckpt.into_state().extended(n_new, init_norm, seed);
            save_checkpoint(&Checkpoint::from_state(&state, l1, seed, has_opt), &out)?;
            println!("extended to {} latents: {}", state.params.width(), out.display());
        }
        Command::ContinuePair { common, checkpoint, n_new, samples, init_norm, stream, offset } => {
            let cfg = load_config(&common.config)?;
            let tc = cfg.train.as_ref().context("config has no [train] section")?;
            let state0 = load_checkpoint(&checkpoint)?.into_state();
            let mut source: Box<dyn BatchSource> = match stream {
                Some(path) => {
                    let mut r = StreamReader::open(&path)?;
                    r.seek(offset)?;
                    Box::new(r)
                }
                None => Box::new(toy_source(&cfg, common.seed, STREAM_CONTINUE)?),
            };
            let pair = continue_train_pair(&state0, n_new, init_norm, common.seed, tc, samples, source.as_mut())?;
            std::fs::create_dir_all(&common.out)?;
            for (tag, st, log) in
                [("base", &pair.base, &pair.base_log), ("extended", &pair.extended, &pair.extended_log)]
            {
                save_checkpoint(
                    &Checkpoint::from_state(st, tc.l1_coeff, common.seed, true),
                    &common.out.join(format!("{tag}.saec")),
                )?;
                log.table().write(&common.out.join(format!("{tag}_log.csv")))?;
            }
            println!("wrote base and extended checkpoints to {}", common.out.display());
        }
        Command::Analyze { common, checkpoint } => {
            let cfg = load_config(&common.config)?;
            let f = cfg.features.as_ref().context("config has no [features] section")?;
            let params = load_checkpoint(&checkpoint)?.params;
            let mut report = alignment(&params, &f.basis(common.seed)?)?;
            report.labels = analysis::classify(&report, cfg.thresholds());
            std::fs::create_dir_all(&common.out)?;
            report.cosine_table().write(&common.out.join("alignment.csv"))?;
            report.bias_table().write(&common.out.join("bias.csv"))?;
            std::fs::write(common.out.join("alignment.json"), serde_json::to_string_pretty(&report)?)?;
            for (i, l) in report.labels.iter().enumerate() {
                println!("latent {i}: {} (feature {:?})", l.name(), report.matching[i]);
            }
        }
        Command::HedgingDegree { base, extended, seed, draws, out } => {
            let b = load_checkpoint(&base)?.params;
            let e = load_checkpoint(&extended)?.params;
            if e.width() <= b.width() {
                bail!("extended SAE ({} latents) is not wider than base ({})", e.width(), b.width());
            }
            let report = hedging_degree(&b, &e, e.width() - b.width(), seed, draws)?;
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                report.table().write(&out.join("hedging.csv"))?;
                std::fs::write(out.join("hedging.json"), serde_json::to_string_pretty(&report)?)?;
            }
            println!("h = {}", hedgelab::io::fmt_float(report.h));
        }
        Command::LossCurve { p_alone, p_both, l1, steps, out } => {
            let curve = loss_curve::loss_curve(p_alone, p_both, l1, &loss_curve::unit_grid(steps.max(1)))?;
            loss_curve::curve_table(&curve).write(&out)?;
            let best = loss_curve::argmin(&curve).expect("non-empty grid");
            println!("argmin alpha = {} (loss {})", best.alpha, hedgelab::io::fmt_float(best.total));
        }
        Command::Sweep { config, out, seed } => {
            return run_experiment(&config, out.as_deref(), seed, Some(ExperimentKind::CorrelationSweep));
        }
        Command::Run { config, out, seed } => return run_experiment(&config, out.as_deref(), seed, None),
        Command::Inspect { checkpoint } => {
            let bytes = std::fs::read(&checkpoint)?;
            let header = read_header(&bytes)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
