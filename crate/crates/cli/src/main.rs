//! `flowrl`: pretrain, fine-tune, evaluate and inspect flow-matching editing policies.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use flowrl::autodiff::checkpoint;
use flowrl::flow::task::{token_id, write_dataset, Instruction, Task};
use flowrl::focus::{attention_probe, probe_csv};
use flowrl::reward::remote::serve;
use flowrl::train::{
    evaluate, held_out, make_scorer, merge_curves, pretrain_run, read_metrics, train, training_data, Algo,
    RunConfig, Sampling, CONFIG_FILE, METRICS_FILE,
};

pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const DATASET_FILE: &str = "dataset.txt";

#[derive(Parser)]
#[command(name = "flowrl", version, about = "RL fine-tuning of a conditional flow-matching editor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file, in this order.
#[derive(clap::Args)]
struct Common {
    /// Flat-key TOML run config; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Grpo,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Sde,
    Ode,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining; writes pretrained.ckpt, config.toml and pretrain_loss.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Also dump the training set in the text dataset format.
        #[arg(long)]
        dump_dataset: bool,
    },
    /// RL fine-tuning from a pretrained checkpoint; writes metrics.csv, config.toml and final.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// `analytic` or `remote:HOST:PORT`.
        #[arg(long)]
        scorer: Option<String>,
        /// Record elapsed milliseconds in the wall_ms column.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Mean reward components on held-out instances, printed as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long, value_enum, default_value = "sde")]
        sampler: SamplerArg,
        #[arg(long)]
        scorer: Option<String>,
    },
    /// Per-layer focus position and attention summary for one instruction.
    ProbeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space-separated instruction words; defaults to code 0 of the configured task.
        #[arg(long)]
        instruction: Option<String>,
        /// Probe the plain attention stack instead of the relocating one.
        #[arg(long)]
        no_relocation: bool,
    },
    /// Line-delimited JSON scorer for the remote reward protocol.
    MockScorer {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Accepted for symmetry with the other commands; scoring is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "move-to-mode")]
        task: String,
    },
    /// Merge runs into one reward-versus-cost CSV. Each run is LABEL=DIR or DIR.
    ExportCurves {
        #[arg(required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_checkpoint(path: &Path) -> Result<flowrl::autodiff::ParameterStore> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, dump_dataset } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let dir = out_dir(&cfg)?;
            cfg.echo(&dir)?;
            let (store, report) = pretrain_run(&cfg)?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in report.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{e},{l}\n"));
            }
            fs::write(dir.join("pretrain_loss.csv"), csv)?;
            checkpoint::save(&store, &dir.join(PRETRAINED_FILE))?;
            if dump_dataset {
                let data = training_data(&cfg)?;
                write_dataset(&data, BufWriter::new(File::create(dir.join(DATASET_FILE))?))?;
            }
            eprintln!(
                "pretrained {} parameters; final epoch loss {:.5}",
                store.numel(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train {
            common,
            algo,
            checkpoint: ckpt,
            iterations,
            lr,
            k,
            scorer,
            wall_clock,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(s) = scorer {
                cfg.scorer = s;
            }
            cfg.wall_clock |= wall_clock;
            cfg.validate()?;
            let store = load_checkpoint(&ckpt)?;
            let algo = match algo {
                AlgoArg::Grpo => Algo::Grpo,
                AlgoArg::Dense => Algo::Dense,
            };
            let dir = out_dir(&cfg)?;
            cfg.echo(&dir)?;
            let mut scorer = make_scorer(&cfg)?;
            let mut sink = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
            let outcome = train(&cfg, algo, &store, scorer.as_mut(), Some(&mut sink))?;
            sink.flush()?;
            checkpoint::save(&outcome.store, &dir.join(FINAL_FILE))?;
            if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
                eprintln!(
                    "{} iterations: mean reward {:.4} -> {:.4}; {} skipped batches",
                    outcome.metrics.len(),
                    first.mean_reward,
                    last.mean_reward,
                    outcome.skipped
                );
            }
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            instances,
            sampler,
            scorer,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = instances {
                cfg.eval_instances = n;
            }
            if let Some(s) = scorer {
                cfg.scorer = s;
            }
            cfg.validate()?;
            let store = load_checkpoint(&ckpt)?;
            let model = cfg.model();
            flowrl::train::check_compatible(&model, &store)?;
            let inst = held_out(&cfg, cfg.eval_instances)?;
            let sampling = match sampler {
                SamplerArg::Sde => Sampling::Sde,
                SamplerArg::Ode => Sampling::Ode,
            };
            let mut scorer = make_scorer(&cfg)?;
            let report = evaluate(&model, &store, &cfg.sde()?, &inst, sampling, cfg.seed, scorer.as_mut())?;
            let json = report.to_json();
            println!("{json}");
            if common.out.is_some() {
                let dir = out_dir(&cfg)?;
                cfg.echo(&dir)?;
                fs::write(dir.join("eval.json"), format!("{json}\n"))?;
            }
        }
        Command::ProbeAttention {
            common,
            checkpoint: ckpt,
            instruction,
            no_relocation,
        } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let store = load_checkpoint(&ckpt)?;
            flowrl::train::check_compatible(&cfg.model(), &store)?;
            let tokens = match instruction {
                Some(text) => {
                    let ids = text.split_whitespace().map(token_id).collect::<Result<Vec<_>, _>>()?;
                    Instruction::from_tokens(&ids)?.tokens
                }
                None => Instruction::new(cfg.task()?, 0)?.tokens,
            };
            let rows = attention_probe(&cfg.model().encoder, &store, &tokens, cfg.relocation && !no_relocation)?;
            print!("{}", probe_csv(&rows));
        }
        Command::MockScorer { listen, seed, task } => {
            let task: Task = task.parse()?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            eprintln!(
                "mock scorer for {task} on {} (seed {})",
                listener.local_addr()?,
                seed.map_or_else(|| "unset".to_string(), |s| s.to_string())
            );
            serve(listener, task)?;
        }
        Command::ExportCurves { runs, out } => {
            let mut loaded = Vec::with_capacity(runs.len());
            for spec in &runs {
                let (label, dir) = match spec.split_once('=') {
                    Some((l, d)) => (l.to_string(), PathBuf::from(d)),
                    None => {
                        let d = PathBuf::from(spec);
                        let label = d
                            .file_name()
                            .map_or_else(|| spec.clone(), |n| n.to_string_lossy().into_owned());
                        (label, d)
                    }
                };
                let path = dir.join(METRICS_FILE);
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                if !dir.join(CONFIG_FILE).exists() {
                    bail!("{} has no {CONFIG_FILE}", dir.display());
                }
                loaded.push((label, read_metrics(&text)?));
            }
            let csv = merge_curves(&loaded);
            match out {
                Some(path) => fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
