use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crtcl::config::{DatasetSpec, ExperimentConfig};
use crtcl::run::{evaluate_checkpoint, run, train_once};
use crtcl::{service, Error, Result};
use crtcl_core::active::{Ablation, Selector};

#[derive(Debug, Parser)]
#[command(name = "crtcl", version, about = "Generator-critic training and critic-driven active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train once on the initial labeled pool and write a checkpoint.
    Train(Common),
    /// Run the active-learning cycles for every trial.
    ActiveLearn(Common),
    /// Run the active-learning cycles for one ablation.
    Ablate(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Serve the labeling API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<IpAddr>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectorArg {
    Critic,
    Random,
    Entropy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    Full,
    AuxLossOnly,
    SelectionOnly,
    Baseline,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// `synthetic`, `cifar10:<dir>` or `mnist:<dir>`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        if let Some(s) = self.selector {
            cfg.active.selector = match s {
                SelectorArg::Critic => Selector::Critic,
                SelectorArg::Random => Selector::Random,
                SelectorArg::Entropy => Selector::Entropy,
            };
        }
        if let Some(a) = self.ablation {
            cfg.active.ablation = match a {
                AblationArg::Full => Ablation::Full,
                AblationArg::AuxLossOnly => Ablation::AuxLossOnly,
                AblationArg::SelectionOnly => Ablation::SelectionOnly,
                AblationArg::Baseline => Ablation::Baseline,
            };
        }
        if let Some(flag) = &self.dataset {
            let spec = DatasetSpec::parse_flag(flag)?;
            if spec.kind() != cfg.dataset.kind() || !matches!(spec, DatasetSpec::Synthetic(_)) {
                cfg.dataset = spec;
            }
        }
        Ok(cfg)
    }
}

fn print_eval(accuracy: f64, ece: f64) {
    println!("test_acc {accuracy:.4}  ece {ece:.4}");
}

fn active_learn(cfg: &ExperimentConfig) -> Result<()> {
    let summary = run(cfg)?;
    for row in &summary.aggregate {
        println!(
            "cycle {}  n_labeled {}  test_acc {:.4} ± {:.4}  ece {:.4} ± {:.4}",
            row.cycle, row.n_labeled, row.test_acc_mean, row.test_acc_std, row.ece_mean, row.ece_std
        );
    }
    println!("results written to {}", summary.out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            let outcome = train_once(&cfg)?;
            print_eval(outcome.eval.accuracy, outcome.eval.ece);
            println!("checkpoint written to {}", cfg.out.join("checkpoint.json").display());
            Ok(())
        }
        Command::ActiveLearn(common) => active_learn(&common.config()?),
        Command::Ablate(common) => {
            if common.ablation.is_none() {
                return Err(Error::Config("ablate needs --ablation".into()));
            }
            let mut cfg = common.config()?;
            match cfg.active.ablation {
                Ablation::AuxLossOnly if cfg.active.selector != Selector::Random => {
                    eprintln!("note: aux_loss_only uses random selection");
                    cfg.active.selector = Selector::Random;
                }
                Ablation::Baseline if cfg.active.selector == Selector::Critic => {
                    return Err(Error::Config(
                        "baseline trains no critic; pass --selector random or --selector entropy".into(),
                    ));
                }
                _ => {}
            }
            active_learn(&cfg)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.config()?;
            let eval = evaluate_checkpoint(&cfg, &checkpoint)?;
            print_eval(eval.accuracy, eval.ece);
            Ok(())
        }
        Command::Serve { common, port, bind } => {
            let cfg = common.config()?;
            let ip: IpAddr = match bind {
                Some(ip) => ip,
                None => cfg
                    .service
                    .bind
                    .parse()
                    .map_err(|_| Error::Config(format!("service.bind: `{}` is not an IP address", cfg.service.bind)))?,
            };
            let addr = SocketAddr::new(ip, port.unwrap_or(cfg.service.port));
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            runtime.block_on(service::serve(cfg, addr))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', "; ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
