use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dacca::cli::{self, Ablation, AdaptArgs, EvalArgs, GenDataArgs, PretrainArgs};
use dacca::config::RunConfig;
use dacca::{Domain, Error, Result};

#[derive(Parser)]
#[command(name = "dacca", about = "Cross-domain lane segmentation with contrastive adaptation")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Write every label pixel as unlabeled.
        #[arg(long)]
        hide_labels: bool,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Source-only supervised training.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        /// Continue from a checkpoint written by an earlier pretrain.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adaptation to the target domain.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        /// Components to switch off: ccl, dfa, ubp (comma-separated) or none.
        #[arg(long, default_value = "none")]
        ablate: String,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Configuration utilities.
    Config {
        /// Print the effective configuration in canonical form.
        #[arg(long)]
        dump: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData {
            out,
            domain,
            count,
            seed,
            hide_labels,
            force,
        } => {
            let m = cli::cmd_gen_data(
                &cfg,
                &GenDataArgs {
                    out: &out,
                    domain,
                    count,
                    seed,
                    hide_labels,
                    force,
                },
            )?;
            println!("wrote {} {} scenes to {}", m.count, m.domain, out.display());
        }
        Command::Pretrain {
            source,
            out,
            iters,
            resume,
        } => {
            let r = cli::cmd_pretrain(
                &cfg,
                &PretrainArgs {
                    source: &source,
                    out: &out,
                    iters,
                    resume: resume.as_deref(),
                },
            )?;
            if let Some(last) = r.last() {
                println!("iter {} loss {:.6}", last.iter, last.total);
            }
            println!("checkpoint {}", out.display());
        }
        Command::Adapt {
            source,
            target,
            init,
            out,
            iters,
            ablate,
        } => {
            let r = cli::cmd_adapt(
                &cfg,
                &AdaptArgs {
                    source: &source,
                    target: &target,
                    init: &init,
                    out: &out,
                    iters,
                    ablation: Ablation::parse(&ablate)?,
                },
            )?;
            if let Some(last) = r.last() {
                println!("iter {} loss {:.6}", last.iter, last.total);
            }
            println!("checkpoint {}", out.display());
        }
        Command::Eval { ckpt, data, report, svg } => {
            let s = cli::cmd_eval(
                &cfg,
                &EvalArgs {
                    ckpt: &ckpt,
                    data: &data,
                    report: &report,
                    svg: svg.as_deref(),
                },
            )?;
            println!(
                "images {} accuracy {:.4} fp {:.4} fn {:.4} f1 {:.4}",
                s.images, s.accuracy, s.fp_rate, s.fn_rate, s.f1.f1
            );
        }
        Command::Config { dump } => {
            if dump {
                print!("{}", cfg.dump());
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
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
