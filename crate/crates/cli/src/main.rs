use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use med2n::gate::Domain;
use med2n::runtime::artifacts::gate_stats_table;
use med2n::runtime::{
    cmd_activation_dump, cmd_eval, cmd_gate_stats, cmd_gen_data, cmd_pretrain, cmd_train_mbase,
    cmd_train_student, cmd_train_teacher, ActivationInput, EvalSelection, RunConfig,
};
use med2n::Result;

#[derive(Parser)]
#[command(name = "med2n", version, about = "Cross-domain few-shot learning with domain-decomposed students")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (sets train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (sets paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one configuration key, e.g. `train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterDomain {
    Source,
    Target,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pre-training of the shared backbone on the source classes.
    Pretrain,
    /// Episodic training of one domain teacher.
    TrainTeacher {
        #[arg(long, value_enum)]
        domain: DomainArg,
    },
    /// Distils both teachers into the student.
    TrainStudent,
    /// Episodic training on the merged source and auxiliary target data.
    TrainMbase,
    /// Few-shot evaluation on the novel target classes and held-out source classes.
    Eval {
        #[arg(long, default_value = "all", value_parser = ["std", "dsg", "both", "all"])]
        strategy: String,
        /// Evaluate this checkpoint instead of the student.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-block filter counts of the student's gate.
    GateStats,
    /// Activation maps of source- and target-assigned filters for one image.
    ActivationDump {
        /// Benchmark split to take the image from.
        #[arg(long, default_value = "target_test", conflicts_with = "image")]
        split: String,
        #[arg(long, default_value_t = 0, conflicts_with = "image")]
        index: usize,
        /// A binary PPM image instead of a benchmark sample.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        domain: FilterDomain,
    },
    /// Exports the synthetic benchmark.
    GenData,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(out) = &common.out {
        let quoted = toml::Value::String(out.to_string_lossy().into_owned());
        overrides.push(format!("paths.out_dir={quoted}"));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Pretrain => println!("{}", cmd_pretrain(&cfg)?.display()),
        Command::TrainTeacher { domain } => println!("{}", cmd_train_teacher(&cfg, domain.into())?.display()),
        Command::TrainStudent => println!("{}", cmd_train_student(&cfg)?.display()),
        Command::TrainMbase => println!("{}", cmd_train_mbase(&cfg)?.display()),
        Command::Eval { strategy, checkpoint } => {
            let selection: EvalSelection = strategy.parse()?;
            let doc = cmd_eval(&cfg, selection, checkpoint.as_deref())?;
            for r in &doc.reports {
                println!(
                    "{:<12} {:<5} {:.2} +- {:.2}  ({} episodes)",
                    r.split, r.strategy.name(), r.mean, r.ci95, r.episodes
                );
            }
        }
        Command::GateStats => print!("{}", gate_stats_table(&cmd_gate_stats(&cfg)?)),
        Command::ActivationDump { split, index, image, domain } => {
            let input = match image {
                Some(p) => ActivationInput::Image(p),
                None => ActivationInput::Synthetic { split, index },
            };
            let domains: &[Domain] = match domain {
                FilterDomain::Source => &[Domain::Source],
                FilterDomain::Target => &[Domain::Target],
                FilterDomain::Both => &[Domain::Source, Domain::Target],
            };
            for r in cmd_activation_dump(&cfg, &input, domains)? {
                println!("{} block {} filter {} -> {}", r.domain.name(), r.block, r.filter, r.pgm);
            }
        }
        Command::GenData => println!("{}", cmd_gen_data(&cfg)?.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    med2n::runtime::retain_freed_memory();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
