mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use noisytune::expbench::{
    gen_downstream, pretrain, render_report, write_study, Bench, ScenarioSpec, StudyName,
};
use noisytune::perturb::{perturb_checkpoint_with, NoiseSpec};
use noisytune::rng::child_seed;
use noisytune::tensorstore::{load_checkpoint, save_checkpoint};
use noisytune::toymodel::params_to_checkpoint;
use noisytune::trainkit::{finetune, FinetuneMethod, TrainConfig};
use noisytune::{Error, ErrorKind, Execution, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "noisytune",
    version,
    about = "Perturb checkpoints before finetuning and run the toy NoisyTune studies"
)]
struct Cli {
    /// Config file (.toml or .json). Unset keys keep their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set downstream.delta=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed: noise seed for perturb, world seed for pretrain and study,
    /// downstream seed for finetune.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Noise intensity (default 0.15).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Worker threads; 1 runs sequentially. Defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Vanilla,
    Mixout,
    Recadam,
}

#[derive(Subcommand)]
enum Command {
    /// Add matrix-wise noise to a checkpoint.
    Perturb { input: PathBuf, output: PathBuf },
    /// Pretrain the scenario model with masked-token prediction.
    Pretrain {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Perturb (unless --lambda 0) and finetune a checkpoint on one seed's downstream task.
    Finetune {
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vanilla")]
        method: Method,
    },
    /// Run one study and write its tables into a run directory under OUT.
    Study {
        /// One of main, noise-types, combination, data-fraction, norm-tracking, lambda-sweep.
        name: String,
        /// Scenario file; same as --config.
        scenario: Option<PathBuf>,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        /// Use this pretrained checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the tables of a run directory.
    Report { run_dir: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Cli {
    fn execution(&self) -> Execution {
        self.jobs.map(Execution::from_jobs).unwrap_or_default()
    }

    fn scenario(&self, file: Option<&Path>, seed_key: &'static str) -> Result<ScenarioSpec> {
        let mut flags = Vec::new();
        if let Some(s) = self.seed {
            flags.push((seed_key, json!(s)));
        }
        if let Some(l) = self.lambda {
            flags.push(("noise.lambda", json!(l)));
        }
        let spec: ScenarioSpec = config::load(file.or(self.config.as_deref()), &self.sets, flags)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn cmd_perturb(cli: &Cli, input: &Path, output: &Path) -> Result<()> {
    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(("seed", json!(s)));
    }
    if let Some(l) = cli.lambda {
        flags.push(("lambda", json!(l)));
    }
    let spec: NoiseSpec = config::load(cli.config.as_deref(), &cli.sets, flags)?;
    spec.validate()?;
    let ckpt = load_checkpoint(input)?;
    let (out, report) = perturb_checkpoint_with(&ckpt, &spec, cli.execution())?;
    save_checkpoint(&out, output)?;
    write_json(&sibling(output, ".report.json"), &report)
}

fn cmd_pretrain(cli: &Cli, out: &Path) -> Result<()> {
    let spec = cli.scenario(None, "world_seed")?;
    let (ckpt, losses) = pretrain(&spec)?;
    save_checkpoint(&ckpt, out)?;
    write_json(
        &sibling(out, ".losses.json"),
        &json!({ "epoch_mean_loss": losses }),
    )
}

fn cmd_finetune(cli: &Cli, checkpoint: &Path, out: &Path, method: Method) -> Result<()> {
    // the downstream seed; the scenario's seed list is ignored here
    let seed = cli.seed.unwrap_or(0);
    let spec = ScenarioSpec {
        seeds: vec![seed],
        ..cli.scenario(None, "world_seed")?
    };
    let method = match method {
        Method::Vanilla => FinetuneMethod::Vanilla,
        Method::Mixout => spec.studies.mixout.clone(),
        Method::Recadam => spec.studies.recadam.clone(),
    };
    let pretrained = load_checkpoint(checkpoint)?;
    let data = gen_downstream(&spec, child_seed(seed, "downstream"))?;
    let noise = NoiseSpec {
        lambda: spec.noise.lambda,
        exclude: spec.noise.exclude.clone(),
        seed: child_seed(seed, "noise"),
        ..NoiseSpec::default()
    };
    let (start, report) = perturb_checkpoint_with(&pretrained, &noise, cli.execution())?;
    let config = TrainConfig {
        seed: child_seed(seed, "finetune"),
        ..spec.finetune.clone()
    };
    let (params, trajectory) = finetune(&start, &spec.model, &method, &data.train, &data.eval, &config)?;
    create_dir(out)?;
    save_checkpoint(&params_to_checkpoint(&params), out.join("finetuned.ntk"))?;
    write_json(&out.join("perturb.report.json"), &report)?;
    trajectory.write_files(&out.join("trajectory.json"), &out.join("trajectory.csv"))?;
    println!("final accuracy {:.4}", trajectory.final_accuracy);
    Ok(())
}

fn cmd_study(
    cli: &Cli,
    name: &str,
    scenario: Option<&Path>,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let study: StudyName = name.parse()?;
    let spec = cli.scenario(scenario, "world_seed")?;
    let exec = cli.execution();
    let bench = match checkpoint {
        Some(path) => Bench::with_checkpoint(spec, load_checkpoint(path)?, exec)?,
        None => Bench::new(spec, exec)?,
    };
    let report = bench.run_study(study)?;
    create_dir(out)?;
    let dir = write_study(out, bench.spec(), &report)?;
    println!("{}", dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Perturb { input, output } => cmd_perturb(cli, input, output),
        Command::Pretrain { out } => cmd_pretrain(cli, out),
        Command::Finetune {
            checkpoint,
            out,
            method,
        } => cmd_finetune(cli, checkpoint, out, *method),
        Command::Study {
            name,
            scenario,
            out,
            checkpoint,
        } => cmd_study(cli, name, scenario.as_deref(), out, checkpoint.as_deref()),
        Command::Report { run_dir } => {
            print!("{}", render_report(run_dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
