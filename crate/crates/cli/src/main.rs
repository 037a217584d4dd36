use std::path::PathBuf;
use std::process::ExitCode;

use bilevel_cli::config::{RunConfig, Task};
use bilevel_cli::{cmd_crossover, cmd_eval, cmd_restore, cmd_train_foe, cmd_train_tvdisc, CliError};
use bilevel_core::data::BlurPreset;
use bilevel_core::tvdisc::Symmetry;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilevel", version, about = "Bilevel learning of image restoration models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Learn Field-of-Experts weights and filters.
    TrainFoe,
    /// Learn TV discretization filters.
    TrainTvdisc,
    /// Restore images with learned models or presets.
    Restore,
    /// Mean PSNR of models on the train and test splits.
    Eval,
    /// PSNR matrix of models against tasks.
    Crossover,
}

#[derive(clap::Args)]
struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Handcrafted filters: starting point for train-tvdisc, extra model otherwise.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, value_parser = ["deblur", "sr"])]
    task: Option<String>,
    #[arg(long, global = true)]
    blur: Option<String>,
    /// Noise standard deviation.
    #[arg(long, global = true)]
    noise: Option<f64>,
    /// Number of filters.
    #[arg(long = "L", global = true)]
    filters: Option<usize>,
    #[arg(long, global = true)]
    symmetry: Option<String>,
    /// Model file or preset name; repeatable.
    #[arg(long = "model", global = true)]
    models: Vec<String>,
    /// Degraded PGM input; repeatable.
    #[arg(long = "input", global = true)]
    inputs: Vec<PathBuf>,
    /// Ground-truth PGM aligned with the inputs; repeatable.
    #[arg(long = "truth", global = true)]
    truths: Vec<PathBuf>,
    #[arg(long, global = true)]
    error_maps: bool,
}

fn build_config(cmd: &Command, f: &Flags) -> Result<RunConfig, CliError> {
    let mut cfg = match &f.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(o) = &f.out {
        cfg.out = o.clone();
    }
    if let Some(t) = &f.task {
        cfg.data.task = if t == "sr" { Task::Sr } else { Task::Deblur };
    }
    if let Some(b) = &f.blur {
        cfg.data.blur = BlurPreset::parse(b).map_err(CliError::config_err)?;
    }
    if let Some(n) = f.noise {
        cfg.data.noise = n;
    }
    if let Some(l) = f.filters {
        cfg.foe.filters = l;
        cfg.tvdisc.filters = l;
    }
    if let Some(s) = &f.symmetry {
        cfg.tvdisc.symmetry = Symmetry::parse(s).map_err(CliError::config_err)?;
    }
    if let Some(p) = &f.preset {
        match cmd {
            Command::TrainTvdisc => cfg.tvdisc.init_preset = Some(p.clone()),
            Command::Crossover => cfg.crossover.presets.push(p.clone()),
            _ => cfg.restore.models.push(p.clone()),
        }
    }
    match cmd {
        Command::Crossover => cfg.crossover.models.extend(f.models.iter().map(PathBuf::from)),
        _ => cfg.restore.models.extend(f.models.iter().cloned()),
    }
    cfg.restore.inputs.extend(f.inputs.iter().cloned());
    cfg.restore.ground_truth.extend(f.truths.iter().cloned());
    cfg.restore.error_maps |= f.error_maps;
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("BILEVEL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("BILEVEL_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = build_config(&cli.command, &cli.flags)?;
    match cli.command {
        Command::TrainFoe | Command::TrainTvdisc => {
            let r = if matches!(cli.command, Command::TrainFoe) {
                cmd_train_foe(&cfg)?
            } else {
                cmd_train_tvdisc(&cfg)?
            };
            println!(
                "model {}  loss {:.6e} -> {:.6e}  PSNR train {:.2} dB, test {:.2} dB",
                r.model_path.display(),
                r.loss_history.first().copied().unwrap_or(f64::NAN),
                r.loss_history.last().copied().unwrap_or(f64::NAN),
                r.train_psnr,
                r.test_psnr
            );
        }
        Command::Restore => {
            for r in cmd_restore(&cfg)? {
                match r.psnr {
                    Some(p) => println!("{} {} {:.2} dB", r.model, r.image, p),
                    None => println!("{} {}", r.model, r.image),
                }
            }
        }
        Command::Eval => {
            for r in cmd_eval(&cfg)? {
                println!("{} {} L={} {} {}: {:.2} dB", r.task, r.setting, r.l, r.symmetry, r.split, r.psnr_mean);
            }
        }
        Command::Crossover => {
            let m = cmd_crossover(&cfg)?;
            println!("{}", cfg.out.join("crossover.csv").display());
            for (name, row) in m.rows.iter().zip(&m.cells) {
                let cells: Vec<String> = row
                    .iter()
                    .map(|c| c.map(|p| format!("{p:.2}")).unwrap_or_else(|| "-".into()))
                    .collect();
                println!("{name}: {}", cells.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
