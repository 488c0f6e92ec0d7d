use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgraph::experiment::{
    ablation_specs, bench, heterogeneity_specs, run_experiment, run_sweep, ExperimentSpec, SweepTable,
};
use fedgraph::{Error, Result};

/// Federated graph clustering experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat every spec in the config over consecutive seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline against each stage switched off.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the heterogeneity ratio.
    HetSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,0.95")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Message size and runtime against sample count.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A config file holds one spec or a list of specs.
fn load_specs(path: &Path) -> Result<Vec<ExperimentSpec>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let mut specs: Vec<ExperimentSpec> = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value)?,
        other => vec![serde_json::from_value(other)?],
    };
    for s in &mut specs {
        s.resolve_paths(path.parent().unwrap_or(Path::new("")));
        s.validate()?;
    }
    Ok(specs)
}

fn single_spec(path: &Path) -> Result<ExperimentSpec> {
    let mut specs = load_specs(path)?;
    if specs.len() != 1 {
        return Err(Error::Config(format!("expected one spec in {}, found {}", path.display(), specs.len())));
    }
    Ok(specs.remove(0))
}

fn finish_sweep(table: &SweepTable, out: Option<&Path>) -> Result<bool> {
    print!("{}", table.render());
    if let Some(dir) = out {
        table.write_to_dir(dir)?;
    }
    Ok(table.failure_count() == 0)
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { config, seed, out } => {
            let mut spec = single_spec(&config)?;
            if let Some(seed) = seed {
                spec = spec.with_seed(seed);
            }
            let report = run_experiment(&spec)?;
            match out {
                Some(dir) => {
                    let path = report.write_to_dir(&dir)?;
                    println!("{}", path.display());
                }
                None if spec.output.is_none() => println!("{}", report.to_json()?),
                None => {}
            }
            eprintln!(
                "acc {:?} nmi {:?} ari {:?} in {:.2}s",
                report.acc, report.nmi, report.ari, report.wall_clock_secs
            );
            Ok(true)
        }
        Command::Sweep { config, repeats, base_seed, out } => {
            let specs = load_specs(&config)?;
            finish_sweep(&run_sweep(&specs, repeats, base_seed)?, out.as_deref())
        }
        Command::Ablate { config, repeats, base_seed, out } => {
            let specs = ablation_specs(&single_spec(&config)?);
            finish_sweep(&run_sweep(&specs, repeats, base_seed)?, out.as_deref())
        }
        Command::HetSweep { config, ratios, repeats, base_seed, out } => {
            let specs = heterogeneity_specs(&single_spec(&config)?, &ratios);
            for s in &specs {
                s.validate()?;
            }
            finish_sweep(&run_sweep(&specs, repeats, base_seed)?, out.as_deref())
        }
        Command::Bench { sizes, clients, seed, out } => {
            let rows = bench(&sizes, clients, seed)?;
            println!("{:>8} {:>8} {:>12} {:>10} {:>10} {:>8}", "samples", "clients", "bytes/upload", "nonzeros", "bound", "secs");
            for r in &rows {
                println!(
                    "{:>8} {:>8} {:>12.0} {:>10} {:>10} {:>8.2}",
                    r.samples, r.clients, r.mean_upload_bytes, r.max_nonzeros, r.max_bound, r.wall_clock_secs
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
                let path = dir.join("bench.json");
                std::fs::write(&path, serde_json::to_string_pretty(&rows)?)
                    .map_err(|source| Error::Io { path, source })?;
            }
            Ok(rows.iter().all(|r| r.all_within_bound))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
