//! Sweeps the ablation arms over a few seeds and prints the summary table.

use fedgraph::experiment::{ablation_specs, run_sweep, ExperimentSpec};

fn main() -> fedgraph::Result<()> {
    let repeats: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let base = ExperimentSpec::from_json(
        r#"{
            "name": "moons",
            "dataset": { "kind": "moons", "n": 600, "noise_sigma": 0.06 },
            "federation": { "num_clients": 2, "clusters": 2, "epsilon": 1.0 }
        }"#,
    )?;
    let table = run_sweep(&ablation_specs(&base), repeats, 0)?;
    print!("{}", table.render());
    Ok(())
}
