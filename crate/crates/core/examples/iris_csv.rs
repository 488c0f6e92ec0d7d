//! Runs a CSV-backed experiment spec and prints the versioned report.
//! The first argument sets epsilon (default 1, 0 disables noise).

use std::path::PathBuf;

use fedgraph::experiment::{run_experiment, ExperimentSpec};

fn main() -> fedgraph::Result<()> {
    let epsilon: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let json = serde_json::json!({
        "name": "iris",
        "dataset": { "kind": "csv", "path": "data/iris.csv", "label_column": "species", "standardize": false },
        "federation": { "num_clients": 2, "clusters": 3, "epsilon": epsilon }
    });
    let mut spec = ExperimentSpec::from_json(&json.to_string())?;
    spec.resolve_paths(&PathBuf::from(env!("CARGO_MANIFEST_DIR")));
    let report = run_experiment(&spec)?;
    println!("{}", report.to_json()?);
    Ok(())
}
