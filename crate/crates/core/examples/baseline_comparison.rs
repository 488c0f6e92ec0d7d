//! Graph-based federation against federated k-means on the same splits.

use fedgraph::data::{gen_moons, hungarian_accuracy, partition_clients};
use fedgraph::federation::{baseline_federated_kmeans, run_one_shot, FederationConfig};
use fedgraph::graph::PointSet;

fn main() -> fedgraph::Result<()> {
    let heterogeneity: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    for seed in 0..3 {
        let ds = gen_moons(1000, 0.06, seed)?;
        let plan = partition_clients(&ds, 2, heterogeneity, seed)?;
        let labels = ds.labels.as_ref().expect("generated data is labelled");
        let parts: Vec<PointSet> = plan.clients.iter().map(|c| ds.points.select(c)).collect::<Result<_, _>>()?;
        let truth: Vec<usize> = plan.clients.iter().flatten().map(|&i| labels[i]).collect();

        let cfg = FederationConfig { clusters: 2, epsilon: 1.0, seed, ..FederationConfig::default() };
        let graph_run = run_one_shot(&parts, &cfg, None)?;
        let pred: Vec<usize> = graph_run.client_labels.iter().flatten().copied().collect();
        let base = baseline_federated_kmeans(&parts, &cfg)?;
        println!(
            "seed {seed}: graph acc {:.4}, k-means acc {:.4}",
            hungarian_accuracy(&truth, &pred)?,
            hungarian_accuracy(&truth, &base.labels())?
        );
    }
    Ok(())
}
