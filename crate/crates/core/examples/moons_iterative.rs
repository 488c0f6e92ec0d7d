//! Iterative mode: clients train a linear embedder and re-upload for five
//! rounds, guided by the server's global prototypes.

use fedgraph::data::{gen_moons, partition_clients};
use fedgraph::embedder::EmbedderConfig;
use fedgraph::federation::{run_iterative, FederationConfig};
use fedgraph::graph::PointSet;

fn main() -> fedgraph::Result<()> {
    let ds = gen_moons(1000, 0.06, 1)?;
    let plan = partition_clients(&ds, 2, 0.0, 1)?;
    let labels = ds.labels.as_ref().expect("generated data is labelled");
    let parts: Vec<PointSet> = plan.clients.iter().map(|c| ds.points.select(c)).collect::<Result<_, _>>()?;
    let truth: Vec<Vec<usize>> = plan.clients.iter().map(|c| c.iter().map(|&i| labels[i]).collect()).collect();

    let cfg = FederationConfig {
        clusters: 2,
        epsilon: 1.0,
        rounds: 5,
        embedder: EmbedderConfig::linear_dec(),
        seed: 1,
        ..FederationConfig::default()
    };
    let run = run_iterative(&parts, &cfg, Some(&truth))?;
    for t in &run.trace {
        println!(
            "round {} acc {:.4} nmi {:.4} upload bytes {} alignment {:?}",
            t.round,
            t.acc.unwrap(),
            t.nmi.unwrap(),
            t.upload_bytes,
            t.alignment
        );
    }
    println!("epsilon spent per client {:.1}", run.epsilon_spent);
    Ok(())
}
