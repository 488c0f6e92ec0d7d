//! Learns one client's structural graph and inspects its rank diagnostics
//! and objective trace.

use fedgraph::data::gen_moons;
use fedgraph::graph::{connected_components, default_neighbors, learn_private_graph};

fn main() -> fedgraph::Result<()> {
    let ds = gen_moons(400, 0.06, 3)?;
    let k = default_neighbors(ds.points.rows(), 2);
    let learned = learn_private_graph(&ds.points, 2, k, 30)?;
    let parts = connected_components(&learned.graph);
    println!(
        "k {} components {} zero eigenvalues {} converged {} lambda {:.4}",
        learned.graph.row_capacity(),
        parts.cluster_count,
        learned.diagnostics.zero_count,
        learned.diagnostics.converged,
        learned.diagnostics.lambda
    );
    for (i, step) in learned.objective.iter().enumerate() {
        println!("iter {i:>2} lambda {:.4} after F {:.6} after S {:.6}", step.lambda, step.after_f_step, step.after_e_step);
    }
    Ok(())
}
