//! Fits local Gaussian prototypes and releases them through the Laplace
//! mechanism.

use fedgraph::data::gen_moons;
use fedgraph::prototypes::{
    compute_sensitivities, fit_gmm, laplace_scale, l1_bound_scale, privatize_prototypes, smallest_cluster, NoiseSource,
};

fn main() -> fedgraph::Result<()> {
    let ds = gen_moons(500, 0.06, 2)?;
    let fit = fit_gmm(&ds.points, 2, 2)?;
    let n_min = smallest_cluster(&fit.assignment.labels, 2);
    let bounds = compute_sensitivities(n_min)?;
    let epsilon = 1.0;
    println!(
        "smallest cluster {n_min}: mean scale {:.5} covariance scale {:.5}",
        laplace_scale(bounds.delta_mu, epsilon),
        laplace_scale(bounds.delta_sigma, epsilon)
    );

    let bounded = l1_bound_scale(&ds.points, 1.0)?;
    let clean = fedgraph::prototypes::prototypes_from_labels(&bounded, &fit.assignment.labels, 2, 0)?;
    let mut noise = NoiseSource::new(7);
    let released = privatize_prototypes(&clean, &bounds, epsilon, &mut noise)?;
    for (a, b) in clean.prototypes.iter().zip(&released.prototypes) {
        println!("mean {:?} -> {:?}", a.mean, b.mean);
    }
    println!("noise draws {}", noise.draws());
    Ok(())
}
