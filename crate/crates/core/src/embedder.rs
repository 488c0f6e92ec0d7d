//! Per-client representation learning: identity pass-through or a linear
//! autoencoder fine-tuned with a DEC clustering loss.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PointSet;
use crate::kmeans::kmeans;
use crate::prototypes::PrototypeSet;

const MAX_RESTARTS: usize = 3;
const INIT_KMEANS_RESTARTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Identity,
    LinearDec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Latent size; `0` means "same as the input dimension".
    pub latent_dim: usize,
    pub lambda_dec: f64,
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Identity,
            latent_dim: 0,
            lambda_dec: 0.1,
            epochs: 200,
            step_size: 1e-2,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn linear_dec() -> Self {
        Self {
            kind: EmbedderKind::LinearDec,
            ..Self::default()
        }
    }

    pub fn resolved_latent_dim(&self, d: usize) -> usize {
        if self.latent_dim == 0 {
            d
        } else {
            self.latent_dim
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let latent = self.resolved_latent_dim(d);
        if self.kind == EmbedderKind::Identity && latent != d {
            return Err(Error::invalid(format!(
                "identity embedder needs latent_dim = {d}, got {latent}"
            )));
        }
        if !(self.lambda_dec >= 0.0 && self.lambda_dec.is_finite()) {
            return Err(Error::invalid(format!("lambda_dec must be >= 0, got {}", self.lambda_dec)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step_size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// Embeddings of one client's samples plus the configuration that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub embeddings: PointSet,
    pub config: EmbedderConfig,
    /// Total loss before each epoch's update, then once after the last.
    pub loss_trace: Vec<f64>,
    pub restarts: usize,
}

/// Student-t (one degree of freedom) soft assignment of `z` to `centers`.
pub fn dec_soft_assign(z: &[f64], centers: &[Vec<f64>]) -> Vec<f64> {
    let kernel: Vec<f64> = centers
        .iter()
        .map(|m| 1.0 / (1.0 + crate::graph::sq_dist(z, m)))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.into_iter().map(|k| k / total).collect()
}

/// Sharpened target `p_ij ∝ q_ij^2 / f_j`, `f_j = Σ_i q_ij`. Columns with zero
/// frequency contribute nothing.
pub fn dec_target_dist(q: &DMatrix<f64>) -> DMatrix<f64> {
    let freq: Vec<f64> = q.column_iter().map(|c| c.sum()).collect();
    let mut p = DMatrix::zeros(q.nrows(), q.ncols());
    for i in 0..q.nrows() {
        let mut total = 0.0;
        for j in 0..q.ncols() {
            if freq[j] > 0.0 {
                p[(i, j)] = q[(i, j)] * q[(i, j)] / freq[j];
                total += p[(i, j)];
            }
        }
        if total > 0.0 {
            for j in 0..q.ncols() {
                p[(i, j)] /= total;
            }
        }
    }
    p
}

/// Linear encoder `z = W x` and decoder `x̂ = V z` without biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAutoencoder {
    /// `latent × d`.
    pub encoder: DMatrix<f64>,
    /// `d × latent`.
    pub decoder: DMatrix<f64>,
}

/// Loss value and gradients of one full-batch evaluation.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub reconstruction: f64,
    pub clustering: f64,
    pub total: f64,
    pub grad_encoder: DMatrix<f64>,
    pub grad_decoder: DMatrix<f64>,
}

impl LinearAutoencoder {
    /// Orthonormal random encoder rows (when `latent <= d`) with the decoder
    /// set to its transpose.
    pub fn init(d: usize, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(d, latent, |_, _| StandardNormal.sample(&mut rng));
        let encoder = if latent <= d {
            g.qr().q().transpose()
        } else {
            g.transpose() / (d as f64).sqrt()
        };
        let decoder = encoder.transpose();
        Self { encoder, decoder }
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.encoder.transpose()
    }

    /// `||X - Z Vᵀ||² / N + λ KL(P‖Q) / N` with `P` held fixed, and its
    /// gradients with respect to both weight matrices.
    pub fn loss(
        &self,
        x: &DMatrix<f64>,
        centers: &[Vec<f64>],
        target: Option<&DMatrix<f64>>,
        lambda: f64,
    ) -> LossEval {
        let n = x.nrows() as f64;
        let z = self.encode(x);
        let resid = x - &z * self.decoder.transpose();
        let reconstruction = resid.norm_squared() / n;
        let grad_decoder = resid.transpose() * &z * (-2.0 / n);
        let mut grad_z = &resid * &self.decoder * (-2.0 / n);
        let mut clustering = 0.0;
        if let Some(p) = target.filter(|_| lambda > 0.0 && !centers.is_empty()) {
            for i in 0..z.nrows() {
                let zi: Vec<f64> = z.row(i).iter().copied().collect();
                let kernel: Vec<f64> = centers
                    .iter()
                    .map(|m| 1.0 / (1.0 + crate::graph::sq_dist(&zi, m)))
                    .collect();
                let total: f64 = kernel.iter().sum();
                for (j, m) in centers.iter().enumerate() {
                    let q = kernel[j] / total;
                    let pij = p[(i, j)];
                    if pij > 0.0 {
                        clustering += pij * (pij / q).ln();
                    }
                    let coef = 2.0 * lambda / n * kernel[j] * (pij - q);
                    for a in 0..zi.len() {
                        grad_z[(i, a)] += coef * (zi[a] - m[a]);
                    }
                }
            }
            clustering /= n;
        }
        let grad_encoder = grad_z.transpose() * x;
        LossEval {
            reconstruction,
            clustering,
            total: reconstruction + lambda * clustering,
            grad_encoder,
            grad_decoder,
        }
    }

    fn soft_assignments(&self, z: &DMatrix<f64>, centers: &[Vec<f64>]) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(z.nrows(), centers.len());
        for i in 0..z.nrows() {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            for (j, v) in dec_soft_assign(&zi, centers).into_iter().enumerate() {
                q[(i, j)] = v;
            }
        }
        q
    }
}

/// Stateful embedder for one client; weights persist across rounds.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbedderConfig,
    model: Option<LinearAutoencoder>,
    step_size: f64,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Self {
        let step_size = config.step_size;
        Self {
            config,
            model: None,
            step_size,
        }
    }

    pub fn model(&self) -> Option<&LinearAutoencoder> {
        self.model.as_ref()
    }

    /// Embeds without training (initialising the weights on first use).
    pub fn embed(&mut self, data: &PointSet) -> Result<PointSet> {
        self.config.validate(data.dim())?;
        match self.config.kind {
            EmbedderKind::Identity => Ok(data.clone()),
            EmbedderKind::LinearDec => {
                let model = self.ensure_model(data.dim());
                PointSet::from_matrix(&model.encode(&data.to_matrix()))
            }
        }
    }

    fn ensure_model(&mut self, d: usize) -> &LinearAutoencoder {
        let latent = self.config.resolved_latent_dim(d);
        let seed = self.config.seed;
        self.model.get_or_insert_with(|| LinearAutoencoder::init(d, latent, seed))
    }

    /// Runs `epochs` full-batch gradient steps. Centers come from
    /// `global_protos` (latent-space means) or, without them, from k-means on
    /// the current embeddings.
    pub fn train(&mut self, data: &PointSet, global_protos: Option<&PrototypeSet>) -> Result<LatentSet> {
        self.config.validate(data.dim())?;
        if data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedder input has non-finite entries"));
        }
        if self.config.kind == EmbedderKind::Identity {
            return Ok(LatentSet {
                embeddings: data.clone(),
                config: self.config.clone(),
                loss_trace: Vec::new(),
                restarts: 0,
            });
        }
        let x = data.to_matrix();
        let start = self.ensure_model(data.dim()).clone();
        let latent = start.encoder.nrows();
        let centers = match global_protos {
            Some(p) if !p.is_empty() => {
                if p.dim != latent {
                    return Err(Error::invalid(format!(
                        "global prototypes have dim {} but latent dim is {latent}",
                        p.dim
                    )));
                }
                p.prototypes.iter().map(|p| p.mean.clone()).collect()
            }
            _ => {
                let c = global_protos.map_or(0, |p| p.len()).max(1);
                let z = PointSet::from_matrix(&start.encode(&x))?;
                let c = c.min(z.rows());
                kmeans(&z, c, INIT_KMEANS_RESTARTS, self.config.seed)?.centers
            }
        };
        let mut restarts = 0;
        loop {
            match descend(&start, &x, &centers, &self.config, self.step_size) {
                Some((model, trace)) => {
                    let z = model.encode(&x);
                    self.model = Some(model);
                    return Ok(LatentSet {
                        embeddings: PointSet::from_matrix(&z)?,
                        config: self.config.clone(),
                        loss_trace: trace,
                        restarts,
                    });
                }
                None if restarts < MAX_RESTARTS => {
                    restarts += 1;
                    self.step_size /= 2.0;
                    log::warn!("embedder diverged; restarting with step {}", self.step_size);
                }
                None => {
                    return Err(Error::numeric(format!(
                        "embedder diverged after {MAX_RESTARTS} step-size halvings"
                    )))
                }
            }
        }
    }
}

/// Gradient descent from `start`; `None` on a non-finite loss.
fn descend(
    start: &LinearAutoencoder,
    x: &DMatrix<f64>,
    centers: &[Vec<f64>],
    cfg: &EmbedderConfig,
    step: f64,
) -> Option<(LinearAutoencoder, Vec<f64>)> {
    let mut model = start.clone();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let z = model.encode(x);
        let target = (cfg.lambda_dec > 0.0).then(|| dec_target_dist(&model.soft_assignments(&z, centers)));
        let eval = model.loss(x, centers, target.as_ref(), cfg.lambda_dec);
        if !eval.total.is_finite() {
            return None;
        }
        trace.push(eval.total);
        if epoch == cfg.epochs {
            break;
        }
        model.encoder -= eval.grad_encoder * step;
        model.decoder -= eval.grad_decoder * step;
        if model.encoder.iter().chain(model.decoder.iter()).any(|v| !v.is_finite()) {
            return None;
        }
    }
    Some((model, trace))
}

/// One-off training with a fresh embedder.
pub fn train_embedder(
    data: &PointSet,
    global_protos: Option<&PrototypeSet>,
    cfg: &EmbedderConfig,
) -> Result<LatentSet> {
    Embedder::new(cfg.clone()).train(data, global_protos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::prototypes_from_labels;
    use rand::Rng;

    fn rows_on_simplex(m: &DMatrix<f64>) -> bool {
        m.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9 && r.iter().all(|&v| v >= 0.0))
    }

    #[test]
    fn soft_assign_examples() {
        let q = dec_soft_assign(&[0.0, 0.0], &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
        let q = dec_soft_assign(&[0.0], &[vec![0.0], vec![1.0]]);
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15 && (q[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dec_soft_assign(&[3.0, 4.0], &[vec![0.0, 0.0]]), vec![1.0]);
    }

    #[test]
    fn target_examples() {
        let p = dec_target_dist(&DMatrix::from_row_slice(1, 2, &[0.9, 0.1]));
        assert!((p[(0, 0)] - 0.9).abs() < 1e-12 && (p[(0, 1)] - 0.1).abs() < 1e-12);
        let u = DMatrix::from_element(4, 3, 1.0 / 3.0);
        assert!((dec_target_dist(&u) - &u).amax() < 1e-12);
        let q = DMatrix::from_row_slice(3, 3, &[0.7, 0.2, 0.1, 0.3, 0.3, 0.4, 0.05, 0.9, 0.05]);
        assert!(rows_on_simplex(&dec_target_dist(&q)));
        let zero_col = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let p = dec_target_dist(&zero_col);
        assert_eq!(p, zero_col);
    }

    #[test]
    fn identity_is_bitwise_passthrough() {
        let pts = PointSet::from_rows(&[vec![0.1, 0.2], vec![1e-300, -7.5]]).unwrap();
        let out = train_embedder(&pts, None, &EmbedderConfig::default()).unwrap();
        assert_eq!(out.embeddings, pts);
        let bad = EmbedderConfig {
            latent_dim: 1,
            ..EmbedderConfig::default()
        };
        assert!(train_embedder(&pts, None, &bad).is_err());
    }

    #[test]
    fn zero_epochs_is_the_initial_projection() {
        let pts = PointSet::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let cfg = EmbedderConfig {
            epochs: 0,
            latent_dim: 2,
            seed: 9,
            ..EmbedderConfig::linear_dec()
        };
        let out = train_embedder(&pts, None, &cfg).unwrap();
        let expect = LinearAutoencoder::init(3, 2, 9).encode(&pts.to_matrix());
        assert_eq!(out.embeddings.to_matrix(), expect);
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn init_encoder_rows_are_orthonormal() {
        let m = LinearAutoencoder::init(5, 3, 1);
        let gram = &m.encoder * m.encoder.transpose();
        assert!((gram - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
        assert_eq!(m.decoder, m.encoder.transpose());
    }

    fn numeric_grad(
        model: &LinearAutoencoder,
        x: &DMatrix<f64>,
        centers: &[Vec<f64>],
        p: &DMatrix<f64>,
        lambda: f64,
        encoder: bool,
    ) -> DMatrix<f64> {
        let h = 1e-6;
        let shape = if encoder { model.encoder.shape() } else { model.decoder.shape() };
        DMatrix::from_fn(shape.0, shape.1, |r, c| {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let (a, b) = if encoder {
                (&mut plus.encoder, &mut minus.encoder)
            } else {
                (&mut plus.decoder, &mut minus.decoder)
            };
            a[(r, c)] += h;
            b[(r, c)] -= h;
            (plus.loss(x, centers, Some(p), lambda).total - minus.loss(x, centers, Some(p), lambda).total) / (2.0 * h)
        })
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..5 {
            let d = rng.random_range(2..=8);
            let latent = rng.random_range(1..=d);
            let n = rng.random_range(5..=20);
            let c = rng.random_range(2..=4);
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
            let centers: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mut model = LinearAutoencoder::init(d, latent, case);
            model.decoder += DMatrix::from_fn(d, latent, |_, _| rng.random_range(-0.3..0.3));
            let z = model.encode(&x);
            let p = dec_target_dist(&model.soft_assignments(&z, &centers));
            let eval = model.loss(&x, &centers, Some(&p), 0.7);
            for (analytic, encoder) in [(&eval.grad_encoder, true), (&eval.grad_decoder, false)] {
                let numeric = numeric_grad(&model, &x, &centers, &p, 0.7, encoder);
                let rel = (analytic - &numeric).norm() / numeric.norm().max(1e-12);
                assert!(rel < 1e-4, "case {case} encoder={encoder}: relative error {rel}");
            }
        }
    }

    fn two_blobs(seed: u64) -> (PointSet, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in 0..2 {
            let c = if k == 0 { [-2.0, 1.0, 0.5] } else { [2.0, -1.0, 0.0] };
            for _ in 0..40 {
                let noise: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                rows.push((0..3).map(|a| c[a] + 0.4 * noise[a]).collect());
                labels.push(k);
            }
        }
        (PointSet::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn two_blob_training_reduces_loss_and_separates() {
        let (pts, labels) = two_blobs(3);
        let cfg = EmbedderConfig {
            latent_dim: 2,
            seed: 4,
            ..EmbedderConfig::linear_dec()
        };
        let mut emb = Embedder::new(cfg);
        let z0 = emb.embed(&pts).unwrap();
        let protos = prototypes_from_labels(&z0, &labels, 2, 0).unwrap();
        let out = emb.train(&pts, Some(&protos)).unwrap();
        assert_eq!(out.loss_trace.len(), 201);
        assert!(out.loss_trace[200] < out.loss_trace[0]);
        let smooth: Vec<f64> = out.loss_trace.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let centers: Vec<Vec<f64>> = protos.prototypes.iter().map(|p| p.mean.clone()).collect();
        for k in 0..2 {
            let mut votes = [0usize; 2];
            for i in (0..80).filter(|&i| labels[i] == k) {
                let q = dec_soft_assign(out.embeddings.row(i), &centers);
                votes[if q[0] >= q[1] { 0 } else { 1 }] += 1;
            }
            assert!(votes[k] > votes[1 - k], "blob {k}: {votes:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_k_means_start_works() {
        let (pts, _) = two_blobs(5);
        let cfg = EmbedderConfig {
            seed: 2,
            epochs: 50,
            ..EmbedderConfig::linear_dec()
        };
        let a = train_embedder(&pts, None, &cfg).unwrap();
        let b = train_embedder(&pts, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.loss_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn divergence_halves_then_fails() {
        let (pts, _) = two_blobs(6);
        let scaled = pts.map_rows(|r, out| out.iter_mut().zip(r).for_each(|(o, v)| *o = v * 1e3)).unwrap();
        let cfg = EmbedderConfig {
            step_size: 10.0,
            epochs: 50,
            ..EmbedderConfig::linear_dec()
        };
        let err = train_embedder(&scaled, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        let ok = EmbedderConfig {
            step_size: 4e-2,
            epochs: 50,
            ..EmbedderConfig::linear_dec()
        };
        let out = train_embedder(&pts, None, &ok).unwrap();
        assert!(out.restarts <= MAX_RESTARTS);
    }
}
