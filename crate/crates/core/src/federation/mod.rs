//! In-process federation: clients and server exchange only encoded bytes.

mod baseline;
mod codec;

pub use baseline::{baseline_federated_kmeans, BaselineRun};
pub use codec::{decode_feedback, decode_message, encode_feedback, encode_message, MAGIC, SCHEMA_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    assemble_global, compute_global_prototypes, extract_global_clusters, inter_client_block,
    refine_global, AssemblyConfig, GlobalResult,
};
use crate::data::{ari, hungarian_accuracy, nmi};
use crate::embedder::{Embedder, EmbedderConfig, EmbedderKind};
use crate::error::{Error, Result};
use crate::graph::{
    c_smallest_eigvecs, default_neighbors, graph_laplacian, learn_private_graph, plain_knn_graph,
    sq_dist, PointSet, SampleRef, StructuralGraph,
};
use crate::prototypes::{
    compute_sensitivities, fit_gmm, l1_bound_scale, privatize_prototypes, prototypes_from_labels,
    smallest_cluster, NoiseSource, PrototypeSet,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "FEDGRAPH_THREADS";

const SERVER_STREAM: u64 = 0x5e5e_7e57_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clusters: usize,
    /// Neighbours per private-graph row; `0` picks a size-based default.
    pub neighbors: usize,
    pub inter_block_k: usize,
    pub beta: f64,
    /// Privacy budget per release; `0` disables noise.
    pub epsilon: f64,
    pub rounds: usize,
    pub embedder: EmbedderConfig,
    pub seed: u64,
    /// Public bound on the L1 norm of client rows. Without it each client
    /// uses its own maximum row norm.
    pub l1_bound: Option<f64>,
    pub max_iter: usize,
    /// Inter-client blocks stay dense up to this many samples in total.
    pub dense_limit: usize,
    /// Learn rank-constrained private graphs (otherwise plain kNN graphs
    /// with mixture-model local labels).
    pub rank_constrained_private: bool,
    /// Refine `E*` before reading clusters (otherwise cluster `E*` directly).
    pub refine_global: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 2,
            clusters: 2,
            neighbors: 0,
            inter_block_k: 5,
            beta: 1.0,
            epsilon: 0.0,
            rounds: 5,
            embedder: EmbedderConfig::default(),
            seed: 0,
            l1_bound: None,
            max_iter: 30,
            dense_limit: 500,
            rank_constrained_private: true,
            refine_global: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.inter_block_k == 0 {
            return bad("inter_block_k must be at least 1".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if let Some(b) = self.l1_bound {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("l1_bound must be positive, got {b}"));
            }
        }
        if !(self.embedder.lambda_dec >= 0.0 && self.embedder.step_size > 0.0) {
            return bad("embedder needs lambda_dec >= 0 and step_size > 0".into());
        }
        Ok(())
    }

    fn assembly(&self) -> AssemblyConfig {
        AssemblyConfig {
            beta: self.beta,
            inter_block_k: self.inter_block_k,
            dense_limit: self.dense_limit,
        }
    }

    fn neighbors_for(&self, n: usize) -> usize {
        if self.neighbors == 0 {
            default_neighbors(n, self.clusters)
        } else {
            self.neighbors
        }
    }

    /// Embedder settings shared by every client; the run seed is mixed in.
    fn client_embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            seed: self.embedder.seed ^ self.seed,
            ..self.embedder.clone()
        }
    }

    fn client_seed(&self, client_id: u32) -> u64 {
        self.seed ^ (u64::from(client_id) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

/// What one client sends to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadMessage {
    pub schema_version: u16,
    pub client_id: u32,
    pub round: u32,
    pub graph: StructuralGraph,
    pub prototypes: PrototypeSet,
    /// Local cluster of every sample, indexing into `prototypes`.
    pub local_labels: Vec<usize>,
}

/// What the server returns to one client.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeedback {
    pub schema_version: u16,
    pub client_id: u32,
    pub round: u32,
    pub cluster_count: usize,
    /// Global cluster of each of the client's samples.
    pub assignments: Vec<usize>,
    pub global_prototypes: PrototypeSet,
}

/// Size accounting for one upload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageSizeReport {
    pub client_id: u32,
    pub round: u32,
    pub samples: usize,
    pub neighbors: usize,
    /// Nonzero graph weights plus nonzero prototype mean/covariance entries.
    pub nonzeros: usize,
    /// Labels and prototype weights, sent alongside.
    pub metadata_entries: usize,
    pub bytes: usize,
    /// `N_k * k_n + C * (d + d^2)`.
    pub bound: usize,
    pub within_bound: bool,
}

pub fn message_size_report(msg: &UploadMessage) -> Result<MessageSizeReport> {
    let bytes = encode_message(msg)?.len();
    let (n, k) = (msg.graph.n(), msg.graph.row_capacity());
    let (c, d) = (msg.prototypes.len(), msg.prototypes.dim);
    let proto_nz: usize = msg
        .prototypes
        .prototypes
        .iter()
        .map(|p| p.mean.iter().chain(&p.covariance).filter(|&&v| v != 0.0).count())
        .sum();
    let nonzeros = msg.graph.nnz() + proto_nz;
    let bound = n * k + c * (d + d * d);
    Ok(MessageSizeReport {
        client_id: msg.client_id,
        round: msg.round,
        samples: n,
        neighbors: k,
        nonzeros,
        metadata_entries: msg.local_labels.len() + c,
        bytes,
        bound,
        within_bound: nonzeros <= bound,
    })
}

/// Thread pool honouring [`THREADS_ENV`].
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// One round's client output.
#[derive(Clone, Debug)]
pub struct ClientOutput {
    pub message: UploadMessage,
    pub bytes: Vec<u8>,
    pub noise_draws: u64,
    /// Whether this round released freshly noised prototypes.
    pub fresh_release: bool,
}

/// A client with its private data and persistent embedder.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: u32,
    data: PointSet,
    embedder: Embedder,
    latent: Option<PointSet>,
    cached: Option<UploadMessage>,
    epsilon_spent: f64,
}

impl Client {
    pub fn new(id: u32, data: PointSet, embedder: EmbedderConfig) -> Self {
        Self {
            id,
            data,
            embedder: Embedder::new(embedder),
            latent: None,
            cached: None,
            epsilon_spent: 0.0,
        }
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }

    /// Total privacy budget spent on releases so far.
    pub fn epsilon_spent(&self) -> f64 {
        self.epsilon_spent
    }

    /// Latest embeddings (client-side only).
    pub fn latent(&self) -> Option<&PointSet> {
        self.latent.as_ref()
    }

    /// Embeds (training against `feedback` when present), learns the private
    /// graph and releases prototypes. An identity embedder produces the same
    /// release every round, so it is re-sent rather than re-noised.
    pub fn round(&mut self, cfg: &FederationConfig, feedback: Option<&GlobalFeedback>, round: u32) -> Result<ClientOutput> {
        self.round_inner(cfg, feedback, round).map_err(|e| e.for_client(self.id))
    }

    fn round_inner(&mut self, cfg: &FederationConfig, feedback: Option<&GlobalFeedback>, round: u32) -> Result<ClientOutput> {
        if self.embedder.config.kind == EmbedderKind::Identity {
            if let Some(cached) = &self.cached {
                let mut message = cached.clone();
                message.round = round;
                let bytes = encode_message(&message)?;
                return Ok(ClientOutput {
                    message,
                    bytes,
                    noise_draws: 0,
                    fresh_release: false,
                });
            }
        }
        if let Some(fb) = feedback {
            if fb.client_id != self.id || fb.assignments.len() != self.data.rows() {
                return Err(Error::invalid("feedback addressed to another client"));
            }
        }
        let z = match feedback {
            Some(fb) => self.embedder.train(&self.data, Some(&fb.global_prototypes))?.embeddings,
            None => self.embedder.embed(&self.data)?,
        };
        let (message, noise_draws) = build_upload(self.id, &z, cfg, round)?;
        let bytes = encode_message(&message)?;
        if message.prototypes.noised {
            self.epsilon_spent += cfg.epsilon;
        }
        self.latent = Some(z);
        self.cached = Some(message.clone());
        Ok(ClientOutput {
            message,
            bytes,
            noise_draws,
            fresh_release: true,
        })
    }
}

/// Graph, local labels and (possibly noised) prototypes for embeddings `z`.
fn build_upload(client_id: u32, z: &PointSet, cfg: &FederationConfig, round: u32) -> Result<(UploadMessage, u64)> {
    let c = cfg.clusters;
    let k = cfg.neighbors_for(z.rows());
    let seed = cfg.client_seed(client_id);
    let (graph, labels, raw_protos) = if cfg.rank_constrained_private {
        let learned = learn_private_graph(z, c, k, cfg.max_iter)?;
        if !learned.diagnostics.converged {
            log::debug!(
                "client {client_id}: private graph has {} zero eigenvalues for {c} clusters",
                learned.diagnostics.zero_count
            );
        }
        let labels = extract_global_clusters(&learned.graph, &learned.embedding, c, seed)?.labels;
        (learned.graph, labels, None)
    } else {
        let graph = plain_knn_graph(z, k)?;
        let gmm = fit_gmm(z, c, seed)?;
        (graph, gmm.assignment.labels, Some(gmm.prototypes))
    };
    let mut noise_draws = 0;
    let prototypes = if cfg.epsilon > 0.0 {
        let bound = match cfg.l1_bound {
            Some(b) => b,
            None => z
                .iter_rows()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE),
        };
        let scaled = l1_bound_scale(z, bound)?;
        let clean = prototypes_from_labels(&scaled, &labels, c, client_id)?;
        let bounds = compute_sensitivities(smallest_cluster(&labels, c).max(1))?;
        let mut noise = NoiseSource::for_client(cfg.seed, client_id, round);
        let noised = privatize_prototypes(&clean, &bounds, cfg.epsilon, &mut noise)?;
        noise_draws = noise.draws();
        rescale(noised, bound)
    } else {
        match raw_protos {
            Some(mut p) => {
                p.client_id = client_id;
                p
            }
            None => prototypes_from_labels(z, &labels, c, client_id)?,
        }
    };
    Ok((
        UploadMessage {
            schema_version: SCHEMA_VERSION,
            client_id,
            round,
            graph,
            prototypes,
            local_labels: labels,
        },
        noise_draws,
    ))
}

/// Maps prototypes from the unit-L1 scale back to data units.
fn rescale(mut set: PrototypeSet, bound: f64) -> PrototypeSet {
    for p in set.prototypes.iter_mut() {
        p.mean.iter_mut().for_each(|v| *v *= bound);
        p.covariance.iter_mut().for_each(|v| *v *= bound * bound);
    }
    set
}

/// Convenience wrapper: a fresh client's first-round upload.
pub fn client_round(
    client_id: u32,
    data: &PointSet,
    cfg: &FederationConfig,
    feedback: Option<&GlobalFeedback>,
) -> Result<UploadMessage> {
    let mut client = Client::new(client_id, data.clone(), cfg.client_embedder());
    let round = feedback.map_or(0, |f| f.round + 1);
    Ok(client.round(cfg, feedback, round)?.message)
}

/// Aggregates one complete round of uploads. Works only on uploaded graphs,
/// prototypes and labels.
pub fn server_round(uploads: &[UploadMessage], cfg: &FederationConfig) -> Result<(GlobalResult, Vec<GlobalFeedback>)> {
    let m = cfg.num_clients;
    let round = uploads.first().map_or(0, |u| u.round);
    let mut slots: Vec<Option<&UploadMessage>> = vec![None; m];
    for u in uploads {
        let id = u.client_id as usize;
        if id >= m {
            return Err(Error::invalid(format!("upload from unknown client {id}")));
        }
        if u.round != round {
            return Err(Error::invalid(format!(
                "client {id} uploaded for round {}, expected {round}",
                u.round
            )));
        }
        if slots[id].replace(u).is_some() {
            return Err(Error::invalid(format!("duplicate upload from client {id}")));
        }
    }
    let missing: Vec<u32> = (0..m as u32).filter(|&k| slots[k as usize].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::RoundIncomplete { round, missing });
    }
    let ups: Vec<&UploadMessage> = slots.into_iter().map(|s| s.expect("checked")).collect();
    let c = cfg.clusters;
    let dim = ups[0].prototypes.dim;
    if ups.iter().any(|u| u.prototypes.dim != dim) {
        return Err(Error::invalid("clients uploaded prototypes of different dimensions"));
    }

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let blocks = pairs
        .par_iter()
        .map(|&(i, j)| {
            inter_client_block(
                (i, &ups[i].prototypes, &ups[i].local_labels),
                (j, &ups[j].prototypes, &ups[j].local_labels),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let graphs: Vec<StructuralGraph> = ups.iter().map(|u| u.graph.clone()).collect();
    let e_star = assemble_global(&graphs, &blocks, &cfg.assembly())?;
    let total_n = e_star.total_n;
    if c >= total_n {
        return Err(Error::invalid(format!("{c} clusters for {total_n} samples")));
    }

    let (similarity, embedding, diagnostics, objective) = if cfg.refine_global {
        let learned = refine_global(&e_star, c, cfg.max_iter)?;
        (learned.graph, learned.embedding, learned.diagnostics, learned.objective)
    } else {
        let (f, diag) = c_smallest_eigvecs(&graph_laplacian(&e_star.graph), c)?;
        (e_star.graph.clone(), f, diag, Vec::new())
    };
    let mut assignments = extract_global_clusters(&similarity, &embedding, c, cfg.seed ^ SERVER_STREAM)?;
    assignments.provenance = ups
        .iter()
        .flat_map(|u| {
            (0..u.graph.n() as u32).map(move |local_index| SampleRef {
                client_id: u.client_id,
                local_index,
            })
        })
        .collect();

    let mut vectors = Vec::with_capacity(total_n * dim);
    for u in &ups {
        for &l in &u.local_labels {
            vectors.extend_from_slice(&u.prototypes.prototypes[l].mean);
        }
    }
    let vectors = PointSet::new(total_n, dim, vectors)?;
    let (global_prototypes, assignments) = compute_global_prototypes(&vectors, &assignments)?;

    let feedback = ups
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let start = e_star.client_offsets[k];
            GlobalFeedback {
                schema_version: SCHEMA_VERSION,
                client_id: u.client_id,
                round,
                cluster_count: assignments.cluster_count,
                assignments: assignments.labels[start..start + e_star.client_sizes[k]].to_vec(),
                global_prototypes: global_prototypes.clone(),
            }
        })
        .collect();
    Ok((
        GlobalResult {
            similarity,
            embedding,
            assignments,
            global_prototypes,
            diagnostics,
            objective,
        },
        feedback,
    ))
}

/// Metrics and protocol statistics of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub converged: bool,
    pub zero_count: usize,
    pub upload_bytes: usize,
    pub noise_draws: u64,
    /// Mean distance from each embedding to its global prototype mean.
    pub alignment: f64,
}

/// Outcome of a federated run.
#[derive(Clone, Debug)]
pub struct FederatedRun {
    pub result: GlobalResult,
    pub client_labels: Vec<Vec<usize>>,
    /// Size reports of the final round's uploads.
    pub uploads: Vec<MessageSizeReport>,
    /// Every round's uploads, for inspection.
    pub upload_history: Vec<Vec<MessageSizeReport>>,
    pub trace: Vec<RoundTrace>,
    pub noise_draws: u64,
    /// Largest total budget spent by any client.
    pub epsilon_spent: f64,
}

struct Orchestrator<'a> {
    cfg: FederationConfig,
    clients: Vec<Client>,
    truth: Option<&'a [Vec<usize>]>,
    trace: Vec<RoundTrace>,
    upload_history: Vec<Vec<MessageSizeReport>>,
    noise_draws: u64,
}

impl<'a> Orchestrator<'a> {
    fn new(datasets: &[PointSet], cfg: &FederationConfig, truth: Option<&'a [Vec<usize>]>) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.num_clients = datasets.len();
        cfg.validate()?;
        if let Some(t) = truth {
            if t.len() != datasets.len() || t.iter().zip(datasets).any(|(t, d)| t.len() != d.rows()) {
                return Err(Error::invalid("truth labels do not match the client datasets"));
            }
        }
        let clients = datasets
            .iter()
            .enumerate()
            .map(|(k, d)| Client::new(k as u32, d.clone(), cfg.client_embedder()))
            .collect();
        Ok(Self {
            cfg,
            clients,
            truth,
            trace: Vec::new(),
            upload_history: Vec::new(),
            noise_draws: 0,
        })
    }

    /// One full exchange; returns the result and the encoded feedback.
    fn exchange(&mut self, feedback: Option<&[Vec<u8>]>, round: u32) -> Result<(GlobalResult, Vec<Vec<u8>>)> {
        let cfg = &self.cfg;
        let outputs = self
            .clients
            .par_iter_mut()
            .enumerate()
            .map(|(k, client)| {
                let fb = match feedback {
                    Some(f) => Some(decode_feedback(&f[k]).map_err(|e| e.for_client(client.id))?),
                    None => None,
                };
                client.round(cfg, fb.as_ref(), round)
            })
            .collect::<Result<Vec<_>>>()?;
        let uploads = outputs
            .iter()
            .map(|o| decode_message(&o.bytes))
            .collect::<Result<Vec<_>>>()?;
        let sizes = uploads.iter().map(message_size_report).collect::<Result<Vec<_>>>()?;
        let draws: u64 = outputs.iter().map(|o| o.noise_draws).sum();
        self.noise_draws += draws;
        let (result, feedback) = server_round(&uploads, cfg)?;
        let encoded = feedback.iter().map(encode_feedback).collect::<Result<Vec<_>>>()?;

        let labels = result.assignments.labels.clone();
        let (acc, nmi_v, ari_v) = match self.truth {
            Some(t) => {
                let flat: Vec<usize> = t.iter().flatten().copied().collect();
                (
                    Some(hungarian_accuracy(&flat, &labels)?),
                    Some(nmi(&flat, &labels)?),
                    Some(ari(&flat, &labels)?),
                )
            }
            None => (None, None, None),
        };
        let alignment = self.alignment(&feedback);
        self.trace.push(RoundTrace {
            round,
            acc,
            nmi: nmi_v,
            ari: ari_v,
            converged: result.diagnostics.converged,
            zero_count: result.diagnostics.zero_count,
            upload_bytes: sizes.iter().map(|s| s.bytes).sum(),
            noise_draws: draws,
            alignment,
        });
        self.upload_history.push(sizes);
        Ok((result, encoded))
    }

    fn alignment(&self, feedback: &[GlobalFeedback]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (client, fb) in self.clients.iter().zip(feedback) {
            let Some(z) = client.latent() else { continue };
            for (i, &g) in fb.assignments.iter().enumerate() {
                total += sq_dist(z.row(i), &fb.global_prototypes.prototypes[g].mean).sqrt();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    fn finish(self, result: GlobalResult) -> FederatedRun {
        let mut client_labels = Vec::with_capacity(self.clients.len());
        let mut start = 0;
        for client in &self.clients {
            client_labels.push(result.assignments.labels[start..start + client.samples()].to_vec());
            start += client.samples();
        }
        FederatedRun {
            result,
            client_labels,
            uploads: self.upload_history.last().cloned().unwrap_or_default(),
            upload_history: self.upload_history,
            trace: self.trace,
            noise_draws: self.noise_draws,
            epsilon_spent: self.clients.iter().map(Client::epsilon_spent).fold(0.0, f64::max),
        }
    }
}

/// Single upload/aggregate round with identity embedders.
pub fn run_one_shot(datasets: &[PointSet], cfg: &FederationConfig, truth: Option<&[Vec<usize>]>) -> Result<FederatedRun> {
    let mut cfg = cfg.clone();
    cfg.embedder = EmbedderConfig {
        kind: EmbedderKind::Identity,
        latent_dim: 0,
        ..cfg.embedder
    };
    worker_pool()?.install(|| {
        let mut orch = Orchestrator::new(datasets, &cfg, truth)?;
        let (result, _) = orch.exchange(None, 0)?;
        Ok(orch.finish(result))
    })
}

/// Round 0 as in the one-shot run, then `cfg.rounds` rounds of embedding
/// refinement against the previous round's global prototypes.
pub fn run_iterative(datasets: &[PointSet], cfg: &FederationConfig, truth: Option<&[Vec<usize>]>) -> Result<FederatedRun> {
    if cfg.rounds == 0 {
        return Err(Error::Config("iterative mode needs rounds >= 1".into()));
    }
    worker_pool()?.install(|| {
        let mut orch = Orchestrator::new(datasets, cfg, truth)?;
        let (mut result, mut feedback) = orch.exchange(None, 0)?;
        for round in 1..=cfg.rounds as u32 {
            (result, feedback) = orch.exchange(Some(&feedback), round)?;
        }
        Ok(orch.finish(result))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_moons;
    use crate::prototypes::{CovarianceForm, Prototype};

    fn blobs(offset: f64) -> PointSet {
        let mut rows = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (6.0, 0.0)] {
            for t in 0..15 {
                let a = t as f64 * 0.7;
                rows.push(vec![cx + offset + 0.3 * a.cos(), cy + 0.3 * a.sin() + 0.01 * t as f64]);
            }
        }
        PointSet::from_rows(&rows).unwrap()
    }

    fn cfg() -> FederationConfig {
        FederationConfig {
            seed: 3,
            ..FederationConfig::default()
        }
    }

    #[test]
    fn client_message_invariants() {
        let data = blobs(0.0);
        let msg = client_round(0, &data, &cfg(), None).unwrap();
        for row in msg.graph.rows() {
            let s: f64 = row.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(!msg.prototypes.noised);
        let again = client_round(0, &data, &cfg(), None).unwrap();
        assert_eq!(encode_message(&msg).unwrap(), encode_message(&again).unwrap());
        let report = message_size_report(&msg).unwrap();
        assert!(report.within_bound);
    }

    #[test]
    fn gmm_path_uploads_raw_mixture_when_dp_is_off() {
        let data = blobs(0.0);
        let c = FederationConfig {
            rank_constrained_private: false,
            ..cfg()
        };
        let msg = client_round(1, &data, &c, None).unwrap();
        let mut gmm = fit_gmm(&data, 2, c.client_seed(1)).unwrap().prototypes;
        gmm.client_id = 1;
        assert_eq!(msg.prototypes, gmm);
    }

    #[test]
    fn dp_release_is_noised_and_counts_draws() {
        let c = FederationConfig { epsilon: 1.0, ..cfg() };
        let mut client = Client::new(0, blobs(0.0), c.embedder.clone());
        let out = client.round(&c, None, 0).unwrap();
        assert!(out.message.prototypes.noised);
        assert_eq!(out.noise_draws, 2 * (2 + 4));
        let again = client.round(&c, None, 1).unwrap();
        assert_eq!(again.noise_draws, 0);
        assert_eq!(again.message.prototypes, out.message.prototypes);
        assert_eq!(client.epsilon_spent(), 1.0);
    }

    #[test]
    fn missing_upload_is_reported() {
        let c = FederationConfig { num_clients: 3, ..cfg() };
        let a = client_round(0, &blobs(0.0), &c, None).unwrap();
        let b = client_round(2, &blobs(0.5), &c, None).unwrap();
        match server_round(&[a, b], &c) {
            Err(Error::RoundIncomplete { round, missing }) => {
                assert_eq!(round, 0);
                assert_eq!(missing, vec![1]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feedback_slices_partition_the_assignment() {
        let c = cfg();
        let ups = vec![
            client_round(0, &blobs(0.0), &c, None).unwrap(),
            client_round(1, &blobs(0.2), &c, None).unwrap(),
        ];
        let (result, fb) = server_round(&ups, &c).unwrap();
        let joined: Vec<usize> = fb.iter().flat_map(|f| f.assignments.clone()).collect();
        assert_eq!(joined, result.assignments.labels);
        assert_eq!(result.assignments.provenance[30], SampleRef { client_id: 1, local_index: 0 });
        assert_eq!(result.assignments.labels[..15], result.assignments.labels[30..45]);
        assert_ne!(result.assignments.labels[0], result.assignments.labels[15]);
    }

    #[test]
    fn identical_single_cluster_prototypes_merge_across_clients() {
        let c = FederationConfig { clusters: 1, ..cfg() };
        let proto = PrototypeSet {
            client_id: 0,
            dim: 1,
            form: CovarianceForm::Full,
            prototypes: vec![Prototype {
                mean: vec![0.0],
                covariance: vec![1.0],
                weight: 1.0,
            }],
            noised: false,
            epsilon_spent: 0.0,
        };
        let ring = |n: usize| {
            StructuralGraph::new(n, 2, (0..n).map(|i| vec![((i + 1) % n, 0.5), ((i + n - 1) % n, 0.5)]).collect()).unwrap()
        };
        let mk = |id: u32, g: StructuralGraph| UploadMessage {
            schema_version: SCHEMA_VERSION,
            client_id: id,
            round: 0,
            local_labels: vec![0; g.n()],
            graph: g,
            prototypes: PrototypeSet { client_id: id, ..proto.clone() },
        };
        let (result, _) = server_round(&[mk(0, ring(6)), mk(1, ring(6))], &c).unwrap();
        assert!(result.assignments.labels.iter().all(|&l| l == 0));
        assert_eq!(crate::graph::connected_components(&result.similarity).cluster_count, 1);
        assert!(result.similarity.row(0).iter().any(|&(j, _)| j >= 6));
    }

    #[test]
    fn one_shot_with_one_client_is_centralised() {
        let data = blobs(0.0);
        let run = run_one_shot(&[data.clone()], &cfg(), None).unwrap();
        let msg = client_round(0, &data, &FederationConfig { num_clients: 1, ..cfg() }, None).unwrap();
        let (direct, _) = server_round(&[msg], &FederationConfig { num_clients: 1, ..cfg() }).unwrap();
        assert_eq!(run.result, direct);
    }

    #[test]
    fn identity_iterative_equals_one_shot() {
        let ds = gen_moons(120, 0.05, 2).unwrap();
        let parts = vec![ds.points.select(&(0..60).collect::<Vec<_>>()).unwrap(), ds.points.select(&(60..120).collect::<Vec<_>>()).unwrap()];
        let c = FederationConfig { epsilon: 1.0, rounds: 1, ..cfg() };
        let one = run_one_shot(&parts, &c, None).unwrap();
        let it = run_iterative(&parts, &c, None).unwrap();
        assert_eq!(
            serde_json::to_string(&one.result).unwrap(),
            serde_json::to_string(&it.result).unwrap()
        );
    }

    #[test]
    fn dp_off_draws_nothing() {
        let run = run_one_shot(&[blobs(0.0), blobs(0.1)], &cfg(), None).unwrap();
        assert_eq!(run.noise_draws, 0);
        assert_eq!(run.epsilon_spent, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig { epsilon: -1.0, ..cfg() }.validate().is_err());
        assert!(FederationConfig { clusters: 0, ..cfg() }.validate().is_err());
        assert!(FederationConfig { l1_bound: Some(0.0), ..cfg() }.validate().is_err());
        cfg().validate().unwrap();
    }
}
