//! Batch experiments: JSON specs, versioned run reports, sweeps and benches.
//!
//! A spec names one dataset source, a [`FederationConfig`], a mode and a set
//! of ablation flags. Every report echoes the resolved spec with its seed, so
//! feeding `report.spec` back into [`run_experiment`] reproduces the metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ari, gen_moons, gen_ring, hungarian_accuracy, load_csv, nmi, partition_clients, standardize, LabelColumn,
    LabeledDataset,
};
use crate::error::{Error, Result};
use crate::federation::{
    baseline_federated_kmeans, run_iterative, run_one_shot, worker_pool, FederationConfig, MessageSizeReport,
    RoundTrace,
};
use crate::graph::PointSet;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Moons {
        n: usize,
        noise_sigma: f64,
    },
    Ring {
        n: usize,
        #[serde(default = "ring_dim")]
        dim: usize,
        #[serde(default = "ring_classes")]
        classes: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<LabelColumn>,
        /// Z-score every feature column after loading.
        #[serde(default = "default_true")]
        standardize: bool,
    },
}

fn ring_dim() -> usize {
    20
}

fn ring_classes() -> usize {
    5
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Moons { n, noise_sigma } => gen_moons(*n, *noise_sigma, seed),
            DatasetSource::Ring { n, dim, classes } => gen_ring(*n, *dim, *classes, seed),
            DatasetSource::Csv {
                path,
                label_column,
                standardize: z,
            } => {
                let mut ds = load_csv(path, label_column.as_ref())?;
                if *z {
                    ds.points = standardize(&ds.points)?;
                }
                Ok(ds)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetSource::Moons { n, noise_sigma } => {
                if *n < 4 || n % 2 != 0 {
                    return Err(Error::Config(format!("moons needs an even n >= 4, got {n}")));
                }
                if !noise_sigma.is_finite() || *noise_sigma < 0.0 {
                    return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
                }
            }
            DatasetSource::Ring { n, dim, classes } => {
                if *classes == 0 || n % classes != 0 || *dim < 2 {
                    return Err(Error::Config(format!(
                        "ring needs dim >= 2 and n divisible by classes, got n={n} dim={dim} classes={classes}"
                    )));
                }
            }
            DatasetSource::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::Config("csv path is empty".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    OneShot,
    Iterative,
    BaselineKmeans,
}

/// Pipeline stages to switch off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Treat the privacy budget as zero.
    pub dp_off: bool,
    /// Plain kNN graphs and GMM labels on the clients.
    pub psg_off: bool,
    /// Cluster the assembled similarity directly, without refinement.
    pub gsg_off: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.dp_off || self.psg_off || self.gsg_off
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.dp_off {
            parts.push("dp_off");
        }
        if self.psg_off {
            parts.push("psg_off");
        }
        if self.gsg_off {
            parts.push("gsg_off");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSource,
    /// Dominant-class fraction of each client's quota.
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file. A relative CSV path is taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec = Self::from_json(&text)?;
        spec.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSource::Csv { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.federation.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.federation.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if !(0.0..1.0).contains(&self.heterogeneity) {
            return Err(Error::Config(format!(
                "heterogeneity must lie in [0, 1), got {}",
                self.heterogeneity
            )));
        }
        if self.mode == Mode::BaselineKmeans && self.ablation.any() {
            return Err(Error::Config("ablation flags do not apply to baseline_kmeans".into()));
        }
        self.effective_config().validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    /// Federation config with the ablation flags applied.
    pub fn effective_config(&self) -> FederationConfig {
        let mut cfg = self.federation.clone();
        if self.ablation.dp_off {
            cfg.epsilon = 0.0;
        }
        if self.ablation.psg_off {
            cfg.rank_constrained_private = false;
        }
        if self.ablation.gsg_off {
            cfg.refine_global = false;
        }
        cfg
    }

    fn display_name(&self) -> String {
        if self.name.is_empty() {
            format!("{:?}/{}", self.mode, self.ablation.label()).to_lowercase()
        } else {
            self.name.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageStats {
    pub uploads: Vec<MessageSizeReport>,
    pub total_bytes: usize,
    pub max_nonzeros: usize,
    pub all_within_bound: bool,
}

impl MessageStats {
    fn from_uploads(uploads: Vec<MessageSizeReport>) -> Self {
        MessageStats {
            total_bytes: uploads.iter().map(|u| u.bytes).sum(),
            max_nonzeros: uploads.iter().map(|u| u.nonzeros).max().unwrap_or(0),
            all_within_bound: uploads.iter().all(|u| u.within_bound),
            uploads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub samples: usize,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub converged: Option<bool>,
    pub trace: Vec<RoundTrace>,
    /// Every upload of every round.
    pub messages: MessageStats,
    pub noise_draws: u64,
    pub epsilon_spent: f64,
    pub wall_clock_secs: f64,
    pub labels: Vec<usize>,
    pub spec: ExperimentSpec,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn file_name(&self) -> String {
        let safe: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        format!("{safe}_seed{}.json", self.seed)
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        write_file(&path, &self.to_json()?)?;
        Ok(path)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Builds the dataset, partitions it and runs the selected mode.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    let start = Instant::now();
    let cfg = spec.effective_config();
    let ds = spec.dataset.load(cfg.seed)?;
    let plan = partition_clients(&ds, cfg.num_clients, spec.heterogeneity, cfg.seed)?;
    let parts = plan
        .clients
        .iter()
        .map(|idx| ds.points.select(idx))
        .collect::<Result<Vec<PointSet>>>()?;
    let truth: Option<Vec<Vec<usize>>> = ds
        .labels
        .as_ref()
        .map(|l| plan.clients.iter().map(|idx| idx.iter().map(|&i| l[i]).collect()).collect());

    let (client_labels, trace, messages, noise_draws, epsilon_spent, converged) = match spec.mode {
        Mode::BaselineKmeans => {
            let run = baseline_federated_kmeans(&parts, &cfg)?;
            (run.client_labels, Vec::new(), MessageStats::from_uploads(Vec::new()), 0, 0.0, None)
        }
        Mode::OneShot | Mode::Iterative => {
            let run = if spec.mode == Mode::OneShot {
                run_one_shot(&parts, &cfg, truth.as_deref())?
            } else {
                run_iterative(&parts, &cfg, truth.as_deref())?
            };
            let uploads = run.upload_history.into_iter().flatten().collect();
            (
                run.client_labels,
                run.trace,
                MessageStats::from_uploads(uploads),
                run.noise_draws,
                run.epsilon_spent,
                Some(run.result.diagnostics.converged),
            )
        }
    };

    let labels: Vec<usize> = client_labels.iter().flatten().copied().collect();
    let (acc, nmi_v, ari_v) = match &truth {
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
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: spec.display_name(),
        seed: cfg.seed,
        samples: labels.len(),
        acc,
        nmi: nmi_v,
        ari: ari_v,
        converged,
        trace,
        messages,
        noise_draws,
        epsilon_spent,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        labels,
        spec: spec.clone(),
    };
    if let Some(path) = &spec.output {
        write_file(path, &report.to_json()?)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, count: n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub acc: Stat,
    pub nmi: Stat,
    pub ari: Stat,
    pub wall_clock_secs: Stat,
    pub failures: Vec<RunFailure>,
    pub reports: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub repeats: usize,
    pub base_seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, name: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn failure_count(&self) -> usize {
        self.rows.iter().map(|r| r.failures.len()).sum()
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  {:>15}  {:>15}  {:>15}  {:>9}  {:>4}\n",
            "name", "acc", "nmi", "ari", "secs", "fail"
        );
        for r in &self.rows {
            let cell = |s: &Stat| format!("{:.4}±{:.4}", s.mean, s.std);
            let _ = writeln!(
                out,
                "{:<width$}  {:>15}  {:>15}  {:>15}  {:>9.2}  {:>4}",
                r.name,
                cell(&r.acc),
                cell(&r.nmi),
                cell(&r.ari),
                r.wall_clock_secs.mean,
                r.failures.len()
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io {
            path: PathBuf::from("<csv>"),
            source: std::io::Error::other(e.to_string()),
        };
        w.write_record([
            "name", "runs", "acc_mean", "acc_std", "nmi_mean", "nmi_std", "ari_mean", "ari_std", "secs_mean",
            "failures",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.acc.count.to_string(),
                r.acc.mean.to_string(),
                r.acc.std.to_string(),
                r.nmi.mean.to_string(),
                r.nmi.std.to_string(),
                r.ari.mean.to_string(),
                r.ari.std.to_string(),
                r.wall_clock_secs.mean.to_string(),
                r.failures.len().to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| io(e.into_error().into()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Writes `table.txt`, `table.csv`, `sweep.json` and every run report.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("table.txt"), &self.render())?;
        write_file(&dir.join("table.csv"), &self.to_csv()?)?;
        write_file(&dir.join("sweep.json"), &serde_json::to_string_pretty(self)?)?;
        for (i, row) in self.rows.iter().enumerate() {
            let sub = dir.join(format!("{i:02}"));
            for report in &row.reports {
                report.write_to_dir(&sub)?;
            }
        }
        Ok(())
    }
}

/// Runs every spec with seeds `base_seed..base_seed + repeats`. A failing run
/// is recorded in its row and the sweep carries on.
pub fn run_sweep(specs: &[ExperimentSpec], repeats: usize, base_seed: u64) -> Result<SweepTable> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|s| (0..repeats as u64).map(move |r| (s, base_seed + r)))
        .collect();
    let pool = worker_pool()?;
    let outcomes: Vec<Result<RunReport>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, seed)| {
                let mut spec = specs[s].clone().with_seed(seed);
                spec.output = None;
                run_experiment(&spec)
            })
            .collect()
    });
    let mut rows: Vec<SweepRow> = specs
        .iter()
        .map(|s| SweepRow {
            name: s.display_name(),
            acc: Stat::default(),
            nmi: Stat::default(),
            ari: Stat::default(),
            wall_clock_secs: Stat::default(),
            failures: Vec::new(),
            reports: Vec::new(),
        })
        .collect();
    for (&(s, seed), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => rows[s].reports.push(r),
            Err(e) => {
                log::warn!("{} seed {seed} failed: {e}", rows[s].name);
                rows[s].failures.push(RunFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    for row in &mut rows {
        let pick = |f: fn(&RunReport) -> Option<f64>| row.reports.iter().filter_map(f).collect::<Vec<_>>();
        row.acc = Stat::of(&pick(|r| r.acc));
        row.nmi = Stat::of(&pick(|r| r.nmi));
        row.ari = Stat::of(&pick(|r| r.ari));
        row.wall_clock_secs = Stat::of(&pick(|r| Some(r.wall_clock_secs)));
    }
    Ok(SweepTable {
        schema_version: REPORT_SCHEMA_VERSION,
        repeats,
        base_seed,
        rows,
    })
}

/// Full pipeline, each stage off on its own, and both structural stages off.
pub fn ablation_specs(base: &ExperimentSpec) -> Vec<ExperimentSpec> {
    let arms = [
        Ablation::default(),
        Ablation { dp_off: true, ..Ablation::default() },
        Ablation { psg_off: true, ..Ablation::default() },
        Ablation { gsg_off: true, ..Ablation::default() },
        Ablation { psg_off: true, gsg_off: true, ..Ablation::default() },
    ];
    let stem = if base.name.is_empty() { "run" } else { &base.name };
    arms.iter()
        .map(|a| ExperimentSpec {
            name: format!("{stem}/{}", a.label()),
            ablation: *a,
            ..base.clone()
        })
        .collect()
}

/// One spec per heterogeneity ratio.
pub fn heterogeneity_specs(base: &ExperimentSpec, ratios: &[f64]) -> Vec<ExperimentSpec> {
    let stem = if base.name.is_empty() { "run" } else { &base.name };
    ratios
        .iter()
        .map(|&h| ExperimentSpec {
            name: format!("{stem}/h={h:.2}"),
            heterogeneity: h,
            ..base.clone()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub samples: usize,
    pub clients: usize,
    pub mean_upload_bytes: f64,
    pub max_nonzeros: usize,
    pub max_bound: usize,
    pub all_within_bound: bool,
    pub wall_clock_secs: f64,
}

/// Message size and runtime of one-shot moons runs at each size.
pub fn bench(sizes: &[usize], clients: usize, seed: u64) -> Result<Vec<BenchRow>> {
    sizes
        .iter()
        .map(|&n| {
            let spec = ExperimentSpec {
                name: format!("bench/n={n}"),
                dataset: DatasetSource::Moons { n, noise_sigma: 0.06 },
                heterogeneity: 0.0,
                federation: FederationConfig {
                    num_clients: clients,
                    clusters: 2,
                    epsilon: 1.0,
                    seed,
                    ..FederationConfig::default()
                },
                mode: Mode::OneShot,
                ablation: Ablation::default(),
                output: None,
            };
            let report = run_experiment(&spec)?;
            let up = &report.messages.uploads;
            Ok(BenchRow {
                samples: n,
                clients,
                mean_upload_bytes: report.messages.total_bytes as f64 / up.len().max(1) as f64,
                max_nonzeros: report.messages.max_nonzeros,
                max_bound: up.iter().map(|u| u.bound).max().unwrap_or(0),
                all_within_bound: report.messages.all_within_bound,
                wall_clock_secs: report.wall_clock_secs,
            })
        })
        .collect()
}
