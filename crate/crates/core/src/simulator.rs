//! Monte-Carlo study: two data-generating processes (continuous and binary
//! outcomes) under four scenarios, and Bias / ESE / ASE / CP summaries.
//!
//! | scenario | clusters | observed cluster size |
//! |----------|----------|-----------------------|
//! | 1        | 30       | random                |
//! | 2        | 30       | cluster-dependent     |
//! | 3        | 100      | random                |
//! | 4        | 100      | cluster-dependent     |

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ClusterRecord, EstimandSpec, EstimatorTag, Level, Measure, PopulationMode, TrialDataset,
};
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, EstimatorSettings};
use crate::numerics::expit;

/// Largest tolerated fraction of failed replicates per estimator.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Continuous,
    Binary,
}

impl Experiment {
    /// Effect scale: difference for continuous outcomes, relative risk for
    /// binary ones.
    pub fn measure(self) -> Measure {
        match self {
            Experiment::Continuous => Measure::Difference,
            Experiment::Binary => Measure::Ratio,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Experiment::Continuous => "continuous",
            Experiment::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeMechanism {
    /// `M(1) = M(0) = 9 + Bernoulli(0.5)`.
    Random,
    /// `M(1) = N/5 + 5 C2`, `M(0) = 3 I{N = 50} + 3`.
    ClusterDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub experiment: Experiment,
    pub scenario: u8,
    pub m: usize,
    pub seed: u64,
    pub replicates: usize,
}

impl ScenarioConfig {
    pub fn new(experiment: Experiment, scenario: u8, seed: u64, replicates: usize) -> Result<Self> {
        let cfg = Self {
            experiment,
            scenario,
            m: default_clusters(scenario)?,
            seed,
            replicates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        default_clusters(self.scenario)?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.m < 4 {
            return Err(Error::Config(format!("m = {} is too small; need at least 4 clusters", self.m)));
        }
        Ok(())
    }

    pub fn sizes(&self) -> SizeMechanism {
        if self.scenario % 2 == 1 {
            SizeMechanism::Random
        } else {
            SizeMechanism::ClusterDependent
        }
    }
}

pub fn default_clusters(scenario: u8) -> Result<usize> {
    match scenario {
        1 | 2 => Ok(30),
        3 | 4 => Ok(100),
        s => Err(Error::Config(format!("scenario must be 1, 2, 3 or 4, got {s}"))),
    }
}

/// Full potential-outcome data for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialCluster {
    pub n: u32,
    pub c1: f64,
    pub c2: f64,
    /// `N x 2` individual covariates.
    pub x: Vec<[f64; 2]>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    /// Sampled indices under each arm, ascending.
    pub s1: Vec<usize>,
    pub s0: Vec<usize>,
    pub m1: usize,
    pub m0: usize,
    pub gamma: f64,
    pub treatment: u8,
}

/// Cluster-level draws shared by the truth oracle and the generator.
struct Source {
    n: u32,
    c1: f64,
    c2: f64,
    x: Vec<[f64; 2]>,
    gamma: f64,
}

fn draw_source<R: Rng>(rng: &mut R) -> Source {
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let n: u32 = if rng.random_bool(0.5) { 10 } else { 50 };
    let nf = n as f64;
    // Second parameters of the normal draws are variances: sd 2 and sd 3.
    let c1 = nf / 10.0 + 2.0 * std.sample(rng);
    let c2 = if rng.random_bool(expit((nf / 10.0).ln() * c1)) { 1.0 } else { 0.0 };
    let x1: Vec<f64> = (0..n).map(|_| if rng.random_bool(nf / 50.0) { 1.0 } else { 0.0 }).collect();
    let x1_mean = x1.iter().sum::<f64>() / nf;
    let x = x1
        .iter()
        .map(|&a| [a, x1_mean * (2.0 * c2 - 1.0) + 3.0 * std.sample(rng)])
        .collect();
    let gamma = std.sample(rng);
    Source { n, c1, c2, x, gamma }
}

/// Conditional means `E[Y_ij(1)]`, `E[Y_ij(0)]` given the cluster draws.
fn outcome_means(experiment: Experiment, s: &Source, x: &[f64; 2]) -> (f64, f64) {
    let nf = s.n as f64;
    let shared = nf * s.c1.sin() * (2.0 * s.c2 - 1.0) / 30.0;
    match experiment {
        Experiment::Continuous => {
            let ind = 5.0 * x[0].exp() * x[1].abs();
            (nf / 5.0 + shared + ind, s.gamma + shared + ind)
        }
        Experiment::Binary => {
            let root = x[1].abs().sqrt();
            (
                expit(-nf / 20.0 + shared + 1.5 * x[0].exp() * root),
                expit(s.gamma + shared + 1.5 * (2.0 * x[0] - 1.0) * root),
            )
        }
    }
}

pub fn observed_sizes(sizes: SizeMechanism, n: u32, c2: f64, coin: bool) -> (usize, usize) {
    match sizes {
        SizeMechanism::Random => {
            let m = 9 + coin as usize;
            (m, m)
        }
        SizeMechanism::ClusterDependent => (
            (n / 5) as usize + 5 * c2 as usize,
            if n == 50 { 6 } else { 3 },
        ),
    }
}

/// Draws one cluster's potential outcomes and its observed record.
pub fn generate_cluster<R: Rng>(
    experiment: Experiment,
    sizes: SizeMechanism,
    id: String,
    rng: &mut R,
) -> (PotentialCluster, ClusterRecord) {
    let src = draw_source(rng);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let mut y1 = Vec::with_capacity(src.n as usize);
    let mut y0 = Vec::with_capacity(src.n as usize);
    for x in &src.x {
        let (p1, p0) = outcome_means(experiment, &src, x);
        match experiment {
            Experiment::Continuous => {
                y1.push(p1 + std.sample(rng));
                y0.push(p0 + std.sample(rng));
            }
            Experiment::Binary => {
                y1.push(rng.random_bool(p1) as u8 as f64);
                y0.push(rng.random_bool(p0) as u8 as f64);
            }
        }
    }
    let coin = rng.random_bool(0.5);
    let (m1, m0) = observed_sizes(sizes, src.n, src.c2, coin);
    let treatment = rng.random_bool(0.5) as u8;
    let mut draw = |m: usize| {
        let mut v = sample(rng, src.n as usize, m).into_vec();
        v.sort_unstable();
        v
    };
    let s1 = draw(m1);
    let s0 = draw(m0);

    let (sel, ys) = if treatment == 1 { (&s1, &y1) } else { (&s0, &y0) };
    let record = ClusterRecord::new(
        id,
        treatment,
        Some(src.n),
        vec![src.c1, src.c2],
        sel.iter().map(|&j| ys[j]).collect(),
        sel.iter().flat_map(|&j| src.x[j]).collect(),
    )
    .expect("simulated clusters satisfy the record invariants");
    let pc = PotentialCluster {
        n: src.n,
        c1: src.c1,
        c2: src.c2,
        x: src.x,
        y1,
        y0,
        s1,
        s0,
        m1,
        m0,
        gamma: src.gamma,
        treatment,
    };
    (pc, record)
}

/// Random stream of replicate `r`: the master seed selects the key and the
/// replicate index selects the stream, so each replicate's data are fixed
/// regardless of scheduling.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Observed data and potential clusters of replicate `r`.
pub fn generate_replicate(cfg: &ScenarioConfig, r: u64) -> (Vec<PotentialCluster>, Result<TrialDataset>) {
    let mut rng = replicate_rng(cfg.seed, r);
    let (pcs, recs): (Vec<_>, Vec<_>) = (0..cfg.m)
        .map(|i| generate_cluster(cfg.experiment, cfg.sizes(), format!("c{}", i + 1), &mut rng))
        .unzip();
    let ds = TrialDataset::new(recs, 0.5, vec!["c1".into(), "c2".into()], vec!["x1".into(), "x2".into()]);
    (pcs, ds)
}

pub fn generate_dataset(cfg: &ScenarioConfig, r: u64) -> Result<TrialDataset> {
    generate_replicate(cfg, r).1
}

/// `(Delta_C, Delta_I)` used as truth in the study.
pub fn true_estimands(experiment: Experiment) -> (f64, f64) {
    match experiment {
        // E[N/5] and E[N^2/5] / E[N] with N uniform on {10, 50}.
        Experiment::Continuous => (6.0, 26.0 / 3.0),
        Experiment::Binary => (1.54, 1.18),
    }
}

/// Monte-Carlo estimate of `(Delta_C, Delta_I)` from at least
/// `individuals` simulated source-population members, averaging the
/// conditional outcome means.
pub fn monte_carlo_truth(experiment: Experiment, individuals: usize, seed: u64) -> (f64, f64) {
    let chunk = 200_000usize;
    let chunks = individuals.div_ceil(chunk);
    let parts: Vec<[f64; 6]> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, k as u64);
            let mut acc = [0.0; 6];
            let mut seen = 0usize;
            while seen < chunk {
                let s = draw_source(&mut rng);
                let (mut a1, mut a0) = (0.0, 0.0);
                for x in &s.x {
                    let (p1, p0) = outcome_means(experiment, &s, x);
                    a1 += p1;
                    a0 += p0;
                }
                let nf = s.n as f64;
                acc[0] += a1 / nf;
                acc[1] += a0 / nf;
                acc[2] += a1;
                acc[3] += a0;
                acc[4] += 1.0;
                acc[5] += nf;
                seen += s.n as usize;
            }
            acc
        })
        .collect();
    // Totals in fixed chunk order: [sum of cluster means (a = 1, 0),
    // sum of individual means (a = 1, 0), clusters, individuals].
    let mut tot = [0.0; 6];
    for p in &parts {
        for k in 0..6 {
            tot[k] += p[k];
        }
    }
    let mc = |a: f64, b: f64| experiment.measure().apply(a, b).expect("truth means are in range");
    let mu_c = (tot[0] / tot[4], tot[1] / tot[4]);
    let mu_i = (tot[2] / tot[5], tot[3] / tot[5]);
    (mc(mu_c.0, mu_c.1), mc(mu_i.0, mu_i.1))
}

/// Per-replicate outcome of one estimator at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateEstimate {
    pub delta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: EstimatorTag,
    pub level: Level,
    pub truth: f64,
    pub bias: f64,
    pub ese: f64,
    pub ase: f64,
    pub cp: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Summaries plus the raw per-replicate estimates, keyed like `rows`.
#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub config: ScenarioConfig,
    pub rows: Vec<MetricsRow>,
    pub estimates: Vec<Vec<Option<ReplicateEstimate>>>,
    /// First error message per row, if any replicate failed.
    pub first_errors: Vec<Option<String>>,
}

impl MonteCarloReport {
    pub fn row(&self, tag: EstimatorTag, level: Level) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == tag && r.level == level)
    }

    pub fn estimates_for(&self, tag: EstimatorTag, level: Level) -> Option<&[Option<ReplicateEstimate>]> {
        self.rows
            .iter()
            .position(|r| r.estimator == tag && r.level == level)
            .map(|k| self.estimates[k].as_slice())
    }
}

fn summarize(estimator: EstimatorTag, level: Level, truth: f64, est: &[Option<ReplicateEstimate>]) -> MetricsRow {
    let ok: Vec<&ReplicateEstimate> = est.iter().flatten().collect();
    let n = ok.len() as f64;
    let mean = ok.iter().map(|e| e.delta).sum::<f64>() / n;
    let ese = if ok.len() > 1 {
        (ok.iter().map(|e| (e.delta - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricsRow {
        estimator,
        level,
        truth,
        bias: mean - truth,
        ese,
        ase: ok.iter().map(|e| e.se).sum::<f64>() / n,
        cp: ok.iter().filter(|e| e.ci_low <= truth && truth <= e.ci_high).count() as f64 / n,
        replicates: est.len(),
        failures: est.len() - ok.len(),
    }
}

/// Runs every `(estimator, level)` pair on `cfg.replicates` simulated
/// datasets. Replicates run in parallel on the current rayon pool; the
/// result does not depend on the pool size.
pub fn run_monte_carlo(
    cfg: &ScenarioConfig,
    estimators: &[EstimatorTag],
    levels: &[Level],
    settings: &EstimatorSettings,
) -> Result<MonteCarloReport> {
    cfg.validate()?;
    if estimators.is_empty() || levels.is_empty() {
        return Err(Error::Config("at least one estimator and one level are required".into()));
    }
    let pairs: Vec<(EstimatorTag, Level)> = estimators
        .iter()
        .flat_map(|&t| levels.iter().map(move |&l| (t, l)))
        .collect();
    let measure = cfg.experiment.measure();
    let per_rep: Vec<Vec<std::result::Result<ReplicateEstimate, String>>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let ds = generate_dataset(cfg, r);
            pairs
                .iter()
                .map(|&(tag, level)| {
                    let ds = ds.as_ref().map_err(|e| e.to_string())?;
                    let spec = EstimandSpec::new(level, measure, PopulationMode::Source).map_err(|e| e.to_string())?;
                    let mut s = settings.clone();
                    s.seed = settings.seed.wrapping_add(r);
                    run_estimator(tag, ds, &spec, &s)
                        .map(|res| ReplicateEstimate {
                            delta: res.delta,
                            se: res.se,
                            ci_low: res.ci_low,
                            ci_high: res.ci_high,
                        })
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect();

    let truth = true_estimands(cfg.experiment);
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    let mut first_errors = Vec::new();
    for (k, &(tag, level)) in pairs.iter().enumerate() {
        let col: Vec<Option<ReplicateEstimate>> = per_rep.iter().map(|r| r[k].as_ref().ok().copied()).collect();
        let err = per_rep.iter().find_map(|r| r[k].as_ref().err().cloned());
        let t = match level {
            Level::Cluster => truth.0,
            Level::Individual => truth.1,
        };
        let row = summarize(tag, level, t, &col);
        if row.failures as f64 > MAX_FAILURE_RATE * cfg.replicates as f64 {
            return Err(Error::TooManyFailures {
                estimator: format!("{} ({})", tag.label(), level_key(level)),
                failed: row.failures,
                total: cfg.replicates,
            });
        }
        rows.push(row);
        estimates.push(col);
        first_errors.push(err);
    }
    Ok(MonteCarloReport {
        config: *cfg,
        rows,
        estimates,
        first_errors,
    })
}

pub fn level_key(level: Level) -> &'static str {
    match level {
        Level::Cluster => "cluster",
        Level::Individual => "individual",
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

/// Long-format metrics table, one line per `(estimator, level)`.
pub fn metrics_csv(report: &MonteCarloReport) -> String {
    let c = &report.config;
    let setting = format!("{}-scenario{}-m{}", c.experiment.key(), c.scenario, c.m);
    let mut out = String::from("setting,method,estimand,truth,bias,ese,ase,cp,replicates,failures\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{setting},{},{},{},{},{},{},{},{},{}\n",
            r.estimator.label(),
            level_key(r.level),
            fmt_metric(r.truth),
            fmt_metric(r.bias),
            fmt_metric(r.ese),
            fmt_metric(r.ase),
            fmt_metric(r.cp),
            r.replicates,
            r.failures
        ));
    }
    out
}

/// Wide summary with the two estimands side by side.
pub fn summary_table(report: &MonteCarloReport) -> String {
    let mut out = format!(
        "{:<11} {:>8} {:>8} {:>8} {:>6}   {:>8} {:>8} {:>8} {:>6}\n",
        "Method", "Bias_C", "ESE_C", "ASE_C", "CP_C", "Bias_I", "ESE_I", "ASE_I", "CP_I"
    );
    let mut tags: Vec<EstimatorTag> = report.rows.iter().map(|r| r.estimator).collect();
    tags.dedup();
    for tag in tags {
        let cell = |level: Level| match report.row(tag, level) {
            Some(r) => format!("{:>8.3} {:>8.3} {:>8.3} {:>6.3}", r.bias, r.ese, r.ase, r.cp),
            None => format!("{:>8} {:>8} {:>8} {:>6}", "-", "-", "-", "-"),
        };
        out.push_str(&format!("{:<11} {}   {}\n", tag.label(), cell(Level::Cluster), cell(Level::Individual)));
    }
    out
}
