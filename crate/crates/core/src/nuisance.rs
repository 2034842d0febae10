//! Nuisance functions of the efficient estimator:
//!
//! * `eta_a`: mean observed outcome of a cluster under arm `a`, given its
//!   individual covariates and `(M, N, C)`;
//! * `zeta_a`: the same mean given only `(N, C)`;
//! * `kappa_a`: probability of arm `a` given `(M, N, C)`.
//!
//! Parametric fits are ordinary GLMs whose estimating equations are kept
//! for the stacked sandwich variance; cross-fitted fits use the stacking
//! ensemble on out-of-fold clusters.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterRecord, Level, TrialDataset};
use crate::error::{Error, Result};
use crate::learners::{fit_stacking_ensemble, LearnerSpec, StackedPredictor, Task, INNER_FOLDS, PROB_FLOOR};
use crate::numerics::{self, GlmStatus, Link};

/// Cluster-level feature maps (an intercept is always added by GLMs).
#[derive(Clone, Copy)]
pub enum ClusterFeatures {
    InterceptOnly,
    /// `(N, C)`.
    Standard,
    /// `(N, C, M)`.
    WithSize,
    /// `(Xbar, N, C, M)`.
    Summary,
    Custom(fn(&ClusterRecord) -> Vec<f64>),
}

/// Individual-level feature maps for `eta`.
#[derive(Clone, Copy)]
pub enum IndividualFeatures {
    InterceptOnly,
    /// `(X_ij, N, C, M)`.
    Standard,
    /// `(X_ij, Xbar, N, C, M)`.
    WithClusterMeans,
    Custom(fn(&ClusterRecord, usize) -> Vec<f64>),
}

impl fmt::Debug for ClusterFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterFeatures::InterceptOnly => "InterceptOnly",
            ClusterFeatures::Standard => "Standard",
            ClusterFeatures::WithSize => "WithSize",
            ClusterFeatures::Summary => "Summary",
            ClusterFeatures::Custom(_) => "Custom",
        })
    }
}

impl fmt::Debug for IndividualFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndividualFeatures::InterceptOnly => "InterceptOnly",
            IndividualFeatures::Standard => "Standard",
            IndividualFeatures::WithClusterMeans => "WithClusterMeans",
            IndividualFeatures::Custom(_) => "Custom",
        })
    }
}

/// How `eta_a` is modeled.
#[derive(Debug, Clone, Copy)]
pub enum EtaModel {
    /// Regress `Y_ij` on individual features, then average the
    /// predictions within each cluster.
    Individual(IndividualFeatures),
    /// Regress the cluster mean `Ybar_i` on cluster features directly.
    ClusterMean(ClusterFeatures),
}

#[derive(Debug, Clone, Copy)]
pub struct NuisanceModels {
    pub eta: EtaModel,
    pub zeta: ClusterFeatures,
    pub kappa: ClusterFeatures,
}

impl NuisanceModels {
    pub fn parametric_default() -> Self {
        Self {
            eta: EtaModel::Individual(IndividualFeatures::Standard),
            zeta: ClusterFeatures::Standard,
            kappa: ClusterFeatures::WithSize,
        }
    }

    pub fn machine_learning_default() -> Self {
        Self {
            eta: EtaModel::Individual(IndividualFeatures::WithClusterMeans),
            zeta: ClusterFeatures::Standard,
            kappa: ClusterFeatures::WithSize,
        }
    }

    pub fn intercept_only() -> Self {
        Self {
            eta: EtaModel::Individual(IndividualFeatures::InterceptOnly),
            zeta: ClusterFeatures::InterceptOnly,
            kappa: ClusterFeatures::InterceptOnly,
        }
    }

    /// Constant `eta = zeta` equal to the (weighted) arm mean of cluster
    /// means: the efficient score then reduces to the unadjusted estimator.
    pub fn unadjusted() -> Self {
        Self {
            eta: EtaModel::ClusterMean(ClusterFeatures::InterceptOnly),
            zeta: ClusterFeatures::InterceptOnly,
            kappa: ClusterFeatures::InterceptOnly,
        }
    }
}

/// Appends `N` (when known) and the cluster covariates, then `M` when
/// requested.
///
/// `M` goes last on purpose. Within one arm `M` is often a function of
/// `(N, C)` (for example when enrollment depends on cluster size), and the
/// aliased-column rule drops the later of two dependent columns. Keeping
/// the pre-randomization columns keeps the fit sensible on clusters of
/// the other arm, whose `M` can lie outside this arm's range.
fn cluster_terms(c: &ClusterRecord, with_m: bool, out: &mut Vec<f64>) {
    if let Some(n) = c.source_size {
        out.push(n as f64);
    }
    out.extend_from_slice(&c.cluster_covariates);
    if with_m {
        out.push(c.m());
    }
}

pub fn cluster_features(kind: ClusterFeatures, c: &ClusterRecord) -> Vec<f64> {
    let mut v = Vec::new();
    match kind {
        ClusterFeatures::InterceptOnly => {}
        ClusterFeatures::Standard => cluster_terms(c, false, &mut v),
        ClusterFeatures::WithSize => cluster_terms(c, true, &mut v),
        ClusterFeatures::Summary => {
            v.extend(c.mean_x());
            cluster_terms(c, true, &mut v);
        }
        ClusterFeatures::Custom(f) => v = f(c),
    }
    v
}

pub fn individual_features(kind: IndividualFeatures, c: &ClusterRecord, j: usize, xbar: &[f64]) -> Vec<f64> {
    let mut v = Vec::new();
    match kind {
        IndividualFeatures::InterceptOnly => {}
        IndividualFeatures::Standard => {
            v.extend_from_slice(c.x_row(j));
            cluster_terms(c, true, &mut v);
        }
        IndividualFeatures::WithClusterMeans => {
            v.extend_from_slice(c.x_row(j));
            v.extend_from_slice(xbar);
            cluster_terms(c, true, &mut v);
        }
        IndividualFeatures::Custom(f) => v = f(c, j),
    }
    v
}

/// Fitted nuisance values per cluster. Index `[0]` is arm 1, `[1]` arm 0.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub eta: Vec<[f64; 2]>,
    pub zeta: Vec<[f64; 2]>,
    /// `kappa_1`, clamped to `[0.01, 0.99]`; `kappa_0 = 1 - kappa_1`.
    pub kappa1: Vec<f64>,
    pub kind: NuisanceKind,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub enum NuisanceKind {
    Parametric(Box<ParametricSystem>),
    CrossFitted { folds: Vec<usize>, k: usize, seed: u64 },
}

impl NuisanceFit {
    pub fn kappa(&self, i: usize, arm: u8) -> f64 {
        if arm == 1 {
            self.kappa1[i]
        } else {
            1.0 - self.kappa1[i]
        }
    }
}

/// One GLM inside the stacked system: link and the free (non-aliased)
/// design columns.
#[derive(Debug, Clone)]
pub struct GlmBlock {
    pub link: Link,
    pub dim: usize,
    pub free: Vec<usize>,
    /// IRLS stopped at the separation guard; the coefficients are not a
    /// root of the score equations.
    pub separated: bool,
}

impl GlmBlock {
    fn eta(&self, row: &[f64], theta: &[f64]) -> f64 {
        self.free.iter().zip(theta).map(|(&k, t)| row[k] * t).sum()
    }
}

/// Parametric nuisance models and their joint estimating equations.
#[derive(Debug, Clone)]
pub struct ParametricSystem {
    /// Estimand weight of each cluster, applied to every equation.
    pub omega: Vec<f64>,
    pub treated: Vec<bool>,
    pub ybar: Vec<f64>,
    /// `Some` when `eta` is fit separately from `zeta`.
    pub eta: Option<EtaSystem>,
    pub zeta_rows: Vec<Vec<f64>>,
    pub zeta_blocks: [GlmBlock; 2],
    pub kappa_rows: Vec<Vec<f64>>,
    pub kappa_block: GlmBlock,
    /// Fitted nuisance parameters, `[eta_1, eta_0, zeta_1, zeta_0, kappa]`.
    pub theta: Vec<f64>,
    pub pi: f64,
}

#[derive(Debug, Clone)]
pub struct EtaSystem {
    pub individual: bool,
    /// Per cluster: row-major rows (individual level) or one row.
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub blocks: [GlmBlock; 2],
}

fn row_with_intercept(mut v: Vec<f64>) -> Vec<f64> {
    v.insert(0, 1.0);
    v
}

/// Predictions `(eta1, eta0, zeta1, zeta0, kappa1)` for one cluster.
type Fitted = [f64; 5];

impl ParametricSystem {
    /// True when any nuisance GLM stopped at the separation guard.
    pub fn any_separated(&self) -> bool {
        let eta = self.eta.as_ref().is_some_and(|e| e.blocks.iter().any(|b| b.separated));
        eta || self.zeta_blocks.iter().any(|b| b.separated) || self.kappa_block.separated
    }

    fn blocks_len(&self) -> Vec<usize> {
        let mut v = Vec::new();
        if let Some(e) = &self.eta {
            v.push(e.blocks[0].free.len());
            v.push(e.blocks[1].free.len());
        }
        v.push(self.zeta_blocks[0].free.len());
        v.push(self.zeta_blocks[1].free.len());
        v.push(self.kappa_block.free.len());
        v
    }

    fn split<'t>(&self, theta: &'t [f64]) -> Vec<&'t [f64]> {
        let mut out = Vec::new();
        let mut at = 0;
        for len in self.blocks_len() {
            out.push(&theta[at..at + len]);
            at += len;
        }
        out
    }

    fn fitted(&self, i: usize, theta: &[f64]) -> Fitted {
        let parts = self.split(theta);
        let off = if self.eta.is_some() { 2 } else { 0 };
        let zr = &self.zeta_rows[i];
        let z1 = self.zeta_blocks[0].link.inverse(self.zeta_blocks[0].eta(zr, parts[off]));
        let z0 = self.zeta_blocks[1].link.inverse(self.zeta_blocks[1].eta(zr, parts[off + 1]));
        let k = numerics::expit(self.kappa_block.eta(&self.kappa_rows[i], parts[off + 2]))
            .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let (e1, e0) = match &self.eta {
            None => (z1, z0),
            Some(e) => {
                let mean = |b: usize| {
                    let blk = &e.blocks[b];
                    let rows = &e.rows[i];
                    let count = rows.len() / blk.dim;
                    (0..count)
                        .map(|j| blk.link.inverse(blk.eta(&rows[j * blk.dim..(j + 1) * blk.dim], parts[b])))
                        .sum::<f64>()
                        / count as f64
                };
                (mean(0), mean(1))
            }
        };
        [e1, e0, z1, z0, k]
    }

    /// GLM score rows for cluster `i` (without the estimand weight).
    fn scores(&self, i: usize, theta: &[f64], out: &mut Vec<f64>) {
        let parts = self.split(theta);
        let mut b = 0;
        if let Some(e) = &self.eta {
            for (arm, blk) in e.blocks.iter().enumerate() {
                let on = self.treated[i] == (arm == 0);
                let start = out.len();
                out.resize(start + blk.free.len(), 0.0);
                if on {
                    let rows = &e.rows[i];
                    for (j, y) in e.y[i].iter().enumerate() {
                        let row = &rows[j * blk.dim..(j + 1) * blk.dim];
                        let r = y - blk.link.inverse(blk.eta(row, parts[b]));
                        for (s, &k) in blk.free.iter().enumerate() {
                            out[start + s] += row[k] * r;
                        }
                    }
                }
                b += 1;
            }
        }
        for (arm, blk) in self.zeta_blocks.iter().enumerate() {
            let on = self.treated[i] == (arm == 0);
            let row = &self.zeta_rows[i];
            let r = if on {
                self.ybar[i] - blk.link.inverse(blk.eta(row, parts[b]))
            } else {
                0.0
            };
            out.extend(blk.free.iter().map(|&k| row[k] * r));
            b += 1;
        }
        let row = &self.kappa_rows[i];
        let a = if self.treated[i] { 1.0 } else { 0.0 };
        let r = a - numerics::expit(self.kappa_block.eta(row, parts[b]));
        out.extend(self.kappa_block.free.iter().map(|&k| row[k] * r));
    }

    /// Efficient scores `(D_i(1), D_i(0))` at nuisance parameters `theta`.
    pub fn scores_at(&self, i: usize, theta: &[f64], ybar: f64) -> (f64, f64) {
        let f = self.fitted(i, theta);
        let a = if self.treated[i] { 1 } else { 0 };
        (
            efficient_score(a, 1, ybar, f[0], f[2], f[4], self.pi),
            efficient_score(a, 0, ybar, f[1], f[3], 1.0 - f[4], self.pi),
        )
    }

    /// Stacked estimating function for cluster `i` at `(mu1, mu0, theta)`.
    pub fn psi(&self, i: usize, full: &[f64]) -> Vec<f64> {
        let (mu, theta) = full.split_at(2);
        let (d1, d0) = self.scores_at(i, theta, self.ybar[i]);
        let mut out = Vec::with_capacity(full.len());
        out.push(mu[0] - d1);
        out.push(mu[1] - d0);
        self.scores(i, theta, &mut out);
        let w = self.omega[i];
        out.iter_mut().for_each(|v| *v *= w);
        out
    }

    pub fn fitted_all(&self) -> Vec<Fitted> {
        (0..self.omega.len()).map(|i| self.fitted(i, &self.theta)).collect()
    }
}

/// `D = I{A = a} / pi_a (Ybar - eta) + kappa / pi_a (eta - zeta) + zeta`.
pub fn efficient_score(treatment: u8, arm: u8, ybar: f64, eta: f64, zeta: f64, kappa: f64, pi: f64) -> f64 {
    let pi_a = if arm == 1 { pi } else { 1.0 - pi };
    let ind = if treatment == arm { 1.0 } else { 0.0 };
    ind / pi_a * (ybar - eta) + kappa / pi_a * (eta - zeta) + zeta
}

/// Estimand weights for nuisance fitting and score averaging.
pub fn level_weights(ds: &TrialDataset, level: Level) -> Result<Vec<f64>> {
    ds.clusters
        .iter()
        .map(|c| match level {
            Level::Cluster => Ok(1.0),
            Level::Individual => c.source_size_f64(),
        })
        .collect()
}

fn outcome_link(ds: &TrialDataset) -> Link {
    if ds.has_binary_outcome() {
        Link::Logit
    } else {
        Link::Identity
    }
}

/// Fits one weighted GLM on the given rows and returns its block and
/// free coefficients; flags separation in `warnings`.
fn fit_block(
    rows: &[&[f64]],
    y: &[f64],
    w: &[f64],
    link: Link,
    stage: &str,
    warnings: &mut Vec<String>,
) -> Result<(GlmBlock, Vec<f64>)> {
    let dim = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), dim, |i, k| rows[i][k]);
    let fit = numerics::fit_glm_aliased(&x, y, link, w)?;
    match fit.status {
        GlmStatus::Converged => {}
        GlmStatus::SeparationSuspected => warnings.push(format!(
            "{stage}: fitted probabilities reach 0 or 1 (separation)"
        )),
        GlmStatus::NotConverged => {
            return Err(Error::NonConvergence {
                stage: stage.to_string(),
                iterations: fit.iterations,
            })
        }
    }
    if !fit.aliased.is_empty() {
        warnings.push(format!(
            "{stage}: dropped {} linearly dependent column(s)",
            fit.aliased.len()
        ));
    }
    let free = fit.free_columns();
    let theta = free.iter().map(|&k| fit.coefficients[k]).collect();
    let separated = fit.status == GlmStatus::SeparationSuspected;
    Ok((GlmBlock { link, dim, free, separated }, theta))
}

const MIN_CLUSTERS_FOR_COVARIATES: usize = 3;

/// Parametric working models for `(eta_a, zeta_a, kappa_a)`.
///
/// At the individual level every fit is weighted by `N_i`. With
/// `eta_equals_zeta` (source sizes unknown) only `zeta` is fit and reused
/// for `eta`.
pub fn fit_parametric_nuisances(
    ds: &TrialDataset,
    level: Level,
    models: &NuisanceModels,
    eta_equals_zeta: bool,
) -> Result<NuisanceFit> {
    let omega = level_weights(ds, level)?;
    let link = outcome_link(ds);
    let mut warnings = Vec::new();
    let treated: Vec<bool> = ds.clusters.iter().map(|c| c.is_treated()).collect();
    let ybar: Vec<f64> = ds.clusters.iter().map(|c| c.mean_outcome()).collect();
    let arm_members = |arm: usize| -> Vec<usize> { (0..ds.m()).filter(|&i| treated[i] == (arm == 0)).collect() };

    let zeta_rows: Vec<Vec<f64>> = ds
        .clusters
        .iter()
        .map(|c| row_with_intercept(cluster_features(models.zeta, c)))
        .collect();
    if zeta_rows[0].len() > 1 {
        for arm in [1u8, 0] {
            let count = ds.arm_size(arm);
            if count < MIN_CLUSTERS_FOR_COVARIATES {
                return Err(Error::ArmTooSmall {
                    arm,
                    count,
                    required: MIN_CLUSTERS_FOR_COVARIATES,
                });
            }
        }
    }

    let mut theta = Vec::new();
    let eta = if eta_equals_zeta {
        None
    } else {
        let (individual, rows, ys): (bool, Vec<Vec<f64>>, Vec<Vec<f64>>) = match models.eta {
            EtaModel::Individual(kind) => {
                let rows = ds
                    .clusters
                    .iter()
                    .map(|c| {
                        let xbar = c.mean_x();
                        (0..c.observed_size())
                            .flat_map(|j| row_with_intercept(individual_features(kind, c, j, &xbar)))
                            .collect()
                    })
                    .collect();
                (true, rows, ds.clusters.iter().map(|c| c.outcomes.clone()).collect())
            }
            EtaModel::ClusterMean(kind) => (
                false,
                ds.clusters
                    .iter()
                    .map(|c| row_with_intercept(cluster_features(kind, c)))
                    .collect(),
                ybar.iter().map(|&y| vec![y]).collect(),
            ),
        };
        let dim = if individual {
            rows[0].len() / ds.clusters[0].observed_size()
        } else {
            rows[0].len()
        };
        let mut blocks = Vec::new();
        for arm in 0..2 {
            let (mut r, mut y, mut w): (Vec<&[f64]>, Vec<f64>, Vec<f64>) = (vec![], vec![], vec![]);
            for i in arm_members(arm) {
                for (j, yy) in ys[i].iter().enumerate() {
                    r.push(&rows[i][j * dim..(j + 1) * dim]);
                    y.push(*yy);
                    w.push(omega[i]);
                }
            }
            let stage = format!("eta model, arm {}", 1 - arm);
            let (blk, th) = fit_block(&r, &y, &w, link, &stage, &mut warnings)?;
            blocks.push(blk);
            theta.extend(th);
        }
        let blocks: [GlmBlock; 2] = blocks.try_into().expect("two arms");
        Some(EtaSystem {
            individual,
            rows,
            y: ys,
            blocks,
        })
    };

    let mut zeta_blocks = Vec::new();
    for arm in 0..2 {
        let idx = arm_members(arm);
        let r: Vec<&[f64]> = idx.iter().map(|&i| zeta_rows[i].as_slice()).collect();
        let y: Vec<f64> = idx.iter().map(|&i| ybar[i]).collect();
        let w: Vec<f64> = idx.iter().map(|&i| omega[i]).collect();
        let stage = format!("zeta model, arm {}", 1 - arm);
        let (blk, th) = fit_block(&r, &y, &w, link, &stage, &mut warnings)?;
        zeta_blocks.push(blk);
        theta.extend(th);
    }
    let zeta_blocks: [GlmBlock; 2] = zeta_blocks.try_into().expect("two arms");

    let kappa_rows: Vec<Vec<f64>> = ds
        .clusters
        .iter()
        .map(|c| row_with_intercept(cluster_features(models.kappa, c)))
        .collect();
    let r: Vec<&[f64]> = kappa_rows.iter().map(Vec::as_slice).collect();
    let a: Vec<f64> = treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let (kappa_block, th) = fit_block(&r, &a, &omega, Link::Logit, "kappa model", &mut warnings)?;
    theta.extend(th);

    let system = ParametricSystem {
        omega,
        treated,
        ybar,
        eta,
        zeta_rows,
        zeta_blocks,
        kappa_rows,
        kappa_block,
        theta,
        pi: ds.pi,
    };
    let fitted = system.fitted_all();
    Ok(NuisanceFit {
        eta: fitted.iter().map(|f| [f[0], f[1]]).collect(),
        zeta: fitted.iter().map(|f| [f[2], f[3]]).collect(),
        kappa1: fitted.iter().map(|f| f[4]).collect(),
        kind: NuisanceKind::Parametric(Box::new(system)),
        warnings,
    })
}

/// Learner libraries for the three nuisance functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerLibrary {
    pub eta: Vec<LearnerSpec>,
    pub zeta: Vec<LearnerSpec>,
    pub kappa: Vec<LearnerSpec>,
}

impl LearnerLibrary {
    pub fn default_for(binary_outcome: bool) -> Self {
        Self {
            eta: LearnerSpec::default_library(binary_outcome),
            zeta: LearnerSpec::default_library(binary_outcome),
            kappa: vec![
                LearnerSpec::GlmLogit,
                LearnerSpec::Tree {
                    max_depth: 3,
                    min_leaf: 5,
                },
            ],
        }
    }
}

/// Seeded partition of `m` clusters into `k` folds whose sizes differ by at
/// most one. Returns each cluster's fold.
pub fn fold_partition(m: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; m];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

fn folds_cover_both_arms(ds: &TrialDataset, folds: &[usize], k: usize) -> Option<u8> {
    for f in 0..k {
        for arm in [1u8, 0] {
            let n = ds
                .clusters
                .iter()
                .zip(folds)
                .filter(|(c, &g)| g != f && c.treatment == arm)
                .count();
            if n == 0 {
                return Some(arm);
            }
        }
    }
    None
}

/// Training rows for `eta` from clusters `idx`: features, targets, groups.
fn eta_training(
    ds: &TrialDataset,
    idx: &[usize],
    models: &NuisanceModels,
) -> (DMatrix<f64>, Vec<f64>, Vec<usize>) {
    let mut feats = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for &i in idx {
        let c = &ds.clusters[i];
        match models.eta {
            EtaModel::Individual(kind) => {
                let xbar = c.mean_x();
                for j in 0..c.observed_size() {
                    feats.push(individual_features(kind, c, j, &xbar));
                    y.push(c.outcomes[j]);
                    groups.push(i);
                }
            }
            EtaModel::ClusterMean(kind) => {
                feats.push(cluster_features(kind, c));
                y.push(c.mean_outcome());
                groups.push(i);
            }
        }
    }
    (to_matrix(&feats), y, groups)
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k])
}

fn predict_eta(p: &StackedPredictor, c: &ClusterRecord, models: &NuisanceModels) -> f64 {
    match models.eta {
        EtaModel::Individual(kind) => {
            let xbar = c.mean_x();
            (0..c.observed_size())
                .map(|j| p.predict(&individual_features(kind, c, j, &xbar)))
                .sum::<f64>()
                / c.m()
        }
        EtaModel::ClusterMean(kind) => p.predict(&cluster_features(kind, c)),
    }
}

struct FoldPredictions {
    members: Vec<usize>,
    eta: Vec<[f64; 2]>,
    zeta: Vec<[f64; 2]>,
    kappa1: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn fit_fold(
    ds: &TrialDataset,
    members: Vec<usize>,
    train: Vec<usize>,
    f: usize,
    models: &NuisanceModels,
    library: &LearnerLibrary,
    eta_equals_zeta: bool,
    seed: u64,
) -> Result<FoldPredictions> {
    let task = if ds.has_binary_outcome() {
        Task::Probability
    } else {
        Task::Regression
    };
    let inner_seed = |tag: u64| seed ^ ((f as u64 + 1) << 32) ^ tag;
    let mut eta = vec![[0.0; 2]; members.len()];
    let mut zeta = vec![[0.0; 2]; members.len()];
    for (slot, arm) in [1u8, 0].into_iter().enumerate() {
        let idx: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| ds.clusters[i].treatment == arm)
            .collect();
        let zx = to_matrix(&idx.iter().map(|&i| cluster_features(models.zeta, &ds.clusters[i])).collect::<Vec<_>>());
        let zy: Vec<f64> = idx.iter().map(|&i| ds.clusters[i].mean_outcome()).collect();
        let zp = fit_stacking_ensemble(&zx, &zy, None, &library.zeta, INNER_FOLDS, task, inner_seed(10 + slot as u64))?;
        let ep = if eta_equals_zeta {
            None
        } else {
            let (ex, ey, groups) = eta_training(ds, &idx, models);
            Some(fit_stacking_ensemble(&ex, &ey, Some(&groups), &library.eta, INNER_FOLDS, task, inner_seed(20 + slot as u64))?)
        };
        for (r, &i) in members.iter().enumerate() {
            let c = &ds.clusters[i];
            zeta[r][slot] = zp.predict(&cluster_features(models.zeta, c));
            eta[r][slot] = match &ep {
                Some(p) => predict_eta(p, c, models),
                None => zeta[r][slot],
            };
        }
    }
    let kx = to_matrix(&train.iter().map(|&i| cluster_features(models.kappa, &ds.clusters[i])).collect::<Vec<_>>());
    let ka: Vec<f64> = train.iter().map(|&i| ds.clusters[i].treatment as f64).collect();
    let kp = fit_stacking_ensemble(&kx, &ka, None, &library.kappa, INNER_FOLDS, Task::Probability, inner_seed(30))?;
    let kappa1 = members
        .iter()
        .map(|&i| kp.predict(&cluster_features(models.kappa, &ds.clusters[i])))
        .collect();
    Ok(FoldPredictions {
        members,
        eta,
        zeta,
        kappa1,
    })
}

/// Cross-fitted nuisance predictions: for each fold, every nuisance is
/// trained on the other folds and evaluated on this one.
pub fn fit_crossfit_nuisances(
    ds: &TrialDataset,
    k: usize,
    models: &NuisanceModels,
    library: &LearnerLibrary,
    eta_equals_zeta: bool,
    seed: u64,
) -> Result<NuisanceFit> {
    let m = ds.m();
    if k == 0 || k > m {
        return Err(Error::Config(format!(
            "{k} folds for {m} clusters; need 1 <= K <= m"
        )));
    }
    let mut warnings = Vec::new();
    if k >= 2 && m / k < 10 {
        warnings.push(format!("m/K < 10 ({m} clusters, {k} folds); cross-fitting may be unstable"));
    }
    let mut fold_seed = seed;
    let mut folds = fold_partition(m, k, fold_seed);
    if k >= 2 {
        if folds_cover_both_arms(ds, &folds, k).is_some() {
            fold_seed = seed.wrapping_add(1);
            folds = fold_partition(m, k, fold_seed);
        }
        if let Some(arm) = folds_cover_both_arms(ds, &folds, k) {
            return Err(Error::EmptyTrainingArm(arm));
        }
    } else {
        // K = 1 trains and evaluates on the same clusters; kept for testing.
        folds = vec![0; m];
    }
    let fold_list: Vec<usize> = (0..k).collect();
    let per_fold = fold_list
        .par_iter()
        .map(|&f| {
            let members: Vec<usize> = (0..m).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = if k == 1 {
                (0..m).collect()
            } else {
                (0..m).filter(|&i| folds[i] != f).collect()
            };
            fit_fold(ds, members, train, f, models, library, eta_equals_zeta, fold_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut eta = vec![[0.0; 2]; m];
    let mut zeta = vec![[0.0; 2]; m];
    let mut kappa1 = vec![0.0; m];
    for p in per_fold {
        for (r, &i) in p.members.iter().enumerate() {
            eta[i] = p.eta[r];
            zeta[i] = p.zeta[r];
            kappa1[i] = p.kappa1[r];
        }
    }
    Ok(NuisanceFit {
        eta,
        zeta,
        kappa1,
        kind: NuisanceKind::CrossFitted {
            folds,
            k,
            seed: fold_seed,
        },
        warnings,
    })
}
