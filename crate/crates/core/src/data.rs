//! Observed-data representation, estimand specification and effect-measure
//! algebra shared by every estimator.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;

/// Observed data for one cluster: outcomes and individual covariates for
/// the `M` sampled individuals, plus cluster-level quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: String,
    pub treatment: u8,
    /// Source population size `N`; absent when it is unknown.
    pub source_size: Option<u32>,
    pub cluster_covariates: Vec<f64>,
    pub outcomes: Vec<f64>,
    /// Row-major `M x p` matrix of individual covariates.
    pub indiv_covariates: Vec<f64>,
}

impl ClusterRecord {
    pub fn new(
        id: impl Into<String>,
        treatment: u8,
        source_size: Option<u32>,
        cluster_covariates: Vec<f64>,
        outcomes: Vec<f64>,
        indiv_covariates: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if treatment > 1 {
            return Err(Error::Domain(format!("cluster `{id}`: treatment must be 0 or 1")));
        }
        let m = outcomes.len();
        if m == 0 {
            return Err(Error::Domain(format!("cluster `{id}` has no observed individuals")));
        }
        if indiv_covariates.len() % m != 0 {
            return Err(Error::DimensionMismatch(format!(
                "cluster `{id}`: {} covariate values for {m} individuals",
                indiv_covariates.len()
            )));
        }
        if let Some(n) = source_size {
            if (n as usize) < m {
                return Err(Error::Domain(format!(
                    "cluster `{id}`: source size {n} is smaller than the observed size {m}"
                )));
            }
        }
        let finite = outcomes
            .iter()
            .chain(&cluster_covariates)
            .chain(&indiv_covariates)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("cluster `{id}` contains non-finite values")));
        }
        Ok(Self {
            id,
            treatment,
            source_size,
            cluster_covariates,
            outcomes,
            indiv_covariates,
        })
    }

    /// Observed cluster size `M`.
    pub fn observed_size(&self) -> usize {
        self.outcomes.len()
    }

    pub fn m(&self) -> f64 {
        self.outcomes.len() as f64
    }

    /// Number of individual-level covariates `p`.
    pub fn p(&self) -> usize {
        self.indiv_covariates.len() / self.outcomes.len()
    }

    pub fn source_size_f64(&self) -> Result<f64> {
        self.source_size.map(f64::from).ok_or(Error::LevelUnavailable)
    }

    pub fn x_row(&self, j: usize) -> &[f64] {
        let p = self.p();
        &self.indiv_covariates[j * p..(j + 1) * p]
    }

    pub fn mean_outcome(&self) -> f64 {
        self.outcomes.iter().sum::<f64>() / self.m()
    }

    /// Cluster means of the individual covariates.
    pub fn mean_x(&self) -> Vec<f64> {
        let p = self.p();
        let mut out = vec![0.0; p];
        for j in 0..self.observed_size() {
            for (o, v) in out.iter_mut().zip(self.x_row(j)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.m());
        out
    }

    pub fn is_treated(&self) -> bool {
        self.treatment == 1
    }
}

/// A validated collection of clusters from one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub clusters: Vec<ClusterRecord>,
    /// Randomization probability `pr(A = 1)`, a design constant.
    pub pi: f64,
    pub cluster_covariate_names: Vec<String>,
    pub indiv_covariate_names: Vec<String>,
}

pub const MIN_CLUSTERS_PER_ARM: usize = 2;

impl TrialDataset {
    pub fn new(
        clusters: Vec<ClusterRecord>,
        pi: f64,
        cluster_covariate_names: Vec<String>,
        indiv_covariate_names: Vec<String>,
    ) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Domain(format!("randomization probability {pi} is not in (0, 1)")));
        }
        let q = cluster_covariate_names.len();
        let p = indiv_covariate_names.len();
        for c in &clusters {
            if c.cluster_covariates.len() != q || c.p() != p {
                return Err(Error::DimensionMismatch(format!(
                    "cluster `{}` has {} cluster and {} individual covariates; expected {q} and {p}",
                    c.id,
                    c.cluster_covariates.len(),
                    c.p()
                )));
            }
        }
        let known = clusters.iter().filter(|c| c.source_size.is_some()).count();
        if known != 0 && known != clusters.len() {
            return Err(Error::Domain(
                "source sizes must be given for every cluster or for none".into(),
            ));
        }
        let ds = Self {
            clusters,
            pi,
            cluster_covariate_names,
            indiv_covariate_names,
        };
        for arm in [1u8, 0] {
            let count = ds.arm_size(arm);
            if count < MIN_CLUSTERS_PER_ARM {
                return Err(Error::EmptyArm {
                    arm,
                    count,
                    required: MIN_CLUSTERS_PER_ARM,
                });
            }
        }
        Ok(ds)
    }

    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn q(&self) -> usize {
        self.cluster_covariate_names.len()
    }

    pub fn p(&self) -> usize {
        self.indiv_covariate_names.len()
    }

    pub fn arm_size(&self, arm: u8) -> usize {
        self.clusters.iter().filter(|c| c.treatment == arm).count()
    }

    pub fn has_source_sizes(&self) -> bool {
        self.clusters.iter().all(|c| c.source_size.is_some())
    }

    pub fn total_individuals(&self) -> usize {
        self.clusters.iter().map(|c| c.observed_size()).sum()
    }

    /// True when every outcome is exactly 0 or 1.
    pub fn has_binary_outcome(&self) -> bool {
        self.clusters
            .iter()
            .flat_map(|c| &c.outcomes)
            .all(|&y| y == 0.0 || y == 1.0)
    }

    /// Copy of the dataset with the listed cluster removed (used by
    /// leave-one-out diagnostics). Skips the arm-size validation.
    pub fn without_cluster(&self, index: usize) -> Self {
        let mut out = self.clone();
        out.clusters.remove(index);
        out
    }

    /// Serializes back to individual-level rows under `schema`.
    pub fn to_table(&self, schema: &ColumnSchema) -> RawTable {
        let mut headers = vec![
            schema.cluster_id.clone(),
            schema.treatment.clone(),
            schema.outcome.clone(),
        ];
        if let Some(n) = &schema.source_size {
            headers.push(n.clone());
        }
        headers.extend(schema.cluster_covariates.iter().cloned());
        headers.extend(schema.indiv_covariates.iter().cloned());
        let mut rows = Vec::with_capacity(self.total_individuals());
        for c in &self.clusters {
            for j in 0..c.observed_size() {
                let mut row = vec![c.id.clone(), c.treatment.to_string(), fmt_num(c.outcomes[j])];
                if schema.source_size.is_some() {
                    row.push(c.source_size.map(|n| n.to_string()).unwrap_or_default());
                }
                row.extend(c.cluster_covariates.iter().map(|v| fmt_num(*v)));
                row.extend(c.x_row(j).iter().map(|v| fmt_num(*v)));
                rows.push(row);
            }
        }
        RawTable { headers, rows }
    }
}

fn fmt_num(v: f64) -> String {
    // `{}` on f64 prints the shortest representation that parses back exactly.
    format!("{v}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    /// Every cluster weighted equally.
    Cluster,
    /// Every individual of the source population weighted equally.
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Difference,
    Ratio,
    OddsRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationMode {
    /// Source population sizes come from a data column.
    Source,
    /// Everyone in the source population was enrolled: `N = M`.
    Enrolled,
    /// Source population sizes are not available.
    UnknownN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub level: Level,
    pub measure: Measure,
    pub population: PopulationMode,
}

impl EstimandSpec {
    pub fn new(level: Level, measure: Measure, population: PopulationMode) -> Result<Self> {
        if level == Level::Individual && population == PopulationMode::UnknownN {
            return Err(Error::LevelUnavailable);
        }
        Ok(Self {
            level,
            measure,
            population,
        })
    }

    pub fn cluster_difference() -> Self {
        Self {
            level: Level::Cluster,
            measure: Measure::Difference,
            population: PopulationMode::Source,
        }
    }
}

impl Measure {
    fn check(self, mu1: f64, mu0: f64) -> Result<()> {
        match self {
            Measure::Difference => Ok(()),
            Measure::Ratio if mu0 == 0.0 => {
                Err(Error::Domain("ratio measure with a zero control mean".into()))
            }
            Measure::Ratio => Ok(()),
            Measure::OddsRatio => {
                let inside = |v: f64| v > 0.0 && v < 1.0;
                if inside(mu1) && inside(mu0) {
                    Ok(())
                } else {
                    Err(Error::Domain(format!(
                        "odds ratio needs both arm means in (0, 1); got {mu1} and {mu0}"
                    )))
                }
            }
        }
    }

    /// `f(mu1, mu0)`.
    pub fn apply(self, mu1: f64, mu0: f64) -> Result<f64> {
        self.check(mu1, mu0)?;
        Ok(match self {
            Measure::Difference => mu1 - mu0,
            Measure::Ratio => mu1 / mu0,
            Measure::OddsRatio => mu1 * (1.0 - mu0) / (mu0 * (1.0 - mu1)),
        })
    }

    /// `(df/dmu1, df/dmu0)`.
    pub fn gradient(self, mu1: f64, mu0: f64) -> Result<(f64, f64)> {
        self.check(mu1, mu0)?;
        Ok(match self {
            Measure::Difference => (1.0, -1.0),
            Measure::Ratio => (1.0 / mu0, -mu1 / (mu0 * mu0)),
            Measure::OddsRatio => {
                let odds1 = mu1 / (1.0 - mu1);
                let odds0 = mu0 / (1.0 - mu0);
                let d1 = 1.0 / ((1.0 - mu1) * (1.0 - mu1)) / odds0;
                let d0 = -odds1 / (mu0 * mu0);
                (d1, d0)
            }
        })
    }
}

/// `delta -/+ t_{dof, 1-(1-level)/2} sqrt(variance)`.
pub fn t_confidence_interval(delta: f64, variance: f64, dof: usize, level: f64) -> (f64, f64) {
    assert!(variance >= 0.0 && dof >= 1 && level > 0.0 && level < 1.0);
    let q = numerics::t_quantile(1.0 - (1.0 - level) / 2.0, dof as f64);
    let half = q * variance.sqrt();
    (delta - half, delta + half)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorTag {
    Unadjusted,
    GeeG,
    LmmG,
    EffPm,
    EffMl,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 5] = [
        EstimatorTag::Unadjusted,
        EstimatorTag::GeeG,
        EstimatorTag::LmmG,
        EstimatorTag::EffPm,
        EstimatorTag::EffMl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorTag::Unadjusted => "Unadjusted",
            EstimatorTag::GeeG => "GEE-g",
            EstimatorTag::LmmG => "LMM-g",
            EstimatorTag::EffPm => "Eff-PM",
            EstimatorTag::EffMl => "Eff-ML",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            EstimatorTag::Unadjusted => "unadjusted",
            EstimatorTag::GeeG => "gee-g",
            EstimatorTag::LmmG => "lmm-g",
            EstimatorTag::EffPm => "eff-pm",
            EstimatorTag::EffMl => "eff-ml",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

/// Point estimate, arm means, variance and interval for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimator: EstimatorTag,
    pub level: Level,
    pub measure: Measure,
    pub delta: f64,
    pub mu1: f64,
    pub mu0: f64,
    pub variance: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub dof: usize,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl EstimateResult {
    pub fn new(
        estimator: EstimatorTag,
        spec: &EstimandSpec,
        mu1: f64,
        mu0: f64,
        variance: f64,
        dof: usize,
        ci_level: f64,
    ) -> Result<Self> {
        let delta = spec.measure.apply(mu1, mu0)?;
        if !delta.is_finite() || !variance.is_finite() {
            return Err(Error::NonFiniteEvaluation("estimate or variance".into()));
        }
        let variance = variance.max(0.0);
        let (ci_low, ci_high) = t_confidence_interval(delta, variance, dof.max(1), ci_level);
        Ok(Self {
            estimator,
            level: spec.level,
            measure: spec.measure,
            delta,
            mu1,
            mu0,
            variance,
            se: variance.sqrt(),
            ci_low,
            ci_high,
            ci_level,
            dof,
            diagnostics: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }

    pub fn with_diagnostic(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// String-valued table of individual-level records. Row `k` corresponds to
/// line `k + 2` of a CSV file with a header line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    /// Reads a headed, comma-separated UTF-8 table.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Config(format!("cannot read CSV header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidValue {
                row: k + 2,
                column: String::new(),
                message: e.to_string(),
            })?;
            rows.push(rec.iter().map(|s| s.trim().to_string()).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

/// Which table columns hold which observed quantities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub cluster_id: String,
    pub treatment: String,
    pub outcome: String,
    pub source_size: Option<String>,
    pub cluster_covariates: Vec<String>,
    pub indiv_covariates: Vec<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            cluster_id: "cluster_id".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            source_size: Some("source_size".into()),
            cluster_covariates: Vec::new(),
            indiv_covariates: Vec::new(),
        }
    }
}

fn cell<'a>(table: &'a RawTable, row: usize, col: usize, name: &str) -> Result<&'a str> {
    let v = table.rows[row].get(col).map(String::as_str).unwrap_or("");
    if v.is_empty() || v.eq_ignore_ascii_case("na") {
        return Err(Error::MissingValue {
            row: row + 2,
            column: name.to_string(),
        });
    }
    Ok(v)
}

fn parse_f64(table: &RawTable, row: usize, col: usize, name: &str) -> Result<f64> {
    let raw = cell(table, row, col, name)?;
    let v: f64 = raw.parse().map_err(|_| Error::InvalidValue {
        row: row + 2,
        column: name.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidValue {
            row: row + 2,
            column: name.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

struct Group {
    first_row: usize,
    treatment: f64,
    source_size: Option<f64>,
    cluster_covariates: Vec<f64>,
    outcomes: Vec<f64>,
    indiv: Vec<f64>,
}

/// Groups individual-level rows into clusters and checks that treatment,
/// source size and cluster covariates are constant within each cluster.
pub fn validate_dataset(
    table: &RawTable,
    schema: &ColumnSchema,
    population: PopulationMode,
    pi: f64,
) -> Result<TrialDataset> {
    let id_col = table.column(&schema.cluster_id)?;
    let a_col = table.column(&schema.treatment)?;
    let y_col = table.column(&schema.outcome)?;
    let n_col = match (population, &schema.source_size) {
        (PopulationMode::Source, Some(name)) => Some((table.column(name)?, name.as_str())),
        (PopulationMode::Source, None) => {
            return Err(Error::MissingColumn("source_size".into()));
        }
        _ => None,
    };
    let c_cols = schema
        .cluster_covariates
        .iter()
        .map(|n| table.column(n).map(|c| (c, n.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let x_cols = schema
        .indiv_covariates
        .iter()
        .map(|n| table.column(n).map(|c| (c, n.as_str())))
        .collect::<Result<Vec<_>>>()?;
    for (k, r) in table.rows.iter().enumerate() {
        if r.len() != table.headers.len() {
            return Err(Error::DimensionMismatch(format!(
                "row {} has {} fields; the header has {}",
                k + 2,
                r.len(),
                table.headers.len()
            )));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Group> = HashMap::new();
    for row in 0..table.rows.len() {
        let id = cell(table, row, id_col, &schema.cluster_id)?.to_string();
        let a = parse_f64(table, row, a_col, &schema.treatment)?;
        if a != 0.0 && a != 1.0 {
            return Err(Error::InvalidValue {
                row: row + 2,
                column: schema.treatment.clone(),
                message: format!("treatment must be 0 or 1, got {a}"),
            });
        }
        let y = parse_f64(table, row, y_col, &schema.outcome)?;
        let n = match n_col {
            Some((col, name)) => Some(parse_f64(table, row, col, name)?),
            None => None,
        };
        let cs = c_cols
            .iter()
            .map(|&(col, name)| parse_f64(table, row, col, name))
            .collect::<Result<Vec<_>>>()?;
        let xs = x_cols
            .iter()
            .map(|&(col, name)| parse_f64(table, row, col, name))
            .collect::<Result<Vec<_>>>()?;

        match groups.get_mut(&id) {
            None => {
                order.push(id.clone());
                groups.insert(
                    id,
                    Group {
                        first_row: row,
                        treatment: a,
                        source_size: n,
                        cluster_covariates: cs,
                        outcomes: vec![y],
                        indiv: xs,
                    },
                );
            }
            Some(g) => {
                let clash = |column: &str| Error::NonConstantWithinCluster {
                    cluster: id.clone(),
                    column: column.to_string(),
                    row: row + 2,
                };
                if g.treatment != a {
                    return Err(clash(&schema.treatment));
                }
                if g.source_size != n {
                    return Err(clash(n_col.map(|(_, n)| n).unwrap_or("source_size")));
                }
                if let Some(k) = (0..cs.len()).find(|&k| cs[k] != g.cluster_covariates[k]) {
                    return Err(clash(c_cols[k].1));
                }
                g.outcomes.push(y);
                g.indiv.extend(xs);
            }
        }
    }

    let mut clusters = Vec::with_capacity(order.len());
    for id in order {
        let g = groups.remove(&id).expect("grouped id");
        let m = g.outcomes.len();
        let source_size = match population {
            PopulationMode::Source => {
                let n = g.source_size.expect("source column present");
                if n.fract() != 0.0 || n < 1.0 {
                    return Err(Error::InvalidValue {
                        row: g.first_row + 2,
                        column: n_col.map(|(_, n)| n).unwrap_or("source_size").to_string(),
                        message: format!("source size must be a positive integer, got {n}"),
                    });
                }
                if (n as usize) < m {
                    return Err(Error::InvalidValue {
                        row: g.first_row + 2,
                        column: n_col.map(|(_, n)| n).unwrap_or("source_size").to_string(),
                        message: format!("source size {n} is below the {m} observed rows"),
                    });
                }
                Some(n as u32)
            }
            PopulationMode::Enrolled => Some(m as u32),
            PopulationMode::UnknownN => None,
        };
        clusters.push(ClusterRecord::new(
            id,
            g.treatment as u8,
            source_size,
            g.cluster_covariates,
            g.outcomes,
            g.indiv,
        )?);
    }
    TrialDataset::new(
        clusters,
        pi,
        schema.cluster_covariates.clone(),
        schema.indiv_covariates.clone(),
    )
}
