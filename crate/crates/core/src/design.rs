//! Individual-level design matrices `U_ij = (1, A_i, L_ij)` shared by the
//! GEE and LMM working models.

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::numerics;

/// Which covariates enter `L_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSelector {
    /// Source population size `N` (silently skipped when unknown).
    pub source_size: bool,
    pub cluster: bool,
    pub individual: bool,
}

impl Default for CovariateSelector {
    fn default() -> Self {
        Self::ALL
    }
}

impl CovariateSelector {
    pub const ALL: Self = Self {
        source_size: true,
        cluster: true,
        individual: true,
    };
    pub const NONE: Self = Self {
        source_size: false,
        cluster: false,
        individual: false,
    };
}

#[derive(Debug, Clone)]
pub struct ClusterDesign {
    /// Row-major `M x d`.
    pub rows: Vec<f64>,
    pub y: Vec<f64>,
    pub treated: bool,
    pub m: f64,
    pub n: Option<f64>,
}

impl ClusterDesign {
    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn y_bar(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.m
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub d: usize,
    pub names: Vec<String>,
    pub clusters: Vec<ClusterDesign>,
}

/// Column index of the treatment indicator.
pub const TREATMENT_COLUMN: usize = 1;

impl Design {
    pub fn build(ds: &TrialDataset, sel: CovariateSelector) -> Result<Self> {
        let use_n = sel.source_size && ds.has_source_sizes();
        let mut names = vec!["(intercept)".to_string(), "treatment".to_string()];
        if use_n {
            names.push("source_size".into());
        }
        if sel.cluster {
            names.extend(ds.cluster_covariate_names.iter().cloned());
        }
        if sel.individual {
            names.extend(ds.indiv_covariate_names.iter().cloned());
        }
        let d = names.len();
        let clusters = ds
            .clusters
            .iter()
            .map(|c| {
                let mut rows = Vec::with_capacity(c.observed_size() * d);
                for j in 0..c.observed_size() {
                    rows.push(1.0);
                    rows.push(c.treatment as f64);
                    if use_n {
                        rows.push(c.source_size_f64().expect("checked above"));
                    }
                    if sel.cluster {
                        rows.extend_from_slice(&c.cluster_covariates);
                    }
                    if sel.individual {
                        rows.extend_from_slice(c.x_row(j));
                    }
                }
                ClusterDesign {
                    rows,
                    y: c.outcomes.clone(),
                    treated: c.is_treated(),
                    m: c.m(),
                    n: c.source_size.map(f64::from),
                }
            })
            .collect();
        let design = Self { d, names, clusters };
        design.check_rank()?;
        Ok(design)
    }

    pub fn row<'a>(&self, c: &'a ClusterDesign, j: usize) -> &'a [f64] {
        &c.rows[j * self.d..(j + 1) * self.d]
    }

    fn check_rank(&self) -> Result<()> {
        let total: usize = self.clusters.iter().map(|c| c.size()).sum();
        let x = nalgebra::DMatrix::from_row_iterator(
            total,
            self.d,
            self.clusters.iter().flat_map(|c| c.rows.iter().copied()),
        );
        let kept = numerics::independent_columns(&x, &vec![1.0; total]);
        if kept.len() < self.d {
            let dropped: Vec<&str> = (0..self.d)
                .filter(|j| !kept.contains(j))
                .map(|j| self.names[j].as_str())
                .collect();
            return Err(Error::RankDeficientDesign(format!(
                "columns {} are linear combinations of earlier columns",
                dropped.join(", ")
            )));
        }
        Ok(())
    }

    /// Cluster average of `g^{-1}(U_ij(a)' beta)`, with `A` set to `a`.
    pub fn counterfactual_mean(
        &self,
        c: &ClusterDesign,
        beta: &[f64],
        link: numerics::Link,
        a: f64,
    ) -> f64 {
        let mut s = 0.0;
        for j in 0..c.size() {
            let row = self.row(c, j);
            let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>()
                + (a - row[TREATMENT_COLUMN]) * beta[TREATMENT_COLUMN];
            s += link.inverse(eta);
        }
        s / c.m
    }
}
