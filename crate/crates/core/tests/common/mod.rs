#![allow(dead_code)]

use clusterfx::simulator::{generate_dataset, Experiment, ScenarioConfig};
use clusterfx::{ClusterRecord, TrialDataset};

/// Cluster without covariates.
pub fn bare(id: &str, treatment: u8, n: Option<u32>, y: &[f64]) -> ClusterRecord {
    ClusterRecord::new(id, treatment, n, vec![], y.to_vec(), vec![]).unwrap()
}

pub fn bare_dataset(clusters: Vec<ClusterRecord>, pi: f64) -> TrialDataset {
    TrialDataset::new(clusters, pi, vec![], vec![]).unwrap()
}

/// One replicate of a simulation scenario with `m` clusters.
pub fn simulated(experiment: Experiment, scenario: u8, m: usize, seed: u64, r: u64) -> TrialDataset {
    let mut cfg = ScenarioConfig::new(experiment, scenario, seed, 1).unwrap();
    cfg.m = m;
    generate_dataset(&cfg, r).unwrap()
}

/// Small deterministic pseudo-random stream for building fixtures.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Leave-one-cluster-out jackknife variance of `stat`.
pub fn jackknife<F>(ds: &TrialDataset, stat: F) -> f64
where
    F: Fn(&TrialDataset) -> f64,
{
    let m = ds.m();
    let values: Vec<f64> = (0..m).map(|i| stat(&ds.without_cluster(i))).collect();
    let mean = values.iter().sum::<f64>() / m as f64;
    (m as f64 - 1.0) / m as f64 * values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
}
