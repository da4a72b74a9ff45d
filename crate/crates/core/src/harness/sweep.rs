use serde::{Deserialize, Serialize};

use super::ablation::{harness_rve_config, planted_matrix};
use super::planted::{generate_planted, PlantedParams};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rve::{plan_intervention, RveConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub seed: u64,
    pub metric: f64,
    pub vanilla_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub planted: PlantedParams,
    /// Non-grid settings (scope, denoise, target layers) come from here.
    pub base: RveConfig,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let base = harness_rve_config();
        SweepConfig {
            planted: PlantedParams::default(),
            alphas: vec![base.alpha],
            betas: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
            ks: vec![1, 3, 5, 7, 9],
            seeds: (0..5).collect(),
            base,
        }
    }
}

/// Rows ordered by seed, then alpha, beta, K as listed in the config.
pub fn run_sweep(config: &SweepConfig, exec: Exec) -> Result<Vec<SweepRow>> {
    if config.alphas.is_empty() || config.betas.is_empty() || config.ks.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("every sweep axis needs at least one value".into()));
    }
    let per_seed = par::map(exec, &config.seeds, |&seed| -> Result<Vec<SweepRow>> {
        let params = PlantedParams { seed, ..config.planted.clone() };
        let dataset = generate_planted(&params)?;
        let matrix = planted_matrix(&dataset)?;
        let n = dataset.instances.len() as f64;
        let mut vanilla = 0.0;
        for inst in &dataset.instances {
            vanilla += inst.readout(None, &[])?;
        }
        vanilla /= n;
        let mut rows = Vec::new();
        for &alpha in &config.alphas {
            for &beta in &config.betas {
                for &k in &config.ks {
                    let rve = RveConfig { alpha, beta, k, ..config.base.clone() };
                    let mut metric = 0.0;
                    for inst in &dataset.instances {
                        let plan = plan_intervention(&matrix, inst, &rve)?;
                        metric += inst.readout(Some(&plan.intervention), &[])?;
                    }
                    rows.push(SweepRow { alpha, beta, k, seed, metric: metric / n, vanilla_metric: vanilla });
                }
            }
        }
        Ok(rows)
    });
    let mut out = Vec::new();
    for rows in per_seed {
        out.extend(rows?);
    }
    Ok(out)
}

/// Mean metric per distinct `(alpha, beta, k)` in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<(f64, f64, usize, f64)> {
    let mut keys: Vec<(f64, f64, usize)> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        let key = (r.alpha, r.beta, r.k);
        match keys.iter().position(|k| *k == key) {
            Some(i) => {
                sums[i].0 += r.metric;
                sums[i].1 += 1;
            }
            None => {
                keys.push(key);
                sums.push((r.metric, 1));
            }
        }
    }
    keys.into_iter()
        .zip(sums)
        .map(|((a, b, k), (s, c))| (a, b, k, s / c as f64))
        .collect()
}
