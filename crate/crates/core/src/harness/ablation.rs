use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::latency::LatencyReport;
use super::planted::{generate_planted, PlantedDataset, PlantedInstance, PlantedParams};
use crate::ars::{ars_matrix_from_attention, top_heads, ArsMatrix, ContrastivePair};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::par::{self, Exec};
use crate::rve::{plan_intervention, InterventionPlan, RveConfig, Scope, TargetLayers};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    RveGlobal,
    RveSensitiveOnly,
    RveNoDenoise,
    MaskSensitiveHeads,
    MaskRandomHeads,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vanilla,
        Variant::RveGlobal,
        Variant::RveSensitiveOnly,
        Variant::RveNoDenoise,
        Variant::MaskSensitiveHeads,
        Variant::MaskRandomHeads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::RveGlobal => "rve-global",
            Variant::RveSensitiveOnly => "rve-sensitive-only",
            Variant::RveNoDenoise => "rve-no-denoise",
            Variant::MaskSensitiveHeads => "mask-sensitive-heads",
            Variant::MaskRandomHeads => "mask-random-heads",
        }
    }

    /// RVE config for the enhancement variants, derived from `base`.
    pub fn rve_config(self, base: &RveConfig) -> Option<RveConfig> {
        match self {
            Variant::RveGlobal => Some(RveConfig { scope: Scope::Global, denoise: true, ..base.clone() }),
            Variant::RveSensitiveOnly => Some(RveConfig { scope: Scope::SensitiveOnly, denoise: true, ..base.clone() }),
            Variant::RveNoDenoise => Some(RveConfig { scope: Scope::Global, denoise: false, ..base.clone() }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Mean of `per_unit`.
    pub task_metric: f64,
    /// One value per seed (tensor mode) or per pair (model mode).
    pub per_unit: Vec<f64>,
}

/// One-sided sign test of "first beats second" over paired units; ties are
/// dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub claim: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
    pub holds: bool,
}

pub const SIGN_TEST_ALPHA: f64 = 0.05;

pub fn sign_test(claim: &str, better: &[f64], worse: &[f64]) -> SignTest {
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (b, w) in better.iter().zip(worse) {
        match b.partial_cmp(w) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let binom = Binomial::new(0.5, n as u64).expect("valid binomial");
        // P(X >= wins)
        1.0 - binom.cdf(wins as u64 - 1)
    };
    SignTest {
        claim: claim.to_string(),
        wins,
        losses,
        ties,
        p_value,
        holds: p_value < SIGN_TEST_ALPHA,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarnessMode {
    Tensor,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub mode: HarnessMode,
    pub units: Vec<String>,
    pub variants: Vec<VariantResult>,
    pub sign_tests: Vec<SignTest>,
    /// Wall-clock measurements; kept out of the deterministic report file.
    #[serde(skip)]
    pub latency: Option<LatencyReport>,
}

impl AblationReport {
    pub fn metric(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    fn from_units(mode: HarnessMode, units: Vec<String>, per_unit: Vec<[f64; 6]>) -> Self {
        let variants: Vec<VariantResult> = Variant::ALL
            .iter()
            .enumerate()
            .map(|(i, &variant)| {
                let values: Vec<f64> = per_unit.iter().map(|u| u[i]).collect();
                VariantResult {
                    variant,
                    task_metric: values.iter().sum::<f64>() / values.len().max(1) as f64,
                    per_unit: values,
                }
            })
            .collect();
        let get = |v: Variant| &variants[Variant::ALL.iter().position(|&x| x == v).expect("known variant")].per_unit;
        let sign_tests = vec![
            sign_test("rve-global >= rve-sensitive-only", get(Variant::RveGlobal), get(Variant::RveSensitiveOnly)),
            sign_test("denoise-on >= denoise-off", get(Variant::RveGlobal), get(Variant::RveNoDenoise)),
            sign_test(
                "mask-sensitive-heads < mask-random-heads",
                get(Variant::MaskRandomHeads),
                get(Variant::MaskSensitiveHeads),
            ),
        ];
        AblationReport {
            schema_version: SCHEMA_VERSION,
            mode,
            units,
            variants,
            sign_tests,
            latency: None,
        }
    }
}

/// Default RVE settings for planted data: 64 image tokens, so a larger
/// selection ratio than the 576-token preset.
pub fn harness_rve_config() -> RveConfig {
    RveConfig {
        alpha: 0.25,
        ..RveConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub planted: PlantedParams,
    pub rve: RveConfig,
    pub seeds: Vec<u64>,
    pub random_trials: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            planted: PlantedParams::default(),
            rve: harness_rve_config(),
            seeds: (0..20).collect(),
            random_trials: 20,
        }
    }
}

pub fn planted_matrix(dataset: &PlantedDataset) -> Result<ArsMatrix> {
    let pairs: Vec<_> = dataset.instances.iter().map(PlantedInstance::pair_attention).collect();
    ars_matrix_from_attention(dataset.params.num_layers, dataset.params.num_heads, &pairs)
}

/// Per target layer, `count` heads drawn uniformly without replacement.
pub fn random_heads(layers: &[usize], num_heads: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &l in layers {
        let mut picks = sample(&mut rng, num_heads, count.min(num_heads)).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|h| (l, h)));
    }
    out
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (trial as u64 + 1)
}

/// The six variant metrics for one planted dataset.
pub fn evaluate_variants(
    dataset: &PlantedDataset,
    matrix: &ArsMatrix,
    rve: &RveConfig,
    random_trials: usize,
    seed: u64,
) -> Result<[f64; 6]> {
    let mut acc = [0.0; 6];
    let nh = dataset.params.num_heads;
    for inst in &dataset.instances {
        let global = plan_intervention(matrix, inst, &Variant::RveGlobal.rve_config(rve).expect("rve"))?;
        let layers = global.target_layers();
        let sensitive = global.sensitive_heads();
        for (i, &variant) in Variant::ALL.iter().enumerate() {
            acc[i] += match variant {
                Variant::Vanilla => inst.readout(None, &[])?,
                Variant::RveGlobal => inst.readout(Some(&global.intervention), &[])?,
                Variant::RveSensitiveOnly | Variant::RveNoDenoise => {
                    let plan = plan_intervention(matrix, inst, &variant.rve_config(rve).expect("rve"))?;
                    inst.readout(Some(&plan.intervention), &[])?
                }
                Variant::MaskSensitiveHeads => inst.readout(None, &sensitive)?,
                Variant::MaskRandomHeads => {
                    let trials = random_trials.max(1);
                    let mut sum = 0.0;
                    for t in 0..trials {
                        let heads = random_heads(&layers, nh, rve.k, trial_seed(seed, t));
                        sum += inst.readout(None, &heads)?;
                    }
                    sum / trials as f64
                }
            };
        }
    }
    let n = dataset.instances.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Tensor-mode ablation: one planted dataset per seed, every variant on
/// the same instances.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationReport> {
    run_ablation_with(config, Exec::default())
}

pub fn run_ablation_with(config: &AblationConfig, exec: Exec) -> Result<AblationReport> {
    if config.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    config.rve.validate(config.planted.num_layers, config.planted.num_heads)?;
    let results = par::map(exec, &config.seeds, |&seed| -> Result<[f64; 6]> {
        let params = PlantedParams { seed, ..config.planted.clone() };
        let dataset = generate_planted(&params)?;
        let matrix = planted_matrix(&dataset)?;
        evaluate_variants(&dataset, &matrix, &config.rve, config.random_trials, seed)
    });
    let per_unit = results.into_iter().collect::<Result<Vec<_>>>()?;
    let units = config.seeds.iter().map(|s| format!("seed-{s}")).collect();
    Ok(AblationReport::from_units(HarnessMode::Tensor, units, per_unit))
}

/// Ground truth for model-mode pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTruth {
    pub pair_id: String,
    /// Image indices (0-based within the image tokens).
    pub relevant: Vec<usize>,
    pub answer_token: usize,
}

/// Model-mode task metric: next-token probability of the answer token,
/// weighted by the share of target-layer image attention that lands on
/// the planted region (averaged over target-layer heads).
fn model_metric(
    model: &Model,
    pair: &ContrastivePair,
    truth: &ModelTruth,
    layers: &[usize],
    options: &ForwardOptions<'_>,
) -> Result<f64> {
    let trace = model.forward_with(&pair.tokens_original, &pair.layout, options)?;
    let mut share = 0.0;
    let mut count = 0usize;
    for &l in layers {
        for h in 0..trace.num_heads {
            let row = &trace.head(l, h)?.image_row;
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                share += truth.relevant.iter().map(|&i| row[i]).sum::<f64>() / total;
            }
            count += 1;
        }
    }
    let share = if count == 0 { 1.0 } else { share / count as f64 };
    Ok(share * trace.token_probability(truth.answer_token))
}

#[allow(clippy::too_many_arguments)]
pub fn run_ablation_model(
    model: &Model,
    pairs: &[ContrastivePair],
    truth: &[ModelTruth],
    matrix: &ArsMatrix,
    rve: &RveConfig,
    random_trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<AblationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("model-mode ablation needs pairs".into()));
    }
    if truth.len() != pairs.len() {
        return Err(Error::Input(format!(
            "{} pairs but {} truth records",
            pairs.len(),
            truth.len()
        )));
    }
    let indexed: Vec<usize> = (0..pairs.len()).collect();
    let results = par::map(exec, &indexed, |&i| -> Result<[f64; 6]> {
        let pair = &pairs[i];
        let t = &truth[i];
        if t.pair_id != pair.pair_id {
            return Err(Error::Input(format!("truth record {} does not match pair {}", t.pair_id, pair.pair_id)));
        }
        let vanilla_trace = model.forward(&pair.tokens_original, &pair.layout, None)?;
        let plan_for = |v: Variant| -> Result<InterventionPlan> {
            plan_intervention(matrix, &vanilla_trace, &v.rve_config(rve).expect("rve"))
        };
        let global = plan_for(Variant::RveGlobal)?;
        let layers = global.target_layers();
        let mut out = [0.0; 6];
        for (k, &variant) in Variant::ALL.iter().enumerate() {
            out[k] = match variant {
                Variant::Vanilla => model_metric(model, pair, t, &layers, &ForwardOptions::default())?,
                Variant::RveGlobal | Variant::RveSensitiveOnly | Variant::RveNoDenoise => {
                    let plan = if variant == Variant::RveGlobal { global.clone() } else { plan_for(variant)? };
                    let opts = ForwardOptions { intervention: Some(&plan.intervention), knocked_out: &[] };
                    model_metric(model, pair, t, &layers, &opts)?
                }
                Variant::MaskSensitiveHeads => {
                    let heads = global.sensitive_heads();
                    let opts = ForwardOptions { intervention: None, knocked_out: &heads };
                    model_metric(model, pair, t, &layers, &opts)?
                }
                Variant::MaskRandomHeads => {
                    let trials = random_trials.max(1);
                    let mut sum = 0.0;
                    for trial in 0..trials {
                        let heads = random_heads(&layers, matrix.num_heads, rve.k, trial_seed(seed ^ i as u64, trial));
                        let opts = ForwardOptions { intervention: None, knocked_out: &heads };
                        sum += model_metric(model, pair, t, &layers, &opts)?;
                    }
                    sum / trials as f64
                }
            };
        }
        Ok(out)
    });
    let per_unit = results.into_iter().collect::<Result<Vec<_>>>()?;
    let units = pairs.iter().map(|p| p.pair_id.clone()).collect();
    Ok(AblationReport::from_units(HarnessMode::Model, units, per_unit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    /// Fraction of target-mask positions inside the planted region,
    /// averaged over instances and target layers with a non-empty target.
    pub region_precision: f64,
}

/// Precision and recall of the global top-`k` ARS heads against the planted set.
pub fn head_recovery(matrix: &ArsMatrix, planted: &[(usize, usize)], k: usize) -> (f64, f64) {
    let top = top_heads(matrix, k);
    let hits = top.iter().filter(|h| planted.contains(h)).count() as f64;
    let precision = if k == 0 { 0.0 } else { hits / k as f64 };
    let recall = if planted.is_empty() { 0.0 } else { hits / planted.len() as f64 };
    (precision, recall)
}

pub fn region_precision(plan: &InterventionPlan, relevant: &[usize]) -> Option<f64> {
    let mut sum = 0.0;
    let mut layers = 0usize;
    for mask in &plan.masks {
        let selected: Vec<usize> = mask.target.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect();
        if selected.is_empty() {
            continue;
        }
        let inside = selected.iter().filter(|i| relevant.contains(i)).count();
        sum += inside as f64 / selected.len() as f64;
        layers += 1;
    }
    (layers > 0).then(|| sum / layers as f64)
}

pub fn evaluate_localization(
    matrix: &ArsMatrix,
    dataset: &PlantedDataset,
    k: usize,
    rve: &RveConfig,
) -> Result<LocalizationReport> {
    if matrix.num_layers != dataset.params.num_layers || matrix.num_heads != dataset.params.num_heads {
        return Err(Error::Input("matrix and dataset dimensions differ".into()));
    }
    let (precision, recall) = head_recovery(matrix, &dataset.planted_sensitive, k);
    let mut sum = 0.0;
    let mut count = 0usize;
    for inst in &dataset.instances {
        let plan = plan_intervention(matrix, inst, rve)?;
        if let Some(p) = region_precision(&plan, &inst.planted_relevant) {
            sum += p;
            count += 1;
        }
    }
    Ok(LocalizationReport {
        k,
        precision,
        recall,
        region_precision: if count == 0 { 0.0 } else { sum / count as f64 },
    })
}

/// Explicit-layer variant of a config, handy for pinning target layers.
pub fn with_layers(config: &RveConfig, layers: Vec<usize>) -> RveConfig {
    RveConfig {
        target_layers: TargetLayers::Explicit(layers),
        ..config.clone()
    }
}
