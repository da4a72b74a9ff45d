//! Wall-clock cost of one decoding step per variant.
//!
//! Every variant runs the same single-token step against a shared prefix
//! cache; variants are interleaved round-robin so drift in machine load hits
//! all of them equally. The contrastive-decoding baseline runs two steps
//! (original and verb-swapped prefix) and combines their logits.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ablation::{random_heads, Variant};
use crate::ars::{ars_matrix_from_attention, PairAttention};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, TokenLayout};
use crate::rve::{plan_intervention, RveConfig};

pub const CONTRASTIVE_BASELINE: &str = "contrastive-double-forward";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyConfig {
    pub model: ModelConfig,
    pub text_before: usize,
    pub n_image: usize,
    pub text_after: usize,
    pub rve: RveConfig,
    pub runs: usize,
    pub warmup: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            model: ModelConfig {
                num_layers: 24,
                num_heads: 32,
                embed_dim: 128,
                vocab_size: 512,
                max_seq_len: 656,
                seed: 0,
            },
            text_before: 40,
            n_image: 576,
            text_after: 40,
            rve: RveConfig::llava(),
            runs: 100,
            warmup: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub variant: String,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub runs: usize,
    pub sequence_length: usize,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, variant: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn measure_latency(config: &LatencyConfig) -> Result<LatencyReport> {
    if config.runs == 0 {
        return Err(Error::Config("latency needs at least one run".into()));
    }
    if config.text_after < 2 {
        return Err(Error::Config("text_after must be at least 2".into()));
    }
    let model = Model::build(config.model.clone())?;
    let layout = TokenLayout::contiguous(config.text_before, config.n_image, config.text_after)?;
    let n = layout.len();
    let vocab = config.model.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed);
    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
    let mut swapped = tokens.clone();
    swapped[n - 2] = (tokens[n - 2] + 1) % vocab;

    let cache = model.prefill(&tokens[..n - 1])?;
    let cache_swapped = model.prefill(&swapped[..n - 1])?;
    let last = tokens[n - 1];
    let vanilla_opts = ForwardOptions::default();
    let vanilla = model.forward_step(&cache, last, &layout, &vanilla_opts)?.trace;
    let contrastive = model.forward_step(&cache_swapped, last, &layout, &vanilla_opts)?.trace;
    let pair = PairAttention {
        pair_id: "latency".into(),
        original: vanilla.heads().map(|(_, h)| h.image_row.clone()).collect(),
        contrastive: contrastive.heads().map(|(_, h)| h.image_row.clone()).collect(),
    };
    let matrix = ars_matrix_from_attention(config.model.num_layers, config.model.num_heads, &[pair])?;

    // Masks are frozen: planning happens once, outside the timed region.
    let plan = |v: Variant| plan_intervention(&matrix, &vanilla, &v.rve_config(&config.rve).expect("rve variant"));
    let global = plan(Variant::RveGlobal)?;
    let sensitive_only = plan(Variant::RveSensitiveOnly)?;
    let no_denoise = plan(Variant::RveNoDenoise)?;
    let sensitive_heads = global.sensitive_heads();
    let random = random_heads(&global.target_layers(), config.model.num_heads, config.rve.k, config.model.seed);

    let options: Vec<(&str, ForwardOptions<'_>)> = vec![
        (Variant::Vanilla.name(), ForwardOptions::default()),
        (
            Variant::RveGlobal.name(),
            ForwardOptions { intervention: Some(&global.intervention), knocked_out: &[] },
        ),
        (
            Variant::RveSensitiveOnly.name(),
            ForwardOptions { intervention: Some(&sensitive_only.intervention), knocked_out: &[] },
        ),
        (
            Variant::RveNoDenoise.name(),
            ForwardOptions { intervention: Some(&no_denoise.intervention), knocked_out: &[] },
        ),
        (
            Variant::MaskSensitiveHeads.name(),
            ForwardOptions { intervention: None, knocked_out: &sensitive_heads },
        ),
        (
            Variant::MaskRandomHeads.name(),
            ForwardOptions { intervention: None, knocked_out: &random },
        ),
    ];

    let contrastive_step = || -> Result<Vec<f64>> {
        let a = model.forward_step(&cache, last, &layout, &vanilla_opts)?.trace;
        let b = model.forward_step(&cache_swapped, last, &layout, &vanilla_opts)?.trace;
        Ok(a.logits.iter().zip(&b.logits).map(|(x, y)| 2.0 * x - y).collect())
    };

    let total = options.len() + 1;
    let mut samples = vec![Vec::with_capacity(config.runs); total];
    for run in 0..config.warmup + config.runs {
        for (i, (_, opts)) in options.iter().enumerate() {
            let start = Instant::now();
            let out = model.forward_step(&cache, last, &layout, opts)?;
            let elapsed = start.elapsed();
            std::hint::black_box(&out);
            if run >= config.warmup {
                samples[i].push(ms(elapsed));
            }
        }
        let start = Instant::now();
        let out = contrastive_step()?;
        let elapsed = start.elapsed();
        std::hint::black_box(&out);
        if run >= config.warmup {
            samples[total - 1].push(ms(elapsed));
        }
    }

    let names: Vec<&str> = options.iter().map(|(n, _)| *n).chain([CONTRASTIVE_BASELINE]).collect();
    let mut medians: Vec<(f64, f64)> = samples
        .iter_mut()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            (median(s), mean)
        })
        .collect();
    let base = medians[0].0;
    let rows = names
        .into_iter()
        .zip(medians.drain(..))
        .map(|(variant, (median_ms, mean_ms))| LatencyRow {
            variant: variant.to_string(),
            median_ms,
            mean_ms,
            overhead_pct: 100.0 * (median_ms / base - 1.0),
        })
        .collect();
    Ok(LatencyReport { runs: config.runs, sequence_length: n, rows })
}
