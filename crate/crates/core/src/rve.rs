//! Relation-aware visual enhancement.
//!
//! For each target layer the sensitive (top-K ARS) and non-sensitive
//! (bottom-K) heads are averaged into two image-score vectors. The top-m
//! positions of each (m = floor(alpha * N_I)) form the enhancement and
//! denoising masks; the target mask keeps enhancement positions that the
//! denoising mask does not claim. Target scores are then amplified before
//! softmax: `S + beta * |S| * M_target`.

use serde::{Deserialize, Serialize};

use crate::ars::{layer_profile, rank_heads, ArsMatrix, HeadSelection};
use crate::error::{Error, Result};
use crate::model::{
    ForwardOptions, ForwardTrace, HeadScope, Intervention, LayerIntervention, Model, TokenLayout,
};

/// Enhances one masked score: `s + beta * |s|`. `beta == 0` returns `s` untouched.
pub fn enhance_score(s: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        return s;
    }
    s + beta * s.abs()
}

/// Anything that can hand out last-token pre-softmax image scores per head.
pub trait ScoreSource {
    fn num_layers(&self) -> usize;
    fn num_heads(&self) -> usize;
    fn n_image(&self) -> usize;
    fn image_scores(&self, layer: usize, head: usize) -> Result<&[f64]>;
}

impl ScoreSource for ForwardTrace {
    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn n_image(&self) -> usize {
        self.layout.n_image()
    }

    fn image_scores(&self, layer: usize, head: usize) -> Result<&[f64]> {
        Ok(&self.head(layer, head)?.image_scores)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetLayers {
    /// Layers whose mean ARS is strictly above the median layer mean.
    Auto,
    Explicit(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Global,
    SensitiveOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Masks come from the prompt's last token and stay fixed while decoding.
    #[default]
    Frozen,
    /// Masks are rebuilt from a vanilla pass at every decoding step.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RveConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub target_layers: TargetLayers,
    pub scope: Scope,
    pub denoise: bool,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

impl Default for RveConfig {
    fn default() -> Self {
        Self::llava()
    }
}

impl RveConfig {
    /// Preset for long image-token sequences (576 tokens).
    pub fn llava() -> Self {
        RveConfig {
            k: 5,
            alpha: 0.05,
            beta: 1.0,
            target_layers: TargetLayers::Auto,
            scope: Scope::Global,
            denoise: true,
            mask_mode: MaskMode::Frozen,
        }
    }

    /// Preset for short, compressed image-token sequences (32 tokens).
    pub fn instructblip() -> Self {
        RveConfig {
            alpha: 0.5,
            ..Self::llava()
        }
    }

    pub fn validate(&self, num_layers: usize, num_heads: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.k == 0 || 2 * self.k > num_heads {
            return Err(Error::Config(format!(
                "K must satisfy 1 <= K and 2K <= H (K={}, H={num_heads})",
                self.k
            )));
        }
        if let TargetLayers::Explicit(layers) = &self.target_layers {
            if let Some(&l) = layers.iter().find(|&&l| l >= num_layers) {
                return Err(Error::Config(format!(
                    "target layer {l} out of range (L={num_layers})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub layer: Option<usize>,
    pub m: usize,
    /// m-th largest sensitive mean score; `None` when `m == 0`.
    pub tau_sens: Option<f64>,
    pub tau_non: Option<f64>,
    pub enh: Vec<u8>,
    pub den: Vec<u8>,
    pub target: Vec<u8>,
}

impl MaskSet {
    /// Ablation switch: drop the denoising mask so the target equals the
    /// enhancement mask.
    pub fn without_denoise(mut self) -> Self {
        self.den.iter_mut().for_each(|b| *b = 0);
        self.target = self.enh.clone();
        self
    }
}

/// Elementwise mean of `S^(l,h)` over `heads`.
pub fn mean_scores<S: ScoreSource + ?Sized>(
    source: &S,
    layer: usize,
    heads: &[usize],
) -> Result<Vec<f64>> {
    if heads.is_empty() {
        return Err(Error::Input("mean_scores needs at least one head".into()));
    }
    let mut mean = vec![0.0; source.n_image()];
    for &h in heads {
        let s = source.image_scores(layer, h)?;
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    let inv = 1.0 / heads.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Indices of the `m` largest values; ties go to the lower index.
pub fn top_m_indices(values: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

fn indicator(len: usize, picks: &[usize]) -> Vec<u8> {
    let mut mask = vec![0u8; len];
    for &i in picks {
        mask[i] = 1;
    }
    mask
}

pub fn selection_count(alpha: f64, n_image: usize) -> usize {
    (alpha * n_image as f64).floor() as usize
}

pub fn build_masks(s_sens: &[f64], s_non: &[f64], alpha: f64) -> Result<MaskSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    if s_sens.is_empty() || s_sens.len() != s_non.len() {
        return Err(Error::Input(format!(
            "score vectors must be non-empty and equal length ({} vs {})",
            s_sens.len(),
            s_non.len()
        )));
    }
    let n = s_sens.len();
    let m = selection_count(alpha, n);
    if m == 0 {
        log::warn!("alpha * N_I = {} < 1: masks are empty", alpha * n as f64);
        return Ok(MaskSet {
            layer: None,
            m,
            tau_sens: None,
            tau_non: None,
            enh: vec![0; n],
            den: vec![0; n],
            target: vec![0; n],
        });
    }
    let sens = top_m_indices(s_sens, m);
    let non = top_m_indices(s_non, m);
    let enh = indicator(n, &sens);
    let den = indicator(n, &non);
    let target = compose_target(&enh, &den)?;
    Ok(MaskSet {
        layer: None,
        m,
        tau_sens: Some(s_sens[sens[m - 1]]),
        tau_non: Some(s_non[non[m - 1]]),
        enh,
        den,
        target,
    })
}

/// `M_enh * (1 - M_den)`.
pub fn compose_target(enh: &[u8], den: &[u8]) -> Result<Vec<u8>> {
    if enh.len() != den.len() {
        return Err(Error::Input(format!(
            "mask lengths differ ({} vs {})",
            enh.len(),
            den.len()
        )));
    }
    if enh.iter().chain(den).any(|&b| b > 1) {
        return Err(Error::Input("masks must be binary".into()));
    }
    Ok(enh.iter().zip(den).map(|(&e, &d)| e * (1 - d)).collect())
}

pub fn enhance_scores(s: &[f64], target: &[u8], beta: f64) -> Result<Vec<f64>> {
    if s.len() != target.len() {
        return Err(Error::Input(format!(
            "scores ({}) and mask ({}) differ in length",
            s.len(),
            target.len()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    Ok(s.iter()
        .zip(target)
        .map(|(&v, &m)| if m == 1 { enhance_score(v, beta) } else { v })
        .collect())
}

/// Layers whose mean ARS exceeds the median of the layer means.
pub fn auto_target_layers(matrix: &ArsMatrix) -> Vec<usize> {
    let profile = layer_profile(matrix);
    let mut sorted = profile.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    profile
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > median)
        .map(|(l, _)| l)
        .collect()
}

pub fn resolve_target_layers(matrix: &ArsMatrix, config: &RveConfig) -> Vec<usize> {
    match &config.target_layers {
        TargetLayers::Auto => auto_target_layers(matrix),
        TargetLayers::Explicit(layers) => {
            let mut layers = layers.clone();
            layers.sort_unstable();
            layers.dedup();
            layers
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub intervention: Intervention,
    pub masks: Vec<MaskSet>,
    pub selections: Vec<HeadSelection>,
}

impl InterventionPlan {
    pub fn target_layers(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s.layer).collect()
    }

    /// Every `(layer, head)` in the sensitive sets of the target layers.
    pub fn sensitive_heads(&self) -> Vec<(usize, usize)> {
        self.selections
            .iter()
            .flat_map(|s| s.sensitive.iter().map(move |&h| (s.layer, h)))
            .collect()
    }
}

pub fn plan_intervention<S: ScoreSource + ?Sized>(
    matrix: &ArsMatrix,
    source: &S,
    config: &RveConfig,
) -> Result<InterventionPlan> {
    if matrix.num_layers != source.num_layers() || matrix.num_heads != source.num_heads() {
        return Err(Error::Input(format!(
            "ARS matrix is {}x{}, scores come from a {}x{} model",
            matrix.num_layers,
            matrix.num_heads,
            source.num_layers(),
            source.num_heads()
        )));
    }
    config.validate(matrix.num_layers, matrix.num_heads)?;
    let mut layers = Vec::new();
    let mut masks = Vec::new();
    let mut selections = Vec::new();
    for layer in resolve_target_layers(matrix, config) {
        let sel = rank_heads(matrix, layer, config.k)?;
        let s_sens = mean_scores(source, layer, &sel.sensitive)?;
        let s_non = mean_scores(source, layer, &sel.non_sensitive)?;
        let mut mask = build_masks(&s_sens, &s_non, config.alpha)?;
        if !config.denoise {
            mask = mask.without_denoise();
        }
        mask.layer = Some(layer);
        layers.push(LayerIntervention {
            layer,
            target_mask: mask.target.clone(),
            beta: config.beta,
            head_scope: match config.scope {
                Scope::Global => HeadScope::All,
                Scope::SensitiveOnly => HeadScope::Heads(sel.sensitive.clone()),
            },
        });
        masks.push(mask);
        selections.push(sel);
    }
    Ok(InterventionPlan {
        intervention: Intervention::new(layers),
        masks,
        selections,
    })
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// One plan for frozen masks, one per step otherwise.
    pub plans: Vec<InterventionPlan>,
    pub traces: Vec<ForwardTrace>,
}

/// Greedy decoding with RVE applied at every step. Generated tokens are
/// counted as text positions.
pub fn generate(
    model: &Model,
    matrix: &ArsMatrix,
    config: &RveConfig,
    prompt: &[usize],
    layout: &TokenLayout,
    steps: usize,
) -> Result<Generation> {
    if prompt.len() != layout.len() || prompt.is_empty() {
        return Err(Error::Input(format!(
            "prompt length {} does not match layout length {}",
            prompt.len(),
            layout.len()
        )));
    }
    let n = prompt.len();
    let mut cache = model.prefill(&prompt[..n - 1])?;
    let mut token = prompt[n - 1];
    let mut out = Generation {
        tokens: Vec::with_capacity(steps),
        plans: Vec::new(),
        traces: Vec::with_capacity(steps),
    };
    for step in 0..steps {
        let step_layout = layout.extended(step);
        if step == 0 || config.mask_mode == MaskMode::PerStep {
            let vanilla = model.forward_step(&cache, token, &step_layout, &ForwardOptions::default())?;
            out.plans.push(plan_intervention(matrix, &vanilla.trace, config)?);
        }
        let plan = out.plans.last().expect("a plan exists after the first step");
        let options = ForwardOptions {
            intervention: Some(&plan.intervention),
            knocked_out: &[],
        };
        let result = model.forward_step(&cache, token, &step_layout, &options)?;
        let next = result.trace.argmax_token();
        cache.push(result.appended);
        out.traces.push(result.trace);
        out.tokens.push(next);
        token = next;
    }
    Ok(out)
}
