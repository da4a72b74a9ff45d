//! Seedable toy multi-head-attention transformer.
//!
//! The model is a pre-LayerNorm decoder: every layer applies causal
//! multi-head self-attention followed by a GELU MLP (hidden width `2d`),
//! both with residual connections. LayerNorm has no learned parameters.
//!
//! Weights are drawn from a ChaCha8 stream seeded with `ModelConfig::seed`,
//! in this fixed order:
//!
//! 1. token embedding `vocab_size x d`, entries `N(0, 1)`
//! 2. position embedding `max_seq_len x d`, entries `N(0, 0.5^2)`
//! 3. per layer: `W_q`, `W_k`, `W_v`, `W_o` (`d x d`), then `W_in` (`d x 2d`)
//!    and `W_out` (`2d x d`), each entry `N(0, 1/fan_in)`
//! 4. unembedding `d x vocab_size`, entries `N(0, 1/d)`
//!
//! Matrices are filled row-major. Identical configs therefore give
//! bit-identical weights on every platform with IEEE-754 doubles.
//!
//! The forward pass records, for the last sequence position only, the
//! pre-softmax score row and post-softmax attention row of every head. An
//! [`Intervention`] rewrites the last position's image-token scores before
//! the softmax of the targeted heads.

use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rve::enhance_score;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.embed_dim == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config(format!(
                "model dimensions must be positive (L={}, H={}, d={}, vocab={})",
                self.num_layers, self.num_heads, self.embed_dim, self.vocab_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Partition of sequence positions into text and image tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    text: Vec<usize>,
    image: Vec<usize>,
}

impl TokenLayout {
    /// Both index lists must be strictly increasing, disjoint, non-empty,
    /// and together cover `0..N` exactly.
    pub fn new(text: Vec<usize>, image: Vec<usize>) -> Result<Self> {
        if text.is_empty() || image.is_empty() {
            return Err(Error::Input(format!(
                "layout needs at least one text and one image token (N_T={}, N_I={})",
                text.len(),
                image.len()
            )));
        }
        for set in [&text, &image] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(
                    "layout indices must be strictly increasing".into(),
                ));
            }
        }
        let n = text.len() + image.len();
        let mut seen = vec![false; n];
        for &i in text.iter().chain(image.iter()) {
            if i >= n || seen[i] {
                return Err(Error::Input(format!(
                    "layout does not partition 0..{n}: position {i} repeated or out of range"
                )));
            }
            seen[i] = true;
        }
        Ok(TokenLayout { text, image })
    }

    /// `text_before` text tokens, then `n_image` image tokens, then
    /// `text_after` text tokens (the usual LVLM prompt layout).
    pub fn contiguous(text_before: usize, n_image: usize, text_after: usize) -> Result<Self> {
        let n = text_before + n_image + text_after;
        let image: Vec<usize> = (text_before..text_before + n_image).collect();
        let text: Vec<usize> = (0..text_before).chain(text_before + n_image..n).collect();
        Self::new(text, image)
    }

    pub fn text_indices(&self) -> &[usize] {
        &self.text
    }

    pub fn image_indices(&self) -> &[usize] {
        &self.image
    }

    pub fn n_text(&self) -> usize {
        self.text.len()
    }

    pub fn n_image(&self) -> usize {
        self.image.len()
    }

    pub fn len(&self) -> usize {
        self.text.len() + self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layout of this sequence extended by `extra` generated tokens, which
    /// are counted as text.
    pub fn extended(&self, extra: usize) -> TokenLayout {
        let n = self.len();
        let mut text = self.text.clone();
        text.extend(n..n + extra);
        TokenLayout {
            text,
            image: self.image.clone(),
        }
    }
}

/// Which heads of a layer an intervention touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadScope {
    All,
    Heads(Vec<usize>),
}

impl HeadScope {
    pub fn contains(&self, head: usize) -> bool {
        match self {
            HeadScope::All => true,
            HeadScope::Heads(hs) => hs.contains(&head),
        }
    }
}

/// Score enhancement for one layer: `S + beta * |S| * target_mask` on the
/// last position's image scores, for every head in `head_scope`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerIntervention {
    pub layer: usize,
    pub target_mask: Vec<u8>,
    pub beta: f64,
    pub head_scope: HeadScope,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub layers: Vec<LayerIntervention>,
}

impl Intervention {
    pub fn new(layers: Vec<LayerIntervention>) -> Self {
        Intervention { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn first_layer(&self) -> Option<usize> {
        self.layers.iter().map(|li| li.layer).min()
    }

    pub fn validate(&self, config: &ModelConfig, n_image: usize) -> Result<()> {
        let mut seen = vec![false; config.num_layers];
        for li in &self.layers {
            if li.layer >= config.num_layers {
                return Err(Error::Intervention(format!(
                    "layer {} out of range (L={})",
                    li.layer, config.num_layers
                )));
            }
            if seen[li.layer] {
                return Err(Error::Intervention(format!(
                    "layer {} targeted more than once",
                    li.layer
                )));
            }
            seen[li.layer] = true;
            if li.target_mask.len() != n_image {
                return Err(Error::Intervention(format!(
                    "target mask for layer {} has length {}, expected N_I={}",
                    li.layer,
                    li.target_mask.len(),
                    n_image
                )));
            }
            if li.target_mask.iter().any(|&b| b > 1) {
                return Err(Error::Intervention(format!(
                    "target mask for layer {} is not binary",
                    li.layer
                )));
            }
            if !(li.beta >= 0.0 && li.beta.is_finite()) {
                return Err(Error::Intervention(format!(
                    "beta must be finite and non-negative, got {}",
                    li.beta
                )));
            }
            if let HeadScope::Heads(hs) = &li.head_scope {
                if let Some(&h) = hs.iter().find(|&&h| h >= config.num_heads) {
                    return Err(Error::Intervention(format!(
                        "head {h} out of range (H={})",
                        config.num_heads
                    )));
                }
            }
        }
        Ok(())
    }

    fn for_layer(&self, layer: usize) -> Option<&LayerIntervention> {
        self.layers.iter().find(|li| li.layer == layer)
    }
}

/// Extra switches for a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub intervention: Option<&'a Intervention>,
    /// `(layer, head)` pairs whose attention output is zeroed at every
    /// position. Their recorded last-token rows are all zero.
    pub knocked_out: &'a [(usize, usize)],
}

/// Last-token attention record of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    /// Post-softmax weights over all `N` positions.
    pub full_row: Vec<f64>,
    /// Pre-softmax scores over all `N` positions, after any intervention.
    pub full_scores: Vec<f64>,
    /// `full_row` restricted to image positions.
    pub image_row: Vec<f64>,
    /// `full_scores` restricted to image positions.
    pub image_scores: Vec<f64>,
    /// Image scores before the intervention, present only on targeted heads.
    pub original_image_scores: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub num_layers: usize,
    pub num_heads: usize,
    pub layout: TokenLayout,
    heads: Vec<HeadTrace>,
    /// Last-token residual stream entering each layer.
    pub layer_inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub elapsed: Duration,
}

impl ForwardTrace {
    pub fn head(&self, layer: usize, head: usize) -> Result<&HeadTrace> {
        if layer >= self.num_layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                len: self.num_layers,
            });
        }
        if head >= self.num_heads {
            return Err(Error::Index {
                what: "head",
                index: head,
                len: self.num_heads,
            });
        }
        Ok(&self.heads[layer * self.num_heads + head])
    }

    pub fn heads(&self) -> impl Iterator<Item = ((usize, usize), &HeadTrace)> {
        let h = self.num_heads;
        self.heads.iter().enumerate().map(move |(i, t)| ((i / h, i % h), t))
    }

    /// Bitwise comparison of every recorded number (timing excluded).
    pub fn bit_eq(&self, other: &ForwardTrace) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.num_layers == other.num_layers
            && self.num_heads == other.num_heads
            && self.layout == other.layout
            && same(&self.logits, &other.logits)
            && self
                .layer_inputs
                .iter()
                .zip(&other.layer_inputs)
                .all(|(a, b)| same(a, b))
            && self.heads.iter().zip(&other.heads).all(|(a, b)| {
                same(&a.full_row, &b.full_row)
                    && same(&a.full_scores, &b.full_scores)
                    && same(&a.image_row, &b.image_row)
                    && same(&a.image_scores, &b.image_scores)
            })
    }

    /// Index of the highest logit.
    pub fn argmax_token(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    }

    pub fn token_probability(&self, token: usize) -> f64 {
        let probs = softmax(&self.logits);
        probs.get(token).copied().unwrap_or(0.0)
    }
}

/// `(A, S)` of head `(layer, head)`: post-softmax image weights and
/// pre-softmax image scores of the last token.
pub fn extract_image_attention(
    trace: &ForwardTrace,
    layer: usize,
    head: usize,
) -> Result<(&[f64], &[f64])> {
    let t = trace.head(layer, head)?;
    Ok((&t.image_row, &t.image_scores))
}

struct LayerWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w_in: Array2<f64>,
    w_out: Array2<f64>,
}

pub struct Model {
    config: ModelConfig,
    token_embedding: Array2<f64>,
    position_embedding: Array2<f64>,
    layers: Vec<LayerWeights>,
    unembedding: Array2<f64>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embedding = random_matrix(&mut rng, config.vocab_size, d, 1.0);
        let position_embedding = random_matrix(&mut rng, config.max_seq_len, d, 0.5);
        let proj_std = (1.0 / d as f64).sqrt();
        let hidden_std = (1.0 / (2 * d) as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: random_matrix(&mut rng, d, d, proj_std),
                wk: random_matrix(&mut rng, d, d, proj_std),
                wv: random_matrix(&mut rng, d, d, proj_std),
                wo: random_matrix(&mut rng, d, d, proj_std),
                w_in: random_matrix(&mut rng, d, 2 * d, proj_std),
                w_out: random_matrix(&mut rng, 2 * d, d, hidden_std),
            })
            .collect();
        let unembedding = random_matrix(&mut rng, d, config.vocab_size, proj_std);
        Ok(Model {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// SHA-256 over every weight's IEEE-754 bits, in generation order.
    pub fn weight_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |m: &Array2<f64>| {
            for v in m.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        feed(&self.token_embedding);
        feed(&self.position_embedding);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_in, &l.w_out] {
                feed(m);
            }
        }
        feed(&self.unembedding);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn forward(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        intervention: Option<&Intervention>,
    ) -> Result<ForwardTrace> {
        self.forward_with(
            tokens,
            layout,
            &ForwardOptions {
                intervention,
                knocked_out: &[],
            },
        )
    }

    pub fn forward_with(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        options: &ForwardOptions<'_>,
    ) -> Result<ForwardTrace> {
        let start = Instant::now();
        let n = tokens.len();
        if n != layout.len() {
            return Err(Error::Input(format!(
                "sequence length {n} does not match layout length {}",
                layout.len()
            )));
        }
        let cache = self.prefill_with(&tokens[..n - 1], options.knocked_out)?;
        let mut step = self.forward_step(&cache, tokens[n - 1], layout, options)?;
        step.trace.elapsed = start.elapsed();
        Ok(step.trace)
    }

    /// Runs the prompt prefix through every layer and keeps its keys and
    /// values. The prefix never sees an intervention: interventions only
    /// rewrite the last position's scores.
    pub fn prefill(&self, prefix: &[usize]) -> Result<PrefixCache> {
        self.prefill_with(prefix, &[])
    }

    fn prefill_with(&self, prefix: &[usize], knocked_out: &[(usize, usize)]) -> Result<PrefixCache> {
        let cfg = &self.config;
        let n = prefix.len();
        if n + 1 > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                n + 1,
                cfg.max_seq_len
            )));
        }
        self.check_tokens(prefix)?;
        check_knockouts(cfg, knocked_out)?;
        let d = cfg.embed_dim;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Array2::<f64>::zeros((n, d));
        for (i, &t) in prefix.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.token_embedding.row(t));
            row += &self.position_embedding.row(i);
        }
        let mut keys = Vec::with_capacity(cfg.num_layers);
        let mut values = Vec::with_capacity(cfg.num_layers);
        let mut scores = Array2::<f64>::zeros((n, n));
        for (l, w) in self.layers.iter().enumerate() {
            let xn = layer_norm(&x);
            let q = xn.dot(&w.wq);
            let k = xn.dot(&w.wk);
            let v = xn.dot(&w.wv);
            let mut attn = Array2::<f64>::zeros((n, d));
            if n > 0 {
                for h in 0..cfg.num_heads {
                    if knocked_out.contains(&(l, h)) {
                        continue;
                    }
                    let cols = s![.., h * hd..(h + 1) * hd];
                    ndarray::linalg::general_mat_mul(
                        scale,
                        &q.slice(cols),
                        &k.slice(cols).t(),
                        0.0,
                        &mut scores,
                    );
                    for i in 0..n {
                        let mut row = scores.row_mut(i);
                        let row = row.as_slice_mut().expect("scores are row-major");
                        let (visible, future) = row.split_at_mut(i + 1);
                        softmax_in_place(visible);
                        // causal mask
                        future.fill(0.0);
                    }
                    ndarray::linalg::general_mat_mul(
                        1.0,
                        &scores,
                        &v.slice(cols),
                        0.0,
                        &mut attn.slice_mut(cols),
                    );
                }
                x += &attn.dot(&w.wo);
                let hidden = layer_norm(&x).dot(&w.w_in).mapv_into(gelu);
                x += &hidden.dot(&w.w_out);
            }
            keys.push(k);
            values.push(v);
        }
        Ok(PrefixCache {
            tokens: prefix.to_vec(),
            keys,
            values,
        })
    }

    /// Forward pass of the single position following `cache`, recording
    /// the last-token trace. `layout` describes the whole sequence
    /// (prefix plus this token).
    pub fn forward_step(
        &self,
        cache: &PrefixCache,
        token: usize,
        layout: &TokenLayout,
        options: &ForwardOptions<'_>,
    ) -> Result<StepOutput> {
        let start = Instant::now();
        let cfg = &self.config;
        let n = cache.len() + 1;
        if layout.len() != n {
            return Err(Error::Input(format!(
                "layout covers {} positions, sequence has {n}",
                layout.len()
            )));
        }
        if n > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {n} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if cache.keys.len() != cfg.num_layers {
            return Err(Error::Input("prefix cache was built by a different model".into()));
        }
        self.check_tokens(&[token])?;
        if let Some(iv) = options.intervention {
            iv.validate(cfg, layout.n_image())?;
        }
        check_knockouts(cfg, options.knocked_out)?;

        let d = cfg.embed_dim;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let last = n - 1;
        let image = layout.image_indices();

        let mut x: Array1<f64> = &self.token_embedding.row(token) + &self.position_embedding.row(last);
        let mut heads = Vec::with_capacity(cfg.num_layers * cfg.num_heads);
        let mut layer_inputs = Vec::with_capacity(cfg.num_layers);
        let mut new_keys = Vec::with_capacity(cfg.num_layers);
        let mut new_values = Vec::with_capacity(cfg.num_layers);

        for (l, w) in self.layers.iter().enumerate() {
            layer_inputs.push(x.to_vec());
            let xn = layer_norm_row(x.view());
            let q = xn.dot(&w.wq);
            let k = xn.dot(&w.wk);
            let v = xn.dot(&w.wv);
            let ck_flat = cache.keys[l].as_slice().expect("cache is row-major");
            let cv_flat = cache.values[l].as_slice().expect("cache is row-major");
            let q_flat = q.as_slice().expect("contiguous");
            let k_flat = k.as_slice().expect("contiguous");
            let v_flat = v.as_slice().expect("contiguous");
            let layer_iv = options.intervention.and_then(|iv| iv.for_layer(l));
            let mut attn = Array1::<f64>::zeros(d);
            let attn_flat = attn.as_slice_mut().expect("contiguous");

            for h in 0..cfg.num_heads {
                let lo = h * hd;
                let hi = lo + hd;
                if options.knocked_out.contains(&(l, h)) {
                    heads.push(HeadTrace {
                        full_row: vec![0.0; n],
                        full_scores: vec![0.0; n],
                        image_row: vec![0.0; image.len()],
                        image_scores: vec![0.0; image.len()],
                        original_image_scores: None,
                    });
                    continue;
                }
                let qh = &q_flat[lo..hi];
                let dot = |kr: &[f64]| kr.iter().zip(qh).map(|(a, b)| a * b).sum::<f64>() * scale;
                let mut row = Vec::with_capacity(n);
                row.extend(ck_flat.chunks_exact(d).map(|kr| dot(&kr[lo..hi])));
                row.push(dot(&k_flat[lo..hi]));

                let mut original = None;
                if let Some(li) = layer_iv.filter(|li| li.head_scope.contains(h)) {
                    original = Some(image.iter().map(|&p| row[p]).collect::<Vec<_>>());
                    for (k_img, &p) in image.iter().enumerate() {
                        if li.target_mask[k_img] == 1 {
                            row[p] = enhance_score(row[p], li.beta);
                        }
                    }
                }
                let full_scores = row.clone();
                softmax_in_place(&mut row);

                let out = &mut attn_flat[lo..hi];
                for (&p, vr) in row[..last].iter().zip(cv_flat.chunks_exact(d)) {
                    for (o, x) in out.iter_mut().zip(&vr[lo..hi]) {
                        *o += p * x;
                    }
                }
                for (o, x) in out.iter_mut().zip(&v_flat[lo..hi]) {
                    *o += row[last] * x;
                }

                heads.push(HeadTrace {
                    image_row: image.iter().map(|&p| row[p]).collect(),
                    image_scores: image.iter().map(|&p| full_scores[p]).collect(),
                    full_row: row,
                    full_scores,
                    original_image_scores: original,
                });
            }
            x += &attn.dot(&w.wo);
            let hidden = layer_norm_row(x.view()).dot(&w.w_in).mapv_into(gelu);
            x += &hidden.dot(&w.w_out);
            new_keys.push(k);
            new_values.push(v);
        }

        let logits = layer_norm_row(x.view()).dot(&self.unembedding).to_vec();
        Ok(StepOutput {
            trace: ForwardTrace {
                num_layers: cfg.num_layers,
                num_heads: cfg.num_heads,
                layout: layout.clone(),
                heads,
                layer_inputs,
                logits,
                elapsed: start.elapsed(),
            },
            appended: CacheEntry {
                token,
                keys: new_keys,
                values: new_values,
            },
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

fn check_knockouts(cfg: &ModelConfig, knocked_out: &[(usize, usize)]) -> Result<()> {
    for &(l, h) in knocked_out {
        if l >= cfg.num_layers || h >= cfg.num_heads {
            return Err(Error::Intervention(format!(
                "knocked-out head ({l},{h}) out of range"
            )));
        }
    }
    Ok(())
}

/// Keys and values of every layer for an already-processed prefix.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    tokens: Vec<usize>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
}

impl PrefixCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Append the keys/values produced by a step.
    pub fn push(&mut self, entry: CacheEntry) {
        for (l, (k, v)) in entry.keys.into_iter().zip(entry.values).enumerate() {
            self.keys[l].push_row(k.view()).expect("key width matches");
            self.values[l].push_row(v.view()).expect("value width matches");
        }
        self.tokens.push(entry.token);
    }
}

#[derive(Clone, Debug)]
pub struct CacheEntry {
    token: usize,
    keys: Vec<Array1<f64>>,
    values: Vec<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub trace: ForwardTrace,
    pub appended: CacheEntry,
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn layer_norm_row(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * inv)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Numerically stable softmax, written into `row`.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            embed_dim: 32,
            vocab_size: 50,
            max_seq_len: 32,
            seed: 7,
        }
    }

    fn tokens(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + 3) % 50).collect()
    }

    #[test]
    fn identical_config_gives_identical_weights() {
        let a = Model::build(small()).unwrap();
        let b = Model::build(small()).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        let c = Model::build(ModelConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { num_heads: 3, ..small() };
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
        let cfg = ModelConfig { num_layers: 0, ..small() };
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
        let cfg = ModelConfig { max_seq_len: 1, ..small() };
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn large_shape_matches_config() {
        let cfg = ModelConfig {
            num_layers: 24,
            num_heads: 32,
            embed_dim: 128,
            vocab_size: 16,
            max_seq_len: 8,
            seed: 1,
        };
        let model = Model::build(cfg).unwrap();
        let layout = TokenLayout::contiguous(1, 4, 1).unwrap();
        let trace = model.forward(&[0, 1, 2, 3, 4, 5], &layout, None).unwrap();
        assert_eq!(trace.heads().count(), 24 * 32);
        assert_eq!(model.config().head_dim(), 4);
    }

    #[test]
    fn layout_validation() {
        assert!(TokenLayout::new(vec![0, 2], vec![1]).is_ok());
        assert!(TokenLayout::new(vec![0, 1], vec![1]).is_err());
        assert!(TokenLayout::new(vec![0], vec![]).is_err());
        assert!(TokenLayout::new(vec![0, 3], vec![1]).is_err());
        let l = TokenLayout::contiguous(2, 3, 1).unwrap();
        assert_eq!(l.text_indices(), &[0, 1, 5]);
        assert_eq!(l.image_indices(), &[2, 3, 4]);
        assert_eq!(l.extended(2).text_indices(), &[0, 1, 5, 6, 7]);
    }

    #[test]
    fn rows_are_distributions_and_deterministic() {
        let model = Model::build(small()).unwrap();
        let layout = TokenLayout::contiguous(2, 8, 3).unwrap();
        let toks = tokens(13);
        let a = model.forward(&toks, &layout, None).unwrap();
        let b = model.forward(&toks, &layout, None).unwrap();
        assert!(a.bit_eq(&b));
        for (_, h) in a.heads() {
            let sum: f64 = h.full_row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(h.full_row.iter().all(|&w| w >= 0.0));
            let img: Vec<f64> = layout.image_indices().iter().map(|&p| h.full_row[p]).collect();
            assert_eq!(img, h.image_row);
        }
    }

    #[test]
    fn length_mismatch_and_bad_layer() {
        let model = Model::build(small()).unwrap();
        let layout = TokenLayout::contiguous(2, 8, 3).unwrap();
        assert!(matches!(
            model.forward(&tokens(12), &layout, None),
            Err(Error::Input(_))
        ));
        let iv = Intervention::new(vec![LayerIntervention {
            layer: 2,
            target_mask: vec![0; 8],
            beta: 1.0,
            head_scope: HeadScope::All,
        }]);
        assert!(matches!(
            model.forward(&tokens(13), &layout, Some(&iv)),
            Err(Error::Intervention(_))
        ));
        let iv = Intervention::new(vec![LayerIntervention {
            layer: 0,
            target_mask: vec![2; 8],
            beta: 1.0,
            head_scope: HeadScope::All,
        }]);
        assert!(model.forward(&tokens(13), &layout, Some(&iv)).is_err());
    }

    #[test]
    fn extract_bounds_and_partition() {
        let model = Model::build(small()).unwrap();
        let layout = TokenLayout::contiguous(2, 8, 3).unwrap();
        let trace = model.forward(&tokens(13), &layout, None).unwrap();
        assert!(matches!(
            extract_image_attention(&trace, 2, 0),
            Err(Error::Index { what: "layer", .. })
        ));
        assert!(extract_image_attention(&trace, 0, 4).is_err());
        let (a, s) = extract_image_attention(&trace, 1, 3).unwrap();
        let full = &trace.head(1, 3).unwrap().full_row;
        let text_mass: f64 = layout.text_indices().iter().map(|&p| full[p]).sum();
        assert!((a.iter().sum::<f64>() + text_mass - 1.0).abs() < 1e-12);
        // recompute softmax from the stored full score row
        let recomputed = softmax(&trace.head(1, 3).unwrap().full_scores);
        for (k, &p) in layout.image_indices().iter().enumerate() {
            assert!((recomputed[p] - a[k]).abs() < 1e-15);
        }
        assert_eq!(s.len(), 8);
    }

    #[test]
    fn knockout_zeroes_rows() {
        let model = Model::build(small()).unwrap();
        let layout = TokenLayout::contiguous(2, 8, 3).unwrap();
        let trace = model
            .forward_with(
                &tokens(13),
                &layout,
                &ForwardOptions {
                    intervention: None,
                    knocked_out: &[(1, 2)],
                },
            )
            .unwrap();
        assert!(trace.head(1, 2).unwrap().full_row.iter().all(|&w| w == 0.0));
        let sum: f64 = trace.head(1, 1).unwrap().full_row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
