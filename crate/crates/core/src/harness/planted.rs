//! Synthetic attention tensors with planted sensitive heads and relevant
//! image regions.
//!
//! Every head of every instance gets a full pre-softmax score row for the
//! last token over `n_text + n_image` positions:
//!
//! * text positions: `text_level + N(0, score_noise)`
//! * image positions: `N(0, score_noise)`
//! * distractor region: `+distractor_boost_sensitive` on planted heads,
//!   `+distractor_boost_other` on all other heads
//! * relevant region: `+relevant_boost` on planted heads only
//!
//! The image-restricted softmax of that row is `A`. For planted heads the
//! contrastive `Â` moves `shift_fraction` of the relevant-region mass onto a
//! decoy region; for every other head `Â` is `A` plus Gaussian noise with
//! standard deviation `noise * mean(A)`, clipped at zero and rescaled to
//! `A`'s total. With `noise == 0` the non-planted `Â` equals `A` exactly.
//!
//! Planted heads sit in the middle third of the layers when it has room,
//! anywhere otherwise.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ars::PairAttention;
use crate::error::{Error, Result};
use crate::model::{softmax_in_place, Intervention, TokenLayout};
use crate::rve::{enhance_score, ScoreSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedParams {
    pub num_layers: usize,
    pub num_heads: usize,
    pub n_text: usize,
    pub n_image: usize,
    pub num_pairs: usize,
    pub num_sensitive_heads: usize,
    pub region_size: usize,
    pub distractor_size: usize,
    /// Contrastive noise on non-planted heads, in units of the mean image weight.
    pub noise: f64,
    pub seed: u64,
    pub shift_fraction: f64,
    pub text_level: f64,
    pub relevant_boost: f64,
    pub distractor_boost_sensitive: f64,
    pub distractor_boost_other: f64,
    pub score_noise: f64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            num_layers: 6,
            num_heads: 24,
            n_text: 16,
            n_image: 64,
            num_pairs: 8,
            num_sensitive_heads: 16,
            region_size: 6,
            distractor_size: 8,
            noise: 0.01,
            seed: 0,
            shift_fraction: 0.5,
            text_level: 3.0,
            relevant_boost: 2.0,
            distractor_boost_sensitive: 1.5,
            distractor_boost_other: 2.0,
            score_noise: 0.5,
        }
    }
}

impl PlantedParams {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.n_text == 0 || self.n_image == 0 {
            return err("planted dimensions must be positive".into());
        }
        if self.num_pairs == 0 {
            return err("num_pairs must be positive".into());
        }
        if self.num_sensitive_heads == 0 || self.num_sensitive_heads > self.num_layers * self.num_heads {
            return err(format!(
                "num_sensitive_heads {} must be in 1..={}",
                self.num_sensitive_heads,
                self.num_layers * self.num_heads
            ));
        }
        if self.region_size == 0 || 2 * self.region_size + self.distractor_size > self.n_image {
            return err(format!(
                "relevant, decoy and distractor regions ({} + {} + {}) must fit in {} image tokens",
                self.region_size, self.region_size, self.distractor_size, self.n_image
            ));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 1.0) {
            return err(format!("shift_fraction must be in (0, 1], got {}", self.shift_fraction));
        }
        if !(self.noise >= 0.0 && self.score_noise >= 0.0) {
            return err("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        let before = self.n_text / 2;
        TokenLayout::contiguous(before, self.n_image, self.n_text - before)
            .expect("validated dimensions give a valid layout")
    }

    /// Layers eligible for planted heads.
    pub fn sensitive_band(&self) -> Vec<usize> {
        let lo = self.num_layers / 3;
        let hi = self.num_layers - self.num_layers / 3;
        if (hi - lo) * self.num_heads >= self.num_sensitive_heads {
            (lo..hi).collect()
        } else {
            (0..self.num_layers).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub pair_id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub layout: TokenLayout,
    /// Pre-softmax rows, `(layer * H + head) * N + position`.
    pub scores: Vec<f64>,
    /// Image attention `A`, `(layer * H + head) * N_I + image index`.
    pub attention: Vec<f64>,
    /// Contrastive image attention `Â`, same indexing as `attention`.
    pub contrastive: Vec<f64>,
    /// Image indices (0-based within the image tokens).
    pub planted_relevant: Vec<usize>,
    pub distractor: Vec<usize>,
    pub decoy: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedDataset {
    pub params: PlantedParams,
    /// Sorted `(layer, head)` pairs whose contrastive attention was shifted.
    pub planted_sensitive: Vec<(usize, usize)>,
    pub instances: Vec<PlantedInstance>,
}

/// Move `mass` out of `from` (proportionally to the current weights) and
/// spread it evenly over `to`.
pub fn shift_mass(a: &mut [f64], from: &[usize], to: &[usize], mass: f64) {
    let total: f64 = from.iter().map(|&i| a[i]).sum();
    if total <= 0.0 || to.is_empty() {
        return;
    }
    let mass = mass.min(total);
    for &i in from {
        a[i] -= a[i] / total * mass;
    }
    let each = mass / to.len() as f64;
    for &i in to {
        a[i] += each;
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_planted(params: &PlantedParams) -> Result<PlantedDataset> {
    params.validate()?;
    let h = params.num_heads;
    let band = params.sensitive_band();
    let mut rng = rng_for(params.seed, 0);
    let slots: Vec<(usize, usize)> = band.iter().flat_map(|&l| (0..h).map(move |hh| (l, hh))).collect();
    let mut planted: Vec<(usize, usize)> = sample(&mut rng, slots.len(), params.num_sensitive_heads)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    planted.sort_unstable();
    let mut is_planted = vec![false; params.num_layers * h];
    for &(l, hh) in &planted {
        is_planted[l * h + hh] = true;
    }

    let instances = (0..params.num_pairs)
        .map(|i| generate_instance(params, &is_planted, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlantedDataset {
        params: params.clone(),
        planted_sensitive: planted,
        instances,
    })
}

fn generate_instance(params: &PlantedParams, is_planted: &[bool], index: usize) -> Result<PlantedInstance> {
    let mut rng = rng_for(params.seed, index as u64 + 1);
    let layout = params.layout();
    let n = layout.len();
    let ni = params.n_image;
    let img0 = layout.image_indices()[0];
    let r = params.region_size;
    let picks = sample(&mut rng, ni, 2 * r + params.distractor_size).into_vec();
    let relevant = sorted(picks[..r].to_vec());
    let distractor = sorted(picks[r..r + params.distractor_size].to_vec());
    let decoy = sorted(picks[r + params.distractor_size..].to_vec());

    let score_noise = Normal::new(0.0, params.score_noise).map_err(|e| Error::Config(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let heads = params.num_layers * params.num_heads;
    let mut scores = Vec::with_capacity(heads * n);
    let mut attention = Vec::with_capacity(heads * ni);
    let mut contrastive = Vec::with_capacity(heads * ni);

    for &planted in is_planted {
        let mut row: Vec<f64> = (0..n).map(|_| score_noise.sample(&mut rng)).collect();
        for &p in layout.text_indices() {
            row[p] += params.text_level;
        }
        let boost = if planted {
            params.distractor_boost_sensitive
        } else {
            params.distractor_boost_other
        };
        for &i in &distractor {
            row[img0 + i] += boost;
        }
        if planted {
            for &i in &relevant {
                row[img0 + i] += params.relevant_boost;
            }
        }
        let mut weights = row.clone();
        softmax_in_place(&mut weights);
        let a: Vec<f64> = weights[img0..img0 + ni].to_vec();
        let a_hat = if planted {
            let mut shifted = a.clone();
            let mass: f64 = relevant.iter().map(|&i| a[i]).sum::<f64>() * params.shift_fraction;
            shift_mass(&mut shifted, &relevant, &decoy, mass);
            shifted
        } else if params.noise == 0.0 {
            a.clone()
        } else {
            let total: f64 = a.iter().sum();
            let scale = params.noise * total / ni as f64;
            let mut noisy: Vec<f64> = a.iter().map(|&w| (w + scale * unit.sample(&mut rng)).max(0.0)).collect();
            let noisy_total: f64 = noisy.iter().sum();
            if noisy_total > 0.0 {
                noisy.iter_mut().for_each(|w| *w *= total / noisy_total);
            }
            noisy
        };
        scores.extend_from_slice(&row);
        attention.extend_from_slice(&a);
        contrastive.extend_from_slice(&a_hat);
    }

    Ok(PlantedInstance {
        pair_id: format!("planted-{:05}", index),
        num_layers: params.num_layers,
        num_heads: params.num_heads,
        layout,
        scores,
        attention,
        contrastive,
        planted_relevant: relevant,
        distractor,
        decoy,
    })
}

impl PlantedInstance {
    fn n(&self) -> usize {
        self.layout.len()
    }

    fn head_index(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.num_layers {
            return Err(Error::Index { what: "layer", index: layer, len: self.num_layers });
        }
        if head >= self.num_heads {
            return Err(Error::Index { what: "head", index: head, len: self.num_heads });
        }
        Ok(layer * self.num_heads + head)
    }

    pub fn score_row(&self, layer: usize, head: usize) -> Result<&[f64]> {
        let i = self.head_index(layer, head)?;
        let n = self.n();
        Ok(&self.scores[i * n..(i + 1) * n])
    }

    pub fn image_attention(&self, layer: usize, head: usize) -> Result<(&[f64], &[f64])> {
        let i = self.head_index(layer, head)?;
        let ni = self.layout.n_image();
        Ok((
            &self.attention[i * ni..(i + 1) * ni],
            &self.contrastive[i * ni..(i + 1) * ni],
        ))
    }

    pub fn pair_attention(&self) -> PairAttention {
        let ni = self.layout.n_image();
        PairAttention {
            pair_id: self.pair_id.clone(),
            original: self.attention.chunks(ni).map(<[f64]>::to_vec).collect(),
            contrastive: self.contrastive.chunks(ni).map(<[f64]>::to_vec).collect(),
        }
    }

    /// Post-softmax last-token row of one head, with the intervention
    /// applied when it targets this head.
    pub fn attention_row(&self, layer: usize, head: usize, intervention: Option<&Intervention>) -> Result<Vec<f64>> {
        let mut row = self.score_row(layer, head)?.to_vec();
        if let Some(li) = intervention
            .and_then(|iv| iv.layers.iter().find(|li| li.layer == layer))
            .filter(|li| li.head_scope.contains(head))
        {
            if li.target_mask.len() != self.layout.n_image() {
                return Err(Error::Intervention("target mask length differs from N_I".into()));
            }
            for (k, &p) in self.layout.image_indices().iter().enumerate() {
                if li.target_mask[k] == 1 {
                    row[p] = enhance_score(row[p], li.beta);
                }
            }
        }
        softmax_in_place(&mut row);
        Ok(row)
    }

    /// Grounded-answer proxy in `[0, 1]`: the mean over all heads of
    /// `4 * relevant_mass * text_mass`. A head scores 1 when it splits its
    /// attention evenly between the relevant image region and the text.
    /// Knocked-out heads contribute zero.
    pub fn readout(&self, intervention: Option<&Intervention>, knocked_out: &[(usize, usize)]) -> Result<f64> {
        let img = self.layout.image_indices();
        let mut total = 0.0;
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                if knocked_out.contains(&(l, h)) {
                    continue;
                }
                let row = self.attention_row(l, h, intervention)?;
                let relevant: f64 = self.planted_relevant.iter().map(|&i| row[img[i]]).sum();
                let text: f64 = self.layout.text_indices().iter().map(|&p| row[p]).sum();
                total += 4.0 * relevant * text;
            }
        }
        Ok(total / (self.num_layers * self.num_heads) as f64)
    }
}

impl ScoreSource for PlantedInstance {
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
        let img = self.layout.image_indices();
        let row = self.score_row(layer, head)?;
        Ok(&row[img[0]..img[0] + img.len()])
    }
}
