//! Token-level contrastive pairs for running the toy model end to end.
//!
//! Text tokens come from the lower half of the vocabulary, image tokens from
//! the upper half. The relation verb sits at position `N - 2` (the last token
//! is a text query token), and the answer token is the original verb.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ablation::ModelTruth;
use crate::ars::ContrastivePair;
use crate::error::{Error, Result};
use crate::model::TokenLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub vocab_size: usize,
    pub text_before: usize,
    pub n_image: usize,
    pub text_after: usize,
    pub num_pairs: usize,
    pub region_size: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            vocab_size: 256,
            text_before: 8,
            n_image: 32,
            text_after: 4,
            num_pairs: 4,
            region_size: 4,
            seed: 0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        if self.text_after < 2 {
            return Err(Error::Config("text_after must leave room for the verb and the query token".into()));
        }
        if self.num_pairs == 0 {
            return Err(Error::Config("num_pairs must be positive".into()));
        }
        if self.region_size == 0 || self.region_size > self.n_image {
            return Err(Error::Config(format!(
                "region_size {} must be in 1..={}",
                self.region_size, self.n_image
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::contiguous(self.text_before, self.n_image, self.text_after)
    }
}

pub fn synthetic_pairs(params: &SyntheticParams) -> Result<(Vec<ContrastivePair>, Vec<ModelTruth>)> {
    params.validate()?;
    let layout = params.layout()?;
    let half = params.vocab_size / 2;
    let n = layout.len();
    let verb_pos = n - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pairs = Vec::with_capacity(params.num_pairs);
    let mut truth = Vec::with_capacity(params.num_pairs);
    for i in 0..params.num_pairs {
        let mut tokens = vec![0usize; n];
        for &p in layout.text_indices() {
            tokens[p] = rng.gen_range(0..half);
        }
        for &p in layout.image_indices() {
            tokens[p] = rng.gen_range(half..params.vocab_size);
        }
        let verb = tokens[verb_pos];
        let mut other = rng.gen_range(0..half - 1);
        if other >= verb {
            other += 1;
        }
        let mut contrastive = tokens.clone();
        contrastive[verb_pos] = other;
        let start = rng.gen_range(0..=params.n_image - params.region_size);
        let pair_id = format!("pair-{i:04}");
        pairs.push(ContrastivePair {
            pair_id: pair_id.clone(),
            tokens_original: tokens,
            tokens_contrastive: contrastive,
            layout: layout.clone(),
            verb_original: format!("v{verb}"),
            verb_contrastive: format!("v{other}"),
        });
        truth.push(ModelTruth {
            pair_id,
            relevant: (start..start + params.region_size).collect(),
            answer_token: verb,
        });
    }
    Ok((pairs, truth))
}
