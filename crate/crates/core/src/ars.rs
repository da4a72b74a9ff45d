//! Action-relation sensitivity of attention heads.
//!
//! A head's ARS score for one contrastive pair is the Euclidean distance
//! between its last-token image attention under the original and the
//! verb-swapped text, divided by the mean of the two vectors' norms.
//! Dataset-level scores are the unweighted mean over pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenLayout};
use crate::par::{self, Exec};

/// Denominator guard for [`ars_score`].
pub const ARS_EPS: f64 = 1e-12;

pub const AGGREGATION: &str = "mean-over-pairs";

pub fn ars_score(a: &[f64], a_hat: &[f64]) -> Result<f64> {
    if a.len() != a_hat.len() {
        return Err(Error::Input(format!(
            "attention vectors differ in length ({} vs {})",
            a.len(),
            a_hat.len()
        )));
    }
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(a_hat) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = 0.5 * (na.sqrt() + nb.sqrt());
    if !(denom > ARS_EPS) {
        return Err(Error::Degenerate(format!(
            "mean attention norm {denom:e} is below {ARS_EPS:e}"
        )));
    }
    Ok(diff.sqrt() / denom)
}

/// Original and verb-swapped inputs sharing one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub pair_id: String,
    pub tokens_original: Vec<usize>,
    pub tokens_contrastive: Vec<usize>,
    pub layout: TokenLayout,
    pub verb_original: String,
    pub verb_contrastive: String,
}

impl ContrastivePair {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens_original.len();
        if self.tokens_contrastive.len() != n {
            return Err(Error::Input(format!(
                "pair {}: token sequences differ in length ({} vs {})",
                self.pair_id,
                n,
                self.tokens_contrastive.len()
            )));
        }
        if self.layout.len() != n {
            return Err(Error::Input(format!(
                "pair {}: layout covers {} positions, sequence has {n}",
                self.pair_id,
                self.layout.len()
            )));
        }
        if let Some(&p) = self
            .layout
            .image_indices()
            .iter()
            .find(|&&p| self.tokens_original[p] != self.tokens_contrastive[p])
        {
            return Err(Error::Input(format!(
                "pair {}: sequences differ at image position {p}",
                self.pair_id
            )));
        }
        Ok(())
    }
}

/// Image attention rows of one pair, indexed `layer * H + head`.
#[derive(Clone, Debug)]
pub struct PairAttention {
    pub pair_id: String,
    pub original: Vec<Vec<f64>>,
    pub contrastive: Vec<Vec<f64>>,
}

impl PairAttention {
    pub fn head_scores(&self) -> Result<Vec<f64>> {
        if self.original.len() != self.contrastive.len() {
            return Err(Error::Input(format!(
                "pair {}: head counts differ",
                self.pair_id
            )));
        }
        self.original
            .iter()
            .zip(&self.contrastive)
            .map(|(a, b)| ars_score(a, b))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArsMatrix {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Row-major `num_layers x num_heads`.
    pub scores: Vec<f64>,
    pub pair_count: usize,
    pub aggregation: String,
    /// Pairs dropped because some head had a degenerate denominator.
    #[serde(default)]
    pub skipped_pairs: Vec<String>,
}

impl ArsMatrix {
    pub fn from_scores(num_layers: usize, num_heads: usize, scores: Vec<f64>) -> Result<Self> {
        if num_layers == 0 || num_heads == 0 || scores.len() != num_layers * num_heads {
            return Err(Error::Input(format!(
                "{} scores cannot form a {num_layers}x{num_heads} matrix",
                scores.len()
            )));
        }
        Ok(ArsMatrix {
            num_layers,
            num_heads,
            scores,
            pair_count: 1,
            aggregation: AGGREGATION.to_string(),
            skipped_pairs: Vec::new(),
        })
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.num_heads + head]
    }

    pub fn row(&self, layer: usize) -> Result<&[f64]> {
        if layer >= self.num_layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                len: self.num_layers,
            });
        }
        let h = self.num_heads;
        Ok(&self.scores[layer * h..(layer + 1) * h])
    }
}

/// Mean of per-pair head scores. Pairs are reduced in `pair_id` order so
/// the result does not depend on input order or scheduling.
pub fn aggregate(
    num_layers: usize,
    num_heads: usize,
    mut per_pair: Vec<(String, Result<Vec<f64>>)>,
) -> Result<ArsMatrix> {
    if per_pair.is_empty() {
        return Err(Error::EmptyDataset("no contrastive pairs".into()));
    }
    per_pair.sort_by(|a, b| a.0.cmp(&b.0));
    let cells = num_layers * num_heads;
    let mut sum = vec![0.0; cells];
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for (id, scores) in per_pair {
        match scores {
            Ok(s) => {
                if s.len() != cells {
                    return Err(Error::Input(format!(
                        "pair {id}: {} head scores, expected {cells}",
                        s.len()
                    )));
                }
                sum.iter_mut().zip(&s).for_each(|(acc, v)| *acc += v);
                used += 1;
            }
            Err(Error::Degenerate(msg)) => {
                log::warn!("skipping degenerate pair {id}: {msg}");
                skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(format!(
            "all {} pairs were degenerate",
            skipped.len()
        )));
    }
    let inv = 1.0 / used as f64;
    sum.iter_mut().for_each(|v| *v *= inv);
    Ok(ArsMatrix {
        num_layers,
        num_heads,
        scores: sum,
        pair_count: used,
        aggregation: AGGREGATION.to_string(),
        skipped_pairs: skipped,
    })
}

pub fn ars_matrix_from_attention(
    num_layers: usize,
    num_heads: usize,
    pairs: &[PairAttention],
) -> Result<ArsMatrix> {
    let per_pair = pairs
        .iter()
        .map(|p| (p.pair_id.clone(), p.head_scores()))
        .collect();
    aggregate(num_layers, num_heads, per_pair)
}

/// Last-token image attention of every head for both sides of a pair.
pub fn pair_attention(model: &Model, pair: &ContrastivePair) -> Result<PairAttention> {
    pair.validate()?;
    let collect = |tokens: &[usize]| -> Result<Vec<Vec<f64>>> {
        let trace = model.forward(tokens, &pair.layout, None)?;
        Ok(trace.heads().map(|(_, h)| h.image_row.clone()).collect())
    };
    Ok(PairAttention {
        pair_id: pair.pair_id.clone(),
        original: collect(&pair.tokens_original)?,
        contrastive: collect(&pair.tokens_contrastive)?,
    })
}

pub fn ars_matrix(model: &Model, pairs: &[ContrastivePair]) -> Result<ArsMatrix> {
    ars_matrix_with(model, pairs, Exec::default())
}

pub fn ars_matrix_with(model: &Model, pairs: &[ContrastivePair], exec: Exec) -> Result<ArsMatrix> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no contrastive pairs".into()));
    }
    let cfg = model.config();
    let per_pair = par::map(exec, pairs, |pair| {
        let scores = pair_attention(model, pair).and_then(|pa| pa.head_scores());
        (pair.pair_id.clone(), scores)
    });
    aggregate(cfg.num_layers, cfg.num_heads, per_pair)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub layer: usize,
    pub k: usize,
    /// Highest-scoring heads, best first.
    pub sensitive: Vec<usize>,
    /// Lowest-scoring heads outside `sensitive`, lowest first.
    pub non_sensitive: Vec<usize>,
}

/// Ties go to the lower head index in both lists.
pub fn rank_heads(matrix: &ArsMatrix, layer: usize, k: usize) -> Result<HeadSelection> {
    let row = matrix.row(layer)?;
    if k == 0 || 2 * k > row.len() {
        return Err(Error::Selection(format!(
            "need 1 <= K and 2K <= H (K={k}, H={})",
            row.len()
        )));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let sensitive: Vec<usize> = order[..k].to_vec();
    let mut rest: Vec<usize> = order[k..].to_vec();
    rest.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    rest.truncate(k);
    Ok(HeadSelection {
        layer,
        k,
        sensitive,
        non_sensitive: rest,
    })
}

/// Mean ARS of each layer.
pub fn layer_profile(matrix: &ArsMatrix) -> Vec<f64> {
    matrix
        .scores
        .chunks(matrix.num_heads)
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect()
}

/// The `k` highest-scoring heads across all layers, as `(layer, head)`.
pub fn top_heads(matrix: &ArsMatrix, k: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..matrix.scores.len()).collect();
    order.sort_by(|&a, &b| matrix.scores[b].total_cmp(&matrix.scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (i / matrix.num_heads, i % matrix.num_heads))
        .collect()
}
