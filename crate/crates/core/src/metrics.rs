//! Modality-imbalance statistics: head-averaged attention, attention
//! allocation ratios per layer, and token number ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TokenLayout};

/// Zero weights are clamped to this before taking log10.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub layer: usize,
    pub r_att_t: f64,
    pub r_att_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub layers: Vec<LayerRatio>,
    pub r_num_t: f64,
    pub r_num_v: f64,
}

/// Token number ratios `(N_T / N, N_I / N)`; depends only on the layout.
pub fn number_ratios(layout: &TokenLayout) -> (f64, f64) {
    let n = layout.len() as f64;
    let r_t = layout.n_text() as f64 / n;
    (r_t, 1.0 - r_t)
}

/// Mean of the last-token attention rows over all heads of `layer`.
pub fn head_average(trace: &ForwardTrace, layer: usize) -> Result<Vec<f64>> {
    if layer >= trace.num_layers {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            len: trace.num_layers,
        });
    }
    let n = trace.layout.len();
    let mut mean = vec![0.0; n];
    for h in 0..trace.num_heads {
        for (m, w) in mean.iter_mut().zip(&trace.head(layer, h)?.full_row) {
            *m += w;
        }
    }
    let inv = 1.0 / trace.num_heads as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Text/image share of a single attention row. The denominator is the
/// row's actual total, not an assumed 1.
pub fn row_ratios(row: &[f64], layout: &TokenLayout) -> Result<(f64, f64)> {
    if row.len() != layout.len() {
        return Err(Error::Input(format!(
            "attention row has length {}, layout expects {}",
            row.len(),
            layout.len()
        )));
    }
    let total: f64 = row.iter().sum();
    let text: f64 = layout.text_indices().iter().map(|&i| row[i]).sum();
    let image: f64 = layout.image_indices().iter().map(|&i| row[i]).sum();
    if total <= 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((text / total, image / total))
}

pub fn attention_ratios(trace: &ForwardTrace, layout: &TokenLayout) -> Result<RatioReport> {
    if trace.layout.len() != layout.len() {
        return Err(Error::Input(format!(
            "trace covers {} positions, layout {}",
            trace.layout.len(),
            layout.len()
        )));
    }
    let layers = (0..trace.num_layers)
        .map(|l| {
            let avg = head_average(trace, l)?;
            let (r_att_t, r_att_v) = row_ratios(&avg, layout)?;
            Ok(LayerRatio {
                layer: l,
                r_att_t,
                r_att_v,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (r_num_t, r_num_v) = number_ratios(layout);
    Ok(RatioReport {
        layers,
        r_num_t,
        r_num_v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogWeightRow {
    pub layer: usize,
    pub position: usize,
    pub modality: Modality,
    pub weight: f64,
    pub log10_weight: f64,
}

pub fn clamped_log10(w: f64) -> f64 {
    w.max(LOG_CLAMP).log10()
}

/// Head-averaged per-position attention and its log10, for every layer.
pub fn log_attention_summary(
    trace: &ForwardTrace,
    layout: &TokenLayout,
) -> Result<Vec<LogWeightRow>> {
    let mut modality = vec![Modality::Text; layout.len()];
    for &i in layout.image_indices() {
        modality[i] = Modality::Image;
    }
    let mut rows = Vec::with_capacity(trace.num_layers * layout.len());
    for l in 0..trace.num_layers {
        let avg = head_average(trace, l)?;
        if avg.len() != layout.len() {
            return Err(Error::Input("trace and layout lengths differ".into()));
        }
        for (position, &weight) in avg.iter().enumerate() {
            rows.push(LogWeightRow {
                layer: l,
                position,
                modality: modality[position],
                weight,
                log10_weight: clamped_log10(weight),
            });
        }
    }
    Ok(rows)
}

/// Per layer: mean log10 weight of text positions, of image positions, and
/// their difference (text minus image).
pub fn modality_log_gap(rows: &[LogWeightRow]) -> Vec<(usize, f64, f64, f64)> {
    let layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut acc = vec![(0.0, 0usize, 0.0, 0usize); layers];
    for r in rows {
        let a = &mut acc[r.layer];
        match r.modality {
            Modality::Text => {
                a.0 += r.log10_weight;
                a.1 += 1;
            }
            Modality::Image => {
                a.2 += r.log10_weight;
                a.3 += 1;
            }
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(l, (ts, tn, is, inn))| {
            let t = ts / tn.max(1) as f64;
            let i = is / inn.max(1) as f64;
            (l, t, i, t - i)
        })
        .collect()
}
