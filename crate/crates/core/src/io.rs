//! Dataset ingestion, run configuration and file exports.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ars::{layer_profile, ArsMatrix, ContrastivePair};
use crate::error::{Error, Result};
use crate::harness::{HarnessMode, LatencyConfig, PlantedParams, SweepRow, SyntheticParams};
use crate::metrics::{LogWeightRow, RatioReport};
use crate::model::{ModelConfig, TokenLayout};
use crate::rve::RveConfig;

pub const CONFIG_VERSION: u32 = 1;

/// One line of a pair dataset. Image tokens occupy the contiguous range
/// `image_start .. image_start + image_token_count`; every other position is
/// text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFileRecord {
    pub pair_id: String,
    pub original_text: String,
    pub contrastive_text: String,
    pub verb_original: String,
    pub verb_contrastive: String,
    pub image_token_count: usize,
    #[serde(rename = "token_ids_T")]
    pub token_ids_t: Vec<usize>,
    #[serde(rename = "token_ids_That")]
    pub token_ids_that: Vec<usize>,
    #[serde(default)]
    pub image_start: usize,
}

impl PairFileRecord {
    pub fn into_pair(self) -> std::result::Result<ContrastivePair, String> {
        let n = self.token_ids_t.len();
        if self.token_ids_that.len() != n {
            return Err(format!(
                "token_ids_T has {n} ids but token_ids_That has {}",
                self.token_ids_that.len()
            ));
        }
        if self.image_token_count == 0 {
            return Err("image_token_count must be positive".into());
        }
        let end = self.image_start + self.image_token_count;
        if end > n {
            return Err(format!("image tokens {}..{end} exceed sequence length {n}", self.image_start));
        }
        let layout = TokenLayout::contiguous(self.image_start, self.image_token_count, n - end)
            .map_err(|e| e.to_string())?;
        let pair = ContrastivePair {
            pair_id: self.pair_id,
            tokens_original: self.token_ids_t,
            tokens_contrastive: self.token_ids_that,
            layout,
            verb_original: self.verb_original,
            verb_contrastive: self.verb_contrastive,
        };
        pair.validate().map_err(|e| e.to_string())?;
        Ok(pair)
    }

    /// Inverse of [`into_pair`](Self::into_pair) for contiguous layouts.
    pub fn from_pair(pair: &ContrastivePair) -> Result<Self> {
        let img = pair.layout.image_indices();
        let start = img.first().copied().unwrap_or(0);
        if img.iter().enumerate().any(|(k, &p)| p != start + k) {
            return Err(Error::Input(format!(
                "pair {}: only contiguous image spans can be written",
                pair.pair_id
            )));
        }
        let words = |tokens: &[usize]| tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        Ok(PairFileRecord {
            pair_id: pair.pair_id.clone(),
            original_text: words(&pair.tokens_original),
            contrastive_text: words(&pair.tokens_contrastive),
            verb_original: pair.verb_original.clone(),
            verb_contrastive: pair.verb_contrastive.clone(),
            image_token_count: img.len(),
            token_ids_t: pair.tokens_original.clone(),
            token_ids_that: pair.tokens_contrastive.clone(),
            image_start: start,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IngestMode {
    /// Abort on the first malformed line; an empty result is an error.
    #[default]
    Strict,
    /// Skip malformed lines and report them.
    Lenient,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub pairs: Vec<ContrastivePair>,
    /// `(line number, message)` for every skipped line (lenient mode).
    pub skipped: Vec<(usize, String)>,
}

pub fn parse_pairs(reader: impl BufRead, mode: IngestMode) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Schema { line: lineno, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<PairFileRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(PairFileRecord::into_pair);
        match parsed {
            Ok(pair) => out.pairs.push(pair),
            Err(message) => match mode {
                IngestMode::Strict => return Err(Error::Schema { line: lineno, message }),
                IngestMode::Lenient => {
                    log::warn!("skipping line {lineno}: {message}");
                    out.skipped.push((lineno, message));
                }
            },
        }
    }
    if mode == IngestMode::Strict && out.pairs.is_empty() {
        return Err(Error::EmptyDataset("pair file contains no records".into()));
    }
    Ok(out)
}

pub fn ingest_pairs(path: &Path, mode: IngestMode) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(BufReader::new(file), mode)
}

pub fn write_pairs(path: &Path, pairs: &[ContrastivePair]) -> Result<()> {
    let mut w = create(path)?;
    for p in pairs {
        let line = serde_json::to_string(&PairFileRecord::from_pair(p)?)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline. Keys follow struct field order.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ArsRow {
    layer: usize,
    head: usize,
    ars: f64,
}

pub fn write_ars_csv(path: &Path, matrix: &ArsMatrix) -> Result<()> {
    let h = matrix.num_heads;
    write_csv(
        path,
        matrix.scores.iter().enumerate().map(|(i, &ars)| ArsRow { layer: i / h, head: i % h, ars }),
    )
}

/// Reads a matrix written by [`write_ars_csv`]. Pair metadata is not stored,
/// so `pair_count` is 0.
pub fn read_ars_csv(path: &Path) -> Result<ArsMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let rows = r
        .deserialize::<ArsRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let num_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let num_heads = rows.iter().map(|r| r.head + 1).max().unwrap_or(0);
    if rows.len() != num_layers * num_heads {
        return Err(Error::Input(format!("{}: ARS grid is incomplete", path.display())));
    }
    let mut scores = vec![f64::NAN; rows.len()];
    for r in rows {
        scores[r.layer * num_heads + r.head] = r.ars;
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input(format!("{}: duplicate ARS entries", path.display())));
    }
    ArsMatrix::from_scores(num_layers, num_heads, scores)
}

pub fn write_layer_profile_csv(path: &Path, matrix: &ArsMatrix) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        layer: usize,
        mean_ars: f64,
    }
    write_csv(
        path,
        layer_profile(matrix).into_iter().enumerate().map(|(layer, mean_ars)| Row { layer, mean_ars }),
    )
}

pub fn write_ratio_csv(path: &Path, report: &RatioReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        layer: usize,
        r_att_t: f64,
        r_att_v: f64,
        r_num_t: f64,
        r_num_v: f64,
    }
    write_csv(
        path,
        report.layers.iter().map(|l| Row {
            layer: l.layer,
            r_att_t: l.r_att_t,
            r_att_v: l.r_att_v,
            r_num_t: report.r_num_t,
            r_num_v: report.r_num_v,
        }),
    )
}

pub fn write_log_weight_csv(path: &Path, rows: &[LogWeightRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Smallest square grid holding `n` cells.
pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s
}

/// Binary PGM (P5) bytes: min-max normalized to 0..=255, row-major, padding
/// cells 0. A constant vector maps to 255 everywhere.
pub fn heatmap_bytes(values: &[f64], grid_side: usize) -> Result<Vec<u8>> {
    if grid_side * grid_side < values.len() {
        return Err(Error::Config(format!(
            "grid side {grid_side} is too small for {} values",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("heatmap values must be finite".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{grid_side} {grid_side}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round() as u8
        } else {
            255
        }
    }));
    out.resize(out.len() + grid_side * grid_side - values.len(), 0);
    Ok(out)
}

pub fn export_heatmap(values: &[f64], grid_side: usize, path: &Path) -> Result<()> {
    let bytes = heatmap_bytes(values, grid_side)?;
    let mut w = create(path)?;
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub ks: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        let d = crate::harness::SweepConfig::default();
        SweepGrid { alphas: d.alphas, betas: d.betas, ks: d.ks }
    }
}

/// Everything a CLI run needs, loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: HarnessMode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Pair JSONL for model mode; synthetic pairs are generated when unset.
    pub dataset: Option<PathBuf>,
    /// Ground-truth JSON for `dataset` (model-mode ablation).
    pub truth: Option<PathBuf>,
    pub strict: bool,
    pub random_trials: usize,
    /// Heads shown in the top/bottom heatmaps of `analyze-ars`.
    pub heatmap_heads: usize,
    /// Tokens generated by `run-rve` in model mode.
    pub generate_steps: usize,
    pub model: ModelConfig,
    pub rve: RveConfig,
    pub planted: PlantedParams,
    pub synthetic: SyntheticParams,
    pub sweep: SweepGrid,
    /// When present, `ablate` also times every variant and writes a timing
    /// sidecar.
    pub latency: Option<LatencyConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_VERSION,
            mode: HarnessMode::Tensor,
            seeds: (0..20).collect(),
            output_dir: PathBuf::from("out"),
            dataset: None,
            truth: None,
            strict: true,
            random_trials: 20,
            heatmap_heads: 3,
            generate_steps: 4,
            model: ModelConfig {
                num_layers: 6,
                num_heads: 12,
                embed_dim: 48,
                vocab_size: 256,
                max_seq_len: 128,
                seed: 0,
            },
            rve: crate::harness::ablation::harness_rve_config(),
            planted: PlantedParams::default(),
            synthetic: SyntheticParams::default(),
            sweep: SweepGrid::default(),
            latency: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {} (expected {CONFIG_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// Parses the file and resolves relative dataset paths against its
    /// directory. Referenced input files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.truth].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.dataset, &self.truth].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
