//! The `attnsteer` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::ars::{ars_matrix, pair_attention, top_heads, ArsMatrix, ContrastivePair, HeadSelection};
use crate::error::{Error, Result};
use crate::harness::ablation::planted_matrix;
use crate::harness::{
    generate_planted, measure_latency, run_ablation, run_ablation_model, run_sweep, synthetic_pairs, AblationConfig,
    HarnessMode, ModelTruth, PlantedDataset, PlantedParams, SweepConfig, SyntheticParams,
};
use crate::io::{self, IngestMode, RunConfig};
use crate::metrics::{attention_ratios, log_attention_summary, modality_log_gap};
use crate::model::Model;
use crate::par::{self, Exec};
use crate::rve::{generate, plan_intervention, MaskSet, RveConfig};

pub const THREADS_ENV: &str = "ATTNSTEER_THREADS";

#[derive(Debug, Parser)]
#[command(name = "attnsteer", version, about = "Relation-sensitive head scoring and visual attention steering")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Skip malformed dataset lines instead of aborting.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Tensor,
    Model,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// ARS matrix, layer profile and top/bottom head heatmaps.
    AnalyzeArs,
    /// Enhancement/denoising masks per unit, plus mask heatmaps.
    PlanRve,
    /// Vanilla vs. steered attention per unit, with a comparison summary.
    RunRve,
    /// Six-variant ablation report.
    Ablate {
        /// Also time every variant on the latency model.
        #[arg(long)]
        latency: bool,
    },
    /// Metric over the alpha/beta/K grid on planted data.
    Sweep,
    /// Write the dataset the other commands would use.
    GenData,
    /// Text/image attention ratios and log-weight summaries.
    PlotImbalance,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::AnalyzeArs => "analyze-ars",
            Command::PlanRve => "plan-rve",
            Command::RunRve => "run-rve",
            Command::Ablate { .. } => "ablate",
            Command::Sweep => "sweep",
            Command::GenData => "gen-data",
            Command::PlotImbalance => "plot-imbalance",
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn report_error(kind: &str, message: String, exit_code: i32) {
    let line = ErrorLine { error: kind, message, exit_code };
    eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
}

/// Runs the CLI and returns the process exit code: 0 success, 1 usage,
/// 2 data or config error, 3 internal error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            report_error("usage", e.kind().to_string(), 1);
            return 1;
        }
    };
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 && !par::init_threads(n) {
            log::debug!("worker pool already initialized; {THREADS_ENV} ignored");
        }
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report_error(e.kind(), e.to_string(), code);
            code
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.synthetic.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match cli.mode {
        Some(ModeArg::Tensor) => cfg.mode = HarnessMode::Tensor,
        Some(ModeArg::Model) => cfg.mode = HarnessMode::Model,
        None => {}
    }
    if cli.lenient {
        cfg.strict = false;
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seeds must not be empty".into()));
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    version: &'a str,
    started_unix_ms: u128,
    elapsed_ms: f64,
    outputs: &'a [PathBuf],
}

/// Collects written paths so the sidecar can list them.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn path(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let rel = name.as_ref().to_path_buf();
        self.written.push(rel.clone());
        self.dir.join(rel)
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let mut out = Outputs { dir: cfg.output_dir.clone(), written: Vec::new() };
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    match &cli.command {
        Command::AnalyzeArs => analyze_ars(&cfg, &mut out)?,
        Command::PlanRve => plan_rve(&cfg, &mut out)?,
        Command::RunRve => run_rve(&cfg, &mut out)?,
        Command::Ablate { latency } => ablate(&cfg, *latency, &mut out)?,
        Command::Sweep => sweep(&cfg, &mut out)?,
        Command::GenData => gen_data(&cfg, &mut out)?,
        Command::PlotImbalance => plot_imbalance(&cfg, &mut out)?,
    }
    let name = cli.command.name();
    let sidecar = Sidecar {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        started_unix_ms: started,
        elapsed_ms: clock.elapsed().as_secs_f64() * 1e3,
        outputs: &out.written,
    };
    io::write_json(&out.dir.join(format!("{name}.sidecar.json")), &sidecar)
}

fn planted_for(cfg: &RunConfig) -> Result<PlantedDataset> {
    generate_planted(&PlantedParams { seed: cfg.seeds[0], ..cfg.planted.clone() })
}

struct ModelData {
    model: Model,
    pairs: Vec<ContrastivePair>,
    truth: Option<Vec<ModelTruth>>,
}

fn model_data(cfg: &RunConfig) -> Result<ModelData> {
    let model = Model::build(cfg.model.clone())?;
    let (pairs, truth) = match &cfg.dataset {
        Some(path) => {
            let mode = if cfg.strict { IngestMode::Strict } else { IngestMode::Lenient };
            let ingested = io::ingest_pairs(path, mode)?;
            if ingested.pairs.is_empty() {
                return Err(Error::EmptyDataset(format!("{} has no valid pairs", path.display())));
            }
            let truth = cfg.truth.as_deref().map(io::read_json::<Vec<ModelTruth>>).transpose()?;
            (ingested.pairs, truth)
        }
        None => {
            let params = SyntheticParams {
                vocab_size: cfg.model.vocab_size,
                ..cfg.synthetic.clone()
            };
            let (pairs, truth) = synthetic_pairs(&params)?;
            (pairs, Some(truth))
        }
    };
    Ok(ModelData { model, pairs, truth })
}

/// Heads ranked by ascending ARS, ties to the lower flat index.
fn bottom_heads(matrix: &ArsMatrix, k: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..matrix.scores.len()).collect();
    idx.sort_by(|&a, &b| matrix.scores[a].total_cmp(&matrix.scores[b]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| (i / matrix.num_heads, i % matrix.num_heads))
        .collect()
}

fn analyze_ars(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (matrix, rows): (ArsMatrix, Vec<Vec<f64>>) = match cfg.mode {
        HarnessMode::Tensor => {
            let data = planted_for(cfg)?;
            let matrix = planted_matrix(&data)?;
            (matrix, data.instances[0].pair_attention().original)
        }
        HarnessMode::Model => {
            let data = model_data(cfg)?;
            let matrix = ars_matrix(&data.model, &data.pairs)?;
            (matrix, pair_attention(&data.model, &data.pairs[0])?.original)
        }
    };
    io::write_ars_csv(&out.path("ars.csv"), &matrix)?;
    io::write_layer_profile_csv(&out.path("layer_profile.csv"), &matrix)?;
    let k = cfg.heatmap_heads.min(matrix.scores.len());
    for (tag, heads) in [("top", top_heads(&matrix, k)), ("bottom", bottom_heads(&matrix, k))] {
        for (rank, (l, h)) in heads.into_iter().enumerate() {
            let values = &rows[l * matrix.num_heads + h];
            let side = io::grid_side(values.len());
            io::export_heatmap(values, side, &out.path(format!("heatmaps/{tag}{rank}_l{l}_h{h}.pgm")))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PlanRecord {
    unit: String,
    target_layers: Vec<usize>,
    selections: Vec<HeadSelection>,
    masks: Vec<MaskSet>,
}

fn plan_rve(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let mut records = Vec::new();
    match cfg.mode {
        HarnessMode::Tensor => {
            let data = planted_for(cfg)?;
            let matrix = planted_matrix(&data)?;
            for inst in &data.instances {
                let plan = plan_intervention(&matrix, inst, &cfg.rve)?;
                records.push(PlanRecord {
                    unit: inst.pair_id.clone(),
                    target_layers: plan.target_layers(),
                    selections: plan.selections,
                    masks: plan.masks,
                });
            }
        }
        HarnessMode::Model => {
            let data = model_data(cfg)?;
            let matrix = ars_matrix(&data.model, &data.pairs)?;
            for pair in &data.pairs {
                let trace = data.model.forward(&pair.tokens_original, &pair.layout, None)?;
                let plan = plan_intervention(&matrix, &trace, &cfg.rve)?;
                records.push(PlanRecord {
                    unit: pair.pair_id.clone(),
                    target_layers: plan.target_layers(),
                    selections: plan.selections,
                    masks: plan.masks,
                });
            }
        }
    }
    io::write_json(&out.path("masks.json"), &records)?;
    if let Some(first) = records.first() {
        for mask in &first.masks {
            let layer = mask.layer.unwrap_or(0);
            for (name, bits) in [("enh", &mask.enh), ("den", &mask.den), ("target", &mask.target)] {
                let values: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
                let side = io::grid_side(values.len());
                io::export_heatmap(&values, side, &out.path(format!("masks/{}_l{layer}_{name}.pgm", first.unit)))?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct HeadRows {
    layer: usize,
    head: usize,
    vanilla: Vec<f64>,
    steered: Vec<f64>,
}

#[derive(Serialize)]
struct Comparison {
    unit: String,
    target_layers: Vec<usize>,
    /// Image attention mass on target-mask positions, averaged over the
    /// heads of the target layers.
    vanilla_target_mass: f64,
    steered_target_mass: f64,
    vanilla_metric: f64,
    steered_metric: f64,
    vanilla_tokens: Vec<usize>,
    steered_tokens: Vec<usize>,
}

fn target_mass(rows: &[HeadRows], masks: &[MaskSet], pick: impl Fn(&HeadRows) -> &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in rows {
        if let Some(mask) = masks.iter().find(|m| m.layer == Some(r.layer)) {
            sum += pick(r).iter().zip(&mask.target).filter(|(_, &b)| b == 1).map(|(w, _)| w).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn run_rve(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let mut comparisons = Vec::new();
    match cfg.mode {
        HarnessMode::Tensor => {
            let data = planted_for(cfg)?;
            let matrix = planted_matrix(&data)?;
            for inst in &data.instances {
                let plan = plan_intervention(&matrix, inst, &cfg.rve)?;
                let img = inst.layout.image_indices();
                let mut rows = Vec::new();
                for &l in &plan.target_layers() {
                    for h in 0..inst.num_heads {
                        let pick = |r: Vec<f64>| img.iter().map(|&p| r[p]).collect::<Vec<_>>();
                        rows.push(HeadRows {
                            layer: l,
                            head: h,
                            vanilla: pick(inst.attention_row(l, h, None)?),
                            steered: pick(inst.attention_row(l, h, Some(&plan.intervention))?),
                        });
                    }
                }
                comparisons.push(Comparison {
                    unit: inst.pair_id.clone(),
                    target_layers: plan.target_layers(),
                    vanilla_target_mass: target_mass(&rows, &plan.masks, |r| &r.vanilla),
                    steered_target_mass: target_mass(&rows, &plan.masks, |r| &r.steered),
                    vanilla_metric: inst.readout(None, &[])?,
                    steered_metric: inst.readout(Some(&plan.intervention), &[])?,
                    vanilla_tokens: Vec::new(),
                    steered_tokens: Vec::new(),
                });
                io::write_json(&out.path(format!("traces/{}.json", inst.pair_id)), &rows)?;
            }
        }
        HarnessMode::Model => {
            let data = model_data(cfg)?;
            let matrix = ars_matrix(&data.model, &data.pairs)?;
            let plain = RveConfig { beta: 0.0, ..cfg.rve.clone() };
            for (i, pair) in data.pairs.iter().enumerate() {
                let vanilla = data.model.forward(&pair.tokens_original, &pair.layout, None)?;
                let plan = plan_intervention(&matrix, &vanilla, &cfg.rve)?;
                let steered = data.model.forward(&pair.tokens_original, &pair.layout, Some(&plan.intervention))?;
                let mut rows = Vec::new();
                for &l in &plan.target_layers() {
                    for h in 0..vanilla.num_heads {
                        rows.push(HeadRows {
                            layer: l,
                            head: h,
                            vanilla: vanilla.head(l, h)?.image_row.clone(),
                            steered: steered.head(l, h)?.image_row.clone(),
                        });
                    }
                }
                let answer = data.truth.as_ref().and_then(|t| t.get(i)).map(|t| t.answer_token);
                let prob = |t: &crate::model::ForwardTrace| answer.map_or(0.0, |a| t.token_probability(a));
                let steps = cfg.generate_steps;
                let room = cfg.model.max_seq_len.saturating_sub(pair.layout.len());
                let steps = steps.min(room);
                let (vanilla_tokens, steered_tokens) = if steps == 0 {
                    (Vec::new(), Vec::new())
                } else {
                    (
                        generate(&data.model, &matrix, &plain, &pair.tokens_original, &pair.layout, steps)?.tokens,
                        generate(&data.model, &matrix, &cfg.rve, &pair.tokens_original, &pair.layout, steps)?.tokens,
                    )
                };
                comparisons.push(Comparison {
                    unit: pair.pair_id.clone(),
                    target_layers: plan.target_layers(),
                    vanilla_target_mass: target_mass(&rows, &plan.masks, |r| &r.vanilla),
                    steered_target_mass: target_mass(&rows, &plan.masks, |r| &r.steered),
                    vanilla_metric: prob(&vanilla),
                    steered_metric: prob(&steered),
                    vanilla_tokens,
                    steered_tokens,
                });
                io::write_json(&out.path(format!("traces/{}.json", pair.pair_id)), &rows)?;
            }
        }
    }
    io::write_json(&out.path("comparison.json"), &comparisons)
}

#[derive(Serialize)]
struct TimingRow {
    variant: String,
    mean_latency_ms: f64,
    median_latency_ms: f64,
    latency_overhead_pct: f64,
}

fn ablate(cfg: &RunConfig, latency: bool, out: &mut Outputs) -> Result<()> {
    let report = match cfg.mode {
        HarnessMode::Tensor => run_ablation(&AblationConfig {
            planted: cfg.planted.clone(),
            rve: cfg.rve.clone(),
            seeds: cfg.seeds.clone(),
            random_trials: cfg.random_trials,
        })?,
        HarnessMode::Model => {
            let data = model_data(cfg)?;
            let truth = data
                .truth
                .ok_or_else(|| Error::Config("model-mode ablation needs a truth file for the dataset".into()))?;
            let matrix = ars_matrix(&data.model, &data.pairs)?;
            run_ablation_model(
                &data.model,
                &data.pairs,
                &truth,
                &matrix,
                &cfg.rve,
                cfg.random_trials,
                cfg.seeds[0],
                Exec::default(),
            )?
        }
    };
    io::write_json(&out.path("ablation.json"), &report)?;
    if latency || cfg.latency.is_some() {
        let lc = cfg.latency.clone().unwrap_or_default();
        let timing = measure_latency(&lc)?;
        let rows: Vec<TimingRow> = timing
            .rows
            .iter()
            .map(|r| TimingRow {
                variant: r.variant.clone(),
                mean_latency_ms: r.mean_ms,
                median_latency_ms: r.median_ms,
                latency_overhead_pct: r.overhead_pct,
            })
            .collect();
        // Wall-clock numbers live beside the report, never inside it.
        io::write_json(&out.dir.join("ablation.timing.sidecar.json"), &rows)?;
    }
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    if cfg.mode != HarnessMode::Tensor {
        return Err(Error::Config("sweep runs on planted data; use --mode tensor".into()));
    }
    let rows = run_sweep(
        &SweepConfig {
            planted: cfg.planted.clone(),
            base: cfg.rve.clone(),
            alphas: cfg.sweep.alphas.clone(),
            betas: cfg.sweep.betas.clone(),
            ks: cfg.sweep.ks.clone(),
            seeds: cfg.seeds.clone(),
        },
        Exec::default(),
    )?;
    io::write_sweep_csv(&out.path("sweep.csv"), &rows)
}

fn gen_data(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    match cfg.mode {
        HarnessMode::Tensor => io::write_json(&out.path("planted.json"), &planted_for(cfg)?),
        HarnessMode::Model => {
            let data = model_data(cfg)?;
            io::write_pairs(&out.path("pairs.jsonl"), &data.pairs)?;
            if let Some(truth) = &data.truth {
                io::write_json(&out.path("truth.json"), truth)?;
            }
            Ok(())
        }
    }
}

fn plot_imbalance(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let data = model_data(cfg)?;
    let pair = &data.pairs[0];
    let trace = data.model.forward(&pair.tokens_original, &pair.layout, None)?;
    io::write_ratio_csv(&out.path("ratios.csv"), &attention_ratios(&trace, &pair.layout)?)?;
    let rows = log_attention_summary(&trace, &pair.layout)?;
    io::write_log_weight_csv(&out.path("log_weights.csv"), &rows)?;

    #[derive(Serialize)]
    struct Gap {
        layer: usize,
        mean_log10_text: f64,
        mean_log10_image: f64,
        gap: f64,
    }
    let gaps: Vec<Gap> = modality_log_gap(&rows)
        .into_iter()
        .map(|(layer, t, v, gap)| Gap { layer, mean_log10_text: t, mean_log10_image: v, gap })
        .collect();
    let path = out.path("log_gap.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for g in gaps {
        w.serialize(g)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
