//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to the real
//! stdout (bypassing the harness's capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use attnsteer::ars::ars_score;
use attnsteer::harness::ablation::{head_recovery, planted_matrix};
use attnsteer::harness::*;
use attnsteer::io::RunConfig;
use attnsteer::metrics::{attention_ratios, number_ratios};
use attnsteer::model::{HeadScope, Intervention, LayerIntervention, Model, ModelConfig, TokenLayout};
use attnsteer::par::Exec;
use attnsteer::rve::{build_masks, enhance_scores, selection_count};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria run one at a time so the latency measurement has the machine
/// to itself.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id:>2} [{status}] {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn check(id: u32, name: &str, f: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (pass, detail) = f();
    report(id, name, pass, &detail);
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_attention(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sparse = rng.gen_bool(0.3);
    let mut v: Vec<f64> = (0..n)
        .map(|_| if sparse && rng.gen_bool(0.7) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Plain-loop evaluation, independent of the library's implementation.
fn ars_reference(a: &[f64], b: &[f64]) -> f64 {
    let mut d = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        d += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    d.sqrt() / ((na.sqrt() + nb.sqrt()) / 2.0)
}

#[test]
fn criterion_01_ars_conformance() {
    check(1, "ARS conformance", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        let mut failures = Vec::new();
        for i in 0..1000 {
            let n = rng.gen_range(1..=1024);
            let a = random_attention(&mut rng, n);
            let b = if i % 10 == 0 { a.clone() } else { random_attention(&mut rng, n) };
            let got = ars_score(&a, &b).unwrap();
            let want = ars_reference(&a, &b);
            let rel = if want == 0.0 { got.abs() } else { (got - want).abs() / want };
            worst = worst.max(rel);
            if rel > 1e-9 {
                failures.push(format!("#{i} rel err {rel:e}"));
            }
            if !(0.0..=2.0).contains(&got) {
                failures.push(format!("#{i} out of bounds {got}"));
            }
            if ars_score(&b, &a).unwrap() != got {
                failures.push(format!("#{i} asymmetric"));
            }
            let c = rng.gen_range(0.001..1000.0);
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            let scaled = ars_score(&sa, &sb).unwrap();
            if (scaled - got).abs() > 1e-9 * got.max(1e-12) && (scaled - got).abs() > 1e-15 {
                failures.push(format!("#{i} scale {c}: {scaled} vs {got}"));
            }
            if (got == 0.0) != (a == b) {
                failures.push(format!("#{i} zero-iff-equal violated"));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let pass = failures.is_empty() && secs < 5.0;
        (pass, format!("1000 pairs, max rel err {worst:.2e}, {secs:.2}s, failures {:?}", &failures[..failures.len().min(3)]))
    });
}

/// Selected iff fewer than `m` entries beat it (larger, or equal with a
/// lower index).
fn oracle_selection(v: &[f64], m: usize) -> Vec<u8> {
    (0..v.len())
        .map(|i| {
            let beaten_by = (0..v.len()).filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i)).count();
            u8::from(beaten_by < m)
        })
        .collect()
}

#[test]
fn criterion_02_mask_algebra() {
    check(2, "mask algebra", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut failures = Vec::new();
        let mut tie_cases = 0;
        for i in 0..1000 {
            let n = rng.gen_range(1..=600);
            let ties = i % 2 == 0;
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| if ties { f64::from(rng.gen_range(-2i32..3)) } else { rng.gen_range(-5.0..5.0) })
                    .collect()
            };
            let sens = draw(&mut rng);
            let non = draw(&mut rng);
            let alpha = if i % 50 == 0 { 1.0 } else { rng.gen_range(0.001..1.0) };
            let ms = build_masks(&sens, &non, alpha).unwrap();
            let m = (alpha * n as f64).floor() as usize;
            if ties {
                tie_cases += 1;
            }
            let pe = ms.enh.iter().filter(|&&b| b == 1).count();
            let pd = ms.den.iter().filter(|&&b| b == 1).count();
            if pe != m || pd != m || ms.m != m || selection_count(alpha, n) != m {
                failures.push(format!("#{i} popcount {pe}/{pd} vs {m}"));
            }
            let target: Vec<u8> = ms.enh.iter().zip(&ms.den).map(|(e, d)| e * (1 - d)).collect();
            if target != ms.target {
                failures.push(format!("#{i} target"));
            }
            if ms.enh != oracle_selection(&sens, m) || ms.den != oracle_selection(&non, m) {
                failures.push(format!("#{i} selection differs from oracle"));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let pass = failures.is_empty() && secs < 5.0;
        (pass, format!("1000 triples ({tie_cases} with ties), {secs:.2}s, failures {:?}", &failures[..failures.len().min(3)]))
    });
}

#[test]
fn criterion_03_enhancement_conformance() {
    check(3, "score enhancement", || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut failures = 0usize;
        let mut worst = 0.0f64;
        for i in 0..10_000 {
            let n = rng.gen_range(1..64);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mask: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            let beta = if i % 4 == 0 { 0.0 } else { rng.gen_range(0.0..5.0) };
            let out = enhance_scores(&s, &mask, beta).unwrap();
            for k in 0..n {
                let want = if mask[k] == 1 { s[k] + beta * s[k].abs() } else { s[k] };
                if beta == 0.0 {
                    if out[k].to_bits() != s[k].to_bits() {
                        failures += 1;
                    }
                } else {
                    let err = (out[k] - want).abs();
                    worst = worst.max(err);
                    if err > 1e-12 {
                        failures += 1;
                    }
                }
            }
        }
        let neg = enhance_scores(&[-2.0], &[1], 1.0).unwrap()[0];
        let pass = failures == 0 && neg == 0.0;
        (pass, format!("10000 cases, {failures} mismatches, max err {worst:.1e}, -2 with beta=1 -> {neg}"))
    });
}

fn random_model(rng: &mut ChaCha8Rng) -> (Model, Vec<usize>, TokenLayout) {
    let heads = rng.gen_range(1..=4);
    let cfg = ModelConfig {
        num_layers: rng.gen_range(1..=4),
        num_heads: heads,
        embed_dim: heads * rng.gen_range(2..=6),
        vocab_size: rng.gen_range(8..64),
        max_seq_len: 40,
        seed: rng.gen(),
    };
    let before = rng.gen_range(0..5);
    let n_image = rng.gen_range(1..20);
    let after = rng.gen_range(1..5);
    let layout = TokenLayout::contiguous(before, n_image, after).unwrap();
    let tokens = (0..layout.len()).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    (Model::build(cfg).unwrap(), tokens, layout)
}

fn masked_mass(row: &[f64], image: &[usize], mask: &[u8]) -> f64 {
    image.iter().zip(mask).filter(|(_, &b)| b == 1).map(|(&p, _)| row[p]).sum()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn criterion_04_intervention_correctness() {
    check(4, "intervention correctness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let models = 150;
        let mut failures = Vec::new();
        let mut strict_checks = 0usize;
        for i in 0..models {
            let (model, tokens, layout) = random_model(&mut rng);
            let cfg = model.config().clone();
            let ni = layout.n_image();
            let image = layout.image_indices().to_vec();
            let vanilla = model.forward(&tokens, &layout, None).unwrap();
            let mut layers: Vec<usize> = (0..cfg.num_layers).filter(|_| rng.gen_bool(0.6)).collect();
            if layers.is_empty() {
                layers.push(rng.gen_range(0..cfg.num_layers));
            }
            let mut mask: Vec<u8> = (0..ni).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            mask[rng.gen_range(0..ni)] = 1;
            let scope = if rng.gen_bool(0.5) {
                HeadScope::All
            } else {
                HeadScope::Heads(vec![rng.gen_range(0..cfg.num_heads)])
            };
            let make = |beta: f64, mask: &[u8]| {
                Intervention::new(
                    layers
                        .iter()
                        .map(|&layer| LayerIntervention {
                            layer,
                            target_mask: mask.to_vec(),
                            beta,
                            head_scope: scope.clone(),
                        })
                        .collect(),
                )
            };
            if !model.forward(&tokens, &layout, Some(&make(0.0, &mask))).unwrap().bit_eq(&vanilla) {
                failures.push(format!("model {i}: beta=0 not bit-identical"));
            }
            if !model.forward(&tokens, &layout, Some(&make(1.0, &vec![0; ni]))).unwrap().bit_eq(&vanilla) {
                failures.push(format!("model {i}: empty mask not bit-identical"));
            }
            let steered = model.forward(&tokens, &layout, Some(&make(1.0, &mask))).unwrap();
            let first = layers[0];
            for &l in &layers {
                for h in 0..cfg.num_heads {
                    if !scope.contains(h) {
                        continue;
                    }
                    let ht = steered.head(l, h).unwrap();
                    let Some(orig) = &ht.original_image_scores else {
                        failures.push(format!("model {i}: ({l},{h}) lacks original scores"));
                        continue;
                    };
                    // Reference row: vanilla trace at the first targeted
                    // layer, recorded pre-intervention scores elsewhere.
                    let before = if l == first {
                        vanilla.head(l, h).unwrap().full_row.clone()
                    } else {
                        let mut s = ht.full_scores.clone();
                        for (k, &p) in image.iter().enumerate() {
                            s[p] = orig[k];
                        }
                        softmax(&s)
                    };
                    let m0 = masked_mass(&before, &image, &mask);
                    let m1 = masked_mass(&ht.full_row, &image, &mask);
                    let positive = orig.iter().zip(&mask).any(|(&s, &b)| b == 1 && s > 0.0);
                    if m1 < m0 - 1e-15 {
                        failures.push(format!("model {i}: ({l},{h}) mass fell {m0} -> {m1}"));
                    }
                    if positive {
                        strict_checks += 1;
                        if m1 <= m0 {
                            failures.push(format!("model {i}: ({l},{h}) mass not strictly higher {m0} -> {m1}"));
                        }
                    }
                }
            }
        }
        let pass = failures.is_empty();
        (pass, format!("{models} random models, {strict_checks} strict checks, failures {:?}", &failures[..failures.len().min(3)]))
    });
}

#[test]
fn criterion_05_planted_head_oracle() {
    check(5, "planted-head oracle", || {
        let start = Instant::now();
        let base = PlantedParams {
            num_layers: 8,
            num_heads: 32,
            num_sensitive_heads: 8,
            ..Default::default()
        };
        let mut exact = 0;
        let mut top8 = 0;
        for seed in 0..20 {
            let clean = generate_planted(&PlantedParams { noise: 0.0, seed, ..base.clone() }).unwrap();
            let m = planted_matrix(&clean).unwrap();
            let nonzero: Vec<(usize, usize)> = (0..8)
                .flat_map(|l| (0..32).map(move |h| (l, h)))
                .filter(|&(l, h)| m.get(l, h) > 1e-12)
                .collect();
            if nonzero == clean.planted_sensitive {
                exact += 1;
            }
            let noisy = generate_planted(&PlantedParams { noise: 0.01, seed, ..base.clone() }).unwrap();
            let m = planted_matrix(&noisy).unwrap();
            if head_recovery(&m, &noisy.planted_sensitive, 8).0 == 1.0 {
                top8 += 1;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let pass = exact == 20 && top8 >= 18 && secs < 60.0;
        (pass, format!("sigma=0 exact on {exact}/20 seeds, sigma=0.01 top-8 precision 1.0 on {top8}/20, {secs:.2}s"))
    });
}

#[test]
fn criterion_06_ablation_orderings() {
    check(6, "ablation orderings", || {
        let report = run_ablation(&AblationConfig::default()).unwrap();
        let means: Vec<String> = report
            .variants
            .iter()
            .map(|v| format!("{}={:.4}", v.variant.name(), v.task_metric))
            .collect();
        let tests: Vec<String> = report
            .sign_tests
            .iter()
            .map(|t| format!("[{}: {}-{}-{} p={:.2e}]", t.claim, t.wins, t.losses, t.ties, t.p_value))
            .collect();
        let pass = report.units.len() == 20 && report.sign_tests.iter().all(|t| t.holds);
        (pass, format!("{} {}", means.join(" "), tests.join(" ")))
    });
}

#[test]
fn criterion_07_hyperparameter_shapes() {
    check(7, "hyperparameter shapes", || {
        let seeds: Vec<u64> = (0..20).collect();
        let betas = vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
        let rows = run_sweep(
            &SweepConfig { betas: betas.clone(), ks: vec![5], seeds: seeds.clone(), ..Default::default() },
            Exec::default(),
        )
        .unwrap();
        let mut interior = 0;
        let mut peaks = BTreeMap::new();
        for &seed in &seeds {
            let metrics: Vec<f64> = rows.iter().filter(|r| r.seed == seed).map(|r| r.metric).collect();
            let best = (0..metrics.len()).fold(0, |b, i| if metrics[i] > metrics[b] { i } else { b });
            if best != 0 && best != metrics.len() - 1 {
                interior += 1;
            }
            *peaks.entry(format!("{}", betas[best])).or_insert(0) += 1;
        }
        let k_rows = run_sweep(
            &SweepConfig { betas: vec![1.0], ks: vec![1, 3, 5, 7, 9], seeds, ..Default::default() },
            Exec::default(),
        )
        .unwrap();
        let k_ok = k_rows.iter().all(|r| r.metric > r.vanilla_metric);
        let margin = k_rows.iter().map(|r| r.metric - r.vanilla_metric).fold(f64::INFINITY, f64::min);
        let pass = interior >= 15 && k_ok;
        (pass, format!("beta peak interior on {interior}/20 seeds (peaks {peaks:?}); every K above vanilla: {k_ok} (min margin {margin:.4})"))
    });
}

#[test]
fn criterion_08_latency() {
    check(8, "latency", || {
        let report = measure_latency(&LatencyConfig::default()).unwrap();
        let row = |v: &str| report.row(v).unwrap();
        let rve = row(Variant::RveGlobal.name());
        let cd = row(latency::CONTRASTIVE_BASELINE);
        let rows: Vec<String> = report
            .rows
            .iter()
            .map(|r| format!("{}={:.2}ms({:+.1}%)", r.variant, r.median_ms, r.overhead_pct))
            .collect();
        let pass = report.runs >= 100 && report.sequence_length == 656 && rve.overhead_pct < 10.0 && cd.overhead_pct >= 90.0;
        (pass, format!("{} runs, N={}: {}", report.runs, report.sequence_length, rows.join(" ")))
    });
}

#[test]
fn criterion_09_metric_identities() {
    check(9, "metrics identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let mut worst = 0.0f64;
        let mut traces = 0;
        while traces < 1000 {
            let (model, _, layout) = random_model(&mut rng);
            for _ in 0..10 {
                let tokens: Vec<usize> = (0..layout.len()).map(|_| rng.gen_range(0..model.config().vocab_size)).collect();
                let trace = model.forward(&tokens, &layout, None).unwrap();
                for l in attention_ratios(&trace, &layout).unwrap().layers {
                    worst = worst.max((l.r_att_t + l.r_att_v - 1.0).abs());
                }
                traces += 1;
            }
        }
        let layout = TokenLayout::contiguous(40, 576, 40).unwrap();
        let (_, r_num_v) = number_ratios(&layout);
        let pass = worst <= 1e-6 && (r_num_v - 0.878).abs() <= 0.001;
        (pass, format!("{traces} traces, max |r_t + r_v - 1| = {worst:.1e}; N_I=576, N_T=80 -> r_num_v = {r_num_v:.4}"))
    });
}

fn collect_outputs(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_outputs(&path, base, out);
        } else if !path.to_string_lossy().ends_with(".sidecar.json") {
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn criterion_10_end_to_end_determinism() {
    check(10, "end-to-end determinism", || {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, RunConfig::default().to_toml_string().unwrap()).unwrap();
        let mut runs = Vec::new();
        for (run, threads) in [("a", "1"), ("b", "4")] {
            let out_dir = dir.path().join(run);
            for cmd in ["ablate", "sweep", "analyze-ars", "plan-rve"] {
                let status = Command::new(env!("CARGO_BIN_EXE_attnsteer"))
                    .args([cmd, "--config", cfg_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
                    .env("ATTNSTEER_THREADS", threads)
                    .status()
                    .unwrap();
                assert!(status.success(), "{cmd} failed");
            }
            let mut files = BTreeMap::new();
            collect_outputs(&out_dir, &out_dir, &mut files);
            runs.push(files);
        }
        let kinds = |ext: &str| runs[0].keys().filter(|k| k.ends_with(ext)).count();
        let differing: Vec<&String> = runs[0].keys().filter(|k| runs[1].get(*k) != runs[0].get(*k)).collect();
        let pass = runs[0].len() == runs[1].len()
            && differing.is_empty()
            && kinds(".json") > 0
            && kinds(".csv") > 0
            && kinds(".pgm") > 0;
        (
            pass,
            format!(
                "{} files ({} json, {} csv, {} pgm) compared across 1 and 4 threads, {} differ",
                runs[0].len(),
                kinds(".json"),
                kinds(".csv"),
                kinds(".pgm"),
                differing.len()
            ),
        )
    });
}
