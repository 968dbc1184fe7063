//! Acceptance suite. Prints one PASS/FAIL line per criterion, then a summary.
//!
//! Criteria 6 to 9 share nine default-size training runs (about 25 minutes on
//! one core). Set `GDMRG_ACCEPTANCE_SKIP_TRAINING=1` to report them as SKIP.
//! The exit status fails on any correctness criterion; see [`EMPIRICAL`].

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gdmrg_core::config::{AuxLoss, GraphMode, RunConfig};
use gdmrg_core::datagen::{Splits, COMORBID_PAIR, EXCLUSIVE_PAIR};
use gdmrg_core::decoder::{self, DecoderDims};
use gdmrg_core::dualcls::{asl_term, asl_term_prob, ots, AslParams};
use gdmrg_core::evalkit::{auc, bleu, ce_metrics, rouge_l, MetricsReport};
use gdmrg_core::evaluate::{evaluate, EvalOptions};
use gdmrg_core::experiments::{splits_for, write_evaluation, METRICS_FILE};
use gdmrg_core::fusion::{gate_fuse, init_gate};
use gdmrg_core::graphtopo::{build_adjacency, count_cooccurrence, geometric_normalize, spectral_radius};
use gdmrg_core::layers::normal_tensor;
use gdmrg_core::model::Model;
use gdmrg_core::tki::mean_centered_cosine;
use gdmrg_core::train::{objective_gradcheck, train, Trained};
use numcore::{Execution, ParamStore, Rng, Tape, Tensor};

mod common;
use common::{
    auc_brute, bce, bleu_brute, f1_at, graph_brute, micro_brute, random_labels, random_sentence, rouge_brute,
    sample_brute, toks,
};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const GRAPH_BUDGET: Duration = Duration::from_secs(10);
const OTS_BUDGET: Duration = Duration::from_secs(10);
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const SYM_TOL: f64 = 1e-12;
const SPECTRAL_TOL: f64 = 1e-9;
const BCE_TOL: f64 = 1e-9;
const HAND_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-12;
const DESK_SEEDS: [u64; 3] = [1, 2, 3];
/// Direction-of-effect measurements on trained models. A failure here is a
/// finding about the method on this data, reported but not fatal unless
/// `GDMRG_ACCEPTANCE_STRICT=1`.
const EMPIRICAL: [usize; 4] = [6, 7, 8, 9];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<String, String> {
    let el = start.elapsed();
    ensure(el < budget, || format!("took {el:.1?}, budget {budget:?}"))?;
    Ok(format!("{el:.1?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let base = RunConfig { n_train: 8, n_val: 1, n_test: 1, ..RunConfig::default() };
    let splits = splits_for(&base).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let cfg = RunConfig { seed, ..base.clone() };
        let model = Model::new(&cfg, &splits.train).map_err(|e| e.to_string())?;
        let store = model.init_params().map_err(|e| e.to_string())?;
        let err = objective_gradcheck(&model, &store, &splits.train, 2, 1, seed).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    ensure(worst < GRAD_TOL, || format!("worst relative error {worst:.3e}"))?;
    let t = within(start, GRAD_BUDGET)?;
    Ok(format!("{GRAD_SEEDS} seeds, worst relative error {worst:.2e}, {t}"))
}

fn graph_oracles() -> Outcome {
    let start = Instant::now();
    let n = 5;
    let mut rng = Rng::new(2024);
    for trial in 0..100 {
        let rows = 5 + rng.below(40);
        let p = 0.15 + 0.6 * rng.uniform();
        let labels = random_labels(&mut rng, rows, n, p);
        let phi = 99.0 * rng.uniform();
        let mp = geometric_normalize(&count_cooccurrence(&labels, n).map_err(|e| e.to_string())?);
        let adj = build_adjacency(&mp, phi).map_err(|e| e.to_string())?;
        let (mp_ref, a_ref) = graph_brute(&labels, n, phi);
        ensure(mp.data() == &mp_ref[..], || format!("trial {trial}: normalized counts differ"))?;
        ensure(adj.a_tilde.data() == &a_ref[..], || format!("trial {trial}: adjacency differs"))?;
        for i in 0..n {
            for j in 0..n {
                let gap = (adj.a_tilde.at2(i, j) - adj.a_tilde.at2(j, i)).abs();
                ensure(gap <= SYM_TOL, || format!("trial {trial}: asymmetry {gap:e}"))?;
            }
        }
        let rho = spectral_radius(&adj.a_tilde, 500);
        ensure(rho <= 1.0 + SPECTRAL_TOL, || format!("trial {trial}: spectral radius {rho}"))?;
    }
    Ok(format!("100 instances exact, {}", within(start, GRAPH_BUDGET)?))
}

fn loss_reductions() -> Outcome {
    let plain = AslParams { gamma_pos: 0.0, gamma_neg: 0.0, margin: 0.0, clamp: 1e-12 };
    let mut worst: f64 = 0.0;
    for k in 0..=2400 {
        let z = -12.0 + k as f64 * 0.01;
        for y in [0u8, 1] {
            worst = worst.max((asl_term(z, y, plain).0 - bce(z, y)).abs());
        }
    }
    ensure(worst < BCE_TOL, || format!("BCE gap {worst:e}"))?;
    let mut rng = Rng::new(5);
    for _ in 0..1000 {
        let m = 0.01 + 0.3 * rng.uniform();
        let p = m * rng.uniform();
        let a = AslParams { gamma_pos: 0.0, gamma_neg: 5.0 * rng.uniform(), margin: m, clamp: 0.0 };
        let v = asl_term_prob(p, 0, a);
        ensure(v == 0.0, || format!("easy negative p={p} m={m} costs {v}"))?;
    }
    let tasl = AslParams { gamma_pos: 0.0, gamma_neg: 4.0, margin: 0.05, clamp: 0.05 };
    let hand = [
        (asl_term_prob(1.0, 1, tasl), 0.051293),
        (asl_term(0.0, 0, AslParams { margin: 0.0, clamp: 0.0, ..tasl }).0, 0.043322),
    ];
    for (got, want) in hand {
        ensure((got - want).abs() < HAND_TOL, || format!("hand case {got} vs {want}"))?;
    }
    Ok(format!("BCE gap {worst:.1e}, easy negatives zero, hand cases match"))
}

fn threshold_search() -> Outcome {
    let start = Instant::now();
    let grid: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let mut rng = Rng::new(99);
    for trial in 0..500 {
        let k = 1 + rng.below(6);
        let rows = 1 + rng.below(60);
        let labels: Vec<u8> = (0..rows * k).map(|_| (rng.uniform() < 0.25) as u8).collect();
        let probs: Vec<f64> = labels.iter().map(|&y| (rng.uniform() * 0.7 + 0.3 * y as f64).min(0.999)).collect();
        let tau = ots(&probs, &labels, k, &grid, Execution::default()).map_err(|e| e.to_string())?;
        for d in 0..k {
            let best = grid.iter().map(|&g| f1_at(&probs, &labels, k, d, g)).fold(f64::MIN, f64::max);
            let got = f1_at(&probs, &labels, k, d, tau[d]);
            ensure(got == best, || format!("trial {trial} class {d}: F1 {got} < grid max {best}"))?;
        }
    }
    Ok(format!("500 trials at the grid maximum, {}", within(start, OTS_BUDGET)?))
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < METRIC_TOL;
    ensure(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]) == Some(0.75), || "AUC hand case".into())?;
    let b1 = bleu(&[toks("a b c")], &[toks("a b d")], 4).map_err(|e| e.to_string())?[0];
    ensure(close(b1, 2.0 / 3.0), || format!("BLEU-1 hand case {b1}"))?;
    let r = rouge_l(&[toks("a b c d")], &[toks("a c d")]);
    ensure(close(r, 6.0 / 7.0), || format!("ROUGE-L hand case {r}"))?;
    let mut rng = Rng::new(31);
    for trial in 0..50 {
        let rows = 1 + rng.below(8);
        let truth = random_labels(&mut rng, rows, 14, 0.3);
        let pred = random_labels(&mut rng, rows, 14, 0.3);
        let rep = ce_metrics(&pred, &truth).map_err(|e| e.to_string())?;
        let (p, rc, f) = micro_brute(&pred, &truth);
        let (sp, sr, sf) = sample_brute(&pred, &truth);
        let m = &rep.micro;
        let ok = close(m.precision, p) && close(m.recall, rc) && close(m.f1, f);
        let ok = ok && close(rep.sample_precision, sp) && close(rep.sample_recall, sr) && close(rep.sample_f1, sf);
        ensure(ok, || format!("trial {trial}: CE metrics differ"))?;

        let n = 2 + rng.below(9);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(4) as f64 / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        let same = match (auc(&scores, &labels), auc_brute(&scores, &labels)) {
            (Some(a), Some(b)) => close(a, b),
            (a, b) => a == b,
        };
        ensure(same, || format!("trial {trial}: AUC differs"))?;

        let n = 1 + rng.below(3);
        let cands: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 6, 3)).collect();
        let refs: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 6, 3)).collect();
        let got = bleu(&cands, &refs, 4).map_err(|e| e.to_string())?;
        let want = bleu_brute(&cands, &refs, 4);
        ensure(got.iter().zip(&want).all(|(a, b)| close(*a, *b)), || format!("trial {trial}: BLEU differs"))?;
        ensure(close(rouge_l(&cands, &refs), rouge_brute(&cands, &refs)), || format!("trial {trial}: ROUGE-L differs"))?;
    }
    Ok("hand cases exact, 50 random instances per metric match".into())
}

struct Scored {
    ots: MetricsReport,
    fixed: MetricsReport,
}

struct SeedRuns {
    seed: u64,
    full: Trained,
    full_scores: Scored,
    no_graph: Scored,
    mbce: Scored,
}

struct DeskRuns {
    seeds: Vec<SeedRuns>,
    /// Wall time of the full and no-graph runs together.
    ablation_time: Duration,
}

fn score(cfg: &RunConfig, splits: &Splits) -> Result<(Trained, Scored), String> {
    let t = train(cfg, splits).map_err(|e| e.to_string())?;
    let run = |ots: bool| {
        let opts = EvalOptions { ots, ..EvalOptions::from_config(cfg) };
        evaluate(&t.model, &t.store, splits, opts).map(|e| e.metrics).map_err(|e| e.to_string())
    };
    let scored = Scored { ots: run(true)?, fixed: run(false)? };
    Ok((t, scored))
}

fn desk_runs() -> Result<DeskRuns, String> {
    let base = RunConfig::default();
    let splits = splits_for(&base).map_err(|e| e.to_string())?;
    let mut seeds = Vec::new();
    let mut ablation_time = Duration::ZERO;
    for seed in DESK_SEEDS {
        let cfg = RunConfig { seed, ..base.clone() };
        let start = Instant::now();
        let (full, full_scores) = score(&cfg, &splits)?;
        let (_, no_graph) = score(&RunConfig { graph: GraphMode::None, ..cfg.clone() }, &splits)?;
        ablation_time += start.elapsed();
        let (_, mbce) = score(&RunConfig { aux_loss: AuxLoss::Mbce, ..cfg.clone() }, &splits)?;
        eprintln!("desk seed {seed} done");
        seeds.push(SeedRuns { seed, full, full_scores, no_graph, mbce });
    }
    Ok(DeskRuns { seeds, ablation_time })
}

fn similarity_direction(runs: &DeskRuns) -> Outcome {
    let mut parts = Vec::new();
    for r in &runs.seeds {
        let mut t = Tape::new();
        let w = r.full.model.weights(&mut t, &r.full.store, None).map_err(|e| e.to_string())?;
        let sim = mean_centered_cosine(t.value(w), &r.full.model.cfg.sim_slice.states()).map_err(|e| e.to_string())?;
        let co = sim.at2(COMORBID_PAIR.0, COMORBID_PAIR.1);
        let ex = sim.at2(EXCLUSIVE_PAIR.0, EXCLUSIVE_PAIR.1);
        ensure(co > ex, || format!("seed {}: comorbid {co:.3} <= exclusive {ex:.3}", r.seed))?;
        parts.push(format!("{co:.3}>{ex:.3}"));
    }
    Ok(format!("comorbid vs exclusive per seed: {}", parts.join(", ")))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn complex_gain(runs: &DeskRuns) -> Outcome {
    let full = mean(runs.seeds.iter().map(|r| r.full_scores.ots.complex.micro.f1));
    let ablated = mean(runs.seeds.iter().map(|r| r.no_graph.ots.complex.micro.f1));
    let t = runs.ablation_time;
    let detail = format!("complex micro-F1 graph {full:.4} vs no graph {ablated:.4}, 6 runs in {t:.0?}");
    ensure(full >= ablated, || detail.clone())?;
    ensure(t < ABLATION_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn loss_direction(runs: &DeskRuns) -> Outcome {
    let tasl = mean(runs.seeds.iter().map(|r| r.full_scores.ots.ce.micro.f1));
    let mbce = mean(runs.seeds.iter().map(|r| r.mbce.ots.ce.micro.f1));
    let detail = format!("calibrated micro-F1 T-ASL {tasl:.4} vs MBCE {mbce:.4}");
    ensure(tasl >= mbce, || detail.clone())?;
    Ok(detail)
}

fn recall_shift(runs: &DeskRuns) -> Outcome {
    let mut parts = Vec::new();
    for r in &runs.seeds {
        let (fixed, cal) = (r.full_scores.fixed.ce.micro.recall, r.full_scores.ots.ce.micro.recall);
        parts.push(format!("seed {} {fixed:.4}->{cal:.4}", r.seed));
    }
    let mbce: Vec<String> = runs
        .seeds
        .iter()
        .map(|r| format!("{:.4}->{:.4}", r.mbce.fixed.ce.micro.recall, r.mbce.ots.ce.micro.recall))
        .collect();
    let detail = format!("recall 0.5->calibrated: {} (MBCE variant: {})", parts.join(", "), mbce.join(", "));
    let ok = runs.seeds.iter().all(|r| r.full_scores.ots.ce.micro.recall > r.full_scores.fixed.ce.micro.recall);
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let cfg = RunConfig { epochs_stage1: 2, epochs_stage2: 3, ..RunConfig::tiny() };
    let splits = splits_for(&cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for k in 0..2 {
        let t = train(&cfg, &splits).map_err(|e| e.to_string())?;
        let e = evaluate(&t.model, &t.store, &splits, EvalOptions::from_config(&cfg)).map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("run{k}"));
        write_evaluation(&e, &out, false).map_err(|e| e.to_string())?;
        files.push(std::fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], || "metrics.csv differs between runs".into())?;
    Ok(format!("metrics.csv identical ({} bytes)", files[0].len()))
}

const DEC: DecoderDims = DecoderDims { vocab: 7, d_m: 8, heads: 2, layers: 2, ffn: 12, max_len: 12, d_mem: 4 };

fn decoder_logits(s: &ParamStore, mem: &Tensor, tokens: &[usize]) -> Result<Tensor, String> {
    let mut t = Tape::new();
    let m = t.constant(mem.clone()).map_err(|e| e.to_string())?;
    let z = decoder::forward(&mut t, s, DEC, &[tokens.to_vec()], m).map_err(|e| e.to_string())?;
    Ok(t.value(z).clone())
}

fn causality_and_convexity() -> Outcome {
    let mut rng = Rng::new(404);
    for trial in 0..100u64 {
        let mut s = ParamStore::new();
        decoder::init(&mut s, &mut Rng::new(trial), DEC).map_err(|e| e.to_string())?;
        let mem = normal_tensor(&mut rng, &[1, 3, DEC.d_mem], 1.0);
        let len = 2 + rng.below(DEC.max_len - 1);
        let a: Vec<usize> = (0..len).map(|_| rng.below(DEC.vocab)).collect();
        let cut = 1 + rng.below(len - 1);
        let mut b = a.clone();
        for tk in &mut b[cut..] {
            *tk = (*tk + 1 + rng.below(DEC.vocab - 1)) % DEC.vocab;
        }
        let (za, zb) = (decoder_logits(&s, &mem, &a)?, decoder_logits(&s, &mem, &b)?);
        let v = DEC.vocab;
        ensure(za.data()[..cut * v] == zb.data()[..cut * v], || format!("trial {trial}: prefix logits moved"))?;
    }
    for trial in 0..100u64 {
        let d = 6;
        let mut s = ParamStore::new();
        init_gate(&mut s, &mut Rng::new(trial), d, -2.0).map_err(|e| e.to_string())?;
        let cap = (trial % 2 == 0).then(|| rng.uniform());
        let mut t = Tape::new();
        let vs = t.constant(normal_tensor(&mut rng, &[2, 4, d], 2.0)).map_err(|e| e.to_string())?;
        let va = t.constant(normal_tensor(&mut rng, &[2, 4, d], 2.0)).map_err(|e| e.to_string())?;
        let (fused, _) = gate_fuse(&mut t, &s, vs, va, cap).map_err(|e| e.to_string())?;
        let (x, y, z) = (t.value(vs), t.value(va), t.value(fused));
        for k in 0..z.numel() {
            let (lo, hi) = (x.data()[k].min(y.data()[k]), x.data()[k].max(y.data()[k]));
            let inside = z.data()[k] >= lo - 1e-12 && z.data()[k] <= hi + 1e-12;
            ensure(inside, || format!("trial {trial}: fused value outside its interval"))?;
        }
    }
    Ok("100 suffix perturbations and 100 gate instances hold".into())
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
}

fn main() -> ExitCode {
    let skip_training = std::env::var("GDMRG_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Option<Outcome>)> = vec![
        (1, "gradient suite", Some(guarded(gradient_suite))),
        (2, "graph oracles", Some(guarded(graph_oracles))),
        (3, "loss reductions", Some(guarded(loss_reductions))),
        (4, "threshold search optimality", Some(guarded(threshold_search))),
        (5, "metric oracles", Some(guarded(metric_oracles))),
    ];
    let runs = if skip_training { None } else { Some(catch_unwind(desk_runs).unwrap_or_else(|_| Err("panicked".into()))) };
    let shared = |f: fn(&DeskRuns) -> Outcome| -> Option<Outcome> {
        runs.as_ref().map(|r| match r {
            Ok(r) => guarded(|| f(r)),
            Err(e) => Err(format!("training failed: {e}")),
        })
    };
    results.push((6, "similarity direction", shared(similarity_direction)));
    results.push((7, "complex-subset gain", shared(complex_gain)));
    results.push((8, "T-ASL vs MBCE", shared(loss_direction)));
    results.push((9, "calibration recall shift", shared(recall_shift)));
    results.push((10, "determinism", Some(guarded(determinism))));
    results.push((11, "causality and convexity", Some(guarded(causality_and_convexity))));

    let strict = std::env::var("GDMRG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let (mut failed, mut fatal) = (0, 0);
    for (id, name, r) in &results {
        match r {
            Some(Ok(d)) => println!("criterion {id:>2} {name}: PASS ({d})"),
            Some(Err(d)) => {
                failed += 1;
                if strict || !EMPIRICAL.contains(id) {
                    fatal += 1;
                }
                println!("criterion {id:>2} {name}: FAIL ({d})");
            }
            None => println!("criterion {id:>2} {name}: SKIP"),
        }
    }
    let passed = results.iter().filter(|r| matches!(r.2, Some(Ok(_)))).count();
    println!("{passed} passed, {failed} failed");
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
