//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 6-9 share five pretrained seeds.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use polar_kit::cli::{check_pairs, gradcheck_toy, run, Cli};
use polar_kit::encoder::{FrozenEncoder, Site, SiteAddress};
use polar_kit::linalg::Rng;
use polar_kit::lora::{merge_add, ConceptDelta, MergeStrategy};
use polar_kit::metrics::{
    average_precision, caption_recall_probe, evaluate, evaluate_base, recall_at_k, reciprocal_rank, summarize,
    CaptionProbe, EvalOptions, EvalReport, QueryKind, QueryOutcome,
};
use polar_kit::personalize::{gradcheck, train_polar, GradCheckOptions, TrainConfig, TrainReport};
use polar_kit::pipeline::{personalize_all, prepare, train_config_for, PipelineConfig};
use polar_kit::synth::{build_eval_suite, SyntheticWorld};

mod common;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(n: usize, name: &str, body: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {n:>2} {name}: {detail} [{secs:.1} s]");
    outcome.is_ok()
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let mut worst_exact = 0.0f64;
    let mut f32_failures = Vec::new();
    let mut worst_f32 = 0.0f64;
    for seed in SEEDS {
        let (world, enc) = gradcheck_toy(seed).map_err(|e| e.to_string())?;
        let pairs = check_pairs(&enc, &world, 0).map_err(|e| e.to_string())?;
        for iterations in [0, 50] {
            let cfg = train_config_for(
                seed,
                &TrainConfig {
                    iterations,
                    ..TrainConfig::default()
                },
                None,
            );
            let (delta, _) = train_polar(&enc, &world.concepts[0].spec, &world.images, &cfg).map_err(|e| e.to_string())?;
            let exact = gradcheck(&enc, &delta, &pairs, None, &GradCheckOptions::exact()).map_err(|e| e.to_string())?;
            if !exact.passed {
                return Err(format!("seed {seed}, {iterations} steps: f64 relative error {:.2e}", exact.max_rel_error()));
            }
            worst_exact = worst_exact.max(exact.max_rel_error());
            let rounded = gradcheck(&enc, &delta, &pairs, None, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
            worst_f32 = worst_f32.max(rounded.max_rel_error());
            if !rounded.passed {
                f32_failures.push(format!("{seed}@{iterations}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        secs < 10.0,
        format!(
            "{} toy seeds at init and after 50 steps; f64 accumulation (step 1e-5) max rel error {worst_exact:.1e} < 1e-5; \
             f32 (step 1e-3) max rel error {worst_f32:.1e}, above 1e-3 at [{}]; {secs:.1} s",
            SEEDS.len(),
            f32_failures.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn zero_update_identity() -> Verdict {
    let sites = [
        SiteAddress::new(2, Site::V),
        SiteAddress::new(1, Site::Q),
        SiteAddress::new(2, Site::O),
    ];
    let mut checked = 0;
    for seed in 0..4 {
        let (world, enc) = common::small_setup(seed);
        let index = world.eval_index();
        let suite = build_eval_suite(&world);
        for rank in 1..=2 {
            let d = ConceptDelta::zeros(&enc, "z", &sites[..=(seed as usize % 3)], rank).map_err(|e| e.to_string())?;
            for q in &suite.queries {
                let base = enc.encode(&q.text, &[]).map_err(|e| e.to_string())?;
                let with = enc.encode(&q.text, &[&d]).map_err(|e| e.to_string())?;
                if base.iter().zip(&with).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("'{}' changed under a zero delta", q.text));
                }
                checked += 1;
            }
            let probes: Vec<CaptionProbe> = suite
                .queries
                .iter()
                .filter(|q| q.kind == QueryKind::GeneralCaption)
                .map(|q| CaptionProbe {
                    caption: q.text.clone(),
                    image_id: q.source_image.clone().unwrap(),
                })
                .collect();
            let p0 = caption_recall_probe(&enc, &index, &[], &probes, 10).map_err(|e| e.to_string())?;
            let p1 = caption_recall_probe(&enc, &index, &[&d], &probes, 10).map_err(|e| e.to_string())?;
            if p0 != p1 {
                return Err(format!("probe {p1} differs from base {p0}"));
            }
        }
    }
    Ok(format!("{checked} embeddings bitwise equal, caption probe equal to base"))
}

// ---------------------------------------------------------------- 3

fn merge_identity() -> Verdict {
    let (_, enc) = common::small_setup(3);
    let sites = [SiteAddress::new(2, Site::V), SiteAddress::new(1, Site::K)];
    let mut rng = Rng::new(33);
    let texts = ["a photo of sks", "an image of sks and sks on the beach", "sks in the snow"];
    let mut worst = 0.0f32;
    for i in 0..100 {
        let n_sites = 1 + i % 2;
        let d1 = common::random_delta(&mut rng, &enc, "a", &sites[..n_sites], 1 + i % 3, 0.1);
        let d2 = common::random_delta(&mut rng, &enc, "b", &sites[..n_sites], 1 + (i / 3) % 3, 0.1);
        let m = merge_add(&[&d1, &d2]).map_err(|e| e.to_string())?;
        for &s in &sites[..n_sites] {
            let sum = d1.materialize(s).unwrap().add(&d2.materialize(s).unwrap()).unwrap();
            let got = m.materialize(s).unwrap();
            if got.data().iter().zip(sum.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("pair {i}: merged ΔW at {s} is not the exact sum"));
            }
        }
        let text = texts[i % texts.len()];
        let merged = enc.encode(text, &[&m]).map_err(|e| e.to_string())?;
        let both = enc.encode(text, &[&d1, &d2]).map_err(|e| e.to_string())?;
        worst = merged.iter().zip(&both).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    check(
        worst <= 1e-6,
        format!("100 pairs: ΔW sums exact; merged vs simultaneous encode max diff {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn constraint_invariant(runs: &[SeedRun]) -> Verdict {
    let mut iterations = 0;
    let mut worst = 0.0f64;
    for r in runs {
        for t in &r.reports {
            if t.trace.len() != 500 {
                return Err(format!("{} ran {} iterations", t.concept_id, t.trace.len()));
            }
            for (i, it) in t.trace.iter().enumerate() {
                if it.a_norm_deviation > 1e-6 {
                    return Err(format!("{} iteration {i}: |‖A‖ − 1| = {:.2e}", t.concept_id, it.a_norm_deviation));
                }
                worst = worst.max(it.a_norm_deviation);
            }
            iterations += t.trace.len();
        }
    }
    Ok(format!("{iterations} post-step checks over {} runs, max |‖A‖ − 1| {worst:.1e}", runs.len() * runs[0].reports.len()))
}

// ---------------------------------------------------------------- 5

fn brute_rr(ranked: &[String], gt: &[String]) -> f64 {
    for (i, id) in ranked.iter().enumerate() {
        if gt.contains(id) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

fn brute_hit(ranked: &[String], gt: &[String], k: usize) -> f64 {
    if ranked.iter().take(k).any(|id| gt.contains(id)) {
        1.0
    } else {
        0.0
    }
}

fn brute_ap(ranked: &[String], gt: &[String]) -> f64 {
    let mut hits = 0.0;
    let mut total = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if gt.contains(id) {
            hits += 1.0;
            total += hits / (i + 1) as f64;
        }
    }
    total / gt.len() as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = Rng::new(55);
    let ids = common::ids(20);
    let ks = [1usize, 5, 10];
    let mut outcomes = Vec::new();
    let (mut rr_sum, mut ap_sum, mut hit_sum) = (0.0, 0.0, [0.0; 3]);
    for q in 0..50 {
        let mut ranked = ids.clone();
        for i in (1..ranked.len()).rev() {
            ranked.swap(i, rng.below(i + 1));
        }
        let n_gt = 1 + rng.below(4);
        let gt: Vec<String> = (0..n_gt).map(|_| ids[rng.below(20)].clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let rr = reciprocal_rank(&ranked, &gt).unwrap();
        let ap = average_precision(&ranked, &gt).unwrap();
        if rr != brute_rr(&ranked, &gt) || ap != brute_ap(&ranked, &gt) {
            return Err(format!("ranking {q}: rr {rr} ap {ap} disagree with the oracle"));
        }
        let mut recall = Vec::new();
        for (j, &k) in ks.iter().enumerate() {
            let r = recall_at_k(&ranked, &gt, k).unwrap();
            if r != brute_hit(&ranked, &gt, k) {
                return Err(format!("ranking {q}: recall@{k} {r} disagrees with the oracle"));
            }
            hit_sum[j] += r;
            recall.push((k, r));
        }
        rr_sum += rr;
        ap_sum += ap;
        outcomes.push(QueryOutcome {
            text: format!("q{q}"),
            kind: QueryKind::ContextSingle,
            concepts: vec![],
            reciprocal_rank: rr,
            average_precision: ap,
            recall,
            error: None,
        });
    }
    let s = summarize(&outcomes, &ks)
        .into_iter()
        .find(|s| s.kind == QueryKind::ContextSingle)
        .unwrap();
    if s.mrr != rr_sum / 50.0 || s.map != ap_sum / 50.0 {
        return Err(format!("aggregates mRR {} mAP {} disagree with the oracle", s.mrr, s.map));
    }
    for (j, &(k, r)) in s.recall.iter().enumerate() {
        if r != hit_sum[j] / 50.0 {
            return Err(format!("aggregate recall@{k} {r} disagrees with the oracle"));
        }
    }
    let worked = average_precision(&["a", "x", "b", "y"], &["a", "b"]).unwrap();
    check(
        (worked - 5.0 / 6.0).abs() < 1e-6,
        format!("50 rankings exact against brute force; worked AP {worked:.4}"),
    )
}

// ---------------------------------------------------------------- 6-9

struct SeedRun {
    seed: u64,
    pretrain_secs: f64,
    personalize_secs: f64,
    base: EvalReport,
    polar: EvalReport,
    lambda0: EvalReport,
    avg: EvalReport,
    max: EvalReport,
    q_only: f64,
    k_only: f64,
    reports: Vec<TrainReport>,
    world: SyntheticWorld,
    encoder: FrozenEncoder,
}

fn seed_run(seed: u64) -> polar_kit::Result<SeedRun> {
    let t = Instant::now();
    let p = prepare(seed, &PipelineConfig::default())?;
    let pretrain_secs = t.elapsed().as_secs_f64();
    let (world, enc) = (p.world, p.encoder);
    let index = world.eval_index();
    let suite = build_eval_suite(&world);
    let opts = EvalOptions::default();

    let t = Instant::now();
    let (store, reports) = personalize_all(&enc, &world, seed, &TrainConfig::default(), false)?;
    let polar = evaluate(&enc, &index, &suite.queries, &store, &opts)?;
    let personalize_secs = t.elapsed().as_secs_f64();

    let base = evaluate_base(&enc, &index, &suite.queries, &opts)?;
    let merged = |merge| evaluate(&enc, &index, &suite.queries, &store, &EvalOptions { merge, ..EvalOptions::default() });
    let (avg, max) = (merged(MergeStrategy::Avg)?, merged(MergeStrategy::Max)?);

    let variant = |cfg: TrainConfig| -> polar_kit::Result<EvalReport> {
        let (s, _) = personalize_all(&enc, &world, seed, &cfg, false)?;
        evaluate(&enc, &index, &suite.queries, &s, &opts)
    };
    let lambda0 = variant(TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    })?;
    let last = enc.config().n_layers;
    let ctx = |r: EvalReport| r.mrr(QueryKind::ContextSingle).unwrap_or(f64::NAN);
    let q_only = ctx(variant(TrainConfig {
        sites: vec![SiteAddress::new(last, Site::Q)],
        ..TrainConfig::default()
    })?);
    let k_only = ctx(variant(TrainConfig {
        sites: vec![SiteAddress::new(last, Site::K)],
        ..TrainConfig::default()
    })?);
    Ok(SeedRun {
        seed,
        pretrain_secs,
        personalize_secs,
        base,
        polar,
        lambda0,
        avg,
        max,
        q_only,
        k_only,
        reports,
        world,
        encoder: enc,
    })
}

fn mrr(r: &EvalReport, kind: QueryKind) -> f64 {
    r.mrr(kind).unwrap_or(f64::NAN)
}

fn probe_drop(r: &EvalReport) -> f64 {
    r.caption_recall_at_10_base.unwrap_or(f64::NAN) - r.caption_recall_at_10.unwrap_or(f64::NAN)
}

fn personalization_works(runs: &[SeedRun]) -> Verdict {
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let co = mean(&|r| mrr(&r.polar, QueryKind::ConceptOnly));
    let co_base = mean(&|r| mrr(&r.base, QueryKind::ConceptOnly));
    let ctx = mean(&|r| mrr(&r.polar, QueryKind::ContextSingle));
    let ctx_base = mean(&|r| mrr(&r.base, QueryKind::ContextSingle));
    let secs: f64 = runs.iter().map(|r| r.personalize_secs).sum();
    let pretrain: f64 = runs.iter().map(|r| r.pretrain_secs).sum();
    check(
        co >= 0.9 && co_base <= 0.3 && ctx - ctx_base >= 0.2 && secs < 90.0,
        format!(
            "concept-only mRR {co:.3} (base {co_base:.3}); context-single {ctx:.3} vs base {ctx_base:.3} (+{:.3}); \
             personalize+evaluate {secs:.1} s over {} seeds (encoder pretraining {pretrain:.1} s, not counted)",
            ctx - ctx_base,
            runs.len()
        ),
    )
}

fn regularization(runs: &[SeedRun]) -> Verdict {
    let mut both = 0;
    let (mut forget, mut ctx) = (0, 0);
    let mut rows = Vec::new();
    for r in runs {
        let f = probe_drop(&r.polar) < probe_drop(&r.lambda0);
        let c = mrr(&r.polar, QueryKind::ContextSingle) > mrr(&r.lambda0, QueryKind::ContextSingle);
        forget += usize::from(f);
        ctx += usize::from(c);
        both += usize::from(f && c);
        rows.push(format!(
            "s{}: drop {:.3}/{:.3} ctx {:.3}/{:.3}",
            r.seed,
            probe_drop(&r.polar),
            probe_drop(&r.lambda0),
            mrr(&r.polar, QueryKind::ContextSingle),
            mrr(&r.lambda0, QueryKind::ContextSingle)
        ));
    }
    check(
        both >= 4,
        format!(
            "smaller probe drop {forget}/5, higher context mRR {ctx}/5, both {both}/5 (λ=0.35 / λ=0: {})",
            rows.join("; ")
        ),
    )
}

fn merging(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in runs {
        let (add, avg, max) = (
            mrr(&r.polar, QueryKind::ContextMulti),
            mrr(&r.avg, QueryKind::ContextMulti),
            mrr(&r.max, QueryKind::ContextMulti),
        );
        wins += usize::from(add >= avg && add >= max);
        rows.push(format!("s{}: {add:.3}/{avg:.3}/{max:.3}", r.seed));
    }
    check(wins >= 4, format!("add ≥ avg and max in {wins}/5 (add/avg/max: {})", rows.join("; ")))
}

fn site_ablation(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in runs {
        let v = mrr(&r.polar, QueryKind::ContextSingle);
        wins += usize::from(v > r.q_only && v > r.k_only);
        rows.push(format!("s{}: {v:.3}/{:.3}/{:.3}", r.seed, r.q_only, r.k_only));
    }
    check(wins >= 4, format!("V beats Q and K in {wins}/5 (V/Q/K: {})", rows.join("; ")))
}

// ---------------------------------------------------------------- 10

fn cli_pipeline(dir: &Path) -> polar_kit::Result<()> {
    let s = |name: &str| dir.join(name).display().to_string();
    let manifest = s("manifest.json");
    let go = |args: &[&str]| -> polar_kit::Result<()> {
        let mut argv = vec!["polar-kit", "--seed", "21", "--manifest", manifest.as_str()];
        argv.extend_from_slice(args);
        let cli = Cli::try_parse_from(&argv).expect("valid arguments");
        let code = run(cli, argv.iter().map(|a| a.to_string()).collect(), &mut Vec::new())?;
        assert_eq!(code, 0, "{args:?}");
        Ok(())
    };
    let (world, enc, suite) = (s("world.bin"), s("enc.bin"), s("eval.json"));
    go(&["gen-world", "--world", &world, "--suite", &suite])?;
    go(&["pretrain", "--world", &world, "--encoder", &enc, "--steps", "200"])?;
    go(&["personalize", "--world", &world, "--encoder", &enc, "--deltas", &s("deltas")])?;
    go(&["evaluate", "--world", &world, "--encoder", &enc, "--suite", &suite, "--deltas", &s("deltas"), "--out", &s("report.json")])?;
    go(&["ablate", "--world", &world, "--encoder", &enc, "--axis", "lambda", "--grid", "0,0.35", "--iters", "100", "--out", &s("sweep.csv")])?;
    Ok(())
}

fn artifacts(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir.join("deltas"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    out.sort();
    out.push(dir.join("report.json"));
    out.push(dir.join("sweep.csv"));
    out
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cli_pipeline(a.path()).map_err(|e| e.to_string())?;
    cli_pipeline(b.path()).map_err(|e| e.to_string())?;
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    if fa.len() != fb.len() {
        return Err(format!("{} files vs {}", fa.len(), fb.len()));
    }
    for (x, y) in fa.iter().zip(&fb) {
        if x.file_name() != y.file_name() || std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
            return Err(format!("{} differs between runs", x.display()));
        }
    }
    Ok(format!("{} artifacts byte-identical (deltas, report, sweep CSV)", fa.len()))
}

// ---------------------------------------------------------------- 11

fn performance(run: &SeedRun) -> Verdict {
    let spec = &run.world.concepts[0].spec;
    let cfg = train_config_for(run.seed, &TrainConfig::default(), None);
    let mut times = Vec::new();
    for _ in 0..3 {
        let t = Instant::now();
        let (_, report) = train_polar(&run.encoder, spec, &run.world.images, &cfg).map_err(|e| e.to_string())?;
        times.push(t.elapsed().as_secs_f64());
        assert_eq!(report.trace.len(), 500);
    }
    let worst = times.iter().copied().fold(0.0, f64::max);
    check(
        worst < 1.0,
        format!("500 iterations on {}: {:?} s (slowest {worst:.3} s)", spec.concept_id, times.iter().map(|t| (t * 1000.0).round() / 1000.0).collect::<Vec<_>>()),
    )
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient correctness", gradient_correctness);
    all &= report(2, "zero-update identity", zero_update_identity);
    all &= report(3, "merge identity", merge_identity);
    let runs: Result<Vec<SeedRun>, String> = SEEDS.iter().map(|&s| seed_run(s).map_err(|e| format!("seed {s}: {e}"))).collect();
    let shared = |n: usize, name: &str, f: &dyn Fn(&[SeedRun]) -> Verdict| match &runs {
        Ok(r) => report(n, name, || f(r)),
        Err(e) => report(n, name, || Err(e.clone())),
    };
    all &= shared(4, "constraint invariant", &constraint_invariant);
    all &= report(5, "metric oracles", metric_oracles);
    all &= shared(6, "personalization works", &personalization_works);
    all &= shared(7, "regularization prevents forgetting", &regularization);
    all &= shared(8, "add-merge", &merging);
    all &= shared(9, "site ablation", &site_ablation);
    all &= report(10, "determinism", determinism);
    all &= shared(11, "performance budget", &|r| performance(&r[0]));
    if !all {
        std::process::exit(1);
    }
}
