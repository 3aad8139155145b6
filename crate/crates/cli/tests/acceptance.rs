//! Acceptance gate. Every criterion prints one PASS/FAIL line to stderr;
//! the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lle_core::corpus::{
    generate_corpus, AcousticFeatures, Corpus, CorpusSpec, LanguageSpec, PhonemeSequence, Split, Utterance,
};
use lle_core::eval::{corpus_probe, cross_lingual_eval, preference_analysis, CrossLingualReport, ProbeConfig};
use lle_core::losses::{all_objectives, check_gradients, LossWeights};
use lle_core::model::{
    load_checkpoint, save_checkpoint, tts_infer, vc_infer, Checkpoint, Group, ModelConfig, ModelParams,
};
use lle_core::numerics::{gaussian_kld, symmetrized_kld, DiagGaussian, Selection, Tensor};
use lle_core::protocol::{adapt, initial_train, resume, weld, RunControl, StageConfig, StageData, TrainReport};
use lle_core::rng::derive_seed;
use lle_core::Error;

const GRAD_SEEDS: u64 = 5;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_ENTRIES: usize = 8;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const KLD_CASES: usize = 1000;
const KLD_TOL: f64 = 1e-9;

const SIMILARITY_MARGIN: f64 = 0.2;
const CONVERSIONS: usize = 20;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);

const CONSISTENCY_TOL: f64 = 0.2;
const TIE_GAP_RATIO: f64 = 0.5;

const PREF_MAX_VOTES: u64 = 30;
const PREF_TOL: f64 = 1e-9;

const DURATION_CASES: usize = 200;

const ADAPT_DROP: f64 = 0.3;

type Verdict = Result<String, String>;

fn report(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let verdict = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {n}: {name} ({secs:.1}s) {detail}");
    verdict.is_ok()
}

fn info(msg: &str) {
    let _ = writeln!(std::io::stderr(), "[INFO] {msg}");
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn grad_corpus(model: &ModelConfig, seed: u64) -> Corpus {
    let spec = CorpusSpec {
        feature_dim: model.feature_dim,
        samples_per_frame: model.samples_per_frame as u32,
        phonemes_per_utterance: (3, 5),
        duration_frames: (1, 3),
        languages: vec![LanguageSpec {
            id: "G".into(),
            inventory: (0..model.vocab_size as u32).collect(),
            speakers: model.speakers,
            train_utterances: 1,
            heldout_utterances: 0,
            transcribed: true,
        }],
        ..CorpusSpec::default()
    };
    generate_corpus(&spec, seed).unwrap()
}

fn gradient_soundness() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for s in 0..GRAD_SEEDS {
        let seed = derive_seed(17, &[0x6763, s]);
        let config = ModelConfig {
            init_seed: seed,
            ..ModelConfig::default()
        };
        let corpus = grad_corpus(&config, seed);
        let names: Vec<String> = corpus.speaker_ids().iter().map(|s| s.to_string()).collect();
        let m = ModelParams::init(&config, &names).unwrap();
        let batch: Vec<&Utterance> = corpus.utterances.iter().take(2).collect();
        let selection = Selection::PerTensor {
            max_entries: GRAD_ENTRIES,
            seed,
        };
        for objective in all_objectives(&LossWeights::default()) {
            let r = check_gradients(&objective, &batch, &m, seed, GRAD_EPS, selection).unwrap();
            checked += r.checked;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, format!("{} {}", objective.label(), r.worst_param));
            }
        }
    }
    let elapsed = t.elapsed();
    check(
        worst.0 <= GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max rel err {:.2e} <= {GRAD_TOL:.0e} at {} over {checked} entries, {:.0}s < {}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Per-dimension closed form in variance form.
fn kld_oracle(mp: &[f64], lp: &[f64], mq: &[f64], lq: &[f64]) -> f64 {
    (0..mp.len())
        .map(|i| {
            let (vp, vq) = (lp[i].exp(), lq[i].exp());
            0.5 * ((vq / vp).ln() + (vp + (mp[i] - mq[i]).powi(2)) / vq - 1.0)
        })
        .sum()
}

fn kld_oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6c);
    let mut worst = 0.0f64;
    for _ in 0..KLD_CASES {
        let d = rng.random_range(1..=32);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mp, lp, mq, lq) = (draw(-3.0, 3.0), draw(-4.0, 4.0), draw(-3.0, 3.0), draw(-4.0, 4.0));
        let p = DiagGaussian::new(mp.clone(), lp.clone()).unwrap();
        let q = DiagGaussian::new(mq.clone(), lq.clone()).unwrap();
        let kl_pq = kld_oracle(&mp, &lp, &mq, &lq);
        let kl_qp = kld_oracle(&mq, &lq, &mp, &lp);
        let sym = 0.5 * (kl_pq + kl_qp);
        for (got, want) in [
            (gaussian_kld(&p, &q).unwrap(), kl_pq),
            (gaussian_kld(&q, &p).unwrap(), kl_qp),
            (symmetrized_kld(&p, &q).unwrap(), sym),
        ] {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
        let (a, b) = (symmetrized_kld(&p, &q).unwrap(), symmetrized_kld(&q, &p).unwrap());
        if a.to_bits() != b.to_bits() {
            return Err(format!("asymmetric: {a:e} vs {b:e} at dim {d}"));
        }
    }
    check(
        worst <= KLD_TOL,
        format!("{KLD_CASES} cases, worst scaled error {worst:.2e} <= {KLD_TOL:.0e}, symmetry exact"),
    )
}

// ---------------------------------------------------------------- 3, 4, 5

struct Run {
    corpus: Corpus,
    initial: Checkpoint,
    initial_report: TrainReport,
    adapted: Checkpoint,
    adapt_report: TrainReport,
    welded: Checkpoint,
    weld_report: TrainReport,
    eval: CrossLingualReport,
    elapsed: Duration,
}

fn default_run() -> Run {
    let t = Instant::now();
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec, spec.seed).unwrap();
    let split = |lang: &'static str, s: Split| -> Vec<&Utterance> { corpus.select(Some(lang), None, Some(s)).collect() };
    let (at, ah) = (split("A", Split::Train), split("A", Split::Heldout));
    let (bt, bh) = (split("B", Split::Train), split("B", Split::Heldout));
    let a = StageData { train: &at, heldout: &ah };
    let b = StageData { train: &bt, heldout: &bh };
    let init = initial_train(&ModelConfig::default(), a, &StageConfig::initial(), RunControl::default()).unwrap();
    let ad = adapt(&init.checkpoint, b, &StageConfig::adapt(), RunControl::default()).unwrap();
    let wd = weld(&ad.checkpoint, b, &StageConfig::weld(), RunControl::default()).unwrap();
    let probe = corpus_probe(&corpus, &ProbeConfig::default()).unwrap();
    let eval = cross_lingual_eval(&corpus, &wd.checkpoint, &init.checkpoint, &probe, CONVERSIONS).unwrap();
    Run {
        initial: init.checkpoint,
        initial_report: init.report,
        adapted: ad.checkpoint,
        adapt_report: ad.report,
        welded: wd.checkpoint,
        weld_report: wd.report,
        eval,
        elapsed: t.elapsed(),
        corpus,
    }
}

fn cross_lingual_adaptation(run: &Run) -> Verdict {
    let e = &run.eval;
    let (tgt, src) = (e.target_similarity(), e.source_similarity());
    let base = e.baseline_target_similarity().ok_or("no baseline")?;
    check(
        e.items.len() == CONVERSIONS
            && tgt - src >= SIMILARITY_MARGIN
            && tgt > base
            && run.elapsed < PIPELINE_BUDGET,
        format!(
            "{} conversions: target {tgt:.3} - source {src:.3} = {:.3} >= {SIMILARITY_MARGIN}, unadapted {base:.3}, pipeline {:.0}s",
            e.items.len(),
            tgt - src,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn tts_vc_consistency(run: &Run) -> Verdict {
    let e = &run.eval;
    let gap = e.consistency_gap();
    check(
        gap <= CONSISTENCY_TOL,
        format!(
            "tts {:.4} vs vc {:.4}: relative gap {gap:.3} <= {CONSISTENCY_TOL}",
            e.tts_distortion(),
            e.vc_distortion()
        ),
    )
}

fn tie_gap_convergence(run: &Run) -> Verdict {
    let series = run.initial_report.series("acoustic/heldout/tie_gap");
    let (&(s0, first), &(s1, last)) = (series.first().ok_or("no tie_gap rows")?, series.last().unwrap());
    check(
        s0 == 0 && last <= TIE_GAP_RATIO * first,
        format!("held-out tie gap {first:.4} (step {s0}) -> {last:.4} (step {s1}), ratio {:.3} <= {TIE_GAP_RATIO}", last / first),
    )
}

// ---------------------------------------------------------------- 6

fn freezing_and_staging(run: &Run) -> Verdict {
    for g in [Group::Tenc, Group::Senc, Group::Tdec] {
        if run.initial.params.group_bytes(g) != run.adapted.params.group_bytes(g) {
            return Err(format!("{g} changed during adapt"));
        }
    }
    let bt: Vec<&Utterance> = run.corpus.select(Some("B"), None, Some(Split::Train)).collect();
    let bh: Vec<&Utterance> = run.corpus.select(Some("B"), None, Some(Split::Heldout)).collect();
    let b = StageData { train: &bt, heldout: &bh };
    let short = StageConfig {
        step_count: 30,
        vocoder_steps: 10,
        eval_every: 10,
        ..StageConfig::adapt()
    };
    let stage_err = |r: Result<_, Error>| matches!(r, Err(Error::Stage(_)));
    let rejected = [
        stage_err(weld(&run.initial, b, &StageConfig::weld(), RunControl::default())),
        stage_err(adapt(&run.adapted, b, &short, RunControl::default())),
        stage_err(adapt(&run.welded, b, &short, RunControl::default())),
        stage_err(weld(&run.welded, b, &StageConfig::weld(), RunControl::default())),
        stage_err(resume(run.initial.clone(), b, &StageConfig::initial(), RunControl::default())),
    ];
    if let Some(i) = rejected.iter().position(|ok| !ok) {
        return Err(format!("out-of-order operation {i} was accepted"));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("part.ckpt");
    let whole = adapt(&run.initial, b, &short, RunControl::default()).unwrap();
    let part = adapt(&run.initial, b, &short, RunControl { stop_after: Some(17) }).unwrap();
    save_checkpoint(&part.checkpoint, &path).unwrap();
    let part = resume(load_checkpoint(&path).unwrap(), b, &short, RunControl { stop_after: Some(15) }).unwrap();
    save_checkpoint(&part.checkpoint, &path).unwrap();
    let done = resume(load_checkpoint(&path).unwrap(), b, &short, RunControl::default()).unwrap();
    let resumed_equal = done.checkpoint.to_bytes().unwrap() == whole.checkpoint.to_bytes().unwrap()
        && done.report.rows == whole.report.rows;

    save_checkpoint(&run.welded, &path).unwrap();
    let round_trip = load_checkpoint(&path).unwrap() == run.welded;
    check(
        resumed_equal && round_trip,
        format!(
            "frozen groups unchanged, {} out-of-order calls rejected, resume across phases bit-exact: {resumed_equal}, save/load exact: {round_trip}",
            rejected.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn determinism() -> Verdict {
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    common::pipeline(x.path(), "1");
    common::pipeline(y.path(), "1");
    let (tx, ty) = (common::tree(x.path()), common::tree(y.path()));
    let differing: Vec<_> = tx
        .iter()
        .filter(|(k, v)| ty.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    check(
        differing.is_empty() && tx.len() == ty.len(),
        format!("{} files compared, differing: {differing:?}", tx.len()),
    )
}

// ---------------------------------------------------------------- 8

fn binomials(n: u64) -> Vec<BigUint> {
    let mut row = vec![BigUint::one()];
    for k in 0..n {
        let next = &row[k as usize] * BigUint::from(n - k) / BigUint::from(k + 1);
        row.push(next);
    }
    row
}

/// Exact two-sided p at 1/2: mass of outcomes no more likely than `k`.
fn exact_p(k: u64, n: u64) -> f64 {
    let row = binomials(n);
    let observed = &row[k as usize];
    let mass = row.iter().filter(|c| *c <= observed).fold(BigUint::zero(), |acc, c| acc + c);
    let total = BigUint::one() << n;
    if mass >= total {
        return 1.0;
    }
    // scale to keep 60 significant bits through the division
    let scaled = (mass << 60u32) / total;
    scaled.to_f64().unwrap() / 2f64.powi(60)
}

fn preference_statistics() -> Verdict {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=PREF_MAX_VOTES {
        for a in 0..=n {
            let r = preference_analysis(a, n - a).unwrap();
            let want = exact_p(a, n);
            worst = worst.max((r.p_exact - want).abs() / want);
            cases += 1;
            if !(r.ci_95.0 <= r.share_a && r.share_a <= r.ci_95.1) {
                return Err(format!("interval {:?} misses share at {a}/{n}", r.ci_95));
            }
        }
    }
    let even = preference_analysis(150, 150).unwrap().p_exact;
    let sweep = preference_analysis(0, 10).unwrap().p_exact;
    check(
        worst <= PREF_TOL && even == 1.0 && (sweep - 0.001953125).abs() <= 1e-12,
        format!("{cases} splits, worst relative error {worst:.2e}; 150/150 p={even}, 0/10 p={sweep:.9}"),
    )
}

// ---------------------------------------------------------------- 9

fn duration_contract(run: &Run) -> Verdict {
    let ck = &run.welded;
    let c = ck.params.config().clone();
    let spf = c.samples_per_frame as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0);
    let mut violations = Vec::new();
    for i in 0..DURATION_CASES {
        let seed: u64 = rng.random();
        if i % 2 == 0 {
            let len = rng.random_range(1..=10);
            let symbols: Vec<u32> = (0..len).map(|_| rng.random_range(0..c.vocab_size as u32)).collect();
            let durations: Vec<u32> = (0..len).map(|_| rng.random_range(1..=8)).collect();
            let x = PhonemeSequence::new(symbols, durations.clone()).unwrap();
            let want = durations.iter().sum::<u32>() as usize * spf;
            let out = tts_infer(ck, &x, seed).unwrap();
            if out.waveform.len() != want || out.features.frames() * spf != want {
                violations.push(format!("tts case {i}: {} samples, want {want}", out.waveform.len()));
            }
        } else {
            let frames = rng.random_range(1..=60);
            let data: Vec<f64> = (0..frames * c.feature_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let src = AcousticFeatures::from_tensor(&Tensor::from_vec(frames, c.feature_dim, data)).unwrap();
            let out = vc_infer(ck, &src, seed).unwrap();
            if out.features.frames() != frames || out.waveform.len() != frames * spf {
                violations.push(format!("vc case {i}: {} frames, want {frames}", out.features.frames()));
            }
        }
    }
    check(
        violations.is_empty(),
        format!("{DURATION_CASES} random inputs, {} violations {violations:?}", violations.len()),
    )
}

fn training_trends(run: &Run) {
    let adapt_total = run.adapt_report.series("acoustic/heldout/total");
    if let (Some(&(_, first)), Some(&(_, last))) = (adapt_total.first(), adapt_total.last()) {
        let drop = 1.0 - last / first;
        info(&format!(
            "adapt held-out composite loss {first:.4} -> {last:.4} ({:.0}% drop, expected >= {:.0}%): {}",
            100.0 * drop,
            100.0 * ADAPT_DROP,
            if drop >= ADAPT_DROP { "ok" } else { "below" }
        ));
    }
    if let (Some(first), Some(last)) = (
        run.weld_report.first("joint/heldout/voc"),
        run.weld_report.last("joint/heldout/voc"),
    ) {
        info(&format!(
            "weld held-out vocoder cross-entropy {first:.4} -> {last:.4}: {}",
            if last < first { "decreasing" } else { "not decreasing" }
        ));
    }
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    passed.push(report(1, "gradient soundness", gradient_soundness));
    passed.push(report(2, "KLD oracle equivalence", kld_oracle_equivalence));

    let run = catch_unwind(default_run).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default()
    });
    let with_run = |n: usize, name: &str, f: fn(&Run) -> Verdict| match &run {
        Ok(r) => report(n, name, || f(r)),
        Err(e) => report(n, name, || Err(format!("default pipeline failed: {e}"))),
    };
    passed.push(with_run(3, "cross-lingual adaptation", cross_lingual_adaptation));
    passed.push(with_run(4, "TTS/VC consistency", tts_vc_consistency));
    passed.push(with_run(5, "tie-gap convergence", tie_gap_convergence));
    passed.push(with_run(6, "freezing and staging", freezing_and_staging));
    passed.push(report(7, "determinism", determinism));
    passed.push(report(8, "preference statistics", preference_statistics));
    passed.push(with_run(9, "duration contract", duration_contract));
    if let Ok(r) = &run {
        training_trends(r);
    }

    let n_pass = passed.iter().filter(|p| **p).count();
    let _ = writeln!(std::io::stderr(), "acceptance: {n_pass}/{} criteria passed", passed.len());
    assert_eq!(n_pass, passed.len(), "acceptance criteria failed");
}
