//! Acceptance criteria, one test per criterion. Each prints a single
//! `PASS`/`FAIL` line to stderr before asserting.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use reside_cli::{
    cmd_cluster, cmd_eval, cmd_gen_synthetic, cmd_score, cmd_train, ClusterArgs, CsfArg, EvalArgs,
    GenSyntheticArgs, ScoreArgs, SpecArg, TrainArgs,
};
use reside_core::aggregate::{self, WeightVector};
use reside_core::clustering::{self, KMeansParams, ProbeParams};
use reside_core::csf::{self, CsfKind, PNormConfig, ScoreMatrix};
use reside_core::feature_store::{self, CorrectnessFlags, FeatureDataset, SampleMasses};
use reside_core::sc_eval;
use reside_core::Exec;

fn verdict(criterion: u32, title: &str, ok: bool, detail: &str) {
    let line = format!(
        "{} criterion {criterion}: {title} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    // written straight to the process stderr so the line survives output capture
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    assert!(ok, "{line}");
}

/// Runs `f` on a single worker thread.
fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

struct Instance {
    scores: ScoreMatrix,
    w: WeightVector,
    flags: CorrectnessFlags,
}

/// M in [4, 200], L in [1, 5], Gaussian scores and weights, Bernoulli errors
/// with a rate drawn from (0.05, 0.95); redrawn until both outcomes occur.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let m = rng.random_range(4..=200usize);
    let l = rng.random_range(1..=5usize);
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..=l).map(|_| normal.sample(rng)).collect())
        .collect();
    let w: Vec<f64> = (0..=l).map(|_| normal.sample(rng)).collect();
    let rate = Uniform::new(0.05, 0.95).unwrap().sample(rng);
    let errors = loop {
        let e: Vec<bool> = (0..m).map(|_| rng.random_bool(rate)).collect();
        let n = e.iter().filter(|&&x| x).count();
        if n != 0 && n != m {
            break e;
        }
    };
    Instance {
        scores: ScoreMatrix::from_rows(rows, CsfKind::Ml, PNormConfig::identity(), "random").unwrap(),
        w: WeightVector::new(w).unwrap(),
        flags: CorrectnessFlags::from_errors(errors),
    }
}

/// Every threshold evaluated from scratch in (score desc, index asc) order.
fn brute_force_aurc(scores: &[f64], errors: &[bool], masses: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..scores.len() {
        let (mut cov, mut err) = (0.0, 0.0);
        for j in 0..scores.len() {
            if scores[j] > scores[i] || (scores[j] == scores[i] && j <= i) {
                cov += masses[j];
                if errors[j] {
                    err += masses[j];
                }
            }
        }
        total += masses[i] * err / cov;
    }
    total
}

#[test]
fn criterion_01_bound_property_suite() {
    let started = Instant::now();
    let (instances, loose_fail, tight_checked, tight_fail) = single_threaded(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut loose_fail, mut tight_checked, mut tight_fail) = (0, 0, 0);
        for _ in 0..1000 {
            let inst = random_instance(&mut rng);
            let masses = SampleMasses::uniform(inst.scores.rows());
            let report = sc_eval::weighted_bound_report(&inst.scores, &inst.w, &masses, &inst.flags).unwrap();
            if !report.loose_holds {
                loose_fail += 1;
            }
            if let Some(holds) = report.tight_holds {
                tight_checked += 1;
                if !holds {
                    tight_fail += 1;
                }
            }
        }
        (1000, loose_fail, tight_checked, tight_fail)
    });
    let elapsed = started.elapsed();
    let ok = loose_fail == 0 && tight_fail == 0 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "AURC bounds on random instances",
        ok,
        &format!(
            "{instances} instances, loose violations {loose_fail}, tight violations {tight_fail} of {tight_checked} checked, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cols = rng.random_range(2..=6);
        let mut row = || -> Vec<f64> { (0..cols).map(|_| normal.sample(&mut rng)).collect() };
        let correct: Vec<Vec<f64>> = (0..16).map(|_| row()).collect();
        let wrong: Vec<Vec<f64>> = (0..16).map(|_| row()).collect();
        let w: Vec<f64> = (0..cols).map(|_| normal.sample(&mut rng)).collect();
        let c: Vec<&[f64]> = correct.iter().map(Vec::as_slice).collect();
        let e: Vec<&[f64]> = wrong.iter().map(Vec::as_slice).collect();
        let grad = aggregate::reside_grad(&WeightVector::new(w.clone()).unwrap(), &c, &e).unwrap();
        for j in 0..cols {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[j] += step;
            minus[j] -= step;
            let lp = aggregate::reside_loss(&WeightVector::new(plus).unwrap(), &c, &e).unwrap();
            let lm = aggregate::reside_loss(&WeightVector::new(minus).unwrap(), &c, &e).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let scale = grad[j].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grad[j] - numeric).abs() / scale);
        }
    }
    verdict(
        2,
        "analytic gradient vs central differences",
        worst < 1e-5,
        &format!("100 draws, max relative error {worst:.3e}"),
    );
}

#[test]
fn criterion_03_aurc_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut mixtures = 0;
    for _ in 0..500 {
        let m = rng.random_range(1..=64usize);
        let h = rng.random_range(1..=7usize.min(m));
        let mut ids: Vec<u16> = (0..m).map(|i| (i % h + 1) as u16).collect();
        ids.shuffle(&mut rng);
        if h > 1 {
            mixtures += 1;
        }
        let masses = SampleMasses::from_subsets(&ids, h).unwrap();
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let errors: Vec<bool> = (0..m).map(|_| rng.random_bool(0.35)).collect();
        let curve = sc_eval::rc_curve(&scores, &errors, &masses).unwrap();
        let oracle = brute_force_aurc(&scores, &errors, masses.masses());
        worst = worst.max((curve.aurc - oracle).abs());
    }
    verdict(
        3,
        "RC-curve AURC vs all-threshold brute force",
        worst < 1e-9,
        &format!("500 instances ({mixtures} with H > 1), max deviation {worst:.3e}"),
    );
}

#[test]
fn criterion_04_analytic_anchors() {
    let mut checks = Vec::new();

    let g = [0.37; 6];
    let correct: Vec<f64> = g[..3].to_vec();
    let wrong: Vec<f64> = g[3..].to_vec();
    let loss = aggregate::pairwise_log_loss(&correct, &wrong).unwrap();
    checks.push(("constant-g loss = ln 2", (loss - std::f64::consts::LN_2).abs() <= 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<u16> = (0..70).map(|i| (i % 7 + 1) as u16).collect();
    let masses = SampleMasses::from_subsets(&ids, 7).unwrap();
    let scores: Vec<f64> = (0..70).map(|_| rng.random::<f64>()).collect();
    let errors: Vec<bool> = (0..70).map(|_| rng.random_bool(0.3)).collect();
    let rate = CorrectnessFlags::from_errors(errors.clone()).error_rate(&masses);
    let curve = sc_eval::rc_curve(&scores, &errors, &masses).unwrap();
    let full = curve.points.last().unwrap();
    checks.push(("full-coverage risk = error rate", (full.risk - rate).abs() <= 1e-9));

    let uniform = SampleMasses::uniform(4);
    let errors = [false, false, true, true];
    let good = sc_eval::aurc(&[4.0, 3.0, 2.0, 1.0], &errors, &uniform).unwrap();
    let bad = sc_eval::aurc(&[1.0, 2.0, 3.0, 4.0], &errors, &uniform).unwrap();
    checks.push(("AURC 5/24", (good - 5.0 / 24.0).abs() <= 1e-9));
    checks.push(("AURC 19/24", (bad - 19.0 / 24.0).abs() <= 1e-9));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        4,
        "analytic anchors",
        failed.is_empty(),
        &format!("{} of {} anchors hold, failing: {failed:?}", checks.len() - failed.len(), checks.len()),
    );
}

#[test]
fn criterion_05_error_independent_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = 400;
    let mut errors: Vec<bool> = (0..m).map(|i| i < 100).collect();
    let masses = SampleMasses::uniform(m);
    let constant = vec![0.5; m];
    let mut total = 0.0;
    for _ in 0..200 {
        errors.shuffle(&mut rng);
        total += sc_eval::aurc(&constant, &errors, &masses).unwrap();
    }
    let mean = total / 200.0;
    verdict(
        5,
        "constant scores average to the error rate",
        (mean - 0.25).abs() <= 0.02,
        &format!("mean AURC {mean:.5} over 200 tie orders, error rate 0.25"),
    );
}

fn ordering(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap()
}

#[test]
fn criterion_06_binary_rank_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let margin_kinds = [CsfKind::Msp, CsfKind::Sm, CsfKind::Lm, CsfKind::Ne, CsfKind::Ngi];
    let (mut pairs, mut disagreements, mut temperature_changes) = (0, 0, 0);
    while pairs < 10_000 {
        let a: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let b: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (ma, mb) = ((a[0] - a[1]).abs(), (b[0] - b[1]).abs());
        // margins must be distinct, and also the max logits for ML
        if (ma - mb).abs() < 1e-6 || (a[0].max(a[1]) - b[0].max(b[1])).abs() < 1e-6 {
            continue;
        }
        pairs += 1;
        let orders: Vec<_> = margin_kinds
            .iter()
            .map(|&k| ordering(csf::csf_score(k, &a).unwrap(), csf::csf_score(k, &b).unwrap()))
            .collect();
        if orders.iter().any(|&o| o != orders[0]) {
            disagreements += 1;
        }
        for kind in CsfKind::ALL {
            let base = ordering(csf::csf_score(kind, &a).unwrap(), csf::csf_score(kind, &b).unwrap());
            for t in [0.1, 1.0, 10.0] {
                let at = [a[0] / t, a[1] / t];
                let bt = [b[0] / t, b[1] / t];
                let scaled = ordering(csf::csf_score(kind, &at).unwrap(), csf::csf_score(kind, &bt).unwrap());
                if scaled != base {
                    temperature_changes += 1;
                }
            }
        }
    }
    verdict(
        6,
        "binary rank equivalence and temperature invariance",
        disagreements == 0 && temperature_changes == 0,
        &format!("{pairs} pairs, {disagreements} margin-CSF disagreements, {temperature_changes} temperature-induced changes"),
    );
}

/// `k` unit directions in `dim` dimensions with pairwise angles of at least 60 degrees.
fn separated_directions(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < k {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        if dirs.iter().all(|d| d.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= 0.5) {
            dirs.push(v);
        }
    }
    dirs
}

fn same_partition(found: &[usize], planted: &[usize]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut reverse = std::collections::HashMap::new();
    found.iter().zip(planted).all(|(&f, &p)| {
        *map.entry(f).or_insert(p) == p && *reverse.entry(p).or_insert(f) == f
    })
}

#[test]
fn criterion_07_planted_cluster_recovery() {
    let dim = 16;
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut recovered = [0usize; 3];
    let (mut fits, mut monotone_breaks, mut bad_norms) = (0, 0, 0);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + seed);
        for (slot, k) in [2usize, 3, 4].into_iter().enumerate() {
            let dirs = separated_directions(&mut rng, k, dim);
            let planted: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, 50)).collect();
            let points = Array2::from_shape_fn((planted.len(), dim), |(i, j)| {
                dirs[planted[i]][j] + noise.sample(&mut rng)
            });
            let params = ProbeParams { k_min: 2, k_max: 6, seed, ..ProbeParams::default() };
            let selection = clustering::silhouette_select_k(points.view(), &params).unwrap();
            if selection.best_k == k && same_partition(&selection.fit.assignments, &planted) {
                recovered[slot] += 1;
            }
            for trial_k in 2..=6 {
                let fit = clustering::spherical_kmeans(
                    points.view(),
                    trial_k,
                    clustering::derive_seed(seed, trial_k as u64),
                    &KMeansParams::default(),
                    Exec::Parallel,
                )
                .unwrap();
                fits += 1;
                if fit.objective_trace.windows(2).any(|p| p[1] < p[0] - 1e-9) {
                    monotone_breaks += 1;
                }
                for c in fit.centroids.columns() {
                    if (c.dot(&c).sqrt() - 1.0).abs() > 1e-6 {
                        bad_norms += 1;
                    }
                }
            }
        }
    }
    let ok = recovered.iter().all(|&r| r >= 95) && monotone_breaks == 0 && bad_norms == 0;
    verdict(
        7,
        "planted-K recovery",
        ok,
        &format!(
            "recovered K=2/3/4 on {}/{}/{} of 100 seeds, {monotone_breaks} non-monotone runs of {fits}, {bad_norms} off-norm centroids",
            recovered[0], recovered[1], recovered[2]
        ),
    );
}

fn gen(spec: SpecArg, m: usize, l: usize, seed: u64, error_rate: Option<f64>, out: &Path) {
    cmd_gen_synthetic(&GenSyntheticArgs {
        spec,
        m,
        l,
        h: 1,
        seed,
        dim: 8,
        error_rate,
        k: vec![3],
        out: out.to_path_buf(),
    })
    .unwrap();
}

fn cluster(train: &Path, out: &Path) {
    cmd_cluster(&ClusterArgs {
        train: train.to_path_buf(),
        out: out.to_path_buf(),
        k_min: 2,
        k_max: 8,
        seed: 0,
        max_iters: 100,
        tol: 1e-6,
        restarts: 10,
        silhouette_cap: 2000,
    })
    .unwrap();
}

fn score(data: &Path, probes: &Path, out: &Path) {
    cmd_score(&ScoreArgs {
        data: data.to_path_buf(),
        probes: probes.to_path_buf(),
        csf: CsfArg::Msp,
        pnorm_grid: None,
        pnorm_p: None,
        no_pnorm: true,
        out: out.to_path_buf(),
    })
    .unwrap();
}

fn train_args(scores: &Path, data: &Path, out: &Path) -> TrainArgs {
    TrainArgs {
        val_scores: scores.to_path_buf(),
        val_data: data.to_path_buf(),
        lr: 0.1,
        batch: 16,
        epochs: 100,
        seed: 0,
        standardize: false,
        out: out.to_path_buf(),
    }
}

#[test]
fn criterion_08_pathology_repair() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    gen(SpecArg::Pathological, 600, 3, 80, Some(0.05), &p("train"));
    gen(SpecArg::Pathological, 600, 3, 81, None, &p("val"));
    gen(SpecArg::Pathological, 600, 3, 82, None, &p("test"));
    cluster(&p("train"), &p("probes.json"));
    score(&p("val"), &p("probes.json"), &p("val.bin"));
    score(&p("test"), &p("probes.json"), &p("test.bin"));
    cmd_train(&train_args(&p("val.bin"), &p("val"), &p("report.json"))).unwrap();
    let metrics = cmd_eval(&EvalArgs {
        test_scores: p("test.bin"),
        test_data: p("test"),
        weights: p("report.json"),
        out_prefix: p("test"),
    })
    .unwrap();
    let elapsed = started.elapsed();
    let ok = metrics.aurc_baseline > metrics.error_rate
        && metrics.aurc_reside < 0.5 * metrics.aurc_baseline
        && metrics.aurc_reside <= metrics.aurc_best_layer
        && elapsed < Duration::from_secs(120);
    verdict(
        8,
        "end-to-end pathology repair",
        ok,
        &format!(
            "error rate {:.4}, baseline {:.4}, reside {:.4}, best layer {} at {:.4}, {:.1}s",
            metrics.error_rate,
            metrics.aurc_baseline,
            metrics.aurc_reside,
            metrics.best_layer,
            metrics.aurc_best_layer,
            elapsed.as_secs_f64()
        ),
    );
}

/// Final logits rank every correct sample above every wrong one; hidden
/// layers are noise.
fn final_layer_wins(m: usize, seed: u64, error_rate: f64) -> FeatureDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let layers = (0..2)
        .map(|_| Array2::from_shape_fn((m, 6), |_| normal.sample(&mut rng) as f32))
        .collect();
    let mut labels = Vec::with_capacity(m);
    let mut logits = Array2::<f32>::zeros((m, 2));
    for i in 0..m {
        let label = rng.random_range(0..2u8);
        let wrong = rng.random_bool(error_rate);
        let predicted = if wrong { 1 - label as usize } else { label as usize };
        let margin = if wrong { rng.random_range(0.1..1.5) } else { rng.random_range(2.0..4.0) };
        logits[[i, predicted]] = margin;
        labels.push(label);
    }
    FeatureDataset::new(layers, logits, labels, vec![1; m], 1).unwrap()
}

#[test]
fn criterion_09_fallback_guarantees() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    for (name, seed, rate) in [("train", 90, 0.2), ("val", 91, 0.2), ("test", 92, 0.2), ("clean", 93, 0.0)] {
        feature_store::write_dataset(&final_layer_wins(200, seed, rate), &p(name)).unwrap();
    }
    cluster(&p("train"), &p("probes.json"));
    for name in ["val", "test", "clean"] {
        score(&p(name), &p("probes.json"), &p(&format!("{name}.bin")));
    }
    let report = cmd_train(&train_args(&p("val.bin"), &p("val"), &p("report.json"))).unwrap();
    let metrics = cmd_eval(&EvalArgs {
        test_scores: p("test.bin"),
        test_data: p("test"),
        weights: p("report.json"),
        out_prefix: p("test"),
    })
    .unwrap();
    let last = WeightVector::unit(3, 3);
    let fallback_ok = report.fallback
        && report.weights == last
        && metrics.aurc_reside == metrics.aurc_baseline
        && metrics.delta_percent == 0.0;

    let degenerate = cmd_train(&train_args(&p("clean.bin"), &p("clean"), &p("clean.json"))).unwrap();
    let degenerate_ok = degenerate.degenerate && degenerate.fallback && degenerate.weights == last;

    verdict(
        9,
        "fallback guarantees",
        fallback_ok && degenerate_ok,
        &format!(
            "fallback {} with w {:?}, delta {:.2}%; clean validation returns {:?}",
            report.fallback,
            report.weights.as_slice(),
            metrics.delta_percent,
            degenerate.weights.as_slice()
        ),
    );
}

#[test]
fn criterion_10_pairwise_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut rank_fail, mut identity_fail, mut sele_fail) = (0, 0, 0);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let g = aggregate::aggregate_scores(&inst.w, &inst.scores).unwrap();
        let errors = inst.flags.errors();
        let report = sc_eval::bound_report(&g, errors, &SampleMasses::uniform(g.len())).unwrap();
        if std::f64::consts::LN_2 * report.l_rank > report.l_reside {
            rank_fail += 1;
        }

        let m = g.len();
        let direct: u64 = (0..m)
            .filter(|&i| errors[i])
            .map(|i| (0..m).filter(|&j| g[i] >= g[j]).count() as u64)
            .sum();
        let counts = sc_eval::sele_counts(&g, errors);
        let rebuilt = sc_eval::sele_from_decomposition(&g, errors).unwrap();
        if counts.cross + counts.wrong_wrong != direct || (rebuilt - report.delta_sele).abs() > 1e-12 {
            identity_fail += 1;
        }

        if report.aurc >= 2.0 * report.delta_sele {
            sele_fail += 1;
        }
    }
    verdict(
        10,
        "pairwise-loss identities",
        rank_fail == 0 && identity_fail == 0 && sele_fail == 0,
        &format!(
            "1000 instances: ln2*L_rank > L_reside on {rank_fail}, decomposition mismatches {identity_fail}, AURC >= 2*delta_sele on {sele_fail}"
        ),
    );
}
