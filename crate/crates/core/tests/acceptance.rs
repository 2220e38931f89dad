//! Acceptance suite: one PASS/FAIL line per criterion with its runtime.
//! Runs as a plain binary (`harness = false`) so the lines always print.

mod common;

use std::time::{Duration, Instant};

use common::{permute_mlp, random_hidden_perms, random_mlp, rel_frobenius};
use rand::Rng;
use wsim::chain::{normalize_chain_conv, normalize_chain_mlp};
use wsim::cli::{self, Options};
use wsim::harness::{
    evaluate_population, generate_population, retrieval_split, run_cross_network,
    standard_variants, HypothesisConfig,
};
use wsim::metric::{cross_entropy, retrieve, softmax};
use wsim::net::{
    forward, gradient_check, init_layers, kink_margin, Activation, Batch, Layers, NetSpec,
};
use wsim::seed;
use wsim::tensor::{Matrix, Tensor4};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn permutation_invariance() -> Outcome {
    let mut rng = seed::rng(1);
    let (mut worst, mut raw_differs, mut trials) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let depth = rng.gen_range(2..=5);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..=8)).collect();
        let layers = random_mlp(&widths, &mut rng);
        let chains: Vec<Matrix> = (1..=depth)
            .map(|l| normalize_chain_mlp(&layers, l).unwrap().matrix)
            .collect();
        for _ in 0..10 {
            // an all-identity sequence permutes nothing, so it is redrawn
            let perms = loop {
                let p = random_hidden_perms(&widths, &mut rng);
                if p.iter().any(|q| !q.is_identity()) {
                    break p;
                }
            };
            let permuted = permute_mlp(&layers, &perms);
            for (l, c) in chains.iter().enumerate() {
                worst = worst.max(rel_frobenius(
                    c,
                    &normalize_chain_mlp(&permuted, l + 1).unwrap().matrix,
                ));
            }
            trials += 1;
            if layers
                .iter()
                .zip(&permuted)
                .any(|(a, b)| a.sub(b).unwrap().frobenius_norm() > 0.0)
            {
                raw_differs += 1;
            }
        }
    }
    let share = raw_differs as f64 / trials as f64;
    outcome(
        worst <= 1e-9 && share >= 0.99,
        format!("max chain rel diff {worst:.2e} (<= 1e-9); raw layers differ in {:.1}% of {trials} trials", share * 100.0),
    )
}

fn two_layer_example() -> Outcome {
    let w1 = Matrix::from_rows(&[vec![0.8, 0.1, 0.8], vec![0.9, 0.7, 0.2]]).unwrap();
    let w2 = Matrix::from_rows(&[
        vec![0.5, 0.3, 0.4],
        vec![0.9, 0.1, 0.3],
        vec![0.5, 0.4, 0.2],
    ])
    .unwrap();
    let w1p = Matrix::from_rows(&[vec![0.1, 0.8, 0.8], vec![0.7, 0.9, 0.2]]).unwrap();
    let w2p = Matrix::from_rows(&[
        vec![0.9, 0.1, 0.3],
        vec![0.5, 0.3, 0.4],
        vec![0.5, 0.4, 0.2],
    ])
    .unwrap();
    let spec = NetSpec::mlp(&[2, 3, 3], Activation::Linear);
    let (a, b) = (
        Layers::Mlp(vec![w1.clone(), w2.clone()]),
        Layers::Mlp(vec![w1p.clone(), w2p.clone()]),
    );
    let mut rng = seed::rng(2);
    let mut out_diff = 0.0f64;
    for _ in 0..100 {
        let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let (ya, yb) = (
            forward(&spec, &a, &x).unwrap(),
            forward(&spec, &b, &x).unwrap(),
        );
        out_diff = ya
            .iter()
            .zip(&yb)
            .map(|(u, v)| (u - v).abs())
            .fold(out_diff, f64::max);
    }
    let mut chain_diff = 0.0f64;
    for l in 1..=2 {
        let fa = normalize_chain_mlp(&[w1.clone(), w2.clone()], l)
            .unwrap()
            .matrix;
        let fb = normalize_chain_mlp(&[w1p.clone(), w2p.clone()], l)
            .unwrap()
            .matrix;
        chain_diff = chain_diff.max(fa.max_abs_diff(&fb).unwrap());
    }
    outcome(
        out_diff <= 1e-12 && chain_diff <= 1e-12,
        format!("max output diff {out_diff:.1e}, max chain diff {chain_diff:.1e} (<= 1e-12)"),
    )
}

fn conv_chain_shapes() -> Outcome {
    let mut rng = seed::rng(3);
    let w1 = Tensor4::random_uniform([2, 3, 3, 3], 1.0, &mut rng);
    let w2 = Tensor4::random_uniform([3, 2, 3, 3], 1.0, &mut rng);
    let side = normalize_chain_conv(&[w1, w2], 2).unwrap().side();

    let dims = [4, 5, 3];
    let tensors: Vec<Tensor4> = dims
        .windows(2)
        .map(|d| Tensor4::random_uniform([d[0], d[1], 1, 1], 1.0, &mut rng))
        .collect();
    let mats: Vec<Matrix> = tensors
        .iter()
        .map(|t| t.clone().reshape(t.c_in(), t.c_out()).unwrap())
        .collect();
    let mut diff = 0.0f64;
    for l in 1..=2 {
        let c = normalize_chain_conv(&tensors, l).unwrap().matrix;
        let m = normalize_chain_mlp(&mats, l).unwrap().matrix;
        diff = diff.max(c.max_abs_diff(&m).unwrap());
    }
    outcome(
        side == 18 && diff <= 1e-12,
        format!("chain-2 side {side} (= 18); 1x1 vs MLP max diff {diff:.1e}"),
    )
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut rng = seed::rng(400 + i);
        let depth = rng.gen_range(2..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..=4)).collect();
        let act = if i % 2 == 0 {
            Activation::Relu
        } else {
            Activation::LeakyRelu { slope: 0.1 }
        };
        let spec = NetSpec::mlp(&widths, act);
        let layers = init_layers(&spec, &mut rng);
        // nudge inputs until every hidden pre-activation is clear of the kink
        let x = loop {
            let x = Matrix::random_uniform(3, widths[0], 1.0, &mut rng);
            if kink_margin(&spec, &layers, &x).unwrap() > 1e-3 {
                break x;
            }
        };
        let y = (0..3)
            .map(|_| rng.gen_range(0..spec.num_outputs()))
            .collect();
        worst = worst.max(gradient_check(&spec, &layers, &Batch { x, y }).unwrap());
    }
    outcome(
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over 20 nets (<= 1e-4)"),
    )
}

struct Desk {
    run: wsim::harness::HypothesisRun,
    cfg: HypothesisConfig,
}

fn desk_hypothesis() -> (Outcome, Desk) {
    let cfg = HypothesisConfig::desk_scale();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let run = pool
        .install(|| generate_population(&cfg).and_then(|w| evaluate_population(&cfg, w)))
        .unwrap();
    let raw = HypothesisConfig {
        normalize: false,
        ..cfg.clone()
    };
    let raw_verdict = evaluate_population(&raw, run.weights.clone())
        .unwrap()
        .verdict;
    let norm: Vec<f64> = run
        .classification
        .iter()
        .map(|a| a.normalized_test)
        .collect();
    let unnorm: Vec<f64> = run
        .classification
        .iter()
        .map(|a| a.unnormalized_test)
        .collect();
    let pass = norm.iter().all(|&a| a >= 0.95)
        && unnorm[1..].iter().all(|&a| a <= 0.5)
        && run.verdict.accepted
        && !raw_verdict.accepted;
    let detail = format!(
        "normalized top-1 {norm:.3?} (>= 0.95); unnormalized {unnorm:.3?} (layers 2+ <= 0.5); accepted {} / without normalization {}",
        run.verdict.accepted, raw_verdict.accepted
    );
    (outcome(pass, detail), Desk { run, cfg })
}

fn desk_retrieval(desk: &Desk) -> Outcome {
    let unseen = desk
        .run
        .weights
        .filter_tasks(&(desk.cfg.seen_tasks..desk.cfg.total_tasks()).collect::<Vec<_>>());
    let (queries, gallery) = retrieval_split(&desk.cfg, &unseen);
    let (mut rank1, mut monotone, mut full) = (Vec::new(), true, true);
    for c in &desk.run.normalized {
        let r = retrieve(c, &queries, &gallery, gallery.len()).unwrap();
        rank1.push(r.rank1());
        monotone &= r.cmc.windows(2).all(|w| w[0] <= w[1]);
        full &= *r.cmc.last().unwrap() == 1.0;
    }
    outcome(
        rank1.iter().all(|&v| v >= 0.9) && monotone && full,
        format!(
            "{} queries / {} gallery; rank-1 {rank1:.3?} (>= 0.9); CMC monotone {monotone}; rank-|gallery| = 1 {full}",
            queries.len(),
            gallery.len()
        ),
    )
}

fn cross_network() -> Outcome {
    let cfg = HypothesisConfig::cross_desk_scale();
    let variants = standard_variants(&cfg.spec);
    let spec_of = |n: &str| {
        variants
            .iter()
            .find(|(name, _)| name == n)
            .unwrap()
            .1
            .clone()
    };
    let acc = |b: &NetSpec| {
        run_cross_network(&cfg.spec, b, &cfg)
            .unwrap()
            .mean_classification()
    };
    let (plain, leaky, residual) = (
        acc(&cfg.spec),
        acc(&spec_of("leaky")),
        acc(&spec_of("residual")),
    );
    outcome(
        (plain - leaky).abs() <= 0.05 && plain - residual >= 0.10,
        format!("mean over chains: plain->plain {plain:.3}, plain->leaky {leaky:.3} (within 0.05), plain->residual {residual:.3} (>= 0.10 lower)"),
    )
}

fn determinism() -> Outcome {
    let config = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let opts = Options::new(&config, dir.path().join(name));
        cli::cmd_hypothesis(&opts).unwrap();
        let crcs = cli::read_manifest(&opts.archive_dir()).unwrap().crc_set();
        let verdict = std::fs::read(opts.report_dir().join("verdict.json")).unwrap();
        (crcs, verdict)
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "{} blob CRC32s identical {}; verdict.json identical {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut ln_gap = 0.0f64;
    for m in [2usize, 3, 10, 50, 100] {
        let z = vec![0.0; m];
        for target in [0, m - 1] {
            ln_gap = ln_gap.max((cross_entropy(&z, target) - (m as f64).ln()).abs());
        }
    }
    let mut rng = seed::rng(9);
    let mut sum_gap = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        sum_gap = sum_gap.max((softmax(&z).iter().sum::<f64>() - 1.0).abs());
    }
    outcome(
        ln_gap <= 1e-12 && sum_gap <= 1e-9,
        format!("|loss - ln M| {ln_gap:.1e} (<= 1e-12); |sum - 1| {sum_gap:.1e} over 1000 inputs (<= 1e-9)"),
    )
}

fn report(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = o.pass && in_time;
    let budget = limit
        .map(|l| format!(" / limit {:.0} s", l.as_secs_f64()))
        .unwrap_or_default();
    println!(
        "[{}] criterion {n}: {name}: {} ({:.3} s{budget})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= report(
        1,
        "permutation invariance",
        Some(secs(10)),
        permutation_invariance,
    );
    ok &= report(
        2,
        "two-layer swap example",
        Some(secs(1)),
        two_layer_example,
    );
    ok &= report(3, "conv chain shapes", None, conv_chain_shapes);
    ok &= report(4, "gradient correctness", Some(secs(30)), gradients);
    let mut desk = None;
    ok &= report(
        5,
        "desk-scale hypothesis (single-threaded)",
        Some(secs(600)),
        || {
            let (o, d) = desk_hypothesis();
            desk = Some(d);
            o
        },
    );
    let desk = desk.expect("criterion 5 ran");
    ok &= report(6, "desk-scale retrieval", Some(secs(120)), || {
        desk_retrieval(&desk)
    });
    ok &= report(7, "cross-network direction", None, cross_network);
    ok &= report(8, "determinism", None, determinism);
    ok &= report(9, "loss identities", None, loss_identities);
    if !ok {
        eprintln!("acceptance suite failed");
        std::process::exit(1);
    }
}
