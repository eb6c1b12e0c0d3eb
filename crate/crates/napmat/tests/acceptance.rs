//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use napmat::ablate::{ablate, AblationConfig};
use napmat::bench::{run_bench, BenchConfig};
use napmat::cache::OrderCache;
use napmat::netpbm;
use napmat_core::flops::{schedule_flops, search_mat_r, ModelSpec, TokenSchedule};
use napmat_core::hynap::{hynap_layer, HybridSchedule};
use napmat_core::mat::{mat_reduce, SimilarityConfig, SimilarityFeature};
use napmat_core::nap::{build_kernel, nap_layer, neighbor_awareness, received_attention, FusedWeighting, NapConfig};
use napmat_core::pipeline::{run_pipeline, MatConfig, Method, PipelineConfig};
use napmat_core::tokens::{reorder_tokens, restore_tokens};
use napmat_core::vit::{attention_forward, mlp_forward, synthetic_batch, AttentionMap, BlockConfig};
use napmat_core::{build_order, locality_score, CurveKind, GridShape, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Box<dyn Fn() -> Outcome>;

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

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn giga(f: u64) -> f64 {
    f as f64 / 1e9
}

fn x_similarity() -> SimilarityConfig {
    SimilarityConfig {
        feature: SimilarityFeature::X,
        ..SimilarityConfig::default()
    }
}

fn baseline_flops() -> Outcome {
    let start = Instant::now();
    let cases = [
        (ModelSpec::deit_s(), 4.6),
        (ModelSpec::deit_b(), 17.6),
        (ModelSpec::deit_b_384(), 55.5),
        (ModelSpec::vit_l(), 61.6),
    ];
    let got: Vec<(String, f64, f64)> = cases
        .iter()
        .map(|(spec, want)| {
            let f = schedule_flops(&TokenSchedule::constant(spec), spec).unwrap().total;
            (spec.name.clone(), giga(f), *want)
        })
        .collect();
    let elapsed = start.elapsed();
    let ok = got.iter().all(|(_, g, w)| within(*g, *w, 0.03)) && elapsed < Duration::from_millis(1);
    let parts: Vec<String> = got.iter().map(|(n, g, w)| format!("{n} {g:.2}G (want {w}G)")).collect();
    outcome(ok, format!("{}; {elapsed:?}", parts.join(", ")))
}

fn reduced_flops() -> Outcome {
    let nap = |spec: &ModelSpec| {
        let s = TokenSchedule::nap(spec, 0.7, &[3, 6, 9]).unwrap();
        giga(schedule_flops(&s, spec).unwrap().total)
    };
    let checks = [
        ("deit-s nap", nap(&ModelSpec::deit_s()), 2.3),
        ("deit-b nap", nap(&ModelSpec::deit_b()), 11.5),
        ("deit-b-384 nap", nap(&ModelSpec::deit_b_384()), 27.2),
    ];
    let s = ModelSpec::deit_s();
    let (r, f) = search_mat_r(&s, 3_300_000_000);
    let mat = giga(f);
    let mut ok = within(mat, 3.3, 0.05);
    let mut parts = Vec::new();
    for (name, got, want) in checks {
        let hit = within(got, want, 0.05);
        ok &= hit;
        parts.push(format!("{name} {got:.2}G (want {want}G){}", if hit { "" } else { " MISS" }));
    }
    parts.push(format!("deit-s mat r={r} {mat:.2}G (want 3.3G)"));
    outcome(ok, parts.join(", "))
}

fn worked_example() -> Outcome {
    let d = napmat_core::mat::resolve_destinations(&[1, 2, 5]);
    let ok = d.filled == [1, 1, 5] && d.sources == [2, 3, 6];
    outcome(ok, format!("F {:?}, S {:?}", d.filled, d.sources))
}

fn kernel_suite() -> Outcome {
    let mut ok = true;
    for r in 0..=16 {
        let k = build_kernel(r);
        ok &= (k.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        ok &= (1..=r as isize).all(|d| k.weight(d) == k.weight(-d));
    }
    let r1 = build_kernel(1);
    ok &= r1.weights() == [0.25, 0.5, 0.25];
    outcome(ok, format!("R=0..16 normalized and symmetric, R=1 {:?}", r1.weights()))
}

fn random_attention(rng: &mut ChaCha8Rng) -> AttentionMap {
    let (b, h, n) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(2..24));
    let mut w = Vec::with_capacity(b * h * n * n);
    for _ in 0..b * h * n {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0f64).exp()).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|x| x / s));
    }
    AttentionMap::from_weights(b, h, n, w).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mat_cases = 0;
    let mut mat_ok = true;
    for draw in 0..1000u64 {
        for m in 2..=8 {
            let t = synthetic_batch(1, GridShape::new(1, m).unwrap(), 3, 1, draw * 16 + m as u64).unwrap();
            for r in 0..m {
                let (out, _) = mat_reduce(&t, None, x_similarity(), r).unwrap();
                mat_ok &= out == common::mat_by_enumeration(&t, r);
                mat_cases += 1;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let attn = random_attention(&mut rng);
        let got = received_attention(&attn).unwrap();
        let want = common::received_attention(&attn);
        let radius = rng.random_range(0..6);
        let phi = neighbor_awareness(&got, &build_kernel(radius));
        for (b, row) in got.iter().enumerate() {
            for (x, y) in row.iter().zip(&want[b]) {
                worst = worst.max((x - y).abs());
            }
            for (x, y) in phi[b].iter().zip(&common::neighbor_awareness(&want[b], radius)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let ok = mat_ok && worst <= 1e-10;
    outcome(ok, format!("{mat_cases} merge cases exact: {mat_ok}; 200 attention instances max err {worst:.1e}"))
}

/// Tokens with unequal sizes: a random merge applied to a fresh batch.
fn sized_tokens(rng: &mut ChaCha8Rng, seed: u64) -> (TokenBatch, usize) {
    let m = rng.random_range(8..40);
    let dim = 8;
    let t = synthetic_batch(2, GridShape::new(1, m).unwrap(), dim, 1, seed).unwrap();
    let r = rng.random_range(0..m / 2);
    (mat_reduce(&t, None, x_similarity(), r).unwrap().0, m)
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let nap = NapConfig {
        keep_ratio: 0.6,
        fused_weighting: FusedWeighting::Size,
        ..NapConfig::default()
    };
    let (mut mass_ok, mut worst) = (true, 0.0f64);
    for i in 0..1000u64 {
        let (t, cells) = sized_tokens(&mut rng, i);
        let cfg = BlockConfig {
            dim: 8,
            heads: 2,
            seed: i,
            ..BlockConfig::default()
        };
        let (x, attn, keys) = attention_forward(&t, &cfg, 0).unwrap();
        let out = match i % 3 {
            0 => nap_layer(&x, &attn, &nap).unwrap().0,
            1 => {
                let r = rng.random_range(0..x.len() - 2);
                mat_reduce(&x, Some(&keys), SimilarityConfig::default(), r).unwrap().0
            }
            _ => {
                let m = x.len() - 1;
                let prune = rng.random_range(0..m / 3);
                let merge = rng.random_range(0..(m - prune).div_ceil(2));
                hynap_layer(&x, &attn, &keys, (prune, merge), &nap).unwrap().0
            }
        };
        out.check_bookkeeping(cells).unwrap();
        for b in 0..x.batch() {
            mass_ok &= out.total_size(b) == x.total_size(b);
            worst = worst.max(relative_gap(&x.weighted_feature_sum(b), &out.weighted_feature_sum(b)));
        }
    }
    outcome(
        mass_ok && worst <= 1e-6,
        format!("1000 layers (nap/mat/hynap, size-weighted fusion): mass exact {mass_ok}, max relative feature-sum gap {worst:.1e}"),
    )
}

fn curve_suite() -> Outcome {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for rows in 1..=32 {
        for cols in 1..=32 {
            let shape = GridShape::new(rows, cols).unwrap();
            let o = build_order(shape, CurveKind::Hilbert).unwrap();
            let mut seen = vec![false; shape.len()];
            for &(r, c) in o.perm() {
                ok &= r < rows && c < cols && !std::mem::replace(&mut seen[r * cols + c], true);
            }
            ok &= seen.iter().all(|s| *s);
            ok &= o.perm().windows(2).all(|w| w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1) == 1);
            let kind = CurveKind::ALL[rng.random_range(0..4)];
            let order = build_order(shape, kind).unwrap();
            let t = synthetic_batch(1, shape, 3, 1, (rows * 100 + cols) as u64).unwrap();
            ok &= restore_tokens(&reorder_tokens(&t, &order).unwrap(), &order).unwrap() == t;
        }
    }
    outcome(ok, "1024 grid shapes: bijective, unit-step, bit-exact round trip")
}

fn forward(tokens: &TokenBatch, cfg: &BlockConfig) -> TokenBatch {
    let mut x = tokens.clone();
    for layer in 0..cfg.depth {
        x = attention_forward(&x, cfg, layer).unwrap().0;
        x = mlp_forward(&x, cfg, layer).unwrap();
    }
    x
}

fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    for i in 0..20u64 {
        let heads = rng.random_range(1..4);
        let cfg = BlockConfig {
            dim: heads * rng.random_range(2..6),
            heads,
            depth: rng.random_range(1..4),
            seed: i,
            init_std: 0.2,
            ..BlockConfig::default()
        };
        let grid = GridShape::new(rng.random_range(1..7), rng.random_range(2..7)).unwrap();
        let kind = CurveKind::ALL[i as usize % 4];
        let t = synthetic_batch(rng.random_range(1..3), grid, cfg.dim, 1, 1000 + i).unwrap();
        let order = build_order(grid, kind).unwrap();
        let via = restore_tokens(&forward(&reorder_tokens(&t, &order).unwrap(), &cfg), &order).unwrap();
        ok &= via.features() == forward(&t, &cfg).features();
    }
    outcome(ok, "20 random configurations bit-identical")
}

fn count_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for i in 0..500u64 {
        let depth = rng.random_range(1..5);
        let grid = GridShape::new(rng.random_range(2..6), rng.random_range(3..8)).unwrap();
        let m0 = grid.len();
        let t = synthetic_batch(1, grid, 8, 1, i).unwrap();
        let mut expected = Vec::with_capacity(depth);
        let method = match i % 3 {
            0 => {
                let k = rng.random_range(1..=20usize);
                let layers: Vec<usize> = (0..depth).filter(|_| rng.random_bool(0.6)).collect();
                let (mut m, mut fused) = (m0, 0);
                for l in 0..depth {
                    if layers.contains(&l) {
                        let keep = (k * m).div_ceil(20);
                        if keep < m {
                            fused = 1;
                        }
                        m = keep;
                    }
                    expected.push(1 + m + fused);
                }
                Method::Nap(NapConfig {
                    keep_ratio: k as f64 / 20.0,
                    layers,
                    ..NapConfig::default()
                })
            }
            1 => {
                let r = rng.random_range(0..m0);
                let mut n = 1 + m0;
                for _ in 0..depth {
                    n -= r.min(n - 2);
                    expected.push(n);
                }
                Method::Mat(MatConfig {
                    r_per_layer: r,
                    ..MatConfig::default()
                })
            }
            _ => {
                let (mut n, mut fused) = (1 + m0, false);
                let mut entries = Vec::with_capacity(depth);
                for _ in 0..depth {
                    let candidates = n - 1 - usize::from(fused);
                    let prune = rng.random_range(0..=(candidates - 1) / 2);
                    let after = candidates - prune;
                    let merge = if after > 2 { rng.random_range(0..after.div_ceil(2)) } else { 0 };
                    n = n - prune - merge + usize::from(prune > 0 && !fused);
                    fused |= prune > 0;
                    entries.push((prune, merge));
                    expected.push(n);
                }
                Method::Hynap {
                    nap: NapConfig::default(),
                    schedule: HybridSchedule { entries },
                }
            }
        };
        let cfg = PipelineConfig {
            block: BlockConfig {
                dim: 8,
                heads: 2,
                depth,
                seed: i,
                ..BlockConfig::default()
            },
            curve: CurveKind::ALL[i as usize % 4],
            method,
        };
        let got: Vec<usize> = match run_pipeline(&t, grid, &cfg) {
            Ok(trace) => trace.layers.iter().map(|l| l.tokens_out).collect(),
            Err(_) => Vec::new(),
        };
        if got != expected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("500 draws, {mismatches} mismatches"))
}

fn corpus_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus"))
}

fn locality_ablation() -> Outcome {
    let mut hilbert_ok = true;
    let mut brute_ok = true;
    for rows in 1..=32 {
        for cols in 1..=32 {
            let shape = GridShape::new(rows, cols).unwrap();
            if shape.len() < 2 {
                continue;
            }
            let h = build_order(shape, CurveKind::Hilbert).unwrap();
            hilbert_ok &= locality_score(&h, 1).unwrap() == 1.0;
            let row = build_order(shape, CurveKind::RowMajor).unwrap();
            brute_ok &= (locality_score(&row, 1).unwrap() - common::locality(row.perm(), 1)).abs() < 1e-12;
        }
    }
    let grid = GridShape::new(14, 14).unwrap();
    let row = locality_score(&build_order(grid, CurveKind::RowMajor).unwrap(), 1).unwrap();
    let brute = common::locality(build_order(grid, CurveKind::RowMajor).unwrap().perm(), 1);
    let row_ok = (row - 1.80).abs() <= 0.01;

    let images = netpbm::read_dir(corpus_dir()).unwrap();
    let cfg = AblationConfig::default();
    let rep = ablate(&images, &cfg, &OrderCache::new()).unwrap();
    let sim = |k: CurveKind| rep.row(k).unwrap().mean_adjacent_cosine.unwrap();
    let (hs, rs) = (sim(CurveKind::Hilbert), sim(CurveKind::RowMajor));
    let dir_ok = images.len() >= 10 && hs >= rs;
    outcome(
        hilbert_ok && brute_ok && row_ok && dir_ok,
        format!(
            "hilbert r1 = 1.0 on all grids: {hilbert_ok}; row-major 14x14 = {row:.4} (brute force {brute:.4}, want 1.80 +- 0.01){}; \
             {} images: adjacent cosine hilbert {hs:.4} vs row {rs:.4}",
            if row_ok { "" } else { " MISS" },
            images.len()
        ),
    )
}

fn complexity(suite_start: Instant) -> Outcome {
    let cfg = BenchConfig {
        tokens: vec![256, 512, 1024, 2048, 4096, 8192],
        dim: 16,
        kernels: vec!["mat_similarity".into(), "all_pairs".into()],
        min_time: Duration::from_millis(10),
        samples: 3,
        ..BenchConfig::default()
    };
    let rep = run_bench(&cfg).unwrap();
    let lin = rep.slope("mat_similarity").unwrap();
    let quad = rep.slope("all_pairs").unwrap();
    let elapsed = suite_start.elapsed();
    let ok = (0.8..=1.3).contains(&lin) && (1.7..=2.3).contains(&quad) && elapsed < Duration::from_secs(300);
    outcome(
        ok,
        format!("mat similarity slope {lin:.3}, all-pairs slope {quad:.3}, suite {:.1}s", elapsed.as_secs_f64()),
    )
}

fn main() {
    let start = Instant::now();
    let criteria: Vec<(&str, Check)> = vec![
        ("baseline FLOPs", Box::new(baseline_flops)),
        ("reduced FLOPs", Box::new(reduced_flops)),
        ("destination worked example", Box::new(worked_example)),
        ("neighbor kernel", Box::new(kernel_suite)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("conservation", Box::new(conservation)),
        ("curve suite", Box::new(curve_suite)),
        ("permutation equivariance", Box::new(equivariance)),
        ("count contracts", Box::new(count_contracts)),
        ("locality ablation", Box::new(locality_ablation)),
        ("complexity", Box::new(move || complexity(start))),
    ];
    let mut failed = 0;
    println!();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<28} {} ({:.2}s) {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("\n{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
