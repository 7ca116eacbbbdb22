//! Acceptance checks, one line per criterion. Exits nonzero if any fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use itfit::concepts::nmf_factorize;
use itfit::encoder_fit::{build_design_matrix, pls_fit, PatchGrid, Pooling};
use itfit::harmonizer::{
    alignment_loss, kink_margin, planted_pilot, total_loss, total_loss_and_gradient,
    HarmonizerConfig, ImportanceMap, MapSource, PilotReport, PilotSettings, ToyBatch, ToyNetwork,
};
use itfit::recordings::{
    build_spatial_maps, ceilings_over_bins, make_bins, select_best_bin, TimeBin,
};
use itfit::stats::{
    dist_shift_test, pareto_front_indices, spearman, t_test_independent, ParetoPoint,
};
use itfit::synthgen::{generate, SyntheticSpec};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn randn<R: Rng>(rng: &mut R, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| StandardNormal.sample(rng))
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    }
}

fn patch_count(fixation: (usize, usize)) -> usize {
    let spec = SyntheticSpec {
        grid: PatchGrid {
            rows: fixation.0,
            cols: fixation.1,
        },
        n_neurons: 4,
        n_features: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let bin = TimeBin::new(90.0, 130.0).unwrap();
    let maps = build_spatial_maps(&ds.recording, bin).unwrap();
    let layer: Vec<_> = ds
        .activations
        .iter()
        .filter(|a| a.model_id == "matched" && a.layer_id == "l1")
        .cloned()
        .collect();
    let grid = PatchGrid::default_for_fixation(fixation.0, fixation.1);
    build_design_matrix(&layer, &maps, grid, Pooling::Mean)
        .unwrap()
        .x
        .nrows()
}

fn c1_patch_counts() -> Result<String, String> {
    let t = Instant::now();
    let m1 = patch_count((16, 16));
    let m2 = patch_count((7, 7));
    ensure!(m1 == 4046 && m2 == 1134, "got {m1} and {m2}");
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{m1} and {m2} patches in {:.2?}", t.elapsed()))
}

fn c2_time_bins() -> Result<String, String> {
    let bins = make_bins(50.0, 250.0, 40.0).map_err(|e| e.to_string())?;
    let got: Vec<(f64, f64)> = bins.iter().map(|b| (b.start_ms, b.end_ms)).collect();
    let want = vec![
        (50.0, 90.0),
        (90.0, 130.0),
        (130.0, 170.0),
        (170.0, 210.0),
        (210.0, 250.0),
    ];
    ensure!(got == want, "got {got:?}");
    Ok("5 bins, 50-250 ms".into())
}

/// Least-squares fit with intercept via SVD.
fn ols_predictions(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let a = DMatrix::from_fn(n, p + 1, |i, j| if j == p { 1.0 } else { x[[i, j]] });
    let b = DMatrix::from_fn(n, y.ncols(), |i, j| y[[i, j]]);
    let beta = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
    let fitted = a * beta;
    Array2::from_shape_fn(y.dim(), |(i, j)| fitted[(i, j)])
}

fn c3_pls_vs_least_squares() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = randn(&mut rng, 20, 5);
        let y = randn(&mut rng, 20, 3);
        let enc = pls_fit(x.view(), y.view(), 5).map_err(|e| e.to_string())?;
        let pred = enc.predict(x.view()).map_err(|e| e.to_string())?;
        let oracle = ols_predictions(&x, &y);
        let num = (&pred - &oracle).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    ensure!(worst <= 1e-6, "worst relative error {worst:e}");
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "50 instances, worst relative error {worst:.1e}, {:.2?}",
        t.elapsed()
    ))
}

fn itfit(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_itfit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "itfit {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    Ok(())
}

fn c4_end_to_end() -> Result<String, String> {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let out = dir.path().join("score");
    itfit(
        &["synth", "--noise", "0", "--neurons", "16", "--images", "14"],
        &data,
    )?;
    let manifest = data.join("manifest.json");
    itfit(
        &[
            "score",
            "--manifest",
            manifest.to_str().unwrap(),
            "--grid",
            "9x9",
        ],
        &out,
    )?;
    let summary: Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let models = summary["models"]
        .as_array()
        .ok_or("summary has no models")?;
    let model = |id: &str| {
        models
            .iter()
            .find(|m| m["model_id"] == id)
            .ok_or(format!("no model {id}"))
    };
    let matched = model("matched")?["score"]
        .as_f64()
        .ok_or("matched has no score")?;
    let mismatched = model("mismatched")?;
    let mm_score = mismatched["score"]
        .as_f64()
        .ok_or("mismatched has no score")?;
    let band = &mismatched["null_band"];
    ensure!(matched >= 0.99, "matched score {matched}");
    ensure!(
        band["score_inside"] == true,
        "mismatched {mm_score} outside [{}, {}]",
        band["lower"],
        band["upper"]
    );
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "matched {matched:.4}, mismatched {mm_score:.4} in [{:.4}, {:.4}], {:.1?}",
        band["lower"].as_f64().unwrap_or(f64::NAN),
        band["upper"].as_f64().unwrap_or(f64::NAN),
        t.elapsed()
    ))
}

fn c5_noise_ceiling() -> Result<String, String> {
    let noise = [0.0, 0.25, 0.5, 1.0, 2.0];
    let bins = make_bins(50.0, 250.0, 40.0).unwrap();
    let mut means = Vec::new();
    for &noise_std in &noise {
        let ds = generate(&SyntheticSpec {
            noise_std,
            ..SyntheticSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let table = ceilings_over_bins(&ds.recording, &bins).map_err(|e| e.to_string())?;
        let best = select_best_bin(&table).map_err(|e| e.to_string())?;
        means.push(
            table
                .for_bin(&best)
                .and_then(|b| b.mean)
                .ok_or("no ceiling")?,
        );
    }
    let rho = spearman(&noise, &means).map_err(|e| e.to_string())?;
    ensure!(means.windows(2).all(|w| w[1] < w[0]), "means {means:?}");
    ensure!(rho == -1.0, "rank correlation {rho}");
    Ok(format!(
        "mean ceilings {:?}, rho {rho}",
        means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>()
    ))
}

fn gradcheck_case(rng: &mut ChaCha8Rng) -> Option<f64> {
    let shape = (rng.random_range(2..=5), rng.random_range(2..=5));
    let hidden: Vec<usize> = (0..rng.random_range(1..=2))
        .map(|_| rng.random_range(3..=6))
        .collect();
    let classes = rng.random_range(2..=4);
    let mut net = ToyNetwork::random(shape, &hidden, classes, rng).unwrap();
    let params: Vec<f64> = net
        .params_flat()
        .iter()
        .map(|v| {
            if *v == 0.0 {
                rng.random_range(-0.15..0.15)
            } else {
                *v
            }
        })
        .collect();
    net.set_params_flat(&params).unwrap();
    let n = rng.random_range(1..=4);
    let inputs: Vec<_> = (0..n).map(|_| randn(rng, shape.0, shape.1)).collect();
    let labels: Vec<_> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut phi: Vec<Option<ImportanceMap>> = (0..n)
        .map(|i| {
            rng.random_bool(0.75).then(|| {
                ImportanceMap::new(
                    MapSource::Human,
                    format!("i{i}"),
                    randn(rng, shape.0, shape.1),
                )
                .unwrap()
            })
        })
        .collect();
    if phi.iter().all(Option::is_none) {
        phi[0] =
            Some(ImportanceMap::new(MapSource::Human, "i0", randn(rng, shape.0, shape.1)).unwrap());
    }
    let config = HarmonizerConfig {
        lambda1: rng.random_range(0.1..3.0),
        lambda2: rng.random_range(0.0..0.1),
        n_levels: rng.random_range(1..=3),
        label_smoothing: if rng.random_bool(0.5) { 0.1 } else { 0.0 },
    };
    let batch = ToyBatch::new(inputs, labels).unwrap();
    // Finite differences straddling a ReLU or rectifier kink are meaningless.
    if kink_margin(&net, &batch, &phi, &config).unwrap().min() < 5e-3 {
        return None;
    }
    let (_, analytic) = total_loss_and_gradient(&net, &batch, &phi, &config).unwrap();
    let step = 1e-4;
    let mut probe = net.clone();
    let numeric: Vec<f64> = (0..params.len())
        .map(|i| {
            let mut p = params.clone();
            p[i] += step;
            probe.set_params_flat(&p).unwrap();
            let up = total_loss(&probe, &batch, &phi, &config).unwrap().total;
            p[i] -= 2.0 * step;
            probe.set_params_flat(&p).unwrap();
            let down = total_loss(&probe, &batch, &phi, &config).unwrap().total;
            (up - down) / (2.0 * step)
        })
        .collect();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-12);
    Some(diff / scale)
}

fn c6_gradcheck() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < 100 {
        match gradcheck_case(&mut rng) {
            Some(rel) => {
                ensure!(
                    rel <= 1e-4,
                    "configuration {checked}: relative error {rel:e}"
                );
                worst = worst.max(rel);
                checked += 1;
            }
            None => skipped += 1,
        }
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "100 configurations ({skipped} near kinks redrawn), worst {worst:.1e}, {:.2?}",
        t.elapsed()
    ))
}

fn c7_alignment_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let phi = randn(&mut rng, h, w);
        let a = rng.random_range(0.01..100.0);
        let b = rng.random_range(-50.0..50.0);
        let g = phi.mapv(|v| a * v + b);
        let phi = ImportanceMap::new(MapSource::Human, "x", phi).unwrap();
        let g = ImportanceMap::new(MapSource::Model, "x", g).unwrap();
        let levels = rng.random_range(1..=5);
        worst = worst.max(
            alignment_loss(&g, &phi, levels)
                .map_err(|e| e.to_string())?
                .abs(),
        );
    }
    ensure!(worst <= 1e-10, "worst loss {worst:e}");
    Ok(format!("100 draws, worst {worst:.1e}"))
}

fn c8_toy_harmonization() -> Result<String, String> {
    let t = Instant::now();
    let report = planted_pilot(&PilotSettings::default()).map_err(|e| e.to_string())?;
    let committed: PilotReport = serde_json::from_str(include_str!("data/harmonizer_pilot.json"))
        .map_err(|e| e.to_string())?;
    ensure!(
        report.settings == committed.settings,
        "pilot settings drifted from the committed run"
    );
    let (base, harm) = (&report.baseline, &report.harmonized);
    ensure!(!base.diverged && !harm.diverged, "a run diverged");
    ensure!(
        harm.alignment_ratio <= 0.5,
        "alignment ratio {}",
        harm.alignment_ratio
    );
    let gap = (harm.test_accuracy - base.test_accuracy).abs();
    ensure!(gap <= 0.05, "accuracy gap {gap}");
    for (got, want) in [(harm, &committed.harmonized), (base, &committed.baseline)] {
        ensure!(
            (got.alignment_ratio - want.alignment_ratio).abs() <= 1e-6
                && (got.test_accuracy - want.test_accuracy).abs() <= 1e-9,
            "lambda1={} run differs from the committed pilot",
            got.lambda1
        );
    }
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "alignment ratio {:.4}, accuracy {:.4} vs {:.4}, {:.1?}",
        harm.alignment_ratio,
        harm.test_accuracy,
        base.test_accuracy,
        t.elapsed()
    ))
}

fn c9_nmf() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sweeps = 0;
    for i in 0..50 {
        let a = Array2::from_shape_fn((20, 10), |_| rng.random::<f64>());
        let basis = nmf_factorize(a.view(), 3, 200, 0.0, i).map_err(|e| e.to_string())?;
        let h = &basis.objective_history;
        ensure!(
            h.windows(2).all(|w| w[1] <= w[0]),
            "matrix {i}: objective rose"
        );
        sweeps += h.len() - 1;
    }
    let u = Array2::from_shape_fn((20, 1), |_| rng.random::<f64>() + 0.1);
    let v = Array2::from_shape_fn((1, 10), |_| rng.random::<f64>() + 0.1);
    let a = u.dot(&v);
    let basis = nmf_factorize(a.view(), 1, 5000, 0.0, 0).map_err(|e| e.to_string())?;
    let rel = (&basis.w.dot(&basis.h) - &a)
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        / a.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(rel <= 1e-6, "rank-1 relative error {rel:e}");
    Ok(format!("{sweeps} sweeps monotone, rank-1 error {rel:.1e}"))
}

fn dominated_by_any(points: &[ParetoPoint], i: usize) -> bool {
    let p = &points[i];
    points.iter().any(|q| {
        q.task_accuracy >= p.task_accuracy
            && q.predictivity >= p.predictivity
            && (q.task_accuracy > p.task_accuracy || q.predictivity > p.predictivity)
    })
}

fn c10_stats_kernel() -> Result<String, String> {
    let x = [1.0, 3.0, 2.0, 4.0];
    let ranks = [1.0, 2.0, 3.0, 4.0];
    let n = 4.0;
    let d2: f64 = x.iter().zip(&ranks).map(|(a, b)| (a - b) * (a - b)).sum();
    let closed_form = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    let rho = spearman(&x, &ranks).map_err(|e| e.to_string())?;
    ensure!(
        (rho - 0.8).abs() < 1e-12 && (closed_form - 0.8).abs() < 1e-12,
        "spearman {rho}"
    );

    let t =
        t_test_independent(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], true).map_err(|e| e.to_string())?;
    ensure!(
        (t.t.abs() - 3.674).abs() <= 1e-3 && t.df == 4.0,
        "t {} df {}",
        t.t,
        t.df
    );

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for set in 0..200 {
        // Coarse values so ties occur.
        let pts: Vec<ParetoPoint> = (0..50)
            .map(|i| {
                let a = (rng.random::<f64>() * 40.0).round() + 50.0;
                let p = (rng.random::<f64>() * 40.0).round() / 100.0;
                ParetoPoint::new(format!("m{i}"), a, p).unwrap()
            })
            .collect();
        let mut got = pareto_front_indices(&pts);
        got.sort_unstable();
        let want: Vec<usize> = (0..pts.len())
            .filter(|&i| !dominated_by_any(&pts, i))
            .collect();
        ensure!(
            got == want,
            "set {set}: front {got:?} vs brute force {want:?}"
        );
    }
    Ok(format!("rho 0.8, t {:.3} df 4, 200 fronts match", t.t))
}

fn c11_dist_shift() -> Result<String, String> {
    let (pool, dim, n, repeats) = (400, 16, 28, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference = randn(&mut rng, pool, dim);
    let same = randn(&mut rng, pool, dim);
    let shifted = randn(&mut rng, pool, dim).mapv(|v| v + 3.0);
    let null = dist_shift_test(reference.view(), same.view(), n, repeats, 11)
        .map_err(|e| e.to_string())?;
    let shift = dist_shift_test(reference.view(), shifted.view(), n, repeats, 11)
        .map_err(|e| e.to_string())?;
    // Binomial 95% band for one LOO run over 2n held-out points.
    let half = 1.96 * (0.25 / (2 * n) as f64).sqrt();
    ensure!(
        (null.mean_accuracy - 0.5).abs() <= half,
        "identical sets: mean {} outside 0.5 +/- {half:.4}",
        null.mean_accuracy
    );
    ensure!(
        shift.mean_accuracy >= 0.95,
        "shifted sets: mean {}",
        shift.mean_accuracy
    );
    Ok(format!(
        "identical {:.4} within 0.5 +/- {half:.4}, shifted {:.4}",
        null.mean_accuracy, shift.mean_accuracy
    ))
}

fn c12_report() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/scores_104.csv");
    itfit(&["report", "--scores", table], dir.path())?;
    let svg = std::fs::read_to_string(dir.path().join("plot.svg")).map_err(|e| e.to_string())?;
    let circles = svg.matches("<circle").count();
    ensure!(circles == 104, "{circles} points in plot.svg");

    let mut rdr = csv::Reader::from_path(table).map_err(|e| e.to_string())?;
    let pts: Vec<ParetoPoint> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            ParetoPoint::new(&r[0], r[1].parse().unwrap(), r[2].parse().unwrap()).unwrap()
        })
        .collect();
    let mut rdr =
        csv::Reader::from_path(dir.path().join("pareto.csv")).map_err(|e| e.to_string())?;
    let flags: Vec<bool> = rdr.records().map(|r| &r.unwrap()[4] == "true").collect();
    ensure!(
        flags.len() == pts.len(),
        "pareto.csv has {} rows",
        flags.len()
    );
    for (i, &on) in flags.iter().enumerate() {
        ensure!(
            on == !dominated_by_any(&pts, i),
            "row {i} ({}) front membership wrong",
            pts[i].model_id
        );
    }
    let front_marks = svg.matches("class=\"point front\"").count();
    let n_front = flags.iter().filter(|f| **f).count();
    ensure!(
        front_marks == n_front,
        "{front_marks} front markers vs {n_front} front points"
    );
    Ok(format!("104 points, {n_front} on the front"))
}

fn main() {
    let checks: [(u32, &str, Check); 12] = [
        (1, "patch counts", c1_patch_counts),
        (2, "time bins", c2_time_bins),
        (3, "PLS vs least squares", c3_pls_vs_least_squares),
        (4, "end-to-end recovery", c4_end_to_end),
        (5, "noise-ceiling sensitivity", c5_noise_ceiling),
        (6, "harmonizer gradient check", c6_gradcheck),
        (7, "alignment invariance", c7_alignment_invariance),
        (8, "toy harmonization", c8_toy_harmonization),
        (9, "NMF properties", c9_nmf),
        (10, "statistics kernel", c10_stats_kernel),
        (11, "distribution shift", c11_dist_shift),
        (12, "report presentation", c12_report),
    ];
    let mut failed = 0;
    for (n, name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2}: PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
