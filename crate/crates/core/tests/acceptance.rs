//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relockit::averaging::{AveragingConfig, RotationMode};
use relockit::bench::{run_averaging_bench, BenchConfig};
use relockit::geometry::*;
use relockit::io::*;
use relockit::metrics::{pose_auc, rra_rta_maa, AccuracyThresholds, PairError};
use relockit::pipeline::{localize, oracle_plan, LocalizationFailure};
use relockit::regressor::{synthetic_pairs, train_toy, HeadMode, ToyModel, ToyModelConfig};
use relockit::synthetic::{generate_scene, Layout, NoiseModel, OracleProvider};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn so3_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_res, mut worst_det, mut worst_scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let raw = Rotation9D(std::array::from_fn(|_| rng.sample(StandardNormal)));
        let r = orthogonalize_9d(&raw).map_err(|e| format!("orthogonalize failed: {e}"))?;
        worst_res = worst_res.max(orthogonality_residual(r.matrix()));
        worst_det = worst_det.max((r.matrix().determinant() - 1.0).abs());

        let s = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled = Rotation9D::from_matrix(&(r.matrix() * s));
        let back = orthogonalize_9d(&scaled).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max((back.matrix() - r.matrix()).abs().max());
    }
    ensure(
        worst_res < 1e-9 && worst_det < 1e-9 && worst_scale < 1e-9,
        format!("max residual {worst_res:.2e}, max |det-1| {worst_det:.2e}, max scale drift {worst_scale:.2e}"),
    )
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < 50 {
        let gt = Pose::new(
            random_rotation(&mut rng),
            Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        );
        let m = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let raw = Rotation9D::from_matrix(&m);

        let sv = m.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let smallest_signed = s[2] * m.determinant().signum();
        let Ok(r) = orthogonalize_9d(&raw) else {
            skipped += 1;
            continue;
        };
        let la = rotation_angle(&r, &gt.rotation);
        let lt = translation_angle(&dir, &gt.translation).map_err(|e| e.to_string())?;
        let away = |a: f64| (0.05..PI - 0.05).contains(&a);
        if !away(la) || !away(lt) || s[1] + smallest_signed < 1e-2 {
            skipped += 1;
            continue;
        }

        let loss = pose_loss(&raw, &dir, &gt).map_err(|e| e.to_string())?;
        let f = |raw: &Rotation9D, dir: &Vec3| {
            rotation_angle(&orthogonalize_9d(raw).unwrap(), &gt.rotation)
                + translation_angle(dir, &gt.translation).unwrap()
        };
        let h = 1e-5;
        let mut fd = Vec::with_capacity(12);
        for i in 0..9 {
            let (mut p, mut n) = (raw, raw);
            p.0[i] += h;
            n.0[i] -= h;
            fd.push((f(&p, &dir) - f(&n, &dir)) / (2.0 * h));
        }
        for i in 0..3 {
            let (mut p, mut n) = (dir, dir);
            p[i] += h;
            n[i] -= h;
            fd.push((f(&raw, &p) - f(&raw, &n)) / (2.0 * h));
        }
        let analytic: Vec<f64> = loss
            .grad_raw
            .0
            .iter()
            .chain(loss.grad_direction.iter())
            .copied()
            .collect();
        let num: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
        checked += 1;
    }
    ensure(
        worst < 1e-3,
        format!("{checked} configurations ({skipped} skipped near clamp/singular), max relative error {worst:.2e}"),
    )
}

fn noiseless_end_to_end() -> Outcome {
    let scene = generate_scene(10, 20, 10.0, Layout::General, 0).map_err(|e| e.to_string())?;
    let (db, queries) = (scene.database_db(), scene.queries_db());
    let plan = oracle_plan(&db, &queries, 10).map_err(|e| e.to_string())?;
    let provider = OracleProvider::new(&queries, &db, NoiseModel::noiseless(0));
    let results =
        localize(&db, &plan, &provider, &AveragingConfig::default()).map_err(|e| e.to_string())?;
    let (mut dt, mut dr) = (0.0f64, 0.0f64);
    for (r, (_, gt)) in results.iter().zip(&scene.queries) {
        let pose = r
            .pose()
            .ok_or_else(|| format!("{} failed: {:?}", r.query_id, r.outcome))?;
        dt = dt.max((pose.camera_center() - gt.camera_center()).norm());
        dr = dr.max(rotation_angle(&pose.rotation, &gt.rotation));
    }
    ensure(
        results.len() == 20 && dt < 1e-6 && dr < 1e-6,
        format!(
            "{} queries, max center error {dt:.2e} m, max rotation error {dr:.2e} rad",
            results.len()
        ),
    )
}

fn degenerate_fraction(
    layout: Layout,
    seed: u64,
    noise: NoiseModel,
) -> Result<(usize, usize), String> {
    let scene = generate_scene(10, 20, 10.0, layout, seed).map_err(|e| e.to_string())?;
    let (db, queries) = (scene.database_db(), scene.queries_db());
    let plan = oracle_plan(&db, &queries, 10).map_err(|e| e.to_string())?;
    let provider = OracleProvider::new(&queries, &db, noise);
    let results =
        localize(&db, &plan, &provider, &AveragingConfig::default()).map_err(|e| e.to_string())?;
    let degenerate = results
        .iter()
        .filter(|r| {
            matches!(
                r.outcome,
                Err(LocalizationFailure::DegenerateGeometry { .. })
            )
        })
        .count();
    Ok((degenerate, results.len()))
}

fn degeneracy() -> Outcome {
    let (mut col_deg, mut col_n) = (0, 0);
    for seed in 0..10 {
        let (d, n) = degenerate_fraction(Layout::Collinear, seed, NoiseModel::noiseless(seed))?;
        col_deg += d;
        col_n += n;
    }
    let (mut gen_deg, mut gen_n) = (0, 0);
    for seed in 0..100 {
        for noise in [
            NoiseModel::noiseless(seed),
            NoiseModel::gaussian(2.0, 2.0, seed),
        ] {
            let (d, n) = degenerate_fraction(Layout::General, seed, noise)?;
            gen_deg += d;
            gen_n += n;
        }
    }
    ensure(
        col_deg == col_n && gen_deg == 0,
        format!("collinear {col_deg}/{col_n} degenerate, general {gen_deg}/{gen_n} degenerate over 100 seeds"),
    )
}

fn robustness_ordering() -> Outcome {
    let report = run_averaging_bench(&BenchConfig {
        k_list: vec![10],
        outlier_fraction: 0.1,
        ..BenchConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let median = report
        .cell(10, RotationMode::Median)
        .ok_or("missing cell")?;
    let mean = report.cell(10, RotationMode::Mean).ok_or("missing cell")?;
    ensure(
        median.wins >= 95,
        format!(
            "median beats mean in {}/{} trials (median rot {:.3} deg, mean rot {:.3} deg)",
            median.wins,
            median.trials,
            median.median_rotation.unwrap_or(f64::NAN),
            mean.median_rotation.unwrap_or(f64::NAN)
        ),
    )
}

fn top_k_trend() -> Outcome {
    let report = run_averaging_bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let t = |k| {
        report
            .cell(k, RotationMode::Median)
            .and_then(|c| c.median_translation)
            .unwrap_or(f64::NAN)
    };
    let (t2, t5, t10) = (t(2), t(5), t(10));
    ensure(
        t10 <= t5 && t5 <= t2,
        format!("median translation error K=2 {t2:.4} m, K=5 {t5:.4} m, K=10 {t10:.4} m"),
    )
}

fn metric_suite() -> Outcome {
    let auc = pose_auc(&[2.0], 10.0).map_err(|e| e.to_string())?;
    if (auc - 0.9).abs() > 1e-12 {
        return Err(format!("single-error AUC {auc}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let thresholds = AccuracyThresholds::default();
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let errors: Vec<PairError> = (0..n)
            .map(|_| PairError {
                rotation_error: rng.random_range(0.0..40.0),
                translation_error: rng.random_bool(0.9).then(|| rng.random_range(0.0..40.0)),
            })
            .collect();
        let acc = rra_rta_maa(&errors, &thresholds).map_err(|e| e.to_string())?;
        let mut rra = 0usize;
        let mut rta = 0usize;
        for e in &errors {
            if e.rotation_error <= 15.0 {
                rra += 1;
            }
            if let Some(t) = e.translation_error {
                if t <= 15.0 {
                    rta += 1;
                }
            }
        }
        if acc.rra != rra as f64 / n as f64 || acc.rta != rta as f64 / n as f64 {
            return Err(format!(
                "counting mismatch: {acc:?} vs {rra}/{n}, {rta}/{n}"
            ));
        }
    }
    Ok(format!(
        "AUC(2 deg, tau 10) = {auc}, RRA/RTA agree with counting on 200 fixtures"
    ))
}

fn toy_regressor() -> Outcome {
    let model = ToyModel::new(ToyModelConfig::default()).map_err(|e| e.to_string())?;
    for pair in synthetic_pairs(20, 32, 32, 8) {
        let (p12, p21) = model
            .forward_pair(&pair.image1, &pair.image2)
            .map_err(|e| e.to_string())?;
        let (q21, q12) = model
            .forward_pair(&pair.image2, &pair.image1)
            .map_err(|e| e.to_string())?;
        if p12 != q12 || p21 != q21 {
            return Err("swapping inputs did not swap outputs exactly".into());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = synthetic_pairs(1, 8, 8, 80).remove(0);
    let mut worst = 0.0f64;
    for draw in 0..1000u64 {
        let cfg = ToyModelConfig {
            patch_size: 4,
            token_dim: 8,
            attention_heads: 1,
            encoder_blocks: 1,
            decoder_blocks: 1,
            head_layers: 1,
            head_mode: HeadMode::ALL[(draw % 4) as usize],
            seed: draw,
            ..ToyModelConfig::default()
        };
        let mut model = ToyModel::new(cfg).map_err(|e| e.to_string())?;
        let gain = 10f64.powf(rng.random_range(-1.0..2.0));
        model.parameters_mut().iter_mut().for_each(|p| *p *= gain);
        let (a, b) = model
            .forward_pair(&images.image1, &images.image2)
            .map_err(|e| format!("draw {draw} gain {gain:.3}: {e}"))?;
        for pred in [a, b] {
            let r = pred.pose.rotation.matrix();
            worst = worst
                .max(orthogonality_residual(r))
                .max((r.determinant() - 1.0).abs());
        }
    }
    if worst >= 1e-9 {
        return Err(format!("rotation validity error {worst:.2e}"));
    }

    let batch = synthetic_pairs(8, 32, 32, 0);
    let mut model = ToyModel::new(ToyModelConfig::default()).map_err(|e| e.to_string())?;
    let trace = train_toy(&mut model, &batch, 2000, 1e-3).map_err(|e| e.to_string())?;
    let reached = trace.iter().find(|r| r.total() < 0.05).map(|r| r.step);
    let last = trace.last().expect("trace is never empty");
    ensure(
        reached.is_some(),
        format!(
            "swap symmetry exact on 20 pairs; max SO(3) error {worst:.2e} over 1000 draws; \
             loss {:.4} -> {:.4} rad, below 0.05 at step {:?}",
            trace[0].total(),
            last.total(),
            reached
        ),
    )
}

fn resave(
    dir: &Path,
    name: &str,
    save: impl Fn(&Path),
    reload: impl Fn(&Path, &Path),
) -> Result<(), String> {
    let (a, b) = (dir.join(format!("{name}.1")), dir.join(format!("{name}.2")));
    save(&a);
    reload(&a, &b);
    let (x, y) = (
        fs::read(&a).map_err(|e| e.to_string())?,
        fs::read(&b).map_err(|e| e.to_string())?,
    );
    ensure(x == y, format!("{name} differs after reload")).map(|_| ())
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let db = common::random_db(&mut rng, 1000);
    resave(
        d,
        "poses",
        |p| save_pose_file(&db, p).unwrap(),
        |a, b| save_pose_file(&load_pose_file(a).unwrap(), b).unwrap(),
    )?;
    let plan = common::random_plan(&mut rng, 1000);
    resave(
        d,
        "pairs",
        |p| save_pairs(&plan, p).unwrap(),
        |a, b| save_pairs(&load_pairs(a).unwrap(), b).unwrap(),
    )?;
    let est = common::random_estimates(&mut rng, 1000);
    resave(
        d,
        "estimates",
        |p| save_estimates(&est, p).unwrap(),
        |a, b| save_estimates(&load_estimates(a).unwrap(), b).unwrap(),
    )?;
    let report = common::random_report(&mut rng, 1000);
    resave(
        d,
        "report",
        |p| write_report(&report, p).unwrap(),
        |a, b| write_report(&read_report(a).unwrap(), b).unwrap(),
    )?;
    Ok("pose, pairs, estimates and report files identical after reload (1000 records each)".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 9] = [
        ("SO(3) orthogonalization", so3_suite, 10),
        ("loss gradients", gradient_suite, 30),
        ("noiseless end-to-end", noiseless_end_to_end, 5),
        ("degeneracy", degeneracy, 600),
        ("median vs mean under outliers", robustness_ordering, 60),
        ("top-K trend", top_k_trend, 60),
        ("metric exactness", metric_suite, 600),
        ("toy regressor", toy_regressor, 600),
        ("file round trip", io_round_trip, 600),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_owned()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{d}; exceeded {budget} s budget"))
            }
            other => other,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {} {status}: {name}: {detail} ({:.2} s)",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
