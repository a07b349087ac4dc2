//! The acceptance suite: one PASS/FAIL line per criterion, failing at the
//! end if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharq_cli::config::{MethodName, RunConfig};
use sharq_cli::pipeline::{run_benchmark, Experiment};
use sharq_core::data::{HierarchicalDataset, Normalization, SplitFractions, WindowedDataset};
use sharq_core::hierarchy::{build_summing_matrix, reconciliation_error, HierarchyGraph, SummingMatrix};
use sharq_core::metrics::{check_quantile_additivity, crps_from_samples, GaussianQuantileOracle};
use sharq_core::models::{
    loss_and_gradient, DataLoss, Forecast, Forecaster, ModelKind, ModelSpec, OptimizerConfig, OutputSpec, Solver,
    DEFAULT_QUANTILES,
};
use sharq_core::reconcile::{
    apply_map, bottom_up_map, erm_map, gls_map, mint_map, BaseForecastErrors, ErmConfig, ErmSolver, Method,
    MintWeighting, ReconciliationMap, Shrinkage,
};
use sharq_core::sharq::{
    constrained_mean_loss, constrained_mean_loss_with_grad, constrained_quantile_loss,
    constrained_quantile_loss_with_grad, quantile_reconciliation_loss, quantile_reconciliation_loss_with_grad,
    train_base, train_sharq, LambdaSchedule, SharqConfig,
};
use sharq_core::simulate::{random_hierarchy, simulate_hierarchy, SimConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = randn(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

fn errors(rng: &mut ChaCha8Rng, n: usize) -> BaseForecastErrors {
    BaseForecastErrors {
        residuals: randn(rng, n, 2 * n + 10),
        source: "random".into(),
    }
}

fn unbiased_maps(rng: &mut ChaCha8Rng, s: &SummingMatrix) -> Vec<ReconciliationMap> {
    let n = s.n();
    let e = errors(rng, n);
    vec![
        gls_map(s, &spd(rng, n)).unwrap(),
        mint_map(s, Some(&e), MintWeighting::Sample).unwrap(),
        mint_map(s, Some(&e), MintWeighting::Shrinkage(Shrinkage::Auto)).unwrap(),
        mint_map(s, Some(&e), MintWeighting::Shrinkage(Shrinkage::Fixed(0.5))).unwrap(),
        mint_map(s, None, MintWeighting::Ols).unwrap(),
    ]
}

fn ac1_coherency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let g = random_hierarchy(&mut rng, 31, true);
        let s = build_summing_matrix(&g);
        let n = g.n();
        let mut maps = unbiased_maps(&mut rng, &s);
        maps.push(bottom_up_map(&s));
        let (x, y) = (randn(&mut rng, n, 3 * n), randn(&mut rng, n, 3 * n));
        maps.push(erm_map(&s, &x, &y, ErmConfig::default()).unwrap());
        for map in &maps {
            let y_hat: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let rec = apply_map(map, &y_hat).unwrap();
            let per_node: Vec<Vec<f64>> = rec.iter().map(|&v| vec![v]).collect();
            let l1: f64 = rec.iter().map(|v| v.abs()).sum();
            let ratio = reconciliation_error(&g, &per_node).unwrap() / l1;
            ensure(ratio < 1e-8, || format!("{} on {n} nodes: {ratio:e}", map.method))?;
            worst = worst.max(ratio);
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn ac2_unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g = random_hierarchy(&mut rng, 31, true);
        let s = build_summing_matrix(&g);
        let m = s.m();
        for map in unbiased_maps(&mut rng, &s) {
            let ps = map.p.as_ref().unwrap() * s.matrix();
            let err = (ps - DMatrix::identity(m, m)).norm();
            ensure(err < 1e-8, || format!("{}: ||PS - I|| = {err:e}", map.method))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("worst ||PS - I||_F {worst:.2e}"))
}

/// Linear AR mean forecasters on the small simulated hierarchy, fitted to
/// their least-squares optimum.
fn linear_ar_config(seed: u64, methods: Vec<MethodName>) -> RunConfig {
    RunConfig {
        model: ModelKind::LinearAr,
        quantiles: None,
        data_loss: DataLoss::MseMean,
        solver: Solver::Exact,
        methods,
        seed,
        ..Default::default()
    }
}

fn ac3_mint_beats_base() -> Outcome {
    let base = MethodName::Reconcile(Method::Base);
    let shr = MethodName::Reconcile(Method::MintShr);
    let mut wins = 0;
    let (mut sum_base, mut sum_shr) = (0.0, 0.0);
    for seed in 0..100 {
        let panel = simulate_hierarchy(&SimConfig::small(seed)).unwrap().panel;
        let exp = Experiment::new(panel, linear_ar_config(seed, vec![base, shr])).unwrap();
        let out = run_benchmark(&exp).unwrap();
        let top = |m: &str| out.report.nodes.iter().find(|n| n.method == m && n.level == 1).unwrap().mape;
        let (b, s) = (top("base"), top("mint-shr"));
        sum_base += b;
        sum_shr += s;
        if s < b {
            wins += 1;
        }
    }
    let detail = format!(
        "mint-shr below base in {wins}/100 seeds; mean top MAPE {:.4} vs {:.4}",
        sum_shr / 100.0,
        sum_base / 100.0
    );
    ensure(wins >= 80, || detail.clone())?;
    Ok(detail)
}

fn ac4_sharq_coherency() -> Outcome {
    let methods = vec![MethodName::Reconcile(Method::Base), MethodName::Sharq];
    let (mut base, mut sharq) = (0.0, 0.0);
    for seed in 0..20 {
        let panel = simulate_hierarchy(&SimConfig::small(seed)).unwrap().panel;
        let cfg = RunConfig {
            lambda: "bottom=3.0".parse().unwrap(),
            methods: methods.clone(),
            seed,
            ..Default::default()
        };
        let exp = Experiment::new(panel, cfg).unwrap();
        let out = run_benchmark(&exp).unwrap();
        ensure(out.failures.is_empty(), || format!("{:?}", out.failures))?;
        base += out.report.reconciliation_error["base"];
        sharq += out.report.reconciliation_error["sharq"];
    }
    let ratio = sharq / base;
    let detail = format!("mean coherency sharq {:.3} vs base {:.3} (ratio {ratio:.3})", sharq / 20.0, base / 20.0);
    ensure(ratio <= 0.5, || detail.clone())?;
    Ok(detail)
}

fn ac5_variance_reduction() -> Outcome {
    let (y, sigma) = (3.0, -1.5);
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.1, 1.0, 10.0, 1e6] {
        let grad = |x: f64| constrained_mean_loss_with_grad(&[x], &[y], &[&[sigma]], &[1], lambda).unwrap().1[0];
        let curvature = grad(1.0) - grad(0.0);
        let step = 0.9 / curvature;
        let mut x = 0.0;
        for _ in 0..200 {
            x -= step * grad(x);
        }
        let expect = (y + lambda * sigma) / (lambda + 1.0);
        let err = (x - expect).abs();
        ensure(err < 1e-6, || format!("lambda {lambda}: {x} vs {expect}"))?;
        worst = worst.max(err);
    }
    Ok(format!("worst |x - (Y + lambda S)/(lambda + 1)| {worst:.2e}"))
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-10)
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + EPS;
            let up = f(&p);
            p[i] = orig - EPS;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn model_gradient(rng: &mut ChaCha8Rng, kind: ModelKind, outputs: OutputSpec, loss: DataLoss) -> Option<f64> {
    let (nf, h, n) = (rng.random_range(1..5), rng.random_range(1..4), 3);
    let data = WindowedDataset {
        node: 0,
        window: nf,
        horizon: h,
        n_features: nf,
        inputs: (0..n).map(|_| (0..nf).map(|_| rng.random_range(-1.5..1.5)).collect()).collect(),
        targets: (0..n).map(|_| (0..h).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        origins: (0..n).collect(),
        normalization: Normalization::IDENTITY,
    };
    let spec = ModelSpec::new(kind, nf, h, outputs).unwrap();
    let params = (0..spec.n_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
    let model = Forecaster::from_params(spec, params, Normalization::IDENTITY).unwrap();
    let kinked = (0..n).any(|s| {
        let out = model.forward(&data.inputs[s]).unwrap();
        (0..out.rows).any(|r| (0..h).any(|j| (out.get(r, j) - data.targets[s][j]).abs() < 1e-3))
    });
    if kinked && loss == DataLoss::PinballGrid {
        return None;
    }
    let batch: Vec<usize> = (0..n).collect();
    let (_, grad) = loss_and_gradient(&model, &data, &batch, loss, None).unwrap();
    let numeric = central(
        |p| {
            let m = Forecaster::from_params(model.spec.clone(), p.to_vec(), model.normalization).unwrap();
            loss_and_gradient(&m, &data, &batch, loss, None).unwrap().0
        },
        &model.params,
    );
    Some(rel_err(&grad, &numeric))
}

fn ac6_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let quantiles = OutputSpec::quantiles(&DEFAULT_QUANTILES).unwrap();
    let mut worst: f64 = 0.0;
    let mut record = |name: &str, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        ensure(e < TOL, || format!("{name}: relative error {e:e}"))
    };
    for kind in [ModelKind::LinearAr, ModelKind::MlpQuantile { hidden: 6 }] {
        for (name, outputs, loss) in [
            ("mse", OutputSpec::Mean, DataLoss::MseMean),
            ("pinball-grid", quantiles.clone(), DataLoss::PinballGrid),
        ] {
            let mut checked = 0;
            while checked < 100 {
                if let Some(e) = model_gradient(&mut rng, kind, outputs.clone(), loss) {
                    record(name, e)?;
                    checked += 1;
                }
            }
        }
    }
    let taus = DEFAULT_QUANTILES;
    let mut checked = 0;
    while checked < 100 {
        let h = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let signs: Vec<i8> = (0..k).map(|_| if rng.random_bool(0.8) { 1 } else { -1 }).collect();
        let children: Vec<Vec<f64>> = (0..k).map(|_| vector(&mut rng, h)).collect();
        let child_refs: Vec<&[f64]> = children.iter().map(Vec::as_slice).collect();
        let target = vector(&mut rng, h);
        let lambda = rng.random_range(0.0..5.0);
        let q = vector(&mut rng, 3 * h);
        if (0..3 * h).any(|i| (q[i] - target[i % h]).abs() < 1e-3) {
            continue;
        }

        let parent = vector(&mut rng, h);
        let (_, g) = constrained_mean_loss_with_grad(&parent, &target, &child_refs, &signs, lambda).unwrap();
        let num = central(|p| constrained_mean_loss(p, &target, &child_refs, &signs, lambda).unwrap(), &parent);
        record("constrained_mean_loss", rel_err(&g, &num))?;

        let as_forecast = |v: &[f64]| Forecast {
            rows: 3,
            horizon: h,
            values: v.to_vec(),
        };
        let (_, gq) =
            constrained_quantile_loss_with_grad(&as_forecast(&q), &taus, &target, &child_refs, &signs, lambda).unwrap();
        let num = central(
            |p| constrained_quantile_loss(&as_forecast(p), &taus, &target, &child_refs, &signs, lambda).unwrap(),
            &q,
        );
        record("constrained_quantile_loss", rel_err(&gq.values, &num))?;

        let (pq, pm) = (vector(&mut rng, h), vector(&mut rng, h));
        let cq: Vec<Vec<f64>> = (0..k).map(|_| vector(&mut rng, h)).collect();
        let cm: Vec<Vec<f64>> = (0..k).map(|_| vector(&mut rng, h)).collect();
        let cq_r: Vec<&[f64]> = cq.iter().map(Vec::as_slice).collect();
        let cm_r: Vec<&[f64]> = cm.iter().map(Vec::as_slice).collect();
        let var = rng.random_range(0.0..1.0);
        let (_, gs) = quantile_reconciliation_loss_with_grad(&pq, &pm, &cq_r, &cm_r, &signs, var).unwrap();
        let nq = central(|p| quantile_reconciliation_loss(p, &pm, &cq_r, &cm_r, &signs, var).unwrap(), &pq);
        let nm = central(|p| quantile_reconciliation_loss(&pq, p, &cq_r, &cm_r, &signs, var).unwrap(), &pm);
        record("quantile_reconciliation_loss", rel_err(&gs.d_quantile, &nq).max(rel_err(&gs.d_median, &nm)))?;
        checked += 1;
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn ac7_gaussian_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (m1, m2) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let (s1, s2) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let tau = rng.random_range(0.01..0.99);
        let r = check_quantile_additivity(m1, s1, m2, s2, tau).unwrap().spread_residual.abs();
        ensure(r < 1e-12, || format!("residual {r:e} at ({m1}, {s1}), ({m2}, {s2}), tau {tau}"))?;
        worst = worst.max(r);
    }
    let x = GaussianQuantileOracle::new(0.0, 1.0).unwrap();
    let y = x.independent_sum(&x);
    let gap = (y.quantile(0.9).unwrap() - 2.0 * x.quantile(0.9).unwrap()).abs();
    ensure(gap > 1e-6, || format!("quantiles add at tau 0.9: gap {gap:e}"))?;
    Ok(format!("worst spread residual {worst:.2e}; non-additivity gap {gap:.4}"))
}

fn ac8_erm_solvers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let s = build_summing_matrix(&HierarchyGraph::balanced(&[2, 2]).unwrap());
    let x = randn(&mut rng, 7, 200);
    let y = &x + randn(&mut rng, 7, 200) * 0.3;
    let solve = |solver| {
        erm_map(&s, &x, &y, ErmConfig { ridge: 1e-6, solver })
            .unwrap()
            .p
            .unwrap()
    };
    let direct = solve(ErmSolver::Direct);
    let iterative = solve(ErmSolver::Iterative {
        max_iter: 10_000,
        tol: 1e-12,
    });
    let diff = (direct - iterative).amax();
    ensure(diff < 1e-4, || format!("max elementwise difference {diff:e}"))?;
    Ok(format!("max elementwise difference {diff:.2e}"))
}

fn ac9_zero_lambda() -> Outcome {
    let panel = simulate_hierarchy(&SimConfig::small(9)).unwrap().panel;
    let data = HierarchicalDataset::build(&panel, 10, 8, SplitFractions::default(), true).unwrap();
    let mut n_params = 0;
    for (model, outputs, data_loss) in [
        (ModelKind::MlpQuantile { hidden: 8 }, OutputSpec::quantiles(&DEFAULT_QUANTILES).unwrap(), DataLoss::PinballGrid),
        (ModelKind::LinearAr, OutputSpec::Mean, DataLoss::MseMean),
    ] {
        let config = SharqConfig {
            model,
            outputs,
            lambda: LambdaSchedule::zero(),
            optimizer: OptimizerConfig {
                epochs: 20,
                seed: 42,
                ..OptimizerConfig::unbiased_simulation()
            },
            data_loss,
            ..Default::default()
        };
        let base = train_base(&data, &config).unwrap();
        let sharq = train_sharq(&data, &config).unwrap();
        for (i, (a, b)) in base.models.iter().zip(&sharq.models).enumerate() {
            let same = a.params.len() == b.params.len()
                && a.params.iter().zip(&b.params).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("{model:?}: node {} differs", data.graph.id(i)))?;
            n_params += a.params.len();
        }
    }
    Ok(format!("{n_params} parameters bit-identical"))
}

fn crps_by_integration(samples: &[f64], x: f64) -> f64 {
    let lo = samples.iter().copied().fold(x, f64::min) - 1.0;
    let hi = samples.iter().copied().fold(x, f64::max) + 1.0;
    let steps = 200_000;
    let dz = (hi - lo) / steps as f64;
    let m = samples.len() as f64;
    (0..steps)
        .map(|k| {
            let z = lo + (k as f64 + 0.5) * dz;
            let f = samples.iter().filter(|&&s| s <= z).count() as f64 / m;
            let step = if x <= z { 1.0 } else { 0.0 };
            (f - step).powi(2) * dz
        })
        .sum()
}

fn ac10_crps() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..30);
        let samples: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = rng.random_range(-6.0..6.0);
        let err = (crps_from_samples(&samples, x) - crps_by_integration(&samples, x)).abs();
        ensure(err < 1e-3, || format!("crps off by {err:e}"))?;
        worst = worst.max(err);
    }
    for x in [0.0, -2.5, 1e3, 0.1] {
        let v = crps_from_samples(&[x], x);
        ensure(v == 0.0, || format!("point mass at {x}: {v}"))?;
    }
    Ok(format!("worst |energy - integral| {worst:.2e}; point mass exactly 0"))
}

fn sharq(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sharq"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`sharq {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn ac11_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    sharq(&["--quiet", "--seed", "5", "--out-dir", &p("sim"), "simulate", "--preset", "small-unbiased"])?;
    sharq(&[
        "--quiet",
        "--seed",
        "5",
        "--out-dir",
        &p("first"),
        "benchmark",
        "--hierarchy",
        &p("sim/hierarchy.csv"),
        "--panel",
        &p("sim/panel.csv"),
        "--epochs",
        "20",
    ])?;
    sharq(&["--quiet", "--out-dir", &p("second"), "benchmark", "--manifest", &p("first/manifest.json")])?;
    let files = ["report.json", "report.csv", "forecasts.csv", "manifest.json"];
    for f in files {
        let read = |d: &str| std::fs::read(Path::new(&p(d)).join(f)).map_err(|e| format!("{f}: {e}"));
        ensure(read("first")? == read("second")?, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical", files.len()))
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let criteria: [Criterion; 11] = [
        ("AC1 coherency of hard reconcilers", ac1_coherency, secs(10)),
        ("AC2 PS = I for unbiased maps", ac2_unbiasedness, secs(10)),
        ("AC3 mint-shr beats base at the top", ac3_mint_beats_base, secs(300)),
        ("AC4 sharq halves base incoherency", ac4_sharq_coherency, secs(300)),
        ("AC5 variance-reduction closed form", ac5_variance_reduction, secs(1)),
        ("AC6 analytic gradients", ac6_gradients, secs(30)),
        ("AC7 gaussian quantile identities", ac7_gaussian_identities, secs(1)),
        ("AC8 erm iterative matches direct", ac8_erm_solvers, secs(5)),
        ("AC9 zero lambda reproduces base", ac9_zero_lambda, secs(30)),
        ("AC10 crps oracle", ac10_crps, secs(5)),
        ("AC11 benchmark rerun is bit-exact", ac11_determinism, secs(300)),
    ];
    let mut failed = Vec::new();
    println!();
    for (name, run, budget) in criteria {
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = clock.elapsed();
        let result = result.and_then(|d| {
            ensure(took <= budget, || format!("{d}; took {took:.2?} > {budget:?}"))?;
            Ok(d)
        });
        match result {
            Ok(d) => println!("PASS {name}: {d} [{took:.2?}]"),
            Err(e) => {
                println!("FAIL {name}: {e} [{took:.2?}]");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
