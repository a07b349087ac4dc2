use std::sync::Arc;

use nalgebra::DMatrix;
use sharq_core::data::{HierarchicalDataset, SplitFractions, TimeSeriesPanel};
use sharq_core::hierarchy::{build_summing_matrix, reconciliation_error, HierarchyGraph};
use sharq_core::models::{DataLoss, Forecast, ModelKind, OptimizerConfig, OutputSpec, Solver};
use sharq_core::reconcile::{
    apply_map_horizons, bottom_up_map, erm_map, mint_map, BaseForecastErrors, ErmConfig, MintWeighting,
    ReconciliationMap, Shrinkage,
};
use sharq_core::sharq::{coherency_objective, train_base, train_sharq, JointConfig, LambdaSchedule, SharqConfig};
use sharq_core::simulate::{simulate_hierarchy, ArimaSource, ArimaSpec, SimConfig};

fn exact_linear(lambda: LambdaSchedule) -> SharqConfig {
    SharqConfig {
        model: ModelKind::LinearAr,
        outputs: OutputSpec::Mean,
        lambda,
        data_loss: DataLoss::MseMean,
        optimizer: OptimizerConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 0,
            seed: 0,
            solver: Solver::Exact,
        },
        ..Default::default()
    }
}

fn ar1_sim(seed: u64, length: usize) -> SimConfig {
    SimConfig {
        length,
        arima: ArimaSource::Fixed(ArimaSpec::new(vec![0.6], 0, vec![], 1.0).unwrap()),
        ..SimConfig::small(seed)
    }
}

/// Forecasts `[node][h]` of every sample in `samples`, original units.
fn per_sample(models: &[sharq_core::models::Forecaster], ds: &HierarchicalDataset, s: usize) -> Vec<Vec<f64>> {
    models
        .iter()
        .zip(&ds.nodes)
        .map(|(m, d)| m.forward_original(&d.inputs[s]).unwrap().row(0).to_vec())
        .collect()
}

/// One aggregate over three leaves: the children do not depend on lambda,
/// so the regularization path argument applies exactly.
#[test]
fn penalty_is_monotone_in_lambda() {
    let g = Arc::new(HierarchyGraph::balanced(&[3]).unwrap());
    let bottom: Vec<Vec<f64>> = (0..3)
        .map(|k| (0..160).map(|t| 20.0 + (0.37 * t as f64 + k as f64).sin() * (k + 1) as f64).collect())
        .collect();
    let mut panel_values = TimeSeriesPanel::from_bottom(g.clone(), bottom, None).unwrap().values().to_vec();
    // incoherent top-level observations
    for (t, v) in panel_values[0].iter_mut().enumerate() {
        *v += 3.0 * (1.3 * t as f64).cos();
    }
    let panel = TimeSeriesPanel::new(g, panel_values, None).unwrap();
    let ds = HierarchicalDataset::build(&panel, 4, 2, SplitFractions::default(), true).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.5, 1.0, 3.0, 10.0] {
        let state = train_sharq(&ds, &exact_linear(LambdaSchedule::Constant(lambda))).unwrap();
        let norm = ds.nodes[0].normalization;
        let mut pen = 0.0;
        for s in ds.split.train.clone() {
            let f = state.forecast(&ds, s).unwrap();
            for j in 0..ds.horizon {
                let kids: f64 = (1..4).map(|k| f[k].get(0, j)).sum();
                pen += (norm.normalize(f[0].get(0, j)) - norm.normalize(kids)).powi(2);
            }
        }
        assert!(pen <= last * (1.0 + 1e-9) + 1e-12, "lambda {lambda}: {pen} > {last}");
        last = pen;
    }
}

#[test]
fn aggregate_forecasts_are_unbiased() {
    let reps = 200;
    let cfg = exact_linear(LambdaSchedule::default());
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut level = 0.0;
    for r in 0..reps {
        let sim = ar1_sim(1000 + r, 200);
        level = sim.level;
        let sim = simulate_hierarchy(&sim).unwrap();
        let ds = HierarchicalDataset::build(&sim.panel, 4, 8, SplitFractions::default(), true).unwrap();
        let state = train_sharq(&ds, &cfg).unwrap();
        let mut acc = [0.0; 3];
        for s in ds.split.test.clone() {
            let f = state.forecast(&ds, s).unwrap();
            for (a, node) in acc.iter_mut().zip(0..3) {
                *a += f[node].row(0).iter().sum::<f64>() / ds.horizon as f64;
            }
        }
        for (node, a) in acc.iter().enumerate() {
            means[node].push(a / ds.split.test.len() as f64);
        }
    }
    let g = HierarchyGraph::balanced(&[2, 2]).unwrap();
    for (node, m) in means.iter().enumerate() {
        let leaves = g.bottoms().filter(|&b| under(&g, node, b)).count() as f64;
        let truth = level * leaves;
        let mean = m.iter().sum::<f64>() / reps as f64;
        let sd = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let bound = 4.0 * sd / (reps as f64).sqrt();
        assert!((mean - truth).abs() <= bound, "node {node}: {mean} vs {truth} (bound {bound})");
    }
}

fn under(g: &HierarchyGraph, ancestor: usize, mut node: usize) -> bool {
    loop {
        if node == ancestor {
            return true;
        }
        match g.parent(node) {
            Some((p, _)) => node = p,
            None => return false,
        }
    }
}

fn mean_error(g: &HierarchyGraph, forecasts: &[Vec<Vec<f64>>]) -> f64 {
    forecasts.iter().map(|f| reconciliation_error(g, f).unwrap()).sum::<f64>() / forecasts.len() as f64
}

#[test]
fn soft_constraint_sits_between_base_and_mint() {
    let sim = simulate_hierarchy(&ar1_sim(3, 500)).unwrap();
    let ds = HierarchicalDataset::build(&sim.panel, 4, 8, SplitFractions::default(), true).unwrap();
    let g = ds.graph.clone();
    let cfg = exact_linear(LambdaSchedule::default());
    let base = train_base(&ds, &cfg).unwrap();
    let state = train_sharq(&ds, &cfg).unwrap();

    let t = ds.split.train.clone();
    let residuals = DMatrix::from_fn(g.n(), t.len(), |i, c| {
        let s = t.start + c;
        base.models[i].forward_original(&ds.nodes[i].inputs[s]).unwrap().get(0, 0) - ds.nodes[i].target_original(s)[0]
    });
    let errors = BaseForecastErrors { residuals, source: "train h=1".into() };
    let map = mint_map(&build_summing_matrix(&g), Some(&errors), MintWeighting::Shrinkage(Shrinkage::Auto)).unwrap();

    let test = ds.split.test.clone();
    let base_f: Vec<_> = test.clone().map(|s| per_sample(&base.models, &ds, s)).collect();
    let sharq_f: Vec<_> = test.clone().map(|s| per_sample(&state.models, &ds, s)).collect();
    let mint_f: Vec<_> = base_f.iter().map(|f| apply_map_horizons(&map, f).unwrap()).collect();
    let (e_base, e_sharq, e_mint) = (mean_error(&g, &base_f), mean_error(&g, &sharq_f), mean_error(&g, &mint_f));
    assert!(e_sharq > 1e-6, "{e_sharq}");
    assert!(e_sharq < e_base, "{e_sharq} vs {e_base}");
    assert!(e_mint < 1e-8 * 800.0, "{e_mint}");
}

/// Every node sees the windows of all nodes, so post-hoc combinations of
/// base forecasts lie inside the jointly trained model class.
#[test]
fn joint_training_beats_post_hoc_reconciliation() {
    let sim = simulate_hierarchy(&ar1_sim(5, 220)).unwrap();
    let g = sim.panel.graph_arc();
    // aggregate observations carry their own noise, otherwise the base fits are already coherent
    let mut values = sim.panel.values().to_vec();
    for (i, series) in values.iter_mut().enumerate().filter(|(i, _)| !g.is_bottom(*i)) {
        for (t, v) in series.iter_mut().enumerate() {
            *v += 2.0 * (0.9 * t as f64 + i as f64).sin();
        }
    }
    let panel = TimeSeriesPanel::new(g, values, None).unwrap();
    let mut ds = HierarchicalDataset::build(&panel, 3, 2, SplitFractions::default(), false).unwrap();
    let shared: Vec<Vec<f64>> = (0..ds.n_samples())
        .map(|s| ds.nodes.iter().flat_map(|d| d.inputs[s].iter().copied()).collect())
        .collect();
    for d in &mut ds.nodes {
        d.n_features = shared[0].len();
        d.inputs = shared.clone();
    }
    let g = ds.graph.clone();
    let n = g.n();
    let cfg = SharqConfig {
        joint: Some(JointConfig {
            max_sweeps: 2000,
            tol: 1e-14,
        }),
        ..exact_linear(LambdaSchedule::PerLevel(vec![2.0, 1.0]))
    };
    let state = train_sharq(&ds, &cfg).unwrap();
    let base = train_base(&ds, &cfg).unwrap();

    let lambdas = cfg.lambdas(&g);
    let losses = vec![DataLoss::MseMean; n];
    let objective = |forecasts: &[Vec<Forecast>]| {
        coherency_objective(&ds, forecasts, &lambdas, &cfg.outputs, &losses, ds.split.train.clone()).unwrap()
    };
    let as_forecasts = |per: &dyn Fn(usize) -> Vec<Vec<f64>>| -> Vec<Vec<Forecast>> {
        let all: Vec<Vec<Vec<f64>>> = (0..ds.n_samples()).map(per).collect();
        (0..n)
            .map(|i| {
                all.iter()
                    .map(|f| Forecast {
                        rows: 1,
                        horizon: ds.horizon,
                        values: f[i].clone(),
                    })
                    .collect()
            })
            .collect()
    };
    let j_sharq = objective(&as_forecasts(&|s| per_sample(&state.models, &ds, s)));

    let s_mat = build_summing_matrix(&g);
    let t = ds.split.train.clone();
    let cols = t.len() * ds.horizon;
    let stack = |f: &dyn Fn(usize, usize, usize) -> f64| {
        DMatrix::from_fn(n, cols, |i, c| f(i, t.start + c / ds.horizon, c % ds.horizon))
    };
    let y_hat = stack(&|i, s, j| base.models[i].forward_original(&ds.nodes[i].inputs[s]).unwrap().get(0, j));
    let y = stack(&|i, s, j| ds.nodes[i].targets[s][j]);
    let errors = BaseForecastErrors { residuals: &y_hat - &y, source: "train".into() };
    let maps: Vec<ReconciliationMap> = vec![
        ReconciliationMap::base(&s_mat),
        bottom_up_map(&s_mat),
        mint_map(&s_mat, None, MintWeighting::Ols).unwrap(),
        mint_map(&s_mat, Some(&errors), MintWeighting::Shrinkage(Shrinkage::Auto)).unwrap(),
        erm_map(&s_mat, &y_hat, &y, ErmConfig { ridge: 1.0, ..Default::default() }).unwrap(),
    ];
    // minimiser in forecast space: base forecasts times M^-1, M = I + sum_i lambda_i d_i d_i^T
    let mut m_mat = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        if lambdas[i] > 0.0 {
            let mut d = nalgebra::DVector::<f64>::zeros(n);
            d[i] = 1.0;
            for &(k, sg) in g.children(i) {
                d[k] = -(sg as f64);
            }
            m_mat += &d * d.transpose() * lambdas[i];
        }
    }
    let m_inv = m_mat.try_inverse().unwrap();
    let j_oracle = objective(&as_forecasts(&|s| {
        let f = per_sample(&base.models, &ds, s);
        (0..n).map(|i| (0..ds.horizon).map(|j| (0..n).map(|k| m_inv[(i, k)] * f[k][j]).sum()).collect()).collect()
    }));
    assert!((j_sharq - j_oracle).abs() <= 1e-6 * j_oracle.max(1.0), "{j_sharq} vs {j_oracle}");
    for map in &maps {
        let j = objective(&as_forecasts(&|s| {
            apply_map_horizons(map, &per_sample(&base.models, &ds, s)).unwrap()
        }));
        assert!(j_sharq <= j + 1e-6, "{}: {j_sharq} > {j}", map.method);
    }
}
