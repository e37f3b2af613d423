use std::sync::Arc;

use lsocv::basis::assemble_design;
use lsocv::correlation::CorrelationModel;
use lsocv::Error;
use lsocv::estimator::WeightedDesign;
use lsocv::optimizer::{
    grid_search_design, log_grid, lsocv_star_at, lsocv_star_derivatives, optimize_design, GridCriterion,
    OptimizerConfig, Termination,
};
use lsocv::simulation::{additive_model, gen_dataset, SimScenario};

fn design(seed: u64, working: CorrelationModel) -> Arc<WeightedDesign> {
    let mut scenario = SimScenario::function_estimation(seed, 1);
    scenario.n_subjects = 40;
    let sim = gen_dataset(&scenario, 0).unwrap();
    let asm = assemble_design(&sim.dataset, &additive_model(6)).unwrap();
    Arc::new(WeightedDesign::new(&sim.dataset, &asm, &working).unwrap())
}

#[test]
fn hessian_matches_differenced_gradient() {
    let d = design(1, CorrelationModel::Ar1 { rho: 0.4 });
    let eta = [-1.0, 2.0];
    let base = lsocv_star_derivatives(&d, &eta).unwrap();
    let h = 1e-5;
    for k in 0..2 {
        let mut p = eta;
        let mut m = eta;
        p[k] += h;
        m[k] -= h;
        let gp = lsocv_star_derivatives(&d, &p).unwrap().gradient;
        let gm = lsocv_star_derivatives(&d, &m).unwrap().gradient;
        for j in 0..2 {
            let fd = (gp[j] - gm[j]) / (2.0 * h);
            assert!((base.hessian[(j, k)] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "H[{j},{k}]");
        }
        let fd = (lsocv_star_at(&d, &p).unwrap() - lsocv_star_at(&d, &m).unwrap()) / (2.0 * h);
        assert!((base.gradient[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
    }
}

#[test]
fn restart_at_optimum_stays_put() {
    let d = design(2, CorrelationModel::CompoundSymmetry { rho: 0.5 });
    let first = optimize_design(&d, &OptimizerConfig::default()).unwrap();
    assert_eq!(first.trace.termination, Termination::Converged);
    let again = optimize_design(
        &d,
        &OptimizerConfig {
            eta0: Some(first.eta.clone()),
            ..OptimizerConfig::default()
        },
    )
    .unwrap();
    assert!(again.trace.records.len() <= 3);
    for (a, b) in again.eta.iter().zip(&first.eta) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn accepted_steps_decrease_the_criterion() {
    let d = design(3, CorrelationModel::Independence);
    let cfg = OptimizerConfig {
        eta0: Some(vec![8.0, -8.0]),
        ..OptimizerConfig::default()
    };
    let r = optimize_design(&d, &cfg).unwrap();
    assert!(r.trace.records.len() > 1);
    assert!(r.trace.records.windows(2).all(|w| w[1].value < w[0].value));
}

#[test]
fn newton_lands_in_the_grid_minimum_cell() {
    let d = design(4, CorrelationModel::CompoundSymmetry { rho: 0.3 });
    let r = optimize_design(&d, &OptimizerConfig::default()).unwrap();
    let axis = log_grid(1e-5, 1e5, 21);
    let g = grid_search_design(&d, &[axis.clone(), axis], GridCriterion::LsocvStar, 1000).unwrap();
    let step = 10f64.ln() * 0.5;
    for k in 0..2 {
        let pos = (r.lambda[k].ln() - 1e-5f64.ln()) / step;
        assert!((pos.clamp(0.0, 20.0) - g.index[k] as f64).abs() <= 1.0);
    }
    assert!(r.value <= g.value + 1e-12);
}

#[test]
fn grid_edge_cases() {
    let d = design(5, CorrelationModel::Independence);
    let one = grid_search_design(&d, &[vec![0.5], vec![2.0]], GridCriterion::LsocvExact, 10).unwrap();
    assert_eq!(one.lambda, vec![0.5, 2.0]);
    let axis = log_grid(1e-2, 1e2, 11);
    assert!(matches!(
        grid_search_design(&d, &[axis.clone(), axis], GridCriterion::LsocvStar, 100),
        Err(Error::GridTooLarge { points: 121, cap: 100 })
    ));
}
