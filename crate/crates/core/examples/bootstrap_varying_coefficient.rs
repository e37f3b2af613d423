//! Varying-coefficient model `y = β₀(t) + x·β₁(t) + ε` with a cluster
//! bootstrap band for each coefficient function.

use lsocv::basis::{assemble_design, BasisSpec, ModelSpec, TermSpec};
use lsocv::correlation::CorrelationModel;
use lsocv::data::{LongitudinalDataset, Subject};
use lsocv::estimator::{bootstrap_ci, BootstrapConfig};
use lsocv::optimizer::{optimize_lambda, OptimizerConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> lsocv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let working = CorrelationModel::Ar1 { rho: 0.5 };
    let subjects = (0..120)
        .map(|i| {
            let ni = rng.random_range(4..=8);
            let mut t: Vec<f64> = (0..ni).map(|_| rng.random_range(0.0..1.0)).collect();
            t.sort_by(|a, b| a.total_cmp(b));
            let x: f64 = rng.sample(StandardNormal);
            let l = working.matrix(ni, None).unwrap().cholesky().unwrap().l();
            let e = l * DVector::from_fn(ni, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(ni, |j, _| (2.0 * t[j]).sin() + x * (1.0 - t[j]).powi(2) + e[j]);
            Subject {
                id: format!("s{i}"),
                y,
                times: Some(t),
                covariates: DMatrix::from_element(ni, 1, x),
            }
        })
        .collect();
    let dataset = LongitudinalDataset::new(vec!["x".into()], subjects)?;
    let basis = BasisSpec::cubic(6, 0.0, 1.0);
    let model = ModelSpec::without_intercept(vec![
        TermSpec::VaryingCoefficient { modifier: None, basis: basis.clone() },
        TermSpec::VaryingCoefficient { modifier: Some("x".into()), basis },
    ]);
    let assembly = assemble_design(&dataset, &model)?;
    let (lambda, _) = optimize_lambda(&dataset, &assembly, &working, &OptimizerConfig::default())?;
    println!("lambda = {lambda:.3?}");

    let config = BootstrapConfig {
        replicates: 200,
        grid_points: 5,
        ..BootstrapConfig::default()
    };
    let report = bootstrap_ci(&dataset, &assembly, &working, &lambda, &config)?;
    for band in &report.terms {
        println!("{}", band.label);
        for j in 0..band.grid.len() {
            println!("  t = {:.2}: [{:.3}, {:.3}]", band.grid[j], band.lower[j], band.upper[j]);
        }
    }
    Ok(())
}
