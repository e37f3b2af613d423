//! Choose two penalty parameters by Newton iteration on LsoCV* and compare
//! with an exhaustive grid.

use lsocv::basis::assemble_design;
use lsocv::correlation::CorrelationModel;
use lsocv::optimizer::{grid_search, log_grid, optimize_lambda, GridCriterion, OptimizerConfig};
use lsocv::simulation::{additive_model, gen_dataset, SimScenario};

fn show(v: &[f64]) -> String {
    v.iter().map(|l| format!("{l:.4e}")).collect::<Vec<_>>().join(", ")
}

fn main() -> lsocv::Result<()> {
    let sim = gen_dataset(&SimScenario::function_estimation(7, 1), 0)?;
    let assembly = assemble_design(&sim.dataset, &additive_model(10))?;
    let working = CorrelationModel::CompoundSymmetry { rho: 0.8 };

    let (lambda, trace) = optimize_lambda(&sim.dataset, &assembly, &working, &OptimizerConfig::default())?;
    print!("{}", trace.to_csv());
    println!("newton: lambda = {}, termination {:?}", show(&lambda), trace.termination);

    let axis = log_grid(1e-5, 1e5, 41);
    let g = grid_search(&sim.dataset, &assembly, &working, &[axis.clone(), axis], GridCriterion::LsocvStar)?;
    println!("grid:   lambda = {}, LsoCV* = {:.6}", show(&g.lambda), g.value);
    Ok(())
}
