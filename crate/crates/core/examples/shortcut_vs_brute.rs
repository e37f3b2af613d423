//! The per-subject shortcut for leave-subject-out CV against literal refits.

use std::time::Instant;

use lsocv::basis::assemble_design;
use lsocv::correlation::CorrelationModel;
use lsocv::criteria::{lsocv_brute, lsocv_exact, lsocv_star};
use lsocv::estimator::fit;
use lsocv::simulation::{additive_model, gen_dataset, SimScenario};

fn main() -> lsocv::Result<()> {
    let sim = gen_dataset(&SimScenario::function_estimation(3, 1), 0)?;
    let assembly = assemble_design(&sim.dataset, &additive_model(10))?;
    let working = CorrelationModel::Ar1 { rho: 0.6 };
    for lambda in [[1e-3, 1e-3], [1.0, 0.01], [100.0, 1.0]] {
        let t = Instant::now();
        let f = fit(&sim.dataset, &assembly, &working, &lambda)?;
        let exact = lsocv_exact(&f)?;
        let t_exact = t.elapsed();
        let t = Instant::now();
        let brute = lsocv_brute(&sim.dataset, &assembly, &working, &lambda)?;
        let t_brute = t.elapsed();
        println!(
            "lambda {lambda:?}: shortcut {exact:.10} ({t_exact:?}), refits {brute:.10} ({t_brute:?}), rel diff {:.1e}, LsoCV* {:.6}",
            (exact - brute).abs() / brute,
            lsocv_star(&f)
        );
    }
    Ok(())
}
