//! Pick a working correlation structure by exact LsoCV at λ = 0. Candidates
//! come either from moment estimates on working-independence residuals or
//! from fixed parameter values.

use lsocv::basis::assemble_design;
use lsocv::correlation::{CorrelationModel, StructureKind};
use lsocv::selection::{estimate_candidates, select_correlation, SelectionReport};
use lsocv::simulation::{additive_model, gen_dataset, unstructured_truth, SimScenario};

fn show(title: &str, report: &SelectionReport) {
    println!("{title}");
    for c in &report.candidates {
        println!("  {:<4} LsoCV = {:.5}", c.structure, c.lsocv.unwrap_or(f64::NAN));
    }
    println!("  chosen: {}", report.chosen_candidate().structure);
}

fn main() -> lsocv::Result<()> {
    let scenario = SimScenario::selection_cell(150, 0.8, StructureKind::Ar1, 5, 1)?;
    let sim = gen_dataset(&scenario, 0)?;
    let assembly = assemble_design(&sim.dataset, &additive_model(10))?;
    println!("truth: AR(0.8), n = 150, n_i = 5");

    let kinds = [
        StructureKind::Independence,
        StructureKind::CompoundSymmetry,
        StructureKind::Ar1,
        StructureKind::Unstructured,
    ];
    let estimated = estimate_candidates(&sim.dataset, &assembly, &kinds)?;
    show("moment-estimated candidates", &select_correlation(&sim.dataset, &assembly, &estimated)?);

    let fixed = vec![
        CorrelationModel::Independence,
        CorrelationModel::CompoundSymmetry { rho: 0.8 },
        CorrelationModel::Ar1 { rho: 0.8 },
        unstructured_truth(),
    ];
    show("fixed candidates", &select_correlation(&sim.dataset, &assembly, &fixed)?);
    Ok(())
}
