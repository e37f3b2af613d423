//! A few cells of the structure-selection experiment, printed as CSV.
//! Pass a replicate count as the first argument (default 50).

use lsocv::correlation::StructureKind;
use lsocv::simulation::{run_selection_cell, selection_csv, CandidateSource};

fn main() -> lsocv::Result<()> {
    let reps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let cells = [
        (100, 0.5, StructureKind::CompoundSymmetry),
        (150, 0.5, StructureKind::Independence),
        (50, 0.8, StructureKind::Ar1),
    ];
    let results = cells
        .iter()
        .map(|&(n, rho, truth)| run_selection_cell(n, rho, truth, 2024, reps, CandidateSource::ScenarioValues))
        .collect::<lsocv::Result<Vec<_>>>()?;
    print!("{}", selection_csv(&results));
    Ok(())
}
