//! Synthetic longitudinal data and the Monte Carlo experiments.
//!
//! Data follow `y_ij = f₁(x_1ij) + f₂(x_2ij) + ε_ij` with Gaussian errors
//! `ε_i = σ L_i z_i`, `L_i L_iᵀ = R_i`. Replicate `r` of a scenario draws
//! from its own ChaCha stream `(seed, r)`, so results do not depend on how
//! replicates are scheduled across threads.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::{assemble_design, BasisSpec, DesignAssembly, ModelSpec, TermSpec};
use crate::correlation::{
    working_block, working_blocks, working_blocks_allow_indefinite, CorrelationModel, StructureKind,
};
use crate::criteria::{lsocv_star, oracle_scores};
use crate::data::{LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::estimator::{fit_design, WeightedDesign};
use crate::optimizer::{
    grid_search_design, log_grid, optimize_design, GridCriterion, OptimizerConfig, DEFAULT_GRID_CAP,
};
use crate::selection::{estimate_candidates, select_correlation};

pub const DOMAIN: (f64, f64) = (-2.0, 2.0);

/// `f₁(x) = √(z(1−z)) sin(2π(1+2^{−3/5})/(1+z^{−3/5}))`, `z = (x+2)/4`.
pub fn f1(x: f64) -> f64 {
    let z = (x + 2.0) / 4.0;
    let c = 1.0 + 2f64.powf(-0.6);
    (z * (1.0 - z)).sqrt() * (2.0 * PI * c / (1.0 + z.powf(-0.6))).sin()
}

/// `f₂(x) = sin(8z−4) + 2 exp(−256 (z−0.5)²)`, `z = (x+2)/4`.
pub fn f2(x: f64) -> f64 {
    let z = (x + 2.0) / 4.0;
    (8.0 * z - 4.0).sin() + 2.0 * (-256.0 * (z - 0.5).powi(2)).exp()
}

/// How the two covariates vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDesign {
    /// `x₁` drawn once per subject, `x₂` per observation.
    SubjectLevelX1,
    /// Both drawn per observation.
    ObservationLevel,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimScenario {
    pub n_subjects: usize,
    pub cluster_size: usize,
    pub sigma: f64,
    pub truth: CorrelationModel,
    pub design: CovariateDesign,
    pub seed: u64,
    pub replicates: usize,
}

/// The 5 × 5 unstructured truth: `ρ₁₂ = ρ₂₃ = 0.8`, `ρ₁₃ = 0.3`, zero elsewhere.
pub fn unstructured_truth() -> CorrelationModel {
    let mut m = DMatrix::identity(5, 5);
    for (i, j, v) in [(0, 1, 0.8), (1, 2, 0.8), (0, 2, 0.3)] {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    CorrelationModel::unstructured(&m)
}

impl SimScenario {
    /// `n = 100`, `n_i = 5`, `σ = 1`, CS(0.8), subject-level `x₁`.
    pub fn function_estimation(seed: u64, replicates: usize) -> Self {
        SimScenario {
            n_subjects: 100,
            cluster_size: 5,
            sigma: 1.0,
            truth: CorrelationModel::CompoundSymmetry { rho: 0.8 },
            design: CovariateDesign::SubjectLevelX1,
            seed,
            replicates,
        }
    }

    /// A structure-selection cell: `n_i = 5`, `σ = 1`, observation-level covariates.
    pub fn selection_cell(n_subjects: usize, rho: f64, truth: StructureKind, seed: u64, replicates: usize) -> Result<Self> {
        let truth = match truth {
            StructureKind::Independence => CorrelationModel::Independence,
            StructureKind::CompoundSymmetry => CorrelationModel::CompoundSymmetry { rho },
            StructureKind::Ar1 => CorrelationModel::Ar1 { rho },
            StructureKind::Unstructured => unstructured_truth(),
            StructureKind::ExponentialNugget => {
                return Err(Error::InvalidInput("selection cells use IND, CS, AR or UN truths".into()))
            }
        };
        Ok(SimScenario {
            n_subjects,
            cluster_size: 5,
            sigma: 1.0,
            truth,
            design: CovariateDesign::ObservationLevel,
            seed,
            replicates,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 || self.cluster_size < 1 {
            return Err(Error::InvalidInput("scenario needs n >= 2 subjects and n_i >= 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        working_block(&self.truth, self.cluster_size, None)?;
        Ok(())
    }
}

/// One simulated dataset with its truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: LongitudinalDataset,
    pub mu: DVector<f64>,
    /// `Σ_i = σ² R_i` per subject.
    pub sigma: Vec<DMatrix<f64>>,
}

pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Draws replicate `replicate` of `scenario`.
pub fn gen_dataset(scenario: &SimScenario, replicate: usize) -> Result<SimData> {
    scenario.validate()?;
    let ni = scenario.cluster_size;
    let block = working_block(&scenario.truth, ni, None)?;
    let chol = block
        .cholesky_factor()
        .ok_or_else(|| Error::InvalidCorrelation("true correlation must be positive definite".into()))?;
    let cov = &block.matrix * scenario.sigma.powi(2);
    let mut rng = replicate_rng(scenario.seed, replicate);
    let (a, b) = DOMAIN;
    let mut subjects = Vec::with_capacity(scenario.n_subjects);
    let mut mu = Vec::with_capacity(scenario.n_subjects * ni);
    for i in 0..scenario.n_subjects {
        let x1_subject: f64 = rng.random_range(a..b);
        let mut cov_m = DMatrix::zeros(ni, 2);
        for j in 0..ni {
            cov_m[(j, 0)] = match scenario.design {
                CovariateDesign::SubjectLevelX1 => x1_subject,
                CovariateDesign::ObservationLevel => {
                    if j == 0 {
                        x1_subject
                    } else {
                        rng.random_range(a..b)
                    }
                }
            };
            cov_m[(j, 1)] = rng.random_range(a..b);
        }
        let z = DVector::from_fn(ni, |_, _| StandardNormal.sample(&mut rng));
        let eps = &chol * z * scenario.sigma;
        let m_i = DVector::from_fn(ni, |j, _| f1(cov_m[(j, 0)]) + f2(cov_m[(j, 1)]));
        mu.extend(m_i.iter().copied());
        subjects.push(Subject {
            id: format!("{}", i + 1),
            y: m_i + eps,
            times: None,
            covariates: cov_m,
        });
    }
    let dataset = LongitudinalDataset::new(vec!["x1".into(), "x2".into()], subjects)?;
    Ok(SimData {
        dataset,
        mu: DVector::from_vec(mu),
        sigma: vec![cov; scenario.n_subjects],
    })
}

/// Additive cubic smooths of `x1` and `x2` on `[−2, 2]` with a global intercept.
pub fn additive_model(interior_knots: usize) -> ModelSpec {
    let (a, b) = DOMAIN;
    ModelSpec::additive(vec![
        TermSpec::Smooth {
            covariate: "x1".into(),
            basis: BasisSpec::cubic(interior_knots, a, b),
        },
        TermSpec::Smooth {
            covariate: "x2".into(),
            basis: BasisSpec::cubic(interior_knots, a, b),
        },
    ])
}

/// Evaluates the true loss `L(λ)` cheaply from precomputed cross products.
struct LossEvaluator {
    xtx: DMatrix<f64>,
    xtmu: DVector<f64>,
    mumu: f64,
    n: f64,
}

impl LossEvaluator {
    fn new(design: &WeightedDesign, mu: &DVector<f64>) -> Self {
        LossEvaluator {
            xtx: design.x.tr_mul(&design.x),
            xtmu: design.x.tr_mul(mu),
            mumu: mu.norm_squared(),
            n: design.n_subjects() as f64,
        }
    }

    fn loss(&self, design: &WeightedDesign, lambda: &[f64]) -> Result<f64> {
        let (beta, _) = design.coefficients(lambda)?;
        let v = beta.dot(&(&self.xtx * &beta)) - 2.0 * beta.dot(&self.xtmu) + self.mumu;
        Ok(v.max(0.0) / self.n)
    }
}

/// Grid settings for the oracle and V* searches.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyConfig {
    pub interior_knots: usize,
    pub grid_points: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    /// Accept symmetric working matrices with negative eigenvalues (the
    /// lag-one truncation of a strong correlation is one).
    pub allow_indefinite: bool,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        EfficiencyConfig {
            interior_knots: 10,
            grid_points: 121,
            grid_lo: 1e-5,
            grid_hi: 1e5,
            allow_indefinite: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyRecord {
    pub replicate: usize,
    pub working: String,
    pub loss_lsocv_star: f64,
    pub loss_v_star: f64,
    pub loss_opt: f64,
    pub ratio_v_star: f64,
    pub ratio_opt: f64,
    pub min_lsocv_star: f64,
    /// Newton stalled and λ_LsoCV* came from the grid instead.
    pub grid_fallback: bool,
    pub working_positive_definite: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub label: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyTable {
    pub records: Vec<EfficiencyRecord>,
    pub failures: Vec<ReplicateFailure>,
}

impl EfficiencyTable {
    /// Median of `L(λ_V*)/L(λ_LsoCV*)` for one working model.
    pub fn median_v_star_ratio(&self, working: &str) -> Option<f64> {
        let mut r: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.working == working)
            .map(|r| r.ratio_v_star)
            .collect();
        if r.is_empty() {
            return None;
        }
        r.sort_by(|a, b| a.total_cmp(b));
        Some(crate::estimator::quantile_sorted(&r, 0.5))
    }
}

fn efficiency_one(
    sim: &SimData,
    assembly: &DesignAssembly,
    label: &str,
    model: &CorrelationModel,
    config: &EfficiencyConfig,
    replicate: usize,
) -> Result<EfficiencyRecord> {
    let blocks = if config.allow_indefinite {
        working_blocks_allow_indefinite(&sim.dataset, model)?
    } else {
        working_blocks(&sim.dataset, model)?
    };
    let positive_definite = blocks.iter().all(|b| b.positive_definite);
    let design = Arc::new(WeightedDesign::from_parts(
        assembly.x.clone(),
        sim.dataset.response(),
        blocks,
        assembly.penalties.clone(),
        model.clone(),
    )?);
    let m = design.penalties.len();
    let axis = log_grid(config.grid_lo, config.grid_hi, config.grid_points);
    let grid = vec![axis.clone(); m];
    let (lambda_ls, min_ls, fallback) = match optimize_design(&design, &OptimizerConfig::default()) {
        Ok(out) => (out.lambda, out.value, false),
        Err(Error::OptimizerStall { .. }) => {
            let g = grid_search_design(&design, &grid, GridCriterion::LsocvStar, DEFAULT_GRID_CAP)?;
            (g.lambda, g.value, true)
        }
        Err(e) => return Err(e),
    };
    let v = grid_search_design(&design, &grid, GridCriterion::VStar, DEFAULT_GRID_CAP)?;
    let evaluator = LossEvaluator::new(&design, &sim.mu);
    let dims = vec![axis.len(); m];
    let points: usize = dims.iter().product();
    let loss_opt = (0..points)
        .map(|flat| {
            let mut rest = flat;
            let mut lambda = vec![0.0; m];
            for k in (0..m).rev() {
                lambda[k] = axis[rest % dims[k]];
                rest /= dims[k];
            }
            evaluator.loss(&design, &lambda).unwrap_or(f64::INFINITY)
        })
        .fold(f64::INFINITY, f64::min);
    let loss_ls = evaluator.loss(&design, &lambda_ls)?;
    let loss_v = evaluator.loss(&design, &v.lambda)?;
    Ok(EfficiencyRecord {
        replicate,
        working: label.to_string(),
        loss_lsocv_star: loss_ls,
        loss_v_star: loss_v,
        loss_opt,
        ratio_v_star: loss_v / loss_ls,
        ratio_opt: loss_opt / loss_ls,
        min_lsocv_star: min_ls,
        grid_fallback: fallback,
        working_positive_definite: positive_definite,
    })
}

/// Loss ratios of V* and the oracle grid minimizer against LsoCV* for each
/// labelled working model.
pub fn run_efficiency_experiment(
    scenario: &SimScenario,
    working: &[(String, CorrelationModel)],
    config: &EfficiencyConfig,
) -> Result<EfficiencyTable> {
    scenario.validate()?;
    let assembly_model = additive_model(config.interior_knots);
    let outcomes: Vec<Vec<std::result::Result<EfficiencyRecord, ReplicateFailure>>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|rep| {
            let fail = |label: &str, e: Error| ReplicateFailure {
                replicate: rep,
                label: label.to_string(),
                error: e.to_string(),
            };
            let sim = match gen_dataset(scenario, rep) {
                Ok(s) => s,
                Err(e) => return vec![Err(fail("data", e))],
            };
            let assembly = match assemble_design(&sim.dataset, &assembly_model) {
                Ok(a) => a,
                Err(e) => return vec![Err(fail("design", e))],
            };
            working
                .iter()
                .map(|(label, model)| {
                    efficiency_one(&sim, &assembly, label, model, config, rep).map_err(|e| fail(label, e))
                })
                .collect()
        })
        .collect();
    let mut table = EfficiencyTable {
        records: vec![],
        failures: vec![],
    };
    for r in outcomes.into_iter().flatten() {
        match r {
            Ok(rec) => table.records.push(rec),
            Err(f) => table.failures.push(f),
        }
    }
    Ok(table)
}

/// Where the candidate correlation parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    /// Method of moments from working-independence residuals.
    #[default]
    Estimated,
    /// The scenario's `ρ` for CS and AR and the fixed UN truth matrix.
    ScenarioValues,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionCell {
    pub n_subjects: usize,
    pub rho: f64,
    pub truth: String,
    pub replicates: usize,
    pub failures: usize,
    /// Candidate labels in table order.
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
}

impl SelectionCell {
    /// Selection percentage of `label` among successful replicates.
    pub fn percent(&self, label: &str) -> f64 {
        let ok = self.replicates - self.failures;
        match self.labels.iter().position(|l| l == label) {
            Some(i) if ok > 0 => 100.0 * self.counts[i] as f64 / ok as f64,
            _ => 0.0,
        }
    }
}

pub const SELECTION_KINDS: [StructureKind; 4] = [
    StructureKind::Independence,
    StructureKind::CompoundSymmetry,
    StructureKind::Ar1,
    StructureKind::Unstructured,
];

fn kind_label(kind: StructureKind) -> &'static str {
    match kind {
        StructureKind::Independence => "IND",
        StructureKind::CompoundSymmetry => "CS",
        StructureKind::Ar1 => "AR",
        StructureKind::Unstructured => "UN",
        StructureKind::ExponentialNugget => "EXP",
    }
}

fn select_one(sim: &SimData, model: &ModelSpec, rho: f64, source: CandidateSource) -> Result<usize> {
    let assembly = assemble_design(&sim.dataset, model)?;
    let candidates = match source {
        CandidateSource::Estimated => estimate_candidates(&sim.dataset, &assembly, &SELECTION_KINDS)?,
        CandidateSource::ScenarioValues => vec![
            CorrelationModel::Independence,
            CorrelationModel::CompoundSymmetry { rho },
            CorrelationModel::Ar1 { rho },
            unstructured_truth(),
        ],
    };
    let report = select_correlation(&sim.dataset, &assembly, &candidates)?;
    let chosen = report.chosen_candidate().structure.as_str();
    SELECTION_KINDS
        .iter()
        .position(|k| kind_label(*k) == chosen)
        .ok_or_else(|| Error::InvalidInput(format!("unexpected structure {chosen}")))
}

/// Selection frequencies for one (n, ρ, truth) cell with `λ = 0`.
pub fn run_selection_cell(
    n_subjects: usize,
    rho: f64,
    truth: StructureKind,
    seed: u64,
    replicates: usize,
    source: CandidateSource,
) -> Result<SelectionCell> {
    let scenario = SimScenario::selection_cell(n_subjects, rho, truth, seed, replicates)?;
    scenario.validate()?;
    let model = additive_model(10);
    let picks: Vec<Option<usize>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let out = gen_dataset(&scenario, rep).and_then(|sim| select_one(&sim, &model, rho, source));
            if let Err(e) = &out {
                log::warn!("replicate {rep} failed: {e}");
            }
            out.ok()
        })
        .collect();
    let mut counts = vec![0; SELECTION_KINDS.len()];
    for p in picks.iter().flatten() {
        counts[*p] += 1;
    }
    Ok(SelectionCell {
        n_subjects,
        rho,
        truth: kind_label(truth).to_string(),
        replicates,
        failures: picks.iter().filter(|p| p.is_none()).count(),
        labels: SELECTION_KINDS.iter().map(|k| kind_label(*k).to_string()).collect(),
        counts,
    })
}

/// The full grid: n ∈ {50, 100, 150}, ρ ∈ {0.3, 0.5, 0.8}, four truths.
pub fn table1_cells() -> Vec<(usize, f64, StructureKind)> {
    let mut out = vec![];
    for n in [50, 100, 150] {
        for rho in [0.3, 0.5, 0.8] {
            for k in SELECTION_KINDS {
                out.push((n, rho, k));
            }
        }
    }
    out
}

pub fn run_selection_experiment(
    cells: &[(usize, f64, StructureKind)],
    seed: u64,
    replicates: usize,
    source: CandidateSource,
) -> Result<Vec<SelectionCell>> {
    cells
        .iter()
        .map(|&(n, rho, k)| run_selection_cell(n, rho, k, seed, replicates, source))
        .collect()
}

/// Per-gridpoint Monte Carlo summaries of centered function estimates.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionSummary {
    pub working: String,
    pub term: String,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl FunctionSummary {
    pub fn bias(&self) -> Vec<f64> {
        self.mean.iter().zip(&self.truth).map(|(m, t)| m - t).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionTable {
    pub grid: Vec<f64>,
    pub summaries: Vec<FunctionSummary>,
    /// Per term: standard deviation across replicates of the difference
    /// between the first two working models' estimates.
    pub paired_diff_sd: Vec<(String, Vec<f64>)>,
    pub replicates_used: usize,
    pub failures: Vec<ReplicateFailure>,
}

impl FunctionTable {
    pub fn summary(&self, working: &str, term: &str) -> Option<&FunctionSummary> {
        self.summaries.iter().find(|s| s.working == working && s.term == term)
    }
}

fn centered(v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|x| x - m).collect()
}

/// Estimates f₁ and f₂ under each working model with LsoCV*-tuned `λ` and
/// summarizes bias and variance on an equally spaced grid over `[−2, 2]`.
pub fn run_function_estimation(
    scenario: &SimScenario,
    working: &[(String, CorrelationModel)],
    grid_points: usize,
) -> Result<FunctionTable> {
    scenario.validate()?;
    if working.is_empty() || grid_points < 2 {
        return Err(Error::InvalidInput("need a working model and at least 2 grid points".into()));
    }
    let (a, b) = DOMAIN;
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| a + (b - a) * i as f64 / (grid_points - 1) as f64)
        .collect();
    let terms = [("s(x1)", f1 as fn(f64) -> f64), ("s(x2)", f2)];
    let model = additive_model(10);
    // per replicate: [working][term] -> curve
    let runs: Vec<std::result::Result<Vec<Vec<Vec<f64>>>, ReplicateFailure>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|rep| {
            let fail = |label: &str, e: Error| ReplicateFailure {
                replicate: rep,
                label: label.to_string(),
                error: e.to_string(),
            };
            let sim = gen_dataset(scenario, rep).map_err(|e| fail("data", e))?;
            let assembly = assemble_design(&sim.dataset, &model).map_err(|e| fail("design", e))?;
            working
                .iter()
                .map(|(label, corr)| {
                    let run = || -> Result<Vec<Vec<f64>>> {
                        let design = Arc::new(WeightedDesign::new(&sim.dataset, &assembly, corr)?);
                        let fit = match optimize_design(&design, &OptimizerConfig::default()) {
                            Ok(out) => out.fit,
                            Err(Error::OptimizerStall { .. }) => {
                                let axis = log_grid(1e-5, 1e5, 61);
                                let g = grid_search_design(
                                    &design,
                                    &vec![axis; design.penalties.len()],
                                    GridCriterion::LsocvStar,
                                    DEFAULT_GRID_CAP,
                                )?;
                                fit_design(&design, &g.lambda)?
                            }
                            Err(e) => return Err(e),
                        };
                        terms
                            .iter()
                            .map(|(t, _)| {
                                let idx = assembly
                                    .term_index(t)
                                    .ok_or_else(|| Error::InvalidInput(format!("missing term {t}")))?;
                                Ok(centered(assembly.term_curve(idx, &fit.beta, &grid)?))
                            })
                            .collect()
                    };
                    run().map_err(|e| fail(label, e))
                })
                .collect()
        })
        .collect();
    let mut failures = vec![];
    let mut ok = vec![];
    for r in runs {
        match r {
            Ok(c) => ok.push(c),
            Err(f) => failures.push(f),
        }
    }
    if ok.is_empty() {
        return Err(Error::InvalidInput("every replicate failed".into()));
    }
    let reps = ok.len() as f64;
    let mut summaries = vec![];
    for (w, (label, _)) in working.iter().enumerate() {
        for (t, (name, f)) in terms.iter().enumerate() {
            let truth = centered(grid.iter().map(|&x| f(x)).collect());
            let mean: Vec<f64> = (0..grid_points)
                .map(|g| ok.iter().map(|c| c[w][t][g]).sum::<f64>() / reps)
                .collect();
            let variance: Vec<f64> = (0..grid_points)
                .map(|g| {
                    let ss: f64 = ok.iter().map(|c| (c[w][t][g] - mean[g]).powi(2)).sum();
                    if reps > 1.0 {
                        ss / (reps - 1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            summaries.push(FunctionSummary {
                working: label.clone(),
                term: name.to_string(),
                truth,
                mean,
                variance,
            });
        }
    }
    let mut paired_diff_sd = vec![];
    if working.len() >= 2 && reps > 1.0 {
        for (t, (name, _)) in terms.iter().enumerate() {
            let sd: Vec<f64> = (0..grid_points)
                .map(|g| {
                    let d: Vec<f64> = ok.iter().map(|c| c[0][t][g] - c[1][t][g]).collect();
                    let m = d.iter().sum::<f64>() / reps;
                    (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1.0)).sqrt()
                })
                .collect();
            paired_diff_sd.push((name.to_string(), sd));
        }
    }
    Ok(FunctionTable {
        grid,
        summaries,
        paired_diff_sd,
        replicates_used: ok.len(),
        failures,
    })
}

/// Monte Carlo check of `E[U − εᵀε/n] = R` at a fixed `λ`: returns
/// `(mean of U − εᵀε/n, its standard error, R)`.
pub fn u_unbiasedness(scenario: &SimScenario, model: &ModelSpec, working: &CorrelationModel, lambda: &[f64]) -> Result<(f64, f64, f64)> {
    scenario.validate()?;
    let base = gen_dataset(scenario, 0)?;
    let assembly = assemble_design(&base.dataset, model)?;
    let design = Arc::new(WeightedDesign::new(&base.dataset, &assembly, working)?);
    let risk = oracle_scores(&fit_design(&design, lambda)?, &base.mu, &base.sigma)?.risk;
    let chol = working_block(&scenario.truth, scenario.cluster_size, None)?
        .cholesky_factor()
        .ok_or_else(|| Error::InvalidCorrelation("true correlation must be positive definite".into()))?;
    let n = scenario.n_subjects as f64;
    let diffs: Vec<f64> = (0..scenario.replicates)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            // covariates stay fixed; only the errors are redrawn
            let mut rng = replicate_rng(scenario.seed ^ 0x5eed, rep);
            let mut eps = DVector::zeros(base.mu.len());
            for (i, &o) in design.offsets.iter().enumerate() {
                let ni = design.sizes[i];
                let z = DVector::from_fn(ni, |_, _| StandardNormal.sample(&mut rng));
                eps.rows_mut(o, ni).copy_from(&(&chol * z * scenario.sigma));
            }
            let d = design.with_response(&base.mu + &eps)?;
            let fit = fit_design(&Arc::new(d), lambda)?;
            let s = oracle_scores(&fit, &base.mu, &base.sigma)?;
            Ok(s.u_score - eps.norm_squared() / n)
        })
        .collect::<Result<_>>()?;
    let r = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / r;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    Ok((mean, sd / r.sqrt(), risk))
}

/// LsoCV* at `λ` for a simulated dataset.
pub fn lsocv_star_for(sim: &SimData, assembly: &DesignAssembly, working: &CorrelationModel, lambda: &[f64]) -> Result<f64> {
    let design = Arc::new(WeightedDesign::new(&sim.dataset, assembly, working)?);
    Ok(lsocv_star(&fit_design(&design, lambda)?))
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Table-1 layout: `n,rho,truth,replicates,failures,IND,CS,AR,UN` (percent).
pub fn selection_csv(cells: &[SelectionCell]) -> String {
    let mut out = String::from("n,rho,truth,replicates,failures,IND,CS,AR,UN\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{},{}", c.n_subjects, c.rho, c.truth, c.replicates, c.failures));
        for l in ["IND", "CS", "AR", "UN"] {
            out.push_str(&format!(",{:.1}", c.percent(l)));
        }
        out.push('\n');
    }
    out
}

/// One row per (replicate, working model).
pub fn efficiency_csv(table: &EfficiencyTable) -> String {
    let mut out = String::from(
        "replicate,working,loss_lsocv_star,loss_v_star,loss_opt,ratio_v_star,ratio_opt,min_lsocv_star,grid_fallback,working_pd\n",
    );
    for r in &table.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.replicate,
            r.working,
            fmt_f(r.loss_lsocv_star),
            fmt_f(r.loss_v_star),
            fmt_f(r.loss_opt),
            fmt_f(r.ratio_v_star),
            fmt_f(r.ratio_opt),
            fmt_f(r.min_lsocv_star),
            r.grid_fallback,
            r.working_positive_definite
        ));
    }
    out
}

/// Long format: `working,term,x,truth,mean,bias,variance`.
pub fn function_csv(table: &FunctionTable) -> String {
    let mut out = String::from("working,term,x,truth,mean,bias,variance\n");
    for s in &table.summaries {
        let bias = s.bias();
        for (g, x) in table.grid.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.working, s.term, x, s.truth[g], s.mean[g], bias[g], s.variance[g]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn true_functions() {
        // z = 0.5: sqrt(0.25) sin(2π(1+2^{-0.6})/(1+2^{0.6}))
        let c = 1.0 + 2f64.powf(-0.6);
        let expected = 0.5 * (2.0 * PI * c / (1.0 + 2f64.powf(0.6))).sin();
        assert_abs_diff_eq!(f1(0.0), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(f2(0.0), 2.0, epsilon = 1e-15);
        assert_eq!(f1(-2.0), 0.0);
        assert_abs_diff_eq!(f1(2.0), 0.0, epsilon = 1e-15);
        for i in 0..=400 {
            let x = -2.0 + i as f64 * 0.01;
            assert!(f1(x).is_finite() && f2(x).is_finite());
        }
    }

    #[test]
    fn zero_noise_gives_exact_means() {
        let mut s = SimScenario::function_estimation(3, 1);
        s.sigma = 0.0;
        let sim = gen_dataset(&s, 0).unwrap();
        assert_eq!(sim.dataset.response(), sim.mu);
        for subj in &sim.dataset.subjects {
            let x1 = subj.covariates.column(0);
            assert!(x1.iter().all(|v| *v == x1[0]));
            for j in 0..5 {
                let m = f1(subj.covariates[(j, 0)]) + f2(subj.covariates[(j, 1)]);
                assert_eq!(subj.y[j], m);
            }
        }
    }

    #[test]
    fn replicates_are_reproducible_and_distinct() {
        let s = SimScenario::selection_cell(20, 0.5, StructureKind::Ar1, 11, 2).unwrap();
        let a = gen_dataset(&s, 1).unwrap();
        let b = gen_dataset(&s, 1).unwrap();
        let c = gen_dataset(&s, 0).unwrap();
        assert_eq!(a.dataset.response(), b.dataset.response());
        assert_ne!(a.dataset.response(), c.dataset.response());
        assert_eq!(a.sigma[0], DMatrix::from_fn(5, 5, |i, j| 0.5f64.powi(i.abs_diff(j) as i32)));
    }

    #[test]
    fn unstructured_truth_is_positive_definite() {
        let w = working_block(&unstructured_truth(), 5, None).unwrap();
        assert_eq!(w.matrix[(0, 2)], 0.3);
        assert_eq!(w.matrix[(1, 3)], 0.0);
    }

    #[test]
    fn csv_layouts() {
        let cell = SelectionCell {
            n_subjects: 50,
            rho: 0.3,
            truth: "CS".into(),
            replicates: 4,
            failures: 0,
            labels: vec!["IND".into(), "CS".into(), "AR".into(), "UN".into()],
            counts: vec![1, 3, 0, 0],
        };
        assert_eq!(
            selection_csv(&[cell]),
            "n,rho,truth,replicates,failures,IND,CS,AR,UN\n50,0.3,CS,4,0,25.0,75.0,0.0,0.0\n"
        );
    }
}
