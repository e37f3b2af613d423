//! Command-line front end behind the `lsocv` binary.
//!
//! Every subcommand merges an optional JSON config file with command-line
//! flags (flags win), validates the result before any computation, and
//! writes its artifacts into `--out`. Errors are reported as one JSON object
//! on stderr; the exit code is 2 for configuration problems and 3 for
//! numerical failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::basis::{assemble_design, BasisSpec, DesignAssembly, ModelSpec, TermSpec};
use crate::correlation::{estimate_structure, CorrelationModel, StructureKind};
use crate::criteria::{evaluate, CriterionReport};
use crate::data::{parse_dataset, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::estimator::{
    bootstrap_ci, fit_design, leverage_diagnostics, BootstrapConfig, FitResult, WeightedDesign,
};
use crate::optimizer::{
    grid_search_design, log_grid, optimize_design, GridCriterion, OptimizerConfig, DEFAULT_GRID_CAP,
};
use crate::selection::{estimate_candidates, select_correlation_with, LambdaPolicy};
use crate::simulation::{
    efficiency_csv, function_csv, run_efficiency_experiment, run_function_estimation, run_selection_cell,
    selection_csv, table1_cells, CandidateSource, EfficiencyConfig, SimScenario,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "lsocv", version, about = "Penalized-spline marginal regression tuned by leave-subject-out CV")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at a fixed, optimized or grid-selected λ.
    Fit(RunArgs),
    /// Minimize LsoCV* over λ and write the optimizer trace.
    Tune(RunArgs),
    /// Choose a working correlation structure by exact LsoCV.
    Select(RunArgs),
    /// Run a Monte Carlo experiment.
    Simulate(RunArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with columns subject_id, y, optional time, and covariates.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Model term, e.g. `smooth:x2:knots=10:order=4:q=2`, `linear:x1`, `vc:cd4:knots=5`.
    #[arg(long = "term")]
    pub terms: Vec<String>,
    /// Working correlation, e.g. `ind`, `cs:rho=0.8`, `ar1:rho=0.5`, `exp:auto`.
    #[arg(long)]
    pub corr: Option<String>,
    /// `fixed=a,b,...`, `optimize` or `grid=lo:hi:n`.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub min_obs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Where to write the optimizer trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Drop the global intercept column.
    #[arg(long)]
    pub no_intercept: bool,
    /// Candidate structures for `select`, e.g. `ind,cs,ar1,un`.
    #[arg(long)]
    pub candidates: Option<String>,
    /// Tune λ per candidate in `select` instead of using λ = 0.
    #[arg(long)]
    pub optimize_lambda: bool,
    /// `table1`, `efficiency` or `function`.
    #[arg(long)]
    pub experiment: Option<String>,
    /// Table-1 cell, e.g. `n=100,rho=0.5,truth=CS`.
    #[arg(long = "cell")]
    pub cells: Vec<String>,
    /// `scenario` or `estimated` candidate parameters for `table1`.
    #[arg(long)]
    pub candidates_from: Option<String>,
    /// Cluster-bootstrap replicates for `fit`.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub subjects: Option<usize>,
}

/// Correlation setting in a config file: a structure object or the
/// command-line string form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrSetting {
    Model(CorrelationModel),
    Spec(String),
}

/// Merged run configuration. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub terms: Option<Vec<String>>,
    pub correlation: Option<CorrSetting>,
    pub lambda: Option<String>,
    pub min_obs: Option<usize>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub threads: Option<usize>,
    pub trace: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub intercept: Option<bool>,
    pub candidates: Option<String>,
    pub optimize_lambda: Option<bool>,
    pub experiment: Option<String>,
    pub cells: Option<Vec<String>>,
    pub candidates_from: Option<String>,
    pub bootstrap: Option<usize>,
    pub level: Option<f64>,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub subjects: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Overlays command-line flags on top of `self`.
    pub fn merge_flags(mut self, a: &RunArgs) -> Self {
        fn set<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        set(&mut self.input, &a.input);
        if !a.terms.is_empty() {
            self.terms = Some(a.terms.clone());
        }
        if let Some(c) = &a.corr {
            self.correlation = Some(CorrSetting::Spec(c.clone()));
        }
        set(&mut self.lambda, &a.lambda);
        set(&mut self.min_obs, &a.min_obs);
        set(&mut self.seed, &a.seed);
        set(&mut self.reps, &a.reps);
        set(&mut self.threads, &a.threads);
        set(&mut self.trace, &a.trace);
        set(&mut self.out, &a.out);
        if a.no_intercept {
            self.intercept = Some(false);
        }
        set(&mut self.candidates, &a.candidates);
        if a.optimize_lambda {
            self.optimize_lambda = Some(true);
        }
        set(&mut self.experiment, &a.experiment);
        if !a.cells.is_empty() {
            self.cells = Some(a.cells.clone());
        }
        set(&mut self.candidates_from, &a.candidates_from);
        set(&mut self.bootstrap, &a.bootstrap);
        set(&mut self.level, &a.level);
        set(&mut self.sigma, &a.sigma);
        set(&mut self.rho, &a.rho);
        set(&mut self.subjects, &a.subjects);
        self
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("lsocv-out"))
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    Ok(base.merge_flags(args))
}

fn parse_kv(parts: &[&str], allowed: &[&str], what: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("{what}: expected key=value, got `{p}`")))?;
        if !allowed.contains(&k) {
            return Err(Error::InvalidInput(format!("{what}: unknown key `{k}`")));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, what: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::InvalidInput(format!("{what}: `{key}={v}` is not a number")))
        })
        .transpose()
}

/// Parsed `--term` before the data fixes the basis domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TermRequest {
    pub kind: String,
    pub variable: String,
    pub knots: usize,
    pub order: usize,
    pub penalty_order: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

pub fn parse_term(s: &str) -> Result<TermRequest> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() < 2 || parts[1].is_empty() {
        return Err(Error::InvalidInput(format!("term `{s}`: expected kind:variable[:key=value...]")));
    }
    let kind = parts[0].to_ascii_lowercase();
    if !["smooth", "linear", "vc"].contains(&kind.as_str()) {
        return Err(Error::InvalidInput(format!("term `{s}`: kind must be smooth, linear or vc")));
    }
    let kv = parse_kv(&parts[2..], &["knots", "order", "q", "lower", "upper"], &format!("term `{s}`"))?;
    if kind == "linear" && !kv.is_empty() {
        return Err(Error::InvalidInput(format!("term `{s}`: linear terms take no options")));
    }
    let what = format!("term `{s}`");
    Ok(TermRequest {
        kind,
        variable: parts[1].to_string(),
        knots: num(&kv, "knots", &what)?.unwrap_or(10),
        order: num(&kv, "order", &what)?.unwrap_or(4),
        penalty_order: num(&kv, "q", &what)?.unwrap_or(2),
        lower: num(&kv, "lower", &what)?,
        upper: num(&kv, "upper", &what)?,
    })
}

fn basis_for(req: &TermRequest, values: &[f64]) -> Result<BasisSpec> {
    let mut spec = BasisSpec::for_data(values, req.order, req.knots, req.penalty_order, false)?;
    if let Some(l) = req.lower {
        spec.lower = l;
    }
    if let Some(u) = req.upper {
        spec.upper = u;
    }
    if req.penalty_order >= req.order || req.penalty_order == 0 {
        return Err(Error::InvalidPenaltyOrder {
            q: req.penalty_order,
            order: req.order,
        });
    }
    Ok(spec)
}

/// Turns term requests into a model; smooth domains default to the data range.
pub fn build_model(dataset: &LongitudinalDataset, terms: &[TermRequest], intercept: bool) -> Result<ModelSpec> {
    let mut out = Vec::with_capacity(terms.len());
    for t in terms {
        out.push(match t.kind.as_str() {
            "linear" => {
                dataset.covariate_index(&t.variable)?;
                TermSpec::Linear {
                    covariate: t.variable.clone(),
                }
            }
            "smooth" => TermSpec::Smooth {
                covariate: t.variable.clone(),
                basis: basis_for(t, &dataset.covariate_column(&t.variable)?)?,
            },
            _ => {
                let modifier = if t.variable == "1" {
                    None
                } else {
                    dataset.covariate_index(&t.variable)?;
                    Some(t.variable.clone())
                };
                TermSpec::VaryingCoefficient {
                    modifier,
                    basis: basis_for(t, &dataset.time_column()?)?,
                }
            }
        });
    }
    Ok(ModelSpec { intercept, terms: out })
}

/// A correlation request; `exp:auto` and bare `cs`/`ar1`/`un` are
/// estimated from working-independence residuals.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrRequest {
    Fixed(CorrelationModel),
    Estimate(StructureKind),
}

pub fn parse_corr(s: &str) -> Result<CorrRequest> {
    let parts: Vec<&str> = s.split(':').collect();
    let what = format!("correlation `{s}`");
    let name = parts[0].to_ascii_lowercase();
    if (parts.len() == 2 && parts[1] == "auto") || (parts.len() == 1 && name != "ind") {
        return Ok(CorrRequest::Estimate(StructureKind::parse(&name)?));
    }
    let kv = parse_kv(&parts[1..], &["rho", "alpha", "theta"], &what)?;
    let need = |k: &str| -> Result<f64> {
        num(&kv, k, &what)?.ok_or_else(|| Error::InvalidInput(format!("{what}: missing `{k}`")))
    };
    let model = match name.as_str() {
        "ind" | "independence" => CorrelationModel::Independence,
        "cs" => CorrelationModel::CompoundSymmetry { rho: need("rho")? },
        "ar" | "ar1" => CorrelationModel::Ar1 { rho: need("rho")? },
        "band1" => CorrelationModel::Banded { rho: need("rho")? },
        "exp" => CorrelationModel::ExponentialNugget {
            alpha: need("alpha")?,
            theta: need("theta")?,
        },
        other => return Err(Error::InvalidInput(format!("unknown correlation structure `{other}`"))),
    };
    Ok(CorrRequest::Fixed(model))
}

/// How λ is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaRequest {
    Fixed(Vec<f64>),
    Optimize,
    Grid { lo: f64, hi: f64, points: usize },
}

pub fn parse_lambda(s: &str) -> Result<LambdaRequest> {
    let bad = || Error::InvalidInput(format!("lambda `{s}`: expected fixed=a,b | optimize | grid=lo:hi:n"));
    if s == "optimize" {
        return Ok(LambdaRequest::Optimize);
    }
    if let Some(v) = s.strip_prefix("fixed=") {
        let vals = v
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(neg) = vals.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::NegativeLambda(*neg));
        }
        return Ok(LambdaRequest::Fixed(vals));
    }
    if let Some(v) = s.strip_prefix("grid=") {
        let p: Vec<&str> = v.split(':').collect();
        if p.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = p[0].parse().map_err(|_| bad())?;
        let hi: f64 = p[1].parse().map_err(|_| bad())?;
        let points: usize = p[2].parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && points >= 1) {
            return Err(bad());
        }
        return Ok(LambdaRequest::Grid { lo, hi, points });
    }
    Err(bad())
}

/// A Table-1 cell request.
pub fn parse_cell(s: &str) -> Result<(usize, f64, StructureKind)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let kv = parse_kv(&parts, &["n", "rho", "truth"], &format!("cell `{s}`"))?;
    let what = format!("cell `{s}`");
    let missing = |k: &str| Error::InvalidInput(format!("{what}: missing `{k}`"));
    let n = num(&kv, "n", &what)?.ok_or_else(|| missing("n"))?;
    let rho = num(&kv, "rho", &what)?.ok_or_else(|| missing("rho"))?;
    let truth = StructureKind::parse(kv.get("truth").ok_or_else(|| missing("truth"))?)?;
    if truth == StructureKind::ExponentialNugget {
        return Err(Error::InvalidInput(format!("{what}: truth must be IND, CS, AR or UN")));
    }
    Ok((n, rho, truth))
}

struct Prepared {
    dataset: LongitudinalDataset,
    dropped: usize,
    assembly: DesignAssembly,
    correlation: CorrRequest,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("--input is required".into()))?;
    let terms = cfg
        .terms
        .as_ref()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::InvalidInput("at least one --term is required".into()))?
        .iter()
        .map(|t| parse_term(t))
        .collect::<Result<Vec<_>>>()?;
    let correlation = match &cfg.correlation {
        None => CorrRequest::Fixed(CorrelationModel::Independence),
        Some(CorrSetting::Model(m)) => CorrRequest::Fixed(m.clone()),
        Some(CorrSetting::Spec(s)) => parse_corr(s)?,
    };
    let parsed = parse_dataset(input, cfg.min_obs.unwrap_or(1))?;
    if parsed.dropped_subjects > 0 {
        log::info!("dropped {} subjects below --min-obs", parsed.dropped_subjects);
    }
    let model = build_model(&parsed.dataset, &terms, cfg.intercept.unwrap_or(true))?;
    let assembly = assemble_design(&parsed.dataset, &model)?;
    Ok(Prepared {
        dataset: parsed.dataset,
        dropped: parsed.dropped_subjects,
        assembly,
        correlation,
    })
}

fn resolve_correlation(p: &Prepared) -> Result<CorrelationModel> {
    match &p.correlation {
        CorrRequest::Fixed(m) => Ok(m.clone()),
        CorrRequest::Estimate(kind) => {
            let mut found = estimate_candidates(&p.dataset, &p.assembly, &[*kind])?;
            found
                .pop()
                .ok_or_else(|| Error::EstimationUnderdetermined(format!("could not estimate {kind:?}")))
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn fitted_csv(dataset: &LongitudinalDataset, fit: &FitResult) -> String {
    let mut out = String::from("subject_id,obs,y,fitted,residual\n");
    let mut k = 0;
    for s in &dataset.subjects {
        for j in 0..s.y.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.id, j, s.y[j], fit.fitted[k], fit.residuals[k]
            ));
            k += 1;
        }
    }
    out
}

#[derive(Serialize)]
struct TermSummary {
    label: String,
    columns: [usize; 2],
}

fn fit_summary(p: &Prepared, fit: &FitResult, criteria: &CriterionReport, extra: serde_json::Value) -> serde_json::Value {
    let terms: Vec<TermSummary> = p
        .assembly
        .terms
        .iter()
        .map(|t| TermSummary {
            label: t.label.clone(),
            columns: [t.columns.start, t.columns.end],
        })
        .collect();
    let lev = leverage_diagnostics(fit);
    json!({
        "n_subjects": fit.n_subjects(),
        "n_obs": fit.n_obs(),
        "dropped_subjects": p.dropped,
        "correlation": fit.correlation,
        "lambda": fit.lambda,
        "trace_a": fit.trace_a,
        "ridge_applied": fit.ridge_applied,
        "terms": terms,
        "beta": fit.beta.as_slice(),
        "criteria": criteria,
        "leverage": {
            "mean": lev.mean_leverage,
            "max_to_mean": lev.max_to_mean,
            "warning": lev.warning,
        },
        "selection": extra,
    })
}

fn cmd_fit_like(cfg: &RunConfig, tune: bool) -> Result<()> {
    let lambda_req = match &cfg.lambda {
        Some(s) => parse_lambda(s)?,
        None => LambdaRequest::Optimize,
    };
    if tune && matches!(lambda_req, LambdaRequest::Fixed(_)) {
        return Err(Error::InvalidInput("tune needs --lambda optimize or grid=...".into()));
    }
    if let Some(b) = cfg.bootstrap {
        if b < 2 {
            return Err(Error::InvalidInput("--bootstrap needs at least 2 replicates".into()));
        }
    }
    let p = prepare(cfg)?;
    let m = p.assembly.n_penalties();
    if let LambdaRequest::Fixed(v) = &lambda_req {
        if v.len() != m {
            return Err(Error::DimensionMismatch(format!("{} lambda values for {m} penalized terms", v.len())));
        }
    }
    let corr = resolve_correlation(&p)?;
    let design = Arc::new(WeightedDesign::new(&p.dataset, &p.assembly, &corr)?);
    let out = cfg.out_dir();
    let (fit, selection) = match &lambda_req {
        LambdaRequest::Fixed(v) => (fit_design(&design, v)?, json!({"policy": "fixed"})),
        LambdaRequest::Optimize if m == 0 => (fit_design(&design, &[])?, json!({"policy": "none"})),
        LambdaRequest::Optimize => {
            let r = optimize_design(&design, &OptimizerConfig::default())?;
            let trace_csv = r.trace.to_csv();
            if let Some(path) = &cfg.trace {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                fs::write(path, &trace_csv)?;
            }
            let info = json!({
                "policy": "optimize",
                "eta": r.eta,
                "lambda": r.lambda,
                "lsocv_star": r.value,
                "iterations": r.trace.records.len() - 1,
                "termination": r.trace.termination,
                "boundary_hits": r.trace.boundary_hits,
                "boundary": r.trace.any_boundary(),
            });
            if tune {
                write_file(&out, "trace.csv", &trace_csv)?;
            }
            (r.fit, info)
        }
        LambdaRequest::Grid { lo, hi, points } => {
            let axis = log_grid(*lo, *hi, *points);
            let g = grid_search_design(&design, &vec![axis; m], GridCriterion::LsocvStar, DEFAULT_GRID_CAP)?;
            let info = json!({"policy": "grid", "lambda": g.lambda, "index": g.index, "lsocv_star": g.value});
            (fit_design(&design, &g.lambda)?, info)
        }
    };
    let criteria = evaluate(&fit, None)?;
    write_file(&out, "fit.json", &to_json(&fit_summary(&p, &fit, &criteria, selection.clone()))?)?;
    write_file(&out, "fitted.csv", &fitted_csv(&p.dataset, &fit))?;
    if tune {
        write_file(&out, "tune.json", &to_json(&selection)?)?;
    }
    if let Some(reps) = cfg.bootstrap {
        let bcfg = BootstrapConfig {
            replicates: reps,
            level: cfg.level.unwrap_or(0.95),
            grid_points: 100,
            seed: cfg.seed.unwrap_or(1),
        };
        let report = bootstrap_ci(&p.dataset, &p.assembly, &corr, &fit.lambda, &bcfg)?;
        let mut csv = String::from("term,x,lower,upper,width\n");
        for t in &report.terms {
            for j in 0..t.grid.len() {
                csv.push_str(&format!("{},{},{},{},{}\n", t.label, t.grid[j], t.lower[j], t.upper[j], t.width[j]));
            }
        }
        write_file(&out, "bootstrap.csv", &csv)?;
        write_file(
            &out,
            "bootstrap.json",
            &to_json(&json!({
                "level": report.level,
                "replicates_used": report.replicates_used,
                "dropped": report.dropped,
            }))?,
        )?;
    }
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    cmd_fit_like(cfg, false)
}

pub fn cmd_tune(cfg: &RunConfig) -> Result<()> {
    cmd_fit_like(cfg, true)
}

pub fn cmd_select(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.candidates.clone().unwrap_or_else(|| "ind,cs,ar1,un".into());
    let kinds = spec
        .split(',')
        .map(|s| StructureKind::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::InvalidInput("--candidates is empty".into()));
    }
    let policy = if cfg.optimize_lambda.unwrap_or(false) {
        LambdaPolicy::Optimize
    } else {
        LambdaPolicy::Zero
    };
    let p = prepare(cfg)?;
    let lambda = vec![0.0; p.assembly.n_penalties()];
    let base = crate::estimator::fit(&p.dataset, &p.assembly, &CorrelationModel::Independence, &lambda)?;
    let residuals = base.grouped_residuals();
    let times: Option<Vec<Vec<f64>>> = p.dataset.subjects.iter().map(|s| s.times.clone()).collect();
    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for k in &kinds {
        match estimate_structure(*k, &residuals, times.as_deref()) {
            Ok(m) => candidates.push(m),
            Err(e) => skipped.push(json!({"structure": format!("{k:?}"), "error": e.to_string()})),
        }
    }
    if candidates.is_empty() {
        return Err(Error::AllCandidatesFailed("no candidate parameters could be estimated".into()));
    }
    let report = select_correlation_with(&p.dataset, &p.assembly, &candidates, policy)?;
    let mut value = serde_json::to_value(&report)?;
    value["not_estimable"] = json!(skipped);
    write_file(&cfg.out_dir(), "selection.json", &to_json(&value)?)?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let experiment = cfg
        .experiment
        .clone()
        .ok_or_else(|| Error::InvalidInput("--experiment is required (table1, efficiency or function)".into()))?;
    let seed = cfg.seed.unwrap_or(1);
    let reps = cfg.reps.unwrap_or(200);
    if reps == 0 {
        return Err(Error::InvalidInput("--reps must be at least 1".into()));
    }
    let out = cfg.out_dir();
    let manifest_base = json!({
        "experiment": experiment,
        "seed": seed,
        "replicates": reps,
        "version": env!("CARGO_PKG_VERSION"),
    });
    match experiment.as_str() {
        "table1" => {
            let cells = match &cfg.cells {
                Some(c) => c.iter().map(|s| parse_cell(s)).collect::<Result<Vec<_>>>()?,
                None => table1_cells(),
            };
            let source = match cfg.candidates_from.as_deref() {
                None | Some("scenario") => CandidateSource::ScenarioValues,
                Some("estimated") => CandidateSource::Estimated,
                Some(o) => return Err(Error::InvalidInput(format!("--candidates-from `{o}`: use scenario or estimated"))),
            };
            for &(n, rho, truth) in &cells {
                SimScenario::selection_cell(n, rho, truth, seed, reps)?.validate()?;
            }
            let results = cells
                .iter()
                .map(|&(n, rho, k)| run_selection_cell(n, rho, k, seed, reps, source))
                .collect::<Result<Vec<_>>>()?;
            write_file(&out, "table1.csv", &selection_csv(&results))?;
            let mut manifest = manifest_base;
            manifest["candidate_source"] = json!(source);
            manifest["cells"] = json!(results);
            write_file(&out, "manifest.json", &to_json(&manifest)?)?;
        }
        "efficiency" => {
            let rho = cfg.rho.unwrap_or(0.8);
            let mut scenario = SimScenario::function_estimation(seed, reps);
            scenario.sigma = cfg.sigma.unwrap_or(1.0);
            scenario.n_subjects = cfg.subjects.unwrap_or(100);
            scenario.truth = CorrelationModel::CompoundSymmetry { rho };
            scenario.validate()?;
            let working = vec![
                ("truth".to_string(), scenario.truth.clone()),
                ("truncated".to_string(), CorrelationModel::Banded { rho }),
            ];
            let table = run_efficiency_experiment(&scenario, &working, &EfficiencyConfig::default())?;
            write_file(&out, "efficiency.csv", &efficiency_csv(&table))?;
            let mut manifest = manifest_base;
            manifest["scenario"] = json!(scenario);
            manifest["working"] = json!(working);
            manifest["median_ratio_v_star"] = json!({
                "truth": table.median_v_star_ratio("truth"),
                "truncated": table.median_v_star_ratio("truncated"),
            });
            manifest["failures"] = json!(table.failures);
            write_file(&out, "manifest.json", &to_json(&manifest)?)?;
        }
        "function" => {
            let mut scenario = SimScenario::function_estimation(seed, reps);
            scenario.sigma = cfg.sigma.unwrap_or(1.0);
            scenario.n_subjects = cfg.subjects.unwrap_or(100);
            if let Some(rho) = cfg.rho {
                scenario.truth = CorrelationModel::CompoundSymmetry { rho };
            }
            scenario.validate()?;
            let working = vec![
                ("W1".to_string(), CorrelationModel::Independence),
                ("W2".to_string(), scenario.truth.clone()),
            ];
            let table = run_function_estimation(&scenario, &working, 100)?;
            write_file(&out, "function.csv", &function_csv(&table))?;
            let mut manifest = manifest_base;
            manifest["scenario"] = json!(scenario);
            manifest["working"] = json!(working);
            manifest["replicates_used"] = json!(table.replicates_used);
            manifest["failures"] = json!(table.failures);
            write_file(&out, "manifest.json", &to_json(&manifest)?)?;
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown experiment `{other}` (table1, efficiency or function)"
            )))
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    if e.is_config_error() {
        "config"
    } else {
        "numerical"
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let (args, which) = match &cli.command {
        Command::Fit(a) => (a, "fit"),
        Command::Tune(a) => (a, "tune"),
        Command::Select(a) => (a, "select"),
        Command::Simulate(a) => (a, "simulate"),
    };
    let result = load_config(args).and_then(|cfg| {
        let threads = cfg.threads.unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| match which {
            "fit" => cmd_fit(&cfg),
            "tune" => cmd_tune(&cfg),
            "select" => cmd_select(&cfg),
            _ => cmd_simulate(&cfg),
        })
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if e.is_config_error() { EXIT_CONFIG } else { EXIT_NUMERICAL };
            let body = json!({
                "error": error_kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{body}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_strings() {
        let t = parse_term("smooth:x2:knots=10:order=4:q=2").unwrap();
        assert_eq!((t.kind.as_str(), t.variable.as_str(), t.knots, t.order, t.penalty_order), ("smooth", "x2", 10, 4, 2));
        assert_eq!(parse_term("linear:x1").unwrap().kind, "linear");
        assert!(parse_term("smooth").is_err());
        assert!(parse_term("spline:x").is_err());
        assert!(parse_term("smooth:x:knots=ten").is_err());
        assert!(parse_term("smooth:x:bogus=1").is_err());
    }

    #[test]
    fn corr_strings() {
        assert_eq!(
            parse_corr("cs:rho=0.8").unwrap(),
            CorrRequest::Fixed(CorrelationModel::CompoundSymmetry { rho: 0.8 })
        );
        assert_eq!(parse_corr("ind").unwrap(), CorrRequest::Fixed(CorrelationModel::Independence));
        assert_eq!(parse_corr("exp:auto").unwrap(), CorrRequest::Estimate(StructureKind::ExponentialNugget));
        assert_eq!(parse_corr("ar1").unwrap(), CorrRequest::Estimate(StructureKind::Ar1));
        assert!(parse_corr("cs:alpha=1").is_err());
        assert!(parse_corr("exp:alpha=0.4").is_err());
    }

    #[test]
    fn lambda_strings() {
        assert_eq!(parse_lambda("fixed=1,2.5").unwrap(), LambdaRequest::Fixed(vec![1.0, 2.5]));
        assert_eq!(parse_lambda("optimize").unwrap(), LambdaRequest::Optimize);
        assert_eq!(
            parse_lambda("grid=1e-3:1e3:7").unwrap(),
            LambdaRequest::Grid { lo: 1e-3, hi: 1e3, points: 7 }
        );
        assert!(matches!(parse_lambda("fixed=-1"), Err(Error::NegativeLambda(_))));
        assert!(parse_lambda("grid=0:1:3").is_err());
    }

    #[test]
    fn cell_strings() {
        let (n, rho, k) = parse_cell("n=100,rho=0.5,truth=CS").unwrap();
        assert_eq!((n, rho, k), (100, 0.5, StructureKind::CompoundSymmetry));
        assert!(parse_cell("n=100,rho=0.5").is_err());
    }

    #[test]
    fn config_merge_and_unknown_keys() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "reps": 10, "correlation": {"structure": "cs", "rho": 0.4}}"#).unwrap();
        assert_eq!(
            cfg.correlation,
            Some(CorrSetting::Model(CorrelationModel::CompoundSymmetry { rho: 0.4 }))
        );
        let args = RunArgs {
            seed: Some(9),
            ..Default::default()
        };
        let merged = cfg.merge_flags(&args);
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.reps, Some(10));
        assert!(RunConfig::from_json(r#"{"sead": 3}"#).is_err());
    }
}
