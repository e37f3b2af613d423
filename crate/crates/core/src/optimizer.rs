//! Newton minimization of LsoCV* over `η = log λ`, plus grid search.
//!
//! Derivatives come from implicit differentiation of the penalized normal
//! equations: with `S̃_k = λ_k S_k` and `Q = H⁻¹`,
//! `∂β/∂η_k = −Q S̃_k β` and `∂Q/∂η_k = −Q S̃_k Q`. The LsoCV* value is
//! `(E + 2T)/n` with `E = êᵀê` and `T = Σ_i ê_iᵀ A_ii ê_i`; writing
//! `a_i = X_iᵀê_i`, `b_i = X_iᵀW_i⁻¹ê_i` gives `T = Σ_i a_iᵀ Q b_i`, so every
//! derivative reduces to per-subject `p`-vectors and `p × p` products.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::DesignAssembly;
use crate::correlation::CorrelationModel;
use crate::criteria::{lsocv_exact, lsocv_star, v_star_value};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimator::{fit_design, FitResult, WeightedDesign};

pub const ETA_BOUNDS: (f64, f64) = (-25.0, 25.0);
pub const DEFAULT_GRID_CAP: usize = 100_000;
const MAX_STEP: f64 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct OptimizerConfig {
    /// Starting log-penalties; `None` uses the balanced-scale default.
    pub eta0: Option<Vec<f64>>,
    pub max_iter: usize,
    /// Convergence when `‖∇‖∞ ≤ grad_tol · |LsoCV*|`.
    pub grad_tol: f64,
    pub step_halvings_max: usize,
    /// Relative eigenvalue floor for the Newton Hessian.
    pub hessian_ridge_floor: f64,
    pub fd_step: f64,
    /// Points per dimension of a coarse LsoCV* scan over `η ∈ [−12, 12]`
    /// whose best point (or the default start, if lower) seeds Newton when
    /// `eta0` is unset. `0` disables the scan.
    pub start_scan: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta0: None,
            max_iter: 50,
            grad_tol: 1e-6,
            step_halvings_max: 20,
            hessian_ridge_floor: 1e-8,
            fd_step: 1e-4,
            start_scan: 7,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iter < 1 || !(self.grad_tol > 0.0) || !(self.hessian_ridge_floor > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::InvalidInput("optimizer tolerances must be positive and max_iter >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    /// No decrease possible and the predicted decrease is at rounding level.
    Flat,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub eta: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizerTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    /// Per penalty, whether `η` ended on a bound of [`ETA_BOUNDS`].
    pub boundary_hits: Vec<bool>,
}

impl OptimizerTrace {
    /// CSV with header `iteration,eta_1..eta_m,value,grad_norm,halvings`.
    pub fn to_csv(&self) -> String {
        let m = self.records.first().map_or(0, |r| r.eta.len());
        let mut out = String::from("iteration");
        for k in 1..=m {
            out.push_str(&format!(",eta_{k}"));
        }
        out.push_str(",value,grad_norm,halvings\n");
        for r in &self.records {
            out.push_str(&r.iteration.to_string());
            for e in &r.eta {
                out.push_str(&format!(",{e}"));
            }
            out.push_str(&format!(",{},{},{}\n", r.value, r.grad_norm, r.halvings));
        }
        out
    }

    pub fn any_boundary(&self) -> bool {
        self.boundary_hits.iter().any(|b| *b)
    }
}

/// LsoCV* with its gradient and Hessian in `η`.
#[derive(Debug, Clone)]
pub struct CriterionDerivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub fit: FitResult,
}

/// Columns `M_iᵀ v_i` for each subject, `p × n`.
fn subject_projections(design: &WeightedDesign, m: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let n = design.n_subjects();
    let mut out = DMatrix::zeros(m.ncols(), n);
    for i in 0..n {
        let (o, ni) = (design.offsets[i], design.sizes[i]);
        out.set_column(i, &m.rows(o, ni).tr_mul(&v.rows(o, ni)));
    }
    out
}

/// Frobenius inner product `Σ_ab A_ab B_ab`.
fn dot_all(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn lambda_of(eta: &[f64]) -> Vec<f64> {
    eta.iter().map(|e| e.exp()).collect()
}

/// LsoCV* value only.
pub fn lsocv_star_at(design: &Arc<WeightedDesign>, eta: &[f64]) -> Result<f64> {
    Ok(lsocv_star(&fit_design(design, &lambda_of(eta))?))
}

/// Exact analytic gradient and Hessian of LsoCV* with respect to `η`.
pub fn lsocv_star_derivatives(design: &Arc<WeightedDesign>, eta: &[f64]) -> Result<CriterionDerivatives> {
    let lambda = lambda_of(eta);
    let fit = fit_design(design, &lambda)?;
    let m = lambda.len();
    let n = design.n_subjects() as f64;
    let q = fit.factor.inverse();
    let q = 0.5 * (&q + q.transpose());
    let e = &fit.residuals;
    let x = &design.x;
    let wx = &design.winv_x;

    let s_tilde: Vec<DMatrix<f64>> = design
        .penalties
        .iter()
        .zip(&lambda)
        .map(|(s, l)| s * *l)
        .collect();

    // q_i = Q X_iᵀ ê_i, r_i = Q X_iᵀ W_i⁻¹ ê_i
    let qa = &q * subject_projections(design, x, e);
    let rb = &q * subject_projections(design, wx, e);
    let r_mat = &rb * qa.transpose();

    let g: Vec<DVector<f64>> = s_tilde.iter().map(|s| &q * (s * &fit.beta)).collect();
    let d: Vec<DVector<f64>> = g.iter().map(|gk| x * gk).collect();
    let c: Vec<DMatrix<f64>> = d.iter().map(|dk| subject_projections(design, x, dk)).collect();
    let ew: Vec<DMatrix<f64>> = d.iter().map(|dk| subject_projections(design, wx, dk)).collect();
    let s_vecs: Vec<DMatrix<f64>> = c.iter().map(|ck| &q * ck).collect();
    let t_vecs: Vec<DMatrix<f64>> = ew.iter().map(|ek| &q * ek).collect();

    let e_sq = e.norm_squared();
    let t_val: f64 = dot_all(&qa, &subject_projections(design, wx, e));

    let mut grad = DVector::zeros(m);
    for k in 0..m {
        let de = 2.0 * d[k].dot(e);
        let dt = dot_all(&c[k], &rb) + dot_all(&qa, &ew[k]) - dot_all(&s_tilde[k], &r_mat.transpose());
        grad[k] = (de + 2.0 * dt) / n;
    }

    let qs: Vec<DMatrix<f64>> = s_tilde.iter().map(|s| &q * s).collect();
    let s_rb: Vec<DMatrix<f64>> = s_tilde.iter().map(|s| s * &rb).collect();
    let s_qa: Vec<DMatrix<f64>> = s_tilde.iter().map(|s| s * &qa).collect();
    let mut hess = DMatrix::zeros(m, m);
    for k in 0..m {
        for l in k..m {
            let mut gkl = -(&q * (&s_tilde[l] * &g[k] + &s_tilde[k] * &g[l]));
            if k == l {
                gkl += &g[k];
            }
            let dkl = x * &gkl;
            let ckl = subject_projections(design, x, &dkl);
            let ekl = subject_projections(design, wx, &dkl);

            let de = 2.0 * dkl.dot(e) + 2.0 * d[k].dot(&d[l]);
            let mut dt = dot_all(&ckl, &rb) + dot_all(&qa, &ekl);
            dt += dot_all(&c[k], &t_vecs[l]) + dot_all(&c[l], &t_vecs[k]);
            dt -= dot_all(&s_vecs[k], &s_rb[l]) + dot_all(&s_qa[l], &t_vecs[k]);
            dt -= dot_all(&s_vecs[l], &s_rb[k]) + dot_all(&s_qa[k], &t_vecs[l]);
            // tr(S̃_l Q S̃_k R) + tr(S̃_k Q S̃_l R) − δ_kl tr(S̃_k R)
            let rt = r_mat.transpose();
            dt += dot_all(&(&s_tilde[l] * &qs[k]), &rt) + dot_all(&(&s_tilde[k] * &qs[l]), &rt);
            if k == l {
                dt -= dot_all(&s_tilde[k], &rt);
            }
            let v = (de + 2.0 * dt) / n;
            hess[(k, l)] = v;
            hess[(l, k)] = v;
        }
    }
    let value = (e_sq + 2.0 * t_val) / n;
    Ok(CriterionDerivatives {
        value,
        gradient: grad,
        hessian: hess,
        fit,
    })
}

/// Default start: `λ_k tr(S_k) = tr(XᵀX)/m`.
pub fn default_eta0(design: &WeightedDesign) -> Vec<f64> {
    let m = design.penalties.len();
    let txx: f64 = design.x.iter().map(|v| v * v).sum();
    design
        .penalties
        .iter()
        .map(|s| {
            let ts = s.trace();
            let l = if ts > 0.0 { txx / (m as f64 * ts) } else { 1.0 };
            l.ln().clamp(ETA_BOUNDS.0, ETA_BOUNDS.1)
        })
        .collect()
}

/// Result of [`optimize_design`].
#[derive(Debug, Clone)]
pub struct LambdaFit {
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub value: f64,
    pub trace: OptimizerTrace,
    pub fit: FitResult,
}

fn clamp_eta(eta: &mut [f64]) {
    for e in eta {
        *e = e.clamp(ETA_BOUNDS.0, ETA_BOUNDS.1);
    }
}

fn projected_gradient(eta: &[f64], grad: &DVector<f64>) -> DVector<f64> {
    let mut g = grad.clone();
    for k in 0..eta.len() {
        let at_lo = eta[k] <= ETA_BOUNDS.0 && grad[k] > 0.0;
        let at_hi = eta[k] >= ETA_BOUNDS.1 && grad[k] < 0.0;
        if at_lo || at_hi {
            g[k] = 0.0;
        }
    }
    g
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, free: &[bool], floor_rel: f64) -> DVector<f64> {
    let m = grad.len();
    let idx: Vec<usize> = (0..m).filter(|&k| free[k]).collect();
    let mut dir = DVector::zeros(m);
    if idx.is_empty() {
        return dir;
    }
    let hs = DMatrix::from_fn(idx.len(), idx.len(), |a, b| hess[(idx[a], idx[b])]);
    let gs = DVector::from_iterator(idx.len(), idx.iter().map(|&k| grad[k]));
    let eig = SymmetricEigen::new(hs);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let step = if max_abs > 0.0 && max_abs.is_finite() {
        let floor = floor_rel * max_abs;
        let inv = eig.eigenvalues.map(|v| 1.0 / v.abs().max(floor));
        let vt_g = eig.eigenvectors.tr_mul(&gs);
        -(&eig.eigenvectors * vt_g.component_mul(&inv))
    } else {
        -gs
    };
    let step = if step.iter().all(|v| v.is_finite()) { step } else { -DVector::from_iterator(idx.len(), idx.iter().map(|&k| grad[k])) };
    for (a, &k) in idx.iter().enumerate() {
        dir[k] = step[a];
    }
    let big = dir.amax();
    if big > MAX_STEP {
        dir *= MAX_STEP / big;
    }
    dir
}

const SCAN_RANGE: f64 = 12.0;
const SCAN_MAX_POINTS: usize = 512;

fn scan_start(design: &Arc<WeightedDesign>, eta0: Vec<f64>, per_dim: usize) -> Vec<f64> {
    let m = eta0.len();
    let mut k = per_dim;
    while k > 1 && k.checked_pow(m as u32).is_none_or(|t| t > SCAN_MAX_POINTS) {
        k -= 1;
    }
    if k < 2 {
        return eta0;
    }
    let axis: Vec<f64> = (0..k)
        .map(|i| -SCAN_RANGE + 2.0 * SCAN_RANGE * i as f64 / (k - 1) as f64)
        .collect();
    let dims = vec![k; m];
    let best = (0..k.pow(m as u32))
        .into_par_iter()
        .filter_map(|flat| {
            let eta: Vec<f64> = unravel(flat, &dims).into_iter().map(|i| axis[i]).collect();
            lsocv_star_at(design, &eta).ok().filter(|v| v.is_finite()).map(|v| (v, eta))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match (best, lsocv_star_at(design, &eta0)) {
        (Some((v, eta)), Ok(v0)) if v < v0 => eta,
        (Some((_, eta)), Err(_)) => eta,
        _ => eta0,
    }
}

/// Minimizes LsoCV* for a fixed working correlation.
pub fn optimize_design(design: &Arc<WeightedDesign>, config: &OptimizerConfig) -> Result<LambdaFit> {
    config.validate()?;
    let m = design.penalties.len();
    if m == 0 {
        return Err(Error::InvalidInput("model has no penalized terms".into()));
    }
    let mut eta = match &config.eta0 {
        Some(e) if e.len() == m => e.clone(),
        Some(e) => {
            return Err(Error::DimensionMismatch(format!("eta0 has {} entries for {m} penalties", e.len())))
        }
        None => scan_start(design, default_eta0(design), config.start_scan),
    };
    clamp_eta(&mut eta);
    let mut cur = lsocv_star_derivatives(design, &eta)?;
    let mut records = vec![IterationRecord {
        iteration: 0,
        eta: eta.clone(),
        value: cur.value,
        grad_norm: cur.gradient.amax(),
        halvings: 0,
    }];
    let mut termination = Termination::MaxIterations;
    for it in 1..=config.max_iter {
        let pg = projected_gradient(&eta, &cur.gradient);
        let scale = cur.value.abs().max(f64::MIN_POSITIVE);
        if pg.amax() <= config.grad_tol * scale {
            termination = Termination::Converged;
            break;
        }
        let free: Vec<bool> = pg.iter().map(|v| *v != 0.0).collect();
        let newton = newton_direction(&cur.hessian, &pg, &free, config.hessian_ridge_floor);
        let mut accepted = None;
        'dirs: for dir in [newton, -pg.clone()] {
            let mut step_scale = 1.0;
            for h in 0..=config.step_halvings_max {
                let mut trial: Vec<f64> = eta.iter().zip(dir.iter()).map(|(e, d)| e + step_scale * d).collect();
                clamp_eta(&mut trial);
                if let Ok(v) = lsocv_star_at(design, &trial) {
                    if v < cur.value {
                        accepted = Some((trial, h));
                        break 'dirs;
                    }
                }
                step_scale *= 0.5;
            }
            let predicted = pg.dot(&dir).abs();
            if predicted <= 1e-12 * (1.0 + cur.value.abs()) {
                break;
            }
        }
        match accepted {
            Some((trial, halvings)) => {
                eta = trial;
                cur = lsocv_star_derivatives(design, &eta)?;
                records.push(IterationRecord {
                    iteration: it,
                    eta: eta.clone(),
                    value: cur.value,
                    grad_norm: projected_gradient(&eta, &cur.gradient).amax(),
                    halvings,
                });
            }
            None => {
                let gnorm = pg.amax();
                let rel = gnorm / scale;
                if rel <= 1e-5 {
                    termination = Termination::Flat;
                    break;
                }
                return Err(Error::OptimizerStall {
                    iterations: it,
                    reason: format!(
                        "no step decreased LsoCV* at eta = {:?} (value {:.6e}, |grad| {:.3e})",
                        eta, cur.value, gnorm
                    ),
                });
            }
        }
    }
    if termination == Termination::MaxIterations {
        log::warn!("Newton iteration hit max_iter = {}", config.max_iter);
    }
    let boundary_hits: Vec<bool> = eta
        .iter()
        .map(|e| *e <= ETA_BOUNDS.0 || *e >= ETA_BOUNDS.1)
        .collect();
    Ok(LambdaFit {
        lambda: lambda_of(&eta),
        eta,
        value: cur.value,
        trace: OptimizerTrace {
            records,
            termination,
            boundary_hits,
        },
        fit: cur.fit,
    })
}

/// Chooses `λ̂` by Newton iteration on LsoCV*.
pub fn optimize_lambda(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    model: &CorrelationModel,
    config: &OptimizerConfig,
) -> Result<(Vec<f64>, OptimizerTrace)> {
    let design = Arc::new(WeightedDesign::new(dataset, assembly, model)?);
    let out = optimize_design(&design, config)?;
    Ok((out.lambda, out.trace))
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridCriterion {
    LsocvStar,
    LsocvExact,
    VStar,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub lambda: Vec<f64>,
    /// Per-dimension index of the minimizer.
    pub index: Vec<usize>,
    pub value: f64,
    /// Every evaluated value in row-major order (last dimension fastest);
    /// `NaN` where the fit failed.
    pub values: Vec<f64>,
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        idx[k] = flat % dims[k];
        flat /= dims[k];
    }
    idx
}

/// One criterion value at `λ`.
pub fn criterion_at(design: &Arc<WeightedDesign>, lambda: &[f64], criterion: GridCriterion) -> Result<f64> {
    match criterion {
        GridCriterion::LsocvStar => Ok(lsocv_star(&fit_design(design, lambda)?)),
        GridCriterion::LsocvExact => lsocv_exact(&fit_design(design, lambda)?),
        GridCriterion::VStar => {
            let (beta, chol) = design.coefficients(lambda)?;
            let ytwy = design.y.dot(&design.winv_y);
            let wrss = ytwy - 2.0 * beta.dot(&design.xtwy) + beta.dot(&(&design.xtwx * &beta));
            let qinv = chol.inverse();
            let trace = dot_all(&qinv, &design.xtwx);
            v_star_value(wrss, design.log_det_w, trace, design.n_obs())
        }
    }
}

/// Exhaustive search over the product of per-dimension λ values.
pub fn grid_search_design(
    design: &Arc<WeightedDesign>,
    grid: &[Vec<f64>],
    criterion: GridCriterion,
    cap: usize,
) -> Result<GridResult> {
    if grid.len() != design.penalties.len() {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} dimensions for {} penalties",
            grid.len(),
            design.penalties.len()
        )));
    }
    if grid.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("grid dimension is empty".into()));
    }
    let dims: Vec<usize> = grid.iter().map(Vec::len).collect();
    let points = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).unwrap_or(usize::MAX);
    if points > cap {
        return Err(Error::GridTooLarge { points, cap });
    }
    let values: Vec<f64> = (0..points)
        .into_par_iter()
        .map(|flat| {
            let idx = unravel(flat, &dims);
            let lambda: Vec<f64> = idx.iter().zip(grid).map(|(&i, g)| g[i]).collect();
            criterion_at(design, &lambda, criterion).unwrap_or(f64::NAN)
        })
        .collect();
    let (best, value) = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold((usize::MAX, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if best == usize::MAX {
        return Err(Error::SingularSystem);
    }
    let index = unravel(best, &dims);
    Ok(GridResult {
        lambda: index.iter().zip(grid).map(|(&i, g)| g[i]).collect(),
        index,
        value,
        values,
    })
}

pub fn grid_search(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    model: &CorrelationModel,
    grid: &[Vec<f64>],
    criterion: GridCriterion,
) -> Result<GridResult> {
    let design = Arc::new(WeightedDesign::new(dataset, assembly, model)?);
    grid_search_design(&design, grid, criterion, DEFAULT_GRID_CAP)
}
