//! Working correlation blocks `W_i` and plug-in correlation estimates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};

/// Largest accepted condition number of a working block.
pub const MAX_CONDITION: f64 = 1e10;

/// Working correlation structure. Serialized as flat JSON, e.g.
/// `{"structure": "cs", "rho": 0.8}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", deny_unknown_fields)]
pub enum CorrelationModel {
    #[serde(rename = "ind")]
    Independence,
    #[serde(rename = "cs")]
    CompoundSymmetry { rho: f64 },
    #[serde(rename = "ar1")]
    Ar1 { rho: f64 },
    /// Common `n × n` correlation shared by every subject.
    #[serde(rename = "un")]
    Unstructured { matrix: Vec<Vec<f64>> },
    /// `γ(u) = α + (1 − α) exp(−θ u)` in the time lag `u`.
    #[serde(rename = "exp")]
    ExponentialNugget { alpha: f64, theta: f64 },
    /// `ρ` at lag one, zero at larger lags.
    #[serde(rename = "band1")]
    Banded { rho: f64 },
}

impl CorrelationModel {
    pub fn short_name(&self) -> &'static str {
        match self {
            CorrelationModel::Independence => "IND",
            CorrelationModel::CompoundSymmetry { .. } => "CS",
            CorrelationModel::Ar1 { .. } => "AR",
            CorrelationModel::Unstructured { .. } => "UN",
            CorrelationModel::ExponentialNugget { .. } => "EXP",
            CorrelationModel::Banded { .. } => "BAND1",
        }
    }

    pub fn unstructured(m: &DMatrix<f64>) -> Self {
        CorrelationModel::Unstructured {
            matrix: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    /// Dense block for a subject with `n` observations at `times`.
    pub fn matrix(&self, n: usize, times: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let bad = |msg: String| Err(Error::InvalidCorrelation(msg));
        match self {
            CorrelationModel::Independence => Ok(DMatrix::identity(n, n)),
            CorrelationModel::CompoundSymmetry { rho } => {
                let lower = if n > 1 { -1.0 / (n as f64 - 1.0) } else { f64::NEG_INFINITY };
                if !(*rho > lower && *rho < 1.0) {
                    return bad(format!("compound symmetry rho = {rho} outside ({lower}, 1) for n_i = {n}"));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { *rho }))
            }
            CorrelationModel::Ar1 { rho } => {
                if !(rho.abs() < 1.0) {
                    return bad(format!("AR(1) rho = {rho} must satisfy |rho| < 1"));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32)))
            }
            CorrelationModel::Banded { rho } => {
                if !(rho.abs() < 1.0) {
                    return bad(format!("banded rho = {rho} must satisfy |rho| < 1"));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
                    0 => 1.0,
                    1 => *rho,
                    _ => 0.0,
                }))
            }
            CorrelationModel::Unstructured { matrix } => {
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return bad(format!(
                        "unstructured matrix is {}x{}, subject has {n} observations",
                        matrix.len(),
                        matrix.first().map_or(0, Vec::len)
                    ));
                }
                let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
                for i in 0..n {
                    if (m[(i, i)] - 1.0).abs() > 1e-12 {
                        return bad("unstructured matrix must have unit diagonal".into());
                    }
                    for j in 0..i {
                        if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                            return bad("unstructured matrix must be symmetric".into());
                        }
                    }
                }
                Ok(m)
            }
            CorrelationModel::ExponentialNugget { alpha, theta } => {
                if !(*alpha > 0.0 && *alpha < 1.0 && *theta > 0.0 && theta.is_finite()) {
                    return bad(format!("exponential-nugget needs 0 < alpha < 1, theta > 0; got ({alpha}, {theta})"));
                }
                let t = times.ok_or_else(|| {
                    Error::InvalidCorrelation("exponential-nugget correlation needs observation times".into())
                })?;
                if t.len() != n {
                    return Err(Error::DimensionMismatch(format!("{} times for {n} observations", t.len())));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        1.0
                    } else {
                        exponential_nugget(*alpha, *theta, (t[i] - t[j]).abs())
                    }
                }))
            }
        }
    }
}

/// `γ(u; α, θ) = α + (1 − α) e^{−θu}`.
pub fn exponential_nugget(alpha: f64, theta: f64, lag: f64) -> f64 {
    alpha + (1.0 - alpha) * (-theta * lag).exp()
}

#[derive(Debug, Clone)]
enum BlockFactor {
    Identity,
    Cholesky(Cholesky<f64, Dyn>),
    /// Explicit inverse of a symmetric nonsingular block that is not
    /// positive definite.
    Inverse(DMatrix<f64>),
}

/// A subject's working correlation with its cached factorization.
#[derive(Debug, Clone)]
pub struct WorkingBlock {
    pub matrix: DMatrix<f64>,
    factor: BlockFactor,
    /// `log |det W_i|`.
    pub log_det: f64,
    pub positive_definite: bool,
}

impl WorkingBlock {
    /// Wraps an arbitrary symmetric positive definite block, e.g. a known
    /// covariance used as a working matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || (&matrix - matrix.transpose()).amax() > 1e-12 * matrix.amax().max(1.0) {
            return Err(Error::InvalidCorrelation("working block must be square and symmetric".into()));
        }
        let (condition, values, _) = eigen_condition(&matrix);
        if condition > MAX_CONDITION || values.min() <= 0.0 {
            return Err(Error::NearSingularCorrelation { condition });
        }
        let chol = Cholesky::new(matrix.clone()).ok_or(Error::NearSingularCorrelation { condition })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(WorkingBlock {
            matrix,
            factor: BlockFactor::Cholesky(chol),
            log_det,
            positive_definite: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `W_i^{-1} B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            BlockFactor::Identity => b.clone(),
            BlockFactor::Cholesky(c) => c.solve(b),
            BlockFactor::Inverse(m) => m * b,
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            BlockFactor::Identity => b.clone(),
            BlockFactor::Cholesky(c) => c.solve(b),
            BlockFactor::Inverse(m) => m * b,
        }
    }

    /// Lower Cholesky factor `L` with `W_i = L Lᵀ`; `None` for an
    /// indefinite block.
    pub fn cholesky_factor(&self) -> Option<DMatrix<f64>> {
        match &self.factor {
            BlockFactor::Identity => Some(DMatrix::identity(self.dim(), self.dim())),
            BlockFactor::Cholesky(c) => Some(c.l()),
            BlockFactor::Inverse(_) => None,
        }
    }

    /// Explicit inverse; only for small dense checks.
    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.factor {
            BlockFactor::Identity => DMatrix::identity(self.dim(), self.dim()),
            BlockFactor::Cholesky(c) => c.inverse(),
            BlockFactor::Inverse(m) => m.clone(),
        }
    }
}

fn eigen_condition(matrix: &DMatrix<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(matrix.clone());
    let lo = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let hi = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    (condition, eig.eigenvalues, eig.eigenvectors)
}

/// Builds `W_i` for a subject with `n` observations, rejecting blocks that
/// are not positive definite or whose condition number exceeds [`MAX_CONDITION`].
pub fn working_block(model: &CorrelationModel, n: usize, times: Option<&[f64]>) -> Result<WorkingBlock> {
    let matrix = model.matrix(n, times)?;
    if matches!(model, CorrelationModel::Independence) {
        return Ok(WorkingBlock {
            factor: BlockFactor::Identity,
            matrix,
            log_det: 0.0,
            positive_definite: true,
        });
    }
    WorkingBlock::from_matrix(matrix)
}

/// Like [`working_block`] but accepts a symmetric block with negative
/// eigenvalues, as long as it is well conditioned in absolute value. Meant
/// for misspecified working matrices that are not correlation matrices.
pub fn working_block_allow_indefinite(
    model: &CorrelationModel,
    n: usize,
    times: Option<&[f64]>,
) -> Result<WorkingBlock> {
    let matrix = model.matrix(n, times)?;
    let (condition, values, vectors) = eigen_condition(&matrix);
    if condition > MAX_CONDITION {
        return Err(Error::NearSingularCorrelation { condition });
    }
    if values.min() > 0.0 {
        return working_block(model, n, times);
    }
    let inv = &vectors * DMatrix::from_diagonal(&values.map(|v| 1.0 / v)) * vectors.transpose();
    Ok(WorkingBlock {
        matrix,
        factor: BlockFactor::Inverse(0.5 * (&inv + inv.transpose())),
        log_det: values.iter().map(|v| v.abs().ln()).sum(),
        positive_definite: false,
    })
}

/// One block per subject of the dataset.
pub fn working_blocks(dataset: &LongitudinalDataset, model: &CorrelationModel) -> Result<Vec<WorkingBlock>> {
    dataset
        .subjects
        .iter()
        .map(|s| working_block(model, s.n_obs(), s.times.as_deref()))
        .collect()
}

pub fn working_blocks_allow_indefinite(
    dataset: &LongitudinalDataset,
    model: &CorrelationModel,
) -> Result<Vec<WorkingBlock>> {
    dataset
        .subjects
        .iter()
        .map(|s| working_block_allow_indefinite(model, s.n_obs(), s.times.as_deref()))
        .collect()
}

/// `W_i^{-1} B` for a block.
pub fn solve_block(block: &WorkingBlock, b: &DMatrix<f64>) -> DMatrix<f64> {
    block.solve(b)
}

/// Structure families whose parameters can be estimated from residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureKind {
    Independence,
    CompoundSymmetry,
    Ar1,
    Unstructured,
    ExponentialNugget,
}

impl StructureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ind" | "independence" => Ok(StructureKind::Independence),
            "cs" => Ok(StructureKind::CompoundSymmetry),
            "ar" | "ar1" => Ok(StructureKind::Ar1),
            "un" => Ok(StructureKind::Unstructured),
            "exp" => Ok(StructureKind::ExponentialNugget),
            other => Err(Error::InvalidInput(format!("unknown correlation structure `{other}`"))),
        }
    }
}

fn pooled_variance(residuals: &[DVector<f64>]) -> Result<f64> {
    let n: usize = residuals.iter().map(|r| r.len()).sum();
    let ss: f64 = residuals.iter().map(|r| r.norm_squared()).sum();
    if n == 0 || ss <= 0.0 {
        return Err(Error::EstimationUnderdetermined("residuals are all zero".into()));
    }
    Ok(ss / n as f64)
}

/// Method-of-moments estimate of a structure from working-independence
/// residuals: mean off-diagonal correlation (CS), mean lag-one correlation
/// (AR), or the full empirical correlation (UN, equal cluster sizes).
pub fn estimate_structure(
    kind: StructureKind,
    residuals: &[DVector<f64>],
    times: Option<&[Vec<f64>]>,
) -> Result<CorrelationModel> {
    match kind {
        StructureKind::Independence => Ok(CorrelationModel::Independence),
        StructureKind::CompoundSymmetry => {
            let s2 = pooled_variance(residuals)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for r in residuals {
                let total = r.sum();
                sum += total * total - r.norm_squared();
                count += r.len() * (r.len().saturating_sub(1));
            }
            if count == 0 {
                return Err(Error::EstimationUnderdetermined("no within-subject pairs".into()));
            }
            Ok(CorrelationModel::CompoundSymmetry {
                rho: sum / count as f64 / s2,
            })
        }
        StructureKind::Ar1 => {
            let s2 = pooled_variance(residuals)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for r in residuals {
                for j in 1..r.len() {
                    sum += r[j] * r[j - 1];
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::EstimationUnderdetermined("no lag-one pairs".into()));
            }
            Ok(CorrelationModel::Ar1 {
                rho: sum / count as f64 / s2,
            })
        }
        StructureKind::Unstructured => {
            let m = residuals
                .first()
                .map(|r| r.len())
                .ok_or_else(|| Error::EstimationUnderdetermined("no subjects".into()))?;
            if residuals.iter().any(|r| r.len() != m) {
                return Err(Error::InvalidCorrelation(
                    "unstructured correlation needs equal cluster sizes".into(),
                ));
            }
            let mut cross = DMatrix::<f64>::zeros(m, m);
            for r in residuals {
                cross += r * r.transpose();
            }
            let d: Vec<f64> = (0..m).map(|j| cross[(j, j)].sqrt()).collect();
            if d.iter().any(|&v| v <= 0.0) {
                return Err(Error::EstimationUnderdetermined("a time slot has zero residual variance".into()));
            }
            let c = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { cross[(i, j)] / (d[i] * d[j]) });
            Ok(CorrelationModel::unstructured(&c))
        }
        StructureKind::ExponentialNugget => {
            let t = times.ok_or_else(|| Error::MissingCovariate("time".into()))?;
            let fit = estimate_exponential_params(residuals, t)?;
            Ok(CorrelationModel::ExponentialNugget {
                alpha: fit.alpha,
                theta: fit.theta,
            })
        }
    }
}

/// Empirical residual correlation pooled over pairs in one lag bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LagBin {
    pub lag: f64,
    pub correlation: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentialFit {
    pub alpha: f64,
    pub theta: f64,
    /// Set when α or θ ended on the edge of its search range.
    pub boundary_hit: bool,
    pub loss: f64,
    pub bins: Vec<LagBin>,
}

const ALPHA_EDGE: f64 = 1e-6;
const MAX_LAG_BINS: f64 = 50.0;
const LOG_THETA_RANGE: (f64, f64) = (-9.0, 9.0);

/// Bins within-subject residual products by time lag. The bin width is
/// the median gap between consecutive distinct observed lags, but at least
/// `1/MAX_LAG_BINS` of the largest lag so continuous times still pool pairs.
pub fn lag_bins(residuals: &[DVector<f64>], times: &[Vec<f64>]) -> Result<Vec<LagBin>> {
    if residuals.len() != times.len() {
        return Err(Error::DimensionMismatch("residual and time groups differ".into()));
    }
    let s2 = pooled_variance(residuals)?;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (r, t) in residuals.iter().zip(times) {
        if r.len() != t.len() {
            return Err(Error::DimensionMismatch("residual and time lengths differ".into()));
        }
        for j in 0..r.len() {
            for k in j + 1..r.len() {
                let u = (t[j] - t[k]).abs();
                if u > 0.0 {
                    pairs.push((u, r[j] * r[k]));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EstimationUnderdetermined("no within-subject pairs with positive lag".into()));
    }
    let mut lags: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    lags.sort_by(|a, b| a.total_cmp(b));
    let scale = lags[lags.len() - 1];
    lags.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * scale);
    if lags.len() < 2 {
        return Err(Error::EstimationUnderdetermined("fewer than 2 usable lag bins".into()));
    }
    let mut gaps: Vec<f64> = lags.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(|a, b| a.total_cmp(b));
    let width = gaps[gaps.len() / 2].max(scale / MAX_LAG_BINS);
    let mut acc: std::collections::BTreeMap<i64, (f64, f64, usize)> = Default::default();
    for (u, prod) in pairs {
        let e = acc.entry((u / width).round() as i64).or_insert((0.0, 0.0, 0));
        e.0 += u;
        e.1 += prod;
        e.2 += 1;
    }
    let bins: Vec<LagBin> = acc
        .into_values()
        .map(|(su, sp, c)| LagBin {
            lag: su / c as f64,
            correlation: sp / c as f64 / s2,
            pairs: c,
        })
        .collect();
    if bins.len() < 2 {
        return Err(Error::EstimationUnderdetermined("fewer than 2 usable lag bins".into()));
    }
    Ok(bins)
}

/// Weighted least squares fit of `γ(u; α, θ)` to binned correlations, with
/// weights equal to the pair counts. `α` is profiled out in closed form
/// (γ is linear in α) and clamped to `(0, 1)`; `log θ` is searched on a grid
/// and refined by golden section.
pub fn fit_exponential_to_bins(bins: &[LagBin]) -> Result<ExponentialFit> {
    if bins.len() < 2 {
        return Err(Error::EstimationUnderdetermined("fewer than 2 usable lag bins".into()));
    }
    let profile = |log_theta: f64| -> (f64, f64, bool) {
        let theta = log_theta.exp();
        let (mut num, mut den) = (0.0, 0.0);
        for b in bins {
            let e = (-theta * b.lag).exp();
            let w = b.pairs as f64;
            num += w * (1.0 - e) * (b.correlation - e);
            den += w * (1.0 - e) * (1.0 - e);
        }
        let raw = if den > 0.0 { num / den } else { 0.0 };
        let alpha = raw.clamp(ALPHA_EDGE, 1.0 - ALPHA_EDGE);
        let clamped = alpha != raw;
        let loss: f64 = bins
            .iter()
            .map(|b| {
                let d = b.correlation - exponential_nugget(alpha, theta, b.lag);
                b.pairs as f64 * d * d
            })
            .sum();
        (loss, alpha, clamped)
    };
    let (lo, hi) = LOG_THETA_RANGE;
    let steps = 360;
    let h = (hi - lo) / steps as f64;
    let mut best = (f64::INFINITY, 0usize);
    for s in 0..=steps {
        let (l, _, _) = profile(lo + h * s as f64);
        if l < best.0 {
            best = (l, s);
        }
    }
    let (mut a, mut b) = (
        lo + h * best.1.saturating_sub(1) as f64,
        (lo + h * (best.1 + 1) as f64).min(hi),
    );
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (profile(c).0, profile(d).0);
    while b - a > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = profile(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = profile(d).0;
        }
    }
    let log_theta = 0.5 * (a + b);
    let (loss, alpha, clamped) = profile(log_theta);
    let at_edge = log_theta <= lo + 2.0 * h || log_theta >= hi - 2.0 * h;
    Ok(ExponentialFit {
        alpha,
        theta: log_theta.exp(),
        boundary_hit: clamped || at_edge,
        loss,
        bins: bins.to_vec(),
    })
}

/// Plug-in `(α̂, θ̂)` from grouped residuals and observation times.
pub fn estimate_exponential_params(residuals: &[DVector<f64>], times: &[Vec<f64>]) -> Result<ExponentialFit> {
    let bins = lag_bins(residuals, times)?;
    let fit = fit_exponential_to_bins(&bins)?;
    if fit.boundary_hit {
        log::warn!(
            "exponential-nugget estimate on the boundary: alpha = {:.3e}, theta = {:.3e}",
            fit.alpha,
            fit.theta
        );
    }
    Ok(fit)
}
