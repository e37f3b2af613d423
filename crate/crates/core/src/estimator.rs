//! Penalized weighted least squares, per-subject hat blocks and leverage.
//!
//! The full `N × N` hat matrix is never formed. Everything routes through
//! the per-subject Cholesky factors of `W_i` and one factorization of
//! `H = XᵀW⁻¹X + Σ λ_k S_k`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::DesignAssembly;
use crate::correlation::{working_blocks, CorrelationModel, WorkingBlock};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};

/// Subject-level leverage above this multiple of the mean is flagged.
pub const LEVERAGE_WARNING_RATIO: f64 = 10.0;

/// λ-independent pieces of the penalized problem for one working correlation.
#[derive(Debug, Clone)]
pub struct WeightedDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub blocks: Vec<WorkingBlock>,
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Stacked `W⁻¹X`.
    pub winv_x: DMatrix<f64>,
    /// Stacked `W⁻¹Y`.
    pub winv_y: DVector<f64>,
    pub xtwx: DMatrix<f64>,
    pub xtwy: DVector<f64>,
    pub penalties: Vec<DMatrix<f64>>,
    pub model: CorrelationModel,
    pub log_det_w: f64,
}

impl WeightedDesign {
    pub fn new(dataset: &LongitudinalDataset, assembly: &DesignAssembly, model: &CorrelationModel) -> Result<Self> {
        let blocks = working_blocks(dataset, model)?;
        Self::from_parts(assembly.x.clone(), dataset.response(), blocks, assembly.penalties.clone(), model.clone())
    }

    pub fn from_parts(
        x: DMatrix<f64>,
        y: DVector<f64>,
        blocks: Vec<WorkingBlock>,
        penalties: Vec<DMatrix<f64>>,
        model: CorrelationModel,
    ) -> Result<Self> {
        let n_obs: usize = blocks.iter().map(WorkingBlock::dim).sum();
        if x.nrows() != n_obs || y.len() != n_obs {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows, response {} entries, working blocks cover {}",
                x.nrows(),
                y.len(),
                n_obs
            )));
        }
        let p = x.ncols();
        if let Some(s) = penalties.iter().find(|s| s.shape() != (p, p)) {
            return Err(Error::DimensionMismatch(format!(
                "penalty is {}x{}, expected {p}x{p}",
                s.nrows(),
                s.ncols()
            )));
        }
        let sizes: Vec<usize> = blocks.iter().map(WorkingBlock::dim).collect();
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        let mut winv_x = DMatrix::zeros(n_obs, p);
        let mut winv_y = DVector::zeros(n_obs);
        for ((b, &o), &ni) in blocks.iter().zip(&offsets).zip(&sizes) {
            winv_x
                .rows_mut(o, ni)
                .copy_from(&b.solve(&x.rows(o, ni).into_owned()));
            winv_y.rows_mut(o, ni).copy_from(&b.solve_vec(&y.rows(o, ni).into_owned()));
        }
        let xtwx = x.tr_mul(&winv_x);
        let xtwx = 0.5 * (&xtwx + xtwx.transpose());
        let xtwy = winv_x.tr_mul(&y);
        let log_det_w = blocks.iter().map(|b| b.log_det).sum();
        Ok(WeightedDesign {
            x,
            y,
            blocks,
            offsets,
            sizes,
            winv_x,
            winv_y,
            xtwx,
            xtwy,
            penalties,
            model,
            log_det_w,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_params(&self) -> usize {
        self.x.ncols()
    }

    /// Same correlation and design restricted to (possibly repeated) subjects.
    pub fn select_subjects(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<usize> = idx
            .iter()
            .flat_map(|&i| self.offsets[i]..self.offsets[i] + self.sizes[i])
            .collect();
        Self::from_parts(
            self.x.select_rows(&rows),
            DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            idx.iter().map(|&i| self.blocks[i].clone()).collect(),
            self.penalties.clone(),
            self.model.clone(),
        )
    }

    /// Same design with a new response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::from_parts(
            self.x.clone(),
            y,
            self.blocks.clone(),
            self.penalties.clone(),
            self.model.clone(),
        )
    }

    pub fn penalized_matrix(&self, lambda: &[f64]) -> Result<DMatrix<f64>> {
        check_lambda(lambda, self.penalties.len())?;
        let mut h = self.xtwx.clone();
        for (l, s) in lambda.iter().zip(&self.penalties) {
            if *l != 0.0 {
                h += s * *l;
            }
        }
        Ok(h)
    }

    /// Factorizes `H(λ)`; returns the factor and whether a ridge was needed.
    pub fn factorize(&self, lambda: &[f64]) -> Result<(Cholesky<f64, Dyn>, bool)> {
        factorize_spd(self.penalized_matrix(lambda)?)
    }

    /// `β̂(λ)` with its factorization, without hat blocks.
    pub fn coefficients(&self, lambda: &[f64]) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
        let (chol, _) = self.factorize(lambda)?;
        Ok((chol.solve(&self.xtwy), chol))
    }

    /// Applies the hat matrix `A = X H⁻¹ XᵀW⁻¹` to `v` without forming it.
    pub fn apply_hat(&self, chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> DVector<f64> {
        let mut winv_v = DVector::zeros(v.len());
        for ((b, &o), &ni) in self.blocks.iter().zip(&self.offsets).zip(&self.sizes) {
            winv_v.rows_mut(o, ni).copy_from(&b.solve_vec(&v.rows(o, ni).into_owned()));
        }
        &self.x * chol.solve(&self.x.tr_mul(&winv_v))
    }
}

fn check_lambda(lambda: &[f64], m: usize) -> Result<()> {
    if lambda.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} penalty parameters for {m} penalties",
            lambda.len()
        )));
    }
    if let Some(&l) = lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::NegativeLambda(l));
    }
    Ok(())
}

/// Cholesky with one diagonal-ridge retry of `1e-10 · tr(H)/p`.
pub fn factorize_spd(h: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    let p = h.nrows();
    if let Some(c) = Cholesky::new(h.clone()) {
        if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
            return Ok((c, false));
        }
    }
    let ridge = 1e-10 * h.trace() / p as f64;
    if !(ridge > 0.0) {
        return Err(Error::SingularSystem);
    }
    let mut hr = h;
    for i in 0..p {
        hr[(i, i)] += ridge;
    }
    match Cholesky::new(hr) {
        Some(c) => {
            log::warn!("penalized normal matrix needed a ridge of {ridge:.3e}");
            Ok((c, true))
        }
        None => Err(Error::SingularSystem),
    }
}

/// Output of one penalized fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Per-subject diagonal blocks `A_ii` of the hat matrix.
    pub hat_blocks: Vec<DMatrix<f64>>,
    pub trace_a: f64,
    pub lambda: Vec<f64>,
    pub correlation: CorrelationModel,
    /// Cholesky factor of `H = XᵀW⁻¹X + Σ λ_k S_k`.
    pub factor: Cholesky<f64, Dyn>,
    pub ridge_applied: bool,
    pub design: Arc<WeightedDesign>,
}

impl FitResult {
    pub fn n_subjects(&self) -> usize {
        self.hat_blocks.len()
    }

    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }

    pub fn subject_residuals(&self, i: usize) -> DVector<f64> {
        let d = &self.design;
        self.residuals.rows(d.offsets[i], d.sizes[i]).into_owned()
    }

    pub fn grouped_residuals(&self) -> Vec<DVector<f64>> {
        (0..self.n_subjects()).map(|i| self.subject_residuals(i)).collect()
    }

    /// `A v` through the stored factorization.
    pub fn apply_hat(&self, v: &DVector<f64>) -> DVector<f64> {
        self.design.apply_hat(&self.factor, v)
    }

    /// `W⁻¹ ê`, stacked.
    pub fn weighted_residuals(&self) -> DVector<f64> {
        &self.design.winv_y - &self.design.winv_x * &self.beta
    }
}

/// Fits the penalized weighted least squares problem.
pub fn fit(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    model: &CorrelationModel,
    lambda: &[f64],
) -> Result<FitResult> {
    if assembly.x.nrows() != dataset.n_obs() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, dataset {} observations",
            assembly.x.nrows(),
            dataset.n_obs()
        )));
    }
    check_lambda(lambda, assembly.n_penalties())?;
    let design = Arc::new(WeightedDesign::new(dataset, assembly, model)?);
    fit_design(&design, lambda)
}

/// Fits with a prebuilt [`WeightedDesign`], reusing its weighted cross products.
pub fn fit_design(design: &Arc<WeightedDesign>, lambda: &[f64]) -> Result<FitResult> {
    let (factor, ridge_applied) = design.factorize(lambda)?;
    let beta = factor.solve(&design.xtwy);
    let fitted = &design.x * &beta;
    let residuals = &design.y - &fitted;
    // G = H⁻¹ (W⁻¹X)ᵀ, p × N; A_ii = X_i G_i.
    let g = factor.solve(&design.winv_x.transpose());
    let hat_blocks: Vec<DMatrix<f64>> = design
        .offsets
        .iter()
        .zip(&design.sizes)
        .map(|(&o, &ni)| design.x.rows(o, ni) * g.columns(o, ni))
        .collect();
    let trace_a = hat_blocks.iter().map(|a| a.trace()).sum();
    Ok(FitResult {
        beta,
        fitted,
        residuals,
        hat_blocks,
        trace_a,
        lambda: lambda.to_vec(),
        correlation: design.model.clone(),
        factor,
        ridge_applied,
        design: Arc::clone(design),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LeverageReport {
    pub subject_leverage: Vec<f64>,
    pub mean_leverage: f64,
    pub max_to_mean: f64,
    pub warning: bool,
}

/// Per-subject leverages `tr(A_ii)` against their mean `tr(A)/n`.
pub fn leverage_diagnostics(fit: &FitResult) -> LeverageReport {
    let subject_leverage: Vec<f64> = fit.hat_blocks.iter().map(|a| a.trace()).collect();
    let n = subject_leverage.len() as f64;
    let mean_leverage = fit.trace_a / n;
    let max = subject_leverage.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_to_mean = if mean_leverage > 0.0 { max / mean_leverage } else { 1.0 };
    let warning = max_to_mean > LEVERAGE_WARNING_RATIO;
    if warning {
        log::warn!("subject leverage ratio {max_to_mean:.2} exceeds {LEVERAGE_WARNING_RATIO}");
    }
    LeverageReport {
        subject_leverage,
        mean_leverage,
        max_to_mean,
        warning,
    }
}

/// Pointwise interval for one coefficient function.
#[derive(Debug, Clone, Serialize)]
pub struct TermBand {
    pub label: String,
    pub grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub width: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub level: f64,
    pub replicates_used: usize,
    pub dropped: usize,
    pub terms: Vec<TermBand>,
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            level: 0.95,
            grid_points: 100,
            seed: 1,
        }
    }
}

/// Type-7 empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cluster bootstrap: resample whole subjects with replacement, refit with
/// fixed λ and working correlation, and report pointwise percentile
/// intervals for every smooth or varying-coefficient term.
pub fn bootstrap_ci(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    model: &CorrelationModel,
    lambda: &[f64],
    config: &BootstrapConfig,
) -> Result<BootstrapReport> {
    if config.replicates < 2 {
        return Err(Error::InvalidInput("bootstrap needs at least 2 replicates".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidInput(format!("level {} outside (0, 1)", config.level)));
    }
    check_lambda(lambda, assembly.n_penalties())?;
    let design = WeightedDesign::new(dataset, assembly, model)?;
    let curve_terms: Vec<usize> = assembly
        .terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.spec.as_ref().and_then(|s| s.basis()).is_some())
        .map(|(i, _)| i)
        .collect();
    let grids: Vec<Vec<f64>> = curve_terms
        .iter()
        .map(|&ti| {
            let b = assembly.terms[ti].spec.as_ref().and_then(|s| s.basis()).expect("basis");
            let m = config.grid_points.max(2);
            (0..m)
                .map(|j| b.lower + (b.upper - b.lower) * j as f64 / (m - 1) as f64)
                .collect()
        })
        .collect();

    let n = design.n_subjects();
    let subjects: Vec<usize> = (0..n).collect();
    let curves: Vec<Option<Vec<Vec<f64>>>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(rep as u64);
            let idx: Vec<usize> = (0..n).map(|_| *subjects.choose(&mut rng).expect("nonempty")).collect();
            let sub = design.select_subjects(&idx).ok()?;
            let (beta, _) = sub.coefficients(lambda).ok()?;
            curve_terms
                .iter()
                .zip(&grids)
                .map(|(&ti, g)| assembly.term_curve(ti, &beta, g).ok())
                .collect::<Option<Vec<_>>>()
        })
        .collect();
    let dropped = curves.iter().filter(|c| c.is_none()).count();
    if dropped * 10 > config.replicates {
        return Err(Error::BootstrapFailure {
            dropped,
            total: config.replicates,
        });
    }
    let kept: Vec<&Vec<Vec<f64>>> = curves.iter().flatten().collect();
    let tail = 0.5 * (1.0 - config.level);
    let terms = curve_terms
        .iter()
        .enumerate()
        .map(|(k, &ti)| {
            let g = &grids[k];
            let mut lower = Vec::with_capacity(g.len());
            let mut upper = Vec::with_capacity(g.len());
            for j in 0..g.len() {
                let mut vals: Vec<f64> = kept.iter().map(|c| c[k][j]).collect();
                vals.sort_by(|a, b| a.total_cmp(b));
                lower.push(quantile_sorted(&vals, tail));
                upper.push(quantile_sorted(&vals, 1.0 - tail));
            }
            let width = upper.iter().zip(&lower).map(|(u, l)| u - l).collect();
            TermBand {
                label: assembly.terms[ti].label.clone(),
                grid: g.clone(),
                lower,
                upper,
                width,
            }
        })
        .collect();
    Ok(BootstrapReport {
        level: config.level,
        replicates_used: kept.len(),
        dropped,
        terms,
    })
}
