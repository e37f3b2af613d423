//! Tuning criteria (LsoCV, LsoCV*, V*) and simulation-only oracle losses.

use nalgebra::{DMatrix, DVector, Cholesky};
use serde::Serialize;

use crate::basis::DesignAssembly;
use crate::correlation::CorrelationModel;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimator::{FitResult, WeightedDesign};

/// Condition-number cap on `I − A_ii` before declaring leverage saturation.
pub const SATURATION_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub lsocv: f64,
    pub lsocv_star: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_score: Option<f64>,
}

/// Truth available only in simulations.
pub struct Oracle<'a> {
    pub mu: &'a DVector<f64>,
    /// Per-subject true covariance blocks `Σ_i`.
    pub sigma: &'a [DMatrix<f64>],
}

/// Evaluates every criterion that the inputs allow.
pub fn evaluate(fit: &FitResult, oracle: Option<Oracle<'_>>) -> Result<CriterionReport> {
    let lsocv = lsocv_exact(fit)?;
    let lsocv_star = lsocv_star(fit);
    let v_star = v_star(fit).ok();
    let (loss, risk, u_score) = match oracle {
        Some(o) => {
            let s = oracle_scores(fit, o.mu, o.sigma)?;
            (Some(s.loss), Some(s.risk), Some(s.u_score))
        }
        None => (None, None, None),
    };
    Ok(CriterionReport {
        lsocv,
        lsocv_star,
        v_star,
        loss,
        risk,
        u_score,
    })
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Leave-subject-out CV by the shortcut
/// `(1/n) Σ_i ‖(I − A_ii)⁻¹ (y_i − ŷ_i)‖²`.
pub fn lsocv_exact(fit: &FitResult) -> Result<f64> {
    let n = fit.n_subjects();
    let mut total = 0.0;
    for (i, a) in fit.hat_blocks.iter().enumerate() {
        let ni = a.nrows();
        let m = DMatrix::identity(ni, ni) - a;
        let condition = condition_number(&m);
        if condition > SATURATION_CONDITION {
            return Err(Error::LeverageSaturation { subject: i, condition });
        }
        let e = fit.subject_residuals(i);
        let z = m
            .lu()
            .solve(&e)
            .ok_or(Error::LeverageSaturation { subject: i, condition })?;
        total += z.norm_squared();
    }
    Ok(total / n as f64)
}

/// Literal definition: `n` refits, each leaving one subject out.
pub fn lsocv_brute(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    model: &CorrelationModel,
    lambda: &[f64],
) -> Result<f64> {
    let design = WeightedDesign::new(dataset, assembly, model)?;
    lsocv_brute_design(&design, lambda)
}

pub fn lsocv_brute_design(design: &WeightedDesign, lambda: &[f64]) -> Result<f64> {
    let n = design.n_subjects();
    if n < 2 {
        return Err(Error::InvalidInput("leave-subject-out CV needs at least 2 subjects".into()));
    }
    let h = design.penalized_matrix(lambda)?;
    let mut total = 0.0;
    for i in 0..n {
        let (o, ni) = (design.offsets[i], design.sizes[i]);
        let xi = design.x.rows(o, ni);
        let wxi = design.winv_x.rows(o, ni);
        let hi = &h - xi.transpose() * wxi;
        let rhs = &design.xtwy - xi.transpose() * design.winv_y.rows(o, ni);
        let chol = Cholesky::new(hi).ok_or(Error::SingularSystem)?;
        let beta = chol.solve(&rhs);
        let pred = xi * beta;
        total += (design.y.rows(o, ni) - pred).norm_squared();
    }
    Ok(total / n as f64)
}

/// `(1/n) ‖ê‖² + (2/n) Σ_i ê_iᵀ A_ii ê_i`.
pub fn lsocv_star(fit: &FitResult) -> f64 {
    let n = fit.n_subjects() as f64;
    let rss = fit.residuals.norm_squared();
    let cross: f64 = fit
        .hat_blocks
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let e = fit.subject_residuals(i);
            e.dot(&(a * &e))
        })
        .sum();
    (rss + 2.0 * cross) / n
}

/// `log(êᵀW⁻¹ê / N) + log|W| / N + 2 tr(A) / (N − tr(A))`, the
/// correlated-data GCV with `W` the working correlation.
pub fn v_star(fit: &FitResult) -> Result<f64> {
    let weighted_rss = fit.residuals.dot(&fit.weighted_residuals());
    v_star_value(weighted_rss, fit.design.log_det_w, fit.trace_a, fit.n_obs())
}

pub fn v_star_value(weighted_rss: f64, log_det_w: f64, trace_a: f64, n_obs: usize) -> Result<f64> {
    let n = n_obs as f64;
    if trace_a >= n {
        return Err(Error::TraceTooLarge { trace: trace_a, n_obs });
    }
    Ok((weighted_rss / n).ln() + log_det_w / n + 2.0 * trace_a / (n - trace_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleScores {
    pub loss: f64,
    pub risk: f64,
    pub u_score: f64,
}

/// True loss `L`, risk `R` and the unbiased surrogate `U` for known `μ`, `Σ`.
pub fn oracle_scores(fit: &FitResult, mu: &DVector<f64>, sigma: &[DMatrix<f64>]) -> Result<OracleScores> {
    let design = &fit.design;
    if mu.len() != fit.n_obs() || sigma.len() != fit.n_subjects() {
        return Err(Error::DimensionMismatch(format!(
            "oracle has {} means and {} covariance blocks for {} observations in {} subjects",
            mu.len(),
            sigma.len(),
            fit.n_obs(),
            fit.n_subjects()
        )));
    }
    for (s, &ni) in sigma.iter().zip(&design.sizes) {
        if s.shape() != (ni, ni) {
            return Err(Error::DimensionMismatch("covariance block has wrong size".into()));
        }
    }
    let n = fit.n_subjects() as f64;
    let loss = (&fit.fitted - mu).norm_squared() / n;
    let bias = mu - fit.apply_hat(mu);
    // (AᵀA)_ii = (W⁻¹X)_i M (W⁻¹X)_iᵀ with M = H⁻¹ XᵀX H⁻¹
    let q = fit.factor.inverse();
    let m = &q * design.x.tr_mul(&design.x) * &q;
    let mut tr_ata_sigma = 0.0;
    let mut tr_a_sigma = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        let (o, ni) = (design.offsets[i], design.sizes[i]);
        let wx = design.winv_x.rows(o, ni);
        let block = wx * &m * wx.transpose();
        tr_ata_sigma += (block * s).trace();
        tr_a_sigma += (&fit.hat_blocks[i] * s).trace();
    }
    let risk = (bias.norm_squared() + tr_ata_sigma) / n;
    let u_score = (fit.residuals.norm_squared() + 2.0 * tr_a_sigma) / n;
    Ok(OracleScores { loss, risk, u_score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::WorkingBlock;
    use crate::estimator::fit_design;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_design(seed: u64, sizes: &[usize], p: usize, correlated: bool) -> Arc<WeightedDesign> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_obs: usize = sizes.iter().sum();
        let x = DMatrix::from_fn(n_obs, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n_obs, |_, _| rng.random_range(-1.0..1.0));
        let blocks = sizes
            .iter()
            .map(|&ni| {
                let m = if correlated {
                    let g = DMatrix::from_fn(ni, ni, |_, _| rng.random_range(-1.0..1.0));
                    &g * g.transpose() + DMatrix::identity(ni, ni)
                } else {
                    DMatrix::identity(ni, ni)
                };
                WorkingBlock::from_matrix(m).unwrap()
            })
            .collect();
        let s = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.0 });
        Arc::new(WeightedDesign::from_parts(x, y, blocks, vec![s], CorrelationModel::Independence).unwrap())
    }

    fn dense_winv(design: &WeightedDesign) -> DMatrix<f64> {
        let n = design.n_obs();
        let mut w = DMatrix::zeros(n, n);
        for (i, b) in design.blocks.iter().enumerate() {
            let (o, ni) = (design.offsets[i], design.sizes[i]);
            w.view_mut((o, o), (ni, ni)).copy_from(&b.inverse());
        }
        w
    }

    fn dense_hat(design: &WeightedDesign, lambda: f64) -> DMatrix<f64> {
        let winv = dense_winv(design);
        let h = design.x.transpose() * &winv * &design.x + &design.penalties[0] * lambda;
        &design.x * h.try_inverse().unwrap() * design.x.transpose() * winv
    }

    #[test]
    fn singleton_subjects_give_ordinary_cv() {
        let design = random_design(1, &[1; 12], 3, false);
        let fit = fit_design(&design, &[0.3]).unwrap();
        let a = dense_hat(&design, 0.3);
        let ocv: f64 = (0..12).map(|i| (fit.residuals[i] / (1.0 - a[(i, i)])).powi(2)).sum::<f64>() / 12.0;
        assert_relative_eq!(lsocv_exact(&fit).unwrap(), ocv, max_relative = 1e-10);
    }

    #[test]
    fn perfect_fit_scores_zero() {
        let mut design = (*random_design(2, &[3, 2, 4], 3, true)).clone();
        let beta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        design = design.with_response(&design.x * beta).unwrap();
        let fit = fit_design(&Arc::new(design), &[0.0]).unwrap();
        assert!(lsocv_exact(&fit).unwrap() < 1e-20);
        assert!(lsocv_star(&fit) < 1e-20);
    }

    #[test]
    fn star_and_v_star_match_dense_formulas() {
        let design = random_design(3, &[3, 4, 2, 5, 3, 4], 4, true);
        let lambda = 0.7;
        let fit = fit_design(&design, &[lambda]).unwrap();
        let a = dense_hat(&design, lambda);
        let n_obs = design.n_obs();
        let e = (DMatrix::identity(n_obs, n_obs) - &a) * &design.y;
        let mut cross = 0.0;
        for i in 0..design.n_subjects() {
            let (o, ni) = (design.offsets[i], design.sizes[i]);
            let ei = e.rows(o, ni);
            cross += ei.dot(&(a.view((o, o), (ni, ni)) * ei));
        }
        let n = design.n_subjects() as f64;
        assert_relative_eq!(lsocv_star(&fit), (e.norm_squared() + 2.0 * cross) / n, max_relative = 1e-10);

        let winv = dense_winv(&design);
        let w = winv.clone().try_inverse().unwrap();
        let nf = n_obs as f64;
        let tr = a.trace();
        let expected = (e.dot(&(&winv * &e)) / nf).ln() + w.determinant().ln() / nf + 2.0 * tr / (nf - tr);
        assert_relative_eq!(v_star(&fit).unwrap(), expected, max_relative = 1e-10);
    }

    #[test]
    fn v_star_rejects_saturated_trace() {
        assert!(matches!(v_star_value(1.0, 0.0, 5.0, 5), Err(Error::TraceTooLarge { .. })));
    }

    #[test]
    fn oracle_scores_match_dense_expansion() {
        let design = random_design(4, &[2, 3, 3, 4], 3, true);
        let lambda = 1.3;
        let fit = fit_design(&design, &[lambda]).unwrap();
        let a = dense_hat(&design, lambda);
        let n_obs = design.n_obs();
        let mu = DVector::from_fn(n_obs, |i, _| (i as f64 * 0.7).sin());
        let sigma: Vec<DMatrix<f64>> = design
            .sizes
            .iter()
            .map(|&ni| DMatrix::from_fn(ni, ni, |i, j| if i == j { 1.0 } else { 0.4 }))
            .collect();
        let mut big = DMatrix::zeros(n_obs, n_obs);
        for (i, s) in sigma.iter().enumerate() {
            let (o, ni) = (design.offsets[i], design.sizes[i]);
            big.view_mut((o, o), (ni, ni)).copy_from(s);
        }
        let n = design.n_subjects() as f64;
        let i_a = DMatrix::identity(n_obs, n_obs) - &a;
        let risk = ((&i_a * &mu).norm_squared() + (a.transpose() * &a * &big).trace()) / n;
        let u = ((&i_a * &design.y).norm_squared() + 2.0 * (&a * &big).trace()) / n;
        let loss = (&a * &design.y - &mu).norm_squared() / n;
        let got = oracle_scores(&fit, &mu, &sigma).unwrap();
        assert_relative_eq!(got.risk, risk, max_relative = 1e-10);
        assert_relative_eq!(got.u_score, u, max_relative = 1e-10);
        assert_relative_eq!(got.loss, loss, max_relative = 1e-10);
    }

    #[test]
    fn exact_matches_brute_force() {
        let design = random_design(5, &[2, 3, 1, 4, 3, 2, 3], 3, true);
        let fit = fit_design(&design, &[0.2]).unwrap();
        assert_relative_eq!(
            lsocv_exact(&fit).unwrap(),
            lsocv_brute_design(&design, &[0.2]).unwrap(),
            max_relative = 1e-10
        );
    }
}
