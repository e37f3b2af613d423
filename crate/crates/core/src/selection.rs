//! Working-correlation selection by exact LsoCV.
//!
//! Each candidate is fitted with the same design and its exact LsoCV value is
//! compared; the smallest wins. Regression splines (`λ = 0`) are the default
//! policy; [`LambdaPolicy::Optimize`] tunes `λ` per candidate by LsoCV*
//! first.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::basis::DesignAssembly;
use crate::correlation::{estimate_structure, CorrelationModel, StructureKind};
use crate::criteria::lsocv_exact;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimator::{fit, fit_design, WeightedDesign};
use crate::optimizer::{optimize_design, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    #[default]
    Zero,
    Optimize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateResult {
    pub structure: String,
    pub params: CorrelationModel,
    /// `None` when the candidate was excluded.
    pub lsocv: Option<f64>,
    pub lambda: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub candidates: Vec<CandidateResult>,
    pub chosen: usize,
    /// Another candidate attains exactly the same LsoCV value.
    pub tie: bool,
    pub lambda_policy: LambdaPolicy,
}

impl SelectionReport {
    pub fn chosen_candidate(&self) -> &CandidateResult {
        &self.candidates[self.chosen]
    }

    pub fn excluded(&self) -> usize {
        self.candidates.iter().filter(|c| c.lsocv.is_none()).count()
    }
}

fn score_candidate(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    model: &CorrelationModel,
    policy: LambdaPolicy,
) -> Result<(f64, Vec<f64>)> {
    let m = assembly.n_penalties();
    match policy {
        LambdaPolicy::Zero => {
            let lambda = vec![0.0; m];
            let f = fit(dataset, assembly, model, &lambda)?;
            Ok((lsocv_exact(&f)?, lambda))
        }
        LambdaPolicy::Optimize => {
            let design = Arc::new(WeightedDesign::new(dataset, assembly, model)?);
            if m == 0 {
                return Ok((lsocv_exact(&fit_design(&design, &[])?)?, vec![]));
            }
            let out = optimize_design(&design, &OptimizerConfig::default())?;
            Ok((lsocv_exact(&out.fit)?, out.lambda))
        }
    }
}

/// Selects among `candidates` with `λ = 0`.
pub fn select_correlation(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    candidates: &[CorrelationModel],
) -> Result<SelectionReport> {
    select_correlation_with(dataset, assembly, candidates, LambdaPolicy::Zero)
}

pub fn select_correlation_with(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    candidates: &[CorrelationModel],
    policy: LambdaPolicy,
) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate correlation structures".into()));
    }
    let results: Vec<CandidateResult> = candidates
        .par_iter()
        .map(|model| match score_candidate(dataset, assembly, model, policy) {
            Ok((v, lambda)) if v.is_finite() => CandidateResult {
                structure: model.short_name().to_string(),
                params: model.clone(),
                lsocv: Some(v),
                lambda,
                error: None,
            },
            Ok(_) => CandidateResult {
                structure: model.short_name().to_string(),
                params: model.clone(),
                lsocv: None,
                lambda: vec![],
                error: Some("non-finite LsoCV".into()),
            },
            Err(e) => {
                log::warn!("candidate {} excluded: {e}", model.short_name());
                CandidateResult {
                    structure: model.short_name().to_string(),
                    params: model.clone(),
                    lsocv: None,
                    lambda: vec![],
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let mut chosen: Option<(usize, f64)> = None;
    let mut tie = false;
    for (i, c) in results.iter().enumerate() {
        if let Some(v) = c.lsocv {
            match chosen {
                None => chosen = Some((i, v)),
                Some((_, best)) if v < best => {
                    chosen = Some((i, v));
                    tie = false;
                }
                Some((_, best)) if v == best => tie = true,
                _ => {}
            }
        }
    }
    let Some((chosen, _)) = chosen else {
        let reasons: Vec<String> = results
            .iter()
            .map(|c| format!("{}: {}", c.structure, c.error.as_deref().unwrap_or("?")))
            .collect();
        return Err(Error::AllCandidatesFailed(reasons.join("; ")));
    };
    Ok(SelectionReport {
        candidates: results,
        chosen,
        tie,
        lambda_policy: policy,
    })
}

/// Plugs method-of-moments parameters into each requested structure, using
/// residuals of a working-independence fit at `λ = 0`.
///
/// Structures whose parameters cannot be estimated are skipped with a
/// warning; the returned list keeps the requested order.
pub fn estimate_candidates(
    dataset: &LongitudinalDataset,
    assembly: &DesignAssembly,
    kinds: &[StructureKind],
) -> Result<Vec<CorrelationModel>> {
    let lambda = vec![0.0; assembly.n_penalties()];
    let base = fit(dataset, assembly, &CorrelationModel::Independence, &lambda)?;
    let residuals = base.grouped_residuals();
    let times: Option<Vec<Vec<f64>>> = dataset
        .subjects
        .iter()
        .map(|s| s.times.clone())
        .collect();
    let mut out = Vec::with_capacity(kinds.len());
    for kind in kinds {
        match estimate_structure(*kind, &residuals, times.as_deref()) {
            Ok(model) => out.push(model),
            Err(e) => log::warn!("could not estimate {kind:?}: {e}"),
        }
    }
    Ok(out)
}
