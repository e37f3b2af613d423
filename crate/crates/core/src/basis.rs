//! B-spline bases, derivative penalties and design assembly.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};

/// How interior knots are placed inside `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub enum KnotPlacement {
    #[default]
    Uniform,
    /// Strictly increasing interior knots, all inside the open domain.
    Explicit(Vec<f64>),
}

/// Order-`order` B-spline basis on `[lower, upper]` with a `penalty_order`
/// derivative roughness penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub order: usize,
    pub interior_knots: usize,
    pub lower: f64,
    pub upper: f64,
    pub penalty_order: usize,
    #[serde(default)]
    pub placement: KnotPlacement,
}

impl BasisSpec {
    pub fn new(order: usize, interior_knots: usize, lower: f64, upper: f64, penalty_order: usize) -> Self {
        BasisSpec {
            order,
            interior_knots,
            lower,
            upper,
            penalty_order,
            placement: KnotPlacement::Uniform,
        }
    }

    /// Cubic basis with a second-derivative penalty.
    pub fn cubic(interior_knots: usize, lower: f64, upper: f64) -> Self {
        Self::new(4, interior_knots, lower, upper, 2)
    }

    /// Basis spanning the observed range of `values`, with equally spaced
    /// knots or, when `quantile` is set, knots at empirical quantiles.
    pub fn for_data(
        values: &[f64],
        order: usize,
        interior_knots: usize,
        penalty_order: usize,
        quantile: bool,
    ) -> Result<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidBasis(format!(
                "covariate range [{lo}, {hi}] is empty or degenerate"
            )));
        }
        let mut spec = Self::new(order, interior_knots, lo, hi, penalty_order);
        if quantile && interior_knots > 0 {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let m = sorted.len() - 1;
            let knots: Vec<f64> = (1..=interior_knots)
                .map(|j| {
                    let pos = j as f64 / (interior_knots + 1) as f64 * m as f64;
                    let lo_i = pos.floor() as usize;
                    let frac = pos - lo_i as f64;
                    let hi_i = (lo_i + 1).min(m);
                    sorted[lo_i] * (1.0 - frac) + sorted[hi_i] * frac
                })
                .collect();
            spec.placement = KnotPlacement::Explicit(knots);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_basis(&self) -> usize {
        self.interior_knots + self.order
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::InvalidBasis(format!(
                "domain [{}, {}] must satisfy a < b",
                self.lower, self.upper
            )));
        }
        if self.order < 1 {
            return Err(Error::InvalidBasis("spline order must be at least 1".into()));
        }
        if let KnotPlacement::Explicit(k) = &self.placement {
            if k.len() != self.interior_knots {
                return Err(Error::InvalidBasis(format!(
                    "{} explicit knots given for {} interior knots",
                    k.len(),
                    self.interior_knots
                )));
            }
            let mut prev = self.lower;
            for &t in k {
                if !(t > prev) {
                    return Err(Error::InvalidBasis("interior knots must be strictly increasing inside (a, b)".into()));
                }
                prev = t;
            }
            if !(prev < self.upper) {
                return Err(Error::InvalidBasis("interior knots must lie below b".into()));
            }
        }
        Ok(())
    }
}

/// Clamped knot vector with `interior_knots + 2 * order` entries.
pub fn make_knots(spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let (a, b, r, k) = (spec.lower, spec.upper, spec.order, spec.interior_knots);
    let mut t = Vec::with_capacity(k + 2 * r);
    t.extend(std::iter::repeat_n(a, r));
    match &spec.placement {
        KnotPlacement::Uniform => {
            let h = (b - a) / (k + 1) as f64;
            t.extend((1..=k).map(|j| a + h * j as f64));
        }
        KnotPlacement::Explicit(knots) => t.extend_from_slice(knots),
    }
    t.extend(std::iter::repeat_n(b, r));
    Ok(t)
}

/// Cox–de Boor values of all `knots.len() - order` basis functions at `x`.
/// `x` equal to the right boundary belongs to the last nonempty interval.
fn bspline_values(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    let nk = knots.len();
    let nb = nk - order;
    let b = knots[nb];
    let mu = if x >= b {
        (0..nb).rev().find(|&m| knots[m] < knots[m + 1]).unwrap_or(order - 1)
    } else {
        knots.partition_point(|&t| t <= x).saturating_sub(1)
    };
    let mut vals = vec![0.0; nk - 1];
    vals[mu] = 1.0;
    for k in 2..=order {
        for j in 0..nk - k {
            let mut v = 0.0;
            let d1 = knots[j + k - 1] - knots[j];
            if d1 > 0.0 {
                v += (x - knots[j]) / d1 * vals[j];
            }
            let d2 = knots[j + k] - knots[j + 1];
            if d2 > 0.0 {
                v += (knots[j + k] - x) / d2 * vals[j + 1];
            }
            vals[j] = v;
        }
    }
    vals.truncate(nb);
    vals
}

/// Values of the `K_n + r` basis functions at `x ∈ [a, b]`.
pub fn eval_basis(spec: &BasisSpec, x: f64) -> Result<Vec<f64>> {
    let knots = make_knots(spec)?;
    eval_with_knots(spec, &knots, x)
}

fn eval_with_knots(spec: &BasisSpec, knots: &[f64], x: f64) -> Result<Vec<f64>> {
    if !(x >= spec.lower && x <= spec.upper) {
        return Err(Error::OutOfDomain {
            x,
            a: spec.lower,
            b: spec.upper,
        });
    }
    Ok(bspline_values(knots, spec.order, x))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let (p, pm1) = if m == 0 { (1.0, 0.0) } else if m == 1 { (x, 1.0) } else { (p1, p0) };
            dp = m as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// One weighted difference step: maps order-`order` coefficients on `knots`
/// to order-`order - 1` coefficients of the derivative on `knots[1..len-1]`.
fn difference_step(knots: &[f64], order: usize) -> DMatrix<f64> {
    let p = knots.len() - order;
    let mut d = DMatrix::zeros(p - 1, p);
    for j in 0..p - 1 {
        let w = (order - 1) as f64 / (knots[j + order] - knots[j + 1]);
        d[(j, j)] = -w;
        d[(j, j + 1)] = w;
    }
    d
}

/// Weighted q-th order difference operator `Δ_q`, `(p - q) × p`.
pub fn difference_operator(spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let (r, q) = (spec.order, spec.penalty_order);
    if q < 1 || q >= r {
        return Err(Error::InvalidPenaltyOrder { q, order: r });
    }
    let mut knots = make_knots(spec)?;
    let p = spec.n_basis();
    let mut delta = DMatrix::identity(p, p);
    let mut order = r;
    for _ in 0..q {
        delta = difference_step(&knots, order) * delta;
        knots = knots[1..knots.len() - 1].to_vec();
        order -= 1;
    }
    Ok(delta)
}

/// Gram matrix `R_ij = ∫ B_{i,s} B_{j,s}` of the order-`s` basis on `knots`,
/// integrated exactly by Gauss–Legendre on every knot interval.
pub fn gram_matrix(knots: &[f64], order: usize) -> DMatrix<f64> {
    let nb = knots.len() - order;
    let (nodes, weights) = gauss_legendre(order);
    let mut r = DMatrix::zeros(nb, nb);
    for m in 0..knots.len() - 1 {
        let (lo, hi) = (knots[m], knots[m + 1]);
        if hi <= lo {
            continue;
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (z, w) in nodes.iter().zip(&weights) {
            let x = mid + half * z;
            let b = bspline_values(knots, order, x);
            for i in 0..nb {
                if b[i] == 0.0 {
                    continue;
                }
                for j in 0..nb {
                    r[(i, j)] += w * half * b[i] * b[j];
                }
            }
        }
    }
    r
}

/// Penalty `S = Δ_qᵀ R Δ_q` so that `βᵀSβ = ∫ (f^{(q)})²`.
pub fn penalty_matrix(spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let delta = difference_operator(spec)?;
    let knots = make_knots(spec)?;
    let q = spec.penalty_order;
    let reduced = &knots[q..knots.len() - q];
    let r = gram_matrix(reduced, spec.order - q);
    let s = delta.transpose() * r * &delta;
    Ok(0.5 * (&s + s.transpose()))
}

/// What a model term contributes to the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    ParametricLinear,
    AdditiveSmooth,
    VaryingCoefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermSpec {
    /// One column holding the raw covariate.
    Linear { covariate: String },
    /// `f(x)` expanded in a B-spline basis.
    Smooth { covariate: String, basis: BasisSpec },
    /// `modifier · β(t)` with `β` expanded in a B-spline basis over the
    /// observation times; `None` means a constant modifier of 1.
    VaryingCoefficient { modifier: Option<String>, basis: BasisSpec },
}

impl TermSpec {
    pub fn kind(&self) -> TermKind {
        match self {
            TermSpec::Linear { .. } => TermKind::ParametricLinear,
            TermSpec::Smooth { .. } => TermKind::AdditiveSmooth,
            TermSpec::VaryingCoefficient { .. } => TermKind::VaryingCoefficient,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TermSpec::Linear { covariate } => covariate.clone(),
            TermSpec::Smooth { covariate, .. } => format!("s({covariate})"),
            TermSpec::VaryingCoefficient { modifier, .. } => {
                format!("vc({})", modifier.as_deref().unwrap_or("1"))
            }
        }
    }

    pub fn basis(&self) -> Option<&BasisSpec> {
        match self {
            TermSpec::Linear { .. } => None,
            TermSpec::Smooth { basis, .. } | TermSpec::VaryingCoefficient { basis, .. } => Some(basis),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub intercept: bool,
    pub terms: Vec<TermSpec>,
}

impl ModelSpec {
    /// Additive model with a global intercept.
    pub fn additive(terms: Vec<TermSpec>) -> Self {
        ModelSpec { intercept: true, terms }
    }

    /// Model without an intercept column.
    pub fn without_intercept(terms: Vec<TermSpec>) -> Self {
        ModelSpec { intercept: false, terms }
    }
}

/// One block of columns of the assembled design.
#[derive(Debug, Clone)]
pub struct AssembledTerm {
    pub label: String,
    pub kind: Option<TermKind>,
    pub columns: Range<usize>,
    pub spec: Option<TermSpec>,
    /// Sum-to-zero contrast `Z` (`p_k × (p_k − 1)`), when the block is centered.
    pub constraint: Option<DMatrix<f64>>,
}

/// Stacked design matrix, column layout and zero-padded penalties.
#[derive(Debug, Clone)]
pub struct DesignAssembly {
    pub x: DMatrix<f64>,
    pub terms: Vec<AssembledTerm>,
    /// One `p × p` penalty per penalized term.
    pub penalties: Vec<DMatrix<f64>>,
    /// Index into `terms` for each penalty.
    pub penalty_terms: Vec<usize>,
}

impl DesignAssembly {
    pub fn n_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_penalties(&self) -> usize {
        self.penalties.len()
    }

    /// Same design with every penalty summed into one, for a shared λ.
    pub fn merged_penalty(&self) -> DesignAssembly {
        let p = self.n_params();
        let total = self
            .penalties
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, s| acc + s);
        DesignAssembly {
            x: self.x.clone(),
            terms: self.terms.clone(),
            penalties: if self.penalties.is_empty() { vec![] } else { vec![total] },
            penalty_terms: self.penalty_terms.iter().take(1).copied().collect(),
        }
    }

    /// Same design with penalty `k` multiplied by `c`.
    pub fn with_scaled_penalty(&self, k: usize, c: f64) -> DesignAssembly {
        let mut out = self.clone();
        out.penalties[k] *= c;
        out
    }

    /// Design restricted to the given rows (e.g. a subject subset).
    pub fn with_rows(&self, rows: &[usize]) -> DesignAssembly {
        let mut out = self.clone();
        out.x = self.x.select_rows(rows);
        out
    }

    pub fn term_index(&self, label: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.label == label)
    }

    /// Evaluates a fitted smooth or varying coefficient on `grid`:
    /// `B(x) Z β_k`, without the modifier.
    pub fn term_curve(&self, term: usize, beta: &DVector<f64>, grid: &[f64]) -> Result<Vec<f64>> {
        let t = &self.terms[term];
        let basis = t
            .spec
            .as_ref()
            .and_then(TermSpec::basis)
            .ok_or_else(|| Error::InvalidInput(format!("term `{}` has no basis", t.label)))?;
        let knots = make_knots(basis)?;
        let coef = beta.rows(t.columns.start, t.columns.len()).into_owned();
        let full = match &t.constraint {
            Some(z) => z * coef,
            None => coef,
        };
        grid.iter()
            .map(|&x| {
                let b = eval_with_knots(basis, &knots, x)?;
                Ok(b.iter().zip(full.iter()).map(|(u, v)| u * v).sum())
            })
            .collect()
    }
}

/// Orthonormal basis of the complement of `c`, from the Householder
/// reflector that maps `c` onto the first axis.
fn sum_to_zero_contrast(c: &DVector<f64>) -> DMatrix<f64> {
    let n = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let h = DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, n - 1).into_owned()
}

fn basis_block(spec: &BasisSpec, values: &[f64], label: &str) -> Result<DMatrix<f64>> {
    let knots = make_knots(spec)?;
    let p = spec.n_basis();
    let mut m = DMatrix::zeros(values.len(), p);
    for (i, &x) in values.iter().enumerate() {
        let b = eval_with_knots(spec, &knots, x).map_err(|e| match e {
            Error::OutOfDomain { .. } => Error::InvalidInput(format!(
                "term `{label}`: value {x} outside domain [{}, {}]",
                spec.lower, spec.upper
            )),
            other => other,
        })?;
        for (j, v) in b.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Builds the stacked design and penalties. Rows follow the dataset's
/// subject-major order. A smooth block (or a varying coefficient with a
/// constant modifier) is centered when the columns before it already span
/// the constant function; the first such block in a model without an
/// intercept stays uncentered and carries the level.
pub fn assemble_design(dataset: &LongitudinalDataset, model: &ModelSpec) -> Result<DesignAssembly> {
    if model.terms.is_empty() && !model.intercept {
        return Err(Error::EmptyModel);
    }
    let n_obs = dataset.n_obs();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut terms: Vec<AssembledTerm> = Vec::new();
    let mut local_penalties: Vec<(usize, DMatrix<f64>)> = Vec::new();
    let mut col = 0;
    let mut spans_constant = model.intercept;

    if model.intercept {
        blocks.push(DMatrix::from_element(n_obs, 1, 1.0));
        terms.push(AssembledTerm {
            label: "(intercept)".into(),
            kind: None,
            columns: 0..1,
            spec: None,
            constraint: None,
        });
        col = 1;
    }

    for term in &model.terms {
        let label = term.label();
        let (block, center, penalty) = match term {
            TermSpec::Linear { covariate } => {
                let v = dataset.covariate_column(covariate)?;
                (DMatrix::from_column_slice(n_obs, 1, &v), false, None)
            }
            TermSpec::Smooth { covariate, basis } => {
                let v = dataset.covariate_column(covariate)?;
                let b = basis_block(basis, &v, &label)?;
                let center = spans_constant;
                spans_constant = true;
                (b, center, Some(penalty_matrix(basis)?))
            }
            TermSpec::VaryingCoefficient { modifier, basis } => {
                let t = dataset.time_column()?;
                let mut b = basis_block(basis, &t, &label)?;
                let center = match modifier {
                    Some(name) => {
                        let m = dataset.covariate_column(name)?;
                        for (i, mi) in m.iter().enumerate() {
                            b.row_mut(i).scale_mut(*mi);
                        }
                        false
                    }
                    None => {
                        let c = spans_constant;
                        spans_constant = true;
                        c
                    }
                };
                (b, center, Some(penalty_matrix(basis)?))
            }
        };
        let (block, constraint, penalty) = if center {
            let means = DVector::from_iterator(
                block.ncols(),
                block.column_iter().map(|c| c.sum() / n_obs as f64),
            );
            let z = sum_to_zero_contrast(&means);
            let s = penalty.map(|s| z.transpose() * s * &z);
            (&block * &z, Some(z), s)
        } else {
            (block, None, penalty)
        };
        let width = block.ncols();
        if let Some(s) = penalty {
            local_penalties.push((terms.len(), s));
        }
        terms.push(AssembledTerm {
            label,
            kind: Some(term.kind()),
            columns: col..col + width,
            spec: Some(term.clone()),
            constraint,
        });
        blocks.push(block);
        col += width;
    }

    let p = col;
    let mut x = DMatrix::zeros(n_obs, p);
    for (t, b) in terms.iter().zip(&blocks) {
        x.columns_mut(t.columns.start, t.columns.len()).copy_from(b);
    }
    let mut penalties = Vec::new();
    let mut penalty_terms = Vec::new();
    for (ti, s) in local_penalties {
        let r = &terms[ti].columns;
        let mut full = DMatrix::zeros(p, p);
        full.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&s);
        penalties.push(full);
        penalty_terms.push(ti);
    }
    Ok(DesignAssembly {
        x,
        terms,
        penalties,
        penalty_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;

    /// Independent textbook recursion, written directly from the
    /// definition `B_{j,1}` indicator / two-term recurrence.
    fn naive_b(t: &[f64], j: usize, k: usize, x: f64) -> f64 {
        if k == 1 {
            let last = t.len() - 1;
            let right_closed = x == t[last] && t[j + 1] == t[last] && t[j] < t[j + 1];
            return if (t[j] <= x && x < t[j + 1]) || right_closed { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        if t[j + k - 1] > t[j] {
            v += (x - t[j]) / (t[j + k - 1] - t[j]) * naive_b(t, j, k - 1, x);
        }
        if t[j + k] > t[j + 1] {
            v += (t[j + k] - x) / (t[j + k] - t[j + 1]) * naive_b(t, j + 1, k - 1, x);
        }
        v
    }

    #[test]
    fn knot_vectors() {
        let t = make_knots(&BasisSpec::new(2, 1, 0.0, 1.0, 1)).unwrap();
        assert_eq!(t, vec![0.0, 0.0, 0.5, 1.0, 1.0]);
        let t = make_knots(&BasisSpec::new(4, 0, 0.0, 1.0, 2)).unwrap();
        assert_eq!(t, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let t = make_knots(&BasisSpec::cubic(10, -2.0, 2.0)).unwrap();
        assert_eq!(t.len(), 18);
        for j in 1..=10 {
            assert_abs_diff_eq!(t[3 + j], -2.0 + 4.0 * j as f64 / 11.0, epsilon = 1e-15);
        }
        assert!(make_knots(&BasisSpec::new(4, 3, 1.0, 1.0, 2)).is_err());
        assert!(make_knots(&BasisSpec::new(0, 3, 0.0, 1.0, 2)).is_err());
    }

    #[test]
    fn order_one_is_indicator() {
        let spec = BasisSpec::new(1, 3, 0.0, 4.0, 1);
        let b = eval_basis(&spec, 1.5).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cubic_matches_naive_recursion() {
        // knots (0,0,0,0,0.5,1,1,1,1)
        let spec = BasisSpec::cubic(1, 0.0, 1.0);
        let t = make_knots(&spec).unwrap();
        // frozen from an independent evaluation (scipy BSpline) at x = 0.25
        let b = eval_basis(&spec, 0.25).unwrap();
        let expected = [0.125, 0.59375, 0.25, 0.03125, 0.0];
        for (u, v) in b.iter().zip(expected) {
            assert_abs_diff_eq!(*u, v, epsilon = 1e-14);
        }
        for &x in &[0.0, 0.1, 0.3, 0.5, 0.77, 0.99, 1.0] {
            let b = eval_basis(&spec, x).unwrap();
            for (j, v) in b.iter().enumerate() {
                assert_abs_diff_eq!(*v, naive_b(&t, j, 4, x), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let spec = BasisSpec::cubic(3, 0.0, 1.0);
        assert!(matches!(eval_basis(&spec, 1.0001), Err(Error::OutOfDomain { .. })));
        assert!(matches!(eval_basis(&spec, -0.1), Err(Error::OutOfDomain { .. })));
        assert!(eval_basis(&spec, 1.0).is_ok());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for m in 1..8 {
            let (x, w) = gauss_legendre(m);
            for deg in 0..2 * m {
                let num: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert_abs_diff_eq!(num, exact, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn gram_matches_fine_trapezoid() {
        let spec = BasisSpec::new(4, 5, -1.0, 2.0, 2);
        let knots = make_knots(&spec).unwrap();
        let reduced = &knots[2..knots.len() - 2];
        let r = gram_matrix(reduced, 2);
        // trapezoid with 2e5 panels; piecewise-linear products are C0 so
        // the error is O(h²) ≈ 1e-10
        let n = 200_000;
        let h = 3.0 / n as f64;
        let nb = reduced.len() - 2;
        let mut oracle = DMatrix::zeros(nb, nb);
        for s in 0..=n {
            let x = -1.0 + h * s as f64;
            let w = if s == 0 || s == n { 0.5 * h } else { h };
            let b: Vec<f64> = (0..nb).map(|j| naive_b(reduced, j, 2, x)).collect();
            for i in 0..nb {
                for j in 0..nb {
                    oracle[(i, j)] += w * b[i] * b[j];
                }
            }
        }
        for i in 0..nb {
            for j in 0..nb {
                assert_abs_diff_eq!(r[(i, j)], oracle[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn penalty_annihilates_low_degree_polynomials() {
        // Greville abscissae reproduce linear functions exactly.
        for q in 1..4 {
            let spec = BasisSpec::new(4, 6, 0.0, 3.0, q);
            let s = penalty_matrix(&spec).unwrap();
            let t = make_knots(&spec).unwrap();
            let p = spec.n_basis();
            let constant = DVector::from_element(p, 1.0);
            assert!(constant.dot(&(&s * &constant)).abs() < 1e-10);
            if q >= 2 {
                let grev = DVector::from_iterator(p, (0..p).map(|j| (t[j + 1] + t[j + 2] + t[j + 3]) / 3.0));
                assert!(grev.dot(&(&s * &grev)).abs() < 1e-10);
            }
            let eig = SymmetricEigen::new(s.clone()).eigenvalues;
            let max = eig.max();
            assert!(eig.min() >= -1e-10 * max.max(1.0));
            let null = eig.iter().filter(|&&e| e.abs() < 1e-9 * max).count();
            assert_eq!(null, q);
        }
    }

    #[test]
    fn penalty_matches_integrated_squared_derivative() {
        // f(x) = x² on [0, 2]: ∫ (f'')² = 8, ∫ (f')² = 32/3
        let spec2 = BasisSpec::new(4, 4, 0.0, 2.0, 2);
        let spec1 = BasisSpec::new(4, 4, 0.0, 2.0, 1);
        let t = make_knots(&spec2).unwrap();
        let p = spec2.n_basis();
        // quadratic coefficients via blossoming: c_j = t_{j+1} t_{j+2} + t_{j+1} t_{j+3} + t_{j+2} t_{j+3}, over 3
        let c = DVector::from_iterator(
            p,
            (0..p).map(|j| (t[j + 1] * t[j + 2] + t[j + 1] * t[j + 3] + t[j + 2] * t[j + 3]) / 3.0),
        );
        for &x in &[0.3, 1.1, 1.9] {
            let b = eval_basis(&spec2, x).unwrap();
            let f: f64 = b.iter().zip(c.iter()).map(|(u, v)| u * v).sum();
            assert_abs_diff_eq!(f, x * x, epsilon = 1e-12);
        }
        let s2 = penalty_matrix(&spec2).unwrap();
        assert_abs_diff_eq!(c.dot(&(&s2 * &c)), 8.0, epsilon = 1e-10);
        let s1 = penalty_matrix(&spec1).unwrap();
        assert_abs_diff_eq!(c.dot(&(&s1 * &c)), 32.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn invalid_penalty_order() {
        assert!(matches!(
            penalty_matrix(&BasisSpec::new(4, 3, 0.0, 1.0, 4)),
            Err(Error::InvalidPenaltyOrder { .. })
        ));
        assert!(penalty_matrix(&BasisSpec::new(4, 3, 0.0, 1.0, 0)).is_err());
    }

    #[test]
    fn contrast_is_orthonormal_and_orthogonal_to_constraint() {
        let c = DVector::from_vec(vec![0.1, 0.3, 0.2, 0.25, 0.15]);
        let z = sum_to_zero_contrast(&c);
        assert_eq!(z.shape(), (5, 4));
        assert!((z.transpose() * &c).norm() < 1e-14);
        assert!((z.transpose() * &z - DMatrix::identity(4, 4)).norm() < 1e-14);
    }

    #[test]
    fn quantile_knots() {
        let v: Vec<f64> = (0..101).map(|i| (i as f64 / 100.0).powi(2)).collect();
        let spec = BasisSpec::for_data(&v, 4, 3, 2, true).unwrap();
        match &spec.placement {
            KnotPlacement::Explicit(k) => {
                assert_abs_diff_eq!(k[1], 0.25, epsilon = 1e-12);
            }
            _ => panic!("expected explicit knots"),
        }
    }
}
