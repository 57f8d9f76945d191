//! Closed-form Sparsegen projection onto the probability simplex.
//!
//! For scores `u ∈ R^E` and a sparsity factor `λ < 1` the projection solves
//!
//! ```text
//! p = argmin ‖p − u‖² − λ‖p‖²   s.t. p ≥ 0, 1ᵀp = 1
//! ```
//!
//! whose solution is `p_i = [(u_i − τ)/(1 − λ)]₊` with `τ = (U_k − 1 + λ)/k`,
//! `U_k` the sum of the `k` largest scores and `k` the largest index with
//! `1 − λ + k·u_(k) > U_k`. Since `k = 1` always satisfies that inequality,
//! the support is never empty.
//!
//! Sorting is stable: descending by value, ties broken by ascending index.

use crate::error::{Error, Result};

/// Lower clamp on `1 − λ` in divisions.
pub const MIN_ONE_MINUS_LAMBDA: f64 = 1e-12;

/// Expert scores for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores(Vec<f64>);

impl GateScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("gate scores must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gate score {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<&[f64]> for GateScores {
    type Error = Error;
    fn try_from(v: &[f64]) -> Result<Self> {
        Self::new(v.to_vec())
    }
}

/// The sparsity factor λ, strictly below one.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SparsityFactor(f64);

impl SparsityFactor {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda == f64::NEG_INFINITY {
            return Err(Error::InvalidInput(format!("sparsity factor {lambda} is not finite")));
        }
        if lambda >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "sparsity factor must be < 1, got {lambda}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `1 − λ`, clamped away from zero.
    pub fn gap(self) -> f64 {
        (1.0 - self.0).max(MIN_ONE_MINUS_LAMBDA)
    }
}

/// Support size, threshold and sorted prefix sums for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportThreshold {
    pub k: usize,
    pub tau: f64,
    /// `U_1 ..= U_E` over the descending order.
    pub sorted_prefix_sums: Vec<f64>,
    /// Expert indices in descending score order.
    pub order: Vec<usize>,
}

/// A point on the simplex together with its support.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    pub probs: Vec<f64>,
    /// Indices with strictly positive weight, ascending.
    pub support: Vec<usize>,
}

impl RoutingWeights {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let support = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect();
        Self { probs, support }
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }
}

/// Derivatives of the projection at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingJacobian {
    pub num_experts: usize,
    /// Row-major `E × E`; entry `(i, j)` is `∂p_i/∂u_j`.
    pub d_p_d_u: Vec<f64>,
    pub d_p_d_lambda: Vec<f64>,
}

impl RoutingJacobian {
    pub fn du(&self, i: usize, j: usize) -> f64 {
        self.d_p_d_u[i * self.num_experts + j]
    }
}

/// The set of λ producing exactly `k_target` active experts.
///
/// `lower` is inclusive and equals `−∞` when `k_target = E`; `upper` is
/// exclusive. The interval is empty when scores tie across the cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaInterval {
    pub k_target: usize,
    pub lower: f64,
    pub upper: f64,
}

impl LambdaInterval {
    pub fn is_empty(&self) -> bool {
        self.lower >= self.upper
    }

    pub fn contains(&self, lambda: f64) -> bool {
        lambda >= self.lower && lambda < self.upper
    }

    /// A representative interior point: the midpoint for bounded intervals,
    /// `upper − 1` for the unbounded `k = E` case.
    pub fn midpoint(&self) -> Option<f64> {
        if self.is_empty() {
            None
        } else if self.lower == f64::NEG_INFINITY {
            Some(self.upper - 1.0)
        } else {
            Some(0.5 * (self.lower + self.upper))
        }
    }
}

fn descending_order(u: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..u.len()).collect();
    // sort_by is stable, so equal scores keep ascending index order
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]));
    order
}

fn prefix_sums(u: &[f64], order: &[usize]) -> Vec<f64> {
    let mut acc = 0.0;
    order
        .iter()
        .map(|&i| {
            acc += u[i];
            acc
        })
        .collect()
}

pub fn support_and_threshold(u: &GateScores, lambda: SparsityFactor) -> SupportThreshold {
    let v = u.values();
    let order = descending_order(v);
    let sums = prefix_sums(v, &order);
    let gap = lambda.gap();
    let mut k = 1;
    for (idx, (&i, &uk)) in order.iter().zip(&sums).enumerate() {
        let kk = (idx + 1) as f64;
        if gap + kk * v[i] > uk {
            k = idx + 1;
        }
    }
    let tau = (sums[k - 1] - gap) / k as f64;
    SupportThreshold {
        k,
        tau,
        sorted_prefix_sums: sums,
        order,
    }
}

/// Projection plus the threshold data it was computed from.
pub fn project_with_threshold(
    u: &GateScores,
    lambda: SparsityFactor,
) -> (RoutingWeights, SupportThreshold) {
    let st = support_and_threshold(u, lambda);
    let gap = lambda.gap();
    let v = u.values();
    let mut probs = vec![0.0; v.len()];
    for &i in &st.order[..st.k] {
        probs[i] = ((v[i] - st.tau) / gap).max(0.0);
    }
    (RoutingWeights::from_probs(probs), st)
}

pub fn sparsegen_project(u: &GateScores, lambda: SparsityFactor) -> RoutingWeights {
    project_with_threshold(u, lambda).0
}

/// Sparsegen at `λ = 0`.
pub fn sparsemax(u: &GateScores) -> RoutingWeights {
    sparsegen_project(u, SparsityFactor(0.0))
}

/// Exact piecewise-linear derivatives on the current support.
///
/// On the support `S` (size `k`): `∂p_i/∂u_j = (δ_ij − 1/k)/(1 − λ)` and
/// `∂p_i/∂λ = (p_i − 1/k)/(1 − λ)`; everything off `S` is zero. At tie points
/// this is the one-sided derivative of the branch the sort selected.
pub fn jacobian(u: &GateScores, lambda: SparsityFactor) -> RoutingJacobian {
    let w = sparsegen_project(u, lambda);
    jacobian_from_weights(&w, lambda)
}

pub fn jacobian_from_weights(w: &RoutingWeights, lambda: SparsityFactor) -> RoutingJacobian {
    let e = w.probs.len();
    let gap = lambda.gap();
    let k = w.k() as f64;
    let mut d_p_d_u = vec![0.0; e * e];
    let mut d_p_d_lambda = vec![0.0; e];
    for &i in &w.support {
        for &j in &w.support {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_p_d_u[i * e + j] = (delta - 1.0 / k) / gap;
        }
        d_p_d_lambda[i] = (w.probs[i] - 1.0 / k) / gap;
    }
    RoutingJacobian {
        num_experts: e,
        d_p_d_u,
        d_p_d_lambda,
    }
}

/// Vector-Jacobian product: pulls `∂L/∂p` back to `(∂L/∂u, ∂L/∂λ)` in O(E).
pub fn vjp(w: &RoutingWeights, lambda: SparsityFactor, grad_p: &[f64]) -> (Vec<f64>, f64) {
    let gap = lambda.gap();
    let k = w.k() as f64;
    let mut grad_u = vec![0.0; w.probs.len()];
    if w.support.is_empty() {
        return (grad_u, 0.0);
    }
    let mean_g = w.support.iter().map(|&i| grad_p[i]).sum::<f64>() / k;
    let mut grad_lambda = 0.0;
    for &i in &w.support {
        grad_u[i] = (grad_p[i] - mean_g) / gap;
        grad_lambda += grad_p[i] * (w.probs[i] - 1.0 / k) / gap;
    }
    (grad_u, grad_lambda)
}

fn check_k(e: usize, k_target: usize) -> Result<()> {
    if k_target == 0 || k_target > e {
        return Err(Error::InvalidArgument(format!(
            "k_target must lie in [1, {e}], got {k_target}"
        )));
    }
    Ok(())
}

pub fn lambda_interval(u: &GateScores, k_target: usize) -> Result<LambdaInterval> {
    let v = u.values();
    let e = v.len();
    check_k(e, k_target)?;
    let order = descending_order(v);
    let sums = prefix_sums(v, &order);
    let k = k_target as f64;
    let uk = sums[k_target - 1];
    let upper = 1.0 - (uk - k * v[order[k_target - 1]]);
    let lower = if k_target == e {
        f64::NEG_INFINITY
    } else {
        1.0 - (uk - k * v[order[k_target]])
    };
    Ok(LambdaInterval {
        k_target,
        lower,
        upper,
    })
}

/// Inclusive lower end of [`lambda_interval`]; `−∞` for `k_target = E`.
pub fn lambda_lower(u: &GateScores, k_target: usize) -> Result<f64> {
    Ok(lambda_interval(u, k_target)?.lower)
}
