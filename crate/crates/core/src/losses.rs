//! Masked LM loss, load balancing, the sparsity hinge and their weighted sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::routers::RoutingRecord;
use crate::simplex::{lambda_lower, GateScores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Load-balance coefficient.
    pub alpha: f64,
    /// Sparsity coefficient.
    pub beta: f64,
    /// Largest number of active experts the sparsity hinge tolerates.
    pub k_target: usize,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.k_target == 0 {
            return Err(Error::InvalidConfig("k_target must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over masked positions, with `∂L/∂logits`.
///
/// `logits[i]` holds the class scores of position `i`; unmasked positions get
/// a zero gradient.
pub fn masked_cross_entropy_with_grad(
    logits: &[Vec<f64>],
    targets: &[u32],
    mask: &[u8],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "logits/targets/mask lengths differ: {}/{}/{}",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m != 0).count();
    if n == 0 {
        return Err(Error::InvalidInput("mask selects no positions".into()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        let mut g = vec![0.0; row.len()];
        if m != 0 {
            let t = t as usize;
            if t >= row.len() {
                return Err(Error::InvalidArgument(format!("target {t} out of {} classes", row.len())));
            }
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for (gi, &z) in g.iter_mut().zip(row) {
                *gi = (z - lse).exp() * inv;
            }
            g[t] -= inv;
        }
        grads.push(g);
    }
    Ok((loss * inv, grads))
}

pub fn masked_cross_entropy(logits: &[Vec<f64>], targets: &[u32], mask: &[u8]) -> Result<f64> {
    masked_cross_entropy_with_grad(logits, targets, mask).map(|(l, _)| l)
}

/// Dispatch and probability fractions of one routing site over a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRoutingStats {
    /// `F_i`: share of tokens with `p_i > 0`.
    pub dispatch_fraction: Vec<f64>,
    /// `P_i`: mean routing weight of expert `i`.
    pub prob_fraction: Vec<f64>,
    pub token_count: usize,
}

pub fn accumulate_stats<'a, I>(records: I) -> Result<BatchRoutingStats>
where
    I: IntoIterator<Item = &'a RoutingRecord>,
{
    let mut f: Vec<f64> = Vec::new();
    let mut p: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for r in records {
        if t == 0 {
            f = vec![0.0; r.p.len()];
            p = vec![0.0; r.p.len()];
        } else if r.p.len() != f.len() {
            return Err(Error::InvalidArgument("records disagree on the expert count".into()));
        }
        for (i, &pi) in r.p.iter().enumerate() {
            if pi > 0.0 {
                f[i] += 1.0;
            }
            p[i] += pi;
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::InvalidInput("no routing records".into()));
    }
    let inv = 1.0 / t as f64;
    f.iter_mut().for_each(|x| *x *= inv);
    p.iter_mut().for_each(|x| *x *= inv);
    Ok(BatchRoutingStats {
        dispatch_fraction: f,
        prob_fraction: p,
        token_count: t,
    })
}

/// `E · Σ F_i P_i`.
pub fn load_balance_loss(stats: &BatchRoutingStats) -> f64 {
    let e = stats.dispatch_fraction.len() as f64;
    e * stats
        .dispatch_fraction
        .iter()
        .zip(&stats.prob_fraction)
        .map(|(f, p)| f * p)
        .sum::<f64>()
}

/// Groups records by `(layer, module)`, in that order.
pub fn stats_by_site(records: &[RoutingRecord]) -> Result<BTreeMap<(usize, usize), BatchRoutingStats>> {
    let mut groups: BTreeMap<(usize, usize), Vec<&RoutingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.layer_id, r.module_id)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, v)| accumulate_stats(v).map(|s| (k, s)))
        .collect()
}

/// Load balance averaged over routing sites.
pub fn site_mean_load_balance(stats: &BTreeMap<(usize, usize), BatchRoutingStats>) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.values().map(load_balance_loss).sum::<f64>() / stats.len() as f64
}

/// Per-record hinge `ReLU(λ_lower(k; u) − λ)` with `u` held constant.
pub fn sparsity_hinge(record: &RoutingRecord, k_target: usize) -> Result<f64> {
    let lambda = record.lambda.ok_or_else(|| {
        Error::InvalidConfig("sparsity loss needs a router that predicts lambda".into())
    })?;
    let e = record.u.len();
    if k_target >= e {
        return Ok(0.0);
    }
    let lower = lambda_lower(&GateScores::new(record.u.clone())?, k_target)?;
    Ok((lower - lambda).max(0.0))
}

/// Mean hinge over all records.
pub fn sparsity_loss(records: &[RoutingRecord], k_target: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no routing records".into()));
    }
    let mut acc = 0.0;
    for r in records {
        acc += sparsity_hinge(r, k_target)?;
    }
    Ok(acc / records.len() as f64)
}

/// `∂ sparsity_loss / ∂λ` for one record of a batch of `n`: `−1/n` on an
/// active hinge, else 0.
pub fn sparsity_grad_lambda(record: &RoutingRecord, k_target: usize, n: usize) -> Result<f64> {
    Ok(if sparsity_hinge(record, k_target)? > 0.0 {
        -1.0 / n as f64
    } else {
        0.0
    })
}

pub fn total_loss(lm: f64, lb: f64, sparse: f64, w: &LossWeights) -> f64 {
    lm + w.alpha * lb + w.beta * sparse
}

/// Gradients the auxiliary losses inject at each routing site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuxGrad {
    /// `∂(α·L_lb)/∂p_i` for every token at a site, keyed by `(layer, module)`.
    /// `F` is held constant.
    pub lb_grad_p: BTreeMap<(usize, usize), Vec<f64>>,
    /// `β / N` where `N` counts λ-records in the batch; zero disables the hinge.
    pub sparsity_scale: f64,
    pub k_target: usize,
}

impl AuxGrad {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn grad_p(&self, layer: usize, module: usize) -> Option<&[f64]> {
        self.lb_grad_p.get(&(layer, module)).map(|v| v.as_slice())
    }

    pub fn grad_lambda(&self, record: &RoutingRecord) -> Result<f64> {
        if self.sparsity_scale == 0.0 || record.lambda.is_none() {
            return Ok(0.0);
        }
        Ok(if sparsity_hinge(record, self.k_target)? > 0.0 {
            -self.sparsity_scale
        } else {
            0.0
        })
    }
}

/// Auxiliary loss values and their injected gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLosses {
    pub lb: f64,
    pub sparse: f64,
    pub grad: AuxGrad,
}

pub fn aux_losses(records: &[RoutingRecord], w: &LossWeights, uses_lambda: bool) -> Result<AuxLosses> {
    let stats = stats_by_site(records)?;
    let lb = site_mean_load_balance(&stats);
    let sites = stats.len().max(1) as f64;
    let lb_grad_p = stats
        .iter()
        .map(|(&site, s)| {
            let e = s.dispatch_fraction.len() as f64;
            let scale = w.alpha * e / (sites * s.token_count as f64);
            (site, s.dispatch_fraction.iter().map(|f| scale * f).collect())
        })
        .collect();
    // baselines have no λ to regularize
    let (sparse, sparsity_scale) = if uses_lambda && !records.is_empty() {
        let s = sparsity_loss(records, w.k_target)?;
        (s, w.beta / records.len() as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(AuxLosses {
        lb,
        sparse,
        grad: AuxGrad {
            lb_grad_p,
            sparsity_scale,
            k_target: w.k_target,
        },
    })
}
