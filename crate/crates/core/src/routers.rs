//! Token-to-expert routing: learned-λ Sparsegen routing and the TopK / ReLU
//! baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, dot, matvec, matvec_t_acc, sigmoid, softplus};
use crate::params::{Grads, ParamId, ParamStore};
use crate::simplex::{
    project_with_threshold, vjp, GateScores, RoutingWeights, SparsityFactor, MIN_ONE_MINUS_LAMBDA,
};

/// Linear gate `u = W x` with `W ∈ R^{E×d}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub weight: ParamId,
    pub num_experts: usize,
    pub feature_dim: usize,
}

impl GateParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        num_experts: usize,
        feature_dim: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.normal(name, vec![num_experts, feature_dim], std, seed, true)?;
        Ok(Self {
            weight,
            num_experts,
            feature_dim,
        })
    }
}

fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidArgument(format!(
            "{what}: expected feature dimension {expected}, got {got}"
        )));
    }
    Ok(())
}

pub fn gate_scores(store: &ParamStore, gate: &GateParams, x: &[f64]) -> Result<GateScores> {
    check_dim("gate", gate.feature_dim, x.len())?;
    let mut u = vec![0.0; gate.num_experts];
    matvec(store.get(gate.weight), gate.num_experts, gate.feature_dim, x, &mut u);
    GateScores::new(u)
}

/// Predicts the sparsity factor for a token feature.
///
/// Every variant ends in the squash `λ = 1 − softplus(raw)`, which maps the
/// real line onto `(−∞, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaHead {
    /// `raw = w2 · tanh(W1 x + b1) + b2`; shared across every wrapped module
    /// with the same input width.
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        input_dim: usize,
        hidden_dim: usize,
    },
    /// `raw = w · x + b`; one per wrapped module.
    Linear { w: ParamId, b: ParamId, input_dim: usize },
    /// Constant λ with no parameters. Used for fixed-λ ablations and tests.
    Fixed(f64),
}

impl LambdaHead {
    pub fn init_mlp(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let w1 = store.normal(
            format!("{prefix}.w1"),
            vec![hidden_dim, input_dim],
            (1.0 / input_dim as f64).sqrt(),
            seed,
            true,
        )?;
        let b1 = store.zeros(format!("{prefix}.b1"), vec![hidden_dim], true)?;
        let w2 = store.normal(format!("{prefix}.w2"), vec![hidden_dim], 0.02, seed, true)?;
        let b2 = store.zeros(format!("{prefix}.b2"), vec![1], true)?;
        Ok(Self::Mlp {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden_dim,
        })
    }

    pub fn init_linear(store: &mut ParamStore, prefix: &str, input_dim: usize, seed: u64) -> Result<Self> {
        let w = store.normal(format!("{prefix}.w"), vec![input_dim], 0.02, seed, true)?;
        let b = store.zeros(format!("{prefix}.b"), vec![1], true)?;
        Ok(Self::Linear { w, b, input_dim })
    }

    pub fn input_dim(&self) -> Option<usize> {
        match *self {
            Self::Mlp { input_dim, .. } | Self::Linear { input_dim, .. } => Some(input_dim),
            Self::Fixed(_) => None,
        }
    }
}

/// Intermediate values of one λ prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadCache {
    pub hidden: Vec<f64>,
    pub raw: f64,
}

fn squash(raw: f64) -> f64 {
    1.0 - softplus(raw).max(MIN_ONE_MINUS_LAMBDA)
}

pub fn predict_lambda(
    store: &ParamStore,
    head: &LambdaHead,
    x: &[f64],
) -> Result<(SparsityFactor, HeadCache)> {
    let (raw, hidden) = match *head {
        LambdaHead::Fixed(l) => return Ok((SparsityFactor::new(l)?, HeadCache::default())),
        LambdaHead::Mlp {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden_dim,
        } => {
            check_dim("lambda head", input_dim, x.len())?;
            let mut hidden = vec![0.0; hidden_dim];
            matvec(store.get(w1), hidden_dim, input_dim, x, &mut hidden);
            for (h, b) in hidden.iter_mut().zip(store.get(b1)) {
                *h = (*h + b).tanh();
            }
            (dot(store.get(w2), &hidden) + store.get(b2)[0], hidden)
        }
        LambdaHead::Linear { w, b, input_dim } => {
            check_dim("lambda head", input_dim, x.len())?;
            (dot(store.get(w), x) + store.get(b)[0], Vec::new())
        }
    };
    if !raw.is_finite() {
        return Err(Error::NonFinite(format!("lambda head pre-activation {raw}")));
    }
    Ok((SparsityFactor::new(squash(raw))?, HeadCache { hidden, raw }))
}

/// Backpropagates `∂L/∂λ` into the head parameters and the input feature.
pub fn lambda_head_backward(
    store: &ParamStore,
    head: &LambdaHead,
    x: &[f64],
    cache: &HeadCache,
    grad_lambda: f64,
    grads: &mut Grads,
    grad_x: &mut [f64],
) {
    if grad_lambda == 0.0 {
        return;
    }
    // dλ/draw = −sigmoid(raw)
    let g_raw = -grad_lambda * sigmoid(cache.raw);
    match *head {
        LambdaHead::Fixed(_) => {}
        LambdaHead::Mlp {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden_dim,
        } => {
            if let Some(g) = grads.slot_mut(b2) {
                g[0] += g_raw;
            }
            if let Some(g) = grads.slot_mut(w2) {
                for (gi, h) in g.iter_mut().zip(&cache.hidden) {
                    *gi += g_raw * h;
                }
            }
            let g_pre: Vec<f64> = store
                .get(w2)
                .iter()
                .zip(&cache.hidden)
                .map(|(w, h)| g_raw * w * (1.0 - h * h))
                .collect();
            if let Some(g) = grads.slot_mut(b1) {
                for (gi, d) in g.iter_mut().zip(&g_pre) {
                    *gi += d;
                }
            }
            if let Some(g) = grads.slot_mut(w1) {
                add_outer(g, &g_pre, x, 1.0);
            }
            matvec_t_acc(store.get(w1), hidden_dim, input_dim, &g_pre, grad_x);
        }
        LambdaHead::Linear { w, b, .. } => {
            if let Some(g) = grads.slot_mut(b) {
                g[0] += g_raw;
            }
            if let Some(g) = grads.slot_mut(w) {
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += g_raw * xi;
                }
            }
            for (gx, wi) in grad_x.iter_mut().zip(store.get(w)) {
                *gx += g_raw * wi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    /// Sparsegen with λ from an MLP shared by all modules of equal input width.
    LdShared,
    /// Sparsegen with λ from a linear map owned by each module.
    LdLocal,
    TopK(usize),
    Relu,
}

impl RouterKind {
    pub fn uses_lambda(self) -> bool {
        matches!(self, Self::LdShared | Self::LdLocal)
    }

    pub fn name(self) -> String {
        match self {
            Self::LdShared => "ld-shared".into(),
            Self::LdLocal => "ld-local".into(),
            Self::TopK(k) => format!("topk-{k}"),
            Self::Relu => "relu".into(),
        }
    }
}

/// Everything routing decided for one token at one wrapped module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingRecord {
    pub layer_id: usize,
    pub module_id: usize,
    /// Vocabulary id of the token being routed.
    pub token_id: u32,
    /// `(sequence index, position)` within the batch.
    pub position: (usize, usize),
    pub u: Vec<f64>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    /// Number of strictly positive entries of `p`.
    pub k_active: usize,
    /// Combination weights. ReLU routing stores raw, unnormalized weights.
    pub p: Vec<f64>,
}

impl RoutingRecord {
    fn new(u: &GateScores, weights: &RoutingWeights, lambda: Option<f64>, tau: Option<f64>) -> Self {
        Self {
            layer_id: 0,
            module_id: 0,
            token_id: 0,
            position: (0, 0),
            u: u.values().to_vec(),
            lambda,
            tau,
            k_active: weights.k(),
            p: weights.probs.clone(),
        }
    }
}

/// Softmax over the `k` largest scores; ties go to the lower index.
pub fn topk_route(u: &GateScores, k: usize) -> Result<RoutingWeights> {
    let v = u.values();
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let chosen = &order[..k];
    let m = v[chosen[0]];
    let mut probs = vec![0.0; v.len()];
    let mut z = 0.0;
    for &i in chosen {
        let e = (v[i] - m).exp();
        probs[i] = e;
        z += e;
    }
    for &i in chosen {
        probs[i] /= z;
    }
    Ok(RoutingWeights::from_probs(probs))
}

/// Elementwise `max(0, u)`, unnormalized; may be all zero.
pub fn relu_route(u: &GateScores) -> RoutingWeights {
    RoutingWeights::from_probs(u.values().iter().map(|&x| x.max(0.0)).collect())
}

/// Learned-λ Sparsegen routing for one token feature.
pub fn ld_route(
    store: &ParamStore,
    x: &[f64],
    gate: &GateParams,
    head: &LambdaHead,
) -> Result<(RoutingWeights, RoutingRecord)> {
    let u = gate_scores(store, gate, x)?;
    let (lambda, _) = predict_lambda(store, head, x)?;
    let (w, st) = project_with_threshold(&u, lambda);
    let rec = RoutingRecord::new(&u, &w, Some(lambda.get()), Some(st.tau));
    Ok((w, rec))
}

/// Pulls `∂L/∂p` back through the routing function recorded in `record`.
///
/// Returns `∂L/∂u` and, for λ-routers, `∂L/∂λ`. TopK treats the selected set
/// as constant; ReLU uses the subgradient `1{u > 0}`.
pub fn router_backward(
    kind: RouterKind,
    record: &RoutingRecord,
    grad_p: &[f64],
) -> Result<(Vec<f64>, Option<f64>)> {
    let e = record.p.len();
    if grad_p.len() != e || record.u.len() != e {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries for {e} experts",
            grad_p.len()
        )));
    }
    match kind {
        RouterKind::LdShared | RouterKind::LdLocal => {
            let lambda = record.lambda.ok_or_else(|| {
                Error::InvalidConfig("record has no sparsity factor for a λ-router".into())
            })?;
            let w = RoutingWeights::from_probs(record.p.clone());
            let (gu, gl) = vjp(&w, SparsityFactor::new(lambda)?, grad_p);
            Ok((gu, Some(gl)))
        }
        RouterKind::TopK(_) => {
            if record.lambda.is_some() {
                return Err(Error::InvalidConfig("top-k backward on a λ-router record".into()));
            }
            let mean: f64 = record.p.iter().zip(grad_p).map(|(p, g)| p * g).sum();
            let gu = record
                .p
                .iter()
                .zip(grad_p)
                .map(|(&p, &g)| if p > 0.0 { p * (g - mean) } else { 0.0 })
                .collect();
            Ok((gu, None))
        }
        RouterKind::Relu => {
            if record.lambda.is_some() {
                return Err(Error::InvalidConfig("relu backward on a λ-router record".into()));
            }
            let gu = record
                .u
                .iter()
                .zip(grad_p)
                .map(|(&u, &g)| if u > 0.0 { g } else { 0.0 })
                .collect();
            Ok((gu, None))
        }
    }
}

/// A configured router: gate plus, for λ-routers, a λ-head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Router {
    pub kind: RouterKind,
    pub gate: GateParams,
    pub head: Option<LambdaHead>,
}

/// Forward state needed by [`Router::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RouteCache {
    pub head: HeadCache,
}

impl Router {
    pub fn new(kind: RouterKind, gate: GateParams, head: Option<LambdaHead>) -> Result<Self> {
        match kind {
            RouterKind::LdShared | RouterKind::LdLocal if head.is_none() => {
                return Err(Error::InvalidConfig(format!("{} router needs a λ-head", kind.name())))
            }
            RouterKind::TopK(k) if k == 0 || k > gate.num_experts => {
                return Err(Error::InvalidConfig(format!(
                    "top-k needs 1 <= k <= {}, got {k}",
                    gate.num_experts
                )))
            }
            _ => {}
        }
        if let Some(d) = head.and_then(|h| h.input_dim()) {
            check_dim("lambda head", gate.feature_dim, d)?;
        }
        Ok(Self { kind, gate, head })
    }

    pub fn num_experts(&self) -> usize {
        self.gate.num_experts
    }

    pub fn route(&self, store: &ParamStore, x: &[f64]) -> Result<(RoutingRecord, RouteCache)> {
        let u = gate_scores(store, &self.gate, x)?;
        match self.kind {
            RouterKind::LdShared | RouterKind::LdLocal => {
                let head = self.head.as_ref().expect("checked in Router::new");
                let (lambda, hc) = predict_lambda(store, head, x)?;
                let (w, st) = project_with_threshold(&u, lambda);
                let rec = RoutingRecord::new(&u, &w, Some(lambda.get()), Some(st.tau));
                Ok((rec, RouteCache { head: hc }))
            }
            RouterKind::TopK(k) => {
                let w = topk_route(&u, k)?;
                Ok((RoutingRecord::new(&u, &w, None, None), RouteCache { head: HeadCache::default() }))
            }
            RouterKind::Relu => {
                let w = relu_route(&u);
                Ok((RoutingRecord::new(&u, &w, None, None), RouteCache { head: HeadCache::default() }))
            }
        }
    }

    /// Accumulates gradients of the gate and λ-head, and adds the router's
    /// contribution to `∂L/∂x`. `extra_grad_lambda` carries loss terms that
    /// act on λ directly (the sparsity hinge).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        record: &RoutingRecord,
        cache: &RouteCache,
        grad_p: &[f64],
        extra_grad_lambda: f64,
        grads: &mut Grads,
        grad_x: &mut [f64],
    ) -> Result<()> {
        let (grad_u, grad_lambda) = router_backward(self.kind, record, grad_p)?;
        let e = self.gate.num_experts;
        let d = self.gate.feature_dim;
        if let Some(g) = grads.slot_mut(self.gate.weight) {
            add_outer(g, &grad_u, x, 1.0);
        }
        matvec_t_acc(store.get(self.gate.weight), e, d, &grad_u, grad_x);
        if let (Some(head), Some(gl)) = (self.head.as_ref(), grad_lambda) {
            lambda_head_backward(store, head, x, &cache.head, gl + extra_grad_lambda, grads, grad_x);
        }
        Ok(())
    }
}
