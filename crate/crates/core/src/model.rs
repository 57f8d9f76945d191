//! LoRA experts, the mixture-of-LoRA-experts projection and a small frozen
//! backbone that wraps two projections per block.
//!
//! Block layout, per position `t` (all base weights frozen):
//!
//! ```text
//! a_t  = x_t + M x_{t-1}                 token mixing, x_{-1} = 0
//! y_t  = x_t + tanh(MoLE_attn(a_t))      d → d
//! f_t  = tanh(W_up y_t)                  d → 4d, plain frozen map
//! x'_t = y_t + MoLE_down(f_t)            4d → d
//! ```
//!
//! Logits are a frozen linear readout of the last block's output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, dot, matvec, matvec_t_acc};
use crate::losses::AuxGrad;
use crate::params::{sub_seed, Grads, ParamId, ParamStore};
use crate::routers::{GateParams, LambdaHead, RouteCache, Router, RouterKind, RoutingRecord};

/// Std of the LoRA `A` factors and gate weights at init.
pub const ADAPTER_INIT_STD: f64 = 0.02;

pub const MODULE_ATTN: usize = 0;
pub const MODULE_DOWN: usize = 1;
pub const MODULE_NAMES: [&str; 2] = ["attn", "ffn_down"];

const FFN_MULT: usize = 4;

/// Readout scale; keeps untrained logits small so the initial loss sits near
/// chance level.
const HEAD_GAIN: f64 = 0.25;

/// Rank-`r` update `scaling · A B` with `A ∈ R^{d_out×r}`, `B ∈ R^{r×d_in}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraExpert {
    pub a: ParamId,
    pub b: ParamId,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraExpert {
    /// `A ~ N(0, 0.02²)`, `B = 0`, so the initial update is exactly zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::InvalidConfig(format!(
                "lora rank {rank} must lie in [1, min({d_out}, {d_in})]"
            )));
        }
        let a = store.normal(format!("{prefix}.a"), vec![d_out, rank], ADAPTER_INIT_STD, seed, true)?;
        let b = store.zeros(format!("{prefix}.b"), vec![rank, d_in], true)?;
        Ok(Self {
            a,
            b,
            d_out,
            d_in,
            rank,
            scaling: alpha / rank as f64,
        })
    }

    fn down_project(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.rank];
        matvec(store.get(self.b), self.rank, self.d_in, x, &mut z);
        z
    }

    fn up_project(&self, store: &ParamStore, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_out];
        matvec(store.get(self.a), self.d_out, self.rank, z, &mut out);
        out.iter_mut().for_each(|v| *v *= self.scaling);
        out
    }
}

/// `scaling · A (B x)`.
pub fn lora_delta(store: &ParamStore, expert: &LoraExpert, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != expert.d_in {
        return Err(Error::InvalidArgument(format!(
            "lora expert expects {} inputs, got {}",
            expert.d_in,
            x.len()
        )));
    }
    let z = expert.down_project(store, x);
    Ok(expert.up_project(store, &z))
}

/// A frozen projection plus `E` routed LoRA experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleLayer {
    pub w_base: ParamId,
    pub d_out: usize,
    pub d_in: usize,
    pub experts: Vec<LoraExpert>,
    pub router: Router,
    pub dropout: f64,
    pub layer_id: usize,
    pub module_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ExpertCache {
    idx: usize,
    z: Vec<f64>,
    delta: Vec<f64>,
    /// Inverted-dropout multipliers; `None` in eval mode.
    mask: Option<Vec<f64>>,
}

/// Forward state of one token through a [`MoleLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoleCache {
    pub x: Vec<f64>,
    pub record: RoutingRecord,
    route: RouteCache,
    active: Vec<ExpertCache>,
}

impl MoleLayer {
    pub fn new(
        w_base: ParamId,
        d_out: usize,
        d_in: usize,
        experts: Vec<LoraExpert>,
        router: Router,
        dropout: f64,
    ) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidConfig("a MoLE layer needs at least one expert".into()));
        }
        if experts.len() != router.num_experts() {
            return Err(Error::InvalidConfig(format!(
                "{} experts but the router scores {}",
                experts.len(),
                router.num_experts()
            )));
        }
        let r0 = experts[0].rank;
        if experts.iter().any(|e| e.d_out != d_out || e.d_in != d_in || e.rank != r0) {
            return Err(Error::InvalidConfig("experts must share (d_out, d_in, rank)".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        Ok(Self {
            w_base,
            d_out,
            d_in,
            experts,
            router,
            dropout,
            layer_id: 0,
            module_id: 0,
        })
    }

    pub fn with_site(mut self, layer_id: usize, module_id: usize) -> Self {
        self.layer_id = layer_id;
        self.module_id = module_id;
        self
    }

    /// `h = W_base x + Σ_i p_i · drop(ΔW_i x)`. Dropout only applies when an
    /// RNG is supplied (training mode).
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[f64],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, MoleCache)> {
        if x.len() != self.d_in {
            return Err(Error::InvalidArgument(format!(
                "MoLE layer expects {} inputs, got {}",
                self.d_in,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "input to layer {} module {}",
                self.layer_id, MODULE_NAMES[self.module_id.min(1)]
            )));
        }
        let mut h = vec![0.0; self.d_out];
        matvec(store.get(self.w_base), self.d_out, self.d_in, x, &mut h);
        let (mut record, route) = self.router.route(store, x)?;
        record.layer_id = self.layer_id;
        record.module_id = self.module_id;

        let keep = 1.0 - self.dropout;
        let mut active = Vec::with_capacity(record.k_active);
        for (idx, &p) in record.p.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let ex = &self.experts[idx];
            let z = ex.down_project(store, x);
            let delta = ex.up_project(store, &z);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => Some(
                    (0..self.d_out)
                        .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { 1.0 / keep })
                        .collect::<Vec<_>>(),
                ),
                _ => None,
            };
            match &mask {
                Some(m) => {
                    for ((hi, di), mi) in h.iter_mut().zip(&delta).zip(m) {
                        *hi += p * di * mi;
                    }
                }
                None => {
                    for (hi, di) in h.iter_mut().zip(&delta) {
                        *hi += p * di;
                    }
                }
            }
            active.push(ExpertCache { idx, z, delta, mask });
        }
        Ok((
            h,
            MoleCache {
                x: x.to_vec(),
                record,
                route,
                active,
            },
        ))
    }

    /// Accumulates parameter gradients and adds `∂L/∂x` into `grad_x`.
    ///
    /// `aux_grad_p` and `aux_grad_lambda` are gradients injected by the
    /// auxiliary losses directly at the routing weights and λ. The frozen
    /// base weight never receives a gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MoleCache,
        grad_h: &[f64],
        aux_grad_p: Option<&[f64]>,
        aux_grad_lambda: f64,
        grads: &mut Grads,
        grad_x: &mut [f64],
    ) -> Result<()> {
        if grad_h.len() != self.d_out || grad_x.len() != self.d_in {
            return Err(Error::InvalidArgument("gradient shape does not match the layer".into()));
        }
        if cache.x.len() != self.d_in || cache.record.p.len() != self.experts.len() {
            return Err(Error::InvalidArgument("cache was not produced by this layer".into()));
        }
        let x = &cache.x;
        matvec_t_acc(store.get(self.w_base), self.d_out, self.d_in, grad_h, grad_x);

        let mut grad_p = match aux_grad_p {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.experts.len()],
        };
        let mut g_delta = vec![0.0; self.d_out];
        let mut g_z = vec![0.0; self.experts[0].rank];
        for ec in &cache.active {
            let ex = &self.experts[ec.idx];
            let p = cache.record.p[ec.idx];
            match &ec.mask {
                Some(m) => {
                    grad_p[ec.idx] += grad_h.iter().zip(&ec.delta).zip(m).map(|((g, d), m)| g * d * m).sum::<f64>();
                    for ((gd, g), m) in g_delta.iter_mut().zip(grad_h).zip(m) {
                        *gd = p * g * m;
                    }
                }
                None => {
                    grad_p[ec.idx] += dot(grad_h, &ec.delta);
                    for (gd, g) in g_delta.iter_mut().zip(grad_h) {
                        *gd = p * g;
                    }
                }
            }
            if let Some(ga) = grads.slot_mut(ex.a) {
                add_outer(ga, &g_delta, &ec.z, ex.scaling);
            }
            g_z.fill(0.0);
            matvec_t_acc(store.get(ex.a), ex.d_out, ex.rank, &g_delta, &mut g_z);
            g_z.iter_mut().for_each(|v| *v *= ex.scaling);
            if let Some(gb) = grads.slot_mut(ex.b) {
                add_outer(gb, &g_z, x, 1.0);
            }
            matvec_t_acc(store.get(ex.b), ex.rank, ex.d_in, &g_z, grad_x);
        }
        self.router.backward(
            store,
            x,
            &cache.record,
            &cache.route,
            &grad_p,
            aux_grad_lambda,
            grads,
            grad_x,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub num_experts: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
    /// Hidden width of the shared λ-MLP.
    pub lambda_hidden: usize,
    pub router: RouterKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 32,
            vocab: 256,
            num_classes: 4,
            num_experts: 8,
            lora_rank: 4,
            lora_alpha: 8.0,
            dropout: 0.1,
            lambda_hidden: 32,
            router: RouterKind::LdShared,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint as `field: message`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                out.push(msg.to_string());
            }
        };
        need(self.layers >= 1, "layers: must be >= 1");
        need(self.dim >= 1, "dim: must be >= 1");
        need(self.vocab >= 1, "vocab: must be >= 1");
        need(self.num_classes >= 2, "num_classes: must be >= 2");
        need(self.num_experts >= 1, "num_experts: must be >= 1");
        need(
            self.lora_rank >= 1 && self.lora_rank <= self.dim,
            "lora_rank: must lie in [1, dim]",
        );
        need(
            self.lora_alpha.is_finite() && self.lora_alpha > 0.0,
            "lora_alpha: must be positive",
        );
        need((0.0..1.0).contains(&self.dropout), "dropout: must lie in [0, 1)");
        need(self.lambda_hidden >= 1, "lambda_hidden: must be >= 1");
        if let RouterKind::TopK(k) = self.router {
            need(k >= 1 && k <= self.num_experts, "router: top_k must lie in [1, num_experts]");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: MoleLayer,
    pub up: ParamId,
    pub down: MoleLayer,
}

/// The frozen toy backbone with MoLE-wrapped projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub mix: ParamId,
    pub blocks: Vec<Block>,
    pub head: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockCache {
    attn: Vec<MoleCache>,
    attn_act: Vec<Vec<f64>>,
    down: Vec<MoleCache>,
}

/// Forward state of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqForward {
    pub logits: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
}

impl SeqForward {
    /// Records in `(layer, module, position)` order.
    pub fn records(&self) -> impl Iterator<Item = &RoutingRecord> {
        self.blocks
            .iter()
            .flat_map(|b| b.attn.iter().chain(b.down.iter()).map(|c| &c.record))
    }
}

/// Token ids, class targets and loss mask for a batch of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub token_ids: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub mask: Vec<Vec<u8>>,
}

impl TokenBatch {
    pub fn validate(&self) -> Result<()> {
        let b = self.token_ids.len();
        if self.targets.len() != b || self.mask.len() != b {
            return Err(Error::InvalidArgument("batch fields have different lengths".into()));
        }
        for i in 0..b {
            let t = self.token_ids[i].len();
            if self.targets[i].len() != t || self.mask[i].len() != t {
                return Err(Error::InvalidArgument(format!("sequence {i} has ragged fields")));
            }
            if self.mask[i].iter().any(|&m| m > 1) {
                return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
            }
        }
        Ok(())
    }
}

impl Model {
    /// Builds a model. Frozen tensors and adapters draw from per-name streams,
    /// so routers that differ only in kind share every other initial value.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.dim;
        let d_ff = FFN_MULT * d;
        let mut s = ParamStore::new();
        let embedding = s.normal("embed", vec![c.vocab, d], 1.0, seed, false)?;
        let mix = s.normal("mix", vec![d, d], 0.5 / (d as f64).sqrt(), seed, false)?;

        let mut shared_heads: Vec<(usize, LambdaHead)> = Vec::new();
        let mut make_router = |s: &mut ParamStore, prefix: &str, d_in: usize| -> Result<Router> {
            let gate = GateParams::init(s, &format!("{prefix}.gate"), c.num_experts, d_in, ADAPTER_INIT_STD, seed)?;
            let head = match c.router {
                RouterKind::LdShared => Some(match shared_heads.iter().find(|(dim, _)| *dim == d_in) {
                    Some(&(_, h)) => h,
                    None => {
                        let h = LambdaHead::init_mlp(s, &format!("lambda.shared.d{d_in}"), d_in, c.lambda_hidden, seed)?;
                        shared_heads.push((d_in, h));
                        h
                    }
                }),
                RouterKind::LdLocal => Some(LambdaHead::init_linear(s, &format!("{prefix}.lambda"), d_in, seed)?),
                RouterKind::TopK(_) | RouterKind::Relu => None,
            };
            Router::new(c.router, gate, head)
        };

        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let mut wrap = |s: &mut ParamStore, name: &str, d_out: usize, d_in: usize, module: usize| -> Result<MoleLayer> {
                let prefix = format!("block{l}.{name}");
                let base = s.normal(format!("{prefix}.base"), vec![d_out, d_in], 1.0 / (d_in as f64).sqrt(), seed, false)?;
                let experts = (0..c.num_experts)
                    .map(|i| LoraExpert::init(s, &format!("{prefix}.expert{i}"), d_out, d_in, c.lora_rank, c.lora_alpha, seed))
                    .collect::<Result<Vec<_>>>()?;
                let router = make_router(s, &prefix, d_in)?;
                Ok(MoleLayer::new(base, d_out, d_in, experts, router, c.dropout)?.with_site(l, module))
            };
            let attn = wrap(&mut s, MODULE_NAMES[MODULE_ATTN], d, d, MODULE_ATTN)?;
            let up = s.normal(format!("block{l}.up"), vec![d_ff, d], 1.0 / (d as f64).sqrt(), seed, false)?;
            let down = wrap(&mut s, MODULE_NAMES[MODULE_DOWN], d, d_ff, MODULE_DOWN)?;
            blocks.push(Block { attn, up, down });
        }
        let head = s.normal("head", vec![c.num_classes, d], HEAD_GAIN / (d as f64).sqrt(), seed, false)?;
        // start from values the checkpoint format stores exactly, so frozen
        // tensors survive a save/load unchanged
        s.round_to_f32();
        Ok(Self {
            config: c.clone(),
            store: s,
            embedding,
            mix,
            blocks,
            head,
        })
    }

    pub fn wrapped_modules(&self) -> usize {
        2 * self.blocks.len()
    }

    fn layers(&self) -> impl Iterator<Item = &MoleLayer> {
        self.blocks.iter().flat_map(|b| [&b.attn, &b.down])
    }

    pub fn forward_seq(
        &self,
        seq_index: usize,
        tokens: &[u32],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SeqForward> {
        let d = self.config.dim;
        let d_ff = FFN_MULT * d;
        let st = &self.store;
        let emb = st.get(self.embedding);
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let t = tok as usize;
            if t >= self.config.vocab {
                return Err(Error::InvalidArgument(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
            xs.push(emb[t * d..(t + 1) * d].to_vec());
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut mixed = vec![0.0; d];
        let mut pre = vec![0.0; d_ff];
        for blk in &self.blocks {
            let mut cache = BlockCache {
                attn: Vec::with_capacity(tokens.len()),
                attn_act: Vec::with_capacity(tokens.len()),
                down: Vec::with_capacity(tokens.len()),
            };
            let mut next = Vec::with_capacity(tokens.len());
            for t in 0..tokens.len() {
                let mut a = xs[t].clone();
                if t > 0 {
                    matvec(st.get(self.mix), d, d, &xs[t - 1], &mut mixed);
                    a.iter_mut().zip(&mixed).for_each(|(ai, mi)| *ai += mi);
                }
                let (o, mut ac) = blk.attn.forward(st, &a, dropout_rng.as_deref_mut())?;
                let act: Vec<f64> = o.iter().map(|v| v.tanh()).collect();
                let y: Vec<f64> = xs[t].iter().zip(&act).map(|(x, a)| x + a).collect();
                matvec(st.get(blk.up), d_ff, d, &y, &mut pre);
                let f: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                let (g, mut dc) = blk.down.forward(st, &f, dropout_rng.as_deref_mut())?;
                let out: Vec<f64> = y.iter().zip(&g).map(|(y, g)| y + g).collect();
                for c in [&mut ac, &mut dc] {
                    c.record.token_id = tokens[t];
                    c.record.position = (seq_index, t);
                }
                cache.attn.push(ac);
                cache.attn_act.push(act);
                cache.down.push(dc);
                next.push(out);
            }
            xs = next;
            blocks.push(cache);
        }

        let c = self.config.num_classes;
        let logits = xs
            .iter()
            .map(|x| {
                let mut z = vec![0.0; c];
                matvec(st.get(self.head), c, d, x, &mut z);
                z
            })
            .collect::<Vec<_>>();
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits of sequence {seq_index}")));
        }
        Ok(SeqForward { logits, blocks })
    }

    /// Backpropagates `∂L/∂logits` plus the auxiliary-loss gradients.
    pub fn backward_seq(
        &self,
        fwd: &SeqForward,
        grad_logits: &[Vec<f64>],
        aux: &AuxGrad,
        grads: &mut Grads,
    ) -> Result<()> {
        let d = self.config.dim;
        let d_ff = FFN_MULT * d;
        let c = self.config.num_classes;
        let st = &self.store;
        let n = grad_logits.len();
        if n != fwd.logits.len() {
            return Err(Error::InvalidArgument("gradient length differs from the forward pass".into()));
        }
        let mut gx: Vec<Vec<f64>> = grad_logits
            .iter()
            .map(|g| {
                let mut v = vec![0.0; d];
                matvec_t_acc(st.get(self.head), c, d, g, &mut v);
                v
            })
            .collect();

        for (blk, cache) in self.blocks.iter().zip(&fwd.blocks).rev() {
            let mut g_in = vec![vec![0.0; d]; n];
            let mut g_a = vec![vec![0.0; d]; n];
            let mut g_f = vec![0.0; d_ff];
            let mut g_pre = vec![0.0; d_ff];
            for t in 0..n {
                // x' = y + down(f(y))
                let dc = &cache.down[t];
                g_f.fill(0.0);
                blk.down.backward(
                    st,
                    dc,
                    &gx[t],
                    aux.grad_p(dc.record.layer_id, dc.record.module_id),
                    aux.grad_lambda(&dc.record)?,
                    grads,
                    &mut g_f,
                )?;
                for ((gp, gf), f) in g_pre.iter_mut().zip(&g_f).zip(&dc.x) {
                    *gp = gf * (1.0 - f * f);
                }
                let mut g_y = gx[t].clone();
                matvec_t_acc(st.get(blk.up), d_ff, d, &g_pre, &mut g_y);

                // y = x + tanh(attn(a))
                let ac = &cache.attn[t];
                let g_o: Vec<f64> = g_y
                    .iter()
                    .zip(&cache.attn_act[t])
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
                blk.attn.backward(
                    st,
                    ac,
                    &g_o,
                    aux.grad_p(ac.record.layer_id, ac.record.module_id),
                    aux.grad_lambda(&ac.record)?,
                    grads,
                    &mut g_a[t],
                )?;
                g_in[t].iter_mut().zip(&g_y).for_each(|(a, b)| *a += b);
            }
            // a_t = x_t + M x_{t-1}
            for t in 0..n {
                g_in[t].iter_mut().zip(&g_a[t]).for_each(|(a, b)| *a += b);
                if t > 0 {
                    matvec_t_acc(st.get(self.mix), d, d, &g_a[t], &mut g_in[t - 1]);
                }
            }
            gx = g_in;
        }
        Ok(())
    }

    /// Dropout stream for one sequence at one optimizer step.
    pub fn dropout_rng(seed: u64, step: u64, seq_index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(sub_seed(seed ^ step.rotate_left(17), &format!("dropout/{seq_index}")))
    }

    /// All trainable-parameter gradients for a single loss-free check:
    /// runs `forward_seq` in eval mode.
    pub fn forward_eval(&self, seq_index: usize, tokens: &[u32]) -> Result<SeqForward> {
        self.forward_seq(seq_index, tokens, None)
    }

    pub fn frozen_tensors(&self) -> Vec<(&str, &[f64])> {
        self.store
            .tensors()
            .iter()
            .filter(|t| !t.trainable)
            .map(|t| (t.name.as_str(), t.data.as_slice()))
            .collect()
    }

    pub fn layer(&self, layer: usize, module: usize) -> Option<&MoleLayer> {
        self.layers().nth(2 * layer + module)
    }
}

/// Per-position class logits of one sequence.
pub type SeqLogits = Vec<Vec<f64>>;

/// Logits for every sequence and the routing records of the whole batch,
/// ordered by `(sequence, layer, module, position)`.
pub fn model_forward(
    model: &Model,
    batch: &TokenBatch,
    train_mode: Option<(u64, u64)>,
) -> Result<(Vec<SeqLogits>, Vec<RoutingRecord>)> {
    batch.validate()?;
    let mut logits = Vec::with_capacity(batch.token_ids.len());
    let mut records = Vec::new();
    for (i, toks) in batch.token_ids.iter().enumerate() {
        let mut rng = train_mode.map(|(seed, step)| Model::dropout_rng(seed, step, i));
        let fwd = model.forward_seq(i, toks, rng.as_mut())?;
        records.extend(fwd.records().cloned());
        logits.push(fwd.logits);
    }
    Ok((logits, records))
}
