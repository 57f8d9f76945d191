//! Training and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{make_dataset, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses::{aux_losses, masked_cross_entropy_with_grad, total_loss, LossWeights};
use crate::model::{Model, SeqForward, TokenBatch};
use crate::optim::{adamw_step, lr_at, AdamState};
use crate::params::{sub_seed, Grads};
use crate::routers::RoutingRecord;

/// One line of the metrics stream. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsEvent {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub lm_loss: f64,
    pub lb_loss: f64,
    pub sparse_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
    pub mean_active_experts: f64,
    pub active_experts_per_layer: Vec<f64>,
    /// `null` entries for routers without λ.
    pub mean_lambda_per_layer: Vec<Option<f64>>,
    pub zero_activation_rate: f64,
}

/// Running routing statistics per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingSummary {
    active_sum: Vec<f64>,
    lambda_sum: Vec<f64>,
    lambda_count: Vec<u64>,
    count: Vec<u64>,
    zero: u64,
}

impl RoutingSummary {
    pub fn new(layers: usize) -> Self {
        Self {
            active_sum: vec![0.0; layers],
            lambda_sum: vec![0.0; layers],
            lambda_count: vec![0; layers],
            count: vec![0; layers],
            zero: 0,
        }
    }

    pub fn add(&mut self, r: &RoutingRecord) {
        let l = r.layer_id;
        self.active_sum[l] += r.k_active as f64;
        self.count[l] += 1;
        if let Some(lam) = r.lambda {
            self.lambda_sum[l] += lam;
            self.lambda_count[l] += 1;
        }
        if r.k_active == 0 {
            self.zero += 1;
        }
    }

    pub fn records(&self) -> u64 {
        self.count.iter().sum()
    }

    pub fn mean_active(&self) -> f64 {
        let n = self.records();
        if n == 0 {
            0.0
        } else {
            self.active_sum.iter().sum::<f64>() / n as f64
        }
    }

    pub fn active_per_layer(&self) -> Vec<f64> {
        self.active_sum
            .iter()
            .zip(&self.count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn lambda_per_layer(&self) -> Vec<Option<f64>> {
        self.lambda_sum
            .iter()
            .zip(&self.lambda_count)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    pub fn zero_activation_rate(&self) -> f64 {
        let n = self.records();
        if n == 0 {
            0.0
        } else {
            self.zero as f64 / n as f64
        }
    }
}

/// Loss and routing aggregates over a span of batches.
#[derive(Debug, Clone, PartialEq)]
struct Accumulator {
    ce_sum: f64,
    correct: u64,
    scored: u64,
    lb_sum: f64,
    sparse_sum: f64,
    batches: u64,
    routing: RoutingSummary,
}

impl Accumulator {
    fn new(layers: usize) -> Self {
        Self {
            ce_sum: 0.0,
            correct: 0,
            scored: 0,
            lb_sum: 0.0,
            sparse_sum: 0.0,
            batches: 0,
            routing: RoutingSummary::new(layers),
        }
    }

    fn event(&self, step: u64, epoch: usize, split: &str, w: &LossWeights) -> MetricsEvent {
        let lm = self.ce_sum / self.scored.max(1) as f64;
        let b = self.batches.max(1) as f64;
        let (lb, sparse) = (self.lb_sum / b, self.sparse_sum / b);
        MetricsEvent {
            step,
            epoch,
            split: split.to_string(),
            lm_loss: lm,
            lb_loss: lb,
            sparse_loss: sparse,
            total_loss: total_loss(lm, lb, sparse, w),
            accuracy: self.correct as f64 / self.scored.max(1) as f64,
            mean_active_experts: self.routing.mean_active(),
            active_experts_per_layer: self.routing.active_per_layer(),
            mean_lambda_per_layer: self.routing.lambda_per_layer(),
            zero_activation_rate: self.routing.zero_activation_rate(),
        }
    }
}

/// Result of one batch forward pass with losses.
struct BatchPass {
    fwd: Vec<SeqForward>,
    grad_logits: Vec<Vec<f64>>,
    lm: f64,
    ce_sum: f64,
    scored: u64,
    correct: u64,
    lb: f64,
    sparse: f64,
    aux: crate::losses::AuxGrad,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn run_batch(model: &Model, batch: &TokenBatch, w: &LossWeights, dropout: Option<(u64, u64)>) -> Result<BatchPass> {
    batch.validate()?;
    let mut fwd = Vec::with_capacity(batch.token_ids.len());
    for (i, toks) in batch.token_ids.iter().enumerate() {
        let mut rng = dropout.map(|(seed, step)| Model::dropout_rng(seed, step, i));
        fwd.push(model.forward_seq(i, toks, rng.as_mut())?);
    }
    let logits: Vec<Vec<f64>> = fwd.iter().flat_map(|f| f.logits.iter().cloned()).collect();
    let targets: Vec<u32> = batch.targets.iter().flatten().copied().collect();
    let mask: Vec<u8> = batch.mask.iter().flatten().copied().collect();
    let (lm, grad_logits) = masked_cross_entropy_with_grad(&logits, &targets, &mask)?;
    let scored = mask.iter().filter(|&&m| m == 1).count() as u64;
    let correct = logits
        .iter()
        .zip(&targets)
        .zip(&mask)
        .filter(|((z, &y), &m)| m == 1 && argmax(z) == y as usize)
        .count() as u64;
    let records: Vec<RoutingRecord> = fwd.iter().flat_map(|f| f.records().cloned()).collect();
    let aux = aux_losses(&records, w, model.config.router.uses_lambda())?;
    Ok(BatchPass {
        fwd,
        grad_logits,
        lm,
        ce_sum: lm * scored as f64,
        scored,
        correct,
        lb: aux.lb,
        sparse: aux.sparse,
        aux: aux.grad,
    })
}

impl BatchPass {
    fn record_into(&self, acc: &mut Accumulator) {
        acc.ce_sum += self.ce_sum;
        acc.scored += self.scored;
        acc.correct += self.correct;
        acc.lb_sum += self.lb;
        acc.sparse_sum += self.sparse;
        acc.batches += 1;
        for f in &self.fwd {
            for r in f.records() {
                acc.routing.add(r);
            }
        }
    }
}

/// Eval-mode metrics over a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub lm_loss: f64,
    pub lb_loss: f64,
    pub sparse_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
    pub mean_active_experts: f64,
    pub active_experts_per_layer: Vec<f64>,
    pub mean_lambda_per_layer: Vec<Option<f64>>,
    pub zero_activation_rate: f64,
}

impl From<MetricsEvent> for EvalResult {
    fn from(e: MetricsEvent) -> Self {
        Self {
            lm_loss: e.lm_loss,
            lb_loss: e.lb_loss,
            sparse_loss: e.sparse_loss,
            total_loss: e.total_loss,
            accuracy: e.accuracy,
            mean_active_experts: e.mean_active_experts,
            active_experts_per_layer: e.active_experts_per_layer,
            mean_lambda_per_layer: e.mean_lambda_per_layer,
            zero_activation_rate: e.zero_activation_rate,
        }
    }
}

fn eval_event(
    model: &Model,
    data: &SyntheticDataset,
    w: &LossWeights,
    batch_size: usize,
    step: u64,
    epoch: usize,
) -> Result<MetricsEvent> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let mut acc = Accumulator::new(model.config.layers);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        run_batch(model, &data.batch(chunk), w, None)?.record_into(&mut acc);
    }
    Ok(acc.event(step, epoch, data.split.name(), w))
}

/// Dropout off, fixed batch order: repeated calls give identical numbers.
pub fn evaluate(model: &Model, data: &SyntheticDataset, w: &LossWeights, batch_size: usize) -> Result<EvalResult> {
    eval_event(model, data, w, batch_size, 0, 0).map(EvalResult::from)
}

/// Calls `f` on every routing record of an eval-mode pass, in
/// `(sequence, layer, module, position)` order, with sequence indices
/// relative to the whole dataset.
pub fn for_each_record(model: &Model, data: &SyntheticDataset, mut f: impl FnMut(&RoutingRecord)) -> Result<()> {
    for (i, ex) in data.examples.iter().enumerate() {
        let fwd = model.forward_seq(i, &ex.tokens, None)?;
        fwd.records().for_each(&mut f);
    }
    Ok(())
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub events: Vec<MetricsEvent>,
    /// Eval-mode LM loss on the training split before the first step.
    pub initial_train_lm: f64,
    pub final_train: EvalResult,
    pub final_val: Option<EvalResult>,
    /// `[epoch][layer][expert]` share of routing mass during each epoch.
    pub epoch_mass: Vec<Vec<Vec<f64>>>,
}

fn check_finite(step: u64, epoch: usize, pass: &BatchPass) -> Result<()> {
    if pass.lm.is_finite() && pass.lb.is_finite() && pass.sparse.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "step {step} (epoch {epoch}): lm_loss={} lb_loss={} sparse_loss={}",
        pass.lm, pass.lb, pass.sparse
    )))
}

/// Trains from scratch. `on_event` sees every metrics event as it is made.
pub fn train(cfg: &TrainConfig, mut on_event: impl FnMut(&MetricsEvent) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let w = cfg.loss_weights();
    let t = &cfg.train;
    let train_set = make_dataset(&cfg.data, mcfg.vocab, mcfg.num_classes, cfg.seed, Split::Train)?;
    let val_set = if cfg.data.val_sequences > 0 {
        Some(make_dataset(&cfg.data, mcfg.vocab, mcfg.num_classes, cfg.seed, Split::Val)?)
    } else {
        None
    };
    let mut model = Model::init(&mcfg, cfg.seed)?;
    let mut opt = AdamState::new(&model.store);
    let mut grads = Grads::zeros_for(&model.store);
    let adam = cfg.adamw();
    let layers = mcfg.layers;
    let experts = mcfg.num_experts;

    let mut events = Vec::new();
    let mut emit = |e: MetricsEvent, events: &mut Vec<MetricsEvent>| -> Result<()> {
        on_event(&e)?;
        events.push(e);
        Ok(())
    };

    let initial = eval_event(&model, &train_set, &w, t.batch_size, 0, 0)?;
    let initial_train_lm = initial.lm_loss;
    emit(initial, &mut events)?;

    let mut step: u64 = 0;
    let mut epoch_mass = Vec::with_capacity(t.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..t.epochs {
        let lr = lr_at(epoch, t.lr, &t.lr_milestones, t.lr_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);
        let mut window = Accumulator::new(layers);
        let mut mass = vec![vec![0.0; experts]; layers];
        for chunk in order.chunks(t.batch_size) {
            step += 1;
            let batch = train_set.batch(chunk);
            let pass = run_batch(&model, &batch, &w, Some((cfg.seed, step))).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step} (epoch {epoch}): {m}")),
                e => e,
            })?;
            check_finite(step, epoch, &pass)?;
            grads.clear();
            let mut offset = 0;
            for f in &pass.fwd {
                let n = f.logits.len();
                model.backward_seq(f, &pass.grad_logits[offset..offset + n], &pass.aux, &mut grads)?;
                offset += n;
            }
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step} (epoch {epoch}): non-finite gradient, lm_loss={}",
                    pass.lm
                )));
            }
            if t.grad_clip > 0.0 {
                grads.clip_global_norm(t.grad_clip);
            }
            adamw_step(&mut model.store, &grads, &mut opt, lr, &adam)?;
            for f in &pass.fwd {
                for r in f.records() {
                    for (m, p) in mass[r.layer_id].iter_mut().zip(&r.p) {
                        *m += p;
                    }
                }
            }
            pass.record_into(&mut window);
            if step.is_multiple_of(t.log_every as u64) {
                emit(window.event(step, epoch, "train", &w), &mut events)?;
                window = Accumulator::new(layers);
            }
        }
        for row in &mut mass {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        epoch_mass.push(mass);
        if let Some(val) = &val_set {
            emit(eval_event(&model, val, &w, t.batch_size, step, epoch)?, &mut events)?;
        }
    }

    // final numbers describe exactly what a checkpoint would hold
    model.store.round_to_f32();
    let final_train = eval_event(&model, &train_set, &w, t.batch_size, step, t.epochs)?;
    emit(final_train.clone(), &mut events)?;
    let final_val = match &val_set {
        Some(v) => Some(evaluate(&model, v, &w, t.batch_size)?),
        None => None,
    };
    Ok(TrainOutcome {
        model,
        events,
        initial_train_lm,
        final_train: final_train.into(),
        final_val,
        epoch_mass,
    })
}
