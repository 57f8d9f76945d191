//! Named tensor storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor {name}: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.tensors.push(Tensor {
            name,
            shape,
            data,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>, trainable: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n], trainable)
    }

    /// Gaussian init drawn from a stream keyed by `(seed, name)`, so a
    /// tensor's values do not depend on which other tensors exist.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        seed: u64,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &name));
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.add(name, shape, data, trainable)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Gradient buffers; frozen tensors never get a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros_for(store: &ParamStore) -> Self {
        let slots = store
            .tensors
            .iter()
            .map(|t| t.trainable.then(|| vec![0.0; t.data.len()]))
            .collect();
        Self { slots }
    }

    /// Mutable buffer for a trainable tensor, `None` for frozen ones.
    pub fn slot_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.slots[id.0].as_deref_mut()
    }

    pub fn slot(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].as_deref()
    }

    pub fn has_slot(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }

    pub fn clear(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.slots.iter_mut().flatten() {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients down so their global norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|v| (ParamId(i), v)))
    }
}

/// Derives an independent 64-bit seed for a named stream.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(seed))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
