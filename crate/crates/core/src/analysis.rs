//! Routing-behaviour tables computed from one eval-mode pass.
//!
//! CSV schemas (column order fixed, `.` decimal separator):
//!
//! | file | columns |
//! |---|---|
//! | `per_layer_activation.csv` | `layer,module,mean_active_experts` |
//! | `lambda_quantiles.csv` | `layer,module,q25,q50,q75` (λ-routers only) |
//! | `freq_activation.csv` | `token_id,frequency_rank,count,mean_active_experts` |
//! | `epoch_heatmap.csv` | `epoch,layer,expert,routing_mass_fraction` |
//! | `zero_activation.csv` | `layer,fraction_of_tokens_with_empty_support` |
//!
//! Frequencies are counted over the analysed dataset itself.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::{Model, MODULE_NAMES};
use crate::train::for_each_record;

/// Number of most frequent tokens in the frequency table.
pub const FREQ_TOP_TOKENS: usize = 200;

/// Tolerance on per-(epoch, layer) routing-mass sums.
pub const MASS_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub layer: usize,
    pub module: String,
    pub mean_active_experts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaQuantileRow {
    pub layer: usize,
    pub module: String,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqRow {
    pub token_id: u32,
    /// 1 for the most frequent token.
    pub frequency_rank: usize,
    pub count: u64,
    pub mean_active_experts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub epoch: usize,
    pub layer: usize,
    pub expert: usize,
    pub routing_mass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroActivationRow {
    pub layer: usize,
    pub fraction_of_tokens_with_empty_support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisTables {
    pub per_layer_activation: Vec<ActivationRow>,
    /// `None` for routers without λ.
    pub lambda_quantiles: Option<Vec<LambdaQuantileRow>>,
    pub freq_activation: Vec<FreqRow>,
    /// Spearman correlation of frequency rank against mean active experts;
    /// `None` when it is undefined (fewer than two tokens or a constant column).
    pub freq_rank_correlation: Option<f64>,
    pub epoch_heatmap: Vec<HeatmapRow>,
    pub zero_activation: Vec<ZeroActivationRow>,
    /// For λ-routers: whether the last layer activates fewer experts than the first.
    pub active_decreases_with_depth: Option<bool>,
}

/// Linear-interpolation quantile of sorted data (`q ∈ [0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Rows of the heatmap from `[epoch][layer][expert]` mass shares.
pub fn heatmap_rows(epoch_mass: &[Vec<Vec<f64>>], first_epoch: usize) -> Vec<HeatmapRow> {
    let mut rows = Vec::new();
    for (e, layers) in epoch_mass.iter().enumerate() {
        for (layer, experts) in layers.iter().enumerate() {
            for (expert, &f) in experts.iter().enumerate() {
                rows.push(HeatmapRow {
                    epoch: first_epoch + e,
                    layer,
                    expert,
                    routing_mass_fraction: f,
                });
            }
        }
    }
    rows
}

/// One eval-mode pass over `data`. `epoch` labels the heatmap rows.
pub fn analyze(model: &Model, data: &SyntheticDataset, epoch: usize) -> Result<AnalysisTables> {
    let layers = model.config.layers;
    let experts = model.config.num_experts;
    let uses_lambda = model.config.router.uses_lambda();
    let mut active: BTreeMap<(usize, usize), (f64, u64)> = BTreeMap::new();
    let mut lambdas: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut token_active: Vec<(f64, u64)> = vec![(0.0, 0); model.config.vocab];
    let mut mass = vec![vec![0.0; experts]; layers];
    let mut zero = vec![(0u64, 0u64); layers];
    for_each_record(model, data, |r| {
        let a = active.entry((r.layer_id, r.module_id)).or_insert((0.0, 0));
        a.0 += r.k_active as f64;
        a.1 += 1;
        if let Some(l) = r.lambda {
            lambdas.entry((r.layer_id, r.module_id)).or_default().push(l);
        }
        let t = &mut token_active[r.token_id as usize];
        t.0 += r.k_active as f64;
        t.1 += 1;
        for (m, p) in mass[r.layer_id].iter_mut().zip(&r.p) {
            *m += p;
        }
        zero[r.layer_id].0 += u64::from(r.k_active == 0);
        zero[r.layer_id].1 += 1;
    })?;
    if active.is_empty() {
        return Err(Error::InvalidInput("analysis dataset produced no routing records".into()));
    }

    let per_layer_activation = active
        .iter()
        .map(|(&(layer, module), &(s, n))| ActivationRow {
            layer,
            module: MODULE_NAMES[module].to_string(),
            mean_active_experts: s / n as f64,
        })
        .collect::<Vec<_>>();

    let lambda_quantiles = uses_lambda.then(|| {
        lambdas
            .iter_mut()
            .map(|(&(layer, module), v)| {
                v.sort_by(f64::total_cmp);
                LambdaQuantileRow {
                    layer,
                    module: MODULE_NAMES[module].to_string(),
                    q25: quantile_sorted(v, 0.25),
                    q50: quantile_sorted(v, 0.5),
                    q75: quantile_sorted(v, 0.75),
                }
            })
            .collect()
    });

    let counts = data.token_counts();
    let mut by_freq: Vec<u32> = (0..counts.len() as u32).filter(|&t| counts[t as usize] > 0).collect();
    by_freq.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let freq_activation: Vec<FreqRow> = by_freq
        .iter()
        .take(FREQ_TOP_TOKENS)
        .enumerate()
        .map(|(i, &t)| {
            let (s, n) = token_active[t as usize];
            FreqRow {
                token_id: t,
                frequency_rank: i + 1,
                count: counts[t as usize],
                mean_active_experts: s / n as f64,
            }
        })
        .collect();
    let freq_rank_correlation = spearman(
        &freq_activation.iter().map(|r| r.frequency_rank as f64).collect::<Vec<_>>(),
        &freq_activation.iter().map(|r| r.mean_active_experts).collect::<Vec<_>>(),
    );

    for row in &mut mass {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    let epoch_heatmap = heatmap_rows(&[mass], epoch);

    let zero_activation = zero
        .iter()
        .enumerate()
        .map(|(layer, &(z, n))| ZeroActivationRow {
            layer,
            fraction_of_tokens_with_empty_support: if n == 0 { 0.0 } else { z as f64 / n as f64 },
        })
        .collect();

    let layer_mean = |l: usize| {
        let (s, n) = active
            .range((l, 0)..(l + 1, 0))
            .fold((0.0, 0u64), |(s, n), (_, &(a, b))| (s + a, n + b));
        s / n as f64
    };
    let active_decreases_with_depth = uses_lambda.then(|| layer_mean(layers - 1) < layer_mean(0));

    Ok(AnalysisTables {
        per_layer_activation,
        lambda_quantiles,
        freq_activation,
        freq_rank_correlation,
        epoch_heatmap,
        zero_activation,
        active_decreases_with_depth,
    })
}

/// Checks the documented invariants: fractions in `[0, 1]`, heatmap mass per
/// `(epoch, layer)` summing to 1 (or 0 when nothing was routed), ranks
/// consecutive from 1.
pub fn check_tables(t: &AnalysisTables) -> Result<()> {
    let bad = |m: String| Err(Error::Format(m));
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in &t.epoch_heatmap {
        if !(0.0..=1.0 + MASS_SUM_TOL).contains(&r.routing_mass_fraction) {
            return bad(format!("routing mass fraction {} outside [0, 1]", r.routing_mass_fraction));
        }
        *sums.entry((r.epoch, r.layer)).or_default() += r.routing_mass_fraction;
    }
    for ((e, l), s) in sums {
        if (s - 1.0).abs() > MASS_SUM_TOL && s != 0.0 {
            return bad(format!("epoch {e} layer {l}: routing mass sums to {s}"));
        }
    }
    for r in &t.zero_activation {
        if !(0.0..=1.0).contains(&r.fraction_of_tokens_with_empty_support) {
            return bad(format!("layer {}: zero-activation fraction out of range", r.layer));
        }
    }
    for (i, r) in t.freq_activation.iter().enumerate() {
        if r.frequency_rank != i + 1 {
            return bad("frequency ranks are not consecutive".into());
        }
        if i > 0 && r.count > t.freq_activation[i - 1].count {
            return bad("frequency table is not sorted by count".into());
        }
    }
    if let Some(q) = &t.lambda_quantiles {
        if q.iter().any(|r| !(r.q25 <= r.q50 && r.q50 <= r.q75 && r.q75 < 1.0)) {
            return bad("λ quantiles are not ordered below 1".into());
        }
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes the tables into `dir`; returns the file names written.
pub fn write_tables(t: &AnalysisTables, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        f(&dir.join(name))?;
        written.push(name.to_string());
        Ok(())
    };
    put("per_layer_activation.csv", &|p| write_csv(p, &t.per_layer_activation))?;
    if let Some(q) = &t.lambda_quantiles {
        put("lambda_quantiles.csv", &|p| write_csv(p, q))?;
    }
    put("freq_activation.csv", &|p| write_csv(p, &t.freq_activation))?;
    put("epoch_heatmap.csv", &|p| write_csv(p, &t.epoch_heatmap))?;
    put("zero_activation.csv", &|p| write_csv(p, &t.zero_activation))?;
    Ok(written)
}

/// Single-token sequences ordered by how often the token's routing support
/// comes out empty, most often first. Useful for probing unnormalized routers.
pub fn empty_support_probe(model: &Model, seq_len: usize, take: usize) -> Result<Vec<Vec<u32>>> {
    let mut scored = Vec::with_capacity(model.config.vocab);
    for t in 0..model.config.vocab as u32 {
        let seq = vec![t; seq_len];
        let fwd = model.forward_seq(0, &seq, None)?;
        let empty = fwd.records().filter(|r| r.k_active == 0).count();
        scored.push((empty, t));
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(take).map(|(_, t)| vec![t; seq_len]).collect())
}
