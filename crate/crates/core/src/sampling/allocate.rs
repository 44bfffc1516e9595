use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DressError, Result};
use crate::net::params::ParamStore;
use crate::net::spec::NetworkSpec;
use crate::par;
use crate::sampling::mask::{Mask, MaskSet, SubnetMask};
use crate::sampling::rows::{sample_rows_with, RowView, Support};

/// Per-row nonzero counts of one sampled layer at every level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub layer: usize,
    pub name: String,
    pub rows: usize,
    pub row_len: usize,
    /// `N^nz_k`, non-increasing in k.
    pub counts: Vec<usize>,
}

impl LayerAllocation {
    pub fn view(&self) -> RowView {
        RowView {
            layer: self.layer,
            rows: self.rows,
            row_len: self.row_len,
        }
    }

    /// Layer sparsity `s_{k,l}` at level `k` (0-based).
    pub fn sparsity(&self, k: usize) -> f64 {
        1.0 - self.counts[k] as f64 / self.row_len as f64
    }

    pub fn nnz(&self, k: usize) -> usize {
        self.counts[k] * self.rows
    }
}

/// The K overall sparsity levels and their per-layer, row-uniform allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityLadder {
    pub levels: Vec<f64>,
    pub layers: Vec<LayerAllocation>,
}

/// Checks `0 <= s_1 < s_2 < ... < s_K <= 1`.
pub fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(DressError::config("sparsity ladder is empty"));
    }
    if levels.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(DressError::config(format!("sparsity levels {:?} must lie in [0, 1]", levels)));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DressError::config(format!(
            "sparsity levels {:?} must be strictly increasing",
            levels
        )));
    }
    Ok(())
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Number of weights a level keeps out of `total`.
pub fn budget(sparsity: f64, total: usize) -> usize {
    round_half_up((1.0 - sparsity) * total as f64).min(total)
}

impl SparsityLadder {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Every layer at the overall level: `N^nz_k = round((1 - s_k) * N)`.
    pub fn uniform(net: &NetworkSpec, levels: &[f64]) -> Result<Self> {
        validate_levels(levels)?;
        let layers = sampled_views(net)?
            .into_iter()
            .map(|(name, v)| {
                let mut counts: Vec<usize> = levels.iter().map(|&s| budget(s, v.row_len)).collect();
                repair_monotone(&mut counts);
                LayerAllocation {
                    layer: v.layer,
                    name,
                    rows: v.rows,
                    row_len: v.row_len,
                    counts,
                }
            })
            .collect();
        Ok(SparsityLadder {
            levels: levels.to_vec(),
            layers,
        })
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerAllocation> {
        self.layers.iter().find(|a| a.layer == layer)
    }

    /// Total sampled weights `I`.
    pub fn total(&self) -> usize {
        self.layers.iter().map(|a| a.rows * a.row_len).sum()
    }

    pub fn nnz(&self, k: usize) -> usize {
        self.layers.iter().map(|a| a.nnz(k)).sum()
    }

    /// Achieved overall sparsity at 0-based level `k`.
    pub fn achieved(&self, k: usize) -> f64 {
        1.0 - self.nnz(k) as f64 / self.total().max(1) as f64
    }

    /// Audit dump: layer name to per-level `N^nz`.
    pub fn counts_by_name(&self) -> BTreeMap<String, Vec<usize>> {
        self.layers
            .iter()
            .map(|a| (a.name.clone(), a.counts.clone()))
            .collect()
    }

    pub fn check_against(&self, net: &NetworkSpec) -> Result<()> {
        validate_levels(&self.levels)?;
        let views = sampled_views(net)?;
        if views.len() != self.layers.len() {
            return Err(DressError::config("allocation does not cover every sampled layer"));
        }
        for ((_, v), a) in views.iter().zip(&self.layers) {
            if a.view() != *v || a.counts.len() != self.levels.len() {
                return Err(DressError::config(format!("allocation for {} is inconsistent", a.name)));
            }
            if a.counts.windows(2).any(|w| w[1] > w[0]) || a.counts[0] > a.row_len {
                return Err(DressError::config(format!("counts for {} are not a valid ladder", a.name)));
            }
        }
        Ok(())
    }
}

pub(crate) fn sampled_views(net: &NetworkSpec) -> Result<Vec<(String, RowView)>> {
    net.sampled_layers()
        .into_iter()
        .map(|i| Ok((net.layers[i].name.clone(), RowView::reshape_rows(i, &net.layers[i], None)?)))
        .collect()
}

fn repair_monotone(counts: &mut [usize]) {
    for k in 1..counts.len() {
        counts[k] = counts[k].min(counts[k - 1]);
    }
}

/// Global magnitude allocation: for each level, the `(1 - s_k) * I` largest
/// magnitudes over all sampled layers form the budget; each layer's share is
/// turned into a row-uniform count `round(selected / H)`.
pub fn allocate_layerwise(net: &NetworkSpec, params: &ParamStore<f32>, levels: &[f64]) -> Result<SparsityLadder> {
    let supports: Vec<Support<'_>> = vec![Support::All; net.sampled_layers().len()];
    allocate_with(net, params, levels, &supports)
}

/// [`allocate_layerwise`] with a per-sampled-layer support restriction.
pub fn allocate_with(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    levels: &[f64],
    supports: &[Support<'_>],
) -> Result<SparsityLadder> {
    validate_levels(levels)?;
    let views = sampled_views(net)?;
    if views.is_empty() {
        return Err(DressError::config("network has no conv or fc layers to sample"));
    }
    assert_eq!(views.len(), supports.len(), "one support per sampled layer");

    // (tier, magnitude, layer position, flat index)
    let mut entries: Vec<(u8, f32, u32, u32)> = Vec::new();
    let mut total = 0usize;
    for (pos, ((_, v), support)) in views.iter().zip(supports).enumerate() {
        let w = params
            .weight(v.layer)
            .ok_or_else(|| DressError::shape(format!("layer {} has no weights", v.layer)))?
            .data();
        total += w.len();
        for (j, x) in w.iter().enumerate() {
            let tier = support.tier(j);
            if tier < 2 {
                entries.push((tier, x.abs(), pos as u32, j as u32));
            }
        }
    }
    entries.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then_with(|| a.2.cmp(&b.2))
            .then_with(|| a.3.cmp(&b.3))
    });

    let k_levels = levels.len();
    let mut selected = vec![vec![0usize; k_levels]; views.len()];
    let mut running = vec![0usize; views.len()];
    let budgets: Vec<usize> = levels.iter().map(|&s| budget(s, total).min(entries.len())).collect();
    let mut cursor = 0;
    // Budgets shrink with k, so walk the sorted list once from the smallest.
    for k in (0..k_levels).rev() {
        while cursor < budgets[k] {
            running[entries[cursor].2 as usize] += 1;
            cursor += 1;
        }
        for (pos, r) in running.iter().enumerate() {
            selected[pos][k] = *r;
        }
    }

    let layers = views
        .into_iter()
        .zip(supports)
        .enumerate()
        .map(|(pos, ((name, v), support))| {
            let (lo, hi) = support_row_bounds(support, &v);
            let mut counts: Vec<usize> = selected[pos]
                .iter()
                .map(|&c| round_half_up(c as f64 / v.rows as f64).clamp(lo, hi))
                .collect();
            repair_monotone(&mut counts);
            LayerAllocation {
                layer: v.layer,
                name,
                rows: v.rows,
                row_len: v.row_len,
                counts,
            }
        })
        .collect();
    Ok(SparsityLadder {
        levels: levels.to_vec(),
        layers,
    })
}

/// Row-count bounds implied by a support: at least every preferred entry of
/// an extending support, at most the eligible entries of a restricting one.
fn support_row_bounds(support: &Support<'_>, v: &RowView) -> (usize, usize) {
    match support {
        Support::All => (0, v.row_len),
        Support::Within(m) => (0, m.row_counts(v.row_len).into_iter().min().unwrap_or(0)),
        Support::Extending(m) => (
            m.row_counts(v.row_len).into_iter().max().unwrap_or(0),
            v.row_len,
        ),
        Support::Between { keep, within } => (
            keep.row_counts(v.row_len).into_iter().max().unwrap_or(0),
            within.row_counts(v.row_len).into_iter().min().unwrap_or(0),
        ),
    }
}

/// Samples all K masks from the current weights under an allocation.
pub fn sample_masks(net: &NetworkSpec, params: &ParamStore<f32>, ladder: &SparsityLadder) -> Result<MaskSet> {
    let supports = vec![Support::All; ladder.layers.len()];
    sample_masks_with(net, params, ladder, &supports)
}

pub fn sample_masks_with(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    ladder: &SparsityLadder,
    supports: &[Support<'_>],
) -> Result<MaskSet> {
    let per_layer: Vec<Result<Vec<Mask>>> = par::map_range(ladder.layers.len(), |i| {
        let a = &ladder.layers[i];
        let w = params
            .weight(a.layer)
            .ok_or_else(|| DressError::shape(format!("layer {} has no weights", a.layer)))?;
        sample_rows_with(w.data(), &a.view(), &a.counts, supports[i])
    });
    let mut levels: Vec<Vec<Option<Mask>>> = vec![vec![None; net.layers.len()]; ladder.len()];
    for (a, masks) in ladder.layers.iter().zip(per_layer) {
        for (k, m) in masks?.into_iter().enumerate() {
            levels[k][a.layer] = Some(m);
        }
    }
    Ok(MaskSet::new(levels.into_iter().map(SubnetMask::new).collect()))
}

/// Per-level global magnitude cut-offs `t_k`: the magnitude of the
/// `((1 - s_k) * I)`-th largest sampled weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Threshold {
    pub values: Vec<f32>,
}

pub fn global_thresholds(net: &NetworkSpec, params: &ParamStore<f32>, levels: &[f64]) -> Result<Threshold> {
    validate_levels(levels)?;
    let mut mags: Vec<f32> = net
        .sampled_layers()
        .into_iter()
        .filter_map(|i| params.weight(i))
        .flat_map(|w| w.data().iter().map(|x| x.abs()))
        .collect();
    mags.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let values = levels
        .iter()
        .map(|&s| match budget(s, mags.len()) {
            0 => f32::INFINITY,
            n => mags[n - 1],
        })
        .collect();
    Ok(Threshold { values })
}

impl Threshold {
    /// Unstructured masks `|w| >= t_k` over every sampled layer.
    pub fn masks(&self, net: &NetworkSpec, params: &ParamStore<f32>) -> MaskSet {
        MaskSet::new(
            self.values
                .iter()
                .map(|&t| {
                    SubnetMask::new(
                        (0..net.layers.len())
                            .map(|i| {
                                params.weight(i).filter(|_| net.layers[i].is_sampled()).map(|w| {
                                    Mask::from_bits(w.data().iter().map(|x| x.abs() >= t).collect())
                                })
                            })
                            .collect(),
                    )
                })
                .collect(),
        )
    }
}

/// Outcome of one epoch's validation average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochOutcome {
    /// Strictly above every earlier epoch: snapshot weights and masks.
    Improved,
    /// Not strictly above the best so far: re-allocate.
    Stalled,
}

/// Tracks the best validation average seen so far.
#[derive(Clone, Debug, Default)]
pub struct StallMonitor {
    best: Option<f64>,
}

impl StallMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, average: f64) -> EpochOutcome {
        match self.best {
            Some(b) if average <= b => EpochOutcome::Stalled,
            _ => {
                self.best = Some(average);
                EpochOutcome::Improved
            }
        }
    }
}

/// Feeds one epoch average to the monitor; on a stall returns a fresh
/// allocation computed from the current weights.
pub fn reallocate_on_stall(
    monitor: &mut StallMonitor,
    average: f64,
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    ladder: &SparsityLadder,
) -> Result<Option<SparsityLadder>> {
    match monitor.observe(average) {
        EpochOutcome::Improved => Ok(None),
        EpochOutcome::Stalled => allocate_layerwise(net, params, &ladder.levels).map(Some),
    }
}
