use std::cmp::Ordering;

use crate::error::{DressError, Result};
use crate::net::spec::LayerSpec;
use crate::sampling::mask::Mask;
use crate::tensor::Real;

/// A weight tensor viewed as `rows x row_len`, one row per output channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowView {
    pub layer: usize,
    pub rows: usize,
    pub row_len: usize,
}

impl RowView {
    /// Reshapes layer `index` into rows. `row_len` defaults to the weights of
    /// one output channel (`in` for fc, `in * k * k` for conv).
    pub fn reshape_rows(index: usize, layer: &LayerSpec, row_len: Option<usize>) -> Result<Self> {
        let shape = layer.weight_shape().ok_or_else(|| {
            DressError::config(format!("layer {} ({}) has no weights to sample", index, layer.name))
        })?;
        let total: usize = shape.iter().product();
        let row_len = row_len.unwrap_or(total / shape[0]);
        if row_len == 0 || total % row_len != 0 {
            return Err(DressError::config(format!(
                "row size {} does not divide the {} weights of layer {}",
                row_len, total, layer.name
            )));
        }
        Ok(RowView {
            layer: index,
            rows: total / row_len,
            row_len,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.row_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.row_len + col
    }

    #[inline]
    pub fn unflat(&self, idx: usize) -> (usize, usize) {
        (idx / self.row_len, idx % self.row_len)
    }
}

/// Restriction on which entries a sampled mask may use.
#[derive(Clone, Copy, Debug)]
pub enum Support<'a> {
    /// Any entry, ranked by magnitude.
    All,
    /// Only entries inside the mask (sampling a subnet out of a subnet).
    Within(&'a Mask),
    /// Entries inside the mask first, then the rest by magnitude
    /// (growing a subnet around a frozen one).
    Extending(&'a Mask),
    /// Entries of `keep` first, then the rest of `within`; `keep` must lie
    /// inside `within`.
    Between { keep: &'a Mask, within: &'a Mask },
}

impl Support<'_> {
    /// 0 = preferred, 1 = eligible, 2 = never selected.
    #[inline]
    pub(crate) fn tier(&self, idx: usize) -> u8 {
        match self {
            Support::All => 0,
            Support::Within(m) => {
                if m.bits()[idx] {
                    0
                } else {
                    2
                }
            }
            Support::Extending(m) => {
                if m.bits()[idx] {
                    0
                } else {
                    1
                }
            }
            Support::Between { keep, within } => {
                if keep.bits()[idx] {
                    0
                } else if within.bits()[idx] {
                    1
                } else {
                    2
                }
            }
        }
    }
}

/// Column order of the `take` most important entries of one row: by tier,
/// then descending magnitude, then lower column index.
pub fn rank_row<T: Real>(row: &[T], take: usize, tier: impl Fn(usize) -> u8) -> Vec<usize> {
    let mut keyed: Vec<(u8, T, usize)> = row
        .iter()
        .enumerate()
        .map(|(j, v)| (tier(j), v.abs(), j))
        .collect();
    let cmp = |a: &(u8, T, usize), b: &(u8, T, usize)| {
        a.0.cmp(&b.0)
            .then_with(|| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then_with(|| a.2.cmp(&b.2))
    };
    let take = take.min(keyed.len());
    if take == 0 {
        return Vec::new();
    }
    if take < keyed.len() {
        keyed.select_nth_unstable_by(take - 1, cmp);
        keyed.truncate(take);
    }
    keyed.sort_unstable_by(cmp);
    keyed.into_iter().map(|(_, _, j)| j).collect()
}

fn check_counts(view: &RowView, counts: &[usize]) -> Result<()> {
    if counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(DressError::config(format!("per-row counts {:?} must be non-increasing", counts)));
    }
    if counts.first().is_some_and(|&c| c > view.row_len) {
        return Err(DressError::config(format!(
            "per-row count {} exceeds row size {}",
            counts[0], view.row_len
        )));
    }
    Ok(())
}

/// Row-based magnitude sampling of one layer: mask `k` keeps the `counts[k]`
/// largest-magnitude weights of every row. Masks are nested by construction.
pub fn sample_rows<T: Real>(weights: &[T], view: &RowView, counts: &[usize]) -> Result<Vec<Mask>> {
    sample_rows_with(weights, view, counts, Support::All)
}

pub fn sample_rows_with<T: Real>(
    weights: &[T],
    view: &RowView,
    counts: &[usize],
    support: Support<'_>,
) -> Result<Vec<Mask>> {
    if weights.len() != view.len() {
        return Err(DressError::shape(format!(
            "{} weights for a {}x{} row view",
            weights.len(),
            view.rows,
            view.row_len
        )));
    }
    check_counts(view, counts)?;
    let mut masks = vec![Mask::zeros(view.len()); counts.len()];
    let take = counts.first().copied().unwrap_or(0);
    for r in 0..view.rows {
        let base = view.flat(r, 0);
        let row = &weights[base..base + view.row_len];
        let order = rank_row(row, take, |j| support.tier(base + j));
        if order.iter().any(|&j| support.tier(base + j) == 2) {
            return Err(DressError::invariant(format!(
                "row {} of layer {} has fewer than {} eligible entries",
                r, view.layer, take
            )));
        }
        for (mask, &count) in masks.iter_mut().zip(counts) {
            let bits = mask.bits_mut();
            for &j in &order[..count] {
                bits[base + j] = true;
            }
        }
    }
    Ok(masks)
}
