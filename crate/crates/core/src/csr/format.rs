//! Nested CSR storage: one importance-ordered index/value table per layer,
//! from which every subnet is a per-row prefix.

use crate::error::{DressError, Result};
use crate::net::params::{BnState, ParamStore};
use crate::net::spec::NetworkSpec;
use crate::sampling::{MaskSet, RowView};

/// Nested tables of one sampled layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DressCsrLayer {
    pub name: String,
    /// Index of the layer in its [`NetworkSpec`].
    pub layer: usize,
    pub rows: usize,
    pub row_len: usize,
    /// Per-row nonzeros of each level, non-increasing.
    pub prefix_counts: Vec<usize>,
    /// `rows x prefix_counts[0]` column indices, most important first.
    pub indices: Vec<u32>,
    /// Values in the same order as `indices`.
    pub values: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl DressCsrLayer {
    /// Width of the stored tables, `N^nz_1`.
    pub fn width(&self) -> usize {
        self.prefix_counts.first().copied().unwrap_or(0)
    }

    pub fn levels(&self) -> usize {
        self.prefix_counts.len()
    }

    pub fn view(&self) -> RowView {
        RowView {
            layer: self.layer,
            rows: self.rows,
            row_len: self.row_len,
        }
    }

    /// Subnet `k` (1-based) as a uniform-stride CSR view over the tables.
    pub fn extract(&self, k: usize) -> Result<SubnetCsr<'_>> {
        if k == 0 || k > self.levels() {
            return Err(DressError::LevelOutOfRange {
                level: k,
                levels: self.levels(),
            });
        }
        Ok(SubnetCsr {
            rows: self.rows,
            cols: self.row_len,
            nnz_per_row: self.prefix_counts[k - 1],
            table_width: self.width(),
            indices: &self.indices,
            values: &self.values,
        })
    }

    /// Checks every structural invariant of the tables.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| DressError::invariant(format!("layer {}: {}", self.name, m));
        if self.prefix_counts.is_empty() {
            return Err(bad("no prefix counts".into()));
        }
        if self.prefix_counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(bad(format!("prefix counts {:?} increase", self.prefix_counts)));
        }
        let w = self.width();
        if w > self.row_len {
            return Err(bad(format!("table width {} exceeds row size {}", w, self.row_len)));
        }
        if self.indices.len() != self.rows * w || self.values.len() != self.rows * w {
            return Err(bad("table sizes do not match rows x width".into()));
        }
        if self.bias.as_ref().is_some_and(|b| b.len() != self.rows) {
            return Err(bad("bias length differs from row count".into()));
        }
        let mut seen = vec![usize::MAX; self.row_len];
        for r in 0..self.rows {
            let idx = &self.indices[r * w..(r + 1) * w];
            let val = &self.values[r * w..(r + 1) * w];
            for &c in idx {
                let c = c as usize;
                if c >= self.row_len {
                    return Err(bad(format!("row {} has column {} >= {}", r, c, self.row_len)));
                }
                if seen[c] == r {
                    return Err(bad(format!("row {} repeats column {}", r, c)));
                }
                seen[c] = r;
            }
            // Magnitudes are non-increasing inside each level band.
            let mut end = w;
            for &start in self.prefix_counts.iter().skip(1).chain(std::iter::once(&0)) {
                if val[start..end].windows(2).any(|p| p[1].abs() > p[0].abs()) {
                    return Err(bad(format!("row {} is not ordered by magnitude", r)));
                }
                end = start;
            }
        }
        Ok(())
    }
}

/// One subnet of one layer in CSR form. Row `r` occupies the first
/// `nnz_per_row` slots of table row `r`, so the row pointers advance by a
/// uniform stride.
#[derive(Clone, Copy, Debug)]
pub struct SubnetCsr<'a> {
    pub rows: usize,
    pub cols: usize,
    pub nnz_per_row: usize,
    table_width: usize,
    indices: &'a [u32],
    values: &'a [f32],
}

impl<'a> SubnetCsr<'a> {
    /// Builds a view over caller-owned tables of width `table_width`.
    pub fn from_tables(
        rows: usize,
        cols: usize,
        nnz_per_row: usize,
        table_width: usize,
        indices: &'a [u32],
        values: &'a [f32],
    ) -> Result<Self> {
        if nnz_per_row > table_width
            || indices.len() != rows * table_width
            || values.len() != rows * table_width
            || indices.iter().any(|&c| c as usize >= cols)
        {
            return Err(DressError::shape("inconsistent CSR tables"));
        }
        Ok(SubnetCsr {
            rows,
            cols,
            nnz_per_row,
            table_width,
            indices,
            values,
        })
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&'a [u32], &'a [f32]) {
        let start = r * self.table_width;
        (
            &self.indices[start..start + self.nnz_per_row],
            &self.values[start..start + self.nnz_per_row],
        )
    }

    pub fn nnz(&self) -> usize {
        self.rows * self.nnz_per_row
    }

    /// Standard CSR row-pointer array: `0, s, 2s, ...` with `s = nnz_per_row`.
    pub fn row_ptr(&self) -> Vec<usize> {
        (0..=self.rows).map(|r| r * self.nnz_per_row).collect()
    }

    /// Owned standard CSR triple `(row_ptr, col_idx, values)`.
    pub fn to_standard(&self) -> (Vec<usize>, Vec<u32>, Vec<f32>) {
        let mut cols = Vec::with_capacity(self.nnz());
        let mut vals = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (c, v) = self.row(r);
            cols.extend_from_slice(c);
            vals.extend_from_slice(v);
        }
        (self.row_ptr(), cols, vals)
    }

    /// Dense `rows x cols` matrix with zeros off the support.
    pub fn densify(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            let (c, v) = self.row(r);
            for (&j, &x) in c.iter().zip(v) {
                out[r * self.cols + j as usize] = x;
            }
        }
        out
    }
}

/// A whole network in nested CSR form plus the per-level BN state.
#[derive(Clone, Debug, PartialEq)]
pub struct DressCsr {
    pub network: NetworkSpec,
    pub levels: Vec<f64>,
    pub layers: Vec<DressCsrLayer>,
    /// One BN state per level.
    pub bn_variants: Vec<BnState<f32>>,
}

impl DressCsr {
    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn layer(&self, layer: usize) -> Option<&DressCsrLayer> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn bn_variant(&self, k: usize) -> Result<&BnState<f32>> {
        if k == 0 || k > self.bn_variants.len() {
            return Err(DressError::LevelOutOfRange {
                level: k,
                levels: self.bn_variants.len(),
            });
        }
        Ok(&self.bn_variants[k - 1])
    }

    /// Per-sampled-layer nonzeros at level `k`.
    pub fn nnz_per_layer(&self, k: usize) -> Result<Vec<usize>> {
        self.layers.iter().map(|l| l.extract(k).map(|s| s.nnz())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let sampled = self.network.sampled_layers();
        if sampled.len() != self.layers.len() {
            return Err(DressError::invariant("tables do not cover every sampled layer"));
        }
        for (&i, l) in sampled.iter().zip(&self.layers) {
            let v = RowView::reshape_rows(i, &self.network.layers[i], None)?;
            if l.layer != i || l.rows != v.rows || l.row_len != v.row_len || l.name != self.network.layers[i].name {
                return Err(DressError::invariant(format!("layer {} does not match the network", l.name)));
            }
            if l.levels() != self.k() {
                return Err(DressError::invariant(format!("layer {} has {} levels", l.name, l.levels())));
            }
            if l.bias.is_some() != self.network.layers[i].has_bias() {
                return Err(DressError::invariant(format!("bias presence of {} differs", l.name)));
            }
            l.validate()?;
        }
        if self.bn_variants.len() != self.k() {
            return Err(DressError::invariant("one BN variant per level is required"));
        }
        let bn_layers = self.network.bn_layers();
        for variant in &self.bn_variants {
            if variant.len() != bn_layers.len()
                || variant
                    .iter()
                    .zip(&bn_layers)
                    .any(|(b, &i)| Some(b.channels()) != self.network.layers[i].bn_channels())
            {
                return Err(DressError::invariant("BN variant does not match the network"));
            }
        }
        Ok(())
    }

    /// Densified weights of subnet `k`, ready for a dense forward.
    pub fn to_params(&self, k: usize) -> Result<ParamStore<f32>> {
        let mut p = ParamStore::<f32>::init(&self.network, 0)?;
        for l in &self.layers {
            let sub = l.extract(k)?;
            let d = p.dense_mut(l.layer).expect("sampled layer");
            d.weight.data_mut().copy_from_slice(&sub.densify());
            d.bias = l.bias.clone();
        }
        p.set_bn_state(self.bn_variant(k)?)?;
        Ok(p)
    }
}

/// Builds the nested tables from backbone weights and nested, row-uniform masks.
///
/// Within a row, entries are ordered by the deepest level that keeps them,
/// then by descending magnitude, then by column. For magnitude-sampled masks
/// this is plain descending magnitude.
pub fn build(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    masks: &MaskSet,
    levels: &[f64],
    bn_variants: Vec<BnState<f32>>,
) -> Result<DressCsr> {
    let k_levels = masks.len();
    if k_levels == 0 || levels.len() != k_levels {
        return Err(DressError::format(format!(
            "{} masks for {} sparsity levels",
            k_levels,
            levels.len()
        )));
    }
    if !masks.is_nested() {
        return Err(DressError::format("masks are not nested"));
    }
    for m in masks.levels() {
        m.check_shapes(net)?;
    }
    let mut layers = Vec::new();
    for i in net.sampled_layers() {
        let spec = &net.layers[i];
        let view = RowView::reshape_rows(i, spec, None)?;
        let dense = params.dense(i).ok_or_else(|| DressError::shape("missing weights"))?;
        let w = dense.weight.data();
        let level_masks: Vec<&[bool]> = masks
            .levels()
            .iter()
            .map(|m| m.layer(i).expect("checked shapes").bits())
            .collect();
        let mut prefix_counts = Vec::with_capacity(k_levels);
        for (k, bits) in level_masks.iter().enumerate() {
            let counts: Vec<usize> = bits
                .chunks(view.row_len)
                .map(|r| r.iter().filter(|&&b| b).count())
                .collect();
            if counts.windows(2).any(|p| p[0] != p[1]) {
                return Err(DressError::format(format!(
                    "mask of level {} is not row-uniform in layer {}",
                    k + 1,
                    spec.name
                )));
            }
            prefix_counts.push(counts.first().copied().unwrap_or(0));
        }
        let width = prefix_counts[0];
        let mut indices = Vec::with_capacity(view.rows * width);
        let mut values = Vec::with_capacity(view.rows * width);
        for r in 0..view.rows {
            let base = r * view.row_len;
            let mut row: Vec<(usize, f32, usize)> = (0..view.row_len)
                .filter(|&j| level_masks[0][base + j])
                .map(|j| {
                    let depth = level_masks.iter().take_while(|m| m[base + j]).count();
                    (depth, w[base + j], j)
                })
                .collect();
            row.sort_by(|a, b| {
                b.0.cmp(&a.0)
                    .then_with(|| b.1.abs().total_cmp(&a.1.abs()))
                    .then_with(|| a.2.cmp(&b.2))
            });
            for (_, v, j) in row {
                indices.push(j as u32);
                values.push(v);
            }
        }
        layers.push(DressCsrLayer {
            name: spec.name.clone(),
            layer: i,
            rows: view.rows,
            row_len: view.row_len,
            prefix_counts,
            indices,
            values,
            bias: dense.bias.clone(),
        });
    }
    let out = DressCsr {
        network: net.clone(),
        levels: levels.to_vec(),
        layers,
        bn_variants,
    };
    out.validate()?;
    Ok(out)
}
