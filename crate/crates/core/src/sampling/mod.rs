//! Nested mask sampling and layer-wise sparsity allocation.

pub mod allocate;
pub mod mask;
pub mod rows;

pub use allocate::{
    allocate_layerwise, allocate_with, budget, global_thresholds, reallocate_on_stall, sample_masks,
    sample_masks_with, validate_levels, EpochOutcome, LayerAllocation, SparsityLadder, StallMonitor,
    Threshold,
};
pub use mask::{Mask, MaskSet, SubnetMask};
pub use rows::{rank_row, sample_rows, sample_rows_with, RowView, Support};
