//! Nested CSR storage of all subnets, its file format and cost accounting.

pub mod cost;
pub mod format;
mod io;

pub use cost::{cost_report, flops_count, memory_cost, CostReport, Density, LayerCost};
pub use format::{build, DressCsr, DressCsrLayer, SubnetCsr};
