//! Structure features of label volumes, model cost profiles and result
//! aggregation.

mod aggregate;
mod components;
mod cost;
mod features;

pub use aggregate::{aggregate_results, aggregate_table, AggregateRow, CellKey, RunRecord, AGGREGATE_HEADER};
pub use components::{regions, Region};
pub use cost::{
    cost_table, count_flops, count_params, measure_timings, synthetic_samples, CostReport, COST_HEADER, SCALAR_BYTES,
};
pub use features::{
    slice_centroids, structure_depth, structure_displacement, structure_size, ClassFeatures, DepthReduction,
    StructureFeatures, Summary, FEATURES_HEADER,
};
