//! Analytic cost model, ranking metrics and the power-law fitter.

mod cost;
mod fit;
mod metrics;

pub use cost::{
    count_params, flops_inner_trans, flops_merged, flops_vanilla, forward_mul_adds,
    serving_mul_adds, CostReport, ParamBreakdown, ServingCost,
};
pub use fit::{fit_power_law, FitResult};
pub use metrics::{auc, auc_pairwise, logloss};
