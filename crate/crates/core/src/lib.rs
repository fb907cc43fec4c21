//! Capacity-aware routing for Mixture-of-Experts inference.
//!
//! Under expert parallelism the slowest (most loaded) expert sets the latency of
//! an MoE layer. This crate takes router logits, caps per-expert load at
//! `C = ceil(gamma * t * k / n)`, and either drops the overflow (token drop) or
//! lets rejected tokens pick another expert over a few rounds (token reroute).
//! A small affine latency model turns the resulting loads into speedups.
//!
//! ```text
//!  RoutingTrace ──softmax──▶ ScoreMatrix ──top-k──▶ AssignmentSet
//!                                │                     │
//!                                ▼                     ▼
//!                      reroute (R rounds)     drop_overflow / expert_drop
//!                                │                     │
//!                                └──────▶ LoadVector ◀─┘
//!                                             │
//!                                  DeviceMap + LatencyModel
//!                                             │
//!                                        SpeedupReport
//! ```
//!
//! Math that touches scores is generic over [`Scalar`] (`f32` / `f64`); counts,
//! capacities and dropped fractions are exact integers or rationals.

pub mod capacity;
pub mod error;
pub mod gating;
pub mod latsim;
pub mod report;
pub mod reroute;
pub mod scalar;
pub mod toymoe;
pub mod trace;

pub use capacity::{
    capacity_limit, drop_overflow, dropped_fraction, expert_drop, Capacity, CapacityFactor,
    CapacityPolicy, DropMetric, DropResult,
};
pub use error::{Error, Result};
pub use gating::{
    expected_load, expert_load, softmax_rows, topk_select, AssignmentSet, LoadVector, Mapping,
    ScoreMatrix,
};
pub use latsim::{
    device_loads, end_to_end_speedup, layer_latency, layer_speedup, max_load_bounds, DeviceMap,
    LatencyModel, SpeedupReport,
};
pub use report::{
    analyze_layer, run_sweep, write_layer_reports, write_report, LayerLoadReport, Policy,
    ReportFormat, SweepConfig, SweepResult, SweepRow,
};
pub use reroute::{reroute, reroute_sweep, RerouteConfig, RerouteResult, RerouteSummary};
pub use scalar::Scalar;
pub use toymoe::{output_divergence, Divergence, ToyExpert, ToyMoELayer};
pub use trace::{
    generate_synthetic, load_layers, load_trace, save_layers, save_trace, Preset, RoutingTrace,
    SyntheticSpec,
};

pub type ScoreMatrixF32 = ScoreMatrix<f32>;
pub type ScoreMatrixF64 = ScoreMatrix<f64>;
pub type AssignmentSetF32 = AssignmentSet<f32>;
pub type AssignmentSetF64 = AssignmentSet<f64>;
pub type DropResultF64 = DropResult<f64>;
pub type RerouteResultF64 = RerouteResult<f64>;
pub type LatencyModelF64 = LatencyModel<f64>;
pub type ToyMoELayerF32 = ToyMoELayer<f32>;
pub type ToyMoELayerF64 = ToyMoELayer<f64>;

/// Exact fraction used for expected loads, capacity factors and dropped-token shares.
pub type Fraction = num_rational::Ratio<u64>;
