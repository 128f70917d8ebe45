pub mod harness;
pub mod metrics;

pub use harness::{
    bench_latency, evaluate, improvement_pct, EvalConfig, EvalReport, LatencyConfig, LatencyReport,
    MetricResult, Refinement, REALTIME_BUDGET,
};
pub use metrics::{ade, bmw, fde, mm_metric, BaseMetric, Bmw};
