//! Analysis artifacts: per-layer normalized loads, dropped-token fractions by
//! capacity factor, and policy sweeps over `gamma` with modelled speedups.
//!
//! Sweep CSV columns are fixed:
//!
//! ```text
//! policy,gamma,capacity,dropped_fraction,max_device_load,layer_speedup,e2e_speedup,retained_fraction,divergence
//! ```
//!
//! `gamma` and `capacity` print `inf` when unbounded. Floats use the shortest
//! decimal that round-trips.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::capacity::{
    capacity_limit, drop_overflow, dropped_fraction, expert_drop, Capacity, CapacityFactor,
    DropMetric,
};
use crate::error::{Error, Result};
use crate::gating::{route, AssignmentSet};
use crate::latsim::{speedup_report, DeviceMap, LatencyModel, DEFAULT_MOE_TIME_FRACTION};
use crate::reroute::{reroute, RerouteConfig, DEFAULT_ROUNDS};
use crate::scalar::Scalar;
use crate::toymoe::{output_divergence, random_tokens, ToyMoELayer};
use crate::trace::RoutingTrace;

pub const SWEEP_CSV_HEADER: [&str; 9] = [
    "policy",
    "gamma",
    "capacity",
    "dropped_fraction",
    "max_device_load",
    "layer_speedup",
    "e2e_speedup",
    "retained_fraction",
    "divergence",
];

pub const LAYER_CSV_HEADER: [&str; 5] = [
    "layer",
    "gamma",
    "capacity",
    "dropped_fraction",
    "max_normalized",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaDrop {
    pub gamma: CapacityFactor,
    pub capacity: Capacity,
    pub dropped_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoadReport {
    pub layer_id: u32,
    pub expected_load: f64,
    pub normalized_loads: Vec<f64>,
    pub max_normalized: f64,
    pub dropped: Vec<GammaDrop>,
}

/// Routes the trace and reports `N_i / N` plus the dropped fraction for each `gamma`.
pub fn analyze_layer(trace: &RoutingTrace, gammas: &[CapacityFactor]) -> Result<LayerLoadReport> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one capacity factor is required".into(),
        ));
    }
    let (_, a) = route::<f64>(trace);
    let loads = a.loads();
    let expected = a.expected_load();
    let normalized_loads = loads.normalized::<f64>(expected);
    let max_normalized = normalized_loads.iter().copied().fold(0.0, f64::max);
    let dropped = gammas
        .iter()
        .map(|&gamma| {
            let capacity = capacity_limit(
                gamma,
                trace.num_tokens(),
                trace.top_k(),
                trace.num_experts(),
            );
            Ok(GammaDrop {
                gamma,
                capacity,
                dropped_fraction: f64::of_ratio(dropped_fraction(&loads, capacity)?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerLoadReport {
        layer_id: trace.layer_id(),
        expected_load: f64::of_ratio(expected),
        normalized_loads,
        max_normalized,
        dropped,
    })
}

/// Capacity enforcement strategy evaluated by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    Drop {
        metric: DropMetric,
    },
    Reroute {
        rounds: usize,
    },
    /// Skips the least-loaded experts; ignores `gamma`.
    ExpertDrop {
        fraction: f64,
    },
}

impl Default for Policy {
    fn default() -> Self {
        Policy::Drop {
            metric: DropMetric::Score,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Drop { metric } => write!(f, "drop:{metric}"),
            Policy::Reroute { rounds } => write!(f, "reroute:{rounds}"),
            Policy::ExpertDrop { fraction } => write!(f, "expert-drop:{fraction}"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// `drop[:metric]`, `reroute[:rounds]` or `expert-drop[:fraction]`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = |what: &str| Error::InvalidArgument(format!("invalid {what} in policy {s:?}"));
        match kind {
            "drop" => Ok(Policy::Drop {
                metric: arg.map_or(Ok(DropMetric::Score), str::parse)?,
            }),
            "reroute" => Ok(Policy::Reroute {
                rounds: match arg {
                    Some(a) => a.parse().map_err(|_| bad("round count"))?,
                    None => DEFAULT_ROUNDS,
                },
            }),
            "expert-drop" => Ok(Policy::ExpertDrop {
                fraction: match arg {
                    Some(a) => a.parse().map_err(|_| bad("fraction"))?,
                    None => 0.1,
                },
            }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown policy {s:?} (expected drop, reroute or expert-drop)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub policies: Vec<Policy>,
    pub gammas: Vec<CapacityFactor>,
    pub device_map: DeviceMap,
    pub latency: LatencyModel<f64>,
    pub moe_time_fraction: f64,
    /// Seeds the random drop metric and the toy layer.
    pub seed: u64,
    pub toy_d_model: usize,
    pub renormalize_gates: bool,
}

impl SweepConfig {
    pub fn new(policies: Vec<Policy>, gammas: Vec<CapacityFactor>, device_map: DeviceMap) -> Self {
        Self {
            policies,
            gammas,
            device_map,
            latency: LatencyModel::default(),
            moe_time_fraction: DEFAULT_MOE_TIME_FRACTION,
            seed: 0,
            toy_d_model: 16,
            renormalize_gates: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub layer_id: u32,
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub seed: u64,
    pub device_map: DeviceMap,
    pub latency: LatencyModel<f64>,
    pub moe_time_fraction: f64,
    pub toy_d_model: usize,
    pub renormalize_gates: bool,
    pub baseline_max_normalized: f64,
    /// Speedups come from the affine latency model, not from measurement.
    pub speedup_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: Policy,
    pub gamma: CapacityFactor,
    pub capacity: Capacity,
    pub dropped_fraction: f64,
    pub max_device_load: u64,
    pub layer_speedup: f64,
    pub e2e_speedup: f64,
    pub retained_fraction: f64,
    pub divergence: f64,
    pub affected_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub meta: SweepMeta,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Row with the highest layer speedup; the earliest such row wins ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.layer_speedup >= r.layer_speedup => Some(b),
                _ => Some(r),
            })
    }
}

fn constrained_assignments(
    policy: Policy,
    capacity: Capacity,
    scores: &crate::gating::ScoreMatrix<f64>,
    baseline: &AssignmentSet<f64>,
    seed: u64,
) -> Result<AssignmentSet<f64>> {
    Ok(match policy {
        Policy::Drop { metric } => {
            drop_overflow(scores, baseline, capacity, metric, seed)?.retained
        }
        Policy::Reroute { rounds } => {
            let cfg = RerouteConfig::new(rounds, capacity, baseline.top_k())?;
            reroute(scores, &cfg)?.assignments
        }
        Policy::ExpertDrop { fraction } => expert_drop(scores, baseline, fraction)?.retained,
    })
}

/// One row per `(policy, gamma)`: policies in the given order, `gamma` descending.
pub fn run_sweep(trace: &RoutingTrace, cfg: &SweepConfig) -> Result<SweepResult> {
    let (t, n, k) = (trace.num_tokens(), trace.num_experts(), trace.top_k());
    if cfg.device_map.num_experts() != n {
        return Err(Error::DimensionMismatch(format!(
            "device map covers {} experts, trace has {n}",
            cfg.device_map.num_experts()
        )));
    }
    let (scores, baseline) = route::<f64>(trace);
    let base_loads = baseline.loads();
    let base_total = base_loads.total();

    let layer = ToyMoELayer::<f64>::random(n, cfg.toy_d_model, cfg.seed)?
        .with_renormalized_gates(cfg.renormalize_gates);
    let tokens = random_tokens::<f64>(t, cfg.toy_d_model, cfg.seed.wrapping_add(1));
    let base_out = layer.forward(tokens.view(), &baseline)?;

    let mut gammas = cfg.gammas.clone();
    gammas.sort_by(|a, b| b.cmp(a));

    let mut rows = Vec::with_capacity(cfg.policies.len() * gammas.len());
    for &policy in &cfg.policies {
        for &gamma in &gammas {
            let row = (|| -> Result<SweepRow> {
                let capacity = match policy {
                    Policy::ExpertDrop { .. } => Capacity::Unbounded,
                    _ => capacity_limit(gamma, t, k, n),
                };
                let kept = constrained_assignments(policy, capacity, &scores, &baseline, cfg.seed)?;
                let loads = kept.loads();
                let report = speedup_report(
                    &base_loads,
                    &loads,
                    &cfg.device_map,
                    &cfg.latency,
                    cfg.moe_time_fraction,
                )?;
                let out = layer.forward(tokens.view(), &kept)?;
                let div = output_divergence(base_out.view(), out.view())?;
                let lost = Ratio::new(base_total - loads.total(), base_total);
                Ok(SweepRow {
                    policy,
                    gamma,
                    capacity,
                    dropped_fraction: f64::of_ratio(lost),
                    max_device_load: report.constrained_max_device_load,
                    layer_speedup: report.layer_speedup,
                    e2e_speedup: report.end_to_end_speedup,
                    retained_fraction: f64::of_ratio(Ratio::from_integer(1) - lost),
                    divergence: div.mean_relative_l2,
                    affected_fraction: div.affected_fraction,
                })
            })()
            .map_err(|e| Error::Sweep {
                policy: policy.to_string(),
                gamma: gamma.to_string(),
                source: Box::new(e),
            })?;
            rows.push(row);
        }
    }

    Ok(SweepResult {
        meta: SweepMeta {
            layer_id: trace.layer_id(),
            num_tokens: t,
            num_experts: n,
            top_k: k,
            seed: cfg.seed,
            device_map: cfg.device_map.clone(),
            latency: cfg.latency,
            moe_time_fraction: cfg.moe_time_fraction,
            toy_d_model: cfg.toy_d_model,
            renormalize_gates: cfg.renormalize_gates,
            baseline_max_normalized: base_loads
                .normalized::<f64>(baseline.expected_load())
                .into_iter()
                .fold(0.0, f64::max),
            speedup_source: "affine latency model (predicted)".into(),
        },
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown format {other:?} (expected csv or json)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

fn csv_bytes<I>(header: &[&str], records: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record(header).map_err(ser)?;
    for r in records {
        w.write_record(&r).map_err(ser)?;
    }
    w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
}

pub fn sweep_to_csv(result: &SweepResult) -> Result<Vec<u8>> {
    csv_bytes(
        &SWEEP_CSV_HEADER,
        result.rows.iter().map(|r| {
            vec![
                r.policy.to_string(),
                r.gamma.to_string(),
                r.capacity.to_string(),
                r.dropped_fraction.to_string(),
                r.max_device_load.to_string(),
                r.layer_speedup.to_string(),
                r.e2e_speedup.to_string(),
                r.retained_fraction.to_string(),
                r.divergence.to_string(),
            ]
        }),
    )
}

pub fn layer_reports_to_csv(reports: &[LayerLoadReport]) -> Result<Vec<u8>> {
    csv_bytes(
        &LAYER_CSV_HEADER,
        reports.iter().flat_map(|rep| {
            rep.dropped.iter().map(move |d| {
                vec![
                    rep.layer_id.to_string(),
                    d.gamma.to_string(),
                    d.capacity.to_string(),
                    d.dropped_fraction.to_string(),
                    rep.max_normalized.to_string(),
                ]
            })
        }),
    )
}

fn json_bytes<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report(
    result: &SweepResult,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let bytes = match format {
        ReportFormat::Csv => sweep_to_csv(result)?,
        ReportFormat::Json => json_bytes(result)?,
    };
    write_bytes(path.as_ref(), &bytes)
}

pub fn write_layer_reports(
    reports: &[LayerLoadReport],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let bytes = match format {
        ReportFormat::Csv => layer_reports_to_csv(reports)?,
        ReportFormat::Json => json_bytes(&reports)?,
    };
    write_bytes(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn running_example_trace() -> RoutingTrace {
        let rows = [
            [0.9, 0.05, 0.05],
            [0.8, 0.1, 0.1],
            [0.7, 0.2, 0.1],
            [0.6, 0.15, 0.25],
            [0.1, 0.8, 0.1],
            [0.1, 0.1, 0.8],
        ];
        RoutingTrace::from_rows(
            0,
            1,
            rows.iter()
                .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
                .collect(),
        )
        .unwrap()
    }

    fn g(x: f64) -> CapacityFactor {
        CapacityFactor::new(x).unwrap()
    }

    #[test]
    fn analyze_running_example() {
        let rep = analyze_layer(&running_example_trace(), &[g(1.0)]).unwrap();
        assert_eq!(rep.normalized_loads, vec![2.0, 0.5, 0.5]);
        assert_eq!(rep.max_normalized, 2.0);
        assert_eq!(rep.dropped[0].dropped_fraction, 1.0 / 3.0);
        assert_eq!(rep.dropped[0].capacity, Capacity::Bounded(2));
        assert!(analyze_layer(&running_example_trace(), &[]).is_err());
    }

    #[test]
    fn analyze_balanced_trace() {
        // Token i prefers expert i % 4, so every expert gets exactly N.
        let rows = (0..8)
            .map(|i| (0..4).map(|j| if j == i % 4 { 2.0 } else { 0.0 }).collect())
            .collect();
        let tr = RoutingTrace::from_rows(0, 1, rows).unwrap();
        let rep = analyze_layer(&tr, &[g(3.0), g(1.0)]).unwrap();
        assert!(rep.normalized_loads.iter().all(|&x| x == 1.0));
        assert!(rep.dropped.iter().all(|d| d.dropped_fraction == 0.0));
    }

    #[test]
    fn sweep_drop_vs_reroute() {
        let tr = running_example_trace();
        let cfg = SweepConfig::new(
            vec![
                Policy::Drop {
                    metric: DropMetric::Score,
                },
                Policy::Reroute { rounds: 2 },
            ],
            vec![g(1.0), CapacityFactor::Unbounded],
            DeviceMap::one_per_device(3),
        );
        let res = run_sweep(&tr, &cfg).unwrap();
        assert_eq!(res.rows.len(), 4);
        let baseline = &res.rows[0];
        assert_eq!(baseline.gamma, CapacityFactor::Unbounded);
        assert_eq!(
            (
                baseline.dropped_fraction,
                baseline.layer_speedup,
                baseline.divergence
            ),
            (0.0, 1.0, 0.0)
        );
        assert_eq!(res.rows[1].retained_fraction, 4.0 / 6.0);
        assert_eq!(res.rows[3].retained_fraction, 1.0);
        assert_eq!(res.rows[3].layer_speedup, 2.0);
        // Drop at gamma 1 also reaches max load 2; the earlier row wins the tie.
        assert_eq!(res.rows[1].layer_speedup, 2.0);
        assert_eq!(res.best().unwrap(), &res.rows[1]);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "drop:reverse-order".parse::<Policy>().unwrap(),
            Policy::Drop {
                metric: DropMetric::ReverseOrder
            }
        );
        assert_eq!(
            "reroute".parse::<Policy>().unwrap(),
            Policy::Reroute { rounds: 2 }
        );
        assert_eq!(
            "expert-drop:0.25".parse::<Policy>().unwrap(),
            Policy::ExpertDrop { fraction: 0.25 }
        );
        assert!("reroute:x".parse::<Policy>().is_err());
        assert!("teleport".parse::<Policy>().is_err());
        for p in ["drop:order", "reroute:3", "expert-drop:0.1"] {
            assert_eq!(p.parse::<Policy>().unwrap().to_string(), p);
        }
    }

    #[test]
    fn empty_sweep_writes_header_only() {
        let tr = running_example_trace();
        let cfg = SweepConfig::new(vec![], vec![g(1.0)], DeviceMap::one_per_device(3));
        let res = run_sweep(&tr, &cfg).unwrap();
        let csv = String::from_utf8(sweep_to_csv(&res).unwrap()).unwrap();
        assert_eq!(csv, format!("{}\n", SWEEP_CSV_HEADER.join(",")));
    }

    #[test]
    fn device_map_must_match_trace() {
        let tr = running_example_trace();
        let cfg = SweepConfig::new(
            vec![Policy::default()],
            vec![g(1.0)],
            DeviceMap::one_per_device(4),
        );
        assert!(matches!(
            run_sweep(&tr, &cfg),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn submodule_errors_carry_context() {
        let tr = running_example_trace();
        let cfg = SweepConfig::new(
            vec![
                Policy::ExpertDrop { fraction: 0.99 },
                Policy::Reroute { rounds: 0 },
            ],
            vec![g(1.0)],
            DeviceMap::one_per_device(3),
        );
        let msg = run_sweep(&tr, &cfg).unwrap_err().to_string();
        assert!(
            msg.contains("reroute:0") && msg.contains("gamma 1"),
            "{msg}"
        );
    }
}
