//! `capmoe`: generate routing traces, analyze expert load, and simulate
//! capacity-aware drop/reroute policies under an affine latency model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use capmoe_core::capacity::{CapacityFactor, DropMetric};
use capmoe_core::latsim::{DeviceMap, LatencyModel, DEFAULT_MOE_TIME_FRACTION};
use capmoe_core::report::{
    analyze_layer, run_sweep, write_layer_reports, write_report, Policy, ReportFormat, SweepConfig,
};
use capmoe_core::trace::{
    generate_synthetic, load_layers, peak_normalized_load, save_trace, Preset, RoutingTrace,
    SyntheticSpec,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "capmoe",
    version,
    about = "Capacity-aware MoE routing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic routing trace.
    Generate {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer normalized loads and dropped-token fractions by capacity factor.
    Analyze {
        #[command(flatten)]
        source: SourceArgs,
        /// Comma-separated capacity factors; `inf` means unbounded.
        #[arg(long, value_delimiter = ',', default_value = "inf,3,2,1.5,1")]
        gammas: Vec<CapacityFactor>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Sweep capacity policies over capacity factors and report modelled speedups.
    Simulate(Box<SimulateArgs>),
}

#[derive(Args, Debug)]
struct SpecArgs {
    /// Tokens.
    #[arg(long)]
    t: usize,
    /// Experts.
    #[arg(long)]
    n: usize,
    /// Experts per token.
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Args, Debug)]
struct ShapeArgs {
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// uniform, scratch-like or upcycled-like.
    #[arg(long, default_value = "uniform")]
    preset: Preset,
    /// Pin the hottest expert's normalized load.
    #[arg(long)]
    peak: Option<f64>,
    /// Layer id; with --trace, selects the layer to simulate.
    #[arg(long)]
    layer: Option<u32>,
}

impl ShapeArgs {
    fn spec(&self, t: usize, n: usize, k: usize) -> SyntheticSpec {
        let mut spec = SyntheticSpec::new(t, n, k)
            .with_skew(self.skew)
            .with_seed(self.seed)
            .with_preset(self.preset)
            .with_layer_id(self.layer.unwrap_or(0));
        if let Some(p) = self.peak {
            spec = spec.with_target_peak(p);
        }
        spec
    }
}

/// Either a trace file or synthetic generation flags.
#[derive(Args, Debug)]
struct SourceArgs {
    #[arg(long, conflicts_with_all = ["t", "n", "k", "skew", "preset", "peak"])]
    trace: Option<PathBuf>,
    #[arg(long, required_unless_present = "trace")]
    t: Option<usize>,
    #[arg(long, required_unless_present = "trace")]
    n: Option<usize>,
    #[arg(long, required_unless_present = "trace")]
    k: Option<usize>,
    #[command(flatten)]
    shape: ShapeArgs,
}

impl SourceArgs {
    fn layers(&self) -> Result<Vec<RoutingTrace>> {
        match (&self.trace, self.t, self.n, self.k) {
            (Some(path), ..) => {
                load_layers(path).with_context(|| format!("loading trace {}", path.display()))
            }
            (None, Some(t), Some(n), Some(k)) => {
                let trace = generate_synthetic(&self.shape.spec(t, n, k))
                    .context("synthetic trace generation failed")?;
                Ok(vec![trace])
            }
            _ => bail!("give either --trace or all of --t, --n and --k"),
        }
    }

    fn single_layer(&self) -> Result<RoutingTrace> {
        let layers = self.layers()?;
        if self.trace.is_none() {
            return Ok(layers.into_iter().next().expect("one synthetic layer"));
        }
        match self.shape.layer {
            Some(id) => layers
                .into_iter()
                .find(|l| l.layer_id() == id)
                .with_context(|| format!("trace has no layer {id}")),
            None if layers.len() == 1 => Ok(layers.into_iter().next().expect("one layer")),
            None => bail!("trace has {} layers; pick one with --layer", layers.len()),
        }
    }
}

#[derive(Args, Debug)]
struct OutputArgs {
    #[arg(long)]
    out: PathBuf,
    /// csv or json.
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Capacity factors; `inf` means unbounded.
    #[arg(
        long = "gamma",
        visible_alias = "gammas",
        value_delimiter = ',',
        default_value = "inf,3,2,1.5,1"
    )]
    gammas: Vec<CapacityFactor>,
    /// Drop metric for the token-drop policy.
    #[arg(long, default_value = "score")]
    metric: DropMetric,
    /// Skip the token-drop policy.
    #[arg(long)]
    no_drop: bool,
    /// Also evaluate token reroute with this many rounds.
    #[arg(long)]
    reroute_rounds: Option<usize>,
    /// Also evaluate skipping this fraction of the least-loaded experts.
    #[arg(long)]
    expert_drop: Option<f64>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    experts_per_device: Option<usize>,
    /// Fixed per-layer latency.
    #[arg(long, default_value_t = 0.0)]
    c0: f64,
    /// Latency per token on the busiest device.
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    /// Share of end-to-end time spent in MoE layers.
    #[arg(long, default_value_t = DEFAULT_MOE_TIME_FRACTION)]
    rho: f64,
    /// Divide surviving gate scores by their per-token sum in the toy layer.
    #[arg(long)]
    renormalize_gates: bool,
    #[command(flatten)]
    output: OutputArgs,
}

impl SimulateArgs {
    fn policies(&self) -> Result<Vec<Policy>> {
        let mut policies = Vec::new();
        if !self.no_drop {
            policies.push(Policy::Drop {
                metric: self.metric,
            });
        }
        if let Some(rounds) = self.reroute_rounds {
            policies.push(Policy::Reroute { rounds });
        }
        if let Some(fraction) = self.expert_drop {
            policies.push(Policy::ExpertDrop { fraction });
        }
        if policies.is_empty() {
            bail!("--no-drop needs --reroute-rounds or --expert-drop");
        }
        Ok(policies)
    }

    fn device_map(&self, num_experts: usize) -> Result<DeviceMap> {
        let map = match (self.devices, self.experts_per_device) {
            (Some(d), Some(e)) => {
                if d.saturating_mul(e) < num_experts {
                    bail!("{d} devices x {e} experts per device cannot hold {num_experts} experts");
                }
                DeviceMap::round_robin(num_experts, d)?
            }
            (Some(d), None) => DeviceMap::round_robin(num_experts, d)?,
            (None, Some(e)) => DeviceMap::with_experts_per_device(num_experts, e)?,
            (None, None) => DeviceMap::one_per_device(num_experts),
        };
        Ok(map)
    }
}

fn generate(spec: &SpecArgs, out: &Path) -> Result<()> {
    let trace = generate_synthetic(&spec.shape.spec(spec.t, spec.n, spec.k))
        .context("synthetic trace generation failed")?;
    save_trace(&trace, out)?;
    println!(
        "t={} n={} k={} max_normalized_load={}",
        trace.num_tokens(),
        trace.num_experts(),
        trace.top_k(),
        peak_normalized_load(&trace)
    );
    Ok(())
}

fn analyze(source: &SourceArgs, gammas: &[CapacityFactor], output: &OutputArgs) -> Result<()> {
    let reports = source
        .layers()?
        .iter()
        .map(|l| analyze_layer(l, gammas).with_context(|| format!("layer {}", l.layer_id())))
        .collect::<Result<Vec<_>>>()?;
    write_layer_reports(&reports, &output.out, output.format)?;
    for r in &reports {
        let drops: Vec<String> = r
            .dropped
            .iter()
            .map(|d| format!("{}:{}", d.gamma, d.dropped_fraction))
            .collect();
        println!(
            "layer {}: max normalized load {} dropped {}",
            r.layer_id,
            r.max_normalized,
            drops.join(" ")
        );
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let trace = args.source.single_layer()?;
    let mut cfg = SweepConfig::new(
        args.policies()?,
        args.gammas.clone(),
        args.device_map(trace.num_experts())?,
    );
    cfg.latency = LatencyModel::new(args.c0, args.c1)?;
    cfg.moe_time_fraction = args.rho;
    cfg.seed = args.source.shape.seed;
    cfg.renormalize_gates = args.renormalize_gates;
    let result = run_sweep(&trace, &cfg)?;
    write_report(&result, &args.output.out, args.output.format)?;
    if let Some(best) = result.best() {
        println!(
            "best layer speedup {} at gamma {} ({}, e2e {}, model-predicted)",
            best.layer_speedup, best.gamma, best.policy, best.e2e_speedup
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out } => generate(&spec, &out),
        Command::Analyze {
            source,
            gammas,
            output,
        } => analyze(&source, &gammas, &output),
        Command::Simulate(args) => simulate(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
