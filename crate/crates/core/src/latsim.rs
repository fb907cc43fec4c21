//! Expert-parallel latency model.
//!
//! A layer finishes when its busiest device does: `L = c0 + c1 * max(device load)`.
//! Speedups reported here are predictions of that model, not measurements; real
//! deployments add communication and launch overheads the model ignores.

use serde::{Deserialize, Serialize};

use crate::capacity::CapacityFactor;
use crate::error::{Error, Result};
use crate::gating::LoadVector;
use crate::scalar::Scalar;

/// Fraction of end-to-end time spent in MoE layers, calibrated so a 1.94x layer
/// speedup composes to 1.37x end to end. Model specific.
pub const DEFAULT_MOE_TIME_FRACTION: f64 = 0.557;

/// Expert-to-device placement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMap {
    num_devices: usize,
    placement: Vec<usize>,
}

impl DeviceMap {
    /// Expert `i` on device `i mod num_devices`.
    pub fn round_robin(num_experts: usize, num_devices: usize) -> Result<Self> {
        if num_devices == 0 {
            return Err(Error::InvalidArgument("need at least one device".into()));
        }
        Ok(Self {
            num_devices,
            placement: (0..num_experts).map(|i| i % num_devices).collect(),
        })
    }

    pub fn one_per_device(num_experts: usize) -> Self {
        Self {
            num_devices: num_experts.max(1),
            placement: (0..num_experts).collect(),
        }
    }

    /// `ceil(n / experts_per_device)` devices, filled round-robin.
    pub fn with_experts_per_device(num_experts: usize, experts_per_device: usize) -> Result<Self> {
        if experts_per_device == 0 {
            return Err(Error::InvalidArgument(
                "experts per device must be >= 1".into(),
            ));
        }
        Self::round_robin(num_experts, num_experts.div_ceil(experts_per_device).max(1))
    }

    pub fn explicit(placement: Vec<usize>, num_devices: usize) -> Result<Self> {
        if num_devices == 0 {
            return Err(Error::InvalidArgument("need at least one device".into()));
        }
        if let Some((i, d)) = placement
            .iter()
            .enumerate()
            .find(|(_, &d)| d >= num_devices)
        {
            return Err(Error::InvalidArgument(format!(
                "expert {i} placed on device {d}, but only {num_devices} devices exist"
            )));
        }
        Ok(Self {
            num_devices,
            placement,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn num_experts(&self) -> usize {
        self.placement.len()
    }

    pub fn placement(&self) -> &[usize] {
        &self.placement
    }
}

/// `L = c0 + c1 * max device load`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel<T> {
    pub fixed_overhead: T,
    pub per_token_cost: T,
}

impl<T: Scalar> LatencyModel<T> {
    pub fn new(fixed_overhead: T, per_token_cost: T) -> Result<Self> {
        if !(fixed_overhead.is_finite() && fixed_overhead >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "fixed overhead must be finite and >= 0, got {fixed_overhead}"
            )));
        }
        if !(per_token_cost.is_finite() && per_token_cost > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "per-token cost must be finite and > 0, got {per_token_cost}"
            )));
        }
        Ok(Self {
            fixed_overhead,
            per_token_cost,
        })
    }
}

impl<T: Scalar> Default for LatencyModel<T> {
    fn default() -> Self {
        Self {
            fixed_overhead: T::zero(),
            per_token_cost: T::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport<T> {
    pub layer_speedup: T,
    pub end_to_end_speedup: T,
    pub baseline_max_device_load: u64,
    pub constrained_max_device_load: u64,
    pub moe_time_fraction: T,
}

pub fn device_loads(loads: &LoadVector, map: &DeviceMap) -> Result<Vec<u64>> {
    if loads.len() != map.num_experts() {
        return Err(Error::DimensionMismatch(format!(
            "{} expert loads for a device map over {} experts",
            loads.len(),
            map.num_experts()
        )));
    }
    let mut totals = vec![0u64; map.num_devices()];
    for (&l, &d) in loads.as_slice().iter().zip(map.placement()) {
        totals[d] += l;
    }
    Ok(totals)
}

pub fn layer_latency<T: Scalar>(device_totals: &[u64], model: &LatencyModel<T>) -> T {
    let max = device_totals.iter().copied().max().unwrap_or(0);
    model.fixed_overhead + model.per_token_cost * T::of_count(max)
}

/// Range of the busiest expert's load: `[N, n N / k]` uncapped, `[N, gamma N]`
/// for `gamma >= 1`, and exactly `gamma N` for `gamma < 1`.
pub fn max_load_bounds<T: Scalar>(t: usize, k: usize, n: usize, gamma: CapacityFactor) -> (T, T) {
    let expected = T::of_count(t as u64 * k as u64) / T::of_count(n as u64);
    match gamma {
        CapacityFactor::Unbounded => (
            expected,
            T::of_count(n as u64) * expected / T::of_count(k as u64),
        ),
        CapacityFactor::Finite(g) => {
            let capped = T::of_ratio(g) * expected;
            if g >= num_rational::Ratio::from_integer(1) {
                (expected, capped)
            } else {
                (capped, capped)
            }
        }
    }
}

/// Baseline latency over constrained latency.
pub fn layer_speedup<T: Scalar>(
    baseline: &LoadVector,
    constrained: &LoadVector,
    map: &DeviceMap,
    model: &LatencyModel<T>,
) -> Result<T> {
    let base = layer_latency(&device_loads(baseline, map)?, model);
    let capped = layer_latency(&device_loads(constrained, map)?, model);
    if capped <= T::zero() {
        return Err(Error::ZeroLatency);
    }
    Ok(base / capped)
}

/// Amdahl composition: only the MoE share `rho` of runtime speeds up by `s`.
pub fn end_to_end_speedup<T: Scalar>(layer_speedup: T, rho: T) -> T {
    debug_assert!(layer_speedup > T::zero());
    T::one() / ((T::one() - rho) + rho / layer_speedup)
}

/// Inverts [`end_to_end_speedup`]: the `rho` at which `layer` composes to `end_to_end`.
pub fn calibrate_moe_time_fraction<T: Scalar>(layer: T, end_to_end: T) -> Result<T> {
    if !(layer > T::one() && end_to_end >= T::one() && end_to_end <= layer) {
        return Err(Error::InvalidArgument(format!(
            "need layer > 1 and 1 <= end-to-end <= layer, got {layer}, {end_to_end}"
        )));
    }
    Ok((T::one() - T::one() / end_to_end) / (T::one() - T::one() / layer))
}

pub fn check_moe_time_fraction<T: Scalar>(rho: T) -> Result<()> {
    if rho >= T::zero() && rho <= T::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "MoE time fraction must be in [0, 1], got {rho}"
        )))
    }
}

pub fn speedup_report<T: Scalar>(
    baseline: &LoadVector,
    constrained: &LoadVector,
    map: &DeviceMap,
    model: &LatencyModel<T>,
    rho: T,
) -> Result<SpeedupReport<T>> {
    check_moe_time_fraction(rho)?;
    let base_dev = device_loads(baseline, map)?;
    let capped_dev = device_loads(constrained, map)?;
    let layer = layer_speedup(baseline, constrained, map, model)?;
    Ok(SpeedupReport {
        layer_speedup: layer,
        end_to_end_speedup: end_to_end_speedup(layer, rho),
        baseline_max_device_load: base_dev.iter().copied().max().unwrap_or(0),
        constrained_max_device_load: capped_dev.iter().copied().max().unwrap_or(0),
        moe_time_fraction: rho,
    })
}
