//! Seeded synthetic routing traces with controllable expert imbalance.
//!
//! Logits are a two-level model: `logit[t][j] = skew * popularity[j] + noise[t][j]`
//! where `popularity` is log-normal (heavy right tail, a few persistently hot
//! experts) and `noise` is standard normal per token. Presets re-scale `skew`
//! until the realized peak normalized load `max N_i / N` enters their band, then
//! bisect back toward the band edge so the trace is no more extreme than needed.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RoutingTrace;
use crate::error::{Error, Result};
use crate::gating::route;

/// Peak normalized load a scratch-trained model reaches (at least).
pub const SCRATCH_MIN_PEAK: f64 = 5.0;
/// Peak normalized load an upcycled model stays within.
pub const UPCYCLED_MAX_PEAK: f64 = 3.0;

const SCRATCH_START_SKEW: f64 = 0.02;
const UPCYCLED_START_SKEW: f64 = 0.2;
const MAX_ATTEMPTS: usize = 48;
const BISECT_STEPS: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// No calibration; `skew` is used as given.
    #[default]
    Uniform,
    /// Peak normalized load >= 5.
    ScratchLike,
    /// Peak normalized load <= 3.
    UpcycledLike,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Uniform => "uniform",
            Preset::ScratchLike => "scratch-like",
            Preset::UpcycledLike => "upcycled-like",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "uniform" => Ok(Preset::Uniform),
            "scratch-like" | "scratch" => Ok(Preset::ScratchLike),
            "upcycled-like" | "upcycled" => Ok(Preset::UpcycledLike),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other:?} (expected uniform, scratch-like or upcycled-like)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Scale of the per-expert popularity bias; 0 is balanced. For calibrated
    /// presets a positive value is the starting point of the search.
    pub skew: f64,
    pub seed: u64,
    pub preset: Preset,
    /// Pins the hottest expert's normalized load to this value (rounded to a
    /// whole token count).
    pub target_peak: Option<f64>,
    pub layer_id: u32,
}

impl SyntheticSpec {
    pub fn new(num_tokens: usize, num_experts: usize, top_k: usize) -> Self {
        Self {
            num_tokens,
            num_experts,
            top_k,
            skew: 0.0,
            seed: 0,
            preset: Preset::Uniform,
            target_peak: None,
            layer_id: 0,
        }
    }

    pub fn with_skew(mut self, skew: f64) -> Self {
        self.skew = skew;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.preset = preset;
        self
    }

    pub fn with_target_peak(mut self, peak: f64) -> Self {
        self.target_peak = Some(peak);
        self
    }

    pub fn with_layer_id(mut self, layer_id: u32) -> Self {
        self.layer_id = layer_id;
        self
    }

    pub fn validate(&self) -> Result<()> {
        super::validate_shape(self.num_tokens, self.num_experts, self.top_k)?;
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "skew must be finite and >= 0, got {}",
                self.skew
            )));
        }
        let ceiling = self.num_experts as f64 / self.top_k as f64;
        if self.preset == Preset::ScratchLike && ceiling < SCRATCH_MIN_PEAK {
            return Err(Error::InvalidArgument(format!(
                "scratch-like needs n/k >= {SCRATCH_MIN_PEAK}, got {ceiling}"
            )));
        }
        if let Some(p) = self.target_peak {
            if !(p >= 1.0 && p <= ceiling) {
                return Err(Error::InvalidArgument(format!(
                    "target peak {p} must lie in [1, n/k = {ceiling}]"
                )));
            }
        }
        Ok(())
    }
}

/// `max_i N_i / N` after softmax + top-k routing of `trace`.
pub fn peak_normalized_load(trace: &RoutingTrace) -> f64 {
    let (_, a) = route::<f64>(trace);
    let expected = trace.num_tokens() as f64 * trace.top_k() as f64 / trace.num_experts() as f64;
    a.loads().max() as f64 / expected
}

struct Components {
    popularity: Vec<f64>,
    noise: Array2<f64>,
}

impl Components {
    fn sample(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let lognormal = LogNormal::new(0.0, 1.0).expect("valid log-normal parameters");
        let popularity = (0..spec.num_experts)
            .map(|_| rng.sample(lognormal))
            .collect();
        let noise = Array2::from_shape_simple_fn((spec.num_tokens, spec.num_experts), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        Self { popularity, noise }
    }

    fn assemble(&self, spec: &SyntheticSpec, skew: f64) -> Result<RoutingTrace> {
        let mut logits = self.noise.clone();
        for (mut col, p) in logits.axis_iter_mut(Axis(1)).zip(&self.popularity) {
            col += skew * p;
        }
        RoutingTrace::new(spec.layer_id, spec.top_k, logits)
    }
}

/// Generates a trace; a pure function of `spec` (seed included).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RoutingTrace> {
    spec.validate()?;
    let parts = Components::sample(spec);
    let trace = match spec.preset {
        Preset::Uniform => parts.assemble(spec, spec.skew)?,
        Preset::ScratchLike => calibrate(spec, &parts, SCRATCH_START_SKEW, 1.25, |peak| {
            peak >= SCRATCH_MIN_PEAK
        })?,
        Preset::UpcycledLike => calibrate(spec, &parts, UPCYCLED_START_SKEW, 0.7, |peak| {
            peak <= UPCYCLED_MAX_PEAK
        })?,
    };
    match spec.target_peak {
        Some(target) => pin_peak(trace, target),
        None => Ok(trace),
    }
}

fn calibrate(
    spec: &SyntheticSpec,
    parts: &Components,
    default_skew: f64,
    step: f64,
    accept: impl Fn(f64) -> bool,
) -> Result<RoutingTrace> {
    let mut skew = if spec.skew > 0.0 {
        spec.skew
    } else {
        default_skew
    };
    let mut peak = f64::NAN;
    for attempt in 0..MAX_ATTEMPTS {
        let trace = parts.assemble(spec, skew)?;
        peak = peak_normalized_load(&trace);
        if accept(peak) {
            if attempt == 0 {
                return Ok(trace);
            }
            // The previous skew missed the band; narrow toward its edge.
            let (mut miss, mut hit, mut best) = (skew / step, skew, trace);
            for _ in 0..BISECT_STEPS {
                let mid = 0.5 * (miss + hit);
                let candidate = parts.assemble(spec, mid)?;
                if accept(peak_normalized_load(&candidate)) {
                    (hit, best) = (mid, candidate);
                } else {
                    miss = mid;
                }
            }
            return Ok(best);
        }
        skew *= step;
    }
    Err(Error::Generation {
        reason: format!(
            "preset {} not reached after {MAX_ATTEMPTS} attempts",
            spec.preset
        ),
        achieved: peak,
        skew: skew / step,
    })
}

/// Shifts the hottest expert's logits so exactly `round(target * N)` tokens select it.
fn pin_peak(trace: RoutingTrace, target: f64) -> Result<RoutingTrace> {
    let (t, n, k) = (trace.num_tokens(), trace.num_experts(), trace.top_k());
    let expected = t as f64 * k as f64 / n as f64;
    let wanted = ((target * expected).round() as usize).min(t);
    let (_, a) = route::<f64>(&trace);
    let loads = a.loads();
    let hot = (0..n)
        .max_by_key(|&j| (loads.0[j], std::cmp::Reverse(j)))
        .unwrap_or(0);

    let mut logits = trace.logits().clone();
    if k < n {
        // Token selects `hot` iff logit[hot] + shift > k-th largest of the other logits.
        let mut others = Vec::with_capacity(n - 1);
        let mut margins: Vec<f64> = logits
            .rows()
            .into_iter()
            .map(|row| {
                others.clear();
                others.extend(
                    row.iter()
                        .enumerate()
                        .filter(|(j, _)| *j != hot)
                        .map(|(_, &v)| v),
                );
                others.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
                others[k - 1] - row[hot]
            })
            .collect();
        margins.sort_unstable_by(f64::total_cmp);
        let shift = match wanted {
            0 => margins[0] - 1.0,
            w if w == t => margins[t - 1] + 1.0,
            w => 0.5 * (margins[w - 1] + margins[w]),
        };
        logits.column_mut(hot).mapv_inplace(|v| v + shift);
    }

    let pinned = RoutingTrace::new(trace.layer_id(), k, logits)?;
    let (_, a) = route::<f64>(&pinned);
    let loads = a.loads();
    if loads.0[hot] as usize != wanted || loads.max() as usize != wanted {
        return Err(Error::Generation {
            reason: format!("could not pin peak normalized load to {target}"),
            achieved: loads.max() as f64 / expected,
            skew: f64::NAN,
        });
    }
    Ok(pinned)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_spec_stays_near_expected_load() {
        let spec = SyntheticSpec::new(3000, 64, 8).with_seed(7);
        let tr = generate_synthetic(&spec).unwrap();
        let peak = peak_normalized_load(&tr);
        assert!(peak <= 1.5, "peak {peak}");
    }

    #[test]
    fn scratch_like_reaches_five() {
        let spec = SyntheticSpec::new(4096, 64, 8)
            .with_preset(Preset::ScratchLike)
            .with_seed(1);
        let tr = generate_synthetic(&spec).unwrap();
        assert!(peak_normalized_load(&tr) >= 5.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::new(512, 16, 2).with_skew(0.8).with_seed(99);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec.clone().with_seed(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pinned_peak_is_exact() {
        let spec = SyntheticSpec::new(4096, 64, 8)
            .with_seed(3)
            .with_target_peak(7.0);
        let tr = generate_synthetic(&spec).unwrap();
        assert_eq!(peak_normalized_load(&tr), 7.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_synthetic(&SyntheticSpec::new(10, 8, 9)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(10, 8, 1).with_skew(-1.0)).is_err());
        assert!(generate_synthetic(
            &SyntheticSpec::new(100, 8, 2).with_preset(Preset::ScratchLike)
        )
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(100, 8, 2).with_target_peak(4.5)).is_err());
    }

    #[test]
    fn unreachable_target_reports_achieved_value() {
        // One token cannot be balanced: its k experts always carry n/k times the mean.
        let spec = SyntheticSpec::new(1, 8, 1).with_preset(Preset::UpcycledLike);
        match generate_synthetic(&spec) {
            Err(Error::Generation { achieved, .. }) => assert_eq!(achieved, 8.0),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(
            "scratch-like".parse::<Preset>().unwrap(),
            Preset::ScratchLike
        );
        assert_eq!(
            "upcycled_like".parse::<Preset>().unwrap(),
            Preset::UpcycledLike
        );
        assert!("spiky".parse::<Preset>().is_err());
        assert_eq!(Preset::UpcycledLike.to_string(), "upcycled-like");
    }
}
