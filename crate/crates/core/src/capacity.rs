//! Expert capacity and capacity-aware token drop.
//!
//! Capacity is `C = ceil(gamma * t * k / n)`, computed exactly: `gamma` is held
//! as a rational so `1.5 * 2 = 3` never becomes `3.0000000000000004 -> 4`.
//! An expert with `N_j > C` loses exactly `N_j - C` mappings; which ones is
//! decided by the [`DropMetric`].

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gating::{AssignmentSet, LoadVector, Mapping, ScoreMatrix};
use crate::scalar::Scalar;

/// Capacity factor `gamma > 0`, or unbounded (no capacity constraint).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CapacityFactor {
    Finite(Ratio<u64>),
    Unbounded,
}

impl CapacityFactor {
    /// From a float; `+inf` maps to [`CapacityFactor::Unbounded`]. Finite values
    /// are recovered as the simplest fraction that rounds to the same `f64`.
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma == f64::INFINITY {
            return Ok(CapacityFactor::Unbounded);
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "capacity factor must be > 0, got {gamma}"
            )));
        }
        let r = Ratio::<i64>::approximate_float(gamma).ok_or_else(|| {
            Error::InvalidArgument(format!("capacity factor {gamma} is not representable"))
        })?;
        Self::from_ratio(*r.numer() as u64, *r.denom() as u64)
    }

    pub fn from_ratio(numer: u64, denom: u64) -> Result<Self> {
        if numer == 0 || denom == 0 {
            return Err(Error::InvalidArgument(format!(
                "capacity factor {numer}/{denom} must be positive"
            )));
        }
        Ok(CapacityFactor::Finite(Ratio::new(numer, denom)))
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, CapacityFactor::Unbounded)
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            CapacityFactor::Finite(r) => f64::of_ratio(*r),
            CapacityFactor::Unbounded => f64::INFINITY,
        }
    }
}

impl PartialOrd for CapacityFactor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CapacityFactor {
    fn cmp(&self, other: &Self) -> Ordering {
        use CapacityFactor::*;
        match (self, other) {
            (Finite(a), Finite(b)) => a.cmp(b),
            (Finite(_), Unbounded) => Ordering::Less,
            (Unbounded, Finite(_)) => Ordering::Greater,
            (Unbounded, Unbounded) => Ordering::Equal,
        }
    }
}

impl fmt::Display for CapacityFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapacityFactor::Finite(_) => write!(f, "{}", self.to_f64()),
            CapacityFactor::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for CapacityFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(CapacityFactor::Unbounded),
            _ => {
                let v: f64 = s.parse().map_err(|_| {
                    Error::InvalidArgument(format!("cannot parse capacity factor {s:?}"))
                })?;
                Self::new(v)
            }
        }
    }
}

impl Serialize for CapacityFactor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CapacityFactor::Finite(_) => s.serialize_f64(self.to_f64()),
            CapacityFactor::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for CapacityFactor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => CapacityFactor::new(v),
            Repr::Str(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Per-expert token budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Capacity {
    Bounded(u64),
    Unbounded,
}

impl Capacity {
    /// Mappings an expert with `load` must shed.
    pub fn overflow(&self, load: u64) -> u64 {
        match self {
            Capacity::Bounded(c) => load.saturating_sub(*c),
            Capacity::Unbounded => 0,
        }
    }

    pub fn admits(&self, load: u64) -> bool {
        self.overflow(load) == 0
    }

    pub fn bound(&self) -> Option<u64> {
        match self {
            Capacity::Bounded(c) => Some(*c),
            Capacity::Unbounded => None,
        }
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::Bounded(c) => write!(f, "{c}"),
            Capacity::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for Capacity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Capacity::Bounded(c) => s.serialize_u64(*c),
            Capacity::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Capacity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(c) => Ok(Capacity::Bounded(c)),
            Repr::Str(s) if s == "inf" => Ok(Capacity::Unbounded),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid capacity {s:?}"))),
        }
    }
}

/// `C = ceil(gamma * t * k / n)`, exact.
pub fn capacity_limit(gamma: CapacityFactor, t: usize, k: usize, n: usize) -> Capacity {
    assert!(n > 0, "capacity_limit needs at least one expert");
    match gamma {
        CapacityFactor::Unbounded => Capacity::Unbounded,
        CapacityFactor::Finite(g) => {
            let numer = *g.numer() as u128 * t as u128 * k as u128;
            let denom = *g.denom() as u128 * n as u128;
            let c = numer.div_ceil(denom);
            Capacity::Bounded(u64::try_from(c).unwrap_or(u64::MAX))
        }
    }
}

/// Which overflowed mappings an expert gives up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMetric {
    /// Keep earlier tokens; drop the highest token ids.
    Order,
    /// Keep later tokens; drop the lowest token ids.
    ReverseOrder,
    /// Drop a seeded uniform sample.
    Random,
    /// Drop the lowest gate scores.
    #[default]
    Score,
}

impl DropMetric {
    pub const ALL: [DropMetric; 4] = [
        DropMetric::Order,
        DropMetric::ReverseOrder,
        DropMetric::Random,
        DropMetric::Score,
    ];
}

impl fmt::Display for DropMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropMetric::Order => "order",
            DropMetric::ReverseOrder => "reverse_order",
            DropMetric::Random => "random",
            DropMetric::Score => "score",
        })
    }
}

impl FromStr for DropMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "order" => Ok(DropMetric::Order),
            "reverse_order" | "reverse" => Ok(DropMetric::ReverseOrder),
            "random" => Ok(DropMetric::Random),
            "score" => Ok(DropMetric::Score),
            other => Err(Error::InvalidArgument(format!(
                "unknown drop metric {other:?} (expected order, reverse_order, random or score)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityPolicy {
    pub gamma: CapacityFactor,
    pub metric: DropMetric,
    /// Only consulted by [`DropMetric::Random`].
    pub seed: u64,
}

impl CapacityPolicy {
    pub fn new(gamma: CapacityFactor, metric: DropMetric) -> Self {
        Self {
            gamma,
            metric,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn capacity_for<T: Scalar>(&self, assignments: &AssignmentSet<T>) -> Capacity {
        capacity_limit(
            self.gamma,
            assignments.num_tokens(),
            assignments.top_k(),
            assignments.num_experts(),
        )
    }

    /// Computes `C` from the assignment shape and enforces it.
    pub fn apply<T: Scalar>(
        &self,
        scores: &ScoreMatrix<T>,
        assignments: &AssignmentSet<T>,
    ) -> Result<DropResult<T>> {
        let c = self.capacity_for(assignments);
        drop_overflow(scores, assignments, c, self.metric, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropResult<T> {
    pub retained: AssignmentSet<T>,
    /// Dropped `(token, expert)` keys, sorted.
    pub dropped: Vec<(usize, usize)>,
    pub capacity: Capacity,
    /// Input scores with the dropped entries set to the mask sentinel.
    pub masked_scores: ScoreMatrix<T>,
}

impl<T: Scalar> DropResult<T> {
    /// Tokens that lost at least one mapping.
    pub fn affected_tokens(&self) -> Vec<usize> {
        let mut tokens: Vec<usize> = self.dropped.iter().map(|&(t, _)| t).collect();
        tokens.dedup();
        tokens
    }
}

/// Orders an expert's `(token, score)` candidates so the first `K` are the ones
/// the score metric drops: ascending score, ties broken by higher token id.
///
/// The `K`-th entry's score is the threshold `tau`; everything strictly below it
/// is dropped and ties at `tau` go highest token id first until exactly `K` are
/// gone.
pub(crate) fn score_drop_order<T: Scalar>(candidates: &mut [(usize, T)]) {
    candidates.sort_unstable_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(b.0.cmp(&a.0))
    });
}

fn expert_rng(seed: u64, layer: u32, expert: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&layer.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(expert as u64);
    rng
}

/// Tokens expert `expert` drops; `column` holds its `(token, score)` pairs, tokens ascending.
fn choose_drops<T: Scalar>(
    column: &[(usize, T)],
    excess: usize,
    metric: DropMetric,
    seed: u64,
    layer: u32,
    expert: usize,
) -> Vec<usize> {
    match metric {
        DropMetric::Order => column[column.len() - excess..]
            .iter()
            .map(|c| c.0)
            .collect(),
        DropMetric::ReverseOrder => column[..excess].iter().map(|c| c.0).collect(),
        DropMetric::Random => {
            let mut rng = expert_rng(seed, layer, expert);
            rand::seq::index::sample(&mut rng, column.len(), excess)
                .into_iter()
                .map(|i| column[i].0)
                .collect()
        }
        DropMetric::Score => {
            let mut sorted = column.to_vec();
            score_drop_order(&mut sorted);
            sorted[..excess].iter().map(|c| c.0).collect()
        }
    }
}

/// Drops exactly `max(0, N_j - C)` mappings from every expert `j`.
pub fn drop_overflow<T: Scalar>(
    scores: &ScoreMatrix<T>,
    assignments: &AssignmentSet<T>,
    capacity: Capacity,
    metric: DropMetric,
    seed: u64,
) -> Result<DropResult<T>> {
    if (scores.num_tokens(), scores.num_experts())
        != (assignments.num_tokens(), assignments.num_experts())
    {
        return Err(Error::DimensionMismatch(format!(
            "scores are {}x{}, assignments {}x{}",
            scores.num_tokens(),
            scores.num_experts(),
            assignments.num_tokens(),
            assignments.num_experts()
        )));
    }
    let mut dropped = Vec::new();
    for (expert, column) in assignments.by_expert().iter().enumerate() {
        let excess = capacity.overflow(column.len() as u64) as usize;
        if excess > 0 {
            let tokens = choose_drops(column, excess, metric, seed, scores.layer_id(), expert);
            dropped.extend(tokens.into_iter().map(|t| (t, expert)));
        }
    }
    Ok(finish_drop(scores, assignments, capacity, dropped))
}

fn finish_drop<T: Scalar>(
    scores: &ScoreMatrix<T>,
    assignments: &AssignmentSet<T>,
    capacity: Capacity,
    mut dropped: Vec<(usize, usize)>,
) -> DropResult<T> {
    dropped.sort_unstable();
    let mut masked_scores = scores.clone();
    for &(t, j) in &dropped {
        masked_scores.mask(t, j);
    }
    let retained: Vec<Mapping<T>> = assignments
        .iter()
        .filter(|m| dropped.binary_search(&(m.token, m.expert)).is_err())
        .copied()
        .collect();
    DropResult {
        retained: AssignmentSet::from_sorted_unchecked(
            assignments.num_tokens(),
            assignments.num_experts(),
            assignments.top_k(),
            retained,
        ),
        dropped,
        capacity,
        masked_scores,
    }
}

/// Share of mappings a capacity removes: `sum_i max(0, N_i - C) / sum_i N_i`, exact.
pub fn dropped_fraction(loads: &LoadVector, capacity: Capacity) -> Result<Ratio<u64>> {
    let total = loads.total();
    if total == 0 {
        return Err(Error::ZeroLoad);
    }
    let over: u64 = loads.as_slice().iter().map(|&l| capacity.overflow(l)).sum();
    Ok(Ratio::new(over, total))
}

/// Expert Drop baseline: skip the `floor(fraction * n)` least-loaded experts
/// (ties skip the lower index first) and drop all of their mappings.
pub fn expert_drop<T: Scalar>(
    scores: &ScoreMatrix<T>,
    assignments: &AssignmentSet<T>,
    fraction: f64,
) -> Result<DropResult<T>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "expert drop fraction must be in [0, 1), got {fraction}"
        )));
    }
    let n = assignments.num_experts();
    // Absorb representation error such as 0.29 * 100 = 28.999999999999996.
    let skip = (fraction * n as f64 + 1e-9).floor() as usize;
    if skip >= n {
        return Err(Error::InvalidArgument(format!(
            "expert drop fraction {fraction} would skip all {n} experts"
        )));
    }
    let loads = assignments.loads();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (loads.0[j], j));
    let mut skipped = vec![false; n];
    for &j in &order[..skip] {
        skipped[j] = true;
    }
    let dropped = assignments
        .iter()
        .filter(|m| skipped[m.expert])
        .map(|m| (m.token, m.expert))
        .collect();
    Ok(finish_drop(
        scores,
        assignments,
        Capacity::Unbounded,
        dropped,
    ))
}
