//! Softmax gating, top-k selection and per-expert load counting.
//!
//! A [`ScoreMatrix`] entry of exactly zero is the mask sentinel: the
//! token-to-expert mapping is unavailable. Softmax of finite logits never
//! produces zero (outputs are clamped to the smallest positive normal), so the
//! sentinel only appears after capacity enforcement masks an entry.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::RoutingTrace;

/// Dense `t x n` matrix of token-to-expert importance scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    layer_id: u32,
    scores: Array2<T>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(layer_id: u32, scores: Array2<T>) -> Result<Self> {
        let (t, n) = scores.dim();
        if t == 0 || n == 0 {
            return Err(Error::invalid(format!(
                "score matrix must be non-empty, got {t}x{n}"
            )));
        }
        if let Some(((row, col), v)) = scores
            .indexed_iter()
            .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::invalid(format!(
                "score [{row}, {col}] = {v} is outside [0, 1]"
            )));
        }
        Ok(Self { layer_id, scores })
    }

    /// Builds a layer-0 matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} entries, expected {n}",
                r.len()
            )));
        }
        let flat: Vec<T> = rows.iter().flatten().copied().collect();
        let scores = Array2::from_shape_vec((rows.len(), n), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(0, scores)
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn num_tokens(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.ncols()
    }

    #[inline]
    pub fn get(&self, token: usize, expert: usize) -> T {
        self.scores[[token, expert]]
    }

    pub fn row(&self, token: usize) -> ArrayView1<'_, T> {
        self.scores.row(token)
    }

    pub fn as_array(&self) -> &Array2<T> {
        &self.scores
    }

    #[inline]
    pub fn is_available(&self, token: usize, expert: usize) -> bool {
        self.get(token, expert) > T::zero()
    }

    /// Sets the entry to the mask sentinel.
    #[inline]
    pub fn mask(&mut self, token: usize, expert: usize) {
        self.scores[[token, expert]] = T::zero();
    }

    pub fn masked_count(&self) -> usize {
        self.scores.iter().filter(|v| **v == T::zero()).count()
    }

    /// Reorders tokens: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_tokens(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_tokens())?;
        let scores = self.scores.select(ndarray::Axis(0), perm);
        Ok(Self {
            layer_id: self.layer_id,
            scores,
        })
    }
}

pub(crate) fn check_permutation(perm: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if perm.len() != len {
        return Err(Error::InvalidArgument(format!(
            "permutation has length {}, expected {len}",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= len || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    Ok(())
}

/// One retained token-to-expert mapping with its gate score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mapping<T> {
    pub token: usize,
    pub expert: usize,
    pub score: T,
}

/// Token-to-expert mappings, kept sorted by `(token, expert)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentSet<T> {
    num_tokens: usize,
    num_experts: usize,
    top_k: usize,
    mappings: Vec<Mapping<T>>,
}

impl<T: Scalar> AssignmentSet<T> {
    pub fn from_mappings(
        num_tokens: usize,
        num_experts: usize,
        top_k: usize,
        mut mappings: Vec<Mapping<T>>,
    ) -> Result<Self> {
        if top_k == 0 || top_k > num_experts {
            return Err(Error::InvalidArgument(format!(
                "top_k {top_k} must be in 1..={num_experts}"
            )));
        }
        mappings.sort_by_key(|m| (m.token, m.expert));
        let mut per_token = vec![0usize; num_tokens];
        for (i, m) in mappings.iter().enumerate() {
            if m.token >= num_tokens || m.expert >= num_experts {
                return Err(Error::InvalidArgument(format!(
                    "mapping ({}, {}) out of range for {num_tokens}x{num_experts}",
                    m.token, m.expert
                )));
            }
            if !(m.score > T::zero() && m.score <= T::one()) {
                return Err(Error::InvalidArgument(format!(
                    "mapping ({}, {}) has score {} outside (0, 1]",
                    m.token, m.expert, m.score
                )));
            }
            if i > 0 && (mappings[i - 1].token, mappings[i - 1].expert) == (m.token, m.expert) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate mapping ({}, {})",
                    m.token, m.expert
                )));
            }
            per_token[m.token] += 1;
            if per_token[m.token] > top_k {
                return Err(Error::InvalidArgument(format!(
                    "token {} has more than {top_k} mappings",
                    m.token
                )));
            }
        }
        Ok(Self {
            num_tokens,
            num_experts,
            top_k,
            mappings,
        })
    }

    /// Construction from already sorted, validated mappings.
    pub(crate) fn from_sorted_unchecked(
        num_tokens: usize,
        num_experts: usize,
        top_k: usize,
        mappings: Vec<Mapping<T>>,
    ) -> Self {
        debug_assert!(mappings
            .windows(2)
            .all(|w| (w[0].token, w[0].expert) < (w[1].token, w[1].expert)));
        Self {
            num_tokens,
            num_experts,
            top_k,
            mappings,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn len(&self) -> usize {
        self.mappings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mappings.is_empty()
    }

    pub fn mappings(&self) -> &[Mapping<T>] {
        &self.mappings
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mapping<T>> {
        self.mappings.iter()
    }

    pub fn keys(&self) -> BTreeSet<(usize, usize)> {
        self.mappings.iter().map(|m| (m.token, m.expert)).collect()
    }

    pub fn contains(&self, token: usize, expert: usize) -> bool {
        self.mappings
            .binary_search_by_key(&(token, expert), |m| (m.token, m.expert))
            .is_ok()
    }

    pub fn loads(&self) -> LoadVector {
        let mut loads = vec![0u64; self.num_experts];
        for m in &self.mappings {
            loads[m.expert] += 1;
        }
        LoadVector(loads)
    }

    /// Number of mappings held by each token.
    pub fn token_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_tokens];
        for m in &self.mappings {
            counts[m.token] += 1;
        }
        counts
    }

    /// Expected per-expert load `t * k / n` for this assignment's shape.
    pub fn expected_load(&self) -> Ratio<u64> {
        expected_load(self.num_tokens, self.top_k, self.num_experts)
    }

    /// `(token, score)` pairs per expert, tokens ascending.
    pub(crate) fn by_expert(&self) -> Vec<Vec<(usize, T)>> {
        let mut columns = vec![Vec::new(); self.num_experts];
        for m in &self.mappings {
            columns[m.expert].push((m.token, m.score));
        }
        columns
    }
}

/// Per-expert token counts `N_i`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadVector(pub Vec<u64>);

impl LoadVector {
    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn max(&self) -> u64 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// Loads divided by the expected load.
    pub fn normalized<T: Scalar>(&self, expected: Ratio<u64>) -> Vec<T> {
        let expected = T::of_ratio(expected);
        self.0.iter().map(|&l| T::of_count(l) / expected).collect()
    }
}

impl From<Vec<u64>> for LoadVector {
    fn from(v: Vec<u64>) -> Self {
        LoadVector(v)
    }
}

/// Row-wise softmax of the trace logits, computed after subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(trace: &RoutingTrace) -> ScoreMatrix<T> {
    let logits = trace.logits();
    let tiny = T::min_positive_value();
    let mut scores = Array2::<T>::zeros(logits.dim());
    for (src, mut dst) in logits.rows().into_iter().zip(scores.rows_mut()) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = T::zero();
        for (d, &x) in dst.iter_mut().zip(src.iter()) {
            *d = T::of_f64(x - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d = (*d / sum).max(tiny);
        }
    }
    ScoreMatrix {
        layer_id: trace.layer_id(),
        scores,
    }
}

/// Top-`k` positive entries of `row`, returned sorted by expert index.
///
/// Ties on score go to the lower expert index.
pub(crate) fn topk_row<T: Scalar>(row: ArrayView1<'_, T>, k: usize, buf: &mut Vec<(usize, T)>) {
    buf.clear();
    buf.extend(
        row.iter()
            .enumerate()
            .filter(|(_, &s)| s > T::zero())
            .map(|(j, &s)| (j, s)),
    );
    let by_rank = |a: &(usize, T), b: &(usize, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    if buf.len() > k {
        buf.select_nth_unstable_by(k - 1, by_rank);
        buf.truncate(k);
    }
    buf.sort_unstable_by_key(|e| e.0);
}

/// Selects, per token, the `k` highest strictly positive scores.
pub fn topk_select<T: Scalar>(scores: &ScoreMatrix<T>, k: usize) -> Result<AssignmentSet<T>> {
    let (t, n) = (scores.num_tokens(), scores.num_experts());
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={n}"
        )));
    }
    let mut mappings = Vec::with_capacity(t * k);
    let mut buf = Vec::with_capacity(n);
    for token in 0..t {
        topk_row(scores.row(token), k, &mut buf);
        mappings.extend(buf.iter().map(|&(expert, score)| Mapping {
            token,
            expert,
            score,
        }));
    }
    Ok(AssignmentSet::from_sorted_unchecked(t, n, k, mappings))
}

/// Counts mappings per expert; every expert index must be below `n`.
pub fn expert_load<T: Scalar>(assignments: &AssignmentSet<T>, n: usize) -> Result<LoadVector> {
    let mut loads = vec![0u64; n];
    for m in assignments.iter() {
        *loads.get_mut(m.expert).ok_or_else(|| {
            Error::InvalidArgument(format!("expert index {} >= n = {n}", m.expert))
        })? += 1;
    }
    Ok(LoadVector(loads))
}

/// Expected tokens per expert under perfectly balanced routing, `t * k / n`.
///
/// # Panics
/// If `n == 0`.
pub fn expected_load(t: usize, k: usize, n: usize) -> Ratio<u64> {
    assert!(n > 0, "expected_load needs at least one expert");
    Ratio::new(t as u64 * k as u64, n as u64)
}

/// Softmax + top-k for a trace, the baseline (uncapped) routing.
pub fn route<T: Scalar>(trace: &RoutingTrace) -> (ScoreMatrix<T>, AssignmentSet<T>) {
    let scores = softmax_rows::<T>(trace);
    let assignments =
        topk_select(&scores, trace.top_k()).expect("trace invariants guarantee 1 <= k <= n");
    (scores, assignments)
}
