//! A miniature MoE layer with linear experts, for checking how drop and reroute
//! change the combined output `y = sum_i g_i * E_i(x)`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::AssignmentSet;
use crate::scalar::Scalar;

/// Rows whose relative L2 change is at or below this are treated as unchanged.
pub const AFFECTED_TOLERANCE: f64 = 1e-12;

/// Linear expert `E(x) = W x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExpert<T> {
    pub weight: Array2<T>,
}

impl<T: Scalar> ToyExpert<T> {
    pub fn new(weight: Array2<T>) -> Result<Self> {
        if weight.nrows() != weight.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expert weight must be square, got {:?}",
                weight.dim()
            )));
        }
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "expert weight has non-finite entries".into(),
            ));
        }
        Ok(Self { weight })
    }

    pub fn scaled_identity(d_model: usize, scale: T) -> Self {
        Self {
            weight: Array2::eye(d_model).mapv(|v: T| v * scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyMoELayer<T> {
    experts: Vec<ToyExpert<T>>,
    d_model: usize,
    /// Divide surviving gate scores by their per-token sum.
    pub renormalize_gates: bool,
}

impl<T: Scalar> ToyMoELayer<T> {
    pub fn new(experts: Vec<ToyExpert<T>>) -> Result<Self> {
        let d_model = experts
            .first()
            .map(|e| e.weight.nrows())
            .ok_or_else(|| Error::InvalidArgument("a layer needs at least one expert".into()))?;
        if let Some(i) = experts.iter().position(|e| e.weight.nrows() != d_model) {
            return Err(Error::DimensionMismatch(format!(
                "expert {i} has d_model {}, expected {d_model}",
                experts[i].weight.nrows()
            )));
        }
        Ok(Self {
            experts,
            d_model,
            renormalize_gates: false,
        })
    }

    /// Gaussian weights with variance `1 / d_model`.
    pub fn random(num_experts: usize, d_model: usize, seed: u64) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::InvalidArgument("d_model must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_model as f64).sqrt();
        let experts = (0..num_experts)
            .map(|_| ToyExpert {
                weight: Array2::from_shape_simple_fn((d_model, d_model), || {
                    T::of_f64(scale * rng.sample::<f64, _>(StandardNormal))
                }),
            })
            .collect();
        Self::new(experts)
    }

    pub fn with_renormalized_gates(mut self, on: bool) -> Self {
        self.renormalize_gates = on;
        self
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Output row per token; a token with no mappings gets the zero vector.
    /// Contributions are summed in ascending expert order.
    pub fn forward(
        &self,
        tokens: ArrayView2<'_, T>,
        assignments: &AssignmentSet<T>,
    ) -> Result<Array2<T>> {
        if tokens.ncols() != self.d_model {
            return Err(Error::DimensionMismatch(format!(
                "tokens have width {}, layer d_model is {}",
                tokens.ncols(),
                self.d_model
            )));
        }
        if assignments.num_experts() > self.experts.len()
            || assignments.num_tokens() > tokens.nrows()
        {
            return Err(Error::DimensionMismatch(format!(
                "assignments cover {} tokens x {} experts; layer has {} tokens x {} experts",
                assignments.num_tokens(),
                assignments.num_experts(),
                tokens.nrows(),
                self.experts.len()
            )));
        }
        let mut out = Array2::<T>::zeros(tokens.dim());
        let mappings = assignments.mappings();
        let mut start = 0;
        while start < mappings.len() {
            let token = mappings[start].token;
            let end = start
                + mappings[start..]
                    .iter()
                    .take_while(|m| m.token == token)
                    .count();
            let group = &mappings[start..end];
            let norm = if self.renormalize_gates {
                group.iter().map(|m| m.score).sum::<T>()
            } else {
                T::one()
            };
            let x = tokens.row(token);
            let mut y = Array1::<T>::zeros(self.d_model);
            for m in group {
                let gate = m.score / norm;
                y.scaled_add(gate, &self.experts[m.expert].weight.dot(&x));
            }
            out.row_mut(token).assign(&y);
            start = end;
        }
        Ok(out)
    }
}

/// Per-token output change between two runs of the same layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Mean over affected rows of `|b - c| / |b|` (`|b - c|` when `|b| = 0`).
    pub mean_relative_l2: f64,
    pub affected_fraction: f64,
}

pub fn output_divergence<T: Scalar>(
    baseline: ArrayView2<'_, T>,
    constrained: ArrayView2<'_, T>,
) -> Result<Divergence> {
    if baseline.dim() != constrained.dim() {
        return Err(Error::DimensionMismatch(format!(
            "baseline {:?} vs constrained {:?}",
            baseline.dim(),
            constrained.dim()
        )));
    }
    let rows = baseline.nrows();
    let mut affected = 0usize;
    let mut total = 0.0;
    for (b, c) in baseline.rows().into_iter().zip(constrained.rows()) {
        let diff = b
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = b
            .iter()
            .map(|x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        let rel = if norm > 0.0 { diff / norm } else { diff };
        if rel > AFFECTED_TOLERANCE {
            affected += 1;
            total += rel;
        }
    }
    Ok(Divergence {
        mean_relative_l2: if affected > 0 {
            total / affected as f64
        } else {
            0.0
        },
        affected_fraction: if rows > 0 {
            affected as f64 / rows as f64
        } else {
            0.0
        },
    })
}

/// Seeded Gaussian token embeddings.
pub fn random_tokens<T: Scalar>(num_tokens: usize, d_model: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((num_tokens, d_model), || {
        T::of_f64(rng.sample::<f64, _>(StandardNormal))
    })
}
