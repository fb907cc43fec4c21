//! Routing traces: per-layer router logits plus `(t, n, k)`.
//!
//! On disk a trace is JSON lines, one layer per line:
//!
//! ```text
//! {"layer":0,"t":2,"n":2,"k":1,"logits":[[1.0,0.0],[0.0,1.0]]}
//! ```
//!
//! Logits are written as the shortest decimal that round-trips the `f64`, so
//! `load(save(x)) == x` bit for bit. Token id is the row index.

mod synthetic;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::check_permutation;

pub use synthetic::{generate_synthetic, peak_normalized_load, Preset, SyntheticSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    layer_id: u32,
    top_k: usize,
    logits: Array2<f64>,
}

impl RoutingTrace {
    pub fn new(layer_id: u32, top_k: usize, logits: Array2<f64>) -> Result<Self> {
        let (t, n) = logits.dim();
        validate_shape(t, n, top_k)?;
        if let Some(((row, col), v)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "logit [{row}, {col}] is not finite ({v})"
            )));
        }
        Ok(Self {
            layer_id,
            top_k,
            logits,
        })
    }

    pub fn from_rows(layer_id: u32, top_k: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::invalid(format!(
                "logits row {i} has {} entries, expected n = {n}",
                r.len()
            )));
        }
        let flat = rows.into_iter().flatten().collect();
        let logits =
            Array2::from_shape_vec((t, n), flat).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(layer_id, top_k, logits)
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn num_tokens(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.logits.ncols()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn with_layer_id(mut self, layer_id: u32) -> Self {
        self.layer_id = layer_id;
        self
    }

    /// Reorders tokens: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_tokens(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_tokens())?;
        Ok(Self {
            layer_id: self.layer_id,
            top_k: self.top_k,
            logits: self.logits.select(ndarray::Axis(0), perm),
        })
    }

    fn to_record(&self) -> TraceRecord {
        TraceRecord {
            layer: self.layer_id,
            t: self.num_tokens(),
            n: self.num_experts(),
            k: self.top_k,
            logits: self.logits.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

fn validate_shape(t: usize, n: usize, k: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("t must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k exceeds n ({k} > {n})")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    layer: u32,
    t: usize,
    n: usize,
    k: usize,
    logits: Vec<Vec<f64>>,
}

impl TraceRecord {
    fn into_trace(self, line: usize) -> Result<RoutingTrace> {
        let at = |reason: String| Error::InvalidTrace {
            line: Some(line),
            reason,
        };
        validate_shape(self.t, self.n, self.k).map_err(|e| match e {
            Error::InvalidTrace { reason, .. } => at(reason),
            other => other,
        })?;
        if self.logits.len() != self.t {
            return Err(at(format!(
                "field `logits` has {} rows, expected t = {}",
                self.logits.len(),
                self.t
            )));
        }
        if let Some((i, r)) = self
            .logits
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.n)
        {
            return Err(at(format!(
                "field `logits` row {i} has {} entries, expected n = {}",
                r.len(),
                self.n
            )));
        }
        RoutingTrace::from_rows(self.layer, self.k, self.logits).map_err(|e| match e {
            Error::InvalidTrace { reason, .. } => at(reason),
            other => other,
        })
    }
}

/// Reads every layer record in a trace file.
pub fn load_layers(path: impl AsRef<Path>) -> Result<Vec<RoutingTrace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut layers = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trace = record.into_trace(lineno)?;
        if !ids.insert(trace.layer_id()) {
            return Err(Error::InvalidTrace {
                line: Some(lineno),
                reason: format!("duplicate layer id {}", trace.layer_id()),
            });
        }
        layers.push(trace);
    }
    if layers.is_empty() {
        return Err(Error::InvalidTrace {
            line: None,
            reason: format!("{} holds no layer records", path.display()),
        });
    }
    Ok(layers)
}

/// Reads a trace file that holds exactly one layer.
pub fn load_trace(path: impl AsRef<Path>) -> Result<RoutingTrace> {
    let mut layers = load_layers(path.as_ref())?;
    if layers.len() != 1 {
        return Err(Error::invalid(format!(
            "{} holds {} layers; use load_layers",
            path.as_ref().display(),
            layers.len()
        )));
    }
    Ok(layers.remove(0))
}

pub fn save_trace(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<()> {
    save_layers(std::slice::from_ref(trace), path)
}

pub fn save_layers(layers: &[RoutingTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut ids = HashSet::new();
    for l in layers {
        validate_shape(l.num_tokens(), l.num_experts(), l.top_k())?;
        if !ids.insert(l.layer_id()) {
            return Err(Error::invalid(format!(
                "duplicate layer id {}",
                l.layer_id()
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in layers {
        serde_json::to_writer(&mut w, &l.to_record())
            .map_err(|e| Error::Serialize(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
