//! Mixed edges: each edge computes
//! `c_none · Z + c_id · x + c_same · o(x)` where the coefficients come from a
//! trainable row `θ = (θ_none, θ_id, θ_same)`.
//!
//! In [`Parameterization::Raw`] the coefficients are θ itself, so the zero
//! tensor term never influences the output and `θ_none` has an identically
//! zero gradient. [`Parameterization::Softmax`] normalizes the unmasked
//! entries, which couples all three through the softmax Jacobian.
//!
//! `Z` is never materialized; it only fixes the output shape, which is the
//! shape of `o(x)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{EdgeRef, GraphError, Network};
use crate::model::{apply_op, LayerParams};
use crate::tape::{masked_softmax, ParamId, ParamStore, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Raw,
    #[default]
    Softmax,
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Raw => "raw",
            Parameterization::Softmax => "softmax",
        })
    }
}

impl FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Parameterization::Raw),
            "softmax" => Ok(Parameterization::Softmax),
            other => Err(format!("unknown parameterization `{other}` (raw|softmax)")),
        }
    }
}

/// Snapshot of one architecture-parameter row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaRow {
    pub theta_none: f64,
    pub theta_id: f64,
    pub theta_same: f64,
    /// False when identity is illegal on the edge (input and output shapes differ).
    pub mask_id: bool,
}

impl ThetaRow {
    /// The row every edge starts from: `(0, 0, 1)`.
    pub fn init(mask_id: bool) -> Self {
        Self { theta_none: 0.0, theta_id: 0.0, theta_same: 1.0, mask_id }
    }

    pub fn new(theta_none: f64, theta_id: f64, theta_same: f64, mask_id: bool) -> Self {
        Self { theta_none, theta_id, theta_same, mask_id }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.theta_none, self.theta_id, self.theta_same]
    }

    fn mask(&self) -> [bool; 3] {
        [true, self.mask_id, true]
    }
}

/// `(c_none, c_id, c_same)` for a row.
pub fn coefficients(row: &ThetaRow, mode: Parameterization) -> [f64; 3] {
    match mode {
        Parameterization::Raw => [row.theta_none, if row.mask_id { row.theta_id } else { 0.0 }, row.theta_same],
        Parameterization::Softmax => {
            let p = masked_softmax(&row.values(), &row.mask());
            [p[0], p[1], p[2]]
        }
    }
}

/// Combines an edge input `x` and its operation output `o_x` under the
/// traced θ row `theta` (a 3-vector).
pub fn mix(tape: &mut Tape, x: Var, o_x: Var, theta: Var, mask_id: bool, mode: Parameterization) -> Result<Var, TensorError> {
    let coeffs = match mode {
        Parameterization::Raw => theta,
        Parameterization::Softmax => tape.softmax(theta, &[true, mask_id, true])?,
    };
    let c_same = tape.index(coeffs, 2)?;
    let out = tape.scale(o_x, c_same)?;
    if !mask_id {
        return Ok(out);
    }
    let c_id = tape.index(coeffs, 1)?;
    let via_id = tape.scale(x, c_id)?;
    tape.add(out, via_id)
}

/// Full mixed edge: evaluates the edge's original operation on `x` and mixes.
#[allow(clippy::too_many_arguments)]
pub fn mixed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    theta: Var,
    mask_id: bool,
    op: &crate::graph::OperationSpec,
    layer: Option<LayerParams>,
    mode: Parameterization,
) -> Result<Var, Error> {
    if !tape.value(x).all_finite() {
        return Err(TensorError::NonFinite { op: "mixed_forward input" }.into());
    }
    let o_x = apply_op(tape, store, op, layer, x)?;
    Ok(mix(tape, x, o_x, theta, mask_id, mode)?)
}

/// Whether θ rows are tied per cell template edge or owned by each edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tying {
    Cell,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowKey {
    Template { template: usize, edge: usize },
    Edge(EdgeRef),
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKey::Template { template, edge } => write!(f, "t{template}.e{edge}"),
            RowKey::Edge(e) => e.fmt(f),
        }
    }
}

impl FromStr for RowKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix('t') {
            let bad = || format!("malformed row key `{s}`");
            let (t, e) = rest.split_once('.').ok_or_else(bad)?;
            let template = t.parse().map_err(|_| bad())?;
            let edge = e.strip_prefix('e').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            Ok(RowKey::Template { template, edge })
        } else {
            s.parse().map(RowKey::Edge)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEntry {
    pub key: RowKey,
    pub param: ParamId,
    pub mask_id: bool,
}

/// Architecture parameters of a network, stored as 3-element parameters in
/// a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaTable {
    pub tying: Tying,
    entries: Vec<ThetaEntry>,
    by_edge: BTreeMap<EdgeRef, usize>,
}

impl ThetaTable {
    /// One row per template edge (cell tying) or per edge instance (full),
    /// initialized to `(0, 0, 1)`. A template row masks identity if any of
    /// its instances changes shape.
    pub fn new(net: &Network, tying: Tying, store: &mut ParamStore) -> Result<Self, GraphError> {
        let shapes = net.infer_shapes()?;
        let legal = |at: EdgeRef| {
            let (i, o) = shapes.edges[&at];
            i == o
        };
        let mut table = ThetaTable { tying, entries: Vec::new(), by_edge: BTreeMap::new() };
        match tying {
            Tying::Full => {
                for at in net.edge_refs() {
                    table.push(RowKey::Edge(at), legal(at), &[at], store);
                }
            }
            Tying::Cell => {
                for (template, cells) in net.template_groups() {
                    let first = &net.cells[cells[0]];
                    for e in &first.edges {
                        let mut instances = Vec::new();
                        for &ci in &cells {
                            if net.cells[ci].edge(e.id).is_none() {
                                return Err(GraphError::Malformed(format!("cell {ci} lacks edge e{} of its template {template}", e.id)));
                            }
                            instances.push(EdgeRef::new(ci, e.id));
                        }
                        let mask = instances.iter().all(|&at| legal(at));
                        table.push(RowKey::Template { template, edge: e.id }, mask, &instances, store);
                    }
                }
            }
        }
        Ok(table)
    }

    fn push(&mut self, key: RowKey, mask_id: bool, instances: &[EdgeRef], store: &mut ParamStore) {
        let row = ThetaRow::init(mask_id);
        let param = store.add(format!("theta.{key}"), Tensor::vector(row.values().to_vec()));
        let idx = self.entries.len();
        self.entries.push(ThetaEntry { key, param, mask_id });
        for &at in instances {
            self.by_edge.insert(at, idx);
        }
    }

    /// Rebuilds a table from known parameter ids (checkpoint restore).
    pub(crate) fn from_parts(tying: Tying, entries: Vec<ThetaEntry>, net: &Network) -> Result<Self, GraphError> {
        let mut by_edge = BTreeMap::new();
        for at in net.edge_refs() {
            let key = match tying {
                Tying::Full => RowKey::Edge(at),
                Tying::Cell => RowKey::Template { template: net.cells[at.cell].template, edge: at.edge },
            };
            let idx = entries.iter().position(|e| e.key == key).ok_or_else(|| GraphError::Malformed(format!("no θ row for edge {at}")))?;
            by_edge.insert(at, idx);
        }
        Ok(Self { tying, entries, by_edge })
    }

    pub fn entries(&self) -> &[ThetaEntry] {
        &self.entries
    }

    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.entries.iter().map(|e| e.param).collect()
    }

    /// Row index used by `edge`.
    pub fn row_index(&self, edge: EdgeRef) -> Option<usize> {
        self.by_edge.get(&edge).copied()
    }

    pub fn entry_for(&self, edge: EdgeRef) -> Option<&ThetaEntry> {
        self.row_index(edge).map(|i| &self.entries[i])
    }

    pub fn row(&self, store: &ParamStore, index: usize) -> ThetaRow {
        let e = &self.entries[index];
        let v = store.value(e.param).data();
        ThetaRow::new(v[0], v[1], v[2], e.mask_id)
    }

    pub fn snapshot(&self, store: &ParamStore) -> Vec<(RowKey, ThetaRow)> {
        (0..self.entries.len()).map(|i| (self.entries[i].key, self.row(store, i))).collect()
    }

    /// The row each edge instance sees.
    pub fn per_edge_rows(&self, store: &ParamStore) -> BTreeMap<EdgeRef, ThetaRow> {
        self.by_edge.iter().map(|(&at, &i)| (at, self.row(store, i))).collect()
    }

    /// Overwrites a row's θ values; `theta_id` stays 0 on masked rows.
    pub fn set_row(&self, store: &mut ParamStore, index: usize, values: [f64; 3]) {
        let e = &self.entries[index];
        let id = if e.mask_id { values[1] } else { 0.0 };
        store.value_mut(e.param).data_mut().copy_from_slice(&[values[0], id, values[2]]);
    }

    pub fn to_csv(&self, store: &ParamStore) -> String {
        theta_csv(&self.snapshot(store))
    }
}

pub const THETA_CSV_HEADER: &str = "edge_id,theta_none,theta_id,theta_same,mask_id";

/// θ snapshot as CSV, one row per table entry.
pub fn theta_csv(rows: &[(RowKey, ThetaRow)]) -> String {
    let mut out = String::from(THETA_CSV_HEADER);
    out.push('\n');
    for (key, r) in rows {
        out.push_str(&format!("{key},{},{},{},{}\n", r.theta_none, r.theta_id, r.theta_same, r.mask_id));
    }
    out
}

/// Leading `#` comment lines are skipped.
pub fn parse_theta_csv(text: &str) -> Result<Vec<(RowKey, ThetaRow)>, String> {
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == THETA_CSV_HEADER => {}
        other => return Err(format!("unexpected θ CSV header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(format!("row {}: expected 5 fields", i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
            let mask = f[4].parse::<bool>().map_err(|e| format!("row {}: {e}", i + 1))?;
            Ok((f[0].parse()?, ThetaRow::new(num(f[1])?, num(f[2])?, num(f[3])?, mask)))
        })
        .collect()
}
