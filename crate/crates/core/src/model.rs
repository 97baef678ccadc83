//! Network weights (ω) and the batched forward pass, with or without mixed edges.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{EdgeRef, GraphError, Network, OpKind, OperationSpec, ShapeMap};
use crate::mixed::{mix, Parameterization, ThetaTable};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Applies `op` (including its ReLU) to `x`, a `(N, C, H, W)` batch.
pub fn apply_op(tape: &mut Tape, store: &ParamStore, op: &OperationSpec, layer: Option<LayerParams>, x: Var) -> Result<Var, Error> {
    let weights = |tape: &mut Tape| -> Result<(Var, Var), Error> {
        let l = layer.ok_or_else(|| GraphError::Malformed(format!("{:?} has no weights", op.kind)))?;
        Ok((tape.param(store, l.weight)?, tape.param(store, l.bias)?))
    };
    match op.kind {
        OpKind::Conv3x3ReLU | OpKind::Conv1x1ReLU => {
            let (w, b) = weights(tape)?;
            let y = tape.conv2d(x, w, b, op.stride)?;
            Ok(tape.relu(y)?)
        }
        OpKind::DenseReLU => {
            let (w, b) = weights(tape)?;
            let s = tape.value(x).shape().to_vec();
            if s.len() != 4 || s[2] != 1 || s[3] != 1 {
                return Err(TensorError::ShapeMismatch { op: "dense_relu", detail: format!("input {s:?}") }.into());
            }
            let flat = tape.reshape(x, vec![s[0], s[1]])?;
            let y = tape.dense(flat, w, b)?;
            let y = tape.relu(y)?;
            Ok(tape.reshape(y, vec![s[0], op.out_channels, 1, 1])?)
        }
        OpKind::AvgPool2x2 => Ok(tape.avgpool2x2(x)?),
        OpKind::Identity => Ok(x),
        OpKind::Zero => {
            let s = tape.value(x).shape().to_vec();
            let shape = [s[0], op.out_channels, s[2] / op.stride, s[3] / op.stride];
            Ok(tape.constant(Tensor::zeros(&shape)))
        }
    }
}

/// Architecture parameters bound for a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MixedArch<'a> {
    pub theta: &'a ThetaTable,
    pub mode: Parameterization,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub params: ParamStore,
    pub stem: LayerParams,
    pub head: LayerParams,
    pub edges: BTreeMap<EdgeRef, LayerParams>,
    shapes: ShapeMap,
}

fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| normal.sample(rng)).collect()).expect("shape")
}

fn layer_for(store: &mut ParamStore, rng: &mut impl Rng, name: &str, op: &OperationSpec) -> LayerParams {
    let (shape, fan_in) = match op.kind.kernel() {
        Some(k) => (vec![op.out_channels, op.in_channels, k, k], op.in_channels * k * k),
        None => (vec![op.out_channels, op.in_channels], op.in_channels),
    };
    LayerParams {
        weight: store.add(format!("{name}.weight"), kaiming(rng, &shape, fan_in)),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[op.out_channels])),
    }
}

impl Model {
    /// Fan-in scaled normal weights and zero biases, drawn in the order
    /// stem, edges (cell by cell, by edge id), head.
    pub fn init(network: Network, rng: &mut impl Rng) -> Result<Self, Error> {
        let shapes = network.infer_shapes()?;
        let mut params = ParamStore::new();
        let stem = layer_for(&mut params, rng, "stem", &network.stem);
        let mut edges = BTreeMap::new();
        for (ci, cell) in network.cells.iter().enumerate() {
            for e in &cell.edges {
                if e.op.kind.has_weights() {
                    let at = EdgeRef::new(ci, e.id);
                    edges.insert(at, layer_for(&mut params, rng, &at.to_string(), &e.op));
                }
            }
        }
        let head_op = OperationSpec::new(OpKind::DenseReLU, shapes.head_input().c, network.num_classes, 1);
        let head = layer_for(&mut params, rng, "head", &head_op);
        Ok(Self { network, params, stem, head, edges, shapes })
    }

    /// Reassembles a model from restored parts.
    pub(crate) fn from_parts(
        network: Network,
        params: ParamStore,
        stem: LayerParams,
        head: LayerParams,
        edges: BTreeMap<EdgeRef, LayerParams>,
    ) -> Result<Self, Error> {
        let shapes = network.infer_shapes()?;
        Ok(Self { network, params, stem, head, edges, shapes })
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    /// Ids of every weight and bias (ω), excluding any architecture parameters.
    pub fn omega_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.weight, self.stem.bias];
        for l in self.edges.values() {
            ids.extend([l.weight, l.bias]);
        }
        ids.extend([self.head.weight, self.head.bias]);
        ids
    }

    pub fn omega_scalars(&self) -> usize {
        self.params.scalar_count(&self.omega_ids())
    }

    /// Switches to `network` (same edge id space): weights of edges that are
    /// gone or no longer carry weights are dropped, all others are kept.
    pub fn restrict_to(&mut self, network: Network) -> Result<(), Error> {
        let shapes = network.infer_shapes()?;
        let stale: Vec<EdgeRef> = self.edges.keys().copied().filter(|&at| network.edge(at).is_none_or(|e| !e.op.kind.has_weights())).collect();
        for at in stale {
            let l = self.edges.remove(&at).unwrap();
            self.params.remove(l.weight);
            self.params.remove(l.bias);
        }
        for at in network.edge_refs() {
            let op = network.edge(at).unwrap().op;
            if op.kind.has_weights() && !self.edges.contains_key(&at) {
                return Err(GraphError::Malformed(format!("edge {at} gained weights it did not have")).into());
            }
            if let Some(old) = self.network.edge(at) {
                if op.kind.has_weights() && old.op != op {
                    return Err(GraphError::Malformed(format!("edge {at} changed its weighted op")).into());
                }
            }
        }
        self.network = network;
        self.shapes = shapes;
        Ok(())
    }

    /// Logits `(N, classes)` for a `(N, C, H, W)` batch.
    pub fn forward(&self, tape: &mut Tape, images: Tensor, arch: Option<MixedArch<'_>>) -> Result<Var, Error> {
        let n = images.shape()[0];
        let x = tape.constant(images);
        let mut h = apply_op(tape, &self.params, &self.network.stem, Some(self.stem), x)?;
        let mut theta_vars: Vec<Option<Var>> = vec![None; arch.map_or(0, |a| a.theta.rows())];

        for (ci, cell) in self.network.cells.iter().enumerate() {
            let order = cell.topo_order(ci)?;
            let mut values: BTreeMap<usize, Var> = BTreeMap::from([(cell.input, h)]);
            for &node in order.iter().filter(|&&n| n != cell.input) {
                let mut acc: Option<Var> = None;
                for e in cell.edges.iter().filter(|e| e.dst == node) {
                    let at = EdgeRef::new(ci, e.id);
                    let src = *values.get(&e.src).ok_or(GraphError::UndefinedInput(at))?;
                    let o = apply_op(tape, &self.params, &e.op, self.edges.get(&at).copied(), src)?;
                    let out = match arch {
                        None => o,
                        Some(a) => {
                            let idx = a.theta.row_index(at).ok_or_else(|| GraphError::Malformed(format!("no θ row for {at}")))?;
                            let tv = match theta_vars[idx] {
                                Some(v) => v,
                                None => {
                                    let v = tape.param(&self.params, a.theta.entries()[idx].param)?;
                                    theta_vars[idx] = Some(v);
                                    v
                                }
                            };
                            mix(tape, src, o, tv, a.theta.entries()[idx].mask_id, a.mode)?
                        }
                    };
                    acc = Some(match acc {
                        None => out,
                        Some(prev) => tape.add(prev, out)?,
                    });
                }
                let v = match acc {
                    Some(v) => v,
                    None => match self.shapes.nodes.get(&(ci, node)) {
                        Some(s) => tape.constant(Tensor::zeros(&[n, s.c, s.h, s.w])),
                        // node feeds nothing that matters; leave it undefined
                        None => continue,
                    },
                };
                values.insert(node, v);
            }
            h = *values.get(&cell.output).ok_or_else(|| GraphError::Malformed(format!("cell {ci} output undefined")))?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(&self.params, self.head.weight)?;
        let b = tape.param(&self.params, self.head.bias)?;
        Ok(tape.dense(pooled, w, b)?)
    }

    /// Predicted class per image, evaluated in chunks of `chunk`.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Vec<usize>, Error> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let logits = self.forward(&mut tape, images.gather_rows(part), None)?;
            out.extend(argmax_rows(tape.value(logits)));
        }
        Ok(out)
    }

    /// Fraction of correctly classified images.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64, Error> {
        let pred = self.predict(images, 256)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
