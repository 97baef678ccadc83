//! Architecture DAG: a stem, a chain of cells, and a pooled dense head.
//!
//! Each cell is a small DAG. Node values are the element-wise sum of the
//! outputs of their incoming edges; every edge carries one [`OperationSpec`].
//! Edge ids are stable across rewrites so that an original network and its
//! transformed descendant can be compared edge by edge.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("cell {cell} contains a cycle")]
    Cycle { cell: usize },
    #[error("cell {cell}, node {node}: {detail}")]
    ShapeMismatch { cell: usize, node: usize, detail: String },
    #[error("edge {0} has no defined input shape")]
    UndefinedInput(EdgeRef),
    #[error("edge {edge}: {detail}")]
    IllegalOp { edge: EdgeRef, detail: String },
    #[error("decision references unknown edge {0}")]
    UnknownEdge(EdgeRef),
    #[error("no decision for edge {0}")]
    MissingDecision(EdgeRef),
    #[error("identity is illegal on shape-changing edge {0}")]
    IllegalIdentity(EdgeRef),
    #[error("edge id spaces differ: {0}")]
    IdSpaceMismatch(String),
    #[error("malformed architecture: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "conv3x3_relu")]
    Conv3x3ReLU,
    #[serde(rename = "conv1x1_relu")]
    Conv1x1ReLU,
    #[serde(rename = "dense_relu")]
    DenseReLU,
    #[serde(rename = "avgpool2x2")]
    AvgPool2x2,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "zero")]
    Zero,
}

impl OpKind {
    pub fn label(self) -> &'static str {
        match self {
            OpKind::Conv3x3ReLU => "conv3x3",
            OpKind::Conv1x1ReLU => "conv1x1",
            OpKind::DenseReLU => "dense",
            OpKind::AvgPool2x2 => "avgpool2x2",
            OpKind::Identity => "identity",
            OpKind::Zero => "none",
        }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv3x3ReLU => Some(3),
            OpKind::Conv1x1ReLU => Some(1),
            _ => None,
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::Conv3x3ReLU | OpKind::Conv1x1ReLU | OpKind::DenseReLU)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperationSpec {
    pub kind: OpKind,
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl OperationSpec {
    pub fn new(kind: OpKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self { kind, in_channels, out_channels, stride }
    }

    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::new(OpKind::Conv3x3ReLU, in_channels, out_channels, stride)
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::new(OpKind::Conv1x1ReLU, in_channels, out_channels, stride)
    }

    pub fn identity(channels: usize) -> Self {
        Self::new(OpKind::Identity, channels, channels, 1)
    }

    /// Same op with its computation replaced by `kind`, keeping channel and
    /// stride metadata so the output shape is unchanged.
    pub fn replaced(self, kind: OpKind) -> Self {
        Self { kind, ..self }
    }

    fn check(&self) -> Result<(), String> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(format!("{:?} needs positive channels and stride", self.kind));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        self.check()?;
        if input.c != self.in_channels {
            return Err(format!("{} expects {} input channels, got {}", self.kind.label(), self.in_channels, input.c));
        }
        let strided = |s: usize| {
            let (h, w) = (input.h / s, input.w / s);
            if h == 0 || w == 0 {
                Err(format!("stride {s} collapses {input}"))
            } else {
                Ok((h, w))
            }
        };
        match self.kind {
            OpKind::Conv3x3ReLU | OpKind::Conv1x1ReLU | OpKind::Zero => {
                let (h, w) = strided(self.stride)?;
                Ok(Shape::new(self.out_channels, h, w))
            }
            OpKind::DenseReLU => {
                if input.h != 1 || input.w != 1 || self.stride != 1 {
                    return Err(format!("dense needs a Cx1x1 input with stride 1, got {input}"));
                }
                Ok(Shape::new(self.out_channels, 1, 1))
            }
            OpKind::AvgPool2x2 => {
                if self.in_channels != self.out_channels {
                    return Err("avgpool2x2 cannot change channels".into());
                }
                let (h, w) = strided(2)?;
                Ok(Shape::new(input.c, h, w))
            }
            OpKind::Identity => {
                if self.in_channels != self.out_channels || self.stride != 1 {
                    return Err("identity must preserve channels with stride 1".into());
                }
                Ok(input)
            }
        }
    }

    /// Trainable scalars: conv `in·out·k² + out`, dense `in·out + out`, 0 otherwise.
    pub fn param_count(&self) -> usize {
        match self.kind {
            OpKind::Conv3x3ReLU | OpKind::Conv1x1ReLU => {
                let k = self.kind.kernel().unwrap();
                self.in_channels * self.out_channels * k * k + self.out_channels
            }
            OpKind::DenseReLU => self.in_channels * self.out_channels + self.out_channels,
            _ => 0,
        }
    }

    /// Multiply-accumulates for one sample. Pooling counts its four reads per output.
    pub fn flops(&self, output: Shape) -> usize {
        match self.kind {
            OpKind::Conv3x3ReLU | OpKind::Conv1x1ReLU => {
                let k = self.kind.kernel().unwrap();
                output.h * output.w * self.out_channels * self.in_channels * k * k
            }
            OpKind::DenseReLU => self.in_channels * self.out_channels,
            OpKind::AvgPool2x2 => output.len() * 4,
            OpKind::Identity | OpKind::Zero => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }
}

impl From<[usize; 3]> for Shape {
    fn from(d: [usize; 3]) -> Self {
        Shape::new(d[0], d[1], d[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        s.dims()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

pub type NodeId = usize;

/// Global edge address: cell index and edge id within the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeRef {
    pub cell: usize,
    pub edge: usize,
}

impl EdgeRef {
    pub fn new(cell: usize, edge: usize) -> Self {
        Self { cell, edge }
    }
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}.e{}", self.cell, self.edge)
    }
}

impl FromStr for EdgeRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed edge id `{s}` (expected c<cell>.e<edge>)");
        let (c, e) = s.split_once('.').ok_or_else(bad)?;
        let cell = c.strip_prefix('c').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let edge = e.strip_prefix('e').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(EdgeRef { cell, edge })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    pub src: NodeId,
    pub dst: NodeId,
    pub op: OperationSpec,
}

/// Reusable cell topology. Edge ids are positions in `edges`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTemplate {
    pub nodes: Vec<NodeId>,
    pub input: NodeId,
    pub output: NodeId,
    pub edges: Vec<(NodeId, NodeId, OperationSpec)>,
}

impl CellTemplate {
    pub fn instantiate(&self, template: usize, output_shape: Shape) -> Cell {
        Cell {
            template,
            input: self.input,
            output: self.output,
            nodes: self.nodes.clone(),
            output_shape,
            edges: self.edges.iter().enumerate().map(|(id, &(src, dst, op))| Edge { id, src, dst, op }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Index of the template this cell was instantiated from; cells sharing
    /// it share architecture parameters in cell-tied mode.
    pub template: usize,
    pub input: NodeId,
    pub output: NodeId,
    pub nodes: Vec<NodeId>,
    pub output_shape: Shape,
    pub edges: Vec<Edge>,
}

impl Cell {
    pub fn edge(&self, id: usize) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    /// Nodes in dependency order (Kahn, ties broken by node id).
    pub fn topo_order(&self, cell: usize) -> Result<Vec<NodeId>, GraphError> {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.iter().map(|&n| (n, 0)).collect();
        for e in &self.edges {
            *indeg.entry(e.dst).or_default() += 1;
            indeg.entry(e.src).or_default();
        }
        let mut ready: BTreeSet<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut order = Vec::with_capacity(indeg.len());
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for e in self.edges.iter().filter(|e| e.src == n) {
                let d = indeg.get_mut(&e.dst).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(e.dst);
                }
            }
        }
        if order.len() == indeg.len() {
            Ok(order)
        } else {
            Err(GraphError::Cycle { cell })
        }
    }

    /// Nodes reachable from the input through edges accepted by `keep`.
    pub fn reachable_from_input(&self, keep: impl Fn(&Edge) -> bool) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([self.input]);
        let mut queue = VecDeque::from([self.input]);
        while let Some(n) = queue.pop_front() {
            for e in self.edges.iter().filter(|e| e.src == n && keep(e)) {
                if seen.insert(e.dst) {
                    queue.push_back(e.dst);
                }
            }
        }
        seen
    }

    /// Nodes from which the output is reachable through edges accepted by `keep`.
    pub fn reaching_output(&self, keep: impl Fn(&Edge) -> bool) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([self.output]);
        let mut queue = VecDeque::from([self.output]);
        while let Some(n) = queue.pop_front() {
            for e in self.edges.iter().filter(|e| e.dst == n && keep(e)) {
                if seen.insert(e.src) {
                    queue.push_back(e.src);
                }
            }
        }
        seen
    }

    /// True when a path of non-Zero edges connects input to output.
    pub fn is_connected(&self) -> bool {
        self.reachable_from_input(|e| e.op.kind != OpKind::Zero).contains(&self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub template: String,
    pub stem: OperationSpec,
    pub cells: Vec<Cell>,
    pub input_shape: Shape,
    pub num_classes: usize,
}

/// Per-edge and per-node shapes of one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapeMap {
    pub stem_out: Option<Shape>,
    pub edges: BTreeMap<EdgeRef, (Shape, Shape)>,
    pub nodes: BTreeMap<(usize, NodeId), Shape>,
    pub cell_outputs: Vec<Shape>,
}

impl ShapeMap {
    pub fn head_input(&self) -> Shape {
        *self.cell_outputs.last().or(self.stem_out.as_ref()).expect("shape map is empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub params: usize,
    pub flops: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub acyclic: bool,
    pub shape_error: Option<String>,
    pub connected: bool,
    pub disconnected_cells: Vec<usize>,
    /// Nodes (cell, node) that are not on any input-to-output path.
    pub dangling_nodes: Vec<(usize, NodeId)>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.acyclic && self.shape_error.is_none()
    }

    pub fn disconnected(&self) -> bool {
        !self.connected
    }
}

impl Network {
    pub fn edge_refs(&self) -> Vec<EdgeRef> {
        self.cells.iter().enumerate().flat_map(|(ci, c)| c.edges.iter().map(move |e| EdgeRef::new(ci, e.id))).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.cells.iter().map(|c| c.edges.len()).sum()
    }

    pub fn edge(&self, at: EdgeRef) -> Option<&Edge> {
        self.cells.get(at.cell).and_then(|c| c.edge(at.edge))
    }

    /// Distinct template indices in first-use order with the cells using each.
    pub fn template_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (ci, c) in self.cells.iter().enumerate() {
            groups.entry(c.template).or_default().push(ci);
        }
        groups
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    pub fn infer_shapes(&self) -> Result<ShapeMap, GraphError> {
        infer_shapes(self, self.input_shape)
    }

    pub fn cost(&self) -> Result<CostReport, GraphError> {
        count_cost(self)
    }

    /// Checks structural well-formedness: node references, unique ids,
    /// positive channel counts.
    pub fn check_structure(&self) -> Result<(), GraphError> {
        if self.num_classes == 0 {
            return Err(GraphError::Malformed("num_classes must be positive".into()));
        }
        if self.input_shape.is_empty() {
            return Err(GraphError::Malformed("input_shape must be positive".into()));
        }
        self.stem.check().map_err(GraphError::Malformed)?;
        for (ci, c) in self.cells.iter().enumerate() {
            let nodes: BTreeSet<_> = c.nodes.iter().copied().collect();
            if nodes.len() != c.nodes.len() {
                return Err(GraphError::Malformed(format!("cell {ci} repeats a node id")));
            }
            if !nodes.contains(&c.input) || !nodes.contains(&c.output) || c.input == c.output {
                return Err(GraphError::Malformed(format!("cell {ci} has invalid input/output nodes")));
            }
            let mut ids = BTreeSet::new();
            for e in &c.edges {
                if !ids.insert(e.id) {
                    return Err(GraphError::Malformed(format!("cell {ci} repeats edge id {}", e.id)));
                }
                if !nodes.contains(&e.src) || !nodes.contains(&e.dst) {
                    return Err(GraphError::Malformed(format!("edge {} references a missing node", EdgeRef::new(ci, e.id))));
                }
                if e.dst == c.input {
                    return Err(GraphError::Malformed(format!("edge {} enters the cell input", EdgeRef::new(ci, e.id))));
                }
                e.op.check().map_err(|d| GraphError::IllegalOp { edge: EdgeRef::new(ci, e.id), detail: d })?;
            }
        }
        Ok(())
    }
}

/// Acyclicity, shape consistency and output reachability.
pub fn validate(net: &Network) -> ValidationReport {
    let mut report = ValidationReport { acyclic: true, connected: true, ..Default::default() };
    for (ci, cell) in net.cells.iter().enumerate() {
        if cell.topo_order(ci).is_err() {
            report.acyclic = false;
        }
        if !cell.is_connected() {
            report.disconnected_cells.push(ci);
        }
        let fwd = cell.reachable_from_input(|_| true);
        let bwd = cell.reaching_output(|_| true);
        for &n in &cell.nodes {
            if !(fwd.contains(&n) && bwd.contains(&n)) {
                report.dangling_nodes.push((ci, n));
            }
        }
    }
    report.connected = report.disconnected_cells.is_empty();
    if report.acyclic {
        if let Err(e) = net.check_structure().and_then(|_| infer_shapes(net, net.input_shape)) {
            report.shape_error = Some(e.to_string());
        }
    } else {
        report.shape_error = Some("shape inference skipped: graph has a cycle".into());
    }
    report
}

/// Propagates one sample's shape through stem, cells and edges.
pub fn infer_shapes(net: &Network, input_shape: Shape) -> Result<ShapeMap, GraphError> {
    let mut map = ShapeMap::default();
    let stem_out = net.stem.output_shape(input_shape).map_err(|d| GraphError::ShapeMismatch { cell: 0, node: 0, detail: format!("stem: {d}") })?;
    map.stem_out = Some(stem_out);
    let mut current = stem_out;
    for (ci, cell) in net.cells.iter().enumerate() {
        let order = cell.topo_order(ci)?;
        let mut node_shapes: BTreeMap<NodeId, Shape> = BTreeMap::from([(cell.input, current)]);
        for &n in &order {
            if n != cell.input {
                let mut incoming = cell
                    .edges
                    .iter()
                    .filter(|e| e.dst == n)
                    .map(|e| map.edges.get(&EdgeRef::new(ci, e.id)).map(|s| s.1).ok_or(GraphError::UndefinedInput(EdgeRef::new(ci, e.id))));
                let shape = match incoming.next() {
                    None if n == cell.output => Some(cell.output_shape),
                    None => None,
                    Some(first) => {
                        let first = first?;
                        for other in incoming {
                            let other = other?;
                            if other != first {
                                return Err(GraphError::ShapeMismatch { cell: ci, node: n, detail: format!("cannot sum {first} with {other}") });
                            }
                        }
                        Some(first)
                    }
                };
                if let Some(s) = shape {
                    node_shapes.insert(n, s);
                }
            }
            for e in cell.edges.iter().filter(|e| e.src == n) {
                let at = EdgeRef::new(ci, e.id);
                let Some(&in_shape) = node_shapes.get(&n) else {
                    return Err(GraphError::UndefinedInput(at));
                };
                let out = e.op.output_shape(in_shape).map_err(|detail| GraphError::IllegalOp { edge: at, detail })?;
                map.edges.insert(at, (in_shape, out));
            }
        }
        let out = node_shapes.get(&cell.output).copied().unwrap_or(cell.output_shape);
        if out != cell.output_shape {
            return Err(GraphError::ShapeMismatch {
                cell: ci,
                node: cell.output,
                detail: format!("output is {out}, cell declares {}", cell.output_shape),
            });
        }
        for (n, s) in node_shapes {
            map.nodes.insert((ci, n), s);
        }
        map.cell_outputs.push(out);
        current = out;
    }
    Ok(map)
}

/// Parameters and multiply-accumulates of stem, all edges and the dense head.
pub fn count_cost(net: &Network) -> Result<CostReport, GraphError> {
    let shapes = infer_shapes(net, net.input_shape)?;
    let mut cost = CostReport { params: net.stem.param_count(), flops: net.stem.flops(shapes.stem_out.unwrap()) };
    for (ci, cell) in net.cells.iter().enumerate() {
        for e in &cell.edges {
            let (_, out) = shapes.edges[&EdgeRef::new(ci, e.id)];
            cost.params += e.op.param_count();
            cost.flops += e.op.flops(out);
        }
    }
    let feat = shapes.head_input().c;
    cost.params += feat * net.num_classes + net.num_classes;
    cost.flops += feat * net.num_classes;
    Ok(cost)
}

/// Discrete per-edge choice among the three candidates of a mixed edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    None,
    Id,
    Same,
}

impl Choice {
    pub const ALL: [Choice; 3] = [Choice::None, Choice::Id, Choice::Same];

    pub fn as_str(self) -> &'static str {
        match self {
            Choice::None => "none",
            Choice::Id => "id",
            Choice::Same => "same",
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Choice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Choice::None),
            "id" => Ok(Choice::Id),
            "same" => Ok(Choice::Same),
            other => Err(format!("unknown choice `{other}`")),
        }
    }
}

/// Rewrites every edge per `choices` (same keeps the op, id turns it into
/// Identity, none into Zero) and prunes the result.
pub fn apply_decisions(net: &Network, choices: &BTreeMap<EdgeRef, Choice>) -> Result<Network, GraphError> {
    let shapes = infer_shapes(net, net.input_shape)?;
    for at in choices.keys() {
        if net.edge(*at).is_none() {
            return Err(GraphError::UnknownEdge(*at));
        }
    }
    let mut out = net.clone();
    for (ci, cell) in out.cells.iter_mut().enumerate() {
        for e in &mut cell.edges {
            let at = EdgeRef::new(ci, e.id);
            let choice = choices.get(&at).ok_or(GraphError::MissingDecision(at))?;
            match choice {
                Choice::Same => {}
                Choice::Id => {
                    let (i, o) = shapes.edges[&at];
                    if i != o {
                        return Err(GraphError::IllegalIdentity(at));
                    }
                    e.op = OperationSpec::identity(i.c);
                }
                Choice::None => e.op = e.op.replaced(OpKind::Zero),
            }
        }
    }
    Ok(prune(&out))
}

/// Removes Zero edges, then every node not on an input-to-output path
/// (together with its edges). Input and output nodes are always kept.
pub fn prune(net: &Network) -> Network {
    let mut out = net.clone();
    for cell in &mut out.cells {
        cell.edges.retain(|e| e.op.kind != OpKind::Zero);
        let fwd = cell.reachable_from_input(|_| true);
        let bwd = cell.reaching_output(|_| true);
        let keep = |n: NodeId| n == cell.input || n == cell.output || (fwd.contains(&n) && bwd.contains(&n));
        let kept: Vec<NodeId> = cell.nodes.iter().copied().filter(|&n| keep(n)).collect();
        cell.edges.retain(|e| keep(e.src) && keep(e.dst));
        cell.nodes = kept;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeDiff {
    pub edge: EdgeRef,
    pub original: OpKind,
    pub new: OpKind,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArchDiff {
    pub records: Vec<EdgeDiff>,
}

impl ArchDiff {
    pub fn changed_count(&self) -> usize {
        self.records.iter().filter(|r| r.changed).count()
    }

    pub fn changed_in_cell(&self, cell: usize) -> usize {
        self.records.iter().filter(|r| r.edge.cell == cell && r.changed).count()
    }
}

/// One record per original edge; edges absent from `transformed` count as Zero.
pub fn diff(original: &Network, transformed: &Network) -> Result<ArchDiff, GraphError> {
    if original.cells.len() != transformed.cells.len() {
        return Err(GraphError::IdSpaceMismatch(format!("{} cells vs {} cells", original.cells.len(), transformed.cells.len())));
    }
    for at in transformed.edge_refs() {
        if original.edge(at).is_none() {
            return Err(GraphError::IdSpaceMismatch(format!("edge {at} is not in the original network")));
        }
    }
    let records = original
        .edge_refs()
        .into_iter()
        .map(|at| {
            let orig = original.edge(at).unwrap().op.kind;
            let new = transformed.edge(at).map_or(OpKind::Zero, |e| e.op.kind);
            EdgeDiff { edge: at, original: orig, new, changed: orig != new }
        })
        .collect();
    Ok(ArchDiff { records })
}

pub const ARCH_JSON_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(flatten)]
    network: Network,
}

impl Network {
    pub fn to_json(&self, config_hash: Option<&str>) -> String {
        let doc = NetworkDoc { version: ARCH_JSON_VERSION, config_hash: config_hash.map(str::to_owned), network: self.clone() };
        serde_json::to_string_pretty(&doc).expect("network serializes")
    }

    /// Parses an architecture document; returns the network and embedded config hash.
    pub fn from_json(text: &str) -> Result<(Network, Option<String>), GraphError> {
        let doc: NetworkDoc = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        if doc.version != ARCH_JSON_VERSION {
            return Err(GraphError::Malformed(format!("unsupported architecture version {}", doc.version)));
        }
        doc.network.check_structure()?;
        doc.network.cells.iter().enumerate().try_for_each(|(ci, c)| c.topo_order(ci).map(|_| ()))?;
        Ok((doc.network, doc.config_hash))
    }
}

/// Graphviz rendering of `transformed`, one digraph per cell. Edges whose
/// operation differs from `original` get `color=red`; removed edges are
/// drawn dashed with a `none` label.
pub fn to_dot(original: &Network, transformed: &Network, config_hash: Option<&str>) -> Result<String, GraphError> {
    let d = diff(original, transformed)?;
    let mut out = String::new();
    if let Some(h) = config_hash {
        out.push_str(&format!("// config_hash: {h}\n"));
    }
    for ci in 0..original.cells.len() {
        out.push_str(&cell_dot(original, transformed, &d, ci));
    }
    Ok(out)
}

/// DOT source for a single cell of a diff.
pub fn cell_dot(original: &Network, transformed: &Network, d: &ArchDiff, cell: usize) -> String {
    let orig = &original.cells[cell];
    let new = &transformed.cells[cell];
    let mut s = format!("digraph cell_{cell} {{\n  rankdir=LR;\n");
    for &n in &orig.nodes {
        let label = if n == orig.input {
            "in".to_string()
        } else if n == orig.output {
            "out".to_string()
        } else {
            n.to_string()
        };
        let style = if new.nodes.contains(&n) { "" } else { ", style=dashed" };
        s.push_str(&format!("  n{n} [label=\"{label}\"{style}];\n"));
    }
    for r in d.records.iter().filter(|r| r.edge.cell == cell) {
        let e = orig.edge(r.edge.edge).unwrap();
        let mut attrs = vec![format!("label=\"e{}:{}\"", e.id, r.new.label())];
        if r.changed {
            attrs.push("color=red".into());
            attrs.push("fontcolor=red".into());
        }
        if r.new == OpKind::Zero {
            attrs.push("style=dashed".into());
        }
        s.push_str(&format!("  n{} -> n{} [{}];\n", e.src, e.dst, attrs.join(", ")));
    }
    s.push_str("}\n");
    s
}
