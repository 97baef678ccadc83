//! Built-in network templates.
//!
//! * `tiny`: one cell, two intermediate nodes, four 3x3 conv edges.
//! * `plain-cnn`: `cells` copies of a four-edge cell sharing one template.
//! * `resnet-mini`: two stages of residual cells (conv, conv, identity skip);
//!   the second stage opens with a strided block whose skip is a 1x1 projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{CellTemplate, GraphError, Network, OpKind, OperationSpec, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateName {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "plain-cnn")]
    PlainCnn,
    #[serde(rename = "resnet-mini")]
    ResnetMini,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Tiny => "tiny",
            TemplateName::PlainCnn => "plain-cnn",
            TemplateName::ResnetMini => "resnet-mini",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(TemplateName::Tiny),
            "plain-cnn" => Ok(TemplateName::PlainCnn),
            "resnet-mini" => Ok(TemplateName::ResnetMini),
            other => Err(GraphError::UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Width of the stem output and of the first stage.
    pub channels: usize,
    pub num_classes: usize,
    pub input_shape: Shape,
    /// `plain-cnn`: number of cells; `resnet-mini`: blocks per stage; ignored by `tiny`.
    pub cells: usize,
}

impl NetworkConfig {
    pub fn new(channels: usize, num_classes: usize, input_shape: Shape) -> Self {
        Self { channels, num_classes, input_shape, cells: 8 }
    }

    pub fn with_cells(mut self, cells: usize) -> Self {
        self.cells = cells;
        self
    }
}

fn four_edge_cell(c: usize, kinds: [OpKind; 4]) -> CellTemplate {
    let op = |k: OpKind| OperationSpec::new(k, c, c, 1);
    CellTemplate {
        nodes: vec![0, 1, 2, 3],
        input: 0,
        output: 3,
        edges: vec![(0, 1, op(kinds[0])), (0, 2, op(kinds[1])), (1, 2, op(kinds[2])), (2, 3, op(kinds[3]))],
    }
}

fn residual_cell(c_in: usize, c_out: usize, stride: usize) -> CellTemplate {
    let skip = if c_in == c_out && stride == 1 { OperationSpec::identity(c_in) } else { OperationSpec::conv1x1(c_in, c_out, stride) };
    CellTemplate {
        nodes: vec![0, 1, 2],
        input: 0,
        output: 2,
        edges: vec![(0, 1, OperationSpec::conv3x3(c_in, c_out, stride)), (1, 2, OperationSpec::conv3x3(c_out, c_out, 1)), (0, 2, skip)],
    }
}

pub fn build_network(name: TemplateName, config: &NetworkConfig) -> Result<Network, GraphError> {
    let c = config.channels;
    let s = config.input_shape;
    if c == 0 || config.num_classes == 0 {
        return Err(GraphError::InvalidConfig("channels and num_classes must be positive".into()));
    }
    if s.c == 0 || s.h == 0 || s.w == 0 {
        return Err(GraphError::InvalidConfig(format!("input shape {s} must be positive")));
    }
    let stem = OperationSpec::conv3x3(s.c, c, 1);
    let same = Shape::new(c, s.h, s.w);
    let cells = match name {
        TemplateName::Tiny => vec![four_edge_cell(c, [OpKind::Conv3x3ReLU; 4]).instantiate(0, same)],
        TemplateName::PlainCnn => {
            if config.cells == 0 {
                return Err(GraphError::InvalidConfig("plain-cnn needs at least one cell".into()));
            }
            let t = four_edge_cell(c, [OpKind::Conv3x3ReLU, OpKind::Conv1x1ReLU, OpKind::Conv3x3ReLU, OpKind::Conv3x3ReLU]);
            (0..config.cells).map(|_| t.instantiate(0, same)).collect()
        }
        TemplateName::ResnetMini => {
            let blocks = config.cells;
            if blocks == 0 {
                return Err(GraphError::InvalidConfig("resnet-mini needs at least one block per stage".into()));
            }
            if s.h < 2 || s.w < 2 {
                return Err(GraphError::InvalidConfig(format!("resnet-mini downsamples; input {s} is too small")));
            }
            let reduced = Shape::new(2 * c, s.h / 2, s.w / 2);
            let mut cells: Vec<_> = (0..blocks).map(|_| residual_cell(c, c, 1).instantiate(0, same)).collect();
            cells.push(residual_cell(c, 2 * c, 2).instantiate(1, reduced));
            cells.extend((1..blocks).map(|_| residual_cell(2 * c, 2 * c, 1).instantiate(2, reduced)));
            cells
        }
    };
    let net = Network { template: name.as_str().to_string(), stem, cells, input_shape: s, num_classes: config.num_classes };
    net.check_structure()?;
    net.infer_shapes()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_has_one_cell_four_edges() {
        let net = build_network(TemplateName::Tiny, &NetworkConfig::new(4, 3, Shape::new(3, 8, 8))).unwrap();
        assert_eq!(net.cells.len(), 1);
        assert_eq!(net.edge_count(), 4);
        assert_eq!(net.cells[0].nodes.len() - 2, 2);
        let v = net.validate();
        assert!(v.is_ok() && v.connected && v.dangling_nodes.is_empty());
    }

    #[test]
    fn plain_cnn_has_32_edges_over_one_template() {
        let net = build_network(TemplateName::PlainCnn, &NetworkConfig::new(4, 10, Shape::new(3, 8, 8)).with_cells(8)).unwrap();
        assert_eq!(net.edge_count(), 32);
        assert_eq!(net.template_groups().len(), 1);
    }

    #[test]
    fn resnet_mini_is_residual_and_valid() {
        let net = build_network(TemplateName::ResnetMini, &NetworkConfig::new(4, 10, Shape::new(3, 8, 8)).with_cells(2)).unwrap();
        assert_eq!(net.cells.len(), 4);
        assert!(net.cells.iter().all(|c| c.edges.len() == 3));
        assert_eq!(net.cells[0].edges[2].op.kind, OpKind::Identity);
        assert_eq!(net.cells[2].edges[2].op.kind, OpKind::Conv1x1ReLU);
        let v = net.validate();
        assert!(v.is_ok() && v.connected);
        assert_eq!(net.infer_shapes().unwrap().head_input(), Shape::new(8, 4, 4));
    }

    #[test]
    fn zero_channels_rejected() {
        assert!(build_network(TemplateName::Tiny, &NetworkConfig::new(0, 3, Shape::new(3, 8, 8))).is_err());
        assert!(matches!("vgg".parse::<TemplateName>(), Err(GraphError::UnknownTemplate(_))));
    }
}
