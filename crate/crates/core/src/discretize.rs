//! Turns trained θ rows into discrete per-edge choices and guards against
//! choices that would cut the output off from the input.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::graph::{Choice, EdgeRef, Network, OpKind};
use crate::mixed::ThetaRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepairError {
    #[error("θ table is empty")]
    EmptyTable,
    #[error("decisions disconnect node {node} (output of cell {cell}) from the input")]
    Disconnected { cell: usize, node: usize },
    #[error("cell {cell} is disconnected and no none-decided edge can reconnect it")]
    NoCandidate { cell: usize },
    #[error("decisions do not cover edge {0}")]
    Incomplete(EdgeRef),
    #[error("malformed decisions file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum RepairPolicy {
    #[default]
    #[serde(rename = "repair-to-identity")]
    RepairToIdentity,
    #[serde(rename = "reject")]
    Reject,
    #[serde(rename = "allow-with-warning")]
    AllowWithWarning,
}

impl RepairPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            RepairPolicy::RepairToIdentity => "repair-to-identity",
            RepairPolicy::Reject => "reject",
            RepairPolicy::AllowWithWarning => "allow-with-warning",
        }
    }
}

impl fmt::Display for RepairPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RepairPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repair-to-identity" => Ok(RepairPolicy::RepairToIdentity),
            "reject" => Ok(RepairPolicy::Reject),
            "allow-with-warning" => Ok(RepairPolicy::AllowWithWarning),
            other => Err(format!("unknown repair policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decisions {
    pub choices: BTreeMap<EdgeRef, Choice>,
    /// θ row each choice was read from.
    pub provenance: BTreeMap<EdgeRef, ThetaRow>,
    /// Edges whose `none` choice was overridden to keep the output connected.
    pub repaired: Vec<EdgeRef>,
    /// Diagnostics raised while guarding (e.g. a disconnection let through).
    pub warnings: Vec<String>,
}

/// Argmax over the unmasked entries of a row; ties go to same, then id, then none.
pub fn select_choice(row: &ThetaRow) -> Choice {
    let same = row.theta_same;
    let id = if row.mask_id { Some(row.theta_id) } else { None };
    let none = row.theta_none;
    if same >= none && id.is_none_or(|i| same >= i) {
        Choice::Same
    } else if id.is_some_and(|i| i >= none) {
        Choice::Id
    } else {
        Choice::None
    }
}

pub fn select_ops(rows: &BTreeMap<EdgeRef, ThetaRow>) -> Result<Decisions, RepairError> {
    if rows.is_empty() {
        return Err(RepairError::EmptyTable);
    }
    Ok(Decisions { choices: rows.iter().map(|(&at, r)| (at, select_choice(r))).collect(), provenance: rows.clone(), ..Default::default() })
}

/// Every edge decided `same`, with init rows as provenance.
pub fn all_same(net: &Network) -> Decisions {
    let refs = net.edge_refs();
    Decisions {
        choices: refs.iter().map(|&at| (at, Choice::Same)).collect(),
        provenance: refs.iter().map(|&at| (at, ThetaRow::init(true))).collect(),
        ..Default::default()
    }
}

fn kept(d: &Decisions, cell: usize) -> impl Fn(&crate::graph::Edge) -> bool + '_ {
    move |e| e.op.kind != OpKind::Zero && d.choices.get(&EdgeRef::new(cell, e.id)) != Some(&Choice::None)
}

/// Cells whose output is unreachable from their input under `d`.
pub fn disconnected_cells(net: &Network, d: &Decisions) -> Vec<usize> {
    (0..net.cells.len())
        .filter(|&ci| {
            let cell = &net.cells[ci];
            !cell.reachable_from_input(kept(d, ci)).contains(&cell.output)
        })
        .collect()
}

/// Checks that applying `d` keeps every cell connected and acts per policy
/// when it does not.
///
/// The repair walks the cut between the nodes reachable from the input and
/// the rest: among `none` edges crossing it, the one with the highest θ_id
/// (then θ_same, then edges entering the output, then lowest id) becomes `id` (or `same` when identity is
/// masked) until the output is reached.
pub fn guard_and_repair(mut d: Decisions, net: &Network, policy: RepairPolicy) -> Result<Decisions, RepairError> {
    for at in net.edge_refs() {
        if !d.choices.contains_key(&at) {
            return Err(RepairError::Incomplete(at));
        }
    }
    let broken = disconnected_cells(net, &d);
    if broken.is_empty() {
        return Ok(d);
    }
    match policy {
        RepairPolicy::Reject => {
            let ci = broken[0];
            Err(RepairError::Disconnected { cell: ci, node: net.cells[ci].output })
        }
        RepairPolicy::AllowWithWarning => {
            for ci in broken {
                d.warnings.push(format!("cell {ci}: output node {} is disconnected; zero tensors reach the next layer", net.cells[ci].output));
            }
            Ok(d)
        }
        RepairPolicy::RepairToIdentity => {
            for ci in broken {
                let cell = &net.cells[ci];
                let before = d.repaired.len();
                loop {
                    let reach = cell.reachable_from_input(kept(&d, ci));
                    if reach.contains(&cell.output) {
                        break;
                    }
                    let best = cell
                        .edges
                        .iter()
                        .filter(|e| e.op.kind != OpKind::Zero)
                        .map(|e| EdgeRef::new(ci, e.id))
                        .filter(|at| d.choices[at] == Choice::None)
                        .filter(|at| {
                            let e = cell.edge(at.edge).unwrap();
                            reach.contains(&e.src) && !reach.contains(&e.dst)
                        })
                        .max_by(|a, b| {
                            let key = |at: &EdgeRef| {
                                let r = d.provenance.get(at);
                                let into_output = cell.edge(at.edge).unwrap().dst == cell.output;
                                (r.map_or(0.0, |r| r.theta_id), r.map_or(0.0, |r| r.theta_same), into_output)
                            };
                            let (ka, kb) = (key(a), key(b));
                            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2)).then(b.cmp(a))
                        });
                    let Some(at) = best else {
                        return Err(RepairError::NoCandidate { cell: ci });
                    };
                    let mask_id = d.provenance.get(&at).is_none_or(|r| r.mask_id);
                    d.choices.insert(at, if mask_id { Choice::Id } else { Choice::Same });
                    d.repaired.push(at);
                }
                d.warnings.push(format!("cell {ci}: reconnected output by overriding none on {} edge(s)", d.repaired.len() - before));
            }
            Ok(d)
        }
    }
}

pub const DECISIONS_VERSION: u32 = 1;

impl Decisions {
    pub fn count(&self, choice: Choice) -> usize {
        self.choices.values().filter(|&&c| c == choice).count()
    }

    /// `{"version", "config_hash", "decisions": {edge_id: {choice, theta, mask_id, repaired}}}`
    /// with edges in (cell, edge) order.
    pub fn to_json(&self, config_hash: &str) -> String {
        let mut out = format!("{{\n  \"version\": {DECISIONS_VERSION},\n  \"config_hash\": {},\n  \"decisions\": {{", json!(config_hash));
        for (i, (at, choice)) in self.choices.iter().enumerate() {
            let row = self.provenance.get(at);
            let record = json!({
                "choice": choice.as_str(),
                "theta": row.map_or(vec![], |r| r.values().to_vec()),
                "mask_id": row.is_none_or(|r| r.mask_id),
                "repaired": self.repaired.contains(at),
            });
            out.push_str(if i == 0 { "\n" } else { ",\n" });
            out.push_str(&format!("    {}: {record}", json!(at.to_string())));
        }
        out.push_str(if self.choices.is_empty() { "}\n}\n" } else { "\n  }\n}\n" });
        out
    }

    /// Parses a decisions document; returns it with its config hash.
    pub fn from_json(text: &str) -> Result<(Decisions, String), RepairError> {
        let bad = |m: String| RepairError::Malformed(m);
        let v: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if v["version"] != json!(DECISIONS_VERSION) {
            return Err(bad(format!("unsupported version {}", v["version"])));
        }
        let hash = v["config_hash"].as_str().ok_or_else(|| bad("missing config_hash".into()))?.to_string();
        let edges = v["decisions"].as_object().ok_or_else(|| bad("missing decisions".into()))?;
        let mut d = Decisions::default();
        for (key, rec) in edges {
            let at: EdgeRef = key.parse().map_err(bad)?;
            let choice: Choice = rec["choice"].as_str().ok_or_else(|| bad(format!("{key}: missing choice")))?.parse().map_err(bad)?;
            let theta: Vec<f64> = rec["theta"].as_array().map(|a| a.iter().filter_map(Value::as_f64).collect()).unwrap_or_default();
            let mask = rec["mask_id"].as_bool().unwrap_or(true);
            if theta.len() == 3 {
                d.provenance.insert(at, ThetaRow::new(theta[0], theta[1], theta[2], mask));
            }
            if rec["repaired"].as_bool().unwrap_or(false) {
                d.repaired.push(at);
            }
            d.choices.insert(at, choice);
        }
        d.repaired.sort();
        Ok((d, hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::tiny;
    use crate::graph::{apply_decisions, OperationSpec, Shape};
    use crate::templates::{build_network, NetworkConfig, TemplateName};

    fn row(n: f64, i: f64, s: f64) -> ThetaRow {
        ThetaRow::new(n, i, s, true)
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(select_choice(&row(0.0, -0.2, 0.3)), Choice::Same);
        assert_eq!(select_choice(&row(0.0, 0.4, 0.1)), Choice::Id);
        assert_eq!(select_choice(&row(0.0, -0.5, -0.1)), Choice::None);
        assert_eq!(select_choice(&row(0.0, 0.0, 0.0)), Choice::Same);
        assert_eq!(select_choice(&row(0.5, 0.5, 0.0)), Choice::Id);
        assert_eq!(select_choice(&ThetaRow::new(0.0, 3.0, 0.1, false)), Choice::Same);
        assert_eq!(select_choice(&ThetaRow::new(0.2, 3.0, 0.1, false)), Choice::None);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert_eq!(select_ops(&BTreeMap::new()), Err(RepairError::EmptyTable));
    }

    fn all_none(net: &Network) -> Decisions {
        let rows = net.edge_refs().into_iter().map(|at| (at, row(1.0, -1.0, -1.0))).collect();
        select_ops(&rows).unwrap()
    }

    #[test]
    fn connected_decisions_pass_unchanged() {
        let net = tiny();
        let d = all_same(&net);
        let out = guard_and_repair(d.clone(), &net, RepairPolicy::RepairToIdentity).unwrap();
        assert_eq!(out, d);
        assert!(out.repaired.is_empty());
    }

    #[test]
    fn all_none_is_repaired_to_a_path() {
        let net = tiny();
        let mut d = all_none(&net);
        // make e1 (0 -> 2) the strongest identity candidate
        d.provenance.insert(EdgeRef::new(0, 1), row(1.0, -0.5, -1.0));
        let out = guard_and_repair(d, &net, RepairPolicy::RepairToIdentity).unwrap();
        assert!(out.choices.values().any(|&c| c == Choice::Id));
        assert_eq!(out.repaired, vec![EdgeRef::new(0, 1), EdgeRef::new(0, 3)]);
        let t = apply_decisions(&net, &out.choices).unwrap();
        assert!(t.validate().connected);
    }

    #[test]
    fn reject_names_the_output_node() {
        let net = tiny();
        let err = guard_and_repair(all_none(&net), &net, RepairPolicy::Reject).unwrap_err();
        assert_eq!(err, RepairError::Disconnected { cell: 0, node: 3 });
        assert!(err.to_string().contains("node 3"));
    }

    #[test]
    fn allow_with_warning_passes_through() {
        let net = tiny();
        let out = guard_and_repair(all_none(&net), &net, RepairPolicy::AllowWithWarning).unwrap();
        assert_eq!(out.count(Choice::None), 4);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn masked_repair_falls_back_to_same() {
        let net = build_network(TemplateName::ResnetMini, &NetworkConfig::new(2, 3, Shape::new(3, 4, 4)).with_cells(1)).unwrap();
        let rows = net
            .edge_refs()
            .into_iter()
            .map(|at| {
                let legal = at.cell == 0 || at.edge == 1;
                (at, ThetaRow::new(1.0, if legal { -1.0 } else { 0.0 }, -1.0, legal))
            })
            .collect();
        let out = guard_and_repair(select_ops(&rows).unwrap(), &net, RepairPolicy::RepairToIdentity).unwrap();
        // the strided cell has masked identity on its entry edges
        for at in &out.repaired {
            if at.cell == 1 && at.edge != 1 {
                assert_eq!(out.choices[at], Choice::Same);
            }
        }
        assert!(apply_decisions(&net, &out.choices).unwrap().validate().connected);
    }

    #[test]
    fn no_candidate_when_graph_has_no_path() {
        let mut net = tiny();
        net.cells[0].edges[3].op = OperationSpec::conv3x3(4, 4, 1).replaced(OpKind::Zero);
        let d = all_same(&net);
        assert_eq!(guard_and_repair(d, &net, RepairPolicy::RepairToIdentity), Err(RepairError::NoCandidate { cell: 0 }));
    }

    #[test]
    fn json_round_trip_and_order() {
        let net = build_network(TemplateName::PlainCnn, &NetworkConfig::new(2, 3, Shape::new(3, 4, 4)).with_cells(3)).unwrap();
        let mut d = all_none(&net);
        d = guard_and_repair(d, &net, RepairPolicy::RepairToIdentity).unwrap();
        d.warnings.clear();
        let text = d.to_json("cafe");
        let (back, hash) = Decisions::from_json(&text).unwrap();
        assert_eq!(hash, "cafe");
        assert_eq!(back, d);
        assert_eq!(back.to_json("cafe"), text);
        let e2 = text.find("\"c0.e2\"").unwrap();
        let e3 = text.find("\"c0.e3\"").unwrap();
        assert!(e2 < e3);
        assert!(serde_json::from_str::<Value>(&text).is_ok());
    }
}
