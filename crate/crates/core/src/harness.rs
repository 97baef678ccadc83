//! Multi-seed studies: run every (method, seed) pair, aggregate accuracy,
//! account wall-clock cost and emit CSV, markdown and DOT reports. Also an
//! exhaustive oracle that short-trains every discrete architecture of a
//! small network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::Method;
use crate::data::Dataset;
use crate::graph::{apply_decisions, cell_dot, ArchDiff, Choice, EdgeRef, Network};
use crate::trainer::{network_train_epoch, run_two_stage, test_accuracy, TrainConfig, TrainState, TransformMode};
use crate::Error;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("cannot aggregate an empty sequence")]
    Empty,
    #[error("non-finite value {0} in aggregate input")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`); 0 when `n == 1`.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// True when only one value was aggregated, so `std` carries no information.
    pub fn single(&self) -> bool {
        self.n == 1
    }
}

/// Mean and sample standard deviation, accumulated with Welford's update.
pub fn aggregate(values: &[f64]) -> Result<Aggregate, AggregateError> {
    if values.is_empty() {
        return Err(AggregateError::Empty);
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(AggregateError::NonFinite(v));
        }
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let n = values.len();
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    Ok(Aggregate { mean, std, n })
}

/// Two-decimal display rounding used by every table.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub model: String,
    pub network: Network,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub accuracy_pct: f64,
    pub wall_seconds: f64,
    pub params: usize,
    pub flops: usize,
    pub changed_edges: usize,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    /// Metrics of a completed run, or the reason it failed.
    pub outcome: Result<RunMetrics, String>,
    pub diff: Option<ArchDiff>,
    pub transformed: Option<Network>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub accuracy: Option<Aggregate>,
    pub runs: usize,
    pub failed: usize,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub model: String,
    pub config_hash: String,
    pub original: Network,
    pub seeds: Vec<u64>,
    pub records: Vec<RunRecord>,
}

pub fn run_one(network: &Network, data: &Dataset, train: TrainConfig, method: Method, seed: u64) -> RunRecord {
    let cfg = TrainConfig { transform_mode: method.transform_mode(), seed, ..train };
    match run_two_stage(cfg, network.clone(), data) {
        Ok(t) => RunRecord {
            method,
            seed,
            outcome: Ok(RunMetrics {
                accuracy_pct: 100.0 * t.test_accuracy,
                wall_seconds: t.wall_seconds,
                params: t.cost.params,
                flops: t.cost.flops,
                changed_edges: t.diff.changed_count(),
            }),
            diff: Some(t.diff),
            transformed: Some(t.model.network),
        },
        Err(e) => RunRecord { method, seed, outcome: Err(e.to_string()), diff: None, transformed: None },
    }
}

/// Runs every (method, seed) pair on a pool of `spec.workers` threads.
/// Failed runs are kept in the report with their cause.
pub fn run_experiment(spec: &ExperimentSpec, data: &Dataset) -> Result<ExperimentReport, Error> {
    if spec.methods.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Oracle("experiment needs at least one method and one seed".into()));
    }
    let jobs: Vec<(Method, u64)> = spec.methods.iter().flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(spec.workers.max(1)).build().map_err(|e| Error::Oracle(e.to_string()))?;
    let records = pool.install(|| jobs.par_iter().map(|&(m, s)| run_one(&spec.network, data, spec.train, m, s)).collect());
    Ok(ExperimentReport {
        model: spec.model.clone(),
        config_hash: spec.config_hash.clone(),
        original: spec.network.clone(),
        seeds: spec.seeds.clone(),
        records,
    })
}

impl ExperimentReport {
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }

    /// Aggregates over the runs of `method` that completed.
    pub fn summary(&self, method: Method) -> MethodSummary {
        let runs: Vec<&RunRecord> = self.records.iter().filter(|r| r.method == method).collect();
        let ok: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let acc: Vec<f64> = ok.iter().map(|m| m.accuracy_pct).collect();
        MethodSummary {
            method,
            accuracy: aggregate(&acc).ok(),
            runs: runs.len(),
            failed: runs.len() - ok.len(),
            total_seconds: ok.iter().map(|m| m.wall_seconds).sum(),
        }
    }

    pub fn all_failed(&self) -> bool {
        self.records.iter().all(|r| r.outcome.is_err())
    }

    pub fn to_csv(&self) -> String {
        report_csv(&self.config_hash, &self.csv_rows())
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.records
            .iter()
            .map(|r| {
                let m = r.outcome.as_ref().ok();
                CsvRow {
                    model: self.model.clone(),
                    method: r.method,
                    seed: r.seed,
                    accuracy_pct: m.map(|m| m.accuracy_pct),
                    wall_seconds: m.map(|m| m.wall_seconds),
                    params: m.map(|m| m.params),
                    flops: m.map(|m| m.flops),
                    changed_edges: m.map(|m| m.changed_edges),
                    status: match &r.outcome {
                        Ok(_) => "ok".into(),
                        Err(e) => format!("failed: {}", e.replace([',', '\n', '\r'], ";")),
                    },
                }
            })
            .collect()
    }

    /// Two tables: per-method aggregates (mean, std, total cost in hours)
    /// and per-seed accuracies.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "<!-- config_hash: {} -->\n", self.config_hash);
        let _ = writeln!(s, "| Model | Method | Avg Acc (%) | Std (%) | Total Cost (hours) | Runs |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for m in self.methods() {
            let sm = self.summary(m);
            let (avg, std) = match sm.accuracy {
                Some(a) if a.single() => (format!("{:.2}", round2(a.mean)), "0.00 (n=1)".to_string()),
                Some(a) => (format!("{:.2}", round2(a.mean)), format!("{:.2}", round2(a.std))),
                None => ("failed".into(), "-".into()),
            };
            let runs = if sm.failed > 0 { format!("{} of {}", sm.runs - sm.failed, sm.runs) } else { sm.runs.to_string() };
            let _ = writeln!(s, "| {} | {m} | {avg} | {std} | {:.4} | {runs} |", self.model, sm.total_seconds / 3600.0);
        }
        let _ = writeln!(s);
        let header: Vec<String> = self.seeds.iter().map(|sd| format!("Random Seed ({sd})")).collect();
        let _ = writeln!(s, "| Model | Method | {} |", header.join(" | "));
        let _ = writeln!(s, "|---|---|{}", "---|".repeat(self.seeds.len()));
        for m in self.methods() {
            let cells: Vec<String> = self
                .seeds
                .iter()
                .map(|&sd| match self.records.iter().find(|r| r.method == m && r.seed == sd).map(|r| &r.outcome) {
                    Some(Ok(x)) => format!("{:.2}", round2(x.accuracy_pct)),
                    Some(Err(_)) => "failed".into(),
                    None => "-".into(),
                })
                .collect();
            let _ = writeln!(s, "| {} | {m} | {} |", self.model, cells.join(" | "));
        }
        s
    }

    /// One DOT file per cell of every transformed run; baseline runs have
    /// nothing to draw. Returns the written paths.
    pub fn write_dot_bundle(&self, dir: &Path) -> Result<Vec<PathBuf>, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for r in &self.records {
            let (Some(d), Some(net)) = (&r.diff, &r.transformed) else { continue };
            if r.method == Method::Original {
                continue;
            }
            for ci in 0..self.original.cells.len() {
                let path = dir.join(format!("{}_seed{}_cell{ci}.dot", r.method, r.seed));
                let text = format!("// config_hash: {}\n{}", self.config_hash, cell_dot(&self.original, net, d, ci));
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

pub const REPORT_CSV_HEADER: &str = "model,method,seed,accuracy_pct,wall_seconds,params,flops,changed_edges,status";

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub model: String,
    pub method: Method,
    pub seed: u64,
    pub accuracy_pct: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub params: Option<usize>,
    pub flops: Option<usize>,
    pub changed_edges: Option<usize>,
    pub status: String,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn report_csv(config_hash: &str, rows: &[CsvRow]) -> String {
    let mut s = format!("# config_hash: {config_hash}\n{REPORT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.model,
            r.method,
            r.seed,
            opt(r.accuracy_pct),
            opt(r.wall_seconds),
            opt(r.params),
            opt(r.flops),
            opt(r.changed_edges),
            r.status
        );
    }
    s
}

/// Parses a report CSV; returns the config hash and rows.
pub fn parse_report_csv(text: &str) -> Result<(String, Vec<CsvRow>), String> {
    let mut lines = text.lines();
    let hash = lines.next().and_then(|l| l.strip_prefix("# config_hash: ")).ok_or("missing config_hash line")?.to_string();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err("unexpected report header".into());
    }
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.splitn(9, ',').collect();
            if f.len() != 9 {
                return Err(format!("row {}: expected 9 fields", i + 1));
            }
            fn field<T: std::str::FromStr>(s: &str, row: usize) -> Result<Option<T>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| format!("row {row}: bad value `{s}`"))
                }
            }
            let row = i + 1;
            Ok(CsvRow {
                model: f[0].to_string(),
                method: f[1].parse()?,
                seed: f[2].parse().map_err(|_| format!("row {row}: bad seed"))?,
                accuracy_pct: field(f[3], row)?,
                wall_seconds: field(f[4], row)?,
                params: field(f[5], row)?,
                flops: field(f[6], row)?,
                changed_edges: field(f[7], row)?,
                status: f[8].to_string(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok((hash, rows))
}

/// One discrete architecture of the oracle enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Choice per edge, in `Network::edge_refs` order.
    pub choices: Vec<Choice>,
    pub accuracy: f64,
    /// Competition rank: 1 + number of candidates with strictly higher accuracy.
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub edges: Vec<EdgeRef>,
    /// Sorted by accuracy, best first (ties keep enumeration order).
    pub ranking: Vec<Candidate>,
    pub selected: Vec<Choice>,
    pub selected_rank: usize,
    pub selected_accuracy: f64,
}

impl OracleReport {
    pub fn candidates(&self) -> usize {
        self.ranking.len()
    }

    /// `rank <= n / 2`, compared without rounding.
    pub fn selected_in_top_half(&self) -> bool {
        2 * self.selected_rank <= self.ranking.len()
    }

    pub fn rank_of(&self, choices: &[Choice]) -> Option<usize> {
        self.ranking.iter().find(|c| c.choices == choices).map(|c| c.rank)
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<String> = self.edges.iter().map(ToString::to_string).collect();
        let mut s = format!("rank,accuracy,{},selected\n", names.join(","));
        for c in &self.ranking {
            let ch: Vec<&str> = c.choices.iter().map(|c| c.as_str()).collect();
            let _ = writeln!(s, "{},{},{},{}", c.rank, c.accuracy, ch.join(","), c.choices == self.selected);
        }
        s
    }
}

pub const MAX_ORACLE_EDGES: usize = 5;

/// Legal choices per edge: identity only where shapes allow it.
pub fn candidate_choices(net: &Network) -> Result<Vec<Vec<Choice>>, Error> {
    let shapes = net.infer_shapes()?;
    Ok(net
        .edge_refs()
        .iter()
        .map(|at| {
            let (i, o) = shapes.edges[at];
            if i == o {
                vec![Choice::None, Choice::Id, Choice::Same]
            } else {
                vec![Choice::None, Choice::Same]
            }
        })
        .collect())
}

/// Every combination of legal choices, the last edge varying fastest.
pub fn enumerate_candidates(net: &Network) -> Result<Vec<Vec<Choice>>, Error> {
    let per_edge = candidate_choices(net)?;
    if per_edge.len() > MAX_ORACLE_EDGES {
        return Err(Error::Oracle(format!("{} edges exceed the enumeration budget of {MAX_ORACLE_EDGES}", per_edge.len())));
    }
    let mut out: Vec<Vec<Choice>> = vec![vec![]];
    for choices in &per_edge {
        out = out.into_iter().flat_map(|p| choices.iter().map(move |&c| [p.clone(), vec![c]].concat())).collect();
    }
    Ok(out)
}

/// Short-trains one candidate from the weights that seed `seed` gives the
/// original network and returns its test accuracy.
pub fn short_train(net: &Network, choices: &[Choice], data: &Dataset, train: TrainConfig, epochs: usize) -> Result<f64, Error> {
    let decisions: BTreeMap<EdgeRef, Choice> = net.edge_refs().into_iter().zip(choices.iter().copied()).collect();
    let candidate = apply_decisions(net, &decisions)?;
    let cfg = TrainConfig { total_epochs: epochs.max(1), transform_mode: TransformMode::Off, ..train };
    let mut state = TrainState::new(cfg, net.clone())?;
    state.model.restrict_to(candidate)?;
    for _ in 0..epochs {
        network_train_epoch(&mut state, data)?;
    }
    test_accuracy(&state, data)
}

/// Trains every legal discrete architecture of `net` for `epochs` from
/// identical initial weights, ranks them by test accuracy and locates the
/// architecture picked by the two-stage method under `train`.
pub fn enumerate_discrete(net: &Network, data: &Dataset, train: TrainConfig, epochs: usize, workers: usize) -> Result<OracleReport, Error> {
    let candidates = enumerate_candidates(net)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| Error::Oracle(e.to_string()))?;
    let accuracies: Vec<f64> = pool.install(|| candidates.par_iter().map(|c| short_train(net, c, data, train, epochs)).collect::<Result<_, _>>())?;

    let trained = run_two_stage(train, net.clone(), data)?;
    let edges = net.edge_refs();
    let selected: Vec<Choice> = edges.iter().map(|at| trained.decisions.choices[at]).collect();

    let mut ranking: Vec<Candidate> = candidates
        .into_iter()
        .zip(&accuracies)
        .map(|(choices, &accuracy)| Candidate { choices, accuracy, rank: 1 + accuracies.iter().filter(|&&a| a > accuracy).count() })
        .collect();
    ranking.sort_by_key(|c| c.rank);
    let found =
        ranking.iter().find(|c| c.choices == selected).ok_or_else(|| Error::Oracle("selected architecture is not among the candidates".into()))?;
    Ok(OracleReport { edges, selected_rank: found.rank, selected_accuracy: found.accuracy, selected, ranking })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::graph::Shape;
    use crate::templates::{build_network, NetworkConfig, TemplateName};

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[91.74, 91.74, 91.65, 91.76, 91.39]).unwrap();
        assert_eq!(round2(a.mean), 91.66);
        let b = aggregate(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((b.mean, b.std), (5.0, 0.0));
        let c = aggregate(&[0.0, 2.0]).unwrap();
        assert_eq!(c.mean, 1.0);
        assert!((c.std - 2f64.sqrt()).abs() < 1e-15);
        let d = aggregate(&[3.5]).unwrap();
        assert!(d.single() && d.std == 0.0);
        assert_eq!(aggregate(&[]), Err(AggregateError::Empty));
    }

    #[test]
    fn candidates_of_tiny() {
        let net = build_network(TemplateName::Tiny, &NetworkConfig::new(2, 3, Shape::new(3, 8, 8))).unwrap();
        let c = enumerate_candidates(&net).unwrap();
        assert_eq!(c.len(), 81);
        assert_eq!(c.iter().filter(|c| c.iter().all(|&x| x == Choice::Same)).count(), 1);
    }

    #[test]
    fn masked_identity_is_excluded() {
        let net = build_network(TemplateName::ResnetMini, &NetworkConfig::new(2, 3, Shape::new(3, 8, 8)).with_cells(1)).unwrap();
        // two residual cells of three edges: too many to enumerate
        assert!(enumerate_candidates(&net).is_err());
        let per = candidate_choices(&net).unwrap();
        assert_eq!(per[3].len(), 2);
    }

    fn report(methods: &[Method], seeds: &[u64]) -> ExperimentReport {
        let data = gen_synthetic(&SyntheticSpec {
            classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 8,
            channels: 3,
            noise: 0.2,
            jitter: 0,
            seed: 0,
        })
        .unwrap();
        let net = build_network(TemplateName::Tiny, &NetworkConfig::new(2, 3, Shape::new(3, 8, 8))).unwrap();
        let spec = ExperimentSpec {
            model: "tiny".into(),
            network: net,
            train: TrainConfig { total_epochs: 2, arch_epochs: 1, batch_size: 6, ..Default::default() },
            methods: methods.to_vec(),
            seeds: seeds.to_vec(),
            workers: 1,
            config_hash: "h".into(),
        };
        run_experiment(&spec, &data).unwrap()
    }

    #[test]
    fn markdown_layout_and_determinism() {
        let r = report(&[Method::Original, Method::OursCell], &[1, 2, 3, 4, 5]);
        assert_eq!(r.records.len(), 10);
        let md = r.to_markdown();
        let tables: Vec<&str> = md.split("\n\n").collect();
        assert_eq!(tables[1].lines().count(), 4);
        let seed_rows: Vec<&str> = tables[2].lines().skip(2).collect();
        assert_eq!(seed_rows.len(), 2);
        assert!(seed_rows.iter().all(|l| l.matches('|').count() == 8));
        let again = report(&[Method::Original, Method::OursCell], &[1, 2, 3, 4, 5]);
        assert_eq!(
            r.csv_rows().iter().map(|c| c.accuracy_pct).collect::<Vec<_>>(),
            again.csv_rows().iter().map(|c| c.accuracy_pct).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_seed_flags_n1() {
        let r = report(&[Method::Original], &[1]);
        let s = r.summary(Method::Original);
        assert!(s.accuracy.unwrap().single());
        assert!(r.to_markdown().contains("(n=1)"));
    }

    #[test]
    fn csv_round_trip_is_byte_stable() {
        let r = report(&[Method::Original, Method::OursFull], &[1, 2]);
        let mut rows = r.csv_rows();
        rows[1].accuracy_pct = None;
        rows[1].status = "failed: diverged".into();
        let text = report_csv("h", &rows);
        let (hash, parsed) = parse_report_csv(&text).unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(report_csv(&hash, &parsed), text);
    }

    #[test]
    fn dot_bundle_counts() {
        let dir = tempfile::tempdir().unwrap();
        let base = report(&[Method::Original], &[1]);
        assert!(base.write_dot_bundle(&dir.path().join("a")).unwrap().is_empty());
        let full = report(&[Method::OursFull], &[1, 2]);
        assert_eq!(full.write_dot_bundle(&dir.path().join("b")).unwrap().len(), 2);
    }
}
