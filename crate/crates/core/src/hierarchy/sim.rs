//! Discrete-event simulation of a node tree exchanging summaries.
//!
//! Events at equal times run in the order detection, delivery, tick, then
//! by node id, then by insertion sequence. A summary emitted at a tick is
//! delivered to the parent at the same instant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::compiler::{self, CompileError};
use crate::fault_manager::{self, ClassifierConfig, DetectionReport, FaultError, ReportParseError};
use crate::model::HealthMap;
use crate::resource_map::{ResourceMap, RmEntry};
use crate::symbols::SymbolTable;

use super::ingest::{ingest_summary, ChildMapping, IngestError};
use super::wire::{encode_summary, WireError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: u32,
    pub hm: PathBuf,
    pub map: Option<PathBuf>,
    pub period: u64,
    pub parent: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioEvent {
    pub time: u64,
    pub node: u32,
    pub report: DetectionReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub nodes: Vec<NodeSpec>,
    pub events: Vec<ScenarioEvent>,
    pub duration: Option<u64>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("node {0} declared twice")]
    DuplicateNode(u32),
    #[error("node {node} names missing parent {parent}")]
    UnknownParent { node: u32, parent: u32 },
    #[error("node parent links form a cycle through node {0}")]
    Cycle(u32),
    #[error("event at {time} addresses unknown node {node}")]
    UnknownNode { time: u64, node: u32 },
    #[error("event at {time}: node {node} has no instrument {detector}")]
    UnknownDetector { time: u64, node: u32, detector: u32 },
    #[error("node {node} has a zero report period")]
    ZeroPeriod { node: u32 },
    #[error("node {child} is not in the mapping of its parent {parent}")]
    UnmappedChild { child: u32, parent: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Compile {
        path: PathBuf,
        source: CompileError,
    },
    #[error("node {node}: {source}")]
    Mapping { node: u32, source: IngestError },
    #[error("node {node} at {time}: {source}")]
    Fault {
        node: u32,
        time: u64,
        source: FaultError,
    },
    #[error("node {node} at {time}: {source}")]
    Ingest {
        node: u32,
        time: u64,
        source: IngestError,
    },
    #[error("node {node}: {source}")]
    Wire { node: u32, source: WireError },
}

impl Scenario {
    /// Line format:
    /// `node <id> hm=<xml> map=<file|none> period=<µs> parent=<id|none>`,
    /// `at <µs> node <id> detect <detector> sev=<SEV> class=<n> [payload=<hex>]`,
    /// `duration <µs>`.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut scenario = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |message: String| SimError::Syntax { line, message };
            let mut tokens = content.split_whitespace();
            match tokens.next() {
                Some("node") => {
                    let id = number(tokens.next(), "node id").map_err(syntax)?;
                    let (mut hm, mut map, mut period, mut parent) = (None, None, None, None);
                    for tok in tokens {
                        let (k, v) = tok
                            .split_once('=')
                            .ok_or_else(|| syntax(format!("expected key=value, got {tok:?}")))?;
                        match k {
                            "hm" => hm = Some(PathBuf::from(v)),
                            "map" => map = Some((v != "none").then(|| PathBuf::from(v))),
                            "period" => period = Some(number(Some(v), "period").map_err(syntax)?),
                            "parent" => {
                                parent = Some(if v == "none" {
                                    None
                                } else {
                                    Some(number(Some(v), "parent").map_err(syntax)? as u32)
                                })
                            }
                            other => return Err(syntax(format!("unknown field {other:?}"))),
                        }
                    }
                    scenario.nodes.push(NodeSpec {
                        id: id as u32,
                        hm: hm.ok_or_else(|| syntax("missing hm=".into()))?,
                        map: map.unwrap_or(None),
                        period: period.ok_or_else(|| syntax("missing period=".into()))?,
                        parent: parent.ok_or_else(|| syntax("missing parent=".into()))?,
                    });
                }
                Some("at") => {
                    let time = number(tokens.next(), "time").map_err(syntax)?;
                    if tokens.next() != Some("node") {
                        return Err(syntax("expected 'node' after the time".into()));
                    }
                    let node = number(tokens.next(), "node id").map_err(syntax)? as u32;
                    if tokens.next() != Some("detect") {
                        return Err(syntax("expected 'detect'".into()));
                    }
                    let report = DetectionReport::parse_fields(tokens, Some(time))
                        .map_err(|e: ReportParseError| syntax(e.message))?;
                    if report.timestamp != time {
                        return Err(syntax("t= must not differ from the event time".into()));
                    }
                    scenario.events.push(ScenarioEvent { time, node, report });
                }
                Some("duration") => {
                    scenario.duration = Some(number(tokens.next(), "duration").map_err(syntax)?)
                }
                _ => return Err(syntax("expected 'node', 'at' or 'duration'".into())),
            }
        }
        Ok(scenario)
    }

    /// Explicit duration, or the last event time plus the longest period.
    pub fn effective_duration(&self) -> u64 {
        self.duration.unwrap_or_else(|| {
            let last = self.events.iter().map(|e| e.time).max().unwrap_or(0);
            let period = self.nodes.iter().map(|n| n.period).max().unwrap_or(0);
            last.saturating_add(period)
        })
    }
}

fn number(tok: Option<&str>, what: &str) -> Result<u64, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    tok.parse().map_err(|_| format!("bad {what} {tok:?}"))
}

#[derive(Debug, Clone)]
pub struct SimNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub period: u64,
    pub map: HealthMap,
    pub symbols: SymbolTable,
    pub rm: ResourceMap,
    pub mapping: ChildMapping,
}

impl SimNode {
    /// Installs the mapping's downlinks into `map` and initializes the RM.
    pub fn new(
        id: u32,
        parent: Option<u32>,
        period: u64,
        mut map: HealthMap,
        symbols: SymbolTable,
        mut mapping: ChildMapping,
    ) -> Result<Self, SimError> {
        mapping
            .install(&mut map)
            .map_err(|source| SimError::Mapping { node: id, source })?;
        let rm = ResourceMap::init(&map);
        Ok(Self {
            id,
            parent,
            period,
            map,
            symbols,
            rm,
            mapping,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRecord {
    pub time: u64,
    pub from: u32,
    pub to: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub time: u64,
    pub node: u32,
    pub entries: Vec<RmEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimOutput {
    /// Each node's RM at each of its ticks, before it reports.
    pub timeline: Vec<Snapshot>,
    pub messages: Vec<MessageRecord>,
    /// Node RMs when the run ends.
    pub final_rms: BTreeMap<u32, Vec<RmEntry>>,
    pub duration: u64,
}

impl SimOutput {
    pub fn render_messages(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let hex: String = m.bytes.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "{} {} -> {} {}", m.time, m.from, m.to, hex);
        }
        out
    }

    pub fn render_timeline(&self) -> String {
        let mut out = String::new();
        for s in &self.timeline {
            let _ = writeln!(out, "@{} node {}", s.time, s.node);
            out.push_str(&ResourceMap::from_entries(s.entries.clone()).render_table_by_id());
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Action {
    Detect(DetectionReport),
    Deliver(Vec<u8>),
    Tick,
}

impl Action {
    fn class(&self) -> u8 {
        match self {
            Action::Detect(_) => 0,
            Action::Deliver(_) => 1,
            Action::Tick => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    nodes: BTreeMap<u32, SimNode>,
    events: Vec<ScenarioEvent>,
    duration: u64,
    config: ClassifierConfig,
}

impl Simulation {
    /// Reads node descriptions and mappings relative to `base`.
    pub fn load(scenario: &Scenario, base: &Path) -> Result<Self, SimError> {
        let read = |p: &Path| {
            let path = base.join(p);
            std::fs::read_to_string(&path).map_err(|source| SimError::Io { path, source })
        };
        let mut nodes = Vec::with_capacity(scenario.nodes.len());
        for spec in &scenario.nodes {
            let xml = read(&spec.hm)?;
            let compiled = compiler::compile_str(&xml).map_err(|source| SimError::Compile {
                path: base.join(&spec.hm),
                source,
            })?;
            let mapping = match &spec.map {
                Some(p) => ChildMapping::parse(&read(p)?)
                    .map_err(|source| SimError::Mapping { node: spec.id, source })?,
                None => ChildMapping::new(),
            };
            nodes.push(SimNode::new(
                spec.id,
                spec.parent,
                spec.period,
                compiled.map,
                compiled.symbols,
                mapping,
            )?);
        }
        Self::new(nodes, scenario.events.clone(), scenario.effective_duration())
    }

    pub fn new(
        nodes: Vec<SimNode>,
        events: Vec<ScenarioEvent>,
        duration: u64,
    ) -> Result<Self, SimError> {
        let mut by_id = BTreeMap::new();
        for n in nodes {
            if n.period == 0 {
                return Err(SimError::ZeroPeriod { node: n.id });
            }
            let id = n.id;
            if by_id.insert(id, n).is_some() {
                return Err(SimError::DuplicateNode(id));
            }
        }
        for n in by_id.values() {
            if let Some(p) = n.parent {
                let parent = by_id.get(&p).ok_or(SimError::UnknownParent {
                    node: n.id,
                    parent: p,
                })?;
                if !parent.mapping.knows(n.id) {
                    return Err(SimError::UnmappedChild {
                        child: n.id,
                        parent: p,
                    });
                }
            }
            let mut seen = BTreeSet::from([n.id]);
            let mut cur = n.parent;
            while let Some(p) = cur {
                if !seen.insert(p) {
                    return Err(SimError::Cycle(n.id));
                }
                cur = by_id.get(&p).and_then(|x| x.parent);
            }
        }
        for e in &events {
            let node = by_id.get(&e.node).ok_or(SimError::UnknownNode {
                time: e.time,
                node: e.node,
            })?;
            if node.map.diag_resource(e.report.detector).is_none() {
                return Err(SimError::UnknownDetector {
                    time: e.time,
                    node: e.node,
                    detector: e.report.detector,
                });
            }
        }
        Ok(Self {
            nodes: by_id,
            events,
            duration,
            config: ClassifierConfig::default(),
        })
    }

    pub fn with_config(mut self, config: ClassifierConfig) -> Self {
        self.config = config;
        self
    }

    pub fn node(&self, id: u32) -> Option<&SimNode> {
        self.nodes.get(&id)
    }

    pub fn run(mut self) -> Result<(SimOutput, BTreeMap<u32, SimNode>), SimError> {
        let mut queue: BTreeMap<(u64, u8, u32, u64), Action> = BTreeMap::new();
        let mut seq = 0u64;
        let mut push = |q: &mut BTreeMap<_, _>, time: u64, node: u32, action: Action| {
            q.insert((time, action.class(), node, seq), action);
            seq += 1;
        };
        for e in &self.events {
            if e.time <= self.duration {
                push(&mut queue, e.time, e.node, Action::Detect(e.report.clone()));
            }
        }
        for n in self.nodes.values() {
            if n.period <= self.duration {
                push(&mut queue, n.period, n.id, Action::Tick);
            }
        }

        let mut out = SimOutput {
            timeline: Vec::new(),
            messages: Vec::new(),
            final_rms: BTreeMap::new(),
            duration: self.duration,
        };
        while let Some(((time, _, id, _), action)) = queue.pop_first() {
            let node = self.nodes.get_mut(&id).expect("validated node");
            match action {
                Action::Detect(report) => {
                    fault_manager::report_detection(&mut node.map, &mut node.rm, &report, &self.config)
                        .map_err(|source| SimError::Fault {
                            node: id,
                            time,
                            source,
                        })?;
                }
                Action::Deliver(bytes) => {
                    ingest_summary(
                        &mut node.map,
                        &mut node.rm,
                        &bytes,
                        &node.mapping,
                        time,
                        &self.config,
                    )
                    .map_err(|source| SimError::Ingest {
                        node: id,
                        time,
                        source,
                    })?;
                }
                Action::Tick => {
                    out.timeline.push(Snapshot {
                        time,
                        node: id,
                        entries: node.rm.entries().to_vec(),
                    });
                    if let Some(parent) = node.parent {
                        let bytes = encode_summary(id, &node.rm)
                            .map_err(|source| SimError::Wire { node: id, source })?;
                        out.messages.push(MessageRecord {
                            time,
                            from: id,
                            to: parent,
                            bytes: bytes.clone(),
                        });
                        push(&mut queue, time, parent, Action::Deliver(bytes));
                    }
                    let next = time.saturating_add(node.period);
                    if next <= self.duration && next > time {
                        push(&mut queue, next, id, Action::Tick);
                    }
                }
            }
        }
        for (id, n) in &self.nodes {
            out.final_rms.insert(*id, n.rm.entries().to_vec());
        }
        Ok((out, self.nodes))
    }
}
