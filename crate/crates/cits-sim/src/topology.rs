//! The C-ITS environment model: typed nodes, typed links, software
//! inventories, the road network with signalized intersections, and the
//! validation rules that keep fixtures honest.
//!
//! A [`Topology`] is immutable after load and safe to share across engine
//! instances.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::services::ParkingLot;
use crate::version::{Version, VersionRange};

/// What a node is, per the communication overview.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    /// A vehicle with an on-board unit.
    Vehicle,
    RoadsideUnit,
    RsuCloud,
    CentralCloud,
    MobileDevice,
    ExternalProvider,
    AttackerDevice,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Vehicle => "vehicle",
            NodeKind::RoadsideUnit => "roadside-unit",
            NodeKind::RsuCloud => "rsu-cloud",
            NodeKind::CentralCloud => "central-cloud",
            NodeKind::MobileDevice => "mobile-device",
            NodeKind::ExternalProvider => "external-provider",
            NodeKind::AttackerDevice => "attacker-device",
        };
        f.write_str(s)
    }
}

/// Link-layer protocol of a communication link.
///
/// Declaration order matches the wire discriminant (Mqtt=1 .. Snmpv3=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Mqtt,
    ItsG5,
    InternetIpv6,
    Snmpv3,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::Mqtt,
        ProtocolKind::ItsG5,
        ProtocolKind::InternetIpv6,
        ProtocolKind::Snmpv3,
    ];

    /// Wire discriminant used by the frame codec.
    pub fn wire_code(self) -> u8 {
        match self {
            ProtocolKind::Mqtt => 1,
            ProtocolKind::ItsG5 => 2,
            ProtocolKind::InternetIpv6 => 3,
            ProtocolKind::Snmpv3 => 4,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ProtocolKind::Mqtt),
            2 => Some(ProtocolKind::ItsG5),
            3 => Some(ProtocolKind::InternetIpv6),
            4 => Some(ProtocolKind::Snmpv3),
            _ => None,
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProtocolKind::Mqtt => "mqtt",
            ProtocolKind::ItsG5 => "its-g5",
            ProtocolKind::InternetIpv6 => "internet-ipv6",
            ProtocolKind::Snmpv3 => "snmpv3",
        };
        f.write_str(s)
    }
}

/// Service identifiers a node may host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceId {
    Pm01,
    Ps03,
    Su01,
    Ti03,
    SignalController,
    Database,
}

impl ServiceId {
    /// The four dispatchable service packages (excludes node-local roles).
    pub const PACKAGES: [ServiceId; 4] =
        [ServiceId::Pm01, ServiceId::Ps03, ServiceId::Su01, ServiceId::Ti03];

    pub fn as_str(self) -> &'static str {
        match self {
            ServiceId::Pm01 => "pm01",
            ServiceId::Ps03 => "ps03",
            ServiceId::Su01 => "su01",
            ServiceId::Ti03 => "ti03",
            ServiceId::SignalController => "signal-controller",
            ServiceId::Database => "database",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pm01" => Some(ServiceId::Pm01),
            "ps03" => Some(ServiceId::Ps03),
            "su01" => Some(ServiceId::Su01),
            "ti03" => Some(ServiceId::Ti03),
            "signal-controller" => Some(ServiceId::SignalController),
            "database" => Some(ServiceId::Database),
            _ => None,
        }
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of a node's software inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftwareItem {
    pub name: String,
    pub version: Version,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub software: Vec<SoftwareItem>,
    #[serde(default)]
    pub services: Vec<ServiceId>,
}

impl Node {
    pub fn hosts(&self, service: ServiceId) -> bool {
        self.services.contains(&service)
    }
}

/// Undirected communication link between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub a: String,
    pub b: String,
    pub protocol: ProtocolKind,
    pub latency_ms: u64,
}

impl Link {
    pub fn touches(&self, id: &str) -> bool {
        self.a == id || self.b == id
    }

    pub fn peer_of(&self, id: &str) -> Option<&str> {
        if self.a == id {
            Some(&self.b)
        } else if self.b == id {
            Some(&self.a)
        } else {
            None
        }
    }
}

/// Directed road segment with a positive traversal cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSegment {
    pub from: String,
    pub to: String,
    pub cost: f64,
}

/// Key used for incident tables: `"from->to"`.
pub fn segment_key(from: &str, to: &str) -> String {
    format!("{from}->{to}")
}

/// Fixed-cycle signal plan for one intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPlan {
    /// Roadside unit that executes signal changes for this intersection.
    pub rsu: String,
    /// Cycle order of phases.
    pub phases: Vec<String>,
    /// All approaches controlled at this intersection.
    pub approaches: Vec<String>,
    /// Which approaches each phase gives right of way.
    pub serves: BTreeMap<String, BTreeSet<String>>,
    /// Symmetric conflict matrix over `phases` (true = must never be
    /// simultaneously active). Diagonal is false.
    pub conflict: Vec<Vec<bool>>,
    /// Ticks a phase stays active in the normal cycle.
    pub dwell_ticks: u32,
}

impl SignalPlan {
    pub fn phase_index(&self, phase: &str) -> Option<usize> {
        self.phases.iter().position(|p| p == phase)
    }

    /// First phase in cycle order serving the approach.
    pub fn phase_serving(&self, approach: &str) -> Option<usize> {
        self.phases.iter().position(|p| {
            self.serves
                .get(p)
                .is_some_and(|set| set.contains(approach))
        })
    }

    pub fn conflicts(&self, a: usize, b: usize) -> bool {
        self.conflict
            .get(a)
            .and_then(|row| row.get(b))
            .copied()
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadGraph {
    #[serde(default)]
    pub intersections: Vec<String>,
    #[serde(default)]
    pub segments: Vec<RoadSegment>,
    #[serde(default)]
    pub signals: BTreeMap<String, SignalPlan>,
}

impl RoadGraph {
    pub fn has_intersection(&self, id: &str) -> bool {
        self.intersections.iter().any(|i| i == id)
    }

    pub fn has_segment(&self, from: &str, to: &str) -> bool {
        self.segments.iter().any(|s| s.from == from && s.to == to)
    }
}

/// The validated, immutable environment model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub schema: u32,
    pub name: String,
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default)]
    pub road_graph: RoadGraph,
    #[serde(default)]
    pub parking_lots: Vec<ParkingLot>,
    /// Devices allowed to register as emergency vehicles through the
    /// legitimate enrollment path.
    #[serde(default)]
    pub enrolled_emergency: Vec<String>,
}

/// A single validation finding. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub message: String,
}

impl Violation {
    fn new(entity: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { entity: entity.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed topology: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid topology: {}", format_violations(.0))]
    Validation(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown node {0:?}")]
pub struct UnknownNode(pub String);

/// Which node kinds a protocol may connect, as the minimal closure of the
/// communication overview plus the edges the attack scenarios require.
pub fn protocol_legal(protocol: ProtocolKind, a: NodeKind, b: NodeKind) -> bool {
    use NodeKind::*;
    let pair = |x: NodeKind, y: NodeKind| (a == x && b == y) || (a == y && b == x);
    match protocol {
        ProtocolKind::Mqtt => {
            pair(RoadsideUnit, RsuCloud)
                || pair(Vehicle, CentralCloud)
                || pair(AttackerDevice, CentralCloud)
        }
        ProtocolKind::ItsG5 => pair(RoadsideUnit, Vehicle) || pair(RoadsideUnit, MobileDevice),
        ProtocolKind::InternetIpv6 => {
            pair(RsuCloud, CentralCloud)
                || pair(ExternalProvider, CentralCloud)
                || pair(AttackerDevice, CentralCloud)
                || pair(MobileDevice, CentralCloud)
        }
        ProtocolKind::Snmpv3 => {
            pair(CentralCloud, RoadsideUnit) || pair(RsuCloud, RoadsideUnit)
        }
    }
}

fn is_lowercase_ident(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'-' | b'_' | b'.'))
}

impl Topology {
    /// Parse without validating. Used by `validate` tooling and tests;
    /// prefer [`Topology::load`] or [`Topology::from_json_str`], which
    /// reject invalid models.
    pub fn parse(json: &str) -> Result<Topology, TopologyError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn from_json_str(json: &str) -> Result<Topology, TopologyError> {
        let topo = Topology::parse(json)?;
        let violations = topo.validate();
        if violations.is_empty() {
            Ok(topo)
        } else {
            Err(TopologyError::Validation(violations))
        }
    }

    /// Entry point for untrusted bytes (also the fuzz target).
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Topology, TopologyError> {
        let s = std::str::from_utf8(bytes)
            .map_err(|e| TopologyError::Parse(serde_json::Error::io(std::io::Error::other(e))))?;
        Topology::from_json_str(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Topology, TopologyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Topology::from_json_str(&text)
    }

    /// Stable serialization; `load ∘ serialize` is a fixed point.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn require_node(&self, id: &str) -> Result<&Node, UnknownNode> {
        self.node(id).ok_or_else(|| UnknownNode(id.to_string()))
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    pub fn parking_lot(&self, id: &str) -> Option<&ParkingLot> {
        self.parking_lots.iter().find(|l| l.id == id)
    }

    /// All invariant violations in this model; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();

        if self.schema != 1 {
            out.push(Violation::new("topology", format!("unsupported schema {}", self.schema)));
        }

        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if node.id.is_empty() {
                out.push(Violation::new("node", "empty node id"));
            }
            if !ids.insert(node.id.as_str()) {
                out.push(Violation::new(format!("node {}", node.id), "duplicate node id"));
            }
            for item in &node.software {
                if !is_lowercase_ident(&item.name) {
                    out.push(Violation::new(
                        format!("node {}", node.id),
                        format!("software name {:?} is not a lowercase identifier", item.name),
                    ));
                }
            }
            if node.hosts(ServiceId::Database)
                && !matches!(node.kind, NodeKind::RsuCloud | NodeKind::CentralCloud)
            {
                out.push(Violation::new(
                    format!("node {}", node.id),
                    format!("kind {} may not host the database service", node.kind),
                ));
            }
            if node.kind == NodeKind::AttackerDevice && !node.services.is_empty() {
                out.push(Violation::new(
                    format!("node {}", node.id),
                    "attacker devices may not hold service roles",
                ));
            }
        }

        let mut link_keys = BTreeSet::new();
        for link in &self.links {
            let label = format!("link {}--{} ({})", link.a, link.b, link.protocol);
            if link.a == link.b {
                out.push(Violation::new(&label, "self-loop not allowed"));
            }
            let mut endpoints_ok = true;
            for end in [&link.a, &link.b] {
                if !ids.contains(end.as_str()) {
                    out.push(Violation::new(&label, format!("references unknown node {end:?}")));
                    endpoints_ok = false;
                }
            }
            let key = if link.a <= link.b {
                (link.a.clone(), link.b.clone(), link.protocol)
            } else {
                (link.b.clone(), link.a.clone(), link.protocol)
            };
            if !link_keys.insert(key) {
                out.push(Violation::new(&label, "duplicate link"));
            }
            if link.latency_ms == 0 {
                out.push(Violation::new(&label, "latency_ms must be >= 1"));
            }
            if endpoints_ok && link.a != link.b {
                let ka = self.node(&link.a).map(|n| n.kind);
                let kb = self.node(&link.b).map(|n| n.kind);
                if let (Some(ka), Some(kb)) = (ka, kb) {
                    if !protocol_legal(link.protocol, ka, kb) {
                        out.push(Violation::new(
                            &label,
                            format!("protocol {} is not legal between {ka} and {kb}", link.protocol),
                        ));
                    }
                }
            }
        }

        self.validate_road_graph(&mut out);

        let mut lot_ids = BTreeSet::new();
        for lot in &self.parking_lots {
            let label = format!("parking lot {}", lot.id);
            if !lot_ids.insert(lot.id.as_str()) {
                out.push(Violation::new(&label, "duplicate lot id"));
            }
            if lot.capacity == 0 {
                out.push(Violation::new(&label, "capacity must be >= 1"));
            }
            if lot.occupied > lot.capacity {
                out.push(Violation::new(
                    &label,
                    format!("occupied {} exceeds capacity {}", lot.occupied, lot.capacity),
                ));
            }
            if !(lot.price.is_finite() && lot.price >= 0.0) {
                out.push(Violation::new(&label, "price must be a finite non-negative number"));
            }
        }

        for device in &self.enrolled_emergency {
            match self.node(device) {
                None => out.push(Violation::new(
                    format!("enrolled emergency {device}"),
                    "references unknown node",
                )),
                Some(n) if n.kind != NodeKind::Vehicle => out.push(Violation::new(
                    format!("enrolled emergency {device}"),
                    format!("must be a vehicle, found {}", n.kind),
                )),
                Some(_) => {}
            }
        }

        out
    }

    fn validate_road_graph(&self, out: &mut Vec<Violation>) {
        let rg = &self.road_graph;
        let mut seen = BTreeSet::new();
        for ix in &rg.intersections {
            if !seen.insert(ix.as_str()) {
                out.push(Violation::new(format!("intersection {ix}"), "duplicate intersection id"));
            }
        }
        for seg in &rg.segments {
            let label = format!("segment {}", segment_key(&seg.from, &seg.to));
            for end in [&seg.from, &seg.to] {
                if !seen.contains(end.as_str()) {
                    out.push(Violation::new(&label, format!("references unknown intersection {end:?}")));
                }
            }
            if !(seg.cost.is_finite() && seg.cost > 0.0) {
                out.push(Violation::new(&label, "cost must be a finite positive number"));
            }
        }
        for (ix, plan) in &rg.signals {
            let label = format!("signal plan {ix}");
            if !seen.contains(ix.as_str()) {
                out.push(Violation::new(&label, "signalized intersection is not in the road graph"));
            }
            match self.node(&plan.rsu) {
                None => out.push(Violation::new(&label, format!("unknown rsu {:?}", plan.rsu))),
                Some(n) if n.kind != NodeKind::RoadsideUnit => {
                    out.push(Violation::new(&label, format!("rsu {} is a {}", plan.rsu, n.kind)));
                }
                Some(_) => {}
            }
            if plan.phases.is_empty() {
                out.push(Violation::new(&label, "plan has no phases"));
            }
            let phase_set: BTreeSet<&str> = plan.phases.iter().map(String::as_str).collect();
            if phase_set.len() != plan.phases.len() {
                out.push(Violation::new(&label, "duplicate phase ids"));
            }
            if plan.dwell_ticks == 0 {
                out.push(Violation::new(&label, "dwell_ticks must be >= 1"));
            }
            for phase in plan.serves.keys() {
                if !phase_set.contains(phase.as_str()) {
                    out.push(Violation::new(&label, format!("serves references unknown phase {phase:?}")));
                }
            }
            let approach_set: BTreeSet<&str> = plan.approaches.iter().map(String::as_str).collect();
            for (phase, served) in &plan.serves {
                for ap in served {
                    if !approach_set.contains(ap.as_str()) {
                        out.push(Violation::new(
                            &label,
                            format!("phase {phase} serves unknown approach {ap:?}"),
                        ));
                    }
                }
            }
            for ap in &plan.approaches {
                let served = plan.serves.values().any(|set| set.contains(ap));
                if !served {
                    out.push(Violation::new(&label, format!("approach {ap:?} served by no phase")));
                }
            }
            if plan.conflict.len() != plan.phases.len()
                || plan.conflict.iter().any(|row| row.len() != plan.phases.len())
            {
                out.push(Violation::new(&label, "conflict matrix dimensions do not match phases"));
            } else {
                for i in 0..plan.phases.len() {
                    if plan.conflict[i][i] {
                        out.push(Violation::new(&label, "conflict matrix diagonal must be false"));
                    }
                    for j in 0..i {
                        if plan.conflict[i][j] != plan.conflict[j][i] {
                            out.push(Violation::new(&label, "conflict matrix must be symmetric"));
                        }
                    }
                }
            }
        }
    }

    /// True iff a simple path exists from `from` to `to` whose final hop
    /// into `to` uses `protocol`. The requirement lists constrain the
    /// ingress protocol at the target, so only the last hop's protocol
    /// matters; interior hops may use anything.
    pub fn protocol_on_path(
        &self,
        from: &str,
        to: &str,
        protocol: ProtocolKind,
    ) -> Result<bool, UnknownNode> {
        self.require_node(from)?;
        self.require_node(to)?;
        if from == to {
            return Ok(false);
        }
        // Reachable set of `from` in the graph with `to` removed; appending
        // one legal final hop keeps the path simple.
        let mut reach: BTreeSet<&str> = BTreeSet::new();
        reach.insert(from);
        let mut stack = vec![from];
        while let Some(cur) = stack.pop() {
            for link in &self.links {
                if let Some(peer) = link.peer_of(cur) {
                    if peer != to && !reach.contains(peer) {
                        reach.insert(peer);
                        stack.push(peer);
                    }
                }
            }
        }
        Ok(self.links.iter().any(|l| {
            l.protocol == protocol
                && ((l.b == to && reach.contains(l.a.as_str()))
                    || (l.a == to && reach.contains(l.b.as_str())))
        }))
    }

    /// True iff the node's inventory contains `name` with a version inside
    /// `range`.
    pub fn software_matches(
        &self,
        node: &str,
        name: &str,
        range: &VersionRange,
    ) -> Result<bool, UnknownNode> {
        let node = self.require_node(node)?;
        Ok(node
            .software
            .iter()
            .any(|item| item.name == name && range.contains(&item.version)))
    }

    /// Adjacent peers in deterministic order (peer id, then protocol).
    pub fn neighbors(&self, node: &str) -> Result<Vec<(String, ProtocolKind, u64)>, UnknownNode> {
        self.require_node(node)?;
        let mut out: Vec<(String, ProtocolKind, u64)> = self
            .links
            .iter()
            .filter_map(|l| l.peer_of(node).map(|p| (p.to_string(), l.protocol, l.latency_ms)))
            .collect();
        out.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.wire_code().cmp(&y.1.wire_code())));
        Ok(out)
    }

    /// Links between two adjacent nodes, one entry per protocol.
    pub fn links_between(&self, a: &str, b: &str) -> Vec<&Link> {
        self.links
            .iter()
            .filter(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
            .collect()
    }
}
