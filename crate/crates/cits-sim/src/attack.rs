//! Vulnerability catalog, precondition evaluation, capability and effect
//! semantics, scripted scenarios, and exhaustive attack-path search.
//!
//! CVE semantics are abstracted to precondition -> capability/effect rules;
//! no exploit payloads are modeled. Catalog entries may use `$variables` in
//! node and service positions; scenario bindings (or the path search)
//! instantiate them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::services::OverrideCommand;
use crate::topology::{ProtocolKind, Topology};
use crate::version::VersionRange;

/// An abstract attacker privilege granted by a successful step.
/// Capabilities are monotone within a run: granted, never revoked.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Capability {
    NetworkAdjacent { node: String },
    DbWrite { node: String },
    EmergencyRegistered { device: String },
    PrivilegedService { service: String },
    SignalControl { rsu: String },
    CredentialTheft { service: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CapabilityKind {
    NetworkAdjacent,
    DbWrite,
    EmergencyRegistered,
    PrivilegedService,
    SignalControl,
    CredentialTheft,
}

impl Capability {
    pub fn kind(&self) -> CapabilityKind {
        match self {
            Capability::NetworkAdjacent { .. } => CapabilityKind::NetworkAdjacent,
            Capability::DbWrite { .. } => CapabilityKind::DbWrite,
            Capability::EmergencyRegistered { .. } => CapabilityKind::EmergencyRegistered,
            Capability::PrivilegedService { .. } => CapabilityKind::PrivilegedService,
            Capability::SignalControl { .. } => CapabilityKind::SignalControl,
            Capability::CredentialTheft { .. } => CapabilityKind::CredentialTheft,
        }
    }

    fn param(&self) -> &str {
        match self {
            Capability::NetworkAdjacent { node } | Capability::DbWrite { node } => node,
            Capability::EmergencyRegistered { device } => device,
            Capability::PrivilegedService { service } | Capability::CredentialTheft { service } => {
                service
            }
            Capability::SignalControl { rsu } => rsu,
        }
    }
}

impl CapabilityKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "network-adjacent" => Some(CapabilityKind::NetworkAdjacent),
            "db-write" => Some(CapabilityKind::DbWrite),
            "emergency-registered" => Some(CapabilityKind::EmergencyRegistered),
            "privileged-service" => Some(CapabilityKind::PrivilegedService),
            "signal-control" => Some(CapabilityKind::SignalControl),
            "credential-theft" => Some(CapabilityKind::CredentialTheft),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CapabilityKind::NetworkAdjacent => "network-adjacent",
            CapabilityKind::DbWrite => "db-write",
            CapabilityKind::EmergencyRegistered => "emergency-registered",
            CapabilityKind::PrivilegedService => "privileged-service",
            CapabilityKind::SignalControl => "signal-control",
            CapabilityKind::CredentialTheft => "credential-theft",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind().as_str(), self.param())
    }
}

/// The attacker's accumulated privileges in one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CapabilitySet {
    set: BTreeSet<Capability>,
}

impl CapabilitySet {
    pub fn has(&self, cap: &Capability) -> bool {
        self.set.contains(cap)
    }

    pub fn has_kind(&self, kind: CapabilityKind) -> bool {
        self.set.iter().any(|c| c.kind() == kind)
    }

    /// Returns true when the capability was not already present.
    pub fn grant(&mut self, cap: Capability) -> bool {
        self.set.insert(cap)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Capability> {
        self.set.iter()
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// One conjunct of a precondition. Evaluable against (topology,
/// capability set) with no side effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Atom {
    ProtocolPath {
        from: String,
        to: String,
        protocol: ProtocolKind,
    },
    Software {
        node: String,
        name: String,
        range: VersionRange,
    },
    Has {
        capability: Capability,
    },
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::ProtocolPath { from, to, protocol } => {
                write!(f, "protocol-path({from} -> {to}, {protocol})")
            }
            Atom::Software { node, name, range } => {
                write!(f, "software({node}, {name} in {range})")
            }
            Atom::Has { capability } => write!(f, "has({capability})"),
        }
    }
}

/// Evaluate one atom. Unknown node references simply fail the atom.
pub fn eval_atom(atom: &Atom, topo: &Topology, caps: &CapabilitySet) -> bool {
    match atom {
        Atom::ProtocolPath { from, to, protocol } => {
            topo.protocol_on_path(from, to, *protocol).unwrap_or(false)
        }
        Atom::Software { node, name, range } => {
            topo.software_matches(node, name, range).unwrap_or(false)
        }
        Atom::Has { capability } => caps.has(capability),
    }
}

/// True iff every atom holds; otherwise the first failing atom in
/// declaration order.
pub fn eval_precondition(
    atoms: &[Atom],
    topo: &Topology,
    caps: &CapabilitySet,
) -> Result<(), Atom> {
    for atom in atoms {
        if !eval_atom(atom, topo, caps) {
            return Err(atom.clone());
        }
    }
    Ok(())
}

/// World-effect kinds a catalog entry may apply; the scenario bindings
/// carry the concrete parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectKind {
    DbTamper,
    RegisterRogueEmergency,
    InjectSignalCommand,
}

impl EffectKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "db-tamper" => Some(EffectKind::DbTamper),
            "register-rogue-emergency" => Some(EffectKind::RegisterRogueEmergency),
            "inject-signal-command" => Some(EffectKind::InjectSignalCommand),
            _ => None,
        }
    }
}

/// One served-state mutation applied by a db-tamper effect. Never touches
/// the shadow ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "table", rename_all = "kebab-case")]
pub enum TamperOp {
    Parking { lot: String, occupied: u32 },
    Incidents { from: String, to: String, penalty: f64 },
}

/// Malicious signal command carried by an inject-signal-command effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalCommandSpec {
    pub intersection: String,
    #[serde(flatten)]
    pub command: OverrideCommand,
    pub duration_ticks: u32,
}

/// Fully instantiated world effect.
#[derive(Debug, Clone, PartialEq)]
pub enum WorldEffect {
    DbTamper { ops: Vec<TamperOp> },
    RegisterRogueEmergency { device: String },
    InjectSignalCommand { command: SignalCommandSpec },
}

/// A CVE abstracted to preconditions, granted capabilities, and world
/// effects. Node/service positions may hold `$variables`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VulnEntry {
    pub cve: String,
    #[serde(default)]
    pub precondition: Vec<Atom>,
    #[serde(default)]
    pub grants: Vec<Capability>,
    #[serde(default)]
    pub effects: Vec<EffectKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VulnCatalog {
    pub schema: u32,
    pub entries: Vec<VulnEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed catalog: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate cve id {0:?}")]
    DuplicateCve(String),
    #[error("unsupported catalog schema {0}")]
    Schema(u32),
}

impl VulnCatalog {
    pub fn from_json_str(json: &str) -> Result<Self, CatalogError> {
        let catalog: VulnCatalog = serde_json::from_str(json)?;
        if catalog.schema != 1 {
            return Err(CatalogError::Schema(catalog.schema));
        }
        let mut seen = BTreeSet::new();
        for entry in &catalog.entries {
            if !seen.insert(entry.cve.as_str()) {
                return Err(CatalogError::DuplicateCve(entry.cve.clone()));
            }
        }
        Ok(catalog)
    }

    /// Entry point for untrusted bytes (also the fuzz target).
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, CatalogError> {
        let s = std::str::from_utf8(bytes)
            .map_err(|e| CatalogError::Parse(serde_json::Error::io(std::io::Error::other(e))))?;
        Self::from_json_str(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn entry(&self, cve: &str) -> Option<&VulnEntry> {
        self.entries.iter().find(|e| e.cve == cve)
    }
}

/// One scripted attack step: which CVE, when, and the variable/effect
/// bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioStep {
    pub cve: String,
    pub at_ms: u64,
    #[serde(default)]
    pub bindings: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub id: String,
    pub attacker: String,
    pub steps: Vec<ScenarioStep>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported scenario schema {0}")]
    Schema(u32),
    #[error("step times must be strictly increasing (step {0} at {1} ms)")]
    StepsNotIncreasing(usize, u64),
}

impl Scenario {
    pub fn from_json_str(json: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(json)?;
        if scenario.schema != 1 {
            return Err(ScenarioError::Schema(scenario.schema));
        }
        let mut last = None;
        for (i, step) in scenario.steps.iter().enumerate() {
            if last.is_some_and(|t| step.at_ms <= t) {
                return Err(ScenarioError::StepsNotIncreasing(i, step.at_ms));
            }
            last = Some(step.at_ms);
        }
        Ok(scenario)
    }

    /// Entry point for untrusted bytes (also the fuzz target).
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ScenarioError> {
        let s = std::str::from_utf8(bytes)
            .map_err(|e| ScenarioError::Parse(serde_json::Error::io(std::io::Error::other(e))))?;
        Self::from_json_str(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InstantiateError {
    #[error("scenario references unknown cve {0:?}")]
    UnknownCve(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("binding {0:?} is missing or has the wrong shape")]
    BadBinding(String),
}

fn subst(
    value: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<String, InstantiateError> {
    if let Some(var) = value.strip_prefix('$') {
        bindings
            .get(var)
            .cloned()
            .ok_or_else(|| InstantiateError::BadBinding(var.to_string()))
    } else {
        Ok(value.to_string())
    }
}

fn subst_capability(
    cap: &Capability,
    bindings: &BTreeMap<String, String>,
) -> Result<Capability, InstantiateError> {
    Ok(match cap {
        Capability::NetworkAdjacent { node } => {
            Capability::NetworkAdjacent { node: subst(node, bindings)? }
        }
        Capability::DbWrite { node } => Capability::DbWrite { node: subst(node, bindings)? },
        Capability::EmergencyRegistered { device } => {
            Capability::EmergencyRegistered { device: subst(device, bindings)? }
        }
        Capability::PrivilegedService { service } => {
            Capability::PrivilegedService { service: subst(service, bindings)? }
        }
        Capability::SignalControl { rsu } => {
            Capability::SignalControl { rsu: subst(rsu, bindings)? }
        }
        Capability::CredentialTheft { service } => {
            Capability::CredentialTheft { service: subst(service, bindings)? }
        }
    })
}

fn subst_atom(
    atom: &Atom,
    bindings: &BTreeMap<String, String>,
) -> Result<Atom, InstantiateError> {
    Ok(match atom {
        Atom::ProtocolPath { from, to, protocol } => Atom::ProtocolPath {
            from: subst(from, bindings)?,
            to: subst(to, bindings)?,
            protocol: *protocol,
        },
        Atom::Software { node, name, range } => Atom::Software {
            node: subst(node, bindings)?,
            name: name.clone(),
            range: range.clone(),
        },
        Atom::Has { capability } => Atom::Has { capability: subst_capability(capability, bindings)? },
    })
}

/// A scenario step resolved against the catalog: concrete atoms, grants,
/// and effects.
#[derive(Debug, Clone, PartialEq)]
pub struct InstantiatedStep {
    pub cve: String,
    pub at_ms: u64,
    pub atoms: Vec<Atom>,
    pub grants: Vec<Capability>,
    pub effects: Vec<WorldEffect>,
}

/// Resolve one scenario step. String-valued bindings substitute
/// `$variables`; `attacker` is always bound to the scenario's attacker.
pub fn instantiate_step(
    catalog: &VulnCatalog,
    attacker: &str,
    step: &ScenarioStep,
) -> Result<InstantiatedStep, InstantiateError> {
    let entry = catalog
        .entry(&step.cve)
        .ok_or_else(|| InstantiateError::UnknownCve(step.cve.clone()))?;

    let mut vars: BTreeMap<String, String> =
        BTreeMap::from([("attacker".to_string(), attacker.to_string())]);
    for (key, value) in &step.bindings {
        if let Some(s) = value.as_str() {
            vars.insert(key.clone(), s.to_string());
        }
    }

    let atoms = entry
        .precondition
        .iter()
        .map(|a| subst_atom(a, &vars))
        .collect::<Result<Vec<_>, _>>()?;
    let grants = entry
        .grants
        .iter()
        .map(|c| subst_capability(c, &vars))
        .collect::<Result<Vec<_>, _>>()?;

    let mut effects = Vec::new();
    for kind in &entry.effects {
        effects.push(match kind {
            EffectKind::DbTamper => {
                let raw = step
                    .bindings
                    .get("tampers")
                    .ok_or_else(|| InstantiateError::BadBinding("tampers".into()))?;
                let ops: Vec<TamperOp> = serde_json::from_value(raw.clone())
                    .map_err(|_| InstantiateError::BadBinding("tampers".into()))?;
                WorldEffect::DbTamper { ops }
            }
            EffectKind::RegisterRogueEmergency => {
                let device = match step.bindings.get("device") {
                    Some(v) => v
                        .as_str()
                        .ok_or_else(|| InstantiateError::BadBinding("device".into()))?
                        .to_string(),
                    None => attacker.to_string(),
                };
                WorldEffect::RegisterRogueEmergency { device }
            }
            EffectKind::InjectSignalCommand => {
                let raw = step
                    .bindings
                    .get("command")
                    .ok_or_else(|| InstantiateError::BadBinding("command".into()))?;
                let command: SignalCommandSpec = serde_json::from_value(raw.clone())
                    .map_err(|_| InstantiateError::BadBinding("command".into()))?;
                WorldEffect::InjectSignalCommand { command }
            }
        });
    }

    Ok(InstantiatedStep { cve: entry.cve.clone(), at_ms: step.at_ms, atoms, grants, effects })
}

/// Per-step result of a scenario run.
#[derive(Debug, Clone, PartialEq)]
pub enum StepVerdict {
    Succeeded,
    /// Carries the first failing atom, rendered.
    PreconditionFailed(String),
    /// A step after a failed step is never evaluated.
    NotReached,
}

impl StepVerdict {
    pub fn succeeded(&self) -> bool {
        matches!(self, StepVerdict::Succeeded)
    }
}

impl fmt::Display for StepVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepVerdict::Succeeded => write!(f, "succeeded"),
            StepVerdict::PreconditionFailed(atom) => write!(f, "precondition-failed: {atom}"),
            StepVerdict::NotReached => write!(f, "not-reached"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub cve: String,
    pub at_ms: u64,
    pub verdict: StepVerdict,
}

/// Verdicts plus the capability timeline of one scenario run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackOutcome {
    pub steps: Vec<StepResult>,
    pub capability_timeline: Vec<(u64, Capability)>,
}

/// What the path search is asked to reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Capability(CapabilityKind),
    Effect(EffectKind),
}

impl Goal {
    pub fn parse(s: &str) -> Option<Self> {
        CapabilityKind::parse(s)
            .map(Goal::Capability)
            .or_else(|| EffectKind::parse(s).map(Goal::Effect))
    }
}

/// One feasible chain of instantiated steps.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AttackPath {
    pub steps: Vec<PathStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PathStep {
    pub cve: String,
    pub bindings: BTreeMap<String, String>,
}

impl AttackPath {
    pub fn cve_chain(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.cve.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum VarDomain {
    Node,
    Service,
}

fn add_var(vars: &mut BTreeMap<String, VarDomain>, value: &str, domain: VarDomain) {
    if let Some(name) = value.strip_prefix('$') {
        if name != "attacker" {
            // A variable seen in both domains keeps its first; the other
            // candidate values simply fail evaluation.
            vars.entry(name.to_string()).or_insert(domain);
        }
    }
}

fn add_cap_vars(vars: &mut BTreeMap<String, VarDomain>, cap: &Capability) {
    match cap {
        Capability::NetworkAdjacent { node } | Capability::DbWrite { node } => {
            add_var(vars, node, VarDomain::Node)
        }
        Capability::EmergencyRegistered { device } => add_var(vars, device, VarDomain::Node),
        Capability::SignalControl { rsu } => add_var(vars, rsu, VarDomain::Node),
        Capability::PrivilegedService { service } | Capability::CredentialTheft { service } => {
            add_var(vars, service, VarDomain::Service)
        }
    }
}

fn collect_vars(entry: &VulnEntry) -> BTreeMap<String, VarDomain> {
    let mut vars: BTreeMap<String, VarDomain> = BTreeMap::new();
    for atom in &entry.precondition {
        match atom {
            Atom::ProtocolPath { from, to, .. } => {
                add_var(&mut vars, from, VarDomain::Node);
                add_var(&mut vars, to, VarDomain::Node);
            }
            Atom::Software { node, .. } => add_var(&mut vars, node, VarDomain::Node),
            Atom::Has { capability } => add_cap_vars(&mut vars, capability),
        }
    }
    for cap in &entry.grants {
        add_cap_vars(&mut vars, cap);
    }
    vars
}

/// A candidate step: one entry under one variable assignment whose
/// topology-level atoms already hold.
#[derive(Debug, Clone)]
struct Candidate {
    cve: String,
    bindings: BTreeMap<String, String>,
    /// Capability requirements left after the static filter.
    needs: Vec<Capability>,
    grants: Vec<Capability>,
    effects: Vec<EffectKind>,
}

fn candidates_for(
    topo: &Topology,
    catalog: &VulnCatalog,
    attacker: &str,
) -> Vec<Candidate> {
    let node_ids: Vec<String> = {
        let mut ids: Vec<String> = topo.nodes.iter().map(|n| n.id.clone()).collect();
        ids.sort();
        ids
    };
    let service_ids: Vec<String> = {
        let mut set = BTreeSet::new();
        for node in &topo.nodes {
            for s in &node.services {
                set.insert(s.as_str().to_string());
            }
        }
        set.into_iter().collect()
    };

    let mut out = Vec::new();
    for entry in &catalog.entries {
        let vars = collect_vars(entry);
        let var_names: Vec<&String> = vars.keys().collect();
        let domains: Vec<&[String]> = vars
            .values()
            .map(|d| match d {
                VarDomain::Node => node_ids.as_slice(),
                VarDomain::Service => service_ids.as_slice(),
            })
            .collect();

        let mut assignment = vec![0usize; var_names.len()];
        loop {
            let mut bindings: BTreeMap<String, String> =
                BTreeMap::from([("attacker".to_string(), attacker.to_string())]);
            let mut ok = true;
            for (i, name) in var_names.iter().enumerate() {
                match domains[i].get(assignment[i]) {
                    Some(v) => {
                        bindings.insert((*name).clone(), v.clone());
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                if let Some(cand) = build_candidate(topo, entry, &bindings) {
                    out.push(cand);
                }
            }

            // Advance the mixed-radix assignment counter.
            let mut i = 0;
            loop {
                if i == assignment.len() {
                    break;
                }
                assignment[i] += 1;
                if assignment[i] < domains[i].len() {
                    break;
                }
                assignment[i] = 0;
                i += 1;
            }
            if i == assignment.len() {
                break;
            }
        }
    }
    out.sort_by(|a, b| (&a.cve, &a.bindings).cmp(&(&b.cve, &b.bindings)));
    out
}

fn build_candidate(
    topo: &Topology,
    entry: &VulnEntry,
    bindings: &BTreeMap<String, String>,
) -> Option<Candidate> {
    let empty = CapabilitySet::default();
    let mut needs = Vec::new();
    for atom in &entry.precondition {
        let atom = subst_atom(atom, bindings).ok()?;
        match atom {
            Atom::Has { capability } => needs.push(capability),
            // Topology-level atoms are static; filter infeasible
            // assignments up front.
            other => {
                if !eval_atom(&other, topo, &empty) {
                    return None;
                }
            }
        }
    }
    let grants = entry
        .grants
        .iter()
        .map(|c| subst_capability(c, bindings).ok())
        .collect::<Option<Vec<_>>>()?;
    let mut external = bindings.clone();
    external.remove("attacker");
    Some(Candidate {
        cve: entry.cve.clone(),
        bindings: external,
        needs,
        grants,
        effects: entry.effects.clone(),
    })
}

fn goal_reached(goal: Goal, caps: &CapabilitySet, last_step: &Candidate) -> bool {
    match goal {
        Goal::Capability(kind) => caps.has_kind(kind),
        Goal::Effect(kind) => last_step.effects.contains(&kind),
    }
}

/// Exhaustive search for minimal feasible step sequences reaching `goal`.
///
/// A sequence is feasible when each step's precondition holds given the
/// capabilities granted by its prefix; it is reported when the goal is
/// reached exactly at its last step and no proper subsequence also reaches
/// the goal. Results are deterministic: sorted by length, then by the
/// (cve, bindings) sequence.
pub fn enumerate_attack_paths(
    topo: &Topology,
    catalog: &VulnCatalog,
    attacker: &str,
    goal: Goal,
    depth: usize,
) -> Vec<AttackPath> {
    let candidates = candidates_for(topo, catalog, attacker);
    let mut found: Vec<Vec<usize>> = Vec::new();
    let mut used = vec![false; candidates.len()];
    let mut prefix = Vec::new();
    let caps = CapabilitySet::default();
    dfs(&candidates, goal, depth, &caps, &mut used, &mut prefix, &mut found);

    // Keep only minimal sequences: drop any with a proper subsequence that
    // is itself feasible and goal-reaching.
    let minimal: Vec<&Vec<usize>> = found
        .iter()
        .filter(|seq| !has_achieving_proper_subsequence(&candidates, goal, seq))
        .collect();

    let mut paths: Vec<AttackPath> = minimal
        .into_iter()
        .map(|seq| AttackPath {
            steps: seq
                .iter()
                .map(|&i| PathStep {
                    cve: candidates[i].cve.clone(),
                    bindings: candidates[i].bindings.clone(),
                })
                .collect(),
        })
        .collect();
    paths.sort_by(|a, b| {
        a.steps
            .len()
            .cmp(&b.steps.len())
            .then_with(|| a.steps.cmp(&b.steps))
    });
    paths.dedup();
    paths
}

fn dfs(
    candidates: &[Candidate],
    goal: Goal,
    depth: usize,
    caps: &CapabilitySet,
    used: &mut Vec<bool>,
    prefix: &mut Vec<usize>,
    found: &mut Vec<Vec<usize>>,
) {
    if prefix.len() >= depth {
        return;
    }
    for i in 0..candidates.len() {
        if used[i] {
            continue;
        }
        let cand = &candidates[i];
        if !cand.needs.iter().all(|c| caps.has(c)) {
            continue;
        }
        let mut next_caps = caps.clone();
        for g in &cand.grants {
            next_caps.grant(g.clone());
        }
        prefix.push(i);
        if goal_reached(goal, &next_caps, cand) {
            found.push(prefix.clone());
        } else {
            used[i] = true;
            dfs(candidates, goal, depth, &next_caps, used, prefix, found);
            used[i] = false;
        }
        prefix.pop();
    }
}

fn has_achieving_proper_subsequence(
    candidates: &[Candidate],
    goal: Goal,
    seq: &[usize],
) -> bool {
    let n = seq.len();
    if n <= 1 {
        return false;
    }
    // All non-empty proper subsequences, by bitmask.
    for mask in 1u32..(1 << n) - 1 {
        let sub: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| seq[i]).collect();
        if replay_achieves(candidates, goal, &sub) {
            return true;
        }
    }
    false
}

fn replay_achieves(candidates: &[Candidate], goal: Goal, seq: &[usize]) -> bool {
    let mut caps = CapabilitySet::default();
    for &i in seq {
        let cand = &candidates[i];
        if !cand.needs.iter().all(|c| caps.has(c)) {
            return false;
        }
        for g in &cand.grants {
            caps.grant(g.clone());
        }
        if goal_reached(goal, &caps, cand) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    const CATALOG: &str = r#"{
        "schema": 1,
        "entries": [
            {
                "cve": "CVE-A",
                "precondition": [
                    {"kind": "protocol-path", "from": "$attacker", "to": "$target", "protocol": "internet-ipv6"}
                ],
                "grants": [{"kind": "network-adjacent", "node": "$target"}],
                "effects": []
            },
            {
                "cve": "CVE-B",
                "precondition": [
                    {"kind": "has", "capability": {"kind": "network-adjacent", "node": "$target"}},
                    {"kind": "software", "node": "$target", "name": "mysql", "range": [{}]}
                ],
                "grants": [{"kind": "db-write", "node": "$target"}],
                "effects": ["db-tamper"]
            }
        ]
    }"#;

    fn topo() -> Topology {
        Topology::from_json_str(
            r#"{
            "schema": 1,
            "name": "attack-test",
            "nodes": [
                {"id": "atk-1", "kind": "attacker-device"},
                {"id": "central-1", "kind": "central-cloud",
                 "software": [{"name": "mysql", "version": "8.0"}],
                 "services": ["database"]}
            ],
            "links": [
                {"a": "atk-1", "b": "central-1", "protocol": "internet-ipv6", "latency_ms": 30}
            ]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn catalog_parses_and_rejects_duplicates() {
        let catalog = VulnCatalog::from_json_str(CATALOG).unwrap();
        assert_eq!(catalog.entries.len(), 2);

        assert!(VulnCatalog::from_json_str(r#"{"schema":1,"entries":[]}"#)
            .unwrap()
            .entries
            .is_empty());

        let dup = r#"{"schema":1,"entries":[
            {"cve":"CVE-A"},{"cve":"CVE-A"}
        ]}"#;
        assert!(matches!(
            VulnCatalog::from_json_str(dup),
            Err(CatalogError::DuplicateCve(_))
        ));
    }

    #[test]
    fn precondition_reports_first_failing_atom() {
        let topo = topo();
        let caps = CapabilitySet::default();
        let atoms = vec![
            Atom::ProtocolPath {
                from: "atk-1".into(),
                to: "central-1".into(),
                protocol: ProtocolKind::InternetIpv6,
            },
            Atom::Has {
                capability: Capability::DbWrite { node: "central-1".into() },
            },
        ];
        let failing = eval_precondition(&atoms, &topo, &caps).unwrap_err();
        assert_eq!(failing, atoms[1]);

        let mut caps = CapabilitySet::default();
        caps.grant(Capability::DbWrite { node: "central-1".into() });
        assert!(eval_precondition(&atoms, &topo, &caps).is_ok());
    }

    #[test]
    fn unknown_nodes_fail_atoms_without_errors() {
        let topo = topo();
        let caps = CapabilitySet::default();
        let atom = Atom::Software {
            node: "ghost".into(),
            name: "mysql".into(),
            range: VersionRange::any(),
        };
        assert!(!eval_atom(&atom, &topo, &caps));
    }

    #[test]
    fn instantiate_substitutes_and_validates_bindings() {
        let catalog = VulnCatalog::from_json_str(CATALOG).unwrap();
        let step = ScenarioStep {
            cve: "CVE-B".into(),
            at_ms: 100,
            bindings: BTreeMap::from([
                ("target".to_string(), serde_json::json!("central-1")),
                (
                    "tampers".to_string(),
                    serde_json::json!([{"table": "parking", "lot": "P1", "occupied": 0}]),
                ),
            ]),
        };
        let inst = instantiate_step(&catalog, "atk-1", &step).unwrap();
        assert_eq!(
            inst.grants,
            vec![Capability::DbWrite { node: "central-1".into() }]
        );
        assert_eq!(
            inst.effects,
            vec![WorldEffect::DbTamper {
                ops: vec![TamperOp::Parking { lot: "P1".into(), occupied: 0 }]
            }]
        );

        let missing = ScenarioStep {
            cve: "CVE-B".into(),
            at_ms: 100,
            bindings: BTreeMap::from([("target".to_string(), serde_json::json!("central-1"))]),
        };
        assert!(matches!(
            instantiate_step(&catalog, "atk-1", &missing),
            Err(InstantiateError::BadBinding(_))
        ));

        let unknown = ScenarioStep { cve: "CVE-Z".into(), at_ms: 1, bindings: BTreeMap::new() };
        assert!(matches!(
            instantiate_step(&catalog, "atk-1", &unknown),
            Err(InstantiateError::UnknownCve(_))
        ));
    }

    #[test]
    fn scenario_rejects_non_increasing_steps() {
        let bad = r#"{"schema":1,"id":"X","attacker":"atk-1","steps":[
            {"cve":"CVE-A","at_ms":100},
            {"cve":"CVE-B","at_ms":100}
        ]}"#;
        assert!(matches!(
            Scenario::from_json_str(bad),
            Err(ScenarioError::StepsNotIncreasing(1, 100))
        ));
    }

    #[test]
    fn search_finds_two_step_chain() {
        let topo = topo();
        let catalog = VulnCatalog::from_json_str(CATALOG).unwrap();
        let paths = enumerate_attack_paths(
            &topo,
            &catalog,
            "atk-1",
            Goal::Capability(CapabilityKind::DbWrite),
            4,
        );
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].cve_chain(), vec!["CVE-A", "CVE-B"]);
        assert_eq!(paths[0].steps[1].bindings["target"], "central-1");

        // Depth 1 cannot reach it.
        let paths = enumerate_attack_paths(
            &topo,
            &catalog,
            "atk-1",
            Goal::Capability(CapabilityKind::DbWrite),
            1,
        );
        assert!(paths.is_empty());

        // Effect goal as well.
        let paths = enumerate_attack_paths(
            &topo,
            &catalog,
            "atk-1",
            Goal::Effect(EffectKind::DbTamper),
            4,
        );
        assert_eq!(paths.len(), 1);
    }

    #[test]
    fn search_is_empty_without_the_entry_link() {
        let topo = Topology::from_json_str(
            r#"{
            "schema": 1,
            "name": "no-link",
            "nodes": [
                {"id": "atk-1", "kind": "attacker-device"},
                {"id": "central-1", "kind": "central-cloud",
                 "software": [{"name": "mysql", "version": "8.0"}]}
            ]
        }"#,
        )
        .unwrap();
        let catalog = VulnCatalog::from_json_str(CATALOG).unwrap();
        let paths = enumerate_attack_paths(
            &topo,
            &catalog,
            "atk-1",
            Goal::Capability(CapabilityKind::DbWrite),
            4,
        );
        assert!(paths.is_empty());
    }

    #[test]
    fn capability_json_shape() {
        let cap = Capability::SignalControl { rsu: "rsu-1".into() };
        let json = serde_json::to_string(&cap).unwrap();
        assert_eq!(json, r#"{"kind":"signal-control","rsu":"rsu-1"}"#);
        assert_eq!(cap.to_string(), "signal-control(rsu-1)");
    }
}
