//! Ground-truth-aware detectors that turn attack effects into alarms, and
//! the machine-readable run report.
//!
//! The monitors compare the served state against the engine's shadow copy,
//! which only legitimate operations update. That shadow is an explicit
//! modeling choice: it gives the detectors an oracle without claiming a
//! real defender could observe it.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::attack::StepVerdict;
use crate::services::{
    CentralDb, EmergencyRegistration, PreemptionRecord, RouteResult, ServedRoute, TickRecord,
    compute_route,
};
use crate::topology::{segment_key, RoadGraph, SignalPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlarmKind {
    IntegrityViolation,
    ConflictingGreen,
    PreemptionDenial,
    RogueEmergency,
    RouteSuboptimal,
}

impl AlarmKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlarmKind::IntegrityViolation => "integrity-violation",
            AlarmKind::ConflictingGreen => "conflicting-green",
            AlarmKind::PreemptionDenial => "preemption-denial",
            AlarmKind::RogueEmergency => "rogue-emergency",
            AlarmKind::RouteSuboptimal => "route-suboptimal",
        }
    }
}

impl fmt::Display for AlarmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A monitor verdict. `caused_by` links the alarm to the attack step whose
/// effect produced it, when the engine can attribute it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alarm {
    pub time_ms: u64,
    pub kind: AlarmKind,
    pub subject: String,
    pub details: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caused_by: Option<String>,
}

impl Alarm {
    pub fn new(time_ms: u64, kind: AlarmKind, subject: impl Into<String>, details: impl Into<String>) -> Self {
        Alarm { time_ms, kind, subject: subject.into(), details: details.into(), caused_by: None }
    }
}

/// One `IntegrityViolation` per record where the served database diverges
/// from the ground truth, keyed `table/id`. Registrations are owned by
/// [`check_emergency_auth`] and not diffed here.
pub fn check_db_integrity(stored: &CentralDb, truth: &CentralDb, time_ms: u64) -> Vec<Alarm> {
    let mut out = Vec::new();

    let lot_keys: Vec<&String> = stored.parking.keys().chain(truth.parking.keys()).collect();
    let mut seen = std::collections::BTreeSet::new();
    for lot in lot_keys {
        if !seen.insert(lot.clone()) {
            continue;
        }
        match (stored.parking.get(lot), truth.parking.get(lot)) {
            (Some(s), Some(t)) if s != t => {
                out.push(Alarm::new(
                    time_ms,
                    AlarmKind::IntegrityViolation,
                    format!("parking/{lot}"),
                    format!("stored occupied={} truth occupied={}", s.occupied, t.occupied),
                ));
            }
            (Some(_), Some(_)) => {}
            (s, t) => {
                out.push(Alarm::new(
                    time_ms,
                    AlarmKind::IntegrityViolation,
                    format!("parking/{lot}"),
                    format!("record present: stored={} truth={}", s.is_some(), t.is_some()),
                ));
            }
        }
    }

    let mut keys = std::collections::BTreeSet::new();
    keys.extend(stored.incidents.keys().cloned());
    keys.extend(truth.incidents.keys().cloned());
    for key in keys {
        let s = stored.incidents.get(&key).copied().unwrap_or(0.0);
        let t = truth.incidents.get(&key).copied().unwrap_or(0.0);
        if s != t {
            out.push(Alarm::new(
                time_ms,
                AlarmKind::IntegrityViolation,
                format!("incidents/{key}"),
                format!("stored penalty={s} truth penalty={t}"),
            ));
        }
    }

    let mut vehicles = std::collections::BTreeSet::new();
    vehicles.extend(stored.statuses.keys().cloned());
    vehicles.extend(truth.statuses.keys().cloned());
    for vehicle in vehicles {
        if stored.statuses.get(&vehicle) != truth.statuses.get(&vehicle) {
            out.push(Alarm::new(
                time_ms,
                AlarmKind::IntegrityViolation,
                format!("statuses/{vehicle}"),
                "stored status diverges from ground truth".to_string(),
            ));
        }
    }

    out
}

/// Conflicting phase pairs active in one tick record.
pub fn conflicting_pairs(plan: &SignalPlan, record: &TickRecord) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &a) in record.active.iter().enumerate() {
        for &b in record.active.iter().skip(i + 1) {
            if plan.conflicts(a, b) {
                out.push((a.min(b), a.max(b)));
            }
        }
    }
    out
}

/// Full-history signal safety check for one intersection:
/// `ConflictingGreen` at the onset of every window where conflicting phases
/// overlap, `PreemptionDenial` for every legitimate preemption that missed
/// `deadline_ticks`.
pub fn check_signal_safety(
    intersection: &str,
    plan: &SignalPlan,
    history: &[TickRecord],
    requests: &[PreemptionRecord],
    tick_ms: u64,
    deadline_ticks: u64,
) -> Vec<Alarm> {
    let mut out = Vec::new();
    let mut in_conflict = false;
    for record in history {
        let pairs = conflicting_pairs(plan, record);
        if !pairs.is_empty() && !in_conflict {
            let (a, b) = pairs[0];
            out.push(Alarm::new(
                record.tick * tick_ms,
                AlarmKind::ConflictingGreen,
                intersection.to_string(),
                format!(
                    "conflicting phases {} and {} simultaneously active",
                    plan.phases[a], plan.phases[b]
                ),
            ));
        }
        in_conflict = !pairs.is_empty();
    }

    let last_tick = history.last().map(|r| r.tick).unwrap_or(0);
    for req in requests.iter().filter(|r| r.legitimate) {
        let deadline = req.arrival_tick + deadline_ticks;
        let missed = match req.served_tick {
            Some(served) => served > deadline,
            None => last_tick > deadline,
        };
        if missed {
            out.push(Alarm::new(
                (deadline + 1) * tick_ms,
                AlarmKind::PreemptionDenial,
                intersection.to_string(),
                format!(
                    "preemption for {} (approach {}) not served within {} ticks",
                    req.device, req.approach, deadline_ticks
                ),
            ));
        }
    }

    out.sort_by_key(|a| a.time_ms);
    out
}

/// One `RogueEmergency` per registration that did not come from the
/// legitimate enrollment path.
pub fn check_emergency_auth(registrations: &[EmergencyRegistration]) -> Vec<Alarm> {
    registrations.iter().filter(|r| !r.legitimate).map(rogue_alarm).collect()
}

pub fn rogue_alarm(reg: &EmergencyRegistration) -> Alarm {
    Alarm::new(
        reg.registered_at_ms,
        AlarmKind::RogueEmergency,
        reg.device.clone(),
        format!("emergency registration {} bypassed enrollment", reg.credential),
    )
}

/// `RouteSuboptimal` when a served route costs more on the ground-truth
/// graph than the true optimum. Cost comparison only: equal-cost
/// alternatives are legitimate, and tampering that leaves the argmin path
/// unchanged raises nothing.
pub fn route_suboptimality(
    route: &ServedRoute,
    graph: &RoadGraph,
    truth_incidents: &BTreeMap<String, f64>,
) -> Option<Alarm> {
    let RouteResult::Path { nodes, .. } = &route.result else {
        return None;
    };
    let true_cost: f64 = nodes
        .windows(2)
        .map(|pair| {
            let base = graph
                .segments
                .iter()
                .find(|s| s.from == pair[0] && s.to == pair[1])
                .map(|s| s.cost)
                .unwrap_or(f64::INFINITY);
            base + truth_incidents.get(&segment_key(&pair[0], &pair[1])).copied().unwrap_or(0.0)
        })
        .sum();
    let optimum = match compute_route(graph, truth_incidents, &route.from, &route.to) {
        Ok(RouteResult::Path { cost, .. }) => cost,
        _ => return None,
    };
    if true_cost > optimum {
        Some(Alarm::new(
            route.time_ms,
            AlarmKind::RouteSuboptimal,
            format!("route/{}->{}", route.from, route.to),
            format!(
                "served {} with true cost {true_cost}, optimum is {optimum}",
                route.requester
            ),
        ))
    } else {
        None
    }
}

pub fn check_route_optimality(
    routes: &[ServedRoute],
    graph: &RoadGraph,
    truth_incidents: &BTreeMap<String, f64>,
) -> Vec<Alarm> {
    routes
        .iter()
        .filter_map(|r| route_suboptimality(r, graph, truth_incidents))
        .collect()
}

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub cve: String,
    pub at_ms: u64,
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_atom: Option<String>,
    pub linked_alarms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub id: String,
    pub attacker: String,
    pub steps: Vec<StepReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapabilityGrant {
    pub time_ms: u64,
    pub capability: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportCounts {
    pub events_processed: u64,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub frames_forwarded: u64,
    pub frames_deduplicated: u64,
    pub frames_inflight: u64,
    pub alarms_total: u64,
    pub alarms_by_kind: BTreeMap<String, u64>,
    pub steps_succeeded: u64,
    pub steps_failed: u64,
    pub steps_not_reached: u64,
}

/// Machine-readable run report with stable field order; serializing the
/// same run twice yields byte-identical documents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: u32,
    pub topology: String,
    pub seed: u64,
    pub horizon_ms: u64,
    pub final_clock_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioReport>,
    pub capability_timeline: Vec<CapabilityGrant>,
    pub alarms: Vec<Alarm>,
    pub counts: ReportCounts,
}

impl Report {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Short human-readable summary, one finding per line.
    pub fn human_summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "run: topology={} seed={} horizon={}ms events={}\n",
            self.topology, self.seed, self.horizon_ms, self.counts.events_processed
        ));
        if let Some(scenario) = &self.scenario {
            out.push_str(&format!("scenario {} (attacker {}):\n", scenario.id, scenario.attacker));
            for step in &scenario.steps {
                out.push_str(&format!(
                    "  step {} {} at {}ms: {}\n",
                    step.index + 1,
                    step.cve,
                    step.at_ms,
                    step.verdict
                ));
            }
        } else {
            out.push_str("scenario: none\n");
        }
        if self.alarms.is_empty() {
            out.push_str("alarms: none\n");
        } else {
            out.push_str(&format!("alarms: {}\n", self.alarms.len()));
            for (kind, n) in &self.counts.alarms_by_kind {
                out.push_str(&format!("  {kind}: {n}\n"));
            }
        }
        out
    }
}

/// Assemble the report document from run artifacts.
#[allow(clippy::too_many_arguments)]
pub fn emit_report(
    topology_name: &str,
    seed: u64,
    horizon_ms: u64,
    final_clock_ms: u64,
    scenario: Option<ScenarioReport>,
    capability_timeline: Vec<CapabilityGrant>,
    alarms: Vec<Alarm>,
    mut counts: ReportCounts,
) -> Report {
    counts.alarms_total = alarms.len() as u64;
    counts.alarms_by_kind = {
        let mut by_kind = BTreeMap::new();
        for alarm in &alarms {
            *by_kind.entry(alarm.kind.as_str().to_string()).or_insert(0) += 1;
        }
        by_kind
    };
    if let Some(scenario) = &scenario {
        counts.steps_succeeded =
            scenario.steps.iter().filter(|s| s.verdict == "succeeded").count() as u64;
        counts.steps_failed = scenario
            .steps
            .iter()
            .filter(|s| s.verdict.starts_with("precondition-failed"))
            .count() as u64;
        counts.steps_not_reached =
            scenario.steps.iter().filter(|s| s.verdict == "not-reached").count() as u64;
    }
    Report {
        schema: 1,
        topology: topology_name.to_string(),
        seed,
        horizon_ms,
        final_clock_ms,
        scenario,
        capability_timeline,
        alarms,
        counts,
    }
}

pub fn verdict_strings(verdict: &StepVerdict) -> (String, Option<String>) {
    match verdict {
        StepVerdict::Succeeded => ("succeeded".to_string(), None),
        StepVerdict::PreconditionFailed(atom) => {
            ("precondition-failed".to_string(), Some(atom.clone()))
        }
        StepVerdict::NotReached => ("not-reached".to_string(), None),
    }
}
