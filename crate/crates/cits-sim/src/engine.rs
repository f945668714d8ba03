//! Deterministic discrete-event core: virtual clock, totally ordered event
//! queue, frame delivery over links with per-link latency, timers, the
//! background service workload, attack-step execution, and the append-only
//! trace.
//!
//! One engine instance is strictly single-threaded. Multiple instances may
//! run in parallel; they share only the immutable topology and catalog.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;

use crate::attack::{
    eval_precondition, instantiate_step, AttackOutcome, Capability, CapabilitySet,
    InstantiateError, InstantiatedStep, Scenario, StepResult, StepVerdict, TamperOp, VulnCatalog,
    WorldEffect,
};
use crate::monitor::{self, Alarm, AlarmKind, CapabilityGrant, Report, ReportCounts, ScenarioReport, StepReport};
use crate::pdu::{
    decode_frame_bytes, hybrid_multiplex, DispatchPolicy, EncodeError, Frame, IdTable,
    MultiplexError, Pdu,
};
use crate::services::{
    msg, msg_type, ServedRoute, ServiceState, SignalController, VehicleStatus, WritePath,
};
use crate::topology::{NodeKind, ProtocolKind, ServiceId, Topology};

/// Run parameters. All randomness flows from `seed`; the rest are fixed
/// cadences so traces are reproducible.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub horizon_ms: u64,
    /// Signal-controller (and monitor) cadence.
    pub tick_ms: u64,
    /// SU01 vehicle status cadence.
    pub status_period_ms: u64,
    /// Uniform jitter added to each status update, drawn from the seeded
    /// generator. Zero disables jitter.
    pub status_jitter_ms: u64,
    /// PM01 provider occupancy cadence.
    pub occupancy_period_ms: u64,
    /// TI03 route request cadence per vehicle.
    pub route_period_ms: u64,
    /// PM01 parking query cadence per vehicle.
    pub parking_query_period_ms: u64,
    /// PS03 emergency workload cadence for enrolled devices; `None`
    /// disables the emergency workload.
    pub emergency_period_ms: Option<u64>,
    /// SU01 staleness bound.
    pub staleness_ms: u64,
    /// Ticks past dwell a preemption may take before it counts as denied.
    pub preemption_latency_ticks: u32,
    /// Mobile Cloud instances per service package (default 2 each).
    pub instances: BTreeMap<ServiceId, u32>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            horizon_ms: 60_000,
            tick_ms: 1_000,
            status_period_ms: 1_000,
            status_jitter_ms: 0,
            occupancy_period_ms: 2_000,
            route_period_ms: 5_000,
            parking_query_period_ms: 5_000,
            emergency_period_ms: None,
            staleness_ms: 5_000,
            preemption_latency_ticks: 2,
            instances: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: horizon_ms >= tick_ms >= 1 required")]
    BadConfig,
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("scenario references unknown cve {0:?}")]
    UnknownCve(String),
    #[error("scenario binding error: {0}")]
    Binding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cannot schedule at {at} ms: clock already at {now} ms")]
pub struct PastTime {
    pub at: u64,
    pub now: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SendError {
    #[error("no route from {from:?} to {to:?}")]
    NoRoute { from: String, to: String },
    #[error("no interface available toward next hop")]
    NoInterfaceAvailable,
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Stable identifier of a scheduled event (its queue sequence number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub enum TimerTag {
    /// Controller steps, monitors, staleness sweep.
    EngineTick,
    /// Fires at `base_ms + jitter`; rescheduling anchors to the period
    /// grid so jitter never accumulates.
    StatusUpdate { vehicle: String, base_ms: u64 },
    OccupancyUpdate,
    RouteRequest { vehicle: String },
    ParkingQuery { vehicle: String },
    EmergencyCycle { device: String },
}

#[derive(Debug, Clone)]
pub enum EventKind {
    FrameDelivery { frame: Frame, from: String, to: String },
    Timer { tag: TimerTag },
    AttackStepDue { step: usize },
}

#[derive(Debug)]
struct QueueEntry {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for QueueEntry {}
impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Send,
    Recv,
    Internal,
}

/// One line of the append-only run log. Times never decrease.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub time_ms: u64,
    pub node: String,
    pub dir: Direction,
    /// Message type (`0x0301`) or timer/step tag.
    pub what: String,
    pub summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alarm: Option<String>,
}

/// Frame accounting for one run; `frames_sent` always equals
/// `frames_delivered + frames_inflight`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub events_processed: u64,
    pub final_clock_ms: u64,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub frames_consumed: u64,
    pub frames_forwarded: u64,
    pub frames_deduplicated: u64,
    pub frames_inflight: u64,
}

struct ScenarioExec {
    id: String,
    attacker: String,
    steps: Vec<InstantiatedStep>,
    verdicts: Vec<Option<StepVerdict>>,
}

/// One simulation run over an immutable topology.
pub struct Sim {
    topo: Arc<Topology>,
    cfg: SimConfig,
    clock: u64,
    next_seq: u64,
    next_pdu_seq: u32,
    queue: BinaryHeap<Reverse<QueueEntry>>,
    rng: ChaCha8Rng,
    id_table: IdTable,
    /// Hop distance between every connected node pair.
    hop_dist: BTreeMap<(String, String), u32>,
    services: ServiceState,
    controllers: BTreeMap<String, SignalController>,
    caps: CapabilitySet,
    cap_timeline: Vec<(u64, Capability)>,
    scenario: Option<ScenarioExec>,
    trace: Vec<TraceRecord>,
    alarms: Vec<Alarm>,
    served_routes: Vec<ServedRoute>,
    device_credentials: BTreeMap<String, String>,
    dedup_seen: BTreeMap<String, BTreeSet<(String, u16, u32)>>,
    /// Divergent db subjects already alarmed (cleared when they heal).
    integrity_alarmed: BTreeSet<String>,
    /// Intersections currently inside a conflicting-green window.
    conflict_active: BTreeSet<String>,
    denial_alarmed: BTreeSet<u64>,
    stale_flagged: BTreeSet<String>,
    /// Tamper provenance: db subject -> cve of the causing step.
    tamper_provenance: BTreeMap<String, String>,
    incidents_tampered_by: Option<String>,
    events_processed: u64,
    frames_sent: u64,
    frames_delivered: u64,
    frames_consumed: u64,
    frames_forwarded: u64,
    frames_deduplicated: u64,
}

impl Sim {
    pub fn new(topo: Arc<Topology>, cfg: SimConfig) -> Result<Sim, SimError> {
        if cfg.tick_ms == 0 || cfg.horizon_ms < cfg.tick_ms {
            return Err(SimError::BadConfig);
        }
        let id_table = IdTable::from_topology(&topo);
        let hop_dist = hop_distances(&topo);
        let services = ServiceState::new(&topo, &cfg.instances);
        let controllers = topo
            .road_graph
            .signals
            .iter()
            .map(|(ix, plan)| (ix.clone(), SignalController::new(ix.clone(), plan.clone())))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sim = Sim {
            topo,
            clock: 0,
            next_seq: 0,
            next_pdu_seq: 0,
            queue: BinaryHeap::new(),
            rng,
            id_table,
            hop_dist,
            services,
            controllers,
            caps: CapabilitySet::default(),
            cap_timeline: Vec::new(),
            scenario: None,
            trace: Vec::new(),
            alarms: Vec::new(),
            served_routes: Vec::new(),
            device_credentials: BTreeMap::new(),
            dedup_seen: BTreeMap::new(),
            integrity_alarmed: BTreeSet::new(),
            conflict_active: BTreeSet::new(),
            denial_alarmed: BTreeSet::new(),
            stale_flagged: BTreeSet::new(),
            tamper_provenance: BTreeMap::new(),
            incidents_tampered_by: None,
            events_processed: 0,
            frames_sent: 0,
            frames_delivered: 0,
            frames_consumed: 0,
            frames_forwarded: 0,
            frames_deduplicated: 0,
            cfg,
        };
        sim.schedule_workload();
        Ok(sim)
    }

    /// Resolve a scenario against the catalog and schedule its steps.
    pub fn attach_scenario(
        &mut self,
        catalog: &VulnCatalog,
        scenario: &Scenario,
    ) -> Result<(), SimError> {
        if self.topo.node(&scenario.attacker).is_none() {
            return Err(SimError::UnknownNode(scenario.attacker.clone()));
        }
        let mut steps = Vec::new();
        for step in &scenario.steps {
            let inst = instantiate_step(catalog, &scenario.attacker, step).map_err(|e| match e {
                InstantiateError::UnknownCve(cve) => SimError::UnknownCve(cve),
                InstantiateError::UnknownNode(n) => SimError::UnknownNode(n),
                InstantiateError::BadBinding(b) => SimError::Binding(b),
            })?;
            for atom in &inst.atoms {
                for node in atom_node_refs(atom) {
                    if self.topo.node(node).is_none() {
                        return Err(SimError::UnknownNode(node.to_string()));
                    }
                }
            }
            steps.push(inst);
        }
        let verdicts = vec![None; steps.len()];
        for (i, step) in steps.iter().enumerate() {
            self.push_event(step.at_ms, EventKind::AttackStepDue { step: i });
        }
        self.scenario = Some(ScenarioExec {
            id: scenario.id.clone(),
            attacker: scenario.attacker.clone(),
            steps,
            verdicts,
        });
        Ok(())
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn services(&self) -> &ServiceState {
        &self.services
    }

    pub fn capabilities(&self) -> &CapabilitySet {
        &self.caps
    }

    pub fn served_routes(&self) -> &[ServedRoute] {
        &self.served_routes
    }

    pub fn controllers(&self) -> &BTreeMap<String, SignalController> {
        &self.controllers
    }

    fn tick_index(&self) -> u64 {
        self.clock / self.cfg.tick_ms
    }

    fn push_event(&mut self, at: u64, kind: EventKind) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(QueueEntry { time: at, seq, kind }));
        EventId(seq)
    }

    /// Enqueue an event at an absolute time, which must not be in the past.
    pub fn schedule(&mut self, at: u64, kind: EventKind) -> Result<EventId, PastTime> {
        if at < self.clock {
            return Err(PastTime { at, now: self.clock });
        }
        Ok(self.push_event(at, kind))
    }

    fn record(
        &mut self,
        node: &str,
        dir: Direction,
        what: impl Into<String>,
        summary: impl Into<String>,
    ) {
        self.trace.push(TraceRecord {
            time_ms: self.clock,
            node: node.to_string(),
            dir,
            what: what.into(),
            summary: summary.into(),
            alarm: None,
        });
    }

    fn raise(&mut self, mut alarm: Alarm, caused_by: Option<String>) {
        if alarm.caused_by.is_none() {
            alarm.caused_by = caused_by;
        }
        self.trace.push(TraceRecord {
            time_ms: self.clock,
            node: alarm.subject.clone(),
            dir: Direction::Internal,
            what: "alarm".to_string(),
            summary: alarm.details.clone(),
            alarm: Some(format!("{}:{}", alarm.kind, alarm.subject)),
        });
        self.alarms.push(alarm);
    }

    fn next_sequence(&mut self) -> u32 {
        let seq = self.next_pdu_seq;
        self.next_pdu_seq = self.next_pdu_seq.wrapping_add(1);
        seq
    }

    fn next_hop(&self, from: &str, to: &str) -> Option<String> {
        let d = *self.hop_dist.get(&(from.to_string(), to.to_string()))?;
        if d == 0 {
            // Self-addressed: no hop exists.
            return None;
        }
        let mut peers: Vec<String> = self
            .topo
            .links
            .iter()
            .filter_map(|l| l.peer_of(from).map(str::to_string))
            .collect();
        peers.sort();
        peers.dedup();
        peers
            .into_iter()
            .find(|p| self.hop_dist.get(&(p.clone(), to.to_string())).copied() == Some(d - 1))
    }

    /// Schedule delivery of one PDU toward `to`, multiplexed over the
    /// interfaces available on the outgoing link set of the first hop.
    pub fn send(
        &mut self,
        from: &str,
        to: &str,
        pdu: Pdu,
        policy: &DispatchPolicy,
    ) -> Result<Vec<EventId>, SendError> {
        let next = self
            .next_hop(from, to)
            .ok_or_else(|| SendError::NoRoute { from: from.to_string(), to: to.to_string() })?;
        let links = self.topo.links_between(from, &next);
        let available: BTreeSet<ProtocolKind> = links.iter().map(|l| l.protocol).collect();
        let latency: BTreeMap<ProtocolKind, u64> =
            links.iter().map(|l| (l.protocol, l.latency_ms)).collect();
        let frames = hybrid_multiplex(&pdu, &available, policy, &self.id_table).map_err(
            |e| match e {
                MultiplexError::NoInterfaceAvailable => SendError::NoInterfaceAvailable,
                MultiplexError::Encode(e) => SendError::Encode(e),
            },
        )?;
        let mut ids = Vec::with_capacity(frames.len());
        for frame in frames {
            let lat = latency[&frame.interface];
            let what = format!("0x{:04x}", pdu.msg_type);
            let summary = format!(
                "{} -> {} via {} ({}), latency {lat} ms",
                msg_type::name(pdu.msg_type),
                to,
                next,
                frame.interface
            );
            self.record(from, Direction::Send, what, summary);
            self.frames_sent += 1;
            let at = self.clock + lat;
            ids.push(self.push_event(
                at,
                EventKind::FrameDelivery { frame, from: from.to_string(), to: next.clone() },
            ));
        }
        Ok(ids)
    }

    fn send_message<T: Serialize>(
        &mut self,
        from: &str,
        to: &str,
        code: u16,
        body: &T,
        policy: &DispatchPolicy,
    ) -> Result<Vec<EventId>, SendError> {
        let payload = serde_json::to_vec(body).expect("message serializes");
        let pdu = Pdu::new(code, from, to, self.next_sequence(), payload);
        self.send(from, to, pdu, policy)
    }

    /// Process all events with time <= `until` (clamped to the horizon) in
    /// (time, seq) order, then advance the clock to `until`. The clock
    /// never moves backwards.
    pub fn run(&mut self, until: u64) -> RunSummary {
        let until = until.min(self.cfg.horizon_ms);
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.time > until {
                break;
            }
            let Reverse(entry) = self.queue.pop().expect("peeked");
            debug_assert!(entry.time >= self.clock, "clock must be monotone");
            self.clock = entry.time;
            self.events_processed += 1;
            self.process(entry.kind);
        }
        self.clock = self.clock.max(until);
        self.summary()
    }

    pub fn run_to_horizon(&mut self) -> RunSummary {
        self.run(self.cfg.horizon_ms)
    }

    pub fn summary(&self) -> RunSummary {
        let inflight = self
            .queue
            .iter()
            .filter(|Reverse(e)| matches!(e.kind, EventKind::FrameDelivery { .. }))
            .count() as u64;
        RunSummary {
            events_processed: self.events_processed,
            final_clock_ms: self.clock,
            frames_sent: self.frames_sent,
            frames_delivered: self.frames_delivered,
            frames_consumed: self.frames_consumed,
            frames_forwarded: self.frames_forwarded,
            frames_deduplicated: self.frames_deduplicated,
            frames_inflight: inflight,
        }
    }

    fn process(&mut self, kind: EventKind) {
        match kind {
            EventKind::FrameDelivery { frame, from, to } => self.deliver(frame, &from, &to),
            EventKind::Timer { tag } => self.handle_timer(tag),
            EventKind::AttackStepDue { step } => self.execute_attack_step(step),
        }
    }

    fn deliver(&mut self, frame: Frame, _from: &str, to: &str) {
        self.frames_delivered += 1;
        let (interface, pdu) = match decode_frame_bytes(&frame.bytes, &self.id_table) {
            Ok(decoded) => decoded,
            Err(e) => {
                self.record(to, Direction::Internal, "decode-error", e.to_string());
                return;
            }
        };
        let key = (pdu.source.clone(), pdu.msg_type, pdu.sequence);
        if !self.dedup_seen.entry(to.to_string()).or_default().insert(key) {
            self.frames_deduplicated += 1;
            self.record(
                to,
                Direction::Recv,
                format!("0x{:04x}", pdu.msg_type),
                format!("duplicate of seq {} from {} dropped", pdu.sequence, pdu.source),
            );
            return;
        }
        if pdu.dest != to {
            self.frames_forwarded += 1;
            self.record(
                to,
                Direction::Internal,
                format!("0x{:04x}", pdu.msg_type),
                format!("forwarding {} -> {}", pdu.source, pdu.dest),
            );
            let dest = pdu.dest.clone();
            if let Err(e) = self.send(to, &dest, pdu, &DispatchPolicy::All) {
                self.record(to, Direction::Internal, "forward-failed", e.to_string());
            }
            return;
        }
        self.frames_consumed += 1;
        self.record(
            to,
            Direction::Recv,
            format!("0x{:04x}", pdu.msg_type),
            format!("{} from {} over {}", msg_type::name(pdu.msg_type), pdu.source, interface),
        );
        self.handle_message(to, pdu);
    }

    fn dispatch_trace(&mut self, node: &str, service: ServiceId) {
        match self.services.mobile_cloud_dispatch(service) {
            Ok(instance) => self.record(
                node,
                Direction::Internal,
                "dispatch",
                format!("{service}[{instance}] handles request"),
            ),
            Err(e) => self.record(node, Direction::Internal, "dispatch", e.to_string()),
        }
    }

    fn handle_message(&mut self, node: &str, pdu: Pdu) {
        match pdu.msg_type {
            msg_type::PM01_OCCUPANCY_UPDATE => {
                let Ok(body) = serde_json::from_slice::<msg::OccupancyUpdate>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "pm01 update");
                };
                self.dispatch_trace(node, ServiceId::Pm01);
                let result = self.services.pm01_ingest_occupancy(
                    &self.topo,
                    &self.caps,
                    &pdu.source,
                    &body.lot,
                    body.occupied,
                );
                let summary = match result {
                    Ok(WritePath::Legitimate) => {
                        format!("occupancy of {} set to {}", body.lot, body.occupied)
                    }
                    Ok(WritePath::Tampered) => {
                        format!("occupancy of {} overwritten via stolen db access", body.lot)
                    }
                    Err(e) => format!("denied: {e}"),
                };
                self.record(node, Direction::Internal, "pm01-ingest", summary);
            }
            msg_type::PM01_PARKING_QUERY => {
                let Ok(body) = serde_json::from_slice::<msg::ParkingQuery>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "pm01 query");
                };
                self.dispatch_trace(node, ServiceId::Pm01);
                match self.services.pm01_query(&body.lot) {
                    Ok(info) => {
                        let _ = self.send_message(
                            node,
                            &pdu.source,
                            msg_type::PM01_PARKING_INFO,
                            &info,
                            &DispatchPolicy::All,
                        );
                    }
                    Err(e) => self.record(node, Direction::Internal, "pm01-query", e.to_string()),
                }
            }
            msg_type::PM01_PARKING_INFO => {
                let Ok(body) = serde_json::from_slice::<msg::ParkingInfo>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "pm01 info");
                };
                self.record(
                    node,
                    Direction::Internal,
                    "pm01-info",
                    format!("lot {}: {} spaces at {}", body.lot, body.available, body.price),
                );
            }
            msg_type::PS03_REGISTER => {
                let Ok(body) = serde_json::from_slice::<msg::RegisterEmergency>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "ps03 register");
                };
                self.dispatch_trace(node, ServiceId::Ps03);
                let result = self.services.ps03_register_emergency(
                    &self.topo,
                    &self.caps,
                    &body.device,
                    &body.proof,
                    self.clock,
                );
                match result {
                    Ok(reg) => {
                        self.note_registration(&reg, None);
                        let ack = msg::RegisterAck {
                            device: reg.device.clone(),
                            credential: reg.credential.clone(),
                        };
                        let _ = self.send_message(
                            node,
                            &reg.device,
                            msg_type::PS03_REGISTER_ACK,
                            &ack,
                            &DispatchPolicy::All,
                        );
                    }
                    Err(e) => self.record(node, Direction::Internal, "ps03-register", e.to_string()),
                }
            }
            msg_type::PS03_REGISTER_ACK => {
                let Ok(body) = serde_json::from_slice::<msg::RegisterAck>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "ps03 ack");
                };
                self.device_credentials.insert(body.device.clone(), body.credential.clone());
                self.record(node, Direction::Internal, "ps03-enrolled", "credential stored");
            }
            msg_type::PS03_PREEMPTION_REQUEST => {
                let Ok(body) = serde_json::from_slice::<msg::PreemptionRequest>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "ps03 request");
                };
                self.dispatch_trace(node, ServiceId::Ps03);
                let ticket = self.services.ps03_request_preemption(
                    &self.topo,
                    &body.credential,
                    &body.intersection,
                    &body.approach,
                );
                match ticket {
                    Ok(ticket) => {
                        let command = msg::SignalCommand::Preempt {
                            intersection: ticket.intersection.clone(),
                            approach: ticket.approach.clone(),
                            legitimate: ticket.legitimate,
                        };
                        let sent = self.send_message(
                            node,
                            &ticket.rsu,
                            msg_type::PS03_SIGNAL_COMMAND,
                            &CommandEnvelope { device: ticket.device.clone(), command },
                            &DispatchPolicy::Preferred(vec![ProtocolKind::Snmpv3]),
                        );
                        if let Err(e) = sent {
                            self.record(node, Direction::Internal, "ps03-request", e.to_string());
                        }
                        let decision = msg::PreemptionDecision {
                            intersection: body.intersection.clone(),
                            approach: body.approach.clone(),
                            granted: true,
                        };
                        let _ = self.send_message(
                            node,
                            &pdu.source,
                            msg_type::PS03_PREEMPTION_DECISION,
                            &decision,
                            &DispatchPolicy::All,
                        );
                    }
                    Err(e) => self.record(node, Direction::Internal, "ps03-request", e.to_string()),
                }
            }
            msg_type::PS03_SIGNAL_COMMAND => {
                let Ok(envelope) = serde_json::from_slice::<CommandEnvelope>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "signal command");
                };
                self.handle_signal_command(node, envelope);
            }
            msg_type::PS03_PREEMPTION_DECISION => {
                self.record(node, Direction::Internal, "ps03-decision", "preemption response received");
            }
            msg_type::SU01_STATUS_UPDATE => {
                let Ok(body) = serde_json::from_slice::<msg::StatusUpdate>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "su01 status");
                };
                self.dispatch_trace(node, ServiceId::Su01);
                let status = VehicleStatus {
                    vehicle: body.vehicle.clone(),
                    position: body.position.clone(),
                    speed: body.speed,
                    last_update: self.clock,
                };
                let result = self.services.su01_ingest_status(&self.topo, &pdu.source, status);
                let summary = match result {
                    Ok(()) => format!("status of {} at {} stored", body.vehicle, body.position),
                    Err(e) => format!("denied: {e}"),
                };
                self.record(node, Direction::Internal, "su01-ingest", summary);
                self.stale_flagged.remove(&body.vehicle);
            }
            msg_type::TI03_INCIDENT_UPDATE => {
                let Ok(body) = serde_json::from_slice::<msg::IncidentUpdate>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "ti03 incident");
                };
                self.dispatch_trace(node, ServiceId::Ti03);
                let result = self.services.ti03_ingest_incident(
                    &self.topo,
                    &self.caps,
                    &pdu.source,
                    &body.from,
                    &body.to,
                    body.penalty,
                );
                let summary = match result {
                    Ok(_) => format!("incident penalty {} on {}->{}", body.penalty, body.from, body.to),
                    Err(e) => format!("denied: {e}"),
                };
                self.record(node, Direction::Internal, "ti03-ingest", summary);
            }
            msg_type::TI03_ROUTE_REQUEST => {
                let Ok(body) = serde_json::from_slice::<msg::RouteRequest>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "ti03 request");
                };
                self.dispatch_trace(node, ServiceId::Ti03);
                match self.services.ti03_compute_route(&self.topo.road_graph, &body.from, &body.to)
                {
                    Ok(result) => {
                        let served = ServedRoute {
                            time_ms: self.clock,
                            requester: pdu.source.clone(),
                            from: body.from.clone(),
                            to: body.to.clone(),
                            result: result.clone(),
                        };
                        if let Some(alarm) = monitor::route_suboptimality(
                            &served,
                            &self.topo.road_graph,
                            &self.services.shadow.incidents,
                        ) {
                            let cause = self.incidents_tampered_by.clone();
                            self.raise(alarm, cause);
                        }
                        self.served_routes.push(served);
                        let _ = self.send_message(
                            node,
                            &pdu.source,
                            msg_type::TI03_ROUTE_RESPONSE,
                            &msg::RouteResponse { result },
                            &DispatchPolicy::All,
                        );
                    }
                    Err(e) => self.record(node, Direction::Internal, "ti03-route", e.to_string()),
                }
            }
            msg_type::TI03_ROUTE_RESPONSE => {
                let Ok(body) = serde_json::from_slice::<msg::RouteResponse>(&pdu.payload) else {
                    return self.record(node, Direction::Internal, "bad-payload", "ti03 response");
                };
                self.record(node, Direction::Internal, "ti03-route", body.result.to_string());
            }
            other => {
                self.record(node, Direction::Internal, "unknown-msg", format!("0x{other:04x}"));
            }
        }
    }

    fn handle_signal_command(&mut self, node: &str, envelope: CommandEnvelope) {
        match envelope.command {
            msg::SignalCommand::Preempt { intersection, approach, legitimate } => {
                let arrival_tick = self.tick_index();
                let request_id = self.next_seq;
                let Some(ctl) = self.controllers.get_mut(&intersection) else {
                    return self.record(node, Direction::Internal, "signal-command", "unknown intersection");
                };
                if ctl.plan.rsu != node {
                    return self.record(
                        node,
                        Direction::Internal,
                        "signal-command",
                        format!("intersection {intersection} is not controlled here"),
                    );
                }
                let accepted = ctl.request_preemption(
                    request_id,
                    &envelope.device,
                    &approach,
                    legitimate,
                    arrival_tick,
                );
                let summary = if accepted {
                    format!("preemption queued for approach {approach} at {intersection}")
                } else {
                    format!("no phase serves approach {approach} at {intersection}")
                };
                self.record(node, Direction::Internal, "signal-command", summary);
            }
            msg::SignalCommand::Override { intersection, command, duration_ticks, caused_by } => {
                let authorized =
                    self.caps.has(&Capability::SignalControl { rsu: node.to_string() });
                if !authorized {
                    return self.record(
                        node,
                        Direction::Internal,
                        "signal-command",
                        "override rejected: sender lacks signal control",
                    );
                }
                let tick = self.tick_index();
                let Some(ctl) = self.controllers.get_mut(&intersection) else {
                    return self.record(node, Direction::Internal, "signal-command", "unknown intersection");
                };
                ctl.apply_override(command.clone(), duration_ticks, tick, caused_by.clone());
                self.record(
                    node,
                    Direction::Internal,
                    "signal-command",
                    format!("override {command:?} active for {duration_ticks} ticks at {intersection}"),
                );
            }
        }
    }

    // -----------------------------------------------------------------
    // Workload timers
    // -----------------------------------------------------------------

    fn schedule_workload(&mut self) {
        // Nothing is tick-driven without signals or a central cloud; an
        // empty model keeps an empty queue.
        if !self.controllers.is_empty() || !self.services.host.is_empty() {
            self.push_event(self.cfg.tick_ms, EventKind::Timer { tag: TimerTag::EngineTick });
        }

        let vehicles: Vec<String> =
            self.topo.nodes_of_kind(NodeKind::Vehicle).map(|n| n.id.clone()).collect();
        for vehicle in &vehicles {
            let base_ms = self.cfg.status_period_ms;
            let at = base_ms + self.status_jitter();
            self.push_event(
                at,
                EventKind::Timer { tag: TimerTag::StatusUpdate { vehicle: vehicle.clone(), base_ms } },
            );
        }
        if self.topo.road_graph.intersections.len() >= 2 {
            for vehicle in &vehicles {
                self.push_event(
                    self.cfg.route_period_ms,
                    EventKind::Timer { tag: TimerTag::RouteRequest { vehicle: vehicle.clone() } },
                );
            }
        }
        if !self.topo.parking_lots.is_empty() {
            for vehicle in &vehicles {
                self.push_event(
                    self.cfg.parking_query_period_ms,
                    EventKind::Timer { tag: TimerTag::ParkingQuery { vehicle: vehicle.clone() } },
                );
            }
            if self.topo.nodes_of_kind(NodeKind::ExternalProvider).next().is_some() {
                self.push_event(
                    self.cfg.occupancy_period_ms,
                    EventKind::Timer { tag: TimerTag::OccupancyUpdate },
                );
            }
        }
        if let Some(period) = self.cfg.emergency_period_ms {
            let enrolled = self.topo.enrolled_emergency.clone();
            for device in enrolled {
                self.push_event(
                    period,
                    EventKind::Timer { tag: TimerTag::EmergencyCycle { device } },
                );
            }
        }
    }

    fn status_jitter(&mut self) -> u64 {
        if self.cfg.status_jitter_ms > 0 {
            self.rng.next_u64() % (self.cfg.status_jitter_ms + 1)
        } else {
            0
        }
    }

    fn reschedule(&mut self, period: u64, tag: TimerTag) {
        let next = self.clock + period;
        if next <= self.cfg.horizon_ms {
            self.push_event(next, EventKind::Timer { tag });
        }
    }

    fn handle_timer(&mut self, tag: TimerTag) {
        match tag {
            TimerTag::EngineTick => self.engine_tick(),
            TimerTag::StatusUpdate { vehicle, base_ms } => {
                self.vehicle_status_update(&vehicle);
                let next_base = base_ms + self.cfg.status_period_ms;
                if next_base <= self.cfg.horizon_ms {
                    let at = next_base + self.status_jitter();
                    self.push_event(
                        at,
                        EventKind::Timer {
                            tag: TimerTag::StatusUpdate { vehicle, base_ms: next_base },
                        },
                    );
                }
            }
            TimerTag::OccupancyUpdate => {
                self.provider_occupancy_update();
                self.reschedule(self.cfg.occupancy_period_ms, TimerTag::OccupancyUpdate);
            }
            TimerTag::RouteRequest { vehicle } => {
                self.vehicle_route_request(&vehicle);
                self.reschedule(self.cfg.route_period_ms, TimerTag::RouteRequest { vehicle });
            }
            TimerTag::ParkingQuery { vehicle } => {
                self.vehicle_parking_query(&vehicle);
                self.reschedule(
                    self.cfg.parking_query_period_ms,
                    TimerTag::ParkingQuery { vehicle },
                );
            }
            TimerTag::EmergencyCycle { device } => {
                self.emergency_cycle(&device);
                if let Some(period) = self.cfg.emergency_period_ms {
                    self.reschedule(period, TimerTag::EmergencyCycle { device });
                }
            }
        }
    }

    fn engine_tick(&mut self) {
        let tick = self.tick_index();
        let intersections: Vec<String> = self.controllers.keys().cloned().collect();
        for intersection in intersections {
            let (outcome, conflict_pairs, override_cause, denials) = {
                let deadline = u64::from(self.cfg.preemption_latency_ticks);
                let ctl = self.controllers.get_mut(&intersection).expect("known intersection");
                let outcome = ctl.step(tick);
                let last = ctl.history.last().expect("stepped").clone();
                let pairs = monitor::conflicting_pairs(&ctl.plan, &last);
                let override_cause = ctl
                    .override_state
                    .as_ref()
                    .and_then(|o| o.caused_by.clone())
                    .or_else(|| ctl.last_override_cause.clone());
                let denials: Vec<(u64, String, String)> = ctl
                    .requests
                    .iter()
                    .filter(|r| {
                        r.legitimate
                            && r.served_tick.is_none()
                            && tick > r.arrival_tick + u64::from(ctl.plan.dwell_ticks) + deadline
                    })
                    .map(|r| (r.id, r.device.clone(), r.approach.clone()))
                    .collect();
                (outcome, pairs, override_cause, denials)
            };

            if outcome.served_request.is_some() || outcome.overridden {
                let rsu = self.controllers[&intersection].plan.rsu.clone();
                self.record(
                    &rsu,
                    Direction::Internal,
                    "tick",
                    format!("{intersection}: active {}", outcome.active.join("+")),
                );
            }

            if !conflict_pairs.is_empty() {
                if !self.conflict_active.contains(&intersection) {
                    self.conflict_active.insert(intersection.clone());
                    let plan = &self.controllers[&intersection].plan;
                    let (a, b) = conflict_pairs[0];
                    let alarm = Alarm::new(
                        self.clock,
                        AlarmKind::ConflictingGreen,
                        intersection.clone(),
                        format!(
                            "conflicting phases {} and {} simultaneously active",
                            plan.phases[a], plan.phases[b]
                        ),
                    );
                    self.raise(alarm, override_cause.clone());
                }
            } else {
                self.conflict_active.remove(&intersection);
            }

            for (id, device, approach) in denials {
                if self.denial_alarmed.insert(id) {
                    let bound = self.controllers[&intersection].plan.dwell_ticks
                        + self.cfg.preemption_latency_ticks;
                    let alarm = Alarm::new(
                        self.clock,
                        AlarmKind::PreemptionDenial,
                        intersection.clone(),
                        format!(
                            "preemption for {device} (approach {approach}) not served within {bound} ticks"
                        ),
                    );
                    self.raise(alarm, override_cause.clone());
                }
            }
        }

        // Database integrity: alarm each divergence once, rearm on heal.
        let divergences =
            monitor::check_db_integrity(&self.services.served, &self.services.shadow, self.clock);
        let current: BTreeSet<String> = divergences.iter().map(|a| a.subject.clone()).collect();
        self.integrity_alarmed.retain(|s| current.contains(s));
        for alarm in divergences {
            if self.integrity_alarmed.insert(alarm.subject.clone()) {
                let cause = self.tamper_provenance.get(&alarm.subject).cloned();
                self.raise(alarm, cause);
            }
        }

        // SU01 staleness sweep.
        let stale = self.services.su01_stale_vehicles(self.clock, self.cfg.staleness_ms);
        for vehicle in stale {
            if self.stale_flagged.insert(vehicle.clone()) {
                let host = self.services.host.clone();
                self.record(
                    &host,
                    Direction::Internal,
                    "su01-sweep",
                    format!("status of {vehicle} is stale"),
                );
            }
        }

        self.reschedule(self.cfg.tick_ms, TimerTag::EngineTick);
    }

    fn vehicle_status_update(&mut self, vehicle: &str) {
        let central = self.services.host.clone();
        if central.is_empty() {
            return;
        }
        let intersections = &self.topo.road_graph.intersections;
        let position = if intersections.is_empty() {
            "unknown".to_string()
        } else {
            let idx = (self.clock / self.cfg.status_period_ms) as usize % intersections.len();
            intersections[idx].clone()
        };
        let speed = 10.0 + (vehicle.len() % 7) as f64;
        let body = msg::StatusUpdate { vehicle: vehicle.to_string(), position, speed };
        if let Err(e) = self.send_message(
            vehicle,
            &central,
            msg_type::SU01_STATUS_UPDATE,
            &body,
            &DispatchPolicy::All,
        ) {
            self.record(vehicle, Direction::Internal, "su01-send", e.to_string());
        }
    }

    fn provider_occupancy_update(&mut self) {
        let central = self.services.host.clone();
        let provider = self
            .topo
            .nodes_of_kind(NodeKind::ExternalProvider)
            .map(|n| n.id.clone())
            .min();
        let Some(provider) = provider else { return };
        if central.is_empty() {
            return;
        }
        let lots: Vec<(String, u32)> = self
            .topo
            .parking_lots
            .iter()
            .map(|l| (l.id.clone(), l.occupied))
            .collect();
        for (lot, occupied) in lots {
            let body = msg::OccupancyUpdate { lot, occupied };
            if let Err(e) = self.send_message(
                &provider,
                &central,
                msg_type::PM01_OCCUPANCY_UPDATE,
                &body,
                &DispatchPolicy::All,
            ) {
                self.record(&provider, Direction::Internal, "pm01-send", e.to_string());
            }
        }
    }

    fn vehicle_route_request(&mut self, vehicle: &str) {
        let central = self.services.host.clone();
        let ix = &self.topo.road_graph.intersections;
        if central.is_empty() || ix.len() < 2 {
            return;
        }
        let body = msg::RouteRequest { from: ix[0].clone(), to: ix[ix.len() - 1].clone() };
        if let Err(e) = self.send_message(
            vehicle,
            &central,
            msg_type::TI03_ROUTE_REQUEST,
            &body,
            &DispatchPolicy::All,
        ) {
            self.record(vehicle, Direction::Internal, "ti03-send", e.to_string());
        }
    }

    fn vehicle_parking_query(&mut self, vehicle: &str) {
        let central = self.services.host.clone();
        let Some(lot) = self.topo.parking_lots.first().map(|l| l.id.clone()) else { return };
        if central.is_empty() {
            return;
        }
        let body = msg::ParkingQuery { lot };
        if let Err(e) = self.send_message(
            vehicle,
            &central,
            msg_type::PM01_PARKING_QUERY,
            &body,
            &DispatchPolicy::All,
        ) {
            self.record(vehicle, Direction::Internal, "pm01-send", e.to_string());
        }
    }

    fn emergency_cycle(&mut self, device: &str) {
        let central = self.services.host.clone();
        if central.is_empty() {
            return;
        }
        match self.device_credentials.get(device).cloned() {
            None => {
                let body =
                    msg::RegisterEmergency { device: device.to_string(), proof: device.to_string() };
                if let Err(e) = self.send_message(
                    device,
                    &central,
                    msg_type::PS03_REGISTER,
                    &body,
                    &DispatchPolicy::All,
                ) {
                    self.record(device, Direction::Internal, "ps03-send", e.to_string());
                }
            }
            Some(credential) => {
                let Some((intersection, plan)) = self
                    .topo
                    .road_graph
                    .signals
                    .iter()
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .next()
                else {
                    return;
                };
                if plan.approaches.is_empty() {
                    return;
                }
                let idx = (self.clock
                    / self.cfg.emergency_period_ms.unwrap_or(1).max(1))
                    as usize
                    % plan.approaches.len();
                let body = msg::PreemptionRequest {
                    credential,
                    intersection,
                    approach: plan.approaches[idx].clone(),
                };
                if let Err(e) = self.send_message(
                    device,
                    &central,
                    msg_type::PS03_PREEMPTION_REQUEST,
                    &body,
                    &DispatchPolicy::All,
                ) {
                    self.record(device, Direction::Internal, "ps03-send", e.to_string());
                }
            }
        }
    }

    // -----------------------------------------------------------------
    // Attack-step execution
    // -----------------------------------------------------------------

    fn execute_attack_step(&mut self, index: usize) {
        let Some(exec) = &self.scenario else { return };
        let attacker = exec.attacker.clone();
        let prior_failed = exec.verdicts[..index]
            .iter()
            .any(|v| !matches!(v, Some(StepVerdict::Succeeded)));
        let step = exec.steps[index].clone();

        if prior_failed {
            self.set_verdict(index, StepVerdict::NotReached);
            self.record(
                &attacker,
                Direction::Internal,
                "attack-step",
                format!("step {} ({}) not reached", index + 1, step.cve),
            );
            return;
        }

        match eval_precondition(&step.atoms, &self.topo, &self.caps) {
            Err(atom) => {
                self.set_verdict(index, StepVerdict::PreconditionFailed(atom.to_string()));
                self.record(
                    &attacker,
                    Direction::Internal,
                    "attack-step",
                    format!("step {} ({}) blocked: {atom} does not hold", index + 1, step.cve),
                );
            }
            Ok(()) => {
                self.set_verdict(index, StepVerdict::Succeeded);
                self.record(
                    &attacker,
                    Direction::Internal,
                    "attack-step",
                    format!("step {} ({}) succeeded", index + 1, step.cve),
                );
                for grant in &step.grants {
                    if self.caps.grant(grant.clone()) {
                        self.cap_timeline.push((self.clock, grant.clone()));
                        self.record(
                            &attacker,
                            Direction::Internal,
                            "capability",
                            format!("gained {grant}"),
                        );
                    }
                }
                for effect in &step.effects {
                    self.apply_effect(&step.cve, &attacker, effect);
                }
            }
        }
    }

    fn set_verdict(&mut self, index: usize, verdict: StepVerdict) {
        if let Some(exec) = &mut self.scenario {
            exec.verdicts[index] = Some(verdict);
        }
    }

    fn apply_effect(&mut self, cve: &str, attacker: &str, effect: &WorldEffect) {
        let central = self.services.host.clone();
        match effect {
            WorldEffect::DbTamper { ops } => {
                for op in ops {
                    match op {
                        TamperOp::Parking { lot, occupied } => {
                            match self.services.served.parking.get_mut(lot) {
                                Some(entry) => {
                                    entry.occupied = *occupied;
                                    self.tamper_provenance
                                        .insert(format!("parking/{lot}"), cve.to_string());
                                    self.record(
                                        &central,
                                        Direction::Internal,
                                        "db-tamper",
                                        format!("parking {lot} occupied rewritten to {occupied}"),
                                    );
                                }
                                None => self.record(
                                    &central,
                                    Direction::Internal,
                                    "db-tamper",
                                    format!("parking {lot} does not exist"),
                                ),
                            }
                        }
                        TamperOp::Incidents { from, to, penalty } => {
                            let key = crate::topology::segment_key(from, to);
                            self.services.served.incidents.insert(key.clone(), *penalty);
                            self.tamper_provenance
                                .insert(format!("incidents/{key}"), cve.to_string());
                            self.incidents_tampered_by = Some(cve.to_string());
                            self.record(
                                &central,
                                Direction::Internal,
                                "db-tamper",
                                format!("incident penalty on {key} rewritten to {penalty}"),
                            );
                        }
                    }
                }
            }
            WorldEffect::RegisterRogueEmergency { device } => {
                let result = self.services.ps03_register_emergency(
                    &self.topo,
                    &self.caps,
                    device,
                    "",
                    self.clock,
                );
                match result {
                    Ok(reg) => {
                        self.device_credentials.insert(device.clone(), reg.credential.clone());
                        self.note_registration(&reg, Some(cve.to_string()));
                    }
                    Err(e) => self.record(
                        attacker,
                        Direction::Internal,
                        "attack-effect",
                        format!("rogue registration failed: {e}"),
                    ),
                }
            }
            WorldEffect::InjectSignalCommand { command } => {
                let Some(plan) = self.topo.road_graph.signals.get(&command.intersection) else {
                    return self.record(
                        attacker,
                        Direction::Internal,
                        "attack-effect",
                        format!("no signal plan at {}", command.intersection),
                    );
                };
                let rsu = plan.rsu.clone();
                let body = msg::SignalCommand::Override {
                    intersection: command.intersection.clone(),
                    command: command.command.clone(),
                    duration_ticks: command.duration_ticks,
                    caused_by: Some(cve.to_string()),
                };
                let sent = self.send_message(
                    &central,
                    &rsu,
                    msg_type::PS03_SIGNAL_COMMAND,
                    &CommandEnvelope { device: attacker.to_string(), command: body },
                    &DispatchPolicy::Preferred(vec![ProtocolKind::Snmpv3]),
                );
                if let Err(e) = sent {
                    self.record(
                        attacker,
                        Direction::Internal,
                        "attack-effect",
                        format!("signal command undeliverable: {e}"),
                    );
                }
            }
        }
    }

    fn note_registration(
        &mut self,
        reg: &crate::services::EmergencyRegistration,
        caused_by: Option<String>,
    ) {
        let central = self.services.host.clone();
        self.record(
            &central,
            Direction::Internal,
            "ps03-register",
            format!(
                "{} registered as emergency vehicle ({})",
                reg.device,
                if reg.legitimate { "enrolled" } else { "bypass" }
            ),
        );
        if !reg.legitimate {
            let alarm = monitor::rogue_alarm(reg);
            self.raise(alarm, caused_by);
        }
    }

    // -----------------------------------------------------------------
    // Outputs
    // -----------------------------------------------------------------

    /// Verdicts and capability timeline; steps never reached before the
    /// horizon report as `NotReached`.
    pub fn outcome(&self) -> Option<AttackOutcome> {
        let exec = self.scenario.as_ref()?;
        Some(AttackOutcome {
            steps: exec
                .steps
                .iter()
                .zip(&exec.verdicts)
                .map(|(step, verdict)| StepResult {
                    cve: step.cve.clone(),
                    at_ms: step.at_ms,
                    verdict: verdict.clone().unwrap_or(StepVerdict::NotReached),
                })
                .collect(),
            capability_timeline: self.cap_timeline.clone(),
        })
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.trace {
            out.push_str(&serde_json::to_string(record).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn report(&self) -> Report {
        let scenario = self.outcome().map(|outcome| {
            let exec = self.scenario.as_ref().expect("outcome implies scenario");
            ScenarioReport {
                id: exec.id.clone(),
                attacker: exec.attacker.clone(),
                steps: outcome
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(index, step)| {
                        let (verdict, failed_atom) = monitor::verdict_strings(&step.verdict);
                        let linked = self
                            .alarms
                            .iter()
                            .filter(|a| a.caused_by.as_deref() == Some(step.cve.as_str()))
                            .count() as u64;
                        StepReport {
                            index,
                            cve: step.cve.clone(),
                            at_ms: step.at_ms,
                            verdict,
                            failed_atom,
                            linked_alarms: linked,
                        }
                    })
                    .collect(),
            }
        });
        let summary = self.summary();
        let counts = ReportCounts {
            events_processed: summary.events_processed,
            frames_sent: summary.frames_sent,
            frames_delivered: summary.frames_delivered,
            frames_forwarded: summary.frames_forwarded,
            frames_deduplicated: summary.frames_deduplicated,
            frames_inflight: summary.frames_inflight,
            ..ReportCounts::default()
        };
        monitor::emit_report(
            &self.topo.name,
            self.cfg.seed,
            self.cfg.horizon_ms,
            self.clock,
            scenario,
            self.cap_timeline
                .iter()
                .map(|(t, c)| CapabilityGrant { time_ms: *t, capability: c.to_string() })
                .collect(),
            self.alarms.clone(),
            counts,
        )
    }
}

/// Preempt/override payload plus the requesting device, as sent to RSUs.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct CommandEnvelope {
    device: String,
    command: msg::SignalCommand,
}

fn atom_node_refs(atom: &crate::attack::Atom) -> Vec<&str> {
    use crate::attack::Atom;
    match atom {
        Atom::ProtocolPath { from, to, .. } => vec![from, to],
        Atom::Software { node, .. } => vec![node],
        Atom::Has { .. } => Vec::new(),
    }
}

/// Hop counts over the undirected link graph, for static shortest-hop
/// routing with lexicographic next-hop tie-break.
fn hop_distances(topo: &Topology) -> BTreeMap<(String, String), u32> {
    let mut dist = BTreeMap::new();
    for start in &topo.nodes {
        let mut frontier = vec![start.id.clone()];
        dist.insert((start.id.clone(), start.id.clone()), 0u32);
        let mut d = 0u32;
        while !frontier.is_empty() {
            d += 1;
            let mut next = Vec::new();
            for node in &frontier {
                for link in &topo.links {
                    if let Some(peer) = link.peer_of(node) {
                        let key = (start.id.clone(), peer.to_string());
                        if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(key) {
                            e.insert(d);
                            next.push(peer.to_string());
                        }
                    }
                }
            }
            frontier = next;
        }
    }
    // Stored symmetric: dist[(a,b)] from a's search equals b's.
    dist
}

/// Convenience wrapper: build a sim, attach the scenario if given, run to
/// the horizon.
pub fn run_simulation(
    topo: Arc<Topology>,
    catalog: Option<&VulnCatalog>,
    scenario: Option<&Scenario>,
    cfg: SimConfig,
) -> Result<Sim, SimError> {
    let mut sim = Sim::new(topo, cfg)?;
    if let Some(scenario) = scenario {
        let catalog = catalog.ok_or_else(|| SimError::UnknownCve("<no catalog>".to_string()))?;
        sim.attach_scenario(catalog, scenario)?;
    }
    sim.run_to_horizon();
    Ok(sim)
}
