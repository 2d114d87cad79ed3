//! Session protocol as a synchronous state machine. The hub owns the robot;
//! transports feed it frames and ticks and carry out the returned effects.

use crate::codec::{
    decode_msg, Body, CommandPush, ControlGrant, Empty, Message, ModeEvent, Reason, Role, StatePush, PROTOCOL_VERSION,
};
use deskpilot_core::kinematics::RobotConfig;
use deskpilot_core::marker::PoseEstimate;
use deskpilot_core::session::{record_of, SessionLog};
use deskpilot_core::teleop::{PedalState, Pilot, TeleopConfig, TickInput};
use std::collections::BTreeMap;

pub type SessionId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send(SessionId, Message),
    /// Close the transport after everything already sent to it.
    Close(SessionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionInfo {
    pub session_id: SessionId,
    /// `None` until the session's Hello.
    pub role: Option<Role>,
    last_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HubConfig {
    pub robot: RobotConfig,
    pub teleop: TeleopConfig,
    pub initial_lift: f64,
    /// Keep a session log of every tick.
    pub record: bool,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            robot: RobotConfig::default(),
            teleop: TeleopConfig::default(),
            initial_lift: 0.8,
            record: false,
        }
    }
}

/// Holder input gathered since the last tick.
#[derive(Debug, Clone, Default)]
struct Pending {
    keys: Vec<String>,
    pedals: [f64; 4],
    estimates: [Option<PoseEstimate>; 2],
}

#[derive(Debug, Clone)]
pub struct Hub {
    pilot: Pilot,
    sessions: BTreeMap<SessionId, SessionInfo>,
    holder: Option<SessionId>,
    next_id: SessionId,
    seq: u64,
    ticks: u64,
    silent_ticks: u64,
    pending: Option<Pending>,
    log: Option<SessionLog>,
}

impl Hub {
    pub fn new(cfg: HubConfig) -> Self {
        let pilot = Pilot::new(cfg.robot, cfg.teleop.clone(), cfg.initial_lift);
        let log = cfg.record.then(|| SessionLog::new(pilot.world, cfg.robot, cfg.teleop));
        Self {
            pilot,
            sessions: BTreeMap::new(),
            holder: None,
            next_id: 1,
            seq: 0,
            ticks: 0,
            silent_ticks: 0,
            pending: None,
            log,
        }
    }

    pub fn pilot(&self) -> &Pilot {
        &self.pilot
    }

    pub fn holder(&self) -> Option<SessionId> {
        self.holder
    }

    pub fn session(&self, id: SessionId) -> Option<&SessionInfo> {
        self.sessions.get(&id)
    }

    pub fn log(&self) -> Option<&SessionLog> {
        self.log.as_ref()
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn tick_hz(&self) -> f64 {
        self.pilot.cfg.tick_hz
    }

    pub fn connect(&mut self) -> SessionId {
        let id = self.next_id;
        self.next_id += 1;
        self.sessions.insert(
            id,
            SessionInfo {
                session_id: id,
                role: None,
                last_seq: None,
            },
        );
        id
    }

    /// Transport gone. Releases the control token if this session held it;
    /// input it sent but that was not yet applied is dropped.
    pub fn disconnect(&mut self, id: SessionId) {
        self.sessions.remove(&id);
        self.release(id);
    }

    fn release(&mut self, id: SessionId) {
        if self.holder == Some(id) {
            self.holder = None;
            self.pending = None;
        }
    }

    fn msg(&mut self, now_ms: f64, body: Body) -> Message {
        self.seq += 1;
        Message {
            seq: self.seq,
            t_sent: now_ms,
            body,
        }
    }

    fn send(&mut self, id: SessionId, now_ms: f64, body: Body) -> Effect {
        Effect::Send(id, self.msg(now_ms, body))
    }

    fn violation(&mut self, id: SessionId, now_ms: f64, reason: String) -> Vec<Effect> {
        let e = self.send(id, now_ms, Body::Error(Reason { reason }));
        self.disconnect(id);
        vec![e, Effect::Close(id)]
    }

    /// One frame from session `id`.
    pub fn receive(&mut self, id: SessionId, bytes: &[u8], now_ms: f64) -> Vec<Effect> {
        if !self.sessions.contains_key(&id) {
            return Vec::new();
        }
        match decode_msg(bytes) {
            Ok(m) => self.handle(id, m, now_ms),
            Err(e) => self.violation(id, now_ms, e.to_string()),
        }
    }

    pub fn handle(&mut self, id: SessionId, m: Message, now_ms: f64) -> Vec<Effect> {
        let Some(info) = self.sessions.get_mut(&id) else {
            return Vec::new();
        };
        if info.last_seq.is_some_and(|s| m.seq <= s) {
            let reason = format!("seq {} not above {}", m.seq, info.last_seq.unwrap_or_default());
            return self.violation(id, now_ms, reason);
        }
        info.last_seq = Some(m.seq);
        let greeted = info.role.is_some();
        match m.body {
            Body::Hello(h) => {
                if h.version != PROTOCOL_VERSION {
                    return self.violation(id, now_ms, format!("protocol version {} unsupported", h.version));
                }
                self.hello(id, h.role, now_ms)
            }
            _ if !greeted => {
                let reason = format!("{} before Hello", m.body.kind().name());
                self.violation(id, now_ms, reason)
            }
            Body::CommandPush(c) => {
                if self.holder == Some(id) {
                    self.queue(c);
                    Vec::new()
                } else {
                    vec![self.send(
                        id,
                        now_ms,
                        Body::Error(Reason {
                            reason: "not the control token holder".into(),
                        }),
                    )]
                }
            }
            Body::Ping(n) => vec![self.send(id, now_ms, Body::Pong(n))],
            Body::Pong(_) => Vec::new(),
            Body::Release(_) => {
                self.release(id);
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.role = Some(Role::Observer);
                }
                Vec::new()
            }
            Body::StatePush(_) | Body::ModeEvent(_) | Body::ControlGrant(_) | Body::ControlDeny(_) | Body::Error(_) => {
                let reason = format!("{} is server-to-client only", m.body.kind().name());
                self.violation(id, now_ms, reason)
            }
        }
    }

    fn hello(&mut self, id: SessionId, role: Role, now_ms: f64) -> Vec<Effect> {
        let granted = role == Role::Pilot && self.holder.is_none_or(|h| h == id);
        if granted {
            self.holder = Some(id);
        } else {
            // A holder re-greeting as observer gives the token up.
            self.release(id);
        }
        if let Some(s) = self.sessions.get_mut(&id) {
            s.role = Some(if granted { Role::Pilot } else { Role::Observer });
        }
        let body = if granted {
            Body::ControlGrant(ControlGrant {
                session: id,
                tick_hz: self.tick_hz(),
            })
        } else {
            let reason = if role == Role::Pilot { "busy" } else { "observer" };
            Body::ControlDeny(Reason { reason: reason.into() })
        };
        vec![self.send(id, now_ms, body)]
    }

    /// Latest pedals and estimates win; keys accumulate so no press is lost.
    fn queue(&mut self, c: CommandPush) {
        let p = self.pending.get_or_insert_with(Pending::default);
        p.keys.extend(c.keys);
        p.pedals = c.pedals;
        p.estimates = c.estimates;
    }

    /// Advance the robot one tick and push state to every greeted session.
    pub fn tick(&mut self, now_ms: f64) -> Vec<Effect> {
        let t = self.pilot.world.time;
        let mode_before = self.pilot.state.mode;
        let (out, pedals) = match self.pending.take() {
            Some(p) => {
                self.silent_ticks = 0;
                // Estimates are aged from arrival, not from the sender's clock.
                let estimates = p.estimates.map(|e| {
                    e.map(|mut e| {
                        e.timestamp = t;
                        e
                    })
                });
                let input = TickInput {
                    keys: p.keys,
                    pedals: PedalState(p.pedals),
                    estimates,
                };
                (self.pilot.tick(&input), input.pedals.sanitized())
            }
            None => {
                self.silent_ticks += 1;
                (self.pilot.hold_tick(), PedalState::default())
            }
        };
        if let Some(log) = self.log.as_mut() {
            log.record_step(record_of(t, &out, self.pilot.state.mode, pedals))
                .expect("hub ticks are strictly increasing");
        }
        self.ticks += 1;

        let greeted: Vec<SessionId> = self
            .sessions
            .values()
            .filter(|s| s.role.is_some())
            .map(|s| s.session_id)
            .collect();
        let mut effects = Vec::new();
        let mode = self.pilot.state.mode;
        if mode != mode_before {
            for &id in &greeted {
                effects.push(self.send(id, now_ms, Body::ModeEvent(ModeEvent { mode })));
            }
        }
        let push = StatePush {
            tick: self.ticks,
            t: self.pilot.world.time,
            state: self.pilot.world.state_vector(),
            mode,
            base: self.pilot.world.base,
            holder: self.holder,
            silent_ticks: self.silent_ticks,
        };
        for id in greeted {
            effects.push(self.send(id, now_ms, Body::StatePush(push.clone())));
        }
        effects
    }
}

/// Message for a client: helper used by transports and tests.
pub fn client_message(seq: u64, t_sent: f64, body: Body) -> Message {
    Message { seq, t_sent, body }
}

/// Convenience constructors for client bodies.
pub mod body {
    use super::*;
    use crate::codec::{Hello, Nonce};

    pub fn hello(role: Role, name: &str) -> Body {
        Body::Hello(Hello {
            version: PROTOCOL_VERSION,
            role,
            name: name.into(),
        })
    }

    pub fn ping(nonce: u64) -> Body {
        Body::Ping(Nonce { nonce })
    }

    pub fn release() -> Body {
        Body::Release(Empty {})
    }

    pub fn command(input: &TickInput) -> Body {
        Body::CommandPush(CommandPush {
            estimates: input.estimates,
            pedals: input.pedals.0,
            keys: input.keys.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(effects: &[Effect]) -> Vec<(SessionId, &Body)> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::Send(id, m) => Some((*id, &m.body)),
                Effect::Close(_) => None,
            })
            .collect()
    }

    #[test]
    fn first_pilot_wins() {
        let mut hub = Hub::new(HubConfig::default());
        let (a, b) = (hub.connect(), hub.connect());
        let ea = hub.handle(a, client_message(1, 0.0, body::hello(Role::Pilot, "a")), 0.0);
        let eb = hub.handle(b, client_message(1, 0.0, body::hello(Role::Pilot, "b")), 0.0);
        assert!(matches!(sent(&ea)[0].1, Body::ControlGrant(g) if g.session == a));
        assert!(matches!(sent(&eb)[0].1, Body::ControlDeny(r) if r.reason == "busy"));
        hub.disconnect(a);
        let eb = hub.handle(b, client_message(2, 0.0, body::hello(Role::Pilot, "b")), 0.0);
        assert!(matches!(sent(&eb)[0].1, Body::ControlGrant(_)));
    }

    #[test]
    fn command_before_hello_closes() {
        let mut hub = Hub::new(HubConfig::default());
        let a = hub.connect();
        let e = hub.handle(a, client_message(1, 0.0, body::command(&TickInput::default())), 0.0);
        assert!(matches!(sent(&e)[0].1, Body::Error(_)));
        assert_eq!(e.last(), Some(&Effect::Close(a)));
        assert!(hub.session(a).is_none());
    }

    #[test]
    fn non_increasing_seq_closes() {
        let mut hub = Hub::new(HubConfig::default());
        let a = hub.connect();
        hub.handle(a, client_message(5, 0.0, body::hello(Role::Observer, "o")), 0.0);
        let e = hub.handle(a, client_message(5, 0.0, body::ping(1)), 0.0);
        assert_eq!(e.last(), Some(&Effect::Close(a)));
    }

    #[test]
    fn keys_accumulate_and_pedals_take_the_latest() {
        let mut hub = Hub::new(HubConfig::default());
        let a = hub.connect();
        hub.handle(a, client_message(1, 0.0, body::hello(Role::Pilot, "a")), 0.0);
        let mut input = TickInput {
            keys: vec!["m".into()],
            ..Default::default()
        };
        hub.handle(a, client_message(2, 0.0, body::command(&input)), 0.0);
        input.keys = vec!["z".into()];
        input.pedals = PedalState([0.5, 0.0, 0.0, 0.0]);
        hub.handle(a, client_message(3, 0.0, body::command(&input)), 0.0);
        let e = hub.tick(33.0);
        assert!(matches!(sent(&e)[0].1, Body::ModeEvent(_)));
        let p = hub.pilot();
        assert!(p.state.gripper_locked[0]);
        assert_eq!(p.state.last_command.0[6], p.cfg.home_left.gripper);
    }
}
