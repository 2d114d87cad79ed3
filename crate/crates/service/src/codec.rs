//! Wire format.
//!
//! ```text
//! +----------------+------+---------------------------------------------+
//! | length: u32 BE | kind | {"seq":..,"t_sent":..,"payload":{..}} UTF-8 |
//! +----------------+------+---------------------------------------------+
//! ```
//!
//! `length` counts the kind byte and the JSON. Field order is fixed by the
//! payload structs, and decoding re-encodes and compares, so every accepted
//! frame is in canonical form and `encode(decode(b)) == b`.

use deskpilot_core::kinematics::{BasePose, RobotCommand18};
use deskpilot_core::marker::PoseEstimate;
use deskpilot_core::teleop::TeleopMode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on `length`; larger frames are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 20;
const HEADER: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed message at byte {position}: {reason}")]
pub struct MalformedMessage {
    pub position: usize,
    pub reason: String,
}

fn malformed(position: usize, reason: impl Into<String>) -> MalformedMessage {
    MalformedMessage {
        position,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pilot,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub version: u32,
    pub role: Role,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatePush {
    pub tick: u64,
    /// Simulated time (s) of `state`.
    pub t: f64,
    pub state: RobotCommand18,
    pub mode: TeleopMode,
    pub base: BasePose,
    pub holder: Option<u64>,
    /// Consecutive ticks without a command from the holder.
    pub silent_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandPush {
    pub estimates: [Option<PoseEstimate>; 2],
    pub pedals: [f64; 4],
    pub keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEvent {
    pub mode: TeleopMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonce {
    pub nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlGrant {
    pub session: u64,
    pub tick_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reason {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hello(Hello),
    StatePush(StatePush),
    CommandPush(CommandPush),
    ModeEvent(ModeEvent),
    Ping(Nonce),
    Pong(Nonce),
    ControlGrant(ControlGrant),
    ControlDeny(Reason),
    Error(Reason),
    Release(Empty),
}

impl Body {
    pub fn kind(&self) -> Kind {
        match self {
            Body::Hello(_) => Kind::Hello,
            Body::StatePush(_) => Kind::StatePush,
            Body::CommandPush(_) => Kind::CommandPush,
            Body::ModeEvent(_) => Kind::ModeEvent,
            Body::Ping(_) => Kind::Ping,
            Body::Pong(_) => Kind::Pong,
            Body::ControlGrant(_) => Kind::ControlGrant,
            Body::ControlDeny(_) => Kind::ControlDeny,
            Body::Error(_) => Kind::Error,
            Body::Release(_) => Kind::Release,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    StatePush = 2,
    CommandPush = 3,
    ModeEvent = 4,
    Ping = 5,
    Pong = 6,
    ControlGrant = 7,
    ControlDeny = 8,
    Error = 9,
    Release = 10,
}

impl Kind {
    pub const ALL: [Kind; 10] = [
        Kind::Hello,
        Kind::StatePush,
        Kind::CommandPush,
        Kind::ModeEvent,
        Kind::Ping,
        Kind::Pong,
        Kind::ControlGrant,
        Kind::ControlDeny,
        Kind::Error,
        Kind::Release,
    ];

    pub fn from_byte(b: u8) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| *k as u8 == b)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Hello => "Hello",
            Kind::StatePush => "StatePush",
            Kind::CommandPush => "CommandPush",
            Kind::ModeEvent => "ModeEvent",
            Kind::Ping => "Ping",
            Kind::Pong => "Pong",
            Kind::ControlGrant => "ControlGrant",
            Kind::ControlDeny => "ControlDeny",
            Kind::Error => "Error",
            Kind::Release => "Release",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    /// Sender clock (ms).
    pub t_sent: f64,
    pub body: Body,
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    seq: u64,
    t_sent: f64,
    payload: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn<T> {
    seq: u64,
    t_sent: f64,
    payload: T,
}

fn json<T: Serialize>(seq: u64, t_sent: f64, payload: &T) -> Vec<u8> {
    // Non-finite floats serialize as null and are refused by the decoder.
    serde_json::to_vec(&EnvelopeOut { seq, t_sent, payload }).expect("payload serializes")
}

/// Encode one framed message.
pub fn encode_msg(m: &Message) -> Vec<u8> {
    let (s, t) = (m.seq, m.t_sent);
    let body = match &m.body {
        Body::Hello(p) => json(s, t, p),
        Body::StatePush(p) => json(s, t, p),
        Body::CommandPush(p) => json(s, t, p),
        Body::ModeEvent(p) => json(s, t, p),
        Body::Ping(p) | Body::Pong(p) => json(s, t, p),
        Body::ControlGrant(p) => json(s, t, p),
        Body::ControlDeny(p) | Body::Error(p) => json(s, t, p),
        Body::Release(p) => json(s, t, p),
    };
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(&((body.len() + 1) as u32).to_be_bytes());
    out.push(m.body.kind() as u8);
    out.extend_from_slice(&body);
    out
}

fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<(u64, f64, T), MalformedMessage> {
    let env: EnvelopeIn<T> = serde_json::from_slice(bytes).map_err(|e| {
        // Frames are a single line, so the column is the offset.
        malformed(HEADER + e.column().saturating_sub(1), e.to_string())
    })?;
    Ok((env.seq, env.t_sent, env.payload))
}

/// Decode exactly one framed message occupying all of `bytes`.
pub fn decode_msg(bytes: &[u8]) -> Result<Message, MalformedMessage> {
    let (m, used) = decode_prefix(bytes)?.ok_or_else(|| malformed(bytes.len(), "truncated frame"))?;
    if used != bytes.len() {
        return Err(malformed(used, "trailing bytes after frame"));
    }
    Ok(m)
}

/// Decode the first frame of `bytes`. `Ok(None)` means more bytes are needed.
pub fn decode_prefix(bytes: &[u8]) -> Result<Option<(Message, usize)>, MalformedMessage> {
    if bytes.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len == 0 {
        return Err(malformed(0, "zero-length frame"));
    }
    if len > MAX_FRAME {
        return Err(malformed(0, format!("frame length {len} exceeds {MAX_FRAME}")));
    }
    if bytes.len() < 4 + len {
        return Ok(None);
    }
    let kind = Kind::from_byte(bytes[4]).ok_or_else(|| malformed(4, format!("unknown kind {}", bytes[4])))?;
    let payload = &bytes[HEADER..4 + len];
    let (seq, t_sent, body) = match kind {
        Kind::Hello => parse(payload).map(|(s, t, p)| (s, t, Body::Hello(p))),
        Kind::StatePush => parse(payload).map(|(s, t, p)| (s, t, Body::StatePush(p))),
        Kind::CommandPush => parse(payload).map(|(s, t, p)| (s, t, Body::CommandPush(p))),
        Kind::ModeEvent => parse(payload).map(|(s, t, p)| (s, t, Body::ModeEvent(p))),
        Kind::Ping => parse(payload).map(|(s, t, p)| (s, t, Body::Ping(p))),
        Kind::Pong => parse(payload).map(|(s, t, p)| (s, t, Body::Pong(p))),
        Kind::ControlGrant => parse(payload).map(|(s, t, p)| (s, t, Body::ControlGrant(p))),
        Kind::ControlDeny => parse(payload).map(|(s, t, p)| (s, t, Body::ControlDeny(p))),
        Kind::Error => parse(payload).map(|(s, t, p)| (s, t, Body::Error(p))),
        Kind::Release => parse(payload).map(|(s, t, p)| (s, t, Body::Release(p))),
    }?;
    let m = Message { seq, t_sent, body };
    let again = encode_msg(&m);
    if again[HEADER..] != *payload {
        let at = again[HEADER..]
            .iter()
            .zip(payload)
            .position(|(a, b)| a != b)
            .unwrap_or(payload.len().min(again.len() - HEADER));
        return Err(malformed(HEADER + at, "payload is not in canonical form"));
    }
    Ok(Some((m, 4 + len)))
}

/// Incremental decoder for byte-stream transports.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if any. After an error the stream is unusable.
    pub fn next_message(&mut self) -> Result<Option<Message>, MalformedMessage> {
        match decode_prefix(&self.buf)? {
            Some((m, used)) => {
                self.buf.drain(..used);
                Ok(Some(m))
            }
            None => Ok(None),
        }
    }
}
