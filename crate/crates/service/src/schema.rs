//! The published protocol document. The checked-in copy under `schema/` is
//! compared against [`schema_document`] by the test suite.

use crate::codec::{Kind, MAX_FRAME, PROTOCOL_VERSION};
use deskpilot_core::kinematics::slot;
use serde_json::{json, Value};

fn kind_entry(k: Kind) -> Value {
    let (direction, payload) = match k {
        Kind::Hello => (
            "client->server",
            json!({"version": "u32, must equal the document version", "role": "\"pilot\" | \"observer\"", "name": "string"}),
        ),
        Kind::StatePush => (
            "server->client",
            json!({
                "tick": "u64, ticks completed",
                "t": "f64 s, simulated time of state",
                "state": "[f64; 18], see command_layout",
                "mode": "\"walking\" | \"operation\"",
                "base": {"x": "f64 m", "y": "f64 m", "heading": "f64 rad"},
                "holder": "u64 session id or null",
                "silent_ticks": "u64, consecutive ticks without holder input"
            }),
        ),
        Kind::CommandPush => (
            "client->server",
            json!({
                "estimates": "[PoseEstimate | null; 2], left then right",
                "pedals": "[f64; 4] in [0, 1]",
                "keys": "[string], key presses since the previous CommandPush"
            }),
        ),
        Kind::ModeEvent => ("server->client", json!({"mode": "\"walking\" | \"operation\""})),
        Kind::Ping => ("either", json!({"nonce": "u64"})),
        Kind::Pong => ("either", json!({"nonce": "u64, echoed from Ping"})),
        Kind::ControlGrant => ("server->client", json!({"session": "u64", "tick_hz": "f64"})),
        Kind::ControlDeny => ("server->client", json!({"reason": "\"busy\" | \"observer\""})),
        Kind::Error => (
            "server->client",
            json!({"reason": "string; the server closes the session after sending it"}),
        ),
        Kind::Release => ("client->server", json!({})),
    };
    json!({"name": k.name(), "tag": k as u8, "direction": direction, "payload": payload})
}

/// Versioned, machine-readable protocol description.
pub fn schema_document() -> String {
    let doc = json!({
        "protocol": "deskpilot-pilot",
        "version": PROTOCOL_VERSION,
        "transport": {
            "endpoint": "/pilot",
            "websocket": "binary messages, exactly one frame each",
            "byte_stream": "frames back to back"
        },
        "frame": {
            "layout": ["length: u32 big-endian, bytes after this field", "kind: u8 tag", "body: UTF-8 JSON"],
            "max_length": MAX_FRAME,
            "body": "{\"seq\": u64, \"t_sent\": f64 ms, \"payload\": {...}}",
            "canonical": "no whitespace, fields in documented order, floats in shortest round-trip form with a decimal point; other spellings are rejected"
        },
        "kinds": Kind::ALL.iter().map(|k| kind_entry(*k)).collect::<Vec<_>>(),
        "pose_estimate": {
            "pose": {"rotation": "[w, x, y, z] unit quaternion, w >= 0", "translation": "[x, y, z] m"},
            "rms_reprojection": "f64 px",
            "n_tags_used": "u32",
            "ambiguity_flag": "bool",
            "converged": "bool",
            "timestamp": "f64 s; replaced by the server with the tick of arrival"
        },
        "command_layout": slot::NAMES,
        "session_rules": [
            "Hello must be the first message; anything else first is an Error and the session is closed.",
            "seq strictly increases per sender.",
            "The first pilot Hello with no token holder receives ControlGrant; other pilots receive ControlDeny busy and observe.",
            "StatePush goes to every greeted session once per tick.",
            "CommandPush from a non-holder is answered with Error and otherwise ignored.",
            "Within one tick the latest CommandPush supplies pedals and estimates; keys from all of them are applied in arrival order.",
            "A tick without holder input repeats the previous command with the base stopped.",
            "Release or disconnect frees the token; a later pilot Hello can take it."
        ]
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("schema serializes");
    s.push('\n');
    s
}
