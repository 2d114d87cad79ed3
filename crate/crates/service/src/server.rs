//! Async driver for the [`Hub`] and the websocket endpoint.
//!
//! One task owns the hub and is the only writer of robot state. Each
//! connection talks to it through two delay lines, one per direction, so
//! injected latency never reorders a sender's messages.

use crate::codec::encode_msg;
use crate::hub::{Effect, Hub, HubConfig, SessionId};
use crate::latency::{delay_line, DelaySender, LatencySchedule};
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use deskpilot_core::session::SessionLog;
use deskpilot_core::teleop::SimWorld;
use std::collections::HashMap;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::time::{interval_at, Duration, Instant, MissedTickBehavior};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub hub: HubConfig,
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            hub: HubConfig::default(),
            latency_ms: 0.0,
            jitter_ms: 0.0,
            seed: 0,
        }
    }
}

/// What a connection receives from the hub.
#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Frame(Vec<u8>),
    Close,
}

enum Inbound {
    Frame(Vec<u8>),
    Disconnect,
}

/// Point-in-time copy of the hub's robot and record.
#[derive(Debug, Clone)]
pub struct HubSnapshot {
    pub ticks: u64,
    pub world: SimWorld,
    pub holder: Option<SessionId>,
    pub log: Option<SessionLog>,
}

enum Request {
    Connect(oneshot::Sender<(SessionId, mpsc::UnboundedReceiver<Outbound>)>),
    Frame(SessionId, Vec<u8>),
    Disconnect(SessionId),
    Snapshot(oneshot::Sender<HubSnapshot>),
    Shutdown,
}

/// Cloneable handle to a running hub task.
#[derive(Clone)]
pub struct HubHandle {
    tx: mpsc::UnboundedSender<Request>,
    latency_ms: f64,
    jitter_ms: f64,
    seed: u64,
}

/// One session's view of the hub. Dropping it disconnects.
pub struct Connection {
    pub id: SessionId,
    inbound: DelaySender<Inbound>,
    outbound: mpsc::UnboundedReceiver<Outbound>,
}

impl Connection {
    /// Queue a frame for the hub. Returns false once the hub is gone.
    pub fn send(&self, bytes: Vec<u8>) -> bool {
        self.inbound.send(Inbound::Frame(bytes)).is_ok()
    }

    pub async fn recv(&mut self) -> Option<Outbound> {
        self.outbound.recv().await
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.inbound.send(Inbound::Disconnect);
    }
}

fn schedule(cfg_latency: f64, cfg_jitter: f64, seed: u64, id: SessionId, direction: u64) -> LatencySchedule {
    LatencySchedule::new(
        cfg_latency,
        cfg_jitter,
        seed ^ (id << 1 | direction).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

impl HubHandle {
    /// Start the hub task on the current runtime.
    pub fn spawn(cfg: ServerConfig) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        let handle = Self {
            tx,
            latency_ms: cfg.latency_ms,
            jitter_ms: cfg.jitter_ms,
            seed: cfg.seed,
        };
        tokio::spawn(run(Hub::new(cfg.hub), rx, handle.clone()));
        handle
    }

    pub async fn connect(&self) -> Option<Connection> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Request::Connect(reply)).ok()?;
        let (id, outbound) = rx.await.ok()?;
        let (inbound, mut delayed) = delay_line(schedule(self.latency_ms, self.jitter_ms, self.seed, id, 1));
        let hub = self.tx.clone();
        tokio::spawn(async move {
            while let Some(item) = delayed.recv().await {
                let req = match item {
                    Inbound::Frame(b) => Request::Frame(id, b),
                    Inbound::Disconnect => Request::Disconnect(id),
                };
                let last = matches!(req, Request::Disconnect(_));
                if hub.send(req).is_err() || last {
                    break;
                }
            }
        });
        Some(Connection { id, inbound, outbound })
    }

    pub async fn snapshot(&self) -> Option<HubSnapshot> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Request::Snapshot(reply)).ok()?;
        rx.await.ok()
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Request::Shutdown);
    }
}

async fn run(mut hub: Hub, mut rx: mpsc::UnboundedReceiver<Request>, handle: HubHandle) {
    let period = Duration::from_secs_f64(1.0 / hub.tick_hz());
    let origin = Instant::now();
    let mut ticker = interval_at(origin + period, period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let mut outs: HashMap<SessionId, DelaySender<Outbound>> = HashMap::new();
    let now_ms = || origin.elapsed().as_secs_f64() * 1e3;
    loop {
        let effects = tokio::select! {
            _ = ticker.tick() => hub.tick(now_ms()),
            req = rx.recv() => match req {
                None | Some(Request::Shutdown) => break,
                Some(Request::Connect(reply)) => {
                    let id = hub.connect();
                    let (tx, out_rx) =
                        delay_line(schedule(handle.latency_ms, handle.jitter_ms, handle.seed, id, 0));
                    if reply.send((id, out_rx)).is_ok() {
                        outs.insert(id, tx);
                    } else {
                        hub.disconnect(id);
                    }
                    Vec::new()
                }
                Some(Request::Frame(id, bytes)) => hub.receive(id, &bytes, now_ms()),
                Some(Request::Disconnect(id)) => {
                    hub.disconnect(id);
                    outs.remove(&id);
                    Vec::new()
                }
                Some(Request::Snapshot(reply)) => {
                    let _ = reply.send(HubSnapshot {
                        ticks: hub.ticks(),
                        world: hub.pilot().world,
                        holder: hub.holder(),
                        log: hub.log().cloned(),
                    });
                    Vec::new()
                }
            },
        };
        for e in effects {
            match e {
                Effect::Send(id, m) => {
                    if let Some(tx) = outs.get(&id) {
                        let _ = tx.send(Outbound::Frame(encode_msg(&m)));
                    }
                }
                Effect::Close(id) => {
                    if let Some(tx) = outs.remove(&id) {
                        let _ = tx.send(Outbound::Close);
                    }
                }
            }
        }
    }
}

/// Router exposing the pilot endpoint at `/pilot`.
pub fn router(hub: HubHandle) -> Router {
    Router::new().route("/pilot", get(upgrade)).with_state(hub)
}

async fn upgrade(ws: WebSocketUpgrade, State(hub): State<HubHandle>) -> Response {
    ws.on_upgrade(move |socket| pump(socket, hub))
}

/// One websocket message per protocol frame, both directions.
async fn pump(mut socket: WebSocket, hub: HubHandle) {
    let Some(mut conn) = hub.connect().await else {
        return;
    };
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Binary(b))) => {
                    if !conn.send(b.to_vec()) {
                        break;
                    }
                }
                // Text is not a valid frame; let the hub reject it.
                Some(Ok(WsMessage::Text(t))) => {
                    if !conn.send(t.as_bytes().to_vec()) {
                        break;
                    }
                }
                Some(Ok(WsMessage::Ping(_) | WsMessage::Pong(_))) => {}
                Some(Ok(WsMessage::Close(_))) | Some(Err(_)) | None => break,
            },
            out = conn.recv() => match out {
                Some(Outbound::Frame(b)) => {
                    if socket.send(WsMessage::Binary(b.into())).await.is_err() {
                        break;
                    }
                }
                Some(Outbound::Close) | None => {
                    let _ = socket.send(WsMessage::Close(None)).await;
                    break;
                }
            },
        }
    }
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, hub: HubHandle) -> std::io::Result<()> {
    axum::serve(listener, router(hub)).await
}
