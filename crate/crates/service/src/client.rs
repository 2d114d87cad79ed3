//! Headless pilot client over the websocket transport.

use crate::codec::{decode_msg, encode_msg, Body, MalformedMessage, Message, Role, StatePush};
use crate::hub::body;
use deskpilot_core::session::{Script, ScriptPlayer, SessionError};
use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::time::{interval, timeout, Duration, Instant, MissedTickBehavior};
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("websocket: {0}")]
    Transport(String),
    #[error(transparent)]
    Malformed(#[from] MalformedMessage),
    #[error("server closed the session")]
    Closed,
    #[error("server error: {0}")]
    Server(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error(transparent)]
    Script(#[from] SessionError),
}

fn transport(e: impl std::fmt::Display) -> ClientError {
    ClientError::Transport(e.to_string())
}

pub struct PilotClient {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    seq: u64,
    origin: Instant,
    /// Most recent StatePush seen by any receive call.
    pub last_state: Option<StatePush>,
    pub state_pushes: u64,
}

/// Outcome of the Hello exchange.
#[derive(Debug, Clone, PartialEq)]
pub enum Admission {
    Granted { session: u64, tick_hz: f64 },
    Denied(String),
}

impl PilotClient {
    /// `url` like `ws://127.0.0.1:8765/pilot`.
    pub async fn connect(url: &str) -> Result<Self, ClientError> {
        let (ws, _) = connect_async(url).await.map_err(transport)?;
        Ok(Self {
            ws,
            seq: 0,
            origin: Instant::now(),
            last_state: None,
            state_pushes: 0,
        })
    }

    pub async fn send(&mut self, body: Body) -> Result<(), ClientError> {
        self.seq += 1;
        let m = Message {
            seq: self.seq,
            t_sent: self.origin.elapsed().as_secs_f64() * 1e3,
            body,
        };
        self.ws
            .send(WsMessage::Binary(encode_msg(&m).into()))
            .await
            .map_err(transport)
    }

    /// Next protocol message; `Ok(None)` when the server closed.
    pub async fn recv(&mut self) -> Result<Option<Message>, ClientError> {
        while let Some(frame) = self.ws.next().await {
            match frame.map_err(transport)? {
                WsMessage::Binary(b) => {
                    let m = decode_msg(&b)?;
                    if let Body::StatePush(s) = &m.body {
                        self.state_pushes += 1;
                        self.last_state = Some(s.clone());
                    }
                    return Ok(Some(m));
                }
                WsMessage::Close(_) => return Ok(None),
                _ => {}
            }
        }
        Ok(None)
    }

    async fn recv_until<T>(
        &mut self,
        what: &'static str,
        wait: Duration,
        mut pick: impl FnMut(&Body) -> Option<T>,
    ) -> Result<T, ClientError> {
        let deadline = Instant::now() + wait;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let m = timeout(left, self.recv())
                .await
                .map_err(|_| ClientError::Timeout(what))??;
            let Some(m) = m else {
                return Err(ClientError::Closed);
            };
            if let Some(v) = pick(&m.body) {
                return Ok(v);
            }
            if let Body::Error(r) = m.body {
                return Err(ClientError::Server(r.reason));
            }
        }
    }

    pub async fn hello(&mut self, role: Role, name: &str) -> Result<Admission, ClientError> {
        self.send(body::hello(role, name)).await?;
        self.recv_until("ControlGrant or ControlDeny", Duration::from_secs(10), |b| match b {
            Body::ControlGrant(g) => Some(Admission::Granted {
                session: g.session,
                tick_hz: g.tick_hz,
            }),
            Body::ControlDeny(r) => Some(Admission::Denied(r.reason.clone())),
            _ => None,
        })
        .await
    }

    /// Round trip of one Ping.
    pub async fn ping(&mut self, nonce: u64) -> Result<Duration, ClientError> {
        let start = Instant::now();
        self.send(body::ping(nonce)).await?;
        self.recv_until("Pong", Duration::from_secs(10), |b| match b {
            Body::Pong(n) if n.nonce == nonce => Some(()),
            _ => None,
        })
        .await?;
        Ok(start.elapsed())
    }

    /// Wait for a StatePush with `tick >= min_tick`.
    pub async fn state_at(&mut self, min_tick: u64, wait: Duration) -> Result<StatePush, ClientError> {
        if let Some(s) = self.last_state.as_ref().filter(|s| s.tick >= min_tick) {
            return Ok(s.clone());
        }
        self.recv_until("StatePush", wait, |b| match b {
            Body::StatePush(s) if s.tick >= min_tick => Some(s.clone()),
            _ => None,
        })
        .await
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

/// Result of driving a script against a remote server.
#[derive(Debug, Clone)]
pub struct RemoteRun {
    pub commands_sent: u64,
    pub final_state: StatePush,
    pub state_pushes: u64,
}

/// Play `script` as the token holder: one CommandPush per tick at
/// `tick_hz`, handle estimates computed locally, as the operator's machine
/// would. Waits `settle` after the last command for the final state.
pub async fn run_script_remote(
    url: &str,
    script: &Script,
    tick_hz: f64,
    seed: u64,
    settle: Duration,
) -> Result<RemoteRun, ClientError> {
    let mut player = ScriptPlayer::new(script.clone(), tick_hz, seed)?;
    let mut client = PilotClient::connect(url).await?;
    match client.hello(Role::Pilot, "script").await? {
        Admission::Granted { .. } => {}
        Admission::Denied(reason) => return Err(ClientError::Server(format!("control denied: {reason}"))),
    }
    let mut ticker = interval(Duration::from_secs_f64(1.0 / tick_hz));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let n = player.n_ticks();
    let mut k = 0;
    while k < n {
        tokio::select! {
            _ = ticker.tick() => {
                let input = player.input(k);
                client.send(body::command(&input)).await?;
                k += 1;
            }
            m = client.recv() => match m? {
                None => return Err(ClientError::Closed),
                Some(Message { body: Body::Error(r), .. }) => return Err(ClientError::Server(r.reason)),
                Some(_) => {}
            },
        }
    }
    let end = Instant::now() + settle;
    loop {
        match timeout(end.saturating_duration_since(Instant::now()), client.recv()).await {
            Err(_) => break,
            Ok(m) => match m? {
                None => return Err(ClientError::Closed),
                Some(Message {
                    body: Body::Error(r), ..
                }) => return Err(ClientError::Server(r.reason)),
                Some(_) => {}
            },
        }
    }
    let final_state = client.last_state.clone().ok_or(ClientError::Timeout("StatePush"))?;
    let state_pushes = client.state_pushes;
    client.close().await;
    Ok(RemoteRun {
        commands_sent: n,
        final_state,
        state_pushes,
    })
}
