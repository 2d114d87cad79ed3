use deskpilot_service::client::{Admission, PilotClient};
use deskpilot_service::codec::{decode_msg, encode_msg, Body, Role};
use deskpilot_service::hub::{body, client_message};
use deskpilot_service::server::{serve, HubHandle, Outbound, ServerConfig};
use tokio::net::TcpListener;
use tokio::time::{Duration, Instant};

async fn start(cfg: ServerConfig) -> (String, HubHandle) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("ws://{}/pilot", listener.local_addr().unwrap());
    let hub = HubHandle::spawn(cfg);
    tokio::spawn(serve(listener, hub.clone()));
    (url, hub)
}

#[tokio::test]
async fn second_pilot_is_denied_until_the_first_leaves() {
    let (url, hub) = start(ServerConfig::default()).await;
    let mut a = PilotClient::connect(&url).await.unwrap();
    let mut b = PilotClient::connect(&url).await.unwrap();
    let ra = a.hello(Role::Pilot, "a").await.unwrap();
    let rb = b.hello(Role::Pilot, "b").await.unwrap();
    assert!(matches!(ra, Admission::Granted { .. }));
    assert_eq!(rb, Admission::Denied("busy".into()));

    // The denied client still observes.
    let s = b.state_at(1, Duration::from_secs(2)).await.unwrap();
    let Admission::Granted { session, .. } = ra else {
        unreachable!()
    };
    assert_eq!(s.holder, Some(session));

    a.close().await;
    let deadline = Instant::now() + Duration::from_secs(5);
    while hub.snapshot().await.unwrap().holder.is_some() {
        assert!(Instant::now() < deadline, "token not released");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut c = PilotClient::connect(&url).await.unwrap();
    assert!(matches!(
        c.hello(Role::Pilot, "c").await.unwrap(),
        Admission::Granted { .. }
    ));
    hub.shutdown();
}

#[tokio::test]
async fn injected_latency_shows_in_round_trip() {
    let (url, hub) = start(ServerConfig {
        latency_ms: 100.0,
        ..ServerConfig::default()
    })
    .await;
    let mut c = PilotClient::connect(&url).await.unwrap();
    c.hello(Role::Observer, "o").await.unwrap();
    let rtt = c.ping(7).await.unwrap();
    assert!(rtt >= Duration::from_millis(200), "{rtt:?}");
    assert!(rtt < Duration::from_millis(1000), "{rtt:?}");
    hub.shutdown();
}

#[tokio::test]
async fn text_frames_are_a_protocol_error() {
    use futures_util::{SinkExt, StreamExt};
    use tokio_tungstenite::tungstenite::Message;
    let (url, hub) = start(ServerConfig::default()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    ws.send(Message::Text("hello".into())).await.unwrap();
    let mut saw_error = false;
    while let Some(Ok(m)) = ws.next().await {
        match m {
            Message::Binary(b) => saw_error |= matches!(decode_msg(&b).unwrap().body, Body::Error(_)),
            Message::Close(_) => break,
            _ => {}
        }
    }
    assert!(saw_error);
    hub.shutdown();
}

/// Sixty seconds of virtual time at the default rate.
#[tokio::test(start_paused = true)]
async fn observer_receives_one_push_per_tick() {
    let hub = HubHandle::spawn(ServerConfig::default());
    let mut conn = hub.connect().await.unwrap();
    conn.send(encode_msg(&client_message(1, 0.0, body::hello(Role::Observer, "o"))));
    let start = Instant::now();
    let end = start + Duration::from_secs(60);
    let mut pushes = 0u32;
    loop {
        let out = tokio::select! {
            o = conn.recv() => o,
            _ = tokio::time::sleep_until(end) => break,
        };
        if let Some(Outbound::Frame(b)) = out {
            pushes += u32::from(matches!(decode_msg(&b).unwrap().body, Body::StatePush(_)));
        }
    }
    assert!((1798..=1802).contains(&pushes), "{pushes}");
    hub.shutdown();
}
