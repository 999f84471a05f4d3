//! Engine against the mock tool server over real HTTP.

use std::net::SocketAddr;
use std::sync::mpsc;

use scenecraft::engine::{DecomposeMode, Engine, EngineConfig, FaultPlan, SessionOptions};
use scenecraft::layout::LayoutConfig;
use scenecraft::policy::Phase;
use scenecraft::tools::{FaultInjector, MockTools, ToolKind};
use scenecraft::vocab::Lexicon;
use scenecraft_cli::mock_server;

fn spawn_mock(faults: FaultInjector) -> SocketAddr {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let mock = MockTools { faults, lexicon: Lexicon::default(), layout_config: LayoutConfig::default() };
            axum::serve(listener, mock_server::router(mock)).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn http_engine(addr: SocketAddr, decompose: DecomposeMode) -> (tempfile::TempDir, Engine) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = EngineConfig { storage_root: dir.path().join("sessions"), mock: false, decompose, ..EngineConfig::default() };
    cfg.policy.images_per_concept = 1;
    cfg.tools.base_url = Some(format!("http://{addr}"));
    cfg.tools.max_retries = 0;
    (dir, Engine::new(cfg).unwrap())
}

#[test]
fn engine_runs_over_http() {
    let addr = spawn_mock(FaultInjector::none());
    let (_d, engine) = http_engine(addr, DecomposeMode::Auto);
    let s = engine.create_session("a blue wooden horse and a red oval vase", &SessionOptions::default()).unwrap();
    let s = engine.advance(&s.id).unwrap();
    assert_eq!(s.phase(), Phase::Done, "{:?}", s.state.reason);
    assert!(s.last_answers.iter().all(|a| a.yes));
    let png = engine.artifact_bytes(&s.id, s.current_image.as_deref().unwrap()).unwrap();
    assert_eq!(&png[..4], b"\x89PNG");
}

#[test]
fn faults_are_repaired_over_http() {
    // Faults live in the server's mock; the session plan carries none.
    let addr = spawn_mock(FaultInjector::color(0, "red"));
    let (_d, engine) = http_engine(addr, DecomposeMode::Rules);
    let opts = SessionOptions { faults: FaultPlan::None, ..SessionOptions::default() };
    let s = engine.create_session("a blue wooden horse and a red oval vase", &opts).unwrap();
    let s = engine.advance(&s.id).unwrap();
    assert_eq!(s.state.plan.shape()[..4], ["generate_concept_images", "customize", "verify", "local_edit"]);
    assert!(s.state.edit_round >= 1);
}

#[test]
fn same_result_as_in_process_mock() {
    let addr = spawn_mock(FaultInjector::none());
    let (_d1, remote) = http_engine(addr, DecomposeMode::Rules);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = EngineConfig { storage_root: dir.path().join("sessions"), decompose: DecomposeMode::Rules, ..EngineConfig::default() };
    cfg.policy.images_per_concept = 1;
    let local = Engine::new(cfg).unwrap();
    for prompt in ["a cat above a dog", "a red ball and a blue box", "three apples"] {
        let a = remote.create_session(prompt, &SessionOptions::default()).unwrap();
        let a = remote.advance(&a.id).unwrap();
        let b = local.create_session(prompt, &SessionOptions::default()).unwrap();
        let b = local.advance(&b.id).unwrap();
        assert_eq!(a.phase(), b.phase(), "{prompt}");
        let ia = remote.artifact_bytes(&a.id, a.current_image.as_deref().unwrap()).unwrap();
        let ib = local.artifact_bytes(&b.id, b.current_image.as_deref().unwrap()).unwrap();
        assert_eq!(ia, ib, "{prompt}: images differ between transports");
    }
}

#[test]
fn wire_rejects_bad_requests() {
    let addr = spawn_mock(FaultInjector::none());
    let client = reqwest::blocking::Client::new();
    let base = format!("http://{addr}");

    let r = client.post(format!("{base}{}", ToolKind::Verify.route())).body("{not json").send().unwrap();
    assert_eq!(r.status().as_u16(), 400);

    let body = serde_json::json!({ "kind": "text_to_image", "prompt": "a cat", "seed": 1 });
    let r = client.post(format!("{base}{}", ToolKind::Verify.route())).json(&body).send().unwrap();
    assert_eq!(r.status().as_u16(), 400, "kind mismatch");

    let r = client.post(format!("{base}/v1/teleport")).json(&body).send().unwrap();
    assert_eq!(r.status().as_u16(), 404);

    let r = client.post(format!("{base}{}", ToolKind::TextToImage.route())).json(&body).send().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let v: serde_json::Value = r.json().unwrap();
    assert_eq!(v["status"], "ok", "{v}");
}
