//! Container backend against a fake daemon: verifies the REST call
//! sequence, request bodies, exec plumbing and teardown behavior without
//! a real container runtime.

use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use serde_json::json;

use oxn_core::compose::parse_compose;
use oxn_core::config::{SueSpec, DEFAULT_READINESS_TIMEOUT};
use oxn_core::minihttp::{Handler, MiniServer, ServerRequest};
use oxn_core::orchestrator::docker::{ContainerRuntime, DockerHost};
use oxn_core::orchestrator::journal::Journal;
use oxn_core::orchestrator::{build_sue_from_compose, Runtime};
use oxn_core::time::WallClock;
use oxn_core::RuntimeApi;

#[derive(Default)]
struct DaemonState {
    calls: Vec<(String, String, serde_json::Value)>,
    containers: u32,
    execs: u32,
}

fn fake_daemon(state: Arc<Mutex<DaemonState>>) -> MiniServer {
    let handler: Arc<Handler> = Arc::new(move |req: &ServerRequest| {
        let body: serde_json::Value = if req.body.is_empty() {
            json!(null)
        } else {
            serde_json::from_slice(&req.body).unwrap_or(json!(null))
        };
        let mut state = state.lock().unwrap();
        state
            .calls
            .push((req.method.clone(), req.path.clone(), body));

        let path = req.path.as_str();
        if path == "/_ping" {
            return (200, "OK".to_string());
        }
        if path == "/networks/create" {
            return (201, json!({ "Id": "net-1" }).to_string());
        }
        if path == "/containers/create" {
            state.containers += 1;
            return (
                201,
                json!({ "Id": format!("ctr-{}", state.containers) }).to_string(),
            );
        }
        if path.ends_with("/exec") {
            state.execs += 1;
            return (
                201,
                json!({ "Id": format!("exec-{}", state.execs) }).to_string(),
            );
        }
        if path.starts_with("/exec/") && path.ends_with("/start") {
            return (200, String::new());
        }
        if path.starts_with("/exec/") && path.ends_with("/json") {
            return (200, json!({ "ExitCode": 0 }).to_string());
        }
        // start/pause/unpause/kill/stop/remove and network delete
        (204, String::new())
    });
    MiniServer::bind("127.0.0.1:0", handler).unwrap()
}

#[test]
fn container_runtime_speaks_the_daemon_api() {
    let state = Arc::new(Mutex::new(DaemonState::default()));
    let daemon = fake_daemon(state.clone());
    let daemon_port = daemon.addr().port();

    // the test itself plays the published container port so the TCP
    // readiness probe succeeds immediately
    let app_listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let app_port = app_listener.local_addr().unwrap().port();

    let compose = parse_compose(&format!(
        r#"
services:
  app:
    image: demo/app:1
    ports: ["{app_port}:80"]
    environment:
      MODE: test
    depends_on: [backend]
  backend:
    image: demo/backend:1
    ports: ["{app_port}:81"]
"#
    ))
    .unwrap();
    let sue = SueSpec {
        compose_path: "unused.yml".into(),
        exclude: vec![],
        include: None,
        readiness_timeout: DEFAULT_READINESS_TIMEOUT,
    };
    let journal = Arc::new(Journal::new());
    let model = build_sue_from_compose(compose, &sue, &[], &journal, 0).unwrap();

    let host = DockerHost::from_spec(&format!("tcp://127.0.0.1:{daemon_port}"));
    let runtime = ContainerRuntime::new(
        host,
        model,
        "wiretest",
        journal.clone(),
        Arc::new(WallClock),
    );

    runtime
        .start(10_000)
        .expect("start against the fake daemon");

    {
        let state = state.lock().unwrap();
        let paths: Vec<&str> = state.calls.iter().map(|(_, p, _)| p.as_str()).collect();
        assert!(paths.contains(&"/_ping"));
        assert!(paths.contains(&"/networks/create"));
        // both services created and started
        assert_eq!(
            paths
                .iter()
                .filter(|p| p.starts_with("/containers/create"))
                .count(),
            2
        );
        assert_eq!(
            paths
                .iter()
                .filter(|p| p.ends_with("/start") && p.starts_with("/containers/"))
                .count(),
            2
        );
        // dependency order: backend is created before app
        let create_bodies: Vec<&serde_json::Value> = state
            .calls
            .iter()
            .filter(|(_, p, _)| p.starts_with("/containers/create"))
            .map(|(_, _, b)| b)
            .collect();
        assert_eq!(create_bodies[0]["Image"], "demo/backend:1");
        assert_eq!(create_bodies[1]["Image"], "demo/app:1");
        // environment and port bindings travel in the create body
        assert!(create_bodies[1]["Env"]
            .as_array()
            .unwrap()
            .iter()
            .any(|e| e == "MODE=test"));
        assert!(create_bodies[1]["ExposedPorts"].get("80/tcp").is_some());
        assert_eq!(
            create_bodies[1]["HostConfig"]["PortBindings"]["80/tcp"][0]["HostPort"],
            app_port.to_string()
        );
        // services join the run network under their service alias
        assert_eq!(
            create_bodies[1]["NetworkingConfig"]["EndpointsConfig"]["net-1"]["Aliases"][0],
            "app"
        );
    }

    // runtime mutations hit the right endpoints
    runtime.pause("app").unwrap();
    runtime.unpause("app").unwrap();
    let exec = runtime
        .exec("app", &["tc".into(), "-V".into()])
        .expect("exec through the daemon");
    assert!(exec.success());
    runtime.kill("backend").unwrap();

    let summary = runtime.teardown();
    assert!(!summary.already_torn_down);
    assert_eq!(summary.pre_terminated, vec!["backend".to_string()]);
    assert_eq!(summary.stopped, vec!["app".to_string()]);
    assert!(runtime.teardown().already_torn_down);

    let state = state.lock().unwrap();
    let calls: Vec<String> = state
        .calls
        .iter()
        .map(|(m, p, _)| format!("{m} {p}"))
        .collect();
    let has = |needle: &str| calls.iter().any(|c| c.contains(needle));
    assert!(has("/pause"));
    assert!(has("/unpause"));
    assert!(has("/exec"));
    assert!(has("/kill"));
    // teardown stops and removes the live container, force-removes both,
    // and deletes the run network
    assert!(has("/stop"));
    assert!(
        calls
            .iter()
            .filter(|c| c.starts_with("DELETE /containers/"))
            .count()
            >= 2
    );
    assert!(has("DELETE /networks/net-1"));
    drop(app_listener);
}
