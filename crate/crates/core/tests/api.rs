use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use surgeflow::demo_wildfire::{self, HotspotSource, WildfireConfig};
use surgeflow::service::{Engine, EngineConfig, HttpServer};
use surgeflow::wfcore::{StageRegistration, WorkflowDefinition};

struct Server {
    _dir: tempfile::TempDir,
    engine: Arc<Engine>,
    http: Option<HttpServer>,
    agent: ureq::Agent,
}

impl Server {
    fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let extra = vec![
            WorkflowDefinition::new("single", "single_init").stage(StageRegistration::new("single_init", |_| Ok(()))),
            WorkflowDefinition::new("slow", "slow_init").stage(StageRegistration::new("slow_init", |_| {
                std::thread::sleep(Duration::from_millis(600));
                Ok(())
            })),
        ];
        let engine = Engine::start_with(EngineConfig::with_data_dir(dir.path()), extra).unwrap();
        let http = HttpServer::start(engine.clone(), SocketAddr::from(([127, 0, 0, 1], 0)), false).unwrap();
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            _dir: dir,
            engine,
            http: Some(http),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.http.as_ref().unwrap().url())
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut resp = self.agent.get(&self.url(path)).call().unwrap();
        let status = resp.status().as_u16();
        (status, serde_json::from_str(&resp.body_mut().read_to_string().unwrap_or_default()).unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: &[u8]) -> (u16, Value) {
        let mut resp = self
            .agent
            .post(&self.url(path))
            .header("content-type", "application/json")
            .header("x-hotspot-source", "GROUND")
            .send(body)
            .unwrap();
        let status = resp.status().as_u16();
        (status, serde_json::from_str(&resp.body_mut().read_to_string().unwrap_or_default()).unwrap_or(Value::Null))
    }

    fn create(&self, kind: &str, payload: Value) -> (u16, Value) {
        let body = json!({ "workflow_kind": kind, "label": "api test", "initial_payload": payload });
        self.post("/api/incidents", body.to_string().as_bytes())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(h) = self.http.take() {
            h.stop().unwrap();
        }
        self.engine.shutdown();
    }
}

#[test]
fn incident_crud_and_errors() {
    let s = Server::start();
    assert_eq!(s.get("/api/health").0, 200);
    assert_eq!(s.get("/api/incidents"), (200, json!([])));

    let (status, body) = s.create("single", json!({}));
    assert_eq!(status, 201, "{body}");
    let id = body["incident_id"].as_str().unwrap().to_owned();
    let (_, list) = s.get("/api/incidents");
    assert_eq!(list[0]["incident_id"], json!(id));
    assert_eq!(list[0]["status"], json!("ACTIVE"));

    let (status, detail) = s.get(&format!("/api/incidents/{id}"));
    assert_eq!(status, 200);
    let nodes = detail["task_graph"]["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 1, "fresh incident has only its init message");
    assert_eq!(nodes[0]["queue"], json!("single_init"));
    for field in ["message_id", "status", "sent_timestamp", "delivered_timestamp", "duration_ms"] {
        assert!(nodes[0].get(field).is_some(), "node lacks {field}");
    }
    assert!(detail.get("statistics").is_some() && detail.get("endpoints").is_some());

    assert_eq!(s.create("nonexistent", json!({})).0, 400);
    let (status, body) = s.create("wildfire", json!({ "area_of_interest": { "min_lat": 5, "max_lat": 1, "min_lon": 0, "max_lon": 1 } }));
    assert_eq!(status, 400);
    assert!(body["error"].as_str().unwrap().contains("area_of_interest.min_lat"), "{body}");
    assert_eq!(s.post("/api/incidents", b"{not json").0, 400);

    assert_eq!(s.get("/api/incidents/00000000-0000-0000-0000-000000000000").0, 404);
    assert_eq!(s.get("/api/incidents/BADID").0, 404);
    assert_eq!(s.post("/api/incidents/BADID/cancel", b"").0, 404);

    assert_eq!(s.post(&format!("/api/incidents/{id}/cancel"), b"").0, 202);
    assert_eq!(s.post(&format!("/api/incidents/{id}/cancel"), b"").0, 409);
    let (_, detail) = s.get(&format!("/api/incidents/{id}"));
    assert_eq!(detail["incident"]["status"], json!("CANCELLED"));
}

#[test]
fn workflows_and_stats() {
    let s = Server::start();
    let (status, wf) = s.get("/api/workflows");
    assert_eq!(status, 200);
    let kinds: Vec<&str> = wf.as_array().unwrap().iter().map(|w| w["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"wildfire") && kinds.contains(&"single"));
    let wildfire = wf.as_array().unwrap().iter().find(|w| w["kind"] == json!("wildfire")).unwrap();
    let critical: Vec<&Value> = wildfire["stages"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|st| st["critical"] == json!(true))
        .collect();
    assert_eq!(critical.len(), 1);
    assert_eq!(critical[0]["queue"], json!("wfa_join"));
    assert_eq!(s.get("/api/workflows/nope/stats").0, 404);
    assert_eq!(s.get("/api/workflows/wildfire/stats").0, 200);
}

#[test]
fn edi_push_routes() {
    let s = Server::start();
    let config = WildfireConfig {
        hotspot_source: HotspotSource::Viirs,
        ..WildfireConfig::default()
    };
    let (status, body) = s.create("wildfire", config.to_payload());
    assert_eq!(status, 201);
    let id: surgeflow::ids::IncidentId = body["incident_id"].as_str().unwrap().parse().unwrap();
    let path = demo_wildfire::hotspot_path(id);

    // The init stage registers the endpoint asynchronously.
    let mut pushed = (0, Value::Null);
    for _ in 0..500 {
        pushed = s.post(&format!("/edi{path}"), &demo_wildfire::sample_fire_front(&config.area_of_interest));
        if pushed.0 != 404 {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(pushed.0, 202, "{}", pushed.1);
    assert!(pushed.1["message_id"].is_string());
    assert_eq!(s.post("/edi/no/such/path", b"x").0, 404);
    assert_eq!(s.post(&format!("/edi{path}"), b"").0, 202, "empty bodies are accepted");

    let (_, detail) = s.get(&format!("/api/incidents/{id}"));
    let endpoints = detail["endpoints"].as_array().unwrap();
    assert_eq!(endpoints.len(), 3);
    assert!(endpoints.iter().any(|e| e["path"] == json!(path) && e["kind"] == json!("PUSH")));
    assert!(endpoints.iter().any(|e| e["kind"] == json!("PULL")));

    let record = s.engine.wait_until_cleared(id, Duration::from_secs(20)).unwrap();
    assert_eq!(record.status, surgeflow::statestore::IncidentStatus::Completed);
    let (_, detail) = s.get(&format!("/api/incidents/{id}"));
    let queues: Vec<&str> = detail["task_graph"]["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n["queue"].as_str().unwrap())
        .collect();
    // The x-hotspot-source header routed the pushes to the ground branch.
    assert!(queues.contains(&"ground_format"));
    assert!(!queues.contains(&"viirs_extract") && !queues.contains(&"modis_extract"));
    assert_eq!(detail["endpoints"], json!([]), "cleanup deregisters endpoints");
    assert_eq!(s.post(&format!("/edi{path}"), b"late").0, 404);
}

#[test]
fn push_to_inactive_incident_conflicts() {
    let s = Server::start();
    let (_, body) = s.create("slow", json!({}));
    let id: surgeflow::ids::IncidentId = body["incident_id"].as_str().unwrap().parse().unwrap();
    s.engine.edi().register_push_endpoint(id, "/slow/inbox", "slow_init").unwrap();
    // Wait for the slow handler to start so cleanup is held back.
    s.engine
        .wait_for(id, Duration::from_secs(5), |_| s.engine.pool().busy_workers() > 0)
        .unwrap();
    assert_eq!(s.post(&format!("/api/incidents/{id}/cancel"), b"").0, 202);
    assert_eq!(s.post("/edi/slow/inbox", b"x").0, 409);
    s.engine.wait_until_cleared(id, Duration::from_secs(5)).unwrap();
    assert_eq!(s.post("/edi/slow/inbox", b"x").0, 404);
}

#[test]
fn oversized_push_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = EngineConfig::with_data_dir(dir.path());
    config.edi.max_push_bytes = 1024;
    let extra = vec![WorkflowDefinition::new("sink", "sink_init").stage(StageRegistration::new("sink_init", |_| Ok(())))];
    let engine = Engine::start_with(config, extra).unwrap();
    let http = HttpServer::start(engine.clone(), SocketAddr::from(([127, 0, 0, 1], 0)), false).unwrap();
    let id = engine.create_incident("sink", "x", json!({})).unwrap();
    engine.edi().register_push_endpoint(id, "/sink", "sink_init").unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let post = |n: usize| {
        agent
            .post(&format!("{}/edi/sink", http.url()))
            .send(&vec![b'a'; n][..])
            .map(|r| r.status().as_u16())
            .unwrap_or(413)
    };
    assert_eq!(post(1024), 202);
    assert_eq!(post(1025), 413);
    assert_eq!(post(64 * 1024), 413);
    http.stop().unwrap();
    engine.shutdown();
}
