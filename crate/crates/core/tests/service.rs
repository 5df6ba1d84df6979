use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tokio::sync::oneshot;

use keyarg::engine::{Engine, EngineConfig, Phase, RunStatus, TaskEnvelope, TaskPayload};
use keyarg::eventlog::{Clock, EventLog};
use keyarg::sampling::SamplerConfig;
use keyarg::service::{bind, serve, AppState, SessionCreated};
use keyarg::sim::{SyntheticWorld, WorldConfig};

struct Server {
    base: String,
    state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn world() -> SyntheticWorld {
    SyntheticWorld::generate(WorldConfig { opinions: 60, clusters: 4, seed: 3, ..WorldConfig::default() })
}

fn config() -> EngineConfig {
    EngineConfig {
        run_id: "svc".into(),
        corpus_id: "synthetic".into(),
        annotators: 2,
        sampler: SamplerConfig { session_length: 6, ..SamplerConfig::default() },
        match_votes: 3,
        match_sample: 5,
        triples: 20,
        ..EngineConfig::default()
    }
}

fn engine(world: &SyntheticWorld, records: Vec<keyarg::eventlog::EventRecord>) -> Engine {
    Engine::open(
        config(),
        world.inputs(),
        Box::new(world.embedder()),
        None,
        EventLog::from_records(records, Clock::Logical),
        None,
    )
    .unwrap()
}

fn start(engine: Engine) -> Server {
    let state = AppState::new(engine, None);
    let (tx, rx) = oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let served = state.clone();
    let handle = thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            serve(listener, served, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Server { base: format!("http://{addr}"), state, stop: Some(tx), handle: Some(handle) }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(agent: &ureq::Agent, url: &str) -> (u16, Option<Value>) {
    let mut r = agent.get(url).call().unwrap();
    let status = r.status().as_u16();
    let body = if status == 204 { None } else { Some(r.body_mut().read_json::<Value>().unwrap()) };
    (status, body)
}

fn post(agent: &ureq::Agent, url: &str, body: Value) -> (u16, Value) {
    let mut r = agent.post(url).send_json(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json::<Value>().unwrap_or(Value::Null))
}

fn run_phase1(base: &str, annotator: &str) {
    let agent = agent();
    let (status, body) = post(&agent, &format!("{base}/sessions"), json!({ "annotator_id": annotator }));
    assert_eq!(status, 201, "{body}");
    let session: SessionCreated = serde_json::from_value(body).unwrap();
    let mut served = 0;
    loop {
        let (status, body) = get(&agent, &format!("{base}/sessions/{}/next", session.session_id));
        if status == 204 {
            break;
        }
        assert_eq!(status, 200);
        let task: TaskEnvelope = serde_json::from_value(body.unwrap()).unwrap();
        let TaskPayload::Phase1Opinion { text, arguments, .. } = task.payload else { panic!("not an opinion task") };
        let action = match (served % 3, arguments.first()) {
            (1, Some(a)) => json!({ "kind": "already", "argument_id": a.id }),
            (2, _) => json!({ "kind": "skip", "reason": "no_argument" }),
            _ => json!({ "kind": "new_argument", "text": text }),
        };
        let (status, body) = post(&agent, &format!("{base}/sessions/{}/actions", session.session_id), action);
        assert_eq!(status, 200, "{body}");
        served += 1;
    }
    assert_eq!(served, 6);
}

fn crowd_worker(base: &str, run_id: &str, worker: &str) -> usize {
    let agent = agent();
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut answered = 0;
    loop {
        assert!(Instant::now() < deadline, "{worker} timed out");
        let (_, status) = get(&agent, &format!("{base}/runs/{run_id}/report"));
        if status.unwrap()["phase"] == "done" {
            return answered;
        }
        let mut idle = true;
        for kind in ["topic_assign", "pair_similarity", "match_eval"] {
            let (status, body) = get(&agent, &format!("{base}/tasks/next?kind={kind}&annotator_id={worker}"));
            if status == 204 {
                continue;
            }
            assert_eq!(status, 200);
            let task: TaskEnvelope = serde_json::from_value(body.unwrap()).unwrap();
            let answer = match &task.payload {
                TaskPayload::TopicAssign { topics, .. } => {
                    json!({ "topics": (0..topics.len()).map(|k| k == 0).collect::<Vec<_>>() })
                }
                TaskPayload::PairSimilarity { first, second, .. } => json!({ "similar": first.stance == second.stance }),
                TaskPayload::MatchEval { .. } => json!({ "match": true }),
                TaskPayload::Phase1Opinion { .. } => unreachable!(),
            };
            let (status, body) = post(
                &agent,
                &format!("{base}/tasks/{}/answer", task.task_id),
                json!({ "annotator_id": worker, "answer": answer }),
            );
            // a task may close between serving and answering
            assert!(status == 200 || status == 409, "{status} {body}");
            answered += usize::from(status == 200);
            idle = false;
        }
        if idle {
            thread::sleep(Duration::from_millis(5));
        }
    }
}

#[test]
fn concurrent_annotators_complete_a_run() {
    let w = world();
    let server = start(engine(&w, Vec::new()));
    let base = server.base.clone();

    let phase1: Vec<_> = ["alice", "bob"]
        .into_iter()
        .map(|a| {
            let base = base.clone();
            thread::spawn(move || run_phase1(&base, a))
        })
        .collect();
    for h in phase1 {
        h.join().unwrap();
    }
    assert_ne!(server.state.status().phase, Phase::Phase1);

    let workers: Vec<_> = (0..5)
        .map(|k| {
            let base = base.clone();
            thread::spawn(move || crowd_worker(&base, "svc", &format!("w{k}")))
        })
        .collect();
    let answered: usize = workers.into_iter().map(|h| h.join().unwrap()).sum();
    assert!(answered > 0);

    let (status, body) = get(&agent(), &format!("{base}/runs/svc/report"));
    assert_eq!(status, 200);
    let status: RunStatus = serde_json::from_value(body.unwrap()).unwrap();
    assert_eq!(status.phase, Phase::Done);
    assert!(status.report.is_some());

    let (records, live) = server.state.with_engine(|e| (e.log().records().to_vec(), e.artifacts()));
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r.seq, k as u64, "log has a gap or reorder");
    }
    let replayed = engine(&w, records);
    assert_eq!(replayed.phase(), Phase::Done);
    assert_eq!(replayed.artifacts(), live);
}

#[test]
fn error_statuses() {
    let w = world();
    let server = start(engine(&w, Vec::new()));
    let base = &server.base;
    let a = agent();

    assert_eq!(get(&a, &format!("{base}/sessions/nope/next")).0, 404);
    assert_eq!(get(&a, &format!("{base}/runs/other/report")).0, 404);
    assert_eq!(post(&a, &format!("{base}/sessions"), json!({ "annotator_id": " " })).0, 400);

    let (status, body) = post(&a, &format!("{base}/sessions"), json!({ "annotator_id": "alice" }));
    assert_eq!(status, 201);
    let sid = body["session_id"].as_str().unwrap().to_string();
    // creating again returns the same session
    let (status, body) = post(&a, &format!("{base}/sessions"), json!({ "annotator_id": "alice" }));
    assert_eq!((status, body["session_id"].as_str().unwrap()), (201, sid.as_str()));
    assert_eq!(post(&a, &format!("{base}/sessions"), json!({ "annotator_id": "bob" })).0, 201);
    let (status, body) = post(&a, &format!("{base}/sessions"), json!({ "annotator_id": "carol" }));
    assert_eq!(status, 409);
    assert_eq!(body["status"], 409);
    assert!(body["error"].is_string());

    let skip = json!({ "kind": "skip", "reason": "no_argument" });
    assert_eq!(post(&a, &format!("{base}/sessions/{sid}/actions"), skip.clone()).0, 409);
    let (status, task) = get(&a, &format!("{base}/sessions/{sid}/next"));
    assert_eq!(status, 200);
    let (again_status, again) = get(&a, &format!("{base}/sessions/{sid}/next"));
    let (task, again) = (task.unwrap(), again.unwrap());
    assert_eq!(again_status, 200);
    assert_eq!((&again["task_id"], &again["payload"]), (&task["task_id"], &task["payload"]), "pending opinion is re-served");
    let already = json!({ "kind": "already", "argument_id": "missing" });
    assert_eq!(post(&a, &format!("{base}/sessions/{sid}/actions"), already).0, 400);
    let empty = json!({ "kind": "new_argument", "text": "  " });
    assert_eq!(post(&a, &format!("{base}/sessions/{sid}/actions"), empty).0, 400);
    assert_eq!(post(&a, &format!("{base}/sessions/{sid}/actions"), skip).0, 200);

    assert_eq!(get(&a, &format!("{base}/tasks/next?kind=pair_similarity&annotator_id=w1")).0, 204);
    let answer = json!({ "annotator_id": "w1", "answer": { "similar": true } });
    assert_eq!(post(&a, &format!("{base}/tasks/p-x~y/answer"), answer.clone()).0, 404);
    assert_eq!(post(&a, &format!("{base}/tasks/bogus/answer"), answer).0, 404);
    let malformed = json!({ "annotator_id": "w1", "answer": { "maybe": 1 } });
    assert_eq!(post(&a, &format!("{base}/tasks/t-x/answer"), malformed).0, 422);

    let before = server.state.with_engine(|e| e.log().len());
    let snapshot = server.state.status();
    assert_eq!(snapshot.sessions, 2);
    assert!(before >= 4);
}

#[test]
fn envelope_roundtrip() {
    let w = world();
    let mut e = engine(&w, Vec::new());
    let sid = e.create_session("alice").unwrap();
    let task = e.next_opinion(&sid).unwrap().unwrap();
    let value = serde_json::to_value(&task).unwrap();
    assert_eq!(value["kind"], "phase1_opinion");
    assert_eq!(value["task_id"], task.task_id.as_str());
    assert!(value["payload"]["text"].is_string());
    let back: TaskEnvelope = serde_json::from_value(value).unwrap();
    assert_eq!(back, task);
}
