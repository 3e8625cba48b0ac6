use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use qcompare_client::ReviewClient;
use qcompare_core::evalkit::{McqRecord, QuestionType, Split};
use qcompare_core::corpus::{ImageGroup, ImageRef};
use qcompare_core::review::{
    Arm, CrossExamStatus, PayloadImage, Resolution, ReviewPayload, ReviewStore, ReviewTask, StoredTask, SubmitOutcome,
};
use serde_json::Value;
use tokio::sync::oneshot;

struct Running {
    client: ReviewClient,
    stop: oneshot::Sender<()>,
    handle: tokio::task::JoinHandle<()>,
}

impl Running {
    async fn start(dir: &Path) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (stop, rx) = oneshot::channel::<()>();
        let dir: PathBuf = dir.to_path_buf();
        let handle = tokio::spawn(async move {
            qcompare_service::serve(listener, &dir, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        let client = ReviewClient::new(format!("http://{addr}"));
        for _ in 0..50 {
            if client.health().await.is_ok() {
                break;
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        }
        Self { client, stop, handle }
    }

    async fn stop(self) {
        self.stop.send(()).unwrap();
        self.handle.await.unwrap();
    }
}

fn payloads(prefix: &str, n: usize, size: usize) -> Vec<ReviewPayload> {
    (0..n)
        .map(|i| ReviewPayload {
            images: (0..size)
                .map(|j| PayloadImage {
                    image_id: format!("{prefix}-{i}-{j}"),
                    uri: Some(format!("https://img.example/{prefix}-{i}-{j}.jpg")),
                })
                .collect(),
            descriptions: (0..size).map(|j| format!("description {j}")).collect(),
            comparison: format!("The first image is better ({prefix}{i})."),
        })
        .collect()
}

fn shape(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
        Value::Array(a) => Value::Array(a.iter().map(shape).collect()),
        Value::String(_) => "s".into(),
        Value::Number(_) => "n".into(),
        Value::Bool(_) => "b".into(),
        Value::Null => "null".into(),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn blinded_batch_of_500() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Running::start(dir.path()).await;
    let n = svc
        .client
        .create_batch("spot", &payloads("k", 300, 3), &payloads("r", 280, 3), 250, 11)
        .await
        .unwrap();
    assert_eq!(n, 500);

    // raw bytes, not the typed view, so unknown fields would show up
    let raw: Value = reqwest::get(format!("{}/tasks?batch=spot", svc.client.base_url()))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let tasks = raw.as_array().unwrap();
    assert_eq!(tasks.len(), 500);
    svc.stop().await;

    let store = ReviewStore::open(dir.path()).unwrap();
    let arms: HashMap<String, Arm> = {
        // arm labels are only recoverable from the server-side log
        let log = std::fs::read_to_string(store.path()).unwrap();
        let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        first["tasks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| {
                let arm = if t["hidden_arm"] == "kept" { Arm::Kept } else { Arm::Removed };
                (t["task"]["task_id"].as_str().unwrap().to_string(), arm)
            })
            .collect()
    };
    let mut shapes: BTreeMap<Arm, BTreeSet<String>> = BTreeMap::new();
    let mut counts: BTreeMap<Arm, usize> = BTreeMap::new();
    for t in tasks {
        let text = t.to_string();
        assert!(!text.contains("hidden_arm") && !text.contains("\"kept\"") && !text.contains("\"removed\""));
        let arm = arms[t["task_id"].as_str().unwrap()];
        *counts.entry(arm).or_default() += 1;
        shapes.entry(arm).or_default().insert(shape(t).to_string());
    }
    assert_eq!(counts[&Arm::Kept], 250);
    assert_eq!(counts[&Arm::Removed], 250);
    assert_eq!(shapes[&Arm::Kept], shapes[&Arm::Removed]);
    assert_eq!(shapes[&Arm::Kept].len(), 1);
}

fn seed_fixture(dir: &Path) -> Vec<StoredTask> {
    let tasks: Vec<StoredTask> = payloads("k", 8, 2)
        .into_iter()
        .map(|p| (Arm::Kept, p))
        .chain(payloads("r", 2, 2).into_iter().map(|p| (Arm::Removed, p)))
        .enumerate()
        .map(|(i, (hidden_arm, payload))| StoredTask {
            task: ReviewTask {
                task_id: format!("fx-{i:02}"),
                batch: "fx".into(),
                payload,
            },
            hidden_arm,
        })
        .collect();
    ReviewStore::open(dir).unwrap().add_batch("fx", tasks.clone()).unwrap();
    tasks
}

#[tokio::test(flavor = "multi_thread")]
async fn report_fixture_and_durability() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = seed_fixture(dir.path());
    let svc = Running::start(dir.path()).await;
    let c = &svc.client;
    let err = c.report("fx").await.unwrap_err();
    assert_eq!(err.status(), Some(422));

    let (mut kept, mut removed) = (0, 0);
    for t in &tasks {
        let correct = match t.hidden_arm {
            Arm::Kept => {
                kept += 1;
                kept <= 7
            }
            Arm::Removed => {
                removed += 1;
                removed == 1
            }
        };
        assert_eq!(c.submit_verdict(&t.task.task_id, "rev-1", correct).await.unwrap(), SubmitOutcome::Stored);
    }
    let before = c.report("fx").await.unwrap();
    assert_eq!(before.kept.rate, Some(0.875));
    assert_eq!(before.removed.rate, Some(0.5));
    assert_eq!(before.kept.verdicts + before.removed.verdicts, before.overall.verdicts);
    svc.stop().await;

    let svc = Running::start(dir.path()).await;
    let after = svc.client.report("fx").await.unwrap();
    assert_eq!(before, after);
    assert_eq!(svc.client.verdicts("fx", Some("rev-1")).await.unwrap().len(), 10);
    svc.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn verdict_errors_and_idempotency() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Running::start(dir.path()).await;
    let c = &svc.client;
    c.create_batch("b", &payloads("k", 3, 2), &payloads("r", 3, 2), 2, 1).await.unwrap();
    let tasks = c.tasks("b").await.unwrap();
    let id = &tasks[0].task_id;
    assert_eq!(c.submit_verdict(id, "ann", true).await.unwrap(), SubmitOutcome::Stored);
    assert_eq!(c.submit_verdict(id, "ann", true).await.unwrap(), SubmitOutcome::Duplicate);
    assert_eq!(c.verdicts("b", None).await.unwrap().len(), 1);
    assert!(c.submit_verdict(id, "ann", false).await.unwrap_err().is_conflict());
    assert!(c.submit_verdict("missing", "ann", true).await.unwrap_err().is_not_found());
    assert!(c.tasks("nope").await.unwrap_err().is_not_found());
    assert!(c.create_batch("b", &payloads("k", 3, 2), &payloads("r", 3, 2), 1, 1).await.unwrap_err().is_conflict());
    let short = c.create_batch("c", &payloads("k", 3, 2), &payloads("r", 1, 2), 2, 1).await.unwrap_err();
    assert_eq!(short.status(), Some(422));
    assert!(short.to_string().contains("feasible k = 1"));
    assert_eq!(c.batches().await.unwrap(), vec!["b".to_string()]);
    let all = c.report("b").await.unwrap();
    assert_eq!(all.overall.verdicts, 1);
    svc.stop().await;
}

fn mcq(id: &str) -> McqRecord {
    McqRecord {
        id: id.into(),
        group: ImageGroup::new(vec![ImageRef::new("a"), ImageRef::new("b"), ImageRef::new("c"), ImageRef::new("d")])
            .unwrap(),
        question: "Which image has the most noise?".into(),
        options: vec!["first".into(), "second".into(), "third".into(), "fourth".into()],
        answer_index: Some(1),
        qtype: QuestionType::Which,
        split: Split::Test,
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn crossexam_flow() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Running::start(dir.path()).await;
    let c = &svc.client;
    assert_eq!(c.create_crossexam(&[mcq("q/1"), mcq("q2")]).await.unwrap(), 2);
    assert_eq!(c.pending().await.unwrap().len(), 2);

    let t = c.resolve("q/1", Resolution::Confirm, Some("expert")).await.unwrap();
    assert_eq!((t.status, t.final_answer_index), (CrossExamStatus::Confirmed, Some(1)));
    assert_eq!(c.pending().await.unwrap().len(), 1);
    assert!(c.resolve("q/1", Resolution::Confirm, None).await.unwrap_err().is_conflict());

    let t = c.resolve("q2", Resolution::Edit { new_index: 2 }, None).await.unwrap();
    assert_eq!(t.status, CrossExamStatus::Edited);
    assert_eq!((t.proposed_answer_index, t.final_answer_index), (1, Some(2)));
    assert!(c.resolve("q3", Resolution::Confirm, None).await.unwrap_err().is_not_found());
    svc.stop().await;

    let svc = Running::start(dir.path()).await;
    assert!(svc.client.pending().await.unwrap().is_empty());
    svc.stop().await;
}
