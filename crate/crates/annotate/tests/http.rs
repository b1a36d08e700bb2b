use std::sync::Arc;

use annotate::store::parse_export;
use annotate::{router, AnnotationItem, Store};
use causalign::metrics::{cohens_kappa, Verdict};
use causalign::tagged::{Extraction, Relation};
use serde_json::{json, Value};

async fn spawn(dir: &std::path::Path) -> (String, tokio::task::JoinHandle<()>) {
    let store = Arc::new(Store::open(dir).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let handle = tokio::spawn(async move {
        axum::serve(listener, router(store)).await.unwrap();
    });
    (base, handle)
}

fn items(n: usize) -> Vec<AnnotationItem> {
    (0..n)
        .map(|i| AnnotationItem {
            item_id: format!("item-{i}"),
            source: format!("Demand fell {i} percent, so output dropped."),
            reference: Extraction::new(&format!("Demand fell {i} percent"), Relation::Cause, "output dropped").unwrap(),
            output: Extraction::new("Demand fell", Relation::Cause, "output dropped.").unwrap(),
        })
        .collect()
}

async fn create(client: &reqwest::Client, base: &str, items: &[AnnotationItem]) -> String {
    let resp = client.post(format!("{base}/sessions")).json(&json!({ "items": items })).send().await.unwrap();
    assert_eq!(resp.status(), 201);
    resp.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_string()
}

async fn submit(client: &reqwest::Client, base: &str, sid: &str, item: &str, who: &str, verdict: &str) -> reqwest::Response {
    client
        .post(format!("{base}/sessions/{sid}/verdicts"))
        .json(&json!({ "item_id": item, "annotator": who, "verdict": verdict }))
        .send()
        .await
        .unwrap()
}

#[tokio::test]
async fn annotate_two_annotators_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _server) = spawn(dir.path()).await;
    let client = reqwest::Client::new();
    let sid = create(&client, &base, &items(6)).await;

    let a = ["valid", "valid", "invalid", "valid", "invalid", "invalid"];
    let b = ["valid", "invalid", "invalid", "valid", "valid", "invalid"];
    for (who, verdicts) in [("alice", a), ("bob", b)] {
        loop {
            let next: Value = client
                .get(format!("{base}/sessions/{sid}/next?annotator={who}"))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            if next.get("done").is_some() {
                break;
            }
            let id = next["item"]["item_id"].as_str().unwrap().to_string();
            let k: usize = id.trim_start_matches("item-").parse().unwrap();
            let resp = submit(&client, &base, &sid, &id, who, verdicts[k]).await;
            assert_eq!(resp.status(), 200);
            assert_eq!(resp.json::<Value>().await.unwrap(), json!({ "ok": true }));
        }
        let p: Value = client
            .get(format!("{base}/sessions/{sid}/progress?annotator={who}"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(p, json!({ "answered": 6, "total": 6 }));
    }

    let text = client.get(format!("{base}/sessions/{sid}/export")).send().await.unwrap().text().await.unwrap();
    let (records, summary) = parse_export(&text).unwrap();
    assert_eq!(records.len(), 12);
    let pair = &summary.unwrap().pairs[0];
    // 4 of 6 agree; each annotator marks 3 valid: p_e = 0.5, kappa = (4/6 - 0.5) / 0.5
    assert!((pair.agreement - 4.0 / 6.0).abs() < 1e-12);
    assert!((pair.kappa - 1.0 / 3.0).abs() < 1e-12);
    let va: Vec<Verdict> = a.iter().map(|v| v.parse().unwrap()).collect();
    let vb: Vec<Verdict> = b.iter().map(|v| v.parse().unwrap()).collect();
    assert!((cohens_kappa::<f64>(&va, &vb).unwrap().value - pair.kappa).abs() < 1e-12);
}

#[tokio::test]
async fn validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _server) = spawn(dir.path()).await;
    let client = reqwest::Client::new();
    let sid = create(&client, &base, &items(2)).await;

    let resp = submit(&client, &base, &sid, "item-0", "alice", "maybe").await;
    assert_eq!(resp.status(), 400);
    assert!(resp.json::<Value>().await.unwrap()["error"].as_str().unwrap().contains("maybe"));
    assert_eq!(submit(&client, &base, &sid, "nope", "alice", "valid").await.status(), 404);
    assert_eq!(submit(&client, &base, "missing", "item-0", "alice", "valid").await.status(), 404);
    let resp = client.get(format!("{base}/sessions/{sid}/next")).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let resp = client.post(format!("{base}/sessions")).body("{not json").send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let resp = client.post(format!("{base}/sessions")).json(&json!({ "items": [] })).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let dup = vec![items(1)[0].clone(), items(1)[0].clone()];
    let resp = client.post(format!("{base}/sessions")).json(&json!({ "items": dup })).send().await.unwrap();
    assert_eq!(resp.status(), 400);
}

#[tokio::test]
async fn exact_match_filter_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _server) = spawn(dir.path()).await;
    let client = reqwest::Client::new();
    let mut list = items(3);
    list[1].output = list[1].reference.clone();
    let sid = create(&client, &base, &list).await;
    let p: Value = client
        .get(format!("{base}/sessions/{sid}/progress?annotator=x"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(p["total"], 2);
    let resp = client
        .post(format!("{base}/sessions"))
        .json(&json!({ "items": list, "options": { "filter_exact_match": false } }))
        .send()
        .await
        .unwrap();
    let sid: String = resp.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().into();
    let p: Value = client
        .get(format!("{base}/sessions/{sid}/progress?annotator=x"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(p["total"], 3);
}

#[tokio::test]
async fn restart_preserves_acknowledged_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let client = reqwest::Client::new();
    let (base, server) = spawn(dir.path()).await;
    let sid = create(&client, &base, &items(3)).await;
    assert_eq!(submit(&client, &base, &sid, "item-0", "alice", "invalid").await.status(), 200);
    server.abort();
    let _ = server.await;

    let (base, _server) = spawn(dir.path()).await;
    let next: Value = client
        .get(format!("{base}/sessions/{sid}/next?annotator=alice"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(next["item"]["item_id"], "item-1");
    let text = client.get(format!("{base}/sessions/{sid}/export")).send().await.unwrap().text().await.unwrap();
    let (records, _) = parse_export(&text).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].verdict, Verdict::Invalid);
}
