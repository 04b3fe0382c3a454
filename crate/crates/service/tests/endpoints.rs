use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sal_core::annotation::{rle, AnnotationQueue, AnnotationRequest, Annotator, BatchRequest, QueueAnnotator};
use sal_core::data::{Dataset, Image, Mask, Sample, Split};
use sal_service::{router, AppState};

fn request(id: &str, want_mask: bool) -> AnnotationRequest {
    AnnotationRequest {
        run_id: "run-1".into(),
        iteration: 2,
        sample_id: id.into(),
        width: 4,
        height: 4,
        image_png: String::new(),
        want_mask,
        class_names: vec!["a".into(), "b".into()],
    }
}

fn app(queue: &Arc<AnnotationQueue>, token: Option<&str>) -> axum::Router {
    router(AppState::new(Arc::clone(queue), token.map(str::to_string)))
}

async fn call(app: axum::Router, method: Method, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut builder = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        builder = builder.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(v) => builder
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

#[tokio::test]
async fn full_batch_flips_phase_to_training() {
    let queue = Arc::new(AnnotationQueue::new());
    queue.open_batch(vec![request("x", true), request("y", true)], 2, 0.15);

    let (s, status) = call(app(&queue, None), Method::GET, "/status", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(status["phase"], "ANNOTATING");
    assert_eq!(status["humanPhase"], true);
    assert_eq!(status["pending"], 2);
    assert_eq!(status["runId"], "run-1");

    let (_, batch) = call(app(&queue, None), Method::GET, "/batch", None, None).await;
    assert_eq!(batch.as_array().unwrap().len(), 2);
    assert_eq!(batch[0]["wantMask"], true);

    for id in ["x", "y"] {
        let body = json!({"sampleId": id, "label": 1, "mask": "0:10,1:6", "annotatorId": "a1", "elapsedMs": 900});
        let (s, ack) = call(app(&queue, None), Method::POST, "/annotation", Some(body), None).await;
        assert_eq!(s, StatusCode::OK, "{ack}");
    }
    let (_, status) = call(app(&queue, None), Method::GET, "/status", None, None).await;
    assert_eq!(status["phase"], "TRAINING");
    assert_eq!(status["pending"], 0);
    let (_, batch) = call(app(&queue, None), Method::GET, "/batch", None, None).await;
    assert!(batch.as_array().unwrap().is_empty());

    let answers = queue.wait(Duration::from_millis(10)).unwrap();
    let mask = rle::decode(answers[0].mask.as_deref().unwrap(), 4, 4).unwrap();
    let expected = Mask::from_shape_fn((4, 4), |(y, x)| y * 4 + x >= 10);
    assert_eq!(mask, expected);
}

#[tokio::test]
async fn rejections_carry_reasons() {
    let queue = Arc::new(AnnotationQueue::new());
    queue.open_batch(vec![request("x", true)], 2, 0.1);

    let unknown = json!({"sampleId": "nope", "label": 0, "mask": "0:16"});
    let (s, body) = call(app(&queue, None), Method::POST, "/annotation", Some(unknown), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UNKNOWN_SAMPLE");

    let bad_rle = json!({"sampleId": "x", "label": 0, "mask": "0:10,1:5"});
    let (s, body) = call(app(&queue, None), Method::POST, "/annotation", Some(bad_rle), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["reason"].as_str().unwrap().contains("15"), "{body}");

    let bad_label = json!({"sampleId": "x", "label": 5, "mask": "0:16"});
    let (s, _) = call(app(&queue, None), Method::POST, "/annotation", Some(bad_label), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, body) = call(app(&queue, None), Method::POST, "/annotation", Some(json!({"label": 1})), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "MALFORMED");

    // Duplicate submissions overwrite until the batch closes.
    let first = json!({"sampleId": "x", "label": 0, "mask": "0:16"});
    let (s, _) = call(app(&queue, None), Method::POST, "/annotation", Some(first), None).await;
    assert_eq!(s, StatusCode::OK);
    let late = json!({"sampleId": "x", "label": 1, "mask": "1:16"});
    let (s, body) = call(app(&queue, None), Method::POST, "/annotation", Some(late), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "CLOSED");
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let queue = Arc::new(AnnotationQueue::new());
    let (s, _) = call(app(&queue, Some("secret")), Method::GET, "/status", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(app(&queue, Some("secret")), Method::GET, "/status", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, body) = call(app(&queue, Some("secret")), Method::GET, "/status", None, Some("secret")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["phase"], "TRAINING");
}

/// The loop side blocks in the queue annotator while HTTP clients answer.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queue_annotator_receives_http_answers() {
    let queue = Arc::new(AnnotationQueue::new());
    let samples = vec![
        Sample::new("p", Image::from_elem((4, 4, 3), 0.2), 0),
        Sample::new("q", Image::from_elem((4, 4, 3), 0.7), 1),
    ];
    let train = Dataset::new("t", Split::Train, vec!["a".into(), "b".into()], samples).unwrap();
    let mut annotator = QueueAnnotator::new(Arc::clone(&queue), Duration::from_secs(20));
    let loop_side = std::thread::spawn(move || {
        let batch = BatchRequest { run_id: "live".into(), iteration: 0, ids: vec!["p".into(), "q".into()], want_mask: false };
        annotator.annotate(&train, &batch)
    });

    let pending = loop {
        let (_, batch) = call(app(&queue, None), Method::GET, "/batch", None, None).await;
        let items = batch.as_array().unwrap().clone();
        if items.len() == 2 {
            break items;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    };
    assert_eq!(pending[0]["wantMask"], false);
    assert!(!pending[0]["imagePng"].as_str().unwrap().is_empty());
    for item in &pending {
        let body = json!({"sampleId": item["sampleId"], "label": 1, "runId": "live"});
        let (s, _) = call(app(&queue, None), Method::POST, "/annotation", Some(body), None).await;
        assert_eq!(s, StatusCode::OK);
    }
    let answers = loop_side.join().unwrap().unwrap();
    assert_eq!(answers.len(), 2);
    assert!(answers.iter().all(|a| a.label == 1 && a.mask.is_none()));
}
