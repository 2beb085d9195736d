use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tabletop::dataset::{Dataset, Source};
use tabletop::geometry::{PixelPose, WorkspaceFrame};
use tabletop::model::{Checkpoint, Goal, Model, ModelConfig};
use tabletop::service::Service;
use tabletop::tasks::{self, History, Split, TaskName};

fn post(s: &Service, path: &str, body: Value) -> Value {
    let (code, v) = s.handle("POST", path, body.to_string().as_bytes());
    assert_eq!(code, 200, "{path}: {v}");
    v
}

#[test]
fn scripted_human_episode_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let frame = WorkspaceFrame::standard();
    let svc = Service::new(dir.path().join("ckpts"), dir.path().join("human"), frame);
    let (task, split, seed) = (TaskName::PutBlocksInBowls, Split::Seen, 7);
    let v = post(&svc, "/v1/sessions", json!({"task": task, "split": split, "seed": seed}));
    let id = v["session"].as_str().unwrap().to_string();

    // Drive the session with the expert's choices, mirrored locally.
    let inst = tasks::sample_instance(task, split, seed, &frame).unwrap();
    let (mut state, goal) = (inst.state, inst.goal);
    let mut history = History::default();
    let mut last = v["state"].clone();
    while !last["done"].as_bool().unwrap() {
        let a = tasks::expert_action(&state, &goal, &history).unwrap();
        post(&svc, &format!("/v1/sessions/{id}/pick"), json!(a.pick));
        last = post(&svc, &format!("/v1/sessions/{id}/place"), json!(a.place));
        state = tasks::advance(&state, &goal, &mut history, &a);
    }
    assert_eq!(last["score"].as_f64().unwrap(), 100.0);
    assert_eq!(last["stored"]["score"].as_f64().unwrap(), 100.0);
    let (code, v) = svc.handle("POST", &format!("/v1/sessions/{id}/finish"), b"{}");
    assert_eq!((code, v["kind"].as_str()), (409, Some("protocol")));

    let ds = Dataset::load(&dir.path().join("human")).unwrap();
    assert_eq!(ds.episodes.len(), 1);
    let ep = &ds.episodes[0];
    assert_eq!(ep.source, Source::Human);
    let (seen, score) = ep.replay().unwrap();
    assert_eq!(score, ep.score);
    for (r, o) in ep.records.iter().zip(&seen) {
        assert_eq!(r.obs.color, o.color);
        assert_eq!(r.obs.height, o.height);
    }
    assert_eq!(ep.final_obs.as_ref().unwrap().color, tasks::observe(&state, &frame).color);
}

#[test]
fn overlay_argmax_matches_policy_action() {
    let dir = tempfile::tempdir().unwrap();
    let frame = WorkspaceFrame::standard();
    let model = Model::<f32>::new(ModelConfig::variant("two-stream").unwrap(), 128, 128).unwrap();
    Checkpoint::capture(&model, 0, &ChaCha8Rng::seed_from_u64(0))
        .save(&dir.path().join("ckpts").join("init.ckpt"))
        .unwrap();
    let svc = Service::new(dir.path().join("ckpts"), dir.path().join("human"), frame);
    let v = post(&svc, "/v1/sessions", json!({"task": "packing-box-pairs", "split": "seen", "seed": 3}));
    let id = v["session"].as_str().unwrap().to_string();

    let inst = tasks::sample_instance(TaskName::PackingBoxPairs, Split::Seen, 3, &frame).unwrap();
    let obs = tasks::observe(&inst.state, &frame);
    let text = inst.goal.instruction(&History::default());
    let want = model.act(&obs, &Goal::Text(&text)).unwrap();

    let pick = post(&svc, &format!("/v1/sessions/{id}/overlay"), json!({"checkpoint": "init", "head": "pick"}));
    let got: PixelPose = serde_json::from_value(pick["argmax"].clone()).unwrap();
    assert_eq!(got, want.pick);
    let map: Vec<f32> = serde_json::from_value(pick["map"].clone()).unwrap();
    assert_eq!(map.len(), 128 * 128);
    assert!(map.iter().all(|x| (0.0..=1.0).contains(x)));
    assert_eq!(map.iter().cloned().fold(0.0, f32::max), 1.0);

    let place = post(
        &svc,
        &format!("/v1/sessions/{id}/overlay"),
        json!({"checkpoint": "init", "head": "place", "pick": want.pick}),
    );
    let got: PixelPose = serde_json::from_value(place["argmax"].clone()).unwrap();
    assert_eq!(got, want.place);
    assert_eq!(place["k"].as_u64().unwrap(), 36);
}
