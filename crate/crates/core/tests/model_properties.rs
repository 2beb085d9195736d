mod common;

use common::*;

#[test]
fn spatial_stream_is_translation_equivariant() {
    let (hits, n) = equivariance_trials(8, 3);
    assert_eq!(hits, n);
}

#[test]
fn rotation_bins_are_recovered() {
    for k in [4, 36] {
        let mut hits = 0;
        for seed in 0..20 {
            let (q, key, pick, want) = rotation_fixture(96, 32, 3, k, seed);
            let got = recover_rotation(&q, &key, &pick, 32, k);
            eprintln!("k={k} got {got:?} want {want:?}");
            if got == want {
                hits += 1;
            }
        }
        assert!(hits >= 19, "k={k}: {hits}/20");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let (pick, place) = gradient_check(15, 7);
    assert!(pick < 1e-4 && place < 1e-4, "{pick} {place}");
}

#[test]
fn spatial_only_ignores_the_instruction() {
    let cfg = tabletop::model::ModelConfig::variant("spatial-only").unwrap();
    let model = tabletop::model::Model::<f32>::new(cfg, 128, 128).unwrap();
    let obs = patch_observation(128, 30, (40, 50), 9);
    let a = model.forward_pick(&obs, &tabletop::model::Goal::Text("put the red blocks in a blue bowl")).unwrap();
    let b = model.forward_pick(&obs, &tabletop::model::Goal::Text("bowl blue a in blocks red the put")).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn two_stream_depends_on_the_instruction() {
    let cfg = tabletop::model::ModelConfig::variant("two-stream").unwrap();
    let model = tabletop::model::Model::<f32>::new(cfg, 128, 128).unwrap();
    let obs = patch_observation(128, 30, (40, 50), 9);
    let a = model.forward_pick(&obs, &tabletop::model::Goal::Text("put the red blocks in a blue bowl")).unwrap();
    let b = model.forward_pick(&obs, &tabletop::model::Goal::Text("put the green blocks in a blue bowl")).unwrap();
    assert_ne!(a.data, b.data);
}
