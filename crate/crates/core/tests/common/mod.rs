//! Fixtures and oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabletop::geometry::{bin_angle, Observation, PixelPose, WorkspaceFrame};
use tabletop::model::{Goal, Model, ModelConfig};
use tabletop::nn::{ParamStore, Tape, Tensor};

/// Black, flat observation with a random-valued `side x side` patch whose
/// top-left corner sits at `at`.
pub fn patch_observation(n: usize, side: usize, at: (usize, usize), seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Observation::filled(WorkspaceFrame::square(n), [0.0; 3]);
    for a in 0..side {
        for b in 0..side {
            let p = (at.0 + a) * n + at.1 + b;
            for ch in 0..3 {
                obs.color[p * 3 + ch] = rng.random();
            }
            obs.height[p] = rng.random_range(0.0..0.05);
        }
    }
    obs
}

/// Smooth random pattern: Gaussian bumps whose mass lies within `radius` of
/// `center`, so rotating the crop window does not truncate it.
fn blob_features(n: usize, d: usize, center: (f64, f64), radius: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 5]> {
    (0..12)
        .map(|_| {
            let r = radius * 0.4 * rng.random::<f64>().sqrt();
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let _ = (n, d);
            [
                center.0 + r * t.cos(),
                center.1 + r * t.sin(),
                rng.random_range(1.5..2.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..d as f64).floor(),
            ]
        })
        .collect()
}

fn render(n: usize, d: usize, bumps: &[[f64; 5]], warp: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f64> {
    let mut t = Tensor::zeros(n, n, d);
    for u in 0..n {
        for v in 0..n {
            let (x, y) = warp(u as f64, v as f64);
            for bump in bumps {
                let r2 = (x - bump[0]).powi(2) + (y - bump[1]).powi(2);
                t.data[(u * n + v) * d + bump[4] as usize] += bump[3] * (-r2 / (2.0 * bump[2] * bump[2])).exp();
            }
        }
    }
    t
}

/// Query map with a pattern around `pick`, and a key map holding the same
/// pattern rotated by `theta_r` and moved to `place`. Returns the query, the
/// key, the pick and the expected `(u, v, bin)`.
pub fn rotation_fixture(n: usize, c: usize, d: usize, k: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, PixelPose, (usize, usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = c / 2;
    let lo = half;
    let hi = n - half;
    let pick = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let place = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let r = rng.random_range(0..k);
    let bumps = blob_features(n, d, (pick.0 as f64, pick.1 as f64), half as f64, &mut rng);
    let query = render(n, d, &bumps, |u, v| (u, v));
    let (s, co) = bin_angle(r, k).sin_cos();
    // key(x) = query(pick + R(-theta) (x - place))
    let key = render(n, d, &bumps, |u, v| {
        let (du, dv) = (u - place.0 as f64, v - place.1 as f64);
        (pick.0 as f64 + co * du + s * dv, pick.1 as f64 - s * du + co * dv)
    });
    (query, key, PixelPose::new(pick.0, pick.1, 0, 1), (place.0, place.1, r))
}

/// Argmax `(u, v, bin)` of correlating the rotated query crops with the key.
pub fn recover_rotation(query: &Tensor<f64>, key: &Tensor<f64>, pick: &PixelPose, c: usize, k: usize) -> (usize, usize, usize) {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let q = tape.input(query.clone());
    let kv = tape.input(key.clone());
    let crops = tape.rotated_crops(q, pick.u, pick.v, c, k).unwrap();
    let out = tape.correlate(crops, kv).unwrap();
    tabletop::model::argmax(tape.value(out)).unwrap()
}

/// Worst relative error between analytic and central-difference gradients
/// over `probes` random scalars of each head, on a random 16x16 scene.
pub fn gradient_check(probes: usize, seed: u64) -> (f64, f64) {
    let cfg = ModelConfig::miniature();
    let mut model = Model::<f64>::new(cfg.clone(), 16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // reduce ReLU kinks by perturbing every parameter away from zero init
    for p in &mut model.params.params {
        for x in &mut p.value {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    let obs = patch_observation(16, 16, (0, 0), seed);
    let text = "put the red block in the blue bowl";
    let goal = Goal::Text(text);
    let pick = PixelPose::new(rng.random_range(0..16), rng.random_range(0..16), 0, cfg.k_pick);
    let place = PixelPose::new(rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..cfg.k_place), cfg.k_place);
    let out = model.loss_and_grads(&obs, &goal, &pick, &place).unwrap();
    let (pick_ids, place_ids) = model.head_params();
    // 1e-6 lets FFT round-off swamp gradients near 1e-6
    let eps = 1e-5;
    let mut worst = [0.0f64; 2];
    for (h, ids) in [pick_ids, place_ids].iter().enumerate() {
        for _ in 0..probes {
            let i = ids[rng.random_range(0..ids.len())];
            let j = rng.random_range(0..model.params.params[i].value.len());
            let x0 = model.params.params[i].value[j];
            let mut eval = |x: f64| {
                model.params.params[i].value[j] = x;
                let o = model.loss_and_grads(&obs, &goal, &pick, &place).unwrap();
                o.pick_loss + o.place_loss
            };
            let numeric = (eval(x0 + eps) - eval(x0 - eps)) / (2.0 * eps);
            model.params.params[i].value[j] = x0;
            let analytic = out.grads[i][j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst[h] = worst[h].max(rel);
        }
    }
    (worst[0], worst[1])
}

/// Shift `obs` content by `(du, dv)`; uncovered pixels become black and flat.
pub fn shift_observation(obs: &Observation, du: i64, dv: i64) -> Observation {
    let (h, w) = obs.shape();
    let mut out = Observation::filled(obs.frame, [0.0; 3]);
    for u in 0..h as i64 {
        for v in 0..w as i64 {
            let (su, sv) = (u - du, v - dv);
            if su < 0 || sv < 0 || su >= h as i64 || sv >= w as i64 {
                continue;
            }
            let (d, s) = ((u * w as i64 + v) as usize, (su * w as i64 + sv) as usize);
            out.color[d * 3..d * 3 + 3].copy_from_slice(&obs.color[s * 3..s * 3 + 3]);
            out.height[d] = obs.height[s];
        }
    }
    out
}

/// Counts `(hits, trials)` of spatial-only pick argmax following a random
/// content shift, with the content kept `c/2` away from the borders.
pub fn equivariance_trials(trials: usize, seed: u64) -> (usize, usize) {
    let cfg = ModelConfig::variant("spatial-only").unwrap();
    let model = Model::<f32>::new(cfg.clone(), 128, 128).unwrap();
    let margin = cfg.crop / 2;
    let side = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for t in 0..trials {
        let span = 128 - 2 * margin - side;
        let at = (margin + rng.random_range(0..=span), margin + rng.random_range(0..=span));
        let obs = patch_observation(128, side, at, seed * 1000 + t as u64);
        let to = (margin + rng.random_range(0..=span), margin + rng.random_range(0..=span));
        let (du, dv) = (to.0 as i64 - at.0 as i64, to.1 as i64 - at.1 as i64);
        let shifted = shift_observation(&obs, du, dv);
        let a = tabletop::model::argmax(&model.forward_pick(&obs, &Goal::None).unwrap()).unwrap();
        let b = tabletop::model::argmax(&model.forward_pick(&shifted, &Goal::None).unwrap()).unwrap();
        if (a.0 as i64 + du, a.1 as i64 + dv, a.2) == (b.0 as i64, b.1 as i64, b.2) {
            hits += 1;
        }
    }
    (hits, trials)
}
