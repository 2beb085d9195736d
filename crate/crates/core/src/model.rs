//! Two-stream affordance model: a pick network and query/key place networks,
//! each combining a spatial RGB-D stream with a language-conditioned
//! semantic stream over a frozen backbone.
//!
//! The spatial stream is stride-free (dilated 3x3 convolutions), so it is
//! exactly translation equivariant away from the borders. The semantic
//! decoder upsamples the backbone bottleneck through three levels at 1/8,
//! 1/4 and 1/2 of the input size; each level is conditioned on the goal
//! vector and fused laterally with pooled spatial features.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{self, ImageFeatures, SemanticBackbone};
use crate::error::{Error, Result};
use crate::geometry::{Observation, PixelAction, PixelPose};
use crate::nn::{softmax, softmax_cross_entropy, ConvSpec, Init, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Dilations of the spatial stream's 3x3 layers.
const DILATIONS: [usize; 5] = [1, 2, 4, 8, 1];
/// Height maps are in meters; this brings table-top heights near unit scale.
const DEPTH_SCALE: f64 = 10.0;
pub const CHECKPOINT_VERSION: u32 = 1;
const HEAD_GAIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    TwoStream,
    SpatialOnly,
    SemanticOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    Language,
    ImageGoal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stream_mode: StreamMode,
    pub backbone: String,
    pub use_skips: bool,
    pub goal_mode: GoalMode,
    /// Query crop side `c`.
    pub crop: usize,
    pub k_pick: usize,
    pub k_place: usize,
    /// Correlation feature depth `d`.
    pub corr_dim: usize,
    pub decoder_widths: [usize; 3],
    pub spatial_width: usize,
    /// Initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stream_mode: StreamMode::TwoStream,
            backbone: "toy".into(),
            use_skips: true,
            goal_mode: GoalMode::Language,
            crop: 64,
            k_pick: 1,
            k_place: 36,
            corr_dim: 3,
            decoder_widths: [64, 32, 16],
            spatial_width: 16,
            seed: 0,
        }
    }
}

/// Names accepted by [`ModelConfig::variant`].
pub const VARIANTS: [&str; 7] = [
    "two-stream",
    "spatial-only",
    "semantic-only",
    "no-skips",
    "image-goal",
    "pretrained",
    "alternate",
];

impl ModelConfig {
    /// Configuration for a named ablation.
    pub fn variant(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "two-stream" => base,
            "spatial-only" => Self {
                stream_mode: StreamMode::SpatialOnly,
                goal_mode: GoalMode::None,
                ..base
            },
            "semantic-only" => Self {
                stream_mode: StreamMode::SemanticOnly,
                ..base
            },
            "no-skips" => Self {
                use_skips: false,
                ..base
            },
            "image-goal" => Self {
                stream_mode: StreamMode::SpatialOnly,
                goal_mode: GoalMode::ImageGoal,
                ..base
            },
            "pretrained" | "alternate" => Self {
                backbone: name.into(),
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown model variant {other}; expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Tiny two-stream network for gradient checks on 16x16 inputs.
    pub fn miniature() -> Self {
        Self {
            crop: 8,
            k_place: 4,
            corr_dim: 2,
            decoder_widths: [6, 5, 4],
            spatial_width: 3,
            ..Self::default()
        }
    }

    pub fn has_spatial(&self) -> bool {
        self.stream_mode != StreamMode::SemanticOnly
    }

    pub fn has_semantic(&self) -> bool {
        self.stream_mode != StreamMode::SpatialOnly
    }

    /// Side of the input window fed to the query network: room for every
    /// rotation of a `crop x crop` window, rounded up to a multiple of 16.
    pub fn query_side(&self) -> usize {
        let r = (self.crop as f64 * std::f64::consts::SQRT_2).ceil() as usize + 2;
        r.div_ceil(16) * 16
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.stream_mode, self.goal_mode) {
            (StreamMode::SpatialOnly, GoalMode::Language) => {
                return bad("spatial_only has no language path; use goal_mode none or image_goal".into())
            }
            (StreamMode::TwoStream | StreamMode::SemanticOnly, GoalMode::ImageGoal | GoalMode::None) => {
                return bad("semantic streams are conditioned on language".into())
            }
            _ => {}
        }
        if self.crop == 0 || self.crop % 2 != 0 || self.crop > h.min(w) {
            return bad(format!("crop {} must be even and fit a {h}x{w} frame", self.crop));
        }
        if self.k_pick == 0 || self.k_place == 0 || self.corr_dim == 0 || self.spatial_width == 0 {
            return bad("rotation counts and widths must be positive".into());
        }
        if self.decoder_widths.contains(&0) {
            return bad("decoder widths must be positive".into());
        }
        if self.has_semantic() && (h % 16 != 0 || w % 16 != 0) {
            return bad(format!("semantic stream needs frame sides divisible by 16, got {h}x{w}"));
        }
        Ok(())
    }
}

/// Goal input matching the config's goal mode.
#[derive(Debug, Clone, Copy)]
pub enum Goal<'a> {
    Text(&'a str),
    Image(&'a Observation),
    None,
}

type Layer = (ParamId, ParamId);

struct Spatial {
    convs: Vec<Layer>,
    head: Layer,
}

struct Level {
    conv: Layer,
    /// Pyramid index used as an additive skip, with a projection when
    /// channel counts differ.
    skip: Option<(usize, Option<Layer>)>,
    goal: Option<Layer>,
    lateral: Option<Layer>,
}

struct Semantic {
    levels: Vec<Level>,
    head: Layer,
}

struct Net {
    out: usize,
    spatial: Option<Spatial>,
    semantic: Option<Semantic>,
    goal_image: Option<Spatial>,
    /// 1x1 fusion of the two stream heads; `None` adds them.
    fuse: Option<Layer>,
}

fn layer<T: Real>(
    params: &mut ParamStore<T>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let init = Init::He { fan_in: k * k * cin };
    layer_with(params, name, k, cin, cout, init, rng)
}

/// Output heads start small so the initial maps are near uniform.
fn head_layer<T: Real>(params: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Layer {
    let init = Init::Normal {
        std: HEAD_GAIN / (cin as f64).sqrt(),
    };
    layer_with(params, name, 1, cin, cout, init, rng)
}

fn layer_with<T: Real>(
    params: &mut ParamStore<T>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let w = params.add(format!("{name}.w"), &[k, k, cin, cout], init, rng);
    let b = params.add(format!("{name}.b"), &[cout], Init::Zeros, rng);
    (w, b)
}

/// Per-network inputs, shared by the three networks of one observation.
struct NetInput<T> {
    rgbd: Tensor<T>,
    sem: Option<ImageFeatures>,
    goal_vec: Option<Tensor<T>>,
    goal_rgbd: Option<Tensor<T>>,
}

/// Dense action values for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceMaps {
    /// `H x W x k_pick`
    pub q_pick: Tensor<f32>,
    /// `H x W x k_place`, for the pick the place head was conditioned on.
    pub q_place: Tensor<f32>,
}

impl AffordanceMaps {
    /// Softmax over all pixels and bins of each map.
    pub fn normalized(&self) -> (Vec<f64>, Vec<f64>) {
        (softmax(&self.q_pick.data), softmax(&self.q_place.data))
    }
}

/// Index of the largest entry, lowest flat index on ties, as `(u, v, bin)`.
pub fn argmax<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let mut best = 0;
    for (i, x) in t.data.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numerical("affordance map has non-finite values".into()));
        }
        if *x > t.data[best] {
            best = i;
        }
    }
    if t.data.is_empty() {
        return Err(Error::Shape("empty affordance map".into()));
    }
    let (p, k) = (best / t.c, best % t.c);
    Ok((p / t.w, p % t.w, k))
}

/// Pick and place poses at the argmax of each map.
pub fn select_action(maps: &AffordanceMaps) -> Result<PixelAction> {
    let (u, v, r) = argmax(&maps.q_pick)?;
    let (pu, pv, pr) = argmax(&maps.q_place)?;
    Ok(PixelAction {
        pick: PixelPose::new(u, v, r, maps.q_pick.c),
        place: PixelPose::new(pu, pv, pr, maps.q_place.c),
    })
}

/// Loss terms and gradients of one supervised example.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub pick_loss: f64,
    pub place_loss: f64,
    pub grads: Vec<Vec<T>>,
    /// Pixel the query crop was centered on.
    pub crop_center: (usize, usize),
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub frame: (usize, usize),
    backbone: Option<Arc<dyn SemanticBackbone>>,
    pick: Net,
    query: Net,
    key: Net,
}

impl<T: Real> Model<T> {
    /// Fresh model for `h x w` observations, backbone resolved by name.
    pub fn new(config: ModelConfig, h: usize, w: usize) -> Result<Self> {
        let backbone = if config.has_semantic() {
            Some(encoders::backbone(&config.backbone)?)
        } else {
            None
        };
        Self::with_backbone(config, h, w, backbone)
    }

    pub fn with_backbone(
        config: ModelConfig,
        h: usize,
        w: usize,
        backbone: Option<Arc<dyn SemanticBackbone>>,
    ) -> Result<Self> {
        config.validate(h, w)?;
        if config.has_semantic() != backbone.is_some() {
            return Err(Error::Config("semantic stream and backbone must come together".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let probe = match &backbone {
            Some(b) => Some(b.encode_image(&Tensor::zeros(h, w, 3))?),
            None => None,
        };
        let goal_dim = backbone.as_ref().map_or(0, |b| b.goal_dim());
        let mut build = |name: &str, out: usize, fuse_conv: bool| {
            build_net(&config, &mut params, &mut rng, name, out, fuse_conv, probe.as_ref(), (h, w), goal_dim)
        };
        let pick = build("pick", config.k_pick, false);
        let query = build("query", config.corr_dim, true);
        let key = build("key", config.corr_dim, true);
        Ok(Self {
            config,
            params,
            frame: (h, w),
            backbone,
            pick,
            query,
            key,
        })
    }

    /// Digest of the frozen backbone, if any.
    pub fn frozen_checksum(&self) -> Option<String> {
        self.backbone.as_ref().map(|b| b.checksum())
    }

    pub fn backbone(&self) -> Option<&Arc<dyn SemanticBackbone>> {
        self.backbone.as_ref()
    }

    fn check_goal(&self, goal: &Goal) -> Result<()> {
        let ok = matches!(
            (self.config.goal_mode, goal),
            (GoalMode::Language, Goal::Text(_)) | (GoalMode::ImageGoal, Goal::Image(_)) | (GoalMode::None, _)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "goal {goal:?} does not fit goal mode {:?}",
                self.config.goal_mode
            )))
        }
    }

    /// Network inputs for the `side x side` window centered on `(cu, cv)`
    /// (or the whole observation when `center` is `None`).
    fn inputs(&self, obs: &Observation, goal: &Goal, center: Option<(usize, usize, usize)>) -> Result<NetInput<T>> {
        obs.validate()?;
        if obs.shape() != self.frame {
            return Err(Error::Shape(format!(
                "model expects {:?} observations, got {:?}",
                self.frame,
                obs.shape()
            )));
        }
        self.check_goal(goal)?;
        let (rgbd, rgb) = window(obs, center);
        let sem = match &self.backbone {
            Some(b) => Some(b.encode_image(&rgb)?),
            None => None,
        };
        let goal_vec = match (goal, &self.backbone) {
            (Goal::Text(s), Some(b)) => {
                let g = b.encode_text(s)?;
                Some(Tensor::from_vec(1, 1, g.len(), g.iter().map(|x| T::of(*x as f64)).collect())?)
            }
            _ => None,
        };
        let goal_rgbd = match goal {
            Goal::Image(g) if self.config.goal_mode == GoalMode::ImageGoal => {
                if g.shape() != obs.shape() {
                    return Err(Error::Shape("goal image and observation differ in size".into()));
                }
                Some(window(g, center).0)
            }
            _ => None,
        };
        Ok(NetInput {
            rgbd,
            sem,
            goal_vec,
            goal_rgbd,
        })
    }

    fn place_graph(&self, tape: &mut Tape<'_, T>, obs: &Observation, goal: &Goal, full: &NetInput<T>, pick: &PixelPose) -> Result<Var> {
        let (h, w) = self.frame;
        if pick.u >= h || pick.v >= w {
            return Err(Error::Domain(format!("pick ({}, {}) outside {h}x{w} frame", pick.u, pick.v)));
        }
        let side = self.config.query_side();
        let crop_in = self.inputs(obs, goal, Some((pick.u, pick.v, side)))?;
        let key = run_net(tape, &self.key, full, false)?;
        let query = run_net(tape, &self.query, &crop_in, false)?;
        let c = self.config.crop;
        let kernels = tape.rotated_crops(query, side / 2, side / 2, c, self.config.k_place)?;
        let corr = tape.correlate(kernels, key)?;
        // mean rather than sum over the crop window
        Ok(tape.scale(corr, T::of(1.0 / (c * c) as f64)))
    }

    pub fn forward_pick(&self, obs: &Observation, goal: &Goal) -> Result<Tensor<T>> {
        let inp = self.inputs(obs, goal, None)?;
        let mut tape = Tape::new(&self.params);
        let q = run_net(&mut tape, &self.pick, &inp, true)?;
        Ok(tape.take_value(q))
    }

    pub fn forward_place(&self, obs: &Observation, goal: &Goal, pick: &PixelPose) -> Result<Tensor<T>> {
        let inp = self.inputs(obs, goal, None)?;
        let mut tape = Tape::new(&self.params);
        let q = self.place_graph(&mut tape, obs, goal, &inp, pick)?;
        Ok(tape.take_value(q))
    }

    /// Both maps, with the place head conditioned on the pick argmax.
    pub fn maps(&self, obs: &Observation, goal: &Goal) -> Result<AffordanceMaps> {
        let q_pick = self.forward_pick(obs, goal)?;
        let (u, v, r) = argmax(&q_pick)?;
        let q_place = self.forward_place(obs, goal, &PixelPose::new(u, v, r, self.config.k_pick))?;
        Ok(AffordanceMaps {
            q_pick: q_pick.cast(),
            q_place: q_place.cast(),
        })
    }

    pub fn act(&self, obs: &Observation, goal: &Goal) -> Result<PixelAction> {
        select_action(&self.maps(obs, goal)?)
    }

    /// Cross-entropy of both heads against one-hot labels, with the place
    /// head centered on the expert pick.
    pub fn loss_and_grads(&self, obs: &Observation, goal: &Goal, pick: &PixelPose, place: &PixelPose) -> Result<LossOutput<T>> {
        let (h, w) = self.frame;
        for p in [pick, place] {
            if p.u >= h || p.v >= w {
                return Err(Error::Domain(format!("label ({}, {}) outside {h}x{w} frame", p.u, p.v)));
            }
        }
        if pick.k != self.config.k_pick || place.k != self.config.k_place || pick.rot >= pick.k || place.rot >= place.k {
            return Err(Error::Domain(format!(
                "label bins {}/{} and {}/{} do not match k_pick={} k_place={}",
                pick.rot, pick.k, place.rot, place.k, self.config.k_pick, self.config.k_place
            )));
        }
        let inp = self.inputs(obs, goal, None)?;
        let mut tape = Tape::new(&self.params);
        let qp = run_net(&mut tape, &self.pick, &inp, true)?;
        let ql = self.place_graph(&mut tape, obs, goal, &inp, pick)?;
        let idx = |p: &PixelPose| (p.u * w + p.v) * p.k + p.rot;
        let (pick_loss, gp) = softmax_cross_entropy(&tape.value(qp).data, idx(pick))?;
        let (place_loss, gl) = softmax_cross_entropy(&tape.value(ql).data, idx(place))?;
        let grads = tape.backward(&[(qp, &gp), (ql, &gl)])?;
        Ok(LossOutput {
            pick_loss,
            place_loss,
            grads,
            crop_center: (pick.u, pick.v),
        })
    }

    /// Parameter indices of the pick network and of the place networks.
    pub fn head_params(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pick = Vec::new();
        let mut place = Vec::new();
        for (i, p) in self.params.params.iter().enumerate() {
            if p.name.starts_with("pick.") {
                pick.push(i);
            } else {
                place.push(i);
            }
        }
        (pick, place)
    }
}

/// `rgbd` (color, depth repeated three times) and plain color for a window.
fn window<T: Real>(obs: &Observation, center: Option<(usize, usize, usize)>) -> (Tensor<T>, Tensor<f32>) {
    let (h, w) = obs.shape();
    let (side_h, side_w, u0, v0) = match center {
        None => (h, w, 0i64, 0i64),
        Some((u, v, s)) => (s, s, u as i64 - (s / 2) as i64, v as i64 - (s / 2) as i64),
    };
    let mut rgbd = Tensor::zeros(side_h, side_w, 6);
    let mut rgb = Tensor::zeros(side_h, side_w, 3);
    for a in 0..side_h {
        for b in 0..side_w {
            let (su, sv) = (u0 + a as i64, v0 + b as i64);
            if !obs.frame.contains_pixel(su, sv) {
                continue;
            }
            let (su, sv) = (su as usize, sv as usize);
            let c = obs.rgb(su, sv);
            let d = T::of(obs.height_at(su, sv) as f64 * DEPTH_SCALE);
            let o = a * side_w + b;
            for ch in 0..3 {
                rgbd.data[o * 6 + ch] = T::of(c[ch] as f64);
                rgbd.data[o * 6 + 3 + ch] = d;
                rgb.data[o * 3 + ch] = c[ch];
            }
        }
    }
    (rgbd, rgb)
}

#[allow(clippy::too_many_arguments)]
fn build_net<T: Real>(
    cfg: &ModelConfig,
    params: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    fuse_conv: bool,
    probe: Option<&ImageFeatures>,
    (h, _w): (usize, usize),
    goal_dim: usize,
) -> Net {
    let sw = cfg.spatial_width;
    let spatial_stream = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str| {
        let mut cin = 6;
        let convs = DILATIONS
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let l = layer(params, &format!("{prefix}.conv{i}"), 3, cin, sw, rng);
                cin = sw;
                l
            })
            .collect();
        let head = head_layer(params, &format!("{prefix}.head"), sw, out, rng);
        Spatial { convs, head }
    };
    let spatial = cfg.has_spatial().then(|| spatial_stream(params, rng, &format!("{name}.spatial")));
    let semantic = probe.filter(|_| cfg.has_semantic()).map(|feats| {
        let mut cin = feats.bottleneck.c;
        let levels = (0..3)
            .map(|l| {
                let width = cfg.decoder_widths[l];
                let prefix = format!("{name}.semantic.level{l}");
                let conv = layer(params, &format!("{prefix}.conv"), 3, cin, width, rng);
                cin = width;
                let res = (h / 8) << l;
                let skip = if cfg.use_skips {
                    feats.pyramid.iter().position(|p| p.h == res).map(|j| {
                        let pc = feats.pyramid[j].c;
                        let proj = (pc != width).then(|| layer(params, &format!("{prefix}.skip"), 1, pc, width, rng));
                        (j, proj)
                    })
                } else {
                    None
                };
                let goal = (cfg.goal_mode == GoalMode::Language).then(|| {
                    let (w, b) = layer(params, &format!("{prefix}.goal"), 1, goal_dim, width, rng);
                    // start near the multiplicative identity
                    params.params[b.0].value.fill(T::one());
                    (w, b)
                });
                let lateral = cfg
                    .has_spatial()
                    .then(|| layer(params, &format!("{prefix}.lateral"), 1, width + sw, width, rng));
                Level {
                    conv,
                    skip,
                    goal,
                    lateral,
                }
            })
            .collect();
        let head = head_layer(params, &format!("{name}.semantic.head"), cin, out, rng);
        Semantic { levels, head }
    });
    let goal_image = (cfg.goal_mode == GoalMode::ImageGoal).then(|| spatial_stream(params, rng, &format!("{name}.goal")));
    let fuse = (fuse_conv && cfg.stream_mode == StreamMode::TwoStream)
        .then(|| layer(params, &format!("{name}.fuse"), 1, 2 * out, out, rng));
    Net {
        out,
        spatial,
        semantic,
        goal_image,
        fuse,
    }
}

/// Spatial stream: returns the head output and the last hidden features.
fn run_spatial<T: Real>(tape: &mut Tape<'_, T>, s: &Spatial, x: Var, width: usize, out: usize) -> Result<(Var, Var)> {
    let mut acts = Vec::new();
    let mut h = x;
    for (i, (&(w, b), &d)) in s.convs.iter().zip(&DILATIONS).enumerate() {
        let y = tape.conv(h, w, b, ConvSpec::new(3, width).dilation(d))?;
        let mut y = tape.relu(y);
        // additive skips around pairs of layers
        if i == 2 || i == 4 {
            y = tape.add(y, acts[i - 2])?;
        }
        acts.push(y);
        h = y;
    }
    let head = tape.conv(h, s.head.0, s.head.1, ConvSpec::new(1, out))?;
    Ok((head, h))
}

fn run_net<T: Real>(tape: &mut Tape<'_, T>, net: &Net, inp: &NetInput<T>, _pick: bool) -> Result<Var> {
    let (h, w) = (inp.rgbd.h, inp.rgbd.w);
    let x = tape.input(inp.rgbd.clone());
    let spatial = match &net.spatial {
        Some(s) => {
            let width = tape_width(tape, s);
            Some(run_spatial(tape, s, x, width, net.out)?)
        }
        None => None,
    };
    let semantic = match (&net.semantic, &inp.sem) {
        (Some(sem), Some(feats)) => {
            let mut v = tape.input(feats.bottleneck.cast());
            let goal = match &inp.goal_vec {
                Some(g) => Some(tape.input(g.clone())),
                None => None,
            };
            for (l, level) in sem.levels.iter().enumerate() {
                let (rh, rw) = ((h / 8) << l, (w / 8) << l);
                v = tape.resize(v, rh, rw);
                let width = tape_out(tape, level.conv);
                let y = tape.conv(v, level.conv.0, level.conv.1, ConvSpec::new(3, width))?;
                v = tape.relu(y);
                if let Some((j, proj)) = &level.skip {
                    if let Some(p) = feats.pyramid.get(*j).filter(|p| (p.h, p.w) == (rh, rw)) {
                        let mut s = tape.input(p.cast());
                        if let Some((pw, pb)) = proj {
                            s = tape.conv(s, *pw, *pb, ConvSpec::new(1, width))?;
                        }
                        v = tape.add(v, s)?;
                    }
                }
                if let (Some((gw, gb)), Some(g)) = (level.goal, goal) {
                    let proj = tape.conv(g, gw, gb, ConvSpec::new(1, width))?;
                    v = tape.mul_channels(v, proj)?;
                }
                if let (Some((lw, lb)), Some((_, feat))) = (level.lateral, spatial) {
                    let d = tape.avg_pool(feat, 8 >> l)?;
                    let cat = tape.concat(v, d)?;
                    let y = tape.conv(cat, lw, lb, ConvSpec::new(1, width))?;
                    v = tape.relu(y);
                }
            }
            v = tape.resize(v, h, w);
            Some(tape.conv(v, sem.head.0, sem.head.1, ConvSpec::new(1, net.out))?)
        }
        _ => None,
    };
    let mut out = match (spatial, semantic) {
        (Some((a, _)), Some(b)) => match net.fuse {
            Some((fw, fb)) => {
                let cat = tape.concat(a, b)?;
                tape.conv(cat, fw, fb, ConvSpec::new(1, net.out))?
            }
            None => tape.add(a, b)?,
        },
        (Some((a, _)), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::Config("network has no stream".into())),
    };
    if let (Some(g), Some(rgbd)) = (&net.goal_image, &inp.goal_rgbd) {
        let gx = tape.input(rgbd.clone());
        let width = tape_width(tape, g);
        let (gout, _) = run_spatial(tape, g, gx, width, net.out)?;
        out = tape.add(out, gout)?;
    }
    Ok(out)
}

fn tape_width<T: Real>(tape: &Tape<'_, T>, s: &Spatial) -> usize {
    tape_out(tape, s.convs[0])
}

fn tape_out<T: Real>(tape: &Tape<'_, T>, l: Layer) -> usize {
    tape.param_len(l.1)
}

/// `v * tile(g)` for a `1 x 1 x C` goal projection `g`.
pub fn condition_language<T: Real>(v: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (a, b) = (tape.input(v.clone()), tape.input(g.clone()));
    let y = tape.mul_channels(a, b)?;
    Ok(tape.take_value(y))
}

/// Channel concatenation followed by a 1x1 convolution back to `sem.c`
/// channels. `w` is `(sem.c + spa.c) x sem.c`, row-major.
pub fn lateral_fuse<T: Real>(sem: &Tensor<T>, spa: &Tensor<T>, w: &[T], b: &[T]) -> Result<Tensor<T>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cin = sem.c + spa.c;
    let wi = store.add("w", &[1, 1, cin, sem.c], Init::Zeros, &mut rng);
    let bi = store.add("b", &[sem.c], Init::Zeros, &mut rng);
    if w.len() != cin * sem.c || b.len() != sem.c {
        return Err(Error::Shape(format!("fusion weights do not map {cin} to {} channels", sem.c)));
    }
    store.params[wi.0].value = w.to_vec();
    store.params[bi.0].value = b.to_vec();
    let mut tape = Tape::new(&store);
    let (a, s) = (tape.input(sem.clone()), tape.input(spa.clone()));
    let cat = tape.concat(a, s)?;
    let y = tape.conv(cat, wi, bi, ConvSpec::new(1, sem.c))?;
    Ok(tape.take_value(y))
}

/// Random-generator position saved with a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Serde("malformed rng state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    frame: (usize, usize),
    step: usize,
    rng: RngState,
    params: Vec<ParamMeta>,
    /// SHA-256 of the parameter bytes.
    sha256: String,
}

/// Saved training state: config, parameters, step counter and rng.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub frame: (usize, usize),
    pub step: usize,
    pub rng: RngState,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn capture(model: &Model<f32>, step: usize, rng: &ChaCha8Rng) -> Self {
        Self {
            config: model.config.clone(),
            frame: model.frame,
            step,
            rng: RngState::of(rng),
            params: model.params.clone(),
        }
    }

    fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.params.count());
        for p in &self.params.params {
            for x in &p.value {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the little-endian parameter values.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.param_bytes()))
    }

    /// `b"TTCK"`, `u32` header length, JSON header, raw `f32` parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.param_bytes();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            frame: self.frame,
            step: self.step,
            rng: self.rng.clone(),
            params: self
                .params
                .params
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = b"TTCK".to_vec();
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&bytes);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(format!("checkpoint {}", path.display())));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..4] != b"TTCK" {
            return Err(Error::Serde(format!("{} is not a checkpoint", path.display())));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(8..8 + n).unwrap_or(&[]))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!("unsupported checkpoint version {}", header.version)));
        }
        let body = &bytes[8 + n..];
        if hex::encode(Sha256::digest(body)) != header.sha256 {
            return Err(Error::Serde(format!("{}: parameter checksum mismatch", path.display())));
        }
        let mut vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut params = ParamStore::new();
        for m in header.params {
            let len: usize = m.shape.iter().product();
            let value: Vec<f32> = vals.by_ref().take(len).collect();
            if value.len() != len {
                return Err(Error::Serde(format!("{}: truncated parameters", path.display())));
            }
            params.params.push(crate::nn::Param {
                name: m.name,
                shape: m.shape,
                value,
            });
        }
        Ok(Self {
            config: header.config,
            frame: header.frame,
            step: header.step,
            rng: header.rng,
            params,
        })
    }

    /// Rebuild the model; errors if `expected` is given and differs.
    pub fn model(&self, expected: Option<&ModelConfig>) -> Result<Model<f32>> {
        if let Some(e) = expected {
            if e != &self.config {
                return Err(Error::Config("checkpoint was saved with a different model config".into()));
            }
        }
        let mut m = Model::new(self.config.clone(), self.frame.0, self.frame.1)?;
        m.load_params(&self.params)?;
        Ok(m)
    }
}

impl<T: Real> Model<T> {
    /// Replace parameters by name and shape.
    pub fn load_params<U: Real>(&mut self, src: &ParamStore<U>) -> Result<()> {
        if src.len() != self.params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match model's {}",
                src.len(),
                self.params.len()
            )));
        }
        for (dst, s) in self.params.params.iter_mut().zip(&src.params) {
            if dst.name != s.name || dst.shape != s.shape {
                return Err(Error::Config(format!("parameter {} does not match {}", s.name, dst.name)));
            }
            dst.value = s.value.iter().map(|x| T::of(x.f64())).collect();
        }
        Ok(())
    }
}
