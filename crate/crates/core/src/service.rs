//! Local JSON service behind the annotation client.
//!
//! Routes (all under `/v1`):
//!
//! - `POST /sessions` `{task, split, seed}` creates a session
//! - `GET /sessions/{id}/observation`
//! - `POST /sessions/{id}/pick` and `/place` with `{u, v, rot, k}`
//! - `POST /sessions/{id}/overlay` `{checkpoint, head, pick?}`
//! - `POST /sessions/{id}/finish` ends an episode early
//!
//! A place that completes the goal stores the episode (source `human`) in
//! the dataset directory; `finish` does the same for an unfinished one.
//!
//! Sessions are locked individually, so one session's requests run one at a
//! time while different sessions proceed independently.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{Dataset, Episode, Record, Source};
use crate::error::{Error, Result};
use crate::geometry::{Observation, PixelAction, PixelPose, WorkspaceFrame};
use crate::model::{argmax, Checkpoint, Goal, GoalMode, Model};
use crate::nn::softmax;
use crate::simulator::SceneState;
use crate::tasks::{self, GoalState, History, Split, TaskName};

pub const API_VERSION: &str = "v1";

struct Session {
    task: TaskName,
    split: Split,
    seed: u64,
    state: SceneState,
    goal: GoalState,
    history: History,
    pending_pick: Option<PixelPose>,
    records: Vec<Record>,
    finished: bool,
}

pub struct Service {
    checkpoints: PathBuf,
    data: PathBuf,
    frame: WorkspaceFrame,
    next_id: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    models: Mutex<HashMap<String, Arc<Model<f32>>>>,
    /// Serializes appends to the human dataset.
    dataset_lock: Mutex<()>,
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    task: TaskName,
    split: Split,
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Head {
    Pick,
    Place,
}

#[derive(Debug, Deserialize)]
struct OverlayRequest {
    checkpoint: String,
    head: Head,
    pick: Option<PixelPose>,
}

/// Observation as shipped to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireObservation {
    pub height_px: usize,
    pub width_px: usize,
    /// Lossless RGB PNG, base64.
    pub png: String,
    /// Row-major heights in meters.
    pub heights: Vec<f32>,
}

/// 8-bit RGB PNG of the color image.
pub fn encode_png(obs: &Observation) -> Result<Vec<u8>> {
    let (h, w) = obs.shape();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Serde(e.to_string()))?;
        let bytes: Vec<u8> = obs.color.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Serde(e.to_string()))?;
    }
    Ok(out)
}

pub fn wire_observation(obs: &Observation) -> Result<WireObservation> {
    let (h, w) = obs.shape();
    Ok(WireObservation {
        height_px: h,
        width_px: w,
        png: base64::engine::general_purpose::STANDARD.encode(encode_png(obs)?),
        heights: obs.height.clone(),
    })
}

fn status_of(e: &Error) -> u16 {
    match e {
        Error::Protocol(_) => 409,
        Error::NotFound(_) => 404,
        Error::Domain(_) | Error::Shape(_) | Error::Config(_) | Error::Serde(_) => 400,
        _ => 500,
    }
}

fn kind_of(e: &Error) -> &'static str {
    match e {
        Error::Protocol(_) => "protocol",
        Error::NotFound(_) => "not_found",
        Error::Domain(_) | Error::Shape(_) => "validation",
        Error::Config(_) | Error::Serde(_) => "bad_request",
        _ => "internal",
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::Serde(format!("bad request body: {e}")))
}

impl Service {
    pub fn new(checkpoints: PathBuf, data: PathBuf, frame: WorkspaceFrame) -> Self {
        Self {
            checkpoints,
            data,
            frame,
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
            dataset_lock: Mutex::new(()),
        }
    }

    /// Route one request; returns the status code and JSON body.
    pub fn handle(&self, method: &str, path: &str, body: &[u8]) -> (u16, Value) {
        match self.route(method, path, body) {
            Ok(v) => (200, v),
            Err(e) => (status_of(&e), json!({"error": e.to_string(), "kind": kind_of(&e)})),
        }
    }

    fn route(&self, method: &str, path: &str, body: &[u8]) -> Result<Value> {
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        match (method, parts.as_slice()) {
            ("POST", [API_VERSION, "sessions"]) => self.create(parse(body)?),
            ("GET", [API_VERSION, "sessions", id, "observation"]) => self.observation(id),
            ("POST", [API_VERSION, "sessions", id, "pick"]) => self.pick(id, parse(body)?),
            ("POST", [API_VERSION, "sessions", id, "place"]) => self.place(id, parse(body)?),
            ("POST", [API_VERSION, "sessions", id, "overlay"]) => self.overlay(id, parse(body)?),
            ("POST", [API_VERSION, "sessions", id, "finish"]) => self.finish(id),
            _ => Err(Error::NotFound(format!("no route {method} {path}"))),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn create(&self, req: CreateRequest) -> Result<Value> {
        let inst = tasks::sample_instance(req.task, req.split, req.seed, &self.frame)?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let s = Session {
            task: req.task,
            split: req.split,
            seed: req.seed,
            state: inst.state,
            goal: inst.goal,
            history: History::default(),
            pending_pick: None,
            records: Vec::new(),
            finished: false,
        };
        let view = Self::view(&s, &self.frame)?;
        self.sessions
            .lock()
            .expect("session table lock")
            .insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(json!({"session": id, "state": view}))
    }

    fn view(s: &Session, frame: &WorkspaceFrame) -> Result<Value> {
        let obs = tasks::observe(&s.state, frame);
        Ok(json!({
            "observation": wire_observation(&obs)?,
            "instruction": s.goal.instruction(&s.history),
            "score": tasks::score(&s.state, &s.goal, &s.history),
            "done": tasks::is_complete(&s.state, &s.goal, &s.history),
            "step": s.records.len(),
            "pending_pick": s.pending_pick,
        }))
    }

    fn observation(&self, id: &str) -> Result<Value> {
        let s = self.session(id)?;
        let s = s.lock().expect("session lock");
        Self::view(&s, &self.frame)
    }

    fn check_pose(&self, p: &PixelPose) -> Result<()> {
        p.check(&self.frame)
    }

    fn pick(&self, id: &str, pose: PixelPose) -> Result<Value> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session lock");
        if s.finished {
            return Err(Error::Protocol("episode already finished".into()));
        }
        if s.pending_pick.is_some() {
            return Err(Error::Protocol("pick already submitted; submit a place".into()));
        }
        self.check_pose(&pose)?;
        s.pending_pick = Some(pose);
        Self::view(&s, &self.frame)
    }

    fn place(&self, id: &str, pose: PixelPose) -> Result<Value> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session lock");
        if s.finished {
            return Err(Error::Protocol("episode already finished".into()));
        }
        let Some(pick) = s.pending_pick else {
            return Err(Error::Protocol("place submitted before pick".into()));
        };
        self.check_pose(&pose)?;
        let action = PixelAction { pick, place: pose };
        let obs = tasks::observe(&s.state, &self.frame);
        let instruction = s.goal.instruction(&s.history);
        let s = &mut *s;
        s.state = tasks::advance(&s.state, &s.goal, &mut s.history, &action);
        s.records.push(Record { obs, instruction, action });
        s.pending_pick = None;
        let mut view = Self::view(s, &self.frame)?;
        if tasks::is_complete(&s.state, &s.goal, &s.history) {
            view["stored"] = self.store(s)?;
        }
        Ok(view)
    }

    fn model(&self, name: &str) -> Result<Arc<Model<f32>>> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::NotFound(format!("checkpoint {name}")));
        }
        if let Some(m) = self.models.lock().expect("model cache lock").get(name) {
            return Ok(m.clone());
        }
        let path = self.checkpoints.join(format!("{name}.ckpt"));
        let m = Arc::new(Checkpoint::load(&path)?.model(None)?);
        self.models.lock().expect("model cache lock").insert(name.to_string(), m.clone());
        Ok(m)
    }

    /// Max-normalized affordance map and its argmax. Leaves the session as is.
    fn overlay(&self, id: &str, req: OverlayRequest) -> Result<Value> {
        let (obs, instruction) = {
            let s = self.session(id)?;
            let s = s.lock().expect("session lock");
            (tasks::observe(&s.state, &self.frame), s.goal.instruction(&s.history))
        };
        let model = self.model(&req.checkpoint)?;
        let goal = match model.config.goal_mode {
            GoalMode::Language => Goal::Text(&instruction),
            GoalMode::None => Goal::None,
            GoalMode::ImageGoal => return Err(Error::Config("image-goal checkpoints have no overlay".into())),
        };
        let q = match req.head {
            Head::Pick => model.forward_pick(&obs, &goal)?,
            Head::Place => {
                let pick = req
                    .pick
                    .ok_or_else(|| Error::Domain("place overlay needs a pick pose".into()))?;
                self.check_pose(&pick)?;
                model.forward_place(&obs, &goal, &pick)?
            }
        };
        let (u, v, rot) = argmax(&q)?;
        let map = max_normalized(&softmax(&q.data));
        Ok(json!({
            "height_px": q.h,
            "width_px": q.w,
            "k": q.c,
            "map": map,
            "argmax": PixelPose::new(u, v, rot, q.c),
        }))
    }

    /// End the episode early and store what was recorded.
    fn finish(&self, id: &str) -> Result<Value> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session lock");
        if s.finished {
            return Err(Error::Protocol("episode already finished".into()));
        }
        if s.records.is_empty() {
            return Err(Error::Protocol("no completed pick and place to store".into()));
        }
        self.store(&mut s)
    }

    /// Append the session's episode to the human dataset.
    fn store(&self, s: &mut Session) -> Result<Value> {
        let score = tasks::score(&s.state, &s.goal, &s.history);
        let episode = Episode {
            task: s.task,
            split: s.split,
            seed: s.seed,
            source: Source::Human,
            score,
            records: s.records.clone(),
            final_obs: Some(tasks::observe(&s.state, &self.frame)),
        };
        let dir = {
            let _guard = self.dataset_lock.lock().expect("dataset lock");
            let mut ds = match Dataset::load(&self.data) {
                Ok(d) => d,
                Err(Error::NotFound(_)) => Dataset::create(&self.data)?,
                Err(e) => return Err(e),
            };
            ds.append(episode)?;
            self.data.join(format!("episode_{:06}", ds.episodes.len() - 1))
        };
        s.finished = true;
        Ok(json!({"score": score, "episode_dir": dir, "steps": s.records.len()}))
    }
}

/// Divide by the maximum so the peak is exactly 1.
pub fn max_normalized(p: &[f64]) -> Vec<f32> {
    let m = p.iter().cloned().fold(0.0f64, f64::max);
    if m <= 0.0 {
        return vec![0.0; p.len()];
    }
    p.iter().map(|x| (x / m) as f32).collect()
}

/// Serve until the process exits.
pub fn serve(svc: Arc<Service>, addr: &str) -> Result<()> {
    let server = tiny_http::Server::http(addr).map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    log::info!("serving on http://{addr}/{API_VERSION}");
    let workers: Vec<_> = (0..4)
        .map(|_| {
            let server = &server;
            let svc = svc.clone();
            move || {
                for mut req in server.incoming_requests() {
                    let mut body = Vec::new();
                    let (code, value) = match req.as_reader().read_to_end(&mut body) {
                        Ok(_) => svc.handle(req.method().as_str(), req.url(), &body),
                        Err(e) => (400, json!({"error": e.to_string(), "kind": "bad_request"})),
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
                    let resp = tiny_http::Response::from_string(value.to_string())
                        .with_status_code(code)
                        .with_header(header);
                    if let Err(e) = req.respond(resp) {
                        log::warn!("response failed: {e}");
                    }
                }
            }
        })
        .collect();
    std::thread::scope(|s| {
        for w in workers {
            s.spawn(w);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc(dir: &std::path::Path) -> Service {
        Service::new(dir.join("ckpts"), dir.join("human"), WorkspaceFrame::standard())
    }

    fn post(s: &Service, path: &str, body: Value) -> (u16, Value) {
        s.handle("POST", path, body.to_string().as_bytes())
    }

    #[test]
    fn protocol_errors() {
        let d = tempfile::tempdir().unwrap();
        let s = svc(d.path());
        let (code, v) = post(&s, "/v1/sessions", json!({"task": "put-blocks-in-bowls", "split": "seen", "seed": 0}));
        assert_eq!(code, 200);
        let id = v["session"].as_str().unwrap().to_string();
        let pose = json!({"u": 10, "v": 10, "rot": 0, "k": 1});
        let (code, v) = post(&s, &format!("/v1/sessions/{id}/place"), pose.clone());
        assert_eq!((code, v["kind"].as_str()), (409, Some("protocol")));
        assert_eq!(post(&s, &format!("/v1/sessions/{id}/pick"), pose.clone()).0, 200);
        assert_eq!(post(&s, &format!("/v1/sessions/{id}/pick"), pose).0, 409);
        let (code, v) = post(&s, &format!("/v1/sessions/{id}/place"), json!({"u": 500, "v": 1, "rot": 0, "k": 36}));
        assert_eq!((code, v["kind"].as_str()), (400, Some("validation")));
        assert_eq!(s.handle("GET", "/v1/sessions/nope/observation", b"").0, 404);
        assert_eq!(post(&s, &format!("/v1/sessions/{id}/overlay"), json!({"checkpoint": "missing", "head": "pick"})).0, 404);
    }

    #[test]
    fn png_is_lossless_for_8_bit_colors() {
        let mut obs = Observation::filled(WorkspaceFrame::square(4), [0.0; 3]);
        for (i, c) in obs.color.iter_mut().enumerate() {
            *c = (i * 7 % 256) as f32 / 255.0;
        }
        let bytes = encode_png(&obs).unwrap();
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        let want: Vec<u8> = (0..48).map(|i| (i * 7 % 256) as u8).collect();
        assert_eq!(buf, want);
    }

    #[test]
    fn normalized_map_peaks_at_one() {
        let m = max_normalized(&[0.1, 0.5, 0.25]);
        assert_eq!(m, vec![0.2, 1.0, 0.5]);
    }
}
