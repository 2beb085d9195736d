//! Demonstration storage, SE(2) augmentation and training-pair sampling.
//!
//! A dataset is a directory:
//!
//! ```text
//! index.json                 {"version", "episodes": [{"dir", "task", "split", "seed", "steps", "source"}]}
//! episode_000000/manifest.json
//! episode_000000/obs_000.zz  zlib(b"OBS1" | h u32 | w u32 | color f32[h*w*3] | height f32[h*w]), little endian
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bin_angle, nearest_bin, warp_se2, Observation, PixelAction, PixelPose, Se2, WorkspaceFrame};
use crate::tasks::{self, History, Split, TaskName};

pub const FORMAT_VERSION: u32 = 1;
/// Augmentation attempts before falling back to the stored pair.
pub const AUGMENT_RETRIES: usize = 100;
/// Expert attempts inspected when deciding whether a task is broken.
const FAILURE_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert,
    Human,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub obs: Observation,
    pub instruction: String,
    pub action: PixelAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskName,
    pub split: Split,
    pub seed: u64,
    pub source: Source,
    pub score: f64,
    pub records: Vec<Record>,
    /// Observation after the last action; the goal image for image-goal models.
    pub final_obs: Option<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub instruction: String,
    pub action: PixelAction,
    pub observation: String,
}

/// On-disk episode manifest; shared with the annotation service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task: TaskName,
    pub split: Split,
    pub seed: u64,
    pub source: Source,
    pub score: f64,
    pub frame: WorkspaceFrame,
    pub steps: Vec<StepManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_observation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub dir: String,
    pub task: TaskName,
    pub split: Split,
    pub seed: u64,
    pub steps: usize,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub version: u32,
    pub episodes: Vec<IndexEntry>,
}

pub fn encode_observation(obs: &Observation) -> Vec<u8> {
    let (h, w) = obs.shape();
    let mut raw = Vec::with_capacity(12 + 4 * (obs.color.len() + obs.height.len()));
    raw.extend_from_slice(b"OBS1");
    raw.extend_from_slice(&(h as u32).to_le_bytes());
    raw.extend_from_slice(&(w as u32).to_le_bytes());
    for x in obs.color.iter().chain(&obs.height) {
        raw.extend_from_slice(&x.to_le_bytes());
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn decode_observation(bytes: &[u8], frame: WorkspaceFrame) -> Result<Observation> {
    let mut raw = Vec::new();
    ZlibDecoder::new(bytes)
        .read_to_end(&mut raw)
        .map_err(|e| Error::Serde(format!("corrupt observation stream: {e}")))?;
    if raw.len() < 12 || &raw[..4] != b"OBS1" {
        return Err(Error::Serde("observation stream has no OBS1 header".into()));
    }
    let h = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes")) as usize;
    if (h, w) != (frame.height, frame.width) || raw.len() != 12 + 16 * h * w {
        return Err(Error::Shape(format!(
            "stored observation {h}x{w} does not match {}x{} frame",
            frame.height, frame.width
        )));
    }
    let vals: Vec<f32> = raw[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (color, height) = vals.split_at(h * w * 3);
    let obs = Observation {
        color: color.to_vec(),
        height: height.to_vec(),
        frame,
    };
    obs.validate()?;
    Ok(obs)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl Episode {
    pub fn frame(&self) -> Result<WorkspaceFrame> {
        self.records
            .first()
            .map(|r| r.obs.frame)
            .ok_or_else(|| Error::Domain("episode has no records".into()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut steps = Vec::new();
        for (t, r) in self.records.iter().enumerate() {
            let name = format!("obs_{t:03}.zz");
            write_file(&dir.join(&name), &encode_observation(&r.obs))?;
            steps.push(StepManifest {
                instruction: r.instruction.clone(),
                action: r.action,
                observation: name,
            });
        }
        let final_observation = match &self.final_obs {
            Some(obs) => {
                write_file(&dir.join("obs_final.zz"), &encode_observation(obs))?;
                Some("obs_final.zz".to_string())
            }
            None => None,
        };
        let manifest = Manifest {
            version: FORMAT_VERSION,
            task: self.task,
            split: self.split,
            seed: self.seed,
            source: self.source,
            score: self.score,
            frame: self.frame()?,
            steps,
            final_observation,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Serde(format!("unsupported episode format version {}", m.version)));
        }
        let records = m
            .steps
            .iter()
            .map(|s| {
                Ok(Record {
                    obs: decode_observation(&read_file(&dir.join(&s.observation))?, m.frame)?,
                    instruction: s.instruction.clone(),
                    action: s.action,
                })
            })
            .collect::<Result<_>>()?;
        let final_obs = match &m.final_observation {
            Some(name) => Some(decode_observation(&read_file(&dir.join(name))?, m.frame)?),
            None => None,
        };
        Ok(Episode {
            task: m.task,
            split: m.split,
            seed: m.seed,
            source: m.source,
            score: m.score,
            records,
            final_obs,
        })
    }

    /// Re-run the stored actions from the episode's seed. Returns the
    /// observations seen before each action and the final score.
    pub fn replay(&self) -> Result<(Vec<Observation>, f64)> {
        let frame = self.frame()?;
        let inst = tasks::sample_instance(self.task, self.split, self.seed, &frame)?;
        let (mut state, goal) = (inst.state, inst.goal);
        let mut history = History::default();
        let mut seen = Vec::new();
        for r in &self.records {
            seen.push(tasks::observe(&state, &frame));
            state = tasks::advance(&state, &goal, &mut history, &r.action);
        }
        Ok((seen, tasks::score(&state, &goal, &history)))
    }
}

/// Roll the scripted expert on one seed.
pub fn expert_episode(task: TaskName, split: Split, seed: u64, frame: &WorkspaceFrame) -> Result<Episode> {
    let inst = tasks::sample_instance(task, split, seed, frame)?;
    let (mut state, goal) = (inst.state, inst.goal);
    let mut history = History::default();
    let mut records = Vec::new();
    while !tasks::is_complete(&state, &goal, &history) {
        let action = match tasks::expert_action(&state, &goal, &history) {
            Ok(a) => a,
            Err(Error::Done) => break,
            Err(e) => return Err(e),
        };
        records.push(Record {
            obs: tasks::observe(&state, frame),
            instruction: goal.instruction(&history),
            action,
        });
        state = tasks::advance(&state, &goal, &mut history, &action);
    }
    Ok(Episode {
        task,
        split,
        seed,
        source: Source::Expert,
        score: tasks::score(&state, &goal, &history),
        records,
        final_obs: Some(tasks::observe(&state, frame)),
    })
}

/// A loaded dataset: every episode held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Create an empty dataset directory (or reuse an empty one).
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ds = Dataset {
            dir: dir.to_path_buf(),
            episodes: Vec::new(),
        };
        ds.write_index()?;
        Ok(ds)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        if !path.exists() {
            return Err(Error::NotFound(format!("no dataset at {}", dir.display())));
        }
        let index: Index = serde_json::from_slice(&read_file(&path)?)?;
        let episodes = index
            .episodes
            .iter()
            .map(|e| Episode::load(&dir.join(&e.dir)))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            episodes,
        })
    }

    fn entry_dir(i: usize) -> String {
        format!("episode_{i:06}")
    }

    fn write_index(&self) -> Result<()> {
        let index = Index {
            version: FORMAT_VERSION,
            episodes: self
                .episodes
                .iter()
                .enumerate()
                .map(|(i, e)| IndexEntry {
                    dir: Self::entry_dir(i),
                    task: e.task,
                    split: e.split,
                    seed: e.seed,
                    steps: e.records.len(),
                    source: e.source,
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&index)?;
        text.push('\n');
        write_file(&self.dir.join("index.json"), text.as_bytes())
    }

    /// Persist an episode and list it in the index.
    pub fn append(&mut self, episode: Episode) -> Result<()> {
        episode.save(&self.dir.join(Self::entry_dir(self.episodes.len())))?;
        self.episodes.push(episode);
        self.write_index()
    }

    /// Number of (episode, step) pairs.
    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, mut i: usize) -> TrainingPair {
        for e in &self.episodes {
            if i < e.records.len() {
                let r = &e.records[i];
                return TrainingPair {
                    obs: r.obs.clone(),
                    instruction: r.instruction.clone(),
                    pick: r.action.pick,
                    place: r.action.place,
                    task: e.task,
                    goal_obs: e.final_obs.clone(),
                };
            }
            i -= e.records.len();
        }
        panic!("pair index out of range");
    }
}

/// Run the expert on seeds `base_seed, base_seed + 1, ...` until `n`
/// full-score episodes are stored in `dir`.
pub fn generate_demonstrations(
    dir: &Path,
    task: TaskName,
    split: Split,
    n: usize,
    base_seed: u64,
    frame: &WorkspaceFrame,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Domain("need at least one demonstration".into()));
    }
    let mut ds = Dataset::create(dir)?;
    let mut recent: Vec<bool> = Vec::new();
    let mut seed = base_seed;
    while ds.episodes.len() < n {
        let ok = match expert_episode(task, split, seed, frame) {
            Ok(ep) if ep.score >= 100.0 => {
                ds.append(ep)?;
                true
            }
            Ok(ep) => {
                log::warn!("{task} seed {seed}: expert scored {:.1}, resampling", ep.score);
                false
            }
            Err(e) => {
                log::warn!("{task} seed {seed}: {e}, resampling");
                false
            }
        };
        recent.push(ok);
        if recent.len() > FAILURE_WINDOW {
            recent.remove(0);
        }
        let failures = recent.iter().filter(|x| !**x).count();
        if recent.len() == FAILURE_WINDOW && failures * 2 > FAILURE_WINDOW {
            return Err(Error::Expert(format!(
                "{task} ({}): {failures} of the last {FAILURE_WINDOW} expert episodes failed, last seed {seed}",
                split.as_str()
            )));
        }
        seed += 1;
    }
    Ok(ds)
}

/// One supervised example: observation, instruction and expert labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub obs: Observation,
    pub instruction: String,
    pub pick: PixelPose,
    pub place: PixelPose,
    pub task: TaskName,
    pub goal_obs: Option<Observation>,
}

fn map_label(p: &PixelPose, t: &Se2, shift: f64, frame: &WorkspaceFrame) -> Option<PixelPose> {
    let (u, v) = t.map_pixel(p.u, p.v);
    if !frame.contains_pixel(u, v) {
        return None;
    }
    let rot = (p.rot + nearest_bin(shift, p.k)) % p.k;
    Some(PixelPose::new(u as usize, v as usize, rot, p.k))
}

/// Warp a pair under `t`; `None` when a label leaves the frame.
///
/// Both rotation labels turn by the pick-bin approximation of `t.dtheta`, so
/// the pick-to-place rotation is unchanged. With a single pick bin the labels
/// keep their bins.
pub fn augment_with(pair: &TrainingPair, t: &Se2) -> Option<TrainingPair> {
    let frame = pair.obs.frame;
    let shift = bin_angle(nearest_bin(t.dtheta, pair.pick.k), pair.pick.k);
    let pick = map_label(&pair.pick, t, shift, &frame)?;
    let place = map_label(&pair.place, t, shift, &frame)?;
    Some(TrainingPair {
        obs: warp_se2(&pair.obs, t),
        instruction: pair.instruction.clone(),
        pick,
        place,
        task: pair.task,
        goal_obs: pair.goal_obs.as_ref().map(|g| warp_se2(g, t)),
    })
}

/// Random transform: rotation by a whole place bin about the image center,
/// integer shift within a quarter of the image extent.
pub fn random_transform<R: Rng + ?Sized>(frame: &WorkspaceFrame, k: usize, rng: &mut R) -> Se2 {
    let (h, w) = (frame.height as i64, frame.width as i64);
    Se2 {
        du: rng.random_range(-h / 4..=h / 4) as f64,
        dv: rng.random_range(-w / 4..=w / 4) as f64,
        dtheta: bin_angle(rng.random_range(0..k), k),
        center: (h as f64 / 2.0, w as f64 / 2.0),
    }
}

pub fn augment<R: Rng + ?Sized>(pair: &TrainingPair, rng: &mut R) -> Option<TrainingPair> {
    let t = random_transform(&pair.obs.frame, pair.place.k, rng);
    augment_with(pair, &t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Single,
    Multi,
}

/// Draw one training pair.
///
/// Single mode is uniform over every pair of every dataset; multi mode picks a
/// dataset uniformly, then a pair within it.
pub fn sample_training_pair<R: Rng + ?Sized>(
    datasets: &[Dataset],
    mode: SampleMode,
    rng: &mut R,
    augment_flag: bool,
) -> Result<TrainingPair> {
    let usable: Vec<&Dataset> = datasets.iter().filter(|d| !d.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Domain("no training pairs available".into()));
    }
    let pair = match mode {
        SampleMode::Single => {
            let total: usize = usable.iter().map(|d| d.len()).sum();
            let mut i = rng.random_range(0..total);
            let mut out = None;
            for d in &usable {
                if i < d.len() {
                    out = Some(d.pair(i));
                    break;
                }
                i -= d.len();
            }
            out.expect("index within total")
        }
        SampleMode::Multi => {
            let d = usable[rng.random_range(0..usable.len())];
            d.pair(rng.random_range(0..d.len()))
        }
    };
    if !augment_flag {
        return Ok(pair);
    }
    for _ in 0..AUGMENT_RETRIES {
        if let Some(p) = augment(&pair, rng) {
            return Ok(p);
        }
    }
    log::warn!("augmentation rejected {AUGMENT_RETRIES} times; using the stored pair");
    Ok(pair)
}
