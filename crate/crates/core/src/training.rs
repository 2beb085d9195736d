//! Imitation training: dense cross-entropy, SGD or Adam steps, checkpoints
//! and rollout-based checkpoint selection.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_training_pair, Dataset, SampleMode, TrainingPair};
use crate::error::{Error, Result};
use crate::evaluation::{self, ModelPolicy};
use crate::geometry::{PixelPose, WorkspaceFrame};
use crate::model::{AffordanceMaps, Checkpoint, Goal, GoalMode, Model, ModelConfig};
use crate::nn::softmax_cross_entropy;
use crate::tasks::{Split, TaskName};

/// Validation rollouts use seeds from here up.
pub const VALIDATION_SEED_BASE: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: SampleMode,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augment: bool,
    /// Save a checkpoint every this many steps (and after the last).
    pub checkpoint_every: usize,
    /// Validation rollouts per task and checkpoint.
    pub eval_episodes: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: SampleMode::Single,
            iterations: 5000,
            learning_rate: 1e-4,
            batch_size: 1,
            augment: true,
            checkpoint_every: 1000,
            eval_episodes: 5,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("iterations, batch size and checkpoint cadence must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One-hot targets of both heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Labels {
    pub pick: PixelPose,
    pub place: PixelPose,
}

fn flat_index(map: (usize, usize, usize), p: &PixelPose) -> Result<usize> {
    let (h, w, k) = map;
    if p.u >= h || p.v >= w || p.k != k || p.rot >= k {
        return Err(Error::Shape(format!("label {p:?} does not index a {h}x{w}x{k} map")));
    }
    Ok((p.u * w + p.v) * k + p.rot)
}

/// `-log softmax(q_pick)[pick] - log softmax(q_place)[place]`.
pub fn compute_loss(maps: &AffordanceMaps, labels: &Labels) -> Result<f64> {
    let a = flat_index(maps.q_pick.shape(), &labels.pick)?;
    let b = flat_index(maps.q_place.shape(), &labels.place)?;
    Ok(softmax_cross_entropy(&maps.q_pick.data, a)?.0 + softmax_cross_entropy(&maps.q_place.data, b)?.0)
}

/// Goal input for a pair under the model's goal mode.
pub fn pair_goal<'a>(pair: &'a TrainingPair, mode: GoalMode) -> Result<Goal<'a>> {
    Ok(match mode {
        GoalMode::Language => Goal::Text(&pair.instruction),
        GoalMode::ImageGoal => Goal::Image(
            pair.goal_obs
                .as_ref()
                .ok_or_else(|| Error::Config("image-goal training needs episodes with a final observation".into()))?,
        ),
        GoalMode::None => Goal::None,
    })
}

/// Parameter update rule with its state.
pub enum Stepper {
    Sgd { lr: f32 },
    Adam { lr: f32, t: i32, m: Vec<Vec<f32>>, v: Vec<Vec<f32>> },
}

impl Stepper {
    pub fn new(kind: Optimizer, lr: f64, model: &Model<f32>) -> Self {
        match kind {
            Optimizer::Sgd => Stepper::Sgd { lr: lr as f32 },
            Optimizer::Adam => Stepper::Adam {
                lr: lr as f32,
                t: 0,
                m: model.params.zero_grads(),
                v: model.params.zero_grads(),
            },
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &[Vec<f32>]) {
        match self {
            Stepper::Sgd { lr } => {
                for (p, g) in model.params.params.iter_mut().zip(grads) {
                    for (x, d) in p.value.iter_mut().zip(g) {
                        *x -= *lr * d;
                    }
                }
            }
            Stepper::Adam { lr, t, m, v } => {
                const B1: f32 = 0.9;
                const B2: f32 = 0.999;
                const EPS: f32 = 1e-8;
                *t += 1;
                let (c1, c2) = (1.0 - B1.powi(*t), 1.0 - B2.powi(*t));
                for (((p, g), m), v) in model.params.params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for i in 0..p.value.len() {
                        m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                        v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                        p.value[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub pick_loss: f64,
    pub place_loss: f64,
    pub task: TaskName,
}

/// Snapshot written to `config.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub tasks: Vec<TaskName>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<LossRecord>,
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Train a fresh model on `datasets`; with `run_dir`, write the config
/// snapshot, `losses.jsonl` and checkpoints there.
pub fn train(tc: &TrainConfig, mc: &ModelConfig, datasets: &[Dataset], run_dir: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate()?;
    let frame = datasets
        .iter()
        .find_map(|d| d.episodes.first().and_then(|e| e.frame().ok()))
        .ok_or_else(|| Error::Domain("no training pairs available".into()))?;
    let mut model = Model::<f32>::new(mc.clone(), frame.height, frame.width)?;
    train_model(tc, &mut model, datasets, run_dir)
}

/// Continue training `model` in place from step 0 of `tc`.
pub fn train_model(tc: &TrainConfig, model: &mut Model<f32>, datasets: &[Dataset], run_dir: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate()?;
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let mut tasks: Vec<TaskName> = datasets.iter().flat_map(|d| d.episodes.iter().map(|e| e.task)).collect();
            tasks.sort();
            tasks.dedup();
            let snap = RunConfig {
                train: tc.clone(),
                model: model.config.clone(),
                tasks,
            };
            let text = serde_json::to_string_pretty(&snap)? + "\n";
            let p = dir.join("config.json");
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            let p = dir.join("losses.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut stepper = Stepper::new(tc.optimizer, tc.learning_rate, model);
    let mut losses = Vec::with_capacity(tc.iterations);
    let mut checkpoints = Vec::new();
    for step in 0..tc.iterations {
        let mut grads = model.params.zero_grads();
        let (mut pick_loss, mut place_loss) = (0.0, 0.0);
        let mut task = None;
        for _ in 0..tc.batch_size {
            let pair = sample_training_pair(datasets, tc.mode, &mut rng, tc.augment)?;
            let goal = pair_goal(&pair, model.config.goal_mode)?;
            let out = match model.loss_and_grads(&pair.obs, &goal, &pair.pick, &pair.place) {
                Err(Error::Numerical(msg)) => return Err(halt(model, step, &rng, run_dir, &msg)),
                other => other?,
            };
            pick_loss += out.pick_loss / tc.batch_size as f64;
            place_loss += out.place_loss / tc.batch_size as f64;
            let scale = 1.0 / tc.batch_size as f32;
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
            task.get_or_insert(pair.task);
        }
        let loss = pick_loss + place_loss;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(halt(model, step, &rng, run_dir, &format!("loss {loss} at step {step}")));
        }
        stepper.step(model, &grads);
        let rec = LossRecord {
            step,
            loss,
            pick_loss,
            place_loss,
            task: task.expect("batch size is positive"),
        };
        if let Some((f, p)) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*p, e))?;
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {loss:.4}");
        }
        losses.push(rec);
        let done = step + 1;
        if done % tc.checkpoint_every == 0 || done == tc.iterations {
            let ck = Checkpoint::capture(model, done, &rng);
            if let Some(dir) = run_dir {
                ck.save(&checkpoint_path(dir, done))?;
            }
            checkpoints.push(ck);
        }
    }
    Ok(TrainOutcome {
        model: Model::new(model.config.clone(), model.frame.0, model.frame.1).and_then(|mut m| {
            m.load_params(&model.params)?;
            Ok(m)
        })?,
        checkpoints,
        losses,
    })
}

/// Save a diagnostic checkpoint and build the error that stops training.
fn halt(model: &Model<f32>, step: usize, rng: &ChaCha8Rng, run_dir: Option<&Path>, msg: &str) -> Error {
    if let Some(dir) = run_dir {
        let p = dir.join("diagnostic.ckpt");
        if let Err(e) = Checkpoint::capture(model, step, rng).save(&p) {
            log::error!("could not write diagnostic checkpoint: {e}");
        }
    }
    Error::Numerical(format!("training halted at step {step}: {msg}"))
}

/// Mean validation score of one checkpoint on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub step: usize,
    pub task: TaskName,
    pub split: Split,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Index into the checkpoint list of the best checkpoint per task.
    pub best: Vec<(TaskName, usize)>,
    pub table: Vec<ValidationRow>,
}

/// Pick, per task, the checkpoint with the highest score; ties go to the
/// later checkpoint.
pub fn select_best_by<F>(checkpoints: &[Checkpoint], tasks: &[(TaskName, Split)], mut score: F) -> Result<Selection>
where
    F: FnMut(&Checkpoint, TaskName, Split) -> Result<f64>,
{
    if checkpoints.is_empty() {
        return Err(Error::Domain("no checkpoints to select from".into()));
    }
    let mut table = Vec::new();
    let mut best = Vec::new();
    for &(task, split) in tasks {
        let mut top: Option<(usize, f64)> = None;
        for (i, ck) in checkpoints.iter().enumerate() {
            let mean = score(ck, task, split)?;
            table.push(ValidationRow {
                step: ck.step,
                task,
                split,
                mean,
            });
            if top.is_none_or(|(_, m)| mean >= m) {
                top = Some((i, mean));
            }
        }
        best.push((task, top.expect("non-empty").0));
    }
    Ok(Selection { best, table })
}

/// Rollout-based selection on validation seeds.
pub fn select_best_checkpoint(
    checkpoints: &[Checkpoint],
    tasks: &[(TaskName, Split)],
    episodes: usize,
    frame: &WorkspaceFrame,
) -> Result<Selection> {
    select_best_by(checkpoints, tasks, |ck, task, split| {
        let model = ck.model(None)?;
        let mut policy = ModelPolicy { model: &model };
        let row = evaluation::evaluate(&mut policy, task, split, episodes, VALIDATION_SEED_BASE, frame, "validation", 0)?;
        Ok(row.mean)
    })
}

/// Write the selection as `validation.json` and copy each task's best
/// checkpoint to `best_<task>.ckpt` (and `best.ckpt` for a single task).
pub fn write_selection(run_dir: &Path, checkpoints: &[Checkpoint], sel: &Selection) -> Result<()> {
    let p = run_dir.join("validation.json");
    std::fs::write(&p, serde_json::to_string_pretty(sel)? + "\n").map_err(|e| Error::io(&p, e))?;
    for (task, i) in &sel.best {
        checkpoints[*i].save(&run_dir.join(format!("best_{task}.ckpt")))?;
    }
    if let [(_, i)] = sel.best.as_slice() {
        checkpoints[*i].save(&run_dir.join("best.ckpt"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_demonstrations;
    use crate::nn::Tensor;

    #[test]
    fn uniform_maps_give_log_counts() {
        let maps = AffordanceMaps {
            q_pick: Tensor::zeros(128, 128, 1),
            q_place: Tensor::zeros(128, 128, 36),
        };
        let labels = Labels {
            pick: PixelPose::new(3, 4, 0, 1),
            place: PixelPose::new(5, 6, 7, 36),
        };
        let want = (128.0f64 * 128.0).ln() + (128.0f64 * 128.0 * 36.0).ln();
        assert!((compute_loss(&maps, &labels).unwrap() - want).abs() < 1e-9);
        let mut bad = maps.clone();
        bad.q_pick.data[0] = f32::INFINITY;
        assert!(matches!(compute_loss(&bad, &labels), Err(Error::Numerical(_))));
        let wrong = Labels {
            place: PixelPose::new(5, 6, 7, 8),
            ..labels
        };
        assert!(matches!(compute_loss(&maps, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let d = TrainConfig::default();
        assert_eq!((d.learning_rate, d.batch_size), (1e-4, 1));
        assert!(TrainConfig { iterations: 0, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..d }.validate().is_err());
    }

    fn ck(step: usize) -> Checkpoint {
        let m = Model::<f32>::new(ModelConfig::variant("spatial-only").unwrap(), 64, 64).unwrap();
        Checkpoint::capture(&m, step, &ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn selection_prefers_score_then_latest() {
        let cks = vec![ck(1), ck(2), ck(3)];
        let tasks = [(TaskName::PutBlocksInBowls, Split::Seen), (TaskName::PackingBoxPairs, Split::Seen)];
        let sel = select_best_by(&cks, &tasks, |c, t, _| {
            Ok(match (t, c.step) {
                (TaskName::PutBlocksInBowls, 1) => 100.0,
                (TaskName::PutBlocksInBowls, _) => 0.0,
                _ => 50.0,
            })
        })
        .unwrap();
        assert_eq!(sel.best, vec![(TaskName::PutBlocksInBowls, 0), (TaskName::PackingBoxPairs, 2)]);
        assert_eq!(sel.table.len(), 6);
        let one = select_best_by(&cks[..1], &tasks[..1], |_, _, _| Ok(0.0)).unwrap();
        assert_eq!(one.best, vec![(TaskName::PutBlocksInBowls, 0)]);
        assert!(select_best_by(&[], &tasks, |_, _, _| Ok(0.0)).is_err());
    }

    #[test]
    fn short_run_writes_run_dir_and_is_deterministic() {
        let d = tempfile::tempdir().unwrap();
        let frame = WorkspaceFrame::square(64);
        let ds = generate_demonstrations(&d.path().join("demos"), TaskName::PutBlocksInBowls, Split::Seen, 1, 0, &frame).unwrap();
        let mc = ModelConfig {
            crop: 16,
            k_place: 8,
            ..ModelConfig::variant("spatial-only").unwrap()
        };
        // expert labels use 36 bins; remap for the small model
        let mut ds = ds;
        for e in &mut ds.episodes {
            for r in &mut e.records {
                r.action.place = PixelPose::new(r.action.place.u, r.action.place.v, r.action.place.rot * 8 / 36, 8);
            }
        }
        let tc = TrainConfig {
            iterations: 6,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let run = d.path().join("run");
        let a = train(&tc, &mc, std::slice::from_ref(&ds), Some(&run)).unwrap();
        let b = train(&tc, &mc, std::slice::from_ref(&ds), None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.checkpoints[1].checksum(), b.checkpoints[1].checksum());
        assert!(checkpoint_path(&run, 3).exists() && checkpoint_path(&run, 6).exists());
        let log = std::fs::read_to_string(run.join("losses.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);
        let first: LossRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        let uniform = (64.0f64 * 64.0).ln() + (64.0f64 * 64.0 * 8.0).ln();
        assert!((first.loss - uniform).abs() < 1.0, "{} vs {uniform}", first.loss);
        assert!(run.join("config.json").exists());
    }
}
