//! Rollouts, multi-seed scoring and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Record};
use crate::error::{Error, Result};
use crate::geometry::{Observation, PixelAction, PixelPose, WorkspaceFrame};
use crate::model::{Goal, GoalMode, Model};
use crate::simulator::SceneState;
use crate::tasks::{self, GoalState, History, Split, TaskName};

/// Evaluation seeds start here so they never overlap demonstration or
/// validation seeds.
pub const EVAL_SEED_BASE: u64 = 1_000_000;
pub const DEFAULT_EPISODES: usize = 20;
pub const REPORT_VERSION: u32 = 1;

/// What a policy sees on one step. `state`, `goal` and `history` are
/// privileged and only used by the scripted expert.
pub struct StepView<'a> {
    pub obs: &'a Observation,
    pub instruction: &'a str,
    pub goal_image: Option<&'a Observation>,
    pub state: &'a SceneState,
    pub goal: &'a GoalState,
    pub history: &'a History,
}

pub trait Policy {
    /// `Err(Error::Done)` ends the episode early.
    fn act(&mut self, view: &StepView) -> Result<PixelAction>;

    fn wants_goal_image(&self) -> bool {
        false
    }
}

/// Scripted expert with access to the simulator state.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&mut self, view: &StepView) -> Result<PixelAction> {
        tasks::expert_action(view.state, view.goal, view.history)
    }
}

/// Uniform over pixels and bins.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    k_pick: usize,
    k_place: usize,
}

impl RandomPolicy {
    pub fn new(seed: u64, k_pick: usize, k_place: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            k_pick,
            k_place,
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, view: &StepView) -> Result<PixelAction> {
        let (h, w) = view.obs.shape();
        let mut pose = |k: usize| PixelPose::new(self.rng.random_range(0..h), self.rng.random_range(0..w), self.rng.random_range(0..k), k);
        let pick = pose(self.k_pick);
        Ok(PixelAction { pick, place: pose(self.k_place) })
    }
}

/// Greedy argmax policy of a trained model.
pub struct ModelPolicy<'m> {
    pub model: &'m Model<f32>,
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, view: &StepView) -> Result<PixelAction> {
        let goal = match self.model.config.goal_mode {
            GoalMode::Language => Goal::Text(view.instruction),
            GoalMode::ImageGoal => Goal::Image(
                view.goal_image
                    .ok_or_else(|| Error::Config("image-goal policy needs a goal image".into()))?,
            ),
            GoalMode::None => Goal::None,
        };
        self.model.act(view.obs, &goal)
    }

    fn wants_goal_image(&self) -> bool {
        self.model.config.goal_mode == GoalMode::ImageGoal
    }
}

/// Result of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub score: f64,
    pub trajectory: Vec<Record>,
    /// Actions that had to be clamped into the frame.
    pub clamped: usize,
}

/// Pull a pose into the frame and its bin into range.
pub fn clamp_pose(p: &PixelPose, frame: &WorkspaceFrame) -> PixelPose {
    let k = p.k.max(1);
    PixelPose::new(p.u.min(frame.height - 1), p.v.min(frame.width - 1), p.rot % k, k)
}

/// Roll `policy` on one seeded instance until the task completes, the policy
/// reports done, or the step cap is hit.
pub fn run_episode(policy: &mut dyn Policy, task: TaskName, split: Split, seed: u64, frame: &WorkspaceFrame) -> Result<Rollout> {
    let inst = tasks::sample_instance(task, split, seed, frame)?;
    let goal_image = if policy.wants_goal_image() {
        dataset::expert_episode(task, split, seed, frame)?.final_obs
    } else {
        None
    };
    let (mut state, goal) = (inst.state, inst.goal);
    let mut history = History::default();
    let mut trajectory = Vec::new();
    let mut clamped = 0;
    while !tasks::is_complete(&state, &goal, &history) && trajectory.len() < goal.max_steps {
        let obs = tasks::observe(&state, frame);
        let instruction = goal.instruction(&history);
        let view = StepView {
            obs: &obs,
            instruction: &instruction,
            goal_image: goal_image.as_ref(),
            state: &state,
            goal: &goal,
            history: &history,
        };
        let raw = match policy.act(&view) {
            Ok(a) => a,
            Err(Error::Done) => break,
            Err(e) => return Err(e),
        };
        let action = PixelAction {
            pick: clamp_pose(&raw.pick, frame),
            place: clamp_pose(&raw.place, frame),
        };
        if action != raw {
            log::warn!("{task} seed {seed} step {}: clamped out-of-bounds action {raw:?}", trajectory.len());
            clamped += 1;
        }
        state = tasks::advance(&state, &goal, &mut history, &action);
        trajectory.push(Record { obs, instruction, action });
    }
    Ok(Rollout {
        score: tasks::score(&state, &goal, &history),
        trajectory,
        clamped,
    })
}

/// One report row: a (task, split, demos, variant) cell with its episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: TaskName,
    pub split: Split,
    pub n_demos: usize,
    pub variant: String,
    pub mean: f64,
    pub episodes: usize,
    pub scores: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EvalRow {
    pub fn new(task: TaskName, split: Split, n_demos: usize, variant: &str, seeds: Vec<u64>, scores: Vec<f64>) -> Self {
        Self {
            task,
            split,
            n_demos,
            variant: variant.to_string(),
            mean: mean(&scores),
            episodes: scores.len(),
            scores,
            seeds,
        }
    }

    /// Mean and count agree with the per-episode scores, all in `[0, 100]`.
    pub fn check(&self) -> Result<()> {
        let ok = self.episodes == self.scores.len()
            && self.seeds.len() == self.scores.len()
            && self.mean == mean(&self.scores)
            && self.scores.iter().all(|s| (0.0..=100.0).contains(s));
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "row {}/{}/{} is inconsistent with its episode scores",
                self.task,
                self.variant,
                self.n_demos
            )))
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Run seeds `base_seed .. base_seed + n_episodes`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &mut dyn Policy,
    task: TaskName,
    split: Split,
    n_episodes: usize,
    base_seed: u64,
    frame: &WorkspaceFrame,
    variant: &str,
    n_demos: usize,
) -> Result<EvalRow> {
    if n_episodes == 0 {
        return Err(Error::Domain("need at least one evaluation episode".into()));
    }
    let seeds: Vec<u64> = (base_seed..base_seed + n_episodes as u64).collect();
    let mut scores = Vec::with_capacity(n_episodes);
    for &seed in &seeds {
        scores.push(run_episode(policy, task, split, seed, frame)?.score);
    }
    Ok(EvalRow::new(task, split, n_demos, variant, seeds, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>) -> Self {
        Self {
            version: REPORT_VERSION,
            rows,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.rows.iter().try_for_each(EvalRow::check)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(format!("report {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        r.check()?;
        Ok(r)
    }
}

/// Marker for cells with no row.
pub const MISSING: &str = "\u{2013}";

/// Plain-text grid of mean scores, variants down and (task, split, demos)
/// across, plus the rows as JSON. Rows and columns are sorted.
pub fn make_report(rows: &[EvalRow]) -> Result<(String, String)> {
    for r in rows {
        r.check()?;
    }
    let mut cols: Vec<(TaskName, Split, usize)> = rows.iter().map(|r| (r.task, r.split, r.n_demos)).collect();
    cols.sort_by_key(|(t, s, n)| (*t, s.as_str(), *n));
    cols.dedup();
    let mut variants: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    variants.sort();
    variants.dedup();
    let mut cells: BTreeMap<(&str, (TaskName, &str, usize)), f64> = BTreeMap::new();
    for r in rows {
        cells.insert((r.variant.as_str(), (r.task, r.split.as_str(), r.n_demos)), r.mean);
    }
    let headers: Vec<String> = cols.iter().map(|(t, s, n)| format!("{t}/{}/n={n}", s.as_str())).collect();
    let first = variants.iter().map(|v| v.chars().count()).max().unwrap_or(0).max("variant".len());
    let widths: Vec<usize> = headers.iter().map(|h| h.chars().count().max(5)).collect();
    let mut text = String::new();
    let _ = write!(text, "{:<first$}", "variant");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(text, "  {h:>w$}");
    }
    text.push('\n');
    for v in &variants {
        let _ = write!(text, "{v:<first$}");
        for ((t, s, n), w) in cols.iter().zip(&widths) {
            let cell = match cells.get(&(*v, (*t, s.as_str(), *n))) {
                Some(m) => format!("{m:.1}"),
                None => MISSING.to_string(),
            };
            let _ = write!(text, "  {cell:>w$}");
        }
        text.push('\n');
    }
    let mut json = serde_json::to_string_pretty(&EvalReport::new(rows.to_vec()))?;
    json.push('\n');
    Ok((text, json))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> WorkspaceFrame {
        WorkspaceFrame::standard()
    }

    #[test]
    fn expert_policy_scores_full_marks() {
        for task in TaskName::ALL {
            let r = run_episode(&mut ExpertPolicy, task, Split::Unseen, 3, &frame()).unwrap();
            assert_eq!(r.score, 100.0, "{task}");
            assert_eq!(r.clamped, 0);
        }
    }

    #[test]
    fn random_policy_is_well_below_expert() {
        let mut p = RandomPolicy::new(0, 1, 36);
        let row = evaluate(&mut p, TaskName::PutBlocksInBowls, Split::Seen, 5, 0, &frame(), "random", 0).unwrap();
        assert!(row.mean < 50.0, "{}", row.mean);
        assert_eq!(row.episodes, 5);
    }

    struct Wild;

    impl Policy for Wild {
        fn act(&mut self, _: &StepView) -> Result<PixelAction> {
            Ok(PixelAction {
                pick: PixelPose::new(9999, 3, 7, 1),
                place: PixelPose::new(1, 500, 40, 36),
            })
        }
    }

    #[test]
    fn invalid_actions_are_clamped_not_dropped() {
        let r = run_episode(&mut Wild, TaskName::PutBlocksInBowls, Split::Seen, 0, &frame()).unwrap();
        assert!(r.clamped > 0);
        assert_eq!(r.clamped, r.trajectory.len());
        let a = r.trajectory[0].action;
        assert_eq!((a.pick.u, a.pick.rot, a.place.v, a.place.rot), (127, 0, 127, 4));
        let row = evaluate(&mut Wild, TaskName::PutBlocksInBowls, Split::Seen, 3, 0, &frame(), "wild", 0).unwrap();
        assert_eq!(row.episodes, 3);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let a = run_episode(&mut RandomPolicy::new(4, 1, 36), TaskName::StackBlockPyramidSeq, Split::Seen, 2, &frame()).unwrap();
        let b = run_episode(&mut RandomPolicy::new(4, 1, 36), TaskName::StackBlockPyramidSeq, Split::Seen, 2, &frame()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn row_mean_and_round_trip() {
        let row = EvalRow::new(TaskName::PutBlocksInBowls, Split::Seen, 10, "two-stream", vec![0, 1, 2, 3], vec![60.0, 80.0, 100.0, 100.0]);
        assert_eq!(row.mean, 85.0);
        let rep = EvalReport::new(vec![row.clone()]);
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("r.json");
        rep.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), rep);
        let mut bad = row;
        bad.mean = 10.0;
        assert!(bad.check().is_err());
    }

    #[test]
    fn report_grid_layout() {
        let one = EvalRow::new(TaskName::PutBlocksInBowls, Split::Seen, 10, "two-stream", vec![0], vec![50.0]);
        let (text, _) = make_report(std::slice::from_ref(&one)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("50.0"));
        let other = EvalRow::new(TaskName::TowersOfHanoiSeq, Split::Unseen, 1, "spatial-only", vec![0], vec![20.0]);
        let (a, json) = make_report(&[one.clone(), other.clone()]).unwrap();
        let (b, _) = make_report(&[other, one]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matches(MISSING).count(), 2);
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows.len(), 2);
    }
}
