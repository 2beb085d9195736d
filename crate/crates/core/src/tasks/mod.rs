//! Task catalog: instance sampling, instructions, scripted experts and
//! partial-credit scoring.

mod sampling;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::geometry::{world_to_pixel, Observation, PixelAction, WorkspaceFrame};
use crate::simulator::SceneState;

pub use sampling::sample_instance;

/// Rotation bins used by expert actions: suction picks have one bin.
pub const EXPERT_K_PICK: usize = 1;
pub const EXPERT_K_PLACE: usize = 36;

/// Positional tolerance for a scheduled placement, in pixels.
pub const POSE_TOLERANCE_PX: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskName {
    #[serde(rename = "put-blocks-in-bowls")]
    PutBlocksInBowls,
    #[serde(rename = "packing-box-pairs")]
    PackingBoxPairs,
    #[serde(rename = "stack-block-pyramid-seq")]
    StackBlockPyramidSeq,
    #[serde(rename = "towers-of-hanoi-seq")]
    TowersOfHanoiSeq,
}

impl TaskName {
    pub const ALL: [TaskName; 4] = [
        TaskName::PutBlocksInBowls,
        TaskName::PackingBoxPairs,
        TaskName::StackBlockPyramidSeq,
        TaskName::TowersOfHanoiSeq,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::PutBlocksInBowls => "put-blocks-in-bowls",
            TaskName::PackingBoxPairs => "packing-box-pairs",
            TaskName::StackBlockPyramidSeq => "stack-block-pyramid-seq",
            TaskName::TowersOfHanoiSeq => "towers-of-hanoi-seq",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    /// Attribute colors available to this split, split-specific colors first.
    pub fn colors(&self, cat: &Catalog) -> Vec<String> {
        let own = match self {
            Split::Seen => &cat.splits.seen,
            Split::Unseen => &cat.splits.unseen,
        };
        own.iter().chain(&cat.splits.shared).cloned().collect()
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            _ => Err(Error::Config(format!("unknown split {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionMode {
    /// One instruction for the whole episode.
    Goal,
    /// A new instruction for every scheduled placement.
    Step,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub instruction_mode: InstructionMode,
    pub schedule_max: usize,
    pub colors: Vec<String>,
    pub metric: String,
}

impl TaskSpec {
    pub fn new(name: TaskName, split: Split) -> Result<Self> {
        let cat = Catalog::builtin();
        let doc = cat.task(name.as_str())?;
        Ok(Self {
            name,
            instruction_mode: if doc.instruction_mode == "step" {
                InstructionMode::Step
            } else {
                InstructionMode::Goal
            },
            schedule_max: doc.schedule_max,
            colors: split.colors(cat),
            metric: doc.metric.clone(),
        })
    }
}

/// Target pose for one scheduled placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub object: usize,
    pub x: f64,
    pub y: f64,
    /// Required yaw, if orientation matters.
    pub yaw: Option<f64>,
    /// Rotational symmetry period of the object (radians).
    pub symmetry: f64,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoalKind {
    BlocksInBowls {
        block_color: String,
        bowl_color: String,
        blocks: Vec<usize>,
        bowls: Vec<usize>,
        instruction: String,
    },
    BoxPairs {
        colors: [String; 2],
        container: usize,
        /// One slot per relevant box, in expert fill order.
        slots: Vec<Placement>,
        instruction: String,
    },
    /// Ordered placements, one instruction each.
    Sequence { schedule: Vec<Placement> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalState {
    pub task: TaskName,
    pub split: Split,
    pub frame: WorkspaceFrame,
    pub max_steps: usize,
    pub kind: GoalKind,
}

impl GoalState {
    /// Number of expert steps needed from the initial scene.
    pub fn schedule_len(&self) -> usize {
        match &self.kind {
            GoalKind::BlocksInBowls { blocks, .. } => blocks.len(),
            GoalKind::BoxPairs { slots, .. } => slots.len(),
            GoalKind::Sequence { schedule } => schedule.len(),
        }
    }

    /// Instruction in force after the recorded history.
    pub fn instruction(&self, history: &History) -> String {
        match &self.kind {
            GoalKind::BlocksInBowls { instruction, .. } | GoalKind::BoxPairs { instruction, .. } => {
                instruction.clone()
            }
            GoalKind::Sequence { schedule } => {
                let i = history.cursor().min(schedule.len() - 1);
                schedule[i].instruction.clone()
            }
        }
    }

    /// Every instruction the task can issue, in schedule order.
    pub fn instructions(&self) -> Vec<String> {
        match &self.kind {
            GoalKind::Sequence { schedule } => schedule.iter().map(|p| p.instruction.clone()).collect(),
            _ => vec![self.instruction(&History::default())],
        }
    }
}

/// What happened on one step, as needed for time-scheduled scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepOutcome {
    pub picked: Option<usize>,
    /// Index of the scheduled placement satisfied by this step.
    pub matched: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepOutcome>,
}

impl History {
    /// Index of the next scheduled placement.
    pub fn cursor(&self) -> usize {
        self.steps.iter().filter(|s| s.matched.is_some()).count()
    }
}

/// A sampled task instance: initial scene plus goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub state: SceneState,
    pub goal: GoalState,
}

/// `100 * achieved / total`, clamped to `[0, 100]`.
pub fn partial_credit(achieved: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    // volume sums can land an ulp short of the total
    if (achieved - total).abs() <= 1e-12 * total {
        return 100.0;
    }
    (100.0 * achieved / total).clamp(0.0, 100.0)
}

fn placement_matches(state: &SceneState, p: &Placement, frame: &WorkspaceFrame) -> bool {
    let o = state.object(p.object);
    let tol = POSE_TOLERANCE_PX * frame.pixel_size + 1e-9;
    if (o.pose.x - p.x).hypot(o.pose.y - p.y) > tol {
        return false;
    }
    match p.yaw {
        None => true,
        Some(target) => {
            let d = (o.pose.yaw - target).rem_euclid(p.symmetry);
            let d = d.min(p.symmetry - d);
            d <= 2.0 * std::f64::consts::PI / EXPERT_K_PLACE as f64 + 1e-9
        }
    }
}

/// Whether block `b` sits inside bowl `w` (center within the bowl interior).
fn in_bowl(state: &SceneState, b: usize, w: usize) -> bool {
    let (ob, ow) = (state.object(b), state.object(w));
    let inner = ow.size[0] / 2.0 - crate::simulator::BOWL_RIM;
    (ob.pose.x - ow.pose.x).hypot(ob.pose.y - ow.pose.y) <= inner && ob.pose.z >= ow.pose.z
}

fn in_container(state: &SceneState, b: usize, c: usize) -> bool {
    let (ob, oc) = (state.object(b), state.object(c));
    let (s, co) = oc.pose.yaw.sin_cos();
    let (dx, dy) = (ob.pose.x - oc.pose.x, ob.pose.y - oc.pose.y);
    let (lx, ly) = (co * dx + s * dy, -s * dx + co * dy);
    let wall = crate::simulator::CONTAINER_WALL;
    lx.abs() <= oc.size[0] / 2.0 - wall && ly.abs() <= oc.size[1] / 2.0 - wall
}

/// Target bowls each credited with at most one relevant block.
fn filled_bowls(state: &SceneState, blocks: &[usize], bowls: &[usize]) -> Vec<(usize, usize)> {
    let mut used = vec![false; blocks.len()];
    let mut pairs = Vec::new();
    for &w in bowls {
        if let Some(i) = (0..blocks.len()).find(|&i| !used[i] && in_bowl(state, blocks[i], w)) {
            used[i] = true;
            pairs.push((blocks[i], w));
        }
    }
    pairs
}

/// Partial-credit score in `[0, 100]`.
pub fn score(state: &SceneState, goal: &GoalState, history: &History) -> f64 {
    match &goal.kind {
        GoalKind::BlocksInBowls { blocks, bowls, .. } => {
            partial_credit(filled_bowls(state, blocks, bowls).len() as f64, blocks.len() as f64)
        }
        GoalKind::BoxPairs {
            container, slots, ..
        } => {
            let volume = |id: usize| {
                let s = state.object(id).size;
                s[0] * s[1] * s[2]
            };
            let total: f64 = slots.iter().map(|p| volume(p.object)).sum();
            let inside: f64 = slots
                .iter()
                .filter(|p| in_container(state, p.object, *container))
                .map(|p| volume(p.object))
                .sum();
            partial_credit(inside, total)
        }
        GoalKind::Sequence { schedule } => {
            let mut hit = vec![false; schedule.len()];
            for s in &history.steps {
                if let Some(i) = s.matched {
                    if i < hit.len() {
                        hit[i] = true;
                    }
                }
            }
            partial_credit(hit.iter().filter(|h| **h).count() as f64, schedule.len() as f64)
        }
    }
}

/// Classify a step for the history after it has been applied.
pub fn record_step(state_after: &SceneState, goal: &GoalState, history: &History, picked: Option<usize>) -> StepOutcome {
    let matched = match &goal.kind {
        GoalKind::Sequence { schedule } => {
            let i = history.cursor();
            (i < schedule.len()
                && picked == Some(schedule[i].object)
                && placement_matches(state_after, &schedule[i], &goal.frame))
            .then_some(i)
        }
        _ => None,
    };
    StepOutcome { picked, matched }
}

/// Done when fully solved or out of steps.
pub fn is_complete(state: &SceneState, goal: &GoalState, history: &History) -> bool {
    score(state, goal, history) >= 100.0 || state.step >= goal.max_steps
}

/// Apply `action`, append its outcome to `history` and return the new scene.
pub fn advance(state: &SceneState, goal: &GoalState, history: &mut History, action: &PixelAction) -> SceneState {
    let (next, picked) = crate::simulator::apply_pick_place(state, action, &goal.frame);
    let outcome = record_step(&next, goal, history, picked);
    history.steps.push(outcome);
    next
}

/// Render the scene the way every task is observed.
pub fn observe(state: &SceneState, frame: &WorkspaceFrame) -> Observation {
    let table = Catalog::builtin().rgb("table").expect("builtin catalog has a table color");
    crate::simulator::render_observation(state, frame, table)
}

fn expert_rng(state: &SceneState) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(state.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (state.step as u64))
}

/// Scripted expert with privileged state. Returns [`Error::Done`] once the
/// goal is satisfied.
pub fn expert_action(state: &SceneState, goal: &GoalState, history: &History) -> Result<PixelAction> {
    if score(state, goal, history) >= 100.0 {
        return Err(Error::Done);
    }
    let frame = &goal.frame;
    let pick_at = |id: usize| {
        let (x, y) = state.object(id).grasp_point();
        world_to_pixel(frame, x, y, 0.0, EXPERT_K_PICK)
    };
    let place_at = |x: f64, y: f64, dyaw: f64| world_to_pixel(frame, x, y, dyaw, EXPERT_K_PLACE);
    match &goal.kind {
        GoalKind::BlocksInBowls { blocks, bowls, .. } => {
            let done = filled_bowls(state, blocks, bowls);
            let todo: Vec<usize> = blocks.iter().copied().filter(|b| !done.iter().any(|(d, _)| d == b)).collect();
            let free: Vec<usize> = bowls
                .iter()
                .copied()
                .filter(|w| !state.objects.iter().any(|o| o.graspable && in_bowl(state, o.id, *w)))
                .collect();
            if todo.is_empty() || free.is_empty() {
                return Err(Error::Expert("no free target bowl for remaining blocks".into()));
            }
            let mut rng = expert_rng(state);
            let b = todo[rng.random_range(0..todo.len())];
            let w = free[rng.random_range(0..free.len())];
            let bowl = state.object(w);
            Ok(PixelAction {
                pick: pick_at(b)?,
                place: place_at(bowl.pose.x, bowl.pose.y, 0.0)?,
            })
        }
        GoalKind::BoxPairs {
            container, slots, ..
        } => {
            let p = slots
                .iter()
                .find(|p| !in_container(state, p.object, *container))
                .ok_or(Error::Done)?;
            let o = state.object(p.object);
            // boxes are symmetric under a half turn: use the shorter rotation
            let mut d = crate::geometry::wrap_angle(p.yaw.unwrap_or(o.pose.yaw) - o.pose.yaw);
            if d > std::f64::consts::FRAC_PI_2 {
                d -= std::f64::consts::PI;
            } else if d <= -std::f64::consts::FRAC_PI_2 {
                d += std::f64::consts::PI;
            }
            Ok(PixelAction {
                pick: pick_at(p.object)?,
                place: place_at(p.x, p.y, d)?,
            })
        }
        GoalKind::Sequence { schedule } => {
            let p = schedule.get(history.cursor()).ok_or(Error::Done)?;
            let o = state.object(p.object);
            let d = p.yaw.map_or(0.0, |y| y - o.pose.yaw);
            Ok(PixelAction {
                pick: pick_at(p.object)?,
                place: place_at(p.x, p.y, d)?,
            })
        }
    }
}
