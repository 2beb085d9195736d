//! Python bindings. Poses cross the boundary as `(u, v, rot, k)` tuples.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tabletop::dataset::{generate_demonstrations, Dataset};
use tabletop::evaluation::{evaluate, ModelPolicy, EVAL_SEED_BASE};
use tabletop::geometry::{PixelAction, PixelPose, WorkspaceFrame};
use tabletop::model::{Checkpoint, Goal, GoalMode, Model, ModelConfig};
use tabletop::simulator::SceneState;
use tabletop::tasks::{self, GoalState, History, Split, TaskName};
use tabletop::training::{self, Optimizer, TrainConfig};
use tabletop::Error;

type Pose = (usize, usize, usize, usize);

fn err(e: Error) -> PyErr {
    match e {
        Error::NotFound(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Expert(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn task_of(s: &str) -> PyResult<TaskName> {
    s.parse().map_err(err)
}

fn split_of(s: &str) -> PyResult<Split> {
    s.parse().map_err(err)
}

fn pose(p: Pose) -> PixelPose {
    PixelPose::new(p.0, p.1, p.2, p.3)
}

fn tuple(p: &PixelPose) -> Pose {
    (p.u, p.v, p.rot, p.k)
}

/// `100 * achieved / total`, clamped to `[0, 100]`.
#[pyfunction]
fn partial_credit(achieved: f64, total: f64) -> f64 {
    tasks::partial_credit(achieved, total)
}

#[pyfunction]
fn task_names() -> Vec<&'static str> {
    TaskName::ALL.iter().map(|t| t.as_str()).collect()
}

/// Write `n` expert demonstrations to `out`; returns the episode count.
#[pyfunction]
#[pyo3(signature = (out, task, split, n, seed=0))]
fn generate_demos(out: PathBuf, task: &str, split: &str, n: usize, seed: u64) -> PyResult<usize> {
    let ds = generate_demonstrations(&out, task_of(task)?, split_of(split)?, n, seed, &WorkspaceFrame::standard())
        .map_err(err)?;
    Ok(ds.episodes.len())
}

/// One task episode driven from Python.
#[pyclass(unsendable)]
struct Env {
    frame: WorkspaceFrame,
    state: SceneState,
    goal: GoalState,
    history: History,
    steps: usize,
}

#[pymethods]
impl Env {
    #[new]
    fn new(task: &str, split: &str, seed: u64) -> PyResult<Self> {
        let frame = WorkspaceFrame::standard();
        let inst = tasks::sample_instance(task_of(task)?, split_of(split)?, seed, &frame).map_err(err)?;
        Ok(Env {
            frame,
            state: inst.state,
            goal: inst.goal,
            history: History::default(),
            steps: 0,
        })
    }

    #[getter]
    fn instruction(&self) -> String {
        self.goal.instruction(&self.history)
    }

    #[getter]
    fn score(&self) -> f64 {
        tasks::score(&self.state, &self.goal, &self.history)
    }

    #[getter]
    fn done(&self) -> bool {
        tasks::is_complete(&self.state, &self.goal, &self.history)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.steps
    }

    /// Dict with `height`, `width`, row-major `color` (RGB in [0, 1]) and `heights` in meters.
    fn observation<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let obs = tasks::observe(&self.state, &self.frame);
        let d = PyDict::new(py);
        d.set_item("height", obs.frame.height)?;
        d.set_item("width", obs.frame.width)?;
        d.set_item("color", obs.color)?;
        d.set_item("heights", obs.height)?;
        Ok(d)
    }

    fn expert_action(&self) -> PyResult<(Pose, Pose)> {
        let a = tasks::expert_action(&self.state, &self.goal, &self.history).map_err(err)?;
        Ok((tuple(&a.pick), tuple(&a.place)))
    }

    /// Apply one pick-and-place; returns the new score.
    fn step(&mut self, pick: Pose, place: Pose) -> PyResult<f64> {
        let action = PixelAction {
            pick: pose(pick),
            place: pose(place),
        };
        action.pick.check(&self.frame).map_err(err)?;
        action.place.check(&self.frame).map_err(err)?;
        self.state = tasks::advance(&self.state, &self.goal, &mut self.history, &action);
        self.steps += 1;
        Ok(self.score())
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant="two-stream", seed=0))]
    fn new(variant: &str, seed: u64) -> PyResult<Self> {
        let mut cfg = ModelConfig::variant(variant).map_err(err)?;
        cfg.seed = seed;
        let f = WorkspaceFrame::standard();
        Ok(PyModel {
            inner: Model::new(cfg, f.height, f.width).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.model(None)).map_err(err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let rng = ChaCha8Rng::seed_from_u64(self.inner.config.seed);
        Checkpoint::capture(&self.inner, 0, &rng).save(&path).map_err(err)
    }

    #[getter]
    fn frozen_checksum(&self) -> Option<String> {
        self.inner.frozen_checksum()
    }

    /// Greedy action for the environment's current step.
    fn act(&self, env: &Env) -> PyResult<(Pose, Pose)> {
        let obs = tasks::observe(&env.state, &env.frame);
        let text = env.instruction();
        let goal = match self.inner.config.goal_mode {
            GoalMode::Language => Goal::Text(&text),
            GoalMode::None => Goal::None,
            GoalMode::ImageGoal => return Err(PyValueError::new_err("image-goal models act through evaluate()")),
        };
        let a = self.inner.act(&obs, &goal).map_err(err)?;
        Ok((tuple(&a.pick), tuple(&a.place)))
    }

    /// Mean score over `episodes` seeds starting at `base_seed`.
    #[pyo3(signature = (task, split, episodes=20, base_seed=EVAL_SEED_BASE))]
    fn evaluate(&self, task: &str, split: &str, episodes: usize, base_seed: u64) -> PyResult<(f64, Vec<f64>)> {
        let mut policy = ModelPolicy { model: &self.inner };
        let row = evaluate(
            &mut policy,
            task_of(task)?,
            split_of(split)?,
            episodes,
            base_seed,
            &WorkspaceFrame::standard(),
            "python",
            0,
        )
        .map_err(err)?;
        Ok((row.mean, row.scores))
    }
}

/// Train on the datasets in `data_dirs`; returns the model and the per-step losses.
#[pyfunction]
#[pyo3(signature = (data_dirs, variant="two-stream", iterations=1000, optimizer="sgd", learning_rate=1e-4, seed=0, run_dir=None))]
fn train(
    py: Python<'_>,
    data_dirs: Vec<PathBuf>,
    variant: &str,
    iterations: usize,
    optimizer: &str,
    learning_rate: f64,
    seed: u64,
    run_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let optimizer = match optimizer {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam,
        o => return Err(PyValueError::new_err(format!("unknown optimizer {o:?}"))),
    };
    let datasets = data_dirs.iter().map(|d| Dataset::load(d)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let mut mc = ModelConfig::variant(variant).map_err(err)?;
    mc.seed = seed;
    let tc = TrainConfig {
        iterations,
        learning_rate,
        optimizer,
        seed,
        checkpoint_every: iterations.max(1),
        ..Default::default()
    };
    let out = py
        .detach(|| training::train(&tc, &mc, &datasets, run_dir.as_deref()))
        .map_err(err)?;
    let losses = out.losses.iter().map(|l| l.loss).collect();
    Ok((PyModel { inner: out.model }, losses))
}

#[pymodule]
fn pytabletop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(partial_credit, m)?)?;
    m.add_function(wrap_pyfunction!(task_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demos, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Env>()?;
    m.add_class::<PyModel>()?;
    m.add("EVAL_SEED_BASE", EVAL_SEED_BASE)?;
    Ok(())
}
