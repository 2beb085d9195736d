use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GoalKind, GoalState, Placement, Split, TaskInstance, TaskName, EXPERT_K_PLACE};
use crate::catalog::{Catalog, TaskDoc};
use crate::error::{Error, Result};
use crate::geometry::{bin_angle, WorkspaceFrame, WorldPose};
use crate::simulator::{SceneObject, SceneState, Shape};

const BLOCK: f64 = 0.04;
const BOWL_DIAMETER: f64 = 0.09;
const BOWL_HEIGHT: f64 = 0.03;
const BOX_HEIGHT: f64 = 0.03;
const CONTAINER_HEIGHT: f64 = 0.05;
const RING_HEIGHT: f64 = 0.012;
/// (inner, outer) radii for small, medium, big rings.
const RINGS: [(f64, f64); 3] = [(0.010, 0.022), (0.012, 0.030), (0.014, 0.038)];
const PEG_SPACING: f64 = 0.1;
const GAP: f64 = 0.005;

/// Rejection sampler for non-overlapping table positions.
struct Placer<'a> {
    rng: &'a mut ChaCha8Rng,
    frame: WorkspaceFrame,
    taken: Vec<(f64, f64, f64)>,
}

impl Placer<'_> {
    fn sample(&mut self, radius: f64) -> Result<(f64, f64)> {
        let margin = radius + 0.01;
        let f = self.frame;
        for _ in 0..2000 {
            let x = self.rng.random_range(f.x_min + margin..f.x_max - margin);
            let y = self.rng.random_range(f.y_min + margin..f.y_max - margin);
            if self
                .taken
                .iter()
                .all(|&(tx, ty, tr)| (x - tx).hypot(y - ty) >= radius + tr + GAP)
            {
                self.taken.push((x, y, radius));
                return Ok((x, y));
            }
        }
        Err(Error::Config("could not place objects without overlap".into()))
    }

    fn yaw(&mut self) -> f64 {
        bin_angle(self.rng.random_range(0..EXPERT_K_PLACE), EXPERT_K_PLACE)
    }
}

fn object(shape: Shape, color: &str, size: [f64; 3], x: f64, y: f64, yaw: f64) -> Result<SceneObject> {
    Ok(SceneObject {
        id: 0,
        shape,
        color: color.to_string(),
        rgb: Catalog::builtin().rgb(color)?,
        size,
        pose: WorldPose { x, y, z: 0.0, yaw },
        graspable: matches!(shape, Shape::Block | Shape::Box | Shape::Ring),
        container: matches!(shape, Shape::Bowl),
        inner_radius: 0.0,
        size_rank: None,
        pegs: Vec::new(),
        support: None,
    })
}

fn rotate(yaw: f64, lx: f64, ly: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * lx - s * ly, s * lx + c * ly)
}

fn count(rng: &mut ChaCha8Rng, doc: &TaskDoc, key: &str) -> Result<usize> {
    let (lo, hi) = doc.count(key)?;
    Ok(rng.random_range(lo..=hi))
}

/// Sample a task instance. Identical arguments give identical instances.
pub fn sample_instance(task: TaskName, split: Split, seed: u64, frame: &WorkspaceFrame) -> Result<TaskInstance> {
    let cat = Catalog::builtin();
    let doc = cat.task(task.as_str())?;
    let colors = split.colors(cat);
    // Retry with derived seeds if a layout does not fit; still deterministic.
    let mut last = None;
    for attempt in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt << 48) ^ 0x5EED_0000);
        let out = match task {
            TaskName::PutBlocksInBowls => blocks_in_bowls(&mut rng, doc, &colors, frame),
            TaskName::PackingBoxPairs => box_pairs(&mut rng, doc, &colors, frame),
            TaskName::StackBlockPyramidSeq => pyramid(&mut rng, doc, &colors, frame),
            TaskName::TowersOfHanoiSeq => hanoi(&mut rng, doc, &colors, frame),
        };
        match out {
            Ok((mut state, kind)) => {
                state.seed = seed;
                let mut goal = GoalState {
                    task,
                    split,
                    frame: *frame,
                    max_steps: 0,
                    kind,
                };
                goal.max_steps = 2 * goal.schedule_len() + 2;
                return Ok(TaskInstance { state, goal });
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Config("instance sampling failed".into())))
}

fn pick_colors(rng: &mut ChaCha8Rng, colors: &[String], n: usize) -> Vec<String> {
    let mut c = colors.to_vec();
    c.shuffle(rng);
    c.truncate(n);
    c
}

fn blocks_in_bowls(
    rng: &mut ChaCha8Rng,
    doc: &TaskDoc,
    colors: &[String],
    frame: &WorkspaceFrame,
) -> Result<(SceneState, GoalKind)> {
    let chosen = pick_colors(rng, colors, 2);
    let (block_color, bowl_color) = (chosen[0].clone(), chosen[1].clone());
    let others: Vec<String> = colors.iter().filter(|c| !chosen.contains(c)).cloned().collect();
    let n_bowls = count(rng, doc, "target_bowls")?;
    let n_blocks = rng.random_range(1..=n_bowls);
    let n_dbowls = count(rng, doc, "distractor_bowls")?;
    let n_dblocks = count(rng, doc, "distractor_blocks")?;

    let mut state = SceneState::new(0);
    let mut placer = Placer {
        rng,
        frame: *frame,
        taken: Vec::new(),
    };
    let bowl_r = BOWL_DIAMETER / 2.0;
    let block_r = BLOCK / std::f64::consts::SQRT_2;
    let bowl_size = [BOWL_DIAMETER, BOWL_DIAMETER, BOWL_HEIGHT];
    let block_size = [BLOCK, BLOCK, BLOCK];

    let mut bowls = Vec::new();
    for _ in 0..n_bowls {
        let (x, y) = placer.sample(bowl_r)?;
        bowls.push(state.add(object(Shape::Bowl, &bowl_color, bowl_size, x, y, 0.0)?, frame));
    }
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        let (x, y) = placer.sample(block_r)?;
        let yaw = placer.yaw();
        blocks.push(state.add(object(Shape::Block, &block_color, block_size, x, y, yaw)?, frame));
    }
    for _ in 0..n_dbowls {
        let c = others[placer.rng.random_range(0..others.len())].clone();
        let (x, y) = placer.sample(bowl_r)?;
        state.add(object(Shape::Bowl, &c, bowl_size, x, y, 0.0)?, frame);
    }
    for _ in 0..n_dblocks {
        let c = others[placer.rng.random_range(0..others.len())].clone();
        let (x, y) = placer.sample(block_r)?;
        let yaw = placer.yaw();
        state.add(object(Shape::Block, &c, block_size, x, y, yaw)?, frame);
    }
    let instruction = doc.render(&[("pick", &block_color), ("place", &bowl_color)]);
    Ok((
        state,
        GoalKind::BlocksInBowls {
            block_color,
            bowl_color,
            blocks,
            bowls,
            instruction,
        },
    ))
}

/// Split a rectangle into `n` tiles by repeatedly halving the largest tile
/// across its longer side.
fn tile(rng: &mut ChaCha8Rng, l: f64, w: f64, n: usize) -> Vec<(f64, f64, f64, f64)> {
    // (center x, center y, length, width) in the container frame
    let mut tiles = vec![(0.0, 0.0, l, w)];
    while tiles.len() < n {
        let (i, _) = tiles
            .iter()
            .enumerate()
            .max_by(|a, b| (a.1 .2 * a.1 .3).total_cmp(&(b.1 .2 * b.1 .3)))
            .expect("non-empty");
        let (cx, cy, tl, tw) = tiles.remove(i);
        let f = rng.random_range(0.4..0.6);
        if tl >= tw {
            let (a, b) = (tl * f, tl * (1.0 - f));
            tiles.push((cx - tl / 2.0 + a / 2.0, cy, a, tw));
            tiles.push((cx + tl / 2.0 - b / 2.0, cy, b, tw));
        } else {
            let (a, b) = (tw * f, tw * (1.0 - f));
            tiles.push((cx, cy - tw / 2.0 + a / 2.0, tl, a));
            tiles.push((cx, cy + tw / 2.0 - b / 2.0, tl, b));
        }
    }
    tiles
}

fn box_pairs(
    rng: &mut ChaCha8Rng,
    doc: &TaskDoc,
    colors: &[String],
    frame: &WorkspaceFrame,
) -> Result<(SceneState, GoalKind)> {
    use crate::simulator::CONTAINER_WALL;
    let chosen = pick_colors(rng, colors, 2);
    let others: Vec<String> = colors.iter().filter(|c| !chosen.contains(c)).cloned().collect();
    let n = count(rng, doc, "relevant_boxes")?;
    let n_distract = count(rng, doc, "distractor_boxes")?;
    let inner_l = rng.random_range(0.10..0.15);
    let inner_w = rng.random_range(0.09..0.13);
    let tiles = tile(rng, inner_l, inner_w, n);
    let margin = 0.004;

    let mut state = SceneState::new(0);
    let mut placer = Placer {
        rng,
        frame: *frame,
        taken: Vec::new(),
    };
    let csize = [inner_l + 2.0 * CONTAINER_WALL, inner_w + 2.0 * CONTAINER_WALL, CONTAINER_HEIGHT];
    let (cx, cy) = placer.sample(0.5 * csize[0].hypot(csize[1]))?;
    let cyaw = placer.yaw();
    let mut container = object(Shape::Box, "wood", csize, cx, cy, cyaw)?;
    container.container = true;
    container.graspable = false;
    let container = state.add(container, frame);

    let mut slots = Vec::new();
    let mut sizes = Vec::new();
    for &(tx, ty, tl, tw) in &tiles {
        let color = chosen[placer.rng.random_range(0..2)].clone();
        let size = [tl - margin, tw - margin, BOX_HEIGHT];
        let (x, y) = placer.sample(0.5 * size[0].hypot(size[1]))?;
        let yaw = placer.yaw();
        let id = state.add(object(Shape::Box, &color, size, x, y, yaw)?, frame);
        let (ox, oy) = rotate(cyaw, tx, ty);
        slots.push(Placement {
            object: id,
            x: cx + ox,
            y: cy + oy,
            yaw: Some(cyaw),
            symmetry: PI,
            instruction: String::new(),
        });
        sizes.push(size);
    }
    for _ in 0..n_distract {
        let c = others[placer.rng.random_range(0..others.len())].clone();
        let size = sizes[placer.rng.random_range(0..sizes.len())];
        let (x, y) = placer.sample(0.5 * size[0].hypot(size[1]))?;
        let yaw = placer.yaw();
        state.add(object(Shape::Box, &c, size, x, y, yaw)?, frame);
    }
    let instruction = doc.render(&[("first", &chosen[0]), ("second", &chosen[1])]);
    Ok((
        state,
        GoalKind::BoxPairs {
            colors: [chosen[0].clone(), chosen[1].clone()],
            container,
            slots,
            instruction,
        },
    ))
}

fn pyramid(
    rng: &mut ChaCha8Rng,
    doc: &TaskDoc,
    colors: &[String],
    frame: &WorkspaceFrame,
) -> Result<(SceneState, GoalKind)> {
    let n = count(rng, doc, "blocks")?;
    if n != 6 {
        return Err(Error::Config("pyramid needs exactly 6 blocks".into()));
    }
    let block_colors = pick_colors(rng, colors, 6);
    let mut state = SceneState::new(0);
    let mut placer = Placer {
        rng,
        frame: *frame,
        taken: Vec::new(),
    };
    let stand_size = [0.05, 0.15, crate::simulator::BASE_HEIGHT];
    let (sx, sy) = placer.sample(0.5 * stand_size[0].hypot(stand_size[1]))?;
    let syaw = placer.yaw();
    let mut stand = object(Shape::Stand, "wood", stand_size, sx, sy, syaw)?;
    stand.graspable = false;
    state.add(stand, frame);

    let mut blocks = Vec::new();
    for c in &block_colors {
        let (x, y) = placer.sample(BLOCK / std::f64::consts::SQRT_2)?;
        let yaw = placer.yaw();
        blocks.push(state.add(object(Shape::Block, c, [BLOCK; 3], x, y, yaw)?, frame));
    }
    let pitch = BLOCK + GAP;
    let local = [-pitch, 0.0, pitch, -pitch / 2.0, pitch / 2.0, 0.0];
    let places = &doc.places;
    let describe = |i: usize| -> String {
        match i {
            0..=2 => places[i].clone(),
            3 => format!("{} and {} blocks", block_colors[0], block_colors[1]),
            4 => format!("{} and {} blocks", block_colors[1], block_colors[2]),
            _ => format!("{} and {} blocks", block_colors[3], block_colors[4]),
        }
    };
    let schedule = (0..6)
        .map(|i| {
            let (ox, oy) = rotate(syaw, 0.0, local[i]);
            Placement {
                object: blocks[i],
                x: sx + ox,
                y: sy + oy,
                yaw: Some(syaw),
                symmetry: FRAC_PI_2,
                instruction: doc.render(&[("pick", &block_colors[i]), ("place", &describe(i))]),
            }
        })
        .collect();
    Ok((state, GoalKind::Sequence { schedule }))
}

/// Optimal three-ring solution from peg 0 to peg 2 as (ring rank, peg).
pub(crate) const HANOI_MOVES: [(usize, usize); 7] = [(0, 2), (1, 1), (0, 1), (2, 2), (0, 0), (1, 2), (0, 2)];

fn hanoi(
    rng: &mut ChaCha8Rng,
    doc: &TaskDoc,
    colors: &[String],
    frame: &WorkspaceFrame,
) -> Result<(SceneState, GoalKind)> {
    let n = count(rng, doc, "rings")?;
    if n != 3 {
        return Err(Error::Config("hanoi needs exactly 3 rings".into()));
    }
    let ring_colors = pick_colors(rng, colors, 3);
    let mut state = SceneState::new(0);
    let mut placer = Placer {
        rng,
        frame: *frame,
        taken: Vec::new(),
    };
    let base_size = [0.06, 0.3, crate::simulator::BASE_HEIGHT];
    let (bx, by) = placer.sample(0.5 * base_size[0].hypot(base_size[1]))?;
    let byaw = placer.yaw();
    let cat = Catalog::builtin();
    let mut base = object(Shape::PegBase, "wood", base_size, bx, by, byaw)?;
    base.graspable = false;
    base.pegs = ["peg_light", "peg_mid", "peg_dark"]
        .iter()
        .enumerate()
        .map(|(i, name)| Ok(([0.0, (i as f64 - 1.0) * PEG_SPACING], cat.rgb(name)?)))
        .collect::<Result<_>>()?;
    let pegs: Vec<(f64, f64)> = (0..3)
        .map(|i| {
            let (ox, oy) = rotate(byaw, 0.0, (i as f64 - 1.0) * PEG_SPACING);
            (bx + ox, by + oy)
        })
        .collect();
    state.add(base, frame);

    // big first so the stack settles bottom-up
    let mut rings = [0usize; 3];
    for rank in (0..3).rev() {
        let (inner, outer) = RINGS[rank];
        let yaw = placer.yaw();
        let mut ring = object(
            Shape::Ring,
            &ring_colors[rank],
            [2.0 * outer, 2.0 * outer, RING_HEIGHT],
            pegs[0].0,
            pegs[0].1,
            yaw,
        )?;
        ring.inner_radius = inner;
        ring.size_rank = Some(rank as u8);
        rings[rank] = state.add(ring, frame);
    }
    let schedule = HANOI_MOVES
        .iter()
        .map(|&(rank, peg)| Placement {
            object: rings[rank],
            x: pegs[peg].0,
            y: pegs[peg].1,
            yaw: None,
            symmetry: 2.0 * PI,
            instruction: doc.render(&[("pick", &ring_colors[rank]), ("place", &doc.places[peg])]),
        })
        .collect();
    Ok((state, GoalKind::Sequence { schedule }))
}
