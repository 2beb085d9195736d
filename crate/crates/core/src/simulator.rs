//! Deterministic 2.5-D tabletop: rigid objects on a plane, teleport
//! pick-and-place and orthographic rendering.

use serde::{Deserialize, Serialize};

use crate::geometry::{Observation, PixelAction, WorkspaceFrame, WorldPose};

pub const BOWL_RIM: f64 = 0.006;
pub const BOWL_FLOOR: f64 = 0.004;
pub const CONTAINER_WALL: f64 = 0.004;
pub const CONTAINER_FLOOR: f64 = 0.002;
pub const PEG_RADIUS: f64 = 0.006;
pub const PEG_HEIGHT: f64 = 0.06;
pub const BASE_HEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Block,
    Bowl,
    Box,
    Ring,
    PegBase,
    Stand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub shape: Shape,
    pub color: String,
    pub rgb: [f32; 3],
    /// Length along local x, width along local y, height (meters). Round
    /// shapes use `size[0]` as the outer diameter.
    pub size: [f64; 3],
    pub pose: WorldPose,
    pub graspable: bool,
    pub container: bool,
    /// Ring hole radius.
    #[serde(default)]
    pub inner_radius: f64,
    /// Ordinal ring size: 0 small, 1 medium, 2 big.
    #[serde(default)]
    pub size_rank: Option<u8>,
    /// Peg positions in the local frame of a peg base, with their colors.
    #[serde(default)]
    pub pegs: Vec<([f64; 2], [f32; 3])>,
    /// Object this one rests on; `None` means the table.
    #[serde(default)]
    pub support: Option<usize>,
}

/// Surface hit of a vertical ray against one object.
#[derive(Debug, Clone, Copy)]
struct Hit {
    top: f64,
    rgb: [f32; 3],
}

fn shade(rgb: [f32; 3], f: f32) -> [f32; 3] {
    [rgb[0] * f, rgb[1] * f, rgb[2] * f]
}

impl SceneObject {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.pose.yaw.sin_cos();
        let (dx, dy) = (x - self.pose.x, y - self.pose.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Radius of a disk enclosing the footprint.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Bowl | Shape::Ring => self.size[0] / 2.0,
            _ => 0.5 * (self.size[0].hypot(self.size[1])),
        }
    }

    fn hit(&self, x: f64, y: f64) -> Option<Hit> {
        let (lx, ly) = self.local(x, y);
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let z = self.pose.z;
        let h = self.size[2];
        match self.shape {
            Shape::Block | Shape::Box | Shape::Stand => {
                if lx.abs() > hl || ly.abs() > hw {
                    return None;
                }
                if self.container {
                    let wall = lx.abs() > hl - CONTAINER_WALL || ly.abs() > hw - CONTAINER_WALL;
                    return Some(if wall {
                        Hit { top: z + h, rgb: self.rgb }
                    } else {
                        Hit {
                            top: z + CONTAINER_FLOOR,
                            rgb: shade(self.rgb, 0.85),
                        }
                    });
                }
                Some(Hit { top: z + h, rgb: self.rgb })
            }
            Shape::Bowl => {
                let r = lx.hypot(ly);
                let outer = self.size[0] / 2.0;
                if r > outer {
                    None
                } else if r > outer - BOWL_RIM {
                    Some(Hit { top: z + h, rgb: self.rgb })
                } else {
                    Some(Hit {
                        top: z + BOWL_FLOOR,
                        rgb: shade(self.rgb, 0.8),
                    })
                }
            }
            Shape::Ring => {
                let r = lx.hypot(ly);
                (r <= self.size[0] / 2.0 && r >= self.inner_radius).then_some(Hit { top: z + h, rgb: self.rgb })
            }
            Shape::PegBase => {
                for (p, rgb) in &self.pegs {
                    if (lx - p[0]).hypot(ly - p[1]) <= PEG_RADIUS {
                        return Some(Hit {
                            top: z + PEG_HEIGHT,
                            rgb: *rgb,
                        });
                    }
                }
                (lx.abs() <= hl && ly.abs() <= hw).then_some(Hit {
                    top: z + BASE_HEIGHT,
                    rgb: self.rgb,
                })
            }
        }
    }

    /// Whether the footprint covers world point `(x, y)`.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        self.hit(x, y).is_some()
    }

    /// Absolute top-surface height at `(x, y)` if covered.
    pub fn top_at(&self, x: f64, y: f64) -> Option<f64> {
        self.hit(x, y).map(|h| h.top)
    }

    /// World position of a point on the object that a suction cup can grab.
    pub fn grasp_point(&self) -> (f64, f64) {
        match self.shape {
            Shape::Ring => {
                let r = 0.5 * (self.inner_radius + self.size[0] / 2.0);
                let (s, c) = self.pose.yaw.sin_cos();
                (self.pose.x + c * r, self.pose.y + s * r)
            }
            _ => (self.pose.x, self.pose.y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
    pub step: usize,
}

impl SceneState {
    pub fn new(seed: u64) -> Self {
        Self {
            objects: Vec::new(),
            seed,
            step: 0,
        }
    }

    pub fn object(&self, id: usize) -> &SceneObject {
        &self.objects[id]
    }

    /// Adds an object resting on whatever lies beneath it; returns its id.
    pub fn add(&mut self, mut obj: SceneObject, frame: &WorkspaceFrame) -> usize {
        obj.id = self.objects.len();
        self.objects.push(obj);
        let id = self.objects.len() - 1;
        self.settle(id, frame);
        id
    }

    /// Pixel centers covered by object `id`.
    fn footprint_pixels(&self, id: usize, frame: &WorkspaceFrame) -> Vec<(f64, f64)> {
        let o = &self.objects[id];
        let r = o.bounding_radius();
        let (u0, v0) = frame.pixel_of(o.pose.x - r, o.pose.y - r);
        let (u1, v1) = frame.pixel_of(o.pose.x + r, o.pose.y + r);
        let mut pts = Vec::new();
        for u in u0.max(0)..=u1.min(frame.height as i64 - 1) {
            for v in v0.max(0)..=v1.min(frame.width as i64 - 1) {
                let (x, y) = frame.pixel_center(u as usize, v as usize);
                if o.covers(x, y) {
                    pts.push((x, y));
                }
            }
        }
        if pts.is_empty() {
            pts.push((o.pose.x, o.pose.y));
        }
        pts
    }

    /// Drop object `id` onto the highest surface under its footprint.
    fn settle(&mut self, id: usize, frame: &WorkspaceFrame) {
        let pts = self.footprint_pixels(id, frame);
        let mut best = (frame.z_min, None);
        for (x, y) in pts {
            for other in &self.objects {
                if other.id == id || self.rests_on(other.id, id) {
                    continue;
                }
                if let Some(top) = other.top_at(x, y) {
                    if top > best.0 + 1e-12 {
                        best = (top, Some(other.id));
                    }
                }
            }
        }
        let o = &mut self.objects[id];
        o.pose.z = best.0;
        o.support = best.1;
    }

    /// True if `a` is (transitively) supported by `b`.
    pub fn rests_on(&self, a: usize, b: usize) -> bool {
        let mut cur = self.objects[a].support;
        let mut hops = 0;
        while let Some(s) = cur {
            if s == b {
                return true;
            }
            cur = self.objects[s].support;
            hops += 1;
            if hops > self.objects.len() {
                break;
            }
        }
        false
    }

    /// Objects directly resting on `id`, lowest first.
    fn dependents(&self, id: usize) -> Vec<usize> {
        let mut deps: Vec<usize> = self.objects.iter().filter(|o| o.support == Some(id)).map(|o| o.id).collect();
        deps.sort_by(|a, b| self.objects[*a].pose.z.total_cmp(&self.objects[*b].pose.z).then(a.cmp(b)));
        deps
    }

    /// The topmost graspable object covering world point `(x, y)`.
    pub fn graspable_at(&self, x: f64, y: f64) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for o in self.objects.iter().filter(|o| o.graspable) {
            if let Some(top) = o.top_at(x, y) {
                if best.is_none_or(|(t, _)| top > t) {
                    best = Some((top, o.id));
                }
            }
        }
        best.map(|(_, id)| id)
    }

    /// Re-resolve everything stacked on `id` after it moved.
    fn resettle_dependents(&mut self, id: usize, frame: &WorkspaceFrame) {
        let deps = self.dependents(id);
        for d in deps {
            self.settle(d, frame);
            self.resettle_dependents(d, frame);
        }
    }
}

/// Top-down rasterization: each pixel shows the highest surface above it.
pub fn render_observation(state: &SceneState, frame: &WorkspaceFrame, table_rgb: [f32; 3]) -> Observation {
    let mut obs = Observation::filled(*frame, table_rgb);
    let w = frame.width;
    for o in &state.objects {
        let r = o.bounding_radius();
        let (u0, v0) = frame.pixel_of(o.pose.x - r, o.pose.y - r);
        let (u1, v1) = frame.pixel_of(o.pose.x + r, o.pose.y + r);
        for u in u0.max(0)..=u1.min(frame.height as i64 - 1) {
            for v in v0.max(0)..=v1.min(w as i64 - 1) {
                let (u, v) = (u as usize, v as usize);
                let (x, y) = frame.pixel_center(u, v);
                if let Some(hit) = o.hit(x, y) {
                    let height = (hit.top - frame.z_min) as f32;
                    let i = u * w + v;
                    // later objects win ties so that a re-render is stable
                    if height >= obs.height[i] {
                        obs.height[i] = height;
                        obs.color[i * 3..i * 3 + 3].copy_from_slice(&hit.rgb);
                    }
                }
            }
        }
    }
    obs
}

/// Execute one pick-and-place. The picked object's center lands on the place
/// pixel and its yaw turns by the place angle minus the pick angle. Picking
/// empty space is a legal no-op. The step counter always advances.
pub fn apply_pick_place(
    state: &SceneState,
    action: &PixelAction,
    frame: &WorkspaceFrame,
) -> (SceneState, Option<usize>) {
    let mut next = state.clone();
    next.step += 1;
    let (px, py) = frame.pixel_center(action.pick.u, action.pick.v);
    let Some(id) = next.graspable_at(px, py) else {
        return (next, None);
    };
    let (tx, ty) = frame.pixel_center(action.place.u, action.place.v);
    let dyaw = action.place.angle() - action.pick.angle();
    {
        let o = &mut next.objects[id];
        o.pose.x = tx;
        o.pose.y = ty;
        o.pose.yaw = crate::geometry::wrap_angle(o.pose.yaw + dyaw);
        o.support = None;
    }
    // whatever sat on the picked object drops first
    let old_deps: Vec<usize> = state.objects.iter().filter(|o| o.support == Some(id)).map(|o| o.id).collect();
    for d in old_deps {
        next.objects[d].support = None;
        next.settle(d, frame);
        next.resettle_dependents(d, frame);
    }
    next.settle(id, frame);
    (next, Some(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{world_to_pixel, PixelPose};

    const TABLE: [f32; 3] = [0.2, 0.2, 0.2];

    fn block(x: f64, y: f64) -> SceneObject {
        SceneObject {
            id: 0,
            shape: Shape::Block,
            color: "red".into(),
            rgb: [0.9, 0.1, 0.1],
            size: [0.04, 0.04, 0.04],
            pose: WorldPose { x, y, z: 0.0, yaw: 0.0 },
            graspable: true,
            container: false,
            inner_radius: 0.0,
            size_rank: None,
            pegs: vec![],
            support: None,
        }
    }

    fn bowl(x: f64, y: f64) -> SceneObject {
        SceneObject {
            shape: Shape::Bowl,
            color: "blue".into(),
            rgb: [0.1, 0.2, 0.9],
            size: [0.09, 0.09, 0.03],
            graspable: false,
            container: true,
            ..block(x, y)
        }
    }

    fn pose_at(frame: &WorkspaceFrame, x: f64, y: f64, rot: usize, k: usize) -> PixelPose {
        let mut p = world_to_pixel(frame, x, y, 0.0, k).unwrap();
        p.rot = rot;
        p
    }

    #[test]
    fn empty_scene_renders_table() {
        let f = WorkspaceFrame::standard();
        let obs = render_observation(&SceneState::new(0), &f, TABLE);
        assert!(obs.height.iter().all(|&h| h == 0.0));
        assert!(obs.color.chunks(3).all(|c| c == TABLE));
    }

    #[test]
    fn centered_cube_footprint_matches_area() {
        let f = WorkspaceFrame::standard();
        let mut s = SceneState::new(0);
        s.add(block(0.25, 0.25), &f);
        let obs = render_observation(&s, &f, TABLE);
        let covered = obs.height.iter().filter(|&&h| (h - 0.04).abs() < 1e-6).count();
        // footprint oracle: count pixel centers inside the square directly
        let mut expect = 0;
        for u in 0..128 {
            for v in 0..128 {
                let (x, y) = f.pixel_center(u, v);
                if (x - 0.25).abs() <= 0.02 && (y - 0.25).abs() <= 0.02 {
                    expect += 1;
                }
            }
        }
        assert_eq!(covered, expect);
        let nominal = (0.04 / f.pixel_size).powi(2);
        assert!((covered as f64 - nominal).abs() / nominal < 0.25);
        assert!((obs.height_at(64, 64) - 0.04).abs() < 1e-6);
    }

    #[test]
    fn stacked_blocks_sum_heights() {
        let f = WorkspaceFrame::standard();
        let mut s = SceneState::new(0);
        s.add(block(0.25, 0.25), &f);
        let top = s.add(block(0.25, 0.25), &f);
        assert_eq!(s.object(top).support, Some(0));
        let obs = render_observation(&s, &f, TABLE);
        assert!((obs.height_at(64, 64) - 0.08).abs() < 1e-6);
    }

    #[test]
    fn pick_on_empty_table_is_noop() {
        let f = WorkspaceFrame::standard();
        let mut s = SceneState::new(0);
        s.add(block(0.1, 0.1), &f);
        let a = PixelAction {
            pick: pose_at(&f, 0.4, 0.4, 0, 1),
            place: pose_at(&f, 0.3, 0.3, 0, 36),
        };
        let (next, picked) = apply_pick_place(&s, &a, &f);
        assert_eq!(picked, None);
        assert_eq!(next.objects, s.objects);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn block_lands_inside_bowl() {
        let f = WorkspaceFrame::standard();
        let mut s = SceneState::new(0);
        let b = s.add(block(0.1, 0.1), &f);
        let w = s.add(bowl(0.35, 0.3), &f);
        let a = PixelAction {
            pick: pose_at(&f, 0.1, 0.1, 0, 1),
            place: pose_at(&f, 0.35, 0.3, 0, 36),
        };
        let (next, picked) = apply_pick_place(&s, &a, &f);
        assert_eq!(picked, Some(b));
        let o = next.object(b);
        let (cx, cy) = f.pixel_center(a.place.u, a.place.v);
        assert_eq!((o.pose.x, o.pose.y), (cx, cy));
        assert_eq!(o.support, Some(w));
        assert!((o.pose.z - BOWL_FLOOR).abs() < 1e-12);
        // render/act consistency
        let obs = render_observation(&next, &f, TABLE);
        let h = obs.height_at(a.place.u, a.place.v) as f64;
        assert!((h - (BOWL_FLOOR + 0.04)).abs() < 1e-6);
    }

    #[test]
    fn rotation_bins_turn_object() {
        let f = WorkspaceFrame::standard();
        let mut s = SceneState::new(0);
        let b = s.add(block(0.2, 0.2), &f);
        let a = PixelAction {
            pick: pose_at(&f, 0.2, 0.2, 0, 1),
            place: pose_at(&f, 0.3, 0.3, 9, 36),
        };
        let (next, _) = apply_pick_place(&s, &a, &f);
        assert!((next.object(b).pose.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn removing_support_drops_stack() {
        let f = WorkspaceFrame::standard();
        let mut s = SceneState::new(0);
        let low = s.add(block(0.25, 0.25), &f);
        // offset so the low block is still reachable at its far edge
        let high = s.add(block(0.25, 0.265), &f);
        assert_eq!(s.object(high).support, Some(low));
        let a = PixelAction {
            pick: pose_at(&f, 0.25, 0.235, 0, 1),
            place: pose_at(&f, 0.1, 0.1, 0, 1),
        };
        let (next, picked) = apply_pick_place(&s, &a, &f);
        assert_eq!(picked, Some(low));
        assert_eq!(next.object(high).pose.z, 0.0);
        assert_eq!(next.object(high).support, None);
        assert_eq!(next.objects.len(), 2);
    }
}
