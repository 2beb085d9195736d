//! Planar poses, pixel/world mapping, SE(2) image warping and rotated crops.
//!
//! Pixel `(u, v)` is row `u`, column `v`. Rows run along world `x`, columns
//! along world `y`, and a pixel's world position is its center, so pixel
//! `(u, v)` covers `[x_min + u*s, x_min + (u+1)*s)` in `x`.
//!
//! Every rotation in the crate uses the same matrix on `(u, v)` (equivalently
//! on `(x, y)`): `R(t) = [[cos t, -sin t], [sin t, cos t]]`. Rotation bin `i`
//! of `k` denotes the angle `i * 2*pi / k`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned workspace volume and its orthographic pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceFrame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pixel_size: f64,
    pub height: usize,
    pub width: usize,
}

impl WorkspaceFrame {
    pub fn new(
        x: (f64, f64),
        y: (f64, f64),
        z: (f64, f64),
        pixel_size: f64,
    ) -> Result<Self> {
        if !(pixel_size > 0.0) {
            return Err(Error::Domain(format!("pixel size must be positive, got {pixel_size}")));
        }
        for (name, (lo, hi)) in [("x", x), ("y", y), ("z", z)] {
            if !(hi > lo) {
                return Err(Error::Domain(format!("{name} span must be positive: [{lo}, {hi}]")));
            }
        }
        let height = ((x.1 - x.0) / pixel_size).round() as usize;
        let width = ((y.1 - y.0) / pixel_size).round() as usize;
        if height == 0 || width == 0 {
            return Err(Error::Domain("frame has no pixels".into()));
        }
        Ok(Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
            pixel_size,
            height,
            width,
        })
    }

    /// 0.5 m square workspace rendered at 128x128.
    pub fn standard() -> Self {
        Self::new((0.0, 0.5), (0.0, 0.5), (0.0, 0.3), 0.5 / 128.0).expect("static frame")
    }

    /// Square frame with `n` pixels per side over the standard 0.5 m span.
    pub fn square(n: usize) -> Self {
        Self::new((0.0, 0.5), (0.0, 0.5), (0.0, 0.3), 0.5 / n as f64).expect("square frame")
    }

    pub fn contains_pixel(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.height && (v as usize) < self.width
    }

    /// World `(x, y)` of a pixel center.
    pub fn pixel_center(&self, u: usize, v: usize) -> (f64, f64) {
        (
            self.x_min + (u as f64 + 0.5) * self.pixel_size,
            self.y_min + (v as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Containing pixel of a world point, possibly outside the grid.
    pub fn pixel_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.x_min) / self.pixel_size).floor() as i64,
            ((y - self.y_min) / self.pixel_size).floor() as i64,
        )
    }
}

/// Angle of rotation bin `rot` out of `k`.
pub fn bin_angle(rot: usize, k: usize) -> f64 {
    rot as f64 * 2.0 * PI / k as f64
}

/// Nearest rotation bin to `angle` (any real angle, wrapped into `[0, k)`).
pub fn nearest_bin(angle: f64, k: usize) -> usize {
    let step = 2.0 * PI / k as f64;
    let b = (angle / step).round() as i64;
    b.rem_euclid(k as i64) as usize
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Pixel location plus a discrete rotation bin: an SE(2) pose in image space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPose {
    pub u: usize,
    pub v: usize,
    pub rot: usize,
    pub k: usize,
}

impl PixelPose {
    pub fn new(u: usize, v: usize, rot: usize, k: usize) -> Self {
        Self { u, v, rot, k }
    }

    pub fn angle(&self) -> f64 {
        bin_angle(self.rot, self.k)
    }

    pub fn check(&self, frame: &WorkspaceFrame) -> Result<()> {
        if self.u >= frame.height || self.v >= frame.width {
            return Err(Error::Domain(format!(
                "pixel ({}, {}) outside {}x{} frame",
                self.u, self.v, frame.height, frame.width
            )));
        }
        if self.k == 0 || self.rot >= self.k {
            return Err(Error::Domain(format!("rotation bin {} not in [0, {})", self.rot, self.k)));
        }
        Ok(())
    }
}

/// A pick pose and a place pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelAction {
    pub pick: PixelPose,
    pub place: PixelPose,
}

/// World-frame pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

/// Orthographic top-down color and height maps.
///
/// `color` is row-major `H x W x 3` in `[0, 1]`; `height` is `H x W` in meters
/// above `z_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub color: Vec<f32>,
    pub height: Vec<f32>,
    pub frame: WorkspaceFrame,
}

impl Observation {
    /// Uniform observation with the given background color and zero height.
    pub fn filled(frame: WorkspaceFrame, rgb: [f32; 3]) -> Self {
        let n = frame.height * frame.width;
        let mut color = Vec::with_capacity(n * 3);
        for _ in 0..n {
            color.extend_from_slice(&rgb);
        }
        Self {
            color,
            height: vec![0.0; n],
            frame,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frame.height, self.frame.width)
    }

    pub fn rgb(&self, u: usize, v: usize) -> [f32; 3] {
        let i = (u * self.frame.width + v) * 3;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }

    pub fn height_at(&self, u: usize, v: usize) -> f32 {
        self.height[u * self.frame.width + v]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frame.height * self.frame.width;
        if self.color.len() != n * 3 || self.height.len() != n {
            return Err(Error::Shape(format!(
                "observation buffers ({}, {}) do not match {}x{} frame",
                self.color.len(),
                self.height.len(),
                self.frame.height,
                self.frame.width
            )));
        }
        if self.color.iter().any(|c| !c.is_finite()) || self.height.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return Err(Error::Numerical("observation has non-finite or negative values".into()));
        }
        Ok(())
    }
}

/// World pose of a pixel pose: pixel center, surface height, bin angle.
pub fn pixel_to_world(p: &PixelPose, obs: &Observation) -> Result<WorldPose> {
    p.check(&obs.frame)?;
    let (x, y) = obs.frame.pixel_center(p.u, p.v);
    Ok(WorldPose {
        x,
        y,
        z: obs.frame.z_min + obs.height_at(p.u, p.v) as f64,
        yaw: p.angle(),
    })
}

/// Pixel containing `(x, y)` with `yaw` snapped to the nearest of `k` bins.
pub fn world_to_pixel(frame: &WorkspaceFrame, x: f64, y: f64, yaw: f64, k: usize) -> Result<PixelPose> {
    if k == 0 {
        return Err(Error::Domain("rotation count must be positive".into()));
    }
    let (u, v) = frame.pixel_of(x, y);
    if !frame.contains_pixel(u, v) {
        return Err(Error::Domain(format!("world point ({x:.4}, {y:.4}) outside workspace")));
    }
    Ok(PixelPose::new(u as usize, v as usize, nearest_bin(yaw, k), k))
}

/// Rigid planar transform in pixel coordinates: rotate by `dtheta` about
/// `center`, then translate by `(du, dv)`. Coordinates are continuous, with
/// pixel `(u, v)` centered at `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2 {
    pub du: f64,
    pub dv: f64,
    pub dtheta: f64,
    pub center: (f64, f64),
}

impl Se2 {
    pub fn identity(center: (f64, f64)) -> Self {
        Self {
            du: 0.0,
            dv: 0.0,
            dtheta: 0.0,
            center,
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.dtheta.sin_cos();
        let (a, b) = (p.0 - self.center.0, p.1 - self.center.1);
        (
            c * a - s * b + self.center.0 + self.du,
            s * a + c * b + self.center.1 + self.dv,
        )
    }

    pub fn invert(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.dtheta.sin_cos();
        let (a, b) = (p.0 - self.center.0 - self.du, p.1 - self.center.1 - self.dv);
        (c * a + s * b + self.center.0, -s * a + c * b + self.center.1)
    }

    /// Image of pixel `(u, v)` (through its center), as a possibly
    /// out-of-frame integer pixel.
    pub fn map_pixel(&self, u: usize, v: usize) -> (i64, i64) {
        let (a, b) = self.apply((u as f64 + 0.5, v as f64 + 0.5));
        (a.floor() as i64, b.floor() as i64)
    }
}

/// Resample an observation under `t`. Height uses nearest-neighbour lookup,
/// color uses bilinear interpolation; samples from outside the source are
/// black with zero height.
pub fn warp_se2(obs: &Observation, t: &Se2) -> Observation {
    let (h, w) = obs.shape();
    if t.du == 0.0 && t.dv == 0.0 && t.dtheta == 0.0 {
        return obs.clone();
    }
    let mut out = Observation {
        color: vec![0.0; h * w * 3],
        height: vec![0.0; h * w],
        frame: obs.frame,
    };
    for u in 0..h {
        for v in 0..w {
            let (su, sv) = t.invert((u as f64 + 0.5, v as f64 + 0.5));
            let (nu, nv) = (su.floor() as i64, sv.floor() as i64);
            if !obs.frame.contains_pixel(nu, nv) {
                continue;
            }
            let o = u * w + v;
            out.height[o] = obs.height[nu as usize * w + nv as usize];
            // Bilinear over pixel centers; missing neighbours are background.
            let (fu, fv) = (su - 0.5, sv - 0.5);
            let (u0, v0) = (fu.floor() as i64, fv.floor() as i64);
            let (au, av) = ((fu - u0 as f64) as f32, (fv - v0 as f64) as f32);
            let mut rgb = [0.0f32; 3];
            for (du, wu) in [(0i64, 1.0 - au), (1, au)] {
                for (dv, wv) in [(0i64, 1.0 - av), (1, av)] {
                    let wgt = wu * wv;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (pu, pv) = (u0 + du, v0 + dv);
                    if obs.frame.contains_pixel(pu, pv) {
                        let i = (pu as usize * w + pv as usize) * 3;
                        for ch in 0..3 {
                            rgb[ch] += wgt * obs.color[i + ch];
                        }
                    }
                }
            }
            out.color[o * 3..o * 3 + 3].copy_from_slice(&rgb);
        }
    }
    out
}

/// Bilinear sampling weights for one output cell: up to four
/// `(source flat index, weight)` pairs. Out-of-map taps are dropped.
pub(crate) type Taps = Vec<[(usize, f64); 4]>;

/// Sampling plan for `k` rotated `c x c` windows around `(u, v)` of an
/// `h x w` grid. Slice `i` views the grid rotated by `+theta_i` about the
/// center pixel, so content in slice `i` appears rotated by `theta_i`.
pub(crate) fn rotated_crop_taps(h: usize, w: usize, u: usize, v: usize, c: usize, k: usize) -> Taps {
    let half = (c / 2) as f64;
    let mut taps = Vec::with_capacity(k * c * c);
    for i in 0..k {
        let (s, co) = bin_angle(i, k).sin_cos();
        for a in 0..c {
            for b in 0..c {
                let (oa, ob) = (a as f64 - half, b as f64 - half);
                // inverse rotation of the offset
                let su = u as f64 + co * oa + s * ob;
                let sv = v as f64 - s * oa + co * ob;
                taps.push(bilinear_taps(h, w, su, sv));
            }
        }
    }
    taps
}

fn bilinear_taps(h: usize, w: usize, su: f64, sv: f64) -> [(usize, f64); 4] {
    let mut out = [(0usize, 0.0f64); 4];
    // Snap values within rounding noise of the lattice so that quarter turns
    // stay exact.
    let snap = |x: f64| {
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r
        } else {
            x
        }
    };
    let (su, sv) = (snap(su), snap(sv));
    let (u0, v0) = (su.floor(), sv.floor());
    let (au, av) = (su - u0, sv - v0);
    let mut n = 0;
    for (du, wu) in [(0.0, 1.0 - au), (1.0, au)] {
        for (dv, wv) in [(0.0, 1.0 - av), (1.0, av)] {
            let wgt = wu * wv;
            let (pu, pv) = (u0 + du, v0 + dv);
            if wgt == 0.0 || pu < 0.0 || pv < 0.0 || pu >= h as f64 || pv >= w as f64 {
                continue;
            }
            out[n] = (pu as usize * w + pv as usize, wgt);
            n += 1;
        }
    }
    out
}

/// Dense `H x W x C` feature grid (row-major, channels last).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn at(&self, u: usize, v: usize, ch: usize) -> f64 {
        self.data[(u * self.w + v) * self.c + ch]
    }

    pub fn set(&mut self, u: usize, v: usize, ch: usize, x: f64) {
        self.data[(u * self.w + v) * self.c + ch] = x;
    }
}

/// `k` rotated `c x c` crops of `features` centered on `center`.
///
/// Returns a `k x c x c x C` array flattened row-major. Slice 0 is the plain
/// window `[u - c/2, u + c/2) x [v - c/2, v + c/2)`; slice `i` shows the
/// window content rotated by `theta_i` about the center pixel. Regions beyond
/// the map read as zero.
pub fn extract_rotated_crops(features: &FeatureGrid, center: &PixelPose, c: usize, k: usize) -> Result<Vec<f64>> {
    if c > features.h.min(features.w) {
        return Err(Error::Domain(format!(
            "crop size {c} exceeds {}x{} map",
            features.h, features.w
        )));
    }
    if c % 2 != 0 || c == 0 {
        return Err(Error::Domain(format!("crop size must be even and positive, got {c}")));
    }
    if k == 0 {
        return Err(Error::Domain("rotation count must be positive".into()));
    }
    if center.u >= features.h || center.v >= features.w {
        return Err(Error::Domain(format!("crop center ({}, {}) outside map", center.u, center.v)));
    }
    let taps = rotated_crop_taps(features.h, features.w, center.u, center.v, c, k);
    let ch = features.c;
    let mut out = vec![0.0; k * c * c * ch];
    for (cell, t) in taps.iter().enumerate() {
        for &(src, wgt) in t.iter().filter(|t| t.1 != 0.0) {
            for z in 0..ch {
                out[cell * ch + z] += wgt * features.data[src * ch + z];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs_with_frame(frame: WorkspaceFrame) -> Observation {
        Observation::filled(frame, [0.2, 0.2, 0.2])
    }

    #[test]
    fn frame_dimensions_follow_spans() {
        let f = WorkspaceFrame::standard();
        assert_eq!((f.height, f.width), (128, 128));
        assert!(WorkspaceFrame::new((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0.0).is_err());
        assert!(WorkspaceFrame::new((1.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0.1).is_err());
    }

    #[test]
    fn corner_pixel_maps_to_its_center() {
        let f = WorkspaceFrame::new((0.0, 0.4992), (0.0, 0.4992), (0.0, 0.3), 0.0039).unwrap();
        let obs = obs_with_frame(f);
        let w = pixel_to_world(&PixelPose::new(0, 0, 0, 36), &obs).unwrap();
        assert!((w.x - 0.00195).abs() < 1e-12);
        assert!((w.y - 0.00195).abs() < 1e-12);
        assert_eq!(w.z, 0.0);
        assert_eq!(w.yaw, 0.0);
    }

    #[test]
    fn quarter_turn_bin() {
        let obs = obs_with_frame(WorkspaceFrame::standard());
        let w = pixel_to_world(&PixelPose::new(5, 5, 9, 36), &obs).unwrap();
        assert!((w.yaw - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_domain_error() {
        let obs = obs_with_frame(WorkspaceFrame::standard());
        assert!(matches!(
            pixel_to_world(&PixelPose::new(128, 0, 0, 1), &obs),
            Err(Error::Domain(_))
        ));
        assert!(pixel_to_world(&PixelPose::new(0, 0, 1, 1), &obs).is_err());
    }

    #[test]
    fn round_trip_thousand_seeded_poses() {
        let frame = WorkspaceFrame::standard();
        let mut obs = obs_with_frame(frame);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for h in obs.height.iter_mut() {
            *h = rng.random_range(0.0..0.1);
        }
        for _ in 0..1000 {
            let k = rng.random_range(1..=36);
            let p = PixelPose::new(rng.random_range(0..128), rng.random_range(0..128), rng.random_range(0..k), k);
            let w = pixel_to_world(&p, &obs).unwrap();
            assert_eq!(world_to_pixel(&frame, w.x, w.y, w.yaw, k).unwrap(), p);
        }
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let mut obs = obs_with_frame(WorkspaceFrame::square(32));
        obs.color[17] = 0.77;
        obs.height[40] = 0.05;
        let out = warp_se2(&obs, &Se2::identity((16.0, 16.0)));
        assert_eq!(out, obs);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let mut obs = obs_with_frame(WorkspaceFrame::square(32));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in obs.color.iter_mut() {
            *c = rng.random();
        }
        for h in obs.height.iter_mut() {
            *h = rng.random_range(0.0..0.2);
        }
        let t = Se2 {
            du: 0.0,
            dv: 0.0,
            dtheta: PI,
            center: (16.0, 16.0),
        };
        let back = warp_se2(&warp_se2(&obs, &t), &t);
        let max_c = back.color.iter().zip(&obs.color).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        let max_h = back.height.iter().zip(&obs.height).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max_c < 1e-6, "color diff {max_c}");
        assert!(max_h < 1e-6, "height diff {max_h}");
    }

    #[test]
    fn translation_moves_bright_pixel() {
        let mut obs = Observation::filled(WorkspaceFrame::square(32), [0.0; 3]);
        let i = (10 * 32 + 10) * 3;
        obs.color[i..i + 3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let t = Se2 {
            du: 5.0,
            dv: 0.0,
            dtheta: 0.0,
            center: (16.0, 16.0),
        };
        let out = warp_se2(&obs, &t);
        let brightest = (0..32 * 32)
            .max_by(|&a, &b| out.color[a * 3].partial_cmp(&out.color[b * 3]).unwrap())
            .unwrap();
        assert_eq!((brightest / 32, brightest % 32), (15, 10));
    }

    #[test]
    fn warp_fills_uncovered_region_with_background() {
        let mut obs = Observation::filled(WorkspaceFrame::square(16), [0.5, 0.5, 0.5]);
        obs.height.iter_mut().for_each(|h| *h = 0.02);
        let t = Se2 {
            du: 4.0,
            dv: 0.0,
            dtheta: 0.0,
            center: (8.0, 8.0),
        };
        let out = warp_se2(&obs, &t);
        for v in 0..16 {
            assert_eq!(out.height_at(0, v), 0.0);
            assert_eq!(out.rgb(3, v), [0.0; 3]);
            assert_eq!(out.height_at(4, v), 0.02);
        }
    }

    #[test]
    fn se2_inverse_round_trip() {
        let t = Se2 {
            du: 3.5,
            dv: -2.0,
            dtheta: 0.7,
            center: (10.0, 12.0),
        };
        let p = (4.25, 19.5);
        let q = t.invert(t.apply(p));
        assert!((q.0 - p.0).abs() < 1e-12 && (q.1 - p.1).abs() < 1e-12);
    }

    fn grid_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(h, w, 1);
        for u in 0..h {
            for v in 0..w {
                g.set(u, v, 0, f(u, v));
            }
        }
        g
    }

    #[test]
    fn single_rotation_is_plain_window() {
        let g = grid_from(12, 12, |u, v| (u * 12 + v) as f64);
        let crops = extract_rotated_crops(&g, &PixelPose::new(6, 5, 0, 1), 4, 1).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(crops[a * 4 + b], g.at(6 - 2 + a, 5 - 2 + b, 0));
            }
        }
    }

    #[test]
    fn quarter_turn_rotates_l_pattern() {
        // L: vertical bar going down from the center plus a foot to the right.
        let mut g = FeatureGrid::zeros(16, 16, 1);
        for u in 8..12 {
            g.set(u, 8, 0, 1.0);
        }
        g.set(11, 9, 0, 1.0);
        g.set(11, 10, 0, 1.0);
        let c = 8;
        let crops = extract_rotated_crops(&g, &PixelPose::new(8, 8, 0, 4), c, 4).unwrap();
        // Oracle: a source cell at offset o appears at R(90deg) o = (-o.1, o.0).
        let mut expect = vec![0.0; c * c];
        for u in 0..16usize {
            for v in 0..16usize {
                if g.at(u, v, 0) == 0.0 {
                    continue;
                }
                let (ou, ov) = (u as i64 - 8, v as i64 - 8);
                let (ru, rv) = (-ov, ou);
                let (a, b) = (ru + 4, rv + 4);
                if (0..8).contains(&a) && (0..8).contains(&b) {
                    expect[a as usize * c + b as usize] = 1.0;
                }
            }
        }
        assert_eq!(&crops[c * c..2 * c * c], expect.as_slice());
    }

    #[test]
    fn corner_crop_is_zero_padded() {
        let g = grid_from(10, 10, |_, _| 1.0);
        let crops = extract_rotated_crops(&g, &PixelPose::new(0, 0, 0, 1), 4, 1).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let inside = a >= 2 && b >= 2;
                assert_eq!(crops[a * 4 + b], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let g = FeatureGrid::zeros(8, 8, 1);
        assert!(matches!(
            extract_rotated_crops(&g, &PixelPose::new(4, 4, 0, 1), 10, 1),
            Err(Error::Domain(_))
        ));
    }
}
