//! Synthetic event data from a wireframe scene seen by a moving pinhole
//! camera.
//!
//! Each groundtruth sample renders the scene's segments as a 1-pixel edge
//! mask. Between consecutive samples every pixel whose mask value changed
//! emits one event: +1 when it turns on, -1 when it turns off. Event times
//! are spread uniformly (seeded) inside the interval.
//!
//! Camera frame: x right, y down, z forward. A pose `(p, q)` maps camera
//! coordinates to world coordinates, `X_w = R(q) X_c + p`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_io::{canonicalize_quaternion, write_events, write_poses, Event, PoseLabel};

/// Points closer than this to the camera plane are clipped away.
const NEAR_PLANE: f64 = 1e-3;

/// A 3D line segment in world coordinates (meters).
pub type Segment = [[f64; 3]; 2];

/// Sinusoidal camera motion. Every coordinate oscillates independently as
/// `center + amplitude * sin(2 pi frequency t + phase)`. Rotation angles are
/// roll (about x), pitch (about y) and yaw (about z), composed as
/// `Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub position_center: [f64; 3],
    pub position_amplitude: [f64; 3],
    pub position_frequency_hz: [f64; 3],
    pub position_phase: [f64; 3],
    pub rotation_center: [f64; 3],
    pub rotation_amplitude: [f64; 3],
    pub rotation_frequency_hz: [f64; 3],
    pub rotation_phase: [f64; 3],
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory {
            position_center: [0.0, 0.0, 0.0],
            position_amplitude: [0.25, 0.15, 0.2],
            position_frequency_hz: [0.7, 0.45, 0.55],
            position_phase: [0.0, 1.0, 2.0],
            rotation_center: [0.0, 0.0, 0.0],
            rotation_amplitude: [0.15, 0.25, 0.2],
            rotation_frequency_hz: [0.6, 0.8, 0.5],
            rotation_phase: [0.5, 0.0, 1.5],
        }
    }
}

impl Trajectory {
    /// A trajectory that never moves.
    pub fn fixed(p: [f64; 3], rpy: [f64; 3]) -> Self {
        Trajectory {
            position_center: p,
            position_amplitude: [0.0; 3],
            rotation_center: rpy,
            rotation_amplitude: [0.0; 3],
            ..Trajectory::default()
        }
    }

    /// Pose at time `t` with a canonical quaternion.
    pub fn pose_at(&self, t: f64) -> PoseLabel {
        let wave = |c: &[f64; 3], a: &[f64; 3], f: &[f64; 3], ph: &[f64; 3]| -> [f64; 3] {
            std::array::from_fn(|i| c[i] + a[i] * (TAU * f[i] * t + ph[i]).sin())
        };
        let p = wave(
            &self.position_center,
            &self.position_amplitude,
            &self.position_frequency_hz,
            &self.position_phase,
        );
        let rpy = wave(
            &self.rotation_center,
            &self.rotation_amplitude,
            &self.rotation_frequency_hz,
            &self.rotation_phase,
        );
        let q = canonicalize_quaternion(quaternion_from_rpy(rpy)).expect("unit quaternion from angles");
        PoseLabel { t, p, q }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Pixels.
    pub focal: f64,
    /// Principal point; defaults to the image center.
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub trajectory: Trajectory,
    pub rate_hz: f64,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let mut segments = Vec::new();
        // three quadrilaterals at different depths and tilts
        segments.extend(quad([-0.35, -0.2, 2.0], [0.45, 0.0, 0.0], [0.0, 0.35, 0.0]));
        segments.extend(quad([0.25, -0.3, 2.4], [0.35, 0.0, 0.3], [0.0, 0.5, 0.0]));
        segments.extend(quad([-0.3, 0.25, 1.6], [0.5, 0.0, 0.0], [0.1, 0.2, 0.25]));
        SceneConfig {
            width: 64,
            height: 64,
            focal: 60.0,
            cx: None,
            cy: None,
            segments,
            trajectory: Trajectory::default(),
            rate_hz: 200.0,
            duration: 2.0,
            seed: 7,
        }
    }
}

/// The four edges of the parallelogram spanned by `u` and `v` from `origin`.
pub fn quad(origin: [f64; 3], u: [f64; 3], v: [f64; 3]) -> [Segment; 4] {
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let c = [origin, add(origin, u), add(add(origin, u), v), add(origin, v)];
    [[c[0], c[1]], [c[1], c[2]], [c[2], c[3]], [c[3], c[0]]]
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SceneConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (
            self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
        )
    }

    /// Number of groundtruth samples, `round(rate_hz * duration)`.
    pub fn num_poses(&self) -> usize {
        (self.rate_hz * self.duration).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Range {
                    what,
                    value: v,
                    range: "(0, inf)",
                })
            }
        };
        positive("rate_hz", self.rate_hz)?;
        positive("duration", self.duration)?;
        positive("focal", self.focal)?;
        if self.width == 0 || self.height == 0 || self.width > u32::MAX as usize || self.height > u32::MAX as usize {
            return Err(Error::Config(format!("bad sensor size {}x{}", self.width, self.height)));
        }
        if self.segments.is_empty() {
            return Err(Error::Config("scene has no segments".into()));
        }
        if self.segments.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite segment coordinate".into()));
        }
        Ok(())
    }
}

/// Quaternion (qx, qy, qz, qw) of `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn quaternion_from_rpy([roll, pitch, yaw]: [f64; 3]) -> [f64; 4] {
    let (sr, cr) = (roll / 2.0).sin_cos();
    let (sp, cp) = (pitch / 2.0).sin_cos();
    let (sy, cy) = (yaw / 2.0).sin_cos();
    [
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
        cr * cp * cy + sr * sp * sy,
    ]
}

/// Row-major rotation matrix of a unit quaternion.
pub fn rotation_matrix([x, y, z, w]: [f64; 4]) -> [[f64; 3]; 3] {
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Binary `h x w` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl EdgeMask {
    pub fn empty(width: usize, height: usize) -> Self {
        EdgeMask {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn hamming(&self, other: &EdgeMask) -> usize {
        self.pixels.iter().zip(&other.pixels).filter(|(a, b)| a != b).count()
    }

    fn set(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = true;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Clips the 2D segment to `[0, xmax] x [0, ymax]` (Liang-Barsky).
fn clip_2d(a: [f64; 2], b: [f64; 2], xmax: f64, ymax: f64) -> Option<([f64; 2], [f64; 2])> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d[0], a[0]), (d[0], xmax - a[0]), (-d[1], a[1]), (d[1], ymax - a[1])] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((
        [a[0] + t0 * d[0], a[1] + t0 * d[1]],
        [a[0] + t1 * d[0], a[1] + t1 * d[1]],
    ))
}

/// Rasterizes every segment visible from `pose`.
pub fn render_edge_frame(config: &SceneConfig, pose: &PoseLabel) -> EdgeMask {
    let mut mask = EdgeMask::empty(config.width, config.height);
    let r = rotation_matrix(pose.q);
    let (cx, cy) = config.principal_point();
    // X_c = R^T (X_w - p)
    let to_camera = |x: &[f64; 3]| -> [f64; 3] {
        let d = [x[0] - pose.p[0], x[1] - pose.p[1], x[2] - pose.p[2]];
        std::array::from_fn(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    };
    let project = |x: [f64; 3]| [config.focal * x[0] / x[2] + cx, config.focal * x[1] / x[2] + cy];
    for seg in &config.segments {
        let (mut a, mut b) = (to_camera(&seg[0]), to_camera(&seg[1]));
        if a[2] < NEAR_PLANE && b[2] < NEAR_PLANE {
            continue;
        }
        if a[2] < NEAR_PLANE || b[2] < NEAR_PLANE {
            if a[2] < NEAR_PLANE {
                std::mem::swap(&mut a, &mut b);
            }
            let s = (a[2] - NEAR_PLANE) / (a[2] - b[2]);
            b = std::array::from_fn(|i| a[i] + s * (b[i] - a[i]));
            b[2] = NEAR_PLANE;
        }
        let Some((u, v)) = clip_2d(
            project(a),
            project(b),
            config.width as f64 - 1.0,
            config.height as f64 - 1.0,
        ) else {
            continue;
        };
        let px = |p: [f64; 2]| (p[0].round() as i64, p[1].round() as i64);
        mask.line(px(u), px(v));
    }
    mask
}

/// Groundtruth poses and the events between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub events: Vec<Event>,
    pub poses: Vec<PoseLabel>,
    /// Hamming distance between consecutive edge masks, one per interval.
    pub toggles: Vec<usize>,
}

impl SyntheticData {
    pub fn events_text(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_events(&mut buf, &self.events)?;
        Ok(String::from_utf8(buf).expect("ascii output"))
    }

    pub fn groundtruth_text(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_poses(&mut buf, &self.poses)?;
        Ok(String::from_utf8(buf).expect("ascii output"))
    }
}

pub fn generate(config: &SceneConfig) -> Result<SyntheticData> {
    config.validate()?;
    let n = config.num_poses();
    let times: Vec<f64> = (0..n).map(|k| k as f64 / config.rate_hz).collect();
    let poses: Vec<PoseLabel> = times.iter().map(|&t| config.trajectory.pose_at(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut events = Vec::new();
    let mut toggles = Vec::with_capacity(n.saturating_sub(1));
    let mut prev = poses.first().map(|p| render_edge_frame(config, p));
    for k in 1..n {
        let next = render_edge_frame(config, &poses[k]);
        let before = prev.as_ref().expect("previous frame");
        let (t0, t1) = (times[k - 1], times[k]);
        let start = events.len();
        for (i, (&was, &is)) in before.pixels.iter().zip(&next.pixels).enumerate() {
            if was == is {
                continue;
            }
            // 1 - u lies in (0, 1], so t lands in (t0, t1] up to rounding
            let u: f64 = rng.random();
            let t = (t0 + (1.0 - u) * (t1 - t0)).clamp(t0.next_up(), t1);
            let (x, y) = (i % config.width, i / config.width);
            events.push(Event::new(t, x as u32, y as u32, if is { 1 } else { -1 }));
        }
        toggles.push(events.len() - start);
        events[start..].sort_by(|a, b| a.t.total_cmp(&b.t));
        prev = Some(next);
    }
    Ok(SyntheticData { events, poses, toggles })
}

/// `(events.txt, groundtruth.txt)` contents for `config`.
pub fn generate_dataset(config: &SceneConfig) -> Result<(String, String)> {
    let data = generate(config)?;
    Ok((data.events_text()?, data.groundtruth_text()?))
}
