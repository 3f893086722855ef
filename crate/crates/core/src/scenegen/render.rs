//! Ray-cast first-person views of a box room and the analytic projection of
//! box extents onto the image plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Flat colors of the three object classes: red, blue, black.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[200, 30, 30], [30, 55, 200], [22, 22, 22]];
pub const CLASS_NAMES: [&str; 3] = ["red", "blue", "black"];

const NEAR: f64 = 0.05;

/// Pinhole camera on the floor plane looking horizontally along `heading`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise from +x.
    pub heading: f64,
    pub eye_height: f64,
    /// Horizontal and vertical field of view, radians (square images).
    pub fov: f64,
}

impl Camera {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Camera {
            x,
            y,
            heading,
            eye_height: 0.6,
            fov: 75f64.to_radians(),
        }
    }

    fn basis(&self) -> ([f64; 3], [f64; 3]) {
        let (s, c) = self.heading.sin_cos();
        ([c, s, 0.0], [s, -c, 0.0])
    }

    /// Camera-frame `(right, up, forward)` of a world point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let (f, r) = self.basis();
        let d = [p[0] - self.x, p[1] - self.y, p[2] - self.eye_height];
        [dot(d, r), d[2], dot(d, f)]
    }

    /// Normalized image coordinates of a camera-frame point with positive depth.
    pub fn project(&self, pc: [f64; 3]) -> (f64, f64) {
        let k = 2.0 * (self.fov / 2.0).tan();
        (0.5 + pc[0] / (pc[2] * k), 0.5 - pc[1] / (pc[2] * k))
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Axis-aligned cube standing on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBox {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub size: f64,
}

impl WorldBox {
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let h = self.size / 2.0;
        ([self.x - h, self.y - h, 0.0], [self.x + h, self.y + h, self.size])
    }

    fn corners(&self) -> [[f64; 3]; 8] {
        let (lo, hi) = self.bounds();
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = [
                if i & 1 == 0 { lo[0] } else { hi[0] },
                if i & 2 == 0 { lo[1] } else { hi[1] },
                if i & 4 == 0 { lo[2] } else { hi[2] },
            ];
        }
        out
    }
}

/// Rectangular room `[0, width] x [0, depth]` with a ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Room {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

impl Default for Room {
    fn default() -> Self {
        Room {
            width: 10.0,
            depth: 10.0,
            height: 2.5,
        }
    }
}

/// Surface colors and image noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub wall: [u8; 3],
    pub floor: [u8; 3],
    pub ceiling: [u8; 3],
    /// Global brightness multiplier.
    pub lighting: f64,
    /// Half-width of the uniform per-channel pixel noise.
    pub noise: f64,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            wall: [196, 190, 178],
            floor: [168, 160, 150],
            ceiling: [225, 225, 220],
            lighting: 1.0,
            noise: 0.0,
        }
    }
}

impl Style {
    /// Light, low-saturation walls and floor with moderate lighting changes.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut tone = |lo: f64, hi: f64| {
            let g = rng.gen_range(lo..hi);
            [0; 3].map(|_| (g + rng.gen_range(-14.0..14.0)).clamp(0.0, 255.0) as u8)
        };
        let wall = tone(165.0, 225.0);
        let floor = tone(125.0, 185.0);
        Style {
            wall,
            floor,
            ceiling: [228, 228, 224],
            lighting: rng.gen_range(0.85..1.1),
            noise: 6.0,
        }
    }
}

/// Pixels `[H, W, 3]` plus the class of the box seen at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub ids: Vec<Option<u8>>,
}

/// Ray parameter of the first hit with an axis-aligned box, if any.
fn hit_aabb(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, usize)> {
    let (mut tmin, mut tmax, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis = k;
        }
        tmax = tmax.min(t1);
    }
    (tmin <= tmax && tmin > 0.0).then_some((tmin, axis))
}

fn shade(c: [u8; 3], f: f64) -> [f64; 3] {
    c.map(|v| v as f64 * f)
}

/// Renders the view of `cam`; `noise_seed` drives the pixel noise only.
pub fn render_view(room: &Room, cam: &Camera, boxes: &[WorldBox], style: &Style, size: usize, noise_seed: u64) -> View {
    let (f, r) = cam.basis();
    let k = (cam.fov / 2.0).tan();
    let o = [cam.x, cam.y, cam.eye_height];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut rgb = Vec::with_capacity(size * size * 3);
    let mut ids = Vec::with_capacity(size * size);
    for i in 0..size {
        let v = (i as f64 + 0.5) / size as f64;
        for j in 0..size {
            let u = (j as f64 + 0.5) / size as f64;
            let (a, b) = ((2.0 * u - 1.0) * k, (1.0 - 2.0 * v) * k);
            // Forward component of `d` is 1, so `t` is camera depth.
            let d = [f[0] + a * r[0], f[1] + a * r[1], b];
            let mut best = f64::INFINITY;
            let mut color = [0.0; 3];
            let mut id = None;
            for bx in boxes {
                let (lo, hi) = bx.bounds();
                if let Some((t, axis)) = hit_aabb(o, d, lo, hi) {
                    if t >= NEAR && t < best {
                        best = t;
                        id = Some(bx.class_id as u8);
                        let face = [0.8, 0.65, 1.0][axis];
                        color = shade(CLASS_COLORS[bx.class_id], face);
                    }
                }
            }
            if id.is_none() {
                let mut surface = |t: f64, c: [f64; 3]| {
                    if t > 0.0 && t < best {
                        best = t;
                        color = c;
                    }
                };
                let p = |t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                let panel = |s: f64| if (s * 2.0).floor() as i64 % 2 == 0 { 1.0 } else { 0.95 };
                if d[2] < 0.0 {
                    let t = -o[2] / d[2];
                    let q = p(t);
                    let tile = if ((q[0] * 2.0).floor() + (q[1] * 2.0).floor()) as i64 % 2 == 0 { 1.0 } else { 0.92 };
                    surface(t, shade(style.floor, tile));
                } else if d[2] > 0.0 {
                    surface((room.height - o[2]) / d[2], shade(style.ceiling, 1.0));
                }
                for (axis, bound) in [(0, 0.0), (0, room.width), (1, 0.0), (1, room.depth)] {
                    if d[axis].abs() > 1e-12 {
                        let t = (bound - o[axis]) / d[axis];
                        let q = p(t);
                        let along = q[1 - axis];
                        surface(t, shade(style.wall, panel(along) * if axis == 0 { 0.97 } else { 1.0 }));
                    }
                }
            }
            ids.push(id);
            for c in color {
                let n = if style.noise > 0.0 { rng.gen_range(-style.noise..=style.noise) } else { 0.0 };
                rgb.push((c * style.lighting + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    View { size, rgb, ids }
}

/// Normalized image rectangle covered by the box's projection, clipped to
/// the near plane and the image. `None` when nothing lands in view.
pub fn project_box(cam: &Camera, bx: &WorldBox) -> Option<[f64; 4]> {
    let pts = bx.corners().map(|p| cam.to_camera(p));
    let mut img = Vec::with_capacity(20);
    for p in &pts {
        if p[2] >= NEAR {
            img.push(cam.project(*p));
        }
    }
    // Edges crossing the near plane contribute their crossing point.
    for a in 0..8usize {
        for bit in [1, 2, 4] {
            let b = a | bit;
            if b == a {
                continue;
            }
            let (pa, pb) = (pts[a], pts[b]);
            if (pa[2] - NEAR) * (pb[2] - NEAR) < 0.0 {
                let s = (NEAR - pa[2]) / (pb[2] - pa[2]);
                let q = [0, 1, 2].map(|k| pa[k] + s * (pb[k] - pa[k]));
                img.push(cam.project(q));
            }
        }
    }
    if img.is_empty() {
        return None;
    }
    let fold = |sel: fn(&(f64, f64)) -> f64, init: f64, m: fn(f64, f64) -> f64| img.iter().map(sel).fold(init, m);
    let x1 = fold(|p| p.0, f64::INFINITY, f64::min).max(0.0);
    let y1 = fold(|p| p.1, f64::INFINITY, f64::min).max(0.0);
    let x2 = fold(|p| p.0, f64::NEG_INFINITY, f64::max).min(1.0);
    let y2 = fold(|p| p.1, f64::NEG_INFINITY, f64::max).min(1.0);
    (x1 < x2 && y1 < y2).then_some([x1, y1, x2, y2])
}
