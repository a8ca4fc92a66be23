//! Silhouette rendering: a differentiable soft rasterizer used by the mask
//! loss, a hard rasterizer for metrics, and the occlusion helpers.
//!
//! Soft occupancy of a pixel is `1 - prod_f (1 - sigmoid(sharpness * d_f))`
//! where `d_f` is the signed distance (render pixels, positive inside) from the
//! pixel center to projected face `f`. Faces are not culled by orientation.
//! Inside a face the distance is the soft minimum `(sum_k l_k^-p)^(-1/p)` of
//! the three edge-line distances, which removes the creases of the exact
//! minimum along the angle bisectors. It equals the exact distance on the
//! boundary and is never larger than it.
//!
//! Two approximations keep the cost proportional to the silhouette boundary:
//! a face contributes nothing where `d_f <= -cutoff / sharpness`, and a pixel
//! whose product falls below `exp(-cutoff)` is fully occupied with zero
//! gradient. Both are exact up to `sigmoid(-cutoff)`. Pixels that the covering
//! faces alone provably saturate are never visited.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mesh, Vec3};

/// Row-major binary image, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![1; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[(y * self.width + x) as usize] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn same_size(&self, other: &BinaryImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixel bounding box `(x_min, y_min, x_max, y_max)`, inclusive.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }
}

/// Soft occupancy image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    pub width: u32,
    pub height: u32,
    pub occupancy: Vec<f64>,
}

impl SilhouetteImage {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.occupancy[(y * self.width + x) as usize]
    }

    pub fn threshold(&self, level: f64) -> BinaryImage {
        BinaryImage {
            width: self.width,
            height: self.height,
            data: self.occupancy.iter().map(|&o| (o > level) as u8).collect(),
        }
    }
}

/// Per-pixel weights of the mask loss: 1 for object and background, 0 for hand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub width: u32,
    pub height: u32,
    pub weight: Vec<u8>,
}

impl OcclusionMask {
    pub fn all_visible(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            weight: vec![1; (width * height) as usize],
        }
    }
}

/// `C_o = 1 - hand_mask`.
pub fn occlusion_mask(hand_mask: &BinaryImage, width: u32, height: u32) -> Result<OcclusionMask> {
    if hand_mask.width != width || hand_mask.height != height {
        return Err(Error::invalid(format!(
            "hand mask is {}x{}, expected {width}x{height}",
            hand_mask.width, hand_mask.height
        )));
    }
    Ok(OcclusionMask {
        width,
        height,
        weight: hand_mask.data.iter().map(|&h| (h == 0) as u8).collect(),
    })
}

/// Window of the image plane sampled by a render. Render pixel `(i, j)` has
/// its center at image coordinates `(x0 + (i + 0.5) * pixel_size, y0 + (j + 0.5) * pixel_size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub x0: f64,
    pub y0: f64,
    pub pixel_size: f64,
    pub width: u32,
    pub height: u32,
}

impl Viewport {
    pub fn full_image(k: &CameraIntrinsics) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            pixel_size: 1.0,
            width: k.width,
            height: k.height,
        }
    }

    pub fn square(center: [f64; 2], side: f64, render_size: u32) -> Self {
        Self {
            x0: center[0] - side / 2.0,
            y0: center[1] - side / 2.0,
            pixel_size: side / render_size as f64,
            width: render_size,
            height: render_size,
        }
    }

    /// Square crop around a mask's bounding box, inflated by `inflate`
    /// (0.3 means 30% larger). An empty mask yields the image's bounding square.
    pub fn crop_around(mask: &BinaryImage, inflate: f64, render_size: u32) -> Self {
        match mask.bounding_box() {
            Some((x0, y0, x1, y1)) => {
                let w = (x1 - x0 + 1) as f64;
                let h = (y1 - y0 + 1) as f64;
                let center = [x0 as f64 + w / 2.0, y0 as f64 + h / 2.0];
                Self::square(center, w.max(h) * (1.0 + inflate), render_size)
            }
            None => {
                let side = mask.width.max(mask.height) as f64;
                Self::square([mask.width as f64 / 2.0, mask.height as f64 / 2.0], side, render_size)
            }
        }
    }

    fn len(&self) -> usize {
        (self.width * self.height) as usize
    }
}

/// Samples a full-resolution binary mask onto a viewport, returning the
/// covered fraction of `ss x ss` subsamples per render pixel.
pub fn resample_mask(mask: &BinaryImage, vp: &Viewport, ss: u32) -> Vec<f64> {
    let mut out = vec![0.0; vp.len()];
    let inv = 1.0 / (ss * ss) as f64;
    for j in 0..vp.height {
        for i in 0..vp.width {
            let mut hits = 0u32;
            for b in 0..ss {
                for a in 0..ss {
                    let u = vp.x0 + (i as f64 + (a as f64 + 0.5) / ss as f64) * vp.pixel_size;
                    let v = vp.y0 + (j as f64 + (b as f64 + 0.5) / ss as f64) * vp.pixel_size;
                    if u >= 0.0 && v >= 0.0 && u < mask.width as f64 && v < mask.height as f64 && mask.get(u as u32, v as u32) {
                        hits += 1;
                    }
                }
            }
            out[(j * vp.width + i) as usize] = hits as f64 * inv;
        }
    }
    out
}

/// Occlusion weights on a viewport: a render pixel is masked out when any of
/// its subsamples falls on the hand.
pub fn resample_occlusion(hand_mask: &BinaryImage, vp: &Viewport, ss: u32) -> OcclusionMask {
    let cover = resample_mask(hand_mask, vp, ss);
    OcclusionMask {
        width: vp.width,
        height: vp.height,
        weight: cover.iter().map(|&c| (c == 0.0) as u8).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Sigmoid slope in 1/render-pixel.
    pub sharpness: f64,
    /// Logit beyond which a face is treated as saturated.
    pub cutoff: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        // 10%-90% transition over ~1.5 px
        Self {
            sharpness: 3.0,
            cutoff: 16.0,
        }
    }
}

impl RenderSettings {
    fn margin(&self) -> f64 {
        self.cutoff / self.sharpness
    }
}

/// Projected vertex in render pixels with the Jacobian w.r.t. its camera-frame position.
#[derive(Debug, Clone, Copy)]
struct Projected {
    p: [f64; 2],
    // d(ru, rv)/d(x, y, z); ru does not depend on y, rv not on x
    du: [f64; 2],
    dv: [f64; 2],
}

fn project_to_viewport(mesh: &Mesh, k: &CameraIntrinsics, vp: &Viewport) -> Result<Vec<Projected>> {
    mesh.vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if !(v.z > 0.0) {
                return Err(Error::BehindCamera { vertex: i, z: v.z });
            }
            let iz = 1.0 / v.z;
            let sx = k.fx / vp.pixel_size;
            let sy = k.fy / vp.pixel_size;
            Ok(Projected {
                p: [
                    (k.fx * v.x * iz + k.cx - vp.x0) / vp.pixel_size,
                    (k.fy * v.y * iz + k.cy - vp.y0) / vp.pixel_size,
                ],
                du: [sx * iz, -sx * v.x * iz * iz],
                dv: [sy * iz, -sy * v.y * iz * iz],
            })
        })
        .collect()
}

/// Edge-function form of a projected triangle.
#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [[f64; 2]; 3],
    /// +1 or -1 so that line distances are positive inside
    orient: f64,
    /// line distance of edge k (from v[k] to v[k+1]) is `a*x + b*y + c`
    lines: [[f64; 3]; 3],
    bbox: [f64; 4],
}

impl Tri {
    fn new(v: [[f64; 2]; 3]) -> Option<Self> {
        let area2 = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
        if !(area2.abs() > 1e-12) {
            return None;
        }
        let orient = area2.signum();
        let mut lines = [[0.0; 3]; 3];
        for (k, line) in lines.iter_mut().enumerate() {
            let a = v[k];
            let b = v[(k + 1) % 3];
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let l = (ex * ex + ey * ey).sqrt();
            *line = [-orient * ey / l, orient * ex / l, orient * (ey * a[0] - ex * a[1]) / l];
        }
        let bbox = [
            v[0][0].min(v[1][0]).min(v[2][0]),
            v[0][1].min(v[1][1]).min(v[2][1]),
            v[0][0].max(v[1][0]).max(v[2][0]),
            v[0][1].max(v[1][1]).max(v[2][1]),
        ];
        Some(Self { v, orient, lines, bbox })
    }

    /// Inclusive range of pixel columns in row `j` whose centers satisfy
    /// `line_k >= t` for all three edges, clipped to `[0, width)`.
    fn row_span(&self, j: u32, t: f64, width: u32) -> Option<(u32, u32)> {
        let y = j as f64 + 0.5;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for l in &self.lines {
            let rest = l[1] * y + l[2];
            if l[0] > 0.0 {
                lo = lo.max((t - rest) / l[0]);
            } else if l[0] < 0.0 {
                hi = hi.min((t - rest) / l[0]);
            } else if rest < t {
                return None;
            }
        }
        let i0 = (lo - 0.5).ceil().max(0.0);
        let i1 = (hi - 0.5).floor().min(width as f64 - 1.0);
        if i0 > i1 {
            return None;
        }
        Some((i0 as u32, i1 as u32))
    }

    fn rows(&self, pad: f64, height: u32) -> Option<(u32, u32)> {
        let j0 = (self.bbox[1] - pad - 0.5).ceil().max(0.0);
        let j1 = (self.bbox[3] + pad - 0.5).floor().min(height as f64 - 1.0);
        if j0 > j1 {
            return None;
        }
        Some((j0 as u32, j1 as u32))
    }

    fn line_dists(&self, x: f64, y: f64) -> [f64; 3] {
        let l = &self.lines;
        [
            l[0][0] * x + l[0][1] * y + l[0][2],
            l[1][0] * x + l[1][1] * y + l[1][2],
            l[2][0] * x + l[2][1] * y + l[2][2],
        ]
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        self.line_dists(x, y).iter().all(|&d| d >= 0.0)
    }

    /// Signed distance to the triangle, positive inside.
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        self.feature(x, y).0
    }

    /// Signed distance and the boundary feature it is measured to.
    fn feature(&self, x: f64, y: f64) -> (f64, Feature) {
        let d = self.line_dists(x, y);
        if d[0] >= 0.0 && d[1] >= 0.0 && d[2] >= 0.0 {
            let dm = d[0].min(d[1]).min(d[2]);
            if dm == 0.0 {
                let k = d.iter().position(|&v| v == 0.0).unwrap_or(0);
                return (0.0, Feature::Edge(k));
            }
            let r = d.map(|v| dm / v);
            let sum: f64 = r.iter().map(|v| v.powi(SOFT_MIN_POWER)).sum();
            let dist = dm * sum.powf(-1.0 / SOFT_MIN_POWER as f64);
            // d dist / d l_k = (dist / l_k)^(p + 1)
            let w = r.map(|v| (v * dist / dm).powi(SOFT_MIN_POWER + 1));
            return (dist, Feature::Inside(w));
        }
        // the nearest boundary point lies on an edge the point is outside of
        let mut best = (f64::INFINITY, 0.0, 0usize);
        for k in 0..3 {
            if d[k] < 0.0 {
                let (d2, t) = seg_dist2(self.v[k], self.v[(k + 1) % 3], x, y);
                if d2 < best.0 {
                    best = (d2, t, k);
                }
            }
        }
        let (d2, t, k) = best;
        if t > 0.0 && t < 1.0 {
            return (d[k], Feature::Edge(k));
        }
        let vi = if t <= 0.0 { k } else { (k + 1) % 3 };
        let dist = d2.sqrt();
        (-dist, Feature::Vertex(vi, dist))
    }

    fn accumulate(&self, m: &mut Moments, feature: Feature, coef: f64, x: f64, y: f64) {
        let (x, y) = (x - self.v[0][0], y - self.v[0][1]);
        let (slot, c) = match feature {
            Feature::Inside(w) => {
                for (slot, wk) in m.edge.iter_mut().zip(w) {
                    let c = coef * wk;
                    slot[0] += c;
                    slot[1] += c * x;
                    slot[2] += c * y;
                }
                return;
            }
            Feature::Edge(k) => (&mut m.edge[k], coef),
            Feature::Vertex(vi, dist) if dist > 0.0 => (&mut m.vertex[vi], coef / dist),
            Feature::Vertex(..) => return,
        };
        slot[0] += c;
        slot[1] += c * x;
        slot[2] += c * y;
    }

    /// Gradient w.r.t. the three 2D vertices of the coefficient-weighted sum
    /// of signed distances collected in `m`.
    fn moment_gradient(&self, m: &Moments) -> [[f64; 2]; 3] {
        let o = self.orient;
        let local = |p: [f64; 2]| [p[0] - self.v[0][0], p[1] - self.v[0][1]];
        let mut g = [[0.0; 2]; 3];
        for k in 0..3 {
            let [s0, sx, sy] = m.edge[k];
            if s0 == 0.0 && sx == 0.0 && sy == 0.0 {
                continue;
            }
            let (ia, ib) = (k, (k + 1) % 3);
            let (a, b) = (local(self.v[ia]), local(self.v[ib]));
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let l2 = ex * ex + ey * ey;
            let l = l2.sqrt();
            let l3 = l2 * l;
            // sum of coef * (ex (y - a_y) - ey (x - a_x))
            let c = ex * (sy - a[1] * s0) - ey * (sx - a[0] * s0);
            g[ia][0] += o * ((b[1] * s0 - sy) / l + c * ex / l3);
            g[ia][1] += o * ((sx - b[0] * s0) / l + c * ey / l3);
            g[ib][0] += o * ((sy - a[1] * s0) / l - c * ex / l3);
            g[ib][1] += o * ((a[0] * s0 - sx) / l - c * ey / l3);
        }
        for (vi, gv) in g.iter_mut().enumerate() {
            let [t0, tx, ty] = m.vertex[vi];
            let p = local(self.v[vi]);
            gv[0] += tx - p[0] * t0;
            gv[1] += ty - p[1] * t0;
        }
        g
    }
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    /// Inside: weight of each edge-line distance in the soft minimum.
    Inside([f64; 3]),
    Edge(usize),
    /// Vertex index and distance to it.
    Vertex(usize, f64),
}

/// Per-face sums over pixels of `c`, `c x` and `c y` for each edge and of
/// `c / dist` times the same for each vertex, with `x, y` relative to `v[0]`.
/// Distance gradients are affine in the pixel position, so these sums are
/// enough to form the vertex gradient once per face.
#[derive(Debug, Default)]
struct Moments {
    edge: [[f64; 3]; 3],
    vertex: [[f64; 3]; 3],
}

/// Squared distance from a point to segment `ab` and the clamped parameter.
fn seg_dist2(a: [f64; 2], b: [f64; 2], x: f64, y: f64) -> (f64, f64) {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (x - a[0], y - a[1]);
    let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
    let (dx, dy) = (wx - t * ex, wy - t * ey);
    (dx * dx + dy * dy, t)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 - sigmoid(x)) = -softplus(x)`.
fn log_one_minus_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        -x - (-x).exp().ln_1p()
    } else {
        -x.exp().ln_1p()
    }
}

/// Soft render plus what is needed to back-propagate through it.
#[derive(Debug, Clone)]
pub struct SoftRender {
    pub image: SilhouetteImage,
    settings: RenderSettings,
    projected: Vec<Projected>,
    faces: Vec<[usize; 3]>,
    tris: Vec<Option<Tri>>,
    /// product of (1 - sigmoid) over faces; 0 where saturated
    remainder: Vec<f64>,
    deep: Vec<bool>,
}

/// Soft silhouette of a camera-frame mesh on a viewport.
pub fn render_soft(
    mesh_in_camera: &Mesh,
    k: &CameraIntrinsics,
    vp: &Viewport,
    settings: &RenderSettings,
) -> Result<SoftRender> {
    let projected = project_to_viewport(mesh_in_camera, k, vp)?;
    let tris: Vec<Option<Tri>> = mesh_in_camera
        .faces
        .iter()
        .map(|f| Tri::new([projected[f[0]].p, projected[f[1]].p, projected[f[2]].p]))
        .collect();
    let (w, h) = (vp.width, vp.height);
    let m = settings.margin();
    let mut deep = saturated_pixels(&tris, w, h, settings);
    let mut remainder = vec![1.0f64; vp.len()];
    for tri in tris.iter().flatten() {
        visit_band(tri, w, h, m, &deep, |idx, x, y| {
            let d = tri.signed_distance(x, y);
            if d > -m {
                remainder[idx] /= 1.0 + (settings.sharpness * d).exp();
            }
        });
    }
    let floor = (-settings.cutoff).exp();
    let mut occupancy = vec![0.0; vp.len()];
    for idx in 0..vp.len() {
        if deep[idx] || remainder[idx] < floor {
            deep[idx] = true;
            remainder[idx] = 0.0;
            occupancy[idx] = 1.0;
        } else {
            occupancy[idx] = 1.0 - remainder[idx];
        }
    }
    Ok(SoftRender {
        image: SilhouetteImage {
            width: w,
            height: h,
            occupancy,
        },
        settings: *settings,
        projected,
        faces: mesh_in_camera.faces.clone(),
        tris,
        remainder,
        deep,
    })
}

/// Inner depths, as fractions of the margin, at which coverage is counted.
const DEPTH_LEVELS: [f64; 6] = [0.0, 0.125, 0.25, 0.5, 0.75, 1.0];

/// Exponent `p` of the inside soft minimum.
const SOFT_MIN_POWER: i32 = 6;

/// Edge-line offset that guarantees a soft-min distance of at least 1: with
/// all three lines at `t` or more the distance is at least `t * 3^(-1/p)`.
fn soft_min_offset() -> f64 {
    3f64.powf(1.0 / SOFT_MIN_POWER as f64)
}

/// Pixels whose remainder is provably below `exp(-cutoff)`. Each face that
/// covers a pixel at depth at least `t` adds `softplus(sharpness * t)` to a
/// lower bound on `-log(remainder)`, checked at the depths in `DEPTH_LEVELS`.
/// Depth here is the soft-min distance, so spans are taken at line offsets
/// scaled by `soft_min_offset`.
fn saturated_pixels(tris: &[Option<Tri>], w: u32, h: u32, settings: &RenderSettings) -> Vec<bool> {
    let m = settings.margin();
    let offset = soft_min_offset();
    let mut prev = 0.0;
    let levels: Vec<(f64, f64)> = DEPTH_LEVELS
        .iter()
        .map(|f| {
            let sp = -log_one_minus_sigmoid(settings.sharpness * f * m);
            let inc = sp - prev;
            prev = sp;
            (f * m * offset, inc)
        })
        .collect();
    let mut evidence = vec![0.0f64; (w * h) as usize];
    for tri in tris.iter().flatten() {
        let Some((j0, j1)) = tri.rows(0.0, h) else { continue };
        for j in j0..=j1 {
            let row = (j * w) as usize;
            for &(t, inc) in &levels {
                let Some((i0, i1)) = tri.row_span(j, t, w) else { break };
                for e in &mut evidence[row + i0 as usize..=row + i1 as usize] {
                    *e += inc;
                }
            }
        }
    }
    evidence.iter().map(|&e| e >= settings.cutoff).collect()
}

/// Calls `f(pixel_index, x, y)` for every pixel in the face's outer band that
/// is not saturated by this or any other face.
fn visit_band(tri: &Tri, w: u32, h: u32, m: f64, deep: &[bool], mut f: impl FnMut(usize, f64, f64)) {
    let Some((j0, j1)) = tri.rows(m, h) else { return };
    for j in j0..=j1 {
        let Some((b0, b1)) = tri.row_span(j, -m, w) else { continue };
        let inner = tri.row_span(j, m * soft_min_offset(), w);
        let y = j as f64 + 0.5;
        let row = (j * w) as usize;
        for i in b0..=b1 {
            if let Some((d0, d1)) = inner {
                if i >= d0 && i <= d1 {
                    continue;
                }
            }
            let idx = row + i as usize;
            if deep[idx] {
                continue;
            }
            f(idx, i as f64 + 0.5, y);
        }
    }
}

impl SoftRender {
    /// Gradient of a scalar loss w.r.t. the camera-frame vertex positions,
    /// given the loss gradient w.r.t. each pixel's occupancy.
    pub fn backward(&self, d_occupancy: &[f64]) -> Vec<Vec3> {
        let (w, h) = (self.image.width, self.image.height);
        let m = self.settings.margin();
        let s = self.settings.sharpness;
        let mut grad = vec![Vec3::zeros(); self.projected.len()];
        for (tri, ids) in self.tris.iter().zip(&self.faces) {
            let Some(tri) = tri else { continue };
            let mut moments = Moments::default();
            visit_band(tri, w, h, m, &self.deep, |idx, x, y| {
                let dl = d_occupancy[idx];
                if dl == 0.0 {
                    return;
                }
                let (d, feature) = tri.feature(x, y);
                if d <= -m {
                    return;
                }
                // d occ / d d_f = s * sigmoid(s d_f) * prod_all(1 - sigmoid)
                let coef = dl * s * sigmoid(s * d) * self.remainder[idx];
                tri.accumulate(&mut moments, feature, coef, x, y);
            });
            let g2 = tri.moment_gradient(&moments);
            for k in 0..3 {
                let p = &self.projected[ids[k]];
                let g = &mut grad[ids[k]];
                g.x += g2[k][0] * p.du[0];
                g.y += g2[k][1] * p.dv[0];
                g.z += g2[k][0] * p.du[1] + g2[k][1] * p.dv[1];
            }
        }
        grad
    }
}

/// Binary coverage at pixel centers.
pub fn render_hard(mesh_in_camera: &Mesh, k: &CameraIntrinsics, vp: &Viewport) -> Result<BinaryImage> {
    let projected = project_to_viewport(mesh_in_camera, k, vp)?;
    let mut img = BinaryImage::new(vp.width, vp.height);
    for f in &mesh_in_camera.faces {
        let Some(tri) = Tri::new([projected[f[0]].p, projected[f[1]].p, projected[f[2]].p]) else { continue };
        let Some((j0, j1)) = tri.rows(0.0, vp.height) else { continue };
        for j in j0..=j1 {
            if let Some((i0, i1)) = tri.row_span(j, 0.0, vp.width) {
                for i in i0..=i1 {
                    if tri.inside(i as f64 + 0.5, j as f64 + 0.5) {
                        img.set(i, j, true);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Z-buffers a mesh into `depth` (camera z of the nearest surface, `inf` when empty).
fn rasterize_depth(mesh: &Mesh, k: &CameraIntrinsics, vp: &Viewport, depth: &mut [f64], owner: &mut [u8], tag: u8) -> Result<()> {
    let projected = project_to_viewport(mesh, k, vp)?;
    for f in &mesh.faces {
        let p = [projected[f[0]].p, projected[f[1]].p, projected[f[2]].p];
        let Some(tri) = Tri::new(p) else { continue };
        let inv_z = [1.0 / mesh.vertices[f[0]].z, 1.0 / mesh.vertices[f[1]].z, 1.0 / mesh.vertices[f[2]].z];
        let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        let Some((j0, j1)) = tri.rows(0.0, vp.height) else { continue };
        for j in j0..=j1 {
            let Some((i0, i1)) = tri.row_span(j, 0.0, vp.width) else { continue };
            let y = j as f64 + 0.5;
            for i in i0..=i1 {
                let x = i as f64 + 0.5;
                if !tri.inside(x, y) {
                    continue;
                }
                // barycentrics in screen space; 1/z is affine there
                let w0 = ((p[1][0] - x) * (p[2][1] - y) - (p[1][1] - y) * (p[2][0] - x)) / area2;
                let w1 = ((p[2][0] - x) * (p[0][1] - y) - (p[2][1] - y) * (p[0][0] - x)) / area2;
                let w2 = 1.0 - w0 - w1;
                let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let idx = (j * vp.width + i) as usize;
                if z < depth[idx] {
                    depth[idx] = z;
                    owner[idx] = tag;
                }
            }
        }
    }
    Ok(())
}

/// Object pixels not covered by nearer hand geometry. Ties go to the hand.
pub fn depth_order_visibility(
    object_in_camera: &Mesh,
    hand_in_camera: &Mesh,
    k: &CameraIntrinsics,
    vp: &Viewport,
) -> Result<BinaryImage> {
    let (object, _) = visible_layers(object_in_camera, hand_in_camera, k, vp)?;
    Ok(object)
}

/// Visible object pixels and visible hand pixels of a joint z-buffered render.
pub fn visible_layers(
    object_in_camera: &Mesh,
    hand_in_camera: &Mesh,
    k: &CameraIntrinsics,
    vp: &Viewport,
) -> Result<(BinaryImage, BinaryImage)> {
    let mut depth = vec![f64::INFINITY; vp.len()];
    let mut owner = vec![0u8; vp.len()];
    rasterize_depth(object_in_camera, k, vp, &mut depth, &mut owner, 1)?;
    rasterize_depth(hand_in_camera, k, vp, &mut depth, &mut owner, 2)?;
    let layer = |tag: u8| BinaryImage {
        width: vp.width,
        height: vp.height,
        data: owner.iter().map(|&o| (o == tag) as u8).collect(),
    };
    Ok((layer(1), layer(2)))
}
