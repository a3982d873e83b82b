//! Differentiable perspective rasterizer.
//!
//! Color comes from a hard z-buffer: each covered pixel takes the nearest face,
//! interpolates texture coordinates with screen-space barycentrics and samples
//! the texture bilinearly. The silhouette is soft: every face contributes
//! `p = sigmoid(±d² / σ)` from the squared NDC distance between the pixel center
//! and the face boundary (positive inside), aggregated as `1 − Π(1 − p)`.
//!
//! Gradients reach vertices through the soft silhouette and through the
//! barycentric weights of covered pixels, and reach the texture through the
//! bilinear lookup. Depth is not differentiated.

use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::mesh::{DeformedMesh, TemplateMesh};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 1e-4;
/// Camera-space depth below which a vertex counts as clipped.
pub const NEAR_PLANE: f64 = 1e-2;
/// Depths closer than this are ties, resolved by lower face index.
pub const DEPTH_TIE_EPS: f64 = 1e-7;
pub const NO_FACE: u32 = u32::MAX;
/// Faces contribute nothing once `d²/σ` exceeds this (sigmoid(−40) ≈ 4e-18).
const SOFT_CUTOFF: f64 = 40.0;

/// Orbit camera looking at the origin with `+y` up. Angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    64
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Camera-space frame: `right`, `up`, `forward` and the eye position.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub eye: V3,
    pub right: V3,
    pub up: V3,
    pub forward: V3,
    /// `tan(fov / 2)`.
    pub tan_half_fov: f64,
}

/// A vertex in camera and screen space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// Horizontal pixel coordinate (pixel centers at `j + 0.5`).
    pub x: f64,
    /// Vertical pixel coordinate, growing downwards.
    pub y: f64,
    /// Camera-space depth along the view direction.
    pub z: f64,
    pub clipped: bool,
}

impl Camera {
    pub fn new(azimuth: f64, elevation: f64, distance: f64, fov: f64, image_size: usize) -> Result<Self> {
        let c = Camera {
            azimuth,
            elevation,
            distance,
            fov,
            image_size,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0 && self.distance.is_finite()) {
            return Err(Error::InvalidArgument(format!("camera distance {} must be > 0", self.distance)));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::InvalidArgument(format!("camera fov {} must be in (0, 180)", self.fov)));
        }
        if !(self.elevation.abs() < 90.0) || !self.azimuth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "camera elevation {} must be in (-90, 90)",
                self.elevation
            )));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> CameraFrame {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        let eye = [
            self.distance * el.cos() * az.sin(),
            self.distance * el.sin(),
            self.distance * el.cos() * az.cos(),
        ];
        let forward = normalize([-eye[0], -eye[1], -eye[2]]);
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        CameraFrame {
            eye,
            right,
            up,
            forward,
            tan_half_fov: (0.5 * self.fov.to_radians()).tan(),
        }
    }
}

impl CameraFrame {
    pub fn to_camera(&self, p: V3) -> V3 {
        let d = sub(p, self.eye);
        [dot(self.right, d), dot(self.up, d), dot(self.forward, d)]
    }

    /// Normalized device coordinates (`x` right, `y` up, both in `[-1, 1]`
    /// across the frame) of a camera-space point.
    pub fn ndc(&self, c: V3) -> [f64; 2] {
        [c[0] / (c[2] * self.tan_half_fov), c[1] / (c[2] * self.tan_half_fov)]
    }

    /// Jacobian rows `∂ndc_x/∂p`, `∂ndc_y/∂p` with respect to the world point.
    fn ndc_jacobian(&self, c: V3) -> [V3; 2] {
        let k = 1.0 / (c[2] * self.tan_half_fov);
        let mut jx = [0.0; 3];
        let mut jy = [0.0; 3];
        for i in 0..3 {
            jx[i] = k * (self.right[i] - c[0] / c[2] * self.forward[i]);
            jy[i] = k * (self.up[i] - c[1] / c[2] * self.forward[i]);
        }
        [jx, jy]
    }
}

/// Pixel coordinates from NDC on an `size×size` frame.
pub fn ndc_to_pixel(ndc: [f64; 2], size: usize) -> [f64; 2] {
    let s = size as f64;
    [(ndc[0] + 1.0) * 0.5 * s, (1.0 - ndc[1]) * 0.5 * s]
}

fn pixel_center_ndc(i: usize, j: usize, size: usize) -> [f64; 2] {
    let s = size as f64;
    [2.0 * (j as f64 + 0.5) / s - 1.0, 1.0 - 2.0 * (i as f64 + 0.5) / s]
}

pub fn project_points(points: &[V3], cam: &Camera) -> Vec<Projected> {
    let frame = cam.frame();
    points
        .iter()
        .map(|&p| {
            let c = frame.to_camera(p);
            if c[2] < NEAR_PLANE {
                return Projected {
                    x: f64::NAN,
                    y: f64::NAN,
                    z: c[2],
                    clipped: true,
                };
            }
            let px = ndc_to_pixel(frame.ndc(c), cam.image_size);
            Projected {
                x: px[0],
                y: px[1],
                z: c[2],
                clipped: false,
            }
        })
        .collect()
}

pub fn project_vertices(mesh: &DeformedMesh, cam: &Camera) -> Vec<Projected> {
    project_points(&mesh.vertices, cam)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `[3, H, W]`, zero where no face covers the pixel center.
    pub image: Tensor,
    /// `[1, H, W]` soft silhouette in `[0, 1]`.
    pub silhouette: Tensor,
    /// Camera-space depth per pixel (row-major), `+inf` for background.
    pub depth: Vec<f64>,
    /// Winning face per pixel, [`NO_FACE`] for background.
    pub face_ids: Vec<u32>,
    pub size: usize,
}

impl RenderOutput {
    fn background(size: usize) -> Self {
        RenderOutput {
            image: Tensor::zeros(&[3, size, size]),
            silhouette: Tensor::zeros(&[1, size, size]),
            depth: vec![f64::INFINITY; size * size],
            face_ids: vec![NO_FACE; size * size],
            size,
        }
    }

    /// `[1, H, W]` binary hard coverage.
    pub fn hard_coverage(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.size, self.size],
            self.face_ids
                .iter()
                .map(|&f| if f == NO_FACE { 0.0 } else { 1.0 })
                .collect(),
        )
    }

    pub fn covered_pixels(&self) -> usize {
        self.face_ids.iter().filter(|&&f| f != NO_FACE).count()
    }
}

/// Bilinear texture taps with horizontal wrap and vertical clamp.
/// Returns `(flat indices, weights, ∂/∂u and ∂/∂v weight derivatives)`.
fn texture_taps(uv: [f64; 2], h: usize, w: usize) -> ([usize; 4], [f64; 4], [f64; 4], [f64; 4]) {
    let x = uv[0] * w as f64 - 0.5;
    let yr = uv[1] * h as f64 - 0.5;
    let y = yr.clamp(0.0, (h - 1) as f64);
    let v_active = if yr > 0.0 && yr < (h - 1) as f64 { 1.0 } else { 0.0 };
    let xf = x.floor();
    let tx = x - xf;
    let x0 = (xf as i64).rem_euclid(w as i64) as usize;
    let x1 = (x0 + 1) % w;
    let y0 = (y.floor() as usize).min(h - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ty = y - y0 as f64;
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let wts = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
    let (su, sv) = (w as f64, h as f64 * v_active);
    let du = [-(1.0 - ty) * su, (1.0 - ty) * su, -ty * su, ty * su];
    let dv = [-(1.0 - tx) * sv, -tx * sv, (1.0 - tx) * sv, tx * sv];
    (idx, wts, du, dv)
}

/// Bilinear lookup into a `[3, H, W]` texture (u wraps, v clamps).
pub fn sample_texture(texture: &Tensor, uv: [f64; 2]) -> [f64; 3] {
    let (_, h, w) = texture.dims3();
    let (idx, wts, _, _) = texture_taps(uv, h, w);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let plane = &texture.data()[c * h * w..(c + 1) * h * w];
        *o = idx.iter().zip(&wts).map(|(&i, &wt)| wt * plane[i]).sum();
    }
    out
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Screen-space barycentrics of `p` in triangle `t`, or `None` if degenerate.
pub fn barycentric(t: [[f64; 2]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let area = cross2(sub2(t[1], t[0]), sub2(t[2], t[0]));
    if area.abs() < 1e-14 {
        return None;
    }
    Some([
        cross2(sub2(t[1], p), sub2(t[2], p)) / area,
        cross2(sub2(t[2], p), sub2(t[0], p)) / area,
        cross2(sub2(t[0], p), sub2(t[1], p)) / area,
    ])
}

/// Back-propagate `∂L/∂w` through barycentric weights to triangle corners.
fn barycentric_backward(t: [[f64; 2]; 3], p: [f64; 2], w: [f64; 3], gw: [f64; 3]) -> [[f64; 2]; 3] {
    let area = cross2(sub2(t[1], t[0]), sub2(t[2], t[0]));
    // dA/dt_k
    let (a, b, c) = (t[0], t[1], t[2]);
    let da_b = [(c[1] - a[1]), -(c[0] - a[0])];
    let da_c = [-(b[1] - a[1]), (b[0] - a[0])];
    let da_a = [-(da_b[0] + da_c[0]), -(da_b[1] + da_c[1])];
    let da = [da_a, da_b, da_c];
    let mut out = [[0.0; 2]; 3];
    let gsum: f64 = (0..3).map(|k| gw[k] * w[k]).sum();
    for (x, o) in out.iter_mut().enumerate() {
        o[0] -= gsum * da[x][0] / area;
        o[1] -= gsum * da[x][1] / area;
    }
    // E_k = cross(P − p, Q − p), (P, Q) = (t[k+1], t[k+2]).
    for k in 0..3 {
        let (pi, qi) = ((k + 1) % 3, (k + 2) % 3);
        let (pp, qq) = (sub2(t[pi], p), sub2(t[qi], p));
        let de_p = [qq[1], -qq[0]];
        let de_q = [-pp[1], pp[0]];
        let s = gw[k] / area;
        out[pi][0] += s * de_p[0];
        out[pi][1] += s * de_p[1];
        out[qi][0] += s * de_q[0];
        out[qi][1] += s * de_q[1];
    }
    out
}

/// Squared distance from `p` to the boundary of triangle `t`; also returns the
/// nearest edge and the clamped segment parameter.
fn boundary_distance2(t: [[f64; 2]; 3], p: [f64; 2]) -> (f64, usize, f64) {
    let mut best = (f64::INFINITY, 0, 0.0);
    for e in 0..3 {
        let (a, b) = (t[e], t[(e + 1) % 3]);
        let ab = sub2(b, a);
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let s = if len2 > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + s * ab[0], a[1] + s * ab[1]];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d2 < best.0 {
            best = (d2, e, s);
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct SoftContribution {
    pixel: u32,
    face: u32,
    p: f64,
    sign: f64,
    edge: u8,
    s: f64,
}

#[derive(Clone, Copy, Debug)]
struct HardSample {
    face: u32,
    w: [f64; 3],
    uv: [f64; 2],
}

/// Forward state needed by [`RasterCache::backward`].
pub struct RasterCache {
    size: usize,
    sigma: f64,
    frame: CameraFrame,
    cam_coords: Vec<V3>,
    ndc: Vec<[f64; 2]>,
    topology: Arc<TemplateMesh>,
    texture: Option<Rc<Tensor>>,
    hard: Vec<HardSample>,
    soft: Vec<SoftContribution>,
    /// Per pixel: product of nonzero `(1 − p)` factors and count of zero factors.
    keep: Vec<(f64, u32)>,
}

/// Full forward pass; `texture` may be `None` for silhouette-only rendering.
pub fn rasterize_with_cache(
    vertices: &[V3],
    topology: &Arc<TemplateMesh>,
    texture: Option<Rc<Tensor>>,
    cam: &Camera,
    sigma: f64,
) -> Result<(RenderOutput, RasterCache)> {
    cam.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    if vertices.len() != topology.vertices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vertices for a topology with {}",
            vertices.len(),
            topology.vertices.len()
        )));
    }
    if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("mesh vertices".into()));
    }
    if let Some(t) = &texture {
        if t.shape().len() != 3 || t.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!("texture must be [3, H, W], got {:?}", t.shape())));
        }
    }
    let size = cam.image_size;
    let npix = size * size;
    let frame = cam.frame();
    let cam_coords: Vec<V3> = vertices.iter().map(|&p| frame.to_camera(p)).collect();
    let ndc: Vec<[f64; 2]> = cam_coords
        .iter()
        .map(|&c| if c[2] < NEAR_PLANE { [f64::NAN; 2] } else { frame.ndc(c) })
        .collect();

    let mut out = RenderOutput::background(size);
    let mut hard = vec![
        HardSample {
            face: NO_FACE,
            w: [0.0; 3],
            uv: [0.0; 2],
        };
        npix
    ];
    let mut soft = Vec::new();
    let mut keep = vec![(1.0f64, 0u32); npix];
    let margin = (sigma * SOFT_CUTOFF).sqrt();
    let pix = 2.0 / size as f64;

    for (fi, f) in topology.faces.iter().enumerate() {
        if f.iter().any(|&v| cam_coords[v][2] < NEAR_PLANE) {
            continue;
        }
        let tri = [ndc[f[0]], ndc[f[1]], ndc[f[2]]];
        let area = cross2(sub2(tri[1], tri[0]), sub2(tri[2], tri[0]));
        if area.abs() < 1e-14 {
            continue;
        }
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &tri {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        xmin -= margin;
        xmax += margin;
        ymin -= margin;
        ymax += margin;
        // ndc x = 2(j+0.5)/S − 1  →  j = (x+1)/pix − 0.5
        let j0 = (((xmin + 1.0) / pix - 0.5).ceil().max(0.0)) as usize;
        let j1f = ((xmax + 1.0) / pix - 0.5).floor();
        let i0 = (((1.0 - ymax) / pix - 0.5).ceil().max(0.0)) as usize;
        let i1f = ((1.0 - ymin) / pix - 0.5).floor();
        if j1f < 0.0 || i1f < 0.0 {
            continue;
        }
        let j1 = (j1f as usize).min(size - 1);
        let i1 = (i1f as usize).min(size - 1);
        if j0 > j1 || i0 > i1 {
            continue;
        }
        let zf = [cam_coords[f[0]][2], cam_coords[f[1]][2], cam_coords[f[2]][2]];
        for i in i0..=i1 {
            for j in j0..=j1 {
                let p = pixel_center_ndc(i, j, size);
                let pi = i * size + j;
                let w = barycentric(tri, p).expect("non-degenerate face");
                let inside = w.iter().all(|&x| x >= 0.0);
                if inside {
                    let z = w[0] * zf[0] + w[1] * zf[1] + w[2] * zf[2];
                    let cur = out.depth[pi];
                    let cur_face = out.face_ids[pi];
                    let wins = z < cur - DEPTH_TIE_EPS
                        || ((z - cur).abs() <= DEPTH_TIE_EPS && (fi as u32) < cur_face);
                    if z > 0.0 && wins {
                        out.depth[pi] = z;
                        out.face_ids[pi] = fi as u32;
                        hard[pi].face = fi as u32;
                        hard[pi].w = w;
                    }
                }
                let (d2, edge, s) = boundary_distance2(tri, p);
                let sign = if inside { 1.0 } else { -1.0 };
                let x = sign * d2 / sigma;
                if x < -SOFT_CUTOFF {
                    continue;
                }
                let pf = sigmoid(x);
                let k = 1.0 - pf;
                if k == 0.0 {
                    keep[pi].1 += 1;
                } else {
                    keep[pi].0 *= k;
                }
                soft.push(SoftContribution {
                    pixel: pi as u32,
                    face: fi as u32,
                    p: pf,
                    sign,
                    edge: edge as u8,
                    s,
                });
            }
        }
    }

    for (pi, &(prod, zeros)) in keep.iter().enumerate() {
        out.silhouette.data_mut()[pi] = if zeros > 0 { 1.0 } else { 1.0 - prod };
    }
    let topo = topology.clone();
    if let Some(tex) = &texture {
        let (_, th, tw) = tex.dims3();
        let plane = th * tw;
        for pi in 0..npix {
            let hs = &mut hard[pi];
            if hs.face == NO_FACE {
                continue;
            }
            let fu = topo.face_uvs[hs.face as usize];
            let mut uv = [0.0; 2];
            for k in 0..3 {
                let t = topo.uv_coords[fu[k]];
                uv[0] += hs.w[k] * t[0];
                uv[1] += hs.w[k] * t[1];
            }
            hs.uv = uv;
            let (idx, wts, _, _) = texture_taps(uv, th, tw);
            for c in 0..3 {
                let src = &tex.data()[c * plane..(c + 1) * plane];
                out.image.data_mut()[c * npix + pi] =
                    idx.iter().zip(&wts).map(|(&ix, &wt)| wt * src[ix]).sum();
            }
        }
    }
    let cache = RasterCache {
        size,
        sigma,
        frame,
        cam_coords,
        ndc,
        topology: topo,
        texture,
        hard,
        soft,
        keep,
    };
    Ok((out, cache))
}

impl RasterCache {
    /// Gradients of a loss with respect to world-space vertices and texture,
    /// given its gradients with respect to the image `[3,H,W]` and the
    /// silhouette `[1,H,W]`.
    pub fn backward(&self, grad_image: Option<&Tensor>, grad_sil: Option<&Tensor>) -> (Vec<V3>, Option<Tensor>) {
        let npix = self.size * self.size;
        let nv = self.ndc.len();
        let mut g_ndc = vec![[0.0f64; 2]; nv];
        let topo = &self.topology;

        if let Some(gs) = grad_sil {
            for c in &self.soft {
                let pi = c.pixel as usize;
                let g = gs.data()[pi];
                if g == 0.0 {
                    continue;
                }
                let (prod, zeros) = self.keep[pi];
                let k = 1.0 - c.p;
                // ∂S/∂p_f = Π_{g≠f} (1 − p_g)
                let others = if k == 0.0 {
                    if zeros == 1 {
                        prod
                    } else {
                        0.0
                    }
                } else if zeros == 0 {
                    prod / k
                } else {
                    0.0
                };
                if others == 0.0 {
                    continue;
                }
                let dx = g * others * c.p * (1.0 - c.p);
                if dx == 0.0 {
                    continue;
                }
                // x = sign·d²/σ; d² = |p − q|², q = a + s(b − a)
                let f = topo.faces[c.face as usize];
                let e = c.edge as usize;
                let (ia, ib) = (f[e], f[(e + 1) % 3]);
                let (a, b) = (self.ndc[ia], self.ndc[ib]);
                let i = pi / self.size;
                let j = pi % self.size;
                let p = pixel_center_ndc(i, j, self.size);
                let q = [a[0] + c.s * (b[0] - a[0]), a[1] + c.s * (b[1] - a[1])];
                let coef = dx * c.sign / self.sigma * -2.0;
                for d in 0..2 {
                    let r = p[d] - q[d];
                    g_ndc[ia][d] += coef * r * (1.0 - c.s);
                    g_ndc[ib][d] += coef * r * c.s;
                }
            }
        }

        let mut g_tex = None;
        if let (Some(gi), Some(tex)) = (grad_image, &self.texture) {
            let (_, th, tw) = tex.dims3();
            let plane = th * tw;
            let mut gt = Tensor::zeros(tex.shape());
            for pi in 0..npix {
                let hs = &self.hard[pi];
                if hs.face == NO_FACE {
                    continue;
                }
                let gc = [gi.data()[pi], gi.data()[npix + pi], gi.data()[2 * npix + pi]];
                if gc == [0.0; 3] {
                    continue;
                }
                let (idx, wts, du, dv) = texture_taps(hs.uv, th, tw);
                let mut g_uv = [0.0; 2];
                for c in 0..3 {
                    let src = &tex.data()[c * plane..(c + 1) * plane];
                    let dst = &mut gt.data_mut()[c * plane..(c + 1) * plane];
                    for k in 0..4 {
                        dst[idx[k]] += gc[c] * wts[k];
                        g_uv[0] += gc[c] * du[k] * src[idx[k]];
                        g_uv[1] += gc[c] * dv[k] * src[idx[k]];
                    }
                }
                let f = topo.faces[hs.face as usize];
                let fu = topo.face_uvs[hs.face as usize];
                let mut gw = [0.0; 3];
                for k in 0..3 {
                    let t = topo.uv_coords[fu[k]];
                    gw[k] = g_uv[0] * t[0] + g_uv[1] * t[1];
                }
                let tri = [self.ndc[f[0]], self.ndc[f[1]], self.ndc[f[2]]];
                let p = pixel_center_ndc(pi / self.size, pi % self.size, self.size);
                let gt_tri = barycentric_backward(tri, p, hs.w, gw);
                for k in 0..3 {
                    g_ndc[f[k]][0] += gt_tri[k][0];
                    g_ndc[f[k]][1] += gt_tri[k][1];
                }
            }
            g_tex = Some(gt);
        }

        let g_world = (0..nv)
            .map(|v| {
                let g = g_ndc[v];
                if g == [0.0; 2] || self.cam_coords[v][2] < NEAR_PLANE {
                    return [0.0; 3];
                }
                let [jx, jy] = self.frame.ndc_jacobian(self.cam_coords[v]);
                [
                    g[0] * jx[0] + g[1] * jy[0],
                    g[0] * jx[1] + g[1] * jy[1],
                    g[0] * jx[2] + g[1] * jy[2],
                ]
            })
            .collect();
        (g_world, g_tex)
    }
}

/// Render a textured mesh. `texture` is `[3, H_t, W_t]`.
pub fn rasterize(mesh: &DeformedMesh, texture: &Tensor, cam: &Camera, sigma: f64) -> Result<RenderOutput> {
    Ok(rasterize_with_cache(&mesh.vertices, &mesh.topology, Some(Rc::new(texture.clone())), cam, sigma)?.0)
}

/// Soft silhouette `[1, H, W]` only.
pub fn render_silhouette_only(mesh: &DeformedMesh, cam: &Camera, sigma: f64) -> Result<Tensor> {
    Ok(rasterize_with_cache(&mesh.vertices, &mesh.topology, None, cam, sigma)?.0.silhouette)
}

/// Differentiable renders of one sample.
pub struct RenderVars<'g> {
    /// `[1, 3, H, W]`
    pub image: Var<'g>,
    /// `[1, 1, H, W]`
    pub silhouette: Var<'g>,
    pub output: RenderOutput,
}

/// Record a render on the tape. `vertices` is `[1, 3, V]` (channel-first
/// coordinates), `texture` is `[1, 3, H_t, W_t]`.
pub fn render_var<'g>(
    vertices: Var<'g>,
    texture: Var<'g>,
    topology: &Arc<TemplateMesh>,
    cam: &Camera,
    sigma: f64,
) -> Result<RenderVars<'g>> {
    let vt = vertices.value();
    let shape = vt.shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != 3 {
        return Err(Error::ShapeMismatch(format!("render vertices must be [1, 3, V], got {shape:?}")));
    }
    let nv = shape[2];
    let verts: Vec<V3> = (0..nv)
        .map(|i| [vt.data()[i], vt.data()[nv + i], vt.data()[2 * nv + i]])
        .collect();
    let tv = texture.value();
    let tshape = tv.shape().to_vec();
    if tshape.len() != 4 || tshape[0] != 1 || tshape[1] != 3 {
        return Err(Error::ShapeMismatch(format!("render texture must be [1, 3, H, W], got {tshape:?}")));
    }
    let tex = Rc::new((*tv).clone().reshape(&tshape[1..]));
    let (output, cache) = rasterize_with_cache(&verts, topology, Some(tex), cam, sigma)?;
    let size = output.size;
    let npix = size * size;
    let mut packed = Vec::with_capacity(4 * npix);
    packed.extend_from_slice(output.image.data());
    packed.extend_from_slice(output.silhouette.data());
    let g = vertices.graph();
    let both = g.op(
        Tensor::from_vec(&[1, 4, size, size], packed),
        &[vertices, texture],
        move |grad, need| {
            let gi = Tensor::from_vec(&[3, size, size], grad.data()[..3 * npix].to_vec());
            let gs = Tensor::from_vec(&[1, size, size], grad.data()[3 * npix..].to_vec());
            let (gv, gt) = cache.backward(Some(&gi), Some(&gs));
            let dv = need[0].then(|| {
                let mut d = vec![0.0; 3 * nv];
                for (i, g) in gv.iter().enumerate() {
                    for c in 0..3 {
                        d[c * nv + i] = g[c];
                    }
                }
                Tensor::from_vec(&[1, 3, nv], d)
            });
            let dt = if need[1] { gt.map(|t| t.reshape(&tshape)) } else { None };
            vec![dv, dt]
        },
    );
    Ok(RenderVars {
        image: both.narrow_channels(0, 3),
        silhouette: both.narrow_channels(3, 1),
        output,
    })
}
