//! Finite-difference gradient suites for the renderer, the losses and the mesh
//! deformation path.
//!
//! Each check contracts an output with fixed random weights, differentiates the
//! scalar with the tape and with central differences, and reports
//! `‖g_tape − g_fd‖ / ‖g_fd‖`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{laplacian_term, perceptual_novel_view, perceptual_same_view, silhouette_iou_loss, FeatureExtractor};
use crate::mesh::{build_icosphere, laplacian_loss_of_offsets, TemplateMesh};
use crate::renderer::{render_var, Camera};
use crate::tensor::Tensor;

pub const TEXTURE_TOL: f64 = 1e-3;
pub const SILHOUETTE_TOL: f64 = 1e-2;
pub const SILHOUETTE_STEP: f64 = 1e-3;
pub const SILHOUETTE_SIGMA: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
pub const MESH_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub n_params: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error.is_finite() && self.rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: rel error {:.3e} (tol {:.0e}, {} params)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.rel_error,
            self.tolerance,
            self.n_params
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Renderer,
    Losses,
    Mesh,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renderer" => Ok(Suite::Renderer),
            "losses" => Ok(Suite::Losses),
            "mesh" => Ok(Suite::Mesh),
            _ => Err(Error::InvalidArgument(format!("unknown gradcheck module {s:?}"))),
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Renderer => renderer_suite(),
        Suite::Losses => losses_suite(),
        Suite::Mesh => mesh_suite(),
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Central differences of `f` at `x` for every coordinate.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + step;
        let fp = f(&y)?;
        y[i] = x[i] - step;
        let fm = f(&y)?;
        y[i] = x[i];
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Weighted sum `Σ w ⊙ x` with constant weights.
fn contract<'g>(x: Var<'g>, w: &Tensor) -> Var<'g> {
    x.mul(x.graph().constant(w.clone())).sum()
}

/// Level-2 sphere with smooth random bumps, as `[1, 3, V]` coordinates.
fn bumpy_sphere(rng: &mut ChaCha8Rng) -> Result<(Arc<TemplateMesh>, Tensor)> {
    let t = Arc::new(build_icosphere(2)?);
    let nv = t.vertices.len();
    let phase: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut c = vec![0.0; 3 * nv];
    for (i, v) in t.vertices.iter().enumerate() {
        let r = 0.8 + 0.1 * (3.0 * v[0] + 6.0 * phase[0]).sin() * (2.0 * v[1] + 6.0 * phase[1]).cos();
        for d in 0..3 {
            c[d * nv + i] = v[d] * r * (1.0 + 0.2 * phase[2] * if d == 1 { 1.0 } else { 0.0 });
        }
    }
    Ok((t, Tensor::from_vec(&[1, 3, nv], c)))
}

fn grad_of(
    x: &Tensor,
    f: impl for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
) -> Result<(f64, Vec<f64>)> {
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let loss = f(v)?;
    let grads = g.backward(loss);
    Ok((loss.item(), grads.get_or_zeros(v).into_data()))
}

fn value_of(x: &[f64], shape: &[usize], f: &dyn for<'g> Fn(Var<'g>) -> Result<Var<'g>>) -> Result<f64> {
    let g = Graph::new();
    Ok(f(g.constant(Tensor::from_vec(shape, x.to_vec())))?.item())
}

fn check(
    name: &str,
    x: &Tensor,
    step: f64,
    tolerance: f64,
    f: &dyn for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
) -> Result<CheckResult> {
    let (_, analytic) = grad_of(x, f)?;
    let numeric = central_differences(|y| value_of(y, x.shape(), f), x.data(), step)?;
    Ok(CheckResult {
        name: name.to_string(),
        rel_error: relative_error(&analytic, &numeric),
        tolerance,
        n_params: x.len(),
    })
}

/// Texture gradients of the image and vertex gradients of the soft silhouette.
pub fn renderer_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (topo, verts) = bumpy_sphere(&mut rng)?;
    let mut out = Vec::new();
    for (size, az) in [(16usize, 30.0), (32, -75.0)] {
        let cam = Camera::new(az, 15.0, 3.0, 50.0, size)?;
        let tex = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let wi = uniform(&[1, 3, size, size], -1.0, 1.0, &mut rng);
        let ws = uniform(&[1, 1, size, size], -1.0, 1.0, &mut rng);
        let (t2, v2, c2) = (topo.clone(), verts.clone(), cam.clone());
        out.push(check(
            &format!("renderer texture {size}x{size}"),
            &tex,
            1e-4,
            TEXTURE_TOL,
            &move |t| {
                let v = t.graph().constant(v2.clone());
                Ok(contract(render_var(v, t, &t2, &c2, SILHOUETTE_SIGMA)?.image, &wi))
            },
        )?);
        let (t3, tx3) = (topo.clone(), tex.clone());
        out.push(check(
            &format!("renderer silhouette vertices {size}x{size}"),
            &verts,
            SILHOUETTE_STEP,
            SILHOUETTE_TOL,
            &move |v| {
                let t = v.graph().constant(tx3.clone());
                Ok(contract(render_var(v, t, &t3, &cam, SILHOUETTE_SIGMA)?.silhouette, &ws))
            },
        )?);
    }
    Ok(out)
}

/// Gradients of the novel-view perceptual, silhouette IoU and same-view
/// perceptual losses with respect to their rendered inputs.
pub fn losses_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let phi = Rc::new(FeatureExtractor::default_random(5));
    let s = 16;
    let gt = uniform(&[2, 3, s, s], 0.0, 1.0, &mut rng);
    let gt_sil = uniform(&[2, 1, s, s], 0.0, 1.0, &mut rng);
    let rendered = uniform(&[2, 3, s, s], 0.0, 1.0, &mut rng);
    let sil = uniform(&[2, 1, s, s], 0.05, 0.95, &mut rng);
    let mut out = Vec::new();
    {
        let (gt, gs, phi) = (gt.clone(), gt_sil.clone(), phi.clone());
        out.push(check("novel-view perceptual", &rendered, 1e-5, LOSS_TOL, &move |r| {
            let g = r.graph();
            Ok(perceptual_novel_view(g.constant(gt.clone()), r, g.constant(gs.clone()), &phi))
        })?);
    }
    {
        let gs = gt_sil.clone();
        out.push(check("silhouette IoU", &sil, 1e-6, LOSS_TOL, &move |x| {
            Ok(silhouette_iou_loss(x.graph().constant(gs.clone()), x))
        })?);
    }
    {
        let (gt, sl, phi) = (gt.clone(), sil.clone(), phi.clone());
        out.push(check("same-view perceptual (image)", &rendered, 1e-5, LOSS_TOL, &move |r| {
            let g = r.graph();
            Ok(perceptual_same_view(g.constant(gt.clone()), r, g.constant(sl.clone()), &phi))
        })?);
    }
    {
        let (gt, rd, phi) = (gt.clone(), rendered.clone(), phi.clone());
        out.push(check("same-view perceptual (silhouette)", &sil, 1e-5, LOSS_TOL, &move |m| {
            let g = m.graph();
            Ok(perceptual_same_view(g.constant(gt.clone()), g.constant(rd.clone()), m, &phi))
        })?);
    }
    Ok(out)
}

/// Laplacian term and deformation-map sampling against plain-f64 references.
pub fn mesh_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let t = Arc::new(build_icosphere(2)?);
    let nv = t.vertices.len();
    let lap = Rc::new(t.laplacian_matrix());
    let offsets = uniform(&[1, 3, nv], -0.1, 0.1, &mut rng);
    let mut out = Vec::new();

    // Tape value and gradient against the reference implementation by differences.
    let (value, analytic) = grad_of(&offsets, |x| Ok(laplacian_term(x, &lap)))?;
    let reference = |x: &[f64]| -> Result<f64> {
        let o: Vec<[f64; 3]> = (0..nv).map(|i| [x[i], x[nv + i], x[2 * nv + i]]).collect();
        Ok(laplacian_loss_of_offsets(&o, &t))
    };
    let numeric = central_differences(reference, offsets.data(), 1e-6)?;
    let rv = reference(offsets.data())?;
    out.push(CheckResult {
        name: "laplacian value".into(),
        rel_error: (value - rv).abs() / rv.abs(),
        tolerance: MESH_TOL,
        n_params: 1,
    });
    out.push(CheckResult {
        name: "laplacian gradient".into(),
        rel_error: relative_error(&analytic, &numeric),
        tolerance: LOSS_TOL,
        n_params: offsets.len(),
    });

    let d = 8;
    let sampling = Rc::new(t.sampling_matrix(d, d));
    let map = uniform(&[1, 3, d * d], -0.1, 0.1, &mut rng);
    let w = uniform(&[1, 3, nv], -1.0, 1.0, &mut rng);
    let base = {
        let mut c = vec![0.0; 3 * nv];
        for (i, v) in t.vertices.iter().enumerate() {
            for k in 0..3 {
                c[k * nv + i] = v[k];
            }
        }
        Tensor::from_vec(&[1, 3, nv], c)
    };
    out.push(check("deformation sampling", &map, 1e-6, LOSS_TOL, &move |m| {
        let g = m.graph();
        let verts = g.constant(base.clone()).add(m.spmm(sampling.clone()));
        Ok(contract(verts, &w).add(laplacian_term(m.spmm(sampling.clone()), &lap)))
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("renderer".parse::<Suite>().unwrap(), Suite::Renderer);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.1], &[1.0]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mesh_suite_passes() {
        for r in mesh_suite().unwrap() {
            assert!(r.passed(), "{r}");
        }
    }
}
