//! Image metrics and the same-view / novel-view evaluation protocol.
//!
//! For object `i` with `K` views the input view is `i mod K` and the novel
//! view is the next azimuth, `(i + 1) mod K`. Both protocols render the same
//! prediction and share every metric code path.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::MultiViewSample;
use crate::error::{Error, Result};
use crate::generator::{sample_latent, Generator};
use crate::losses::FeatureExtractor;
use crate::mesh::DeformedMesh;
use crate::renderer::{rasterize, Camera};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const NORM_EPS: f64 = 1e-10;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn metric_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h × w` plane.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let wo = w + 1 - n;
    let ho = h + 1 - n;
    let mut tmp = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            tmp[i * wo + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * tmp[(i + t) * wo + j]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over channels and valid window positions, dynamic range 1.
/// Images are `[C, H, W]` with `H, W ≥ 11`.
pub fn metric_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.dims3();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &a.data()[ch * h * w..(ch + 1) * h * w];
        let y = &b.data()[ch * h * w..(ch + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter(x, h, w, &k);
        let (my, _, _) = filter(y, h, w, &k);
        let (sxx, _, _) = filter(&xx, h, w, &k);
        let (syy, _, _) = filter(&yy, h, w, &k);
        let (sxy, _, _) = filter(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// IoU of masks binarized at 0.5; two empty masks count as identical.
pub fn metric_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn batched(x: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.clone().reshape(&s)
}

/// Mean over layers of the mean over positions of the squared distance
/// between channel-normalized features. Images are `[3, H, W]`.
pub fn metric_feature_distance(a: &Tensor, b: &Tensor, phi: &FeatureExtractor) -> Result<f64> {
    same_shape(a, b)?;
    let fa = phi.features_tensor(&batched(a));
    let fb = phi.features_tensor(&batched(b));
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (_, c, h, w) = x.dims4();
        let hw = h * w;
        let mut s = 0.0;
        for pos in 0..hw {
            let nx = (0..c).map(|k| x.data()[k * hw + pos].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
            let ny = (0..c).map(|k| y.data()[k * hw + pos].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
            s += (0..c)
                .map(|k| (x.data()[k * hw + pos] / nx - y.data()[k * hw + pos] / ny).powi(2))
                .sum::<f64>();
        }
        total += s / hw as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Spatially averaged features of every selected layer, concatenated.
pub fn pooled_features(image: &Tensor, phi: &FeatureExtractor) -> Vec<f64> {
    let mut out = Vec::new();
    for f in phi.features_tensor(&batched(image)) {
        let (_, c, h, w) = f.dims4();
        let hw = (h * w) as f64;
        for k in 0..c {
            out.push(f.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / hw);
        }
    }
    out
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    let d = set.first().map(Vec::len).unwrap_or(0);
    if n == 0 || d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("feature sets must be nonempty with equal dimensions".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mean = x.row_mean().transpose();
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        cov = centered.transpose() * &centered / (n as f64 - 1.0);
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fit to two feature sets:
/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`. The trace of the product root
/// is taken as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`, which has the same spectrum.
pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(set_a)?;
    let (mb, cb) = gaussian_fit(set_b)?;
    if ma.len() != mb.len() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", ma.len(), mb.len())));
    }
    let ra = sym_sqrt(&ca);
    let mut inner = &ra * &cb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_root = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>();
    let fd = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_root;
    Ok(fd.max(0.0))
}

/// Fréchet distance over pooled random-feature statistics of two image sets.
/// A proxy, not comparable with Inception-based FID numbers.
pub fn metric_proxy_fd(set_a: &[Tensor], set_b: &[Tensor], phi: &FeatureExtractor) -> Result<f64> {
    let fa: Vec<Vec<f64>> = set_a.iter().map(|t| pooled_features(t, phi)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|t| pooled_features(t, phi)).collect();
    frechet_distance(&fa, &fb)
}

/// Something that turns one input view into a textured mesh.
pub trait Predictor {
    /// `object` is the index in the evaluated set, `image` is `[3, H, W]`.
    fn predict(&self, object: usize, image: &Tensor) -> Result<(DeformedMesh, Tensor)>;
}

/// A generator with a fixed latent code per object.
pub struct GeneratorPredictor<'a> {
    pub generator: &'a Generator,
    pub seed: u64,
}

impl Predictor for GeneratorPredictor<'_> {
    fn predict(&self, object: usize, image: &Tensor) -> Result<(DeformedMesh, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(object as u64);
        let z = sample_latent(1, self.generator.config.latent_dim, &mut rng);
        let mut p = self.generator.predict(&batched(image), &z)?;
        let p = p.remove(0);
        Ok((p.mesh, p.texture))
    }
}

/// Returns stored ground-truth geometry and texture, ignoring the image.
pub struct OraclePredictor {
    pub scenes: Vec<(DeformedMesh, Tensor)>,
}

impl Predictor for OraclePredictor {
    fn predict(&self, object: usize, _image: &Tensor) -> Result<(DeformedMesh, Tensor)> {
        self.scenes
            .get(object)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no oracle scene for object {object}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub mse: f64,
    pub ssim: f64,
    pub iou: f64,
    pub feature_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub mse: f64,
    pub ssim: f64,
    pub iou: f64,
    pub feature_distance: f64,
    /// Fréchet distance over random conv features; not an Inception FID.
    pub proxy_frechet_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub id: String,
    pub input_view: usize,
    pub novel_view: usize,
    pub same_view: ViewMetrics,
    pub novel: ViewMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub same_view: ProtocolMetrics,
    pub novel_view: ProtocolMetrics,
    pub objects: Vec<ObjectMetrics>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Input and novel view of object `i` under the fixed protocol.
pub fn protocol_views(object: usize, n_views: usize) -> (usize, usize) {
    (object % n_views, (object + 1) % n_views)
}

fn view_metrics(
    mesh: &DeformedMesh,
    texture: &Tensor,
    cam: &Camera,
    gt_image: &Tensor,
    gt_mask: &Tensor,
    sigma: f64,
    phi: &FeatureExtractor,
) -> Result<(ViewMetrics, Tensor)> {
    let r = rasterize(mesh, texture, cam, sigma)?;
    // Ground-truth masks are hard coverage, so the prediction is scored the same way.
    let m = ViewMetrics {
        mse: metric_mse(&r.image, gt_image)?,
        ssim: metric_ssim(&r.image, gt_image)?,
        iou: metric_iou(&r.hard_coverage(), gt_mask)?,
        feature_distance: metric_feature_distance(&r.image, gt_image, phi)?,
    };
    Ok((m, r.image))
}

fn aggregate(rows: &[&ViewMetrics], rendered: &[Tensor], gt: &[Tensor], phi: &FeatureExtractor) -> Result<ProtocolMetrics> {
    let n = rows.len() as f64;
    let mean = |f: fn(&ViewMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    Ok(ProtocolMetrics {
        mse: mean(|r| r.mse),
        ssim: mean(|r| r.ssim),
        iou: mean(|r| r.iou),
        feature_distance: mean(|r| r.feature_distance),
        proxy_frechet_distance: metric_proxy_fd(rendered, gt, phi)?,
    })
}

/// Predict from the input view of each object, render at the input and the
/// novel view, and aggregate.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &[MultiViewSample],
    phi: &FeatureExtractor,
    sigma: f64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut objects = Vec::with_capacity(data.len());
    let (mut same_r, mut same_gt, mut novel_r, mut novel_gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, s) in data.iter().enumerate() {
        if s.n_views() < 2 {
            return Err(Error::Dataset(format!("{}: novel-view evaluation needs 2 views", s.id)));
        }
        let (v1, v2) = protocol_views(i, s.n_views());
        let (mesh, texture) = predictor.predict(i, &s.images[v1])?;
        let (sm, si) = view_metrics(&mesh, &texture, &s.cameras[v1], &s.images[v1], &s.silhouettes[v1], sigma, phi)?;
        let (nm, ni) = view_metrics(&mesh, &texture, &s.cameras[v2], &s.images[v2], &s.silhouettes[v2], sigma, phi)?;
        same_r.push(si);
        same_gt.push(s.images[v1].clone());
        novel_r.push(ni);
        novel_gt.push(s.images[v2].clone());
        objects.push(ObjectMetrics {
            id: s.id.clone(),
            input_view: v1,
            novel_view: v2,
            same_view: sm,
            novel: nm,
        });
    }
    let same: Vec<&ViewMetrics> = objects.iter().map(|o| &o.same_view).collect();
    let novel: Vec<&ViewMetrics> = objects.iter().map(|o| &o.novel).collect();
    Ok(EvalReport {
        same_view: aggregate(&same, &same_r, &same_gt, phi)?,
        novel_view: aggregate(&novel, &novel_r, &novel_gt, phi)?,
        objects,
        config,
    })
}
