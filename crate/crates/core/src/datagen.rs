//! Procedural multi-view datasets with GAN-style defects, and the on-disk
//! dataset reader and writer.
//!
//! Scenes are icospheres pushed along a smooth radial field built from
//! low-degree polynomials on the sphere (the span of spherical harmonics up to
//! that degree), restricted to terms even in `z` so every object is mirror
//! symmetric about `z = 0`. Textures are smooth procedural patterns of the
//! surface direction.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<id>/view_<k>.png
//! <root>/<id>/view_<k>_mask.png
//! <root>/<id>/cameras.json
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::mesh::{build_icosphere, DeformedMesh};
use crate::renderer::{self, Camera};
use crate::tensor::Tensor;

/// Parameters of one procedural object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub subdivision: u32,
    /// Radial perturbation as a fraction of the radius (at most 0.3).
    pub amplitude: f64,
    /// Highest polynomial degree of the radial field.
    pub degree: u32,
    /// Overall size jitter: scale drawn from `[1 − s, 1 + s]`.
    pub scale_jitter: f64,
    /// Per-axis stretch jitter: axis factors drawn from `[1 − e, 1 + e]`.
    pub elongation: f64,
    /// Spatial frequency of the stripe pattern.
    pub texture_frequency: f64,
    pub texture_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            subdivision: 4,
            amplitude: 0.2,
            degree: 3,
            scale_jitter: 0.25,
            elongation: 0.3,
            texture_frequency: 3.0,
            texture_size: 64,
        }
    }
}

impl SceneSpec {
    /// No perturbation at all: a unit icosphere.
    pub fn unit_sphere(seed: u64) -> Self {
        SceneSpec {
            seed,
            amplitude: 0.0,
            scale_jitter: 0.0,
            elongation: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=0.3).contains(&self.amplitude)
            && (0.0..0.9).contains(&self.scale_jitter)
            && (0.0..0.9).contains(&self.elongation)
            && self.texture_frequency >= 0.0
            && self.texture_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scene spec {self:?}")))
        }
    }
}

/// Exponents `(a, b, c)` of monomials `x^a y^b z^c`, `c` even, `1 ≤ a+b+c ≤ degree`.
fn radial_basis(degree: u32) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for total in 1..=degree as i32 {
        for a in 0..=total {
            for b in 0..=(total - a) {
                let c = total - a - b;
                if c % 2 == 0 {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Procedural color at unit direction `d`; even in `d.z`.
#[derive(Clone, Debug)]
struct Palette {
    a: [f64; 3],
    b: [f64; 3],
    axis: [f64; 3],
    phase: f64,
    blob: [f64; 3],
    freq: f64,
}

impl Palette {
    fn color(&self, d: [f64; 3]) -> [f64; 3] {
        let q = [d[0], d[1], d[2] * d[2] * 2.0 - 1.0];
        let s = 0.5 + 0.5 * (self.freq * (self.axis[0] * q[0] + self.axis[1] * q[1] + self.axis[2] * q[2]) + self.phase).sin();
        let g = (-((d[0] - self.blob[0]).powi(2) + (d[1] - self.blob[1]).powi(2) + (d[2].abs() - self.blob[2]).powi(2)) * 3.0).exp();
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (self.a[k] * (1.0 - s) + self.b[k] * s) * (1.0 - 0.5 * g) + 0.5 * g * (1.0 - self.a[k]);
        }
        c
    }
}

/// Unit direction of the texel center `(u, v)` under the equirectangular layout.
pub fn uv_direction(uv: [f64; 2]) -> [f64; 3] {
    let phi = (uv[0] - 0.5) * 2.0 * PI;
    let theta = uv[1] * PI;
    [theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()]
}

/// Ground-truth mesh and `[3, T, T]` texture for a scene.
pub fn generate_scene(spec: &SceneSpec) -> Result<(DeformedMesh, Tensor)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let template = Arc::new(build_icosphere(spec.subdivision)?);
    let basis = radial_basis(spec.degree);
    let coeffs: Vec<f64> = basis.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let field = |d: [f64; 3]| -> f64 {
        basis
            .iter()
            .zip(&coeffs)
            .map(|(e, c)| c * d[0].powi(e[0]) * d[1].powi(e[1]) * d[2].powi(e[2]))
            .sum()
    };
    let values: Vec<f64> = template.vertices.iter().map(|&d| field(d)).collect();
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = 1.0 + spec.scale_jitter * rng.gen_range(-1.0..1.0);
    let stretch: Vec<f64> = (0..3).map(|_| 1.0 + spec.elongation * rng.gen_range(-1.0..1.0)).collect();
    let vertices = template
        .vertices
        .iter()
        .zip(&values)
        .map(|(d, &f)| {
            let r = if peak > 0.0 { 1.0 + spec.amplitude * f / peak } else { 1.0 };
            [d[0] * r * scale * stretch[0], d[1] * r * scale * stretch[1], d[2] * r * scale * stretch[2]]
        })
        .collect();
    let mut color = || [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    let (a, b) = (color(), color());
    let axis = normalize([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
    let palette = Palette {
        a,
        b,
        axis,
        phase: rng.gen_range(0.0..2.0 * PI),
        blob: uv_direction([rng.gen_range(0.0..1.0), rng.gen_range(0.2..0.8)]).map(|x| x.abs()),
        freq: spec.texture_frequency,
    };
    let t = spec.texture_size;
    let n = t * t;
    let mut texture = Tensor::zeros(&[3, t, t]);
    for r in 0..t {
        for c in 0..t {
            let d = uv_direction([(c as f64 + 0.5) / t as f64, (r as f64 + 0.5) / t as f64]);
            let col = palette.color(d);
            for k in 0..3 {
                texture.data_mut()[k * n + r * t + c] = col[k];
            }
        }
    }
    Ok((
        DeformedMesh {
            vertices,
            topology: template,
        },
        texture,
    ))
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Shared view settings: azimuths are evenly spaced starting at 0°.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub n_views: usize,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    pub image_size: usize,
}

impl Default for ViewSpec {
    fn default() -> Self {
        ViewSpec {
            n_views: 8,
            elevation: 20.0,
            distance: 3.0,
            fov: 50.0,
            image_size: 64,
        }
    }
}

impl ViewSpec {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.n_views)
            .map(|k| {
                Camera::new(
                    360.0 * k as f64 / self.n_views as f64,
                    self.elevation,
                    self.distance,
                    self.fov,
                    self.image_size,
                )
            })
            .collect()
    }
}

/// One object seen from several calibrated views.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub id: String,
    /// `[3, H, W]` per view.
    pub images: Vec<Tensor>,
    /// `[1, H, W]` per view.
    pub silhouettes: Vec<Tensor>,
    pub cameras: Vec<Camera>,
}

impl MultiViewSample {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn image_size(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.image_size)
    }
}

/// Render `mesh` with `texture` from evenly spaced azimuths; silhouettes are hard coverage.
pub fn render_views(id: &str, mesh: &DeformedMesh, texture: &Tensor, views: &ViewSpec) -> Result<MultiViewSample> {
    if views.n_views == 0 {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    let cameras = views.cameras()?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut silhouettes = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let out = renderer::rasterize(mesh, texture, cam, renderer::DEFAULT_SIGMA)?;
        silhouettes.push(out.hard_coverage());
        images.push(out.image);
    }
    Ok(MultiViewSample {
        id: id.to_string(),
        images,
        silhouettes,
        cameras,
    })
}

/// Image-space defects applied independently to each view. Missing JSON fields default to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Mean absolute hue rotation (fraction of π) and brightness change per view.
    pub view_inconsistency: f64,
    pub missing_part_prob: f64,
    /// Erased disk radius as a fraction of the image size.
    pub missing_part_radius: f64,
    /// Dilation or erosion radius in pixels.
    pub silhouette_noise_radius: usize,
    pub silhouette_hole_prob: f64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.missing_part_prob, self.silhouette_hole_prob];
        if self.view_inconsistency < 0.0
            || self.missing_part_radius < 0.0
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidArgument(format!("invalid corruption spec {self:?}")));
        }
        Ok(())
    }
}

/// Signed jitter with `E|δ| = amplitude`.
fn jitter<R: Rng>(rng: &mut R, amplitude: f64) -> f64 {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    amplitude * sign * (0.5 + rng.gen::<f64>())
}

/// Rotate an RGB color about the gray axis.
pub fn rotate_hue(c: [f64; 3], angle: f64) -> [f64; 3] {
    let k = 1.0 / 3f64.sqrt();
    let (s, co) = angle.sin_cos();
    let kv = [k * c[0], k * c[1], k * c[2]];
    let dot = kv[0] + kv[1] + kv[2];
    let cross = [k * (c[2] - c[1]), k * (c[0] - c[2]), k * (c[1] - c[0])];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = c[i] * co + cross[i] * s + k * dot * (1.0 - co);
    }
    out
}

fn erase_disk(sample: &mut MultiViewSample, view: usize, center: (f64, f64), radius: f64, image_too: bool) {
    let size = sample.image_size();
    let n = size * size;
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 + 0.5 - center.0, j as f64 + 0.5 - center.1);
            if dx * dx + dy * dy <= radius * radius {
                let pi = i * size + j;
                sample.silhouettes[view].data_mut()[pi] = 0.0;
                if image_too {
                    for c in 0..3 {
                        sample.images[view].data_mut()[c * n + pi] = 0.0;
                    }
                }
            }
        }
    }
}

fn random_foreground_pixel<R: Rng>(mask: &Tensor, rng: &mut R) -> Option<(f64, f64)> {
    let size = mask.shape()[1];
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] > 0.5).collect();
    if fg.is_empty() {
        return None;
    }
    let p = fg[rng.gen_range(0..fg.len())];
    Some(((p / size) as f64 + 0.5, (p % size) as f64 + 0.5))
}

/// Binary dilation (`grow`) or erosion with a square window of the given radius.
fn morph(mask: &Tensor, radius: usize, grow: bool) -> Tensor {
    let size = mask.shape()[1];
    let r = radius as i64;
    let mut out = mask.clone();
    for i in 0..size as i64 {
        for j in 0..size as i64 {
            let mut hit = !grow;
            'win: for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    let v = if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
                        0.0
                    } else {
                        mask.data()[y as usize * size + x as usize]
                    };
                    if grow && v > 0.5 {
                        hit = true;
                        break 'win;
                    }
                    if !grow && v <= 0.5 {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out.data_mut()[i as usize * size + j as usize] = if hit { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Apply independent per-view defects.
pub fn corrupt<R: Rng>(sample: &MultiViewSample, spec: &CorruptionSpec, rng: &mut R) -> Result<MultiViewSample> {
    spec.validate()?;
    let mut out = sample.clone();
    let size = sample.image_size();
    let n = size * size;
    for v in 0..sample.n_views() {
        if spec.view_inconsistency > 0.0 {
            let angle = jitter(rng, spec.view_inconsistency) * PI;
            let gain = 1.0 + jitter(rng, spec.view_inconsistency);
            let img = out.images[v].data_mut();
            for pi in 0..n {
                if sample.silhouettes[v].data()[pi] <= 0.5 {
                    continue;
                }
                let c = rotate_hue([img[pi], img[n + pi], img[2 * n + pi]], angle);
                for k in 0..3 {
                    img[k * n + pi] = (c[k] * gain).clamp(0.0, 1.0);
                }
            }
        }
        if spec.missing_part_prob > 0.0 && rng.gen_bool(spec.missing_part_prob) {
            if let Some(center) = random_foreground_pixel(&out.silhouettes[v], rng) {
                let radius = (spec.missing_part_radius * size as f64).max(1.0);
                erase_disk(&mut out, v, center, radius, true);
            }
        }
        if spec.silhouette_noise_radius > 0 {
            let grow = rng.gen_bool(0.5);
            out.silhouettes[v] = morph(&out.silhouettes[v], spec.silhouette_noise_radius, grow);
        }
        if spec.silhouette_hole_prob > 0.0 && rng.gen_bool(spec.silhouette_hole_prob) {
            if let Some(center) = random_foreground_pixel(&out.silhouettes[v], rng) {
                erase_disk(&mut out, v, center, 2.0, false);
            }
        }
    }
    Ok(out)
}

/// Everything needed to synthesize a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub seed: u64,
    pub scene: SceneSpec,
    pub views: ViewSpec,
    pub corruption: CorruptionSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_objects: 16,
            seed: 0,
            scene: SceneSpec::default(),
            views: ViewSpec::default(),
            corruption: CorruptionSpec::default(),
        }
    }
}

/// Scene seed of object `i`.
pub fn object_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

pub fn object_id(i: usize) -> String {
    format!("obj_{i:05}")
}

/// Ground-truth scene of object `i` under `cfg`.
pub fn object_scene(cfg: &DatasetConfig, i: usize) -> Result<(DeformedMesh, Tensor)> {
    generate_scene(&SceneSpec {
        seed: object_seed(cfg.seed, i),
        ..cfg.scene.clone()
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<MultiViewSample>> {
    cfg.corruption.validate()?;
    (0..cfg.n_objects)
        .map(|i| {
            let (mesh, texture) = object_scene(cfg, i)?;
            let clean = render_views(&object_id(i), &mesh, &texture, &cfg.views)?;
            let mut rng = ChaCha8Rng::seed_from_u64(object_seed(cfg.seed, i) ^ 0xC0FF_EE00);
            corrupt(&clean, &cfg.corruption, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub objects: Vec<String>,
    pub resolution: usize,
    pub n_views: usize,
    #[serde(default)]
    pub corruption: CorruptionSpec,
}

/// Camera entry of `cameras.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct CameraRecord {
    azimuth: f64,
    elevation: f64,
    distance: f64,
    fov: f64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_sample(root: &Path, s: &MultiViewSample) -> Result<()> {
    let tmp = root.join(format!(".{}.tmp", s.id));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for k in 0..s.n_views() {
        imageio::save_rgb(&tmp.join(format!("view_{k}.png")), &s.images[k])?;
        imageio::save_gray(&tmp.join(format!("view_{k}_mask.png")), &s.silhouettes[k])?;
    }
    let cams: Vec<CameraRecord> = s
        .cameras
        .iter()
        .map(|c| CameraRecord {
            azimuth: c.azimuth,
            elevation: c.elevation,
            distance: c.distance,
            fov: c.fov,
        })
        .collect();
    write_file(&tmp.join("cameras.json"), &serde_json::to_vec_pretty(&cams)?)?;
    let dst = root.join(&s.id);
    if dst.exists() {
        fs::remove_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
    }
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

/// Write samples and the manifest; each object directory appears atomically.
pub fn write_dataset(samples: &[MultiViewSample], root: &Path, corruption: &CorruptionSpec) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let resolution = samples.first().map_or(0, |s| s.image_size());
    let n_views = samples.first().map_or(0, |s| s.n_views());
    for s in samples {
        if s.image_size() != resolution || s.n_views() != n_views {
            return Err(Error::Dataset(format!("object {} differs in resolution or view count", s.id)));
        }
        write_sample(root, s)?;
    }
    let manifest = Manifest {
        objects: samples.iter().map(|s| s.id.clone()).collect(),
        resolution,
        n_views,
        corruption: *corruption,
    };
    let tmp = root.join(".manifest.json.tmp");
    write_file(&tmp, &serde_json::to_vec_pretty(&manifest)?)?;
    let dst = root.join("manifest.json");
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn read_sample(root: &Path, id: &str, manifest: &Manifest) -> Result<MultiViewSample> {
    let dir: PathBuf = root.join(id);
    let cam_path = dir.join("cameras.json");
    let bytes = fs::read(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let records: Vec<CameraRecord> = serde_json::from_slice(&bytes)?;
    if records.len() != manifest.n_views {
        return Err(Error::Dataset(format!(
            "object {id}: {} cameras, manifest says {} views",
            records.len(),
            manifest.n_views
        )));
    }
    let mut sample = MultiViewSample {
        id: id.to_string(),
        images: Vec::new(),
        silhouettes: Vec::new(),
        cameras: Vec::new(),
    };
    for (k, r) in records.iter().enumerate() {
        let img_path = dir.join(format!("view_{k}.png"));
        let mask_path = dir.join(format!("view_{k}_mask.png"));
        if !img_path.exists() {
            return Err(Error::Dataset(format!("object {id}: missing image for view {k} ({})", img_path.display())));
        }
        if !mask_path.exists() {
            return Err(Error::Dataset(format!(
                "object {id}: missing silhouette for view {k} ({})",
                mask_path.display()
            )));
        }
        let img = imageio::load_rgb(&img_path)?;
        let mask = imageio::load_gray(&mask_path)?;
        let res = manifest.resolution;
        if img.shape() != [3, res, res] || mask.shape() != [1, res, res] {
            return Err(Error::Dataset(format!(
                "object {id} view {k}: expected {res}x{res}, got image {:?} mask {:?}",
                img.shape(),
                mask.shape()
            )));
        }
        sample.images.push(img);
        sample.silhouettes.push(mask);
        sample.cameras.push(Camera::new(r.azimuth, r.elevation, r.distance, r.fov, res)?);
    }
    Ok(sample)
}

pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<MultiViewSample>)> {
    let manifest = read_manifest(root)?;
    let samples = manifest
        .objects
        .iter()
        .map(|id| read_sample(root, id, &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
