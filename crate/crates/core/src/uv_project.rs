//! Inverse rendering of view images into the UV texture space of a mesh.
//!
//! Each texel is mapped to a surface point by rasterizing the template's faces
//! in UV space. The point is projected into the view; its color is a bilinear
//! sample of the image there. A texel is visible when its face is
//! front-facing, it survives the depth test against the winning face of the
//! pixel it lands in, and the soft silhouette there is at least one half.
//! Nothing here is differentiated.

use std::sync::Arc;

use crate::datagen::MultiViewSample;
use crate::error::{Error, Result};
use crate::mesh::{DeformedMesh, TemplateMesh};
use crate::renderer::{self, barycentric, Camera, NEAR_PLANE, NO_FACE};
use crate::tensor::Tensor;

/// Depth-test tolerance as a fraction of the camera distance.
pub const DEPTH_EPS_FRACTION: f64 = 1e-3;

/// Texture recovered from one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialTexture {
    /// `[3, T, T]`, zero wherever `visibility` is zero.
    pub texture: Tensor,
    /// `[1, T, T]` with values in `{0, 1}`.
    pub visibility: Tensor,
    pub source_view: usize,
}

impl PartialTexture {
    pub fn size(&self) -> usize {
        self.visibility.shape()[1]
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// For every texel of a `T×T` texture: the face covering its center in UV
/// space and the barycentric weights there. Depends only on the template.
#[derive(Clone, Debug)]
pub struct UvRaster {
    pub size: usize,
    pub faces: Vec<u32>,
    pub weights: Vec<[f64; 3]>,
}

impl UvRaster {
    pub fn new(template: &TemplateMesh, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("texture size must be positive".into()));
        }
        let n = size * size;
        let mut faces = vec![NO_FACE; n];
        let mut weights = vec![[0.0; 3]; n];
        let s = size as f64;
        for (fi, fu) in template.face_uvs.iter().enumerate() {
            let t = [template.uv_coords[fu[0]], template.uv_coords[fu[1]], template.uv_coords[fu[2]]];
            let umin = t.iter().map(|p| p[0]).fold(f64::MAX, f64::min);
            let umax = t.iter().map(|p| p[0]).fold(f64::MIN, f64::max);
            let vmin = t.iter().map(|p| p[1]).fold(f64::MAX, f64::min);
            let vmax = t.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
            let c0 = (umin * s - 0.5).ceil() as i64;
            let c1 = (umax * s - 0.5).floor() as i64;
            let r0 = ((vmin * s - 0.5).ceil().max(0.0)) as usize;
            let r1f = (vmax * s - 0.5).floor();
            if r1f < 0.0 {
                continue;
            }
            let r1 = (r1f as usize).min(size - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let p = [(c as f64 + 0.5) / s, (r as f64 + 0.5) / s];
                    let Some(w) = barycentric(t, p) else { continue };
                    if w.iter().any(|&x| x < 0.0) {
                        continue;
                    }
                    let col = c.rem_euclid(size as i64) as usize;
                    let ti = r * size + col;
                    if faces[ti] == NO_FACE {
                        faces[ti] = fi as u32;
                        weights[ti] = w;
                    }
                }
            }
        }
        Ok(UvRaster { size, faces, weights })
    }

    /// 3D surface point of texel `ti` on a deformed mesh.
    pub fn surface_point(&self, template: &TemplateMesh, vertices: &[[f64; 3]], ti: usize) -> Option<[f64; 3]> {
        let f = self.faces[ti];
        if f == NO_FACE {
            return None;
        }
        let face = template.faces[f as usize];
        let w = self.weights[ti];
        let mut p = [0.0; 3];
        for k in 0..3 {
            for d in 0..3 {
                p[d] += w[k] * vertices[face[k]][d];
            }
        }
        Some(p)
    }
}

/// Bilinear sample of a `[C, H, W]` image at continuous pixel coordinates
/// (centers at `j + 0.5`), clamped at the border.
fn sample_image(image: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = image.dims3();
    let xs = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let ys = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xs.floor() as usize, ys.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (xs - x0 as f64, ys - y0 as f64);
    (0..c)
        .map(|ch| {
            let p = &image.data()[ch * h * w..(ch + 1) * h * w];
            (1.0 - ty) * ((1.0 - tx) * p[y0 * w + x0] + tx * p[y0 * w + x1])
                + ty * ((1.0 - tx) * p[y1 * w + x0] + tx * p[y1 * w + x1])
        })
        .collect()
}

/// Per-texel outcome of projecting into one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexelProjection {
    /// Continuous pixel coordinates of the surface point.
    pub pixel: [f64; 2],
    pub visible: bool,
}

/// Project every texel's surface point into `cam`. `None` for texels not
/// covered by any UV triangle.
pub fn project_texels(
    raster: &UvRaster,
    mesh: &DeformedMesh,
    cam: &Camera,
    sigma: f64,
) -> Result<Vec<Option<TexelProjection>>> {
    let topo = &mesh.topology;
    // Depth and silhouette come from the renderer; color is irrelevant here.
    let (render, _) = renderer::rasterize_with_cache(&mesh.vertices, topo, None, cam, sigma)?;
    let frame = cam.frame();
    let size = cam.image_size;
    let cam_coords: Vec<[f64; 3]> = mesh.vertices.iter().map(|&p| frame.to_camera(p)).collect();
    let ndc = |c: [f64; 3]| frame.ndc(c);
    let eps_z = DEPTH_EPS_FRACTION * cam.distance;
    // Screen-space depth of face `f`'s plane at NDC point `p`.
    let plane_depth = |f: usize, p: [f64; 2]| -> Option<f64> {
        let face = topo.faces[f];
        if face.iter().any(|&v| cam_coords[v][2] < NEAR_PLANE) {
            return None;
        }
        let tri = [ndc(cam_coords[face[0]]), ndc(cam_coords[face[1]]), ndc(cam_coords[face[2]])];
        let w = barycentric(tri, p)?;
        Some(w[0] * cam_coords[face[0]][2] + w[1] * cam_coords[face[1]][2] + w[2] * cam_coords[face[2]][2])
    };

    let mut out = vec![None; raster.faces.len()];
    for (ti, slot) in out.iter_mut().enumerate() {
        let Some(point) = raster.surface_point(topo, &mesh.vertices, ti) else { continue };
        let fi = raster.faces[ti] as usize;
        let c = frame.to_camera(point);
        if c[2] < NEAR_PLANE {
            *slot = Some(TexelProjection {
                pixel: [f64::NAN; 2],
                visible: false,
            });
            continue;
        }
        let p_ndc = ndc(c);
        let pixel = renderer::ndc_to_pixel(p_ndc, size);
        let mut visible = front_facing(topo, &mesh.vertices, fi, frame.eye);
        if visible {
            visible = pixel[0] >= 0.0 && pixel[1] >= 0.0 && pixel[0] < size as f64 && pixel[1] < size as f64;
        }
        if visible {
            let pi = (pixel[1] as usize) * size + pixel[0] as usize;
            let winner = render.face_ids[pi];
            visible = winner != NO_FACE && render.silhouette.data()[pi] >= 0.5;
            if visible && winner as usize != fi {
                visible = match (plane_depth(fi, p_ndc), plane_depth(winner as usize, p_ndc)) {
                    (Some(own), Some(front)) => own <= front + eps_z,
                    _ => false,
                };
            }
        }
        *slot = Some(TexelProjection { pixel, visible });
    }
    Ok(out)
}

fn front_facing(topo: &TemplateMesh, vertices: &[[f64; 3]], face: usize, eye: [f64; 3]) -> bool {
    let [a, b, c] = topo.faces[face].map(|v| vertices[v]);
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0];
    let to_eye = [eye[0] - centroid[0], eye[1] - centroid[1], eye[2] - centroid[2]];
    n[0] * to_eye[0] + n[1] * to_eye[1] + n[2] * to_eye[2] > 0.0
}

/// Project a `[3, H, W]` view image onto the UV texture of `mesh`.
pub fn project_image_to_uv(
    image: &Tensor,
    mesh: &DeformedMesh,
    cam: &Camera,
    raster: &UvRaster,
    source_view: usize,
) -> Result<PartialTexture> {
    let (c, h, w) = image.dims3();
    if c != 3 || h != cam.image_size || w != cam.image_size {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} does not match camera size {}",
            image.shape(),
            cam.image_size
        )));
    }
    let t = raster.size;
    let n = t * t;
    let texels = project_texels(raster, mesh, cam, renderer::DEFAULT_SIGMA)?;
    let mut texture = Tensor::zeros(&[3, t, t]);
    let mut visibility = Tensor::zeros(&[1, t, t]);
    for (ti, tp) in texels.iter().enumerate() {
        let Some(tp) = tp else { continue };
        if !tp.visible {
            continue;
        }
        visibility.data_mut()[ti] = 1.0;
        let col = sample_image(image, tp.pixel[0], tp.pixel[1]);
        for ch in 0..3 {
            texture.data_mut()[ch * n + ti] = col[ch];
        }
    }
    Ok(PartialTexture {
        texture,
        visibility,
        source_view,
    })
}

/// Mask a generated `[3, T, T]` texture with the visibility of a real partial texture.
pub fn make_fake_pair(generated: &Tensor, real: &PartialTexture) -> Result<Tensor> {
    let (c, h, w) = generated.dims3();
    if c != 3 || [1, h, w] != real.visibility.shape() {
        return Err(Error::ShapeMismatch(format!(
            "generated texture {:?} vs visibility {:?}",
            generated.shape(),
            real.visibility.shape()
        )));
    }
    let n = h * w;
    let vis = real.visibility.data();
    let mut out = generated.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x *= vis[i % n];
    }
    Ok(out)
}

/// Conditioning (from `view1`), real (from `view2`) and masked fake textures.
#[derive(Clone, Debug)]
pub struct GanTriple {
    pub conditioning: PartialTexture,
    pub real: PartialTexture,
    pub fake: Tensor,
}

pub fn build_gan_batch(
    sample: &MultiViewSample,
    mesh: &DeformedMesh,
    generated_texture: &Tensor,
    view1: usize,
    view2: usize,
    raster: &UvRaster,
) -> Result<GanTriple> {
    if view1 == view2 {
        return Err(Error::InvalidArgument("GAN pair needs two distinct views".into()));
    }
    let n = sample.cameras.len();
    if view1 >= n || view2 >= n {
        return Err(Error::InvalidArgument(format!("view index out of range for {n} views")));
    }
    let conditioning = project_image_to_uv(&sample.images[view1], mesh, &sample.cameras[view1], raster, view1)?;
    let real = project_image_to_uv(&sample.images[view2], mesh, &sample.cameras[view2], raster, view2)?;
    let fake = make_fake_pair(generated_texture, &real)?;
    Ok(GanTriple {
        conditioning,
        real,
        fake,
    })
}

/// Shared UV raster for a template and texture size.
pub fn uv_raster(template: &Arc<TemplateMesh>, size: usize) -> Result<Arc<UvRaster>> {
    Ok(Arc::new(UvRaster::new(template, size)?))
}
