//! Sphere template, UV parameterization, deformation and Laplacian regularization.
//!
//! The template is a subdivided icosahedron projected onto the unit sphere.
//! Texture coordinates use an equirectangular layout: `u = 0.5 + atan2(z, x) / 2π`
//! and `v = acos(y) / π`, so the plane `z = 0` maps to the texture's vertical
//! mirror line and `u ↦ 1 − u` is the reflection `z ↦ −z`.
//!
//! Faces that straddle the longitude seam get duplicated texture coordinates
//! with `u > 1`; texture lookups wrap horizontally. Geometry is never split.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::autograd::SparseMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SUBDIVISION_LEVEL: u32 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMesh {
    /// Unit-sphere positions.
    pub vertices: Vec<[f64; 3]>,
    /// Counter-clockwise (outward) vertex triples.
    pub faces: Vec<[usize; 3]>,
    /// Canonical UV of each geometric vertex, used to sample deformation maps.
    pub vertex_uv: Vec<[f64; 2]>,
    /// Texture coordinates, duplicated across the seam and at the poles.
    pub uv_coords: Vec<[f64; 2]>,
    /// Per-face indices into `uv_coords`.
    pub face_uvs: Vec<[usize; 3]>,
    /// Sorted neighbor lists of the vertex graph.
    pub adjacency: Vec<Vec<usize>>,
}

/// Per-texel `(x, y, z)` offsets on a `[3, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationMap {
    grid: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformedMesh {
    pub vertices: Vec<[f64; 3]>,
    pub topology: Arc<TemplateMesh>,
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

/// Canonical equirectangular coordinates of a unit vector. Poles get `u = 0.5`.
pub fn sphere_uv(p: [f64; 3]) -> [f64; 2] {
    let v = p[1].clamp(-1.0, 1.0).acos() / PI;
    let u = if p[0].abs() < 1e-12 && p[2].abs() < 1e-12 {
        0.5
    } else if p[2] == 0.0 && p[0] < 0.0 {
        1.0
    } else {
        0.5 + p[2].atan2(p[0]) / (2.0 * PI)
    };
    [u, v]
}

fn is_pole(p: [f64; 3]) -> bool {
    p[0].abs() < 1e-12 && p[2].abs() < 1e-12
}

fn icosahedron() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let verts = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (verts, faces)
}

fn subdivide(verts: &mut Vec<[f64; 3]>, faces: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            let (pa, pb) = (verts[a], verts[b]);
            verts.push(normalize([
                0.5 * (pa[0] + pb[0]),
                0.5 * (pa[1] + pb[1]),
                0.5 * (pa[2] + pb[2]),
            ]));
            verts.len() - 1
        })
    };
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = mid(a, b, verts);
        let bc = mid(b, c, verts);
        let ca = mid(c, a, verts);
        out.push([a, ab, ca]);
        out.push([b, bc, ab]);
        out.push([c, ca, bc]);
        out.push([ab, bc, ca]);
    }
    out
}

fn build_adjacency(n: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Seam-consistent texture coordinates for every face corner.
fn face_texture_coords(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
    let mut coords = Vec::new();
    let mut index: HashMap<(usize, u64, u64), usize> = HashMap::new();
    let mut face_uvs = Vec::with_capacity(faces.len());
    for f in faces {
        let mut uv: [[f64; 2]; 3] = [[0.0; 2]; 3];
        let mut poles = [false; 3];
        for k in 0..3 {
            uv[k] = sphere_uv(vertices[f[k]]);
            poles[k] = is_pole(vertices[f[k]]);
        }
        let regular: Vec<usize> = (0..3).filter(|&k| !poles[k]).collect();
        let (lo, hi) = regular.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &k| {
            (lo.min(uv[k][0]), hi.max(uv[k][0]))
        });
        if hi - lo > 0.5 {
            for &k in &regular {
                if uv[k][0] < 0.5 {
                    uv[k][0] += 1.0;
                }
            }
        }
        if !regular.is_empty() {
            let mean_u = regular.iter().map(|&k| uv[k][0]).sum::<f64>() / regular.len() as f64;
            for k in 0..3 {
                if poles[k] {
                    uv[k][0] = mean_u;
                }
            }
        }
        let mut ids = [0usize; 3];
        for k in 0..3 {
            let key = (f[k], uv[k][0].to_bits(), uv[k][1].to_bits());
            ids[k] = *index.entry(key).or_insert_with(|| {
                coords.push(uv[k]);
                coords.len() - 1
            });
        }
        face_uvs.push(ids);
    }
    (coords, face_uvs)
}

/// Unit icosphere with `level` rounds of 4-to-1 subdivision.
pub fn build_icosphere(level: u32) -> Result<TemplateMesh> {
    if level > MAX_SUBDIVISION_LEVEL {
        return Err(Error::InvalidArgument(format!(
            "subdivision level {level} exceeds maximum {MAX_SUBDIVISION_LEVEL}"
        )));
    }
    let (mut vertices, mut faces) = icosahedron();
    for _ in 0..level {
        faces = subdivide(&mut vertices, &faces);
    }
    Ok(TemplateMesh::from_parts(vertices, faces, None))
}

impl TemplateMesh {
    /// Assemble a mesh; texture coordinates are derived from the sphere
    /// parameterization unless given as `(uv_coords, face_uvs)`.
    pub fn from_parts(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[usize; 3]>,
        texcoords: Option<(Vec<[f64; 2]>, Vec<[usize; 3]>)>,
    ) -> Self {
        let adjacency = build_adjacency(vertices.len(), &faces);
        let (uv_coords, face_uvs) = match texcoords {
            Some(tc) => tc,
            None => face_texture_coords(&vertices, &faces),
        };
        let vertex_uv = vertices.iter().map(|&p| sphere_uv(normalize(p))).collect();
        TemplateMesh {
            vertices,
            faces,
            vertex_uv,
            uv_coords,
            face_uvs,
            adjacency,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.num_edges() as i64 + self.faces.len() as i64
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    /// Sparse bilinear-sampling operator from a `h×w` grid to the vertices.
    pub fn sampling_matrix(&self, h: usize, w: usize) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .vertex_uv
            .iter()
            .map(|&uv| bilinear_taps(uv, h, w).to_vec())
            .collect();
        SparseMatrix::from_rows(h * w, &rows)
    }

    /// Uniform graph Laplacian `L = I − D⁻¹A`.
    pub fn laplacian_matrix(&self) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .adjacency
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let k = nb.len() as f64;
                let mut r = vec![(i, 1.0)];
                r.extend(nb.iter().map(|&j| (j, -1.0 / k)));
                r
            })
            .collect();
        SparseMatrix::from_rows(self.vertices.len(), &rows)
    }
}

/// The four `(flat index, weight)` taps of a bilinear lookup at `uv` on an
/// `h×w` grid with texel centers at `(i + 0.5) / n`; coordinates clamp at borders.
pub fn bilinear_taps(uv: [f64; 2], h: usize, w: usize) -> [(usize, f64); 4] {
    let x = (uv[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (uv[1] * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ]
}

impl DeformationMap {
    /// Wraps a `[3, H, W]` grid.
    pub fn new(grid: Tensor) -> Result<Self> {
        if grid.shape().len() != 3 || grid.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "deformation map must be [3, H, W], got {:?}",
                grid.shape()
            )));
        }
        Ok(DeformationMap { grid })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        DeformationMap {
            grid: Tensor::zeros(&[3, h, w]),
        }
    }

    pub fn constant(h: usize, w: usize, offset: [f64; 3]) -> Self {
        let mut grid = Tensor::zeros(&[3, h, w]);
        for (c, chunk) in grid.data_mut().chunks_mut(h * w).enumerate() {
            chunk.fill(offset[c]);
        }
        DeformationMap { grid }
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn scaled(&self, s: f64) -> Self {
        DeformationMap {
            grid: self.grid.scale(s),
        }
    }
}

/// Bilinear lookup of the offset at `uv`.
pub fn sample_deformation(map: &DeformationMap, uv: [f64; 2]) -> [f64; 3] {
    let (h, w) = (map.height(), map.width());
    let d = map.grid.data();
    let mut out = [0.0; 3];
    for (idx, wt) in bilinear_taps(uv, h, w) {
        for (c, o) in out.iter_mut().enumerate() {
            *o += wt * d[c * h * w + idx];
        }
    }
    out
}

/// Template vertices displaced by the map sampled at each vertex's UV.
pub fn apply_deformation(template: &Arc<TemplateMesh>, map: &DeformationMap) -> Result<DeformedMesh> {
    if !map.grid.is_finite() {
        return Err(Error::NonFinite("deformation map".into()));
    }
    let vertices = template
        .vertices
        .iter()
        .zip(&template.vertex_uv)
        .map(|(p, &uv)| {
            let o = sample_deformation(map, uv);
            [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
        })
        .collect();
    Ok(DeformedMesh {
        vertices,
        topology: template.clone(),
    })
}

impl DeformedMesh {
    pub fn undeformed(template: &Arc<TemplateMesh>) -> Self {
        DeformedMesh {
            vertices: template.vertices.clone(),
            topology: template.clone(),
        }
    }

    pub fn offsets(&self) -> Vec<[f64; 3]> {
        self.vertices
            .iter()
            .zip(&self.topology.vertices)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect()
    }
}

/// Mean over vertices of `‖o_i − mean_{j∈N(i)} o_j‖²`, where `o` are the
/// offsets from the template.
pub fn laplacian_loss(mesh: &DeformedMesh, template: &TemplateMesh) -> f64 {
    laplacian_loss_of_offsets(&mesh.offsets(), template)
}

pub fn laplacian_loss_of_offsets(offsets: &[[f64; 3]], template: &TemplateMesh) -> f64 {
    let n = offsets.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, nb) in template.adjacency.iter().enumerate() {
        let k = nb.len() as f64;
        for c in 0..3 {
            let mean = nb.iter().map(|&j| offsets[j][c]).sum::<f64>() / k;
            let d = offsets[i][c] - mean;
            total += d * d;
        }
    }
    total / n as f64
}

/// Mirror a `[C, H, W/2]` half map into `[C, H, W]`: left half is the input,
/// right half its column reversal.
pub fn apply_symmetry(half: &Tensor) -> Tensor {
    apply_symmetry_reflect(half, &vec![1.0; half.shape()[0]])
}

/// Like [`apply_symmetry`], with the mirrored half's channels multiplied by
/// `signs` (a geometric reflection negates the component normal to the plane).
pub fn apply_symmetry_reflect(half: &Tensor, signs: &[f64]) -> Tensor {
    let (c, h, hw) = half.dims3();
    assert_eq!(signs.len(), c, "one sign per channel");
    let w = 2 * hw;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            let src = &half.data()[(ch * h + y) * hw..(ch * h + y + 1) * hw];
            let dst = &mut out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
            dst[..hw].copy_from_slice(src);
            for j in 0..hw {
                dst[hw + j] = signs[ch] * src[hw - 1 - j];
            }
        }
    }
    out
}

/// Wavefront OBJ with `v`, `vt` and `f v/vt` records. Texture rows run top to
/// bottom, so `vt` stores `1 − v`.
pub fn write_obj(mesh: &DeformedMesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for uv in &mesh.topology.uv_coords {
        let _ = writeln!(s, "vt {} {}", uv[0], 1.0 - uv[1]);
    }
    for (f, t) in mesh.topology.faces.iter().zip(&mesh.topology.face_uvs) {
        let _ = writeln!(
            s,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            t[0] + 1,
            f[1] + 1,
            t[1] + 1,
            f[2] + 1,
            t[2] + 1
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads triangle OBJ files written by [`write_obj`] (or any `v`/`vt`/`f`
/// triangle mesh). The returned mesh is its own template (zero offsets).
pub fn read_obj(path: &Path) -> Result<DeformedMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| {
        Error::InvalidArgument(format!("{}:{}: {msg}", path.display(), line + 1))
    };
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let p: Vec<f64> = it.take(3).map(|t| t.parse()).collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(ln, "bad vertex"))?;
                if p.len() != 3 {
                    return Err(bad(ln, "vertex needs 3 coordinates"));
                }
                vertices.push([p[0], p[1], p[2]]);
            }
            Some("vt") => {
                let p: Vec<f64> = it.take(2).map(|t| t.parse()).collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(ln, "bad texture coordinate"))?;
                if p.len() != 2 {
                    return Err(bad(ln, "vt needs 2 coordinates"));
                }
                uvs.push([p[0], 1.0 - p[1]]);
            }
            Some("f") => {
                let mut f = [0usize; 3];
                let mut t = [0usize; 3];
                let corners: Vec<&str> = it.collect();
                if corners.len() != 3 {
                    return Err(bad(ln, "only triangles are supported"));
                }
                for (k, c) in corners.iter().enumerate() {
                    let mut parts = c.split('/');
                    let vi: usize = parts.next().and_then(|x| x.parse().ok()).ok_or_else(|| bad(ln, "bad face index"))?;
                    let ti: usize = parts.next().and_then(|x| x.parse().ok()).ok_or_else(|| bad(ln, "face corner lacks texture index"))?;
                    if vi == 0 || ti == 0 {
                        return Err(bad(ln, "OBJ indices are 1-based"));
                    }
                    f[k] = vi - 1;
                    t[k] = ti - 1;
                }
                faces.push(f);
                face_uvs.push(t);
            }
            _ => {}
        }
    }
    if faces.iter().flatten().any(|&i| i >= vertices.len())
        || face_uvs.iter().flatten().any(|&i| i >= uvs.len())
    {
        return Err(Error::InvalidArgument(format!("{}: face index out of range", path.display())));
    }
    let template = Arc::new(TemplateMesh::from_parts(vertices, faces, Some((uvs, face_uvs))));
    Ok(DeformedMesh::undeformed(&template))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    }

    #[test]
    fn icosphere_counts() {
        let m0 = build_icosphere(0).unwrap();
        assert_eq!((m0.vertices.len(), m0.faces.len()), (12, 20));
        let m1 = build_icosphere(1).unwrap();
        assert_eq!((m1.vertices.len(), m1.faces.len()), (42, 80));
        assert!(build_icosphere(7).is_err());
    }

    #[test]
    fn icosphere_invariants_all_levels() {
        for level in 0..=MAX_SUBDIVISION_LEVEL {
            let m = build_icosphere(level).unwrap();
            assert!(m.is_watertight(), "level {level}");
            assert_eq!(m.euler_characteristic(), 2, "level {level}");
            for v in &m.vertices {
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                assert!((r - 1.0).abs() < 1e-12);
            }
            assert!(m.adjacency.iter().all(|a| !a.is_empty()));
            for uv in &m.uv_coords {
                assert!((0.0..=1.5).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1]));
            }
        }
    }

    #[test]
    fn faces_are_outward_and_uv_nondegenerate() {
        let m = build_icosphere(3).unwrap();
        for (f, t) in m.faces.iter().zip(&m.face_uvs) {
            let [a, b, c] = [m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]];
            let n = cross(
                [b[0] - a[0], b[1] - a[1], b[2] - a[2]],
                [c[0] - a[0], c[1] - a[1], c[2] - a[2]],
            );
            let centroid = [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]];
            assert!(n[0] * centroid[0] + n[1] * centroid[1] + n[2] * centroid[2] > 0.0);
            // UV triangles never span the whole seam.
            let us: Vec<f64> = t.iter().map(|&i| m.uv_coords[i][0]).collect();
            let span = us.iter().cloned().fold(f64::MIN, f64::max) - us.iter().cloned().fold(f64::MAX, f64::min);
            assert!(span < 0.5, "face uv span {span}");
        }
    }

    #[test]
    fn template_is_mirror_symmetric_in_z() {
        let m = build_icosphere(3).unwrap();
        for v in &m.vertices {
            let mirrored = [v[0], v[1], -v[2]];
            assert!(m
                .vertices
                .iter()
                .any(|w| (w[0] - mirrored[0]).abs() + (w[1] - mirrored[1]).abs() + (w[2] - mirrored[2]).abs() < 1e-12));
        }
    }

    fn random_map(h: usize, w: usize, seed: u64) -> DeformationMap {
        DeformationMap::new(Tensor::randn(&[3, h, w], 0.3, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn sample_at_texel_center_and_midpoint() {
        let map = random_map(4, 6, 1);
        let d = map.grid().data();
        let (h, w) = (4, 6);
        let center = |i: usize, j: usize| [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64];
        let s = sample_deformation(&map, center(2, 3));
        for c in 0..3 {
            assert!((s[c] - d[c * h * w + 2 * w + 3]).abs() < 1e-12);
        }
        let mid = [(3.0 + 1.0) / w as f64, (2.0 + 0.5) / h as f64];
        let s = sample_deformation(&map, mid);
        for c in 0..3 {
            let expect = 0.5 * (d[c * h * w + 2 * w + 3] + d[c * h * w + 2 * w + 4]);
            assert!((s[c] - expect).abs() < 1e-12);
        }
        let constant = DeformationMap::constant(4, 6, [0.1, -0.2, 0.3]);
        for uv in [[0.0, 0.0], [0.33, 0.71], [1.0, 1.0]] {
            let s = sample_deformation(&constant, uv);
            assert!((s[0] - 0.1).abs() < 1e-12 && (s[1] + 0.2).abs() < 1e-12 && (s[2] - 0.3).abs() < 1e-12);
        }
    }

    /// Per-vertex scalar bilinear interpolation written from scratch.
    fn oracle_bilinear(grid: &Tensor, c: usize, uv: [f64; 2]) -> f64 {
        let (_, h, w) = grid.dims3();
        let at = |i: i64, j: i64| {
            let i = i.clamp(0, h as i64 - 1) as usize;
            let j = j.clamp(0, w as i64 - 1) as usize;
            grid.data()[c * h * w + i * w + j]
        };
        let x = (uv[0] * w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
        let y = (uv[1] * h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let (j, i) = (x.floor() as i64, y.floor() as i64);
        let (fx, fy) = (x - j as f64, y - i as f64);
        let top = at(i, j) + fx * (at(i, j + 1) - at(i, j));
        let bot = at(i + 1, j) + fx * (at(i + 1, j + 1) - at(i + 1, j));
        top + fy * (bot - top)
    }

    #[test]
    fn apply_deformation_cases() {
        let t = Arc::new(build_icosphere(2).unwrap());
        let zero = apply_deformation(&t, &DeformationMap::zeros(8, 8)).unwrap();
        assert_eq!(zero.vertices, t.vertices);
        let shift = apply_deformation(&t, &DeformationMap::constant(8, 8, [0.25, 0.0, 0.0])).unwrap();
        for (a, b) in shift.vertices.iter().zip(&t.vertices) {
            assert!((a[0] - b[0] - 0.25).abs() < 1e-12 && a[1] == b[1] && a[2] == b[2]);
        }
        let map = random_map(8, 16, 7);
        let m = apply_deformation(&t, &map).unwrap();
        for (i, (a, b)) in m.vertices.iter().zip(&t.vertices).enumerate() {
            for c in 0..3 {
                let o = oracle_bilinear(map.grid(), c, t.vertex_uv[i]);
                assert!((a[c] - b[c] - o).abs() < 1e-12);
            }
        }
        let mut bad = Tensor::zeros(&[3, 2, 2]);
        bad.data_mut()[0] = f64::NAN;
        assert!(apply_deformation(&t, &DeformationMap::new(bad).unwrap()).is_err());
    }

    #[test]
    fn sampling_matrix_matches_pointwise_sampling() {
        let t = build_icosphere(2).unwrap();
        let map = random_map(8, 16, 3);
        let s = t.sampling_matrix(8, 16);
        let mut xs = vec![0.0; t.vertices.len()];
        s.apply(&map.grid().data()[..128], &mut xs);
        for (i, &uv) in t.vertex_uv.iter().enumerate() {
            assert!((xs[i] - sample_deformation(&map, uv)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_cases() {
        let t = Arc::new(build_icosphere(2).unwrap());
        let m = DeformedMesh::undeformed(&t);
        assert_eq!(laplacian_loss(&m, &t), 0.0);
        let moved = DeformedMesh {
            vertices: t.vertices.iter().map(|v| [v[0] + 0.3, v[1] - 0.1, v[2] + 2.0]).collect(),
            topology: t.clone(),
        };
        assert!(laplacian_loss(&moved, &t) < 1e-24);
        // Single vertex displaced by a unit vector: that vertex contributes 1,
        // each neighbor j contributes (1/deg(j))².
        let k = 5;
        let mut offsets = vec![[0.0; 3]; t.vertices.len()];
        offsets[k] = [0.0, 1.0, 0.0];
        let expect = (1.0
            + t.adjacency[k]
                .iter()
                .map(|&j| (1.0 / t.adjacency[j].len() as f64).powi(2))
                .sum::<f64>())
            / t.vertices.len() as f64;
        assert!((laplacian_loss_of_offsets(&offsets, &t) - expect).abs() < 1e-15);
    }

    #[test]
    fn symmetry_cases() {
        let half = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let full = apply_symmetry(&half);
        assert_eq!(full.data(), &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 4.0, 5.0, 6.0, 6.0, 5.0, 4.0]);
        let c = apply_symmetry(&Tensor::full(&[3, 4, 2], 0.7));
        assert!(c.data().iter().all(|&x| x == 0.7));
        let r = apply_symmetry_reflect(&Tensor::full(&[2, 1, 1], 1.0), &[1.0, -1.0]);
        assert_eq!(r.data(), &[1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn obj_round_trip() {
        let t = Arc::new(build_icosphere(1).unwrap());
        let m = apply_deformation(&t, &random_map(4, 8, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        write_obj(&m, &p).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(back.topology.faces, t.faces);
        assert_eq!(back.topology.face_uvs, t.face_uvs);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
        for (a, b) in back.topology.uv_coords.iter().zip(&t.uv_coords) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mirror_identity_holds(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4)) {
            let half = Tensor::from_vec(&[2, 3, 4], vals);
            let full = apply_symmetry(&half);
            let w = 8;
            for row in full.data().chunks(w) {
                for i in 0..w {
                    prop_assert_eq!(row[i], row[w - 1 - i]);
                }
            }
        }

        #[test]
        fn deformation_is_linear_in_map(alpha in -3.0f64..3.0, seed in 0u64..1000) {
            let t = Arc::new(build_icosphere(1).unwrap());
            let map = random_map(4, 8, seed);
            let base = apply_deformation(&t, &map).unwrap();
            let scaled = apply_deformation(&t, &map.scaled(alpha)).unwrap();
            for ((s, b), v) in scaled.vertices.iter().zip(&base.vertices).zip(&t.vertices) {
                for c in 0..3 {
                    prop_assert!((s[c] - (v[c] + alpha * (b[c] - v[c]))).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn laplacian_translation_invariant(seed in 0u64..1000, tx in -2.0f64..2.0, ty in -2.0f64..2.0) {
            let t = build_icosphere(1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let off = Tensor::randn(&[t.vertices.len(), 3], 1.0, &mut rng);
            let offsets: Vec<[f64; 3]> = off.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let moved: Vec<[f64; 3]> = offsets.iter().map(|o| [o[0] + tx, o[1] + ty, o[2]]).collect();
            let a = laplacian_loss_of_offsets(&offsets, &t);
            let b = laplacian_loss_of_offsets(&moved, &t);
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
        }
    }
}
