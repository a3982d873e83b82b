//! Training objectives.
//!
//! Perceptual distances use a frozen convolutional feature pyramid Φ: for each
//! layer in the selected set, the squared feature difference is summed over
//! channels and averaged over positions and samples; layers are summed.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SparseMatrix, Var};
use crate::error::{Error, Result};
use crate::nn::he_normal;
use crate::tensor::Tensor;

/// Union floor of the silhouette loss.
pub const IOU_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightSource {
    Random { seed: u64 },
    File { path: String },
}

/// Frozen stride-2 convolution pyramid with ReLU after each layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// 1-based indices of the layers whose outputs are compared.
    pub layers: Vec<usize>,
    pub source: WeightSource,
}

impl FeatureExtractor {
    pub const DEFAULT_CHANNELS: [usize; 5] = [16, 32, 64, 64, 64];
    pub const DEFAULT_LAYERS: [usize; 3] = [1, 2, 3];

    pub fn random(seed: u64, channels: &[usize], layers: &[usize]) -> Result<Self> {
        if channels.is_empty() || layers.iter().any(|&l| l == 0 || l > channels.len()) {
            return Err(Error::InvalidArgument(format!(
                "feature layers {layers:?} out of range for {} conv layers",
                channels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &c in channels {
            weights.push(he_normal(&[c, cin, 3, 3], cin * 9, 1.0, &mut rng));
            biases.push(Tensor::randn(&[c], 0.05, &mut rng));
            cin = c;
        }
        Ok(FeatureExtractor {
            weights,
            biases,
            layers: layers.to_vec(),
            source: WeightSource::Random { seed },
        })
    }

    pub fn default_random(seed: u64) -> Self {
        Self::random(seed, &Self::DEFAULT_CHANNELS, &Self::DEFAULT_LAYERS).expect("default layout is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut fe: FeatureExtractor = serde_json::from_slice(&bytes)?;
        fe.source = WeightSource::File {
            path: path.display().to_string(),
        };
        Ok(fe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    fn deepest(&self) -> usize {
        self.layers.iter().copied().max().unwrap_or(0)
    }

    /// Outputs of the selected layers for `[N, 3, H, W]` input.
    pub fn features<'g>(&self, x: Var<'g>) -> Vec<Var<'g>> {
        let g = x.graph();
        let mut out = Vec::new();
        let mut h = x;
        for l in 0..self.deepest() {
            let w = g.constant(self.weights[l].clone());
            let b = g.constant(self.biases[l].clone());
            h = h.conv2d(w, Some(b), 2, 1).relu();
            if self.layers.contains(&(l + 1)) {
                out.push(h);
            }
        }
        out
    }

    pub fn features_tensor(&self, x: &Tensor) -> Vec<Tensor> {
        let g = Graph::new();
        self.features(g.constant(x.clone()))
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect()
    }
}

/// `Σ_j mean_{n,h,w} Σ_c (Φ_j(a) − Φ_j(b))²`.
pub fn perceptual_distance<'g>(a: Var<'g>, b: Var<'g>, phi: &FeatureExtractor) -> Var<'g> {
    let fa = phi.features(a);
    let fb = phi.features(b);
    let mut total: Option<Var<'g>> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let c = x.shape()[1] as f64;
        let term = x.sub(y).square().mean().mul_scalar(c);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("feature extractor has at least one layer")
}

/// Novel-view perceptual loss; both images are masked by the ground-truth silhouette.
pub fn perceptual_novel_view<'g>(
    gt_image: Var<'g>,
    rendered: Var<'g>,
    gt_silhouette: Var<'g>,
    phi: &FeatureExtractor,
) -> Var<'g> {
    perceptual_distance(gt_image.mul_mask(gt_silhouette), rendered.mul_mask(gt_silhouette), phi)
}

/// Same-view perceptual loss; both images are masked by the rendered silhouette.
pub fn perceptual_same_view<'g>(
    gt_image: Var<'g>,
    rendered: Var<'g>,
    rendered_silhouette: Var<'g>,
    phi: &FeatureExtractor,
) -> Var<'g> {
    perceptual_distance(
        gt_image.mul_mask(rendered_silhouette),
        rendered.mul_mask(rendered_silhouette),
        phi,
    )
}

/// `1 − Σ(a⊙b) / max(Σ(a + b − a⊙b), ε)` per sample, averaged over the batch.
pub fn silhouette_iou_loss<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let inter = a.mul(b);
    let union = a.add(b).sub(inter).sum_per_sample().clamp_min(IOU_EPS);
    inter.sum_per_sample().div(union).mean().mul_scalar(-1.0).add_scalar(1.0)
}

/// Mean over vertices and samples of `‖(L δ)_v‖²` for offsets `[N, 3, V]`.
pub fn laplacian_term<'g>(offsets: Var<'g>, laplacian: &Rc<SparseMatrix>) -> Var<'g> {
    let s = offsets.shape();
    let denom = (s[0] * s[2]) as f64;
    offsets.spmm(laplacian.clone()).square().sum().mul_scalar(1.0 / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pn: f64,
    pub lambda_s: f64,
    pub lambda_lap: f64,
    pub lambda_ps: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pn: 1.0,
            lambda_s: 1.0,
            lambda_lap: 0.5,
            lambda_ps: 1.0,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pn, self.lambda_s, self.lambda_lap, self.lambda_ps, self.lambda_adv];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_pn: 0.0,
            lambda_s: 0.0,
            lambda_lap: 0.0,
            lambda_ps: 0.0,
            lambda_adv: 0.0,
        }
    }
}

/// Ground truth and renders of one view for a batch.
#[derive(Clone, Copy)]
pub struct ViewBatch<'g> {
    /// `[N, 3, H, W]`
    pub gt_image: Var<'g>,
    /// `[N, 1, H, W]`
    pub gt_silhouette: Var<'g>,
    pub image: Var<'g>,
    pub silhouette: Var<'g>,
}

/// Unweighted components and the weighted total.
#[derive(Clone, Copy)]
pub struct LossTerms<'g> {
    pub perceptual_novel: Option<Var<'g>>,
    pub silhouette: Option<Var<'g>>,
    pub laplacian: Option<Var<'g>>,
    pub perceptual_same: Option<Var<'g>>,
    pub adversarial: Option<Var<'g>>,
    pub total: Var<'g>,
}

/// Plain values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub perceptual_novel: Option<f64>,
    pub silhouette: Option<f64>,
    pub laplacian: Option<f64>,
    pub perceptual_same: Option<f64>,
    pub adversarial: Option<f64>,
    pub total: f64,
}

impl LossTerms<'_> {
    pub fn values(&self) -> LossValues {
        let v = |x: Option<Var<'_>>| x.map(|x| x.item());
        LossValues {
            perceptual_novel: v(self.perceptual_novel),
            silhouette: v(self.silhouette),
            laplacian: v(self.laplacian),
            perceptual_same: v(self.perceptual_same),
            adversarial: v(self.adversarial),
            total: self.total.item(),
        }
    }
}

fn weighted<'g>(parts: &[(f64, Var<'g>)]) -> Var<'g> {
    let mut it = parts.iter();
    let &(w0, v0) = it.next().expect("at least one term");
    it.fold(v0.mul_scalar(w0), |acc, &(w, v)| acc.add(v.mul_scalar(w)))
}

/// `λ_pn·L_p-nv + λ_s·L_sil + λ_lap·L_lap` on the novel view.
pub fn stage1_loss<'g>(
    novel: &ViewBatch<'g>,
    offsets: Var<'g>,
    laplacian: &Rc<SparseMatrix>,
    w: &LossWeights,
    phi: &FeatureExtractor,
) -> LossTerms<'g> {
    let pn = perceptual_novel_view(novel.gt_image, novel.image, novel.gt_silhouette, phi);
    let sil = silhouette_iou_loss(novel.gt_silhouette, novel.silhouette);
    let lap = laplacian_term(offsets, laplacian);
    LossTerms {
        perceptual_novel: Some(pn),
        silhouette: Some(sil),
        laplacian: Some(lap),
        perceptual_same: None,
        adversarial: None,
        total: weighted(&[(w.lambda_pn, pn), (w.lambda_s, sil), (w.lambda_lap, lap)]),
    }
}

/// Stage 1 plus `λ_ps·L_p-sv` on the input view (no input-view silhouette term).
pub fn stage2_loss<'g>(
    novel: &ViewBatch<'g>,
    same: &ViewBatch<'g>,
    offsets: Var<'g>,
    laplacian: &Rc<SparseMatrix>,
    w: &LossWeights,
    phi: &FeatureExtractor,
) -> LossTerms<'g> {
    let s1 = stage1_loss(novel, offsets, laplacian, w, phi);
    let ps = perceptual_same_view(same.gt_image, same.image, same.silhouette, phi);
    LossTerms {
        perceptual_same: Some(ps),
        total: s1.total.add(ps.mul_scalar(w.lambda_ps)),
        ..s1
    }
}

/// Non-saturating generator term `Σ_scales mean softplus(−logit)`.
pub fn generator_adversarial<'g>(fake_logits: &[Var<'g>]) -> Var<'g> {
    let mut it = fake_logits.iter();
    let first = it.next().expect("at least one scale").mul_scalar(-1.0).softplus().mean();
    it.fold(first, |acc, l| acc.add(l.mul_scalar(-1.0).softplus().mean()))
}

/// Hinge loss `Σ_scales mean relu(1 − real) + mean relu(1 + fake)`.
pub fn discriminator_hinge<'g>(real_logits: &[Var<'g>], fake_logits: &[Var<'g>]) -> Var<'g> {
    assert_eq!(real_logits.len(), fake_logits.len(), "real and fake scale counts differ");
    let mut total: Option<Var<'g>> = None;
    for (r, f) in real_logits.iter().zip(fake_logits) {
        let t = r
            .mul_scalar(-1.0)
            .add_scalar(1.0)
            .relu()
            .mean()
            .add(f.add_scalar(1.0).relu().mean());
        total = Some(match total {
            Some(acc) => acc.add(t),
            None => t,
        });
    }
    total.expect("at least one scale")
}

/// Stage 2 plus `λ_adv` times the generator adversarial term.
pub fn stage3_generator_loss<'g>(stage2: LossTerms<'g>, fake_logits: &[Var<'g>], w: &LossWeights) -> LossTerms<'g> {
    let adv = generator_adversarial(fake_logits);
    LossTerms {
        adversarial: Some(adv),
        total: stage2.total.add(adv.mul_scalar(w.lambda_adv)),
        ..stage2
    }
}

/// Same-view-only baseline: perceptual and silhouette terms on the input view
/// with ground-truth masks, plus the Laplacian.
pub fn sameview_ablation_loss<'g>(
    same: &ViewBatch<'g>,
    offsets: Var<'g>,
    laplacian: &Rc<SparseMatrix>,
    w: &LossWeights,
    phi: &FeatureExtractor,
) -> LossTerms<'g> {
    let ps = perceptual_novel_view(same.gt_image, same.image, same.gt_silhouette, phi);
    let sil = silhouette_iou_loss(same.gt_silhouette, same.silhouette);
    let lap = laplacian_term(offsets, laplacian);
    LossTerms {
        perceptual_novel: None,
        silhouette: Some(sil),
        laplacian: Some(lap),
        perceptual_same: Some(ps),
        adversarial: None,
        total: weighted(&[(w.lambda_pn, ps), (w.lambda_s, sil), (w.lambda_lap, lap)]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 0.3, &mut rng).map(|x| (x + 0.5).clamp(0.0, 1.0))
    }

    fn mask(shape: &[usize], f: impl Fn(usize, usize) -> bool) -> Tensor {
        let (h, w) = (shape[2], shape[3]);
        let mut t = Tensor::zeros(shape);
        for n in 0..shape[0] {
            for i in 0..h {
                for j in 0..w {
                    if f(i, j) {
                        t.data_mut()[(n * h + i) * w + j] = 1.0;
                    }
                }
            }
        }
        t
    }

    fn iou(a: &Tensor, b: &Tensor) -> f64 {
        let g = Graph::new();
        silhouette_iou_loss(g.constant(a.clone()), g.constant(b.clone())).item()
    }

    #[test]
    fn iou_constructed_cases() {
        let s = [1, 1, 8, 8];
        let disk = mask(&s, |i, j| (i as f64 - 3.5).powi(2) + (j as f64 - 3.5).powi(2) < 9.0);
        assert_eq!(iou(&disk, &disk), 0.0);
        let left = mask(&s, |_, j| j < 4);
        let right = mask(&s, |_, j| j >= 4);
        assert_eq!(iou(&left, &right), 1.0);
        let full = mask(&s, |_, _| true);
        assert_eq!(iou(&left, &full), 0.5);
        // Both empty: guarded, no NaN.
        let empty = Tensor::zeros(&s);
        assert_eq!(iou(&empty, &empty), 1.0);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = rnd(&[2, 1, 6, 6], 1);
        let b = rnd(&[2, 1, 6, 6], 2);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn perceptual_zero_cases() {
        let phi = FeatureExtractor::default_random(0);
        let g = Graph::new();
        let a = g.constant(rnd(&[1, 3, 32, 32], 3));
        let b = g.constant(rnd(&[1, 3, 32, 32], 4));
        let m = g.constant(rnd(&[1, 1, 32, 32], 5));
        assert_eq!(perceptual_novel_view(a, a, m, &phi).item(), 0.0);
        let zero = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        assert_eq!(perceptual_novel_view(a, b, zero, &phi).item(), 0.0);
        assert_eq!(perceptual_same_view(a, b, zero, &phi).item(), 0.0);
        assert!(perceptual_novel_view(a, b, m, &phi).item() > 0.0);
    }

    /// Direct nested-loop convolution with zero padding 1, stride 2, then ReLU.
    fn conv_loop(x: &[Vec<Vec<f64>>], w: &Tensor, b: &Tensor) -> Vec<Vec<Vec<f64>>> {
        let cin = x.len();
        let h = x[0].len();
        let cout = w.shape()[0];
        let ho = (h + 2 - 3) / 2 + 1;
        let mut out = vec![vec![vec![0.0; ho]; ho]; cout];
        for (o, plane) in out.iter_mut().enumerate() {
            for (i, row) in plane.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let mut s = b.data()[o];
                    for c in 0..cin {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (y, xx) = ((2 * i + ki) as i64 - 1, (2 * j + kj) as i64 - 1);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < h {
                                    s += w.data()[((o * cin + c) * 3 + ki) * 3 + kj] * x[c][y as usize][xx as usize];
                                }
                            }
                        }
                    }
                    *v = s.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn perceptual_matches_direct_convolution_oracle() {
        let phi = FeatureExtractor::default_random(11);
        let (a, b, m) = (rnd(&[1, 3, 64, 64], 6), rnd(&[1, 3, 64, 64], 7), rnd(&[1, 1, 64, 64], 8));
        let g = Graph::new();
        let ours = perceptual_novel_view(g.constant(a.clone()), g.constant(b.clone()), g.constant(m.clone()), &phi).item();
        let to_nested = |t: &Tensor| -> Vec<Vec<Vec<f64>>> {
            (0..3)
                .map(|c| {
                    (0..64)
                        .map(|i| (0..64).map(|j| t.data()[(c * 64 + i) * 64 + j] * m.data()[i * 64 + j]).collect())
                        .collect()
                })
                .collect()
        };
        let (mut xa, mut xb) = (to_nested(&a), to_nested(&b));
        let mut oracle = 0.0;
        for l in 0..3 {
            xa = conv_loop(&xa, &phi.weights[l], &phi.biases[l]);
            xb = conv_loop(&xb, &phi.weights[l], &phi.biases[l]);
            let hw = (xa[0].len() * xa[0].len()) as f64;
            let mut s = 0.0;
            for c in 0..xa.len() {
                for i in 0..xa[0].len() {
                    for j in 0..xa[0].len() {
                        s += (xa[c][i][j] - xb[c][i][j]).powi(2);
                    }
                }
            }
            oracle += s / hw;
        }
        assert!((ours - oracle).abs() <= 1e-5 * oracle.abs(), "{ours} vs {oracle}");
    }

    #[test]
    fn feature_extractor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phi.json");
        let a = FeatureExtractor::random(3, &[4, 4, 4], &[1, 3]).unwrap();
        a.save(&p).unwrap();
        let b = FeatureExtractor::load(&p).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(matches!(b.source, WeightSource::File { .. }));
        assert!(FeatureExtractor::random(0, &[4], &[2]).is_err());
    }

    #[test]
    fn hinge_and_adversarial_values() {
        let g = Graph::new();
        let real = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, 0.0]));
        let fake = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![-2.0, 0.5]));
        // real: relu(1−2)=0, relu(1−0)=1 → 0.5; fake: relu(−1)=0, relu(1.5)=1.5 → 0.75
        assert!((discriminator_hinge(&[real], &[fake]).item() - 1.25).abs() < 1e-12);
        let expect = ((1.0f64 + 2.0f64.exp()).ln() + (1.0f64 + (-0.5f64).exp()).ln()) / 2.0;
        assert!((generator_adversarial(&[fake]).item() - expect).abs() < 1e-12);
    }
}
