//! Reference computations shared by the integration and acceptance tests.

#![allow(dead_code)]

use prog3d::{FeatureExtractor, Tensor};

/// Plain-loop stride-2, pad-1, 3×3 convolution followed by ReLU.
pub fn conv_relu(x: &[f64], cin: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor) -> (Vec<f64>, usize, usize, usize) {
    let cout = weight.shape()[0];
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let wd = weight.data();
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for r in 0..ho {
            for c in 0..wo {
                let mut s = bias.data()[o];
                for i in 0..cin {
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let (y, xx) = ((2 * r + kr) as i64 - 1, (2 * c + kc) as i64 - 1);
                            if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            s += wd[((o * cin + i) * 3 + kr) * 3 + kc] * x[(i * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * ho + r) * wo + c] = s.max(0.0);
            }
        }
    }
    (out, cout, ho, wo)
}

/// Selected feature maps of a `[3, H, W]` image as `(data, channels, H·W)`.
pub fn direct_features(img: &Tensor, phi: &FeatureExtractor) -> Vec<(Vec<f64>, usize, usize)> {
    let (mut x, mut c, mut h, mut w) = (img.data().to_vec(), 3, img.shape()[1], img.shape()[2]);
    let mut out = Vec::new();
    for l in 0..*phi.layers.iter().max().unwrap() {
        (x, c, h, w) = conv_relu(&x, c, h, w, &phi.weights[l], &phi.biases[l]);
        if phi.layers.contains(&(l + 1)) {
            out.push((x.clone(), c, h * w));
        }
    }
    out
}

/// `Σ_j mean_{h,w} Σ_c (Φ_j(a) − Φ_j(b))²` for a single pair of images.
pub fn direct_perceptual(a: &Tensor, b: &Tensor, phi: &FeatureExtractor) -> f64 {
    direct_features(a, phi)
        .iter()
        .zip(direct_features(b, phi))
        .map(|((x, _, hw), (y, _, _))| x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / *hw as f64)
        .sum()
}
