//! Multi-scale projection discriminator over UV texture space.
//!
//! Each scale sees the candidate texture, its visibility mask and a learnable
//! positional embedding, average-pooled to its resolution, and reduces them
//! with stride-2 convolutions to a grid of patch features. Patch logits are a
//! 1×1 convolution of those features plus their inner product with an
//! embedding of the conditioning texture, computed by a separate
//! convolutional network per scale that ends in global pooling.
//!
//! All weights are spectrally normalized; the power-iteration vectors are
//! stored and advanced explicitly with [`Discriminator::update_spectral`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore, SpectralState};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub texture_size: usize,
    /// Side length of each scale's patch-logit grid, finest first.
    pub scales: Vec<usize>,
    /// Channels of the stride-2 convolutions, in order.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub pos_channels: usize,
    pub spectral_norm: bool,
}

impl DiscriminatorConfig {
    pub fn full() -> Self {
        DiscriminatorConfig {
            texture_size: 512,
            scales: vec![32, 16],
            channels: vec![64, 128, 256, 256],
            embed_dim: 256,
            pos_channels: 4,
            spectral_norm: true,
        }
    }

    pub fn toy() -> Self {
        DiscriminatorConfig {
            texture_size: 32,
            scales: vec![8, 4],
            channels: vec![16, 32],
            embed_dim: 32,
            pos_channels: 2,
            spectral_norm: true,
        }
    }

    /// Input side length of scale `k` (the texture pooled `k` times).
    pub fn input_size(&self, k: usize) -> usize {
        self.texture_size >> k
    }

    /// Number of stride-2 convolutions of scale `k`.
    pub fn depth(&self, k: usize) -> usize {
        (self.input_size(k) / self.scales[k]).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.scales.is_empty() || self.embed_dim == 0 {
            return bad("discriminator needs at least one scale and embed_dim > 0".into());
        }
        if !self.texture_size.is_power_of_two() {
            return bad(format!("texture size {} is not a power of two", self.texture_size));
        }
        for (k, &s) in self.scales.iter().enumerate() {
            let input = self.input_size(k);
            if !s.is_power_of_two() || s == 0 || s > input {
                return bad(format!("scale {k}: output {s} unreachable from input {input}"));
            }
            if self.depth(k) > self.channels.len() {
                return bad(format!("scale {k} needs {} conv channels", self.depth(k)));
            }
        }
        Ok(())
    }
}

/// A convolution or linear weight under spectral normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnConv {
    conv: Conv2d,
    sn: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Branch {
    pos: ParamId,
    convs: Vec<SnConv>,
    feature: SnConv,
    logit: SnConv,
    embed_convs: Vec<SnConv>,
    embed_feature: SnConv,
    embed_linear: Linear,
    embed_linear_sn: usize,
}

/// Scores of one scale.
pub struct ScaleScore<'g> {
    /// `[N, 1, s, s]` final logits.
    pub logits: Var<'g>,
    /// `[N, 1, s, s]` patch logits without the conditional term.
    pub unconditional: Var<'g>,
    /// `[N, E, s, s]` patch features.
    pub features: Var<'g>,
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    pub spectral: Vec<SpectralState>,
    sn_params: Vec<ParamId>,
    branches: Vec<Branch>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut sn_params = Vec::new();
        let mut branches = Vec::new();
        let e = config.embed_dim;
        for k in 0..config.scales.len() {
            let size = config.input_size(k);
            let pos = params.add(
                format!("d{k}.pos"),
                Tensor::randn(&[1, config.pos_channels, size, size], 0.1, &mut rng),
            );
            let mut conv = |params: &mut ParamStore, name: String, cin: usize, cout: usize, ksz: usize, stride: usize| {
                let c = Conv2d::new(params, &name, cin, cout, ksz, stride, 1.0, &mut rng);
                sn_params.push(c.weight);
                SnConv {
                    conv: c,
                    sn: sn_params.len() - 1,
                }
            };
            let mut cin = 4 + config.pos_channels;
            let mut convs = Vec::new();
            for i in 0..config.depth(k) {
                convs.push(conv(&mut params, format!("d{k}.conv{i}"), cin, config.channels[i], 3, 2));
                cin = config.channels[i];
            }
            let feature = conv(&mut params, format!("d{k}.feature"), cin, e, 3, 1);
            let logit = conv(&mut params, format!("d{k}.logit"), e, 1, 1, 1);
            let mut cin = 4;
            let mut embed_convs = Vec::new();
            for i in 0..config.depth(k) {
                embed_convs.push(conv(&mut params, format!("d{k}.embed_conv{i}"), cin, config.channels[i], 3, 2));
                cin = config.channels[i];
            }
            let embed_feature = conv(&mut params, format!("d{k}.embed_feature"), cin, e, 3, 1);
            let embed_linear = Linear::new(&mut params, &format!("d{k}.embed_linear"), e, e, 1.0, &mut rng);
            sn_params.push(embed_linear.weight);
            branches.push(Branch {
                pos,
                convs,
                feature,
                logit,
                embed_convs,
                embed_feature,
                embed_linear,
                embed_linear_sn: sn_params.len() - 1,
            });
        }
        let spectral = sn_params
            .iter()
            .map(|&id| SpectralState::new(params.get(id), &mut rng))
            .collect();
        Ok(Discriminator {
            config,
            params,
            spectral,
            sn_params,
            branches,
        })
    }

    /// Advance every power iteration by one step with the current weights.
    pub fn update_spectral(&mut self) {
        if !self.config.spectral_norm {
            return;
        }
        for (s, &id) in self.spectral.iter_mut().zip(&self.sn_params) {
            s.power_iteration(self.params.get(id));
        }
    }

    fn weight<'g>(&self, p: &Bound<'g>, sn: usize) -> Var<'g> {
        let w = p.var(self.sn_params[sn]);
        if self.config.spectral_norm {
            self.spectral[sn].normalize_var(w)
        } else {
            w
        }
    }

    fn conv<'g>(&self, p: &Bound<'g>, c: &SnConv, x: Var<'g>) -> Var<'g> {
        c.conv.forward_with(p, self.weight(p, c.sn), x)
    }

    fn check(&self, x: Var<'_>, channels: usize, what: &str) -> Result<usize> {
        let s = x.shape();
        let t = self.config.texture_size;
        if s.len() != 4 || s[1] != channels || s[2] != t || s[3] != t {
            return Err(Error::ShapeMismatch(format!("{what}: expected [N, {channels}, {t}, {t}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// One `[N, E]` embedding of the conditioning texture per scale.
    pub fn embed_condition<'g>(&self, p: &Bound<'g>, cond_texture: Var<'g>, cond_visibility: Var<'g>) -> Result<Vec<Var<'g>>> {
        let n = self.check(cond_texture, 3, "conditioning texture")?;
        if self.check(cond_visibility, 1, "conditioning visibility")? != n {
            return Err(Error::ShapeMismatch("conditioning batch sizes differ".into()));
        }
        let mut x = Var::concat_channels(&[cond_texture, cond_visibility]);
        let mut out = Vec::new();
        for (k, b) in self.branches.iter().enumerate() {
            if k > 0 {
                x = x.avg_pool2x();
            }
            let mut h = x;
            for c in &b.embed_convs {
                h = self.conv(p, c, h).leaky_relu(LEAK);
            }
            let h = self.conv(p, &b.embed_feature, h).leaky_relu(LEAK).global_avg_pool();
            out.push(b.embed_linear.forward_with(p, self.weight(p, b.embed_linear_sn), h));
        }
        Ok(out)
    }

    /// Per-scale logits given precomputed conditioning embeddings.
    pub fn score_with_embeddings<'g>(
        &self,
        p: &Bound<'g>,
        candidate: Var<'g>,
        visibility: Var<'g>,
        embeddings: &[Var<'g>],
    ) -> Result<Vec<ScaleScore<'g>>> {
        let n = self.check(candidate, 3, "candidate")?;
        if self.check(visibility, 1, "visibility")? != n {
            return Err(Error::ShapeMismatch("candidate and visibility batch sizes differ".into()));
        }
        if embeddings.len() != self.branches.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings for {} scales",
                embeddings.len(),
                self.branches.len()
            )));
        }
        let mut x = Var::concat_channels(&[candidate, visibility]);
        let mut out = Vec::new();
        for (k, b) in self.branches.iter().enumerate() {
            if k > 0 {
                x = x.avg_pool2x();
            }
            let pos = p.var(b.pos).expand_batch(n);
            let mut h = Var::concat_channels(&[x, pos]);
            for c in &b.convs {
                h = self.conv(p, c, h).leaky_relu(LEAK);
            }
            let features = self.conv(p, &b.feature, h).leaky_relu(LEAK);
            let unconditional = self.conv(p, &b.logit, features);
            let e = embeddings[k];
            if e.shape() != [n, self.config.embed_dim] {
                return Err(Error::ShapeMismatch(format!("embedding {k}: {:?}", e.shape())));
            }
            let logits = unconditional.add(features.channel_dot(e));
            out.push(ScaleScore {
                logits,
                unconditional,
                features,
            });
        }
        Ok(out)
    }

    pub fn score<'g>(
        &self,
        p: &Bound<'g>,
        candidate: Var<'g>,
        visibility: Var<'g>,
        cond_texture: Var<'g>,
        cond_visibility: Var<'g>,
    ) -> Result<Vec<ScaleScore<'g>>> {
        let e = self.embed_condition(p, cond_texture, cond_visibility)?;
        self.score_with_embeddings(p, candidate, visibility, &e)
    }
}

/// Fraction of samples classified correctly when real samples should have a
/// positive mean logit and fake ones a negative one (mean over patches and scales).
pub fn real_fake_accuracy(real: &[Tensor], fake: &[Tensor]) -> f64 {
    let per_sample = |maps: &[Tensor]| -> Vec<f64> {
        let n = maps[0].shape()[0];
        (0..n)
            .map(|i| maps.iter().map(|m| m.batch_item(i).mean()).sum::<f64>() / maps.len() as f64)
            .collect()
    };
    let r = per_sample(real);
    let f = per_sample(fake);
    let correct = r.iter().filter(|&&x| x > 0.0).count() + f.iter().filter(|&&x| x < 0.0).count();
    correct as f64 / (r.len() + f.len()) as f64
}
