//! Encoder–decoder generator: image and latent code to texture and UV deformation map.
//!
//! The encoder halves the resolution with stride-2 3×3 convolutions down to a
//! 4×4 bottleneck. A fully connected layer reshapes it into a half-width
//! feature map, which shared decoder blocks upsample. The mesh branch then
//! predicts half of the deformation map and the texture branch half of the
//! texture; both are completed by mirroring. The texture gets one more block
//! after mirroring so it can break exact symmetry.
//!
//! Decoder blocks use adaptive instance normalization. A linear layer maps the
//! latent code concatenated with the flattened bottleneck to a style code, and
//! each block's per-channel scale and shift are linear in that style code.

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SparseMatrix, Var};
use crate::error::{Error, Result};
use crate::mesh::{build_icosphere, DeformationMap, DeformedMesh, TemplateMesh};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
/// Output spatial size of the encoder.
pub const BOTTLENECK_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    /// Channels of the map produced by the fully connected layer.
    pub fc_channels: usize,
    pub shared_decoder_channels: Vec<usize>,
    pub texture_branch_channels: Vec<usize>,
    /// Channels of the block applied after texture mirroring.
    pub texture_post_channels: usize,
    pub mesh_branch_channels: Vec<usize>,
    pub texture_size: usize,
    /// Height (and full width) of the deformation map.
    pub deform_size: usize,
    pub latent_dim: usize,
    pub channel_scale: f64,
    pub template_level: u32,
}

impl GeneratorConfig {
    /// Full-size network: 512² input, 512² texture, 32² deformation map.
    pub fn full() -> Self {
        GeneratorConfig {
            image_size: 512,
            encoder_channels: vec![64, 128, 256, 256, 256, 128, 128],
            fc_channels: 512,
            shared_decoder_channels: vec![512, 256],
            texture_branch_channels: vec![256, 256, 128, 128],
            texture_post_channels: 64,
            mesh_branch_channels: vec![64],
            texture_size: 512,
            deform_size: 32,
            latent_dim: 64,
            channel_scale: 1.0,
            template_level: 4,
        }
    }

    /// Desk-scale network: 128² input, 256² texture, half the channels.
    pub fn desk() -> Self {
        GeneratorConfig {
            image_size: 128,
            encoder_channels: vec![64, 128, 256, 128, 128],
            texture_branch_channels: vec![256, 128, 128],
            texture_size: 256,
            channel_scale: 0.5,
            ..Self::full()
        }
    }

    /// Tiny network for CPU tests: 32² input, 32² texture, 16² deformation map.
    pub fn toy() -> Self {
        GeneratorConfig {
            image_size: 32,
            encoder_channels: vec![16, 32, 32],
            fc_channels: 32,
            shared_decoder_channels: vec![32, 32],
            texture_branch_channels: vec![16],
            texture_post_channels: 16,
            mesh_branch_channels: vec![16],
            texture_size: 32,
            deform_size: 16,
            latent_dim: 8,
            channel_scale: 1.0,
            template_level: 3,
        }
    }

    /// Channel count after scaling (at least 1).
    pub fn ch(&self, c: usize) -> usize {
        ((c as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// Height of the map produced by the fully connected layer; its width is half that.
    pub fn base_height(&self) -> usize {
        self.deform_size >> self.shared_decoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("image_size", self.image_size),
            ("texture_size", self.texture_size),
            ("deform_size", self.deform_size),
        ] {
            if !v.is_power_of_two() {
                return bad(format!("{name} = {v} is not a power of two"));
            }
        }
        if self.encoder_channels.is_empty()
            || self.shared_decoder_channels.is_empty()
            || self.texture_branch_channels.is_empty()
            || self.mesh_branch_channels.is_empty()
        {
            return bad("channel lists must be non-empty".into());
        }
        if !(self.channel_scale > 0.0) || self.latent_dim == 0 || self.fc_channels == 0 {
            return bad("channel_scale, latent_dim and fc_channels must be positive".into());
        }
        if self.image_size >> self.encoder_channels.len() != BOTTLENECK_SIZE
            || self.image_size != BOTTLENECK_SIZE << self.encoder_channels.len()
        {
            return bad(format!(
                "{} encoder blocks take {} to {}, not {BOTTLENECK_SIZE}",
                self.encoder_channels.len(),
                self.image_size,
                self.image_size >> self.encoder_channels.len()
            ));
        }
        if self.base_height() < 2 || self.base_height() << self.shared_decoder_channels.len() != self.deform_size {
            return bad(format!(
                "deform_size {} is not reachable with {} shared blocks",
                self.deform_size,
                self.shared_decoder_channels.len()
            ));
        }
        if self.deform_size << self.texture_branch_channels.len() != self.texture_size {
            return bad(format!(
                "texture_size {} != deform_size {} · 2^{}",
                self.texture_size,
                self.deform_size,
                self.texture_branch_channels.len()
            ));
        }
        if self.template_level > crate::mesh::MAX_SUBDIVISION_LEVEL {
            return bad(format!("template level {} too large", self.template_level));
        }
        Ok(())
    }

    /// `[C, 4, 4]` encoder output.
    pub fn bottleneck_shape(&self) -> [usize; 3] {
        [self.ch(*self.encoder_channels.last().unwrap()), BOTTLENECK_SIZE, BOTTLENECK_SIZE]
    }

    /// `[C, H, W/2]` map after the fully connected layer.
    pub fn fc_shape(&self) -> [usize; 3] {
        [self.ch(self.fc_channels), self.base_height(), self.base_height() / 2]
    }
}

/// Latent code `z ~ N(0, I)`, `[N, latent_dim]`.
pub fn sample_latent<R: Rng + ?Sized>(n: usize, latent_dim: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[n, latent_dim], 1.0, rng)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdaNorm {
    gamma: Linear,
    beta: Linear,
}

impl AdaNorm {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, latent: usize, c: usize, rng: &mut R) -> Self {
        AdaNorm {
            gamma: Linear::new(store, &format!("{name}.gamma"), latent, c, 0.1, rng),
            beta: Linear::new(store, &format!("{name}.beta"), latent, c, 0.1, rng),
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, z: Var<'g>) -> Var<'g> {
        let scale = self.gamma.forward(p, z).add_scalar(1.0);
        let shift = self.beta.forward(p, z);
        x.instance_norm(NORM_EPS).channel_affine(scale, shift)
    }
}

/// Two conv–AdaNorm–LeakyReLU layers with a residual projection, then optional 2× upsampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderBlock {
    conv1: Conv2d,
    norm1: AdaNorm,
    conv2: Conv2d,
    norm2: AdaNorm,
    proj: Option<Conv2d>,
    upsample: bool,
}

impl DecoderBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        latent: usize,
        upsample: bool,
        rng: &mut R,
    ) -> Self {
        DecoderBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng),
            norm1: AdaNorm::new(store, &format!("{name}.norm1"), latent, cout, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1.0, rng),
            norm2: AdaNorm::new(store, &format!("{name}.norm2"), latent, cout, rng),
            proj: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.proj"), cin, cout, 1, 1, 0.5, rng)),
            upsample,
        }
    }

    /// Residual output before upsampling, and the block output.
    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, z: Var<'g>) -> (Var<'g>, Var<'g>) {
        let h = self.norm1.forward(p, self.conv1.forward(p, x), z).leaky_relu(LEAK);
        let h = self.norm2.forward(p, self.conv2.forward(p, h), z).leaky_relu(LEAK);
        let skip = match &self.proj {
            Some(c) => c.forward(p, x),
            None => x,
        };
        let res = h.add(skip);
        let out = if self.upsample { res.upsample2x() } else { res };
        (res, out)
    }
}

/// Stride-2 convolution stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    convs: Vec<Conv2d>,
}

impl Encoder {
    pub fn build<R: Rng>(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let convs = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let cout = cfg.ch(c);
                let conv = Conv2d::new(store, &format!("enc{i}"), cin, cout, 3, 2, 1.0, rng);
                cin = cout;
                conv
            })
            .collect();
        Encoder { convs }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Var<'g> {
        self.convs.iter().fold(image, |x, c| c.forward(p, x).relu())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Decoder {
    fc: Linear,
    style: Linear,
    shared: Vec<DecoderBlock>,
    mesh: Vec<DecoderBlock>,
    mesh_head: Conv2d,
    texture: Vec<DecoderBlock>,
    post: DecoderBlock,
    texture_head: Conv2d,
}

impl Decoder {
    fn build<R: Rng>(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let [bc, bh, bw] = cfg.bottleneck_shape();
        let [fc_c, fh, fw] = cfg.fc_shape();
        let l = cfg.latent_dim;
        let fc = Linear::new(store, "fc", bc * bh * bw, fc_c * fh * fw, 1.0, rng);
        let style = Linear::new(store, "style", l + bc * bh * bw, l, 1.0, rng);
        let mut cin = fc_c;
        let chain = |store: &mut ParamStore, prefix: &str, chans: &[usize], up: bool, cin: &mut usize, rng: &mut R| {
            chans
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let cout = cfg.ch(c);
                    let b = DecoderBlock::new(store, &format!("{prefix}{i}"), *cin, cout, l, up, rng);
                    *cin = cout;
                    b
                })
                .collect::<Vec<_>>()
        };
        let shared = chain(store, "shared", &cfg.shared_decoder_channels, true, &mut cin, rng);
        let split = cin;
        let mut mc = split;
        let mesh = chain(store, "mesh", &cfg.mesh_branch_channels, false, &mut mc, rng);
        let mesh_head = Conv2d::new(store, "mesh_head", mc, 3, 3, 1, 1e-3, rng);
        let mut tc = split;
        let texture = chain(store, "tex", &cfg.texture_branch_channels, true, &mut tc, rng);
        let post_c = cfg.ch(cfg.texture_post_channels);
        let post = DecoderBlock::new(store, "tex_post", tc, post_c, l, false, rng);
        let texture_head = Conv2d::new(store, "tex_head", post_c, 3, 3, 1, 0.5, rng);
        Decoder {
            fc,
            style,
            shared,
            mesh,
            mesh_head,
            texture,
            post,
            texture_head,
        }
    }
}

/// Differentiable outputs of one forward pass.
pub struct PredictionVars<'g> {
    /// `[N, 3, T, T]` in `[0, 1]`.
    pub texture: Var<'g>,
    /// Mirrored texture features entering the post-mirroring block.
    pub mirrored_features: Var<'g>,
    /// `[N, 3, D, D]`.
    pub deformation: Var<'g>,
    /// `[N, 3, V]` per-vertex offsets sampled from the deformation map.
    pub offsets: Var<'g>,
    /// `[N, 3, V]` deformed template vertices.
    pub vertices: Var<'g>,
}

/// Plain-tensor outputs for one sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[3, T, T]`.
    pub texture: Tensor,
    pub deformation: DeformationMap,
    pub mesh: DeformedMesh,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    template: Arc<TemplateMesh>,
    sampling: SparseMatrix,
    template_coords: Tensor,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::build(&mut params, &config, &mut rng);
        let decoder = Decoder::build(&mut params, &config, &mut rng);
        let template = Arc::new(build_icosphere(config.template_level)?);
        let sampling = template.sampling_matrix(config.deform_size, config.deform_size);
        let nv = template.vertices.len();
        let mut coords = vec![0.0; 3 * nv];
        for (i, v) in template.vertices.iter().enumerate() {
            for d in 0..3 {
                coords[d * nv + i] = v[d];
            }
        }
        Ok(Generator {
            config,
            params,
            encoder,
            decoder,
            template,
            sampling,
            template_coords: Tensor::from_vec(&[1, 3, nv], coords),
        })
    }

    pub fn template(&self) -> &Arc<TemplateMesh> {
        &self.template
    }

    /// Number of scalars in convolution weights and biases.
    pub fn conv_param_count(&self) -> usize {
        self.params
            .names()
            .iter()
            .zip(self.params.values())
            .filter(|(n, _)| n.contains("conv") || n.starts_with("enc") || n.contains("head") || n.contains("proj"))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn encode<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Var<'g>> {
        let s = image.shape();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::ShapeMismatch(format!("generator expects [N, 3, {n}, {n}] input, got {s:?}")));
        }
        Ok(self.encoder.forward(p, image))
    }

    pub fn decode<'g>(&self, p: &Bound<'g>, bottleneck: Var<'g>, z: Var<'g>) -> Result<PredictionVars<'g>> {
        let bs = bottleneck.shape();
        let expect = self.config.bottleneck_shape();
        if bs.len() != 4 || bs[1..] != expect {
            return Err(Error::ShapeMismatch(format!("bottleneck {bs:?}, expected [N, {expect:?}]")));
        }
        let n = bs[0];
        if z.shape() != [n, self.config.latent_dim] {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?}, expected [{n}, {}]",
                z.shape(),
                self.config.latent_dim
            )));
        }
        let d = &self.decoder;
        let [fc_c, fh, fw] = self.config.fc_shape();
        let f: usize = expect.iter().product();
        let l = self.config.latent_dim;
        let flat = bottleneck.reshape(&[n, f]);
        let code = Var::concat_channels(&[z.reshape(&[n, l, 1, 1]), bottleneck.reshape(&[n, f, 1, 1])]);
        let style = d.style.forward(p, code.reshape(&[n, l + f]));
        let mut x = d.fc.forward(p, flat).reshape(&[n, fc_c, fh, fw]).leaky_relu(LEAK);
        for b in &d.shared {
            x = b.forward(p, x, style).1;
        }
        let mut m = x;
        for b in &d.mesh {
            m = b.forward(p, m, style).1;
        }
        let half_deform = d.mesh_head.forward(p, m);
        let deformation = half_deform.concat_w(half_deform.flip_w().scale_channels(vec![1.0, 1.0, -1.0]));
        let mut t = x;
        for b in &d.texture {
            t = b.forward(p, t, style).1;
        }
        let mirrored = t.concat_w(t.flip_w());
        let post = d.post.forward(p, mirrored, style).1;
        let texture = d.texture_head.forward(p, post).sigmoid();

        let ds = self.config.deform_size;
        let offsets = deformation
            .reshape(&[n, 3, ds * ds])
            .spmm(Rc::new(self.sampling.clone()));
        let base = p_const(offsets, &self.template_coords).expand_batch(n);
        let vertices = base.add(offsets);
        if !texture.value().is_finite() || !deformation.value().is_finite() {
            return Err(Error::NonFinite("generator outputs".into()));
        }
        Ok(PredictionVars {
            texture,
            mirrored_features: mirrored,
            deformation,
            offsets,
            vertices,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>, z: Var<'g>) -> Result<PredictionVars<'g>> {
        let b = self.encode(p, image)?;
        if !b.value().is_finite() {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        self.decode(p, b, z)
    }

    /// Inference on `[N, 3, H, W]` images with `[N, latent_dim]` codes.
    pub fn predict(&self, images: &Tensor, z: &Tensor) -> Result<Vec<Prediction>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let out = self.forward(&p, g.constant(images.clone()), g.constant(z.clone()))?;
        self.to_predictions(&out)
    }

    pub fn to_predictions(&self, out: &PredictionVars<'_>) -> Result<Vec<Prediction>> {
        let tex = out.texture.value();
        let def = out.deformation.value();
        let verts = out.vertices.value();
        let n = tex.shape()[0];
        let nv = self.template.vertices.len();
        (0..n)
            .map(|i| {
                let t = tex.batch_item(i);
                let t = t.reshape(&tex.shape()[1..]);
                let dm = def.batch_item(i);
                let dm = DeformationMap::new(dm.reshape(&def.shape()[1..]))?;
                let vd = &verts.data()[i * 3 * nv..(i + 1) * 3 * nv];
                let vertices = (0..nv).map(|k| [vd[k], vd[nv + k], vd[2 * nv + k]]).collect();
                Ok(Prediction {
                    texture: t,
                    deformation: dm,
                    mesh: DeformedMesh {
                        vertices,
                        topology: self.template.clone(),
                    },
                })
            })
            .collect()
    }
}

fn p_const<'g>(like: Var<'g>, t: &Tensor) -> Var<'g> {
    like.graph().constant(t.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::apply_deformation;

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, 3, size, size], 0.3, &mut rng).map(|x| (x + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::full().validate().is_ok());
        assert!(GeneratorConfig::desk().validate().is_ok());
        assert!(GeneratorConfig::toy().validate().is_ok());
        let mut c = GeneratorConfig::toy();
        c.image_size = 48;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.texture_size = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_shape_contracts() {
        let c = GeneratorConfig::full();
        assert_eq!(c.bottleneck_shape(), [128, 4, 4]);
        assert_eq!(c.fc_shape(), [512, 8, 4]);
        let d = GeneratorConfig::desk();
        assert_eq!(d.bottleneck_shape()[1..], [4, 4]);
    }

    #[test]
    fn toy_forward_shapes_and_range() {
        let g = Generator::new(GeneratorConfig::toy(), 1).unwrap();
        let imgs = random_images(2, 32, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = sample_latent(2, 8, &mut rng);
        let preds = g.predict(&imgs, &z).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].texture.shape(), &[3, 32, 32]);
        assert_eq!(preds[0].deformation.grid().shape(), &[3, 16, 16]);
        assert!(preds[0].texture.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        // The mesh is the template deformed by the predicted map.
        let m = apply_deformation(g.template(), &preds[1].deformation).unwrap();
        for (a, b) in m.vertices.iter().zip(&preds[1].mesh.vertices) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
        // Deformation starts close to zero.
        assert!(preds[0].deformation.grid().abs_max() < 0.2);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let g = Generator::new(GeneratorConfig::toy(), 1).unwrap();
        let z = Tensor::zeros(&[1, 8]);
        assert!(g.predict(&Tensor::zeros(&[1, 3, 16, 16]), &z).is_err());
        assert!(g.predict(&Tensor::zeros(&[1, 3, 32, 32]), &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn mirrored_features_are_exactly_symmetric() {
        let gen = Generator::new(GeneratorConfig::toy(), 5).unwrap();
        let g = Graph::new();
        let p = gen.params.bind(&g);
        let out = gen
            .forward(&p, g.constant(random_images(1, 32, 1)), g.constant(Tensor::zeros(&[1, 8])))
            .unwrap();
        let m = out.mirrored_features.value();
        let (_, c, h, w) = m.dims4();
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let a = m.data()[(ch * h + r) * w + col];
                    let b = m.data()[(ch * h + r) * w + (w - 1 - col)];
                    assert_eq!(a, b);
                }
            }
        }
        // Deformation: x, y mirror; z flips sign.
        let d = out.deformation.value();
        let (_, _, h, w) = d.dims4();
        for r in 0..h {
            for col in 0..w {
                let i = |ch: usize, cc: usize| d.data()[(ch * h + r) * w + cc];
                assert_eq!(i(0, col), i(0, w - 1 - col));
                assert_eq!(i(2, col), -i(2, w - 1 - col));
            }
        }
    }

    #[test]
    fn different_latents_give_different_textures() {
        let g = Generator::new(GeneratorConfig::toy(), 1).unwrap();
        let img = random_images(1, 32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = g.predict(&img, &sample_latent(1, 8, &mut rng)).unwrap();
        let b = g.predict(&img, &sample_latent(1, 8, &mut rng)).unwrap();
        assert!(a[0].texture.l1_distance(&b[0].texture) > 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let img = random_images(1, 32, 4);
        let z = Tensor::full(&[1, 8], 0.3);
        let a = Generator::new(GeneratorConfig::toy(), 7).unwrap().predict(&img, &z).unwrap();
        let b = Generator::new(GeneratorConfig::toy(), 7).unwrap().predict(&img, &z).unwrap();
        assert_eq!(a[0].texture, b[0].texture);
        assert_eq!(a[0].mesh.vertices, b[0].mesh.vertices);
    }

    #[test]
    fn input_layer_receives_gradient() {
        let gen = Generator::new(GeneratorConfig::toy(), 2).unwrap();
        let g = Graph::new();
        let p = gen.params.bind(&g);
        let out = gen
            .forward(&p, g.constant(random_images(2, 32, 3)), g.constant(Tensor::full(&[2, 8], 0.5)))
            .unwrap();
        let loss = out.texture.square().mean().add(out.vertices.square().mean());
        let grads = p.grads(&g.backward(loss));
        let first = grads[0].as_ref().expect("first encoder weight has a gradient");
        assert!(first.abs_max() > 0.0);
    }

    #[test]
    fn quarter_channels_cut_conv_params_about_sixteenfold() {
        let full = Generator::new(GeneratorConfig::desk(), 0).unwrap().conv_param_count() as f64;
        let quarter = Generator::new(
            GeneratorConfig {
                channel_scale: GeneratorConfig::desk().channel_scale / 4.0,
                ..GeneratorConfig::desk()
            },
            0,
        )
        .unwrap()
        .conv_param_count() as f64;
        let ratio = full / quarter;
        assert!(ratio > 12.0 && ratio < 17.0, "ratio {ratio}");
    }
}
