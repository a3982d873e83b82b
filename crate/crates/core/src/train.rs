//! Three-stage training loop, checkpoints and the metric log.
//!
//! Stage 1 fits novel-view losses only, stage 2 adds the same-view perceptual
//! term, stage 3 adds the UV-space adversarial term with one discriminator
//! step before every generator step. Every step draws its randomness from a
//! ChaCha8 stream keyed by the iteration, so a resumed run replays exactly.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SparseMatrix, Var};
use crate::datagen::MultiViewSample;
use crate::discriminator::{real_fake_accuracy, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{sample_latent, Generator, GeneratorConfig, PredictionVars};
use crate::losses::{
    discriminator_hinge, sameview_ablation_loss, stage1_loss, stage2_loss, stage3_generator_loss, FeatureExtractor,
    LossTerms, LossWeights, ViewBatch,
};
use crate::nn::{Adam, ParamId};
use crate::renderer::{render_var, Camera, DEFAULT_SIGMA};
use crate::tensor::Tensor;
use crate::uv_project::{build_gan_batch, uv_raster, UvRaster};

const CKPT_MAGIC: &[u8; 8] = b"P3DCKPT1";
pub const ADAM_BETAS: (f64, f64) = (0.5, 0.999);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    pub learning_rate_g: f64,
    pub learning_rate_d: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule::from_total(1000, 1e-4, 8, 0)
    }
}

impl StageSchedule {
    /// Split `total` iterations 40% / 30% / 30%.
    pub fn from_total(total: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        let s1 = total * 4 / 10;
        let s2 = total * 3 / 10;
        StageSchedule {
            stage1_iters: s1,
            stage2_iters: s2,
            stage3_iters: total - s1 - s2,
            learning_rate_g: lr,
            learning_rate_d: lr,
            batch_size,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.stage1_iters + self.stage2_iters + self.stage3_iters
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |x: f64| x.is_finite() && x > 0.0;
        if self.batch_size == 0 || !lr_ok(self.learning_rate_g) || !lr_ok(self.learning_rate_d) {
            return Err(Error::InvalidArgument(format!("bad schedule {self:?}")));
        }
        Ok(())
    }
}

/// Which objective each iteration uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    /// Stages 1, 2, 3 in order according to the schedule.
    #[default]
    MultiStage,
    /// Input-view reconstruction only, for the whole budget.
    SameViewOnly,
    /// The stage-3 objective from the first iteration.
    NoMultiStage,
}

/// Objective of one iteration; `SameView` is the same-view-only baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    SameView,
    One,
    Two,
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::SameView => 0,
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

fn default_ckpt_every() -> usize {
    500
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: StageSchedule,
    #[serde(default)]
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub curriculum: Curriculum,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Periodic checkpoint interval in iterations; 0 disables.
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Feature-extractor weights file; a fixed random pyramid when absent.
    #[serde(default)]
    pub feature_weights: Option<PathBuf>,
    #[serde(default)]
    pub feature_seed: u64,
}

impl TrainConfig {
    /// Small configuration for CPU runs.
    pub fn toy(total_iters: usize, seed: u64) -> Self {
        TrainConfig {
            schedule: StageSchedule::from_total(total_iters, 1e-3, 4, seed),
            weights: LossWeights::default(),
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            curriculum: Curriculum::MultiStage,
            dataset: None,
            checkpoint_every: default_ckpt_every(),
            sigma: DEFAULT_SIGMA,
            feature_weights: None,
            feature_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.texture_size != self.discriminator.texture_size {
            return Err(Error::InvalidArgument(format!(
                "generator texture size {} differs from discriminator input {}",
                self.generator.texture_size, self.discriminator.texture_size
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage_at(&self, iteration: usize) -> Stage {
        let s = &self.schedule;
        match self.curriculum {
            Curriculum::SameViewOnly => Stage::SameView,
            Curriculum::NoMultiStage => Stage::Three,
            Curriculum::MultiStage if iteration < s.stage1_iters => Stage::One,
            Curriculum::MultiStage if iteration < s.stage1_iters + s.stage2_iters => Stage::Two,
            Curriculum::MultiStage => Stage::Three,
        }
    }
}

/// Input view uniform over all views, target uniform over the others.
pub fn sample_view_pair<R: Rng + ?Sized>(n_views: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n_views < 2 {
        return Err(Error::Dataset(format!("need at least 2 views for a novel view, got {n_views}")));
    }
    let v1 = rng.gen_range(0..n_views);
    let mut v2 = rng.gen_range(0..n_views - 1);
    if v2 >= v1 {
        v2 += 1;
    }
    Ok((v1, v2))
}

/// RNG stream of one iteration.
pub fn step_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// One row of the metric log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub stage: u8,
    pub perceptual_novel: Option<f64>,
    pub silhouette: Option<f64>,
    pub laplacian: Option<f64>,
    pub perceptual_same: Option<f64>,
    pub adversarial: Option<f64>,
    pub total: f64,
    pub d_loss: Option<f64>,
    pub d_accuracy: Option<f64>,
    pub wall_time: f64,
}

impl LogRow {
    /// Equality of everything except the wall clock, bit for bit.
    pub fn same_losses(&self, other: &LogRow) -> bool {
        let bits = |x: Option<f64>| x.map(f64::to_bits);
        self.iter == other.iter
            && self.stage == other.stage
            && bits(self.perceptual_novel) == bits(other.perceptual_novel)
            && bits(self.silhouette) == bits(other.silhouette)
            && bits(self.laplacian) == bits(other.laplacian)
            && bits(self.perceptual_same) == bits(other.perceptual_same)
            && bits(self.adversarial) == bits(other.adversarial)
            && self.total.to_bits() == other.total.to_bits()
            && bits(self.d_loss) == bits(other.d_loss)
            && bits(self.d_accuracy) == bits(other.d_accuracy)
    }
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// How often each kind of work was done; used to check stage contracts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub same_view_renders: usize,
    pub novel_view_renders: usize,
    pub projections: usize,
    /// One per sample for the discriminator's fakes, plus one per step for
    /// the batched fake the generator is scored on.
    pub support_checks: usize,
    pub generator_steps: usize,
    pub discriminator_steps: usize,
}

/// Checks that a masked fake texture is zero wherever the visibility is.
pub fn check_fake_support(fake: &Tensor, visibility: &Tensor) -> Result<()> {
    let n = visibility.len();
    let per_sample = visibility.shape()[visibility.shape().len() - 2..].iter().product::<usize>();
    let vis = visibility.data();
    let channels = fake.len() / n;
    for (i, &x) in fake.data().iter().enumerate() {
        let b = i / (channels * per_sample);
        let t = i % per_sample;
        if vis[b * per_sample + t] == 0.0 && x != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fake texture has support outside visibility at element {i}"
            )));
        }
    }
    Ok(())
}

struct Batch {
    objects: Vec<usize>,
    v1: Vec<usize>,
    v2: Vec<usize>,
    z: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CkptHeader {
    config: TrainConfig,
    iteration: usize,
    g_adam_step: u64,
    d_adam_step: u64,
    counters: Counters,
    log: Vec<LogRow>,
    shapes: Vec<Vec<usize>>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: usize,
    pub counters: Counters,
    pub log: Vec<LogRow>,
    pub phi: FeatureExtractor,
    laplacian: Rc<SparseMatrix>,
    raster: Arc<UvRaster>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.schedule.seed;
        let generator = Generator::new(config.generator.clone(), seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), seed.wrapping_add(1))?;
        let opt_g = Adam::new(&generator.params, config.schedule.learning_rate_g, ADAM_BETAS);
        let opt_d = Adam::new(&discriminator.params, config.schedule.learning_rate_d, ADAM_BETAS);
        let phi = match &config.feature_weights {
            Some(p) => FeatureExtractor::load(p)?,
            None => FeatureExtractor::default_random(config.feature_seed),
        };
        let laplacian = Rc::new(generator.template().laplacian_matrix());
        let raster = uv_raster(generator.template(), config.generator.texture_size)?;
        Ok(Trainer {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iteration: 0,
            counters: Counters::default(),
            log: Vec::new(),
            phi,
            laplacian,
            raster,
        })
    }

    pub fn stage(&self) -> Stage {
        self.config.stage_at(self.iteration)
    }

    fn check_data(&self, data: &[MultiViewSample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let want = self.config.generator.image_size;
        for s in data {
            if s.image_size() != want {
                return Err(Error::Dataset(format!(
                    "{}: image size {} but the generator expects {want}",
                    s.id,
                    s.image_size()
                )));
            }
        }
        Ok(())
    }

    fn draw_batch(&self, data: &[MultiViewSample], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let n = self.config.schedule.batch_size;
        let mut b = Batch {
            objects: Vec::with_capacity(n),
            v1: Vec::with_capacity(n),
            v2: Vec::with_capacity(n),
            z: Tensor::zeros(&[0]),
        };
        for _ in 0..n {
            let o = rng.gen_range(0..data.len());
            let (v1, v2) = sample_view_pair(data[o].n_views(), rng)?;
            b.objects.push(o);
            b.v1.push(v1);
            b.v2.push(v2);
        }
        b.z = sample_latent(n, self.config.generator.latent_dim, rng);
        Ok(b)
    }

    fn gather(data: &[MultiViewSample], batch: &Batch, views: &[usize], masks: bool) -> Tensor {
        let items: Vec<Tensor> = batch
            .objects
            .iter()
            .zip(views)
            .map(|(&o, &v)| {
                let t = if masks { &data[o].silhouettes[v] } else { &data[o].images[v] };
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                t.clone().reshape(&shape)
            })
            .collect();
        Tensor::stack(&items)
    }

    fn render<'g>(&self, out: &PredictionVars<'g>, cams: &[&Camera]) -> Result<(Var<'g>, Var<'g>)> {
        let mut images = Vec::new();
        let mut sils = Vec::new();
        for (i, cam) in cams.iter().enumerate() {
            let r = render_var(
                out.vertices.select(i),
                out.texture.select(i),
                self.generator.template(),
                cam,
                self.config.sigma,
            )?;
            images.push(r.image);
            sils.push(r.silhouette);
        }
        Ok((Var::stack(&images), Var::stack(&sils)))
    }

    fn view_batch<'g>(
        &mut self,
        g: &'g Graph,
        data: &[MultiViewSample],
        batch: &Batch,
        out: &PredictionVars<'g>,
        views: &[usize],
        novel: bool,
    ) -> Result<ViewBatch<'g>> {
        let cams: Vec<&Camera> = batch.objects.iter().zip(views).map(|(&o, &v)| &data[o].cameras[v]).collect();
        let (image, silhouette) = self.render(out, &cams)?;
        if novel {
            self.counters.novel_view_renders += cams.len();
        } else {
            self.counters.same_view_renders += cams.len();
        }
        Ok(ViewBatch {
            gt_image: g.constant(Self::gather(data, batch, views, false)),
            gt_silhouette: g.constant(Self::gather(data, batch, views, true)),
            image,
            silhouette,
        })
    }

    /// Input-view renders for the same-view perceptual term. The predicted
    /// silhouette only selects pixels: geometry is shaped through the rendered
    /// colors, not pulled by the mask itself.
    fn same_view_masked<'g>(
        &mut self,
        g: &'g Graph,
        data: &[MultiViewSample],
        batch: &Batch,
        out: &PredictionVars<'g>,
    ) -> Result<ViewBatch<'g>> {
        let same = self.view_batch(g, data, batch, out, &batch.v1, false)?;
        Ok(ViewBatch {
            silhouette: same.silhouette.detach(),
            ..same
        })
    }

    /// One iteration of the configured curriculum.
    pub fn step(&mut self, data: &[MultiViewSample]) -> Result<LogRow> {
        self.step_with(data, true)
    }

    /// One iteration; with `update_generator = false` a stage-3 iteration only
    /// trains the discriminator and other stages change nothing.
    pub fn step_with(&mut self, data: &[MultiViewSample], update_generator: bool) -> Result<LogRow> {
        self.check_data(data)?;
        let stage = self.stage();
        let mut rng = step_rng(self.config.schedule.seed, self.iteration);
        let batch = self.draw_batch(data, &mut rng)?;
        let g = Graph::new();
        let p = self.generator.params.bind(&g);
        let images = Self::gather(data, &batch, &batch.v1, false);
        let out = self.generator.forward(&p, g.constant(images), g.constant(batch.z.clone()))?;
        let weights = self.config.weights;
        let lap = self.laplacian.clone();

        let mut row = LogRow {
            iter: self.iteration,
            stage: stage.number(),
            ..LogRow::default()
        };
        let terms: LossTerms<'_> = match stage {
            Stage::SameView => {
                let same = self.view_batch(&g, data, &batch, &out, &batch.v1, false)?;
                sameview_ablation_loss(&same, out.offsets, &lap, &weights, &self.phi)
            }
            Stage::One => {
                let novel = self.view_batch(&g, data, &batch, &out, &batch.v2, true)?;
                stage1_loss(&novel, out.offsets, &lap, &weights, &self.phi)
            }
            Stage::Two => {
                let novel = self.view_batch(&g, data, &batch, &out, &batch.v2, true)?;
                let same = self.same_view_masked(&g, data, &batch, &out)?;
                stage2_loss(&novel, &same, out.offsets, &lap, &weights, &self.phi)
            }
            Stage::Three => {
                let novel = self.view_batch(&g, data, &batch, &out, &batch.v2, true)?;
                let same = self.same_view_masked(&g, data, &batch, &out)?;
                let s2 = stage2_loss(&novel, &same, out.offsets, &lap, &weights, &self.phi);
                let fake_logits = self.adversarial_round(&g, data, &batch, &out, &mut row)?;
                stage3_generator_loss(s2, &fake_logits, &weights)
            }
        };
        let v = terms.values();
        row.perceptual_novel = v.perceptual_novel;
        row.silhouette = v.silhouette;
        row.laplacian = v.laplacian;
        row.perceptual_same = v.perceptual_same;
        row.adversarial = v.adversarial;
        row.total = v.total;
        if !v.total.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at iteration {}", self.iteration)));
        }
        if update_generator {
            let grads = g.backward(terms.total);
            let gg = p.grads(&grads);
            self.opt_g.update(&mut self.generator.params, &gg);
            self.counters.generator_steps += 1;
            if !self.generator.params.is_finite() {
                return Err(Error::NonFinite(format!("generator parameters after iteration {}", self.iteration)));
            }
        }
        self.iteration += 1;
        Ok(row)
    }

    /// Discriminator update on detached projections from the current meshes,
    /// then the fake logits for the generator step (discriminator frozen).
    fn adversarial_round<'g>(
        &mut self,
        g: &'g Graph,
        data: &[MultiViewSample],
        batch: &Batch,
        out: &PredictionVars<'g>,
        row: &mut LogRow,
    ) -> Result<Vec<Var<'g>>> {
        let preds = self.generator.to_predictions(out)?;
        let mut cond_t = Vec::new();
        let mut cond_v = Vec::new();
        let mut real_t = Vec::new();
        let mut real_v = Vec::new();
        let mut fakes = Vec::new();
        for (i, pred) in preds.iter().enumerate() {
            let sample = &data[batch.objects[i]];
            let t = build_gan_batch(sample, &pred.mesh, &pred.texture, batch.v1[i], batch.v2[i], &self.raster)?;
            self.counters.projections += 2;
            check_fake_support(&t.fake, &t.real.visibility)?;
            self.counters.support_checks += 1;
            let lead = |x: Tensor| {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                x.reshape(&s)
            };
            cond_t.push(lead(t.conditioning.texture));
            cond_v.push(lead(t.conditioning.visibility));
            real_t.push(lead(t.real.texture));
            real_v.push(lead(t.real.visibility));
            fakes.push(lead(t.fake));
        }
        let (cond_t, cond_v) = (Tensor::stack(&cond_t), Tensor::stack(&cond_v));
        let (real_t, real_v, fakes) = (Tensor::stack(&real_t), Tensor::stack(&real_v), Tensor::stack(&fakes));

        self.discriminator.update_spectral();
        {
            let gd = Graph::new();
            let pd = self.discriminator.params.bind(&gd);
            let emb = self.discriminator.embed_condition(&pd, gd.constant(cond_t.clone()), gd.constant(cond_v.clone()))?;
            let vis = gd.constant(real_v.clone());
            let real = self.discriminator.score_with_embeddings(&pd, gd.constant(real_t), vis, &emb)?;
            let fake = self.discriminator.score_with_embeddings(&pd, gd.constant(fakes), vis, &emb)?;
            let rl: Vec<Var<'_>> = real.iter().map(|s| s.logits).collect();
            let fl: Vec<Var<'_>> = fake.iter().map(|s| s.logits).collect();
            let loss = discriminator_hinge(&rl, &fl);
            let d_loss = loss.item();
            if !d_loss.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss at iteration {}", self.iteration)));
            }
            let rt: Vec<Tensor> = rl.iter().map(|v| (*v.value()).clone()).collect();
            let ft: Vec<Tensor> = fl.iter().map(|v| (*v.value()).clone()).collect();
            row.d_loss = Some(d_loss);
            row.d_accuracy = Some(real_fake_accuracy(&rt, &ft));
            let grads = gd.backward(loss);
            let dg = pd.grads(&grads);
            self.opt_d.update(&mut self.discriminator.params, &dg);
            self.counters.discriminator_steps += 1;
            if !self.discriminator.params.is_finite() {
                return Err(Error::NonFinite(format!("discriminator parameters after iteration {}", self.iteration)));
            }
        }

        let pd = self.discriminator.params.bind_frozen(g);
        let vis = g.constant(real_v);
        let fake = out.texture.mul_mask(vis);
        check_fake_support(&fake.value(), &vis.value())?;
        self.counters.support_checks += 1;
        let emb = self.discriminator.embed_condition(&pd, g.constant(cond_t), g.constant(cond_v))?;
        let scores = self.discriminator.score_with_embeddings(&pd, fake, vis, &emb)?;
        Ok(scores.iter().map(|s| s.logits).collect())
    }

    /// Train until `end` (or the schedule's end), writing checkpoints and the
    /// metric log under `out` when given.
    pub fn run_until(&mut self, data: &[MultiViewSample], end: usize, out: Option<&Path>) -> Result<()> {
        let end = end.min(self.config.schedule.total());
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let start = Instant::now();
        let offset = self.log.last().map(|r| r.wall_time).unwrap_or(0.0);
        while self.iteration < end {
            let before = self.stage();
            let result = self.step(data);
            let mut row = match result {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(dir), Error::NonFinite(_)) = (out, &e) {
                        self.save(&dir.join("nonfinite.ckpt"))?;
                        write_log(&self.log, &dir.join("metrics.csv"))?;
                    }
                    return Err(e);
                }
            };
            row.wall_time = offset + start.elapsed().as_secs_f64();
            self.log.push(row);
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                let boundary = self.iteration < self.config.schedule.total() && self.stage() != before;
                if boundary {
                    self.save(&dir.join(format!("stage{}.ckpt", before.number())))?;
                }
                if every > 0 && self.iteration % every == 0 {
                    self.save(&dir.join(format!("iter{:07}.ckpt", self.iteration)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join("final.ckpt"))?;
            write_log(&self.log, &dir.join("metrics.csv"))?;
        }
        Ok(())
    }

    pub fn run(&mut self, data: &[MultiViewSample], out: Option<&Path>) -> Result<()> {
        self.run_until(data, self.config.schedule.total(), out)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let (gm, gv) = self.opt_g.moments();
        let (dm, dv) = self.opt_d.moments();
        let mut all: Vec<&Tensor> = Vec::new();
        all.extend(self.generator.params.values());
        all.extend(gm);
        all.extend(gv);
        all.extend(self.discriminator.params.values());
        all.extend(dm);
        all.extend(dv);
        all
    }

    /// Header length, JSON header, then every tensor as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<Tensor> = self.tensors().into_iter().cloned().collect();
        for s in &self.discriminator.spectral {
            tensors.push(Tensor::from_vec(&[s.u.len()], s.u.clone()));
            tensors.push(Tensor::from_vec(&[s.v.len()], s.v.clone()));
        }
        let header = CkptHeader {
            config: self.config.clone(),
            iteration: self.iteration,
            g_adam_step: self.opt_g.step,
            d_adam_step: self.opt_d.step,
            counters: self.counters.clone(),
            log: self.log.clone(),
            shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 16 + 8 * tensors.iter().map(|t| t.len()).sum::<usize>());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in &tensors {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CkptHeader = serde_json::from_slice(body)?;
        let mut t = Trainer::new(header.config)?;
        let data = &bytes[16 + hlen..];
        let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if data.len() != 8 * total {
            return Err(bad("tensor data size does not match header"));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for s in &header.shapes {
            let n: usize = s.iter().product();
            let vals = data[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            tensors.push(Tensor::from_vec(s, vals));
        }
        let expect: Vec<Vec<usize>> = t.tensors().iter().map(|x| x.shape().to_vec()).collect();
        let n_sn = t.discriminator.spectral.len();
        if tensors.len() != expect.len() + 2 * n_sn || tensors.iter().zip(&expect).any(|(a, b)| a.shape() != &b[..]) {
            return Err(bad("tensor layout does not match the configured networks"));
        }
        let mut it = tensors.into_iter();
        let mut take = |k: usize| -> Vec<Tensor> { it.by_ref().take(k).collect() };
        let ng = t.generator.params.len();
        let nd = t.discriminator.params.len();
        for (i, v) in take(ng).into_iter().enumerate() {
            *t.generator.params.get_mut(ParamId(i)) = v;
        }
        let (gm, gv) = (take(ng), take(ng));
        t.opt_g.set_moments(header.g_adam_step, gm, gv)?;
        for (i, v) in take(nd).into_iter().enumerate() {
            *t.discriminator.params.get_mut(ParamId(i)) = v;
        }
        let (dm, dv) = (take(nd), take(nd));
        t.opt_d.set_moments(header.d_adam_step, dm, dv)?;
        for k in 0..n_sn {
            let u = take(1).remove(0).into_data();
            let v = take(1).remove(0).into_data();
            let s = &mut t.discriminator.spectral[k];
            if u.len() != s.u.len() || v.len() != s.v.len() {
                return Err(bad("spectral state size mismatch"));
            }
            s.u = u;
            s.v = v;
        }
        t.iteration = header.iteration;
        t.counters = header.counters;
        t.log = header.log;
        Ok(t)
    }
}
