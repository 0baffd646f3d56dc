//! Mixed-branch training with alternating generator and discriminator updates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics, PoseDistribution};
use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::io::{save_checkpoint, Checkpoint};
use crate::losses::{d_term_node, g_adv_node, recon_node, FeatureExtractor, LossConfig, R1Target};
use crate::model::{weight_mask, GNerf, SceneEmbedding};
use crate::optim::{Adam, AdamConfig};
use crate::oracle::{item_rng, Triplet};
use crate::render::RenderConfig;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
    pub seed: u64,
    pub gamma_threshold: f64,
    pub d_extra_pose_count: usize,
    pub use_synthetic: bool,
    pub use_discriminator: bool,
    /// Steps between checkpoints; 0 keeps only the first and last.
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Synthetic,
    Real,
}

/// Synthetic branch iff `γ ≤ threshold`.
pub fn select_branch(gamma: f64, threshold: f64) -> Result<Branch> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("γ = {gamma} is outside [0, 1]")));
    }
    Ok(if gamma <= threshold {
        Branch::Synthetic
    } else {
        Branch::Real
    })
}

const STEP_STREAM_SALT: u64 = 0x7374_6570_7374_6570;

/// Random stream owned by training step `step`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    item_rng(seed ^ STEP_STREAM_SALT, step)
}

/// Branch taken at `step`; `γ` is the first draw of the step's stream.
pub fn branch_for_step(cfg: &TrainConfig, step: usize) -> Result<(Branch, ChaCha8Rng)> {
    let mut rng = step_rng(cfg.seed, step);
    let gamma: f64 = rng.gen();
    let branch = if cfg.use_synthetic {
        select_branch(gamma, cfg.gamma_threshold)?
    } else {
        Branch::Real
    };
    Ok((branch, rng))
}

/// Training pools: multi-view triplets and single-view images (the
/// reference image and pose of each `real` entry).
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub synthetic: Vec<Triplet<T>>,
    pub real: Vec<Triplet<T>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn cast<U: Scalar>(&self) -> TrainData<U> {
        TrainData {
            synthetic: self.synthetic.iter().map(Triplet::cast).collect(),
            real: self.real.iter().map(Triplet::cast).collect(),
        }
    }
}

/// A depth map with its validity mask and camera.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample<T> {
    pub depth: Image<T>,
    pub mask: Vec<bool>,
    pub pose: CameraPose<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem<T> {
    pub reference: Image<T>,
    pub target: Image<T>,
    pub target_pose: CameraPose<T>,
    pub reference_pose: CameraPose<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub branch: Branch,
    pub items: Vec<BatchItem<T>>,
    /// `D_syn` maps with their poses `P_d`, the discriminator's real side.
    pub real_depths: Vec<DepthSample<T>>,
}

pub fn build_batch<T: Scalar, R: Rng + ?Sized>(
    branch: Branch,
    data: &TrainData<T>,
    batch_size: usize,
    want_depths: bool,
    rng: &mut R,
) -> Result<Batch<T>> {
    let mut items = Vec::with_capacity(batch_size);
    let mut real_depths = Vec::new();
    for _ in 0..batch_size {
        let item = match branch {
            Branch::Synthetic => {
                if data.synthetic.is_empty() {
                    return Err(Error::EmptyDataset("synthetic pool".into()));
                }
                let t = &data.synthetic[rng.gen_range(0..data.synthetic.len())];
                BatchItem {
                    reference: t.image_f.clone(),
                    target: t.image_s.clone(),
                    target_pose: t.poses.target,
                    reference_pose: t.poses.reference,
                }
            }
            Branch::Real => {
                if data.real.is_empty() {
                    return Err(Error::EmptyDataset("real pool".into()));
                }
                let t = &data.real[rng.gen_range(0..data.real.len())];
                BatchItem {
                    reference: t.image_f.clone(),
                    target: t.image_f.clone(),
                    target_pose: t.poses.reference,
                    reference_pose: t.poses.reference,
                }
            }
        };
        items.push(item);
        if want_depths {
            if data.synthetic.is_empty() {
                return Err(Error::EmptyDataset("synthetic pool (discriminator depths)".into()));
            }
            let t = &data.synthetic[rng.gen_range(0..data.synthetic.len())];
            real_depths.push(DepthSample {
                depth: t.depth.clone(),
                mask: t.mask.clone(),
                pose: t.poses.depth,
            });
        }
    }
    Ok(Batch {
        branch,
        items,
        real_depths,
    })
}

/// Loss breakdown of one generator update.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorRecord<T> {
    pub l1: f64,
    pub ssim_loss: f64,
    pub perceptual: f64,
    pub recon: f64,
    pub g_adv: f64,
    pub total: f64,
    /// Rendered depth maps of the batch, used as discriminator fakes.
    pub fakes: Vec<DepthSample<T>>,
    pub embeddings: Vec<SceneEmbedding<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DiscriminatorRecord {
    pub d_adv: f64,
    pub r1: f64,
    pub real_logit: f64,
    pub fake_logit: f64,
    pub fake_count: usize,
}

/// One row of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub branch: Branch,
    pub l1: f64,
    pub ssim_loss: f64,
    pub perceptual: f64,
    pub g_adv: f64,
    pub d_adv: f64,
    pub r1: f64,
    pub total: f64,
    /// Depth maps the discriminator saw as fake this step.
    pub fakes: usize,
}

pub const LOG_HEADER: &str = "step,l1,ssim_loss,perceptual,g_adv,d_adv,r1,total";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.l1, self.ssim_loss, self.perceptual, self.g_adv, self.d_adv, self.r1, self.total
        )
    }
}

pub fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `‖∂D/∂x‖²` at a depth input and its parameter gradient.
///
/// The parameter gradient `2·H_θx·(∂D/∂x)` is a Hessian-vector product,
/// obtained by re-running the backward pass in dual numbers with the input
/// perturbed along `∂D/∂x`.
pub fn r1_penalty<T: Scalar>(model: &GNerf<T>, sample: &DepthSample<T>) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = model.discriminator.bind(&mut g, false);
    let x = g.param(sample.depth.to_tensor());
    let logit = model.discriminate_node(&mut g, &p, x, &sample.mask, &sample.pose)?;
    let grads = g.backward(logit);
    let gx = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[1, sample.depth.height, sample.depth.width]));
    let sq = gx.sq_norm();

    let dual: GNerf<Dual<T>> = model.cast_discriminator();
    let mut gd = Graph::new();
    let pd = dual.discriminator.bind(&mut gd, true);
    let xd = Tensor::new(
        gx.shape().to_vec(),
        sample
            .depth
            .data
            .iter()
            .zip(gx.data())
            .map(|(&v, &d)| Dual::new(v, d))
            .collect(),
    )?;
    let xd = gd.constant(xd);
    let pose: CameraPose<Dual<T>> = sample.pose.cast();
    let ld = dual.discriminate_node(&mut gd, &pd, xd, &sample.mask, &pose)?;
    let dg = gd.backward(ld);
    let two = T::lit(2.0);
    let hvp = pd
        .iter()
        .zip(&model.discriminator.tensors)
        .map(|(&id, t)| match dg.wrt(id) {
            Some(d) => Tensor::new(d.shape().to_vec(), d.data().iter().map(|v| v.eps * two).collect()).unwrap(),
            None => Tensor::zeros(t.shape()),
        })
        .collect();
    Ok((sq, hvp))
}

fn grads_or_zero<T: Scalar>(
    grads: &crate::graph::Gradients<T>,
    ids: &[crate::graph::NodeId],
    shapes: &[Tensor<T>],
) -> Vec<Tensor<T>> {
    ids.iter()
        .zip(shapes)
        .map(|(&id, t)| grads.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Owns the model, both optimizers and the fixed loss machinery.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub features: FeatureExtractor<T>,
    pub intrinsics: Intrinsics<T>,
    pub render: RenderConfig<T>,
    pub poses: PoseDistribution<T>,
    pub model: GNerf<T>,
    pub gen_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        cfg: TrainConfig,
        loss: LossConfig,
        model: GNerf<T>,
        intrinsics: Intrinsics<T>,
        render: RenderConfig<T>,
        poses: PoseDistribution<T>,
    ) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.gamma_threshold) {
            return Err(Error::Config("gamma_threshold must lie in [0, 1]".into()));
        }
        if intrinsics.width != model.cfg.resolution || intrinsics.height != model.cfg.resolution {
            return Err(Error::Config(format!(
                "camera is {}×{} but the model expects {}²",
                intrinsics.width, intrinsics.height, model.cfg.resolution
            )));
        }
        render.validate()?;
        poses.validate()?;
        let features = FeatureExtractor::new(&loss, 3)?;
        let gen_opt = Adam::new(cfg.generator, &model.generator.tensors)?;
        let disc_opt = Adam::new(cfg.discriminator, &model.discriminator.tensors)?;
        Ok(Self {
            cfg,
            loss,
            features,
            intrinsics,
            render,
            poses,
            model,
            gen_opt,
            disc_opt,
            step: 0,
        })
    }

    fn offsets<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.render.offsets(self.intrinsics.pixel_count(), rng)
    }

    fn adversarial(&self) -> bool {
        self.cfg.use_discriminator && self.loss.lambda_g > 0.0
    }

    /// One update of `E` and `G_n`; `D_g` is frozen.
    pub fn generator_step<R: Rng + ?Sized>(&mut self, batch: &Batch<T>, rng: &mut R) -> Result<GeneratorRecord<T>> {
        let model = &self.model;
        let mut g = Graph::new();
        let gp = model.generator.bind(&mut g, true);
        let dp = model.discriminator.bind(&mut g, false);
        let inv_b = T::one() / T::lit(batch.items.len() as f64);
        let (mut l1, mut ssim_loss, mut perceptual, mut g_adv, mut recon) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut total = None;
        let mut fakes = Vec::new();
        let mut embeddings = Vec::new();
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for item in &batch.items {
            let reference = g.constant(item.reference.to_tensor());
            let emb = model.encode_node(&mut g, &gp, reference)?;
            embeddings.push(SceneEmbedding(g.value(emb).data().to_vec()));
            let offsets = self.offsets(rng);
            let out = model.render_node(&mut g, &gp, emb, &item.target_pose, &self.intrinsics, &self.render, &offsets)?;
            let target = g.constant(item.target.to_tensor());
            let rec = recon_node(&mut g, out.image, target, &self.loss, &self.features)?;
            l1 += cast::<T, f64>(g.scalar(rec.l1));
            ssim_loss += cast::<T, f64>(g.scalar(rec.ssim_loss));
            perceptual += cast::<T, f64>(g.scalar(rec.perceptual));
            recon += cast::<T, f64>(g.scalar(rec.total));
            let mask = weight_mask(g.value(out.weights).data());
            let mut item_total = rec.total;
            if self.adversarial() {
                let logit = model.discriminate_node(&mut g, &dp, out.depth, &mask, &item.target_pose)?;
                let adv = g_adv_node(&mut g, logit, &self.loss);
                g_adv += cast::<T, f64>(g.scalar(adv));
                let weighted = g.scale(adv, T::lit(self.loss.lambda_g));
                item_total = g.add(item_total, weighted);
            }
            fakes.push(DepthSample {
                depth: Image::new(w, h, 1, g.value(out.depth).data().to_vec())?,
                mask,
                pose: item.target_pose,
            });
            total = Some(match total {
                Some(t) => g.add(t, item_total),
                None => item_total,
            });
        }
        let total = total.ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
        let total = g.scale(total, inv_b);
        let value: f64 = cast(g.scalar(total));
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss",
                step: self.step,
            });
        }
        let grads = g.backward(total);
        let grads = grads_or_zero(&grads, &gp, &model.generator.tensors);
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                what: "generator gradient",
                step: self.step,
            });
        }
        self.gen_opt.step(&mut self.model.generator.tensors, &grads);
        let n = batch.items.len() as f64;
        Ok(GeneratorRecord {
            l1: l1 / n,
            ssim_loss: ssim_loss / n,
            perceptual: perceptual / n,
            recon: recon / n,
            g_adv: g_adv / n,
            total: value,
            fakes,
            embeddings,
        })
    }

    /// Depth maps rendered from `count` random poses of `p_ξ`.
    pub fn extra_fakes<R: Rng + ?Sized>(
        &self,
        embedding: &SceneEmbedding<T>,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<DepthSample<T>>> {
        (0..count)
            .map(|_| {
                let pose = self.poses.sample(rng);
                let offsets = self.offsets(rng);
                let view = self
                    .model
                    .generate(&pose, embedding, &self.intrinsics, &self.render, &offsets)?;
                Ok(DepthSample {
                    mask: view.mask(),
                    depth: view.depth,
                    pose,
                })
            })
            .collect()
    }

    /// One update of `D_g` against `fakes`; `E` and `G_n` are frozen.
    pub fn discriminator_step(&mut self, batch: &Batch<T>, fakes: &[DepthSample<T>]) -> Result<DiscriminatorRecord> {
        if batch.real_depths.is_empty() || fakes.is_empty() {
            return Err(Error::EmptyDataset("discriminator needs real and fake depths".into()));
        }
        let model = &self.model;
        let mut g = Graph::new();
        let dp = model.discriminator.bind(&mut g, true);
        let mut real_sum = None;
        let mut real_logit = 0.0;
        for s in &batch.real_depths {
            let d = g.constant(s.depth.to_tensor());
            let logit = model.discriminate_node(&mut g, &dp, d, &s.mask, &s.pose)?;
            real_logit += cast::<T, f64>(g.scalar(logit));
            let term = d_term_node(&mut g, logit, true, &self.loss);
            real_sum = Some(match real_sum {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        let mut fake_sum = None;
        let mut fake_logit = 0.0;
        for s in fakes {
            let d = g.constant(s.depth.to_tensor());
            let logit = model.discriminate_node(&mut g, &dp, d, &s.mask, &s.pose)?;
            fake_logit += cast::<T, f64>(g.scalar(logit));
            let term = d_term_node(&mut g, logit, false, &self.loss);
            fake_sum = Some(match fake_sum {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        let nr = batch.real_depths.len();
        let nf = fakes.len();
        let real_mean = g.scale(real_sum.expect("non-empty"), T::one() / T::lit(nr as f64));
        let fake_mean = g.scale(fake_sum.expect("non-empty"), T::one() / T::lit(nf as f64));
        let adv = g.add(real_mean, fake_mean);
        let adv_value: f64 = cast(g.scalar(adv));
        let grads = g.backward(adv);
        let mut grads = grads_or_zero(&grads, &dp, &model.discriminator.tensors);

        let lambda = self.loss.lambda_r1;
        let mut r1 = 0.0;
        if lambda > 0.0 {
            let penalized: &[DepthSample<T>] = match self.loss.r1_on {
                R1Target::Fake => fakes,
                R1Target::Real => &batch.real_depths,
            };
            let scale = T::lit(lambda / penalized.len() as f64);
            for s in penalized {
                let (sq, hvp) = r1_penalty(model, s)?;
                r1 += cast::<T, f64>(sq) / penalized.len() as f64;
                for (acc, h) in grads.iter_mut().zip(&hvp) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(h.data()) {
                        *a += scale * v;
                    }
                }
            }
        }
        let d_adv = adv_value + lambda * r1;
        if !d_adv.is_finite() || grads.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                step: self.step,
            });
        }
        self.disc_opt.step(&mut self.model.discriminator.tensors, &grads);
        Ok(DiscriminatorRecord {
            d_adv,
            r1,
            real_logit: real_logit / nr as f64,
            fake_logit: fake_logit / nf as f64,
            fake_count: nf,
        })
    }

    /// Branch selection, batch assembly, generator update and (when enabled)
    /// discriminator update for the current step.
    pub fn train_step(&mut self, data: &TrainData<T>) -> Result<StepRecord> {
        let (branch, mut rng) = branch_for_step(&self.cfg, self.step)?;
        let batch = build_batch(branch, data, self.cfg.batch_size, self.cfg.use_discriminator, &mut rng)?;
        let gen = self.generator_step(&batch, &mut rng)?;
        let mut disc = DiscriminatorRecord::default();
        if self.cfg.use_discriminator {
            let mut fakes = gen.fakes.clone();
            if branch == Branch::Real {
                for e in &gen.embeddings {
                    fakes.extend(self.extra_fakes(e, self.cfg.d_extra_pose_count, &mut rng)?);
                }
            }
            disc = self.discriminator_step(&batch, &fakes)?;
        }
        let record = StepRecord {
            step: self.step,
            branch,
            l1: gen.l1,
            ssim_loss: gen.ssim_loss,
            perceptual: gen.perceptual,
            g_adv: gen.g_adv,
            d_adv: disc.d_adv,
            r1: disc.r1,
            total: gen.total,
            fakes: disc.fake_count,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            tensors: self.model.named_tensors(),
        }
    }

    /// Runs the remaining steps up to `total_steps`. With an output
    /// directory, writes `metrics.csv` and checkpoints `ckpt_NNNNNN.gnck`
    /// at step 0, every `checkpoint_every` steps and at the end.
    pub fn fit(&mut self, data: &TrainData<T>, out: Option<(&Path, &str)>) -> Result<FitSummary> {
        let mut records = Vec::with_capacity(self.cfg.total_steps);
        let mut checkpoints = Vec::new();
        let save = |trainer: &Self, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
            if let Some((dir, hash)) = out {
                let path = dir.join(format!("ckpt_{:06}.gnck", trainer.step));
                save_checkpoint(&path, &trainer.checkpoint(hash))?;
                checkpoints.push(path);
            }
            Ok(())
        };
        if let Some((dir, _)) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save(self, &mut checkpoints)?;
        let mut log = match out {
            Some((dir, _)) => {
                let path = dir.join("metrics.csv");
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        while self.step < self.cfg.total_steps {
            let r = self.train_step(data)?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
            records.push(r);
            let every = self.cfg.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == self.cfg.total_steps {
                if checkpoints.last().map_or(true, |p| !p.ends_with(format!("ckpt_{:06}.gnck", self.step))) {
                    save(self, &mut checkpoints)?;
                }
            }
        }
        Ok(FitSummary { records, checkpoints })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl FitSummary {
    pub fn synthetic_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let s = self.records.iter().filter(|r| r.branch == Branch::Synthetic).count();
        s as f64 / self.records.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_boundaries() {
        assert_eq!(select_branch(0.3, 0.5).unwrap(), Branch::Synthetic);
        assert_eq!(select_branch(0.5, 0.5).unwrap(), Branch::Synthetic);
        assert_eq!(select_branch(0.51, 0.5).unwrap(), Branch::Real);
        assert!(select_branch(1.2, 0.5).is_err());
        assert!(select_branch(-0.1, 0.5).is_err());
    }
}
