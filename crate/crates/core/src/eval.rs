//! Metrics, the truncation sweep and the ablation suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{perceptual_loss, ssim, FeatureExtractor, LossConfig};
use crate::model::GNerf;
use crate::oracle::{item_rng, SynthesisSetup, Triplet};
use crate::render::RenderConfig;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;
use crate::train::{FitSummary, TrainData};

pub const PSNR_CAP: f64 = 99.0;

/// Median of `values`; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn check_same<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    a.same_shape(b)
}

/// Mean squared depth error over masked pixels. With `align`, each map is
/// shifted so its masked median is zero.
pub fn depth_mse<T: Scalar>(pred: &Image<T>, gt: &Image<T>, mask: &[bool], align: bool) -> Result<f64> {
    check_same(pred, gt)?;
    if pred.channels != 1 {
        return Err(Error::InvalidArgument(format!("depth maps have one channel, got {}", pred.channels)));
    }
    if mask.len() != pred.pixels() {
        return Err(Error::DimensionMismatch {
            expected: pred.pixels(),
            got: mask.len(),
        });
    }
    let pick = |img: &Image<T>| -> Vec<f64> {
        img.data
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| cast(v))
            .collect()
    };
    let p = pick(pred);
    let g = pick(gt);
    if p.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mp, mg) = if align {
        (median(&p).unwrap_or(0.0), median(&g).unwrap_or(0.0))
    } else {
        (0.0, 0.0)
    };
    let sum: f64 = p.iter().zip(&g).map(|(a, b)| ((a - mp) - (b - mg)).powi(2)).sum();
    Ok(sum / p.len() as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (cast::<T, f64>(x) - cast::<T, f64>(y)).powi(2))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Largest odd window not exceeding `window` or the image side.
pub fn fitted_window(window: usize, height: usize, width: usize) -> usize {
    let side = window.min(height).min(width).max(1);
    if side % 2 == 0 {
        side - 1
    } else {
        side
    }
}

/// SSIM with the window shrunk to fit small images.
pub fn metric_ssim<T: Scalar>(a: &Image<T>, b: &Image<T>, window: usize) -> Result<f64> {
    check_same(a, b)?;
    Ok(cast(ssim(a, b, fitted_window(window, a.height, a.width))?))
}

/// Frozen random-feature encoder used as an identity probe.
#[derive(Clone, Debug)]
pub struct ProbeEncoder<T> {
    features: FeatureExtractor<T>,
}

impl<T: Scalar> ProbeEncoder<T> {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = LossConfig {
            perceptual_seed: seed,
            perceptual_channels: 16,
            perceptual_scales: vec![0, 1, 2],
            perceptual_mean_subtract: true,
            ..LossConfig::default()
        };
        Ok(Self {
            features: FeatureExtractor::new(&cfg, 3)?,
        })
    }

    /// Feature maps average-pooled over a 2×2 grid of image quadrants.
    pub fn embed(&self, image: &Image<T>) -> Vec<f64> {
        let mut out = Vec::new();
        for map in self.features.feature_maps(image) {
            let (c, h, w) = match *map.shape() {
                [c, h, w] => (c, h, w),
                _ => unreachable!("feature maps are [C, H, W]"),
            };
            let d = map.data();
            for ch in 0..c {
                for (ys, ye) in [(0, h.div_ceil(2)), (h / 2, h)] {
                    for (xs, xe) in [(0, w.div_ceil(2)), (w / 2, w)] {
                        let mut s = 0.0;
                        for y in ys..ye {
                            for x in xs..xe {
                                s += cast::<T, f64>(d[(ch * h + y) * w + x]);
                            }
                        }
                        out.push(s / ((ye - ys) * (xe - xs)) as f64);
                    }
                }
            }
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of the probe embeddings of two images.
pub fn identity_proxy<T: Scalar>(input: &Image<T>, novel: &Image<T>, probe: &ProbeEncoder<T>) -> Result<f64> {
    check_same(input, novel)?;
    Ok(cosine(&probe.embed(input), &probe.embed(novel)))
}

/// Mean pairwise perceptual distance.
pub fn diversity<T: Scalar>(images: &[Image<T>], features: &FeatureExtractor<T>) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 2 images, got {}",
            images.len()
        )));
    }
    for im in &images[1..] {
        check_same(&images[0], im)?;
    }
    let maps: Vec<Vec<Tensor<T>>> = images.par_iter().map(|im| features.feature_maps(im)).collect();
    let n = maps.len();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in i + 1..n {
                for (a, b) in maps[i].iter().zip(&maps[j]) {
                    let d: f64 = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| cast::<T, f64>(x - y).powi(2))
                        .sum();
                    s += d / a.len() as f64;
                }
            }
            s
        })
        .sum();
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub psi: f64,
    pub diversity: f64,
    pub geometry_error: f64,
    pub count: usize,
}

/// Diversity of frontal renders and mean depth error of noisy scenes
/// against their noise-free versions, per `ψ`. Scene `i` uses the same base
/// latent for every `ψ`.
pub fn truncation_sweep(
    setup: &SynthesisSetup<f64>,
    psis: &[f64],
    count: usize,
    seed: u64,
    features: &FeatureExtractor<f64>,
    align: bool,
) -> Result<Vec<SweepRow>> {
    if count < 2 {
        return Err(Error::InvalidArgument("truncation sweep needs at least 2 scenes".into()));
    }
    let pose = setup.poses.frontal();
    psis.iter()
        .map(|&psi| {
            if !(0.0..=1.0).contains(&psi) {
                return Err(Error::InvalidArgument(format!("ψ = {psi} is outside [0, 1]")));
            }
            let items = (0..count)
                .into_par_iter()
                .map(|i| {
                    let mut rng = item_rng(seed, i);
                    let w = setup.generator.sample_latent(psi, &mut rng)?;
                    let scene = setup.generator.decode_scene(&w)?;
                    let noisy = setup
                        .generator
                        .render_scene(&scene, &pose, &setup.intrinsics, &setup.render)?;
                    let clean = setup
                        .generator
                        .render_scene(&scene.clean(), &pose, &setup.intrinsics, &setup.render)?;
                    let err = depth_mse(&noisy.depth, &clean.depth, &clean.mask(), align)?;
                    Ok((noisy.image, err))
                })
                .collect::<Result<Vec<_>>>()?;
            let errs: f64 = items.iter().map(|(_, e)| e).sum();
            let images: Vec<Image<f64>> = items.into_iter().map(|(im, _)| im).collect();
            Ok(SweepRow {
                psi,
                diversity: diversity(&images, features)?,
                geometry_error: errs / count as f64,
                count,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("psi,diversity,geometry_error,count\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e},{}", r.psi, r.diversity, r.geometry_error, r.count);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Frontal,
    Side,
}

/// `Side` when `|yaw| ≥ side_yaw`, otherwise `Frontal`.
pub fn split_of(yaw: f64, side_yaw: f64) -> Split {
    if yaw.abs() >= side_yaw {
        Split::Side
    } else {
        Split::Frontal
    }
}

/// Ground truth for one held-out view.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalView {
    pub yaw: f64,
    pub pose: CameraPose<f64>,
    pub image: Image<f64>,
    pub depth: Image<f64>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTarget {
    pub input: Image<f64>,
    pub views: Vec<EvalView>,
}

/// Noise-free oracle renders of every test scene at each yaw (pitch 0).
pub fn eval_targets(setup: &SynthesisSetup<f64>, pool: &[Triplet<f64>], yaws: &[f64]) -> Result<Vec<EvalTarget>> {
    pool.par_iter()
        .map(|t| {
            let scene = setup.generator.decode_scene(&t.latent)?.clean();
            let views = yaws
                .iter()
                .map(|&yaw| {
                    let pose = setup.poses.pose_from_angles(yaw, 0.0)?;
                    let v = setup
                        .generator
                        .render_scene(&scene, &pose, &setup.intrinsics, &setup.render)?;
                    Ok(EvalView {
                        yaw,
                        pose,
                        mask: v.mask(),
                        image: v.image,
                        depth: v.depth,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalTarget {
                input: t.image_f.clone(),
                views,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub samples: usize,
    pub config_hash: String,
    pub side_yaw: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: MetricReport,
    pub frontal: MetricReport,
    pub side: MetricReport,
}

impl EvalReport {
    pub fn split(&self, split: Split) -> &MetricReport {
        match split {
            Split::All => &self.all,
            Split::Frontal => &self.frontal,
            Split::Side => &self.side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub side_yaw: f64,
    pub align: bool,
    pub ssim_window: usize,
    pub probe_seed: u64,
}

impl EvalSettings {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            side_yaw: cfg.side_yaw,
            align: cfg.depth_align,
            ssim_window: cfg.ssim_window,
            probe_seed: cfg.probe_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct ViewMetrics {
    depth: Option<f64>,
    psnr: f64,
    ssim: f64,
    identity: f64,
}

#[derive(Default)]
struct Accumulator {
    views: usize,
    depth_views: usize,
    depth: f64,
    psnr: f64,
    ssim: f64,
    identity: f64,
}

impl Accumulator {
    fn push(&mut self, m: &ViewMetrics) {
        self.views += 1;
        if let Some(d) = m.depth {
            self.depth_views += 1;
            self.depth += d;
        }
        self.psnr += m.psnr;
        self.ssim += m.ssim;
        self.identity += m.identity;
    }

    fn report(&self, split: Split, settings: &EvalSettings, hash: &str) -> Result<MetricReport> {
        if self.views == 0 || self.depth_views == 0 {
            return Err(Error::EmptyDataset(format!("no evaluation views in the {split:?} split")));
        }
        let n = self.views as f64;
        let metrics = BTreeMap::from([
            ("depth_mse".to_string(), self.depth / self.depth_views as f64),
            ("psnr".to_string(), self.psnr / n),
            ("ssim".to_string(), self.ssim / n),
            ("identity".to_string(), self.identity / n),
        ]);
        Ok(MetricReport {
            split,
            samples: self.views,
            config_hash: hash.to_string(),
            side_yaw: settings.side_yaw,
            metrics,
        })
    }
}

/// Encodes each test input, renders it at every target pose and scores the
/// result against the oracle.
pub fn evaluate_model<T: Scalar>(
    model: &GNerf<T>,
    targets: &[EvalTarget],
    intrinsics: &Intrinsics<f64>,
    render: &RenderConfig<f64>,
    settings: &EvalSettings,
    config_hash: &str,
) -> Result<EvalReport> {
    let probe = ProbeEncoder::<f64>::new(settings.probe_seed)?;
    let intr: Intrinsics<T> = intrinsics.cast();
    let rcfg: RenderConfig<T> = render.cast();
    let offsets = rcfg.offsets(intr.pixel_count(), &mut ChaCha8Rng::seed_from_u64(settings.probe_seed));
    let per_target = targets
        .par_iter()
        .map(|t| {
            let emb = model.encode(&t.input.cast())?;
            let input_embedding = probe.embed(&t.input);
            t.views
                .iter()
                .map(|v| {
                    let out = model.generate(&v.pose.cast(), &emb, &intr, &rcfg, &offsets)?;
                    let image: Image<f64> = out.image.cast();
                    let depth: Image<f64> = out.depth.cast();
                    let depth = match depth_mse(&depth, &v.depth, &v.mask, settings.align) {
                        Ok(d) => Some(d),
                        Err(Error::EmptyMask) => None,
                        Err(e) => return Err(e),
                    };
                    Ok((
                        v.yaw,
                        ViewMetrics {
                            depth,
                            psnr: psnr(&image, &v.image)?,
                            ssim: metric_ssim(&image, &v.image, settings.ssim_window)?,
                            identity: cosine(&input_embedding, &probe.embed(&image)),
                        },
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = Accumulator::default();
    let mut frontal = Accumulator::default();
    let mut side = Accumulator::default();
    for (yaw, m) in per_target.iter().flatten() {
        all.push(m);
        match split_of(*yaw, settings.side_yaw) {
            Split::Side => side.push(m),
            _ => frontal.push(m),
        }
    }
    Ok(EvalReport {
        all: all.report(Split::All, settings, config_hash)?,
        frontal: frontal.report(Split::Frontal, settings, config_hash)?,
        side: side.report(Split::Side, settings, config_hash)?,
    })
}

/// The four ablation rows as config overrides.
pub fn ablation_arms() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("no-synthetic", vec!["use_synthetic=false", "use_discriminator=false"]),
        ("psi=1.0", vec!["psi=1.0", "use_synthetic=true", "use_discriminator=false"]),
        ("psi=0.5", vec!["psi=0.5", "use_synthetic=true", "use_discriminator=false"]),
        ("psi=0.5+D", vec!["psi=0.5", "use_synthetic=true", "use_discriminator=true"]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub config_hash: String,
    pub report: EvalReport,
    pub final_recon: f64,
    pub initial_recon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub runs: Vec<SeedRun>,
    /// Medians across seeds: `depth`, `depth_side`, `psnr`, `ssim`, `identity`.
    pub medians: BTreeMap<String, f64>,
}

impl AblationRow {
    pub fn median(&self, key: &str) -> f64 {
        self.medians.get(key).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub side_yaw: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("config,depth,depth_side,psnr,ssim,identity,seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:.4},{:.4},{:.4},{}",
                r.name,
                r.median("depth"),
                r.median("depth_side"),
                r.median("psnr"),
                r.median("ssim"),
                r.median("identity"),
                r.runs.len()
            );
        }
        s
    }
}

fn mean_recon(summary: &FitSummary, head: bool) -> f64 {
    let n = summary.records.len().min(50);
    if n == 0 {
        return f64::NAN;
    }
    let slice = if head {
        &summary.records[..n]
    } else {
        &summary.records[summary.records.len() - n..]
    };
    slice.iter().map(|r| r.l1 + r.ssim_loss + r.perceptual).sum::<f64>() / n as f64
}

/// Trains every arm for every seed on shared data pools and reports
/// per-arm medians. `progress` is called after each finished run.
pub fn ablation_suite(
    base: &Config,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let setup = base.synthesis_setup()?;
    let real = base.pool(&setup, &base.real_pool(), base.real_dir.as_deref())?;
    let test = base.pool(&setup, &base.test_pool(), base.test_dir.as_deref())?;
    let targets = eval_targets(&setup, &test, &base.eval_yaws)?;
    let settings = EvalSettings::from_config(base);
    let mut synthetic_cache: Vec<(u64, Vec<Triplet<f32>>)> = Vec::new();
    let real32: Vec<Triplet<f32>> = real.iter().map(Triplet::cast).collect();
    let mut rows = Vec::new();
    for (name, overrides) in ablation_arms() {
        let arm = base.with_overrides(&overrides)?;
        let synthetic = if arm.use_synthetic || arm.use_discriminator {
            let key = arm.psi.to_bits();
            if !synthetic_cache.iter().any(|(k, _)| *k == key) {
                let pool = arm.pool(&setup, &arm.synthetic_pool(), None)?;
                synthetic_cache.push((key, pool.iter().map(Triplet::cast).collect()));
            }
            synthetic_cache.iter().find(|(k, _)| *k == key).map(|(_, p)| p.clone()).unwrap_or_default()
        } else {
            Vec::new()
        };
        let data = TrainData {
            synthetic,
            real: real32.clone(),
        };
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = arm.with_overrides(&[format!("seed={seed}"), format!("init_seed={}", base.init_seed.wrapping_add(seed))])?;
            let hash = cfg.hash();
            let mut trainer = cfg.trainer::<f32>()?;
            let summary = trainer.fit(&data, None)?;
            let report = evaluate_model(&trainer.model, &targets, &setup.intrinsics, &setup.render, &settings, &hash)?;
            progress(name, seed, &report);
            runs.push(SeedRun {
                seed,
                config_hash: hash,
                report,
                final_recon: mean_recon(&summary, false),
                initial_recon: mean_recon(&summary, true),
            });
        }
        let med = |f: &dyn Fn(&SeedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        let metric = |split: Split, key: &'static str| move |r: &SeedRun| r.report.split(split).metrics[key];
        let medians = BTreeMap::from([
            ("depth".to_string(), med(&metric(Split::All, "depth_mse"))),
            ("depth_side".to_string(), med(&metric(Split::Side, "depth_mse"))),
            ("psnr".to_string(), med(&metric(Split::All, "psnr"))),
            ("ssim".to_string(), med(&metric(Split::All, "ssim"))),
            ("identity".to_string(), med(&metric(Split::All, "identity"))),
        ]);
        rows.push(AblationRow {
            name: name.to_string(),
            runs,
            medians,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        side_yaw: base.side_yaw,
        rows,
    })
}

/// Mean perceptual distance between images and references, for logging.
pub fn mean_perceptual<T: Scalar>(a: &[Image<T>], b: &[Image<T>], features: &FeatureExtractor<T>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += cast::<T, f64>(perceptual_loss(x, y, features)?);
    }
    Ok(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn split_threshold() {
        assert_eq!(split_of(0.45, 0.45), Split::Side);
        assert_eq!(split_of(-0.6, 0.45), Split::Side);
        assert_eq!(split_of(0.3, 0.45), Split::Frontal);
    }

    #[test]
    fn window_fits_small_images() {
        assert_eq!(fitted_window(11, 64, 64), 11);
        assert_eq!(fitted_window(11, 8, 8), 7);
        assert_eq!(fitted_window(11, 9, 16), 9);
    }
}
