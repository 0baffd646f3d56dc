//! Reconstruction, adversarial and total objectives.
//!
//! Every loss is available twice: as a graph builder (`*_node`) used during
//! training, and as a plain function on images used for evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Graph, NodeId};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;

/// Which side of the adversarial objective is "real".
///
/// `Paper`: `softplus(D(real)) + softplus(−D(fake))`, so the discriminator
/// drives real logits down. `Standard`: `softplus(−D(real)) + softplus(D(fake))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConvention {
    Paper,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum R1Target {
    Fake,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_g: f64,
    pub lambda_r1: f64,
    pub ssim_window: usize,
    /// Pyramid levels of the feature stack compared by the perceptual loss.
    pub perceptual_scales: Vec<usize>,
    pub perceptual_channels: usize,
    pub perceptual_seed: u64,
    /// Removes each input channel's mean before feature extraction.
    pub perceptual_mean_subtract: bool,
    pub weight_l1: f64,
    pub weight_ssim: f64,
    pub weight_perceptual: f64,
    pub sign_convention: SignConvention,
    pub r1_on: R1Target,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_g: 1.2,
            lambda_r1: 1.0,
            ssim_window: 11,
            perceptual_scales: vec![0, 1, 2],
            perceptual_channels: 8,
            perceptual_seed: 0x7065_7263,
            perceptual_mean_subtract: false,
            weight_l1: 1.0,
            weight_ssim: 1.0,
            weight_perceptual: 1.0,
            sign_convention: SignConvention::Paper,
            r1_on: R1Target::Fake,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0) || !(self.lambda_r1 >= 0.0) {
            return Err(Error::Config("lambda_g and lambda_r1 must be non-negative".into()));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ssim_window must be odd and at least 3, got {}",
                self.ssim_window
            )));
        }
        if self.perceptual_scales.is_empty() || self.perceptual_channels == 0 {
            return Err(Error::Config("perceptual feature stack is empty".into()));
        }
        Ok(())
    }

    /// Logit seen by the generator's non-saturating loss: larger means "more real".
    pub fn realness<T: Scalar>(&self, logit: T) -> T {
        match self.sign_convention {
            SignConvention::Paper => -logit,
            SignConvention::Standard => logit,
        }
    }
}

pub fn gaussian_window<T: Scalar>(size: usize, sigma: f64) -> Vec<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / s)).collect()
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(g.shape(a).to_vec(), g.shape(b).to_vec()));
    }
    Ok(())
}

pub fn l1_node<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_pair(g, a, b)?;
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean SSIM over the valid region of a Gaussian window, on `[C, H, W]` inputs.
pub fn ssim_node<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId, window: usize) -> Result<NodeId> {
    check_pair(g, a, b)?;
    let s = g.shape(a);
    if s.len() != 3 || s[1] < window || s[2] < window {
        return Err(Error::InvalidArgument(format!(
            "ssim needs [C, H, W] of at least {window}×{window}, got {s:?}"
        )));
    }
    let k = gaussian_window::<T>(window, SSIM_SIGMA);
    let mu_a = g.blur(a, &k);
    let mu_b = g.blur(b, &k);
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b);
    let e_aa = g.blur(aa, &k);
    let e_bb = g.blur(bb, &k);
    let e_ab = g.blur(ab, &k);
    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let n1 = g.scale(mu_ab, T::lit(2.0));
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.scale(cov, T::lit(2.0));
    let n2 = g.add_scalar(n2, c2);
    let d1 = g.add(mu_a2, mu_b2);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, c2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    Ok(g.mean(map))
}

/// Fixed random convolutional feature stack standing in for a pretrained
/// perceptual network.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    /// `(weight [O, C, 3, 3], bias [O])` per level.
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    scales: Vec<usize>,
    mean_subtract: bool,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(cfg: &LossConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.perceptual_scales.iter().max().copied().unwrap_or(0) + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.perceptual_seed);
        let mut c = in_channels;
        let o = cfg.perceptual_channels;
        let layers = (0..depth)
            .map(|_| {
                let std = (2.0 / (9 * c) as f64).sqrt();
                let w: Vec<T> = (0..o * c * 9)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        T::lit(std * v)
                    })
                    .collect();
                let b: Vec<T> = (0..o)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        T::lit(0.1 * v)
                    })
                    .collect();
                let layer = (Tensor::new(vec![o, c, 3, 3], w).unwrap(), Tensor::from_vec(b));
                c = o;
                layer
            })
            .collect();
        Ok(Self {
            layers,
            scales: cfg.perceptual_scales.clone(),
            mean_subtract: cfg.perceptual_mean_subtract,
        })
    }

    fn center_channels(g: &mut Graph<T>, x: NodeId) -> NodeId {
        let (c, h, w) = match *g.shape(x) {
            [c, h, w] => (c, h, w),
            _ => unreachable!("checked by caller"),
        };
        let flat = g.reshape(x, &[c, h * w]);
        let avg = g.constant(Tensor::full(&[h * w, 1], T::one() / T::lit((h * w) as f64)));
        let ones = g.constant(Tensor::full(&[1, h * w], T::one()));
        let means = g.matmul(flat, avg);
        let spread = g.matmul(means, ones);
        let centered = g.sub(flat, spread);
        g.reshape(centered, &[c, h, w])
    }

    /// Feature maps of the requested levels.
    pub fn features(&self, g: &mut Graph<T>, x: NodeId) -> Vec<NodeId> {
        let mut h = if self.mean_subtract {
            Self::center_channels(g, x)
        } else {
            x
        };
        let spec = Conv2dSpec { stride: 1, padding: 1 };
        let mut out = Vec::new();
        for (level, (w, b)) in self.layers.iter().enumerate() {
            if level > 0 {
                h = g.avg_pool2(h);
            }
            let wn = g.constant(w.clone());
            let bn = g.constant(b.clone());
            let y = g.conv2d(h, wn, Some(bn), spec);
            h = g.leaky_relu(y, T::lit(0.2));
            if self.scales.contains(&level) {
                out.push(h);
            }
        }
        out
    }

    /// Plain-valued feature maps of the requested levels, each `[O, h, w]`.
    pub fn feature_maps(&self, image: &Image<T>) -> Vec<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        self.features(&mut g, x).into_iter().map(|n| g.value(n).clone()).collect()
    }

    /// Sum over levels of the mean squared feature difference.
    pub fn distance_node(&self, g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_pair(g, a, b)?;
        let s = g.shape(a).to_vec();
        let need = 1usize << (self.layers.len() - 1);
        if s.len() != 3 || s[1] < need || s[2] < need {
            return Err(Error::InvalidArgument(format!(
                "perceptual loss needs [C, H, W] of at least {need}×{need}, got {s:?}"
            )));
        }
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total: Option<NodeId> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.sub(x, y);
            let d = g.square(d);
            let m = g.mean(d);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        Ok(total.expect("at least one level"))
    }
}

/// The components of one reconstruction loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconNodes {
    pub l1: NodeId,
    pub ssim_loss: NodeId,
    pub perceptual: NodeId,
    pub total: NodeId,
}

/// Reconstruction loss: `l1 + (1 − ssim) + perceptual`, each term weighted
/// by its configured weight.
pub fn recon_node<T: Scalar>(
    g: &mut Graph<T>,
    fake: NodeId,
    reference: NodeId,
    cfg: &LossConfig,
    features: &FeatureExtractor<T>,
) -> Result<ReconNodes> {
    let l1 = l1_node(g, fake, reference)?;
    let s = ssim_node(g, fake, reference, cfg.ssim_window)?;
    let neg = g.scale(s, -T::one());
    let ssim_loss = g.add_scalar(neg, T::one());
    let perceptual = features.distance_node(g, fake, reference)?;
    let a = g.scale(l1, T::lit(cfg.weight_l1));
    let b = g.scale(ssim_loss, T::lit(cfg.weight_ssim));
    let c = g.scale(perceptual, T::lit(cfg.weight_perceptual));
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    Ok(ReconNodes {
        l1,
        ssim_loss,
        perceptual,
        total,
    })
}

/// Discriminator loss term for a logit on a real (`is_real`) or fake sample.
pub fn d_term_node<T: Scalar>(g: &mut Graph<T>, logit: NodeId, is_real: bool, cfg: &LossConfig) -> NodeId {
    let negate = match cfg.sign_convention {
        SignConvention::Paper => !is_real,
        SignConvention::Standard => is_real,
    };
    let x = if negate { g.scale(logit, -T::one()) } else { logit };
    let sp = g.softplus(x);
    g.sum(sp)
}

/// Generator adversarial term: `softplus(−realness)`.
pub fn g_adv_node<T: Scalar>(g: &mut Graph<T>, fake_logit: NodeId, cfg: &LossConfig) -> NodeId {
    let x = match cfg.sign_convention {
        SignConvention::Paper => fake_logit,
        SignConvention::Standard => g.scale(fake_logit, -T::one()),
    };
    let sp = g.softplus(x);
    g.sum(sp)
}

fn image_pair<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(Graph<T>, NodeId, NodeId)> {
    a.same_shape(b)?;
    let mut g = Graph::new();
    let x = g.constant(a.to_tensor());
    let y = g.constant(b.to_tensor());
    Ok((g, x, y))
}

pub fn l1_loss<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    let (mut g, x, y) = image_pair(a, b)?;
    let n = l1_node(&mut g, x, y)?;
    Ok(g.scalar(n))
}

pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>, window: usize) -> Result<T> {
    let (mut g, x, y) = image_pair(a, b)?;
    let n = ssim_node(&mut g, x, y, window)?;
    Ok(g.scalar(n))
}

pub fn perceptual_loss<T: Scalar>(a: &Image<T>, b: &Image<T>, features: &FeatureExtractor<T>) -> Result<T> {
    let (mut g, x, y) = image_pair(a, b)?;
    let n = features.distance_node(&mut g, x, y)?;
    Ok(g.scalar(n))
}

pub fn recon_loss<T: Scalar>(
    fake: &Image<T>,
    reference: &Image<T>,
    cfg: &LossConfig,
    features: &FeatureExtractor<T>,
) -> Result<T> {
    let (mut g, x, y) = image_pair(fake, reference)?;
    let n = recon_node(&mut g, x, y, cfg, features)?;
    Ok(g.scalar(n.total))
}

/// Discriminator objective for one real and one fake logit.
pub fn d_adversarial_loss<T: Scalar>(real_logit: T, fake_logit: T, r1_grad_sq_norm: T, cfg: &LossConfig) -> T {
    let (r, f) = match cfg.sign_convention {
        SignConvention::Paper => (real_logit.softplus(), (-fake_logit).softplus()),
        SignConvention::Standard => ((-real_logit).softplus(), fake_logit.softplus()),
    };
    r + f + T::lit(cfg.lambda_r1) * r1_grad_sq_norm
}

/// Non-saturating generator loss `softplus(−logit)`.
pub fn g_adversarial_loss<T: Scalar>(fake_logit: T) -> T {
    (-fake_logit).softplus()
}

pub fn total_loss<T: Scalar>(recon: T, gan: T, cfg: &LossConfig) -> T {
    recon + T::lit(cfg.lambda_g) * gan
}
