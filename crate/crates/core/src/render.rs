//! Stratified ray sampling and discrete front-to-back alpha compositing.
//!
//! Per ray, with `α_i = 1 − exp(−σ_i δ_i)` and `τ_i = Π_{j<i} (1 − α_j)`:
//!
//! ```text
//! C = Σ τ_i α_i c_i + (1 − Σ τ_i α_i)·background
//! D = Σ τ_i α_i t_i
//! ```
//!
//! Depth is the ray distance of each sample and is never blended with the
//! background.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::Vec3;
use crate::scalar::{cast, Scalar};

/// Width of one composited row: r, g, b, depth, weight sum.
pub const COMPOSITE_WIDTH: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample<T> {
    pub color: [T; 3],
    pub density: T,
}

/// `(position, direction) → (color, density)`.
pub trait RadianceField<T>: Sync {
    fn query(&self, position: &Vec3<T>, direction: &Vec3<T>) -> FieldSample<T>;
}

impl<T, F> RadianceField<T> for F
where
    F: Fn(&Vec3<T>, &Vec3<T>) -> FieldSample<T> + Sync,
{
    fn query(&self, position: &Vec3<T>, direction: &Vec3<T>) -> FieldSample<T> {
        self(position, direction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples<T> {
    pub t_values: Vec<T>,
    pub deltas: Vec<T>,
    pub jittered: bool,
}

/// One sample per equal-width bin of `[t_near, t_far]`: bin midpoints, or a
/// uniform draw inside each bin when `jitter` is set.
///
/// Interior deltas are the gaps between consecutive samples; the last one is
/// `t_far − t_last` capped at the bin width.
pub fn stratified_samples<T: Scalar, R: Rng + ?Sized>(
    t_near: T,
    t_far: T,
    n: usize,
    rng: &mut R,
    jitter: bool,
) -> Result<RaySamples<T>> {
    if !(t_far > t_near) || t_near < T::zero() || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "need t_far > t_near ≥ 0 and n ≥ 1 (t_near={t_near}, t_far={t_far}, n={n})"
        )));
    }
    let offsets: Vec<f64> = (0..n)
        .map(|_| if jitter { rng.gen::<f64>() } else { 0.5 })
        .collect();
    Ok(samples_from_offsets(t_near, t_far, &offsets, jitter))
}

pub(crate) fn samples_from_offsets<T: Scalar>(
    t_near: T,
    t_far: T,
    offsets: &[f64],
    jittered: bool,
) -> RaySamples<T> {
    let n = offsets.len();
    let width = (t_far - t_near) / T::lit(n as f64);
    let t_values: Vec<T> = offsets
        .iter()
        .enumerate()
        .map(|(i, &u)| t_near + width * T::lit(i as f64 + u))
        .collect();
    let tiny = width * T::lit(1e-9);
    let deltas = (0..n)
        .map(|i| {
            let d = if i + 1 < n {
                t_values[i + 1] - t_values[i]
            } else {
                (t_far - t_values[i]).min(width)
            };
            d.max(tiny)
        })
        .collect();
    RaySamples {
        t_values,
        deltas,
        jittered,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub color: [T; 3],
    pub depth: T,
    pub weight_sum: T,
    pub weights: Vec<T>,
}

/// Composites one ray without a background.
pub fn composite<T: Scalar>(
    colors: &[[T; 3]],
    densities: &[T],
    samples: &RaySamples<T>,
) -> Result<RenderOutput<T>> {
    let n = samples.t_values.len();
    if colors.len() != n || densities.len() != n || samples.deltas.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: colors.len().min(densities.len()),
        });
    }
    if let Some((index, &value)) = densities
        .iter()
        .enumerate()
        .find(|(_, &d)| d < T::zero() || d.is_nan())
    {
        return Err(Error::NegativeDensity {
            index,
            value: value.re(),
        });
    }
    let flat: Vec<T> = colors.iter().flatten().copied().collect();
    let mut weights = vec![T::zero(); n];
    let out = composite_ray(
        densities,
        &flat,
        &samples.t_values,
        &samples.deltas,
        [T::zero(); 3],
        &mut weights,
    );
    Ok(RenderOutput {
        color: [out[0], out[1], out[2]],
        depth: out[3],
        weight_sum: out[4],
        weights,
    })
}

/// Forward compositing kernel shared by the plain renderer and the graph op.
/// `rgb` is interleaved (3 per sample); per-sample weights go to `weights`.
pub(crate) fn composite_ray<T: Scalar>(
    sigma: &[T],
    rgb: &[T],
    t: &[T],
    delta: &[T],
    background: [T; 3],
    weights: &mut [T],
) -> [T; COMPOSITE_WIDTH] {
    let mut trans = T::one();
    let mut acc = [T::zero(); COMPOSITE_WIDTH];
    for i in 0..sigma.len() {
        let optical = sigma[i] * delta[i];
        // α = 1 − e^{−σδ}, evaluated without cancellation
        let alpha = -(-optical).exp_m1();
        let w = trans * alpha;
        weights[i] = w;
        acc[0] += w * rgb[3 * i];
        acc[1] += w * rgb[3 * i + 1];
        acc[2] += w * rgb[3 * i + 2];
        acc[3] += w * t[i];
        acc[4] += w;
        trans *= (-optical).exp();
    }
    let rest = T::one() - acc[4];
    for c in 0..3 {
        acc[c] += rest * background[c];
    }
    acc
}

/// Reverse-mode kernel for [`composite_ray`].
///
/// With `v_i = g_C·(c_i − bg) + g_D t_i + g_W` the objective is `Σ w_i v_i`,
/// and `∂/∂σ_k = δ_k (T_{k+1} v_k − Σ_{i>k} w_i v_i)` where `T_{k+1}` is the
/// transmittance past sample `k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn composite_ray_backward<T: Scalar>(
    sigma: &[T],
    rgb: &[T],
    t: &[T],
    delta: &[T],
    background: [T; 3],
    weights: &[T],
    g_out: &[T],
    g_sigma: &mut [T],
    g_rgb: &mut [T],
) {
    let n = sigma.len();
    let gc = [g_out[0], g_out[1], g_out[2]];
    let (gd, gw) = (g_out[3], g_out[4]);
    let bg_term = gc[0] * background[0] + gc[1] * background[1] + gc[2] * background[2];
    let value = |i: usize| {
        gc[0] * rgb[3 * i] + gc[1] * rgb[3 * i + 1] + gc[2] * rgb[3 * i + 2] + gd * t[i] + gw
            - bg_term
    };
    // transmittance after each sample, recomputed front to back
    let mut trans_after = vec![T::zero(); n];
    let mut cum = T::zero();
    for i in 0..n {
        cum += sigma[i] * delta[i];
        trans_after[i] = (-cum).exp();
    }
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        let vk = value(k);
        g_sigma[k] = delta[k] * (trans_after[k] * vk - suffix);
        suffix += weights[k] * vk;
        for c in 0..3 {
            g_rgb[3 * k + c] = gc[c] * weights[k];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig<T> {
    pub t_near: T,
    pub t_far: T,
    pub samples: usize,
    pub jitter: bool,
    pub background: [T; 3],
}

impl<T: Scalar> RenderConfig<T> {
    /// Bounds bracketing a unit-radius scene seen from an orbit of `radius`.
    pub fn for_radius(radius: T, samples: usize) -> Self {
        Self {
            t_near: radius - T::one(),
            t_far: radius + T::one(),
            samples,
            jitter: false,
            background: [T::one(); 3],
        }
    }

    pub fn cast<U: Scalar>(&self) -> RenderConfig<U> {
        RenderConfig {
            t_near: cast(self.t_near),
            t_far: cast(self.t_far),
            samples: self.samples,
            jitter: self.jitter,
            background: self.background.map(cast),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_far > self.t_near) || self.t_near < T::zero() || self.samples == 0 {
            return Err(Error::InvalidArgument(format!("invalid render config {self:?}")));
        }
        Ok(())
    }

    /// Sample offsets for every ray in a `rays`-ray image.
    pub fn offsets<R: Rng + ?Sized>(&self, rays: usize, rng: &mut R) -> Vec<f64> {
        if self.jitter {
            (0..rays * self.samples).map(|_| rng.gen()).collect()
        } else {
            vec![0.5; rays * self.samples]
        }
    }
}

/// Rendered color, depth and accumulated-weight maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView<T> {
    pub image: Image<T>,
    pub depth: Image<T>,
    pub weights: Image<T>,
}

impl<T: Scalar> RenderedView<T> {
    /// Pixels whose accumulated weight reaches one half.
    pub fn mask(&self) -> Vec<bool> {
        self.weights.data.iter().map(|&w| w >= T::lit(0.5)).collect()
    }
}

/// Renders `field` through every pixel of the camera.
pub fn render<T: Scalar, F: RadianceField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    pose: &CameraPose<T>,
    intr: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
    rng: &mut R,
) -> Result<RenderedView<T>> {
    cfg.validate()?;
    intr.validate()?;
    let rays = generate_rays(pose, intr);
    let ns = cfg.samples;
    let offsets = cfg.offsets(rays.len(), rng);
    let per_ray: Vec<Result<[T; COMPOSITE_WIDTH]>> = rays
        .par_iter()
        .zip(offsets.par_chunks(ns))
        .map(|(ray, offs)| {
            let s = samples_from_offsets(cfg.t_near, cfg.t_far, offs, cfg.jitter);
            let mut sigma = Vec::with_capacity(ns);
            let mut rgb = Vec::with_capacity(3 * ns);
            for (i, &t) in s.t_values.iter().enumerate() {
                let q = field.query(&ray.at(t), &ray.direction);
                if q.density < T::zero() || q.density.is_nan() {
                    return Err(Error::NegativeDensity {
                        index: i,
                        value: q.density.re(),
                    });
                }
                sigma.push(q.density);
                rgb.extend_from_slice(&q.color);
            }
            let mut w = vec![T::zero(); ns];
            Ok(composite_ray(
                &sigma,
                &rgb,
                &s.t_values,
                &s.deltas,
                cfg.background,
                &mut w,
            ))
        })
        .collect();
    let (w, h) = (intr.width, intr.height);
    let n = w * h;
    let mut image = vec![T::zero(); 3 * n];
    let mut depth = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    for (p, r) in per_ray.into_iter().enumerate() {
        let o = r?;
        for c in 0..3 {
            image[c * n + p] = o[c];
        }
        depth[p] = o[3];
        weights[p] = o[4];
    }
    Ok(RenderedView {
        image: Image::new(w, h, 3, image)?,
        depth: Image::new(w, h, 1, depth)?,
        weights: Image::new(w, h, 1, weights)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn midpoints_without_jitter() {
        let s = stratified_samples(0.0f64, 1.0, 2, &mut rng(), false).unwrap();
        assert_eq!(s.t_values, vec![0.25, 0.75]);
        let s = stratified_samples(1.0f64, 3.0, 1, &mut rng(), false).unwrap();
        assert_eq!(s.t_values, vec![2.0]);
    }

    #[test]
    fn jittered_samples_stay_in_their_bins() {
        let mut r = rng();
        let (tn, tf, n) = (0.5f64, 2.5, 17);
        let width = (tf - tn) / n as f64;
        for _ in 0..50 {
            let s = stratified_samples(tn, tf, n, &mut r, true).unwrap();
            assert!(s.jittered);
            for (i, &t) in s.t_values.iter().enumerate() {
                let lo = tn + i as f64 * width;
                assert!(t >= lo - 1e-12 && t <= lo + width + 1e-12);
            }
            assert!(s.deltas.iter().all(|&d| d > 0.0));
            assert!(s.t_values.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(stratified_samples(1.0f64, 1.0, 4, &mut rng(), false).is_err());
        assert!(stratified_samples(2.0f64, 1.0, 4, &mut rng(), false).is_err());
        assert!(stratified_samples(0.0f64, 1.0, 0, &mut rng(), false).is_err());
    }

    #[test]
    fn transparent_ray_composites_to_zero() {
        let s = stratified_samples(0.0f64, 1.0, 8, &mut rng(), false).unwrap();
        let out = composite(&[[0.3, 0.6, 0.9]; 8], &[0.0; 8], &s).unwrap();
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.depth, 0.0);
        assert_eq!(out.weight_sum, 0.0);
    }

    #[test]
    fn opaque_single_sample() {
        let s = RaySamples {
            t_values: vec![1.7f64],
            deltas: vec![0.5],
            jittered: false,
        };
        let out = composite(&[[0.2, 0.4, 0.6]], &[40.0], &s).unwrap();
        for c in 0..3 {
            assert!((out.color[c] - [0.2, 0.4, 0.6][c]).abs() < 1e-6);
        }
        assert!((out.depth - 1.7).abs() < 1e-6);
    }

    #[test]
    fn two_half_opaque_samples() {
        let ln2 = std::f64::consts::LN_2;
        let s = RaySamples {
            t_values: vec![1.0, 2.0],
            deltas: vec![1.0, 0.5],
            jittered: false,
        };
        let c1 = [1.0, 0.0, 0.5];
        let c2 = [0.0, 1.0, 0.5];
        let out = composite(&[c1, c2], &[ln2, 2.0 * ln2], &s).unwrap();
        assert!((out.weights[0] - 0.5).abs() < 1e-12);
        assert!((out.weights[1] - 0.25).abs() < 1e-12);
        for c in 0..3 {
            assert!((out.color[c] - (0.5 * c1[c] + 0.25 * c2[c])).abs() < 1e-12);
        }
        assert!((out.depth - (0.5 * 1.0 + 0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn negative_density_is_an_error() {
        let s = stratified_samples(0.0f64, 1.0, 3, &mut rng(), false).unwrap();
        let err = composite(&[[0.0; 3]; 3], &[1.0, -0.5, 1.0], &s).unwrap_err();
        assert!(matches!(err, Error::NegativeDensity { index: 1, .. }));
    }

    #[test]
    fn compositing_respects_order() {
        let s = stratified_samples(0.0f64, 1.0, 3, &mut rng(), false).unwrap();
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let dens = [5.0, 0.5, 9.0];
        let a = composite(&colors, &dens, &s).unwrap();
        let rev_colors = [colors[2], colors[1], colors[0]];
        let rev_dens = [dens[2], dens[1], dens[0]];
        let b = composite(&rev_colors, &rev_dens, &s).unwrap();
        assert_ne!(a.color, b.color);
    }

    #[test]
    fn empty_field_renders_background() {
        let field = |_: &Vec3<f64>, _: &Vec3<f64>| FieldSample {
            color: [0.5; 3],
            density: 0.0,
        };
        let pose = crate::camera::PoseDistribution::default().frontal();
        let intr = Intrinsics::centered(6, 5, 8.0).unwrap();
        let mut cfg = RenderConfig::for_radius(2.7, 16);
        cfg.background = [0.1, 0.2, 0.3];
        let v = render(&field, &pose, &intr, &cfg, &mut rng()).unwrap();
        for c in 0..3 {
            assert!(v.image.plane(c).iter().all(|&x| x == cfg.background[c]));
        }
        assert!(v.weights.data.iter().all(|&w| w == 0.0));
    }
}
