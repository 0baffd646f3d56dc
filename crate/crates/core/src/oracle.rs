//! Procedural stand-in for a pretrained 3D GAN.
//!
//! A fixed-seed decoder maps truncated latents to a handful of anisotropic
//! Gaussian blobs. Geometry quality degrades with distance from the latent
//! center: the scene carries a noise amplitude `κ·‖w′ − w̄‖` that roughens
//! blob surfaces and adds semi-transparent floaters around them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics, PoseDistribution};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{save_triplet, write_manifest, DatasetManifest, TripletRecord, MANIFEST_VERSION};
use crate::latent::{
    estimate_center, l2_distance, sample_z, truncate, IntermediateLatent, LatentCenter, LatentMap,
    MappingNetwork, TruncationConfig,
};
use crate::linalg::{Mat3, Vec3};
use crate::render::{render, FieldSample, RadianceField, RenderConfig, RenderedView};
use crate::scalar::{cast, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub latent_dim: usize,
    pub blobs: usize,
    /// Noise amplitude per unit of `‖w′ − w̄‖`.
    pub kappa: f64,
    pub decoder_hidden: usize,
    pub mapping_seed: u64,
    pub decoder_seed: u64,
    /// Spatial frequency of the surface noise (radians per world unit).
    pub noise_frequency: f64,
    pub noise_waves: usize,
    /// Log-density perturbation per unit noise amplitude.
    pub surface_gain: f64,
    /// Floater density relative to blob density, per unit noise amplitude.
    pub floater_gain: f64,
    /// Floater envelope radius relative to the blob radii.
    pub halo_scale: f64,
    pub background: [f64; 3],
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            blobs: 3,
            kappa: 0.15,
            decoder_hidden: 64,
            mapping_seed: 0x6d61_7070,
            decoder_seed: 0x6465_636f,
            noise_frequency: 11.0,
            noise_waves: 6,
            surface_gain: 0.6,
            floater_gain: 0.12,
            halo_scale: 1.6,
            background: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob<T> {
    pub center: Vec3<T>,
    pub radii: Vec3<T>,
    pub orientation: Mat3<T>,
    pub albedo: [T; 3],
    pub amplitude: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseWave<T> {
    pub frequency: Vec3<T>,
    pub phase: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams<T> {
    pub blobs: Vec<Blob<T>>,
    pub background: [T; 3],
    pub geometry_noise_amplitude: T,
    pub noise: Vec<NoiseWave<T>>,
}

impl<T: Scalar> SceneParams<T> {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blobs.iter().enumerate() {
            if b.radii.0.iter().any(|&r| !(r > T::zero())) || !(b.amplitude > T::zero()) {
                return Err(Error::InvalidArgument(format!("blob {i} has non-positive extent")));
            }
            if b.orientation.orthonormality_residual() > T::lit(1e-5) {
                return Err(Error::InvalidArgument(format!("blob {i} orientation not orthonormal")));
            }
        }
        if self.geometry_noise_amplitude < T::zero() {
            return Err(Error::InvalidArgument("negative noise amplitude".into()));
        }
        Ok(())
    }

    /// Same scene with the geometry noise removed.
    pub fn clean(&self) -> Self {
        Self {
            geometry_noise_amplitude: T::zero(),
            ..self.clone()
        }
    }
}

/// Analytic radiance field of a decoded scene.
#[derive(Clone, Debug)]
pub struct OracleField<'a, T> {
    scene: &'a SceneParams<T>,
    halo_scale: T,
    surface_gain: T,
    floater_gain: T,
}

impl<'a, T: Scalar> OracleField<'a, T> {
    pub fn new(scene: &'a SceneParams<T>, cfg: &OracleConfig) -> Self {
        Self {
            scene,
            halo_scale: T::lit(cfg.halo_scale),
            surface_gain: T::lit(cfg.surface_gain),
            floater_gain: T::lit(cfg.floater_gain),
        }
    }

    /// Unit-variance sum of plane waves.
    fn noise(&self, x: &Vec3<T>) -> T {
        let waves = &self.scene.noise;
        if waves.is_empty() {
            return T::zero();
        }
        let norm = T::lit((2.0 / waves.len() as f64).sqrt());
        waves
            .iter()
            .map(|w| (w.frequency.dot(x) + w.phase).sin())
            .sum::<T>()
            * norm
    }
}

impl<T: Scalar> RadianceField<T> for OracleField<'_, T> {
    fn query(&self, position: &Vec3<T>, _direction: &Vec3<T>) -> FieldSample<T> {
        let half = T::lit(0.5);
        let amp = self.scene.geometry_noise_amplitude;
        let (surface, floater) = if amp > T::zero() {
            let n = self.noise(position);
            ((amp * self.surface_gain * n).exp(), amp * self.floater_gain * n * n)
        } else {
            (T::one(), T::zero())
        };
        let inv_halo = T::one() / (self.halo_scale * self.halo_scale);
        let mut density = T::zero();
        let mut color = [T::zero(); 3];
        for b in &self.scene.blobs {
            let local = b.orientation.transpose().mul_vec(&(*position - b.center));
            let q = (0..3)
                .map(|i| {
                    let u = local[i] / b.radii[i];
                    u * u
                })
                .sum::<T>();
            let mut s = b.amplitude * (-half * q).exp() * surface;
            if floater > T::zero() {
                s += b.amplitude * floater * (-half * q * inv_halo).exp();
            }
            density += s;
            for c in 0..3 {
                color[c] += s * b.albedo[c];
            }
        }
        if density > T::zero() {
            for c in color.iter_mut() {
                *c /= density;
            }
        }
        FieldSample { color, density }
    }
}

/// Fixed-seed two-layer decoder from `w′ − w̄` to blob parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneDecoder<T> {
    in_dim: usize,
    hidden: usize,
    outputs: usize,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
    noise_directions: Vec<Vec3<T>>,
}

/// Per-blob outputs: center (3), log-radii (3), axis-angle (3), albedo (3),
/// amplitude (1).
const PER_BLOB: usize = 13;

impl<T: Scalar> SceneDecoder<T> {
    pub fn new(cfg: &OracleConfig) -> Result<Self> {
        if cfg.latent_dim == 0 || cfg.blobs == 0 || cfg.decoder_hidden == 0 {
            return Err(Error::InvalidArgument("decoder dimensions must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.decoder_seed);
        let mut gauss = |n: usize, s: f64| -> Vec<T> {
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    T::lit(s * v)
                })
                .collect()
        };
        let outputs = cfg.blobs * PER_BLOB + cfg.noise_waves;
        let w1 = gauss(cfg.decoder_hidden * cfg.latent_dim, (1.0 / cfg.latent_dim as f64).sqrt());
        let b1 = gauss(cfg.decoder_hidden, 0.1);
        let w2 = gauss(outputs * cfg.decoder_hidden, (1.5 / cfg.decoder_hidden as f64).sqrt());
        let b2 = gauss(outputs, 0.8);
        let noise_directions = (0..cfg.noise_waves)
            .map(|_| {
                let v = Vec3(std::array::from_fn(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    T::lit(v)
                }));
                v.normalized().scale(T::lit(cfg.noise_frequency))
            })
            .collect();
        Ok(Self {
            in_dim: cfg.latent_dim,
            hidden: cfg.decoder_hidden,
            outputs,
            w1,
            b1,
            w2,
            b2,
            noise_directions,
        })
    }

    fn raw(&self, u: &[T]) -> Vec<T> {
        let h: Vec<T> = self
            .w1
            .chunks_exact(self.in_dim)
            .zip(&self.b1)
            .map(|(row, &b)| (row.iter().zip(u).map(|(&w, &x)| w * x).sum::<T>() + b).tanh())
            .collect();
        self.w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, &b)| (row.iter().zip(&h).map(|(&w, &x)| w * x).sum::<T>() + b).tanh())
            .collect()
    }

    /// Decodes a scene; the noise amplitude is `κ·‖w′ − w̄‖`.
    pub fn decode(
        &self,
        w: &IntermediateLatent<T>,
        center: &LatentCenter<T>,
        cfg: &OracleConfig,
    ) -> Result<SceneParams<T>> {
        if w.0.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: w.0.len(),
            });
        }
        if center.values.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: center.values.len(),
            });
        }
        let u: Vec<T> = w.0.iter().zip(&center.values).map(|(&a, &b)| a - b).collect();
        let out = self.raw(&u);
        debug_assert_eq!(out.len(), self.outputs);
        // tanh output in (−1, 1) mapped onto [lo, hi]
        let squash = |v: T, lo: f64, hi: f64| {
            T::lit(lo) + (T::lit(hi) - T::lit(lo)) * (v + T::one()) * T::lit(0.5)
        };
        let blobs = out
            .chunks_exact(PER_BLOB)
            .take(cfg.blobs)
            .map(|o| Blob {
                center: Vec3::new(
                    squash(o[0], -0.35, 0.35),
                    squash(o[1], -0.3, 0.3),
                    squash(o[2], -0.25, 0.25),
                ),
                radii: Vec3::new(
                    squash(o[3], 0.12, 0.3),
                    squash(o[4], 0.12, 0.3),
                    squash(o[5], 0.12, 0.3),
                ),
                orientation: Mat3::from_axis_angle(Vec3::new(
                    squash(o[6], -0.9, 0.9),
                    squash(o[7], -0.9, 0.9),
                    squash(o[8], -0.9, 0.9),
                )),
                albedo: [
                    squash(o[9], 0.05, 0.9),
                    squash(o[10], 0.05, 0.9),
                    squash(o[11], 0.05, 0.9),
                ],
                amplitude: squash(o[12], 10.0, 30.0),
            })
            .collect();
        let phases = &out[cfg.blobs * PER_BLOB..];
        let noise = self
            .noise_directions
            .iter()
            .zip(phases)
            .map(|(f, &p)| NoiseWave {
                frequency: *f,
                phase: p * T::lit(std::f64::consts::PI),
            })
            .collect();
        let scene = SceneParams {
            blobs,
            background: cfg.background.map(T::lit),
            geometry_noise_amplitude: T::lit(cfg.kappa) * l2_distance(&w.0, &center.values),
            noise,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// The frozen "pretrained" generator: mapping network, center of mass and
/// scene decoder.
#[derive(Clone, Debug)]
pub struct OracleGenerator<T> {
    pub config: OracleConfig,
    pub mapping: MappingNetwork<T>,
    pub decoder: SceneDecoder<T>,
    pub center: LatentCenter<T>,
}

impl<T: Scalar> OracleGenerator<T> {
    /// Builds the generator and estimates `w̄` from `center_samples` draws.
    pub fn new(config: OracleConfig, center_samples: usize, center_seed: u64) -> Result<Self> {
        let mapping = MappingNetwork::new(config.latent_dim, config.latent_dim, config.mapping_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(center_seed);
        let center = estimate_center(&mapping, center_samples, &mut rng)?;
        Self::with_center(config, center)
    }

    pub fn with_center(config: OracleConfig, center: LatentCenter<T>) -> Result<Self> {
        let mapping = MappingNetwork::new(config.latent_dim, config.latent_dim, config.mapping_seed)?;
        if center.values.len() != mapping.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: mapping.out_dim(),
                got: center.values.len(),
            });
        }
        let decoder = SceneDecoder::new(&config)?;
        Ok(Self {
            config,
            mapping,
            decoder,
            center,
        })
    }

    /// Draws `z`, maps it and truncates with `psi`.
    pub fn sample_latent<R: Rng + ?Sized>(&self, psi: T, rng: &mut R) -> Result<IntermediateLatent<T>> {
        let z = sample_z(self.config.latent_dim, rng)?;
        let w = self.mapping.map(&z)?;
        truncate(&w, &self.center, &TruncationConfig::new(psi)?)
    }

    pub fn decode_scene(&self, w: &IntermediateLatent<T>) -> Result<SceneParams<T>> {
        self.decoder.decode(w, &self.center, &self.config)
    }

    pub fn field<'a>(&self, scene: &'a SceneParams<T>) -> OracleField<'a, T> {
        OracleField::new(scene, &self.config)
    }

    pub fn render_scene(
        &self,
        scene: &SceneParams<T>,
        pose: &CameraPose<T>,
        intr: &Intrinsics<T>,
        cfg: &RenderConfig<T>,
    ) -> Result<RenderedView<T>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let cfg = RenderConfig {
            background: scene.background,
            ..cfg.clone()
        };
        render(&self.field(scene), pose, intr, &cfg, &mut unused)
    }

    /// `{I_f, I_s, D_syn}` for one latent and three poses.
    pub fn synthesize_triplet(
        &self,
        w: &IntermediateLatent<T>,
        poses: TripletPoses<T>,
        intr: &Intrinsics<T>,
        cfg: &RenderConfig<T>,
        clean_geometry: bool,
    ) -> Result<Triplet<T>> {
        let mut scene = self.decode_scene(w)?;
        if clean_geometry {
            scene = scene.clean();
        }
        let front = self.render_scene(&scene, &poses.reference, intr, cfg)?;
        let side = self.render_scene(&scene, &poses.target, intr, cfg)?;
        let depth_view = if poses.depth == poses.reference {
            front.clone()
        } else {
            self.render_scene(&scene, &poses.depth, intr, cfg)?
        };
        Ok(Triplet {
            mask: depth_view.mask(),
            depth: depth_view.depth,
            image_f: front.image,
            image_s: side.image,
            poses,
            latent: w.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletPoses<T> {
    /// `P_f`
    pub reference: CameraPose<T>,
    /// `P_s`
    pub target: CameraPose<T>,
    /// `P_d`
    pub depth: CameraPose<T>,
}

impl<T: Scalar> TripletPoses<T> {
    pub fn sample<R: Rng + ?Sized>(dist: &PoseDistribution<T>, frontal_reference: bool, rng: &mut R) -> Self {
        let reference = if frontal_reference {
            dist.frontal()
        } else {
            dist.sample(rng)
        };
        Self {
            reference,
            target: dist.sample(rng),
            depth: dist.sample(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet<T> {
    pub image_f: Image<T>,
    pub image_s: Image<T>,
    /// `D_syn`, rendered from `poses.depth`.
    pub depth: Image<T>,
    pub mask: Vec<bool>,
    pub poses: TripletPoses<T>,
    pub latent: IntermediateLatent<T>,
}

impl<T: Scalar> TripletPoses<T> {
    pub fn cast<U: Scalar>(&self) -> TripletPoses<U> {
        TripletPoses {
            reference: self.reference.cast(),
            target: self.target.cast(),
            depth: self.depth.cast(),
        }
    }
}

impl<T: Scalar> Triplet<T> {
    pub fn cast<U: Scalar>(&self) -> Triplet<U> {
        Triplet {
            image_f: self.image_f.cast(),
            image_s: self.image_s.cast(),
            depth: self.depth.cast(),
            mask: self.mask.clone(),
            poses: self.poses.cast(),
            latent: IntermediateLatent(self.latent.0.iter().map(|&v| cast(v)).collect()),
        }
    }
}

/// What to draw for one pool of triplets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub count: usize,
    pub psi: f64,
    pub seed: u64,
    /// Renders the noise-free version of every scene.
    pub clean_geometry: bool,
    /// Fixes `P_f` to the frontal pose instead of sampling it.
    pub frontal_reference: bool,
}

/// Everything needed to turn a latent into rendered views.
#[derive(Clone, Debug)]
pub struct SynthesisSetup<T> {
    pub generator: OracleGenerator<T>,
    pub poses: PoseDistribution<T>,
    pub intrinsics: Intrinsics<T>,
    pub render: RenderConfig<T>,
    pub center_samples: usize,
}

/// Independent random stream for item `index` of a seeded pool.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

impl<T: Scalar> SynthesisSetup<T> {
    pub fn triplet(&self, spec: &PoolSpec, index: usize) -> Result<Triplet<T>> {
        let mut rng = item_rng(spec.seed, index);
        let w = self.generator.sample_latent(T::lit(spec.psi), &mut rng)?;
        let poses = TripletPoses::sample(&self.poses, spec.frontal_reference, &mut rng);
        self.generator
            .synthesize_triplet(&w, poses, &self.intrinsics, &self.render, spec.clean_geometry)
    }

    /// Synthesizes a whole pool in memory. Parallel and serial runs agree
    /// bit for bit because every item owns its random stream.
    pub fn pool(&self, spec: &PoolSpec, parallel: bool) -> Result<Vec<Triplet<T>>> {
        if spec.count == 0 {
            return Err(Error::InvalidArgument("pool size must be at least 1".into()));
        }
        let one = |i: usize| {
            self.triplet(spec, i).map_err(|e| Error::Triplet {
                index: i,
                source: Box::new(e),
            })
        };
        if parallel {
            (0..spec.count).into_par_iter().map(one).collect()
        } else {
            (0..spec.count).map(one).collect()
        }
    }

    pub fn manifest(&self, spec: &PoolSpec, records: Vec<TripletRecord>) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION.to_string(),
            count: records.len(),
            psi: spec.psi,
            seed: spec.seed,
            clean_geometry: spec.clean_geometry,
            frontal_reference: spec.frontal_reference,
            pose_distribution: PoseDistribution {
                yaw_range: self.poses.yaw_range.map(cast),
                pitch_range: self.poses.pitch_range.map(cast),
                radius: cast(self.poses.radius),
                look_at: self.poses.look_at.cast(),
            },
            render: RenderConfig {
                t_near: cast(self.render.t_near),
                t_far: cast(self.render.t_far),
                samples: self.render.samples,
                jitter: self.render.jitter,
                background: self.render.background.map(cast),
            },
            intrinsics: Intrinsics {
                focal_px: cast(self.intrinsics.focal_px),
                principal_point: self.intrinsics.principal_point.map(cast),
                width: self.intrinsics.width,
                height: self.intrinsics.height,
            },
            oracle: self.generator.config.clone(),
            center: self.generator.center.values.iter().map(|&v| cast(v)).collect(),
            center_samples: self.center_samples,
            records,
        }
    }

    /// Writes a pool to `dir`: one file set per triplet, then the manifest.
    pub fn write_dataset(&self, dir: &Path, spec: &PoolSpec, parallel: bool) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let one = |i: usize| -> Result<TripletRecord> {
            let t = self.triplet(spec, i).map_err(|e| Error::Triplet {
                index: i,
                source: Box::new(e),
            })?;
            save_triplet(dir, i, &t)
        };
        if spec.count == 0 {
            return Err(Error::InvalidArgument("pool size must be at least 1".into()));
        }
        let records: Vec<TripletRecord> = if parallel {
            (0..spec.count).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..spec.count).map(one).collect::<Result<_>>()?
        };
        let manifest = self.manifest(spec, records);
        write_manifest(dir, &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator() -> OracleGenerator<f64> {
        OracleGenerator::new(OracleConfig::default(), 2000, 1).unwrap()
    }

    #[test]
    fn center_latent_decodes_clean_geometry() {
        let g = generator();
        let scene = g.decode_scene(&IntermediateLatent(g.center.values.clone())).unwrap();
        assert_eq!(scene.geometry_noise_amplitude, 0.0);
    }

    #[test]
    fn decoding_is_deterministic() {
        let g = generator();
        let w = g.sample_latent(0.7, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(g.decode_scene(&w).unwrap(), g.decode_scene(&w).unwrap());
    }

    #[test]
    fn decoder_rejects_wrong_dimension() {
        let g = generator();
        assert!(matches!(
            g.decode_scene(&IntermediateLatent(vec![0.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn noise_amplitude_grows_with_psi() {
        let g = generator();
        let z = sample_z(g.config.latent_dim, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let w = g.mapping.map(&z).unwrap();
        let amps: Vec<f64> = [0.0, 0.3, 0.7, 1.0]
            .iter()
            .map(|&psi| {
                let wp = truncate(&w, &g.center, &TruncationConfig::new(psi).unwrap()).unwrap();
                g.decode_scene(&wp).unwrap().geometry_noise_amplitude
            })
            .collect();
        assert!(amps.windows(2).all(|p| p[0] < p[1]), "{amps:?}");
    }

    fn lone_blob_scene() -> SceneParams<f64> {
        SceneParams {
            blobs: vec![
                Blob {
                    center: Vec3::new(0.0, 0.0, 0.0),
                    radii: Vec3::new(0.2, 0.3, 0.25),
                    orientation: Mat3::from_axis_angle(Vec3::new(0.2, 0.1, -0.4)),
                    albedo: [0.9, 0.2, 0.4],
                    amplitude: 20.0,
                },
                Blob {
                    center: Vec3::new(5.0, 0.0, 0.0),
                    radii: Vec3::new(0.3, 0.3, 0.3),
                    orientation: Mat3::identity(),
                    albedo: [0.1, 0.8, 0.1],
                    amplitude: 30.0,
                },
            ],
            background: [1.0; 3],
            geometry_noise_amplitude: 0.0,
            noise: vec![],
        }
    }

    #[test]
    fn blob_center_has_its_albedo() {
        let scene = lone_blob_scene();
        let cfg = OracleConfig::default();
        let f = OracleField::new(&scene, &cfg);
        let q = f.query(&Vec3::zero(), &Vec3::new(0.0, 0.0, -1.0));
        // contribution of the far blob at 5/0.3 ≈ 16.7 radii is ≈ e^{-139}
        for c in 0..3 {
            assert!((q.color[c] - scene.blobs[0].albedo[c]).abs() < 1e-3);
        }
    }

    #[test]
    fn density_decays_far_from_blobs() {
        let scene = lone_blob_scene();
        let cfg = OracleConfig::default();
        let f = OracleField::new(&scene, &cfg);
        // > 6 of the largest radius away from both blobs
        let q = f.query(&Vec3::new(2.5, 2.6, 0.0), &Vec3::new(0.0, 0.0, -1.0));
        assert!(q.density < 1e-6, "{}", q.density);
    }

    #[test]
    fn density_is_non_negative() {
        let g = generator();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = g.sample_latent(1.0, &mut rng).unwrap();
        let scene = g.decode_scene(&w).unwrap();
        assert!(scene.geometry_noise_amplitude > 0.0);
        let f = g.field(&scene);
        for _ in 0..2000 {
            let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            assert!(f.query(&p, &Vec3::new(0.0, 0.0, -1.0)).density >= 0.0);
        }
    }
}
