//! Flat key/value run configuration (TOML). Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{Intrinsics, PoseDistribution};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::losses::{LossConfig, R1Target, SignConvention};
use crate::model::{Conditioning, ModelConfig};
use crate::optim::AdamConfig;
use crate::io::Dataset;
use crate::model::GNerf;
use crate::oracle::{OracleConfig, OracleGenerator, PoolSpec, SynthesisSetup, Triplet};
use crate::scalar::Scalar;
use crate::render::RenderConfig;
use crate::train::{TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub device: String,

    pub synthetic_dir: Option<String>,
    pub real_dir: Option<String>,
    pub test_dir: Option<String>,
    pub n_synthetic: usize,
    pub n_real: usize,
    pub n_test: usize,
    pub psi: f64,
    pub real_psi: f64,
    pub synthetic_seed: u64,
    pub real_seed: u64,
    pub test_seed: u64,
    pub center_samples: usize,
    pub center_seed: u64,
    pub latent_dim: usize,
    pub blobs: usize,
    pub kappa: f64,

    pub resolution: usize,
    pub focal_ratio: f64,
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub radius: f64,
    pub samples: usize,
    pub t_near: Option<f64>,
    pub t_far: Option<f64>,
    pub jitter: bool,

    pub embedding_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub field_width: usize,
    pub field_layers: usize,
    pub pe_frequencies: usize,
    pub conditioning: Conditioning,
    pub density_scale: f64,
    pub density_bias: f64,
    pub disc_channels: Vec<usize>,
    pub disc_hidden: usize,
    pub init_seed: u64,

    pub lambda_g: f64,
    pub lambda_r1: f64,
    pub ssim_window: usize,
    pub perceptual_scales: Vec<usize>,
    pub perceptual_channels: usize,
    pub perceptual_seed: u64,
    pub perceptual_mean_subtract: bool,
    pub weight_l1: f64,
    pub weight_ssim: f64,
    pub weight_perceptual: f64,
    pub sign_convention: SignConvention,
    pub r1_on: R1Target,

    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub generator_beta1: f64,
    pub generator_beta2: f64,
    pub discriminator_beta1: f64,
    pub discriminator_beta2: f64,
    pub gamma_threshold: f64,
    pub d_extra_pose_count: usize,
    pub use_synthetic: bool,
    pub use_discriminator: bool,
    pub checkpoint_every: usize,

    pub side_yaw: f64,
    pub eval_yaws: Vec<f64>,
    pub depth_align: bool,
    pub probe_seed: u64,
    pub sweep_psis: Vec<f64>,
    pub sweep_count: usize,
    pub ablation_seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        let oracle = OracleConfig::default();
        Self {
            seed: 0,
            device: "cpu".into(),
            synthetic_dir: None,
            real_dir: None,
            test_dir: None,
            n_synthetic: 2000,
            n_real: 500,
            n_test: 100,
            psi: 0.5,
            real_psi: 1.0,
            synthetic_seed: 1,
            real_seed: 2,
            test_seed: 3,
            center_samples: 100_000,
            center_seed: 17,
            latent_dim: oracle.latent_dim,
            blobs: oracle.blobs,
            kappa: oracle.kappa,
            resolution: model.resolution,
            focal_ratio: 1.5,
            yaw_min: -0.6,
            yaw_max: 0.6,
            pitch_min: -0.3,
            pitch_max: 0.3,
            radius: 2.7,
            samples: 96,
            t_near: None,
            t_far: None,
            jitter: false,
            embedding_dim: model.embedding_dim,
            encoder_channels: model.encoder_channels,
            field_width: model.field_width,
            field_layers: model.field_layers,
            pe_frequencies: model.pe_frequencies,
            conditioning: model.conditioning,
            density_scale: model.density_scale,
            density_bias: model.density_bias,
            disc_channels: model.disc_channels,
            disc_hidden: model.disc_hidden,
            init_seed: model.init_seed,
            lambda_g: loss.lambda_g,
            lambda_r1: loss.lambda_r1,
            ssim_window: loss.ssim_window,
            perceptual_scales: loss.perceptual_scales,
            perceptual_channels: loss.perceptual_channels,
            perceptual_seed: loss.perceptual_seed,
            perceptual_mean_subtract: loss.perceptual_mean_subtract,
            weight_l1: loss.weight_l1,
            weight_ssim: loss.weight_ssim,
            weight_perceptual: loss.weight_perceptual,
            sign_convention: loss.sign_convention,
            r1_on: loss.r1_on,
            batch_size: 1,
            total_steps: 20_000,
            lr_generator: 1e-3,
            lr_discriminator: 8e-6,
            generator_beta1: 0.9,
            generator_beta2: 0.999,
            discriminator_beta1: 0.0,
            discriminator_beta2: 0.99,
            gamma_threshold: 0.5,
            d_extra_pose_count: 2,
            use_synthetic: true,
            use_discriminator: true,
            checkpoint_every: 0,
            side_yaw: 0.45,
            eval_yaws: vec![-0.6, -0.3, 0.0, 0.3, 0.6],
            depth_align: true,
            probe_seed: 0x7072_6f62,
            sweep_psis: vec![0.0, 0.3, 0.7, 1.0],
            sweep_count: 200,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values are parsed as TOML literals and
    /// fall back to plain strings. A key given twice is an error.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("conflicting overrides for `{key}`")));
            }
            let value = value.trim();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.psi) || !(0.0..=1.0).contains(&self.real_psi) {
            return bad("psi values must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.gamma_threshold) {
            return bad("gamma_threshold must lie in [0, 1]".into());
        }
        if !(self.focal_ratio > 0.0) || !(self.radius > 0.0) {
            return bad("focal_ratio and radius must be positive".into());
        }
        if self.batch_size == 0 || self.samples == 0 || self.center_samples == 0 {
            return bad("batch_size, samples and center_samples must be positive".into());
        }
        if self.use_discriminator && !self.use_synthetic {
            return bad("the depth discriminator needs synthetic depth maps (use_synthetic = true)".into());
        }
        if self.sweep_psis.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("sweep_psis must lie in [0, 1]".into());
        }
        self.pose_distribution().validate()?;
        self.render_config().validate()?;
        self.intrinsics()?;
        self.model_config().validate()?;
        self.loss_config().validate()?;
        Ok(())
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }

    pub fn pose_distribution(&self) -> PoseDistribution<f64> {
        PoseDistribution {
            yaw_range: [self.yaw_min, self.yaw_max],
            pitch_range: [self.pitch_min, self.pitch_max],
            radius: self.radius,
            look_at: Vec3::zero(),
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics<f64>> {
        Intrinsics::centered(self.resolution, self.resolution, self.focal_ratio * self.resolution as f64)
    }

    pub fn render_config(&self) -> RenderConfig<f64> {
        let mut r = RenderConfig::for_radius(self.radius, self.samples);
        if let Some(t) = self.t_near {
            r.t_near = t;
        }
        if let Some(t) = self.t_far {
            r.t_far = t;
        }
        r.jitter = self.jitter;
        r
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            latent_dim: self.latent_dim,
            blobs: self.blobs,
            kappa: self.kappa,
            ..OracleConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            embedding_dim: self.embedding_dim,
            encoder_channels: self.encoder_channels.clone(),
            field_width: self.field_width,
            field_layers: self.field_layers,
            pe_frequencies: self.pe_frequencies,
            conditioning: self.conditioning,
            density_scale: self.density_scale,
            density_bias: self.density_bias,
            disc_channels: self.disc_channels.clone(),
            disc_hidden: self.disc_hidden,
            init_seed: self.init_seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_g: self.lambda_g,
            lambda_r1: self.lambda_r1,
            ssim_window: self.ssim_window,
            perceptual_scales: self.perceptual_scales.clone(),
            perceptual_channels: self.perceptual_channels,
            perceptual_seed: self.perceptual_seed,
            perceptual_mean_subtract: self.perceptual_mean_subtract,
            weight_l1: self.weight_l1,
            weight_ssim: self.weight_ssim,
            weight_perceptual: self.weight_perceptual,
            sign_convention: self.sign_convention,
            r1_on: self.r1_on,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            generator: AdamConfig {
                lr: self.lr_generator,
                beta1: self.generator_beta1,
                beta2: self.generator_beta2,
                eps: 1e-8,
            },
            discriminator: AdamConfig {
                lr: self.lr_discriminator,
                beta1: self.discriminator_beta1,
                beta2: self.discriminator_beta2,
                eps: 1e-8,
            },
            seed: self.seed,
            gamma_threshold: self.gamma_threshold,
            d_extra_pose_count: self.d_extra_pose_count,
            use_synthetic: self.use_synthetic,
            use_discriminator: self.use_discriminator,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn synthesis_setup(&self) -> Result<SynthesisSetup<f64>> {
        let generator = OracleGenerator::new(self.oracle_config(), self.center_samples, self.center_seed)?;
        Ok(SynthesisSetup {
            generator,
            poses: self.pose_distribution(),
            intrinsics: self.intrinsics()?,
            render: self.render_config(),
            center_samples: self.center_samples,
        })
    }

    /// Loads a pool from `dir` when given, otherwise synthesizes it in memory.
    pub fn pool(&self, setup: &SynthesisSetup<f64>, spec: &PoolSpec, dir: Option<&str>) -> Result<Vec<Triplet<f64>>> {
        match dir {
            Some(d) => {
                let data = Dataset::<f64>::load(Path::new(d))?;
                if data.is_empty() {
                    return Err(Error::EmptyDataset(d.to_string()));
                }
                Ok(data.triplets)
            }
            None => setup.pool(spec, true),
        }
    }

    pub fn training_data(&self, setup: &SynthesisSetup<f64>) -> Result<TrainData<f64>> {
        let synthetic = if self.use_synthetic || self.use_discriminator {
            self.pool(setup, &self.synthetic_pool(), self.synthetic_dir.as_deref())?
        } else {
            Vec::new()
        };
        let real = self.pool(setup, &self.real_pool(), self.real_dir.as_deref())?;
        Ok(TrainData { synthetic, real })
    }

    /// A freshly initialized trainer in precision `T`.
    pub fn trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        Trainer::new(
            self.train_config(),
            self.loss_config(),
            GNerf::new(self.model_config())?,
            self.intrinsics()?.cast(),
            self.render_config().cast(),
            self.pose_distribution().cast(),
        )
    }

    pub fn synthetic_pool(&self) -> PoolSpec {
        PoolSpec {
            count: self.n_synthetic,
            psi: self.psi,
            seed: self.synthetic_seed,
            clean_geometry: false,
            frontal_reference: false,
        }
    }

    /// Single-view "real" images: frontal renders of noise-free scenes.
    pub fn real_pool(&self) -> PoolSpec {
        PoolSpec {
            count: self.n_real,
            psi: self.real_psi,
            seed: self.real_seed,
            clean_geometry: true,
            frontal_reference: true,
        }
    }

    pub fn test_pool(&self) -> PoolSpec {
        PoolSpec {
            count: self.n_test,
            psi: self.real_psi,
            seed: self.test_seed,
            clean_geometry: true,
            frontal_reference: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn overrides_parse_typed_values() {
        let c = Config::default()
            .with_overrides(&["psi=0.25", "sign_convention=standard", "eval_yaws=[0.0, 0.5]"])
            .unwrap();
        assert_eq!(c.psi, 0.25);
        assert_eq!(c.sign_convention, SignConvention::Standard);
        assert_eq!(c.eval_yaws, vec![0.0, 0.5]);
    }

    #[test]
    fn duplicate_overrides_conflict() {
        assert!(Config::default().with_overrides(&["psi=0.2", "psi=0.3"]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let b = a.with_overrides(&["seed=5"]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Config::default().hash());
    }
}
