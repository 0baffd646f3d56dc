#![allow(dead_code)]

use gnerf_core::config::Config;
use gnerf_core::model::{Conditioning, ModelConfig};

pub const TINY: &[&str] = &[
    "resolution=16",
    "samples=8",
    "n_synthetic=6",
    "n_real=4",
    "n_test=3",
    "center_samples=300",
    "embedding_dim=16",
    "encoder_channels=[4, 8]",
    "field_width=16",
    "field_layers=2",
    "disc_channels=[4]",
    "disc_hidden=8",
    "ssim_window=7",
    "eval_yaws=[-0.6, 0.0, 0.6]",
    "lr_discriminator=1e-4",
];

pub fn tiny_config(extra: &[&str]) -> Config {
    Config::default()
        .with_overrides(TINY)
        .and_then(|c| c.with_overrides(extra))
        .expect("valid test config")
}

/// A model small enough for per-parameter finite differences.
pub fn probe_model_config() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        embedding_dim: 6,
        encoder_channels: vec![3, 4],
        field_width: 8,
        field_layers: 2,
        pe_frequencies: 2,
        conditioning: Conditioning::Modulation,
        density_scale: 10.0,
        density_bias: -1.0,
        disc_channels: vec![3],
        disc_hidden: 6,
        init_seed: 11,
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of `f` around `x[i]`.
pub fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

pub mod gradcheck {
    use gnerf_core::camera::{orbit_pose, Intrinsics};
    use gnerf_core::graph::Graph;
    use gnerf_core::image::Image;
    use gnerf_core::linalg::Vec3;
    use gnerf_core::losses::{recon_loss, recon_node, FeatureExtractor, LossConfig};
    use gnerf_core::model::{GNerf, SceneEmbedding};
    use gnerf_core::render::RenderConfig;
    use gnerf_core::tensor::Tensor;
    use gnerf_core::train::{r1_penalty, DepthSample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{central, probe_model_config, rel_err};

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Image<f64> {
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Indices `(tensor, entry)` spread over every parameter tensor.
    fn pick_entries(tensors: &[Tensor<f64>], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, t) in tensors.iter().enumerate() {
            for _ in 0..per_tensor.min(t.len()) {
                out.push((k, rng.gen_range(0..t.len())));
            }
        }
        out
    }

    pub struct R1Check {
        /// `Σ(∂D/∂x)²` against squared central differences of the logit.
        pub penalty: f64,
        /// Its parameter gradient against central differences of the penalty.
        pub parameter_gradient: f64,
    }

    pub fn r1(seed: u64) -> R1Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = GNerf::<f64>::new(probe_model_config()).unwrap();
        let r = model.cfg.resolution;
        let depth = random_image(&mut rng, r, r, 1, 2.0, 3.0);
        let mask: Vec<bool> = (0..r * r).map(|i| (i / r).abs_diff(r / 2) + (i % r).abs_diff(r / 2) < 5).collect();
        let pose = orbit_pose(0.2, -0.1, 2.7, Vec3::zero()).unwrap();
        let sample = DepthSample { depth: depth.clone(), mask: mask.clone(), pose };

        let (sq, hvp) = r1_penalty(&model, &sample).unwrap();
        let logit = |x: &[f64]| {
            let img = Image::new(r, r, 1, x.to_vec()).unwrap();
            model.discriminate(&img, &mask, &pose).unwrap()
        };
        let fd_sq: f64 = (0..r * r).map(|i| central(&depth.data, i, 1e-5, logit).powi(2)).sum();
        let penalty = rel_err(&[sq], &[fd_sq]);

        let entries = pick_entries(&model.discriminator.tensors, 3, &mut rng);
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for &(k, i) in &entries {
            let base = model.discriminator.tensors[k].data().to_vec();
            let penalty_at = |theta: &[f64]| {
                let mut m = model.clone();
                m.discriminator.tensors[k].data_mut().copy_from_slice(theta);
                r1_penalty(&m, &sample).unwrap().0
            };
            fd.push(central(&base, i, 1e-5, penalty_at));
            an.push(hvp[k].data()[i]);
        }
        R1Check {
            penalty,
            parameter_gradient: rel_err(&an, &fd),
        }
    }

    pub fn recon(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LossConfig {
            ssim_window: 7,
            ..LossConfig::default()
        };
        let features = FeatureExtractor::<f64>::new(&cfg, 3).unwrap();
        let fake = random_image(&mut rng, 16, 16, 3, 0.1, 0.9);
        let reference = random_image(&mut rng, 16, 16, 3, 0.1, 0.9);
        let mut g = Graph::new();
        let x = g.param(fake.to_tensor());
        let y = g.constant(reference.to_tensor());
        let nodes = recon_node(&mut g, x, y, &cfg, &features).unwrap();
        let grads = g.backward(nodes.total);
        let gx = grads.wrt(x).unwrap().data().to_vec();
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for _ in 0..40 {
            let i = rng.gen_range(0..fake.data.len());
            fd.push(central(&fake.data, i, 1e-5, |v| {
                let img = Image::new(16, 16, 3, v.to_vec()).unwrap();
                recon_loss(&img, &reference, &cfg, &features).unwrap()
            }));
            an.push(gx[i]);
        }
        rel_err(&an, &fd)
    }

    /// Weighted sum of a rendered image and depth map, differentiated
    /// through compositing into the field parameters and the embedding.
    pub fn render(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = GNerf::<f64>::new(probe_model_config()).unwrap();
        let intr = Intrinsics::centered(3, 3, 4.0).unwrap();
        let rcfg = RenderConfig::for_radius(2.7, 12);
        let offsets = vec![0.5; intr.pixel_count() * rcfg.samples];
        let pose = orbit_pose(0.3, 0.1, 2.7, Vec3::zero()).unwrap();
        let d = model.cfg.embedding_dim;
        let emb: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ci: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cd: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |m: &GNerf<f64>, e: &[f64]| {
            let v = m.generate(&pose, &SceneEmbedding(e.to_vec()), &intr, &rcfg, &offsets).unwrap();
            v.image.data.iter().zip(&ci).map(|(a, b)| a * b).sum::<f64>()
                + v.depth.data.iter().zip(&cd).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut g = Graph::new();
        let p = model.generator.bind(&mut g, true);
        let e = g.param(Tensor::new(vec![1, d], emb.clone()).unwrap());
        let out = model.render_node(&mut g, &p, e, &pose, &intr, &rcfg, &offsets).unwrap();
        let wi = g.constant(Tensor::new(vec![3, 3, 3], ci.clone()).unwrap());
        let wd = g.constant(Tensor::new(vec![1, 3, 3], cd.clone()).unwrap());
        let a = g.mul(out.image, wi);
        let b = g.mul(out.depth, wd);
        let sa = g.sum(a);
        let sb = g.sum(b);
        let loss = g.add(sa, sb);
        let grads = g.backward(loss);

        let mut fd = Vec::new();
        let mut an = Vec::new();
        let ge = grads.wrt(e).unwrap().data().to_vec();
        for i in 0..d {
            fd.push(central(&emb, i, 1e-5, |x| objective(&model, x)));
            an.push(ge[i]);
        }
        for (k, i) in pick_entries(&model.generator.tensors, 2, &mut rng) {
            let gk = match grads.wrt(p[k]) {
                Some(t) => t.data()[i],
                None => 0.0,
            };
            let base = model.generator.tensors[k].data().to_vec();
            fd.push(central(&base, i, 1e-5, |theta| {
                let mut m = model.clone();
                m.generator.tensors[k].data_mut().copy_from_slice(theta);
                objective(&m, &emb)
            }));
            an.push(gk);
        }
        rel_err(&an, &fd)
    }
}

pub mod blobs {
    use gnerf_core::linalg::Vec3;
    use gnerf_core::render::{composite, stratified_samples};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Blob {
        pub center: [f64; 3],
        pub sigma: f64,
        pub amplitude: f64,
        pub color: [f64; 3],
    }

    pub fn three_blobs() -> Vec<Blob> {
        vec![
            Blob { center: [0.0, 0.0, 0.0], sigma: 0.25, amplitude: 8.0, color: [0.9, 0.2, 0.1] },
            Blob { center: [0.3, 0.1, -0.2], sigma: 0.15, amplitude: 12.0, color: [0.1, 0.8, 0.3] },
            Blob { center: [-0.25, -0.2, 0.15], sigma: 0.2, amplitude: 6.0, color: [0.2, 0.3, 0.9] },
        ]
    }

    /// Density and density-weighted color at `p`.
    pub fn query(blobs: &[Blob], p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut density = 0.0;
        let mut c = [0.0; 3];
        for b in blobs {
            let q: f64 = (0..3).map(|k| (p[k] - b.center[k]).powi(2)).sum();
            let d = b.amplitude * (-q / (2.0 * b.sigma * b.sigma)).exp();
            density += d;
            for k in 0..3 {
                c[k] += d * b.color[k];
            }
        }
        if density > 0.0 {
            for v in &mut c {
                *v /= density;
            }
        }
        (density, c)
    }

    pub struct RayResult {
        pub color: [f64; 3],
        pub depth: f64,
    }

    fn point(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
        [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
    }

    /// Alpha compositing through the library renderer.
    pub fn rendered(blobs: &[Blob], o: [f64; 3], d: [f64; 3], near: f64, far: f64, n: usize) -> RayResult {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = stratified_samples(near, far, n, &mut rng, false).unwrap();
        let (dens, cols): (Vec<f64>, Vec<[f64; 3]>) = s.t_values.iter().map(|&t| query(blobs, point(o, d, t))).unzip();
        let out = composite(&cols, &dens, &s).unwrap();
        RayResult { color: out.color, depth: out.depth }
    }

    /// Midpoint-rule quadrature of `∫ T(t) σ(t) c(t) dt` and `∫ T(t) σ(t) t dt`
    /// with `T(t) = exp(−∫σ)`.
    pub fn integrated(blobs: &[Blob], o: [f64; 3], d: [f64; 3], near: f64, far: f64, n: usize) -> RayResult {
        let h = (far - near) / n as f64;
        let mut optical = 0.0;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        for i in 0..n {
            let t = near + (i as f64 + 0.5) * h;
            let (sigma, c) = query(blobs, point(o, d, t));
            let trans = (-(optical + 0.5 * sigma * h)).exp();
            for k in 0..3 {
                color[k] += trans * sigma * c[k] * h;
            }
            depth += trans * sigma * t * h;
            optical += sigma * h;
        }
        RayResult { color, depth }
    }

    /// Largest color and depth deviation between the renderer at `coarse`
    /// samples and the quadrature at `fine` samples over `rays` random rays.
    pub fn compare(rays: usize, coarse: usize, fine: usize, seed: u64) -> (f64, f64) {
        let blobs = three_blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (near, far) = (1.2, 4.2);
        let mut worst = (0.0f64, 0.0f64);
        for _ in 0..rays {
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized();
            let origin = dir.scale(2.7);
            let aim = Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
            let d = (aim - origin).normalized();
            let (o, d) = ([origin[0], origin[1], origin[2]], [d[0], d[1], d[2]]);
            let a = rendered(&blobs, o, d, near, far, coarse);
            let b = integrated(&blobs, o, d, near, far, fine);
            for k in 0..3 {
                worst.0 = worst.0.max((a.color[k] - b.color[k]).abs());
            }
            worst.1 = worst.1.max((a.depth - b.depth).abs());
        }
        worst
    }
}
