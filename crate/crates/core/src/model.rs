//! Scene encoder, embedding-conditioned radiance field and pose-conditioned
//! depth discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::graph::{conv_out, Conv2dSpec, Graph, NodeId};
use crate::image::Image;
use crate::linalg::Vec3;
use crate::render::{samples_from_offsets, FieldSample, RadianceField, RenderConfig, RenderedView};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Per-layer scale and shift predicted from the embedding.
    Modulation,
    /// Embedding concatenated to the encoded position.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub embedding_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub field_width: usize,
    pub field_layers: usize,
    pub pe_frequencies: usize,
    pub conditioning: Conditioning,
    /// Multiplier on the softplus density head.
    pub density_scale: f64,
    /// Offset added before the density softplus; negative starts the volume near-empty.
    pub density_bias: f64,
    pub disc_channels: Vec<usize>,
    pub disc_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            embedding_dim: 128,
            encoder_channels: vec![16, 32, 64],
            field_width: 64,
            field_layers: 4,
            pe_frequencies: 4,
            conditioning: Conditioning::Modulation,
            density_scale: 10.0,
            density_bias: -4.0,
            disc_channels: vec![16, 32],
            disc_hidden: 64,
            init_seed: 0x6d6f_6465,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || self.embedding_dim == 0 || self.field_width == 0 || self.field_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.encoder_channels.is_empty() || self.disc_channels.is_empty() || self.disc_hidden == 0 {
            return Err(Error::Config("encoder and discriminator need at least one layer".into()));
        }
        if self.encoder_channels.contains(&0) || self.disc_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.density_scale > 0.0) {
            return Err(Error::Config("density_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn pe_dim(&self) -> usize {
        3 + 6 * self.pe_frequencies
    }
}

/// Named parameter tensors of one network group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Adds every tensor to `g`, as trainable leaves or frozen constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn gauss<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(std * v)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn dense<T: Scalar>(&mut self, p: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Dense {
        let w = p.push(
            format!("{name}.weight"),
            self.gauss(&[fan_in, fan_out], gain / (fan_in as f64).sqrt()),
        );
        let b = p.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Dense { w, b }
    }

    fn conv<T: Scalar>(&mut self, p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Conv {
        let w = p.push(
            format!("{name}.weight"),
            self.gauss(&[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt()),
        );
        let b = p.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { w, b }
    }
}

const LEAK: f64 = 0.2;
const COORD_CHANNELS: usize = 2;
const POSE_DIM: usize = 16;

/// Output of [`GNerf::render_node`].
#[derive(Clone, Copy, Debug)]
pub struct RenderNodes {
    /// `[3, H, W]`
    pub image: NodeId,
    /// `[1, H, W]`
    pub depth: NodeId,
    /// `[1, H, W]`
    pub weights: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEmbedding<T>(pub Vec<T>);

/// Encoder `E`, conditioned field `G_n` and depth discriminator `D_g`.
///
/// `generator` holds the parameters of `E` and `G_n`, `discriminator`
/// those of `D_g`; they are optimized separately.
#[derive(Clone, Debug)]
pub struct GNerf<T> {
    pub cfg: ModelConfig,
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
    enc_convs: Vec<Conv>,
    enc_out: Dense,
    trunk: Vec<Dense>,
    film: Vec<Dense>,
    density_head: Dense,
    color_head: Dense,
    disc_convs: Vec<Conv>,
    disc_hidden: Dense,
    disc_out: Dense,
}

impl<T: Scalar> GNerf<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
        };
        let mut gen = ParamStore::new();
        let mut cin = 3 + COORD_CHANNELS;
        let mut enc_convs = Vec::new();
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            enc_convs.push(init.conv(&mut gen, &format!("encoder.conv{i}"), cin, c));
            cin = c;
        }
        let enc_out = init.dense(&mut gen, "encoder.out", cin, cfg.embedding_dim, 1.0);

        let width = cfg.field_width;
        let first_in = match cfg.conditioning {
            Conditioning::Modulation => cfg.pe_dim(),
            Conditioning::Concat => cfg.pe_dim() + cfg.embedding_dim,
        };
        let mut trunk = Vec::new();
        let mut film = Vec::new();
        for l in 0..cfg.field_layers {
            let fan_in = if l == 0 { first_in } else { width };
            trunk.push(init.dense(&mut gen, &format!("field.layer{l}"), fan_in, width, 2f64.sqrt()));
            if cfg.conditioning == Conditioning::Modulation {
                film.push(init.dense(&mut gen, &format!("field.film{l}"), cfg.embedding_dim, 2 * width, 0.5));
            }
        }
        let density_head = init.dense(&mut gen, "field.density", width, 1, 1.0);
        let color_head = init.dense(&mut gen, "field.color", width + 3, 3, 1.0);

        let mut disc = ParamStore::new();
        let mut cin = 2;
        let mut side = cfg.resolution;
        let mut disc_convs = Vec::new();
        for (i, &c) in cfg.disc_channels.iter().enumerate() {
            disc_convs.push(init.conv(&mut disc, &format!("disc.conv{i}"), cin, c));
            cin = c;
            side = conv_out(side, side, 3, Conv2dSpec { stride: 2, padding: 1 }).0;
        }
        let flat = cin * side * side;
        let disc_hidden = init.dense(&mut disc, "disc.hidden", flat + POSE_DIM, cfg.disc_hidden, 2f64.sqrt());
        let disc_out = init.dense(&mut disc, "disc.out", cfg.disc_hidden, 1, 1.0);
        Ok(Self {
            cfg,
            generator: gen,
            discriminator: disc,
            enc_convs,
            enc_out,
            trunk,
            film,
            density_head,
            color_head,
            disc_convs,
            disc_hidden,
            disc_out,
        })
    }

    /// Same architecture with parameters converted to another scalar.
    pub fn cast<U: Scalar>(&self) -> GNerf<U> {
        GNerf {
            cfg: self.cfg.clone(),
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            enc_convs: self.enc_convs.clone(),
            enc_out: self.enc_out,
            trunk: self.trunk.clone(),
            film: self.film.clone(),
            density_head: self.density_head,
            color_head: self.color_head,
            disc_convs: self.disc_convs.clone(),
            disc_hidden: self.disc_hidden,
            disc_out: self.disc_out,
        }
    }

    /// Discriminator-only copy in another scalar; the generator group is left empty.
    pub fn cast_discriminator<U: Scalar>(&self) -> GNerf<U> {
        GNerf {
            cfg: self.cfg.clone(),
            generator: ParamStore::new(),
            discriminator: self.discriminator.cast(),
            enc_convs: self.enc_convs.clone(),
            enc_out: self.enc_out,
            trunk: self.trunk.clone(),
            film: self.film.clone(),
            density_head: self.density_head,
            color_head: self.color_head,
            disc_convs: self.disc_convs.clone(),
            disc_hidden: self.disc_hidden,
            disc_out: self.disc_out,
        }
    }

    fn dense_node(g: &mut Graph<T>, p: &[NodeId], d: Dense, x: NodeId) -> NodeId {
        let y = g.matmul(x, p[d.w]);
        g.add_row(y, p[d.b])
    }

    fn check_image(&self, shape: &[usize], channels: usize) -> Result<()> {
        let r = self.cfg.resolution;
        if shape != [channels, r, r] {
            return Err(Error::ShapeMismatch(vec![channels, r, r], shape.to_vec()));
        }
        Ok(())
    }

    /// `[2, H, W]` pixel coordinates in `[−1, 1]`.
    fn coord_channels(h: usize, w: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * h * w);
        let lin = |i: usize, n: usize| T::lit(2.0 * (i as f64 + 0.5) / n as f64 - 1.0);
        for y in 0..h {
            for _ in 0..w {
                data.push(lin(y, h));
            }
        }
        for _ in 0..h {
            for x in 0..w {
                data.push(lin(x, w));
            }
        }
        Tensor::new(vec![2, h, w], data).unwrap()
    }

    /// `E(I)`: image `[3, H, W]` to embedding `[1, D]`.
    pub fn encode_node(&self, g: &mut Graph<T>, p: &[NodeId], image: NodeId) -> Result<NodeId> {
        self.check_image(g.shape(image), 3)?;
        let (h, w) = (self.cfg.resolution, self.cfg.resolution);
        let flat_img = g.reshape(image, &[1, 3 * h * w]);
        let coords = g.constant(Self::coord_channels(h, w).reshaped(&[1, 2 * h * w]));
        let x = g.concat_cols(flat_img, coords);
        let mut x = g.reshape(x, &[3 + COORD_CHANNELS, h, w]);
        for c in &self.enc_convs {
            let y = g.conv2d(x, p[c.w], Some(p[c.b]), Conv2dSpec { stride: 2, padding: 1 });
            x = g.leaky_relu(y, T::lit(LEAK));
        }
        let pooled = g.global_avg_pool(x);
        let n = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, n]);
        Ok(Self::dense_node(g, p, self.enc_out, pooled))
    }

    /// Positional encoding `[x, sin(2^k π x), cos(2^k π x)]` of world points.
    pub fn encode_positions(&self, points: &[Vec3<T>]) -> Tensor<T> {
        let l = self.cfg.pe_frequencies;
        let dim = self.cfg.pe_dim();
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            data.extend_from_slice(&p.0);
            for k in 0..l {
                let f = T::lit(std::f64::consts::PI * (1u64 << k) as f64);
                for c in 0..3 {
                    data.push((p[c] * f).sin());
                }
                for c in 0..3 {
                    data.push((p[c] * f).cos());
                }
            }
        }
        Tensor::new(vec![points.len(), dim], data).unwrap()
    }

    /// Field evaluation at `[N, pe_dim]` encoded points with `[N, 3]` view
    /// directions. Returns densities `[N, 1]` and colors `[N, 3]`.
    pub fn field_node(
        &self,
        g: &mut Graph<T>,
        p: &[NodeId],
        embedding: NodeId,
        encoded: NodeId,
        directions: NodeId,
    ) -> (NodeId, NodeId) {
        let n = g.shape(encoded)[0];
        let mut h = match self.cfg.conditioning {
            Conditioning::Modulation => encoded,
            Conditioning::Concat => {
                let e = g.reshape(embedding, &[self.cfg.embedding_dim]);
                let tiled = g.repeat_rows(e, n);
                g.concat_cols(encoded, tiled)
            }
        };
        let width = self.cfg.field_width;
        for (l, &d) in self.trunk.iter().enumerate() {
            let y = Self::dense_node(g, p, d, h);
            h = g.relu(y);
            if let Some(&f) = self.film.get(l) {
                let gb = Self::dense_node(g, p, f, embedding);
                let gamma = g.select_cols(gb, 0, width);
                let beta = g.select_cols(gb, width, width);
                let gamma = g.reshape(gamma, &[width]);
                let beta = g.reshape(beta, &[width]);
                let scale = g.add_scalar(gamma, T::one());
                let m = g.mul_row(h, scale);
                h = g.add_row(m, beta);
            }
        }
        let raw_sigma = Self::dense_node(g, p, self.density_head, h);
        let raw_sigma = g.add_scalar(raw_sigma, T::lit(self.cfg.density_bias));
        let sigma = g.softplus(raw_sigma);
        let sigma = g.scale(sigma, T::lit(self.cfg.density_scale));
        let hd = g.concat_cols(h, directions);
        let raw_rgb = Self::dense_node(g, p, self.color_head, hd);
        let rgb = g.sigmoid(raw_rgb);
        (sigma, rgb)
    }

    /// Differentiable render of the conditioned field. `offsets` are the
    /// in-bin sample positions (`rays × samples`, 0.5 without jitter).
    pub fn render_node(
        &self,
        g: &mut Graph<T>,
        p: &[NodeId],
        embedding: NodeId,
        pose: &CameraPose<T>,
        intr: &Intrinsics<T>,
        cfg: &RenderConfig<T>,
        offsets: &[f64],
    ) -> Result<RenderNodes> {
        cfg.validate()?;
        intr.validate()?;
        let (h, w) = (intr.height, intr.width);
        let rays = generate_rays(pose, intr);
        let ns = cfg.samples;
        if offsets.len() != rays.len() * ns {
            return Err(Error::DimensionMismatch {
                expected: rays.len() * ns,
                got: offsets.len(),
            });
        }
        let mut points = Vec::with_capacity(rays.len() * ns);
        let mut dirs = Vec::with_capacity(rays.len() * ns * 3);
        let mut ts = Vec::with_capacity(rays.len() * ns);
        let mut deltas = Vec::with_capacity(rays.len() * ns);
        for (ray, offs) in rays.iter().zip(offsets.chunks_exact(ns)) {
            let s = samples_from_offsets(cfg.t_near, cfg.t_far, offs, cfg.jitter);
            for &t in &s.t_values {
                points.push(ray.at(t));
                dirs.extend_from_slice(&ray.direction.0);
            }
            ts.extend(s.t_values);
            deltas.extend(s.deltas);
        }
        let enc = g.constant(self.encode_positions(&points));
        let dir = g.constant(Tensor::new(vec![points.len(), 3], dirs).unwrap());
        let (sigma, rgb) = self.field_node(g, p, embedding, enc, dir);
        let out = g.composite(sigma, rgb, ts, deltas, ns, cfg.background);
        let color = g.select_cols(out, 0, 3);
        let color = g.transpose(color);
        let image = g.reshape(color, &[3, h, w]);
        let depth = g.select_cols(out, 3, 1);
        let depth = g.reshape(depth, &[1, h, w]);
        let weights = g.select_cols(out, 4, 1);
        let weights = g.reshape(weights, &[1, h, w]);
        Ok(RenderNodes { image, depth, weights })
    }

    /// `D_g(depth | pose)`: depth `[1, H, W]`, validity mask of `H·W` entries.
    /// Depth is standardized over the mask and the mask is stacked as a
    /// second channel. Returns a `[1, 1]` logit.
    pub fn discriminate_node(
        &self,
        g: &mut Graph<T>,
        p: &[NodeId],
        depth: NodeId,
        mask: &[bool],
        pose: &CameraPose<T>,
    ) -> Result<NodeId> {
        self.check_image(g.shape(depth), 1)?;
        let r = self.cfg.resolution;
        if mask.len() != r * r {
            return Err(Error::DimensionMismatch {
                expected: r * r,
                got: mask.len(),
            });
        }
        let norm = g.masked_standardize(depth, mask, T::lit(1e-4));
        let norm = g.reshape(norm, &[1, r * r]);
        let m = g.constant(Tensor::new(
            vec![1, r * r],
            mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )?);
        let x = g.concat_cols(norm, m);
        let mut x = g.reshape(x, &[2, r, r]);
        for c in &self.disc_convs {
            let y = g.conv2d(x, p[c.w], Some(p[c.b]), Conv2dSpec { stride: 2, padding: 1 });
            x = g.leaky_relu(y, T::lit(LEAK));
        }
        let n = g.value(x).len();
        let flat = g.reshape(x, &[1, n]);
        let pose_vec = g.constant(Tensor::new(vec![1, POSE_DIM], pose.to_matrix().to_vec())?);
        let feats = g.concat_cols(flat, pose_vec);
        let hid = Self::dense_node(g, p, self.disc_hidden, feats);
        let hid = g.leaky_relu(hid, T::lit(LEAK));
        Ok(Self::dense_node(g, p, self.disc_out, hid))
    }

    pub fn encode(&self, image: &Image<T>) -> Result<SceneEmbedding<T>> {
        let mut g = Graph::new();
        let p = self.generator.bind(&mut g, false);
        let x = g.constant(image.to_tensor());
        let e = self.encode_node(&mut g, &p, x)?;
        Ok(SceneEmbedding(g.value(e).data().to_vec()))
    }

    fn embedding_const(&self, g: &mut Graph<T>, e: &SceneEmbedding<T>) -> Result<NodeId> {
        if e.0.len() != self.cfg.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.embedding_dim,
                got: e.0.len(),
            });
        }
        Ok(g.constant(Tensor::new(vec![1, e.0.len()], e.0.clone())?))
    }

    /// The conditioned field as a point-query evaluator.
    pub fn conditioned_field<'a>(&'a self, embedding: &'a SceneEmbedding<T>) -> Result<ConditionedField<'a, T>> {
        if embedding.0.len() != self.cfg.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.embedding_dim,
                got: embedding.0.len(),
            });
        }
        Ok(ConditionedField { model: self, embedding })
    }

    /// Evaluates the field at many points at once.
    pub fn query_batch(
        &self,
        embedding: &SceneEmbedding<T>,
        points: &[Vec3<T>],
        directions: &[Vec3<T>],
    ) -> Result<Vec<FieldSample<T>>> {
        let mut g = Graph::new();
        let p = self.generator.bind(&mut g, false);
        let e = self.embedding_const(&mut g, embedding)?;
        let enc = g.constant(self.encode_positions(points));
        let dir = g.constant(Tensor::new(
            vec![directions.len(), 3],
            directions.iter().flat_map(|d| d.0).collect(),
        )?);
        let (sigma, rgb) = self.field_node(&mut g, &p, e, enc, dir);
        let (s, c) = (g.value(sigma).data(), g.value(rgb).data());
        Ok((0..points.len())
            .map(|i| FieldSample {
                color: [c[3 * i], c[3 * i + 1], c[3 * i + 2]],
                density: s[i],
            })
            .collect())
    }

    /// Renders the field conditioned on `embedding` from `pose`.
    pub fn generate(
        &self,
        pose: &CameraPose<T>,
        embedding: &SceneEmbedding<T>,
        intr: &Intrinsics<T>,
        cfg: &RenderConfig<T>,
        offsets: &[f64],
    ) -> Result<RenderedView<T>> {
        let mut g = Graph::new();
        let p = self.generator.bind(&mut g, false);
        let e = self.embedding_const(&mut g, embedding)?;
        let out = self.render_node(&mut g, &p, e, pose, intr, cfg, offsets)?;
        let (h, w) = (intr.height, intr.width);
        Ok(RenderedView {
            image: Image::new(w, h, 3, g.value(out.image).data().to_vec())?,
            depth: Image::new(w, h, 1, g.value(out.depth).data().to_vec())?,
            weights: Image::new(w, h, 1, g.value(out.weights).data().to_vec())?,
        })
    }

    pub fn discriminate(&self, depth: &Image<T>, mask: &[bool], pose: &CameraPose<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = self.discriminator.bind(&mut g, false);
        let d = g.constant(depth.to_tensor());
        let l = self.discriminate_node(&mut g, &p, d, mask, pose)?;
        Ok(g.scalar(l))
    }

    /// Named tensors of both groups, generator first, in `f32`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.generator
            .names
            .iter()
            .zip(&self.generator.tensors)
            .chain(self.discriminator.names.iter().zip(&self.discriminator.tensors))
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.generator
            .names
            .iter()
            .chain(&self.discriminator.names)
            .cloned()
            .collect()
    }

    /// Replaces every parameter by the same-named tensor from `tensors`.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let missing: Vec<String> = self
            .tensor_names()
            .into_iter()
            .filter(|n| find(n).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for store in [&mut self.generator, &mut self.discriminator] {
            for (name, t) in store.names.iter().zip(store.tensors.iter_mut()) {
                let src = find(name).expect("checked above");
                if src.shape() != t.shape() {
                    return Err(Error::ShapeMismatch(t.shape().to_vec(), src.shape().to_vec()));
                }
                *t = src.cast();
            }
        }
        Ok(())
    }
}

/// Point-query view of the conditioned field (one small graph per query).
pub struct ConditionedField<'a, T> {
    model: &'a GNerf<T>,
    embedding: &'a SceneEmbedding<T>,
}

impl<T: Scalar> RadianceField<T> for ConditionedField<'_, T> {
    fn query(&self, position: &Vec3<T>, direction: &Vec3<T>) -> FieldSample<T> {
        self.model
            .query_batch(self.embedding, &[*position], &[*direction])
            .expect("embedding dimension checked at construction")[0]
    }
}

/// Weight-map mask used throughout: accumulated weight of at least one half.
pub fn weight_mask<T: Scalar>(weights: &[T]) -> Vec<bool> {
    weights.iter().map(|&w| w >= T::lit(0.5)).collect()
}

/// Euclidean distance between two embeddings.
pub fn embedding_distance<T: Scalar>(a: &SceneEmbedding<T>, b: &SceneEmbedding<T>) -> T {
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// Cosine similarity of two embeddings.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na * nb)
}
