//! Latent sampling, the fixed mapping network, center-of-mass estimation and
//! truncation toward the center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `z ∼ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode<T>(pub Vec<T>);

/// Code in the intermediate space produced by the mapping network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntermediateLatent<T>(pub Vec<T>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCenter<T> {
    pub values: Vec<T>,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig<T> {
    pub psi: T,
}

impl<T: Scalar> TruncationConfig<T> {
    pub fn new(psi: T) -> Result<Self> {
        if !(psi >= T::zero() && psi <= T::one()) {
            return Err(Error::InvalidArgument(format!("psi must lie in [0, 1], got {psi}")));
        }
        Ok(Self { psi })
    }
}

impl<T: Scalar> Default for TruncationConfig<T> {
    fn default() -> Self {
        Self { psi: T::lit(0.5) }
    }
}

pub fn sample_z<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<LatentCode<T>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("latent dimension must be ≥ 1".into()));
    }
    Ok(LatentCode(
        (0..dim)
            .map(|_| { let v: f64 = StandardNormal.sample(rng); T::lit(v) })
            .collect(),
    ))
}

/// A deterministic map from `z` to `w`.
pub trait LatentMap<T: Scalar>: Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn map(&self, z: &LatentCode<T>) -> Result<IntermediateLatent<T>>;
}

#[derive(Clone, Copy, Debug)]
pub struct IdentityMap {
    pub dim: usize,
}

impl<T: Scalar> LatentMap<T> for IdentityMap {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }
    fn map(&self, z: &LatentCode<T>) -> Result<IntermediateLatent<T>> {
        check_dim(self.dim, z.0.len())?;
        Ok(IntermediateLatent(z.0.clone()))
    }
}

/// Two-layer leaky-ReLU network with fixed-seed Gaussian weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MappingNetwork<T> {
    in_dim: usize,
    out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    w1: Vec<T>,
    b1: Vec<T>,
    /// `out_dim × out_dim`, row-major.
    w2: Vec<T>,
    b2: Vec<T>,
    /// `M(0)`, recorded at construction.
    zero_image: Vec<T>,
}

const LEAK: f64 = 0.2;

impl<T: Scalar> MappingNetwork<T> {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument("mapping dimensions must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<T> {
            (0..n)
                .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); T::lit(scale * v) })
                .collect()
        };
        let w1 = gauss(out_dim * in_dim, (1.0 / in_dim as f64).sqrt());
        let b1 = gauss(out_dim, 0.3);
        let w2 = gauss(out_dim * out_dim, (2.0 / out_dim as f64).sqrt());
        let b2 = gauss(out_dim, 0.3);
        let mut net = Self {
            in_dim,
            out_dim,
            w1,
            b1,
            w2,
            b2,
            zero_image: Vec::new(),
        };
        net.zero_image = net.forward(&vec![T::zero(); in_dim]);
        Ok(net)
    }

    pub fn zero_image(&self) -> &[T] {
        &self.zero_image
    }

    /// `(w1, w2)` as row-major matrices.
    pub fn weights(&self) -> (&[T], &[T]) {
        (&self.w1, &self.w2)
    }

    fn forward(&self, z: &[T]) -> Vec<T> {
        let leak = T::lit(LEAK);
        let hidden: Vec<T> = self
            .w1
            .chunks_exact(self.in_dim)
            .zip(&self.b1)
            .map(|(row, &b)| {
                let a = row.iter().zip(z).map(|(&w, &x)| w * x).sum::<T>() + b;
                if a >= T::zero() {
                    a
                } else {
                    a * leak
                }
            })
            .collect();
        self.w2
            .chunks_exact(self.out_dim)
            .zip(&self.b2)
            .map(|(row, &b)| row.iter().zip(&hidden).map(|(&w, &h)| w * h).sum::<T>() + b)
            .collect()
    }
}

impl<T: Scalar> LatentMap<T> for MappingNetwork<T> {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn map(&self, z: &LatentCode<T>) -> Result<IntermediateLatent<T>> {
        check_dim(self.in_dim, z.0.len())?;
        Ok(IntermediateLatent(self.forward(&z.0)))
    }
}

/// Monte-Carlo estimate of `E_z[M(z)]` from `n` fresh draws.
pub fn estimate_center<T: Scalar, R: Rng + ?Sized>(
    mapping: &dyn LatentMap<T>,
    n: usize,
    rng: &mut R,
) -> Result<LatentCenter<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("center estimate needs n ≥ 1".into()));
    }
    let dim = mapping.out_dim();
    // accumulate in f64 so f32 runs with large n stay accurate
    let mut acc = vec![0.0f64; dim];
    for _ in 0..n {
        let w = mapping.map(&sample_z(mapping.in_dim(), rng)?)?;
        for (a, v) in acc.iter_mut().zip(&w.0) {
            *a += v.re();
        }
    }
    Ok(LatentCenter {
        values: acc.into_iter().map(|a| T::lit(a / n as f64)).collect(),
        n_samples: n,
    })
}

/// `w̄ + ψ(w − w̄)`.
///
/// Evaluated as `(1 − ψ)·w̄ + ψ·w`, which is the same affine map but returns
/// `w̄` and `w` bit-for-bit at the endpoints.
pub fn truncate<T: Scalar>(
    w: &IntermediateLatent<T>,
    center: &LatentCenter<T>,
    cfg: &TruncationConfig<T>,
) -> Result<IntermediateLatent<T>> {
    check_dim(center.values.len(), w.0.len())?;
    let psi = cfg.psi;
    let keep = T::one() - psi;
    Ok(IntermediateLatent(
        w.0.iter()
            .zip(&center.values)
            .map(|(&wi, &ci)| keep * ci + psi * wi)
            .collect(),
    ))
}

pub fn l2_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
