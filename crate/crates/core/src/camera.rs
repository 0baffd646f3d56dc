//! Pinhole camera model, pose distribution and per-pixel ray generation.
//!
//! Conventions: camera-to-world extrinsics, right-handed world, and the
//! camera looks down its local −z axis with +y up and +x right. Image rows
//! grow downward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::{cast, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub focal_px: T,
    pub principal_point: [T; 2],
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Intrinsics<T> {
    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn centered(width: usize, height: usize, focal_px: T) -> Result<Self> {
        let intr = Self {
            focal_px,
            principal_point: [T::lit(width as f64 / 2.0), T::lit(height as f64 / 2.0)],
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        Intrinsics {
            focal_px: cast(self.focal_px),
            principal_point: self.principal_point.map(cast),
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > T::zero()) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "intrinsics need focal_px > 0 and a non-empty image, got f={} {}x{}",
                self.focal_px, self.width, self.height
            )));
        }
        let [cx, cy] = self.principal_point;
        let inside = |c: T, n: usize| c >= T::zero() && c <= T::lit(n as f64);
        if !inside(cx, self.width) || !inside(cy, self.height) {
            return Err(Error::InvalidArgument(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose<T> {
    /// Camera-to-world rotation; columns are the camera x, y, z axes.
    pub rotation: Mat3<T>,
    /// Camera center in world coordinates.
    pub translation: Vec3<T>,
}

impl<T: Scalar> CameraPose<T> {
    /// World-space viewing direction (camera −z).
    pub fn forward(&self) -> Vec3<T> {
        -self.rotation.col(2)
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn to_matrix(&self) -> [T; 16] {
        let r = &self.rotation.0;
        let t = &self.translation.0;
        let (z, o) = (T::zero(), T::one());
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            z, z, z, o,
        ]
    }

    pub fn from_matrix(m: &[T; 16]) -> Self {
        Self {
            rotation: Mat3([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]),
            translation: Vec3([m[3], m[7], m[11]]),
        }
    }

    /// Yaw of the camera center around `look_at`, measured from +z toward +x.
    pub fn yaw_about(&self, look_at: &Vec3<T>) -> T {
        let d = self.translation - *look_at;
        d.x().atan2(d.z())
    }

    /// Applies a world rotation `q` to the whole rig.
    pub fn rotated(&self, q: &Mat3<T>) -> Self {
        Self {
            rotation: *q * self.rotation,
            translation: q.mul_vec(&self.translation),
        }
    }

    pub fn cast<U: Scalar>(&self) -> CameraPose<U> {
        CameraPose {
            rotation: self.rotation.cast(),
            translation: self.translation.cast(),
        }
    }
}

/// Camera looking from `eye` at `target` with world +y as the up hint.
pub fn look_at<T: Scalar>(eye: Vec3<T>, target: Vec3<T>) -> Result<CameraPose<T>> {
    let to_target = target - eye;
    let dist = to_target.norm();
    if !(dist > T::lit(1e-9)) {
        return Err(Error::DegenerateLookAt);
    }
    let forward = to_target.scale(T::one() / dist);
    let world_up = Vec3::new(T::zero(), T::one(), T::zero());
    let up = world_up - forward.scale(world_up.dot(&forward));
    let up_norm = up.norm();
    if !(up_norm > T::lit(1e-9)) {
        return Err(Error::DegenerateLookAt);
    }
    let up = up.scale(T::one() / up_norm);
    let right = forward.cross(&up);
    Ok(CameraPose {
        rotation: Mat3::from_cols(right, up, -forward),
        translation: eye,
    })
}

/// Uniform yaw/pitch distribution over an orbit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution<T> {
    pub yaw_range: [T; 2],
    pub pitch_range: [T; 2],
    pub radius: T,
    pub look_at: Vec3<T>,
}

impl<T: Scalar> Default for PoseDistribution<T> {
    fn default() -> Self {
        Self {
            yaw_range: [T::lit(-0.6), T::lit(0.6)],
            pitch_range: [T::lit(-0.3), T::lit(0.3)],
            radius: T::lit(2.7),
            look_at: Vec3::zero(),
        }
    }
}

impl<T: Scalar> PoseDistribution<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: &[T; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ok(&self.yaw_range) || !ok(&self.pitch_range) || !(self.radius > T::zero()) {
            return Err(Error::InvalidArgument(format!("invalid pose distribution {self:?}")));
        }
        Ok(())
    }

    /// Pose on the orbit sphere at the given angles.
    pub fn cast<U: Scalar>(&self) -> PoseDistribution<U> {
        PoseDistribution {
            yaw_range: self.yaw_range.map(cast),
            pitch_range: self.pitch_range.map(cast),
            radius: cast(self.radius),
            look_at: self.look_at.cast(),
        }
    }

    pub fn pose_from_angles(&self, yaw: T, pitch: T) -> Result<CameraPose<T>> {
        let within = |v: T, r: &[T; 2]| v >= r[0] && v <= r[1];
        if !within(yaw, &self.yaw_range) || !within(pitch, &self.pitch_range) {
            return Err(Error::InvalidArgument(format!(
                "angles (yaw={yaw}, pitch={pitch}) outside the distribution ranges"
            )));
        }
        orbit_pose(yaw, pitch, self.radius, self.look_at)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraPose<T> {
        let (yaw, pitch) = self.sample_angles(rng);
        orbit_pose(yaw, pitch, self.radius, self.look_at)
            .expect("validated distribution yields non-degenerate poses")
    }

    pub fn sample_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> (T, T) {
        let lerp = |r: &[T; 2], u: f64| r[0] + (r[1] - r[0]) * T::lit(u);
        let yaw = lerp(&self.yaw_range, rng.gen::<f64>());
        let pitch = lerp(&self.pitch_range, rng.gen::<f64>());
        (yaw, pitch)
    }

    pub fn frontal(&self) -> CameraPose<T> {
        orbit_pose(T::zero(), T::zero(), self.radius, self.look_at)
            .expect("frontal pose is never degenerate")
    }
}

/// Orbit pose without range checks: yaw about +y, pitch toward +y.
pub fn orbit_pose<T: Scalar>(yaw: T, pitch: T, radius: T, target: Vec3<T>) -> Result<CameraPose<T>> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let offset = Vec3::new(sy * cp, sp, cy * cp).scale(radius);
    look_at(target + offset, target)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
}

impl<T: Scalar> Ray<T> {
    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction.scale(t)
    }
}

/// Ray through continuous pixel coordinates `(u, v)` (u right, v down).
pub fn ray_through<T: Scalar>(pose: &CameraPose<T>, intr: &Intrinsics<T>, u: T, v: T) -> Ray<T> {
    let [cx, cy] = intr.principal_point;
    let local = Vec3::new((u - cx) / intr.focal_px, -(v - cy) / intr.focal_px, -T::one());
    Ray {
        origin: pose.translation,
        direction: pose.rotation.mul_vec(&local).normalized(),
    }
}

/// One ray per pixel center, row-major (`height` rows of `width`).
pub fn generate_rays<T: Scalar>(pose: &CameraPose<T>, intr: &Intrinsics<T>) -> Vec<Ray<T>> {
    let half = T::lit(0.5);
    (0..intr.height)
        .flat_map(|row| {
            (0..intr.width).map(move |col| {
                let u = T::lit(col as f64) + half;
                let v = T::lit(row as f64) + half;
                ray_through(pose, intr, u, v)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist() -> PoseDistribution<f64> {
        PoseDistribution::default()
    }

    #[test]
    fn frontal_pose_is_canonical() {
        let p = dist().pose_from_angles(0.0, 0.0).unwrap();
        let t = p.translation;
        assert!((t.x()).abs() < 1e-12 && t.y().abs() < 1e-12 && (t.z() - 2.7).abs() < 1e-12);
        let f = p.forward();
        assert!((f.z() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn back_pose_is_mirrored() {
        let d = PoseDistribution {
            yaw_range: [-4.0, 4.0],
            ..dist()
        };
        let p = d.pose_from_angles(std::f64::consts::PI, 0.0).unwrap();
        assert!((p.translation.z() + 2.7).abs() < 1e-12);
        assert!((p.rotation.det() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_angles_are_rejected() {
        assert!(dist().pose_from_angles(0.7, 0.0).is_err());
    }

    #[test]
    fn degenerate_look_at_errors() {
        let p = Vec3::new(1.0f64, 2.0, 3.0);
        assert!(matches!(look_at(p, p), Err(Error::DegenerateLookAt)));
        let straight_down = look_at(Vec3::new(0.0f64, 3.0, 0.0), Vec3::zero());
        assert!(straight_down.is_err());
    }

    #[test]
    fn sampled_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = dist().sample(&mut rng);
            assert!(p.rotation.orthonormality_residual() < 1e-6);
            assert!((p.rotation.det() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn point_interval_pins_pitch() {
        let d = PoseDistribution {
            pitch_range: [0.2, 0.2],
            ..dist()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (_, pitch) = d.sample_angles(&mut rng);
            assert_eq!(pitch, 0.2);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = dist().sample(&mut ChaCha8Rng::seed_from_u64(42));
        let b = dist().sample(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn yaw_sample_mean_is_centered() {
        let d = dist();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| d.sample_angles(&mut rng).0).sum::<f64>() / n as f64;
        // uniform on [-a, a]: variance a²/3
        let a: f64 = 0.6;
        let sigma = (a * a / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3σ {}", 3.0 * sigma);
    }

    #[test]
    fn principal_ray_follows_forward_axis() {
        let p = dist().sample(&mut ChaCha8Rng::seed_from_u64(5));
        let intr = Intrinsics::centered(31, 17, 40.0).unwrap();
        let [cx, cy] = intr.principal_point;
        let r = ray_through(&p, &intr, cx, cy);
        assert!((r.direction - p.forward()).norm() < 1e-6);
    }

    #[test]
    fn identity_rotation_shares_origin() {
        let pose = CameraPose {
            rotation: Mat3::identity(),
            translation: Vec3::new(0.5f64, -1.0, 2.0),
        };
        let intr = Intrinsics::centered(8, 6, 10.0).unwrap();
        let rays = generate_rays(&pose, &intr);
        assert_eq!(rays.len(), 48);
        for r in &rays {
            assert_eq!(r.origin, pose.translation);
            assert!((r.direction.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_focal_halves_corner_tangent() {
        let pose = dist().frontal();
        let half_fov_tan = |f: f64| {
            let intr = Intrinsics::centered(16, 16, f).unwrap();
            let r = ray_through(&pose, &intr, 16.0, 8.0);
            let cos = r.direction.dot(&pose.forward());
            (1.0 - cos * cos).sqrt() / cos
        };
        // analytic pinhole: tan(half fov) = (w/2) / f
        assert!((half_fov_tan(20.0) - 8.0 / 20.0).abs() < 1e-9);
        let ratio = half_fov_tan(20.0) / half_fov_tan(40.0);
        assert!((ratio - 2.0).abs() < 1e-6);
    }

    #[test]
    fn matrix_round_trip() {
        let p = dist().sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(CameraPose::from_matrix(&p.to_matrix()), p);
    }
}
