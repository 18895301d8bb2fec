//! Elastic collision kinematics in three dimensions.
//!
//! A collision between a particle of velocity `z` and a partner of velocity
//! `v` is parametrized by the colatitude `theta` in `(0, pi]` and the longitude
//! `phi` in `[0, 2 pi)`. The velocity transfer (deflection vector) is
//!
//! ```text
//! alpha(z, v, theta, phi) = sin^2(theta/2) (v - z) + sin(theta)/2 * Gamma(v - z, phi)
//! Gamma(w, phi)           = I(w) cos(phi) + J(w) sin(phi)
//! ```
//!
//! where `(w, I(w), J(w))` is an orthogonal frame with `|I| = |J| = |w|`.
//! Outgoing velocities are `z* = z + alpha` and `v* = v - alpha`.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or velocity in R^3.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    /// Checked constructor; rejects NaN and infinite components.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = Vec3 { x, y, z };
        v.ensure_finite()?;
        Ok(v)
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("non-finite vector {self:?}")))
        }
    }

    #[inline]
    pub fn dot(&self, o: &Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(&self, o: &Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn component(&self, k: usize) -> f64 {
        match k {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("component index {k} out of range"),
        }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Unit vector along `self`, or `None` for the zero vector.
    #[inline]
    pub fn normalized(&self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0).then(|| *self / n)
    }

    #[inline]
    pub fn axis(k: usize) -> Vec3 {
        match k {
            0 => Vec3::new(1.0, 0.0, 0.0),
            1 => Vec3::new(0.0, 1.0, 0.0),
            _ => Vec3::new(0.0, 0.0, 1.0),
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Collision angles `theta` in `(0, pi]`, `phi` in `[0, 2 pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    theta: f64,
    phi: f64,
}

impl AnglePair {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= PI) {
            return Err(Error::invalid(format!("theta = {theta} outside (0, pi]")));
        }
        if !(0.0..TAU).contains(&phi) {
            return Err(Error::invalid(format!("phi = {phi} outside [0, 2 pi)")));
        }
        Ok(AnglePair { theta, phi })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// The two vectors completing `w` to an orthogonal frame, each of length `|w|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub i_vec: Vec3,
    pub j_vec: Vec3,
}

impl Frame {
    /// Canonical frame for `w`; the zero vector maps to the zero frame.
    ///
    /// `I` is `w x e_k` rescaled to `|w|`, where `e_k` is the coordinate axis
    /// along which `|w_k|` is smallest (lowest index on ties), and
    /// `J = w_hat x I`.
    #[inline]
    pub fn of(w: Vec3) -> Frame {
        let n = w.norm();
        if n == 0.0 {
            return Frame { i_vec: Vec3::ZERO, j_vec: Vec3::ZERO };
        }
        let (ax, ay, az) = (w.x.abs(), w.y.abs(), w.z.abs());
        let k = if ax <= ay && ax <= az {
            0
        } else if ay <= az {
            1
        } else {
            2
        };
        let c = w.cross(&Vec3::axis(k));
        let i_vec = c * (n / c.norm());
        let j_vec = (w / n).cross(&i_vec);
        Frame { i_vec, j_vec }
    }

    /// `I cos(phi) + J sin(phi)`.
    #[inline]
    pub fn at(&self, phi: f64) -> Vec3 {
        let (s, c) = phi.sin_cos();
        self.i_vec * c + self.j_vec * s
    }
}

/// Orthogonal frame `(I(w), J(w))` of the base vector `w`.
pub fn orthonormal_frame(w: Vec3) -> Result<Frame> {
    w.ensure_finite()?;
    Ok(Frame::of(w))
}

/// `Gamma(w, phi) = I(w) cos(phi) + J(w) sin(phi)`.
pub fn gamma(w: Vec3, phi: f64) -> Result<Vec3> {
    w.ensure_finite()?;
    if !phi.is_finite() {
        return Err(Error::invalid(format!("non-finite phi {phi}")));
    }
    Ok(Frame::of(w).at(phi))
}

/// Deflection vector `alpha(z, v, theta, phi)`.
///
/// Inputs are assumed finite; this sits on the hot path of every simulator.
#[inline]
pub fn deflection_alpha(z: Vec3, v: Vec3, theta: f64, phi: f64) -> Vec3 {
    let w = v - z;
    let s = (0.5 * theta).sin();
    // sin(pi) is not exactly zero in floating point
    let half_sin = if theta == PI { 0.0 } else { 0.5 * theta.sin() };
    if half_sin == 0.0 {
        return w * (s * s);
    }
    w * (s * s) + Frame::of(w).at(phi) * half_sin
}

/// Outgoing velocities `(z + alpha, v - alpha)`.
#[inline]
pub fn post_collision(z: Vec3, v: Vec3, theta: f64, phi: f64) -> (Vec3, Vec3) {
    let a = deflection_alpha(z, v, theta, phi);
    (z + a, v - a)
}

/// Rotation `phi0` in `[0, 2 pi)` aligning the collision frames of the pairs
/// `(z, v)` and `(z2, v2)`, so that
/// `|Gamma(v - z, phi) - Gamma(v2 - z2, phi + phi0)| <= 3 |(v - z) - (v2 - z2)|`.
///
/// The minimal rotation `R` carrying the direction of `v - z` onto that of
/// `v2 - z2` maps the frame vector `I` into the plane of the second frame;
/// `phi0` is the angle of `R I` in that frame. Antiparallel directions are
/// rotated by `pi` about `I`. Degenerate (zero) relative velocities give 0.
pub fn tanaka_rotation(z: Vec3, v: Vec3, z2: Vec3, v2: Vec3) -> f64 {
    let w = v - z;
    let w2 = v2 - z2;
    let (Some(a), Some(b)) = (w.normalized(), w2.normalized()) else {
        return 0.0;
    };
    let f = Frame::of(a);
    let f2 = Frame::of(b);
    let c = a.dot(&b);
    let i_rot = if 1.0 + c > 1e-12 {
        // Rodrigues in the form that stays accurate for small rotation angles.
        let k = a.cross(&b);
        f.i_vec * c + k.cross(&f.i_vec) + k * (k.dot(&f.i_vec) / (1.0 + c))
    } else {
        // pi about I leaves I fixed.
        f.i_vec
    };
    let angle = i_rot.dot(&f2.j_vec).atan2(i_rot.dot(&f2.i_vec));
    wrap_angle(angle)
}

/// Reduce an angle to `[0, 2 pi)`.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}
