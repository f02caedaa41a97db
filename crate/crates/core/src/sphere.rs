//! Exact geometry on the unit sphere.
//!
//! Points are stored as unit vectors in R³. Tangent vectors carry their base
//! point so the exponential map can check it is applied where it was built.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GeoError, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Angles closer than this to π are treated as antipodal.
pub const ANTIPODAL_EPS: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;
const MIN_NORM: f64 = 1e-12;

/// Plain 3-vector used for ambient positions, network outputs and velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [x, y, z] = o.0;
        Vec3([b * z - c * y, c * x - a * z, a * y - b * x])
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        Vec3([self * v.0[0], self * v.0[1], self * v.0[2]])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

/// A point on S².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    pub const NORTH: UnitVec3 = UnitVec3(Vec3([0.0, 0.0, 1.0]));
    pub const SOUTH: UnitVec3 = UnitVec3(Vec3([0.0, 0.0, -1.0]));

    /// Normalizes `(x, y, z)`; fails on (near-)zero vectors.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        project_to_sphere(Vec3([x, y, z]))
    }

    /// Wraps a vector already known to be unit length.
    ///
    /// The norm is not checked in release builds; callers must guarantee it.
    pub fn new_unchecked(v: Vec3) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "not a unit vector: {v:?}");
        UnitVec3(v)
    }

    #[inline]
    pub fn vec(self) -> Vec3 {
        self.0
    }

    #[inline]
    pub fn xyz(self) -> [f64; 3] {
        self.0 .0
    }

    #[inline]
    pub fn dot(self, o: UnitVec3) -> f64 {
        self.0.dot(o.0)
    }

    /// Removes the component of `v` along this point.
    pub fn project_tangent(self, v: Vec3) -> Vec3 {
        v - v.dot(self.0) * self.0
    }

    /// An orthonormal basis of the tangent plane at this point.
    pub fn tangent_basis(self) -> (Vec3, Vec3) {
        let p = self.0;
        // pick the coordinate axis least aligned with p
        let [ax, ay, az] = p.0.map(f64::abs);
        let helper = if ax <= ay && ax <= az {
            Vec3([1.0, 0.0, 0.0])
        } else if ay <= az {
            Vec3([0.0, 1.0, 0.0])
        } else {
            Vec3([0.0, 0.0, 1.0])
        };
        let e1 = self.project_tangent(helper);
        let e1 = (1.0 / e1.norm()) * e1;
        let e2 = p.cross(e1);
        (e1, e2)
    }
}

/// A tangent vector at `base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVec {
    pub base: UnitVec3,
    pub v: Vec3,
}

impl TangentVec {
    /// Builds a tangent vector, projecting `v` onto the tangent plane at `base`.
    pub fn projected(base: UnitVec3, v: Vec3) -> Self {
        TangentVec {
            base,
            v: base.project_tangent(v),
        }
    }

    pub fn norm(&self) -> f64 {
        self.v.norm()
    }

    pub fn scale(self, s: f64) -> Self {
        TangentVec {
            base: self.base,
            v: s * self.v,
        }
    }
}

/// Geographic coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl LatLon {
    /// Checks the latitude is in [-90, 90] and longitude in [-180, 180).
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeoError::Input(format!("latitude {lat_deg} outside [-90, 90]")));
        }
        if !(-180.0..180.0).contains(&lon_deg) {
            return Err(GeoError::Input(format!("longitude {lon_deg} outside [-180, 180)")));
        }
        Ok(LatLon { lat_deg, lon_deg })
    }

    /// Like [`LatLon::new`] but wraps longitude into [-180, 180) first.
    pub fn wrapped(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        let mut lon = (lon_deg + 180.0).rem_euclid(360.0) - 180.0;
        if lon >= 180.0 {
            lon -= 360.0;
        }
        LatLon::new(lat_deg, lon)
    }
}

pub fn latlon_to_unit(p: LatLon) -> Result<UnitVec3> {
    let p = LatLon::new(p.lat_deg, p.lon_deg)?;
    let (slat, clat) = p.lat_deg.to_radians().sin_cos();
    let (slon, clon) = p.lon_deg.to_radians().sin_cos();
    let v = Vec3([clat * clon, clat * slon, slat]);
    // sin/cos rounding leaves the norm within a couple of ulps of 1
    Ok(UnitVec3((1.0 / v.norm()) * v))
}

pub fn unit_to_latlon(u: UnitVec3) -> LatLon {
    let [x, y, z] = u.xyz();
    let lat = z.atan2(x.hypot(y)).to_degrees();
    let lon = if x == 0.0 && y == 0.0 {
        0.0
    } else {
        let l = y.atan2(x).to_degrees();
        if l >= 180.0 {
            l - 360.0
        } else {
            l
        }
    };
    LatLon {
        lat_deg: lat.clamp(-90.0, 90.0),
        lon_deg: lon,
    }
}

/// Great-circle angle in radians, in [0, π].
///
/// Uses `atan2(‖a × b‖, ⟨a, b⟩)`, which equals the clamped arccos of the dot
/// product but keeps full precision for nearly equal or antipodal points.
#[inline]
pub fn geodesic_distance(a: UnitVec3, b: UnitVec3) -> f64 {
    a.vec().cross(b.vec()).norm().atan2(a.dot(b))
}

pub fn haversine_km(a: LatLon, b: LatLon) -> Result<f64> {
    Ok(EARTH_RADIUS_KM * geodesic_distance(latlon_to_unit(a)?, latlon_to_unit(b)?))
}

/// `θ / sin θ`, with the Taylor limit near zero.
fn theta_over_sin(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    }
}

/// `sin r / r`, with the Taylor limit near zero.
fn sinc(r: f64) -> f64 {
    if r < SMALL_ANGLE {
        1.0 - r * r / 6.0
    } else {
        r.sin() / r
    }
}

/// Tangent vector at `x` pointing to `y` with length equal to their distance.
pub fn log_map(x: UnitVec3, y: UnitVec3) -> Result<TangentVec> {
    let theta = geodesic_distance(x, y);
    if theta > PI - ANTIPODAL_EPS {
        return Err(GeoError::Singularity(format!(
            "log map undefined for (near-)antipodal points, angle {theta}"
        )));
    }
    let cos = x.dot(y).clamp(-1.0, 1.0);
    let v = theta_over_sin(theta) * (y.vec() - cos * x.vec());
    // strip the rounding residue along x
    Ok(TangentVec::projected(x, v))
}

/// Follows the geodesic from `x` with initial velocity `t.v` for unit time.
pub fn exp_map(x: UnitVec3, t: TangentVec) -> UnitVec3 {
    debug_assert!(
        (x.vec() - t.base.vec()).norm() < 1e-9,
        "tangent vector applied at a different base point"
    );
    let r = t.v.norm();
    let p = r.cos() * x.vec() + sinc(r) * t.v;
    UnitVec3((1.0 / p.norm()) * p)
}

/// Uniform draw on S² by normalizing a standard Gaussian vector.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(rng: &mut R) -> UnitVec3 {
    loop {
        let v = Vec3([
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ]);
        let n = v.norm();
        if n > MIN_NORM {
            return UnitVec3((1.0 / n) * v);
        }
    }
}

pub fn project_to_sphere(p: Vec3) -> Result<UnitVec3> {
    let n = p.norm();
    if !n.is_finite() {
        return Err(GeoError::Numeric(format!("non-finite vector {p:?}")));
    }
    if n <= MIN_NORM {
        return Err(GeoError::Degenerate(format!(
            "cannot project vector of norm {n:e} onto the sphere"
        )));
    }
    Ok(UnitVec3((1.0 / n) * p))
}
