//! Minimal 3-D vector and quaternion arithmetic.
//!
//! Rotations are stored as unit quaternions `(w, x, y, z)` canonicalized to
//! `w >= 0` so that the double cover is resolved deterministically. Euler
//! conversions cover all six Tait-Bryan channel orders that appear in BVH
//! files.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rotation axes, indexed to match 3x3 matrix rows/columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => Vec3::new(1.0, 0.0, 0.0),
            Axis::Y => Vec3::new(0.0, 1.0, 0.0),
            Axis::Z => Vec3::new(0.0, 0.0, 1.0),
        }
    }
}

/// Euler rotation order: the order in which axis rotations are composed,
/// matching the order rotation channels are declared in a BVH file.
/// `Zxy` means `R = Rz(a) * Rx(b) * Ry(c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RotOrder {
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    #[default]
    Zxy,
    Zyx,
}

impl RotOrder {
    pub fn axes(self) -> [Axis; 3] {
        match self {
            RotOrder::Xyz => [Axis::X, Axis::Y, Axis::Z],
            RotOrder::Xzy => [Axis::X, Axis::Z, Axis::Y],
            RotOrder::Yxz => [Axis::Y, Axis::X, Axis::Z],
            RotOrder::Yzx => [Axis::Y, Axis::Z, Axis::X],
            RotOrder::Zxy => [Axis::Z, Axis::X, Axis::Y],
            RotOrder::Zyx => [Axis::Z, Axis::Y, Axis::X],
        }
    }

    /// +1 for cyclic axis orders (xyz, yzx, zxy), -1 otherwise.
    fn parity(self) -> f64 {
        match self {
            RotOrder::Xyz | RotOrder::Yzx | RotOrder::Zxy => 1.0,
            RotOrder::Xzy | RotOrder::Yxz | RotOrder::Zyx => -1.0,
        }
    }

    pub fn from_axes(axes: &[Axis]) -> Option<RotOrder> {
        let all = [
            RotOrder::Xyz,
            RotOrder::Xzy,
            RotOrder::Yxz,
            RotOrder::Yzx,
            RotOrder::Zxy,
            RotOrder::Zyx,
        ];
        all.into_iter().find(|o| o.axes() == *axes)
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Scales to unit norm and resolves the double cover. A vector with norm
    /// below `1e-8` maps to the identity rather than amplifying noise.
    pub fn normalized(self) -> Quat {
        let n = self.norm();
        if n < 1e-8 {
            return Quat::IDENTITY;
        }
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n).canonicalized()
    }

    /// Sign canonicalization: `w >= 0`, and when `w == 0` the first nonzero
    /// vector component is made positive so equal rotations compare equal.
    pub fn canonicalized(self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product `self * o` (apply `o` first, then `self` when
    /// rotating column vectors).
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn from_axis_angle(axis: Vec3, radians: f64) -> Quat {
        let n = axis.norm();
        if n < 1e-12 {
            return Quat::IDENTITY;
        }
        let half = radians * 0.5;
        let s = half.sin() / n;
        Quat::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    /// Returns `(axis, angle)` with angle in `[0, pi]` once canonicalized.
    /// The identity reports axis `(1,0,0)`, angle `0`.
    pub fn to_axis_angle(self) -> (Vec3, f64) {
        let q = self.canonicalized();
        let s_sq = 1.0 - q.w * q.w;
        if s_sq <= 1e-24 {
            return (Vec3::new(1.0, 0.0, 0.0), 0.0);
        }
        let s = s_sq.sqrt();
        let angle = 2.0 * q.w.clamp(-1.0, 1.0).acos();
        (Vec3::new(q.x / s, q.y / s, q.z / s), angle)
    }

    /// Geodesic angle between the rotations encoded by two unit quaternions.
    /// Uses the chord form `4 atan2(|a-b|, |a+b|)`, which keeps full
    /// precision near zero where `acos` of the dot product loses eight
    /// digits.
    pub fn geodesic(self, o: Quat) -> f64 {
        let b = if self.dot(o) < 0.0 {
            Quat::new(-o.w, -o.x, -o.y, -o.z)
        } else {
            o
        };
        let dm = ((self.w - b.w).powi(2)
            + (self.x - b.x).powi(2)
            + (self.y - b.y).powi(2)
            + (self.z - b.z).powi(2))
        .sqrt();
        let dp = ((self.w + b.w).powi(2)
            + (self.x + b.x).powi(2)
            + (self.y + b.y).powi(2)
            + (self.z + b.z).powi(2))
        .sqrt();
        4.0 * dm.atan2(dp)
    }

    /// Rotates a vector: `M(q) * v` for unit `q`.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let qv = Vec3::new(self.x, self.y, self.z);
        let t = qv.cross(v).scale(2.0);
        v.add(t.scale(self.w)).add(qv.cross(t))
    }

    /// Rotation matrix rows for unit `q` (row-major).
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Composes per-axis rotations in the declared channel order:
    /// `q = q(axis1, a) * q(axis2, b) * q(axis3, c)`.
    pub fn from_euler(order: RotOrder, angles: [f64; 3]) -> Quat {
        let ax = order.axes();
        let q1 = Quat::from_axis_angle(ax[0].unit(), angles[0]);
        let q2 = Quat::from_axis_angle(ax[1].unit(), angles[1]);
        let q3 = Quat::from_axis_angle(ax[2].unit(), angles[2]);
        q1.mul(q2).mul(q3).normalized()
    }

    /// Decomposes into Tait-Bryan angles for the given order. Near gimbal
    /// lock the third angle is fixed at zero and the first absorbs the
    /// remaining rotation.
    pub fn to_euler(self, order: RotOrder) -> [f64; 3] {
        let m = self.to_matrix();
        let ax = order.axes();
        let (i, j, k) = (ax[0] as usize, ax[1] as usize, ax[2] as usize);
        let eps = order.parity();
        let arg = (eps * m[i][k]).clamp(-1.0, 1.0);
        let b = arg.asin();
        if arg.abs() < 1.0 - 1e-9 {
            let a = (-eps * m[j][k]).atan2(m[k][k]);
            let c = (-eps * m[i][j]).atan2(m[i][i]);
            [a, b, c]
        } else {
            let a = (eps * m[k][j]).atan2(m[j][j]);
            [a, b, 0.0]
        }
    }

    /// Spherical interpolation along the shortest arc, renormalized.
    pub fn slerp(self, other: Quat, t: f64) -> Quat {
        let mut b = other;
        let mut cos = self.dot(b);
        if cos < 0.0 {
            b = Quat::new(-b.w, -b.x, -b.y, -b.z);
            cos = -cos;
        }
        if cos > 1.0 - 1e-10 {
            // Nearly parallel: linear blend is exact to working precision.
            return Quat::new(
                self.w + (b.w - self.w) * t,
                self.x + (b.x - self.x) * t,
                self.y + (b.y - self.y) * t,
                self.z + (b.z - self.z) * t,
            )
            .normalized();
        }
        let theta = cos.clamp(-1.0, 1.0).acos();
        let sin = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin;
        let wb = (t * theta).sin() / sin;
        Quat::new(
            wa * self.w + wb * b.w,
            wa * self.x + wb * b.x,
            wa * self.y + wb * b.y,
            wa * self.z + wb * b.z,
        )
        .normalized()
    }
}

pub fn degrees_to_radians(d: f64) -> f64 {
    d * std::f64::consts::PI / 180.0
}

pub fn radians_to_degrees(r: f64) -> f64 {
    r * 180.0 / std::f64::consts::PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALL_ORDERS: [RotOrder; 6] = [
        RotOrder::Xyz,
        RotOrder::Xzy,
        RotOrder::Yxz,
        RotOrder::Yzx,
        RotOrder::Zxy,
        RotOrder::Zyx,
    ];

    #[test]
    fn z_rotation_90_degrees_quaternion() {
        let q = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), degrees_to_radians(90.0));
        // Hand evaluation: (cos 45, 0, 0, sin 45).
        assert!((q.w - 0.7071067811865476).abs() < 1e-12);
        assert!(q.x.abs() < 1e-12);
        assert!(q.y.abs() < 1e-12);
        assert!((q.z - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn rotate_matches_matrix() {
        let q = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), degrees_to_radians(90.0));
        let v = q.rotate(Vec3::new(0.0, 1.0, 0.0));
        assert!((v.x + 1.0).abs() < 1e-12);
        assert!(v.y.abs() < 1e-12);
        assert!(v.z.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let v = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let m = q.to_matrix();
            let want = Vec3::new(
                m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
                m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
                m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
            );
            let got = q.rotate(v);
            assert!(got.sub(want).norm() < 1e-12);
        }
    }

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalized()
    }

    #[test]
    fn euler_round_trip_all_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for order in ALL_ORDERS {
            for _ in 0..500 {
                let angles = [
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                ];
                let q = Quat::from_euler(order, angles);
                let back = Quat::from_euler(order, q.to_euler(order));
                assert!(
                    q.geodesic(back) < 1e-9,
                    "round trip failed for {order:?}: {angles:?}"
                );
            }
        }
    }

    #[test]
    fn euler_gimbal_lock_still_encodes_rotation() {
        for order in ALL_ORDERS {
            let angles = [0.4, std::f64::consts::FRAC_PI_2, 0.9];
            let q = Quat::from_euler(order, angles);
            let back = Quat::from_euler(order, q.to_euler(order));
            assert!(q.geodesic(back) < 1e-6, "gimbal case failed for {order:?}");
        }
    }

    #[test]
    fn canonical_form_has_nonnegative_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let q = random_quat(&mut rng);
            assert!(q.w >= 0.0);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            // q and -q canonicalize identically.
            let neg = Quat::new(-q.w, -q.x, -q.y, -q.z).canonicalized();
            assert_eq!(q.canonicalized(), neg);
        }
    }

    #[test]
    fn degenerate_normalization_yields_identity() {
        assert_eq!(Quat::new(0.0, 0.0, 0.0, 0.0).normalized(), Quat::IDENTITY);
        assert_eq!(Quat::new(1e-12, 0.0, 1e-12, 0.0).normalized(), Quat::IDENTITY);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = Quat::IDENTITY;
        let b = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), degrees_to_radians(90.0));
        assert!(a.slerp(b, 0.0).geodesic(a) < 1e-12);
        assert!(a.slerp(b, 1.0).geodesic(b) < 1e-12);
        let mid = a.slerp(b, 0.5);
        let want = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), degrees_to_radians(45.0));
        assert!(mid.geodesic(want) < 1e-12);
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        let a = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.3);
        let b_rot = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.7);
        let b_flipped = Quat::new(-b_rot.w, -b_rot.x, -b_rot.y, -b_rot.z);
        let mid = a.slerp(b_flipped, 0.5);
        let want = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.5);
        assert!(mid.geodesic(want) < 1e-12);
    }

    #[test]
    fn axis_angle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..300 {
            let axis = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if axis.norm() < 1e-3 {
                continue;
            }
            let angle = rng.gen_range(0.01..3.1);
            let q = Quat::from_axis_angle(axis, angle).canonicalized();
            let (ax, ang) = q.to_axis_angle();
            let back = Quat::from_axis_angle(ax, ang);
            assert!(q.geodesic(back) < 1e-9);
            assert!((ang - angle).abs() < 1e-9);
        }
    }

    #[test]
    fn conjugate_inverts_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let prod = q.mul(q.conjugate());
            assert!(prod.geodesic(Quat::IDENTITY) < 1e-9);
        }
    }
}
