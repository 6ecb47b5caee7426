//! Small fixed-size linear algebra used by the renderer.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32`
//! (production) and `f64` (gradient and oracle verification).

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{Float, FloatConst};

/// Floating point scalar the engine can run in.
pub trait Real:
    Float
    + FloatConst
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Lossy conversion from a literal or an `f64` value.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    const NAME: &'static str;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self([x, y, z])
    }
    #[inline]
    pub fn zero() -> Self {
        Self([T::zero(); 3])
    }
    #[inline]
    pub fn x(&self) -> T {
        self.0[0]
    }
    #[inline]
    pub fn y(&self) -> T {
        self.0[1]
    }
    #[inline]
    pub fn z(&self) -> T {
        self.0[2]
    }
    #[inline]
    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
    #[inline]
    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        )
    }
    #[inline]
    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }
    pub fn normalized(&self) -> Self {
        *self * (T::one() / self.norm())
    }
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
    pub fn cast<U: Real>(&self) -> Vec3<U> {
        Vec3(self.0.map(|v| U::of(v.as_f64())))
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self(self.0.map(|v| -v))
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self(self.0.map(|v| v * s))
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        for i in 0..3 {
            self.0[i] += o.0[i];
        }
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        for i in 0..3 {
            self.0[i] -= o.0[i];
        }
    }
}

impl<T: Real> MulAssign<T> for Vec3<T> {
    #[inline]
    fn mul_assign(&mut self, s: T) {
        for v in &mut self.0 {
            *v *= s;
        }
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vec3<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn zero() -> Self {
        Self([[T::zero(); 3]; 3])
    }

    pub fn identity() -> Self {
        Self::diag(Vec3([T::one(); 3]))
    }

    pub fn diag(d: Vec3<T>) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            m.0[i][i] = d.0[i];
        }
        m
    }

    pub fn from_rows(r0: [T; 3], r1: [T; 3], r2: [T; 3]) -> Self {
        Self([r0, r1, r2])
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    #[inline]
    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    #[inline]
    pub fn matmul(&self, o: &Self) -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += self.0[i][k] * o.0[k][j];
                }
                r.0[i][j] = acc;
            }
        }
        r
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.map(|r| r.map(|v| v * s)))
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] += o.0[i][j];
            }
        }
        r
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        Mat3(self.0.map(|r| r.map(|v| U::of(v.as_f64()))))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Sym2<T> {
    pub fn new(a: T, b: T, c: T) -> Self {
        Self { a, b, c }
    }

    #[inline]
    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    /// Inverse, or `None` when the determinant is not strictly positive.
    #[inline]
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if !(det > T::zero()) {
            return None;
        }
        let inv = T::one() / det;
        Some(Self::new(self.c * inv, -self.b * inv, self.a * inv))
    }

    /// Quadratic form `d^T M d`.
    #[inline]
    pub fn quad(&self, dx: T, dy: T) -> T {
        self.a * dx * dx + (self.b + self.b) * dx * dy + self.c * dy * dy
    }

    /// Largest eigenvalue.
    pub fn max_eigenvalue(&self) -> T {
        let half = T::of(0.5);
        let mid = half * (self.a + self.c);
        let disc = (mid * mid - self.det()).max(T::zero()).sqrt();
        mid + disc
    }

    /// Product `self * m * self` of symmetric matrices; used by the inverse gradient.
    pub fn sandwich(&self, m: &Self) -> Self {
        // (K M K) with K = self
        let (ka, kb, kc) = (self.a, self.b, self.c);
        let (ma, mb, mc) = (m.a, m.b, m.c);
        // K M
        let p00 = ka * ma + kb * mb;
        let p01 = ka * mb + kb * mc;
        let p10 = kb * ma + kc * mb;
        let p11 = kb * mb + kc * mc;
        Self::new(p00 * ka + p01 * kb, p00 * kb + p01 * kc, p10 * kb + p11 * kc)
    }

    pub fn cast<U: Real>(&self) -> Sym2<U> {
        Sym2::new(U::of(self.a.as_f64()), U::of(self.b.as_f64()), U::of(self.c.as_f64()))
    }
}

/// Unit quaternion in `(w, x, y, z)` order.
pub type Quat<T> = [T; 4];

pub fn quat_identity<T: Real>() -> Quat<T> {
    [T::one(), T::zero(), T::zero(), T::zero()]
}

pub fn quat_norm<T: Real>(q: &Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize<T: Real>(q: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    q.map(|v| v / n)
}

/// Backward of `q / |q|`: maps the gradient w.r.t. the normalized quaternion
/// to the gradient w.r.t. the raw one.
pub fn quat_normalize_backward<T: Real>(q_raw: &Quat<T>, grad_unit: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q_raw);
    let u = q_raw.map(|v| v / n);
    let proj = u[0] * grad_unit[0] + u[1] * grad_unit[1] + u[2] * grad_unit[2] + u[3] * grad_unit[3];
    let mut out = [T::zero(); 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - u[i] * proj) / n;
    }
    out
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat<T: Real>(q: &Quat<T>) -> Mat3<T> {
    let [w, x, y, z] = *q;
    let one = T::one();
    let two = T::of(2.0);
    Mat3([
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ])
}

/// Gradient of `quat_to_mat` w.r.t. the (unit) quaternion components.
pub fn quat_to_mat_backward<T: Real>(q: &Quat<T>, g: &Mat3<T>) -> Quat<T> {
    let [w, x, y, z] = *q;
    let g = &g.0;
    let two = T::of(2.0);
    let gw = two
        * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = two
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - two * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - two * x * g[2][2]);
    let gy = two
        * (-two * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - two * y * g[2][2]);
    let gz = two
        * (-two * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - two * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [gw, gx, gy, gz]
}

/// Quaternion of a rotation matrix (Shepperd's method), `w >= 0`.
pub fn mat_to_quat<T: Real>(m: &Mat3<T>) -> Quat<T> {
    let m = &m.0;
    let one = T::one();
    let quarter = T::of(0.25);
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > T::zero() {
        let s = (tr + one).sqrt() * T::of(2.0);
        [quarter * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::of(2.0);
        [(m[2][1] - m[1][2]) / s, quarter * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::of(2.0);
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, quarter * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::of(2.0);
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, quarter * s]
    };
    let q = quat_normalize(&q);
    if q[0] < T::zero() {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Spherical linear interpolation between unit quaternions.
pub fn slerp<T: Real>(a: &Quat<T>, b: &Quat<T>, t: T) -> Quat<T> {
    let mut b = *b;
    let mut cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    if cos < T::zero() {
        b = b.map(|v| -v);
        cos = -cos;
    }
    if cos > T::of(0.9995) {
        let mut q = [T::zero(); 4];
        for i in 0..4 {
            q[i] = a[i] + t * (b[i] - a[i]);
        }
        return quat_normalize(&q);
    }
    let theta = cos.min(T::one()).acos();
    let sin = theta.sin();
    let wa = ((T::one() - t) * theta).sin() / sin;
    let wb = (t * theta).sin() / sin;
    let mut q = [T::zero(); 4];
    for i in 0..4 {
        q[i] = wa * a[i] + wb * b[i];
    }
    quat_normalize(&q)
}

/// Rotation of `angle` radians about a unit `axis`.
pub fn quat_from_axis_angle<T: Real>(axis: Vec3<T>, angle: T) -> Quat<T> {
    let a = axis.normalized();
    let h = angle * T::of(0.5);
    let s = h.sin();
    [h.cos(), a.0[0] * s, a.0[1] * s, a.0[2] * s]
}
