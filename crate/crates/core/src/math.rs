//! Small fixed-size kernels shared by the simulator and its adjoint: a 3×3
//! SVD with its reverse-mode derivative, quadratic B-spline stencils, and
//! rigid-pose composition from 6-DoF increments.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};

pub type Real = f64;
pub type Vec3 = Vector3<Real>;
pub type Mat3 = Matrix3<Real>;
pub type Vec6 = Vector6<Real>;

/// Minimum magnitude allowed for `s_j^2 - s_i^2` in the SVD adjoint.
pub const SVD_GAP_CLAMP: Real = 1e-6;

const JACOBI_MAX_SWEEPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd {
    pub u: Mat3,
    /// Singular values, non-increasing and nonnegative.
    pub s: Vec3,
    pub v: Mat3,
}

impl Svd {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// Upstream gradients with respect to the three SVD factors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SvdGrad {
    pub u: Mat3,
    pub s: Vec3,
    pub v: Mat3,
}

impl SvdGrad {
    pub fn zero() -> Self {
        SvdGrad {
            u: Mat3::zeros(),
            s: Vec3::zeros(),
            v: Mat3::zeros(),
        }
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Columns of `m` are orthogonalised in place; the accumulated rotations form
/// `v` and the normalised columns form `u`. Output is fully deterministic.
pub fn svd3(m: &Mat3) -> Svd {
    let mut w = *m;
    let mut v = Mat3::identity();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = w.column(p).norm_squared();
            let beta = w.column(q).norm_squared();
            let gamma = w.column(p).dot(&w.column(q));
            if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for k in 0..3 {
                let (wp, wq) = (w[(k, p)], w[(k, q)]);
                w[(k, p)] = c * wp - s * wq;
                w[(k, q)] = s * wp + c * wq;
                let (vp, vq) = (v[(k, p)], v[(k, q)]);
                v[(k, p)] = c * vp - s * vq;
                v[(k, q)] = s * vp + c * vq;
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [w.column(0).norm(), w.column(1).norm(), w.column(2).norm()];
    let mut order = [0usize, 1, 2];
    // Stable sort keeps the identity ordering for repeated values.
    order.sort_by(|&a, &b| {
        norms[b]
            .partial_cmp(&norms[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let s = Vec3::new(norms[order[0]], norms[order[1]], norms[order[2]]);
    let mut v_sorted = Mat3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        v_sorted.set_column(dst, &v.column(src));
    }
    let col = |i: usize| -> Vec3 { w.column(order[i]).into_owned() };

    let scale = s[0].max(Real::MIN_POSITIVE);
    let tiny = 1e-13 * scale;

    let u0 = if s[0] > 0.0 { col(0) / s[0] } else { Vec3::x() };
    let u1 = {
        let raw = col(1) - u0 * u0.dot(&col(1));
        if s[1] > tiny && raw.norm() > 0.0 {
            raw.normalize()
        } else {
            any_orthogonal(&u0)
        }
    };
    let mut u2 = u0.cross(&u1);
    if u2.dot(&col(2)) < 0.0 {
        u2 = -u2;
    }

    Svd {
        u: Mat3::from_columns(&[u0, u1, u2]),
        s,
        v: v_sorted,
    }
}

fn any_orthogonal(a: &Vec3) -> Vec3 {
    let pick = if a.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    (pick - a * a.dot(&pick)).normalize()
}

/// Reverse-mode derivative of [`svd3`]: maps gradients on `(u, s, v)` to the
/// gradient on the decomposed matrix.
///
/// Off-diagonal couplings use `1 / (s_j^2 - s_i^2)` with the denominator
/// clamped to [`SVD_GAP_CLAMP`] in magnitude (sign preserved).
pub fn svd3_backward(out: &Svd, grad: &SvdGrad) -> Mat3 {
    let (u, v, s) = (&out.u, &out.v, &out.s);
    let ju = u.transpose() * grad.u;
    let jv = v.transpose() * grad.v;
    let ku = ju - ju.transpose();
    let kv = jv - jv.transpose();

    let mut inner = Mat3::from_diagonal(&grad.s);
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let mut d = s[j] * s[j] - s[i] * s[i];
            if d.abs() < SVD_GAP_CLAMP {
                d = if d < 0.0 {
                    -SVD_GAP_CLAMP
                } else {
                    SVD_GAP_CLAMP
                };
            }
            inner[(i, j)] += (ku[(i, j)] * s[j] + s[i] * kv[(i, j)]) / d;
        }
    }
    u * inner * v.transpose()
}

/// Quadratic B-spline stencil of one particle: 3 nodes per axis starting at `base`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub base: [usize; 3],
    /// `w[axis][k]` weight of node `base[axis] + k`.
    pub w: [[Real; 3]; 3],
    /// Derivative of `w` with respect to the grid-unit position.
    pub dw: [[Real; 3]; 3],
    /// Fractional offset `xp - base` per axis, in `[0.5, 1.5)`.
    pub fx: [Real; 3],
}

impl Stencil {
    #[inline]
    pub fn weight(&self, a: usize, b: usize, c: usize) -> Real {
        self.w[0][a] * self.w[1][b] * self.w[2][c]
    }

    /// Gradient of the weight with respect to grid-unit position.
    #[inline]
    pub fn weight_grad(&self, a: usize, b: usize, c: usize) -> Vec3 {
        Vec3::new(
            self.dw[0][a] * self.w[1][b] * self.w[2][c],
            self.w[0][a] * self.dw[1][b] * self.w[2][c],
            self.w[0][a] * self.w[1][b] * self.dw[2][c],
        )
    }

    /// Node minus particle, in grid units.
    #[inline]
    pub fn offset(&self, a: usize, b: usize, c: usize) -> Vec3 {
        Vec3::new(
            a as Real - self.fx[0],
            b as Real - self.fx[1],
            c as Real - self.fx[2],
        )
    }
}

/// Quadratic B-spline weights for a position given in grid units.
///
/// Returns `None` when the 3×3×3 stencil would leave a grid with `dims`
/// nodes per axis.
pub fn bspline_weights(xp: &Vec3, dims: [usize; 3]) -> Option<Stencil> {
    let mut st = Stencil {
        base: [0; 3],
        w: [[0.0; 3]; 3],
        dw: [[0.0; 3]; 3],
        fx: [0.0; 3],
    };
    for d in 0..3 {
        let x = xp[d];
        if !x.is_finite() {
            return None;
        }
        let base = (x - 0.5).floor();
        if base < 0.0 || base + 2.0 > dims[d] as Real - 1.0 {
            return None;
        }
        let fx = x - base;
        st.base[d] = base as usize;
        st.fx[d] = fx;
        st.w[d] = [
            0.5 * (1.5 - fx) * (1.5 - fx),
            0.75 - (fx - 1.0) * (fx - 1.0),
            0.5 * (fx - 0.5) * (fx - 0.5),
        ];
        st.dw[d] = [fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5];
    }
    Some(st)
}

#[inline]
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Left Jacobian of the SO(3) exponential map:
/// `exp(phi + d) ≈ exp(J_l(phi) d) · exp(phi)`.
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * a + k * k * b
}

/// A rigid pose. Rotations act about `position`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<Real>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vec3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Composes an increment: translate, then rotate in the world frame about
    /// the (new) position. The quaternion is renormalised.
    pub fn compose(&self, delta: &PoseDelta) -> Pose {
        let q = delta.rotation * self.orientation;
        Pose {
            position: self.position + delta.translation,
            orientation: UnitQuaternion::new_normalize(q.into_inner()),
        }
    }
}

/// Pose increment decoded from a 6-vector `(tx, ty, tz, rx, ry, rz)`; the
/// rotational part is a world-frame rotation vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDelta {
    pub translation: Vec3,
    pub rotation: UnitQuaternion<Real>,
}

pub fn rot6_to_pose(delta: &Vec6) -> PoseDelta {
    PoseDelta {
        translation: delta.fixed_rows::<3>(0).into_owned(),
        rotation: UnitQuaternion::from_scaled_axis(delta.fixed_rows::<3>(3).into_owned()),
    }
}
