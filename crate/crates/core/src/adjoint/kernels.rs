//! Reverse-mode counterparts of the substep stages.
//!
//! Every kernel consumes the adjoint of a stage's outputs and returns (or
//! accumulates) the adjoint of its inputs, reading forward values from the
//! substep tape. Contact and clamping follow the branch taken in the forward
//! pass.

use nalgebra::UnitQuaternion;
use rayon::prelude::*;

use crate::math::{
    so3_left_jacobian, svd3_backward, Mat3, Real, Stencil, Svd, SvdGrad, Vec3, Vec6,
};
use crate::mpm::{
    affine_matrix, ConstitutiveRecord, ContactRecord, ContactRegime, MaterialParams, ParticleState,
    Regime,
};
use crate::scene::AgentState;

/// Adjoint of an agent pose: position and a world-frame rotation tangent
/// (perturbations act as `R -> exp(delta) R`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGrad {
    pub position: Vec3,
    pub rotation: Vec3,
}

impl PoseGrad {
    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.rotation.iter())
            .all(|c| c.is_finite())
    }
}

impl std::ops::AddAssign for PoseGrad {
    fn add_assign(&mut self, o: PoseGrad) {
        self.position += o.position;
        self.rotation += o.rotation;
    }
}

/// `F_tmp = (I + dt C) F`  ->  `(F̄, C̄)`.
pub fn deform_backward(f: &Mat3, c: &Mat3, dt_sub: Real, g_ftmp: &Mat3) -> (Mat3, Mat3) {
    let a = Mat3::identity() + c * dt_sub;
    (a.transpose() * g_ftmp, g_ftmp * f.transpose() * dt_sub)
}

/// Derivative of the projected log-strain with respect to the trial log-strain.
pub fn return_map_jacobian(rec: &ConstitutiveRecord, mat: &MaterialParams) -> Mat3 {
    match rec.regime {
        Regime::Elastic => Mat3::identity(),
        Regime::Tip => Mat3::zeros(),
        Regime::Cone => {
            let one = Vec3::repeat(1.0);
            let n = rec.dev_dir;
            let c = mat.cone_coefficient();
            let mean = one * one.transpose() / 3.0;
            let dev = Mat3::identity() - mean;
            mean - n * one.transpose() * c
                - (dev - n * n.transpose()) * (c * rec.shifted_trace / rec.dev_norm)
        }
    }
}

/// Adjoint of the return map and stress evaluation, stopping at the SVD
/// factors: `(F̄_new, σ̄)  ->  (Ū, s̄, V̄)`.
pub fn constitutive_backward(
    svd: &Svd,
    rec: &ConstitutiveRecord,
    mat: &MaterialParams,
    g_fnew: &Mat3,
    g_stress: &Mat3,
) -> SvdGrad {
    let (u, v) = (&svd.u, &svd.v);
    let s_proj = Mat3::from_diagonal(&rec.s_proj);
    let sym = g_stress + g_stress.transpose();
    let g_u = g_fnew * v * s_proj + sym * u * Mat3::from_diagonal(&rec.tau);
    let g_v = g_fnew.transpose() * u * s_proj;

    let g_sproj = (u.transpose() * g_fnew * v).diagonal();
    let g_tau = (u.transpose() * g_stress * u).diagonal();
    let g_eps_proj = g_sproj.component_mul(&rec.s_proj)
        + g_tau * (2.0 * mat.mu())
        + Vec3::repeat(mat.lambda() * g_tau.sum());
    let g_eps = return_map_jacobian(rec, mat).transpose() * g_eps_proj;
    SvdGrad {
        u: g_u,
        s: g_eps.component_div(&svd.s),
        v: g_v,
    }
}

/// Full adjoint from `(F̄_new, σ̄)` to `F̄_tmp`.
pub fn constitutive_svd_backward(
    svd: &Svd,
    rec: &ConstitutiveRecord,
    mat: &MaterialParams,
    g_fnew: &Mat3,
    g_stress: &Mat3,
) -> Mat3 {
    svd3_backward(svd, &constitutive_backward(svd, rec, mat, g_fnew, g_stress))
}

/// Adjoints of one velocity projection's inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionGrad {
    pub v_in: Vec3,
    pub normal: Vec3,
    pub surface_velocity: Vec3,
}

pub fn project_velocity_backward(rec: &ContactRecord, g_out: &Vec3) -> ProjectionGrad {
    match rec.regime {
        ContactRegime::Stick => ProjectionGrad {
            v_in: Vec3::zeros(),
            normal: Vec3::zeros(),
            surface_velocity: *g_out,
        },
        ContactRegime::Slip => {
            let (n, mu) = (rec.normal, rec.friction);
            let vr = rec.v_in - rec.surface_velocity;
            let vn = vr.dot(&n);
            let vt = vr - n * vn;
            let t = vt.norm();
            let s = 1.0 + mu * vn / t;

            let mut g_vb = *g_out;
            let mut g_vt = g_out * s;
            let g_s = g_out.dot(&vt);
            let mut g_vn = g_s * mu / t;
            let g_t = -g_s * mu * vn / (t * t);
            g_vt += vt * (g_t / t);

            let mut g_vr = g_vt;
            let mut g_n = -g_vt * vn;
            g_vn -= n.dot(&g_vt);
            g_vr += n * g_vn;
            g_n += vr * g_vn;
            g_vb -= g_vr;
            ProjectionGrad {
                v_in: g_vr,
                normal: g_n,
                surface_velocity: g_vb,
            }
        }
    }
}

/// Adjoints produced by one contact projection at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContactGrad {
    pub v_in: Vec3,
    pub point: Vec3,
    pub pose: PoseGrad,
    pub u_sub: Vec6,
}

/// Chains a projection adjoint through the body normal and, for the scoop,
/// through its surface velocity `u_t/dt + (u_r/dt) × (x - p)`.
pub fn contact_backward(
    rec: &ContactRecord,
    agent: &AgentState,
    dt_sub: Real,
    g_out: &Vec3,
) -> ContactGrad {
    let pg = project_velocity_backward(rec, g_out);
    let jn = rec.normal_jacobian.transpose() * pg.normal;
    let mut out = ContactGrad {
        v_in: pg.v_in,
        point: jn,
        ..Default::default()
    };
    if rec.kinematic {
        let r = rec.lever;
        let g_vb = pg.surface_velocity;
        out.pose.position -= jn;
        out.pose.rotation += rec.normal.cross(&pg.normal) - r.cross(&jn);

        let g_r = -agent.angular_velocity.cross(&g_vb);
        out.point += g_r;
        out.pose.position -= g_r;
        let (gt, gr) = (g_vb / dt_sub, r.cross(&g_vb) / dt_sub);
        out.u_sub = Vec6::new(gt.x, gt.y, gt.z, gr.x, gr.y, gr.z);
    }
    out
}

/// `x' = x + dt v` with per-component clamping  ->  `(x̄, v̄)`.
pub fn advect_backward(clamped: &[bool; 3], dt_sub: Real, g_x: &Vec3, g_v: &Vec3) -> (Vec3, Vec3) {
    let mut gx = *g_x;
    let mut gv = g_v + g_x * dt_sub;
    for d in 0..3 {
        if clamped[d] {
            gx[d] = 0.0;
            gv[d] = 0.0;
        }
    }
    (gx, gv)
}

/// `pose' = (p + u_t, exp(u_r) R)`  ->  adjoint of `pose` and of `u_sub`.
pub fn move_agent_backward(u_sub: &Vec6, g_after: &PoseGrad) -> (PoseGrad, Vec6) {
    let phi: Vec3 = u_sub.fixed_rows::<3>(3).into_owned();
    let rot = UnitQuaternion::from_scaled_axis(phi)
        .to_rotation_matrix()
        .into_inner();
    let before = PoseGrad {
        position: g_after.position,
        rotation: rot.transpose() * g_after.rotation,
    };
    let gr = so3_left_jacobian(&phi).transpose() * g_after.rotation;
    let gt = g_after.position;
    (before, Vec6::new(gt.x, gt.y, gt.z, gr.x, gr.y, gr.z))
}

/// Dense grid-sized buffers for the grid-side adjoints.
#[derive(Clone, Debug)]
pub struct GridAdjoint {
    pub dims: [usize; 3],
    pub dx: Real,
    pub mass: Vec<Real>,
    /// Node velocities straight after the scatter.
    pub v_p2g: Vec<Vec3>,
    /// Node velocities seen by the gather.
    pub v_final: Vec<Vec3>,
    /// Adjoint of the node velocity at the current stage.
    pub grad: Vec<Vec3>,
    pub active: Vec<usize>,
}

impl GridAdjoint {
    pub fn new(dims: [usize; 3], dx: Real) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        GridAdjoint {
            dims,
            dx,
            mass: vec![0.0; n],
            v_p2g: vec![Vec3::zeros(); n],
            v_final: vec![Vec3::zeros(); n],
            grad: vec![Vec3::zeros(); n],
            active: Vec::new(),
        }
    }

    /// Loads the node values of one substep and zeroes their adjoints.
    pub fn load(&mut self, active: &[usize], mass: &[Real], v_p2g: &[Vec3], v_final: &[Vec3]) {
        self.active.clear();
        self.active.extend_from_slice(active);
        for (slot, &idx) in active.iter().enumerate() {
            self.mass[idx] = mass[slot];
            self.v_p2g[idx] = v_p2g[slot];
            self.v_final[idx] = v_final[slot];
            self.grad[idx] = Vec3::zeros();
        }
    }

    #[inline]
    pub fn stencil_node(&self, st: &Stencil, a: usize, b: usize, c: usize) -> usize {
        ((st.base[0] + a) * self.dims[1] + st.base[1] + b) * self.dims[2] + st.base[2] + c
    }

    pub fn max_abs_grad(&self) -> Real {
        self.active
            .iter()
            .map(|&i| self.grad[i].amax())
            .fold(0.0, Real::max)
    }
}

/// Adjoint of the APIC gather. Accumulates node adjoints into `grid.grad`
/// and position adjoints into `g_x`.
pub fn g2p_backward(
    grid: &mut GridAdjoint,
    x: &[Vec3],
    st: &[Stencil],
    g_v: &[Vec3],
    g_c: &[Mat3],
    g_x: &mut [Vec3],
) {
    let dx = grid.dx;
    let inv_dx = 1.0 / dx;
    let k = 4.0 / (dx * dx);
    for p in 0..x.len() {
        let s = &st[p];
        let (gv, gc) = (g_v[p], g_c[p] * k);
        let mut gx = Vec3::zeros();
        let mut v_sum = Vec3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let idx = grid.stencil_node(s, a, b, c);
                    let w = s.weight(a, b, c);
                    let dw = s.weight_grad(a, b, c) * inv_dx;
                    let d = s.offset(a, b, c) * dx;
                    let node_v = grid.v_final[idx];
                    let gc_d = gc * d;
                    grid.grad[idx] += (gv + gc_d) * w;
                    gx += dw * (node_v.dot(&gv) + node_v.dot(&gc_d));
                    v_sum += node_v * w;
                }
            }
        }
        g_x[p] += gx - gc.transpose() * v_sum;
    }
}

/// Adjoint of the scatter and momentum division. `grid.grad` must hold the
/// adjoint of the post-scatter node velocities.
#[allow(clippy::too_many_arguments)]
pub fn p2g_backward(
    grid: &GridAdjoint,
    particles: &ParticleState,
    stress: &[Mat3],
    st: &[Stencil],
    dt_sub: Real,
    g_x: &mut [Vec3],
    g_v: &mut [Vec3],
    g_c: &mut [Mat3],
    g_stress: &mut [Mat3],
) {
    let dx = grid.dx;
    let inv_dx = 1.0 / dx;
    let m = particles.mass;
    let k_stress = -dt_sub * particles.volume0 * 4.0 / (dx * dx);
    g_x.par_iter_mut()
        .zip(g_v.par_iter_mut())
        .zip(g_c.par_iter_mut())
        .zip(g_stress.par_iter_mut())
        .enumerate()
        .for_each(|(p, (((g_x, g_v), g_c), g_stress))| {
            let s = &st[p];
            let affine = affine_matrix(
                &stress[p],
                &particles.c[p],
                m,
                particles.volume0,
                dx,
                dt_sub,
            );
            let mv = particles.v[p] * m;
            let mut sum_w = Vec3::zeros();
            let mut g_affine = Mat3::zeros();
            let mut gx = Vec3::zeros();
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        let idx = grid.stencil_node(s, a, b, c);
                        let mass = grid.mass[idx];
                        if mass <= 0.0 {
                            continue;
                        }
                        let g_mom = grid.grad[idx] / mass;
                        let g_mass = -grid.grad[idx].dot(&grid.v_p2g[idx]) / mass;
                        let w = s.weight(a, b, c);
                        let dw = s.weight_grad(a, b, c) * inv_dx;
                        let d = s.offset(a, b, c) * dx;
                        sum_w += g_mom * w;
                        g_affine += g_mom * d.transpose() * w;
                        gx += dw * (m * g_mass + g_mom.dot(&(mv + affine * d)));
                    }
                }
            }
            *g_x += gx - affine.transpose() * sum_w;
            *g_v = sum_w * m;
            *g_c += g_affine * m;
            *g_stress = g_affine * k_stress;
        });
}
