//! Every substep stage's adjoint against central differences of its forward
//! kernel, on single-particle and few-node fixtures.
//!
//! Each check scalarises a stage's outputs with a random cotangent `g` and
//! compares the kernel's input adjoint, projected on a random direction,
//! with the directional difference quotient of `g . f(x + e d)`.

use granugrad::adjoint::kernels::{
    advect_backward, constitutive_svd_backward, contact_backward, deform_backward, g2p_backward,
    move_agent_backward, p2g_backward, GridAdjoint, PoseGrad,
};
use granugrad::math::{bspline_weights, svd3, Mat3, Pose, Real, Vec3, Vec6};
use granugrad::mpm::{
    advect, collide_point, constitutive, deform_update, g2p, move_agent, p2g, stencils, Body,
    ContactRecord, ContactRegime, Grid, MaterialParams, ParticleState, Regime,
};
use granugrad::objective::{task_loss, task_loss_backward, LossKind};
use granugrad::scene::{AgentState, RigidSdf};
use nalgebra::UnitQuaternion;
use rand_chacha::ChaCha8Rng;

use crate::common::{mat3, rel_error, rng, vec3, vec6, Tally};
use crate::Outcome;

const H: Real = 1e-6;
const DIRECTIONS: usize = 6;
const TOL: Real = 1e-5;

fn central(j: impl Fn(Real) -> Real) -> Real {
    (j(H) - j(-H)) / (2.0 * H)
}

fn rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    UnitQuaternion::from_scaled_axis(vec3(rng, 1.5))
        .to_rotation_matrix()
        .into_inner()
}

pub fn all_stages() -> Outcome {
    let mut t = Tally::new(TOL);
    let mut r = rng(2024);
    deform(&mut t, &mut r);
    for (label, s, regime) in [
        (
            "constitutive/elastic",
            [-0.02, -0.01, -0.015],
            Regime::Elastic,
        ),
        ("constitutive/cone", [-0.03, 0.02, 0.005], Regime::Cone),
        ("constitutive/tip", [0.02, 0.01, 0.03], Regime::Tip),
    ] {
        constitutive_stage(&mut t, &mut r, label, Vec3::from(s).map(Real::exp), regime);
    }
    for fixture in contact_fixtures() {
        contact_stage(&mut t, &mut r, &fixture);
    }
    advect_stage(&mut t, &mut r);
    g2p_stage(&mut t, &mut r);
    p2g_stage(&mut t, &mut r);
    move_agent_stage(&mut t, &mut r);
    loss_stage(&mut t, &mut r);
    t.verdict("directional checks")
}

fn deform(t: &mut Tally, r: &mut ChaCha8Rng) {
    let f = Mat3::identity() + mat3(r, 0.2);
    let c = mat3(r, 5.0);
    let dt = 1e-3;
    let g = mat3(r, 1.0);
    let (gf, gc) = deform_backward(&f, &c, dt, &g);
    for _ in 0..DIRECTIONS {
        let (df, dc) = (mat3(r, 1.0), mat3(r, 1.0));
        let numeric = central(|e| g.dot(&deform_update(&(f + df * e), &(c + dc * e), dt)));
        t.record("deform", rel_error(gf.dot(&df) + gc.dot(&dc), numeric));
    }
}

fn constitutive_stage(
    t: &mut Tally,
    r: &mut ChaCha8Rng,
    label: &str,
    stretches: Vec3,
    regime: Regime,
) {
    let mat = MaterialParams::default();
    let f = rotation(r) * Mat3::from_diagonal(&stretches) * rotation(r).transpose();
    let svd = svd3(&f);
    let out = constitutive(&svd, &mat).expect("fixture is admissible");
    assert_eq!(
        out.record.regime, regime,
        "{label} fixture in the wrong regime"
    );

    let g_f = mat3(r, 1.0);
    let g_s = mat3(r, 1.0 / mat.youngs_modulus);
    let analytic = constitutive_svd_backward(&svd, &out.record, &mat, &g_f, &g_s);
    for _ in 0..DIRECTIONS {
        let d = mat3(r, 1.0);
        let numeric = central(|e| {
            let o = constitutive(&svd3(&(f + d * e)), &mat).expect("stays admissible");
            g_f.dot(&o.f_new) + g_s.dot(&o.stress)
        });
        t.record(label, rel_error(analytic.dot(&d), numeric));
    }
}

struct ContactFixture {
    label: String,
    kinematic: bool,
    /// Query point in the body frame.
    local_point: Vec3,
    /// Velocity relative to the surface, body frame.
    local_relative: Vec3,
    regime: ContactRegime,
}

fn contact_fixtures() -> Vec<ContactFixture> {
    let face = Vec3::new(0.01, -0.005, 0.007);
    let edge = Vec3::new(0.0315, 0.0, 0.0065);
    let slip = Vec3::new(0.2, 0.5, -0.6);
    let mut out = Vec::new();
    for kinematic in [false, true] {
        for (where_, p, stick) in [
            ("face", face, Vec3::new(0.02, 0.01, -0.8)),
            ("edge", edge, Vec3::new(-0.55, 0.01, -0.57)),
        ] {
            for (how, v, regime) in [
                ("slip", slip, ContactRegime::Slip),
                ("stick", stick, ContactRegime::Stick),
            ] {
                let body = if kinematic { "scoop" } else { "static" };
                out.push(ContactFixture {
                    label: format!("contact/{body}-{where_}-{how}"),
                    kinematic,
                    local_point: p,
                    local_relative: v,
                    regime,
                });
            }
        }
    }
    out
}

fn contact_stage(t: &mut Tally, r: &mut ChaCha8Rng, fx: &ContactFixture) {
    let (band, friction, dt) = (0.005, 0.4, 5e-4);
    let half = Vec3::new(0.03, 0.02, 0.005);
    let shape = RigidSdf::single_box(Vec3::zeros(), half);
    let pose0 = if fx.kinematic {
        Pose {
            position: Vec3::new(0.2, 0.2, 0.2),
            orientation: UnitQuaternion::from_scaled_axis(Vec3::new(0.1, -0.2, 0.3)),
        }
    } else {
        Pose {
            position: Vec3::new(0.1, 0.1, 0.05),
            orientation: UnitQuaternion::identity(),
        }
    };
    let u0 = if fx.kinematic {
        Vec6::new(0.002, -0.001, 0.0015, 0.01, -0.02, 0.015)
    } else {
        Vec6::zeros()
    };
    let agent_at = |pose: Pose, u: Vec6| AgentState {
        pose,
        linear_velocity: u.fixed_rows::<3>(0) / dt,
        angular_velocity: u.fixed_rows::<3>(3) / dt,
    };
    // Static fixtures keep the box still and leave the agent elsewhere.
    let body_at = |pose: Pose| Body::new(shape.with_pose(pose), fx.kinematic);
    let x0 = pose0.position + pose0.orientation * fx.local_point;
    let agent0 = agent_at(pose0, u0);
    let surface = if fx.kinematic {
        agent0.point_velocity(&x0)
    } else {
        Vec3::zeros()
    };
    let v0 = surface + pose0.orientation * fx.local_relative;

    let mut records: Vec<ContactRecord> = Vec::new();
    collide_point(&x0, &v0, &[body_at(pose0)], &agent0, band, friction, |c| {
        records.push(c)
    });
    assert_eq!(records.len(), 1, "{}: expected one projection", fx.label);
    assert_eq!(
        records[0].regime, fx.regime,
        "{} in the wrong regime",
        fx.label
    );

    let g = vec3(r, 1.0);
    let grad = contact_backward(&records[0], &agent0, dt, &g);
    for _ in 0..DIRECTIONS {
        let (dx, dv, dp, dr) = (vec3(r, 1.0), vec3(r, 1.0), vec3(r, 1.0), vec3(r, 1.0));
        let du = vec6(r, 1e-3);
        let numeric = central(|e| {
            let (pose, u) = if fx.kinematic {
                (
                    Pose {
                        position: pose0.position + dp * e,
                        orientation: UnitQuaternion::from_scaled_axis(dr * e) * pose0.orientation,
                    },
                    u0 + du * e,
                )
            } else {
                (pose0, u0)
            };
            let agent = agent_at(pose, u);
            let out = collide_point(
                &(x0 + dx * e),
                &(v0 + dv * e),
                &[body_at(pose)],
                &agent,
                band,
                friction,
                |_| {},
            );
            g.dot(&out)
        });
        let mut analytic = grad.v_in.dot(&dv) + grad.point.dot(&dx);
        if fx.kinematic {
            analytic +=
                grad.pose.position.dot(&dp) + grad.pose.rotation.dot(&dr) + grad.u_sub.dot(&du);
        } else {
            assert!(grad.pose == PoseGrad::default() && grad.u_sub == Vec6::zeros());
        }
        t.record(&fx.label, rel_error(analytic, numeric));
    }
}

fn advect_stage(t: &mut Tally, r: &mut ChaCha8Rng) {
    let (lo, hi, dt) = (Vec3::zeros(), Vec3::repeat(1.0), 1e-3);
    let x0 = Vec3::new(0.5, 0.999, 0.3);
    let v0 = Vec3::new(0.2, 3.0, -0.1);
    let step = |x: Vec3, v: Vec3| {
        let (mut xs, mut vs) = ([x], [v]);
        let flags = advect(&mut xs, &mut vs, dt, &lo, &hi);
        (xs[0], vs[0], flags[0])
    };
    let (_, _, flags) = step(x0, v0);
    assert_eq!(flags, [false, true, false], "advect fixture clamps y only");
    let (gx, gv) = (vec3(r, 1.0), vec3(r, 1.0));
    let (ax, av) = advect_backward(&flags, dt, &gx, &gv);
    for _ in 0..DIRECTIONS {
        let (dx, dv) = (vec3(r, 1.0), vec3(r, 1.0));
        let numeric = central(|e| {
            let (x, v, _) = step(x0 + dx * e, v0 + dv * e);
            gx.dot(&x) + gv.dot(&v)
        });
        t.record("advect", rel_error(ax.dot(&dx) + av.dot(&dv), numeric));
    }
}

const DIMS: [usize; 3] = [8, 8, 8];
const DX: Real = 0.1;

fn g2p_stage(t: &mut Tally, r: &mut ChaCha8Rng) {
    let nodes = DIMS.iter().product::<usize>();
    let x0 = Vec3::new(0.33, 0.41, 0.37);
    let vel0: Vec<Vec3> = (0..nodes).map(|_| vec3(r, 1.0)).collect();
    let gather = |x: Vec3, vel: &[Vec3]| {
        let mut grid = Grid::new(DIMS, DX);
        grid.velocity.copy_from_slice(vel);
        let st = bspline_weights(&(x / DX), DIMS).expect("inside the grid");
        let (mut v, mut c) = ([Vec3::zeros()], [Mat3::zeros()]);
        g2p(&grid, &[st], &mut v, &mut c);
        (v[0], c[0])
    };
    let (gv, gc) = (vec3(r, 1.0), mat3(r, 0.1));
    let mut adj = GridAdjoint::new(DIMS, DX);
    adj.v_final.copy_from_slice(&vel0);
    let st = bspline_weights(&(x0 / DX), DIMS).unwrap();
    let mut gx = [Vec3::zeros()];
    g2p_backward(&mut adj, &[x0], &[st], &[gv], &[gc], &mut gx);
    for _ in 0..DIRECTIONS {
        let dx = vec3(r, 1.0);
        let dvel: Vec<Vec3> = (0..nodes).map(|_| vec3(r, 1.0)).collect();
        let numeric = central(|e| {
            let vel: Vec<Vec3> = vel0.iter().zip(&dvel).map(|(a, b)| a + b * e).collect();
            let (v, c) = gather(x0 + dx * e, &vel);
            gv.dot(&v) + gc.dot(&c)
        });
        let analytic = gx[0].dot(&dx)
            + adj
                .grad
                .iter()
                .zip(&dvel)
                .map(|(g, d)| g.dot(d))
                .sum::<Real>();
        t.record("g2p", rel_error(analytic, numeric));
    }
}

fn p2g_stage(t: &mut Tally, r: &mut ChaCha8Rng) {
    let dt = 1e-3;
    let mut p0 = ParticleState::new(
        vec![Vec3::new(0.33, 0.41, 0.37), Vec3::new(0.36, 0.38, 0.42)],
        0.8,
        1e-3,
    );
    for i in 0..2 {
        p0.v[i] = vec3(r, 1.0);
        p0.c[i] = mat3(r, 2.0);
    }
    let stress0: Vec<Mat3> = (0..2).map(|_| mat3(r, 500.0)).collect();
    let nodes = DIMS.iter().product::<usize>();
    let g_node: Vec<Vec3> = (0..nodes).map(|_| vec3(r, 1.0)).collect();
    let scatter = |p: &ParticleState, stress: &[Mat3]| {
        let mut grid = Grid::new(DIMS, DX);
        p2g(&mut grid, p, stress, dt).expect("inside the grid");
        grid
    };

    let grid = scatter(&p0, &stress0);
    let mass: Vec<Real> = grid.active.iter().map(|&i| grid.mass[i]).collect();
    let vel: Vec<Vec3> = grid.active.iter().map(|&i| grid.velocity[i]).collect();
    let mut adj = GridAdjoint::new(DIMS, DX);
    adj.load(&grid.active, &mass, &vel, &vel);
    for &i in &grid.active {
        adj.grad[i] = g_node[i];
    }
    let st = stencils(&p0.x, DIMS, DX).unwrap();
    let mut gx = vec![Vec3::zeros(); 2];
    let mut gv = vec![Vec3::zeros(); 2];
    let mut gc = vec![Mat3::zeros(); 2];
    let mut gs = vec![Mat3::zeros(); 2];
    p2g_backward(
        &adj, &p0, &stress0, &st, dt, &mut gx, &mut gv, &mut gc, &mut gs,
    );

    for _ in 0..DIRECTIONS {
        let dx: Vec<Vec3> = (0..2).map(|_| vec3(r, 1.0)).collect();
        let dv: Vec<Vec3> = (0..2).map(|_| vec3(r, 1.0)).collect();
        let dc: Vec<Mat3> = (0..2).map(|_| mat3(r, 1.0)).collect();
        let ds: Vec<Mat3> = (0..2).map(|_| mat3(r, 100.0)).collect();
        let numeric = central(|e| {
            let mut p = p0.clone();
            let mut stress = stress0.clone();
            for i in 0..2 {
                p.x[i] += dx[i] * e;
                p.v[i] += dv[i] * e;
                p.c[i] += dc[i] * e;
                stress[i] += ds[i] * e;
            }
            let grid = scatter(&p, &stress);
            grid.active
                .iter()
                .map(|&i| g_node[i].dot(&grid.velocity[i]))
                .sum::<Real>()
        });
        let analytic: Real = (0..2)
            .map(|i| gx[i].dot(&dx[i]) + gv[i].dot(&dv[i]) + gc[i].dot(&dc[i]) + gs[i].dot(&ds[i]))
            .sum();
        t.record("p2g", rel_error(analytic, numeric));
    }
}

fn move_agent_stage(t: &mut Tally, r: &mut ChaCha8Rng) {
    let dt = 1e-3;
    let pose0 = Pose {
        position: vec3(r, 0.3),
        orientation: UnitQuaternion::from_scaled_axis(vec3(r, 1.0)),
    };
    let u0 = Vec6::new(0.003, -0.002, 0.001, 0.05, -0.08, 0.03);
    let moved0 = move_agent(&AgentState::at_rest(pose0), &u0, dt).pose;
    let (gp, gr) = (vec3(r, 1.0), vec3(r, 1.0));
    let (before, gu) = move_agent_backward(
        &u0,
        &PoseGrad {
            position: gp,
            rotation: gr,
        },
    );
    for _ in 0..DIRECTIONS {
        let (dp, dr, du) = (vec3(r, 1.0), vec3(r, 1.0), vec6(r, 1.0));
        let numeric = central(|e| {
            let pose = Pose {
                position: pose0.position + dp * e,
                orientation: UnitQuaternion::from_scaled_axis(dr * e) * pose0.orientation,
            };
            let moved = move_agent(&AgentState::at_rest(pose), &(u0 + du * e), dt).pose;
            let tangent = (moved.orientation * moved0.orientation.inverse()).scaled_axis();
            gp.dot(&moved.position) + gr.dot(&tangent)
        });
        let analytic = before.position.dot(&dp) + before.rotation.dot(&dr) + gu.dot(&du);
        t.record("move_agent", rel_error(analytic, numeric));
    }
}

fn loss_stage(t: &mut Tally, r: &mut ChaCha8Rng) {
    let target = Vec3::new(0.5, 0.5, 0.2);
    let x0: Vec<Vec3> = (0..5).map(|_| target + vec3(r, 0.3)).collect();
    for (label, kind) in [
        ("loss/l1", LossKind::L1),
        ("loss/euclidean", LossKind::Euclidean),
    ] {
        let g = task_loss_backward(&x0, &target, kind);
        for _ in 0..DIRECTIONS {
            let d: Vec<Vec3> = (0..5).map(|_| vec3(r, 1.0)).collect();
            let numeric = central(|e| {
                let x: Vec<Vec3> = x0.iter().zip(&d).map(|(a, b)| a + b * e).collect();
                task_loss(&x, &target, kind)
            });
            let analytic: Real = g.iter().zip(&d).map(|(a, b)| a.dot(b)).sum();
            t.record(label, rel_error(analytic, numeric));
        }
    }
}
