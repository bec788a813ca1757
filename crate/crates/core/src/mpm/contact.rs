//! Separating contact with Coulomb friction against rigid SDF bodies.

use crate::math::{Mat3, Real, Vec3};
use crate::scene::{AgentState, RigidSdf, SdfSample};

/// A collider for one substep. Kinematic bodies move with the agent.
#[derive(Clone, Debug)]
pub struct Body {
    pub sdf: RigidSdf,
    pub kinematic: bool,
    lo: Vec3,
    hi: Vec3,
}

impl Body {
    pub fn new(sdf: RigidSdf, kinematic: bool) -> Self {
        let (lo, hi) = sdf.world_bounds();
        Body {
            sdf,
            kinematic,
            lo,
            hi,
        }
    }

    /// True when `point` is at least `band` away from every box.
    fn far(&self, point: &Vec3, band: Real) -> bool {
        (0..3).any(|d| point[d] < self.lo[d] - band || point[d] > self.hi[d] + band)
    }
}

/// Static bodies first, then the scoop posed by `agent`.
pub fn colliders(static_bodies: &[RigidSdf], scoop: &RigidSdf, agent: &AgentState) -> Vec<Body> {
    static_bodies
        .iter()
        .map(|c| Body::new(c.clone(), false))
        .chain(std::iter::once(Body::new(
            scoop.with_pose(agent.pose),
            true,
        )))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContactRegime {
    /// Tangential velocity reduced but not zeroed.
    Slip,
    /// Relative velocity removed entirely.
    Stick,
}

/// Everything the adjoint needs to differentiate one applied projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactRecord {
    pub body: usize,
    pub kinematic: bool,
    pub regime: ContactRegime,
    pub v_in: Vec3,
    pub surface_velocity: Vec3,
    pub normal: Vec3,
    pub normal_jacobian: Mat3,
    /// Contact point minus the agent origin.
    pub lever: Vec3,
    pub friction: Real,
}

/// Projects `v` against a surface moving at `surface_velocity`. Returns `None`
/// when the point is separating (velocity left untouched).
pub fn project_velocity(
    v: &Vec3,
    normal: &Vec3,
    surface_velocity: &Vec3,
    friction: Real,
) -> Option<(Vec3, ContactRegime)> {
    let vr = v - surface_velocity;
    let vn = vr.dot(normal);
    if vn >= 0.0 {
        return None;
    }
    let vt = vr - normal * vn;
    let t = vt.norm();
    if t > 0.0 && t + friction * vn > 0.0 {
        Some((
            surface_velocity + vt * (1.0 + friction * vn / t),
            ContactRegime::Slip,
        ))
    } else {
        Some((*surface_velocity, ContactRegime::Stick))
    }
}

/// Applies every body whose SDF at `point` is below `band`, in body order.
pub fn collide_point(
    point: &Vec3,
    v: &Vec3,
    bodies: &[Body],
    agent: &AgentState,
    band: Real,
    friction: Real,
    mut record: impl FnMut(ContactRecord),
) -> Vec3 {
    let mut out = *v;
    for (bi, body) in bodies.iter().enumerate() {
        if body.far(point, band) || body.sdf.distance(point) >= band {
            continue;
        }
        let sample: SdfSample = body.sdf.query(point);
        let surface_velocity = if body.kinematic {
            agent.point_velocity(point)
        } else {
            Vec3::zeros()
        };
        if let Some((projected, regime)) =
            project_velocity(&out, &sample.normal, &surface_velocity, friction)
        {
            record(ContactRecord {
                body: bi,
                kinematic: body.kinematic,
                regime,
                v_in: out,
                surface_velocity,
                normal: sample.normal,
                normal_jacobian: sample.normal_jacobian,
                lever: point - agent.pose.position,
                friction,
            });
            out = projected;
        }
    }
    out
}
