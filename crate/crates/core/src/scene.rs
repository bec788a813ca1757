//! Laboratory scene: two open-top containers on a table, a box scoop carried
//! by the agent, particle seeding, and exact box signed-distance queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Pose, Real, Vec3};
use crate::mpm::{MaterialParams, ParticleState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [Real; 3],
    pub max: [Real; 3],
}

impl Aabb {
    pub fn new(min: [Real; 3], max: [Real; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min_v() + self.max_v()) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    /// Strict interior test.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|d| p[d] > self.min[d] && p[d] < self.max[d])
    }

    pub fn grown(&self, by: Real) -> Aabb {
        Aabb {
            min: [self.min[0] - by, self.min[1] - by, self.min[2] - by],
            max: [self.max[0] + by, self.max[1] + by, self.max[2] + by],
        }
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|d| self.min[d] < other.max[d] && other.min[d] < self.max[d])
    }

    fn is_valid(&self) -> bool {
        (0..3).all(|d| {
            self.min[d] < self.max[d] && self.min[d].is_finite() && self.max[d].is_finite()
        })
    }
}

/// Open-top box scoop. The body origin sits on the floor's top surface at the
/// closed rear edge; the floor extends along +x to the open lip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoopShape {
    pub length: Real,
    pub width: Real,
    pub wall_height: Real,
    pub thickness: Real,
}

impl Default for ScoopShape {
    fn default() -> Self {
        ScoopShape {
            length: 0.065,
            width: 0.068,
            wall_height: 0.035,
            thickness: 0.004,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub domain_size: [Real; 3],
    /// Grid nodes along x; cells are cubic.
    pub grid_resolution: usize,
    /// Interior volume of the powder-filled container.
    pub source_box: Aabb,
    /// Interior volume of the empty container.
    pub target_box: Aabb,
    pub container_wall_thickness: Real,
    pub scoop: ScoopShape,
    /// Initial scoop origin; derived from the powder bed when absent.
    pub scoop_initial_position: Option<[Real; 3]>,
    /// Initial rotation about the scoop's lateral axis, rad; positive dips the lip.
    pub scoop_initial_tilt: Real,
    /// Gap between the settled-bed top and the scoop floor when derived.
    pub scoop_clearance: Real,
    /// Goal point of the task loss; derived from the target box when absent.
    pub target_point: Option<[Real; 3]>,
    pub particle_count: usize,
    pub particles_per_cell: usize,
    /// Adds a slab under the containers so spilled powder comes to rest.
    pub table: bool,
    /// Coulomb coefficient for powder against every rigid body.
    pub friction_coeff: Real,
    pub seed: u64,
    /// Gravity-only steps run after seeding so the bed starts at rest.
    pub warmup_steps: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            domain_size: [0.5, 0.5, 0.5],
            grid_resolution: 64,
            source_box: Aabb::new([0.15, 0.21, 0.04], [0.23, 0.29, 0.12]),
            target_box: Aabb::new([0.27, 0.21, 0.04], [0.35, 0.29, 0.12]),
            container_wall_thickness: 0.012,
            scoop: ScoopShape::default(),
            scoop_initial_position: None,
            scoop_initial_tilt: 0.9,
            scoop_clearance: 0.002,
            target_point: None,
            particle_count: 8000,
            particles_per_cell: 16,
            table: true,
            friction_coeff: 0.5,
            seed: 0,
            warmup_steps: 50,
        }
    }
}

impl SceneConfig {
    pub fn dx(&self) -> Real {
        self.domain_size[0] / self.grid_resolution as Real
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        let dx = self.dx();
        let n = |d: usize| (self.domain_size[d] / dx).round() as usize;
        [self.grid_resolution, n(1), n(2)]
    }

    /// Spacing of the seeding lattice.
    pub fn lattice_spacing(&self) -> Real {
        self.dx() / (self.particles_per_cell as Real).cbrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_resolution < 16 {
            return bad(format!("grid_resolution {} < 16", self.grid_resolution));
        }
        if self.domain_size.iter().any(|&d| !(d > 0.0)) {
            return bad("domain_size must be positive".into());
        }
        if self.grid_dims()[1..].iter().any(|&n| n < 16) {
            return bad("domain too thin for 16 cells per axis".into());
        }
        if self.particle_count == 0 {
            return bad("particle_count must be > 0".into());
        }
        if self.particles_per_cell == 0 {
            return bad("particles_per_cell must be > 0".into());
        }
        if !(self.friction_coeff >= 0.0) {
            return bad("friction_coeff must be >= 0".into());
        }
        if !(self.container_wall_thickness > 0.0) {
            return bad("container_wall_thickness must be > 0".into());
        }
        let s = &self.scoop;
        if [s.length, s.width, s.wall_height, s.thickness]
            .iter()
            .any(|&v| !(v > 0.0))
        {
            return bad("scoop dimensions must be positive".into());
        }
        if !self.scoop_initial_tilt.is_finite()
            || self.scoop_initial_tilt.abs() >= std::f64::consts::FRAC_PI_2
        {
            return bad("scoop_initial_tilt must lie in (-pi/2, pi/2)".into());
        }
        if !self.source_box.is_valid() || !self.target_box.is_valid() {
            return bad("container boxes need min < max".into());
        }
        let th = self.container_wall_thickness;
        let (src, dst) = (self.source_box.grown(th), self.target_box.grown(th));
        if src.overlaps(&dst) {
            return bad("source and target containers overlap".into());
        }
        let margin = 2.0 * self.dx();
        for (name, b) in [("source", src), ("target", dst)] {
            if (0..3).any(|d| b.min[d] < margin || b.max[d] > self.domain_size[d] - margin) {
                return bad(format!("{name} container leaves the domain"));
            }
        }
        if self.table && src.min[2].min(dst.min[2]) <= margin + 0.5 * self.dx() {
            return bad("no room for the table under the containers".into());
        }
        Ok(())
    }
}

/// Axis-aligned box in a body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxShape {
    pub center: Vec3,
    pub half: Vec3,
}

impl BoxShape {
    pub fn from_bounds(min: Vec3, max: Vec3) -> Self {
        BoxShape {
            center: (min + max) * 0.5,
            half: (max - min) * 0.5,
        }
    }

    fn local_distance(&self, p: &Vec3) -> Real {
        let q = (p - self.center).abs() - self.half;
        let out_norm = q.map(|c| c.max(0.0)).norm();
        if out_norm > 0.0 {
            out_norm
        } else {
            q.max()
        }
    }

    /// Signed distance, outward normal, and normal Jacobian in the box frame.
    fn local_query(&self, p: &Vec3) -> (Real, Vec3, Mat3) {
        let rel = p - self.center;
        let sign = rel.map(|c| if c < 0.0 { -1.0 } else { 1.0 });
        let q = rel.abs() - self.half;
        let outside = q.map(|c| c.max(0.0));
        let out_norm = outside.norm();
        if out_norm > 0.0 {
            let m_hat = outside / out_norm;
            let normal = sign.component_mul(&m_hat);
            let active = q.map(|c| if c > 0.0 { 1.0 } else { 0.0 });
            let s = Mat3::from_diagonal(&sign);
            let jac = s
                * (Mat3::identity() - m_hat * m_hat.transpose())
                * Mat3::from_diagonal(&active)
                * s
                / out_norm;
            (out_norm, normal, jac)
        } else {
            let k = q.imax();
            let mut normal = Vec3::zeros();
            normal[k] = sign[k];
            (q[k], normal, Mat3::zeros())
        }
    }
}

/// Result of a signed-distance query in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub distance: Real,
    pub normal: Vec3,
    /// Derivative of `normal` with respect to the query point.
    pub normal_jacobian: Mat3,
}

/// Union of boxes attached to a rigid pose.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidSdf {
    pub boxes: Vec<BoxShape>,
    pub pose: Pose,
}

impl RigidSdf {
    pub fn single_box(center: Vec3, half: Vec3) -> Self {
        RigidSdf {
            boxes: vec![BoxShape {
                center: Vec3::zeros(),
                half,
            }],
            pose: Pose {
                position: center,
                orientation: Default::default(),
            },
        }
    }

    pub fn with_pose(&self, pose: Pose) -> RigidSdf {
        RigidSdf {
            boxes: self.boxes.clone(),
            pose,
        }
    }

    /// World-space bounds of every box corner.
    pub fn world_bounds(&self) -> (Vec3, Vec3) {
        let rot = self.pose.orientation.to_rotation_matrix();
        let mut lo = Vec3::repeat(Real::INFINITY);
        let mut hi = Vec3::repeat(Real::NEG_INFINITY);
        for b in &self.boxes {
            for k in 0..8 {
                let corner = Vec3::from_fn(|d, _| {
                    if k >> d & 1 == 0 {
                        -b.half[d]
                    } else {
                        b.half[d]
                    }
                });
                let w = rot * (b.center + corner) + self.pose.position;
                lo = lo.inf(&w);
                hi = hi.sup(&w);
            }
        }
        (lo, hi)
    }

    /// Same value as `query(p).distance` without the normal.
    pub fn distance(&self, p: &Vec3) -> Real {
        let rot = self.pose.orientation.to_rotation_matrix();
        let local = rot.inverse_transform_vector(&(p - self.pose.position));
        self.boxes
            .iter()
            .map(|b| b.local_distance(&local))
            .fold(Real::INFINITY, Real::min)
    }

    pub fn query(&self, p: &Vec3) -> SdfSample {
        let rot = self.pose.orientation.to_rotation_matrix();
        let local = rot.inverse_transform_vector(&(p - self.pose.position));
        let mut nearest: Option<(Real, &BoxShape)> = None;
        for b in &self.boxes {
            let d = b.local_distance(&local);
            if nearest.is_none_or(|(best, _)| d < best) {
                nearest = Some((d, b));
            }
        }
        let (_, b) = nearest.expect("RigidSdf without boxes");
        let (distance, n_local, j_local) = b.local_query(&local);
        let r = rot.matrix();
        SdfSample {
            distance,
            normal: r * n_local,
            normal_jacobian: r * j_local * r.transpose(),
        }
    }
}

/// Open-top container: floor plus four walls around `interior`.
pub fn container_sdf(interior: &Aabb, thickness: Real) -> RigidSdf {
    let (lo, hi, t) = (interior.min_v(), interior.max_v(), thickness);
    let v = Vec3::new;
    let boxes = vec![
        BoxShape::from_bounds(v(lo.x - t, lo.y - t, lo.z - t), v(hi.x + t, hi.y + t, lo.z)),
        BoxShape::from_bounds(v(lo.x - t, lo.y - t, lo.z), v(lo.x, hi.y + t, hi.z)),
        BoxShape::from_bounds(v(hi.x, lo.y - t, lo.z), v(hi.x + t, hi.y + t, hi.z)),
        BoxShape::from_bounds(v(lo.x, lo.y - t, lo.z), v(hi.x, lo.y, hi.z)),
        BoxShape::from_bounds(v(lo.x, hi.y, lo.z), v(hi.x, hi.y + t, hi.z)),
    ];
    RigidSdf {
        boxes,
        pose: Pose::identity(),
    }
}

/// Slab spanning the domain from the boundary margin up to the lowest
/// container floor.
pub fn table_sdf(cfg: &SceneConfig) -> RigidSdf {
    let margin = 2.0 * cfg.dx();
    let top = cfg.source_box.min[2].min(cfg.target_box.min[2]) - cfg.container_wall_thickness;
    let d = &cfg.domain_size;
    RigidSdf {
        boxes: vec![BoxShape::from_bounds(
            Vec3::new(margin, margin, margin),
            Vec3::new(d[0] - margin, d[1] - margin, top),
        )],
        pose: Pose::identity(),
    }
}

/// Scoop body in its own frame (identity pose).
pub fn scoop_sdf(shape: &ScoopShape) -> RigidSdf {
    let (l, hw, h, t) = (
        shape.length,
        shape.width * 0.5,
        shape.wall_height,
        shape.thickness,
    );
    let v = Vec3::new;
    let boxes = vec![
        BoxShape::from_bounds(v(-t, -hw - t, -t), v(l, hw + t, 0.0)),
        BoxShape::from_bounds(v(-t, -hw - t, 0.0), v(0.0, hw + t, h)),
        BoxShape::from_bounds(v(-t, hw, 0.0), v(l, hw + t, h)),
        BoxShape::from_bounds(v(-t, -hw - t, 0.0), v(l, -hw, h)),
    ];
    RigidSdf {
        boxes,
        pose: Pose::identity(),
    }
}

/// Kinematic state of the scoop carrier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl AgentState {
    pub fn at_rest(pose: Pose) -> Self {
        AgentState {
            pose,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }

    /// Rigid-body velocity of the material point at `p`.
    pub fn point_velocity(&self, p: &Vec3) -> Vec3 {
        self.linear_velocity + self.angular_velocity.cross(&(p - self.pose.position))
    }
}

/// Immutable geometry of a built scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    /// Source container, target container, then the table when enabled.
    pub static_bodies: Vec<RigidSdf>,
    /// Scoop geometry in its body frame; posed by the agent at query time.
    pub scoop: RigidSdf,
    pub initial_agent: AgentState,
    pub target_point: Vec3,
    /// Height of the seeded powder bed above the source floor.
    pub fill_height: Real,
}

impl Scene {
    pub fn dx(&self) -> Real {
        self.config.dx()
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.config.grid_dims()
    }

    /// Centre-to-centre horizontal distance between the two containers.
    pub fn container_distance(&self) -> Real {
        let d = self.config.target_box.center() - self.config.source_box.center();
        (d.x * d.x + d.y * d.y).sqrt()
    }
}

/// Seeds particles on a jittered lattice in the source container and places
/// the containers and the scoop.
pub fn build_scene(cfg: &SceneConfig, material: &MaterialParams) -> Result<(Scene, ParticleState)> {
    cfg.validate()?;
    material.validate()?;

    let spacing = cfg.lattice_spacing();
    let src = &cfg.source_box;
    let extent = src.extent();
    let nx = (extent.x / spacing).floor() as usize;
    let ny = (extent.y / spacing).floor() as usize;
    let max_layers = (extent.z / spacing).floor() as usize;
    let per_layer = nx * ny;
    if per_layer == 0 {
        return Err(Error::Config(
            "source box smaller than one lattice cell".into(),
        ));
    }
    let layers = cfg.particle_count.div_ceil(per_layer);
    if layers > max_layers {
        return Err(Error::Config(format!(
            "source box holds at most {} particles at {} per cell, {} requested",
            per_layer * max_layers,
            cfg.particles_per_cell,
            cfg.particle_count
        )));
    }
    let fill_height = layers as Real * spacing;

    let off_x = src.min[0] + 0.5 * (extent.x - nx as Real * spacing) + 0.5 * spacing;
    let off_y = src.min[1] + 0.5 * (extent.y - ny as Real * spacing) + 0.5 * spacing;
    let off_z = src.min[2] + 0.5 * spacing;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = 0.25 * spacing;
    let mut positions = Vec::with_capacity(cfg.particle_count);
    'fill: for k in 0..layers {
        for j in 0..ny {
            for i in 0..nx {
                if positions.len() == cfg.particle_count {
                    break 'fill;
                }
                let mut p = Vec3::new(
                    off_x + i as Real * spacing,
                    off_y + j as Real * spacing,
                    off_z + k as Real * spacing,
                );
                for d in 0..3 {
                    p[d] += rng.random_range(-jitter..jitter);
                }
                positions.push(p);
            }
        }
    }

    let th = cfg.container_wall_thickness;
    let mut static_bodies = vec![
        container_sdf(&cfg.source_box, th),
        container_sdf(&cfg.target_box, th),
    ];
    if cfg.table {
        static_bodies.push(table_sdf(cfg));
    }

    let scoop = scoop_sdf(&cfg.scoop);
    let orientation =
        nalgebra::UnitQuaternion::from_axis_angle(&Vec3::y_axis(), cfg.scoop_initial_tilt);
    let src_c = src.center();
    let scoop_origin = match cfg.scoop_initial_position {
        Some(p) => Vec3::from(p),
        None => {
            // Lowest scoop point sits `scoop_clearance` above the bed.
            let (lo, _) = scoop
                .with_pose(Pose {
                    position: Vec3::zeros(),
                    orientation,
                })
                .world_bounds();
            Vec3::new(
                src_c.x - 0.5 * cfg.scoop.length,
                src_c.y,
                src.min[2] + fill_height + cfg.scoop_clearance - lo.z,
            )
        }
    };
    let initial_agent = AgentState::at_rest(Pose {
        position: scoop_origin,
        orientation,
    });

    let target_point = match cfg.target_point {
        Some(p) => Vec3::from(p),
        None => {
            let c = cfg.target_box.center();
            Vec3::new(c.x, c.y, cfg.target_box.min[2] + 0.5 * fill_height)
        }
    };

    let posed_scoop = scoop.with_pose(initial_agent.pose);
    for (idx, p) in positions.iter().enumerate() {
        let clear = static_bodies
            .iter()
            .chain(std::iter::once(&posed_scoop))
            .all(|b| b.distance(p) > 0.0);
        if !clear {
            return Err(Error::Config(format!(
                "seeded particle {idx} overlaps a rigid body"
            )));
        }
    }

    let volume0 = spacing.powi(3);
    let particles = ParticleState::new(positions, material.density * volume0, volume0);
    let scene = Scene {
        config: cfg.clone(),
        static_bodies,
        scoop,
        initial_agent,
        target_point,
        fill_height,
    };
    Ok((scene, particles))
}

/// Particles strictly inside the target container's interior.
pub fn count_in_target(particles: &ParticleState, cfg: &SceneConfig) -> usize {
    particles
        .x
        .iter()
        .filter(|p| cfg.target_box.contains(p))
        .count()
}
