//! Explicit MLS-MPM substep with APIC transfers, Drucker-Prager sand and
//! two-level (grid, then particle) rigid-body contact.
//!
//! Every substep writes its intermediate values into a [`SubstepTape`]; the
//! forward pass simply overwrites one tape, while the adjoint keeps a tape per
//! substep of the segment it is differentiating.

mod constitutive;
mod contact;
pub mod snapshot;

pub use constitutive::{
    constitutive, deform_update, return_map, ConstitutiveOutput, ConstitutiveRecord,
    MaterialParams, Regime,
};
pub use contact::{collide_point, colliders, project_velocity, Body, ContactRecord, ContactRegime};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{fault, Error, Result};
use crate::math::{bspline_weights, rot6_to_pose, svd3, Mat3, Real, Stencil, Svd, Vec3, Vec6};
use crate::scene::{AgentState, Scene};

/// Per-particle simulation state. Mass and rest volume are uniform.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    /// Deformation gradients.
    pub f: Vec<Mat3>,
    /// APIC affine velocity fields.
    pub c: Vec<Mat3>,
    pub mass: Real,
    pub volume0: Real,
}

impl ParticleState {
    /// Particles at rest and undeformed at `positions`.
    pub fn new(positions: Vec<Vec3>, mass: Real, volume0: Real) -> Self {
        let n = positions.len();
        ParticleState {
            x: positions,
            v: vec![Vec3::zeros(); n],
            f: vec![Mat3::identity(); n],
            c: vec![Mat3::zeros(); n],
            mass,
            volume0,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total_mass(&self) -> Real {
        self.mass * self.len() as Real
    }

    pub fn momentum(&self) -> Vec3 {
        self.v.iter().sum::<Vec3>() * self.mass
    }

    pub fn max_speed(&self) -> Real {
        self.v.iter().map(|v| v.norm()).fold(0.0, Real::max)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.v.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.f.iter().all(|m| m.iter().all(|c| c.is_finite()))
            && self.c.iter().all(|m| m.iter().all(|c| c.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Global control step, seconds.
    pub dt: Real,
    pub n_sub: usize,
    pub gravity: [Real; 3],
    /// Grid nodes closer than this many cells to a body are in contact.
    pub grid_band_cells: Real,
    /// Particle-level contact band, cells.
    pub particle_band_cells: Real,
    /// Particles are kept at least this many cells from the domain border.
    pub boundary_cells: Real,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 0.01,
            n_sub: 20,
            gravity: [0.0, 0.0, -9.81],
            grid_band_cells: 1.5,
            particle_band_cells: 0.5,
            boundary_cells: 2.0,
        }
    }
}

impl SimParams {
    pub fn dt_sub(&self) -> Real {
        self.dt / self.n_sub as Real
    }

    pub fn gravity_v(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_sub == 0 {
            return Err(Error::Config("sim: dt must be > 0 and n_sub >= 1".into()));
        }
        Ok(())
    }
}

/// Dense background grid. Only nodes listed in `active` are non-zero.
#[derive(Clone, Debug)]
pub struct Grid {
    pub dims: [usize; 3],
    pub dx: Real,
    pub mass: Vec<Real>,
    pub momentum: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
    /// Nodes touched by the last scatter, in first-touch order.
    pub active: Vec<usize>,
    marked: Vec<bool>,
}

impl Grid {
    pub fn new(dims: [usize; 3], dx: Real) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Grid {
            dims,
            dx,
            mass: vec![0.0; n],
            momentum: vec![Vec3::zeros(); n],
            velocity: vec![Vec3::zeros(); n],
            active: Vec::new(),
            marked: vec![false; n],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_position(&self, idx: usize) -> Vec3 {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        Vec3::new(i as Real, j as Real, k as Real) * self.dx
    }

    /// Zeroes every touched node.
    pub fn reset(&mut self) {
        for &idx in &self.active {
            self.mass[idx] = 0.0;
            self.momentum[idx] = Vec3::zeros();
            self.velocity[idx] = Vec3::zeros();
            self.marked[idx] = false;
        }
        self.active.clear();
    }

    #[inline]
    fn touch(&mut self, idx: usize) {
        if !self.marked[idx] {
            self.marked[idx] = true;
            self.active.push(idx);
        }
    }

    pub fn total_mass(&self) -> Real {
        self.active.iter().map(|&i| self.mass[i]).sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.active.iter().map(|&i| self.momentum[i]).sum()
    }

    #[inline]
    pub fn stencil_node(&self, st: &Stencil, a: usize, b: usize, c: usize) -> usize {
        self.index(st.base[0] + a, st.base[1] + b, st.base[2] + c)
    }
}

/// Quadratic B-spline stencils for every particle.
pub fn stencils(x: &[Vec3], dims: [usize; 3], dx: Real) -> Result<Vec<Stencil>> {
    let inv_dx = 1.0 / dx;
    let found: Vec<Option<Stencil>> = x
        .par_iter()
        .map(|xp| bspline_weights(&(xp * inv_dx), dims))
        .collect();
    found
        .into_iter()
        .enumerate()
        .map(|(p, s)| {
            s.ok_or_else(|| {
                fault(format!(
                    "particle {p} outside the grid at {:?}",
                    x[p].as_slice()
                ))
            })
        })
        .collect()
}

/// Affine momentum matrix of the fused MLS-MPM scatter.
#[inline]
pub fn affine_matrix(
    stress: &Mat3,
    c: &Mat3,
    mass: Real,
    volume0: Real,
    dx: Real,
    dt_sub: Real,
) -> Mat3 {
    stress * (-dt_sub * volume0 * 4.0 / (dx * dx)) + c * mass
}

/// Particle-to-grid scatter of mass, APIC momentum and stress impulse,
/// followed by the momentum-to-velocity division. Resets `grid` first.
pub fn p2g(
    grid: &mut Grid,
    particles: &ParticleState,
    stress: &[Mat3],
    dt_sub: Real,
) -> Result<()> {
    let st = stencils(&particles.x, grid.dims, grid.dx)?;
    grid.reset();
    p2g_with(grid, particles, stress, &st, dt_sub);
    Ok(())
}

fn p2g_with(
    grid: &mut Grid,
    particles: &ParticleState,
    stress: &[Mat3],
    st: &[Stencil],
    dt_sub: Real,
) {
    let dx = grid.dx;
    let m = particles.mass;
    for p in 0..particles.len() {
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
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let w = s.weight(a, b, c);
                    let idx = grid.stencil_node(s, a, b, c);
                    grid.touch(idx);
                    let d = s.offset(a, b, c) * dx;
                    grid.mass[idx] += w * m;
                    grid.momentum[idx] += (mv + affine * d) * w;
                }
            }
        }
    }
    for &idx in &grid.active {
        let mass = grid.mass[idx];
        grid.velocity[idx] = if mass > 0.0 {
            grid.momentum[idx] / mass
        } else {
            Vec3::zeros()
        };
    }
}

/// Adds `dt g` to every node carrying mass.
pub fn grid_gravity(grid: &mut Grid, gravity: &Vec3, dt_sub: Real) {
    let dv = gravity * dt_sub;
    for &idx in &grid.active {
        if grid.mass[idx] > 0.0 {
            grid.velocity[idx] += dv;
        }
    }
}

/// Grid-level contact. Returns the applied projections as `(active slot, record)`.
pub fn grid_collide(
    grid: &mut Grid,
    bodies: &[Body],
    agent: &AgentState,
    band: Real,
    friction: Real,
) -> Vec<(usize, ContactRecord)> {
    let g = &*grid;
    let out: Vec<Option<(Vec3, Vec<ContactRecord>)>> = g
        .active
        .par_iter()
        .map(|&idx| {
            if g.mass[idx] <= 0.0 {
                return None;
            }
            let mut recs = Vec::new();
            let v = collide_point(
                &g.node_position(idx),
                &g.velocity[idx],
                bodies,
                agent,
                band,
                friction,
                |r| recs.push(r),
            );
            Some((v, recs))
        })
        .collect();
    let mut records = Vec::new();
    for (slot, o) in out.into_iter().enumerate() {
        if let Some((v, recs)) = o {
            grid.velocity[grid.active[slot]] = v;
            records.extend(recs.into_iter().map(|r| (slot, r)));
        }
    }
    records
}

/// APIC gather: new particle velocities and affine fields.
pub fn g2p(grid: &Grid, st: &[Stencil], v_out: &mut [Vec3], c_out: &mut [Mat3]) {
    let dx = grid.dx;
    let scale = 4.0 / dx;
    v_out
        .par_iter_mut()
        .zip(c_out.par_iter_mut())
        .enumerate()
        .for_each(|(p, (v_p, c_p))| {
            let s = &st[p];
            let mut v = Vec3::zeros();
            let mut b = Mat3::zeros();
            for a in 0..3 {
                for bb in 0..3 {
                    for c in 0..3 {
                        let w = s.weight(a, bb, c);
                        let gv = grid.velocity[grid.stencil_node(s, a, bb, c)] * w;
                        v += gv;
                        b += gv * s.offset(a, bb, c).transpose();
                    }
                }
            }
            *v_p = v;
            *c_p = b * scale;
        });
}

/// Particle-level contact at exact positions. Returns `(particle, record)` pairs.
pub fn particle_collide(
    x: &[Vec3],
    v: &mut [Vec3],
    bodies: &[Body],
    agent: &AgentState,
    band: Real,
    friction: Real,
) -> Vec<(usize, ContactRecord)> {
    let out: Vec<(Vec3, Vec<ContactRecord>)> = x
        .par_iter()
        .zip(v.par_iter())
        .map(|(xp, vp)| {
            let mut recs = Vec::new();
            let nv = collide_point(xp, vp, bodies, agent, band, friction, |r| recs.push(r));
            (nv, recs)
        })
        .collect();
    let mut records = Vec::new();
    for (p, (nv, recs)) in out.into_iter().enumerate() {
        v[p] = nv;
        records.extend(recs.into_iter().map(|r| (p, r)));
    }
    records
}

/// `x += dt v`, clamped into `[lo, hi]`; clamped components lose their velocity.
pub fn advect(
    x: &mut [Vec3],
    v: &mut [Vec3],
    dt_sub: Real,
    lo: &Vec3,
    hi: &Vec3,
) -> Vec<[bool; 3]> {
    x.par_iter_mut()
        .zip(v.par_iter_mut())
        .map(|(xp, vp)| {
            let mut flags = [false; 3];
            for d in 0..3 {
                let moved = xp[d] + dt_sub * vp[d];
                if moved < lo[d] || moved > hi[d] {
                    xp[d] = moved.clamp(lo[d], hi[d]);
                    vp[d] = 0.0;
                    flags[d] = true;
                } else {
                    xp[d] = moved;
                }
            }
            flags
        })
        .collect()
}

/// Moves the agent by a 6-DoF increment and stores the implied velocities.
pub fn move_agent(agent: &AgentState, u_sub: &Vec6, dt_sub: Real) -> AgentState {
    AgentState {
        pose: agent.pose.compose(&rot6_to_pose(u_sub)),
        linear_velocity: u_sub.fixed_rows::<3>(0) / dt_sub,
        angular_velocity: u_sub.fixed_rows::<3>(3) / dt_sub,
    }
}

/// Full simulation state: powder plus agent.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub particles: ParticleState,
    pub agent: AgentState,
}

/// Intermediate values of one substep, sufficient for its adjoint.
#[derive(Clone, Debug, Default)]
pub struct SubstepTape {
    pub index: usize,
    pub dt_sub: Real,
    pub u_sub: Vec6,
    pub agent_before: Option<AgentState>,
    pub agent_after: Option<AgentState>,
    /// State entering the substep.
    pub input: ParticleState,
    pub f_tmp: Vec<Mat3>,
    pub svd: Vec<Svd>,
    pub con: Vec<ConstitutiveRecord>,
    pub stress: Vec<Mat3>,
    pub stencils: Vec<Stencil>,
    pub active: Vec<usize>,
    pub node_mass: Vec<Real>,
    /// Node velocities straight after the scatter.
    pub node_v_p2g: Vec<Vec3>,
    pub node_contacts: Vec<(usize, ContactRecord)>,
    /// Node velocities after gravity and contact, as gathered by g2p.
    pub node_v_final: Vec<Vec3>,
    pub v_g2p: Vec<Vec3>,
    pub particle_contacts: Vec<(usize, ContactRecord)>,
    /// Velocities after particle-level contact, before advection.
    pub v_collided: Vec<Vec3>,
    pub clamped: Vec<[bool; 3]>,
}

impl SubstepTape {
    pub fn agent_before(&self) -> &AgentState {
        self.agent_before.as_ref().expect("tape not recorded")
    }

    pub fn agent_after(&self) -> &AgentState {
        self.agent_after.as_ref().expect("tape not recorded")
    }
}

/// Forward simulator over a fixed scene and material.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub scene: Scene,
    pub material: MaterialParams,
    pub params: SimParams,
    pub grid: Grid,
    scratch: SubstepTape,
    substeps_run: usize,
}

impl Simulator {
    pub fn new(scene: Scene, material: MaterialParams, params: SimParams) -> Result<Self> {
        material.validate()?;
        params.validate()?;
        let grid = Grid::new(scene.grid_dims(), scene.dx());
        Ok(Simulator {
            scene,
            material,
            params,
            grid,
            scratch: SubstepTape::default(),
            substeps_run: 0,
        })
    }

    pub fn dx(&self) -> Real {
        self.scene.dx()
    }

    pub fn friction(&self) -> Real {
        self.scene.config.friction_coeff
    }

    pub fn grid_band(&self) -> Real {
        self.params.grid_band_cells * self.dx()
    }

    pub fn particle_band(&self) -> Real {
        self.params.particle_band_cells * self.dx()
    }

    /// Bounds that advected particles are clamped into.
    pub fn clamp_bounds(&self) -> (Vec3, Vec3) {
        let margin = self.params.boundary_cells * self.dx();
        let d = self.scene.config.domain_size;
        (
            Vec3::repeat(margin),
            Vec3::new(d[0], d[1], d[2]) - Vec3::repeat(margin),
        )
    }

    pub fn bodies(&self, agent: &AgentState) -> Vec<Body> {
        colliders(&self.scene.static_bodies, &self.scene.scoop, agent)
    }

    /// Index the next substep will carry in its tape and fault messages.
    pub fn substep_counter(&self) -> usize {
        self.substeps_run
    }

    pub fn set_substep_counter(&mut self, n: usize) {
        self.substeps_run = n;
    }

    /// One substep of `dt_sub` with control increment `u_sub`.
    pub fn substep(&mut self, state: &mut SimState, u_sub: &Vec6, dt_sub: Real) -> Result<()> {
        let mut tape = std::mem::take(&mut self.scratch);
        let out = self.substep_recorded(state, u_sub, dt_sub, &mut tape);
        self.scratch = tape;
        out
    }

    /// One substep, leaving every intermediate value in `tape`.
    pub fn substep_recorded(
        &mut self,
        state: &mut SimState,
        u_sub: &Vec6,
        dt_sub: Real,
        tape: &mut SubstepTape,
    ) -> Result<()> {
        let index = self.substeps_run;
        self.run_substep(state, u_sub, dt_sub, tape)
            .map_err(|e| e.at_substep(index))?;
        self.substeps_run += 1;
        Ok(())
    }

    fn run_substep(
        &mut self,
        state: &mut SimState,
        u_sub: &Vec6,
        dt: Real,
        tape: &mut SubstepTape,
    ) -> Result<()> {
        let n = state.particles.len();
        tape.index = self.substeps_run;
        tape.dt_sub = dt;
        tape.u_sub = *u_sub;
        tape.agent_before = Some(state.agent);
        tape.input.clone_from(&state.particles);

        // Grid reset.
        self.grid.reset();

        // Deformation update, SVD and return mapping.
        tape.f_tmp.clear();
        tape.svd.clear();
        tape.con.clear();
        tape.stress.clear();
        let particles = &mut state.particles;
        let material = &self.material;
        let updated: Vec<_> = particles
            .f
            .par_iter()
            .zip(particles.c.par_iter())
            .map(|(f, c)| {
                let f_tmp = deform_update(f, c, dt);
                let svd = svd3(&f_tmp);
                constitutive(&svd, material).map(|out| (f_tmp, svd, out))
            })
            .collect();
        for (p, r) in updated.into_iter().enumerate() {
            let (f_tmp, svd, out) = r.map_err(|e| match e {
                Error::Simulation { reason, .. } => fault(format!("particle {p}: {reason}")),
                other => other,
            })?;
            tape.f_tmp.push(f_tmp);
            tape.svd.push(svd);
            tape.con.push(out.record);
            tape.stress.push(out.stress);
            particles.f[p] = out.f_new;
        }

        // Scatter (uses the pre-substep x, v and C held in the tape).
        tape.stencils = stencils(&tape.input.x, self.grid.dims, self.grid.dx)?;
        p2g_with(
            &mut self.grid,
            &tape.input,
            &tape.stress,
            &tape.stencils,
            dt,
        );
        tape.active.clone_from(&self.grid.active);
        tape.node_mass.clear();
        tape.node_v_p2g.clear();
        for &idx in &self.grid.active {
            tape.node_mass.push(self.grid.mass[idx]);
            tape.node_v_p2g.push(self.grid.velocity[idx]);
        }

        let agent = move_agent(&state.agent, u_sub, dt);
        tape.agent_after = Some(agent);
        state.agent = agent;

        grid_gravity(&mut self.grid, &self.params.gravity_v(), dt);
        let bodies = self.bodies(&agent);
        let (band, friction) = (self.grid_band(), self.friction());
        tape.node_contacts = grid_collide(&mut self.grid, &bodies, &agent, band, friction);
        tape.node_v_final.clear();
        tape.node_v_final
            .extend(self.grid.active.iter().map(|&idx| self.grid.velocity[idx]));

        tape.v_g2p.resize(n, Vec3::zeros());
        g2p(
            &self.grid,
            &tape.stencils,
            &mut tape.v_g2p,
            &mut particles.c,
        );

        particles.v.copy_from_slice(&tape.v_g2p);
        tape.particle_contacts = particle_collide(
            &tape.input.x,
            &mut particles.v,
            &bodies,
            &agent,
            self.particle_band(),
            self.friction(),
        );
        tape.v_collided.clone_from(&particles.v);

        let (lo, hi) = self.clamp_bounds();
        tape.clamped = advect(&mut particles.x, &mut particles.v, dt, &lo, &hi);
        Ok(())
    }

    /// One control step: `n_sub` substeps of `dt / n_sub` with `u / n_sub` each.
    pub fn step(&mut self, state: &mut SimState, u: &Vec6) -> Result<()> {
        let n_sub = self.params.n_sub;
        let u_sub = u / n_sub as Real;
        let dt_sub = self.params.dt_sub();
        for _ in 0..n_sub {
            self.substep(state, &u_sub, dt_sub)?;
        }
        Ok(())
    }

    /// Gravity-only steps, zeroing velocities after each one, to bring a
    /// freshly seeded bed to rest.
    pub fn settle(&mut self, state: &mut SimState, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step(state, &Vec6::zeros())?;
            for v in state.particles.v.iter_mut() {
                *v = Vec3::zeros();
            }
            for c in state.particles.c.iter_mut() {
                *c = Mat3::zeros();
            }
        }
        Ok(())
    }
}
