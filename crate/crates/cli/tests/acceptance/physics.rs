//! Conservation and statics of the forward simulator.

use granugrad::math::{Mat3, Pose, Real, Vec3, Vec6};
use granugrad::mpm::{ParticleState, SimState, Simulator};
use granugrad::scene::AgentState;
use granugrad::skills::SkillParams;
use granugrad_cli::commands::task;
use nalgebra::UnitQuaternion;

use crate::common::{load_config, mat3, rng, vec3};
use crate::Outcome;

fn mass_error(sim: &Simulator, particles: &ParticleState) -> Real {
    let want = particles.total_mass();
    (sim.grid.total_mass() - want).abs() / want
}

/// A stressed, moving blob far from every body with gravity off.
fn momentum_run() -> Result<(Real, Real), String> {
    let cfg = load_config("small.toml", &["sim.gravity=[0.0, 0.0, 0.0]"]);
    let mut t = task(&cfg).map_err(|e| e.to_string())?;
    t.sim.scene.static_bodies.clear();

    let mut r = rng(11);
    let centre = Vec3::repeat(0.125);
    let positions: Vec<Vec3> = (0..400).map(|_| centre + vec3(&mut r, 0.02)).collect();
    let volume = t.initial.particles.volume0;
    let mut particles = ParticleState::new(positions, cfg.material.density * volume, volume);
    let drift = Vec3::new(0.1, -0.05, 0.08);
    for p in 0..particles.len() {
        particles.v[p] = drift + vec3(&mut r, 0.05);
        particles.c[p] = mat3(&mut r, 1.0);
        particles.f[p] = Mat3::identity() + mat3(&mut r, 0.01);
    }
    let far = Pose {
        position: Vec3::repeat(10.0),
        orientation: UnitQuaternion::identity(),
    };
    let mut state = SimState {
        particles,
        agent: AgentState::at_rest(far),
    };

    let p0 = state.particles.momentum();
    let dt_sub = cfg.sim.dt_sub();
    let (mut worst_mass, mut worst_momentum): (Real, Real) = (0.0, 0.0);
    for _ in 0..100 {
        t.sim
            .substep(&mut state, &Vec6::zeros(), dt_sub)
            .map_err(|e| e.to_string())?;
        worst_mass = worst_mass.max(mass_error(&t.sim, &state.particles));
        worst_momentum = worst_momentum.max((state.particles.momentum() - p0).norm() / p0.norm());
    }
    Ok((worst_mass, worst_momentum))
}

/// 1000 substeps of the default scene following the skill trajectory at
/// `theta = 0`, then holding still.
fn scooping_run() -> Result<(Real, Real), String> {
    let cfg = load_config("default.toml", &[]);
    let mut t = task(&cfg).map_err(|e| e.to_string())?;
    let controls = t
        .controls(&SkillParams::zeros())
        .map_err(|e| e.to_string())?;
    let n_sub = cfg.sim.n_sub;
    let dt_sub = cfg.sim.dt_sub();
    let mut state = t.initial.clone();
    let (mut worst_mass, mut min_det): (Real, Real) = (0.0, Real::INFINITY);
    for k in 0..1000 {
        let u = controls
            .steps
            .get(k / n_sub)
            .copied()
            .unwrap_or_else(Vec6::zeros);
        t.sim
            .substep(&mut state, &(u / n_sub as Real), dt_sub)
            .map_err(|e| e.to_string())?;
        worst_mass = worst_mass.max(mass_error(&t.sim, &state.particles));
        for f in &state.particles.f {
            min_det = min_det.min(f.determinant());
        }
    }
    Ok((worst_mass, min_det))
}

pub fn conservation() -> Outcome {
    let (mass_a, momentum) = momentum_run()?;
    let (mass_b, min_det) = scooping_run()?;
    let mass = mass_a.max(mass_b);
    let line = format!(
        "p2g mass rel err {mass:.1e} (< 1e-9), momentum rel drift {momentum:.1e} over 100 substeps (< 1e-7), \
         min det F {min_det:.4} over 1000 scooping substeps (> 0)"
    );
    if mass < 1e-9 && momentum < 1e-7 && min_det > 0.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// The settled default bed, left alone for one simulated second.
pub fn pile_stability() -> Outcome {
    let cfg = load_config("default.toml", &[]);
    if cfg.material.friction_angle != 35.0 || cfg.material.cohesion != 0.0 {
        return Err("default material is not cohesionless 35 degree sand".into());
    }
    let mut t = task(&cfg).map_err(|e| e.to_string())?;
    let mut state = t.initial.clone();
    let steps = (1.0 / cfg.sim.dt).round() as usize;
    let dt_sub = cfg.sim.dt_sub();
    let mut worst: Real = 0.0;
    for _ in 0..steps * cfg.sim.n_sub {
        t.sim
            .substep(&mut state, &Vec6::zeros(), dt_sub)
            .map_err(|e| e.to_string())?;
        worst = worst.max(state.particles.max_speed());
    }
    let line = format!(
        "{} particles, max speed {worst:.2e} m/s over {steps} steps (< 1e-3)",
        state.particles.len()
    );
    if worst < 1e-3 {
        Ok(line)
    } else {
        Err(line)
    }
}
