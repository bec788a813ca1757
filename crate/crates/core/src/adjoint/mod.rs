//! Reverse-mode differentiation of whole rollouts.
//!
//! The forward pass stores [`Checkpoint`]s; the backward pass restores each
//! checkpoint, replays its substeps with recording switched on and walks the
//! resulting tapes in reverse through the stage kernels in [`kernels`].

pub mod kernels;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Real, Vec3, Vec6};
use crate::mpm::{SimState, Simulator, SubstepTape};
use crate::objective::{task_loss, task_loss_backward};
use crate::skills::{map_skills_backward, ControlSequence, SkillParams, PARAM_NAMES};
use crate::task::Task;

use kernels::{
    advect_backward, constitutive_backward, contact_backward, deform_backward, g2p_backward,
    move_agent_backward, p2g_backward,
};
pub use kernels::{GridAdjoint, PoseGrad};

/// How much forward state is kept for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// A full state copy before every substep.
    #[default]
    Substep,
    /// One copy per control step; the step's substeps are replayed together.
    Step,
}

/// State entering one substep (or, in step mode, one control step).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub substep: usize,
    pub step: usize,
    pub state: SimState,
    pub u_sub: Vec6,
}

/// Adjoint of a full simulation state.
#[derive(Clone, Debug, Default)]
pub struct StateGrad {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub f: Vec<Mat3>,
    pub c: Vec<Mat3>,
    pub pose: PoseGrad,
}

impl StateGrad {
    pub fn zeros(n: usize) -> Self {
        StateGrad {
            x: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            f: vec![Mat3::zeros(); n],
            c: vec![Mat3::zeros(); n],
            pose: PoseGrad::default(),
        }
    }
}

/// One row of the gradient trace: largest adjoint magnitude after a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub substep: usize,
    pub stage: &'static str,
    pub max_abs: Real,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "substep\tstage\tmax_abs").map_err(io)?;
    for r in rows {
        writeln!(out, "{}\t{}\t{:e}", r.substep, r.stage, r.max_abs).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reusable buffers for [`substep_backward`].
#[derive(Clone, Debug)]
pub struct Workspace {
    pub grid: GridAdjoint,
    g_vcol: Vec<Vec3>,
    g_stress: Vec<Mat3>,
}

impl Workspace {
    pub fn new(sim: &Simulator) -> Self {
        Workspace {
            grid: GridAdjoint::new(sim.grid.dims, sim.grid.dx),
            g_vcol: Vec::new(),
            g_stress: Vec::new(),
        }
    }
}

fn max_abs3(v: &[Vec3]) -> Real {
    v.iter().map(|a| a.amax()).fold(0.0, Real::max)
}

fn max_abs33(v: &[Mat3]) -> Real {
    v.iter().map(|a| a.amax()).fold(0.0, Real::max)
}

struct Stages<'a> {
    substep: usize,
    trace: Option<&'a mut Vec<TraceRow>>,
}

impl Stages<'_> {
    /// Faults on a non-finite adjoint and optionally logs its magnitude.
    fn check(&mut self, stage: &'static str, max_abs: Real) -> Result<()> {
        if !max_abs.is_finite() {
            return Err(Error::Gradient {
                substep: self.substep,
                stage,
            });
        }
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(TraceRow {
                substep: self.substep,
                stage,
                max_abs,
            });
        }
        Ok(())
    }
}

/// Maps the adjoint of a substep's output state to that of its input state
/// (in place) and returns the adjoint of the control increment.
pub fn substep_backward(
    sim: &Simulator,
    tape: &SubstepTape,
    g: &mut StateGrad,
    ws: &mut Workspace,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec6> {
    let n = tape.input.len();
    let dt = tape.dt_sub;
    let agent = tape.agent_after();
    let mut stages = Stages {
        substep: tape.index,
        trace,
    };
    let mut g_u = Vec6::zeros();

    // advect
    ws.g_vcol.resize(n, Vec3::zeros());
    g.x.par_iter_mut()
        .zip(ws.g_vcol.par_iter_mut())
        .zip(g.v.par_iter())
        .zip(tape.clamped.par_iter())
        .for_each(|(((gx, gvcol), gv), clamped)| {
            let (x_in, v_in) = advect_backward(clamped, dt, gx, gv);
            *gx = x_in;
            *gvcol = v_in;
        });
    stages.check("advect", max_abs3(&g.x).max(max_abs3(&ws.g_vcol)))?;

    // particle_collide
    for (p, rec) in tape.particle_contacts.iter().rev() {
        let cg = contact_backward(rec, agent, dt, &ws.g_vcol[*p]);
        ws.g_vcol[*p] = cg.v_in;
        g.x[*p] += cg.point;
        g.pose += cg.pose;
        g_u += cg.u_sub;
    }
    stages.check(
        "particle_collide",
        max_abs3(&ws.g_vcol).max(g.pose.position.amax()),
    )?;

    // g2p
    ws.grid.load(
        &tape.active,
        &tape.node_mass,
        &tape.node_v_p2g,
        &tape.node_v_final,
    );
    g2p_backward(
        &mut ws.grid,
        &tape.input.x,
        &tape.stencils,
        &ws.g_vcol,
        &g.c,
        &mut g.x,
    );
    for c in g.c.iter_mut() {
        *c = Mat3::zeros();
    }
    stages.check("g2p", ws.grid.max_abs_grad().max(max_abs3(&g.x)))?;

    // grid_collide
    for (slot, rec) in tape.node_contacts.iter().rev() {
        let idx = tape.active[*slot];
        let cg = contact_backward(rec, agent, dt, &ws.grid.grad[idx]);
        ws.grid.grad[idx] = cg.v_in;
        g.pose += cg.pose;
        g_u += cg.u_sub;
    }
    stages.check("grid_collide", ws.grid.max_abs_grad())?;

    // grid_gravity adds a constant: its adjoint is the identity.
    stages.check("grid_gravity", ws.grid.max_abs_grad())?;

    // move_agent
    let (before, gu_move) = move_agent_backward(&tape.u_sub, &g.pose);
    g.pose = before;
    g_u += gu_move;
    stages.check("move_agent", g_u.amax().max(g.pose.rotation.amax()))?;

    // p2g
    ws.g_stress.resize(n, Mat3::zeros());
    p2g_backward(
        &ws.grid,
        &tape.input,
        &tape.stress,
        &tape.stencils,
        dt,
        &mut g.x,
        &mut g.v,
        &mut g.c,
        &mut ws.g_stress,
    );
    stages.check(
        "p2g",
        max_abs3(&g.x)
            .max(max_abs3(&g.v))
            .max(max_abs33(&ws.g_stress)),
    )?;

    // constitutive, then svd3, leaving F̄_tmp in g.f
    let svd_grads: Vec<_> = (0..n)
        .into_par_iter()
        .map(|p| {
            constitutive_backward(
                &tape.svd[p],
                &tape.con[p],
                &sim.material,
                &g.f[p],
                &ws.g_stress[p],
            )
        })
        .collect();
    let worst = svd_grads
        .iter()
        .map(|s| s.u.amax().max(s.s.amax()).max(s.v.amax()))
        .fold(0.0, Real::max);
    stages.check("constitutive", worst)?;
    g.f.par_iter_mut()
        .enumerate()
        .for_each(|(p, gf)| *gf = crate::math::svd3_backward(&tape.svd[p], &svd_grads[p]));
    stages.check("svd3", max_abs33(&g.f))?;

    // deform_update
    g.f.par_iter_mut()
        .zip(g.c.par_iter_mut())
        .enumerate()
        .for_each(|(p, (gf, gc))| {
            let (f_in, c_in) = deform_backward(&tape.input.f[p], &tape.input.c[p], dt, gf);
            *gf = f_in;
            *gc += c_in;
        });
    stages.check("deform_update", max_abs33(&g.f).max(max_abs33(&g.c)))?;
    Ok(g_u)
}

/// Result of a forward rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Per-step controls actually applied.
    pub controls: Vec<Vec6>,
    pub skill_controls: Option<ControlSequence>,
    pub final_state: SimState,
    pub loss: Real,
    pub checkpoints: Vec<Checkpoint>,
}

/// Runs the control sequence from the task's initial state. `on_step` sees
/// the state after every control step (index starting at 1).
pub fn rollout_controls(
    task: &mut Task,
    controls: &[Vec6],
    record: bool,
    mut on_step: impl FnMut(usize, &SimState) -> Result<()>,
) -> Result<Rollout> {
    let mut state = task.initial.clone();
    let n_sub = task.sim.params.n_sub;
    let dt_sub = task.sim.params.dt_sub();
    let mode = task.checkpoint;
    task.sim.set_substep_counter(0);
    let mut checkpoints = Vec::new();
    for (step, u) in controls.iter().enumerate() {
        let u_sub = u / n_sub as Real;
        for k in 0..n_sub {
            if record && (mode == CheckpointMode::Substep || k == 0) {
                checkpoints.push(Checkpoint {
                    substep: task.sim.substep_counter(),
                    step,
                    state: state.clone(),
                    u_sub,
                });
            }
            task.sim.substep(&mut state, &u_sub, dt_sub)?;
        }
        on_step(step + 1, &state)?;
    }
    let loss = task.objective.scale
        * task_loss(
            &state.particles.x,
            &task.scene().target_point,
            task.objective.loss,
        );
    Ok(Rollout {
        controls: controls.to_vec(),
        skill_controls: None,
        final_state: state,
        loss,
        checkpoints,
    })
}

/// Maps `theta` to controls and runs them; see [`rollout_controls`].
pub fn rollout_forward(task: &mut Task, theta: &SkillParams, record: bool) -> Result<Rollout> {
    rollout_forward_with(task, theta, record, |_, _| Ok(()))
}

pub fn rollout_forward_with(
    task: &mut Task,
    theta: &SkillParams,
    record: bool,
    on_step: impl FnMut(usize, &SimState) -> Result<()>,
) -> Result<Rollout> {
    let seq = task.controls(theta)?;
    let mut out = rollout_controls(task, &seq.steps, record, on_step)?;
    out.skill_controls = Some(seq);
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    pub trace: bool,
    /// Test hook: double the pose-to-control adjoint so gradient checks must fail.
    pub corrupt: bool,
}

#[derive(Clone, Debug)]
pub struct Gradient {
    /// `dL/dΘ`; zero when the rollout did not come from skills.
    pub theta: [Real; 5],
    /// `dL/du_i` for every control step.
    pub controls: Vec<Vec6>,
    pub trace: Vec<TraceRow>,
}

/// Reverse pass over a recorded rollout.
pub fn rollout_backward(
    task: &mut Task,
    rollout: &Rollout,
    opts: BackwardOptions,
) -> Result<Gradient> {
    if rollout.checkpoints.is_empty() && !rollout.controls.is_empty() {
        return Err(Error::Contract(
            "rollout_backward needs a recorded forward pass".into(),
        ));
    }
    let n = rollout.final_state.particles.len();
    let n_sub = task.sim.params.n_sub;
    let dt_sub = task.sim.params.dt_sub();
    let scale = task.objective.scale;

    let mut g = StateGrad::zeros(n);
    for (gx, d) in g.x.iter_mut().zip(task_loss_backward(
        &rollout.final_state.particles.x,
        &task.scene().target_point,
        task.objective.loss,
    )) {
        *gx = d * scale;
    }

    let mut g_controls = vec![Vec6::zeros(); rollout.controls.len()];
    let mut trace = Vec::new();
    let mut ws = Workspace::new(&task.sim);
    let seg_len = match task.checkpoint {
        CheckpointMode::Substep => 1,
        CheckpointMode::Step => n_sub,
    };
    let mut tapes: Vec<SubstepTape> = (0..seg_len).map(|_| SubstepTape::default()).collect();

    for cp in rollout.checkpoints.iter().rev() {
        let mut state = cp.state.clone();
        task.sim.set_substep_counter(cp.substep);
        for tape in tapes.iter_mut() {
            task.sim
                .substep_recorded(&mut state, &cp.u_sub, dt_sub, tape)?;
        }
        for tape in tapes.iter().rev() {
            let mut g_u = substep_backward(
                &task.sim,
                tape,
                &mut g,
                &mut ws,
                opts.trace.then_some(&mut trace),
            )?;
            if opts.corrupt {
                let (_, gu_move) = move_agent_backward(&tape.u_sub, &g.pose);
                g_u += gu_move;
            }
            g_controls[cp.step] += g_u / n_sub as Real;
        }
    }

    let theta = match &rollout.skill_controls {
        Some(seq) => map_skills_backward(seq, &g_controls),
        None => [0.0; 5],
    };
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Gradient {
            substep: 0,
            stage: "map_skills",
        });
    }
    Ok(Gradient {
        theta,
        controls: g_controls,
        trace,
    })
}

/// Loss and gradient at `theta` in one call.
pub fn value_and_grad(
    task: &mut Task,
    theta: &SkillParams,
    opts: BackwardOptions,
) -> Result<(Rollout, Gradient)> {
    let rollout = rollout_forward(task, theta, true)?;
    let grad = rollout_backward(task, &rollout, opts)?;
    Ok((rollout, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub analytic: Real,
    pub numeric: Real,
    /// `|a - n| / max(|a|, |n|)`, zero when both vanish.
    pub rel_error: Real,
    pub abs_error: Real,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: Real,
    pub h: Real,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> Real {
        self.rows.iter().map(|r| r.rel_error).fold(0.0, Real::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect()
    }
}

/// Relative tolerance of [`grad_check`].
pub const GRAD_CHECK_REL_TOL: Real = 0.02;
/// Components whose finite-difference magnitude is below this are compared absolutely.
pub const GRAD_CHECK_SMALL: Real = 1e-4;
pub const GRAD_CHECK_ABS_TOL: Real = 1e-6;

/// Compares the adjoint gradient with central differences of step `h` in
/// every normalised component.
pub fn grad_check(
    task: &mut Task,
    theta: &SkillParams,
    h: Real,
    opts: BackwardOptions,
) -> Result<GradCheckReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    for i in 0..5 {
        let t = theta.0[i];
        if t - h < -1.0 || t + h > 1.0 {
            return Err(Error::Contract(format!(
                "{} = {t} leaves [-1, 1] when perturbed by {h}",
                PARAM_NAMES[i]
            )));
        }
    }
    let (rollout, grad) = value_and_grad(task, theta, opts)?;
    let mut rows = Vec::with_capacity(5);
    for i in 0..5 {
        let mut plus = *theta;
        plus.0[i] += h;
        let mut minus = *theta;
        minus.0[i] -= h;
        let lp = rollout_forward(task, &plus, false)?.loss;
        let lm = rollout_forward(task, &minus, false)?.loss;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad.theta[i];
        let abs_error = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        let rel_error = if denom == 0.0 { 0.0 } else { abs_error / denom };
        let passed = if numeric.abs() < GRAD_CHECK_SMALL {
            abs_error < GRAD_CHECK_ABS_TOL || rel_error < GRAD_CHECK_REL_TOL
        } else {
            rel_error < GRAD_CHECK_REL_TOL
        };
        rows.push(GradCheckRow {
            name: PARAM_NAMES[i],
            analytic,
            numeric,
            rel_error,
            abs_error,
            passed,
        });
    }
    Ok(GradCheckReport {
        loss: rollout.loss,
        h,
        rows,
    })
}
