//! RMSprop over the skill parameters with box projection and a two-phase
//! curriculum (scoop parameters first, then all five).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::objective::MetricRecord;
use crate::skills::SkillParams;

pub const LOWER: Real = -1.0;
pub const UPPER: Real = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: Real,
    pub rms_decay: Real,
    pub epsilon: Real,
    pub epochs: usize,
    /// First epoch at which all five parameters are updated.
    pub curriculum_switch_epoch: usize,
    /// Max gradient norm before the update.
    pub grad_clip: Real,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.05,
            rms_decay: 0.9,
            epsilon: 1e-8,
            epochs: 30,
            curriculum_switch_epoch: 15,
            grad_clip: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optim: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad("rms_decay must lie in (0, 1)");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if self.curriculum_switch_epoch == 0 || self.curriculum_switch_epoch > self.epochs.max(1) {
            return bad("curriculum_switch_epoch must lie in [1, epochs]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        Ok(())
    }
}

/// Parameters updated at `epoch`: the first three before the switch, all after.
pub fn curriculum_mask(epoch: usize, cfg: &OptimConfig) -> [bool; 5] {
    let all = epoch >= cfg.curriculum_switch_epoch;
    [true, true, true, all, all]
}

/// Rescales `g` to at most `max_norm`.
pub fn clip_norm(g: [Real; 5], max_norm: Real) -> [Real; 5] {
    let n = g.iter().map(|v| v * v).sum::<Real>().sqrt();
    if n > max_norm {
        g.map(|v| v * (max_norm / n))
    } else {
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub theta: SkillParams,
    /// Running mean of squared gradients.
    pub avg: [Real; 5],
    pub epoch: usize,
    pub history: Vec<MetricRecord>,
}

impl OptimizerState {
    pub fn new(theta: SkillParams) -> Self {
        OptimizerState {
            theta,
            avg: [0.0; 5],
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// One masked RMSprop update followed by projection onto `[-1, 1]`.
pub fn rmsprop_step(
    state: &mut OptimizerState,
    grad: &[Real; 5],
    mask: &[bool; 5],
    cfg: &OptimConfig,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimisation {
            epoch: state.epoch,
            reason: format!("non-finite gradient {grad:?}"),
        });
    }
    for i in 0..5 {
        if !mask[i] {
            continue;
        }
        let g = grad[i];
        state.avg[i] = cfg.rms_decay * state.avg[i] + (1.0 - cfg.rms_decay) * g * g;
        let th = state.theta.0[i] - cfg.learning_rate * g / (state.avg[i].sqrt() + cfg.epsilon);
        state.theta.0[i] = th.clamp(LOWER, UPPER);
    }
    Ok(())
}

/// What one epoch's rollout reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: Real,
    pub grad: [Real; 5],
    pub indicator: usize,
    pub transported: usize,
}

/// A differentiable loss over skill parameters.
pub trait Objective {
    fn evaluate(&mut self, theta: &SkillParams, epoch: usize) -> Result<Evaluation>;
}

impl<F: FnMut(&SkillParams, usize) -> Result<Evaluation>> Objective for F {
    fn evaluate(&mut self, theta: &SkillParams, epoch: usize) -> Result<Evaluation> {
        self(theta, epoch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimResult {
    /// Lowest-loss parameters seen (the initial ones when no epoch ran).
    pub best_theta: SkillParams,
    pub best_loss: Option<Real>,
    pub history: Vec<MetricRecord>,
    pub final_state: OptimizerState,
}

/// Runs `cfg.epochs` evaluate-clip-mask-update rounds. `on_epoch` sees each
/// record as soon as it exists.
pub fn optimise(
    objective: &mut impl Objective,
    cfg: &OptimConfig,
    initial: SkillParams,
    mut on_epoch: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<OptimResult> {
    cfg.validate()?;
    initial.validate()?;
    let mut state = OptimizerState::new(initial);
    let mut best: Option<(Real, SkillParams)> = None;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let start = Instant::now();
        let eval = objective
            .evaluate(&state.theta, epoch)
            .map_err(|e| e.at_epoch(epoch))?;
        let record = MetricRecord {
            epoch,
            loss: eval.loss,
            indicator: eval.indicator,
            transported: eval.transported,
            theta: state.theta.0,
            seconds: start.elapsed().as_secs_f64(),
        };
        if best.is_none_or(|(l, _)| eval.loss < l) {
            best = Some((eval.loss, state.theta));
        }
        on_epoch(&record)?;
        state.history.push(record);
        let grad = clip_norm(eval.grad, cfg.grad_clip);
        rmsprop_step(&mut state, &grad, &curriculum_mask(epoch, cfg), cfg)?;
    }
    Ok(OptimResult {
        best_theta: best.map_or(initial, |b| b.1),
        best_loss: best.map(|b| b.0),
        history: state.history.clone(),
        final_state: state,
    })
}
