//! A ready-to-roll transport task: settled scene, simulator and skill mapping.

use crate::adjoint::CheckpointMode;
use crate::error::Result;
use crate::math::Real;
use crate::mpm::{MaterialParams, SimParams, SimState, Simulator};
use crate::objective::{indicator, ObjectiveConfig};
use crate::scene::{build_scene, count_in_target, Scene, SceneConfig};
use crate::skills::{map_skills, ControlSequence, SkillParams, SkillRanges};

#[derive(Clone, Debug)]
pub struct Task {
    pub sim: Simulator,
    /// State after warm-up; every rollout starts here.
    pub initial: SimState,
    /// Skill ranges resolved against the scene.
    pub ranges: SkillRanges,
    pub objective: ObjectiveConfig,
    pub checkpoint: CheckpointMode,
}

impl Task {
    /// Builds the scene and settles the bed for `scene.warmup_steps` steps.
    pub fn new(
        scene: &SceneConfig,
        material: &MaterialParams,
        sim: &SimParams,
        ranges: &SkillRanges,
        objective: &ObjectiveConfig,
        checkpoint: CheckpointMode,
    ) -> Result<Task> {
        ranges.validate()?;
        let (scene, particles) = build_scene(scene, material)?;
        let agent = scene.initial_agent;
        let ranges = ranges.resolve(&scene);
        let warmup = scene.config.warmup_steps;
        let mut sim = Simulator::new(scene, *material, *sim)?;
        let mut initial = SimState { particles, agent };
        sim.settle(&mut initial, warmup)?;
        sim.set_substep_counter(0);
        Ok(Task {
            sim,
            initial,
            ranges,
            objective: *objective,
            checkpoint,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.sim.scene
    }

    pub fn controls(&self, theta: &SkillParams) -> Result<ControlSequence> {
        map_skills(theta, &self.ranges, self.scene(), self.sim.params.dt)
    }

    pub fn target_value(&self) -> usize {
        self.objective
            .target_value
            .unwrap_or(self.initial.particles.len())
    }

    pub fn transported(&self, state: &SimState) -> usize {
        count_in_target(&state.particles, &self.scene().config)
    }

    pub fn indicator(&self, state: &SimState) -> usize {
        indicator(&state.particles, &self.scene().config, self.target_value())
    }

    pub fn dt(&self) -> Real {
        self.sim.params.dt
    }
}
