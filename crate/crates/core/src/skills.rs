//! Five-parameter skill space and its mapping to per-step 6-DoF controls.
//!
//! A trajectory is five straight segments: descend, scoop (tilt the lip up),
//! lift, transport toward the target container and pour (tilt the lip down).
//! Each segment moves at a fixed speed, so its step count is the rounded
//! ratio of displacement to per-step travel; the increments are uniform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Vec3, Vec6};
use crate::scene::Scene;

pub const PARAM_NAMES: [&str; 5] = [
    "scoop_depth",
    "scoop_angle",
    "lift_height",
    "transport_disp",
    "pour_angle",
];

/// Normalised skill parameters, each in `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillParams(pub [Real; 5]);

impl SkillParams {
    pub fn zeros() -> Self {
        SkillParams([0.0; 5])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.0) {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} = {v} is outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Physical bounds of every parameter and the fixed segment speeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillRanges {
    /// m
    pub scoop_depth: [Real; 2],
    /// rad
    pub scoop_angle: [Real; 2],
    /// m
    pub lift_height: [Real; 2],
    /// m, or multiples of the container centre distance when `transport_relative`.
    pub transport_disp: [Real; 2],
    pub transport_relative: bool,
    /// rad
    pub pour_angle: [Real; 2],
    /// m/s
    pub v_lin: Real,
    /// rad/s
    pub v_ang: Real,
    /// Zero-control steps appended after pouring.
    pub hold_steps: usize,
}

impl Default for SkillRanges {
    fn default() -> Self {
        SkillRanges {
            scoop_depth: [0.005, 0.05],
            scoop_angle: [0.2, 1.2],
            lift_height: [0.05, 0.15],
            transport_disp: [0.8, 1.2],
            transport_relative: true,
            pour_angle: [0.5, 2.0],
            v_lin: 0.5,
            v_ang: 4.0,
            hold_steps: 10,
        }
    }
}

impl SkillRanges {
    pub fn bounds(&self) -> [[Real; 2]; 5] {
        [
            self.scoop_depth,
            self.scoop_angle,
            self.lift_height,
            self.transport_disp,
            self.pour_angle,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in PARAM_NAMES.iter().zip(self.bounds()) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!(
                    "skills: {name} range needs min < max"
                )));
            }
        }
        if !(self.v_lin > 0.0) || !(self.v_ang > 0.0) {
            return Err(Error::Config("skills: v_lin and v_ang must be > 0".into()));
        }
        Ok(())
    }

    /// Absolute ranges for `scene`.
    pub fn resolve(&self, scene: &Scene) -> SkillRanges {
        let mut out = *self;
        if self.transport_relative {
            let d = scene.container_distance();
            out.transport_disp = [self.transport_disp[0] * d, self.transport_disp[1] * d];
            out.transport_relative = false;
        }
        out
    }
}

/// `min + (theta + 1) / 2 * (max - min)` per component.
pub fn denormalise(theta: &SkillParams, ranges: &SkillRanges) -> Result<[Real; 5]> {
    theta.validate()?;
    let b = ranges.bounds();
    Ok(std::array::from_fn(|i| {
        b[i][0] + 0.5 * (theta.0[i] + 1.0) * (b[i][1] - b[i][0])
    }))
}

/// `max(1, round(|displacement| / (velocity dt)))`.
pub fn segment_steps(displacement: Real, velocity: Real, dt: Real) -> usize {
    ((displacement.abs() / (velocity * dt)).round() as usize).max(1)
}

/// One segment of a control sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Physical parameter value driving the segment.
    pub value: Real,
    /// Displacement per unit of `value`.
    pub direction: Vec6,
}

/// Per-step controls and the segments they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence {
    pub steps: Vec<Vec6>,
    pub segments: [Segment; 5],
    /// Half range width of every parameter: `d(value)/d(theta)`.
    pub scale: [Real; 5],
}

impl ControlSequence {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

fn translation(d: Vec3) -> Vec6 {
    Vec6::new(d.x, d.y, d.z, 0.0, 0.0, 0.0)
}

fn rotation(d: Vec3) -> Vec6 {
    Vec6::new(0.0, 0.0, 0.0, d.x, d.y, d.z)
}

/// Unit horizontal direction from the scoop centre toward the target box centre.
pub fn transport_direction(scene: &Scene) -> Vec3 {
    let pose = scene.initial_agent.pose;
    let centre =
        pose.position + pose.orientation * Vec3::new(0.5 * scene.config.scoop.length, 0.0, 0.0);
    let mut d = scene.config.target_box.center() - centre;
    d.z = 0.0;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vec3::x()
    }
}

/// Rotation axis of the scoop and pour segments: the scoop's lateral axis,
/// oriented so positive angles raise the open lip.
pub fn tilt_axis(scene: &Scene) -> Vec3 {
    scene.initial_agent.pose.orientation * -Vec3::y()
}

/// Builds the control sequence for `theta`. `ranges` must already be resolved
/// against `scene`.
pub fn map_skills(
    theta: &SkillParams,
    ranges: &SkillRanges,
    scene: &Scene,
    dt: Real,
) -> Result<ControlSequence> {
    let phys = denormalise(theta, ranges)?;
    let axis = tilt_axis(scene);
    let directions = [
        translation(-Vec3::z()),
        rotation(axis),
        translation(Vec3::z()),
        translation(transport_direction(scene)),
        rotation(-axis),
    ];
    let speeds = [
        ranges.v_lin,
        ranges.v_ang,
        ranges.v_lin,
        ranges.v_lin,
        ranges.v_ang,
    ];
    let b = ranges.bounds();

    let mut steps = Vec::new();
    let segments = std::array::from_fn(|k| {
        let n = segment_steps(phys[k], speeds[k], dt);
        let inc = directions[k] * (phys[k] / n as Real);
        let start = steps.len();
        steps.extend(std::iter::repeat_n(inc, n));
        Segment {
            start,
            len: n,
            value: phys[k],
            direction: directions[k],
        }
    });
    steps.extend(std::iter::repeat_n(Vec6::zeros(), ranges.hold_steps));
    Ok(ControlSequence {
        steps,
        segments,
        scale: std::array::from_fn(|k| 0.5 * (b[k][1] - b[k][0])),
    })
}

/// Chains per-step control adjoints back to `theta` with step counts held fixed.
pub fn map_skills_backward(seq: &ControlSequence, grad_u: &[Vec6]) -> [Real; 5] {
    std::array::from_fn(|k| {
        let s = &seq.segments[k];
        let sum: Real = grad_u[s.start..s.start + s.len]
            .iter()
            .map(|g| g.dot(&s.direction))
            .sum();
        sum / s.len as Real * seq.scale[k]
    })
}
