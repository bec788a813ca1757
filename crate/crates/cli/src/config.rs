//! Run configuration: one TOML file with a section per subsystem, plus
//! dotted `key=value` overrides applied before deserialisation.

use std::path::{Path, PathBuf};

use granugrad::adjoint::CheckpointMode;
use granugrad::baseline::BaselineConfig;
use granugrad::math::Real;
use granugrad::mpm::{MaterialParams, SimParams};
use granugrad::objective::ObjectiveConfig;
use granugrad::optimizer::OptimConfig;
use granugrad::scene::SceneConfig;
use granugrad::skills::{SkillParams, SkillRanges};
use granugrad::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Zero wall-clock columns so repeated runs are byte-identical.
    pub deterministic: bool,
    pub scene: SceneConfig,
    pub material: MaterialParams,
    pub sim: SimParams,
    pub skills: SkillsSection,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub baseline: BaselineConfig,
    pub adjoint: AdjointSection,
    pub output: OutputSection,
    /// Replaces the simulation with a quadratic bowl; for exercising optimisers.
    pub surrogate: Option<Surrogate>,
}

/// Skill ranges and the optimiser's starting point, read from one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "toml::Table", into = "toml::Table")]
pub struct SkillsSection {
    pub initial_theta: [Real; 5],
    pub ranges: SkillRanges,
}

impl Default for SkillsSection {
    fn default() -> Self {
        SkillsSection {
            initial_theta: [0.0; 5],
            ranges: SkillRanges::default(),
        }
    }
}

impl TryFrom<toml::Table> for SkillsSection {
    type Error = String;

    fn try_from(mut t: toml::Table) -> std::result::Result<Self, String> {
        let initial_theta = match t.remove("initial_theta") {
            Some(v) => v.try_into().map_err(|e| format!("initial_theta: {e}"))?,
            None => [0.0; 5],
        };
        let ranges = t.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        Ok(SkillsSection {
            initial_theta,
            ranges,
        })
    }
}

impl From<SkillsSection> for toml::Table {
    fn from(s: SkillsSection) -> Self {
        let mut t = toml::Table::try_from(s.ranges).expect("skill ranges serialise to a table");
        let theta = toml::Value::try_from(s.initial_theta).expect("five reals serialise");
        t.insert("initial_theta".into(), theta);
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointSection {
    pub checkpoint: CheckpointMode,
}

impl Default for AdjointSection {
    fn default() -> Self {
        AdjointSection {
            checkpoint: CheckpointMode::Step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Frame dump cadence: epochs for optimise, control steps for rollout. 0 disables.
    pub dump_every: usize,
    /// Also write a text XYZ file beside every binary frame.
    pub xyz: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/latest"),
            dump_every: 0,
            xyz: false,
        }
    }
}

/// `loss = scale * |theta - minimiser|^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surrogate {
    pub minimiser: [Real; 5],
    #[serde(default = "one")]
    pub scale: Real,
}

fn one() -> Real {
    1.0
}

impl Surrogate {
    pub fn loss(&self, theta: &SkillParams) -> Real {
        self.scale
            * (0..5)
                .map(|i| (theta.0[i] - self.minimiser[i]).powi(2))
                .sum::<Real>()
    }

    pub fn grad(&self, theta: &SkillParams) -> [Real; 5] {
        std::array::from_fn(|i| 2.0 * self.scale * (theta.0[i] - self.minimiser[i]))
    }
}

impl RunConfig {
    /// Reads `path`, applies `overrides` and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.material.validate()?;
        self.sim.validate()?;
        self.skills.ranges.validate()?;
        self.optim.validate()?;
        self.baseline.validate()?;
        SkillParams(self.skills.initial_theta)
            .validate()
            .map_err(|e| Error::Config(format!("skills.initial_theta: {e}")))?;
        if let Some(s) = &self.surrogate {
            if s.minimiser.iter().any(|m| !(-1.0..=1.0).contains(m)) || !(s.scale > 0.0) {
                return Err(Error::Config(
                    "surrogate: minimiser must lie in [-1, 1] and scale be > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    pub fn initial_theta(&self) -> SkillParams {
        SkillParams(self.skills.initial_theta)
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
