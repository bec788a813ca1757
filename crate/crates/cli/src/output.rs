//! Run artifacts. Everything is written into a staging directory beside the
//! destination and moved into place in one rename when the run ends.

use std::fs;
use std::path::{Path, PathBuf};

use granugrad::math::Real;
use granugrad::skills::{SkillParams, PARAM_NAMES};
use granugrad::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.csv";
pub const RESULT: &str = "result.toml";
pub const SUMMARY: &str = "summary.toml";
pub const GRADCHECK: &str = "gradcheck.csv";
pub const FRAMES: &str = "frames";
pub const TRACES: &str = "traces";
pub const ERROR: &str = "error.txt";

pub struct OutputDir {
    dest: PathBuf,
    staging: PathBuf,
}

impl OutputDir {
    /// Refuses an existing destination unless `force`; the old contents are
    /// only replaced by [`OutputDir::commit`].
    pub fn prepare(dest: &Path, force: bool) -> Result<OutputDir> {
        if dest.exists() && !force {
            return Err(Error::Config(format!(
                "output directory {} already exists (use --force to replace it)",
                dest.display()
            )));
        }
        let name = dest
            .file_name()
            .ok_or_else(|| {
                Error::Config(format!(
                    "output path {} has no final component",
                    dest.display()
                ))
            })?
            .to_string_lossy()
            .into_owned();
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(OutputDir {
            dest: dest.to_path_buf(),
            staging,
        })
    }

    /// Where files go while the run is in progress.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    /// Creates and returns a subdirectory of the staging area.
    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.staging.join(name);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    /// Moves the staged files to the destination, replacing whatever was there.
    pub fn commit(self) -> Result<PathBuf> {
        let old = self.dest.with_file_name(format!(
            ".{}.old-{}",
            self.dest
                .file_name()
                .expect("checked in prepare")
                .to_string_lossy(),
            std::process::id()
        ));
        let had_old = self.dest.exists();
        if had_old {
            fs::rename(&self.dest, &old).map_err(|e| Error::io(&self.dest, e))?;
        }
        fs::rename(&self.staging, &self.dest).map_err(|e| Error::io(&self.dest, e))?;
        if had_old {
            let removed = if old.is_dir() {
                fs::remove_dir_all(&old)
            } else {
                fs::remove_file(&old)
            };
            removed.map_err(|e| Error::io(&old, e))?;
        }
        Ok(self.dest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.scene.seed,
            config: config.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest always serialises")
    }
}

/// One value per skill parameter, keyed by name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labelled {
    pub scoop_depth: Real,
    pub scoop_angle: Real,
    pub lift_height: Real,
    pub transport_disp: Real,
    pub pour_angle: Real,
}

impl From<[Real; 5]> for Labelled {
    fn from(v: [Real; 5]) -> Self {
        Labelled {
            scoop_depth: v[0],
            scoop_angle: v[1],
            lift_height: v[2],
            transport_disp: v[3],
            pour_angle: v[4],
        }
    }
}

impl From<Labelled> for [Real; 5] {
    fn from(l: Labelled) -> Self {
        [
            l.scoop_depth,
            l.scoop_angle,
            l.lift_height,
            l.transport_disp,
            l.pour_angle,
        ]
    }
}

/// Best parameters of a run, normalised and in physical units (m, rad).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub method: String,
    pub loss: Real,
    /// Epoch (or rollout) at which the best loss was recorded.
    pub index: usize,
    pub theta: Labelled,
    pub physical: Labelled,
}

impl ResultFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("result always serialises")
    }

    pub fn read(path: &Path) -> Result<ResultFile> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read result file {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn theta(&self) -> SkillParams {
        SkillParams(self.theta.into())
    }
}

/// Single-rollout report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub loss: Real,
    pub indicator: usize,
    pub transported: usize,
    pub steps: usize,
    pub theta: Labelled,
}

impl Summary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary always serialises")
    }
}

/// Parses `a,b,c,d,e` into parameters, checking the bounds.
pub fn parse_theta(s: &str) -> Result<SkillParams> {
    let vals: Vec<Real> = s
        .split(',')
        .map(|v| v.trim().parse::<Real>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("theta `{s}`: {e}")))?;
    let arr: [Real; 5] = vals.try_into().map_err(|_| {
        Error::Config(format!(
            "theta `{s}` needs {} comma-separated values",
            PARAM_NAMES.len()
        ))
    })?;
    let theta = SkillParams(arr);
    theta.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(theta)
}
