//! Task loss over final particle positions and the transport indicator.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Vec3};
use crate::mpm::ParticleState;
use crate::scene::{count_in_target, SceneConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sum over particles of `|p - target|_1`.
    #[default]
    L1,
    /// Sum over particles of `|p - target|_2`.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub loss: LossKind,
    /// Indicator reference count; the particle count when absent.
    pub target_value: Option<usize>,
    /// Constant factor applied to the loss.
    pub scale: Real,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            loss: LossKind::L1,
            target_value: None,
            scale: 1.0,
        }
    }
}

pub fn task_loss(x: &[Vec3], target: &Vec3, kind: LossKind) -> Real {
    x.iter()
        .map(|p| {
            let d = p - target;
            match kind {
                LossKind::L1 => d.abs().sum(),
                LossKind::Euclidean => d.norm(),
            }
        })
        .sum()
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-particle gradient of [`task_loss`]; zero at the kinks.
pub fn task_loss_backward(x: &[Vec3], target: &Vec3, kind: LossKind) -> Vec<Vec3> {
    x.iter()
        .map(|p| {
            let d = p - target;
            match kind {
                LossKind::L1 => d.map(sign),
                LossKind::Euclidean => {
                    let n = d.norm();
                    if n > 0.0 {
                        d / n
                    } else {
                        Vec3::zeros()
                    }
                }
            }
        })
        .collect()
}

/// `target_value - transported`, floored at zero.
pub fn indicator(particles: &ParticleState, cfg: &SceneConfig, target_value: usize) -> usize {
    target_value.saturating_sub(count_in_target(particles, cfg))
}

/// One row of a metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub loss: Real,
    pub indicator: usize,
    pub transported: usize,
    pub theta: [Real; 5],
    pub seconds: Real,
}

pub const METRICS_HEADER: &str =
    "epoch,loss,indicator,transported,theta_d,theta_s,theta_l,theta_t,theta_p,seconds";

/// Streams metric rows to a CSV file, flushing after each row.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    method: Option<String>,
}

impl MetricsWriter {
    /// `method`, when given, fills an extra trailing column.
    pub fn create(path: &Path, method: Option<&str>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let header = match method {
            Some(_) => format!("{METRICS_HEADER},method"),
            None => METRICS_HEADER.to_string(),
        };
        writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out,
            path: path.to_path_buf(),
            method: method.map(str::to_string),
        })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        let t = &r.theta;
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.epoch, r.loss, r.indicator, r.transported, t[0], t[1], t[2], t[3], t[4], r.seconds
        );
        if let Some(m) = &self.method {
            line.push(',');
            line.push_str(m);
        }
        let io = |e| Error::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)
    }
}
