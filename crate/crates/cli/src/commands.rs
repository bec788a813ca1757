//! The four subcommands as library functions over a resolved [`RunConfig`].

use std::path::{Path, PathBuf};

use granugrad::adjoint::{
    grad_check, rollout_forward, rollout_forward_with, value_and_grad, write_trace,
    BackwardOptions, GradCheckReport,
};
use granugrad::baseline::{run_baseline, Sample};
use granugrad::math::Real;
use granugrad::mpm::snapshot::{write_frame, write_xyz};
use granugrad::mpm::ParticleState;
use granugrad::objective::{MetricRecord, MetricsWriter};
use granugrad::optimizer::{optimise, Evaluation};
use granugrad::scene::build_scene;
use granugrad::skills::{denormalise, SkillParams, SkillRanges};
use granugrad::task::Task;
use granugrad::{Error, Result};

use crate::config::{RunConfig, Surrogate};
use crate::output::{
    Manifest, OutputDir, ResultFile, Summary, ERROR, FRAMES, GRADCHECK, MANIFEST, METRICS, RESULT,
    SUMMARY, TRACES,
};

/// Settings that come from the command line rather than the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub force: bool,
    /// Write per-stage adjoint magnitudes for every optimisation epoch.
    pub grad_trace: bool,
    /// Test hook that deliberately breaks the adjoint.
    pub corrupt_adjoint: bool,
}

/// Particle-count above which gradcheck warns about runtime.
pub const GRADCHECK_WARN_PARTICLES: usize = 5000;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Simulation { .. } => 3,
        Error::Gradient { .. } | Error::Optimisation { .. } => 4,
        _ => 2,
    }
}

enum Model {
    Surrogate(Surrogate, SkillRanges),
    Sim(Box<Task>),
}

impl Model {
    fn build(cfg: &RunConfig) -> Result<Model> {
        match cfg.surrogate {
            Some(s) => {
                let (scene, _) = build_scene(&cfg.scene, &cfg.material)?;
                Ok(Model::Surrogate(s, cfg.skills.ranges.resolve(&scene)))
            }
            None => Ok(Model::Sim(Box::new(task(cfg)?))),
        }
    }

    fn ranges(&self) -> &SkillRanges {
        match self {
            Model::Surrogate(_, r) => r,
            Model::Sim(t) => &t.ranges,
        }
    }

    fn loss(&mut self, theta: &SkillParams) -> Result<Real> {
        match self {
            Model::Surrogate(s, _) => Ok(s.loss(theta)),
            Model::Sim(t) => Ok(rollout_forward(t, theta, false)?.loss),
        }
    }
}

/// The simulated task described by `cfg`, settled and ready to roll out.
pub fn task(cfg: &RunConfig) -> Result<Task> {
    Task::new(
        &cfg.scene,
        &cfg.material,
        &cfg.sim,
        &cfg.skills.ranges,
        &cfg.objective,
        cfg.adjoint.checkpoint,
    )
}

fn staged<T>(
    cfg: &RunConfig,
    command: &str,
    opts: &RunOptions,
    body: impl FnOnce(&OutputDir) -> Result<T>,
) -> Result<(T, PathBuf)> {
    let out = OutputDir::prepare(&opts.out, opts.force)?;
    out.write(MANIFEST, &Manifest::new(command, cfg).to_toml())?;
    match body(&out) {
        Ok(v) => Ok((v, out.commit()?)),
        Err(e) => {
            // Partial artifacts are still worth keeping for a post-mortem.
            let _ = out.write(ERROR, &format!("{e}\n"));
            let _ = out.commit();
            Err(e)
        }
    }
}

fn dump(dir: &Path, stem: &str, particles: &ParticleState, xyz: bool) -> Result<()> {
    write_frame(&dir.join(format!("{stem}.ggdp")), particles)?;
    if xyz {
        write_xyz(&dir.join(format!("{stem}.xyz")), particles)?;
    }
    Ok(())
}

fn result_file(
    method: &str,
    loss: Real,
    index: usize,
    theta: &SkillParams,
    ranges: &SkillRanges,
) -> Result<ResultFile> {
    Ok(ResultFile {
        method: method.to_string(),
        loss,
        index,
        theta: theta.0.into(),
        physical: denormalise(theta, ranges)?.into(),
    })
}

/// Gradient-based optimisation with the curriculum.
pub fn cmd_optimise(cfg: &RunConfig, opts: &RunOptions) -> Result<(ResultFile, PathBuf)> {
    let mut model = Model::build(cfg)?;
    staged(cfg, "optimise", opts, |out| {
        let mut metrics = MetricsWriter::create(&out.file(METRICS), None)?;
        let frames = (cfg.output.dump_every > 0)
            .then(|| out.subdir(FRAMES))
            .transpose()?;
        let traces = opts.grad_trace.then(|| out.subdir(TRACES)).transpose()?;
        let bopts = BackwardOptions {
            trace: opts.grad_trace,
            corrupt: opts.corrupt_adjoint,
        };
        let mut objective = |theta: &SkillParams, epoch: usize| -> Result<Evaluation> {
            match &mut model {
                Model::Surrogate(s, _) => Ok(Evaluation {
                    loss: s.loss(theta),
                    grad: s.grad(theta),
                    indicator: 0,
                    transported: 0,
                }),
                Model::Sim(task) => {
                    let (r, g) = value_and_grad(task, theta, bopts)?;
                    if let Some(dir) = &traces {
                        write_trace(&dir.join(format!("epoch_{epoch:04}.tsv")), &g.trace)?;
                    }
                    if let Some(dir) = &frames {
                        if epoch % cfg.output.dump_every == 0 {
                            dump(
                                dir,
                                &format!("epoch_{epoch:04}"),
                                &r.final_state.particles,
                                cfg.output.xyz,
                            )?;
                        }
                    }
                    Ok(Evaluation {
                        loss: r.loss,
                        grad: g.theta,
                        indicator: task.indicator(&r.final_state),
                        transported: task.transported(&r.final_state),
                    })
                }
            }
        };
        let run = optimise(&mut objective, &cfg.optim, cfg.initial_theta(), |rec| {
            let mut rec = rec.clone();
            if cfg.deterministic {
                rec.seconds = 0.0;
            }
            eprintln!(
                "epoch {:>3}  loss {:.6e}  indicator {}  theta {:?}",
                rec.epoch, rec.loss, rec.indicator, rec.theta
            );
            metrics.write(&rec)
        })?;
        let (loss, index) = match run.best_loss {
            Some(l) => (l, run.history.iter().position(|h| h.loss == l).unwrap_or(0)),
            None => (model.loss(&run.best_theta)?, 0),
        };
        let result = result_file("gradient", loss, index, &run.best_theta, model.ranges())?;
        out.write(RESULT, &result.to_toml())?;
        Ok(result)
    })
}

/// Derivative-free comparison at a fixed rollout budget.
pub fn cmd_baseline(cfg: &RunConfig, opts: &RunOptions) -> Result<(ResultFile, PathBuf)> {
    let mut model = Model::build(cfg)?;
    let method = cfg.baseline.method.name();
    staged(cfg, "baseline", opts, |out| {
        let mut metrics = MetricsWriter::create(&out.file(METRICS), Some(method))?;
        let frames = (cfg.output.dump_every > 0)
            .then(|| out.subdir(FRAMES))
            .transpose()?;
        let mut count = 0usize;
        let eval = |theta: &SkillParams| -> Result<Sample> {
            let i = count;
            count += 1;
            match &mut model {
                Model::Surrogate(s, _) => Ok(Sample {
                    loss: s.loss(theta),
                    indicator: 0,
                    transported: 0,
                }),
                Model::Sim(task) => {
                    let r = rollout_forward(task, theta, false)?;
                    if let Some(dir) = &frames {
                        if i % cfg.output.dump_every == 0 {
                            dump(
                                dir,
                                &format!("rollout_{i:04}"),
                                &r.final_state.particles,
                                cfg.output.xyz,
                            )?;
                        }
                    }
                    Ok(Sample {
                        loss: r.loss,
                        indicator: task.indicator(&r.final_state),
                        transported: task.transported(&r.final_state),
                    })
                }
            }
        };
        let run = run_baseline(&cfg.baseline, eval, |rec| {
            eprintln!(
                "rollout {:>3}  loss {:.6e}  best {:.6e}",
                rec.rollout, rec.loss, rec.best.loss
            );
            metrics.write(&MetricRecord {
                epoch: rec.rollout,
                loss: rec.best.loss,
                indicator: rec.best.indicator,
                transported: rec.best.transported,
                theta: rec.best_theta.0,
                seconds: if cfg.deterministic { 0.0 } else { rec.seconds },
            })
        })?;
        let index = run
            .history
            .iter()
            .position(|h| h.theta == run.best_theta && h.loss == run.best_loss)
            .unwrap_or(0);
        let result = result_file(
            method,
            run.best_loss,
            index,
            &run.best_theta,
            model.ranges(),
        )?;
        out.write(RESULT, &result.to_toml())?;
        Ok(result)
    })
}

/// One forward rollout with frame dumps every `output.dump_every` control steps.
pub fn cmd_rollout(
    cfg: &RunConfig,
    opts: &RunOptions,
    theta: &SkillParams,
) -> Result<(Summary, PathBuf)> {
    theta.validate().map_err(|e| Error::Config(e.to_string()))?;
    if cfg.surrogate.is_some() {
        return Err(Error::Config(
            "rollout needs the simulation; remove the [surrogate] section".into(),
        ));
    }
    let mut task = task(cfg)?;
    staged(cfg, "rollout", opts, |out| {
        let every = cfg.output.dump_every;
        let frames = (every > 0).then(|| out.subdir(FRAMES)).transpose()?;
        if let Some(dir) = &frames {
            dump(dir, "step_0000", &task.initial.particles, cfg.output.xyz)?;
        }
        let mut last_dumped = 0;
        let r = rollout_forward_with(&mut task, theta, false, |step, state| {
            if let Some(dir) = &frames {
                if step % every == 0 {
                    last_dumped = step;
                    dump(
                        dir,
                        &format!("step_{step:04}"),
                        &state.particles,
                        cfg.output.xyz,
                    )?;
                }
            }
            Ok(())
        })?;
        let steps = r.controls.len();
        if let Some(dir) = &frames {
            if last_dumped != steps {
                dump(
                    dir,
                    &format!("step_{steps:04}"),
                    &r.final_state.particles,
                    cfg.output.xyz,
                )?;
            }
        }
        let summary = Summary {
            loss: r.loss,
            indicator: task.indicator(&r.final_state),
            transported: task.transported(&r.final_state),
            steps,
            theta: theta.0.into(),
        };
        out.write(SUMMARY, &summary.to_toml())?;
        Ok(summary)
    })
}

/// Adjoint against central differences at `theta`.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    opts: &RunOptions,
    theta: &SkillParams,
    h: Real,
) -> Result<(GradCheckReport, PathBuf)> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    theta.validate().map_err(|e| Error::Config(e.to_string()))?;
    if cfg.surrogate.is_some() {
        return Err(Error::Config(
            "gradcheck needs the simulation; remove the [surrogate] section".into(),
        ));
    }
    if cfg.scene.particle_count > GRADCHECK_WARN_PARTICLES {
        eprintln!(
            "warning: {} particles; gradcheck runs eleven rollouts and is meant for small scenes",
            cfg.scene.particle_count
        );
    }
    let mut task = task(cfg)?;
    staged(cfg, "gradcheck", opts, |out| {
        let bopts = BackwardOptions {
            trace: false,
            corrupt: opts.corrupt_adjoint,
        };
        let report = grad_check(&mut task, theta, h, bopts)?;
        let mut csv = String::from("component,analytic,numeric,rel_error,abs_error,passed\n");
        for r in &report.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.name, r.analytic, r.numeric, r.rel_error, r.abs_error, r.passed
            ));
        }
        out.write(GRADCHECK, &csv)?;
        Ok(report)
    })
}
