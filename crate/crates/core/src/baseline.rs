//! Derivative-free comparison optimisers over the same skill space, budgeted
//! in rollouts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::optimizer::{LOWER, UPPER};
use crate::skills::SkillParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Uniform samples over the box.
    #[default]
    RandomSearch,
    /// Gaussian refit to the elites plus a decaying extra variance.
    CrossEntropy,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::RandomSearch => "random_search",
            BaselineMethod::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Samples per cross-entropy iteration.
    pub population: usize,
    pub elite_fraction: Real,
    /// Total rollouts.
    pub budget: usize,
    pub seed: u64,
    pub init_mean: [Real; 5],
    pub init_std: [Real; 5],
    /// Floor on the refitted standard deviation.
    pub min_std: Real,
    /// Variance added to every refit, multiplied by `noise_decay` per iteration.
    pub extra_variance: Real,
    pub noise_decay: Real,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            method: BaselineMethod::RandomSearch,
            population: 10,
            elite_fraction: 0.2,
            budget: 30,
            seed: 0,
            init_mean: [0.0; 5],
            init_std: [0.5; 5],
            min_std: 1e-3,
            extra_variance: 0.02,
            noise_decay: 0.85,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("baseline: {m}")));
        if self.population < 2 {
            return bad("population must be >= 2");
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return bad("elite_fraction must lie in (0, 1)");
        }
        if self.budget == 0 {
            return bad("budget must be >= 1");
        }
        if self.init_std.iter().any(|s| !(*s > 0.0)) || !(self.min_std > 0.0) {
            return bad("standard deviations must be > 0");
        }
        if !(self.extra_variance >= 0.0) || !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad("extra_variance must be >= 0 and noise_decay lie in (0, 1]");
        }
        Ok(())
    }

    pub fn elites(&self) -> usize {
        ((self.elite_fraction * self.population as Real).ceil() as usize).clamp(1, self.population)
    }
}

/// What one rollout of the baseline reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub loss: Real,
    pub indicator: usize,
    pub transported: usize,
}

/// Best-so-far state after one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRecord {
    /// Rollouts consumed minus one.
    pub rollout: usize,
    pub theta: SkillParams,
    pub loss: Real,
    pub best_theta: SkillParams,
    pub best: Sample,
    pub seconds: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub best_theta: SkillParams,
    pub best_loss: Real,
    pub history: Vec<BaselineRecord>,
}

struct Tracker<'a, F, G> {
    eval: F,
    on_record: G,
    history: &'a mut Vec<BaselineRecord>,
    best: Option<(SkillParams, Sample)>,
}

impl<F, G> Tracker<'_, F, G>
where
    F: FnMut(&SkillParams) -> Result<Sample>,
    G: FnMut(&BaselineRecord) -> Result<()>,
{
    fn run(&mut self, theta: SkillParams) -> Result<Real> {
        let start = Instant::now();
        let s = (self.eval)(&theta)?;
        let loss = s.loss;
        if self.best.as_ref().is_none_or(|(_, b)| loss < b.loss) {
            self.best = Some((theta, s));
        }
        let (bt, bs) = self.best.clone().expect("set above");
        let rec = BaselineRecord {
            rollout: self.history.len(),
            theta,
            loss,
            best_theta: bt,
            best: bs,
            seconds: start.elapsed().as_secs_f64(),
        };
        (self.on_record)(&rec)?;
        self.history.push(rec);
        Ok(loss)
    }
}

fn clamp(v: Real) -> Real {
    v.clamp(LOWER, UPPER)
}

/// Spends `cfg.budget` evaluations of `eval` and returns the best sample.
pub fn run_baseline(
    cfg: &BaselineConfig,
    eval: impl FnMut(&SkillParams) -> Result<Sample>,
    on_record: impl FnMut(&BaselineRecord) -> Result<()>,
) -> Result<BaselineResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.budget);
    let mut t = Tracker {
        eval,
        on_record,
        history: &mut history,
        best: None,
    };
    match cfg.method {
        BaselineMethod::RandomSearch => {
            for _ in 0..cfg.budget {
                let theta = SkillParams(std::array::from_fn(|_| rng.random_range(LOWER..=UPPER)));
                t.run(theta)?;
            }
        }
        BaselineMethod::CrossEntropy => {
            let mut mean = cfg.init_mean.map(clamp);
            let mut std = cfg.init_std;
            let mut used = 0;
            let mut extra = cfg.extra_variance;
            while used < cfg.budget {
                let n = cfg.population.min(cfg.budget - used);
                let mut scored = Vec::with_capacity(n);
                for _ in 0..n {
                    let theta = SkillParams(std::array::from_fn(|i| {
                        let z: Real = rng.sample(StandardNormal);
                        clamp(mean[i] + std[i] * z)
                    }));
                    scored.push((t.run(theta)?, theta));
                }
                used += n;
                scored.sort_by(|a, b| a.0.total_cmp(&b.0));
                let elites = &scored[..cfg.elites().min(n)];
                let k = elites.len() as Real;
                for i in 0..5 {
                    let m = elites.iter().map(|(_, th)| th.0[i]).sum::<Real>() / k;
                    let var = elites
                        .iter()
                        .map(|(_, th)| (th.0[i] - m).powi(2))
                        .sum::<Real>()
                        / k;
                    mean[i] = m;
                    std[i] = (var + extra).sqrt().max(cfg.min_std);
                }
                extra *= cfg.noise_decay;
            }
        }
    }
    let (best_theta, best) = t.best.expect("budget >= 1");
    Ok(BaselineResult {
        best_theta,
        best_loss: best.loss,
        history,
    })
}
