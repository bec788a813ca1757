//! Whole-pipeline runs: gradient check, the optimisation protocol on the
//! default scene, the baseline comparison and reproducibility.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use granugrad::adjoint::{grad_check, BackwardOptions};
use granugrad::math::Real;
use granugrad_cli::commands::{cmd_baseline, cmd_optimise, cmd_rollout, task, RunOptions};
use granugrad_cli::config::RunConfig;
use granugrad_cli::output::{FRAMES, METRICS};

use crate::common::load_config;
use crate::Outcome;

pub fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = load_config("small.toml", &[]);
    let mut t = task(&cfg).map_err(|e| e.to_string())?;
    let theta = cfg.initial_theta();
    let horizon = t.controls(&theta).map_err(|e| e.to_string())?.horizon();
    let scene = (
        t.initial.particles.len(),
        t.scene().grid_dims(),
        horizon,
        cfg.sim.n_sub,
    );
    if scene != (512, [32, 32, 32], 10, 5) || !cfg.deterministic {
        return Err(format!(
            "small scene is {scene:?}, expected 512 particles, 32^3, T=10, 5 substeps"
        ));
    }
    let report =
        grad_check(&mut t, &theta, 1e-3, BackwardOptions::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.rel_error))
        .collect();
    let line = format!("rel errors [{}], {secs:.0}s (< 300s)", rows.join(", "));
    if report.passed() && secs < 300.0 {
        Ok(line)
    } else {
        Err(format!("{line}; failing {:?}", report.failing()))
    }
}

#[derive(Clone)]
struct Row {
    loss: Real,
    indicator: i64,
    theta: [Real; 5],
}

fn read_metrics(dir: &Path) -> Result<Vec<Row>, String> {
    let text = std::fs::read_to_string(dir.join(METRICS)).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| f[i].parse::<Real>().map_err(|e| format!("{line}: {e}"));
            Ok(Row {
                loss: num(1)?,
                indicator: f[2].parse().map_err(|e| format!("{line}: {e}"))?,
                theta: [num(4)?, num(5)?, num(6)?, num(7)?, num(8)?],
            })
        })
        .collect()
}

fn options(out: &Path) -> RunOptions {
    RunOptions {
        out: out.to_path_buf(),
        force: true,
        grad_trace: false,
        corrupt_adjoint: false,
    }
}

fn default_scene(seed: u64) -> RunConfig {
    load_config(
        "default.toml",
        &[
            &format!("scene.seed={seed}"),
            &format!("baseline.seed={seed}"),
        ],
    )
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Per-epoch metrics of the gradient method on the default scene.
fn gradient_run(seed: u64) -> &'static Result<Vec<Row>, String> {
    static RUNS: [OnceLock<Result<Vec<Row>, String>>; 3] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = dir.path().join("optimise");
        cmd_optimise(&default_scene(seed), &options(&out)).map_err(|e| e.to_string())?;
        read_metrics(&out)
    })
}

/// Best-so-far metrics of the baseline at the same rollout budget.
fn baseline_run(seed: u64) -> Result<Vec<Row>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("baseline");
    cmd_baseline(&default_scene(seed), &options(&out)).map_err(|e| e.to_string())?;
    read_metrics(&out)
}

pub fn curriculum() -> Outcome {
    let cfg = default_scene(0);
    let o = cfg.optim;
    if (
        o.epochs,
        o.curriculum_switch_epoch,
        o.learning_rate,
        o.rms_decay,
        cfg.sim.dt,
        cfg.sim.n_sub,
    ) != (30, 15, 0.05, 0.9, 0.01, 20)
    {
        return Err("default config does not carry the standard protocol".into());
    }
    let rows = gradient_run(0).as_ref().map_err(Clone::clone)?;
    if rows.len() != o.epochs {
        return Err(format!("{} metric rows, expected {}", rows.len(), o.epochs));
    }
    let switch = o.curriculum_switch_epoch;
    let initial = cfg.initial_theta().0;
    let frozen = |r: &Row| (3..5).all(|i| r.theta[i].to_bits() == initial[i].to_bits());
    // Row k holds the parameters evaluated at epoch k, i.e. after k updates.
    let held = rows[..=switch].iter().all(frozen);
    let released = rows[switch + 1..]
        .iter()
        .all(|r| (3..5).all(|i| r.theta[i] != initial[i]));

    let ind: Vec<i64> = rows.iter().map(|r| r.indicator).collect();
    let phase1 = &ind[..switch];
    let range1 = phase1.iter().max().unwrap() - phase1.iter().min().unwrap();
    let improvement = ind[0] - ind.iter().min().unwrap();
    let flat = improvement > 0 && range1 as Real <= 0.2 * improvement as Real;
    let tail = &ind[ind.len() - 5..];
    let tail_mean = tail.iter().sum::<i64>() as Real / tail.len() as Real;
    let decreasing = tail_mean < ind[switch] as Real;

    let line = format!(
        "theta_t/theta_p held through epoch {switch}: {held}, moving after: {released}; \
         indicator {} -> {} (best {}), phase-1 range {range1} vs 20% of improvement {:.0}: {flat}; \
         phase-2 last-5 mean {tail_mean:.0} < epoch-{switch} {}: {decreasing}",
        ind[0],
        ind[ind.len() - 1],
        ind.iter().min().unwrap(),
        0.2 * improvement as Real,
        ind[switch]
    );
    if held && released && flat && decreasing {
        Ok(line)
    } else {
        Err(line)
    }
}

fn median(mut v: Vec<Real>) -> Real {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

pub fn convergence() -> Outcome {
    // Seeds run concurrently; seed 0's gradient run is shared with the curriculum check.
    let results: Vec<(Result<Vec<Row>, String>, Result<Vec<Row>, String>)> =
        std::thread::scope(|s| {
            let handles: Vec<_> = SEEDS
                .iter()
                .map(|&seed| {
                    let g = s.spawn(move || gradient_run(seed).clone());
                    let b = s.spawn(move || baseline_run(seed));
                    (g, b)
                })
                .collect();
            handles
                .into_iter()
                .map(|(g, b)| {
                    (
                        g.join().expect("gradient run"),
                        b.join().expect("baseline run"),
                    )
                })
                .collect()
        });

    let mut grad_gain = Vec::new();
    let mut base_gain = Vec::new();
    let mut per_seed = Vec::new();
    for (seed, (g, b)) in SEEDS.iter().zip(results) {
        let (g, b) = (g?, b?);
        let initial = g[0].loss;
        let best_grad = g.iter().map(|r| r.loss).fold(Real::INFINITY, Real::min);
        let best_base = b.last().ok_or("empty baseline metrics")?.loss;
        if b.len() != g.len() {
            return Err(format!(
                "seed {seed}: baseline used {} rollouts, gradient {}",
                b.len(),
                g.len()
            ));
        }
        let (gg, bg) = (1.0 - best_grad / initial, 1.0 - best_base / initial);
        per_seed.push(format!(
            "seed {seed}: {:.1}% vs {:.1}%",
            100.0 * gg,
            100.0 * bg
        ));
        grad_gain.push(gg);
        base_gain.push(bg);
    }
    let (mg, mb) = (median(grad_gain), median(base_gain));
    let line = format!(
        "median loss reduction gradient {:.1}% (>= 30%), baseline {:.1}% [{}]",
        100.0 * mg,
        100.0 * mb,
        per_seed.join("; ")
    );
    if mg >= 0.3 && mg >= mb {
        Ok(line)
    } else {
        Err(line)
    }
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    (name, std::fs::read(e.path()).unwrap_or_default())
                })
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

pub fn determinism() -> Outcome {
    let cfg = load_config(
        "small.toml",
        &[
            "optim.epochs=3",
            "optim.curriculum_switch_epoch=2",
            "output.dump_every=1",
            "output.xyz=true",
        ],
    );
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = root.path().join(name);
        cmd_optimise(&cfg, &options(&out.join("optimise"))).map_err(|e| e.to_string())?;
        cmd_rollout(&cfg, &options(&out.join("rollout")), &cfg.initial_theta())
            .map_err(|e| e.to_string())?;
        runs.push(out);
    }
    let mut compared = 0;
    for sub in ["optimise", "rollout"] {
        let (a, b) = (runs[0].join(sub), runs[1].join(sub));
        if sub == "optimise" {
            let (ma, mb) = (
                std::fs::read(a.join(METRICS)),
                std::fs::read(b.join(METRICS)),
            );
            match (ma, mb) {
                (Ok(x), Ok(y)) if x == y => compared += 1,
                _ => return Err("metrics files differ".into()),
            }
        }
        let (fa, fb) = (files_under(&a.join(FRAMES)), files_under(&b.join(FRAMES)));
        if fa.is_empty() || fa != fb {
            return Err(format!("{sub} frame dumps differ or are missing"));
        }
        compared += fa.len();
    }
    Ok(format!("{compared} files bit-identical across two runs"))
}
