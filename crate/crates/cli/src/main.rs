use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, ExitCode};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use granugrad::skills::SkillParams;
use granugrad::{Error, Result};
use granugrad_cli::commands::{
    cmd_baseline, cmd_gradcheck, cmd_optimise, cmd_rollout, exit_code, RunOptions,
};
use granugrad_cli::config::RunConfig;
use granugrad_cli::output::{parse_theta, ResultFile};

/// Differentiable powder-scooping simulation and skill optimisation.
///
/// Exit codes: 0 success, 1 gradient check failed, 2 configuration or
/// contract error, 3 simulation fault, 4 non-finite gradient.
/// GRANUGRAD_THREADS caps the kernel thread pool.
#[derive(Parser)]
#[command(name = "granugrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise the skill parameters with the adjoint gradient.
    #[command(alias = "optimize")]
    Optimise(Common),
    /// Roll out one parameter set and report loss, indicator and transport.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        theta: ThetaSource,
    },
    /// Compare the adjoint gradient with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        theta: ThetaSource,
        /// Finite-difference step in normalised units.
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Derivative-free comparison optimiser.
    Baseline(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Scene and sampling seed; repeat to run several seeds.
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Zero timing columns so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Seeds run concurrently, one worker process each.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override a config key, e.g. `--set optim.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Frame dump cadence (epochs, rollouts or steps); 0 disables.
    #[arg(long)]
    dump_every: Option<usize>,
    /// Write per-stage adjoint magnitudes for every epoch (optimise only).
    #[arg(long)]
    grad_trace: bool,
}

#[derive(Args, Clone)]
struct ThetaSource {
    /// Inline parameters `a,b,c,d,e` in [-1, 1].
    #[arg(long, allow_hyphen_values = true, conflicts_with = "theta_file")]
    theta: Option<String>,
    /// Take the parameters from a result file.
    #[arg(long)]
    theta_file: Option<PathBuf>,
}

impl ThetaSource {
    fn resolve(&self, cfg: &RunConfig) -> Result<SkillParams> {
        match (&self.theta, &self.theta_file) {
            (Some(s), _) => parse_theta(s),
            (None, Some(p)) => {
                let t = ResultFile::read(p)?.theta();
                t.validate()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Ok(t)
            }
            (None, None) => Ok(cfg.initial_theta()),
        }
    }

    fn args(&self) -> Vec<String> {
        let mut a = Vec::new();
        if let Some(t) = &self.theta {
            a.extend(["--theta".to_string(), t.clone()]);
        }
        if let Some(p) = &self.theta_file {
            a.extend(["--theta-file".to_string(), p.display().to_string()]);
        }
        a
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut sets = self.set.clone();
        if let [seed] = self.seed[..] {
            sets.push(format!("scene.seed={seed}"));
            sets.push(format!("baseline.seed={seed}"));
        }
        if self.deterministic {
            sets.push("deterministic=true".into());
        }
        if let Some(n) = self.dump_every {
            sets.push(format!("output.dump_every={n}"));
        }
        RunConfig::load(&self.config, &sets)
    }

    fn options(&self, cfg: &RunConfig) -> RunOptions {
        RunOptions {
            out: self.out.clone().unwrap_or_else(|| cfg.output.dir.clone()),
            force: self.force,
            grad_trace: self.grad_trace,
            corrupt_adjoint: false,
        }
    }

    /// Arguments reproducing this invocation for one seed and directory.
    fn child_args(&self, seed: u64, out: &Path) -> Vec<String> {
        let mut a = vec![
            "--config".to_string(),
            self.config.display().to_string(),
            "--seed".to_string(),
            seed.to_string(),
            "--out".to_string(),
            out.display().to_string(),
        ];
        for s in &self.set {
            a.extend(["--set".to_string(), s.clone()]);
        }
        if let Some(n) = self.dump_every {
            a.extend(["--dump-every".to_string(), n.to_string()]);
        }
        for (on, flag) in [
            (self.force, "--force"),
            (self.deterministic, "--deterministic"),
            (self.grad_trace, "--grad-trace"),
        ] {
            if on {
                a.push(flag.to_string());
            }
        }
        a
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

/// Runs every seed as a separate worker process, at most `jobs` at a time,
/// writing into `<out>/seed_<n>`. Returns the first non-zero worker status.
fn fan_out(sub: &str, common: &Common, extra: &[String]) -> Result<i32> {
    let cfg = common.load()?;
    let base = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let mut pending: Vec<u64> = common.seed.iter().rev().copied().collect();
    let mut running: Vec<(u64, Child)> = Vec::new();
    let mut codes: Vec<(u64, i32)> = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < common.jobs.max(1) {
            let Some(seed) = pending.pop() else { break };
            let out = base.join(format!("seed_{seed}"));
            let child = Process::new(&exe)
                .arg(sub)
                .args(common.child_args(seed, &out))
                .args(extra)
                .spawn()
                .map_err(|e| Error::io(&exe, e))?;
            eprintln!("seed {seed}: worker {} -> {}", child.id(), out.display());
            running.push((seed, child));
        }
        let mut i = 0;
        while i < running.len() {
            match running[i].1.try_wait().map_err(|e| Error::io(&exe, e))? {
                Some(status) => {
                    let (seed, _) = running.remove(i);
                    let code = status.code().unwrap_or(3);
                    eprintln!("seed {seed}: exit {code}");
                    codes.push((seed, code));
                }
                None => i += 1,
            }
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    codes.sort();
    Ok(codes.iter().map(|c| c.1).find(|c| *c != 0).unwrap_or(0))
}

fn run(cli: Cli) -> Result<i32> {
    let (sub, common, extra) = match &cli.command {
        Command::Optimise(c) => ("optimise", c, vec![]),
        Command::Baseline(c) => ("baseline", c, vec![]),
        Command::Rollout { common, theta } => ("rollout", common, theta.args()),
        Command::Gradcheck {
            common,
            theta,
            h,
            corrupt_adjoint,
        } => {
            let mut e = theta.args();
            e.extend(["--h".to_string(), h.to_string()]);
            if *corrupt_adjoint {
                e.push("--corrupt-adjoint".into());
            }
            ("gradcheck", common, e)
        }
    };
    if common.seed.len() > 1 {
        return fan_out(sub, common, &extra);
    }
    let cfg = common.load()?;
    let mut opts = common.options(&cfg);
    match &cli.command {
        Command::Optimise(_) => {
            let (r, dir) = cmd_optimise(&cfg, &opts)?;
            println!(
                "best loss {} at epoch {}; wrote {}",
                r.loss,
                r.index,
                dir.display()
            );
        }
        Command::Baseline(_) => {
            let (r, dir) = cmd_baseline(&cfg, &opts)?;
            println!(
                "{}: best loss {} at rollout {}; wrote {}",
                r.method,
                r.loss,
                r.index,
                dir.display()
            );
        }
        Command::Rollout { theta, .. } => {
            let theta = theta.resolve(&cfg)?;
            let (s, dir) = cmd_rollout(&cfg, &opts, &theta)?;
            println!(
                "loss {}\nindicator {}\ntransported {}\nsteps {}\nwrote {}",
                s.loss,
                s.indicator,
                s.transported,
                s.steps,
                dir.display()
            );
        }
        Command::Gradcheck {
            theta,
            h,
            corrupt_adjoint,
            ..
        } => {
            opts.corrupt_adjoint = *corrupt_adjoint;
            let theta = theta.resolve(&cfg)?;
            let (report, _) = cmd_gradcheck(&cfg, &opts, &theta, *h)?;
            println!("loss {}  h {}", report.loss, report.h);
            println!(
                "{:<16} {:>14} {:>14} {:>10}  ok",
                "component", "analytic", "numeric", "rel_err"
            );
            for r in &report.rows {
                println!(
                    "{:<16} {:>14.6e} {:>14.6e} {:>10.3e}  {}",
                    r.name, r.analytic, r.numeric, r.rel_error, r.passed
                );
            }
            if !report.passed() {
                eprintln!("gradient check failed for {}", report.failing().join(", "));
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = granugrad_cli::init_threads() {
        return ExitCode::from(report(&e) as u8);
    }
    let code = run(cli).unwrap_or_else(|e| report(&e));
    ExitCode::from(code as u8)
}
