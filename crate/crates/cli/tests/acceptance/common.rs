use std::path::PathBuf;

use granugrad::math::{Mat3, Real, Vec3, Vec6};
use granugrad_cli::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut ChaCha8Rng, scale: Real) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-scale..scale))
}

pub fn vec6(rng: &mut ChaCha8Rng, scale: Real) -> Vec6 {
    Vec6::from_fn(|_, _| rng.random_range(-scale..scale))
}

pub fn mat3(rng: &mut ChaCha8Rng, scale: Real) -> Mat3 {
    Mat3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_error(a: Real, b: Real) -> Real {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn load_config(name: &str, overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(&config_path(name), &o).expect("bundled config loads")
}

/// Collects named measurements against a bound and renders a one-line verdict.
pub struct Tally {
    bound: Real,
    worst: Real,
    worst_name: String,
    count: usize,
    failures: Vec<String>,
}

impl Tally {
    pub fn new(bound: Real) -> Self {
        Tally {
            bound,
            worst: 0.0,
            worst_name: String::new(),
            count: 0,
            failures: Vec::new(),
        }
    }

    pub fn record(&mut self, name: &str, value: Real) {
        self.count += 1;
        if !(value < self.bound) {
            self.failures.push(format!("{name}: {value:.3e}"));
        }
        if !(value <= self.worst) {
            self.worst = value;
            self.worst_name = name.to_string();
        }
    }

    pub fn verdict(self, what: &str) -> Result<String, String> {
        let line = format!(
            "{} {what}, worst {:.2e} ({}) vs bound {:.0e}",
            self.count, self.worst, self.worst_name, self.bound
        );
        if self.failures.is_empty() && self.count > 0 {
            Ok(line)
        } else {
            Err(format!("{line}; failing: {}", self.failures.join(", ")))
        }
    }
}
