//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.
//!
//! Run a subset by number or name fragment:
//! `cargo test --test acceptance -- 2 4 determinism`.

mod common;
mod experiments;
mod physics;
mod stages;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Detail on success, reason on failure.
pub type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "gradient-fidelity",
        run: experiments::gradient_fidelity,
    },
    Criterion {
        id: 2,
        name: "stage-adjoints",
        run: stages::all_stages,
    },
    Criterion {
        id: 3,
        name: "conservation",
        run: physics::conservation,
    },
    Criterion {
        id: 4,
        name: "return-map-oracle",
        run: oracles::return_map_oracle,
    },
    Criterion {
        id: 5,
        name: "pile-stability",
        run: physics::pile_stability,
    },
    Criterion {
        id: 6,
        name: "curriculum",
        run: experiments::curriculum,
    },
    Criterion {
        id: 7,
        name: "convergence",
        run: experiments::convergence,
    },
    Criterion {
        id: 8,
        name: "determinism",
        run: experiments::determinism,
    },
    Criterion {
        id: 9,
        name: "skill-mapping-oracle",
        run: oracles::skill_mapping_oracle,
    },
    Criterion {
        id: 10,
        name: "rmsprop-oracle",
        run: oracles::rmsprop_oracle,
    },
];

fn selected(c: &Criterion, filters: &[String]) -> bool {
    filters.is_empty()
        || filters.iter().any(|f| {
            f.parse::<u32>()
                .map_or_else(|_| c.name.contains(f.as_str()), |n| n == c.id)
        })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in CRITERIA {
            println!("{}-{}: test", c.id, c.name);
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<String> = args.into_iter().filter(|a| !a.starts_with('-')).collect();

    // Failures are reported on the criterion line instead.
    std::panic::set_hook(Box::new(|_| {}));
    let (mut passed, mut failed) = (0, 0);
    for c in CRITERIA.iter().filter(|c| selected(c, &filters)) {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| Err(panic_message(p)));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => {
                passed += 1;
                ("PASS", d)
            }
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {:<22} {detail} [{secs:.1}s]", c.id, c.name);
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
