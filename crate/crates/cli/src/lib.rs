//! Command-line front end: config files, runs, sweeps and check suites.

pub mod checks;
pub mod config;
pub mod runner;
pub mod sweep;

use relab_core::Error;

use crate::config::ConfigError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ABORT: u8 = 3;

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_ENV: &str = "RLAB_OUTPUT_ROOT";

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Dimension(_) | Error::Capacity { .. } => EXIT_CONFIG,
                Error::Aborted { .. } | Error::Numerical(_) => EXIT_ABORT,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

/// Preset reproducing the three-armed bandit whose offline REINFORCE limit
/// is the sub-optimal arm.
pub const BANDIT_DEMO: &str = r#"[task]
kind = "bandit"
arm_rewards = [0.0, 0.8, 1.0]

[policy]
init = "root_probs"
root_probs = [0.3, 0.6, 0.1]

[algorithm]
kind = "REINFORCE"

[schedule]
offline = true

[optimizer]
eta = 0.5
steps = 2000
k = 1024
seed = 0

[output]
dir = "runs/bandit-demo"
"#;
