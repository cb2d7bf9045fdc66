//! One function per subcommand. Each writes its files plus a resolved
//! config snapshot into `<out>/<command>/`.

mod runs;
mod scaling;
mod search;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use slmlab::trainer::{Probes, RunRecord};

use crate::config::ExperimentConfig;
use crate::output::OutDir;

pub use runs::{ablate_attn, meta_eval, report, train};
pub use scaling::{fit, sweep};
pub use search::{profile, search};

/// One training run as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    /// Recipe label, e.g. `wnorm`, `full=2`, `meta=4`.
    pub variant: String,
    pub record: RunRecord,
    pub probes: Option<Probes>,
}

/// Write the resolved configuration beside the outputs; rerunning with it
/// (and any `--out`) replays the command. The output root is left out so
/// replays into another directory produce identical files.
fn snapshot(out: &OutDir, cfg: &ExperimentConfig) -> Result<()> {
    out.write("config.toml", &cfg.to_toml()?)?;
    Ok(())
}

fn seeds_or(list: &[u64], global: u64) -> Vec<u64> {
    if list.is_empty() {
        vec![global]
    } else {
        list.to_vec()
    }
}
