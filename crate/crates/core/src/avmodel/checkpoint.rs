//! JSON checkpoint container.
//!
//! Layout (`format = "avcap-checkpoint/1"`):
//!
//! ```text
//! { "format": "...", "config": {ModelConfig},
//!   "weights": { "<name>": { "shape": [r, c], "data": [row-major f64] }, ... },
//!   "adapter": null | { "rank": r, "scale": a, "factors": { "<name>": {...} } },
//!   "round": t, "seed": s, "rng_counter": k }
//! ```
//!
//! Floats are written in shortest round-trip form, so a write/read cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "avcap-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    #[serde(flatten)]
    state: ModelState,
}

impl ModelState {
    pub fn to_json(&self) -> Result<String> {
        let env = Envelope {
            format: CHECKPOINT_FORMAT.to_string(),
            state: self.clone(),
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if env.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}",
                env.format
            )));
        }
        let s = env.state;
        s.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (name, t) in s
            .weights
            .iter()
            .chain(s.adapter.iter().flat_map(|a| a.factors.iter()))
        {
            let n: usize = t.shape().iter().product();
            if n != t.len() || !t.is_finite() {
                return Err(Error::Checkpoint(format!("corrupt tensor {name}")));
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
