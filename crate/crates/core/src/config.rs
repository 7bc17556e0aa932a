//! Scenario configuration: one TOML document with every parameter, all
//! fields defaulted so partial files resolve to a complete set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bidding::PacingConfig;
use crate::error::{Error, Result};
use crate::foundation::TrainConfig;
use crate::metrics::ReportConfig;
use crate::stack::StackConfig;
use crate::tier::StageConfig;
use crate::world::WorldConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Failing items restart their stage instead of leaving boosting.
    pub disable_exit: bool,
    /// Passing items leave boosting instead of moving up a stage.
    pub disable_promotion: bool,
    /// Splits the same total budget into this many stages.
    pub stage_count: Option<u8>,
    /// Boost slots go to the highest-potential items without a price test.
    pub disable_bidding: bool,
    /// The speed factor stays at 1.
    pub disable_speed_factor: bool,
    /// The user factor stays at 1.
    pub disable_user_factor: bool,
    /// No boost channel at all; its slots go to natural ranking.
    pub disable_boosting: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Rounds of random warm exposures collected before slot 0.
    pub warmup_rounds: u32,
    /// Epochs of stack pre-training on the warmup log.
    pub stack_pretrain_epochs: u32,
    /// Share of new items never boosted (control bucket).
    pub holdout_fraction: f64,
    pub benchmark_window_slots: u32,
    /// Write a per-decision bid trace.
    pub bid_trace: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            warmup_rounds: 20,
            stack_pretrain_epochs: 6,
            holdout_fraction: 0.2,
            benchmark_window_slots: 3,
            bid_trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub slots: u32,
    pub output_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub stages: StageConfig,
    pub pacing: PacingConfig,
    pub foundation: TrainConfig,
    pub stack: StackConfig,
    pub report: ReportConfig,
    pub harness: HarnessConfig,
    pub ablation: AblationFlags,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            slots: 60,
            output_dir: None,
            world: WorldConfig::default(),
            stages: StageConfig::default(),
            pacing: PacingConfig::default(),
            foundation: TrainConfig::default(),
            stack: StackConfig::default(),
            report: ReportConfig::default(),
            harness: HarnessConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(format!("invalid scenario: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Stage ladder after applying `stage_count`.
    pub fn effective_stages(&self) -> Result<StageConfig> {
        match self.ablation.stage_count {
            Some(k) => self.stages.with_stage_count(k),
            None => Ok(self.stages.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::config("slots must be >= 1"));
        }
        self.world.validate()?;
        self.stages.validate()?;
        self.pacing.validate()?;
        self.foundation.validate()?;
        self.stack.validate()?;
        if let Some(k) = self.ablation.stage_count {
            if !(1..=4).contains(&k) {
                return Err(Error::config("ablation.stage_count must be 1, 2, 3 or 4"));
            }
        }
        self.effective_stages()?;
        let h = &self.harness;
        if !(0.0..1.0).contains(&h.holdout_fraction) {
            return Err(Error::config("harness.holdout_fraction must lie in [0, 1)"));
        }
        if h.benchmark_window_slots == 0 {
            return Err(Error::config("harness.benchmark_window_slots must be >= 1"));
        }
        if h.warmup_rounds == 0 {
            return Err(Error::config("harness.warmup_rounds must be >= 1 (the foundation model needs data)"));
        }
        if self.report.window_slots == 0 || self.report.top_k == 0 {
            return Err(Error::config("report.window_slots and report.top_k must be >= 1"));
        }
        if self.report.amplification_buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("report.amplification_buckets must be increasing"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_resolve() {
        let c = ScenarioConfig::from_toml_str("seed = 9\n[ablation]\ndisable_exit = true\n").unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.ablation.disable_exit);
        assert_eq!(c.stages, StageConfig::default());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "slots = 0",
            "unknown_key = 1",
            "[stages]\nbudgets = [300, 100, 900]",
            "[ablation]\nstage_count = 5",
            "[pacing]\nspeed_min = 0.0",
            "[world]\nnum_users = 0",
        ] {
            let e = ScenarioConfig::from_toml_str(text).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
    }
}
