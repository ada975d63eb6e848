//! Versioned plan documents: the tuned plan together with the digests of
//! the inputs it was derived from and a per-stage cost breakdown.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::interference::ChannelVector;
use crate::intertuner::{TrainingPlan, TuneOptions};
use crate::pipesim::{objective_unchecked, PipelinePlan};
use crate::stagecost::{CostError, CostModel};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan file version {found} is not supported (expected {PLAN_VERSION})")]
    Version { found: u32 },
    #[error("plan file does not parse: {0}")]
    Parse(String),
    #[error("{0} digest does not match the plan file")]
    Digest(&'static str),
    #[error("stage {stage}: stored {field} {stored:e} re-evaluates to {fresh:e}")]
    Mismatch {
        stage: u32,
        field: &'static str,
        stored: f64,
        fresh: f64,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub stage: u32,
    pub stable: ChannelVector,
    pub first: ChannelVector,
    pub t: f64,
    pub d: f64,
    pub mem_fwd: f64,
    pub mem_bwd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub version: u32,
    pub model_digest: String,
    pub cluster_digest: String,
    pub interference_digest: String,
    pub preset: String,
    pub options: TuneOptions,
    pub plan: TrainingPlan,
    pub costs: Vec<StageBreakdown>,
}

fn digest(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl PlanFile {
    pub fn new(
        cm: &CostModel,
        preset: &str,
        options: TuneOptions,
        plan: TrainingPlan,
    ) -> Result<Self, PlanError> {
        let ctx = plan.context(cm.cluster.mem_budget());
        let mut costs = Vec::with_capacity(plan.stages.len());
        for s in &plan.stages {
            let (stable, first) = cm.time_components(&s.config, &ctx)?;
            costs.push(StageBreakdown {
                stage: s.config.stage,
                stable,
                first,
                t: s.t,
                d: s.d,
                mem_fwd: s.mem_fwd,
                mem_bwd: s.mem_bwd,
            });
        }
        Ok(PlanFile {
            version: PLAN_VERSION,
            model_digest: cm.model.digest(),
            cluster_digest: cm.cluster.digest(),
            interference_digest: digest(&cm.params.to_toml()),
            preset: preset.to_string(),
            options,
            plan,
            costs,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan files serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        #[derive(Deserialize)]
        struct Head {
            version: u32,
        }
        let head: Head =
            toml::from_str(text).map_err(|e| PlanError::Parse(e.message().to_string()))?;
        if head.version != PLAN_VERSION {
            return Err(PlanError::Version {
                found: head.version,
            });
        }
        toml::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlanError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelinePlan {
        PipelinePlan {
            g: self.plan.g,
            stages: self.plan.timings(),
            configs: Some(self.plan.stages.iter().map(|s| s.config).collect()),
        }
    }

    /// Checks digests and re-derives every stored number bitwise.
    pub fn verify(&self, cm: &CostModel) -> Result<(), PlanError> {
        if cm.model.digest() != self.model_digest {
            return Err(PlanError::Digest("model"));
        }
        if cm.cluster.digest() != self.cluster_digest {
            return Err(PlanError::Digest("cluster"));
        }
        if digest(&cm.params.to_toml()) != self.interference_digest {
            return Err(PlanError::Digest("interference"));
        }
        let ctx = self.plan.context(cm.cluster.mem_budget());
        let same = |stage: u32, field: &'static str, stored: f64, fresh: f64| {
            if stored.to_bits() == fresh.to_bits() {
                Ok(())
            } else {
                Err(PlanError::Mismatch {
                    stage,
                    field,
                    stored,
                    fresh,
                })
            }
        };
        for s in &self.plan.stages {
            let k = cm.evaluate(&s.config, &ctx)?;
            let i = s.config.stage;
            same(i, "t", s.t, k.t)?;
            same(i, "d", s.d, k.d)?;
            same(i, "mem_fwd", s.mem_fwd, k.mem_fwd)?;
            same(i, "mem_bwd", s.mem_bwd, k.mem_bwd)?;
        }
        let fresh = objective_unchecked(self.plan.g, &self.plan.timings());
        same(0, "objective", self.plan.objective, fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::InterferenceParams;
    use crate::intertuner::tune;
    use crate::intratuner::SearchSpace;
    use crate::workload::tests::{cluster, gpt};
    use crate::workload::OpTimeTable;

    fn small() -> (CostModel, PlanFile) {
        let cm = CostModel::new(
            gpt(4, 512, 8),
            cluster(1, 4),
            OpTimeTable::default(),
            InterferenceParams::default(),
        )
        .unwrap();
        let opts = TuneOptions {
            space: SearchSpace::full(2),
            frontier_cap: 8,
            jobs: 1,
            max_stages: None,
        };
        let plan = tune(&cm, 8, &opts).unwrap();
        let pf = PlanFile::new(&cm, "full", opts, plan).unwrap();
        (cm, pf)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cm, pf) = small();
        let text = pf.to_toml();
        let back = PlanFile::from_toml(&text).unwrap();
        assert_eq!(back, pf);
        assert_eq!(back.to_toml(), text);
        back.verify(&cm).unwrap();
    }

    #[test]
    fn version_is_checked() {
        let (_, pf) = small();
        let text = pf.to_toml().replacen("version = 1", "version = 7", 1);
        assert!(matches!(
            PlanFile::from_toml(&text),
            Err(PlanError::Version { found: 7 })
        ));
    }

    #[test]
    fn tampering_is_detected() {
        let (cm, mut pf) = small();
        pf.plan.stages[0].t *= 1.0 + f64::EPSILON;
        assert!(matches!(pf.verify(&cm), Err(PlanError::Mismatch { .. })));
    }
}
