//! The single JSON document describing an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use taililc::dpca::DpcaOptions;
use taililc::ilc::{ExpertSettings, IlcDesign};
use taililc::mlp::{MlpArchitecture, TrainConfig};
use taililc::plant::{ControllerConfig, ParasiticMode, PlantConfig};
use taililc::policies::{ExpertBase, FeatureSet, LatentDim, NnIlcConfig, Source, TailConfig};
use taililc::setpoint::{ParameterGrid, TestSelector};

use crate::error::{HarnessError, Result};
use crate::manifest::Stage;
use crate::store::sha256_hex;

/// Overrides `output_dir` when set.
pub const OUTPUT_ENV: &str = "TAILILC_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    pub ilc: IlcDesign,
    pub expert: ExpertSettings,
    pub expert_base: ExpertBase,
    pub grid: ParameterGrid,
    pub split: TestSelector,
    pub tail: TailConfig,
    pub nn_ilc: NnIlcConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// 70 references (60 train / 10 test) on a 2 kg stage with a 60 Hz mode.
    pub fn desk() -> Self {
        Self {
            plant: PlantConfig {
                mass: 2.0,
                modes: vec![ParasiticMode { freq_hz: 60.0, damping: 0.03, gain: 0.25 }],
                ts: 1e-3,
            },
            controller: ControllerConfig::default(),
            ilc: IlcDesign { lambda: None, q_cutoff_hz: Some(100.0), learning_gain: None },
            expert: ExpertSettings::default(),
            expert_base: ExpertBase::MassFeedforward,
            grid: ParameterGrid {
                displacement: vec![0.02, 0.025, 0.03, 0.035, 0.04, 0.045, 0.05],
                v_max: vec![0.06, 0.075, 0.09, 0.105, 0.12],
                a_max: vec![1.5, 2.5],
                j_max: vec![100.0],
                s_max: vec![5000.0],
            },
            split: TestSelector::EveryNth(7),
            tail: TailConfig {
                latent: LatentDim::Full,
                encoder_latent: Some(LatentDim::Fixed { n_l: 8 }),
                hidden: vec![128, 128, 128],
                train: TrainConfig {
                    learning_rate: 1e-3,
                    epochs: 5000,
                    batch_size: 128,
                    init_seed: 11,
                    shuffle_seed: 12,
                    ..Default::default()
                },
                dpca: DpcaOptions::default(),
            },
            nn_ilc: NnIlcConfig {
                features: FeatureSet::PosVelAccJerk,
                hidden: vec![6, 6, 6],
                train: TrainConfig {
                    learning_rate: 1e-3,
                    epochs: 5000,
                    batch_size: 128,
                    init_seed: 21,
                    shuffle_seed: 22,
                    ..Default::default()
                },
            },
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.plant.validate().map_err(|e| HarnessError::Config(format!("plant: {e}")))?;
        let g = &self.grid;
        for (name, v) in [
            ("displacement", &g.displacement),
            ("v_max", &g.v_max),
            ("a_max", &g.a_max),
            ("j_max", &g.j_max),
            ("s_max", &g.s_max),
        ] {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return bad(format!("grid.{name} must be a nonempty list of finite values"));
            }
        }
        if matches!(self.split, TestSelector::EveryNth(n) if n < 2) {
            return bad("split.every_nth must be at least 2".into());
        }
        if let Some(q) = self.ilc.q_cutoff_hz {
            if !(q > 0.0 && q < 0.5 / self.plant.ts) {
                return bad(format!("ilc.q_cutoff_hz {q} must lie in (0, Nyquist)"));
            }
        }
        if self.expert.max_trials == 0 || !(self.expert.tol > 0.0) {
            return bad("expert needs max_trials >= 1 and tol > 0".into());
        }
        for (name, latent) in [("tail.latent", Some(&self.tail.latent)), ("tail.encoder_latent", self.tail.encoder_latent.as_ref())] {
            match latent {
                Some(LatentDim::Fixed { n_l: 0 }) => return bad(format!("{name}: n_l must be >= 1")),
                Some(LatentDim::Auto { budget, candidates }) if candidates.is_empty() || !(*budget >= 0.0) => {
                    return bad(format!("{name}: auto selection needs candidates and a budget >= 0"))
                }
                _ => {}
            }
        }
        for (name, hidden, train) in [
            ("tail", &self.tail.hidden, &self.tail.train),
            ("nn_ilc", &self.nn_ilc.hidden, &self.nn_ilc.train),
        ] {
            MlpArchitecture::new(1, hidden, 1).map_err(|e| HarnessError::Config(format!("{name}.hidden: {e}")))?;
            train.validate(usize::MAX).map_err(|e| HarnessError::Config(format!("{name}.train: {e}")))?;
            if train.epochs == 0 {
                return bad(format!("{name}.train.epochs must be >= 1"));
            }
        }
        Ok(())
    }

    /// Output directory, honoring the environment override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    /// Content hash of everything that can change the outputs of `stage`.
    /// `sources` only enters the evaluation hash.
    pub fn fingerprint(&self, stage: Stage, sources: &[Source]) -> String {
        let gen = json!({ "ts": self.plant.ts, "grid": self.grid, "split": self.split });
        let label = json!({
            "gen": gen,
            "plant": self.plant,
            "controller": self.controller,
            "ilc": self.ilc,
            "expert": self.expert,
            "expert_base": self.expert_base,
        });
        let value = match stage {
            Stage::Gen => gen,
            Stage::Label => label,
            Stage::TrainTail => json!({ "label": label, "tail": self.tail }),
            Stage::TrainNnIlc => json!({ "label": label, "nn_ilc": self.nn_ilc }),
            Stage::Eval => json!({
                "label": label,
                "tail": self.tail,
                "nn_ilc": self.nn_ilc,
                "sources": sources.iter().map(|s| s.name()).collect::<Vec<_>>(),
            }),
        };
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn config_fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        sha256_hex(v.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.grid.len(), 70);
    }

    #[test]
    fn fingerprints_follow_dependencies() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.tail.train.epochs += 1;
        let all = Source::ALL;
        assert_eq!(a.fingerprint(Stage::Label, &all), b.fingerprint(Stage::Label, &all));
        assert_eq!(a.fingerprint(Stage::TrainNnIlc, &all), b.fingerprint(Stage::TrainNnIlc, &all));
        assert_ne!(a.fingerprint(Stage::TrainTail, &all), b.fingerprint(Stage::TrainTail, &all));
        assert_ne!(a.fingerprint(Stage::Eval, &all), b.fingerprint(Stage::Eval, &all));
        assert_ne!(a.fingerprint(Stage::Eval, &all), a.fingerprint(Stage::Eval, &[Source::MassFf]));
        let mut c = a.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(a.config_fingerprint(), c.config_fingerprint());
        c.plant.mass = 3.0;
        assert_eq!(a.fingerprint(Stage::Gen, &all), c.fingerprint(Stage::Gen, &all));
        assert_ne!(a.fingerprint(Stage::Label, &all), c.fingerprint(Stage::Label, &all));
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut cfg = ExperimentConfig::desk();
        cfg.grid.v_max.clear();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = ExperimentConfig::desk();
        cfg.ilc.q_cutoff_hz = Some(900.0);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk();
        cfg.tail.hidden = vec![0];
        assert!(cfg.validate().is_err());
        let unknown = serde_json::to_string(&ExperimentConfig::desk()).unwrap().replacen('{', "{\"entropy\":true,", 1);
        assert!(serde_json::from_str::<ExperimentConfig>(&unknown).is_err());
    }
}
