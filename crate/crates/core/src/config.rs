//! Hyperparameters. Every struct serializes to JSON with defaults for
//! omitted fields and rejects unknown ones.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenes::SceneSpec;
use crate::selection::stride_for_patch;

/// Architecture and selection settings shared by all four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image channels.
    pub channels: usize,
    /// Square patch width `p_w`.
    pub patch: usize,
    /// Replicate padding `n_pad` applied before patch extraction.
    pub pad: usize,
    /// List length used in training.
    pub k: usize,
    pub eta_dim: usize,
    /// Blob width; `p_w / 10` when absent.
    pub sigma: Option<f64>,
    /// Perturbation scale of the differentiable top-k.
    pub topk_noise: f64,
    pub topk_samples: usize,
    pub scorer_width: usize,
    pub feature_width: usize,
    pub unet_width: usize,
    pub patchgan_width: usize,
    pub list_disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            patch: 16,
            pad: 4,
            k: 3,
            eta_dim: 3,
            sigma: None,
            topk_noise: 0.05,
            topk_samples: 8,
            scorer_width: 8,
            feature_width: 16,
            unet_width: 16,
            patchgan_width: 16,
            list_disc_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        stride_for_patch(self.patch)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.patch as f64 / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.channels == 0 || self.patch < 4 || self.k == 0 {
            return bad("channels, k must be positive and patch at least 4");
        }
        if !(self.sigma() > 0.0) || !self.sigma().is_finite() {
            return bad("sigma must be positive");
        }
        if !(self.topk_noise >= 0.0) || !self.topk_noise.is_finite() {
            return bad("topk_noise must be non-negative");
        }
        if [self.scorer_width, self.feature_width, self.unet_width, self.patchgan_width, self.list_disc_width]
            .contains(&0)
        {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

/// Weights of the generator objective and the list-cycle terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dis_l: f64,
    pub dis_i: f64,
    pub cyc_i: f64,
    pub cyc_l: f64,
    pub pres: f64,
    pub loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dis_l: 1.0,
            dis_i: 1.0,
            cyc_i: 10.0,
            cyc_l: 10.0,
            pres: 2.0,
            loc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dis_l, self.dis_i, self.cyc_i, self.cyc_l, self.pres, self.loc];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Base rate of both discriminators before warm-up scaling.
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Power iterations used when spectral state is first created.
    pub spectral_init_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            disc_lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 2000,
            batch: 4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            spectral_init_iters: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..f64::INFINITY).contains(&self.lr)
            && (0.0..f64::INFINITY).contains(&self.disc_lr)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.warmup_steps >= 1
            && self.batch >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid training settings".into()))
        }
    }
}

/// Everything that defines a run. Serializes to one JSON document whose
/// digest identifies the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    /// Directory of synthesized scenes used as the image domain.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub out: Option<String>,
}

impl RunConfig {
    /// Reduced Tetrominoes: 32×32 scenes with two objects, lists of three
    /// rows with three features, 12-pixel patches.
    pub fn mini_tetrominoes() -> Self {
        let scene = SceneSpec::mini_tetrominoes();
        RunConfig {
            model: ModelConfig {
                patch: 12,
                pad: 2,
                k: scene.k,
                eta_dim: 3,
                ..ModelConfig::default()
            },
            scene,
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            dataset: None,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.scene.k != self.model.k {
            return Err(Error::InvalidArgument(format!(
                "scene lists have {} rows but the model uses k = {}",
                self.scene.k, self.model.k
            )));
        }
        if self.scene.height < self.model.patch || self.scene.width < self.model.patch {
            return Err(Error::InvalidArgument("scenes are smaller than one patch".into()));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparameter_rules() {
        let c = ModelConfig::default();
        assert_eq!((c.stride(), c.sigma()), (2, 1.6));
        for p in 4..100 {
            let c = ModelConfig { patch: p, ..ModelConfig::default() };
            assert_eq!(c.stride(), p.div_ceil(8));
            assert_eq!(c.sigma(), p as f64 / 10.0);
        }
    }

    #[test]
    fn run_config_round_trips_with_its_digest() {
        let cfg = RunConfig::mini_tetrominoes();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(cfg.to_json().as_bytes()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let other = RunConfig {
            train: TrainConfig { seed: 1, ..cfg.train.clone() },
            ..cfg.clone()
        };
        assert_ne!(other.digest(), cfg.digest());
    }

    #[test]
    fn rejects_unknown_fields_and_mismatched_k() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"patchh": 3}"#).is_err());
        let mut cfg = RunConfig::mini_tetrominoes();
        cfg.model.k = 4;
        assert!(cfg.validate().is_err());
        let json = r#"{"scene": {"kind":"sprites","height":64,"width":64,"k":3,"count_weights":[1],"min_distance":-1,"palette":[[1,2,3]],"background":[0,0,0],"shapes":["circle"],"sizes":[3]}}"#;
        assert!(RunConfig::from_json(json.as_bytes()).is_err());
    }
}
