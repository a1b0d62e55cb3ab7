//! TOML run configuration. Every section has defaults, so an empty file is
//! a valid config; all seeds are derived from the single top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vispromo_core::attack::{AipConfig, AttackConfig};
use vispromo_core::diffusion::{DenoiserConfig, DiffusionTrainConfig};
use vispromo_core::recsys::{AdversaryConfig, ModelConfig, ModelKind, TrainConfig};
use vispromo_core::rng::derive_seed;
use vispromo_core::visual::PretrainConfig;
use vispromo_core::{Error, Result};

use crate::synthetic::SyntheticCorpusSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticCorpusSpec),
    Files { interactions: PathBuf, images: PathBuf, side: usize },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticCorpusSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSection {
    pub feature_dim: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self { feature_dim: 128, pretrain_epochs: 30, pretrain_lr: 2e-3, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommenderSection {
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub l2_reg: f64,
    pub adversary_eps: f64,
    pub adversary_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub vbpr_epochs: usize,
    pub dvbpr_epochs: usize,
    pub amr_epochs: usize,
}

impl Default for RecommenderSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default_for(ModelKind::Vbpr);
        Self {
            latent_dim: m.latent_dim,
            visual_dim: m.visual_dim,
            l2_reg: m.l2_reg,
            adversary_eps: m.adversary.eps,
            adversary_weight: m.adversary.weight,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            vbpr_epochs: TrainConfig::default_for(ModelKind::Vbpr).epochs,
            dvbpr_epochs: TrainConfig::default_for(ModelKind::Dvbpr).epochs,
            amr_epochs: TrainConfig::default_for(ModelKind::Amr).epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub t_max: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub base_channels: usize,
    pub eval_samples: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        Self {
            t_max: vispromo_core::diffusion::DEFAULT_T_MAX,
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            base_channels: d.net.base_channels,
            eval_samples: d.eval_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { k: vispromo_core::visual::cluster::DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub eps_max: f64,
    pub epochs: usize,
    pub steps: usize,
    pub guidance: f64,
    pub lr: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self { eps_max: a.eps_max, epochs: a.epochs, steps: a.steps, guidance: a.guidance, lr: a.lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AipSection {
    pub eps_max: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for AipSection {
    fn default() -> Self {
        let a = AipConfig::default();
        Self { eps_max: a.eps_max, epochs: a.epochs, lr: a.lr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposureDenominator {
    /// Every user counts, including those who already interacted with the target.
    #[default]
    AllUsers,
    /// Only users for whom the target is rankable.
    Eligible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub ks: Vec<usize>,
    pub exposure: ExposureDenominator,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { ks: vec![5, 10, 20], exposure: ExposureDenominator::AllUsers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub models: Vec<ModelKind>,
    /// k-core threshold applied while preparing the dataset.
    pub core: usize,
    /// Items with fewer interactions than this are attack targets.
    pub target_threshold: usize,
    pub dataset: DatasetConfig,
    pub extractor: ExtractorSection,
    pub recommender: RecommenderSection,
    pub diffusion: DiffusionSection,
    pub cluster: ClusterSection,
    pub attack: AttackSection,
    pub aip: AipSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            models: ModelKind::ALL.to_vec(),
            core: 10,
            target_threshold: 20,
            dataset: DatasetConfig::default(),
            extractor: ExtractorSection::default(),
            recommender: RecommenderSection::default(),
            diffusion: DiffusionSection::default(),
            cluster: ClusterSection::default(),
            attack: AttackSection::default(),
            aip: AipSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable digest of any serializable value (via its JSON form).
pub fn digest<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config values serialize"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn hash(&self) -> String {
        digest(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.evaluate.ks.is_empty() || self.evaluate.ks.contains(&0) {
            return Err(Error::invalid("evaluate.ks must be a nonempty list of positive ranks"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("at least one model is required"));
        }
        if self.core == 0 || self.target_threshold == 0 {
            return Err(Error::invalid("core and target_threshold must be at least 1"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => spec.validate()?,
            DatasetConfig::Files { side, .. } => {
                if *side == 0 || side % 8 != 0 {
                    return Err(Error::invalid("dataset.side must be a positive multiple of 8"));
                }
            }
        }
        if self.extractor.feature_dim == 0 || self.extractor.pretrain_epochs == 0 || self.extractor.batch_size == 0 {
            return Err(Error::invalid("extractor settings must be positive"));
        }
        for kind in &self.models {
            self.train_config(*kind).validate()?;
        }
        if self.cluster.k < 2 {
            return Err(Error::invalid("cluster.k must be at least 2"));
        }
        if self.diffusion.t_max == 0 || self.diffusion.epochs == 0 || self.diffusion.batch_size == 0 {
            return Err(Error::invalid("diffusion settings must be positive"));
        }
        self.attack_config().validate(self.diffusion.t_max)?;
        let aip = self.aip_config();
        if !(aip.eps_max > 0.0 && aip.eps_max <= 255.0) || aip.epochs == 0 || !(aip.lr > 0.0) {
            return Err(Error::invalid("aip settings are out of range"));
        }
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.side,
            DatasetConfig::Files { side, .. } => *side,
        }
    }

    fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn split_seed(&self) -> u64 {
        self.seed_for("split")
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.extractor.pretrain_epochs,
            lr: self.extractor.pretrain_lr,
            batch_size: self.extractor.batch_size,
            seed: self.seed_for("extractor"),
        }
    }

    pub fn extractor_init_seed(&self) -> u64 {
        self.seed_for("extractor-init")
    }

    pub fn model_config(&self) -> ModelConfig {
        let r = &self.recommender;
        ModelConfig {
            latent_dim: r.latent_dim,
            visual_dim: r.visual_dim,
            l2_reg: r.l2_reg,
            adversary: AdversaryConfig { eps: r.adversary_eps, weight: r.adversary_weight },
        }
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let r = &self.recommender;
        let epochs = match kind {
            ModelKind::Vbpr => r.vbpr_epochs,
            ModelKind::Dvbpr => r.dvbpr_epochs,
            ModelKind::Amr => r.amr_epochs,
        };
        // VBPR and AMR share a seed so that AMR differs only by its adversary
        let label = if kind == ModelKind::Dvbpr { "train-dvbpr" } else { "train-vbpr-family" };
        TrainConfig { epochs, lr: r.lr, weight_decay: r.weight_decay, batch_size: r.batch_size, seed: self.seed_for(label) }
    }

    pub fn diffusion_config(&self, side: usize) -> DiffusionTrainConfig {
        let d = &self.diffusion;
        DiffusionTrainConfig {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            seed: self.seed_for("diffusion"),
            net: DenoiserConfig { side, base_channels: d.base_channels },
            eval_samples: d.eval_samples,
        }
    }

    pub fn cluster_seed(&self) -> u64 {
        self.seed_for("cluster")
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            eps_max: a.eps_max,
            epochs: a.epochs,
            steps: a.steps,
            guidance: a.guidance,
            lr: a.lr,
            seed: self.seed_for("attack"),
            no_clustering: false,
            no_perturbation: false,
        }
    }

    pub fn aip_config(&self) -> AipConfig {
        AipConfig { eps_max: self.aip.eps_max, epochs: self.aip.epochs, lr: self.aip.lr, seed: self.seed_for("aip") }
    }
}
