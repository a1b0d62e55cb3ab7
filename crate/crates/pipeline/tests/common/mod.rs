#![allow(dead_code)]

use std::path::Path;

use vispromo::config::DatasetConfig;
use vispromo::synthetic::SyntheticCorpusSpec;
use vispromo::{RunConfig, RunDir};

/// A corpus and training budget small enough to run every stage in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, core: 5, target_threshold: 10, ..RunConfig::default() };
    cfg.dataset = DatasetConfig::Synthetic(SyntheticCorpusSpec {
        users: 80,
        items: 40,
        side: 16,
        concepts: 4,
        min_per_user: 6,
        max_per_user: 10,
        core: 5,
        seed,
        ..SyntheticCorpusSpec::default()
    });
    cfg.extractor.feature_dim = 16;
    cfg.extractor.pretrain_epochs = 2;
    cfg.recommender.latent_dim = 8;
    cfg.recommender.visual_dim = 8;
    cfg.recommender.vbpr_epochs = 3;
    cfg.recommender.dvbpr_epochs = 2;
    cfg.recommender.amr_epochs = 3;
    cfg.diffusion.epochs = 1;
    cfg.diffusion.base_channels = 8;
    cfg.diffusion.eval_samples = 16;
    cfg.cluster.k = 3;
    cfg.attack.epochs = 3;
    cfg.attack.steps = 5;
    cfg.aip.epochs = 10;
    cfg
}

pub fn tiny_run(root: &Path, seed: u64) -> RunDir {
    RunDir::create(root, tiny_config(seed)).expect("tiny config is valid")
}
