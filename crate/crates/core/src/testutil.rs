//! Small end-to-end fixtures shared by unit tests.

use crate::corpus::{
    build_catalog, generate_synthetic, leave_one_out_split, DatasetSplit, SyntheticConfig,
};
use crate::nanolm::ModelConfig;
use crate::prompts::{TemplateSet, Vocabulary};
use crate::recommender::Recommender;
use crate::wals::{fit_wals, Interactions, WalsConfig};

pub struct Fixture {
    pub split: DatasetSplit,
    pub templates: TemplateSet,
    pub vocab: Vocabulary,
    pub model_config: ModelConfig,
    pub cf: crate::wals::CfModel,
}

pub fn fixture(seed: u64) -> Fixture {
    let data = SyntheticConfig {
        n_users: 24,
        n_items: 20,
        n_clusters: 4,
        items_per_user: 6,
        noise_rate: 0.1,
        seed,
    };
    let log = generate_synthetic(&data).unwrap();
    let catalog = build_catalog(&log);
    let split = leave_one_out_split(&log, &catalog).unwrap();
    let templates = TemplateSet::shipped();
    let vocab = Vocabulary::build(
        &templates,
        catalog.len(),
        &log.dataset_name,
        split.n_users(),
    )
    .unwrap();
    let wals = WalsConfig {
        d_cf: 8,
        n_sweeps: 4,
        seed,
        ..WalsConfig::default()
    };
    let cf = fit_wals(&Interactions::from_train_split(&split).unwrap(), &wals).unwrap();
    let model_config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 0,
        max_seq_len: 64,
        seed,
    };
    Fixture {
        split,
        templates,
        vocab,
        model_config,
        cf,
    }
}

impl Fixture {
    pub fn embedding_model(&self) -> Recommender {
        Recommender::with_embeddings(
            self.vocab.clone(),
            &self.model_config,
            self.cf.clone(),
            16,
            3,
        )
        .unwrap()
    }

    pub fn text_model(&self) -> Recommender {
        Recommender::text_only(self.vocab.clone(), &self.model_config).unwrap()
    }
}
