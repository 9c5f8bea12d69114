//! Shared fixtures for the benchmarks.

use cenet_core::synthetic::SyntheticSpec;
use cenet_core::{
    build_split_contexts, classifier::Classifier, ModelParams, SplitContexts, TkgDataset,
};

pub struct Fixture {
    pub dataset: TkgDataset,
    pub contexts: SplitContexts,
    pub params: ModelParams,
}

/// Synthetic recurrent/novel mix with an untrained model and classifier.
pub fn fixture(num_entities: usize, dim: usize) -> Fixture {
    let dataset = SyntheticSpec {
        num_entities,
        num_relations: 10,
        granules: 40,
        recurrent_pairs: 200,
        novel_fraction: 0.4,
        valid_granules: 4,
        test_granules: 4,
        seed: 0,
    }
    .generate()
    .expect("synthetic spec is valid");
    let contexts = build_split_contexts(&dataset).expect("generated data is sorted");
    let mut params = ModelParams::init(dataset.num_entities, dataset.num_relations_total(), dim, 0);
    params.classifier = Some(Classifier::init(dim, 1));
    Fixture {
        dataset,
        contexts,
        params,
    }
}
