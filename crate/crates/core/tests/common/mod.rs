//! Small shared fixtures: a thin grid corpus and a briefly pretrained base.

#![allow(dead_code)]

use phyc_core::dataset::{
    generate_grid, pretrain_items, ConceptDataset, ConceptOptions, Corpus, GridOptions, Transform,
};
use phyc_core::trainer::{pretrain, BaseModel, PretrainConfig, TrainConfig};

pub fn corpus(per_cell: usize) -> Corpus {
    generate_grid(GridOptions {
        per_cell,
        ..GridOptions::default()
    })
    .unwrap()
}

/// Enough pretraining that the zero-initialized output head carries signal.
pub fn base(corpus: &Corpus) -> BaseModel {
    let items = pretrain_items::<&str>(corpus, &[]).unwrap();
    let config = PretrainConfig {
        steps: 30,
        batch: 4,
        ..PretrainConfig::default()
    };
    pretrain(&config, &corpus.manifest.vocabulary, &items, |_, _| {}).unwrap()
}

pub fn concept(corpus: &Corpus) -> ConceptDataset {
    ConceptDataset::from_grid(
        corpus,
        "square",
        Transform::Melt,
        ConceptOptions::default(),
        0,
    )
    .unwrap()
}

pub fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        lr: 1e-3,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}
