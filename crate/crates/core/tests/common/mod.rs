#![allow(dead_code)]

//! Shared fixtures for the integration suites: a miniature synthetic cohort
//! wired into a training dataset.

use anatgraph_core::encoders::ModelConfig;
use anatgraph_core::patch_graph::{build_atlas_grid, build_patient_graph, default_rho_mm};
use anatgraph_core::synth::{generate_cohort, ClassTexture, Cohort, SynthConfig};
use anatgraph_core::trainer::{TrainDataset, TrainSubject};

/// Small but end-to-end real: 32^3 atlas, 16^3 patches, 8 regions.
pub fn mini_synth_config(subjects: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        atlas_dim: 32,
        subjects,
        patch_size: 16,
        step: 16,
        lesion_min_mm: [10.0; 3],
        lesion_max_mm: [24.0; 3],
        classes: vec![
            ClassTexture { frequency: 0.12, amplitude: 0.05 },
            ClassTexture { frequency: 0.24, amplitude: 0.22 },
        ],
        seed,
        ..SynthConfig::default()
    }
}

/// Encoder sized for 16^3 patches with few parameters.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        patch_size: 16,
        conv_channels: vec![2, 4, 4, 8],
        conv_strides: vec![2, 2, 2, 2],
        feature_dim: 8,
        momentum: 0.9,
        normalize_embeddings: true,
    }
}

pub fn dataset_from_cohort(cohort: &Cohort, patch_size: usize, step: usize) -> TrainDataset {
    let grid = build_atlas_grid(&cohort.atlas, &cohort.mask, patch_size, step).unwrap();
    let rho = default_rho_mm(step, cohort.atlas.spacing);
    let subjects = cohort
        .subjects
        .iter()
        .map(|s| {
            let g = build_patient_graph(&s.id, &s.volume, &s.transform, &grid, rho).unwrap();
            TrainSubject { id: s.id.clone(), patches: g.patches, a_norm: g.adjacency_norm }
        })
        .collect();
    TrainDataset { subjects, centers_norm: grid.centers_normalized() }
}

pub fn mini_dataset(subjects: usize, seed: u64) -> TrainDataset {
    let cfg = mini_synth_config(subjects, seed);
    let cohort = generate_cohort(&cfg).unwrap();
    dataset_from_cohort(&cohort, cfg.patch_size, cfg.step)
}
