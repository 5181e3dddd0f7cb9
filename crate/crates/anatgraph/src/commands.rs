//! The six subcommands as library functions; `main` only parses arguments
//! and maps errors to exit codes. Integration tests call these directly.

use std::collections::BTreeMap;
use std::path::Path;

use anatgraph_core::encoders::{EncoderParams, GraphParams};
use anatgraph_core::error::{Error, Result};
use anatgraph_core::explain::{activation_graph, render_map};
use anatgraph_core::patch_graph::{build_atlas_grid, build_patient_graph, AtlasGrid};
use anatgraph_core::probe::{
    fit_linear, fit_logistic, kfold_linear, kfold_logistic, ProbeResult,
};
use anatgraph_core::rng::Stream;
use anatgraph_core::synth::generate_cohort;
use anatgraph_core::tensor::Tensor;
use anatgraph_core::trainer::{
    extract_subject_features, load_query_model, train_until, TrainDataset, TrainSubject,
    TrainerState,
};
use anatgraph_core::volume::Volume;

use crate::config::RunConfig;
use crate::iofs::{
    self, ExplainOutput, FileSink, FullModel, GraphExport, Manifest, ManifestConfig,
    ManifestSubject, ProbeOutput,
};
use crate::parallel_map;

/// Generate a synthetic cohort and write it to `out_dir`: one RVOL and RTFM
/// per subject, the atlas and mask, class/severity label CSVs, and the
/// manifest.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    let synth_cfg = cfg.synth_config();
    let cohort = generate_cohort(&synth_cfg)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Sink { detail: format!("{}: {e}", out_dir.display()) })?;

    iofs::write_volume(&out_dir.join("atlas.rvol"), &cohort.atlas)?;
    iofs::write_volume(&out_dir.join("mask.rvol"), &cohort.mask)?;

    let results = parallel_map(
        cohort.subjects.iter().collect::<Vec<_>>(),
        cfg.workers,
        |subject| -> Result<ManifestSubject> {
            let vol_name = format!("{}.rvol", subject.id);
            let tfm_name = format!("{}.rtfm", subject.id);
            iofs::write_volume(&out_dir.join(&vol_name), &subject.volume)?;
            iofs::write_transform(&out_dir.join(&tfm_name), &subject.transform)?;
            Ok(ManifestSubject {
                id: subject.id.clone(),
                volume: vol_name,
                transform: tfm_name,
                label: subject.label,
                severity: subject.severity,
                lesion_nodes: cohort.lesion_nodes.clone(),
            })
        },
    );
    let subjects: Vec<ManifestSubject> = results.into_iter().collect::<Result<_>>()?;

    let class_rows: Vec<(String, f64)> =
        cohort.subjects.iter().map(|s| (s.id.clone(), s.label as f64)).collect();
    let severity_rows: Vec<(String, f64)> =
        cohort.subjects.iter().map(|s| (s.id.clone(), s.severity as f64)).collect();
    iofs::write_labels_csv(&out_dir.join("labels_class.csv"), &class_rows)?;
    iofs::write_labels_csv(&out_dir.join("labels_severity.csv"), &severity_rows)?;

    let manifest = Manifest {
        version: 1,
        seed: cfg.seed,
        config: ManifestConfig {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash: cfg.hash(),
            atlas: "atlas.rvol".to_string(),
            mask: "mask.rvol".to_string(),
            run: cfg.clone(),
        },
        subjects,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn load_grid(cfg: &RunConfig, cohort_dir: &Path, manifest: &Manifest) -> Result<(AtlasGrid, Volume)> {
    let atlas = iofs::read_volume(&cohort_dir.join(&manifest.config.atlas), cfg.data.hu_window)?;
    let mask = iofs::read_volume(&cohort_dir.join(&manifest.config.mask), false)?;
    let grid = build_atlas_grid(&atlas, &mask, cfg.grid.patch_size, cfg.grid.step)?;
    Ok((grid, atlas))
}

/// Build every subject's patch graph from the cohort on disk.
fn build_dataset(
    cfg: &RunConfig,
    cohort_dir: &Path,
    manifest: &Manifest,
    grid: &AtlasGrid,
) -> Result<TrainDataset> {
    let rho = cfg.rho_mm(grid.spacing);
    let hu = cfg.data.hu_window;
    let subjects = parallel_map(
        manifest.subjects.iter().collect::<Vec<_>>(),
        cfg.workers,
        |record| -> Result<TrainSubject> {
            let (vol, tfm) = iofs::load_subject(cohort_dir, record, hu)?;
            let graph = build_patient_graph(&record.id, &vol, &tfm, grid, rho)?;
            Ok(TrainSubject { id: record.id.clone(), patches: graph.patches, a_norm: graph.adjacency_norm })
        },
    )
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrainDataset { subjects, centers_norm: grid.centers_normalized() })
}

/// Export every subject's graph (centers, thresholded edges) as JSON.
pub fn cmd_graph(cfg: &RunConfig, cohort_dir: &Path, out_dir: &Path) -> Result<usize> {
    let manifest = Manifest::load(cohort_dir)?;
    let (grid, _atlas) = load_grid(cfg, cohort_dir, &manifest)?;
    let rho = cfg.rho_mm(grid.spacing);
    let hu = cfg.data.hu_window;
    let results = parallel_map(
        manifest.subjects.iter().collect::<Vec<_>>(),
        cfg.workers,
        |record| -> Result<()> {
            let (vol, tfm) = iofs::load_subject(cohort_dir, record, hu)?;
            let graph = build_patient_graph(&record.id, &vol, &tfm, &grid, rho)?;
            let n = graph.centers_mm.len();
            let mut edges = Vec::new();
            for j in 0..n {
                for k in (j + 1)..n {
                    if graph.adjacency.data()[j * n + k] > 0.5 {
                        edges.push([j, k]);
                    }
                }
            }
            let export = GraphExport {
                subject_id: record.id.clone(),
                n,
                centers_mm: graph.centers_mm.clone(),
                edges,
                rho_mm: rho,
            };
            iofs::write_json(&out_dir.join(format!("{}.graph.json", record.id)), &export)
        },
    );
    let count = results.len();
    results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(count)
}

fn meta_tensors(cfg: &RunConfig) -> BTreeMap<String, Tensor> {
    let mut meta = BTreeMap::new();
    let hash = cfg.hash_bytes();
    meta.insert(
        "meta.config_hash".to_string(),
        Tensor::new(&[32], hash.iter().map(|&b| b as f32).collect()).expect("hash tensor"),
    );
    let version: Vec<f32> = crate::TOOL_VERSION
        .split('.')
        .map(|part| part.parse::<f32>().unwrap_or(0.0))
        .collect();
    meta.insert(
        "meta.tool_version".to_string(),
        Tensor::new(&[version.len()], version).expect("version tensor"),
    );
    meta
}

fn verify_checkpoint_hash(cfg: &RunConfig, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let stored = entries
        .get("meta.config_hash")
        .ok_or_else(|| Error::config("checkpoint carries no config hash".to_string()))?;
    let expect = cfg.hash_bytes();
    let matches = stored.numel() == 32
        && stored.data().iter().zip(expect.iter()).all(|(a, &b)| *a as u8 == b);
    if !matches {
        return Err(Error::config(
            "checkpoint was produced with a different configuration (config hash mismatch)"
                .to_string(),
        ));
    }
    Ok(())
}

/// Train on a cohort directory; writes `model.ckpt` (rolling, every outer
/// step) and `metrics.jsonl` under `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    cohort_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    init_only: bool,
    stop_after: Option<u64>,
) -> Result<()> {
    let manifest = Manifest::load(cohort_dir)?;
    let (grid, _atlas) = load_grid(cfg, cohort_dir, &manifest)?;
    let dataset = build_dataset(cfg, cohort_dir, &manifest, &grid)?;
    dataset.validate()?;

    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let mut state = match resume {
        None => TrainerState::init(model_cfg, train_cfg, dataset.n_regions(), dataset.subjects.len())?,
        Some(path) => {
            let entries = iofs::read_checkpoint(path)?;
            verify_checkpoint_hash(cfg, &entries)?;
            TrainerState::from_named(
                model_cfg,
                train_cfg,
                dataset.n_regions(),
                dataset.subjects.len(),
                &entries,
            )?
        }
    };
    state.meta = meta_tensors(cfg);

    let mut sink = FileSink::create(out_dir, &cfg.hash())?;
    if init_only {
        let bytes = state.encode_checkpoint()?;
        iofs::write_bytes(&out_dir.join("model.ckpt"), &bytes)?;
        return sink.finish();
    }
    train_until(&mut state, &dataset, &mut sink, stop_after.unwrap_or(u64::MAX))?;
    sink.finish()
}

/// Frozen pooled features (head discarded, eval mode) for every subject.
pub fn cmd_extract(
    cfg: &RunConfig,
    cohort_dir: &Path,
    checkpoint: &Path,
    out_csv: &Path,
    per_node_csv: Option<&Path>,
) -> Result<()> {
    let manifest = Manifest::load(cohort_dir)?;
    let (grid, _atlas) = load_grid(cfg, cohort_dir, &manifest)?;
    let entries = iofs::read_checkpoint(checkpoint)?;
    let model_cfg = cfg.model_config();
    let (enc, gcn) = load_query_model(&model_cfg, &entries)?;
    let rho = cfg.rho_mm(grid.spacing);
    let centers_norm = grid.centers_normalized();
    let hu = cfg.data.hu_window;

    let results = parallel_map(
        manifest.subjects.iter().collect::<Vec<_>>(),
        cfg.workers,
        |record| -> Result<(String, Vec<f32>, Vec<Vec<f32>>)> {
            let (vol, tfm) = iofs::load_subject(cohort_dir, record, hu)?;
            let graph = build_patient_graph(&record.id, &vol, &tfm, &grid, rho)?;
            let subject = TrainSubject {
                id: record.id.clone(),
                patches: graph.patches,
                a_norm: graph.adjacency_norm,
            };
            let (mut enc, mut gcn) = (enc.clone(), gcn.clone());
            let (pooled, nodes) =
                extract_subject_features(&mut enc, &mut gcn, &subject, &centers_norm)?;
            let f = pooled.numel();
            let node_rows: Vec<Vec<f32>> =
                nodes.data().chunks(f).map(|row| row.to_vec()).collect();
            Ok((record.id.clone(), pooled.data().to_vec(), node_rows))
        },
    )
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let pooled_rows: Vec<(String, Vec<f32>)> =
        results.iter().map(|(id, pooled, _)| (id.clone(), pooled.clone())).collect();
    iofs::write_features_csv(out_csv, &cfg.hash(), &pooled_rows)?;
    if let Some(path) = per_node_csv {
        let node_rows: Vec<(String, Vec<Vec<f32>>)> =
            results.iter().map(|(id, _, nodes)| (id.clone(), nodes.clone())).collect();
        iofs::write_node_features_csv(path, &cfg.hash(), &node_rows)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    Regression,
    Classification,
}

/// Join features and labels by subject id, in feature-file order.
fn join_features_labels(
    features: &[(String, Vec<f32>)],
    labels: &[(String, f64)],
) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let by_id: BTreeMap<&str, f64> =
        labels.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    let f = features[0].1.len();
    let mut x = Vec::with_capacity(features.len() * f);
    let mut y = Vec::with_capacity(features.len());
    for (id, feats) in features {
        let target = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::config(format!("subject {id} has features but no label")))?;
        x.extend(feats.iter().map(|&v| v as f64));
        y.push(*target);
    }
    Ok((x, y, features.len(), f))
}

fn class_labels(y: &[f64]) -> Result<(Vec<usize>, usize)> {
    let mut labels = Vec::with_capacity(y.len());
    for &v in y {
        let rounded = v.round();
        if (v - rounded).abs() > 1e-9 || rounded < 0.0 {
            return Err(Error::config(format!(
                "classification target {v} is not a non-negative integer"
            )));
        }
        labels.push(rounded as usize);
    }
    let n_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    if n_classes < 2 {
        return Err(Error::config("classification needs at least 2 classes".to_string()));
    }
    Ok((labels, n_classes))
}

/// k-fold frozen-feature probe plus a refit on all subjects for explanation.
pub fn cmd_probe(
    cfg: &RunConfig,
    features_path: &Path,
    labels_path: &Path,
    task: ProbeTask,
    out_json: &Path,
) -> Result<ProbeOutput> {
    let features = iofs::read_features_csv(features_path)?;
    let labels = iofs::read_labels_csv(labels_path)?;
    let (x, y, n, f) = join_features_labels(&features, &labels)?;
    let k = cfg.probe.k;
    let lambda = cfg.probe.lambda;
    let stream = Stream::root(cfg.seed).derive("probe.folds");

    let (result, full_model): (ProbeResult, FullModel) = match task {
        ProbeTask::Regression => {
            let (result, _models) = kfold_linear(&x, &y, n, f, k, stream, lambda)?;
            let full = fit_linear(&x, &y, n, f, lambda)?;
            (result, FullModel::Linear { weights: full.weights, intercept: full.intercept })
        }
        ProbeTask::Classification => {
            let (labels, n_classes) = class_labels(&y)?;
            let (result, _models) = kfold_logistic(&x, &labels, n, f, n_classes, k, stream, lambda)?;
            let full = fit_logistic(&x, &labels, n, f, n_classes, lambda)?;
            (result, FullModel::Logistic { weights: full.weights, biases: full.biases })
        }
    };

    let output = ProbeOutput {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        metric: result.kind.as_str().to_string(),
        k,
        seed: cfg.seed,
        lambda,
        per_fold: result.per_fold.clone(),
        mean: result.mean,
        std: result.std,
        full_model,
    };
    iofs::write_json(out_json, &output)?;
    Ok(output)
}

/// Per-node activation scores for one subject under a fitted probe, with the
/// logit-reconstruction check, and optionally a rendered heatmap volume.
#[allow(clippy::too_many_arguments)]
pub fn cmd_explain(
    cfg: &RunConfig,
    cohort_dir: &Path,
    checkpoint: &Path,
    probe_json: &Path,
    subject_id: &str,
    target_class: usize,
    out_json: &Path,
    render: Option<&Path>,
) -> Result<ExplainOutput> {
    let manifest = Manifest::load(cohort_dir)?;
    let record = manifest.subject(subject_id)?;
    let (grid, _atlas) = load_grid(cfg, cohort_dir, &manifest)?;
    let entries = iofs::read_checkpoint(checkpoint)?;
    let (mut enc, mut gcn) = load_query_model(&cfg.model_config(), &entries)?;

    let (vol, tfm) = iofs::load_subject(cohort_dir, record, cfg.data.hu_window)?;
    let graph = build_patient_graph(&record.id, &vol, &tfm, &grid, cfg.rho_mm(grid.spacing))?;
    let subject = TrainSubject {
        id: record.id.clone(),
        patches: graph.patches.clone(),
        a_norm: graph.adjacency_norm.clone(),
    };
    let (_pooled, node_feats) =
        extract_subject_features(&mut enc, &mut gcn, &subject, &grid.centers_normalized())?;

    let probe: ProbeOutput = iofs::read_json(probe_json)?;
    let (weights, beta) = match &probe.full_model {
        FullModel::Linear { weights, intercept } => (weights.clone(), *intercept),
        FullModel::Logistic { weights, biases } => {
            let row = weights.get(target_class).ok_or_else(|| {
                Error::config(format!(
                    "target class {target_class} out of range for {} classes",
                    weights.len()
                ))
            })?;
            (row.clone(), biases[target_class])
        }
    };

    let act = activation_graph(&weights, beta, &node_feats, subject_id)?;
    let output = ExplainOutput {
        subject_id: act.subject_id.clone(),
        beta: act.beta,
        scores_raw: act.scores_raw.clone(),
        scores_norm: act.scores_norm.clone(),
        logit_check: act.logit_check,
        config_hash: cfg.hash(),
    };
    iofs::write_json(out_json, &output)?;

    if let Some(render_path) = render {
        let heat = render_map(
            &act.scores_norm,
            &graph.centers_mm,
            grid.patch_size,
            vol.dims,
            vol.spacing,
        )?;
        iofs::write_volume(render_path, &heat)?;
    }
    Ok(output)
}

/// Helpers reused by the test suites.
pub fn dataset_for_tests(
    cfg: &RunConfig,
    cohort_dir: &Path,
) -> Result<(TrainDataset, AtlasGrid, Manifest)> {
    let manifest = Manifest::load(cohort_dir)?;
    let (grid, _atlas) = load_grid(cfg, cohort_dir, &manifest)?;
    let dataset = build_dataset(cfg, cohort_dir, &manifest, &grid)?;
    Ok((dataset, grid, manifest))
}

/// Extract features straight from in-memory model and dataset (no files).
pub fn extract_features_in_memory(
    enc: &mut EncoderParams,
    gcn: &mut GraphParams,
    dataset: &TrainDataset,
) -> Result<Vec<(String, Vec<f32>, Tensor)>> {
    let mut out = Vec::with_capacity(dataset.subjects.len());
    for subject in &dataset.subjects {
        let (pooled, nodes) =
            extract_subject_features(enc, gcn, subject, &dataset.centers_norm)?;
        out.push((subject.id.clone(), pooled.data().to_vec(), nodes));
    }
    Ok(out)
}
