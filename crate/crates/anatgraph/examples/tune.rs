//! Scratch harness for sizing the synthetic end-to-end experiment.

use std::time::Instant;

use anatgraph::commands::extract_features_in_memory;
use anatgraph_core::encoders::{EncoderParams, GraphParams, ModelConfig};
use anatgraph_core::patch_graph::{build_atlas_grid, build_patient_graph, default_rho_mm};
use anatgraph_core::probe::{fit_logistic, kfold_logistic};
use anatgraph_core::rng::Stream;
use anatgraph_core::synth::{generate_cohort, SynthConfig};
use anatgraph_core::trainer::{
    load_query_model, train, MemorySink, Phase, TrainConfig, TrainDataset, TrainSubject,
    TrainerState,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let seed = get("--seed", 1.0) as u64;
    let t_max = get("--tmax", 150.0) as u64;
    let lr = get("--lr", 1e-3) as f32;
    let momentum = get("--m", 0.99) as f32;
    let b_l = get("--bl", 8.0) as usize;
    let b_g = get("--bg", 8.0) as usize;
    let patch_q = get("--pq", 128.0) as usize;
    let graph_q = get("--gq", 512.0) as usize;
    let amp0 = get("--amp0", 0.06) as f32;
    let amp1 = get("--amp1", 0.26) as f32;

    let t0 = Instant::now();
    let synth_cfg = SynthConfig {
        seed,
        classes: vec![
            anatgraph_core::synth::ClassTexture { frequency: 0.10, amplitude: amp0 },
            anatgraph_core::synth::ClassTexture { frequency: 0.35, amplitude: amp1 },
        ],
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&synth_cfg).unwrap();
    let grid = build_atlas_grid(&cohort.atlas, &cohort.mask, 16, 16).unwrap();
    let rho = default_rho_mm(16, 1.0);
    let subjects: Vec<TrainSubject> = cohort
        .subjects
        .iter()
        .map(|s| {
            let g = build_patient_graph(&s.id, &s.volume, &s.transform, &grid, rho).unwrap();
            TrainSubject { id: s.id.clone(), patches: g.patches, a_norm: g.adjacency_norm }
        })
        .collect();
    let dataset = TrainDataset { subjects, centers_norm: grid.centers_normalized() };
    println!("data built in {:.1}s (n={} regions={})", t0.elapsed().as_secs_f64(), dataset.subjects.len(), dataset.n_regions());

    let model_cfg = ModelConfig { momentum, ..ModelConfig::desk_scale() };
    let train_cfg = TrainConfig {
        t_max: Some(t_max),
        b_l,
        b_g,
        lr,
        patch_queue_capacity: patch_q,
        graph_queue_capacity: graph_q,
        seed,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let mut state =
        TrainerState::init(model_cfg.clone(), train_cfg, dataset.n_regions(), dataset.subjects.len())
            .unwrap();
    let mut sink = MemorySink::default();
    train(&mut state, &dataset, &mut sink).unwrap();
    let train_secs = t1.elapsed().as_secs_f64();

    let patch_losses: Vec<f32> = sink
        .records
        .iter()
        .filter(|r| r.phase == Phase::Patch)
        .map(|r| r.loss)
        .collect();
    let first10: f32 = patch_losses.iter().take(10).sum::<f32>() / 10.0;
    let last10: f32 = patch_losses.iter().rev().take(10).sum::<f32>() / 10.0;
    println!("train {train_secs:.1}s  L_l first10 {first10:.4} last10 {last10:.4}");
    let series: Vec<String> = patch_losses
        .iter()
        .step_by(10.max(patch_losses.len() / 16))
        .map(|v| format!("{v:.2}"))
        .collect();
    println!("L_l series: {}", series.join(" "));
    let graph_losses: Vec<f32> =
        sink.records.iter().filter(|r| r.phase == Phase::Graph).map(|r| r.loss).collect();
    let gseries: Vec<String> = graph_losses
        .iter()
        .step_by(10.max(graph_losses.len() / 16))
        .map(|v| format!("{v:.2}"))
        .collect();
    println!("L_g series: {}", gseries.join(" "));

    // trained probe
    let labels: Vec<usize> = cohort.subjects.iter().map(|s| s.label).collect();
    let probe_acc = |enc: &mut EncoderParams, gcn: &mut GraphParams| -> (f64, Vec<Vec<f64>>, Vec<f64>, Vec<(String, Vec<f32>, anatgraph_core::tensor::Tensor)>) {
        let feats = extract_features_in_memory(enc, gcn, &dataset).unwrap();
        let f = feats[0].1.len();
        let x: Vec<f64> = feats.iter().flat_map(|(_, p, _)| p.iter().map(|&v| v as f64)).collect();
        let (result, _) = kfold_logistic(&x, &labels, feats.len(), f, 2, 5, Stream::root(seed).derive("probe.folds"), 1e-3).unwrap();
        let full = fit_logistic(&x, &labels, feats.len(), f, 2, 1e-3).unwrap();
        (result.mean, full.weights, full.biases, feats)
    };

    let entries = anatgraph_core::formats::ckpt::decode(&state.encode_checkpoint().unwrap()).unwrap();
    let (mut enc, mut gcn) = load_query_model(&model_cfg, &entries).unwrap();
    let (trained_acc, full_w, full_b, feats) = probe_acc(&mut enc, &mut gcn);
    println!("trained probe acc {trained_acc:.3}");

    // diagnostics: feature spread and alternative readouts
    {
        use anatgraph_core::encoders::{stack_centers, stack_patches, FwdCtx};
        use anatgraph_core::tape::{BnMode, Tape};
        let f = model_cfg.feature_dim;
        let nsub = dataset.subjects.len();
        // between-subject std of pooled eval features
        let mut mean = vec![0.0f64; f];
        for (_, p, _) in &feats {
            for (j, &v) in p.iter().enumerate() {
                mean[j] += v as f64 / nsub as f64;
            }
        }
        let mut var = vec![0.0f64; f];
        for (_, p, _) in &feats {
            for (j, &v) in p.iter().enumerate() {
                var[j] += (v as f64 - mean[j]).powi(2) / nsub as f64;
            }
        }
        let avg_std = var.iter().map(|v| v.sqrt()).sum::<f64>() / f as f64;
        let avg_mag = mean.iter().map(|m| m.abs()).sum::<f64>() / f as f64;
        println!("pooled eval features: avg |mean| {avg_mag:.4}, avg between-subject std {avg_std:.4}");

        // probe on batch-stat (train-mode, no update) features, both pre- and post-GCN
        let mut x_batch = Vec::with_capacity(nsub * f);
        let mut x_pre = Vec::with_capacity(nsub * f);
        for subj in &dataset.subjects {
            let batch = stack_patches(&subj.patches.iter().collect::<Vec<_>>()).unwrap();
            let centers = stack_centers(&dataset.centers_norm).unwrap();
            let mut tape = Tape::new();
            let (pooled, pooled_h) = {
                let mut ctx =
                    FwdCtx::new(&mut tape, BnMode::Train { update_running: false }, false);
                let h = enc.forward(&mut ctx, "enc.q", &batch, &centers).unwrap();
                let hp = gcn.gcn_forward(&mut ctx, "gcn.q", h, &subj.a_norm).unwrap();
                let pooled = gcn.embed(&mut ctx, "gcn.q", hp, false).unwrap();
                let pooled_h = ctx.tape.col_mean(h).unwrap();
                (pooled, pooled_h)
            };
            x_batch.extend(tape.value(pooled).data().iter().map(|&v| v as f64));
            x_pre.extend(tape.value(pooled_h).data().iter().map(|&v| v as f64));
        }
        let acc_batch = {
            let (r, _) = kfold_logistic(&x_batch, &labels, nsub, f, 2, 5, Stream::root(seed).derive("probe.folds"), 1e-3).unwrap();
            r.mean
        };
        let acc_pre = {
            let (r, _) = kfold_logistic(&x_pre, &labels, nsub, f, 2, 5, Stream::root(seed).derive("probe.folds"), 1e-3).unwrap();
            r.mean
        };
        println!("probe acc with batch-stat BN: post-GCN {acc_batch:.3}, pre-GCN pooled {acc_pre:.3}");

        // retrieval diagnostics at a lesion region and a background region:
        // do two augmented views of the same subject land nearest each other,
        // and does a per-region linear probe separate the classes?
        use anatgraph_core::augment::augment as aug_fn;
        use anatgraph_core::augment::AugmentConfig;
        let lesion_region = cohort.lesion_nodes[cohort.lesion_nodes.len() / 2];
        for region in [lesion_region, 0usize] {
            let nsub = dataset.subjects.len();
            let mut q_rows = Vec::new();
            let mut k_rows = Vec::new();
            let aug_cfg = AugmentConfig::default();
            for (i, subj) in dataset.subjects.iter().enumerate() {
                let stream = Stream::root(777).derive_u64(i as u64).derive_u64(region as u64);
                let v1 = aug_fn(&subj.patches[region], &aug_cfg, stream.derive_u64(0)).unwrap();
                let v2 = aug_fn(&subj.patches[region], &aug_cfg, stream.derive_u64(1)).unwrap();
                let centers = stack_centers(&[dataset.centers_norm[region]; 2]).unwrap();
                let batch = stack_patches(&[&v1, &v2]).unwrap();
                let mut tape = Tape::new();
                let h = {
                    let mut ctx =
                        FwdCtx::new(&mut tape, BnMode::Eval, false);
                    let h = enc.forward(&mut ctx, "enc.q", &batch, &centers).unwrap();
                    ctx.tape.l2_normalize(h).unwrap()
                };
                let vals = tape.value(h);
                q_rows.push(vals.data()[..f].to_vec());
                k_rows.push(vals.data()[f..].to_vec());
            }
            let mut top1 = 0usize;
            let mut class_hit = 0usize;
            for i in 0..nsub {
                let mut best = 0usize;
                let mut best_sim = f32::NEG_INFINITY;
                for j in 0..nsub {
                    let sim: f32 =
                        q_rows[i].iter().zip(&k_rows[j]).map(|(a, b)| a * b).sum();
                    if sim > best_sim {
                        best_sim = sim;
                        best = j;
                    }
                }
                if best == i {
                    top1 += 1;
                }
                if labels[best] == labels[i] {
                    class_hit += 1;
                }
            }
            // per-region class probe on eval-mode unaugmented features
            let x_region: Vec<f64> = dataset
                .subjects
                .iter()
                .map(|subj| {
                    let centers = stack_centers(&[dataset.centers_norm[region]]).unwrap();
                    let batch = stack_patches(&[&subj.patches[region]]).unwrap();
                    let mut tape = Tape::new();
                    let h = {
                        let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
                        enc.forward(&mut ctx, "enc.q", &batch, &centers).unwrap()
                    };
                    tape.value(h).data().iter().map(|&v| v as f64).collect::<Vec<_>>()
                })
                .flatten()
                .collect();
            let acc_region = {
                let (r, _) = kfold_logistic(&x_region, &labels, nsub, f, 2, 5, Stream::root(seed).derive("probe.folds"), 1e-3).unwrap();
                r.mean
            };
            println!(
                "region {region}: view top-1 retrieval {top1}/{nsub}, class-of-nearest {class_hit}/{nsub}, region-probe acc {acc_region:.3}"
            );
        }
    }

    // untrained baselines over 3 seeds
    for s in 0..3u64 {
        let mut enc_r = EncoderParams::init(&model_cfg, Stream::root(1000 + s).derive("init.enc")).unwrap();
        let mut gcn_r = GraphParams::init(&model_cfg, Stream::root(1000 + s).derive("init.gcn")).unwrap();
        let feats_r = extract_features_in_memory(&mut enc_r, &mut gcn_r, &dataset).unwrap();
        let f = feats_r[0].1.len();
        let x: Vec<f64> = feats_r.iter().flat_map(|(_, p, _)| p.iter().map(|&v| v as f64)).collect();
        let (result, _) = kfold_logistic(&x, &labels, feats_r.len(), f, 2, 5, Stream::root(seed).derive("probe.folds"), 1e-3).unwrap();
        println!("untrained probe acc (init seed {}) {:.3}", 1000 + s, result.mean);
    }

    // localization on positive subjects
    let w1: Vec<f64> = full_w[1].iter().zip(&full_w[0]).map(|(a, b)| a - b).collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut worst_check = 0.0f64;
    for (i, subj) in cohort.subjects.iter().enumerate() {
        if subj.label != 1 {
            continue;
        }
        total += 1;
        let nodes = &feats[i].2;
        let act = anatgraph_core::explain::activation_graph(&w1, full_b[1] - full_b[0], nodes, &subj.id).unwrap();
        worst_check = worst_check.max(act.logit_check);
        let mut order: Vec<usize> = (0..act.scores_raw.len()).collect();
        order.sort_by(|&a, &b| act.scores_raw[b].partial_cmp(&act.scores_raw[a]).unwrap());
        let top: std::collections::BTreeSet<usize> = order.iter().take(16).copied().collect();
        let truth: std::collections::BTreeSet<usize> = cohort.lesion_nodes.iter().copied().collect();
        let inter = top.intersection(&truth).count();
        let union = top.union(&truth).count();
        let jaccard = inter as f64 / union as f64;
        if jaccard >= 0.3 {
            hits += 1;
        }
    }
    println!("localization: {hits}/{total} positives with jaccard >= 0.3, worst logit_check {worst_check:.2e}");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
