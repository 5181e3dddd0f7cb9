//! Diagnostic: is the synthetic class signal learnable from simple patch
//! statistics, and how much of it do untrained encoder features keep?

use anatgraph_core::patch_graph::{build_atlas_grid, build_patient_graph, default_rho_mm};
use anatgraph_core::probe::kfold_logistic;
use anatgraph_core::rng::Stream;
use anatgraph_core::synth::{generate_cohort, ClassTexture, SynthConfig};
use anatgraph_core::trainer::{TrainDataset, TrainSubject};

fn cv_acc(x: &[f64], labels: &[usize], n: usize, f: usize, seed: u64) -> f64 {
    let (result, _) =
        kfold_logistic(x, labels, n, f, 2, 5, Stream::root(seed).derive("folds"), 1e-3).unwrap();
    result.mean
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let amp0 = get("--amp0", 0.06) as f32;
    let amp1 = get("--amp1", 0.26) as f32;
    let f0 = get("--f0", 0.10) as f32;
    let f1 = get("--f1", 0.35) as f32;
    let lo = get("--lo", 18.0) as f32;
    let hi = get("--hi", 50.0) as f32;

    let synth_cfg = SynthConfig {
        seed: 1,
        classes: vec![
            ClassTexture { frequency: f0, amplitude: amp0 },
            ClassTexture { frequency: f1, amplitude: amp1 },
        ],
        lesion_min_mm: [lo; 3],
        lesion_max_mm: [hi; 3],
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
    let labels: Vec<usize> = cohort.subjects.iter().map(|s| s.label).collect();
    let n = labels.len();
    println!("lesion nodes: {:?}", cohort.lesion_nodes);

    // Feature set A: per-region patch std (texture energy), 64 dims
    let x_std: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| {
            s.patches.iter().map(|p| {
                let mean: f64 =
                    p.data().iter().map(|&v| v as f64).sum::<f64>() / p.numel() as f64;
                let var: f64 = p
                    .data()
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>()
                    / p.numel() as f64;
                var.sqrt()
            })
        })
        .collect();
    println!("A per-region std (64d): acc {:.3}", cv_acc(&x_std, &labels, n, 64, 1));

    // Feature set B: mean of per-region stds over the true lesion nodes only
    let x_lesion: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| {
            let mut vals = Vec::new();
            for &j in &cohort.lesion_nodes {
                let p = &s.patches[j];
                let mean: f64 =
                    p.data().iter().map(|&v| v as f64).sum::<f64>() / p.numel() as f64;
                let var: f64 = p
                    .data()
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>()
                    / p.numel() as f64;
                vals.push(var.sqrt());
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vec![m, *vals.iter().max_by(|a, b| a.partial_cmp(b).unwrap()).unwrap()]
        })
        .collect();
    println!("B lesion-node std (2d): acc {:.3}", cv_acc(&x_lesion, &labels, n, 2, 2));

    // Feature set C: high-frequency energy per region (diff with neighbor voxel)
    let x_hf: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| {
            s.patches.iter().map(|p| {
                let d = p.data();
                let s16 = 16usize;
                let mut acc = 0.0f64;
                let mut cnt = 0usize;
                for z in 0..s16 {
                    for y in 0..s16 {
                        for x in 0..s16 - 1 {
                            let i = (z * s16 + y) * s16 + x;
                            let diff = (d[i + 1] - d[i]) as f64;
                            acc += diff * diff;
                            cnt += 1;
                        }
                    }
                }
                (acc / cnt as f64).sqrt()
            })
        })
        .collect();
    println!("C per-region HF energy (64d): acc {:.3}", cv_acc(&x_hf, &labels, n, 64, 3));

    // D: is view alignment learnable at the pixel level? For a lesion region,
    // correlate augmented views of the same subject vs other subjects.
    use anatgraph_core::augment::{augment, AugmentConfig};
    let region = cohort.lesion_nodes[cohort.lesion_nodes.len() / 2];
    for (tag, aug_cfg) in [
        ("default", AugmentConfig::default()),
        ("mild", AugmentConfig { elastic_sigma: 1.0, noise_sigma: 0.03, ..AugmentConfig::default() }),
    ] {
        let views: Vec<(Vec<f32>, Vec<f32>)> = dataset
            .subjects
            .iter()
            .enumerate()
            .map(|(i, subj)| {
                let stream = Stream::root(9090).derive_u64(i as u64);
                let v1 = augment(&subj.patches[region], &aug_cfg, stream.derive_u64(0)).unwrap();
                let v2 = augment(&subj.patches[region], &aug_cfg, stream.derive_u64(1)).unwrap();
                (v1.data().to_vec(), v2.data().to_vec())
            })
            .collect();
        let corr = |a: &[f32], b: &[f32]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mut num = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                num += (x as f64 - ma) * (y as f64 - mb);
                va += (x as f64 - ma).powi(2);
                vb += (y as f64 - mb).powi(2);
            }
            num / (va.sqrt() * vb.sqrt())
        };
        let mut top1 = 0;
        for i in 0..views.len() {
            let mut best = 0;
            let mut best_c = f64::NEG_INFINITY;
            for j in 0..views.len() {
                let c = corr(&views[i].0, &views[j].1);
                if c > best_c {
                    best_c = c;
                    best = j;
                }
            }
            if best == i {
                top1 += 1;
            }
        }
        println!("D pixel view retrieval ({tag} augment), lesion region: {top1}/{}", views.len());
    }
}

// Pixel-level learnability of instance discrimination under augmentation:
// correlation of two views of the same patch vs the best cross-subject match.
