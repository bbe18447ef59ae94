//! Temporary diagnostic: inspect the learned background vector and per-arm
//! behavior on one seed.

use blc_core::data::toy::{generate_toy_dataset, ToyWorldConfig};
use blc_core::detector::cascade::ModelConfig;
use blc_core::detector::features::ToyBackbone;
use blc_core::embeddings::{mean_background, SeenMatrix, UnseenMatrix, VocabularyMatrix};
use blc_core::evaluation::{dataset_ground_truth, evaluate_zsd, recall_at_k};
use blc_core::inference::{detect_dataset, DetectMode};
use blc_core::training::{train_blrpn, train_cascade, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_train: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(500);
    let n_test: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(6);
    let seed: u64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(11);
    let lr: f64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(0.01);
    let ratio: f64 = args.get(5).and_then(|a| a.parse().ok()).unwrap_or(3.0);

    let mut toy = ToyWorldConfig::default();
    toy.seed = seed;
    let split = toy.default_split();
    let ds = generate_toy_dataset(&toy, &split, n_train, n_test).unwrap();
    let vocab = VocabularyMatrix::from_table(&ds.vocab_table).unwrap();
    let views = ds.class_table.lookup_all(&split.seen).unwrap();
    let mean_bg = mean_background(&views).unwrap();
    let ws_mean = SeenMatrix::build(&ds.class_table, &split.seen, mean_bg.view()).unwrap();
    let model_cfg = ModelConfig {
        feature_channels: toy.feature_channels(),
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        seed,
        epochs,
        lr,
        neg_pos_ratio: ratio,
        min_negatives: 4,
        ..TrainConfig::default()
    };
    let backbone = ToyBackbone::new(3, model_cfg.feature_channels, 0);

    let blrpn = train_blrpn(&ds.train, &ws_mean, &vocab, &model_cfg, &train_cfg, &backbone, None)
        .unwrap();
    let vb = &blrpn.learned_background;
    let vb_norm = vb.dot(vb).sqrt();
    let mean_norm = mean_bg.dot(&mean_bg).sqrt();
    println!(
        "mean_bg norm {:.4}; learned vb norm {:.4}; cos(vb, mean) {:.4}",
        mean_norm,
        vb_norm,
        vb.dot(&mean_bg) / (vb_norm * mean_norm)
    );
    let mut cos_sum = 0.0;
    for name in &split.seen {
        let v = ds.class_table.get(name).unwrap();
        cos_sum += vb.dot(&v) / vb_norm;
    }
    println!("mean cos(vb, seen classes) {:.4}", cos_sum / split.seen.len() as f64);
    println!(
        "blrpn loss first {:.4} last {:.4}",
        blrpn.log.first().map(|r| r.loss).unwrap_or(0.0),
        blrpn.log.last().map(|r| r.loss).unwrap_or(0.0)
    );

    let gts = dataset_ground_truth(&ds.test);
    for (label, use_flow, learned) in [
        ("baseline", false, false),
        ("flow", true, false),
        ("blrpn", false, true),
        ("full", true, true),
    ] {
        let ws = if learned {
            ws_mean.replace_background(vb.view()).unwrap()
        } else {
            ws_mean.clone()
        };
        let out = train_cascade(&ds.train, &ws, &vocab, &model_cfg, &train_cfg, use_flow, &backbone)
            .unwrap();
        let wu = UnseenMatrix::build(&ds.class_table, &split.unseen, ws.background()).unwrap();
        let zsd_dets =
            detect_dataset(&ds.test, &out.model, &wu, &backbone, DetectMode::Zsd).unwrap();
        let report = evaluate_zsd(&zsd_dets, &gts, &split.unseen, 100).unwrap();
        let seen_dets =
            detect_dataset(&ds.test, &out.model, &wu, &backbone, DetectMode::Seen).unwrap();
        let seen_gts: Vec<_> = gts
            .iter()
            .map(|g| blc_core::evaluation::ImageGroundTruth {
                image_id: g.image_id,
                boxes: g
                    .boxes
                    .iter()
                    .filter(|b| b.group == blc_core::data::ClassGroup::Seen)
                    .cloned()
                    .collect(),
            })
            .collect();
        let seen_recall = recall_at_k(&seen_dets, &seen_gts, 100, 0.5).unwrap_or(f64::NAN);
        // classification accuracy at ground-truth boxes
        let (mut seen_hits, mut seen_total) = (0usize, 0usize);
        let (mut unseen_hits, mut unseen_total) = (0usize, 0usize);
        let (mut bg_mass_obj, mut n_obj) = (0.0f64, 0usize);
        for image in &ds.test.images {
            let feat = backbone.forward(image.data.as_ref().unwrap()).unwrap();
            let boxes: Vec<_> = image.boxes.iter().map(|b| b.bbox).collect();
            if boxes.is_empty() {
                continue;
            }
            let outs = blc_core::detector::cascade::cascade_forward(
                &feat,
                &boxes,
                &out.model,
                out.model.use_flow,
            )
            .unwrap();
            let last = outs.last().unwrap();
            for (i, gtb) in image.boxes.iter().enumerate() {
                let probs = last.probs.row(i);
                bg_mass_obj += probs[0];
                n_obj += 1;
                match gtb.group {
                    blc_core::data::ClassGroup::Seen => {
                        seen_total += 1;
                        let mut best = 0;
                        for c in 1..probs.len() {
                            if probs[c] > probs[best] {
                                best = c;
                            }
                        }
                        if ws.class_name(best) == Some(gtb.class.as_str()) {
                            seen_hits += 1;
                        }
                    }
                    blc_core::data::ClassGroup::Unseen => {
                        unseen_total += 1;
                        let u = blc_core::inference::unseen_scores(
                            &wu,
                            &ws,
                            &blc_core::semantic_head::ClassScores {
                                probs: probs.to_owned(),
                            },
                        )
                        .unwrap();
                        let mut best = 1;
                        for c in 2..u.len() {
                            if u[c] > u[best] {
                                best = c;
                            }
                        }
                        if wu.class_name(best) == Some(gtb.class.as_str()) {
                            unseen_hits += 1;
                        }
                    }
                }
            }
        }
        let last_epoch: Vec<_> = out
            .log
            .iter()
            .filter(|r| r.epoch == epochs)
            .collect();
        let sem: f64 =
            last_epoch.iter().map(|r| r.sem_loss).sum::<f64>() / last_epoch.len() as f64;
        let reg: f64 =
            last_epoch.iter().map(|r| r.reg_loss).sum::<f64>() / last_epoch.len() as f64;
        println!(
            "{label:<9} unseen R@100(.4/.5/.6) {:.2}/{:.2}/{:.2} map {:.2} | seen R {:.2} | sem {:.3} reg {:.3} | acc seen {:.2} unseen {:.2} | bg-mass {:.3}",
            report.recall_at_iou[0].1,
            report.recall_at_iou[1].1,
            report.recall_at_iou[2].1,
            report.map_05,
            seen_recall,
            sem,
            reg,
            seen_hits as f64 / seen_total.max(1) as f64,
            unseen_hits as f64 / unseen_total.max(1) as f64,
            bg_mass_obj / n_obj.max(1) as f64,
        );
    }
}
