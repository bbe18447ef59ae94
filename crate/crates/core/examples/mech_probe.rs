//! Mechanism probe: per-group bg-mass, detection volumes, and ranking.

use blc_core::data::toy::{generate_toy_dataset, ToyWorldConfig};
use blc_core::data::ClassGroup;
use blc_core::detector::cascade::{cascade_forward, ModelConfig};
use blc_core::detector::features::ToyBackbone;
use blc_core::embeddings::{mean_background, SeenMatrix, UnseenMatrix, VocabularyMatrix};
use blc_core::evaluation::{dataset_ground_truth, evaluate_zsd};
use blc_core::inference::{detect_dataset, unseen_scores, DetectMode};
use blc_core::semantic_head::ClassScores;
use blc_core::training::{train_blrpn, train_cascade, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_train: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(500);
    let epochs: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let seed: u64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(11);
    let lr: f64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(0.005);

    let mut toy = ToyWorldConfig::default();
    toy.seed = seed;
    let split = toy.default_split();
    let ds = generate_toy_dataset(&toy, &split, n_train, 150).unwrap();
    let vocab = VocabularyMatrix::from_table(&ds.vocab_table).unwrap();
    let views = ds.class_table.lookup_all(&split.seen).unwrap();
    let mean_bg = mean_background(&views).unwrap();
    let ws_mean = SeenMatrix::build(&ds.class_table, &split.seen, mean_bg.view()).unwrap();
    let model_cfg = ModelConfig {
        feature_channels: toy.feature_channels(),
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig { seed, epochs, lr, ..TrainConfig::default() };
    let backbone = ToyBackbone::new(3, model_cfg.feature_channels, 0);
    let gts = dataset_ground_truth(&ds.test);

    let blrpn = train_blrpn(&ds.train, &ws_mean, &vocab, &model_cfg, &train_cfg, &backbone, None).unwrap();

    for (label, learned) in [("baseline", false), ("blrpn", true)] {
        let ws = if learned {
            ws_mean.replace_background(blrpn.learned_background.view()).unwrap()
        } else {
            ws_mean.clone()
        };
        let out = train_cascade(&ds.train, &ws, &vocab, &model_cfg, &train_cfg, false, &backbone).unwrap();
        let wu = UnseenMatrix::build(&ds.class_table, &split.unseen, ws.background()).unwrap();

        // bg-mass measured at GT boxes, split seen/unseen; junk boxes from corners
        let (mut p0_seen, mut n_seen, mut p0_unseen, mut n_unseen) = (0.0, 0, 0.0, 0);
        let mut eq9_top_unseen = 0.0; // mean top unseen score at unseen GT boxes
        let mut eq9_top_junk = 0.0;
        let mut n_junk = 0;
        for image in &ds.test.images {
            let feat = backbone.forward(image.data.as_ref().unwrap()).unwrap();
            let mut boxes: Vec<_> = image.boxes.iter().map(|b| b.bbox).collect();
            // junk probes: boxes on empty-ish areas
            let junk_candidates = [
                blc_core::detector::bbox::BBox::new(1.0, 1.0, 12.0, 12.0).unwrap(),
                blc_core::detector::bbox::BBox::new(50.0, 50.0, 62.0, 62.0).unwrap(),
            ];
            let mut junk_idx = Vec::new();
            for jc in junk_candidates {
                if image.boxes.iter().all(|b| b.bbox.iou(&jc) < 0.1) {
                    junk_idx.push(boxes.len());
                    boxes.push(jc);
                }
            }
            let outs = cascade_forward(&feat, &boxes, &out.model, false).unwrap();
            let last = outs.last().unwrap();
            for (i, gtb) in image.boxes.iter().enumerate() {
                let probs = last.probs.row(i);
                match gtb.group {
                    ClassGroup::Seen => { p0_seen += probs[0]; n_seen += 1; }
                    ClassGroup::Unseen => {
                        p0_unseen += probs[0];
                        n_unseen += 1;
                        let u = unseen_scores(&wu, &ws, &ClassScores { probs: probs.to_owned() }).unwrap();
                        eq9_top_unseen += u.iter().skip(1).cloned().fold(f64::MIN, f64::max);
                    }
                }
            }
            for &ji in &junk_idx {
                let probs = last.probs.row(ji);
                let u = unseen_scores(&wu, &ws, &ClassScores { probs: probs.to_owned() }).unwrap();
                eq9_top_junk += u.iter().skip(1).cloned().fold(f64::MIN, f64::max);
                n_junk += 1;
            }
        }
        let dets = detect_dataset(&ds.test, &out.model, &wu, &backbone, DetectMode::Zsd).unwrap();
        let mean_dets: f64 = dets.iter().map(|d| d.detections.len() as f64).sum::<f64>() / dets.len() as f64;
        let report = evaluate_zsd(&dets, &gts, &split.unseen, 100).unwrap();
        println!(
            "{label:<9} R@.5 {:.2} map {:.2} | p0 seen {:.3} unseen {:.3} | eq9top unseen {:.3} junk {:.3} | dets/img {:.0}",
            report.recall_at_iou[1].1, report.map_05,
            p0_seen / n_seen.max(1) as f64,
            p0_unseen / n_unseen.max(1) as f64,
            eq9_top_unseen / n_unseen.max(1) as f64,
            eq9_top_junk / n_junk.max(1) as f64,
            mean_dets
        );
    }
}
