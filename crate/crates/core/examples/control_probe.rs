//! Control: replacing the background with the same mean vector must
//! reproduce the baseline exactly; small perturbations test sensitivity.

use blc_core::data::toy::{generate_toy_dataset, ToyWorldConfig};
use blc_core::detector::cascade::ModelConfig;
use blc_core::detector::features::ToyBackbone;
use blc_core::embeddings::{mean_background, SeenMatrix, UnseenMatrix, VocabularyMatrix};
use blc_core::evaluation::{dataset_ground_truth, evaluate_zsd};
use blc_core::inference::{detect_dataset, DetectMode};
use blc_core::training::{train_cascade, TrainConfig};
use blc_core::util::{random_unit_vector, rng};

fn main() {
    let seed = 11u64;
    let mut toy = ToyWorldConfig::default();
    toy.seed = seed;
    let split = toy.default_split();
    let ds = generate_toy_dataset(&toy, &split, 500, 200).unwrap();
    let vocab = VocabularyMatrix::from_table(&ds.vocab_table).unwrap();
    let views = ds.class_table.lookup_all(&split.seen).unwrap();
    let mean_bg = mean_background(&views).unwrap();
    let ws_mean = SeenMatrix::build(&ds.class_table, &split.seen, mean_bg.view()).unwrap();
    let model_cfg = ModelConfig {
        feature_channels: toy.feature_channels(),
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig { seed, epochs: 6, ..TrainConfig::default() };
    let backbone = ToyBackbone::new(3, model_cfg.feature_channels, 0);
    let gts = dataset_ground_truth(&ds.test);

    let mut r = rng(99);
    let noise = random_unit_vector(&mut r, ws_mean.dim());

    for (label, ws) in [
        ("baseline", ws_mean.clone()),
        ("replace-same", ws_mean.replace_background(mean_bg.view()).unwrap()),
        ("noise-0.05", ws_mean.replace_background((&mean_bg + &(&noise * 0.05)).view()).unwrap()),
        ("noise-0.15", ws_mean.replace_background((&mean_bg + &(&noise * 0.15)).view()).unwrap()),
        ("zero-bg", ws_mean.replace_background(ndarray::Array1::zeros(ws_mean.dim()).view()).unwrap()),
    ] {
        let out = train_cascade(&ds.train, &ws, &vocab, &model_cfg, &train_cfg, false, &backbone).unwrap();
        let wu = UnseenMatrix::build(&ds.class_table, &split.unseen, ws.background()).unwrap();
        let dets = detect_dataset(&ds.test, &out.model, &wu, &backbone, DetectMode::Zsd).unwrap();
        let report = evaluate_zsd(&dets, &gts, &split.unseen, 100).unwrap();
        println!(
            "{label:<13} R@100@0.5 {:.2} map {:.2} final-loss {:.3}",
            report.recall_at_iou[1].1,
            report.map_05,
            out.log.last().unwrap().loss
        );
    }
}
