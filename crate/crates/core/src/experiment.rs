//! Component ablation on the synthetic dataset: baseline cascade, semantic
//! information flow, learned background vector, and both combined, each
//! trained from scratch on identical per-seed data and scored by unseen
//! Recall@K at IoU 0.5.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::toy::{generate_toy_dataset, ToyWorldConfig};
use crate::data::SplitConfig;
use crate::detector::cascade::ModelConfig;
use crate::detector::features::ToyBackbone;
use crate::embeddings::{mean_background, SeenMatrix, UnseenMatrix, VocabularyMatrix};
use crate::error::Result;
use crate::evaluation::{dataset_ground_truth, evaluate_zsd, ZsdReport, DEFAULT_K};
use crate::inference::{detect_dataset, DetectMode};
use crate::training::{train_blrpn, train_cascade, TrainConfig};

/// The four component arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    Flow,
    Blrpn,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Flow, Arm::Blrpn, Arm::Full];

    pub fn uses_flow(self) -> bool {
        matches!(self, Arm::Flow | Arm::Full)
    }

    pub fn uses_learned_background(self) -> bool {
        matches!(self, Arm::Blrpn | Arm::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Flow => "flow",
            Arm::Blrpn => "blrpn",
            Arm::Full => "full",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub toy: ToyWorldConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let toy = ToyWorldConfig::default();
        let model = ModelConfig {
            feature_channels: toy.feature_channels(),
            ..ModelConfig::default()
        };
        Self {
            toy,
            n_train: 2000,
            n_test: 500,
            model,
            train: TrainConfig::default(),
            seeds: vec![11, 23, 37, 51, 73],
        }
    }
}

/// One trained arm on one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub seed: u64,
    pub unseen_recall_05: f64,
    pub report: ZsdReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub outcomes: Vec<ArmOutcome>,
}

impl AblationSummary {
    pub fn recalls(&self, arm: Arm) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter(|o| o.arm == arm)
            .map(|o| o.unseen_recall_05)
            .collect()
    }

    pub fn mean(&self, arm: Arm) -> f64 {
        let v = self.recalls(arm);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Sample standard deviation across seeds.
    pub fn std(&self, arm: Arm) -> f64 {
        let v = self.recalls(arm);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        if v.len() < 2 {
            return 0.0;
        }
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    pub fn format_table(&self) -> String {
        let mut out = String::from("arm       mean    std    per-seed\n");
        for arm in Arm::ALL {
            let recalls = self.recalls(arm);
            if recalls.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "{:<9} {:>6.2} {:>6.2}   {}\n",
                arm.name(),
                self.mean(arm),
                self.std(arm),
                recalls
                    .iter()
                    .map(|r| format!("{r:.2}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
        }
        out
    }
}

/// Runs all four arms for one seed on one shared dataset (the background
/// phase is trained once and reused by the arms that want it).
pub fn run_seed(cfg: &AblationConfig, seed: u64) -> Result<Vec<ArmOutcome>> {
    let mut toy_cfg = cfg.toy.clone();
    toy_cfg.seed = seed;
    let split = toy_cfg.default_split();
    run_seed_with_split(cfg, &toy_cfg, &split, seed)
}

pub fn run_seed_with_split(
    cfg: &AblationConfig,
    toy_cfg: &ToyWorldConfig,
    split: &SplitConfig,
    seed: u64,
) -> Result<Vec<ArmOutcome>> {
    let ds = generate_toy_dataset(toy_cfg, split, cfg.n_train, cfg.n_test)?;
    let vocab = VocabularyMatrix::from_table(&ds.vocab_table)?;
    let seen_views = ds.class_table.lookup_all(&split.seen)?;
    let mean_bg = mean_background(&seen_views)?;
    let ws_mean = SeenMatrix::build(&ds.class_table, &split.seen, mean_bg.view())?;
    let model_cfg = ModelConfig {
        feature_channels: toy_cfg.feature_channels(),
        ..cfg.model.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let backbone = ToyBackbone::new(3, model_cfg.feature_channels, model_cfg.backbone_seed);

    let blrpn = train_blrpn(
        &ds.train,
        &ws_mean,
        &vocab,
        &model_cfg,
        &train_cfg,
        &backbone,
        None,
    )?;
    let ws_learned = ws_mean.replace_background(blrpn.learned_background.view())?;

    let gts = dataset_ground_truth(&ds.test);
    let mut outcomes = Vec::new();
    for arm in Arm::ALL {
        let ws = if arm.uses_learned_background() {
            &ws_learned
        } else {
            &ws_mean
        };
        let trained = train_cascade(
            &ds.train,
            ws,
            &vocab,
            &model_cfg,
            &train_cfg,
            arm.uses_flow(),
            &backbone,
        )?;
        debug_assert_eq!(trained.audit.unseen_boxes_in_training, 0);
        let wu = UnseenMatrix::build(&ds.class_table, &split.unseen, ws.background())?;
        let dets = detect_dataset(&ds.test, &trained.model, &wu, &backbone, DetectMode::Zsd)?;
        let report = evaluate_zsd(&dets, &gts, &split.unseen, DEFAULT_K)?;
        let unseen_recall_05 = report
            .recall_at_iou
            .iter()
            .find(|(thr, _)| (*thr - 0.5).abs() < 1e-9)
            .map(|(_, r)| *r)
            .unwrap_or(0.0);
        outcomes.push(ArmOutcome {
            arm,
            seed,
            unseen_recall_05,
            report,
        });
    }
    Ok(outcomes)
}

/// Runs every seed in parallel.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationSummary> {
    let results: Vec<Vec<ArmOutcome>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed))
        .collect::<Result<_>>()?;
    Ok(AblationSummary {
        outcomes: results.into_iter().flatten().collect(),
    })
}
