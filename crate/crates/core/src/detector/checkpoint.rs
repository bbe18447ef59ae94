//! Versioned checkpoint files: a named map from parameter path to a flat
//! array with its shape, plus the structural config needed to rebuild the
//! model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::detector::cascade::{BlrpnModel, CascadeModel, CascadeStage, ModelConfig};
use crate::detector::rpn::RpnHead;
use crate::embeddings::{ForegroundBackgroundMatrix, SeenMatrix, VocabularyMatrix};
use crate::error::{BlcError, Result};
use crate::provenance::Provenance;
use crate::semantic_flow::FlowFuser;
use crate::semantic_head::SemanticBranchParams;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    fn from2(a: &Array2<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().cloned().collect(),
        }
    }

    fn from1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    fn to2(&self, name: &str) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(BlcError::Checkpoint(format!(
                "tensor '{name}' expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| BlcError::Checkpoint(format!("tensor '{name}': {e}")))
    }

    fn to1(&self, name: &str) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(BlcError::Checkpoint(format!(
                "tensor '{name}' expected rank 1, got shape {:?}",
                self.shape
            )));
        }
        Ok(Array1::from(self.data.clone()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub meta: Provenance,
    /// Ablation arm recorded at training time (baseline / flow / blrpn / full).
    pub arm: Option<String>,
    pub model_config: ModelConfig,
    pub use_flow: bool,
    pub seen_classes: Vec<String>,
    pub tensors: BTreeMap<String, TensorData>,
}

fn insert2(map: &mut BTreeMap<String, TensorData>, name: &str, a: &Array2<f64>) {
    map.insert(name.to_string(), TensorData::from2(a));
}

fn insert1(map: &mut BTreeMap<String, TensorData>, name: &str, a: &Array1<f64>) {
    map.insert(name.to_string(), TensorData::from1(a));
}

fn get<'a>(map: &'a BTreeMap<String, TensorData>, name: &str) -> Result<&'a TensorData> {
    map.get(name)
        .ok_or_else(|| BlcError::Checkpoint(format!("missing tensor '{name}'")))
}

impl Checkpoint {
    pub fn from_cascade(model: &CascadeModel, meta: Provenance, arm: Option<String>) -> Self {
        let mut tensors = BTreeMap::new();
        insert2(&mut tensors, "ws", model.ws.matrix());
        insert2(&mut tensors, "vocab", model.vocab.matrix());
        for (i, stage) in model.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            insert2(&mut tensors, &format!("{p}.t"), &stage.semantic.t);
            insert2(&mut tensors, &format!("{p}.m"), &stage.semantic.m);
            insert2(&mut tensors, &format!("{p}.reg_w"), &stage.reg_w);
            insert1(&mut tensors, &format!("{p}.reg_b"), &stage.reg_b);
        }
        for (i, fuser) in model.fusers.iter().enumerate() {
            let p = format!("fuser{}", i + 2);
            insert2(&mut tensors, &format!("{p}.a"), &fuser.a);
            insert2(&mut tensors, &format!("{p}.b"), &fuser.b);
        }
        insert2(&mut tensors, "rpn.obj_w", &model.rpn_head.obj_w);
        insert1(&mut tensors, "rpn.obj_b", &model.rpn_head.obj_b);
        insert2(&mut tensors, "rpn.reg_w", &model.rpn_head.reg_w);
        insert1(&mut tensors, "rpn.reg_b", &model.rpn_head.reg_b);
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "cascade".into(),
            meta,
            arm,
            model_config: model.cfg.clone(),
            use_flow: model.use_flow,
            seen_classes: model.ws.class_order().to_vec(),
            tensors,
        }
    }

    pub fn to_cascade(&self) -> Result<CascadeModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(BlcError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.kind != "cascade" {
            return Err(BlcError::Checkpoint(format!(
                "expected cascade checkpoint, got '{}'",
                self.kind
            )));
        }
        let ws = SeenMatrix::from_parts(
            get(&self.tensors, "ws")?.to2("ws")?,
            self.seen_classes.clone(),
        )?;
        let vocab = VocabularyMatrix::from_matrix(get(&self.tensors, "vocab")?.to2("vocab")?)?;
        let mut stages = Vec::new();
        for i in 0..self.model_config.num_stages {
            let p = format!("stage{}", i + 1);
            stages.push(CascadeStage {
                semantic: SemanticBranchParams::new(
                    get(&self.tensors, &format!("{p}.t"))?.to2("t")?,
                    get(&self.tensors, &format!("{p}.m"))?.to2("m")?,
                ),
                reg_w: get(&self.tensors, &format!("{p}.reg_w"))?.to2("reg_w")?,
                reg_b: get(&self.tensors, &format!("{p}.reg_b"))?.to1("reg_b")?,
            });
        }
        let mut fusers = Vec::new();
        for i in 0..self.model_config.num_stages.saturating_sub(1) {
            let p = format!("fuser{}", i + 2);
            fusers.push(FlowFuser {
                a: get(&self.tensors, &format!("{p}.a"))?.to2("a")?,
                b: get(&self.tensors, &format!("{p}.b"))?.to2("b")?,
            });
        }
        let rpn_head = RpnHead {
            obj_w: get(&self.tensors, "rpn.obj_w")?.to2("obj_w")?,
            obj_b: get(&self.tensors, "rpn.obj_b")?.to1("obj_b")?,
            reg_w: get(&self.tensors, "rpn.reg_w")?.to2("reg_w")?,
            reg_b: get(&self.tensors, "rpn.reg_b")?.to1("reg_b")?,
        };
        Ok(CascadeModel {
            ws,
            vocab,
            stages,
            fusers,
            rpn_head,
            use_flow: self.use_flow,
            cfg: self.model_config.clone(),
        })
    }

    pub fn from_blrpn(model: &BlrpnModel, vocab: &VocabularyMatrix, meta: Provenance) -> Self {
        let mut tensors = BTreeMap::new();
        insert2(&mut tensors, "wfb", &model.wfb.mat);
        insert2(&mut tensors, "vocab", vocab.matrix());
        insert2(&mut tensors, "t", &model.semantic.t);
        insert2(&mut tensors, "m", &model.semantic.m);
        insert2(&mut tensors, "reg_w", &model.reg_w);
        insert1(&mut tensors, "reg_b", &model.reg_b);
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "blrpn".into(),
            meta,
            arm: None,
            model_config: model.cfg.clone(),
            use_flow: false,
            seen_classes: Vec::new(),
            tensors,
        }
    }

    pub fn to_blrpn(&self) -> Result<(BlrpnModel, VocabularyMatrix)> {
        if self.kind != "blrpn" {
            return Err(BlcError::Checkpoint(format!(
                "expected blrpn checkpoint, got '{}'",
                self.kind
            )));
        }
        let wfb_mat = get(&self.tensors, "wfb")?.to2("wfb")?;
        let wfb = ForegroundBackgroundMatrix::new(
            wfb_mat.column(0).to_owned(),
            wfb_mat.column(1).to_owned(),
        )?;
        let vocab = VocabularyMatrix::from_matrix(get(&self.tensors, "vocab")?.to2("vocab")?)?;
        let model = BlrpnModel {
            wfb,
            semantic: SemanticBranchParams::new(
                get(&self.tensors, "t")?.to2("t")?,
                get(&self.tensors, "m")?.to2("m")?,
            ),
            reg_w: get(&self.tensors, "reg_w")?.to2("reg_w")?,
            reg_b: get(&self.tensors, "reg_b")?.to1("reg_b")?,
            cfg: self.model_config.clone(),
        };
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
