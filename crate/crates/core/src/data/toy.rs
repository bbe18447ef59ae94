//! The synthetic attribute-shapes world: classes are (shape, color, size,
//! texture) tuples, class word vectors are normalized concatenations of
//! per-attribute-value embeddings, and images are either rendered pixels or
//! oracle feature maps where objects paint their visual signature over a
//! noisy, cluttered background. Unseen classes recombine attribute values
//! that all occur among the seen classes, which is what makes zero-shot
//! transfer possible at all.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, ClassGroup, Dataset, SplitConfig};
use crate::detector::bbox::BBox;
use crate::detector::features::{FeatureMap, ImageData};
use crate::embeddings::EmbeddingTable;
use crate::error::{BlcError, Result};
use crate::provenance::hex_digest;
use crate::util::{derive_seed, random_unit_vector, rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyClassDef {
    pub name: String,
    pub shape: String,
    pub color: String,
    pub size: String,
    pub texture: String,
}

impl ToyClassDef {
    fn values(&self) -> [&str; 4] {
        [&self.shape, &self.color, &self.size, &self.texture]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub image_size: usize,
    /// Feature-map side in cells; stride is `image_size / feature_grid`.
    pub feature_grid: usize,
    /// Word-embedding dimension per attribute axis (d = 4 × this).
    pub attr_word_dim: usize,
    /// Visual-signature dimension per attribute axis (channels = 4 × this).
    pub attr_vis_dim: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub textures: Vec<String>,
    pub classes: Vec<ToyClassDef>,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of clutter patches per image.
    pub clutter_per_image: (usize, usize),
    /// Magnitude of clutter patches relative to object signatures.
    pub clutter_strength: f64,
    /// Number of recurring distractor appearances the background draws
    /// from. Distractors look object-like but carry no annotation, giving
    /// the background consistent structure.
    pub distractor_types: usize,
    /// Std-dev of the background noise added to every feature cell.
    pub noise_bg: f64,
    /// Relative jitter on object signatures.
    pub signature_jitter: f64,
    /// Guaranteed unseen objects in each test image (capped by the range).
    pub min_unseen_per_test_image: usize,
    /// Emit oracle feature maps (true) or rendered pixels (false).
    pub oracle_features: bool,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        let shapes = ["circle", "square", "triangle", "cross"];
        let colors = ["red", "green", "blue", "yellow"];
        let sizes = ["small", "large"];
        let textures = ["solid", "striped"];
        // 12 seen + 4 unseen combinations; every attribute value of every
        // unseen class also occurs in some seen class.
        let defs: [(usize, usize, usize, usize); 16] = [
            (0, 0, 0, 0),
            (0, 1, 1, 1),
            (0, 2, 1, 0),
            (1, 0, 1, 1),
            (1, 1, 0, 0),
            (1, 3, 0, 1),
            (2, 0, 0, 1),
            (2, 2, 1, 1),
            (2, 3, 1, 0),
            (3, 1, 1, 0),
            (3, 2, 0, 0),
            (3, 3, 1, 1),
            // unseen: fresh recombinations of the values above
            (0, 3, 0, 1),
            (1, 2, 1, 0),
            (2, 1, 0, 0),
            (3, 0, 0, 1),
        ];
        let classes = defs
            .iter()
            .map(|&(s, c, z, t)| ToyClassDef {
                name: format!("{}_{}_{}_{}", colors[c], sizes[z], textures[t], shapes[s]),
                shape: shapes[s].into(),
                color: colors[c].into(),
                size: sizes[z].into(),
                texture: textures[t].into(),
            })
            .collect();
        Self {
            image_size: 64,
            feature_grid: 16,
            attr_word_dim: 8,
            attr_vis_dim: 4,
            shapes: shapes.iter().map(|s| s.to_string()).collect(),
            colors: colors.iter().map(|s| s.to_string()).collect(),
            sizes: sizes.iter().map(|s| s.to_string()).collect(),
            textures: textures.iter().map(|s| s.to_string()).collect(),
            classes,
            objects_per_image: (2, 4),
            clutter_per_image: (4, 8),
            clutter_strength: 1.0,
            distractor_types: 4,
            noise_bg: 0.1,
            signature_jitter: 0.25,
            min_unseen_per_test_image: 1,
            oracle_features: true,
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    /// The default 12-seen / 4-unseen split over the default classes.
    pub fn default_split(&self) -> SplitConfig {
        let names: Vec<String> = self.classes.iter().map(|c| c.name.clone()).collect();
        let (seen, unseen) = names.split_at(names.len().saturating_sub(4));
        SplitConfig::new(seen.to_vec(), unseen.to_vec()).expect("default split is valid")
    }

    pub fn word_dim(&self) -> usize {
        4 * self.attr_word_dim
    }

    pub fn feature_channels(&self) -> usize {
        4 * self.attr_vis_dim
    }

    pub fn stride(&self) -> f64 {
        self.image_size as f64 / self.feature_grid as f64
    }

    fn class_def(&self, name: &str) -> Option<&ToyClassDef> {
        self.classes.iter().find(|c| c.name == name)
    }

    fn radius_for_size(&self, size: &str) -> f64 {
        let idx = self.sizes.iter().position(|s| s == size).unwrap_or(0);
        self.image_size as f64 * (1.0 + idx as f64) / 12.0
    }
}

/// Per-attribute-value vectors for one axis.
fn axis_vectors(
    r: &mut ChaCha12Rng,
    values: &[String],
    dim: usize,
) -> BTreeMap<String, Array1<f64>> {
    values
        .iter()
        .map(|v| (v.clone(), random_unit_vector(r, dim)))
        .collect()
}

struct ToyWorld {
    word_axes: [BTreeMap<String, Array1<f64>>; 4],
    vis_axes: [BTreeMap<String, Array1<f64>>; 4],
    /// Recurring background appearances, scaled like object signatures.
    distractor_sigs: Vec<Array1<f64>>,
}

impl ToyWorld {
    fn build(cfg: &ToyWorldConfig) -> Self {
        let mut wr = rng(derive_seed(cfg.seed, "word-embeddings", 0));
        let word_axes = [
            axis_vectors(&mut wr, &cfg.shapes, cfg.attr_word_dim),
            axis_vectors(&mut wr, &cfg.colors, cfg.attr_word_dim),
            axis_vectors(&mut wr, &cfg.sizes, cfg.attr_word_dim),
            axis_vectors(&mut wr, &cfg.textures, cfg.attr_word_dim),
        ];
        let mut vr = rng(derive_seed(cfg.seed, "visual-signatures", 0));
        let vis_axes = [
            axis_vectors(&mut vr, &cfg.shapes, cfg.attr_vis_dim),
            axis_vectors(&mut vr, &cfg.colors, cfg.attr_vis_dim),
            axis_vectors(&mut vr, &cfg.sizes, cfg.attr_vis_dim),
            axis_vectors(&mut vr, &cfg.textures, cfg.attr_vis_dim),
        ];
        let mut dr = rng(derive_seed(cfg.seed, "visual-distractors", 0));
        // Distractors are incoherent attribute mixtures: real attribute
        // blocks (so plain objectness cannot reject them) combined in a way
        // no annotated class uses, with off-nominal per-block weights.
        let class_combos: Vec<[usize; 4]> = cfg
            .classes
            .iter()
            .map(|def| {
                [
                    cfg.shapes.iter().position(|v| *v == def.shape).unwrap_or(0),
                    cfg.colors.iter().position(|v| *v == def.color).unwrap_or(0),
                    cfg.sizes.iter().position(|v| *v == def.size).unwrap_or(0),
                    cfg.textures.iter().position(|v| *v == def.texture).unwrap_or(0),
                ]
            })
            .collect();
        let mut distractor_sigs = Vec::with_capacity(cfg.distractor_types);
        while distractor_sigs.len() < cfg.distractor_types {
            let combo = [
                dr.random_range(0..cfg.shapes.len().max(1)),
                dr.random_range(0..cfg.colors.len().max(1)),
                dr.random_range(0..cfg.sizes.len().max(1)),
                dr.random_range(0..cfg.textures.len().max(1)),
            ];
            if class_combos.contains(&combo) {
                continue;
            }
            let values: [&str; 4] = [
                &cfg.shapes[combo[0]],
                &cfg.colors[combo[1]],
                &cfg.sizes[combo[2]],
                &cfg.textures[combo[3]],
            ];
            let mut sig = Array1::<f64>::zeros(4 * cfg.attr_vis_dim);
            for (axis, value) in values.iter().enumerate() {
                let block = vis_axes[axis].get(*value).expect("attribute value exists");
                let weight = dr.random_range(0.6..1.4) * cfg.clutter_strength;
                let off = axis * cfg.attr_vis_dim;
                for (i, v) in block.iter().enumerate() {
                    sig[off + i] = weight * v;
                }
            }
            distractor_sigs.push(sig);
        }
        Self {
            word_axes,
            vis_axes,
            distractor_sigs,
        }
    }

    /// Concatenated attribute embeddings, ℓ2-normalized.
    fn word_vector(&self, def: &ToyClassDef) -> Array1<f64> {
        let parts: Vec<&Array1<f64>> = def
            .values()
            .iter()
            .zip(self.word_axes.iter())
            .map(|(v, axis)| &axis[*v])
            .collect();
        concat_normalized(&parts)
    }

    fn visual_signature(&self, def: &ToyClassDef) -> Array1<f64> {
        let parts: Vec<&Array1<f64>> = def
            .values()
            .iter()
            .zip(self.vis_axes.iter())
            .map(|(v, axis)| &axis[*v])
            .collect();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = Array1::<f64>::zeros(total);
        let mut off = 0;
        for p in parts {
            out.slice_mut(ndarray::s![off..off + p.len()]).assign(p);
            off += p.len();
        }
        out
    }
}

fn concat_normalized(parts: &[&Array1<f64>]) -> Array1<f64> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Array1::<f64>::zeros(total);
    let mut off = 0;
    for p in parts {
        out.slice_mut(ndarray::s![off..off + p.len()]).assign(p);
        off += p.len();
    }
    let norm = out.dot(&out).sqrt();
    out / norm
}

/// A generated dataset plus its embedding tables and content hash.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Dataset,
    pub test: Dataset,
    /// Word vectors for every class in the config.
    pub class_table: EmbeddingTable,
    /// External vocabulary: all attribute combinations.
    pub vocab_table: EmbeddingTable,
    pub content_hash: String,
}

/// Generates a deterministic toy dataset. Train images contain seen-class
/// objects only; test images mix seen and unseen objects.
pub fn generate_toy_dataset(
    cfg: &ToyWorldConfig,
    split: &SplitConfig,
    n_train: usize,
    n_test: usize,
) -> Result<ToyDataset> {
    validate(cfg, split)?;
    let world = ToyWorld::build(cfg);

    let mut class_table = EmbeddingTable::new(cfg.word_dim());
    for def in &cfg.classes {
        class_table.insert(&def.name, world.word_vector(def))?;
    }

    let mut vocab_table = EmbeddingTable::new(cfg.word_dim());
    for s in &cfg.shapes {
        for c in &cfg.colors {
            for z in &cfg.sizes {
                for t in &cfg.textures {
                    let def = ToyClassDef {
                        name: format!("voc_{c}_{z}_{t}_{s}"),
                        shape: s.clone(),
                        color: c.clone(),
                        size: z.clone(),
                        texture: t.clone(),
                    };
                    vocab_table.insert(&def.name, world.word_vector(&def))?;
                }
            }
        }
    }

    let train_images: Vec<AnnotatedImage> = (0..n_train)
        .map(|i| {
            render_image(
                cfg,
                split,
                &world,
                i as u64,
                derive_seed(cfg.seed, "train-image", i as u64),
                false,
            )
        })
        .collect::<Result<_>>()?;
    let test_images: Vec<AnnotatedImage> = (0..n_test)
        .map(|i| {
            render_image(
                cfg,
                split,
                &world,
                1_000_000 + i as u64,
                derive_seed(cfg.seed, "test-image", i as u64),
                true,
            )
        })
        .collect::<Result<_>>()?;

    let train = Dataset {
        images: train_images,
    };
    let test = Dataset {
        images: test_images,
    };
    let content_hash = content_hash(cfg, split, n_train, n_test, &train, &test);
    Ok(ToyDataset {
        train,
        test,
        class_table,
        vocab_table,
        content_hash,
    })
}

fn validate(cfg: &ToyWorldConfig, split: &SplitConfig) -> Result<()> {
    for name in split.seen.iter().chain(split.unseen.iter()) {
        if cfg.class_def(name).is_none() {
            return Err(BlcError::UnknownClass(name.clone()));
        }
    }
    if cfg.objects_per_image.0 > cfg.objects_per_image.1 || cfg.objects_per_image.1 == 0 {
        return Err(BlcError::InvalidConfig(
            "objects_per_image range is empty".into(),
        ));
    }
    if cfg.image_size % cfg.feature_grid != 0 {
        return Err(BlcError::InvalidConfig(
            "image_size must be a multiple of feature_grid".into(),
        ));
    }
    // transferability: every unseen attribute value must occur in a seen class
    for uname in &split.unseen {
        let udef = cfg.class_def(uname).unwrap();
        for (axis, value) in udef.values().iter().enumerate() {
            let covered = split.seen.iter().any(|sname| {
                cfg.class_def(sname)
                    .map(|sdef| sdef.values()[axis] == *value)
                    .unwrap_or(false)
            });
            if !covered {
                return Err(BlcError::InvalidConfig(format!(
                    "unseen class '{uname}' attribute '{value}' never occurs among seen classes"
                )));
            }
        }
    }
    Ok(())
}

struct PlacedObject {
    bbox: BBox,
    class: String,
    group: ClassGroup,
}

fn place_objects(
    cfg: &ToyWorldConfig,
    split: &SplitConfig,
    r: &mut ChaCha12Rng,
    is_test: bool,
) -> Vec<PlacedObject> {
    let n_obj = r.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let img = cfg.image_size as f64;
    let mut placed: Vec<PlacedObject> = Vec::new();
    for slot in 0..n_obj {
        let force_unseen = is_test && slot < cfg.min_unseen_per_test_image.min(n_obj);
        let class = if force_unseen && !split.unseen.is_empty() {
            split.unseen[r.random_range(0..split.unseen.len())].clone()
        } else if is_test {
            // mixed pool: seen and unseen both occur in test images
            let pool_len = split.seen.len() + split.unseen.len();
            let idx = r.random_range(0..pool_len);
            if idx < split.seen.len() {
                split.seen[idx].clone()
            } else {
                split.unseen[idx - split.seen.len()].clone()
            }
        } else {
            split.seen[r.random_range(0..split.seen.len())].clone()
        };
        let def = cfg.class_def(&class).unwrap();
        let base_r = cfg.radius_for_size(&def.size);
        // bounded placement attempts to limit overlap; accept the last try
        let mut best: Option<BBox> = None;
        for _ in 0..20 {
            let radius = base_r * r.random_range(0.85..1.15);
            let cx = r.random_range(radius..img - radius);
            let cy = r.random_range(radius..img - radius);
            let candidate = BBox {
                x1: cx - radius,
                y1: cy - radius,
                x2: cx + radius,
                y2: cy + radius,
            };
            let overlaps = placed.iter().any(|p| p.bbox.iou(&candidate) > 0.25);
            best = Some(candidate);
            if !overlaps {
                break;
            }
        }
        let group = split.group_of(&class).expect("class is in the split");
        placed.push(PlacedObject {
            bbox: best.unwrap(),
            class,
            group,
        });
    }
    placed
}

struct Distractor {
    bbox: BBox,
    kind: usize,
}

fn place_distractors(cfg: &ToyWorldConfig, r: &mut ChaCha12Rng) -> Vec<Distractor> {
    if cfg.distractor_types == 0 {
        return Vec::new();
    }
    let n = r.random_range(cfg.clutter_per_image.0..=cfg.clutter_per_image.1);
    let img = cfg.image_size as f64;
    (0..n)
        .map(|_| {
            let kind = r.random_range(0..cfg.distractor_types);
            let radius = img / 12.0 * r.random_range(0.8..1.3);
            let cx = r.random_range(radius..img - radius);
            let cy = r.random_range(radius..img - radius);
            Distractor {
                bbox: BBox {
                    x1: cx - radius,
                    y1: cy - radius,
                    x2: cx + radius,
                    y2: cy + radius,
                },
                kind,
            }
        })
        .collect()
}

fn render_image(
    cfg: &ToyWorldConfig,
    split: &SplitConfig,
    world: &ToyWorld,
    id: u64,
    seed: u64,
    is_test: bool,
) -> Result<AnnotatedImage> {
    let mut r = rng(seed);
    let objects = place_objects(cfg, split, &mut r, is_test);
    let distractors = place_distractors(cfg, &mut r);
    let data = if cfg.oracle_features {
        ImageData::OracleFeatures(render_oracle_features(
            cfg,
            world,
            &objects,
            &distractors,
            &mut r,
        ))
    } else {
        ImageData::Pixels(render_pixels(cfg, &objects, &distractors, &mut r))
    };
    Ok(AnnotatedImage {
        id,
        width: cfg.image_size as f64,
        height: cfg.image_size as f64,
        data: Some(data),
        boxes: objects
            .into_iter()
            .map(|o| crate::data::GtBox {
                bbox: o.bbox,
                class: o.class,
                group: o.group,
            })
            .collect(),
    })
}

/// Feature-space rendering: background noise, recurring distractor
/// patches, and per-object signatures painted over the cells each box
/// covers.
fn render_oracle_features(
    cfg: &ToyWorldConfig,
    world: &ToyWorld,
    objects: &[PlacedObject],
    distractors: &[Distractor],
    r: &mut ChaCha12Rng,
) -> FeatureMap {
    let g = cfg.feature_grid;
    let c = cfg.feature_channels();
    let stride = cfg.stride();
    let mut data = Array3::<f64>::zeros((c, g, g));
    for cell in data.iter_mut() {
        *cell = cfg.noise_bg * r.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let mut paint = |bbox: &BBox, sig: &Array1<f64>, data: &mut Array3<f64>, r: &mut ChaCha12Rng| {
        for y in 0..g {
            for x in 0..g {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                if cx >= bbox.x1 && cx < bbox.x2 && cy >= bbox.y1 && cy < bbox.y2 {
                    let jitter: f64 = r.sample::<f64, _>(rand_distr::StandardNormal);
                    let scale = 1.0 + cfg.signature_jitter * jitter;
                    for ch in 0..c {
                        data[[ch, y, x]] += scale * sig[ch];
                    }
                }
            }
        }
    };
    for d in distractors {
        let sig = world.distractor_sigs[d.kind].clone();
        paint(&d.bbox, &sig, &mut data, r);
    }
    for obj in objects {
        let def = cfg.class_def(&obj.class).unwrap();
        let sig = world.visual_signature(def);
        paint(&obj.bbox, &sig, &mut data, r);
    }
    FeatureMap { data, stride }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.25, 0.9],
    [0.9, 0.85, 0.15],
    [0.85, 0.2, 0.85],
    [0.2, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.6, 0.6, 0.6],
];

/// Pixel rendering for the conv-backbone path.
fn render_pixels(
    cfg: &ToyWorldConfig,
    objects: &[PlacedObject],
    distractors: &[Distractor],
    r: &mut ChaCha12Rng,
) -> Array3<f64> {
    let s = cfg.image_size;
    let mut img = Array3::<f64>::zeros((3, s, s));
    for px in img.iter_mut() {
        *px = 0.05 * r.random_range(0.0..1.0);
    }
    // distractors: filled circles in colors outside the class palette
    for d in distractors {
        let rgb = PALETTE[(4 + d.kind) % PALETTE.len()];
        let (cx, cy) = d.bbox.center();
        let radius = d.bbox.width() / 2.0;
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    for ch in 0..3 {
                        img[[ch, y, x]] = rgb[ch];
                    }
                }
            }
        }
    }
    for obj in objects {
        let def = cfg.class_def(&obj.class).unwrap();
        let color_idx = cfg.colors.iter().position(|c| *c == def.color).unwrap_or(0);
        let rgb = PALETTE[color_idx % PALETTE.len()];
        let shape_idx = cfg.shapes.iter().position(|c| *c == def.shape).unwrap_or(0);
        let striped = cfg
            .textures
            .iter()
            .position(|t| *t == def.texture)
            .unwrap_or(0)
            == 1;
        let (cx, cy) = obj.bbox.center();
        let rx = obj.bbox.width() / 2.0;
        let ry = obj.bbox.height() / 2.0;
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = match shape_idx % 4 {
                    0 => dx * dx + dy * dy <= 1.0,                     // circle
                    1 => dx.abs() <= 1.0 && dy.abs() <= 1.0,          // square
                    2 => dy >= -1.0 && dy <= 1.0 && dx.abs() <= (1.0 - dy) / 2.0 + 0.5, // triangle
                    _ => (dx.abs() <= 0.34 || dy.abs() <= 0.34) && dx.abs() <= 1.0 && dy.abs() <= 1.0, // cross
                };
                if inside && !(striped && (y / 2) % 2 == 0) {
                    for ch in 0..3 {
                        img[[ch, y, x]] = rgb[ch];
                    }
                }
            }
        }
    }
    img
}

fn content_hash(
    cfg: &ToyWorldConfig,
    split: &SplitConfig,
    n_train: usize,
    n_test: usize,
    train: &Dataset,
    test: &Dataset,
) -> String {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(serde_json::to_string(cfg).unwrap().as_bytes());
    bytes.extend_from_slice(serde_json::to_string(split).unwrap().as_bytes());
    bytes.extend_from_slice(&(n_train as u64).to_le_bytes());
    bytes.extend_from_slice(&(n_test as u64).to_le_bytes());
    for ds in [train, test] {
        for image in &ds.images {
            bytes.extend_from_slice(&image.id.to_le_bytes());
            for b in &image.boxes {
                bytes.extend_from_slice(b.class.as_bytes());
                for v in [b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2] {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            if let Some(ImageData::OracleFeatures(map)) = &image.data {
                // sample a few cells rather than hashing every float
                let d = &map.data;
                for &v in [
                    d[[0, 0, 0]],
                    d[[0, d.shape()[1] / 2, d.shape()[2] / 2]],
                ]
                .iter()
                {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
    }
    hex_digest(&bytes)
}
