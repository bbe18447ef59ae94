//! Ingestion of annotation subsets: a minimal JSON structure (images,
//! annotations with `bbox: [x, y, w, h]`, categories) compatible with common
//! detection dumps. Boxes are converted to corner form on load. Training
//! images containing any unseen-class object are excluded; the test set is
//! passed through unmodified.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, Dataset, FilterPolicy, GtBox, SplitConfig};
use crate::detector::bbox::BBox;
use crate::error::{BlcError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    /// x, y, width, height
    pub bbox: [f64; 4],
    pub category_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

impl AnnotationFile {
    pub fn from_dataset(ds: &Dataset, split: &SplitConfig) -> Self {
        let mut categories: Vec<CategoryRecord> = Vec::new();
        let cat_id = |name: &str, categories: &mut Vec<CategoryRecord>| -> u64 {
            if let Some(c) = categories.iter().find(|c| c.name == name) {
                return c.id;
            }
            let id = categories.len() as u64 + 1;
            categories.push(CategoryRecord {
                id,
                name: name.to_string(),
            });
            id
        };
        // stable category ids: seen first, then unseen
        for name in split.seen.iter().chain(split.unseen.iter()) {
            cat_id(name, &mut categories);
        }
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for image in &ds.images {
            images.push(ImageRecord {
                id: image.id,
                width: image.width,
                height: image.height,
                file_name: None,
            });
            for b in &image.boxes {
                let id = annotations.len() as u64 + 1;
                annotations.push(AnnotationRecord {
                    id: Some(id),
                    image_id: image.id,
                    bbox: [
                        b.bbox.x1,
                        b.bbox.y1,
                        b.bbox.width(),
                        b.bbox.height(),
                    ],
                    category_id: cat_id(&b.class, &mut categories),
                });
            }
        }
        Self {
            images,
            annotations,
            categories,
        }
    }
}

/// Loads an annotation file and materializes (train, test) under the split:
/// the train side applies the split's filter policy, the test side is the
/// file as-is.
pub fn load_annotation_subset(path: &Path, split: &SplitConfig) -> Result<(Dataset, Dataset)> {
    let text = std::fs::read_to_string(path)?;
    parse_annotation_subset(&text, split)
}

pub fn parse_annotation_subset(json: &str, split: &SplitConfig) -> Result<(Dataset, Dataset)> {
    let file: AnnotationFile = serde_json::from_str(json)?;
    let all = dataset_from_file(&file, split)?;
    let train = Dataset {
        images: all
            .images
            .iter()
            .filter(|img| match split.filter_policy {
                FilterPolicy::ExcludeImagesWithUnseen => !img.has_unseen(),
                FilterPolicy::KeepAll => true,
            })
            .cloned()
            .collect(),
    };
    Ok((train, all))
}

fn dataset_from_file(file: &AnnotationFile, split: &SplitConfig) -> Result<Dataset> {
    let mut images: Vec<AnnotatedImage> = file
        .images
        .iter()
        .map(|rec| AnnotatedImage {
            id: rec.id,
            width: rec.width,
            height: rec.height,
            data: None,
            boxes: Vec::new(),
        })
        .collect();
    for ann in &file.annotations {
        let cat = file
            .categories
            .iter()
            .find(|c| c.id == ann.category_id)
            .ok_or_else(|| BlcError::UnknownClass(format!("category id {}", ann.category_id)))?;
        let group = split
            .group_of(&cat.name)
            .ok_or_else(|| BlcError::UnknownClass(cat.name.clone()))?;
        let image = images
            .iter_mut()
            .find(|i| i.id == ann.image_id)
            .ok_or_else(|| BlcError::InvalidConfig(format!("annotation for unknown image id {}", ann.image_id)))?;
        let bbox = BBox::new(
            ann.bbox[0],
            ann.bbox[1],
            ann.bbox[0] + ann.bbox[2],
            ann.bbox[1] + ann.bbox[3],
        )?;
        image.boxes.push(GtBox {
            bbox,
            class: cat.name.clone(),
            group,
        });
    }
    Ok(Dataset { images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassGroup;

    fn sample_json() -> String {
        serde_json::json!({
            "images": [
                {"id": 1, "width": 64.0, "height": 64.0},
                {"id": 2, "width": 64.0, "height": 64.0},
                {"id": 3, "width": 64.0, "height": 64.0}
            ],
            "annotations": [
                {"image_id": 1, "bbox": [4.0, 4.0, 10.0, 12.0], "category_id": 1},
                {"image_id": 2, "bbox": [8.0, 8.0, 16.0, 16.0], "category_id": 2},
                {"image_id": 2, "bbox": [30.0, 30.0, 8.0, 8.0], "category_id": 1},
                {"image_id": 3, "bbox": [10.0, 20.0, 12.0, 6.0], "category_id": 1}
            ],
            "categories": [
                {"id": 1, "name": "horse"},
                {"id": 2, "name": "zebra"}
            ]
        })
        .to_string()
    }

    fn split() -> SplitConfig {
        SplitConfig::new(vec!["horse".into()], vec!["zebra".into()]).unwrap()
    }

    #[test]
    fn image_with_unseen_box_excluded_from_train_kept_in_test() {
        let (train, test) = parse_annotation_subset(&sample_json(), &split()).unwrap();
        assert_eq!(train.len(), 2);
        assert!(train.images.iter().all(|i| i.id != 2));
        assert_eq!(test.len(), 3);
        assert!(test.images.iter().any(|i| i.id == 2));
    }

    #[test]
    fn seen_only_image_included_in_train() {
        let (train, _) = parse_annotation_subset(&sample_json(), &split()).unwrap();
        let img1 = train.images.iter().find(|i| i.id == 1).unwrap();
        assert_eq!(img1.boxes.len(), 1);
        assert_eq!(img1.boxes[0].group, ClassGroup::Seen);
        // width/height converted to corner form
        assert_eq!(img1.boxes[0].bbox.x2, 14.0);
        assert_eq!(img1.boxes[0].bbox.y2, 16.0);
    }

    #[test]
    fn unknown_class_is_reported_by_name() {
        let json = serde_json::json!({
            "images": [{"id": 1, "width": 64.0, "height": 64.0}],
            "annotations": [{"image_id": 1, "bbox": [0.0, 0.0, 4.0, 4.0], "category_id": 1}],
            "categories": [{"id": 1, "name": "gryphon"}]
        })
        .to_string();
        let err = parse_annotation_subset(&json, &split()).unwrap_err();
        assert!(matches!(err, BlcError::UnknownClass(name) if name == "gryphon"));
    }

    #[test]
    fn toy_dataset_round_trips_through_annotation_file() {
        let cfg = crate::data::toy::ToyWorldConfig {
            seed: 21,
            ..Default::default()
        };
        let toy_split = cfg.default_split();
        let ds = crate::data::toy::generate_toy_dataset(&cfg, &toy_split, 4, 4).unwrap();
        let file = AnnotationFile::from_dataset(&ds.test, &toy_split);
        let json = serde_json::to_string(&file).unwrap();
        let (_, test) = parse_annotation_subset(&json, &toy_split).unwrap();
        assert_eq!(test.len(), ds.test.len());
        for (a, b) in test.images.iter().zip(ds.test.images.iter()) {
            assert_eq!(a.boxes.len(), b.boxes.len());
            for (x, y) in a.boxes.iter().zip(b.boxes.iter()) {
                assert_eq!(x.class, y.class);
                assert!((x.bbox.x2 - y.bbox.x2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn keep_all_policy_keeps_unseen_images() {
        let mut sp = split();
        sp.filter_policy = FilterPolicy::KeepAll;
        let (train, _) = parse_annotation_subset(&sample_json(), &sp).unwrap();
        assert_eq!(train.len(), 3);
    }
}
