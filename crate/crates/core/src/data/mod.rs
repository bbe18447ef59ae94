//! Datasets: seen/unseen split configuration, the synthetic attribute-shapes
//! world, and ingestion of annotation subsets.

pub mod annotations;
pub mod toy;

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::detector::bbox::BBox;
use crate::detector::features::ImageData;
use crate::error::{BlcError, Result};

pub use annotations::{load_annotation_subset, parse_annotation_subset, AnnotationFile};
pub use toy::{generate_toy_dataset, ToyClassDef, ToyDataset, ToyWorldConfig};

/// Whether a class has training annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassGroup {
    Seen,
    Unseen,
}

impl std::fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassGroup::Seen => write!(f, "seen"),
            ClassGroup::Unseen => write!(f, "unseen"),
        }
    }
}

impl std::str::FromStr for ClassGroup {
    type Err = BlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(ClassGroup::Seen),
            "unseen" => Ok(ClassGroup::Unseen),
            other => Err(BlcError::Parse {
                line: 0,
                msg: format!("unknown class group '{other}'"),
            }),
        }
    }
}

/// Training-image exclusion rule applied when materializing a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FilterPolicy {
    /// Drop every training image containing any unseen-class object.
    #[default]
    ExcludeImagesWithUnseen,
    /// Keep everything (diagnostics only; not zero-shot clean).
    KeepAll,
}

/// Seen and unseen class lists for one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    #[serde(default)]
    pub filter_policy: FilterPolicy,
}

impl SplitConfig {
    pub fn new(seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(BlcError::InvalidConfig(
                "split needs non-empty seen and unseen lists".into(),
            ));
        }
        for u in &unseen {
            if seen.contains(u) {
                return Err(BlcError::InvalidConfig(format!(
                    "class '{u}' appears in both seen and unseen lists"
                )));
            }
        }
        Ok(Self {
            seen,
            unseen,
            filter_policy: FilterPolicy::default(),
        })
    }

    pub fn group_of(&self, class: &str) -> Option<ClassGroup> {
        if self.seen.iter().any(|c| c == class) {
            Some(ClassGroup::Seen)
        } else if self.unseen.iter().any(|c| c == class) {
            Some(ClassGroup::Unseen)
        } else {
            None
        }
    }
}

/// Parses a split file: class names one per line under `[seen]` / `[unseen]`
/// headers. Blank lines and `#` comments are ignored.
pub fn parse_split_file<R: BufRead>(reader: R) -> Result<SplitConfig> {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    let mut section: Option<ClassGroup> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match t {
            "[seen]" => section = Some(ClassGroup::Seen),
            "[unseen]" => section = Some(ClassGroup::Unseen),
            name => match section {
                Some(ClassGroup::Seen) => seen.push(name.to_string()),
                Some(ClassGroup::Unseen) => unseen.push(name.to_string()),
                None => {
                    return Err(BlcError::Parse {
                        line: line_no,
                        msg: format!("class '{name}' before any [seen]/[unseen] header"),
                    })
                }
            },
        }
    }
    SplitConfig::new(seen, unseen)
}

pub fn format_split_file(split: &SplitConfig) -> String {
    let mut out = String::from("[seen]\n");
    for c in &split.seen {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str("[unseen]\n");
    for c in &split.unseen {
        out.push_str(c);
        out.push('\n');
    }
    out
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: String,
    pub group: ClassGroup,
}

/// An image (pixels or oracle features) with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    /// Absent for ingested annotation subsets (boxes only).
    pub data: Option<ImageData>,
    pub boxes: Vec<GtBox>,
}

impl AnnotatedImage {
    pub fn has_unseen(&self) -> bool {
        self.boxes.iter().any(|b| b.group == ClassGroup::Unseen)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn total_boxes(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }
}

const COCO_80: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich",
    "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book",
    "clock", "vase", "scissors", "teddy bear", "hair drier", "toothbrush",
];

const SEEN_48: [&str; 48] = [
    "person", "bicycle", "car", "motorcycle", "truck", "boat", "bench", "bird", "horse", "sheep",
    "bear", "zebra", "giraffe", "backpack", "handbag", "suitcase", "frisbee", "skis", "kite",
    "surfboard", "bottle", "fork", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "pizza", "donut", "chair", "bed", "toilet", "tv", "laptop", "mouse",
    "remote", "microwave", "oven", "toaster", "refrigerator", "book", "clock", "vase",
    "toothbrush", "train",
];

const UNSEEN_17: [&str; 17] = [
    "bus", "dog", "cow", "elephant", "umbrella", "tie", "skateboard", "cup", "knife", "cake",
    "couch", "keyboard", "sink", "scissors", "airplane", "cat", "snowboard",
];

const UNSEEN_15: [&str; 15] = [
    "airplane", "train", "parking meter", "cat", "bear", "suitcase", "frisbee", "snowboard",
    "fork", "sandwich", "hot dog", "toilet", "mouse", "toaster", "hair drier",
];

/// The two standard splits, keyed `coco-48-17` and `coco-65-15`.
pub fn builtin_splits() -> BTreeMap<String, SplitConfig> {
    let mut map = BTreeMap::new();
    map.insert(
        "coco-48-17".to_string(),
        SplitConfig::new(
            SEEN_48.iter().map(|s| s.to_string()).collect(),
            UNSEEN_17.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin split is valid"),
    );
    let unseen_15: Vec<String> = UNSEEN_15.iter().map(|s| s.to_string()).collect();
    let seen_65: Vec<String> = COCO_80
        .iter()
        .filter(|c| !UNSEEN_15.contains(c))
        .map(|s| s.to_string())
        .collect();
    map.insert(
        "coco-65-15".to_string(),
        SplitConfig::new(seen_65, unseen_15).expect("builtin split is valid"),
    );
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_split_counts() {
        let splits = builtin_splits();
        let s4817 = &splits["coco-48-17"];
        assert_eq!(s4817.seen.len(), 48);
        assert_eq!(s4817.unseen.len(), 17);
        let s6515 = &splits["coco-65-15"];
        assert_eq!(s6515.seen.len(), 65);
        assert_eq!(s6515.unseen.len(), 15);
    }

    #[test]
    fn builtin_splits_are_disjoint() {
        for split in builtin_splits().values() {
            for u in &split.unseen {
                assert!(!split.seen.contains(u), "{u} in both lists");
            }
        }
    }

    #[test]
    fn pinned_unseen_lists() {
        let splits = builtin_splits();
        assert!(splits["coco-48-17"].unseen.iter().any(|c| c == "bus"));
        assert!(splits["coco-48-17"].unseen.iter().any(|c| c == "snowboard"));
        assert!(splits["coco-65-15"].unseen.iter().any(|c| c == "hair drier"));
        assert!(splits["coco-65-15"]
            .unseen
            .iter()
            .any(|c| c == "parking meter"));
        assert_eq!(splits["coco-65-15"].unseen[0], "airplane");
    }

    #[test]
    fn split_file_round_trip() {
        let split = SplitConfig::new(
            vec!["a".into(), "b".into()],
            vec!["c".into()],
        )
        .unwrap();
        let text = format_split_file(&split);
        let parsed = parse_split_file(std::io::Cursor::new(text.as_bytes())).unwrap();
        assert_eq!(parsed.seen, split.seen);
        assert_eq!(parsed.unseen, split.unseen);
    }

    #[test]
    fn split_file_requires_header() {
        let err = parse_split_file(std::io::Cursor::new(b"aardvark\n".as_slice())).unwrap_err();
        assert!(matches!(err, BlcError::Parse { line: 1, .. }));
    }

    #[test]
    fn overlapping_split_rejected() {
        assert!(SplitConfig::new(vec!["a".into()], vec!["a".into()]).is_err());
    }
}
