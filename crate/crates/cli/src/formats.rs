//! On-disk formats: `ILM1` binary label maps and JSON annotation files.
//!
//! An annotation file holds one image document or an array of them:
//!
//! ```json
//! {
//!   "image": {"id": "a", "width": 64, "height": 48},
//!   "instances": [
//!     {"score": 0.9, "box": [4, 2, 20, 30], "labelmap": "a_0.ilm"},
//!     {"score": 0.7, "box": [30, 5, 33, 7], "labelmap": [[0, 1, 1], [2, 2, 0]],
//!      "points": [{"part": 1, "u": 0.2, "v": 0.4, "x": 31, "y": 6}]}
//!   ]
//! }
//! ```
//!
//! A label map path is resolved against the annotation file's directory. Its
//! top-left cell sits at `(⌊x1⌋, ⌊y1⌋)`. `score` defaults to 1 and `id` to
//! the document's position in the file.

use crate::error::{CliError, CliResult};
use prcnn_core::metrics::{DensePoseInstance, DensePosePoint, InstanceParsing, LabelGrid, IGNORE};
use serde::Deserialize;
use serde_json::Value;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const ILM_MAGIC: &[u8; 4] = b"ILM1";
const ILM_HEADER: usize = 12;

/// Parses an `ILM1` label map: magic, `u32` LE height and width, then
/// `height · width` row-major `u16` LE labels.
pub fn decode_ilm(bytes: &[u8], path: &Path) -> CliResult<LabelGrid> {
    if bytes.len() < ILM_HEADER || &bytes[..4] != ILM_MAGIC {
        return Err(CliError::format(path, "not an ILM1 label map (bad magic or truncated header)"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
    let (height, width) = (word(4), word(8));
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| CliError::format(path, "label map dimensions overflow"))?;
    let payload = &bytes[ILM_HEADER..];
    if payload.len() != expected {
        return Err(CliError::format(
            path,
            format!("payload is {} bytes, expected {expected} for {height}x{width}", payload.len()),
        ));
    }
    let labels: Vec<u16> = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > IGNORE) {
        return Err(CliError::format(path, format!("label {bad} is out of range (max 255)")));
    }
    LabelGrid::new(width, height, labels).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn encode_ilm(grid: &LabelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(ILM_HEADER + 2 * grid.labels.len());
    out.extend_from_slice(ILM_MAGIC);
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    for l in &grid.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn read_ilm(path: &Path) -> CliResult<LabelGrid> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_ilm(&bytes, path)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageInfoDoc {
    #[serde(default)]
    id: Option<String>,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelMapDoc {
    Path(String),
    Inline(Vec<Vec<u16>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    #[serde(default = "unit_score")]
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    labelmap: Option<LabelMapDoc>,
    #[serde(default)]
    points: Option<Vec<DensePosePoint>>,
}

fn unit_score() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageDoc {
    image: ImageInfoDoc,
    #[serde(default)]
    instances: Vec<InstanceDoc>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub score: f64,
    pub bbox: [f64; 4],
    pub labels: Option<LabelGrid>,
    pub points: Option<Vec<DensePosePoint>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub path: PathBuf,
    pub images: Vec<AnnotatedImage>,
}

impl AnnotationSet {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses annotation JSON; `path` locates relative label map files.
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::format(path, e.to_string()))?;
        let docs = match value {
            Value::Array(items) => items,
            single @ Value::Object(_) => vec![single],
            _ => return Err(CliError::format(path, "expected an image document or an array of them")),
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(docs.len());
        let mut seen = BTreeSet::new();
        for (i, doc) in docs.into_iter().enumerate() {
            let doc: ImageDoc =
                serde_json::from_value(doc).map_err(|e| CliError::format(path, format!("image {i}: {e}")))?;
            let image = convert_image(doc, i, base, path)?;
            if !seen.insert(image.id.clone()) {
                return Err(CliError::format(path, format!("duplicate image id '{}'", image.id)));
            }
            images.push(image);
        }
        Ok(Self {
            path: path.to_path_buf(),
            images,
        })
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.images.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.id == id)
    }
}

fn convert_image(doc: ImageDoc, index: usize, base: &Path, path: &Path) -> CliResult<AnnotatedImage> {
    let id = doc.image.id.unwrap_or_else(|| index.to_string());
    let (width, height) = (doc.image.width, doc.image.height);
    if width == 0 || height == 0 {
        return Err(CliError::format(path, format!("image '{id}' has zero size")));
    }
    let instances = doc
        .instances
        .into_iter()
        .enumerate()
        .map(|(k, inst)| {
            let ctx = |msg: String| CliError::format(path, format!("image '{id}', instance {k}: {msg}"));
            let [x1, y1, x2, y2] = inst.bbox;
            if !inst.score.is_finite() || !inst.bbox.iter().all(|v| v.is_finite()) {
                return Err(ctx("score and box must be finite".into()));
            }
            if x2 < x1 || y2 < y1 {
                return Err(ctx(format!("inverted box {:?}", inst.bbox)));
            }
            // Clamped to the image, the box must keep some extent.
            if x1 >= width as f64 || y1 >= height as f64 || x2 <= 0.0 || y2 <= 0.0 {
                return Err(ctx(format!("box {:?} lies outside the {width}x{height} image", inst.bbox)));
            }
            let labels = match inst.labelmap {
                None => None,
                Some(LabelMapDoc::Path(p)) => Some(read_ilm(&base.join(p))?),
                Some(LabelMapDoc::Inline(rows)) => Some(LabelGrid::from_rows(&rows).map_err(|e| ctx(e.to_string()))?),
            };
            if let Some(points) = &inst.points {
                for p in points {
                    p.validate().map_err(|e| ctx(e.to_string()))?;
                }
            }
            Ok(Instance {
                score: inst.score,
                bbox: inst.bbox,
                labels,
                points: inst.points,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(AnnotatedImage {
        id,
        width,
        height,
        instances,
    })
}

impl AnnotatedImage {
    pub fn parsing_instances(&self, path: &Path) -> CliResult<Vec<InstanceParsing>> {
        self.instances
            .iter()
            .enumerate()
            .map(|(k, inst)| {
                let labels = inst.labels.clone().ok_or_else(|| {
                    CliError::format(path, format!("image '{}', instance {k}: missing labelmap", self.id))
                })?;
                Ok(InstanceParsing {
                    labels,
                    score: inst.score,
                    bbox: inst.bbox,
                })
            })
            .collect()
    }

    pub fn densepose_instances(&self, path: &Path) -> CliResult<Vec<DensePoseInstance>> {
        self.instances
            .iter()
            .enumerate()
            .map(|(k, inst)| {
                let points = inst.points.clone().ok_or_else(|| {
                    CliError::format(path, format!("image '{}', instance {k}: missing points", self.id))
                })?;
                Ok(DensePoseInstance {
                    score: inst.score,
                    bbox: inst.bbox,
                    points,
                })
            })
            .collect()
    }
}

/// Checks that two annotation sets cover the same images and returns the
/// shared ids in ground-truth order.
pub fn paired_ids<'a>(pred: &'a AnnotationSet, gt: &'a AnnotationSet) -> CliResult<Vec<&'a str>> {
    let (p, g) = (pred.ids(), gt.ids());
    if p != g {
        let missing: Vec<&str> = g.difference(&p).copied().collect();
        let extra: Vec<&str> = p.difference(&g).copied().collect();
        return Err(CliError::Usage(format!(
            "image sets differ: missing from predictions {missing:?}, not in ground truth {extra:?}"
        )));
    }
    Ok(gt.images.iter().map(|i| i.id.as_str()).collect())
}
