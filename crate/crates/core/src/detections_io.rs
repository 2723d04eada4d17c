//! Detection manifests: JSONL ingestion, label canonicalization and validation.
//!
//! A manifest is a header line followed by one line per image:
//!
//! ```text
//! {"id_labels": ["dog", "cat"], "meta": {"source": "voc"}}
//! {"image_path": "a.png", "width": 640, "height": 480, "detections": [
//!     {"id": "a-0", "box": [10, 20, 100, 50], "label": "dog", "confidence": 0.93, "gt": "id"}]}
//! ```
//!
//! Boxes are `[x, y, w, h]` in integer pixels, top-left origin. Whether a
//! detection is ID or OOD is carried per detection (`gt`) so that everything
//! downstream stays dataset-agnostic.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Axis-aligned box in original-image pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.w)
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.h)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn is_degenerate(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.right() <= u64::from(width) && self.bottom() <= u64::from(height)
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        u64::from(self.x) < other.right()
            && u64::from(other.x) < self.right()
            && u64::from(self.y) < other.bottom()
            && u64::from(other.y) < self.bottom()
    }
}

impl From<[u32; 4]> for BoundingBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

/// Ground-truth membership of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtFlag {
    Id,
    Ood,
}

impl GtFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            GtFlag::Id => "id",
            GtFlag::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "id")]
    pub detection_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "gt")]
    pub gt_flag: GtFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub id_label_set: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub metadata: Map<String, Value>,
    /// Directory relative image paths are resolved against. Not serialized.
    pub root: PathBuf,
}

impl Manifest {
    pub fn detection_count(&self) -> usize {
        self.images.iter().map(|im| im.detections.len()).sum()
    }

    /// Filesystem location of an image record's raster.
    pub fn resolve_image(&self, record: &ImageRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Drop detections whose confidence is below `min_confidence`.
    /// Returns the filtered manifest and the number of dropped detections.
    pub fn filter_confidence(&self, min_confidence: f64) -> (Manifest, usize) {
        let mut dropped = 0;
        let images = self
            .images
            .iter()
            .map(|im| {
                let detections: Vec<Detection> = im
                    .detections
                    .iter()
                    .filter(|d| d.confidence >= min_confidence)
                    .cloned()
                    .collect();
                dropped += im.detections.len() - detections.len();
                ImageRecord {
                    detections,
                    ..im.clone()
                }
            })
            .collect();
        (
            Manifest {
                images,
                ..self.clone()
            },
            dropped,
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("label is empty after trimming")]
    Empty,
    #[error("alias '{alias}' maps to '{target}', which is itself remapped")]
    ChainedAlias { alias: String, target: String },
}

/// Trims, lowercases and maps British spellings to the US forms that
/// vision-language text encoders are usually trained on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelNormalizer {
    aliases: BTreeMap<String, String>,
}

const BUILTIN_ALIASES: [(&str, &str); 3] = [
    ("aeroplane", "airplane"),
    ("couch", "sofa"),
    ("tv monitor", "tv monitor"),
];

impl Default for LabelNormalizer {
    fn default() -> Self {
        let aliases = BUILTIN_ALIASES
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { aliases }
    }
}

fn fold_case(raw: &str) -> String {
    raw.to_lowercase().trim().to_string()
}

impl LabelNormalizer {
    /// Add an alias. Both sides are case-folded. An alias whose target is
    /// itself remapped (or that would remap an existing target) is rejected so
    /// that normalization stays idempotent.
    pub fn with_alias(mut self, raw: &str, canonical: &str) -> Result<Self, LabelError> {
        let key = fold_case(raw);
        let value = fold_case(canonical);
        if key.is_empty() || value.is_empty() {
            return Err(LabelError::Empty);
        }
        if let Some(next) = self.aliases.get(&value) {
            if *next != value {
                return Err(LabelError::ChainedAlias {
                    alias: key,
                    target: value,
                });
            }
        }
        if key != value && self.aliases.values().any(|v| *v == key) {
            return Err(LabelError::ChainedAlias {
                alias: key,
                target: value,
            });
        }
        self.aliases.insert(key, value);
        Ok(self)
    }

    pub fn with_aliases<'a, I>(self, pairs: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = (&'a String, &'a String)>,
    {
        pairs
            .into_iter()
            .try_fold(self, |n, (k, v)| n.with_alias(k, v))
    }

    pub fn normalize(&self, raw: &str) -> Result<String, LabelError> {
        let folded = fold_case(raw);
        if folded.is_empty() {
            return Err(LabelError::Empty);
        }
        Ok(self.aliases.get(&folded).cloned().unwrap_or(folded))
    }
}

/// Canonicalize a label with the built-in alias table.
pub fn normalize_label(raw: &str) -> Result<String, LabelError> {
    LabelNormalizer::default().normalize(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ViolationRule {
    DegenerateBox {
        bbox: BoundingBox,
    },
    BoxOutOfBounds {
        bbox: BoundingBox,
        width: u32,
        height: u32,
    },
    DuplicateId,
    UnknownLabel {
        label: String,
    },
    NonCanonicalLabel {
        label: String,
    },
    ConfidenceOutOfRange {
        confidence: f64,
    },
    EmptyImage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub image_path: String,
    pub detection_id: Option<String>,
    #[serde(flatten)]
    pub rule: ViolationRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let who = match &self.detection_id {
            Some(id) => format!("detection '{id}' in '{}'", self.image_path),
            None => format!("image '{}'", self.image_path),
        };
        match &self.rule {
            ViolationRule::DegenerateBox { bbox } => write!(f, "{who}: degenerate box {bbox}"),
            ViolationRule::BoxOutOfBounds {
                bbox,
                width,
                height,
            } => {
                write!(f, "{who}: box {bbox} exceeds image bounds {width}x{height}")
            }
            ViolationRule::DuplicateId => write!(f, "{who}: duplicate id"),
            ViolationRule::UnknownLabel { label } => {
                write!(f, "{who}: unknown label '{label}' (not in id_labels)")
            }
            ViolationRule::NonCanonicalLabel { label } => {
                write!(f, "{who}: label '{label}' is not canonical")
            }
            ViolationRule::ConfidenceOutOfRange { confidence } => {
                write!(f, "{who}: confidence {confidence} outside [0, 1]")
            }
            ViolationRule::EmptyImage => write!(f, "{who}: zero width or height"),
        }
    }
}

/// Check every manifest invariant. Violations are data; an empty list means
/// the manifest is valid.
pub fn validate_manifest(m: &Manifest) -> Vec<Violation> {
    let labels: HashSet<&str> = m.id_label_set.iter().map(String::as_str).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut out = Vec::new();

    for im in &m.images {
        let image_violation = |rule| Violation {
            image_path: im.image_path.clone(),
            detection_id: None,
            rule,
        };
        if im.width == 0 || im.height == 0 {
            out.push(image_violation(ViolationRule::EmptyImage));
        }
        for d in &im.detections {
            let mut push = |rule| {
                out.push(Violation {
                    image_path: im.image_path.clone(),
                    detection_id: Some(d.detection_id.clone()),
                    rule,
                })
            };
            if !seen.insert(d.detection_id.as_str()) {
                push(ViolationRule::DuplicateId);
            }
            if d.bbox.is_degenerate() {
                push(ViolationRule::DegenerateBox { bbox: d.bbox });
            }
            if !d.bbox.fits_within(im.width, im.height) {
                push(ViolationRule::BoxOutOfBounds {
                    bbox: d.bbox,
                    width: im.width,
                    height: im.height,
                });
            }
            if d.label.is_empty() || fold_case(&d.label) != d.label {
                push(ViolationRule::NonCanonicalLabel {
                    label: d.label.clone(),
                });
            } else if !labels.contains(d.label.as_str()) {
                push(ViolationRule::UnknownLabel {
                    label: d.label.clone(),
                });
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                push(ViolationRule::ConfidenceOutOfRange {
                    confidence: d.confidence,
                });
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Label {
        line: usize,
        #[source]
        source: LabelError,
    },
    #[error("manifest has no header line")]
    MissingHeader,
    #[error("image file not found: {0}")]
    MissingImage(PathBuf),
    #[error("cannot read image header of {path}: {message}")]
    ImageHeader { path: PathBuf, message: String },
    #[error("{}", describe_violations(.0))]
    Invalid(Vec<Violation>),
}

fn describe_violations(v: &[Violation]) -> String {
    match v {
        [] => "manifest validation failed".to_string(),
        [only] => format!("manifest validation failed: {only}"),
        [first, rest @ ..] => format!(
            "manifest validation failed: {first} (and {} more)",
            rest.len()
        ),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    id_labels: Vec<String>,
    #[serde(default)]
    meta: Map<String, Value>,
}

#[derive(Deserialize)]
struct ImageLine {
    image_path: String,
    width: Option<u32>,
    height: Option<u32>,
    #[serde(default)]
    detections: Vec<Detection>,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    id_labels: &'a [String],
    meta: &'a Map<String, Value>,
}

/// Parse a manifest stream and canonicalize every label.
///
/// Missing `width`/`height` are read from the image header, which needs
/// `image_root`; without it they are a parse error. No validation is run.
pub fn parse_manifest<R: Read>(
    reader: R,
    normalizer: &LabelNormalizer,
    image_root: Option<&Path>,
) -> Result<Manifest, ManifestError> {
    let mut header: Option<HeaderLine> = None;
    let mut images = Vec::new();

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        let label_err = |source| ManifestError::Label {
            line: line_no,
            source,
        };

        if header.is_none() {
            let mut h: HeaderLine = serde_json::from_str(&line).map_err(parse_err)?;
            h.id_labels = h
                .id_labels
                .iter()
                .map(|l| normalizer.normalize(l))
                .collect::<Result<_, _>>()
                .map_err(label_err)?;
            header = Some(h);
            continue;
        }

        let raw: ImageLine = serde_json::from_str(&line).map_err(parse_err)?;
        let (width, height) = match (raw.width, raw.height) {
            (Some(w), Some(h)) => (w, h),
            _ => {
                let root = image_root.ok_or_else(|| ManifestError::Parse {
                    line: line_no,
                    message: format!("'{}' lacks width/height", raw.image_path),
                })?;
                let path = resolve(root, &raw.image_path);
                if !path.exists() {
                    return Err(ManifestError::MissingImage(path));
                }
                image::image_dimensions(&path).map_err(|e| ManifestError::ImageHeader {
                    path,
                    message: e.to_string(),
                })?
            }
        };
        let detections = raw
            .detections
            .into_iter()
            .map(|d| {
                Ok(Detection {
                    label: normalizer.normalize(&d.label)?,
                    ..d
                })
            })
            .collect::<Result<_, LabelError>>()
            .map_err(label_err)?;
        images.push(ImageRecord {
            image_path: raw.image_path,
            width,
            height,
            detections,
        });
    }

    let header = header.ok_or(ManifestError::MissingHeader)?;
    let mut id_label_set = Vec::with_capacity(header.id_labels.len());
    let mut seen = BTreeSet::new();
    for l in header.id_labels {
        if seen.insert(l.clone()) {
            id_label_set.push(l);
        }
    }
    Ok(Manifest {
        id_label_set,
        images,
        metadata: header.meta,
        root: image_root.map(Path::to_path_buf).unwrap_or_default(),
    })
}

fn resolve(root: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Load, canonicalize and validate a manifest file with the built-in label table.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    load_manifest_with(path, &LabelNormalizer::default())
}

pub fn load_manifest_with(
    path: &Path,
    normalizer: &LabelNormalizer,
) -> Result<Manifest, ManifestError> {
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(file, normalizer, Some(root))?;

    for im in &manifest.images {
        let p = manifest.resolve_image(im);
        if !p.exists() {
            return Err(ManifestError::MissingImage(p));
        }
    }
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(ManifestError::Invalid(violations));
    }
    Ok(manifest)
}

/// Serialize a manifest in the JSONL format `parse_manifest` reads.
pub fn write_manifest<W: Write>(m: &Manifest, mut w: W) -> std::io::Result<()> {
    let header = HeaderOut {
        id_labels: &m.id_label_set,
        meta: &m.metadata,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for im in &m.images {
        serde_json::to_writer(&mut w, im)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_manifest(m: &Manifest, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_manifest(m, &mut f)?;
    f.flush()
}
