//! Encoder contracts, cosine similarity and deterministic mock encoders.
//!
//! Three encoders feed the score: a vision-language image encoder and its
//! paired text encoder (same embedding space), plus a purely visual
//! contrastive image encoder with its own space.
//!
//! The mocks close the loop with [`crate::inpainting::MockInpainter`]: the
//! mock inpainter paints a label-derived solid color, and the mock
//! vision-language encoder maps a crop whose dominant color is a registered
//! label's fill to that label's text vector rotated by [`MOCK_ID_ANGLE_DEG`].

use std::collections::HashMap;
use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::hash::fnv1a_64;
use crate::inpainting::mock_fill_color;
use crate::prompting::{simple_prompt, PromptTemplate};

/// Angle between a registered label's text vector and the mock image
/// embedding of a crop painted with that label's fill color.
pub const MOCK_ID_ANGLE_DEG: f64 = 10.0;

pub const DEFAULT_MOCK_DIM: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("degenerate crop {0}x{1}")]
    DegenerateCrop(u32, u32),
    #[error("empty text")]
    EmptyText,
    #[error("encoder backend failure: {0}")]
    Backend(String),
    #[error("encoder backend unavailable: {0}")]
    Unavailable(String),
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalize `values`.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2(&values);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `u.v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_slices(u.values(), v.values())
}

pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch(u.len(), v.len()));
    }
    let denom = l2(u) * l2(v);
    if denom == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(u, v) / denom).clamp(-1.0, 1.0))
}

/// Image and text encoder sharing one embedding space.
pub trait VisionLanguageEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Human-readable description of crop preprocessing, hashed into run fingerprints.
    fn preprocessing(&self) -> String;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
    fn embed_image(&self, crop: &RgbImage) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Image-only contrastive encoder.
pub trait VisualEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn preprocessing(&self) -> String;
    fn embed_image(&self, crop: &RgbImage) -> Result<EmbeddingVector, EmbeddingError>;
}

#[derive(Clone)]
pub struct EncoderSet {
    pub vl: Arc<dyn VisionLanguageEncoder>,
    pub visual: Arc<dyn VisualEncoder>,
}

impl EncoderSet {
    pub fn new(vl: Arc<dyn VisionLanguageEncoder>, visual: Arc<dyn VisualEncoder>) -> Self {
        Self { vl, visual }
    }
}

fn check_crop(crop: &RgbImage) -> Result<(), EmbeddingError> {
    if crop.width() == 0 || crop.height() == 0 {
        return Err(EmbeddingError::DegenerateCrop(crop.width(), crop.height()));
    }
    Ok(())
}

/// Text embedding of a label rendered through `template`.
pub fn embed_text(
    encoders: &EncoderSet,
    label: &str,
    template: &PromptTemplate,
) -> Result<EmbeddingVector, EmbeddingError> {
    if label.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    encoders.vl.embed_text(&simple_prompt(label, template))
}

pub fn embed_image_vl(
    encoders: &EncoderSet,
    crop: &RgbImage,
) -> Result<EmbeddingVector, EmbeddingError> {
    check_crop(crop)?;
    encoders.vl.embed_image(crop)
}

pub fn embed_image_visual(
    encoders: &EncoderSet,
    crop: &RgbImage,
) -> Result<EmbeddingVector, EmbeddingError> {
    check_crop(crop)?;
    encoders.visual.embed_image(crop)
}

/// Gaussian direction from a ChaCha8 stream seeded with `seed`, normalized.
pub fn seeded_unit_vector(seed: u64, dim: usize) -> EmbeddingVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Ok(e) = EmbeddingVector::normalized(v) {
            return e;
        }
    }
}

/// Rotate unit vector `v` by `angle` radians toward `reference` within the
/// plane they span. `reference` must not be parallel to `v`.
pub fn rotate_toward(
    v: &EmbeddingVector,
    reference: &EmbeddingVector,
    angle: f64,
) -> EmbeddingVector {
    let proj = dot(reference.values(), v.values());
    let ortho: Vec<f64> = reference
        .values()
        .iter()
        .zip(v.values())
        .map(|(r, x)| r - proj * x)
        .collect();
    let ortho = EmbeddingVector::normalized(ortho).expect("reference is not parallel to v");
    let (s, c) = angle.sin_cos();
    let rotated = v
        .values()
        .iter()
        .zip(ortho.values())
        .map(|(x, o)| c * x + s * o)
        .collect();
    EmbeddingVector::normalized(rotated).expect("rotation of a unit vector is non-zero")
}

/// Most frequent pixel color; ties go to the smallest packed RGB value.
pub fn dominant_color(crop: &RgbImage) -> [u8; 3] {
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for p in crop.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then_with(|| cb.cmp(ca)))
        .map(|(c, _)| c)
        .unwrap_or([0, 0, 0])
}

fn color_seed(c: [u8; 3]) -> u64 {
    fnv1a_64(&c)
}

const MOCK_REFERENCE_SEED_KEY: &[u8] = b"ronin/mock-reference";

/// Deterministic stand-in for a CLIP-style encoder.
///
/// Text maps to a seeded unit vector with seed `FNV-1a-64(text)`. A crop whose
/// dominant color is the mock fill of a registered label maps to that label's
/// text vector (rendered with `template`) rotated by 10 degrees; any other
/// dominant color maps to a seeded vector derived from the color bytes.
pub struct MockVlEncoder {
    dim: usize,
    template: PromptTemplate,
    registry: HashMap<[u8; 3], String>,
    reference: EmbeddingVector,
}

impl MockVlEncoder {
    pub fn new<I, S>(dim: usize, template: PromptTemplate, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let registry = labels
            .into_iter()
            .map(|l| (mock_fill_color(l.as_ref()).0, l.as_ref().to_string()))
            .collect();
        Self {
            dim,
            template,
            registry,
            reference: seeded_unit_vector(fnv1a_64(MOCK_REFERENCE_SEED_KEY), dim),
        }
    }

    fn text_vector(&self, text: &str) -> EmbeddingVector {
        seeded_unit_vector(fnv1a_64(text.as_bytes()), self.dim)
    }

    /// Label registered for a fill color, if any.
    pub fn label_for_color(&self, color: [u8; 3]) -> Option<&str> {
        self.registry.get(&color).map(String::as_str)
    }
}

impl VisionLanguageEncoder for MockVlEncoder {
    fn id(&self) -> &str {
        "mock-vl"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn preprocessing(&self) -> String {
        format!("dominant-color;dim={};template={}", self.dim, self.template)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        Ok(self.text_vector(text))
    }

    fn embed_image(&self, crop: &RgbImage) -> Result<EmbeddingVector, EmbeddingError> {
        check_crop(crop)?;
        let color = dominant_color(crop);
        Ok(match self.registry.get(&color) {
            Some(label) => {
                let text = self.text_vector(&simple_prompt(label, &self.template));
                rotate_toward(&text, &self.reference, MOCK_ID_ANGLE_DEG.to_radians())
            }
            None => seeded_unit_vector(color_seed(color), self.dim),
        })
    }
}

/// Deterministic stand-in for a visual contrastive encoder: the crop is cut
/// into a `grid x grid` layout, each cell contributes the seeded vector of its
/// dominant color, and the sum is normalized.
pub struct MockVisualEncoder {
    dim: usize,
    grid: u32,
}

impl MockVisualEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim, grid: 4 }
    }
}

impl VisualEncoder for MockVisualEncoder {
    fn id(&self) -> &str {
        "mock-visual"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn preprocessing(&self) -> String {
        format!("cell-dominant-color;grid={};dim={}", self.grid, self.dim)
    }

    fn embed_image(&self, crop: &RgbImage) -> Result<EmbeddingVector, EmbeddingError> {
        check_crop(crop)?;
        let (w, h) = crop.dimensions();
        let gx = self.grid.min(w);
        let gy = self.grid.min(h);
        let mut acc = vec![0.0; self.dim];
        for cy in 0..gy {
            for cx in 0..gx {
                let x0 = cx * w / gx;
                let x1 = (cx + 1) * w / gx;
                let y0 = cy * h / gy;
                let y1 = (cy + 1) * h / gy;
                let cell = image::imageops::crop_imm(crop, x0, y0, x1 - x0, y1 - y0).to_image();
                let v = seeded_unit_vector(color_seed(dominant_color(&cell)), self.dim);
                for (a, b) in acc.iter_mut().zip(v.values()) {
                    *a += b;
                }
            }
        }
        EmbeddingVector::normalized(acc)
    }
}
