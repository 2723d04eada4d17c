//! Synthetic scenes for closed-loop runs against the mock backends.
//!
//! Every object is a solid rectangle painted with the mock fill color of its
//! true class. ID objects are labeled with their true class; OOD objects
//! carry an ID label they do not belong to, as a confused detector would
//! report them. Boxes never overlap.

use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::detections_io::{save_manifest, BoundingBox, Detection, GtFlag, ImageRecord, Manifest};
use crate::inpainting::mock_fill_color;

const CELL: u32 = 64;
const MARGIN: u32 = 4;

#[derive(Debug, Clone)]
pub struct MockSceneSpec {
    pub n_id: usize,
    pub n_ood: usize,
    pub per_image: usize,
    pub id_labels: Vec<String>,
    pub ood_labels: Vec<String>,
    pub seed: u64,
}

impl Default for MockSceneSpec {
    fn default() -> Self {
        Self {
            n_id: 25,
            n_ood: 25,
            per_image: 5,
            id_labels: ["bicycle", "car", "dog", "horse", "person"]
                .map(String::from)
                .to_vec(),
            ood_labels: ["giraffe", "kite", "pizza", "zebra"]
                .map(String::from)
                .to_vec(),
            seed: 0,
        }
    }
}

/// Pixel pattern behind the objects. Gray values never equal a label fill.
fn background(x: u32, y: u32, seed: u64) -> Rgb<u8> {
    let v = ((x / 8 + y / 8 + seed as u32) % 2) as u8 * 40 + 60;
    Rgb([v, v, v])
}

struct Planted {
    bbox: BoundingBox,
    true_label: String,
    predicted: String,
    gt: GtFlag,
}

/// Build the manifest and rasters in memory. Image paths are `img_NNN.png`.
pub fn build_scene(spec: &MockSceneSpec) -> (Manifest, Vec<RgbImage>) {
    assert!(!spec.id_labels.is_empty(), "need at least one ID label");
    assert!(
        spec.n_ood == 0 || !spec.ood_labels.is_empty(),
        "need OOD labels"
    );
    let per_image = spec.per_image.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut objects: Vec<(String, String, GtFlag)> = Vec::new();
    for i in 0..spec.n_id {
        let l = &spec.id_labels[i % spec.id_labels.len()];
        objects.push((l.clone(), l.clone(), GtFlag::Id));
    }
    for i in 0..spec.n_ood {
        let truth = &spec.ood_labels[i % spec.ood_labels.len()];
        let predicted = &spec.id_labels[i % spec.id_labels.len()];
        objects.push((truth.clone(), predicted.clone(), GtFlag::Ood));
    }
    objects.shuffle(&mut rng);

    let cols = (per_image as f64).sqrt().ceil() as u32;
    let rows = (per_image as u32).div_ceil(cols);
    let (width, height) = (cols * CELL, rows * CELL);

    let mut images = Vec::new();
    let mut rasters = Vec::new();
    for (img_idx, chunk) in objects.chunks(per_image).enumerate() {
        let image_path = format!("img_{img_idx:03}.png");
        let mut raster = RgbImage::from_fn(width, height, |x, y| background(x, y, spec.seed));
        let mut slots: Vec<u32> = (0..cols * rows).collect();
        slots.shuffle(&mut rng);
        let planted: Vec<Planted> = chunk
            .iter()
            .zip(slots)
            .map(|((truth, predicted, gt), slot)| {
                let w = rng.random_range(20..=CELL - 2 * MARGIN);
                let h = rng.random_range(20..=CELL - 2 * MARGIN);
                let x = (slot % cols) * CELL + MARGIN + rng.random_range(0..=CELL - 2 * MARGIN - w);
                let y = (slot / cols) * CELL + MARGIN + rng.random_range(0..=CELL - 2 * MARGIN - h);
                Planted {
                    bbox: BoundingBox::new(x, y, w, h),
                    true_label: truth.clone(),
                    predicted: predicted.clone(),
                    gt: *gt,
                }
            })
            .collect();

        let mut detections = Vec::new();
        for (j, p) in planted.iter().enumerate() {
            let fill = mock_fill_color(&p.true_label);
            for y in p.bbox.y..p.bbox.y + p.bbox.h {
                for x in p.bbox.x..p.bbox.x + p.bbox.w {
                    raster.put_pixel(x, y, fill);
                }
            }
            detections.push(Detection {
                detection_id: format!("img{img_idx:03}-d{j:02}"),
                bbox: p.bbox,
                label: p.predicted.clone(),
                confidence: rng.random_range(0.5..1.0),
                gt_flag: p.gt,
            });
        }
        images.push(ImageRecord {
            image_path,
            width,
            height,
            detections,
        });
        rasters.push(raster);
    }

    let mut meta = Map::new();
    meta.insert("generator".into(), Value::from("mock_scene"));
    meta.insert("seed".into(), Value::from(spec.seed));
    (
        Manifest {
            id_label_set: spec.id_labels.clone(),
            images,
            metadata: meta,
            root: PathBuf::new(),
        },
        rasters,
    )
}

/// Write rasters and `manifest.jsonl` into `dir`; returns the manifest path.
pub fn write_scene(spec: &MockSceneSpec, dir: &Path) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let (manifest, rasters) = build_scene(spec);
    for (record, raster) in manifest.images.iter().zip(&rasters) {
        raster
            .save(dir.join(&record.image_path))
            .map_err(io::Error::other)?;
    }
    let path = dir.join("manifest.jsonl");
    save_manifest(&manifest, &path)?;
    Ok(path)
}
