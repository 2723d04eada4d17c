//! Inpainting mask geometry and pass planning.
//!
//! Every detection gets a rectangle centered in its box covering `ratio` of
//! the box width and height. Class-wise planning groups all detections of an
//! image that share a predicted label into a single inpainting pass, so the
//! number of backend calls per image is bounded by the number of distinct
//! labels rather than the number of objects.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::detections_io::{BoundingBox, Detection, ImageRecord};

/// Masked rectangle, same `(x, y, w, h)` convention as [`BoundingBox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct MaskRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl MaskRect {
    pub fn as_box(&self) -> BoundingBox {
        BoundingBox::new(self.x, self.y, self.w, self.h)
    }
}

impl From<[u32; 4]> for MaskRect {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<MaskRect> for [u32; 4] {
    fn from(r: MaskRect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[serde(alias = "class-wise")]
    ClassWise,
    #[serde(alias = "object-wise")]
    ObjectWise,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::ClassWise => "class_wise",
            MaskMode::ObjectWise => "object_wise",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "class_wise" | "classwise" => Ok(MaskMode::ClassWise),
            "object_wise" | "objectwise" => Ok(MaskMode::ObjectWise),
            other => Err(format!(
                "unknown mode '{other}' (expected class-wise or object-wise)"
            )),
        }
    }
}

/// Centered mask covering `ratio` of the box in each dimension.
///
/// Masked sides are `round(ratio * side)` with halves rounded up, clamped to
/// `[1, side]`; the offsets are `floor((side - masked) / 2)`.
pub fn center_mask(b: &BoundingBox, ratio: f64) -> MaskRect {
    let w = scaled_side(b.w, ratio);
    let h = scaled_side(b.h, ratio);
    MaskRect {
        x: b.x + (b.w - w) / 2,
        y: b.y + (b.h - h) / 2,
        w,
        h,
    }
}

fn scaled_side(side: u32, ratio: f64) -> u32 {
    let raw = (ratio * f64::from(side) + 0.5).floor();
    (raw as u32).clamp(1, side.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintPass {
    #[serde(rename = "label")]
    pub prompt_label: String,
    #[serde(rename = "members")]
    pub member_ids: Vec<String>,
    #[serde(rename = "rects")]
    pub mask_rects: Vec<MaskRect>,
    #[serde(skip)]
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub image_path: String,
    pub mode: MaskMode,
    pub ratio: f64,
    pub passes: Vec<InpaintPass>,
}

impl MaskPlan {
    /// The pass whose output a detection's inpainted crop is taken from.
    pub fn pass_of(&self, detection_id: &str) -> Option<&InpaintPass> {
        self.passes
            .iter()
            .find(|p| p.member_ids.iter().any(|m| m == detection_id))
    }
}

#[derive(Serialize)]
struct PlanRecord<'a> {
    image_path: &'a str,
    mode: MaskMode,
    passes: &'a [InpaintPass],
}

impl MaskPlan {
    /// One JSONL debug line for this plan.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&PlanRecord {
            image_path: &self.image_path,
            mode: self.mode,
            passes: &self.passes,
        })
        .expect("plan serialization is infallible")
    }
}

/// Group an image's detections into inpainting passes.
///
/// Passes are ordered by label, members within a pass by detection id; in
/// object-wise mode passes are ordered by `(label, detection id)`.
pub fn build_plan(image: &ImageRecord, mode: MaskMode, ratio: f64) -> MaskPlan {
    let mut sorted: Vec<&Detection> = image.detections.iter().collect();
    sorted.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then_with(|| a.detection_id.cmp(&b.detection_id))
    });

    let make_pass = |label: &str, members: &[&Detection]| InpaintPass {
        prompt_label: label.to_string(),
        member_ids: members.iter().map(|d| d.detection_id.clone()).collect(),
        mask_rects: members
            .iter()
            .map(|d| center_mask(&d.bbox, ratio))
            .collect(),
        image_path: image.image_path.clone(),
    };

    let passes = match mode {
        MaskMode::ObjectWise => sorted
            .iter()
            .map(|d| make_pass(&d.label, std::slice::from_ref(d)))
            .collect(),
        MaskMode::ClassWise => {
            let mut groups: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
            for d in sorted {
                groups.entry(d.label.as_str()).or_default().push(d);
            }
            groups
                .into_iter()
                .map(|(label, members)| make_pass(label, &members))
                .collect()
        }
    };

    MaskPlan {
        image_path: image.image_path.clone(),
        mode,
        ratio,
        passes,
    }
}

/// Binary raster, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[y as usize * self.width as usize + x as usize] = u8::from(on);
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Fill a rectangle, clipped to the raster.
    pub fn fill_rect(&mut self, r: &MaskRect) {
        let x1 = (u64::from(r.x) + u64::from(r.w)).min(u64::from(self.width)) as u32;
        let y1 = (u64::from(r.y) + u64::from(r.h)).min(u64::from(self.height)) as u32;
        let stride = self.width as usize;
        for y in r.y.min(y1)..y1 {
            let row = y as usize * stride;
            self.data[row + r.x.min(x1) as usize..row + x1 as usize].fill(1);
        }
    }

    /// 0/255 grayscale image, the usual on-disk mask encoding.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Pixels above mid-gray are masked.
    pub fn from_gray(img: &GrayImage) -> Self {
        let mut m = Self::new(img.width(), img.height());
        for (x, y, p) in img.enumerate_pixels() {
            m.set(x, y, p.0[0] >= 128);
        }
        m
    }
}

/// Union of a pass's rectangles as a `width x height` binary mask.
pub fn rasterize(pass: &InpaintPass, width: u32, height: u32) -> BinaryMask {
    let mut m = BinaryMask::new(width, height);
    for r in &pass.mask_rects {
        m.fill_rect(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections_io::GtFlag;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn det(id: &str, label: &str, b: [u32; 4]) -> Detection {
        Detection {
            detection_id: id.into(),
            bbox: b.into(),
            label: label.into(),
            confidence: 0.9,
            gt_flag: GtFlag::Id,
        }
    }

    fn image(dets: Vec<Detection>) -> ImageRecord {
        ImageRecord {
            image_path: "img.png".into(),
            width: 200,
            height: 200,
            detections: dets,
        }
    }

    fn pass(rects: &[[u32; 4]]) -> InpaintPass {
        InpaintPass {
            prompt_label: "x".into(),
            member_ids: vec![],
            mask_rects: rects.iter().map(|&r| r.into()).collect(),
            image_path: String::new(),
        }
    }

    #[test]
    fn center_mask_at_default_ratio() {
        // w_m = round(90.0) = 90, h_m = round(45.0) = 45,
        // offsets floor(10/2) = 5 and floor(5/2) = 2.
        let m = center_mask(&BoundingBox::new(10, 20, 100, 50), 0.9);
        assert_eq!(m, MaskRect::from([15, 22, 90, 45]));
    }

    #[test]
    fn center_mask_full_ratio_is_identity() {
        let m = center_mask(&BoundingBox::new(10, 20, 100, 50), 1.0);
        assert_eq!(m, MaskRect::from([10, 20, 100, 50]));
    }

    #[test]
    fn center_mask_clamps_to_one_pixel() {
        let m = center_mask(&BoundingBox::new(0, 0, 1, 1), 0.25);
        assert_eq!(m, MaskRect::from([0, 0, 1, 1]));
    }

    #[test]
    fn center_mask_rounds_half_up() {
        // 0.5 * 5 = 2.5 -> 3, offset floor(2/2) = 1
        let m = center_mask(&BoundingBox::new(0, 0, 5, 5), 0.5);
        assert_eq!(m, MaskRect::from([1, 1, 3, 3]));
    }

    #[test]
    fn class_wise_groups_by_label() {
        let im = image(vec![
            det("d2", "dog", [0, 0, 10, 10]),
            det("c1", "cat", [20, 0, 10, 10]),
            det("d1", "dog", [40, 0, 10, 10]),
        ]);
        let plan = build_plan(&im, MaskMode::ClassWise, 0.9);
        assert_eq!(plan.passes.len(), 2);
        assert_eq!(plan.passes[0].prompt_label, "cat");
        assert_eq!(plan.passes[0].mask_rects.len(), 1);
        assert_eq!(plan.passes[1].prompt_label, "dog");
        assert_eq!(plan.passes[1].member_ids, vec!["d1", "d2"]);
        assert_eq!(plan.passes[1].mask_rects.len(), 2);
        assert_eq!(plan.pass_of("d2").unwrap().prompt_label, "dog");
    }

    #[test]
    fn object_wise_has_one_pass_per_detection() {
        let im = image(vec![
            det("d2", "dog", [0, 0, 10, 10]),
            det("c1", "cat", [20, 0, 10, 10]),
            det("d1", "dog", [40, 0, 10, 10]),
        ]);
        let plan = build_plan(&im, MaskMode::ObjectWise, 0.9);
        let order: Vec<_> = plan
            .passes
            .iter()
            .map(|p| p.member_ids[0].as_str())
            .collect();
        assert_eq!(order, vec!["c1", "d1", "d2"]);
    }

    #[test]
    fn empty_image_gives_empty_plan() {
        assert!(build_plan(&image(vec![]), MaskMode::ClassWise, 0.9)
            .passes
            .is_empty());
    }

    #[test]
    fn rasterize_counts() {
        assert_eq!(rasterize(&pass(&[[0, 0, 2, 2]]), 4, 4).popcount(), 4);
        // 3x2 and 2x2, disjoint
        assert_eq!(
            rasterize(&pass(&[[0, 0, 3, 2], [5, 5, 2, 2]]), 8, 8).popcount(),
            10
        );
        assert_eq!(
            rasterize(&pass(&[[1, 1, 3, 3], [1, 1, 3, 3]]), 8, 8),
            rasterize(&pass(&[[1, 1, 3, 3]]), 8, 8)
        );
    }

    #[test]
    fn plan_json_line_shape() {
        let plan = build_plan(
            &image(vec![det("a", "dog", [10, 20, 100, 50])]),
            MaskMode::ClassWise,
            0.9,
        );
        let v: serde_json::Value = serde_json::from_str(&plan.to_json_line()).unwrap();
        assert_eq!(v["image_path"], "img.png");
        assert_eq!(v["mode"], "class_wise");
        assert_eq!(v["passes"][0]["label"], "dog");
        assert_eq!(v["passes"][0]["members"][0], "a");
        assert_eq!(
            v["passes"][0]["rects"][0],
            serde_json::json!([15, 22, 90, 45])
        );
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "class-wise".parse::<MaskMode>().unwrap(),
            MaskMode::ClassWise
        );
        assert_eq!(
            "object_wise".parse::<MaskMode>().unwrap(),
            MaskMode::ObjectWise
        );
        assert!("pixel-wise".parse::<MaskMode>().is_err());
    }

    proptest! {
        #[test]
        fn plan_partitions_detections(
            raw in proptest::collection::vec((0u8..4, 0u32..150, 0u32..150, 1u32..50, 1u32..50), 0..12),
            object_wise in any::<bool>(),
        ) {
            let labels = ["bird", "cat", "dog", "horse"];
            let dets: Vec<_> = raw.iter().enumerate()
                .map(|(i, &(l, x, y, w, h))| det(&format!("d{i:02}"), labels[l as usize], [x, y, w, h]))
                .collect();
            let im = image(dets);
            let mode = if object_wise { MaskMode::ObjectWise } else { MaskMode::ClassWise };
            let plan = build_plan(&im, mode, 0.9);

            let mut members: Vec<&str> = plan.passes.iter()
                .flat_map(|p| p.member_ids.iter().map(String::as_str)).collect();
            let n = members.len();
            members.sort_unstable();
            members.dedup();
            prop_assert_eq!(n, members.len());
            let mut ids: Vec<&str> = im.detections.iter().map(|d| d.detection_id.as_str()).collect();
            ids.sort_unstable();
            prop_assert_eq!(members, ids);

            let distinct: BTreeSet<&str> = im.detections.iter().map(|d| d.label.as_str()).collect();
            match mode {
                MaskMode::ClassWise => prop_assert_eq!(plan.passes.len(), distinct.len()),
                MaskMode::ObjectWise => prop_assert!(plan.passes.iter().all(|p| p.member_ids.len() == 1)),
            }
            for p in &plan.passes {
                prop_assert_eq!(p.member_ids.len(), p.mask_rects.len());
                for id in &p.member_ids {
                    let d = im.detections.iter().find(|d| &d.detection_id == id).unwrap();
                    prop_assert_eq!(&d.label, &p.prompt_label);
                }
            }
        }
    }
}
