//! Class-conditioned inpainting backends, pass execution and crop extraction.
//!
//! A backend receives an RGB raster, a binary mask of the same size and a
//! text condition, and returns a raster in which masked pixels have been
//! regenerated while unmasked pixels are preserved (within [`TAU_OUT`] per
//! channel). The denoiser itself lives behind [`InpaintBackend`]; this crate
//! ships a deterministic [`MockInpainter`] and an out-of-process adapter in
//! [`crate::adapter`].

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use image::imageops::{self, FilterType};
use image::{GrayImage, Rgb, RgbImage};
use thiserror::Error;

use crate::detections_io::BoundingBox;
use crate::hash::{fnv1a_32, fnv1a_64, fnv1a_64_extend};
use crate::masking::{rasterize, BinaryMask, InpaintPass};
use crate::prompting::{refined_prompt, simple_prompt, ExclusionMap, PromptTemplate};

/// Outside-mask tolerance in 8-bit units (2/255 of full scale).
pub const TAU_OUT: u8 = 2;

pub const DEFAULT_STEPS: u32 = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InpaintError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("resolution {0}x{1} not supported by backend")]
    UnsupportedResolution(u32, u32),
    #[error("backend timed out after {0:.1}s")]
    Timeout(f64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("backend output violates the inpainting contract: {0}")]
    Contract(String),
}

impl InpaintError {
    /// Errors that mean no further request can succeed.
    pub fn is_global(&self) -> bool {
        matches!(self, InpaintError::Unavailable(_))
    }
}

#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub image: RgbImage,
    pub mask: BinaryMask,
    /// Rendered condition string.
    pub prompt: String,
    /// The label the prompt was rendered from.
    pub label: String,
    pub steps: u32,
    /// `None` leaves guidance to the backend default.
    pub guidance_scale: Option<f64>,
    pub seed: u64,
    pub target_resolution: Option<(u32, u32)>,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<(), InpaintError> {
        if self.image.dimensions() != self.mask.dimensions() {
            return Err(InpaintError::InvalidRequest(format!(
                "mask {:?} does not match image {:?}",
                self.mask.dimensions(),
                self.image.dimensions()
            )));
        }
        if self.steps == 0 {
            return Err(InpaintError::InvalidRequest("steps must be >= 1".into()));
        }
        if self.prompt.trim().is_empty() {
            return Err(InpaintError::InvalidRequest("empty prompt".into()));
        }
        if matches!(self.guidance_scale, Some(g) if !(g >= 0.0 && g.is_finite())) {
            return Err(InpaintError::InvalidRequest(
                "guidance scale must be a non-negative real".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub image: RgbImage,
    pub backend_id: String,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendCapabilities {
    pub max_concurrent: usize,
    pub preferred_resolutions: Vec<(u32, u32)>,
    pub supports_batching: bool,
}

impl Default for BackendCapabilities {
    fn default() -> Self {
        Self {
            max_concurrent: 1,
            preferred_resolutions: Vec::new(),
            supports_batching: false,
        }
    }
}

/// Class-conditioned inpainting model. Implementations must be safe to call
/// concurrently up to `capabilities().max_concurrent` times.
pub trait InpaintBackend: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> BackendCapabilities;
    fn inpaint(&self, request: &InpaintRequest) -> Result<InpaintResult, InpaintError>;
}

/// Fill color of the mock backend: the low 24 bits of FNV-1a-32 of the label
/// as `(R, G, B)`, most significant byte first.
pub fn mock_fill_color(label: &str) -> Rgb<u8> {
    let h = fnv1a_32(label.as_bytes());
    Rgb([(h >> 16) as u8, (h >> 8) as u8, h as u8])
}

/// Deterministic backend: masked pixels become the label's solid fill color,
/// everything else is copied bit-exactly. Steps, guidance and seed are
/// accepted and ignored.
#[derive(Debug)]
pub struct MockInpainter {
    calls: AtomicUsize,
    max_concurrent: usize,
}

impl MockInpainter {
    pub fn new() -> Self {
        Self::with_concurrency(4)
    }

    pub fn with_concurrency(max_concurrent: usize) -> Self {
        Self {
            calls: AtomicUsize::new(0),
            max_concurrent: max_concurrent.max(1),
        }
    }

    /// Number of `inpaint` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for MockInpainter {
    fn default() -> Self {
        Self::new()
    }
}

impl InpaintBackend for MockInpainter {
    fn id(&self) -> &str {
        "mock-inpaint"
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            max_concurrent: self.max_concurrent,
            preferred_resolutions: Vec::new(),
            supports_batching: false,
        }
    }

    fn inpaint(&self, request: &InpaintRequest) -> Result<InpaintResult, InpaintError> {
        let start = Instant::now();
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fill = mock_fill_color(&request.label);
        let mut out = request.image.clone();
        for (x, y, p) in out.enumerate_pixels_mut() {
            if request.mask.get(x, y) {
                *p = fill;
            }
        }
        Ok(InpaintResult {
            image: out,
            backend_id: self.id().to_string(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Largest per-channel difference between `input` and `output` outside `mask`.
pub fn max_outside_deviation(input: &RgbImage, output: &RgbImage, mask: &BinaryMask) -> u8 {
    input
        .enumerate_pixels()
        .zip(output.pixels())
        .filter(|((x, y, _), _)| !mask.get(*x, *y))
        .flat_map(|((_, _, a), b)| a.0.iter().zip(b.0).map(|(p, q)| p.abs_diff(q)))
        .max()
        .unwrap_or(0)
}

/// Check the output side of the backend contract: same dimensions and
/// unmasked pixels within `tau` of the input.
pub fn check_result(
    request: &InpaintRequest,
    result: &InpaintResult,
    tau: u8,
) -> Result<(), InpaintError> {
    if result.image.dimensions() != request.image.dimensions() {
        return Err(InpaintError::Contract(format!(
            "output is {:?}, request was {:?}",
            result.image.dimensions(),
            request.image.dimensions()
        )));
    }
    let dev = max_outside_deviation(&request.image, &result.image, &request.mask);
    if dev > tau {
        return Err(InpaintError::Contract(format!(
            "unmasked pixels changed by up to {dev} (tolerance {tau})"
        )));
    }
    Ok(())
}

/// Per-pass seed: FNV-1a-64 over the run seed (little-endian), the image
/// path, a NUL separator and the prompt label.
pub fn pass_seed(run_seed: u64, image_path: &str, label: &str) -> u64 {
    let h = fnv1a_64(&run_seed.to_le_bytes());
    let h = fnv1a_64_extend(h, image_path.as_bytes());
    let h = fnv1a_64_extend(h, &[0]);
    fnv1a_64_extend(h, label.as_bytes())
}

/// How a pass turns its label into a condition string.
#[derive(Debug, Clone)]
pub enum PromptMode<'a> {
    Simple(&'a PromptTemplate),
    Refined(&'a PromptTemplate, &'a ExclusionMap),
}

impl PromptMode<'_> {
    pub fn render(&self, label: &str) -> String {
        match self {
            PromptMode::Simple(t) => simple_prompt(label, t),
            PromptMode::Refined(t, ex) => refined_prompt(label, ex, t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PassSettings<'a> {
    pub prompt: PromptMode<'a>,
    pub steps: u32,
    pub guidance_scale: Option<f64>,
    pub run_seed: u64,
    pub target_resolution: Option<(u32, u32)>,
    pub tau_out: u8,
}

#[derive(Debug, Clone)]
pub struct PassOutput {
    pub result: InpaintResult,
    pub member_ids: Vec<String>,
    pub prompt: String,
}

pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

pub fn resize_mask(mask: &BinaryMask, width: u32, height: u32) -> BinaryMask {
    if mask.dimensions() == (width, height) {
        return mask.clone();
    }
    let gray: GrayImage = imageops::resize(&mask.to_gray(), width, height, FilterType::Nearest);
    BinaryMask::from_gray(&gray)
}

/// Rasterize the pass mask, render the prompt and call the backend once.
///
/// `original` is the full-resolution image. With a target resolution, image
/// (bilinear) and mask (nearest) are resized before the call and the result
/// stays in the resized frame.
pub fn run_pass(
    original: &RgbImage,
    pass: &InpaintPass,
    settings: &PassSettings<'_>,
    backend: &dyn InpaintBackend,
) -> Result<PassOutput, InpaintError> {
    let (w, h) = original.dimensions();
    let mask = rasterize(pass, w, h);
    let (image, mask) = match settings.target_resolution {
        Some((tw, th)) if (tw, th) != (w, h) => {
            if tw == 0 || th == 0 {
                return Err(InpaintError::UnsupportedResolution(tw, th));
            }
            (resize_rgb(original, tw, th), resize_mask(&mask, tw, th))
        }
        _ => (original.clone(), mask),
    };
    let prompt = settings.prompt.render(&pass.prompt_label);
    let request = InpaintRequest {
        image,
        mask,
        prompt: prompt.clone(),
        label: pass.prompt_label.clone(),
        steps: settings.steps,
        guidance_scale: settings.guidance_scale,
        seed: pass_seed(settings.run_seed, &pass.image_path, &pass.prompt_label),
        target_resolution: settings.target_resolution,
    };
    request.validate()?;
    let start = Instant::now();
    let mut result = backend.inpaint(&request)?;
    result.wall_time = start.elapsed().as_secs_f64();
    check_result(&request, &result, settings.tau_out)?;
    Ok(PassOutput {
        result,
        member_ids: pass.member_ids.clone(),
        prompt,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CropError {
    #[error("box {bbox} scales to a degenerate {w}x{h} region")]
    Degenerate { bbox: BoundingBox, w: u32, h: u32 },
    #[error("box {bbox} exceeds raster {width}x{height}")]
    OutOfBounds {
        bbox: BoundingBox,
        width: u32,
        height: u32,
    },
}

/// Map a box from an `from` sized frame into a `to` sized frame. Edges are
/// scaled by `to / from` per axis and rounded to the nearest pixel.
pub fn scale_box(
    b: &BoundingBox,
    from: (u32, u32),
    to: (u32, u32),
) -> Result<BoundingBox, CropError> {
    if from == to {
        return Ok(*b);
    }
    let sx = f64::from(to.0) / f64::from(from.0);
    let sy = f64::from(to.1) / f64::from(from.1);
    let edge =
        |v: u64, s: f64, max: u32| ((v as f64 * s).round() as u64).min(u64::from(max)) as u32;
    let x0 = edge(u64::from(b.x), sx, to.0);
    let y0 = edge(u64::from(b.y), sy, to.1);
    let x1 = edge(b.right(), sx, to.0);
    let y1 = edge(b.bottom(), sy, to.1);
    let scaled = BoundingBox::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0));
    if scaled.is_degenerate() {
        return Err(CropError::Degenerate {
            bbox: *b,
            w: scaled.w,
            h: scaled.h,
        });
    }
    Ok(scaled)
}

/// Exact crop of `b`.
pub fn crop(raster: &RgbImage, b: &BoundingBox) -> Result<RgbImage, CropError> {
    if b.is_degenerate() {
        return Err(CropError::Degenerate {
            bbox: *b,
            w: b.w,
            h: b.h,
        });
    }
    if !b.fits_within(raster.width(), raster.height()) {
        return Err(CropError::OutOfBounds {
            bbox: *b,
            width: raster.width(),
            height: raster.height(),
        });
    }
    Ok(imageops::crop_imm(raster, b.x, b.y, b.w, b.h).to_image())
}

/// Crop a box given in `original` coordinates out of a raster that may have
/// been resized.
pub fn crop_scaled(
    raster: &RgbImage,
    b: &BoundingBox,
    original: (u32, u32),
) -> Result<RgbImage, CropError> {
    let scaled = scale_box(b, original, raster.dimensions())?;
    crop(raster, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskRect;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([(x * 7) as u8, (y * 11) as u8, ((x + y) * 3) as u8])
        })
    }

    fn request(mask: BinaryMask, label: &str) -> InpaintRequest {
        InpaintRequest {
            image: gradient(mask.width(), mask.height()),
            mask,
            prompt: label.into(),
            label: label.into(),
            steps: DEFAULT_STEPS,
            guidance_scale: None,
            seed: 7,
            target_resolution: None,
        }
    }

    fn pass(label: &str, rects: &[[u32; 4]]) -> InpaintPass {
        InpaintPass {
            prompt_label: label.into(),
            member_ids: (0..rects.len()).map(|i| format!("m{i}")).collect(),
            mask_rects: rects.iter().map(|&r| MaskRect::from(r)).collect(),
            image_path: "img.png".into(),
        }
    }

    fn settings<'a>(tpl: &'a PromptTemplate) -> PassSettings<'a> {
        PassSettings {
            prompt: PromptMode::Simple(tpl),
            steps: DEFAULT_STEPS,
            guidance_scale: None,
            run_seed: 0,
            target_resolution: None,
            tau_out: TAU_OUT,
        }
    }

    #[test]
    fn mock_fill_for_dog() {
        // FNV-1a-32("dog") = 0xe668bd09
        assert_eq!(mock_fill_color("dog"), Rgb([0x68, 0xbd, 0x09]));
    }

    #[test]
    fn zero_mask_is_identity() {
        let req = request(BinaryMask::new(16, 9), "dog");
        let out = MockInpainter::new().inpaint(&req).unwrap();
        assert_eq!(out.image, req.image);
    }

    #[test]
    fn mock_fills_masked_region() {
        let mut mask = BinaryMask::new(10, 10);
        mask.fill_rect(&MaskRect::from([2, 3, 4, 5]));
        let req = request(mask, "dog");
        let backend = MockInpainter::new();
        let out = backend.inpaint(&req).unwrap();
        for (x, y, p) in out.image.enumerate_pixels() {
            if req.mask.get(x, y) {
                assert_eq!(*p, Rgb([104, 189, 9]));
            } else {
                assert_eq!(p, req.image.get_pixel(x, y));
            }
        }
        let again = backend.inpaint(&req).unwrap();
        assert_eq!(out.image.as_raw(), again.image.as_raw());
        assert_eq!(backend.calls(), 2);
        check_result(&req, &out, TAU_OUT).unwrap();
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let mut req = request(BinaryMask::new(4, 4), "dog");
        req.steps = 0;
        assert!(matches!(
            MockInpainter::new().inpaint(&req),
            Err(InpaintError::InvalidRequest(_))
        ));
        let mut req = request(BinaryMask::new(4, 4), "dog");
        req.image = gradient(5, 4);
        assert!(req.validate().is_err());
        let mut req = request(BinaryMask::new(4, 4), "dog");
        req.prompt = " ".into();
        assert!(req.validate().is_err());
    }

    #[test]
    fn contract_check_catches_leaks() {
        let mut mask = BinaryMask::new(6, 6);
        mask.fill_rect(&MaskRect::from([0, 0, 3, 3]));
        let req = request(mask, "cat");
        let mut res = MockInpainter::new().inpaint(&req).unwrap();
        let p = res.image.get_pixel_mut(5, 5);
        p.0[1] = p.0[1].wrapping_add(2);
        assert!(check_result(&req, &res, TAU_OUT).is_ok());
        let p = res.image.get_pixel_mut(5, 5);
        p.0[1] = p.0[1].wrapping_add(1);
        assert!(matches!(
            check_result(&req, &res, TAU_OUT),
            Err(InpaintError::Contract(_))
        ));
    }

    #[test]
    fn class_wise_pass_is_one_call() {
        let backend = MockInpainter::new();
        let tpl = PromptTemplate::inpaint_default();
        let img = gradient(64, 64);
        let out = run_pass(
            &img,
            &pass("dog", &[[0, 0, 10, 10], [30, 30, 10, 10]]),
            &settings(&tpl),
            &backend,
        )
        .unwrap();
        assert_eq!(backend.calls(), 1);
        assert_eq!(out.member_ids, vec!["m0", "m1"]);
        assert_eq!(out.prompt, "dog");
        assert_eq!(*out.result.image.get_pixel(35, 35), mock_fill_color("dog"));
    }

    #[test]
    fn refined_prompt_reaches_backend_label_unchanged() {
        let backend = MockInpainter::new();
        let tpl = PromptTemplate::refined_default();
        let ex = crate::prompting::parse_exclusions(r#"{"horse": ["zebra"]}"#).unwrap();
        let mut s = settings(&tpl);
        s.prompt = PromptMode::Refined(&tpl, &ex);
        let out = run_pass(
            &gradient(20, 20),
            &pass("horse", &[[0, 0, 10, 10]]),
            &s,
            &backend,
        )
        .unwrap();
        assert_eq!(out.prompt, "horse, not a zebra");
        assert_eq!(*out.result.image.get_pixel(5, 5), mock_fill_color("horse"));
    }

    #[test]
    fn resized_pass_stays_in_target_frame() {
        let backend = MockInpainter::new();
        let tpl = PromptTemplate::inpaint_default();
        let mut s = settings(&tpl);
        s.target_resolution = Some((128, 96));
        let out = run_pass(
            &gradient(64, 48),
            &pass("dog", &[[8, 8, 16, 16]]),
            &s,
            &backend,
        )
        .unwrap();
        assert_eq!(out.result.image.dimensions(), (128, 96));
        assert_eq!(*out.result.image.get_pixel(20, 20), mock_fill_color("dog"));
    }

    #[test]
    fn pass_seed_is_stable_and_distinguishing() {
        assert_eq!(pass_seed(1, "a.png", "dog"), pass_seed(1, "a.png", "dog"));
        assert_ne!(pass_seed(1, "a.png", "dog"), pass_seed(2, "a.png", "dog"));
        assert_ne!(pass_seed(1, "a.png", "dog"), pass_seed(1, "a.png", "cat"));
        assert_ne!(pass_seed(1, "a.pngd", "og"), pass_seed(1, "a.png", "dog"));
    }

    #[test]
    fn crops() {
        let img = gradient(200, 100);
        assert_eq!(crop(&img, &BoundingBox::new(0, 0, 200, 100)).unwrap(), img);
        let c = crop(&img, &BoundingBox::new(10, 20, 100, 50)).unwrap();
        assert_eq!(c.dimensions(), (100, 50));
        assert_eq!(c.get_pixel(0, 0), img.get_pixel(10, 20));
        assert!(matches!(
            crop(&img, &BoundingBox::new(150, 0, 51, 10)),
            Err(CropError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn scaled_crop_doubles_box() {
        let b = BoundingBox::new(10, 20, 100, 50);
        assert_eq!(
            scale_box(&b, (200, 100), (400, 200)).unwrap(),
            BoundingBox::new(20, 40, 200, 100)
        );
        let big = gradient(400, 200);
        let c = crop_scaled(&big, &b, (200, 100)).unwrap();
        assert_eq!(c.dimensions(), (200, 100));
        assert_eq!(c.get_pixel(0, 0), big.get_pixel(20, 40));
    }

    #[test]
    fn tiny_box_degenerates_when_downscaled() {
        let b = BoundingBox::new(10, 10, 1, 1);
        assert!(matches!(
            scale_box(&b, (1000, 1000), (100, 100)),
            Err(CropError::Degenerate { .. })
        ));
    }

    #[test]
    fn mask_resize_is_nearest() {
        let mut mask = BinaryMask::new(4, 4);
        mask.fill_rect(&MaskRect::from([0, 0, 2, 2]));
        let big = resize_mask(&mask, 8, 8);
        assert_eq!(big.popcount(), 16);
        assert!(big.get(3, 3) && !big.get(4, 4));
    }
}
