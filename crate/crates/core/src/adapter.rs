//! Out-of-process backends over line-delimited JSON on stdin/stdout.
//!
//! The client spawns `sh -c CMD` once and exchanges one JSON object per line.
//! Rasters travel as base64-encoded PNG inside the JSON. The first exchange
//! is always a `hello`:
//!
//! ```text
//! -> {"op":"hello"}
//! <- {"ok":true,"backend_id":"sd2-inpaint","max_concurrent":1,"dim":null,"preprocessing":"..."}
//! -> {"op":"inpaint","prompt":"dog","label":"dog","steps":20,"guidance_scale":null,
//!     "seed":123,"width":640,"height":480,"image_png":"...","mask_png":"..."}
//! <- {"ok":true,"image_png":"..."}
//! -> {"op":"embed_text","text":"a photo of a dog"}
//! <- {"ok":true,"vector":[0.01, ...]}
//! -> {"op":"embed_image","image_png":"..."}
//! <- {"ok":false,"kind":"backend","error":"out of memory"}
//! ```
//!
//! Masks are grayscale PNGs, 255 for pixels to regenerate. Error `kind` is one
//! of `unsupported_resolution`, `timeout`, `unavailable` or `backend`.
//! [`serve`] implements the server side for any in-process backend, which is
//! how the `ronin serve-mock` subcommand exposes the mocks.

use std::io::{BufRead, BufReader, Cursor, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingError, EmbeddingVector, VisionLanguageEncoder, VisualEncoder};
use crate::inpainting::{
    BackendCapabilities, InpaintBackend, InpaintError, InpaintRequest, InpaintResult,
};
use crate::masking::BinaryMask;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AdapterRequest {
    Hello,
    Inpaint {
        prompt: String,
        label: String,
        steps: u32,
        guidance_scale: Option<f64>,
        seed: u64,
        width: u32,
        height: u32,
        image_png: String,
        mask_png: String,
    },
    EmbedText {
        text: String,
    },
    EmbedImage {
        image_png: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_concurrent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred_resolutions: Option<Vec<(u32, u32)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supports_batching: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
}

impl AdapterResponse {
    fn failure(kind: &str, error: impl Into<String>) -> Self {
        Self {
            ok: false,
            kind: Some(kind.into()),
            error: Some(error.into()),
            ..Self::default()
        }
    }
}

pub fn encode_png(img: &DynamicImage) -> Result<String, String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(B64.encode(buf.into_inner()))
}

pub fn decode_png(data: &str) -> Result<DynamicImage, String> {
    let bytes = B64.decode(data).map_err(|e| format!("bad base64: {e}"))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| e.to_string())
}

/// Failure of the transport itself, as opposed to a backend-reported error.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Unavailable(String),
    Timeout(Duration),
    Protocol(String),
}

struct Channel {
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    poisoned: bool,
}

/// A spawned adapter process. Requests are serialized over one pipe.
pub struct AdapterProcess {
    command: String,
    child: Mutex<Child>,
    channel: Mutex<Channel>,
    timeout: Duration,
}

impl AdapterProcess {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, TransportError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TransportError::Unavailable(format!("cannot start '{command}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            command: command.to_string(),
            child: Mutex::new(child),
            channel: Mutex::new(Channel {
                stdin,
                lines: rx,
                poisoned: false,
            }),
            timeout,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn call(&self, request: &AdapterRequest) -> Result<AdapterResponse, TransportError> {
        let mut ch = self.channel.lock().unwrap_or_else(|e| e.into_inner());
        if ch.poisoned {
            return Err(TransportError::Unavailable(format!(
                "adapter '{}' is no longer usable",
                self.command
            )));
        }
        let mut line =
            serde_json::to_string(request).map_err(|e| TransportError::Protocol(e.to_string()))?;
        line.push('\n');
        if let Err(e) = ch
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| ch.stdin.flush())
        {
            ch.poisoned = true;
            return Err(TransportError::Unavailable(format!(
                "adapter stdin closed: {e}"
            )));
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match ch.lines.recv_timeout(remaining) {
                Ok(Ok(reply)) if reply.trim().is_empty() => continue,
                Ok(Ok(reply)) => {
                    return serde_json::from_str(&reply).map_err(|e| {
                        ch.poisoned = true;
                        TransportError::Protocol(format!("bad adapter reply: {e}"))
                    })
                }
                Ok(Err(e)) => {
                    ch.poisoned = true;
                    return Err(TransportError::Unavailable(format!("adapter stdout: {e}")));
                }
                Err(RecvTimeoutError::Timeout) => {
                    // The reply may still arrive and would desynchronize the stream.
                    ch.poisoned = true;
                    return Err(TransportError::Timeout(self.timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    ch.poisoned = true;
                    return Err(TransportError::Unavailable(format!(
                        "adapter '{}' exited",
                        self.command
                    )));
                }
            }
        }
    }

    fn hello(&self) -> Result<AdapterResponse, TransportError> {
        let r = self.call(&AdapterRequest::Hello)?;
        if !r.ok {
            return Err(TransportError::Unavailable(
                r.error.unwrap_or_else(|| "hello rejected".into()),
            ));
        }
        Ok(r)
    }
}

impl Drop for AdapterProcess {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn inpaint_transport_error(e: TransportError) -> InpaintError {
    match e {
        TransportError::Unavailable(m) => InpaintError::Unavailable(m),
        TransportError::Timeout(d) => InpaintError::Timeout(d.as_secs_f64()),
        TransportError::Protocol(m) => InpaintError::Backend(m),
    }
}

fn embed_transport_error(e: TransportError) -> EmbeddingError {
    match e {
        TransportError::Unavailable(m) => EmbeddingError::Unavailable(m),
        TransportError::Timeout(d) => {
            EmbeddingError::Backend(format!("timed out after {:.1}s", d.as_secs_f64()))
        }
        TransportError::Protocol(m) => EmbeddingError::Backend(m),
    }
}

pub struct AdapterInpainter {
    process: AdapterProcess,
    id: String,
    capabilities: BackendCapabilities,
}

impl AdapterInpainter {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, InpaintError> {
        let process = AdapterProcess::spawn(command, timeout).map_err(inpaint_transport_error)?;
        let hello = process.hello().map_err(inpaint_transport_error)?;
        Ok(Self {
            id: hello
                .backend_id
                .unwrap_or_else(|| format!("adapter:{command}")),
            capabilities: BackendCapabilities {
                // One pipe, one request in flight.
                max_concurrent: 1,
                preferred_resolutions: hello.preferred_resolutions.unwrap_or_default(),
                supports_batching: hello.supports_batching.unwrap_or(false),
            },
            process,
        })
    }
}

impl InpaintBackend for AdapterInpainter {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> BackendCapabilities {
        self.capabilities.clone()
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResult, InpaintError> {
        let start = Instant::now();
        let (width, height) = req.image.dimensions();
        let request = AdapterRequest::Inpaint {
            prompt: req.prompt.clone(),
            label: req.label.clone(),
            steps: req.steps,
            guidance_scale: req.guidance_scale,
            seed: req.seed,
            width,
            height,
            image_png: encode_png(&DynamicImage::ImageRgb8(req.image.clone()))
                .map_err(InpaintError::Backend)?,
            mask_png: encode_png(&DynamicImage::ImageLuma8(req.mask.to_gray()))
                .map_err(InpaintError::Backend)?,
        };
        let resp = self
            .process
            .call(&request)
            .map_err(inpaint_transport_error)?;
        if !resp.ok {
            let msg = resp.error.unwrap_or_default();
            return Err(match resp.kind.as_deref() {
                Some("unsupported_resolution") => {
                    InpaintError::UnsupportedResolution(width, height)
                }
                Some("timeout") => InpaintError::Timeout(start.elapsed().as_secs_f64()),
                Some("unavailable") => InpaintError::Unavailable(msg),
                _ => InpaintError::Backend(msg),
            });
        }
        let png = resp
            .image_png
            .ok_or_else(|| InpaintError::Backend("reply lacks image_png".into()))?;
        let image = decode_png(&png).map_err(InpaintError::Backend)?.to_rgb8();
        Ok(InpaintResult {
            image,
            backend_id: self.id.clone(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

fn embed_reply(
    resp: AdapterResponse,
    expected_dim: usize,
) -> Result<EmbeddingVector, EmbeddingError> {
    if !resp.ok {
        let msg = resp.error.unwrap_or_default();
        return Err(match resp.kind.as_deref() {
            Some("unavailable") => EmbeddingError::Unavailable(msg),
            _ => EmbeddingError::Backend(msg),
        });
    }
    let v = resp
        .vector
        .ok_or_else(|| EmbeddingError::Backend("reply lacks vector".into()))?;
    if v.len() != expected_dim {
        return Err(EmbeddingError::DimensionMismatch(v.len(), expected_dim));
    }
    EmbeddingVector::normalized(v)
}

fn image_request(crop: &RgbImage) -> Result<AdapterRequest, EmbeddingError> {
    Ok(AdapterRequest::EmbedImage {
        image_png: encode_png(&DynamicImage::ImageRgb8(crop.clone()))
            .map_err(EmbeddingError::Backend)?,
    })
}

struct EncoderHandshake {
    id: String,
    dim: usize,
    preprocessing: String,
}

fn encoder_hello(
    process: &AdapterProcess,
    command: &str,
) -> Result<EncoderHandshake, EmbeddingError> {
    let hello = process.hello().map_err(embed_transport_error)?;
    let dim = hello.dim.filter(|&d| d > 0).ok_or_else(|| {
        EmbeddingError::Unavailable(format!("adapter '{command}' did not declare dim"))
    })?;
    Ok(EncoderHandshake {
        id: hello
            .backend_id
            .unwrap_or_else(|| format!("adapter:{command}")),
        dim,
        preprocessing: hello.preprocessing.unwrap_or_else(|| "unspecified".into()),
    })
}

pub struct AdapterVlEncoder {
    process: AdapterProcess,
    info: EncoderHandshake,
}

impl AdapterVlEncoder {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, EmbeddingError> {
        let process = AdapterProcess::spawn(command, timeout).map_err(embed_transport_error)?;
        let info = encoder_hello(&process, command)?;
        Ok(Self { process, info })
    }
}

impl VisionLanguageEncoder for AdapterVlEncoder {
    fn id(&self) -> &str {
        &self.info.id
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn preprocessing(&self) -> String {
        self.info.preprocessing.clone()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let resp = self
            .process
            .call(&AdapterRequest::EmbedText { text: text.into() })
            .map_err(embed_transport_error)?;
        embed_reply(resp, self.info.dim)
    }

    fn embed_image(&self, crop: &RgbImage) -> Result<EmbeddingVector, EmbeddingError> {
        let resp = self
            .process
            .call(&image_request(crop)?)
            .map_err(embed_transport_error)?;
        embed_reply(resp, self.info.dim)
    }
}

pub struct AdapterVisualEncoder {
    process: AdapterProcess,
    info: EncoderHandshake,
}

impl AdapterVisualEncoder {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, EmbeddingError> {
        let process = AdapterProcess::spawn(command, timeout).map_err(embed_transport_error)?;
        let info = encoder_hello(&process, command)?;
        Ok(Self { process, info })
    }
}

impl VisualEncoder for AdapterVisualEncoder {
    fn id(&self) -> &str {
        &self.info.id
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn preprocessing(&self) -> String {
        self.info.preprocessing.clone()
    }

    fn embed_image(&self, crop: &RgbImage) -> Result<EmbeddingVector, EmbeddingError> {
        let resp = self
            .process
            .call(&image_request(crop)?)
            .map_err(embed_transport_error)?;
        embed_reply(resp, self.info.dim)
    }
}

/// Backend exposed by [`serve`].
pub enum Served<'a> {
    Inpaint(&'a dyn InpaintBackend),
    VisionLanguage(&'a dyn VisionLanguageEncoder),
    Visual(&'a dyn VisualEncoder),
}

fn handle(backend: &Served<'_>, request: AdapterRequest) -> AdapterResponse {
    match (backend, request) {
        (Served::Inpaint(b), AdapterRequest::Hello) => {
            let caps = b.capabilities();
            AdapterResponse {
                ok: true,
                backend_id: Some(b.id().into()),
                max_concurrent: Some(caps.max_concurrent),
                preferred_resolutions: Some(caps.preferred_resolutions),
                supports_batching: Some(caps.supports_batching),
                ..AdapterResponse::default()
            }
        }
        (Served::VisionLanguage(e), AdapterRequest::Hello) => AdapterResponse {
            ok: true,
            backend_id: Some(e.id().into()),
            dim: Some(e.dim()),
            preprocessing: Some(e.preprocessing()),
            ..AdapterResponse::default()
        },
        (Served::Visual(e), AdapterRequest::Hello) => AdapterResponse {
            ok: true,
            backend_id: Some(e.id().into()),
            dim: Some(e.dim()),
            preprocessing: Some(e.preprocessing()),
            ..AdapterResponse::default()
        },
        (
            Served::Inpaint(b),
            AdapterRequest::Inpaint {
                prompt,
                label,
                steps,
                guidance_scale,
                seed,
                width,
                height,
                image_png,
                mask_png,
            },
        ) => {
            let decoded = decode_png(&image_png).and_then(|img| {
                let mask = decode_png(&mask_png)?;
                Ok((img.to_rgb8(), BinaryMask::from_gray(&mask.to_luma8())))
            });
            let (image, mask) = match decoded {
                Ok(v) => v,
                Err(e) => return AdapterResponse::failure("backend", e),
            };
            if image.dimensions() != (width, height) {
                return AdapterResponse::failure("backend", "declared size does not match image");
            }
            let req = InpaintRequest {
                image,
                mask,
                prompt,
                label,
                steps,
                guidance_scale,
                seed,
                target_resolution: None,
            };
            match b.inpaint(&req) {
                Ok(res) => match encode_png(&DynamicImage::ImageRgb8(res.image)) {
                    Ok(png) => AdapterResponse {
                        ok: true,
                        image_png: Some(png),
                        ..AdapterResponse::default()
                    },
                    Err(e) => AdapterResponse::failure("backend", e),
                },
                Err(InpaintError::UnsupportedResolution(..)) => {
                    AdapterResponse::failure("unsupported_resolution", "unsupported resolution")
                }
                Err(InpaintError::Timeout(_)) => AdapterResponse::failure("timeout", "timeout"),
                Err(InpaintError::Unavailable(m)) => AdapterResponse::failure("unavailable", m),
                Err(e) => AdapterResponse::failure("backend", e.to_string()),
            }
        }
        (Served::VisionLanguage(e), AdapterRequest::EmbedText { text }) => {
            vector_reply(e.embed_text(&text))
        }
        (Served::VisionLanguage(e), AdapterRequest::EmbedImage { image_png }) => vector_reply(
            decode_png(&image_png)
                .map_err(EmbeddingError::Backend)
                .and_then(|i| e.embed_image(&i.to_rgb8())),
        ),
        (Served::Visual(e), AdapterRequest::EmbedImage { image_png }) => vector_reply(
            decode_png(&image_png)
                .map_err(EmbeddingError::Backend)
                .and_then(|i| e.embed_image(&i.to_rgb8())),
        ),
        (_, other) => AdapterResponse::failure(
            "backend",
            format!(
                "operation not supported by this backend: {}",
                op_name(&other)
            ),
        ),
    }
}

fn op_name(r: &AdapterRequest) -> &'static str {
    match r {
        AdapterRequest::Hello => "hello",
        AdapterRequest::Inpaint { .. } => "inpaint",
        AdapterRequest::EmbedText { .. } => "embed_text",
        AdapterRequest::EmbedImage { .. } => "embed_image",
    }
}

fn vector_reply(r: Result<EmbeddingVector, EmbeddingError>) -> AdapterResponse {
    match r {
        Ok(v) => AdapterResponse {
            ok: true,
            vector: Some(v.values().to_vec()),
            ..AdapterResponse::default()
        },
        Err(EmbeddingError::Unavailable(m)) => AdapterResponse::failure("unavailable", m),
        Err(e) => AdapterResponse::failure("backend", e.to_string()),
    }
}

/// Answer adapter requests from `input` until EOF.
pub fn serve<R: BufRead, W: Write>(
    backend: Served<'_>,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<AdapterRequest>(&line) {
            Ok(req) => handle(&backend, req),
            Err(e) => AdapterResponse::failure("backend", format!("bad request: {e}")),
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inpainting::{mock_fill_color, MockInpainter};
    use crate::masking::MaskRect;

    #[test]
    fn request_wire_format() {
        let v = serde_json::to_value(AdapterRequest::EmbedText { text: "dog".into() }).unwrap();
        assert_eq!(v, serde_json::json!({"op": "embed_text", "text": "dog"}));
        let v = serde_json::to_value(AdapterRequest::Hello).unwrap();
        assert_eq!(v, serde_json::json!({"op": "hello"}));
    }

    #[test]
    fn serve_inpaint_round_trip_in_memory() {
        let backend = MockInpainter::new();
        let mut mask = BinaryMask::new(8, 8);
        mask.fill_rect(&MaskRect::from([2, 2, 3, 3]));
        let image = RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        let req = AdapterRequest::Inpaint {
            prompt: "dog".into(),
            label: "dog".into(),
            steps: 20,
            guidance_scale: None,
            seed: 1,
            width: 8,
            height: 8,
            image_png: encode_png(&DynamicImage::ImageRgb8(image)).unwrap(),
            mask_png: encode_png(&DynamicImage::ImageLuma8(mask.to_gray())).unwrap(),
        };
        let input = format!(
            "{}\n{}\n",
            serde_json::to_string(&AdapterRequest::Hello).unwrap(),
            serde_json::to_string(&req).unwrap()
        );
        let mut out = Vec::new();
        serve(Served::Inpaint(&backend), input.as_bytes(), &mut out).unwrap();
        let lines: Vec<AdapterResponse> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0].backend_id.as_deref(), Some("mock-inpaint"));
        let img = decode_png(lines[1].image_png.as_ref().unwrap())
            .unwrap()
            .to_rgb8();
        assert_eq!(*img.get_pixel(3, 3), mock_fill_color("dog"));
        assert_eq!(*img.get_pixel(0, 0), image::Rgb([1, 2, 3]));
    }

    #[test]
    fn unsupported_op_is_reported() {
        let backend = MockInpainter::new();
        let mut out = Vec::new();
        serve(
            Served::Inpaint(&backend),
            &b"{\"op\":\"embed_text\",\"text\":\"x\"}\nnot json\n"[..],
            &mut out,
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        let replies: Vec<AdapterResponse> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(replies.iter().all(|r| !r.ok));
    }

    #[test]
    fn missing_command_is_unavailable() {
        let r = AdapterInpainter::spawn("exec /nonexistent/ronin-adapter", Duration::from_secs(5));
        assert!(matches!(r, Err(InpaintError::Unavailable(_))));
    }

    #[test]
    fn silent_adapter_times_out() {
        let p = AdapterProcess::spawn("sleep 5", Duration::from_millis(100)).unwrap();
        assert!(matches!(
            p.call(&AdapterRequest::Hello),
            Err(TransportError::Timeout(_))
        ));
        assert!(matches!(
            p.call(&AdapterRequest::Hello),
            Err(TransportError::Unavailable(_))
        ));
    }
}
