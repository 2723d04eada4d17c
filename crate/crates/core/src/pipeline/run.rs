use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterInpainter, AdapterVisualEncoder, AdapterVlEncoder};
use crate::detections_io::{
    load_manifest_with, write_manifest, GtFlag, ImageRecord, LabelNormalizer, Manifest,
};
use crate::embeddings::{
    embed_image_visual, embed_image_vl, embed_text, EmbeddingError, EmbeddingVector, EncoderSet,
    MockVisualEncoder, MockVlEncoder,
};
use crate::evaluation::{auroc, evaluate_at, fpr_at_tpr, EvalReport, ScoreSet};
use crate::inpainting::{
    crop_scaled, resize_rgb, run_pass, InpaintBackend, InpaintError, InpaintRequest, InpaintResult,
    MockInpainter, PassOutput, PassSettings, PromptMode, TAU_OUT,
};
use crate::masking::{build_plan, MaskPlan};
use crate::prompting::{load_exclusions, ExclusionMap};
use crate::scoring::{
    ablated_score, mcm_from_embeddings, triplet_from_embeddings, triplet_score, Drop, ScoreParams,
    ScoreRecord, ScoredDetection,
};

use super::config::{sha256_hex, BackendSelector, Fingerprint, RunConfig};
use super::PipelineError;

pub const SCORES_FILE: &str = "scores.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";

/// The inpainting model and the two encoders a run talks to.
#[derive(Clone)]
pub struct Backends {
    pub inpaint: Arc<dyn InpaintBackend>,
    pub encoders: EncoderSet,
}

impl Backends {
    /// Construct the backends named in `config`. Mock encoders register
    /// `id_labels` so crops painted with a label's fill color embed near it.
    pub fn from_config(config: &RunConfig, id_labels: &[String]) -> Result<Self, PipelineError> {
        let timeout = Duration::from_secs_f64(config.adapter_timeout_secs);
        let inpaint: Arc<dyn InpaintBackend> = match &config.inpaint_backend {
            BackendSelector::Mock => Arc::new(MockInpainter::new()),
            BackendSelector::Adapter(cmd) => Arc::new(
                AdapterInpainter::spawn(cmd, timeout)
                    .map_err(|e| PipelineError::Backend(e.to_string()))?,
            ),
        };
        let vl: Arc<dyn crate::embeddings::VisionLanguageEncoder> = match &config.vl_backend {
            BackendSelector::Mock => Arc::new(MockVlEncoder::new(
                config.mock_dim,
                config.scoring_template.clone(),
                id_labels,
            )),
            BackendSelector::Adapter(cmd) => Arc::new(
                AdapterVlEncoder::spawn(cmd, timeout)
                    .map_err(|e| PipelineError::Backend(e.to_string()))?,
            ),
        };
        let visual: Arc<dyn crate::embeddings::VisualEncoder> = match &config.visual_backend {
            BackendSelector::Mock => Arc::new(MockVisualEncoder::new(config.mock_dim)),
            BackendSelector::Adapter(cmd) => Arc::new(
                AdapterVisualEncoder::spawn(cmd, timeout)
                    .map_err(|e| PipelineError::Backend(e.to_string()))?,
            ),
        };
        Ok(Self {
            inpaint,
            encoders: EncoderSet::new(vl, visual),
        })
    }
}

/// A detection that could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub id: String,
    pub image_path: String,
    pub stage: String,
    pub error: String,
}

/// Accumulated seconds per stage. Per-image stages are summed over images,
/// so with several workers they can exceed `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub load: f64,
    pub plan: f64,
    pub inpaint: f64,
    pub score: f64,
    pub evaluate: f64,
    pub write: f64,
    pub total: f64,
}

impl StageTimes {
    fn add(&mut self, o: &StageTimes) {
        self.load += o.load;
        self.plan += o.plan;
        self.inpaint += o.inpaint;
        self.score += o.score;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub auroc: f64,
    pub fpr_at_95: f64,
}

impl MetricPair {
    fn of(s: &ScoreSet, tpr_target: f64) -> Option<Self> {
        Some(Self {
            auroc: auroc(s).ok()?,
            fpr_at_95: fpr_at_tpr(s, tpr_target).ok()?.0,
        })
    }
}

/// Metrics of the triplet score with one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dropped: Drop,
    pub auroc: f64,
    pub fpr_at_95: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub scores_path: PathBuf,
    /// Present when at least one detection failed.
    pub errors_path: Option<PathBuf>,
    pub scored: Vec<ScoredDetection>,
    pub errors: Vec<ErrorRecord>,
    /// `None` when there is nothing to evaluate; `note` says why.
    pub report: Option<EvalReport>,
    pub note: Option<String>,
    pub ablations: Vec<AblationRow>,
    /// MCM baseline on the original crops.
    pub mcm: Option<MetricPair>,
    pub stage_times: StageTimes,
    pub fingerprint: String,
    pub fingerprint_fields: Fingerprint,
    pub n_images: usize,
    /// Detections after the confidence filter.
    pub n_detections: usize,
    /// Detections removed by the confidence filter.
    pub n_filtered: usize,
    pub inpaint_calls: usize,
    /// Refined-mode passes whose label had no exclusion list.
    pub prompt_fallbacks: usize,
    /// Mean per-image processing time (load, inpaint, score), seconds.
    pub mean_wall_time_per_image: f64,
    /// Mean per-image inpainting backend time, seconds.
    pub mean_inpaint_time_per_image: f64,
    pub config: RunConfig,
}

impl RunResult {
    pub fn records(&self) -> Vec<ScoreRecord> {
        self.scored.iter().map(ScoreRecord::from).collect()
    }

    pub fn is_partial(&self) -> bool {
        !self.errors.is_empty()
    }
}

/// Load the manifest named in `config`, build its backends and run.
pub fn run(config: &RunConfig) -> Result<RunResult, PipelineError> {
    config.validate()?;
    let manifest = load_config_manifest(config)?;
    let backends = Backends::from_config(config, &manifest.id_label_set)?;
    run_with(config, &manifest, &backends)
}

pub(crate) fn load_config_manifest(config: &RunConfig) -> Result<Manifest, PipelineError> {
    if config.manifest.as_os_str().is_empty() {
        return Err(PipelineError::Config("no manifest given".into()));
    }
    let normalizer = LabelNormalizer::default()
        .with_aliases(&config.label_aliases)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(load_manifest_with(&config.manifest, &normalizer)?)
}

/// Counting semaphore bounding concurrent inpaint calls.
struct Budget {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Budget {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn with<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("budget lock");
            while *free == 0 {
                free = self.cv.wait(free).expect("budget lock");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("budget lock") += 1;
        self.cv.notify_one();
        out
    }
}

struct Budgeted<'a> {
    inner: &'a dyn InpaintBackend,
    budget: &'a Budget,
}

impl InpaintBackend for Budgeted<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn capabilities(&self) -> crate::inpainting::BackendCapabilities {
        self.inner.capabilities()
    }

    fn inpaint(&self, request: &InpaintRequest) -> Result<InpaintResult, InpaintError> {
        self.budget.with(|| self.inner.inpaint(request))
    }
}

/// Read-only state shared by all image workers.
struct Shared<'a> {
    config: &'a RunConfig,
    manifest: &'a Manifest,
    backends: &'a Backends,
    budget: Budget,
    exclusions: Option<ExclusionMap>,
    text: BTreeMap<String, EmbeddingVector>,
    id_vectors: Vec<EmbeddingVector>,
    params: ScoreParams,
    fingerprint: String,
    abort: AtomicBool,
}

#[derive(Default)]
struct ImageOutcome {
    scored: Vec<ScoredDetection>,
    errors: Vec<ErrorRecord>,
    calls: usize,
    fallbacks: usize,
    times: StageTimes,
    wall: f64,
    global: Option<String>,
}

impl ImageOutcome {
    fn fail_all<'d>(
        &mut self,
        record: &ImageRecord,
        ids: impl Iterator<Item = &'d str>,
        stage: &str,
        error: &str,
    ) {
        for id in ids {
            self.errors.push(ErrorRecord {
                id: id.to_string(),
                image_path: record.image_path.clone(),
                stage: stage.to_string(),
                error: error.to_string(),
            });
        }
    }
}

fn is_global_embedding(e: &EmbeddingError) -> bool {
    matches!(e, EmbeddingError::Unavailable(_))
}

fn load_raster(path: &Path, record: &ImageRecord) -> Result<RgbImage, String> {
    let img = image::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .to_rgb8();
    if img.dimensions() != (record.width, record.height) {
        return Err(format!(
            "{} is {}x{}, manifest says {}x{}",
            path.display(),
            img.width(),
            img.height(),
            record.width,
            record.height
        ));
    }
    Ok(img)
}

fn process_image(shared: &Shared<'_>, record: &ImageRecord) -> ImageOutcome {
    let mut out = ImageOutcome::default();
    if record.detections.is_empty() {
        return out;
    }
    let start = Instant::now();
    let all_ids = || record.detections.iter().map(|d| d.detection_id.as_str());
    if shared.abort.load(Ordering::Relaxed) {
        out.fail_all(record, all_ids(), "inpaint", "run aborted");
        return out;
    }

    let t = Instant::now();
    let original = match load_raster(&shared.manifest.resolve_image(record), record) {
        Ok(img) => img,
        Err(e) => {
            out.fail_all(record, all_ids(), "load_image", &e);
            return out;
        }
    };
    let dims = original.dimensions();
    let frame = match shared.config.resolution {
        Some(r) => resize_rgb(&original, r.width, r.height),
        None => original.clone(),
    };
    out.times.load = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let plan: MaskPlan = build_plan(record, shared.config.mode, shared.config.mask_ratio);
    out.times.plan = t.elapsed().as_secs_f64();

    let prompt = match &shared.exclusions {
        Some(ex) => PromptMode::Refined(&shared.config.refined_template, ex),
        None => PromptMode::Simple(&shared.config.inpaint_template),
    };
    let settings = PassSettings {
        prompt,
        steps: shared.config.steps,
        guidance_scale: shared.config.guidance_scale,
        run_seed: shared.config.seed,
        target_resolution: shared.config.resolution.map(|r| (r.width, r.height)),
        tau_out: TAU_OUT,
    };
    let backend = Budgeted {
        inner: shared.backends.inpaint.as_ref(),
        budget: &shared.budget,
    };

    let mut outputs: BTreeMap<&str, PassOutput> = BTreeMap::new();
    for pass in &plan.passes {
        if shared.abort.load(Ordering::Relaxed) {
            out.fail_all(
                record,
                pass.member_ids.iter().map(String::as_str),
                "inpaint",
                "run aborted",
            );
            continue;
        }
        if let Some(ex) = &shared.exclusions {
            if !ex.covers(&pass.prompt_label) {
                out.fallbacks += 1;
            }
        }
        out.calls += 1;
        match run_pass(&original, pass, &settings, &backend) {
            Ok(o) => {
                out.times.inpaint += o.result.wall_time;
                for id in &pass.member_ids {
                    outputs.insert(id.as_str(), o.clone());
                }
            }
            Err(e) => {
                let msg = e.to_string();
                if e.is_global() {
                    shared.abort.store(true, Ordering::Relaxed);
                    out.global = Some(msg.clone());
                }
                out.fail_all(
                    record,
                    pass.member_ids.iter().map(String::as_str),
                    "inpaint",
                    &msg,
                );
            }
        }
    }

    let t = Instant::now();
    let encoders = &shared.backends.encoders;
    for d in &record.detections {
        let Some(pass_out) = outputs.get(d.detection_id.as_str()) else {
            continue;
        };
        let fail = |out: &mut ImageOutcome, stage: &str, e: String| {
            out.errors.push(ErrorRecord {
                id: d.detection_id.clone(),
                image_path: record.image_path.clone(),
                stage: stage.to_string(),
                error: e,
            });
        };
        let crops = crop_scaled(&frame, &d.bbox, dims)
            .and_then(|ori| Ok((ori, crop_scaled(&pass_out.result.image, &d.bbox, dims)?)));
        let (ori, inp) = match crops {
            Ok(c) => c,
            Err(e) => {
                fail(&mut out, "crop", e.to_string());
                continue;
            }
        };
        let scored = (|| -> Result<ScoredDetection, EmbeddingError> {
            let text = match shared.text.get(&d.label) {
                Some(v) => v.clone(),
                None => embed_text(encoders, &d.label, &shared.config.scoring_template)?,
            };
            let ori_vl = embed_image_vl(encoders, &ori)?;
            let triplet = triplet_from_embeddings(
                &ori_vl,
                &embed_image_vl(encoders, &inp)?,
                &text,
                &embed_image_visual(encoders, &ori)?,
                &embed_image_visual(encoders, &inp)?,
            )?;
            let mcm = if shared.id_vectors.is_empty() {
                None
            } else {
                Some(mcm_from_embeddings(
                    &ori_vl,
                    &shared.id_vectors,
                    shared.config.mcm_temperature,
                )?)
            };
            Ok(ScoredDetection {
                detection_id: d.detection_id.clone(),
                label: d.label.clone(),
                gt_flag: d.gt_flag,
                score: triplet_score(&triplet, &shared.params),
                triplet,
                mode: shared.config.mode,
                fingerprint: shared.fingerprint.clone(),
                seed: shared.config.seed,
                mcm,
            })
        })();
        match scored {
            Ok(s) => out.scored.push(s),
            Err(e) => {
                if is_global_embedding(&e) {
                    shared.abort.store(true, Ordering::Relaxed);
                    out.global.get_or_insert_with(|| e.to_string());
                }
                fail(&mut out, "embed", e.to_string());
            }
        }
    }
    out.times.score = t.elapsed().as_secs_f64();
    out.wall = start.elapsed().as_secs_f64();
    out
}

fn build_fingerprint(
    config: &RunConfig,
    manifest: &Manifest,
    backends: &Backends,
) -> Result<Fingerprint, PipelineError> {
    let mut manifest_bytes = Vec::new();
    write_manifest(manifest, &mut manifest_bytes)?;
    let exclusions_sha256 = match &config.exclusions {
        Some(p) => {
            Some(sha256_hex(&std::fs::read(p).map_err(|e| {
                PipelineError::Config(format!("{}: {e}", p.display()))
            })?))
        }
        None => None,
    };
    Ok(Fingerprint {
        manifest_sha256: sha256_hex(&manifest_bytes),
        mode: config.mode,
        mask_ratio: config.mask_ratio,
        steps: config.steps,
        guidance_scale: config.guidance_scale,
        resolution: config.resolution,
        alpha: config.alpha,
        beta: config.beta,
        epsilon: config.epsilon,
        inpaint_template: config.inpaint_template.to_string(),
        scoring_template: config.scoring_template.to_string(),
        refined_template: config
            .exclusions
            .as_ref()
            .map(|_| config.refined_template.to_string()),
        exclusions_sha256,
        min_confidence: config.min_confidence,
        label_aliases: config.label_aliases.clone(),
        seed: config.seed,
        mcm_temperature: config.mcm_temperature,
        inpaint_backend: backends.inpaint.id().to_string(),
        vl_backend: backends.encoders.vl.id().to_string(),
        vl_preprocessing: backends.encoders.vl.preprocessing(),
        visual_backend: backends.encoders.visual.id().to_string(),
        visual_preprocessing: backends.encoders.visual.preprocessing(),
    })
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| PipelineError::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn score_set(scored: &[ScoredDetection], f: impl Fn(&ScoredDetection) -> f64) -> ScoreSet {
    let pick = |flag| {
        scored
            .iter()
            .filter(|s| s.gt_flag == flag)
            .map(&f)
            .collect()
    };
    ScoreSet::new(pick(GtFlag::Id), pick(GtFlag::Ood))
}

/// Run on an already loaded manifest with already constructed backends.
///
/// Writes `scores.jsonl` (and `errors.jsonl` when needed) into the
/// configured output directory. Per-detection failures go to the error
/// ledger; a backend that becomes unavailable aborts with
/// [`PipelineError::Backend`].
pub fn run_with(
    config: &RunConfig,
    manifest: &Manifest,
    backends: &Backends,
) -> Result<RunResult, PipelineError> {
    config.validate()?;
    let total = Instant::now();
    let (manifest, n_filtered) = match config.min_confidence {
        Some(c) => manifest.filter_confidence(c),
        None => (manifest.clone(), 0),
    };
    let exclusions = match &config.exclusions {
        Some(p) => Some(
            load_exclusions(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };

    let fingerprint_fields = build_fingerprint(config, &manifest, backends)?;
    let fingerprint = fingerprint_fields.digest();

    let labels: BTreeSet<&str> = manifest
        .id_label_set
        .iter()
        .map(String::as_str)
        .chain(
            manifest
                .images
                .iter()
                .flat_map(|im| im.detections.iter().map(|d| d.label.as_str())),
        )
        .collect();
    let text_err = |e: EmbeddingError| PipelineError::Backend(format!("text encoder: {e}"));
    let mut text = BTreeMap::new();
    if manifest.detection_count() > 0 {
        for l in labels {
            text.insert(
                l.to_string(),
                embed_text(&backends.encoders, l, &config.scoring_template).map_err(text_err)?,
            );
        }
    }
    let id_vectors = manifest
        .id_label_set
        .iter()
        .filter_map(|l| text.get(l).cloned())
        .collect();

    let shared = Shared {
        config,
        manifest: &manifest,
        backends,
        budget: Budget::new(backends.inpaint.capabilities().max_concurrent),
        exclusions,
        text,
        id_vectors,
        params: config.score_params(),
        fingerprint: fingerprint.clone(),
        abort: AtomicBool::new(false),
    };

    let workers = config
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<ImageOutcome> = pool.install(|| {
        manifest
            .images
            .par_iter()
            .map(|im| process_image(&shared, im))
            .collect()
    });

    if let Some(msg) = outcomes.iter().find_map(|o| o.global.clone()) {
        return Err(PipelineError::Backend(msg));
    }

    let mut stage_times = StageTimes::default();
    let mut scored = Vec::new();
    let mut errors = Vec::new();
    let (mut calls, mut fallbacks, mut wall_sum, mut busy_images) = (0, 0, 0.0, 0usize);
    for o in outcomes {
        stage_times.add(&o.times);
        calls += o.calls;
        fallbacks += o.fallbacks;
        if o.wall > 0.0 {
            wall_sum += o.wall;
            busy_images += 1;
        }
        scored.extend(o.scored);
        errors.extend(o.errors);
    }
    debug_assert_eq!(scored.len() + errors.len(), manifest.detection_count());
    if fallbacks > 0 {
        log::warn!("{fallbacks} refined-prompt pass(es) fell back to the simple prompt");
    }

    let t = Instant::now();
    let set = score_set(&scored, |s| s.score);
    let (report, note) = if set.id_scores.is_empty() || set.ood_scores.is_empty() {
        let why = if scored.is_empty() {
            "no data: no detections were scored".to_string()
        } else {
            format!(
                "no data: evaluation needs both ID and OOD detections (got {} ID, {} OOD)",
                set.id_scores.len(),
                set.ood_scores.len()
            )
        };
        (None, Some(why))
    } else {
        let r =
            evaluate_at(&set, config.tpr_target).map_err(|e| PipelineError::Io(e.to_string()))?;
        (Some(r), None)
    };
    let ablations = if report.is_some() {
        Drop::ALL
            .into_iter()
            .filter_map(|drop| {
                let s = score_set(&scored, |s| ablated_score(&s.triplet, &shared.params, drop));
                MetricPair::of(&s, config.tpr_target).map(|m| AblationRow {
                    dropped: drop,
                    auroc: m.auroc,
                    fpr_at_95: m.fpr_at_95,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    let mcm = if report.is_some() && scored.iter().all(|s| s.mcm.is_some()) {
        MetricPair::of(
            &score_set(&scored, |s| s.mcm.unwrap_or(f64::NAN)),
            config.tpr_target,
        )
    } else {
        None
    };
    stage_times.evaluate = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let out_dir = config.out_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| PipelineError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let scores_path = out_dir.join(SCORES_FILE);
    write_jsonl(&scores_path, scored.iter().map(ScoreRecord::from))?;
    let errors_path = out_dir.join(ERRORS_FILE);
    let errors_path = if errors.is_empty() {
        if errors_path.exists() {
            std::fs::remove_file(&errors_path)?;
        }
        None
    } else {
        write_jsonl(&errors_path, &errors)?;
        Some(errors_path)
    };
    stage_times.write = t.elapsed().as_secs_f64();
    stage_times.total = total.elapsed().as_secs_f64();

    let n_images = manifest.images.len();
    let per_image = |x: f64| {
        if busy_images == 0 {
            0.0
        } else {
            x / busy_images as f64
        }
    };
    Ok(RunResult {
        out_dir,
        scores_path,
        errors_path,
        n_detections: manifest.detection_count(),
        scored,
        errors,
        report,
        note,
        ablations,
        mcm,
        mean_wall_time_per_image: per_image(wall_sum),
        mean_inpaint_time_per_image: per_image(stage_times.inpaint),
        stage_times,
        fingerprint,
        fingerprint_fields,
        n_images,
        n_filtered,
        inpaint_calls: calls,
        prompt_fallbacks: fallbacks,
        config: config.clone(),
    })
}
