use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use ronin_core::adapter::{serve, Served};
use ronin_core::embeddings::{MockVisualEncoder, MockVlEncoder, DEFAULT_MOCK_DIM};
use ronin_core::inpainting::MockInpainter;
use ronin_core::mock_scene::{write_scene, MockSceneSpec};
use ronin_core::pipeline::{
    report, report_from_scores, sweep, BackendSelector, PipelineError, Resolution, RunConfig,
    RunResult, SweepAxis,
};
use ronin_core::prompting::PromptTemplate;
use ronin_core::{build_plan, load_manifest, run, MaskMode};

const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ronin",
    version,
    about = "Zero-shot OOD object detection by class-conditioned inpainting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every detection in a manifest and write report files.
    Run(RunArgs),
    /// Repeat a run over several values of one parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; alpha_beta values are written ALPHA:BETA.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Re-evaluate an existing score JSONL file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Defaults to the directory holding the score file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        tpr_target: f64,
        #[arg(long)]
        plots: bool,
    },
    /// Print the inpainting plan of every image as JSONL.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "class-wise")]
        mode: MaskMode,
        #[arg(long, default_value_t = 0.9)]
        mask_ratio: f64,
    },
    /// Write a synthetic manifest and images for the mock backends.
    GenerateMock {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        n_id: usize,
        #[arg(long, default_value_t = 25)]
        n_ood: usize,
        #[arg(long, default_value_t = 5)]
        per_image: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve a mock backend over the adapter protocol on stdin/stdout.
    ServeMock {
        kind: MockKind,
        /// ID labels the mock vision-language encoder recognizes.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MOCK_DIM)]
        dim: usize,
        #[arg(long, default_value = "a photo of a {label}")]
        template: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MockKind {
    Inpaint,
    Vl,
    Visual,
}

#[derive(Args)]
struct RunArgs {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    mode: Option<MaskMode>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    inpaint_backend: Option<BackendSelector>,
    #[arg(long)]
    vl_backend: Option<BackendSelector>,
    #[arg(long)]
    visual_backend: Option<BackendSelector>,
    /// Inpainting resolution, e.g. 512x512.
    #[arg(long)]
    resolution: Option<Resolution>,
    /// Exclusion list file; switches inpainting to refined prompts.
    #[arg(long)]
    exclusions: Option<PathBuf>,
    #[arg(long)]
    inpaint_template: Option<String>,
    #[arg(long)]
    scoring_template: Option<String>,
    #[arg(long)]
    refined_template: Option<String>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Seconds to wait for an adapter reply.
    #[arg(long)]
    adapter_timeout: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 3 when any detection lands in the error ledger.
    #[arg(long)]
    strict: bool,
    /// Also render roc.png and hist.png.
    #[arg(long)]
    plots: bool,
}

fn template(s: &str) -> Result<PromptTemplate, PipelineError> {
    PromptTemplate::new(s).map_err(|e| PipelineError::Config(format!("template '{s}': {e}")))
}

impl RunArgs {
    fn to_config(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $flag:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone(); })*
            };
        }
        set!(
            manifest <- manifest,
            mode <- mode,
            mask_ratio <- mask_ratio,
            steps <- steps,
            alpha <- alpha,
            beta <- beta,
            epsilon <- epsilon,
            inpaint_backend <- inpaint_backend,
            vl_backend <- vl_backend,
            visual_backend <- visual_backend,
            seed <- seed,
            out_dir <- out,
            adapter_timeout_secs <- adapter_timeout,
        );
        if self.guidance_scale.is_some() {
            c.guidance_scale = self.guidance_scale;
        }
        if self.resolution.is_some() {
            c.resolution = self.resolution;
        }
        if self.exclusions.is_some() {
            c.exclusions = self.exclusions.clone();
        }
        if self.min_confidence.is_some() {
            c.min_confidence = self.min_confidence;
        }
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if let Some(t) = &self.inpaint_template {
            c.inpaint_template = template(t)?;
        }
        if let Some(t) = &self.scoring_template {
            c.scoring_template = template(t)?;
        }
        if let Some(t) = &self.refined_template {
            c.refined_template = template(t)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn summarize(r: &RunResult) {
    match &r.report {
        Some(e) => eprintln!(
            "{}: {} scored, {} errors, AUROC {:.4}, FPR@{:.0} {:.4}",
            r.out_dir.display(),
            r.scored.len(),
            r.errors.len(),
            e.auroc,
            e.tpr_target * 100.0,
            e.fpr_at_95
        ),
        None => eprintln!(
            "{}: {} scored, {} errors, {}",
            r.out_dir.display(),
            r.scored.len(),
            r.errors.len(),
            r.note.as_deref().unwrap_or("no evaluation")
        ),
    }
}

fn partial_exit(partial: bool, strict: bool) -> ExitCode {
    if partial {
        log::warn!("some detections could not be scored; see errors.jsonl");
        if strict {
            return ExitCode::from(EXIT_PARTIAL);
        }
    }
    ExitCode::SUCCESS
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode, PipelineError> {
    let config = args.to_config()?;
    let result = run(&config)?;
    report(std::slice::from_ref(&result), &config.out_dir, args.plots)?;
    summarize(&result);
    Ok(partial_exit(result.is_partial(), args.strict))
}

fn cmd_sweep(
    args: &RunArgs,
    axis: SweepAxis,
    values: &[String],
) -> Result<ExitCode, PipelineError> {
    let config = args.to_config()?;
    let outcome = sweep(&config, axis, values)?;
    outcome.write_report(&config.out_dir, args.plots)?;
    for p in &outcome.points {
        match &p.result {
            Ok(r) => summarize(r),
            Err(e) => eprintln!("{}={}: failed: {e}", axis, p.value),
        }
    }
    let failures = outcome.failures();
    if failures == outcome.points.len() {
        return Err(PipelineError::Backend(format!(
            "all {failures} sweep runs failed"
        )));
    }
    let partial = failures > 0 || outcome.results().any(RunResult::is_partial);
    Ok(partial_exit(partial, args.strict))
}

fn cmd_eval(
    scores: &Path,
    out: Option<&Path>,
    tpr_target: f64,
    plots: bool,
) -> Result<ExitCode, PipelineError> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(PipelineError::Config(format!(
            "tpr target must be in (0, 1], got {tpr_target}"
        )));
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => scores.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (doc, _) = report_from_scores(scores, tpr_target, &dir, plots)?;
    let json =
        serde_json::to_string_pretty(&doc.eval).map_err(|e| PipelineError::Io(e.to_string()))?;
    println!("{json}");
    if let Some(note) = &doc.note {
        eprintln!("{note}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(manifest: &Path, mode: MaskMode, ratio: f64) -> anyhow::Result<ExitCode> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        anyhow::bail!("mask ratio must be in (0, 1], got {ratio}");
    }
    let m = load_manifest(manifest)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for im in &m.images {
        writeln!(out, "{}", build_plan(im, mode, ratio).to_json_line())?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(
    kind: MockKind,
    labels: &[String],
    dim: usize,
    tmpl: &str,
) -> anyhow::Result<ExitCode> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    match kind {
        MockKind::Inpaint => serve(
            Served::Inpaint(&MockInpainter::new()),
            stdin.lock(),
            stdout.lock(),
        ),
        MockKind::Vl => {
            let enc = MockVlEncoder::new(dim, template(tmpl)?, labels);
            serve(Served::VisionLanguage(&enc), stdin.lock(), stdout.lock())
        }
        MockKind::Visual => serve(
            Served::Visual(&MockVisualEncoder::new(dim)),
            stdin.lock(),
            stdout.lock(),
        ),
    }
    .context("adapter stream failed")?;
    Ok(ExitCode::SUCCESS)
}

fn pipeline_exit(r: Result<ExitCode, PipelineError>) -> ExitCode {
    r.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code() as u8)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let other = match cli.command {
        Command::Run(args) => return pipeline_exit(cmd_run(&args)),
        Command::Sweep { run, axis, values } => {
            return pipeline_exit(cmd_sweep(&run, axis, &values))
        }
        Command::Eval {
            scores,
            out,
            tpr_target,
            plots,
        } => return pipeline_exit(cmd_eval(&scores, out.as_deref(), tpr_target, plots)),
        Command::Plan {
            manifest,
            mode,
            mask_ratio,
        } => cmd_plan(&manifest, mode, mask_ratio),
        Command::GenerateMock {
            out,
            n_id,
            n_ood,
            per_image,
            seed,
        } => {
            let spec = MockSceneSpec {
                n_id,
                n_ood,
                per_image,
                seed,
                ..MockSceneSpec::default()
            };
            write_scene(&spec, &out)
                .map(|p| {
                    println!("{}", p.display());
                    ExitCode::SUCCESS
                })
                .context("cannot write mock scene")
        }
        Command::ServeMock {
            kind,
            labels,
            dim,
            template,
        } => cmd_serve(kind, &labels, dim, &template),
    };
    other.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
