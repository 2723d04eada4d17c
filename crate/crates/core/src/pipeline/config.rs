//! Run configuration, backend selection and the config fingerprint.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::inpainting::DEFAULT_STEPS;
use crate::masking::MaskMode;
use crate::prompting::PromptTemplate;
use crate::scoring::{
    ScoreParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_MCM_TEMPERATURE,
};

use super::PipelineError;

pub const DEFAULT_MASK_RATIO: f64 = 0.9;

/// `mock` or `adapter:CMD`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSelector {
    Mock,
    Adapter(String),
}

impl FromStr for BackendSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "mock" {
            return Ok(BackendSelector::Mock);
        }
        match s.strip_prefix("adapter:") {
            Some(cmd) if !cmd.trim().is_empty() => {
                Ok(BackendSelector::Adapter(cmd.trim().to_string()))
            }
            _ => Err(format!(
                "backend must be 'mock' or 'adapter:CMD', got '{s}'"
            )),
        }
    }
}

impl TryFrom<String> for BackendSelector {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BackendSelector> for String {
    fn from(b: BackendSelector) -> Self {
        b.to_string()
    }
}

impl fmt::Display for BackendSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSelector::Mock => f.write_str("mock"),
            BackendSelector::Adapter(cmd) => write!(f, "adapter:{cmd}"),
        }
    }
}

/// Inpainting resolution, written `WxH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("resolution must look like 512x512, got '{s}'");
        let (w, h) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let width: u32 = w.trim().parse().map_err(|_| bad())?;
        let height: u32 = h.trim().parse().map_err(|_| bad())?;
        if width == 0 || height == 0 {
            return Err(bad());
        }
        Ok(Self { width, height })
    }
}

impl TryFrom<String> for Resolution {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Resolution> for String {
    fn from(r: Resolution) -> Self {
        r.to_string()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub mode: MaskMode,
    pub mask_ratio: f64,
    pub steps: u32,
    pub guidance_scale: Option<f64>,
    pub resolution: Option<Resolution>,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub inpaint_template: PromptTemplate,
    pub scoring_template: PromptTemplate,
    pub refined_template: PromptTemplate,
    /// Setting this switches inpainting prompts to refined mode.
    pub exclusions: Option<PathBuf>,
    pub inpaint_backend: BackendSelector,
    pub vl_backend: BackendSelector,
    pub visual_backend: BackendSelector,
    pub seed: u64,
    pub min_confidence: Option<f64>,
    pub out_dir: PathBuf,
    pub mcm_temperature: f64,
    pub tpr_target: f64,
    /// Extra raw -> canonical label aliases on top of the built-in table.
    pub label_aliases: BTreeMap<String, String>,
    pub mock_dim: usize,
    /// Image-level worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    pub adapter_timeout_secs: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            mode: MaskMode::ClassWise,
            mask_ratio: DEFAULT_MASK_RATIO,
            steps: DEFAULT_STEPS,
            guidance_scale: None,
            resolution: None,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            inpaint_template: PromptTemplate::inpaint_default(),
            scoring_template: PromptTemplate::scoring_default(),
            refined_template: PromptTemplate::refined_default(),
            exclusions: None,
            inpaint_backend: BackendSelector::Mock,
            vl_backend: BackendSelector::Mock,
            visual_backend: BackendSelector::Mock,
            seed: 0,
            min_confidence: None,
            out_dir: PathBuf::from("ronin-out"),
            mcm_temperature: DEFAULT_MCM_TEMPERATURE,
            tpr_target: crate::evaluation::DEFAULT_TPR_TARGET,
            label_aliases: BTreeMap::new(),
            mock_dim: crate::embeddings::DEFAULT_MOCK_DIM,
            workers: None,
            adapter_timeout_secs: crate::adapter::DEFAULT_TIMEOUT.as_secs_f64(),
        }
    }
}

impl RunConfig {
    /// Read a TOML (`.toml`) or JSON config file. Missing keys take defaults.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn score_params(&self) -> ScoreParams {
        ScoreParams {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return fail(format!(
                "mask_ratio must be in (0, 1], got {}",
                self.mask_ratio
            ));
        }
        if self.steps == 0 {
            return fail("steps must be >= 1".into());
        }
        self.score_params()
            .validate()
            .map_err(PipelineError::Config)?;
        if matches!(self.guidance_scale, Some(g) if !(g >= 0.0 && g.is_finite())) {
            return fail("guidance_scale must be a non-negative real".into());
        }
        if !(self.mcm_temperature > 0.0 && self.mcm_temperature.is_finite()) {
            return fail("mcm_temperature must be > 0".into());
        }
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return fail(format!(
                "tpr_target must be in (0, 1], got {}",
                self.tpr_target
            ));
        }
        if let Some(c) = self.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return fail(format!("min_confidence must be in [0, 1], got {c}"));
            }
        }
        if self.mock_dim < 2 {
            return fail("mock_dim must be >= 2".into());
        }
        if self.workers == Some(0) {
            return fail("workers must be >= 1".into());
        }
        if !(self.adapter_timeout_secs > 0.0 && self.adapter_timeout_secs.is_finite()) {
            return fail("adapter_timeout_secs must be > 0".into());
        }
        Ok(())
    }
}

/// Everything that can change a score, plus the backends that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub manifest_sha256: String,
    pub mode: MaskMode,
    pub mask_ratio: f64,
    pub steps: u32,
    pub guidance_scale: Option<f64>,
    pub resolution: Option<Resolution>,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub inpaint_template: String,
    pub scoring_template: String,
    pub refined_template: Option<String>,
    pub exclusions_sha256: Option<String>,
    pub min_confidence: Option<f64>,
    pub label_aliases: BTreeMap<String, String>,
    pub seed: u64,
    pub mcm_temperature: f64,
    pub inpaint_backend: String,
    pub vl_backend: String,
    pub vl_preprocessing: String,
    pub visual_backend: String,
    pub visual_preprocessing: String,
}

impl Fingerprint {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("fingerprint serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.mask_ratio, 0.9);
        assert_eq!(c.steps, 20);
        assert_eq!((c.alpha, c.beta), (2.0, 1.0));
        assert_eq!(c.epsilon, 1e-6);
        assert_eq!(c.mode, MaskMode::ClassWise);
        assert_eq!(c.inpaint_template.pattern(), "{label}");
        assert_eq!(c.scoring_template.pattern(), "a photo of a {label}");
        assert_eq!(c.mcm_temperature, 0.01);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = [
            RunConfig {
                mask_ratio: 0.0,
                ..RunConfig::default()
            },
            RunConfig {
                mask_ratio: 1.2,
                ..RunConfig::default()
            },
            RunConfig {
                steps: 0,
                ..RunConfig::default()
            },
            RunConfig {
                alpha: -1.0,
                ..RunConfig::default()
            },
            RunConfig {
                beta: f64::NAN,
                ..RunConfig::default()
            },
            RunConfig {
                min_confidence: Some(2.0),
                ..RunConfig::default()
            },
        ];
        for c in bad {
            assert!(
                matches!(c.validate(), Err(PipelineError::Config(_))),
                "{c:?}"
            );
        }
    }

    #[test]
    fn selectors_parse() {
        assert_eq!(
            "mock".parse::<BackendSelector>().unwrap(),
            BackendSelector::Mock
        );
        assert_eq!(
            "adapter:python3 sd.py --fp16"
                .parse::<BackendSelector>()
                .unwrap(),
            BackendSelector::Adapter("python3 sd.py --fp16".into())
        );
        assert!("adapter:".parse::<BackendSelector>().is_err());
        assert!("gpu".parse::<BackendSelector>().is_err());
    }

    #[test]
    fn resolution_parses() {
        assert_eq!(
            "512x384".parse::<Resolution>().unwrap(),
            Resolution {
                width: 512,
                height: 384
            }
        );
        assert!("512".parse::<Resolution>().is_err());
        assert!("0x5".parse::<Resolution>().is_err());
    }

    #[test]
    fn toml_and_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(
            &toml_path,
            "manifest = \"m.jsonl\"\nmode = \"object-wise\"\nsteps = 5\nresolution = \"256x256\"\nvl_backend = \"adapter:clip-server\"\n",
        )
        .unwrap();
        let c = RunConfig::from_file(&toml_path).unwrap();
        assert_eq!(c.mode, MaskMode::ObjectWise);
        assert_eq!(c.steps, 5);
        assert_eq!(
            c.resolution,
            Some(Resolution {
                width: 256,
                height: 256
            })
        );
        assert_eq!(c.vl_backend, BackendSelector::Adapter("clip-server".into()));
        assert_eq!(c.mask_ratio, 0.9);

        let json_path = dir.path().join("run.json");
        std::fs::write(
            &json_path,
            r#"{"alpha": 1.0, "inpaint_template": "no slot"}"#,
        )
        .unwrap();
        assert!(matches!(
            RunConfig::from_file(&json_path),
            Err(PipelineError::Config(_))
        ));
        std::fs::write(&json_path, r#"{"alpah": 1.0}"#).unwrap();
        assert!(RunConfig::from_file(&json_path).is_err());
    }
}
