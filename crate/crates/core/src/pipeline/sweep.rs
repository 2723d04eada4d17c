use std::fmt;
use std::str::FromStr;

use crate::masking::MaskMode;

use super::config::{Resolution, RunConfig};
use super::run::{load_config_manifest, run_with, Backends, RunResult};
use super::PipelineError;
use crate::detections_io::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Steps,
    MaskRatio,
    Resolution,
    Mode,
    /// Values written `ALPHA:BETA`.
    AlphaBeta,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Steps,
        SweepAxis::MaskRatio,
        SweepAxis::Resolution,
        SweepAxis::Mode,
        SweepAxis::AlphaBeta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Steps => "steps",
            SweepAxis::MaskRatio => "mask_ratio",
            SweepAxis::Resolution => "resolution",
            SweepAxis::Mode => "mode",
            SweepAxis::AlphaBeta => "alpha_beta",
        }
    }

    /// `base` with this axis set to `value`, validated.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig, PipelineError> {
        let bad = |why: String| {
            PipelineError::Config(format!("{} value '{value}': {why}", self.as_str()))
        };
        let v = value.trim();
        let mut c = base.clone();
        match self {
            SweepAxis::Steps => c.steps = v.parse().map_err(|e| bad(format!("{e}")))?,
            SweepAxis::MaskRatio => c.mask_ratio = v.parse().map_err(|e| bad(format!("{e}")))?,
            SweepAxis::Resolution => c.resolution = Some(v.parse::<Resolution>().map_err(bad)?),
            SweepAxis::Mode => c.mode = v.parse::<MaskMode>().map_err(bad)?,
            SweepAxis::AlphaBeta => {
                let (a, b) = v
                    .split_once([':', '/'])
                    .ok_or_else(|| bad("expected ALPHA:BETA".into()))?;
                c.alpha = a.trim().parse().map_err(|e| bad(format!("{e}")))?;
                c.beta = b.trim().parse().map_err(|e| bad(format!("{e}")))?;
            }
        }
        c.validate().map_err(|e| bad(e.to_string()))?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('-', "_");
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| format!("unknown sweep axis '{s}' (expected steps, mask_ratio, resolution, mode or alpha_beta)"))
    }
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: String,
    /// A failed run keeps its message; other points are unaffected.
    pub result: Result<RunResult, String>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepOutcome {
    pub fn results(&self) -> impl Iterator<Item = &RunResult> {
        self.points.iter().filter_map(|p| p.result.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.result.is_err()).count()
    }
}

fn subdir_name(axis: SweepAxis, value: &str) -> String {
    let safe: String = value
        .trim()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{}={safe}", axis.as_str())
}

/// One run per value, all with `config.seed`, each writing into
/// `out_dir/<axis>=<value>/`. Every value is checked before anything runs.
pub fn sweep(
    config: &RunConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepOutcome, PipelineError> {
    config.validate()?;
    let manifest = load_config_manifest(config)?;
    let backends = Backends::from_config(config, &manifest.id_label_set)?;
    sweep_with(config, axis, values, &manifest, &backends)
}

pub fn sweep_with(
    config: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    manifest: &Manifest,
    backends: &Backends,
) -> Result<SweepOutcome, PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = axis.apply(config, v)?;
            c.out_dir = config.out_dir.join(subdir_name(axis, v));
            Ok(c)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let points = values
        .iter()
        .zip(configs)
        .map(|(v, c)| {
            log::info!("sweep {}={v}", axis.as_str());
            let result = run_with(&c, manifest, backends).map_err(|e| {
                log::error!("sweep {}={v} failed: {e}", axis.as_str());
                e.to_string()
            });
            SweepPoint {
                value: v.trim().to_string(),
                result,
            }
        })
        .collect();
    Ok(SweepOutcome { axis, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse() {
        assert_eq!(
            "mask-ratio".parse::<SweepAxis>().unwrap(),
            SweepAxis::MaskRatio
        );
        assert_eq!(
            "alpha_beta".parse::<SweepAxis>().unwrap(),
            SweepAxis::AlphaBeta
        );
        assert!("temperature".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn apply_sets_and_validates() {
        let base = RunConfig::default();
        assert_eq!(SweepAxis::Steps.apply(&base, "5").unwrap().steps, 5);
        assert!(SweepAxis::Steps.apply(&base, "0").is_err());
        assert!(SweepAxis::MaskRatio.apply(&base, "1.5").is_err());
        let c = SweepAxis::AlphaBeta.apply(&base, "1:0").unwrap();
        assert_eq!((c.alpha, c.beta), (1.0, 0.0));
        assert_eq!(
            SweepAxis::Mode.apply(&base, "object-wise").unwrap().mode,
            MaskMode::ObjectWise
        );
        assert_eq!(
            SweepAxis::Resolution
                .apply(&base, "256x128")
                .unwrap()
                .resolution,
            Some(Resolution {
                width: 256,
                height: 128
            })
        );
    }

    #[test]
    fn subdirs_are_path_safe() {
        assert_eq!(subdir_name(SweepAxis::AlphaBeta, "2:1"), "alpha_beta=2_1");
        assert_eq!(subdir_name(SweepAxis::MaskRatio, "0.75"), "mask_ratio=0.75");
    }
}
