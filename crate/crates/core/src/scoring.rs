//! Similarity triplet and the triplet OOD score.
//!
//! For a detection with predicted label `y`, original crop `ori` and
//! inpainted crop `inp`:
//!
//! ```text
//! s_ori_y   = cos(f_v(ori), f_t(y))
//! s_inp_y   = cos(f_v(inp), f_t(y))
//! s_ori_inp = cos(f_i(ori), f_i(inp))
//!
//! score = c(s_ori_y)^alpha * c(s_ori_inp)^beta / c(s_inp_y),  c(x) = clamp(x, eps, 1)
//! ```
//!
//! Higher scores are more ID-like. Scores are raw; thresholds belong to
//! [`crate::evaluation`].

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::detections_io::GtFlag;
use crate::embeddings::{
    cosine, embed_image_visual, embed_image_vl, embed_text, EmbeddingError, EmbeddingVector,
    EncoderSet,
};
use crate::masking::MaskMode;
use crate::prompting::PromptTemplate;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MCM_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTriplet {
    pub s_ori_y: f64,
    pub s_inp_y: f64,
    pub s_ori_inp: f64,
}

impl SimilarityTriplet {
    pub fn new(s_ori_y: f64, s_inp_y: f64, s_ori_inp: f64) -> Self {
        Self {
            s_ori_y,
            s_inp_y,
            s_ori_inp,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.s_ori_y.is_finite() && self.s_inp_y.is_finite() && self.s_ori_inp.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ScoreParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(format!("epsilon must be in (0, 1], got {}", self.epsilon));
        }
        Ok(())
    }

    fn clamp(&self, x: f64) -> f64 {
        if x.is_nan() {
            return self.epsilon;
        }
        x.clamp(self.epsilon, 1.0)
    }
}

/// Triplet OOD score. Always strictly positive.
pub fn triplet_score(t: &SimilarityTriplet, p: &ScoreParams) -> f64 {
    ablated_score(t, p, Drop::None)
}

/// Which triplet component an ablation removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drop {
    None,
    SOriY,
    SInpY,
    SOriInp,
}

impl Drop {
    pub const ALL: [Drop; 4] = [Drop::None, Drop::SOriY, Drop::SInpY, Drop::SOriInp];

    pub fn as_str(self) -> &'static str {
        match self {
            Drop::None => "none",
            Drop::SOriY => "s_ori_y",
            Drop::SInpY => "s_inp_y",
            Drop::SOriInp => "s_ori_inp",
        }
    }
}

impl fmt::Display for Drop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Drop {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Drop::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown triplet component '{s}'"))
    }
}

/// Triplet score with one component removed: a dropped numerator factor
/// becomes 1, a dropped `s_inp_y` removes the divisor.
pub fn ablated_score(t: &SimilarityTriplet, p: &ScoreParams, drop: Drop) -> f64 {
    let ori_y = if drop == Drop::SOriY {
        1.0
    } else {
        p.clamp(t.s_ori_y).powf(p.alpha)
    };
    let ori_inp = if drop == Drop::SOriInp {
        1.0
    } else {
        p.clamp(t.s_ori_inp).powf(p.beta)
    };
    let numerator = ori_y * ori_inp;
    if drop == Drop::SInpY {
        numerator
    } else {
        numerator / p.clamp(t.s_inp_y)
    }
}

/// Similarities from precomputed embeddings.
pub fn triplet_from_embeddings(
    ori_vl: &EmbeddingVector,
    inp_vl: &EmbeddingVector,
    label_text: &EmbeddingVector,
    ori_visual: &EmbeddingVector,
    inp_visual: &EmbeddingVector,
) -> Result<SimilarityTriplet, EmbeddingError> {
    Ok(SimilarityTriplet {
        s_ori_y: cosine(ori_vl, label_text)?,
        s_inp_y: cosine(inp_vl, label_text)?,
        s_ori_inp: cosine(ori_visual, inp_visual)?,
    })
}

pub fn triplet_similarities(
    ori: &RgbImage,
    inp: &RgbImage,
    label: &str,
    encoders: &EncoderSet,
    template: &PromptTemplate,
) -> Result<SimilarityTriplet, EmbeddingError> {
    let text = embed_text(encoders, label, template)?;
    triplet_from_embeddings(
        &embed_image_vl(encoders, ori)?,
        &embed_image_vl(encoders, inp)?,
        &text,
        &embed_image_visual(encoders, ori)?,
        &embed_image_visual(encoders, inp)?,
    )
}

/// Maximum softmax probability over `cosine / temperature` logits.
pub fn mcm_from_cosines(cosines: &[f64], temperature: f64) -> f64 {
    if cosines.is_empty() {
        return f64::NAN;
    }
    let logits: Vec<f64> = cosines.iter().map(|c| c / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    1.0 / denom
}

/// Maximum concept matching baseline on a single crop: the largest softmax
/// probability over the crop's similarity to each ID label.
pub fn mcm_score(
    crop: &RgbImage,
    id_labels: &[String],
    temperature: f64,
    encoders: &EncoderSet,
    template: &PromptTemplate,
) -> Result<f64, EmbeddingError> {
    let texts = id_labels
        .iter()
        .map(|l| embed_text(encoders, l, template))
        .collect::<Result<Vec<_>, _>>()?;
    let image = embed_image_vl(encoders, crop)?;
    mcm_from_embeddings(&image, &texts, temperature)
}

pub fn mcm_from_embeddings(
    image: &EmbeddingVector,
    id_label_vectors: &[EmbeddingVector],
    temperature: f64,
) -> Result<f64, EmbeddingError> {
    if id_label_vectors.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let cosines = id_label_vectors
        .iter()
        .map(|t| cosine(image, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mcm_from_cosines(&cosines, temperature))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredDetection {
    pub detection_id: String,
    pub label: String,
    pub gt_flag: GtFlag,
    pub triplet: SimilarityTriplet,
    pub score: f64,
    pub mode: MaskMode,
    pub fingerprint: String,
    pub seed: u64,
    /// MCM baseline on the original crop, when computed.
    pub mcm: Option<f64>,
}

/// One line of the per-detection score JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub s_ori_y: f64,
    pub s_inp_y: f64,
    pub s_ori_inp: f64,
    pub score: f64,
    pub gt: GtFlag,
}

impl From<&ScoredDetection> for ScoreRecord {
    fn from(s: &ScoredDetection) -> Self {
        Self {
            id: s.detection_id.clone(),
            s_ori_y: s.triplet.s_ori_y,
            s_inp_y: s.triplet.s_inp_y,
            s_ori_inp: s.triplet.s_ori_inp,
            score: s.score,
            gt: s.gt_flag,
        }
    }
}

impl ScoreRecord {
    pub fn triplet(&self) -> SimilarityTriplet {
        SimilarityTriplet::new(self.s_ori_y, self.s_inp_y, self.s_ori_inp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: SimilarityTriplet = SimilarityTriplet {
        s_ori_y: 0.3,
        s_inp_y: 0.25,
        s_ori_inp: 0.8,
    };

    #[test]
    fn unit_fixed_point() {
        let t = SimilarityTriplet::new(1.0, 1.0, 1.0);
        assert_eq!(triplet_score(&t, &ScoreParams::default()), 1.0);
    }

    #[test]
    fn worked_example() {
        // 0.3^2 * 0.8 / 0.25
        let s = triplet_score(&EXAMPLE, &ScoreParams::default());
        assert!((s - 0.288).abs() < 1e-12, "{s}");
    }

    #[test]
    fn cancellation_with_unit_exponents() {
        let t = SimilarityTriplet::new(0.42, 0.42, 0.7);
        let p = ScoreParams::new(1.0, 1.0);
        assert!((triplet_score(&t, &p) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ablations() {
        let p = ScoreParams::default();
        assert!((ablated_score(&EXAMPLE, &p, Drop::SInpY) - 0.072).abs() < 1e-12);
        assert!((ablated_score(&EXAMPLE, &p, Drop::SOriInp) - 0.36).abs() < 1e-12);
        assert!((ablated_score(&EXAMPLE, &p, Drop::SOriY) - 3.2).abs() < 1e-12);
        assert_eq!(
            ablated_score(&EXAMPLE, &p, Drop::None),
            triplet_score(&EXAMPLE, &p)
        );
    }

    #[test]
    fn negative_and_zero_cosines_are_clamped() {
        let p = ScoreParams::default();
        let s = triplet_score(&SimilarityTriplet::new(-0.5, 0.0, -1.0), &p);
        assert!(s > 0.0 && s.is_finite());
        // eps^2 * eps / eps
        assert!((s - 1e-12).abs() < 1e-24);
    }

    #[test]
    fn mcm_examples() {
        assert_eq!(mcm_from_cosines(&[0.37], 0.01), 1.0);
        assert_eq!(mcm_from_cosines(&[0.2, 0.2], 0.01), 0.5);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((mcm_from_cosines(&[0.4, 0.2], 0.1) - expected).abs() < 1e-12);
        assert!((expected - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn params_validation() {
        assert!(ScoreParams::default().validate().is_ok());
        assert!(ScoreParams::new(-1.0, 1.0).validate().is_err());
        let p = ScoreParams {
            epsilon: 0.0,
            ..ScoreParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn drop_parsing() {
        for d in Drop::ALL {
            assert_eq!(d.as_str().parse::<Drop>().unwrap(), d);
        }
    }

    fn arb_triplet() -> impl Strategy<Value = SimilarityTriplet> {
        (-1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0)
            .prop_map(|(a, b, c)| SimilarityTriplet::new(a, b, c))
    }

    proptest! {
        #[test]
        fn score_is_positive(t in arb_triplet(), a in 0.0f64..4.0, b in 0.0f64..4.0) {
            prop_assert!(triplet_score(&t, &ScoreParams::new(a, b)) > 0.0);
        }

        #[test]
        fn score_is_monotone(
            a in 0.05f64..0.9, b in 0.05f64..0.9, c in 0.05f64..0.9,
            alpha in 0.5f64..3.0, beta in 0.5f64..3.0, d in 0.01f64..0.09,
        ) {
            let p = ScoreParams::new(alpha, beta);
            let base = triplet_score(&SimilarityTriplet::new(a, b, c), &p);
            prop_assert!(triplet_score(&SimilarityTriplet::new(a + d, b, c), &p) > base);
            prop_assert!(triplet_score(&SimilarityTriplet::new(a, b, c + d), &p) > base);
            prop_assert!(triplet_score(&SimilarityTriplet::new(a, b + d, c), &p) < base);
        }

        #[test]
        fn ranking_is_stable_under_epsilon(ts in proptest::collection::vec(
            (0.01f64..=1.0, 0.01f64..=1.0, 0.01f64..=1.0), 2..30)
        ) {
            let rank = |eps: f64| {
                let p = ScoreParams { epsilon: eps, ..ScoreParams::default() };
                let scores: Vec<f64> = ts.iter()
                    .map(|&(a, b, c)| triplet_score(&SimilarityTriplet::new(a, b, c), &p))
                    .collect();
                let mut idx: Vec<usize> = (0..ts.len()).collect();
                idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
                idx
            };
            prop_assert_eq!(rank(1e-6), rank(1e-4));
        }
    }
}
