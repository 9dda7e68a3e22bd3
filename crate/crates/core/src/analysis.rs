//! How often the scorer calls an image weird, given what its facts contain.
//!
//! Two phenomena are tracked per image: marker words the generator uses
//! when it perceives an image as synthetic, and human-annotated
//! hallucinations. The weird-prediction rate is reported conditioned on
//! each, and on both together.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PairRecord;
use crate::model::FactSet;

pub const DEFAULT_MARKERS: [&str; 3] = ["digital", "artistic", "rendering"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnalysisFlags {
    pub digital: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination: Option<bool>,
}

/// Case-insensitive marker matching on word prefixes, so "digital" also
/// matches "digitally". Multi-word markers match consecutive words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerMatcher {
    markers: Vec<Vec<String>>,
}

impl Default for MarkerMatcher {
    fn default() -> Self {
        Self::new(DEFAULT_MARKERS)
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl MarkerMatcher {
    pub fn new<I, S>(markers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            markers: markers
                .into_iter()
                .map(|m| words(m.as_ref()))
                .filter(|m| !m.is_empty())
                .collect(),
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        let tokens = words(text);
        self.markers.iter().any(|marker| {
            tokens.windows(marker.len()).any(|window| {
                window
                    .iter()
                    .zip(marker)
                    .all(|(token, part)| token.starts_with(part.as_str()))
            })
        })
    }

    pub fn detect(&self, facts: &FactSet) -> bool {
        facts.facts.iter().any(|f| self.matches(f))
    }
}

/// Marker detection with the default marker list.
pub fn detect_markers(facts: &FactSet) -> bool {
    MarkerMatcher::default().detect(facts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Weird,
    Real,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair_id: String,
    /// Prediction for the pair's real image.
    pub real: Prediction,
    /// Prediction for the pair's weird image.
    pub weird: Prediction,
}

/// The lower-scoring image of the pair is predicted weird; equal scores
/// leave both undecided.
pub fn predict_weird_in_pair(
    pair: &PairRecord,
    scores: &HashMap<String, f64>,
) -> Result<PairPrediction> {
    let lookup = |id: &str| {
        scores.get(id).copied().ok_or_else(|| Error::MissingScore {
            image_id: id.to_string(),
        })
    };
    let real = lookup(&pair.real_image_id)?;
    let weird = lookup(&pair.weird_image_id)?;
    let (r, w) = if real > weird {
        (Prediction::Real, Prediction::Weird)
    } else if real < weird {
        (Prediction::Weird, Prediction::Real)
    } else {
        (Prediction::Undecided, Prediction::Undecided)
    };
    Ok(PairPrediction {
        pair_id: pair.pair_id.clone(),
        real: r,
        weird: w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub image_id: String,
    pub prediction: Prediction,
    pub flags: AnalysisFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    pub probability: f64,
    /// Records meeting the condition that were predicted weird.
    pub weird: usize,
    /// Records meeting the condition.
    pub support: usize,
}

impl Conditional {
    fn from_counts(weird: usize, support: usize) -> Option<Self> {
        (support > 0).then(|| Self {
            probability: weird as f64 / support as f64,
            weird,
            support,
        })
    }
}

/// Conditionals with zero support are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_weird_given_digital: Option<Conditional>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_weird_given_hallucination: Option<Conditional>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_weird_given_both: Option<Conditional>,
    pub records: usize,
    pub undecided: usize,
}

pub fn conditional_report(records: &[AnalysisRecord]) -> ConditionalReport {
    let decided: Vec<&AnalysisRecord> = records
        .iter()
        .filter(|r| r.prediction != Prediction::Undecided)
        .collect();
    let count = |cond: &dyn Fn(&AnalysisFlags) -> bool| {
        let support: Vec<_> = decided.iter().filter(|r| cond(&r.flags)).collect();
        let weird = support
            .iter()
            .filter(|r| r.prediction == Prediction::Weird)
            .count();
        Conditional::from_counts(weird, support.len())
    };
    ConditionalReport {
        p_weird_given_digital: count(&|f| f.digital),
        p_weird_given_hallucination: count(&|f| f.hallucination == Some(true)),
        p_weird_given_both: count(&|f| f.digital && f.hallucination == Some(true)),
        records: records.len(),
        undecided: records.len() - decided.len(),
    }
}

impl ConditionalReport {
    pub fn markdown(&self) -> String {
        let mut out = String::from("| measure | value | support |\n|---|---|---|\n");
        let rows = [
            ("P(weird | digital)", &self.p_weird_given_digital),
            (
                "P(weird | hallucination)",
                &self.p_weird_given_hallucination,
            ),
            (
                "P(weird | hallucination & digital)",
                &self.p_weird_given_both,
            ),
        ];
        for (name, cond) in rows {
            match cond {
                Some(c) => out.push_str(&format!(
                    "| {name} | {:.2} | {}/{} |\n",
                    c.probability, c.weird, c.support
                )),
                None => out.push_str(&format!("| {name} | n/a | 0 |\n")),
            }
        }
        out.push_str(&format!(
            "\n{} records, {} undecided (excluded)\n",
            self.records, self.undecided
        ));
        out
    }
}

#[derive(Deserialize)]
struct AnnotationLine {
    image_id: String,
    hallucination: bool,
}

/// Reads `{"image_id", "hallucination"}` lines; later lines win.
pub fn load_annotations(path: &Path) -> Result<HashMap<String, bool>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = HashMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationLine = serde_json::from_str(line).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", k + 1),
        })?;
        out.insert(a.image_id, a.hallucination);
    }
    Ok(out)
}

/// One analysis record per image of every pair, in pair order.
pub fn analysis_records(
    pairs: &[PairRecord],
    scores: &HashMap<String, f64>,
    flags: &HashMap<String, AnalysisFlags>,
) -> Result<Vec<AnalysisRecord>> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for pair in pairs {
        let prediction = predict_weird_in_pair(pair, scores)?;
        for (id, p) in [
            (&pair.real_image_id, prediction.real),
            (&pair.weird_image_id, prediction.weird),
        ] {
            out.push(AnalysisRecord {
                image_id: id.clone(),
                prediction: p,
                flags: flags.get(id).copied().unwrap_or_default(),
            });
        }
    }
    Ok(out)
}
