//! Domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `ent + con + neu = 1` for a stored triple.
pub const TRIPLE_SUM_TOLERANCE: f64 = 1e-3;

/// Prompt sent to the vision-language backend for every fact.
pub const DEFAULT_PROMPT: &str = "Provide a short, one-sentence descriptive fact about this image.";

/// Entailment, contradiction and neutral probabilities for one ordered fact pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliTriple {
    pub ent: f64,
    pub con: f64,
    pub neu: f64,
}

impl NliTriple {
    pub fn new(ent: f64, con: f64, neu: f64) -> Result<Self> {
        let triple = Self { ent, con, neu };
        triple.validate()?;
        Ok(triple)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ent", self.ent), ("con", self.con), ("neu", self.neu)] {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} score is not finite: {v}"
                )));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "{name} score {v} outside [0, 1]"
                )));
            }
        }
        let sum = self.ent + self.con + self.neu;
        if (sum - 1.0).abs() > TRIPLE_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "triple sums to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Weights of the linear combination applied to an [`NliTriple`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_ent: f64,
    pub w_con: f64,
    pub w_neu: f64,
}

impl ScoreWeights {
    pub const fn new(w_ent: f64, w_con: f64, w_neu: f64) -> Self {
        Self {
            w_ent,
            w_con,
            w_neu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.w_ent, self.w_con, self.w_neu]
            .iter()
            .all(|w| w.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("non-finite weights {self}")))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.w_ent * factor,
            self.w_con * factor,
            self.w_neu * factor,
        )
    }

    /// Canonical textual form, used in score keys and config digests.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self::new(1.75, -2.0, 0.0)
    }
}

impl fmt::Display for ScoreWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ent={},con={},neu={}",
            self.w_ent, self.w_con, self.w_neu
        )
    }
}

impl std::ops::Add for ScoreWeights {
    type Output = ScoreWeights;

    fn add(self, rhs: Self) -> Self {
        Self::new(
            self.w_ent + rhs.w_ent,
            self.w_con + rhs.w_con,
            self.w_neu + rhs.w_neu,
        )
    }
}

/// Parameters of the diverse beam search request used to produce facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub prompt: String,
    pub num_facts: usize,
    pub num_beams: usize,
    pub num_beam_groups: usize,
    pub diversity_penalty: f64,
}

impl GenerationParams {
    /// Default params with `num_facts`, beams and beam groups all set to `n`.
    pub fn with_num_facts(n: usize) -> Self {
        Self {
            num_facts: n,
            num_beams: n,
            num_beam_groups: n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::InvalidConfig("generation prompt is empty".into()));
        }
        if self.num_facts < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_facts must be at least 2, got {}",
                self.num_facts
            )));
        }
        if self.num_beams == 0 || self.num_beam_groups == 0 {
            return Err(Error::InvalidConfig(
                "num_beams and num_beam_groups must be positive".into(),
            ));
        }
        if !self.num_beams.is_multiple_of(self.num_beam_groups) {
            return Err(Error::InvalidConfig(format!(
                "num_beams ({}) must be divisible by num_beam_groups ({})",
                self.num_beams, self.num_beam_groups
            )));
        }
        if !(self.diversity_penalty.is_finite() && self.diversity_penalty > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "diversity_penalty must be positive, got {}",
                self.diversity_penalty
            )));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            prompt: DEFAULT_PROMPT.to_string(),
            num_facts: 5,
            num_beams: 5,
            num_beam_groups: 5,
            diversity_penalty: 1.0,
        }
    }
}

/// How the backend actually produced the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    #[default]
    DiverseBeam,
    SamplingFallback,
}

/// The atomic facts generated for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSet {
    pub image_id: String,
    pub facts: Vec<String>,
    pub gen_params: GenerationParams,
    pub model_id: String,
    #[serde(default)]
    pub generation_mode: GenerationMode,
}

impl FactSet {
    pub fn new(
        image_id: impl Into<String>,
        facts: Vec<String>,
        gen_params: GenerationParams,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        let set = Self {
            image_id: image_id.into(),
            facts,
            gen_params,
            model_id: model_id.into(),
            generation_mode: GenerationMode::DiverseBeam,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.facts.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "fact set for `{}` has {} facts, need at least 2",
                self.image_id,
                self.facts.len()
            )));
        }
        if let Some(i) = self.facts.iter().position(|f| f.trim().is_empty()) {
            return Err(Error::InvalidInput(format!(
                "fact {i} for `{}` is blank",
                self.image_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Scores for ordered fact pairs `(premise, hypothesis)`, diagonal excluded.
///
/// A matrix may be under construction and therefore incomplete; scoring
/// code checks completeness and reports the first missing pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MatrixWire", try_from = "MatrixWire")]
pub struct NliMatrix {
    n: usize,
    entries: BTreeMap<(usize, usize), NliTriple>,
    nli_model_id: String,
}

impl NliMatrix {
    pub fn new(n: usize, nli_model_id: impl Into<String>) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
            nli_model_id: nli_model_id.into(),
        }
    }

    /// Builds a complete matrix from `f(premise, hypothesis)` over every ordered pair.
    pub fn from_fn(
        n: usize,
        nli_model_id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> NliTriple,
    ) -> Result<Self> {
        let mut matrix = Self::new(n, nli_model_id);
        for (i, j) in ordered_pairs(n) {
            matrix.insert(i, j, f(i, j))?;
        }
        Ok(matrix)
    }

    pub fn insert(&mut self, premise: usize, hypothesis: usize, triple: NliTriple) -> Result<()> {
        if premise == hypothesis {
            return Err(Error::InvalidInput(format!(
                "diagonal entry ({premise}, {premise})"
            )));
        }
        if premise >= self.n || hypothesis >= self.n {
            return Err(Error::InvalidInput(format!(
                "entry ({premise}, {hypothesis}) out of range for n = {}",
                self.n
            )));
        }
        triple.validate()?;
        self.entries.insert((premise, hypothesis), triple);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nli_model_id(&self) -> &str {
        &self.nli_model_id
    }

    pub fn get(&self, premise: usize, hypothesis: usize) -> Option<&NliTriple> {
        self.entries.get(&(premise, hypothesis))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.n * self.n.saturating_sub(1)
    }

    /// First ordered pair without an entry, in row-major order.
    pub fn first_missing(&self) -> Option<(usize, usize)> {
        ordered_pairs(self.n).find(|k| !self.entries.contains_key(k))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &NliTriple)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

/// Every ordered pair `(i, j)` with `i != j` over `0..n`, row-major.
pub fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    n: usize,
    nli_model_id: String,
    entries: Vec<MatrixEntryWire>,
}

#[derive(Serialize, Deserialize)]
struct MatrixEntryWire {
    premise: usize,
    hypothesis: usize,
    #[serde(flatten)]
    triple: NliTriple,
}

impl From<NliMatrix> for MatrixWire {
    fn from(m: NliMatrix) -> Self {
        Self {
            n: m.n,
            nli_model_id: m.nli_model_id,
            entries: m
                .entries
                .into_iter()
                .map(|((premise, hypothesis), triple)| MatrixEntryWire {
                    premise,
                    hypothesis,
                    triple,
                })
                .collect(),
        }
    }
}

impl TryFrom<MatrixWire> for NliMatrix {
    type Error = Error;

    fn try_from(w: MatrixWire) -> Result<Self> {
        let mut m = NliMatrix::new(w.n, w.nli_model_id);
        for e in w.entries {
            if m.get(e.premise, e.hypothesis).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate entry ({}, {})",
                    e.premise, e.hypothesis
                )));
            }
            m.insert(e.premise, e.hypothesis, e.triple)?;
        }
        Ok(m)
    }
}

/// Reduction applied to the symmetric pair sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Min,
    Absmax,
    Clust,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Min, Method::Absmax, Method::Clust];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Min => "min",
            Method::Absmax => "absmax",
            Method::Clust => "clust",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min" => Ok(Method::Min),
            "absmax" => Ok(Method::Absmax),
            "clust" => Ok(Method::Clust),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}`; valid methods are min, absmax, clust"
            ))),
        }
    }
}

/// Final realism score of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealityScore {
    pub image_id: String,
    pub value: f64,
    pub method: Method,
    pub weights: ScoreWeights,
    /// One symmetric sum per unordered fact pair, `i < j` in row-major order.
    pub s_nli_values: Vec<f64>,
}

impl RealityScore {
    /// Key under which this score is stored in a run record.
    pub fn key(&self) -> String {
        score_key(self.method, &self.weights)
    }
}

pub fn score_key(method: Method, weights: &ScoreWeights) -> String {
    format!("{method}@{weights}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triple_rejects_out_of_range_and_bad_sum() {
        assert!(NliTriple::new(0.5, 0.3, 0.2).is_ok());
        assert!(NliTriple::new(0.5, 0.3, 0.2005).is_ok());
        assert!(NliTriple::new(1.2, -0.2, 0.0).is_err());
        assert!(NliTriple::new(0.5, 0.5, 0.5).is_err());
        assert!(NliTriple::new(f64::NAN, 0.5, 0.5).is_err());
    }

    #[test]
    fn default_params_and_weights() {
        let p = GenerationParams::default();
        assert_eq!((p.num_facts, p.num_beams, p.num_beam_groups), (5, 5, 5));
        assert_eq!(p.diversity_penalty, 1.0);
        assert_eq!(p.prompt, DEFAULT_PROMPT);
        p.validate().unwrap();
        assert_eq!(ScoreWeights::default(), ScoreWeights::new(1.75, -2.0, 0.0));
        assert_eq!(ScoreWeights::default().key(), "ent=1.75,con=-2,neu=0");
    }

    #[test]
    fn params_validation() {
        let d = GenerationParams::default;
        for p in [
            GenerationParams {
                diversity_penalty: 0.0,
                ..d()
            },
            GenerationParams {
                num_facts: 1,
                ..d()
            },
            GenerationParams {
                num_beams: 6,
                ..d()
            },
        ] {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn fact_set_requires_two_nonblank_facts() {
        let p = GenerationParams::default();
        assert!(FactSet::new("a", vec!["one".into()], p.clone(), "m").is_err());
        assert!(FactSet::new("a", vec!["one".into(), "  \t".into()], p.clone(), "m").is_err());
        assert!(FactSet::new("a", vec!["one".into(), "one".into()], p, "m").is_ok());
    }

    #[test]
    fn matrix_rejects_diagonal_and_out_of_range() {
        let t = NliTriple::new(1.0, 0.0, 0.0).unwrap();
        let mut m = NliMatrix::new(3, "nli");
        assert!(m.insert(1, 1, t).is_err());
        assert!(m.insert(0, 3, t).is_err());
        m.insert(0, 1, t).unwrap();
        assert!(!m.is_complete());
        assert_eq!(m.first_missing(), Some((0, 2)));
    }

    #[test]
    fn matrix_serde_round_trip_and_validation() {
        let m = NliMatrix::from_fn(3, "nli", |i, j| {
            let e = (i * 3 + j) as f64 / 10.0;
            NliTriple::new(e, 1.0 - e, 0.0).unwrap()
        })
        .unwrap();
        assert_eq!(m.len(), 6);
        let json = serde_json::to_string(&m).unwrap();
        let back: NliMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);

        let bad = r#"{"n":2,"nli_model_id":"x","entries":[{"premise":0,"hypothesis":0,"ent":1.0,"con":0.0,"neu":0.0}]}"#;
        assert!(serde_json::from_str::<NliMatrix>(bad).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("CLUST".parse::<Method>().unwrap(), Method::Clust);
        let err = "median".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("min, absmax, clust"), "{err}");
    }

    #[test]
    fn ordered_pair_count() {
        assert_eq!(ordered_pairs(5).count(), 20);
        assert_eq!(ordered_pairs(2).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
        assert_eq!(ordered_pairs(1).count(), 0);
    }
}
