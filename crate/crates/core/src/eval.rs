//! Paired-accuracy evaluation with k-fold cross-validated weight tuning.
//!
//! A pair is scored correct when the real image's score is strictly above
//! the weird image's. Folds partition pairs, never single images, so both
//! halves of a pair always land on the same side of a split.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::symmetric_sums;
use crate::analysis::AnalysisFlags;
use crate::error::{Error, Result};
use crate::model::{Method, NliMatrix, ScoreWeights};
use crate::pipeline::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub real_image_id: String,
    pub weird_image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnalysisFlags>,
}

impl PairRecord {
    pub fn new(
        pair_id: impl Into<String>,
        real_image_id: impl Into<String>,
        weird_image_id: impl Into<String>,
    ) -> Self {
        Self {
            pair_id: pair_id.into(),
            real_image_id: real_image_id.into(),
            weird_image_id: weird_image_id.into(),
            annotations: None,
        }
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Input {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", k + 1),
            })
        })
        .collect()
}

/// Builds pairs from labeled images sharing a `pair_id`, in order of first
/// appearance. Images without a pair id are ignored.
pub fn pairs_from_labels<'a, I>(images: I) -> Result<Vec<PairRecord>>
where
    I: IntoIterator<Item = (&'a str, Option<&'a str>, Option<Label>)>,
{
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (Option<&str>, Option<&str>)> = HashMap::new();
    for (image_id, pair_id, label) in images {
        let Some(pair_id) = pair_id else { continue };
        let slot = groups.entry(pair_id).or_insert_with(|| {
            order.push(pair_id);
            (None, None)
        });
        let target = match label {
            Some(Label::Real) => &mut slot.0,
            Some(Label::Weird) => &mut slot.1,
            None => {
                return Err(Error::EvalInput(format!(
                    "image `{image_id}` in pair `{pair_id}` has no label"
                )))
            }
        };
        if target.replace(image_id).is_some() {
            return Err(Error::EvalInput(format!(
                "pair `{pair_id}` has more than one {label:?} image"
            )));
        }
    }
    order
        .into_iter()
        .map(|pair_id| match groups[pair_id] {
            (Some(real), Some(weird)) => Ok(PairRecord::new(pair_id, real, weird)),
            _ => Err(Error::EvalInput(format!(
                "pair `{pair_id}` needs one real and one weird image"
            ))),
        })
        .collect()
}

/// Checks pair ids are unique, halves are distinct, and every image is known.
pub fn validate_pairs(pairs: &[PairRecord], is_known: impl Fn(&str) -> bool) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for pair in pairs {
        if !seen.insert(pair.pair_id.as_str()) {
            return Err(Error::EvalInput(format!(
                "duplicate pair_id `{}`",
                pair.pair_id
            )));
        }
        if pair.real_image_id == pair.weird_image_id {
            return Err(Error::EvalInput(format!(
                "pair `{}` uses image `{}` twice",
                pair.pair_id, pair.real_image_id
            )));
        }
        for id in [&pair.real_image_id, &pair.weird_image_id] {
            if !is_known(id) {
                return Err(Error::EvalInput(format!(
                    "pair `{}` references unknown image_id `{id}`",
                    pair.pair_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    #[default]
    CountAsIncorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub ties: usize,
    pub total: usize,
}

pub fn pairwise_accuracy(
    pairs: &[PairRecord],
    scores: &HashMap<String, f64>,
    tie_policy: TiePolicy,
) -> Result<Accuracy> {
    if pairs.is_empty() {
        return Err(Error::EvalInput("no pairs to evaluate".into()));
    }
    let lookup = |id: &str| {
        scores.get(id).copied().ok_or_else(|| Error::MissingScore {
            image_id: id.to_string(),
        })
    };
    let (mut correct, mut ties) = (0, 0);
    for pair in pairs {
        let real = lookup(&pair.real_image_id)?;
        let weird = lookup(&pair.weird_image_id)?;
        if real > weird {
            correct += 1;
        } else if real == weird {
            ties += 1;
            match tie_policy {
                TiePolicy::CountAsIncorrect => {}
            }
        }
    }
    Ok(Accuracy {
        accuracy: correct as f64 / pairs.len() as f64,
        correct,
        ties,
        total: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

/// Shuffles pairs with a seeded ChaCha8 generator and cuts them into
/// `folds` test sets whose sizes differ by at most one.
pub fn kfold_split(pairs: &[PairRecord], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if folds > pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "{folds} folds requested for {} pairs",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (pairs.len() / folds, pairs.len() % folds);
    let mut start = 0;
    let mut out = Vec::with_capacity(folds);
    for index in 0..folds {
        let size = base + usize::from(index < extra);
        let test_idx = &order[start..start + size];
        let train = order[..start]
            .iter()
            .chain(&order[start + size..])
            .map(|&k| pairs[k].clone())
            .collect();
        let test = test_idx.iter().map(|&k| pairs[k].clone()).collect();
        out.push(Fold { index, train, test });
        start += size;
    }
    Ok(out)
}

/// Anything that can produce the pair sums of an image for given weights.
pub trait SNliSource: Sync {
    fn nli_model_id(&self) -> &str;

    fn contains(&self, image_id: &str) -> bool;

    fn s_nli(&self, image_id: &str, weights: &ScoreWeights) -> Result<Vec<f64>>;
}

/// In-memory source over already-built matrices.
#[derive(Debug, Clone, Default)]
pub struct MatrixSource {
    nli_model_id: String,
    matrices: HashMap<String, NliMatrix>,
}

impl MatrixSource {
    pub fn new(nli_model_id: impl Into<String>) -> Self {
        Self {
            nli_model_id: nli_model_id.into(),
            matrices: HashMap::new(),
        }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, matrix: NliMatrix) {
        self.matrices.insert(image_id.into(), matrix);
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

impl SNliSource for MatrixSource {
    fn nli_model_id(&self) -> &str {
        &self.nli_model_id
    }

    fn contains(&self, image_id: &str) -> bool {
        self.matrices.contains_key(image_id)
    }

    fn s_nli(&self, image_id: &str, weights: &ScoreWeights) -> Result<Vec<f64>> {
        let matrix = self
            .matrices
            .get(image_id)
            .ok_or_else(|| Error::MissingScore {
                image_id: image_id.to_string(),
            })?;
        symmetric_sums(matrix, weights)
    }
}

/// Scores both images of every pair.
pub fn score_pairs(
    pairs: &[PairRecord],
    source: &dyn SNliSource,
    method: Method,
    weights: &ScoreWeights,
) -> Result<HashMap<String, f64>> {
    let mut scores = HashMap::with_capacity(pairs.len() * 2);
    for pair in pairs {
        for id in [&pair.real_image_id, &pair.weird_image_id] {
            if !scores.contains_key(id.as_str()) {
                let value = method.reduce(&source.s_nli(id, weights)?)?;
                scores.insert(id.clone(), value);
            }
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub weights: ScoreWeights,
    pub train_accuracy: Accuracy,
}

/// Exhaustive search over `grid_ent × grid_con` with `w_neu = 0`.
///
/// Equal accuracy is broken towards larger `w_ent`, then larger `w_con`.
pub fn grid_search_weights(
    train_pairs: &[PairRecord],
    source: &dyn SNliSource,
    method: Method,
    grid_ent: &[f64],
    grid_con: &[f64],
    tie_policy: TiePolicy,
) -> Result<GridResult> {
    check_grid("grid_ent", grid_ent)?;
    check_grid("grid_con", grid_con)?;
    let cells: Vec<ScoreWeights> = grid_ent
        .iter()
        .flat_map(|&e| grid_con.iter().map(move |&c| ScoreWeights::new(e, c, 0.0)))
        .collect();
    let evaluated: Vec<Result<Accuracy>> = cells
        .par_iter()
        .map(|w| {
            let scores = score_pairs(train_pairs, source, method, w)?;
            pairwise_accuracy(train_pairs, &scores, tie_policy)
        })
        .collect();

    let mut best: Option<GridResult> = None;
    for (weights, accuracy) in cells.into_iter().zip(evaluated) {
        let candidate = GridResult {
            weights,
            train_accuracy: accuracy?,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let key =
                    |r: &GridResult| (r.train_accuracy.correct, r.weights.w_ent, r.weights.w_con);
                let (c, b) = (key(&candidate), key(b));
                c.0 > b.0 || (c.0 == b.0 && (c.1 > b.1 || (c.1 == b.1 && c.2 > b.2)))
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig(format!("{name} is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "{name} has non-finite values"
        )));
    }
    Ok(())
}

/// `0, 0.25, …, 3`
pub fn default_grid_ent() -> Vec<f64> {
    (0..=12).map(|k| k as f64 * 0.25).collect()
}

/// `-3, -2.75, …, 0`
pub fn default_grid_con() -> Vec<f64> {
    (-12..=0).map(|k| k as f64 * 0.25).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub folds: usize,
    pub seed: u64,
    pub grid_ent: Vec<f64>,
    pub grid_con: Vec<f64>,
    pub methods: Vec<Method>,
    pub tie_policy: TiePolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            seed: 0,
            grid_ent: default_grid_ent(),
            grid_con: default_grid_con(),
            methods: Method::ALL.to_vec(),
            tie_policy: TiePolicy::CountAsIncorrect,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        check_grid("grid_ent", &self.grid_ent)?;
        check_grid("grid_con", &self.grid_con)?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no evaluation methods".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub best_weights: ScoreWeights,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_correct: usize,
    pub test_ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub test_ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nli_model_id: String,
    pub num_pairs: usize,
    pub config: EvalConfig,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-fold detail followed by the model × method summary.
    pub fn markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "## {} ({} pairs, {} folds, seed {})\n\n",
            self.nli_model_id, self.num_pairs, self.config.folds, self.config.seed
        ));
        out.push_str("| method | fold | w_ent | w_con | train acc | test acc | ties |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for m in &self.methods {
            for f in &m.folds {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {:.2} | {:.2} | {} |\n",
                    m.method,
                    f.fold,
                    f.best_weights.w_ent,
                    f.best_weights.w_con,
                    100.0 * f.train_accuracy,
                    100.0 * f.test_accuracy,
                    f.test_ties
                ));
            }
        }
        out.push('\n');
        out.push_str(&comparison_markdown(std::slice::from_ref(self)));
        out
    }
}

/// Mean accuracy (percent) with NLI models as rows and methods as columns.
pub fn comparison_markdown(reports: &[EvalReport]) -> String {
    let mut out = String::from("| model |");
    for m in Method::ALL {
        out.push_str(&format!(" {m} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(Method::ALL.len()));
    out.push('\n');
    for report in reports {
        out.push_str(&format!("| {} |", report.nli_model_id));
        for m in Method::ALL {
            match report.method(m) {
                Some(r) => out.push_str(&format!(" {:.2} |", 100.0 * r.mean_accuracy)),
                None => out.push_str(" – |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn cross_validate(
    pairs: &[PairRecord],
    config: &EvalConfig,
    source: &dyn SNliSource,
) -> Result<EvalReport> {
    config.validate()?;
    validate_pairs(pairs, |id| source.contains(id))?;
    let folds = kfold_split(pairs, config.folds, config.seed)?;

    let mut methods = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let mut fold_reports = Vec::with_capacity(folds.len());
        for fold in &folds {
            let best = grid_search_weights(
                &fold.train,
                source,
                method,
                &config.grid_ent,
                &config.grid_con,
                config.tie_policy,
            )?;
            let scores = score_pairs(&fold.test, source, method, &best.weights)?;
            let test = pairwise_accuracy(&fold.test, &scores, config.tie_policy)?;
            fold_reports.push(FoldReport {
                fold: fold.index,
                train_pairs: fold.train.len(),
                test_pairs: fold.test.len(),
                best_weights: best.weights,
                train_accuracy: best.train_accuracy.accuracy,
                test_accuracy: test.accuracy,
                test_correct: test.correct,
                test_ties: test.ties,
            });
        }
        let mean_accuracy =
            fold_reports.iter().map(|f| f.test_accuracy).sum::<f64>() / fold_reports.len() as f64;
        methods.push(MethodReport {
            method,
            test_ties: fold_reports.iter().map(|f| f.test_ties).sum(),
            folds: fold_reports,
            mean_accuracy,
        });
    }
    Ok(EvalReport {
        nli_model_id: source.nli_model_id().to_string(),
        num_pairs: pairs.len(),
        config: config.clone(),
        methods,
    })
}
