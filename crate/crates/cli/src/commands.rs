use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use realitycheck_core::analysis::{
    analysis_records, conditional_report, load_annotations, AnalysisFlags, AnalysisRecord,
    ConditionalReport, MarkerMatcher,
};
use realitycheck_core::eval::{
    cross_validate, load_pairs, pairs_from_labels, validate_pairs, MatrixSource, PairRecord,
};
use realitycheck_core::gateway::{
    connect_fact_backend, connect_nli_backend, FactBackend, NliBackend,
};
use realitycheck_core::model::score_key;
use realitycheck_core::pipeline::{
    load_manifest, load_run_records, Backends, BatchFailure, BatchOutcome, Cache, CacheMode,
    ImageRecord, Label, Pipeline, RunRecord, RunStore,
};
use realitycheck_core::{reality_check, Error, GenerationMode, Method, ScoreWeights};
use serde::Serialize;

use crate::config::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// Some images failed; outputs cover the rest.
    Partial,
}

fn fact_backend(settings: &Settings) -> Result<Arc<dyn FactBackend>> {
    let config = settings.lvlm.as_ref().ok_or_else(|| {
        anyhow!("no LVLM backend configured; pass --backend-lvlm-url or --replay-facts, or add an [lvlm] section to the config file")
    })?;
    Ok(connect_fact_backend(config)?)
}

fn nli_backend(settings: &Settings) -> Result<Arc<dyn NliBackend>> {
    let config = settings.nli.as_ref().ok_or_else(|| {
        anyhow!("no NLI backend configured; pass --backend-nli-url or --replay-nli, or add an [nli] section to the config file")
    })?;
    Ok(connect_nli_backend(config)?)
}

fn pipeline(settings: &Settings, backends: Backends, mode: CacheMode) -> Result<Pipeline> {
    let cache = Cache::open(&settings.cache_dir)?;
    for problem in cache.facts.problems().iter().chain(cache.nli.problems()) {
        log::warn!("skipped unreadable cache line: {problem}");
    }
    Ok(Pipeline::new(
        settings.pipeline_config(mode),
        backends,
        cache,
    )?)
}

fn is_cache_miss(error: &Error) -> bool {
    match error {
        Error::CacheMiss { .. } => true,
        Error::Batch { failures, .. } => {
            !failures.is_empty() && failures.iter().all(|f| is_cache_miss(&f.error))
        }
        _ => false,
    }
}

/// Turns a cold-cache failure into an instruction to populate the cache.
fn explain(error: Error) -> anyhow::Error {
    if is_cache_miss(&error) {
        anyhow!(
            "{error}\nthe cache at this location is cold; run `realitycheck facts` and `realitycheck score` without --cache-only first"
        )
    } else {
        error.into()
    }
}

fn log_failures(failures: &[BatchFailure], skipped: usize) {
    for f in failures {
        log::error!(
            "image `{}` (manifest line {}) failed: {}",
            f.image_id,
            f.index + 1,
            f.error
        );
    }
    if skipped > 0 {
        log::error!("{skipped} images not attempted after a failure (--fail-fast)");
    }
}

fn outcome_of<T>(outcome: &BatchOutcome<T>) -> Outcome {
    log_failures(&outcome.failures, outcome.skipped);
    if outcome.is_complete() {
        Outcome::Complete
    } else {
        Outcome::Partial
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

#[derive(Serialize)]
struct FailureEntry {
    index: usize,
    image_id: String,
    error: String,
}

fn failure_entries(failures: &[BatchFailure]) -> Vec<FailureEntry> {
    failures
        .iter()
        .map(|f| FailureEntry {
            index: f.index,
            image_id: f.image_id.clone(),
            error: f.error.to_string(),
        })
        .collect()
}

pub fn facts(settings: &Settings) -> Result<Outcome> {
    let manifest = load_manifest(settings.manifest()?)?;
    let backends = Backends {
        facts: fact_backend(settings)?,
        nli: None,
    };
    let pipeline = pipeline(settings, backends, settings.cache_mode())?;
    let outcome = pipeline.facts_batch(&manifest).map_err(explain)?;

    let path = settings
        .out_dir
        .join(format!("facts-{}.jsonl", settings.run_id));
    let mut text = String::new();
    for set in &outcome.items {
        text.push_str(&serde_json::to_string(set)?);
        text.push('\n');
    }
    write_file(&path, &text)?;
    let exported = outcome.items.len();
    let fallback = outcome
        .items
        .iter()
        .filter(|s| s.generation_mode == GenerationMode::SamplingFallback)
        .count();
    if fallback > 0 {
        log::warn!("{fallback} fact sets were generated by sampling, not diverse beam search");
    }
    log_requests(&pipeline);
    println!("exported {exported} fact sets to {}", path.display());
    Ok(outcome_of(&outcome))
}

fn log_requests(pipeline: &Pipeline) {
    let s = pipeline.stats();
    log::info!(
        "backend requests: lvlm={} nli={}; cache hits: facts={} nli={}",
        s.fact_requests,
        s.nli_requests,
        s.fact_cache_hits,
        s.nli_cache_hits
    );
}

#[derive(Serialize)]
struct ImageScores {
    image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair_id: Option<String>,
    generation_mode: GenerationMode,
    scores: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ScoresFile {
    run_id: String,
    config_digest: String,
    lvlm_model_id: String,
    nli_model_id: String,
    weights: ScoreWeights,
    /// Score keys in display order.
    columns: Vec<String>,
    images: Vec<ImageScores>,
    failures: Vec<FailureEntry>,
}

fn score_table(methods: &[Method], weights: &ScoreWeights, records: &[RunRecord]) -> String {
    let id_width = records
        .iter()
        .map(|r| r.image_id.len())
        .max()
        .unwrap_or(0)
        .max("image_id".len());
    let mut out = format!("{:<id_width$}  {:<5}", "image_id", "label");
    for m in methods {
        out.push_str(&format!("  {:>10}", m.as_str()));
    }
    out.push('\n');
    for record in records {
        let label = match record.label {
            Some(Label::Real) => "real",
            Some(Label::Weird) => "weird",
            None => "-",
        };
        out.push_str(&format!("{:<id_width$}  {label:<5}", record.image_id));
        for &m in methods {
            let value = record.scores[&score_key(m, weights)].value;
            out.push_str(&format!("  {value:>10.4}"));
        }
        out.push('\n');
    }
    out
}

pub fn score(settings: &Settings) -> Result<Outcome> {
    let manifest = load_manifest(settings.manifest()?)?;
    let backends = Backends::new(fact_backend(settings)?, nli_backend(settings)?);
    let pipeline = pipeline(settings, backends, settings.cache_mode())?;
    let digest = pipeline.config_digest();
    let store = RunStore::create(&settings.run_dir, &settings.run_id, &digest)?;
    let run_path = store.path().to_path_buf();
    let pipeline = pipeline.with_run_store(store);
    let outcome = pipeline.score_batch(&manifest).map_err(explain)?;

    let columns: Vec<String> = settings
        .methods
        .iter()
        .map(|&m| score_key(m, &settings.weights))
        .collect();
    let file = ScoresFile {
        run_id: settings.run_id.clone(),
        config_digest: digest.clone(),
        lvlm_model_id: outcome.items[0].lvlm_model_id.clone(),
        nli_model_id: outcome.items[0].nli_model_id.clone(),
        weights: settings.weights,
        columns,
        images: outcome
            .items
            .iter()
            .map(|r| ImageScores {
                image_id: r.image_id.clone(),
                label: r.label,
                pair_id: r.pair_id.clone(),
                generation_mode: r.fact_set.generation_mode,
                scores: r.scores.iter().map(|(k, s)| (k.clone(), s.value)).collect(),
            })
            .collect(),
        failures: failure_entries(&outcome.failures),
    };
    let path = settings
        .out_dir
        .join(format!("scores-{}-{digest}.json", settings.run_id));
    write_json(&path, &file)?;
    log_requests(&pipeline);
    log::info!(
        "run records in {}, scores in {}",
        run_path.display(),
        path.display()
    );
    print!(
        "{}",
        score_table(&settings.methods, &settings.weights, &outcome.items)
    );
    Ok(outcome_of(&outcome))
}

fn pairs_for(
    settings: &Settings,
    labeled: &[(&str, Option<&str>, Option<Label>)],
) -> Result<Vec<PairRecord>> {
    let pairs = match &settings.pairs {
        Some(path) => load_pairs(path)?,
        None => pairs_from_labels(labeled.iter().copied())?,
    };
    if pairs.is_empty() {
        bail!("no pairs to evaluate; pass --pairs or give manifest images a pair_id and label");
    }
    Ok(pairs)
}

pub fn eval(settings: &Settings) -> Result<Outcome> {
    let manifest = load_manifest(settings.manifest()?)?;
    let labeled: Vec<_> = manifest
        .iter()
        .map(|r| (r.image_id.as_str(), r.pair_id.as_deref(), r.label))
        .collect();
    let pairs = pairs_for(settings, &labeled)?;
    let known: HashSet<&str> = manifest.iter().map(|r| r.image_id.as_str()).collect();
    validate_pairs(&pairs, |id| known.contains(id))?;
    let used: HashSet<&str> = pairs
        .iter()
        .flat_map(|p| [p.real_image_id.as_str(), p.weird_image_id.as_str()])
        .collect();
    let needed: Vec<ImageRecord> = manifest
        .iter()
        .filter(|r| used.contains(r.image_id.as_str()))
        .cloned()
        .collect();

    // Grid search must never reach a backend: everything comes from the cache.
    let backends = Backends::new(fact_backend(settings)?, nli_backend(settings)?);
    let pipeline = pipeline(settings, backends, CacheMode::CacheOnly)?;
    let outcome = pipeline.score_batch(&needed).map_err(explain)?;
    if let Some(first) = outcome.failures.into_iter().next() {
        let image_id = first.image_id;
        return Err(
            explain(first.error).context(format!("no cached matrix for image `{image_id}`"))
        );
    }

    let nli_model_id = outcome.items[0].nli_model_id.clone();
    let mut source = MatrixSource::new(nli_model_id);
    for record in outcome.items {
        source.insert(record.image_id, record.matrix);
    }
    let report = cross_validate(&pairs, &settings.eval, &source)?;

    let stem = settings.out_dir.join(format!("eval-{}", settings.run_id));
    let json_path = stem.with_extension("json");
    let mut json = report.to_json()?;
    json.push('\n');
    write_file(&json_path, &json)?;
    write_file(&stem.with_extension("md"), &report.markdown())?;
    log::info!("evaluation report in {}", json_path.display());
    for m in &report.methods {
        println!(
            "{}: mean accuracy {:.2}% over {} folds ({} pairs, {} test ties)",
            m.method,
            100.0 * m.mean_accuracy,
            m.folds.len(),
            report.num_pairs,
            m.test_ties
        );
    }
    Ok(Outcome::Complete)
}

#[derive(Serialize)]
struct AnalysisFile<'a> {
    method: Method,
    weights: ScoreWeights,
    annotations: Option<PathBuf>,
    report: &'a ConditionalReport,
    records: &'a [AnalysisRecord],
}

/// Last record per image wins; order of first appearance is kept.
fn latest_records(records: Vec<RunRecord>) -> Vec<RunRecord> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<RunRecord> = Vec::new();
    for record in records {
        match index.get(&record.image_id) {
            Some(&k) => out[k] = record,
            None => {
                index.insert(record.image_id.clone(), out.len());
                out.push(record);
            }
        }
    }
    out
}

pub fn analyze(settings: &Settings) -> Result<Outcome> {
    let records = latest_records(load_run_records(&settings.run_dir)?);
    if records.is_empty() {
        bail!(
            "no run records in {}; run `realitycheck score` first",
            settings.run_dir.display()
        );
    }
    let labeled: Vec<_> = records
        .iter()
        .map(|r| (r.image_id.as_str(), r.pair_id.as_deref(), r.label))
        .collect();
    let pairs = pairs_for(settings, &labeled)?;

    let annotations = match &settings.annotations {
        Some(path) => Some(load_annotations(path)?),
        None => None,
    };
    let matcher = MarkerMatcher::default();
    let flags: HashMap<String, AnalysisFlags> = records
        .iter()
        .map(|r| {
            let flags = AnalysisFlags {
                digital: matcher.detect(&r.fact_set),
                hallucination: annotations
                    .as_ref()
                    .and_then(|a| a.get(&r.image_id).copied()),
            };
            (r.image_id.clone(), flags)
        })
        .collect();
    if let Some(a) = &annotations {
        let missing = records
            .iter()
            .filter(|r| !a.contains_key(&r.image_id))
            .count();
        if missing > 0 {
            log::warn!("{missing} images have no hallucination annotation");
        }
    }

    for &method in &settings.methods {
        let mut scores = HashMap::new();
        for r in &records {
            let score = reality_check(&r.image_id, &r.matrix, &settings.weights, method)?;
            scores.insert(r.image_id.clone(), score.value);
        }
        validate_pairs(&pairs, |id| scores.contains_key(id))?;
        let analysis = analysis_records(&pairs, &scores, &flags)?;
        let report = conditional_report(&analysis);
        let stem = settings
            .out_dir
            .join(format!("analysis-{}-{method}", settings.run_id));
        write_json(
            &stem.with_extension("json"),
            &AnalysisFile {
                method,
                weights: settings.weights,
                annotations: settings.annotations.clone(),
                report: &report,
                records: &analysis,
            },
        )?;
        let markdown = format!(
            "### {method} @ {}\n\n{}",
            settings.weights,
            report.markdown()
        );
        write_file(&stem.with_extension("md"), &markdown)?;
        print!("{markdown}");
    }
    Ok(Outcome::Complete)
}
