use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use realitycheck_core::gateway::{
    BackendConfig, FactBackend, FactCandidates, ImageInput, NliBackend, RawNliOutput,
    ReplayFactBackend, ReplayNliBackend,
};
use realitycheck_core::pipeline::{
    load_manifest, load_run_records, Backends, Cache, CacheMode, ImageRecord, Pipeline,
    PipelineConfig, RunStore, ScoreSpec, FACTS_FILE, NLI_FILE,
};
use realitycheck_core::{Error, GenerationParams, Method, ScoreWeights};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/whoops_mini")
}

struct Counting<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> Counting<B> {
    fn new(inner: B) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
        })
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: FactBackend> FactBackend for Counting<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn generate(
        &self,
        image: &ImageInput,
        params: &GenerationParams,
    ) -> realitycheck_core::Result<FactCandidates> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(image, params)
    }
}

impl<B: NliBackend> NliBackend for Counting<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn score(&self, premise: &str, hypothesis: &str) -> realitycheck_core::Result<RawNliOutput> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(premise, hypothesis)
    }
}

type CountingFacts = Arc<Counting<ReplayFactBackend>>;
type CountingNli = Arc<Counting<ReplayNliBackend>>;

fn replay_backends() -> (CountingFacts, CountingNli) {
    let facts =
        ReplayFactBackend::open(&BackendConfig::replay(fixture().join("replay_facts.jsonl")))
            .unwrap();
    let nli =
        ReplayNliBackend::open(&BackendConfig::replay(fixture().join("replay_nli.jsonl"))).unwrap();
    (Counting::new(facts), Counting::new(nli))
}

fn all_methods() -> PipelineConfig {
    PipelineConfig {
        specs: Method::ALL
            .iter()
            .map(|&method| ScoreSpec {
                method,
                weights: ScoreWeights::default(),
            })
            .collect(),
        ..PipelineConfig::default()
    }
}

fn pipeline(config: PipelineConfig, cache_dir: &Path) -> (Pipeline, CountingFacts, CountingNli) {
    let (facts, nli) = replay_backends();
    let backends = Backends::new(facts.clone(), nli.clone());
    let p = Pipeline::new(config, backends, Cache::open(cache_dir).unwrap()).unwrap();
    (p, facts, nli)
}

fn expected_scores() -> HashMap<String, HashMap<String, f64>> {
    let text = std::fs::read_to_string(fixture().join("expected_scores.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn end_to_end_scores_match_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (p, facts, nli) = pipeline(all_methods(), dir.path());
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    let outcome = p.score_batch(&manifest).unwrap();
    assert!(outcome.is_complete());
    assert_eq!(outcome.items.len(), 6);
    assert_eq!(facts.calls(), 6);
    assert_eq!(nli.calls(), 6 * 20);

    let expected = expected_scores();
    for record in &outcome.items {
        record.verify_scores().unwrap();
        assert_eq!(record.matrix.len(), 20);
        assert_eq!(record.nli_model_id, "cross-encoder/nli-deberta-v3-large");
        for score in record.scores.values() {
            let want = expected[&record.image_id][score.method.as_str()];
            assert!(
                (score.value - want).abs() < 1e-9,
                "{} {}: {} vs {want}",
                record.image_id,
                score.method,
                score.value
            );
        }
    }
    let ids: Vec<_> = outcome.items.iter().map(|r| r.image_id.as_str()).collect();
    let manifest_ids: Vec<_> = manifest.iter().map(|r| r.image_id.as_str()).collect();
    assert_eq!(ids, manifest_ids);
}

#[test]
fn second_run_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();

    let (p, _, _) = pipeline(all_methods(), dir.path());
    let first = p.score_batch(&manifest).unwrap();
    let cold = p.stats();
    assert_eq!((cold.fact_requests, cold.nli_requests), (6, 120));
    drop(p);

    let (p, facts, nli) = pipeline(all_methods(), dir.path());
    let second = p.score_batch(&manifest).unwrap();
    assert_eq!(facts.calls() + nli.calls(), 0);
    let warm = p.stats();
    assert_eq!((warm.fact_cache_hits, warm.nli_cache_hits), (6, 120));
    for (a, b) in first.items.iter().zip(&second.items) {
        assert_eq!(a.without_timestamps(), b.without_timestamps());
    }

    // Rerunning did not grow the cache files.
    for file in [FACTS_FILE, NLI_FILE] {
        let lines = std::fs::read_to_string(dir.path().join(file))
            .unwrap()
            .lines()
            .count();
        assert_eq!(lines, if file == FACTS_FILE { 6 } else { 120 });
    }
}

#[test]
fn cache_only_mode_never_calls_backends() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    let config = PipelineConfig {
        cache_mode: CacheMode::CacheOnly,
        ..PipelineConfig::default()
    };
    let (p, facts, nli) = pipeline(config.clone(), dir.path());
    let err = p.score_image(&manifest[0]).unwrap_err();
    assert!(
        matches!(err, Error::CacheMiss { kind: "facts", .. }),
        "{err}"
    );
    assert_eq!(facts.calls() + nli.calls(), 0);

    pipeline(PipelineConfig::default(), dir.path())
        .0
        .score_image(&manifest[0])
        .unwrap();
    let (p, facts, nli) = pipeline(config, dir.path());
    p.score_image(&manifest[0]).unwrap();
    assert_eq!(facts.calls() + nli.calls(), 0);
}

#[test]
fn changed_generation_params_miss_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    let key = p.facts_key(&manifest[0].load().unwrap().1);
    p.score_image(&manifest[0]).unwrap();

    let config = PipelineConfig {
        params: GenerationParams::with_num_facts(4),
        ..PipelineConfig::default()
    };
    let (p, _, _) = pipeline(config, dir.path());
    assert_ne!(p.facts_key(&manifest[0].load().unwrap().1), key);
    // Replay has nothing recorded for four facts.
    assert!(matches!(
        p.score_image(&manifest[0]),
        Err(Error::ReplayMiss(_))
    ));
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    let image = ImageRecord::new("ghost", dir.path().join("nope.png"));
    let err = p.score_image(&image).unwrap_err();
    match &err {
        Error::Input { path, .. } => assert!(path.ends_with("nope.png")),
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("nope.png"));
}

#[test]
fn wrong_sha_in_manifest_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    let mut image = load_manifest(&fixture().join("manifest.jsonl"))
        .unwrap()
        .remove(0);
    image.sha256 = Some("00".repeat(32));
    assert!(matches!(p.score_image(&image), Err(Error::Input { .. })));
}

#[test]
fn corrupt_cache_value_is_integrity_error_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    let key = p.facts_key(&manifest[0].load().unwrap().1);
    drop(p);

    let bogus = serde_json::json!({"key": key, "value": {"facts": ["only one"], "model_id": "m", "generation_mode": "diverse_beam"}});
    std::fs::write(
        dir.path().join(FACTS_FILE),
        format!("{bogus}\nnot json at all\n"),
    )
    .unwrap();

    let (p, facts, _) = pipeline(PipelineConfig::default(), dir.path());
    assert_eq!(p.cache().facts.problems().len(), 1);
    match p.cache().facts.problems()[0] {
        Error::CacheIntegrity { line, .. } => assert_eq!(line, Some(2)),
        ref other => panic!("unexpected {other}"),
    }
    let err = p.score_image(&manifest[0]).unwrap_err();
    match &err {
        Error::CacheIntegrity { key: Some(k), .. } => assert_eq!(k, &key),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(facts.calls(), 0);
}

#[test]
fn corrupt_nli_triple_is_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    let record = p.score_image(&manifest[0]).unwrap();
    let facts = &record.fact_set.facts;
    let key = p.nli_key(&facts[0], &facts[1]);
    drop(p);

    let bad = serde_json::json!({"key": key, "value": {"ent": 0.9, "con": 0.9, "neu": 0.9}});
    let path = dir.path().join(NLI_FILE);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str(&format!("{bad}\n"));
    std::fs::write(&path, text).unwrap();

    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    let err = p.score_image(&manifest[0]).unwrap_err();
    assert!(
        matches!(&err, Error::CacheIntegrity { key: Some(k), .. } if *k == key),
        "{err}"
    );
}

fn partly_unreadable(dir: &Path) -> Vec<ImageRecord> {
    let mut manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    manifest.truncate(4);
    manifest[1].path = dir.join("missing.png");
    manifest
}

#[test]
fn partial_batch_reports_failures_and_persists_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let (p, _, _) = pipeline(PipelineConfig::default(), &dir.path().join("cache"));
    let store = RunStore::create(&runs, "t1", &p.config_digest()).unwrap();
    let p = p.with_run_store(store);
    let manifest = partly_unreadable(dir.path());
    let outcome = p.score_batch(&manifest).unwrap();
    assert_eq!(outcome.items.len(), 3);
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].index, 1);
    assert_eq!(outcome.failures[0].image_id, manifest[1].image_id);
    assert!(matches!(outcome.failures[0].error, Error::Input { .. }));
    assert!(!outcome.is_complete());

    let stored = load_run_records(&runs).unwrap();
    let ids: Vec<_> = stored.iter().map(|r| r.image_id.clone()).collect();
    assert_eq!(ids, ["camel_real", "plow_real", "plow_weird"]);
    let name = p
        .run_store()
        .unwrap()
        .path()
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .to_string();
    assert!(name.starts_with("run-t1-") && name.ends_with(".jsonl"));
}

#[test]
fn fail_fast_stops_claiming_images() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        fail_fast: true,
        concurrency: 1,
        ..PipelineConfig::default()
    };
    let (p, _, _) = pipeline(config, dir.path());
    let outcome = p.score_batch(&partly_unreadable(dir.path())).unwrap();
    assert_eq!(outcome.items.len(), 1);
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.skipped, 2);
}

#[test]
fn empty_or_fully_failed_batch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _, _) = pipeline(PipelineConfig::default(), dir.path());
    assert!(matches!(p.score_batch(&[]), Err(Error::Batch { .. })));
    let ghost = vec![ImageRecord::new("ghost", dir.path().join("ghost.png"))];
    match p.score_batch(&ghost) {
        Err(Error::Batch { failures, .. }) => assert_eq!(failures.len(), 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn facts_batch_runs_without_nli_backend() {
    let dir = tempfile::tempdir().unwrap();
    let (facts, _) = replay_backends();
    let backends = Backends { facts, nli: None };
    let p = Pipeline::new(
        PipelineConfig::default(),
        backends,
        Cache::open(dir.path()).unwrap(),
    )
    .unwrap();
    let manifest = load_manifest(&fixture().join("manifest.jsonl")).unwrap();
    let outcome = p.facts_batch(&manifest).unwrap();
    assert_eq!(outcome.items.len(), 6);
    assert!(outcome.items.iter().all(|s| s.len() == 5));
    assert!(matches!(
        p.score_image(&manifest[0]),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn config_digest_tracks_methods_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let a = pipeline(PipelineConfig::default(), dir.path())
        .0
        .config_digest();
    let b = pipeline(all_methods(), dir.path()).0.config_digest();
    let c = pipeline(PipelineConfig::default(), dir.path())
        .0
        .config_digest();
    assert_eq!(a.len(), 16);
    assert_ne!(a, b);
    assert_eq!(a, c);
}
