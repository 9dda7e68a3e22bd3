//! Settings are merged from flags, environment, a TOML file and defaults,
//! in that order of precedence. Clap resolves flag-over-env; this module
//! layers the result over the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use realitycheck_core::eval::{default_grid_con, default_grid_ent, EvalConfig, TiePolicy};
use realitycheck_core::gateway::{BackendConfig, BackendKind};
use realitycheck_core::pipeline::{CacheMode, PipelineConfig, ScoreSpec};
use realitycheck_core::{GenerationParams, Method, ScoreWeights};
use serde::Deserialize;

pub const LVLM_TOKEN_ENV: &str = "REALITYCHECK_LVLM_TOKEN";
pub const NLI_TOKEN_ENV: &str = "REALITYCHECK_NLI_TOKEN";

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = "REALITYCHECK_CONFIG")]
    pub config: Option<PathBuf>,

    /// JSON Lines image manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// JSON Lines pairs file; defaults to pairs derived from manifest labels.
    #[arg(long, global = true)]
    pub pairs: Option<PathBuf>,

    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,

    /// Where reports and exports are written; defaults to the run directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Comma-separated reductions: min, absmax, clust.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_method)]
    pub method: Option<Vec<Method>>,

    /// Combination weights as ENT,CON,NEU.
    #[arg(long, global = true, value_parser = parse_weights, allow_hyphen_values = true)]
    pub weights: Option<ScoreWeights>,

    /// Facts per image; also sets beams and beam groups to the same value.
    #[arg(long, global = true)]
    pub num_facts: Option<usize>,

    #[arg(long, global = true)]
    pub folds: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, env = "REALITYCHECK_LVLM_URL")]
    pub backend_lvlm_url: Option<String>,

    #[arg(long, global = true, env = "REALITYCHECK_NLI_URL")]
    pub backend_nli_url: Option<String>,

    #[arg(long, global = true)]
    pub replay_facts: Option<PathBuf>,

    #[arg(long, global = true)]
    pub replay_nli: Option<PathBuf>,

    /// Images processed at once.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,

    /// Stop claiming new images after the first failure.
    #[arg(long, global = true)]
    pub fail_fast: bool,

    /// Serve everything from the cache; never contact a backend.
    #[arg(long, global = true)]
    pub cache_only: bool,

    /// Run identifier used in output file names; defaults to a UTC timestamp.
    #[arg(long, global = true)]
    pub run_id: Option<String>,

    /// JSON Lines hallucination annotations for `analyze`.
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,

    #[arg(long, global = true)]
    pub log_level: Option<String>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
        .map_err(|e: realitycheck_core::Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<ScoreWeights, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [ent, con, neu] = parts.as_slice() else {
        return Err(format!("expected ENT,CON,NEU, got `{s}`"));
    };
    let num = |v: &str| {
        v.parse::<f64>()
            .map_err(|e| format!("bad weight `{v}`: {e}"))
    };
    let weights = ScoreWeights {
        w_ent: num(ent)?,
        w_con: num(con)?,
        w_neu: num(neu)?,
    };
    weights.validate().map_err(|e| e.to_string())?;
    Ok(weights)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub fail_fast: Option<bool>,
    pub log_level: Option<String>,
    pub lvlm: Option<BackendConfig>,
    pub nli: Option<BackendConfig>,
    #[serde(default)]
    pub generation: FileGeneration,
    #[serde(default)]
    pub scoring: FileScoring,
    #[serde(default)]
    pub eval: FileEval,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileGeneration {
    pub prompt: Option<String>,
    pub num_facts: Option<usize>,
    pub num_beams: Option<usize>,
    pub num_beam_groups: Option<usize>,
    pub diversity_penalty: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileScoring {
    pub methods: Option<Vec<Method>>,
    pub w_ent: Option<f64>,
    pub w_con: Option<f64>,
    pub w_neu: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEval {
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub grid_ent: Option<Vec<f64>>,
    pub grid_con: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut config: FileConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Relative paths in the file are taken relative to the file itself.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        for p in [
            &mut self.manifest,
            &mut self.pairs,
            &mut self.cache_dir,
            &mut self.run_dir,
            &mut self.out_dir,
            &mut self.annotations,
        ] {
            fix(p);
        }
        for backend in [&mut self.lvlm, &mut self.nli].into_iter().flatten() {
            fix(&mut backend.replay_path);
        }
    }
}

/// Fully merged settings for one invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub manifest: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub run_dir: PathBuf,
    pub out_dir: PathBuf,
    pub annotations: Option<PathBuf>,
    pub run_id: String,
    pub lvlm: Option<BackendConfig>,
    pub nli: Option<BackendConfig>,
    pub params: GenerationParams,
    pub methods: Vec<Method>,
    pub weights: ScoreWeights,
    pub eval: EvalConfig,
    pub concurrency: usize,
    pub fail_fast: bool,
    pub cache_only: bool,
    pub log_level: String,
}

impl Settings {
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Self::merge(args, file)
    }

    pub fn merge(args: &GlobalArgs, file: FileConfig) -> Result<Self> {
        let run_dir = args
            .run_dir
            .clone()
            .or(file.run_dir)
            .unwrap_or_else(|| PathBuf::from(".realitycheck/runs"));
        let out_dir = args
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| run_dir.clone());

        let defaults = GenerationParams::default();
        let g = file.generation;
        let mut params = GenerationParams {
            prompt: g.prompt.unwrap_or(defaults.prompt),
            num_facts: g.num_facts.unwrap_or(defaults.num_facts),
            num_beams: g.num_beams.unwrap_or(defaults.num_beams),
            num_beam_groups: g.num_beam_groups.unwrap_or(defaults.num_beam_groups),
            diversity_penalty: g.diversity_penalty.unwrap_or(defaults.diversity_penalty),
        };
        if let Some(n) = args.num_facts {
            params.num_facts = n;
            params.num_beams = n;
            params.num_beam_groups = n;
        }
        params.validate()?;

        let w = ScoreWeights::default();
        let weights = args.weights.unwrap_or(ScoreWeights {
            w_ent: file.scoring.w_ent.unwrap_or(w.w_ent),
            w_con: file.scoring.w_con.unwrap_or(w.w_con),
            w_neu: file.scoring.w_neu.unwrap_or(w.w_neu),
        });
        weights.validate()?;

        let mut methods = args
            .method
            .clone()
            .or(file.scoring.methods)
            .unwrap_or_else(|| vec![Method::Clust]);
        methods.sort();
        methods.dedup();
        if methods.is_empty() {
            bail!("no methods given; valid methods are min, absmax, clust");
        }

        let eval = EvalConfig {
            folds: args.folds.or(file.eval.folds).unwrap_or(3),
            seed: args.seed.or(file.eval.seed).unwrap_or(0),
            grid_ent: file.eval.grid_ent.unwrap_or_else(default_grid_ent),
            grid_con: file.eval.grid_con.unwrap_or_else(default_grid_con),
            methods: methods.clone(),
            tie_policy: TiePolicy::CountAsIncorrect,
        };
        eval.validate()?;

        let concurrency = args.concurrency.or(file.concurrency).unwrap_or(4);
        if concurrency == 0 {
            bail!("concurrency must be at least 1");
        }

        Ok(Self {
            manifest: args.manifest.clone().or(file.manifest),
            pairs: args.pairs.clone().or(file.pairs),
            cache_dir: args
                .cache_dir
                .clone()
                .or(file.cache_dir)
                .unwrap_or_else(|| PathBuf::from(".realitycheck/cache")),
            run_dir,
            out_dir,
            annotations: args.annotations.clone().or(file.annotations),
            run_id: args
                .run_id
                .clone()
                .unwrap_or_else(|| chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string()),
            lvlm: backend(
                file.lvlm,
                args.replay_facts.as_deref(),
                args.backend_lvlm_url.as_deref(),
                BackendKind::HttpLvlm,
                LVLM_TOKEN_ENV,
            ),
            nli: backend(
                file.nli,
                args.replay_nli.as_deref(),
                args.backend_nli_url.as_deref(),
                BackendKind::HttpNli,
                NLI_TOKEN_ENV,
            ),
            params,
            methods,
            weights,
            eval,
            concurrency,
            fail_fast: args.fail_fast || file.fail_fast.unwrap_or(false),
            cache_only: args.cache_only,
            log_level: args
                .log_level
                .clone()
                .or_else(|| std::env::var("RUST_LOG").ok().filter(|v| !v.is_empty()))
                .or(file.log_level)
                .unwrap_or_else(|| "info".to_string()),
        })
    }

    pub fn pipeline_config(&self, cache_mode: CacheMode) -> PipelineConfig {
        PipelineConfig {
            params: self.params.clone(),
            specs: self
                .methods
                .iter()
                .map(|&method| ScoreSpec {
                    method,
                    weights: self.weights,
                })
                .collect(),
            concurrency: self.concurrency,
            cache_mode,
            fail_fast: self.fail_fast,
        }
    }

    pub fn cache_mode(&self) -> CacheMode {
        if self.cache_only {
            CacheMode::CacheOnly
        } else {
            CacheMode::ReadWrite
        }
    }

    pub fn manifest(&self) -> Result<&Path> {
        match &self.manifest {
            Some(path) => Ok(path),
            None => {
                bail!("no manifest given; pass --manifest or set `manifest` in the config file")
            }
        }
    }
}

/// Replay flags win over URL flags, which win over the file section. Other
/// file settings (timeouts, model_id, ...) survive a flag override.
fn backend(
    file: Option<BackendConfig>,
    replay: Option<&Path>,
    url: Option<&str>,
    http_kind: BackendKind,
    token_env: &str,
) -> Option<BackendConfig> {
    let mut config = match (file, replay, url) {
        (None, None, None) => return None,
        (file, _, _) => file.unwrap_or_default(),
    };
    if let Some(path) = replay {
        config.kind = BackendKind::Replay;
        config.replay_path = Some(path.to_path_buf());
    } else if let Some(url) = url {
        config.kind = http_kind;
        config.endpoint_url = Some(url.to_string());
    }
    if config.kind != BackendKind::Replay && config.auth_token_env.is_none() {
        config.auth_token_env = Some(token_env.to_string());
    }
    Some(config)
}
