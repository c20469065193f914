//! Experiment orchestration: single-configuration runs over task instances,
//! trajectory logging, deterministic replay.

pub mod report;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackName, AttackSpec, Trigger};
use crate::canonical::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::{
    acc_under_attack, asr, clean_acc, token_overhead, ChannelAggregate, MetricsRow, RunOutcome,
    TokenOverheadRow, CLEAN_CONDITION,
};
use crate::stages::backbone::{Backbone, RemoteBackbone, RemoteConfig, ScriptedBackbone};
use crate::stages::retrieval::RetrievalConfig;
use crate::stages::StageSet;
use crate::tasks::{
    evaluate, instance_store, load_task, min_budget, DetectorConfig, TaskEnvironment, TaskInstance,
    VerifierResult,
};
use crate::workflow::{log as tlog, run, AgentTemplate, Query, RunParams, TaskKind, Trajectory};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub path: String,
}

fn default_reports_usage() -> bool {
    true
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum BackboneConfig {
    Scripted {
        #[serde(default)]
        name: Option<String>,
        rules_path: String,
    },
    Remote {
        #[serde(default)]
        name: Option<String>,
        model: String,
        /// Base URL; falls back to the MODEL_API_BASE environment variable.
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default = "default_reports_usage")]
        reports_usage: bool,
        #[serde(default)]
        request_logprobs: bool,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

impl BackboneConfig {
    pub fn label(&self) -> String {
        match self {
            BackboneConfig::Scripted { name, .. } => {
                name.clone().unwrap_or_else(|| "scripted".to_string())
            }
            BackboneConfig::Remote { name, model, .. } => {
                name.clone().unwrap_or_else(|| model.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub name: AttackName,
    pub trigger: Trigger,
    #[serde(default)]
    pub target: Option<String>,
}

fn default_step_budget() -> u32 {
    8
}
fn default_parallelism() -> usize {
    1
}

/// One experiment configuration. Paths are resolved relative to the config
/// file location at parse time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub agent_template: AgentTemplate,
    pub task: TaskConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_step_budget")]
    pub step_budget: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub out_dir: String,
}

impl RunConfig {
    /// Digest stamped into every trajectory the config produces.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    /// Resolve the configured attack into a validated spec.
    pub fn attack_spec(&self) -> Result<Option<AttackSpec>> {
        match &self.attack {
            None => Ok(None),
            Some(cfg) => {
                let spec =
                    AttackSpec::from_parts(cfg.name, cfg.trigger.clone(), cfg.target.clone())?;
                if matches!(self.task.kind, TaskKind::QA | TaskKind::Web) && spec.target.is_none() {
                    return Err(Error::Config(format!(
                        "attack.target: required for {} attacks (names the wrong answer or wrong item)",
                        self.task.kind
                    )));
                }
                Ok(Some(spec))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.agent_template.validate()?;
        if self.retrieval.k < 1 {
            return Err(Error::Config("retrieval.k: must be >= 1".into()));
        }
        if self.parallelism < 1 {
            return Err(Error::Config("parallelism: must be >= 1".into()));
        }
        self.attack_spec()?;
        if let BackboneConfig::Remote { endpoint, .. } = &self.backbone {
            if std::env::var("MODEL_API_KEY").is_err() {
                return Err(Error::Config(
                    "backbone: remote backbone requires the MODEL_API_KEY environment variable"
                        .into(),
                ));
            }
            if endpoint.is_none() && std::env::var("MODEL_API_BASE").is_err() {
                return Err(Error::Config(
                    "backbone.endpoint: set it or the MODEL_API_BASE environment variable".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Parse and validate a configuration file; relative paths inside it are
/// resolved against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut config: RunConfig = serde_json::from_str(&raw)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> String {
        let candidate = Path::new(p);
        if candidate.is_absolute() {
            p.to_string()
        } else {
            base.join(candidate).to_string_lossy().into_owned()
        }
    };
    config.task.path = resolve(&config.task.path);
    if let BackboneConfig::Scripted { rules_path, .. } = &mut config.backbone {
        *rules_path = resolve(rules_path);
    }
    config.validate()?;
    Ok(config)
}

pub fn build_backbone(config: &BackboneConfig) -> Result<Backbone> {
    match config {
        BackboneConfig::Scripted { rules_path, .. } => {
            let raw = std::fs::read_to_string(rules_path)
                .map_err(|e| Error::Load(format!("{rules_path}: {e}")))?;
            Ok(Backbone::Scripted(ScriptedBackbone::from_json(&raw)?))
        }
        BackboneConfig::Remote {
            model,
            endpoint,
            reports_usage,
            request_logprobs,
            max_in_flight,
            timeout_secs,
            ..
        } => {
            let base_url = match endpoint {
                Some(url) => url.clone(),
                None => std::env::var("MODEL_API_BASE").map_err(|_| {
                    Error::Config(
                        "backbone.endpoint: set it or the MODEL_API_BASE environment variable"
                            .into(),
                    )
                })?,
            };
            let api_key = std::env::var("MODEL_API_KEY").map_err(|_| {
                Error::Config(
                    "backbone: remote backbone requires the MODEL_API_KEY environment variable"
                        .into(),
                )
            })?;
            Ok(Backbone::Remote(RemoteBackbone::new(RemoteConfig {
                base_url,
                model_name: model.clone(),
                api_key,
                reports_usage: *reports_usage,
                request_logprobs: *request_logprobs,
                max_in_flight: *max_in_flight,
                timeout: Duration::from_secs(*timeout_secs),
            })?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Triggered,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => CLEAN_CONDITION,
            Condition::Triggered => "triggered",
        }
    }
}

pub struct ExperimentResult {
    pub metrics: Vec<MetricsRow>,
    pub trajectory_paths: Vec<PathBuf>,
    pub aggregate: Option<Vec<ChannelAggregate>>,
    pub overhead: Vec<TokenOverheadRow>,
}

/// Build the stage set for one instance under one condition, and the query
/// actually posed (triggered conditions carry the trigger pattern appended
/// to the query text).
pub fn prepare_run(
    instance: &TaskInstance,
    backbone: &Arc<Backbone>,
    retrieval: &RetrievalConfig,
    spec: Option<&AttackSpec>,
    condition: Condition,
) -> Result<(Query, StageSet)> {
    let store = Arc::new(instance_store(instance)?);
    let env = Arc::new(TaskEnvironment::for_instance(instance)?);
    let clean = StageSet::clean(backbone.clone(), store, retrieval.clone(), env);
    let mut query = instance.query.clone();
    match (condition, spec) {
        (Condition::Clean, _) | (_, None) => Ok((query, clean)),
        (Condition::Triggered, Some(spec)) => {
            query.text = format!("{} {}", query.text, spec.trigger.pattern);
            let attacked = crate::attack::build_attack(spec, &clean)?;
            Ok((query, attacked.stages))
        }
    }
}

/// Execute one run end-to-end and judge it.
pub fn execute_run(
    instance: &TaskInstance,
    backbone: &Arc<Backbone>,
    config: &RunConfig,
    spec: Option<&AttackSpec>,
    condition: Condition,
) -> Result<(Trajectory, VerifierResult)> {
    let (query, stages) = prepare_run(instance, backbone, &config.retrieval, spec, condition)?;
    let triggered = condition == Condition::Triggered;
    let params = RunParams {
        step_budget: config.step_budget,
        seed: config.seed,
        config_digest: config.digest(),
        template: config.agent_template.clone(),
        attack: triggered.then(|| spec.cloned()).flatten(),
        triggered,
    };
    let traj = run(&query, &params, &stages);
    let verifier = evaluate(&instance.query.gold, &traj, spec, &config.detector);
    Ok((traj, verifier))
}

struct JobResult {
    instance_index: usize,
    condition: Condition,
    outcome: RunOutcome,
    path: PathBuf,
}

/// Run the clean condition, and the triggered condition when an attack is
/// configured, over every instance. One trajectory file per
/// (instance, condition); per-run failures terminate that trajectory with
/// an Error record, never the batch. Deterministic for scripted backbones
/// under any parallelism.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResult> {
    let started = std::time::Instant::now();
    let instances = load_task(config.task.kind, Path::new(&config.task.path))?;
    for instance in &instances {
        if let Some(needed) = min_budget(instance) {
            if needed > config.step_budget {
                return Err(Error::Config(format!(
                    "step_budget: instance {} needs at least {needed} steps",
                    instance.query.id
                )));
            }
        }
    }
    let backbone = Arc::new(build_backbone(&config.backbone)?);
    let spec = config.attack_spec()?;
    let out_dir = Path::new(&config.out_dir);
    let traj_dir = out_dir.join("trajectories");
    std::fs::create_dir_all(&traj_dir)?;

    let mut conditions = vec![Condition::Clean];
    if spec.is_some() {
        conditions.push(Condition::Triggered);
    }
    let jobs: Vec<(usize, Condition)> = (0..instances.len())
        .flat_map(|i| conditions.iter().map(move |c| (i, *c)))
        .collect();

    let next_job = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<JobResult>>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = config.parallelism.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next_job.fetch_add(1, Ordering::SeqCst);
                let Some((instance_index, condition)) = jobs.get(index).copied() else {
                    break;
                };
                let instance = &instances[instance_index];
                let result = (|| {
                    let (traj, verifier) =
                        execute_run(instance, &backbone, config, spec.as_ref(), condition)?;
                    let path = traj_dir
                        .join(format!("{}_{}.jsonl", instance.query.id, condition.as_str()));
                    tlog::write_log(&traj, &path)?;
                    Ok(JobResult {
                        instance_index,
                        condition,
                        outcome: RunOutcome {
                            task: config.task.kind,
                            backbone_family: config.backbone.label(),
                            attack: (condition == Condition::Triggered)
                                .then(|| spec.as_ref().map(|s| s.name))
                                .flatten(),
                            triggered: condition == Condition::Triggered,
                            verifier,
                            tokens: traj.total_tokens,
                        },
                        path,
                    })
                })();
                results.lock().expect("results lock").push(result);
            });
        }
    });

    let mut completed = Vec::with_capacity(jobs.len());
    for result in results.into_inner().expect("results lock") {
        completed.push(result?);
    }
    completed.sort_by_key(|r| (r.instance_index, r.condition));

    let clean_outcomes: Vec<RunOutcome> = completed
        .iter()
        .filter(|r| r.condition == Condition::Clean)
        .map(|r| r.outcome.clone())
        .collect();
    let triggered_outcomes: Vec<RunOutcome> = completed
        .iter()
        .filter(|r| r.condition == Condition::Triggered)
        .map(|r| r.outcome.clone())
        .collect();

    let metrics = vec![MetricsRow {
        task: config.task.kind.as_str().to_string(),
        backbone: config.backbone.label(),
        attack: spec.as_ref().map(|s| s.name.as_str().to_string()),
        clean_acc: clean_acc(&clean_outcomes),
        asr: asr(&triggered_outcomes),
        acc: acc_under_attack(&triggered_outcomes),
    }];

    let mut groups: Vec<(String, Vec<u64>)> = vec![(
        CLEAN_CONDITION.to_string(),
        clean_outcomes.iter().map(|o| o.tokens).collect(),
    )];
    if let Some(spec) = &spec {
        groups.push((
            spec.name.as_str().to_string(),
            triggered_outcomes.iter().map(|o| o.tokens).collect(),
        ));
    }
    let overhead = token_overhead(&groups);

    crate::eval::emit_report(&metrics, &[], &overhead, out_dir)?;
    let meta = serde_json::json!({
        "duration_ms": started.elapsed().as_millis() as u64,
        "finished_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or_default(),
        "instances": instances.len(),
        "conditions": conditions.len(),
        "parallelism": config.parallelism,
    });
    std::fs::write(out_dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;

    Ok(ExperimentResult {
        metrics,
        trajectory_paths: completed.into_iter().map(|r| r.path).collect(),
        aggregate: None,
        overhead,
    })
}

pub struct ReplayOutcome {
    pub trajectory: Trajectory,
    pub verifier: VerifierResult,
}

/// Reconstruct a logged trajectory, assert its digest chain, and re-run the
/// verifiers. The log is self-contained: the gold descriptor travels in the
/// header query and the attack spec (when any) alongside it.
pub fn replay(log_path: &Path) -> Result<ReplayOutcome> {
    replay_with(log_path, &DetectorConfig::default())
}

pub fn replay_with(log_path: &Path, detector: &DetectorConfig) -> Result<ReplayOutcome> {
    let trajectory = tlog::read_log(log_path)?;
    let verifier = evaluate(
        &trajectory.query.gold,
        &trajectory,
        trajectory.attack.as_ref(),
        detector,
    );
    Ok(ReplayOutcome { trajectory, verifier })
}
