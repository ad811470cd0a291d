//! Benchmark runner: episodes distributed round-robin over parallel workers
//! with per-episode derived seeds. Parallelism never changes results; each
//! episode depends only on (scenario, seed + episode index).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::agents::{build_agent, AgentError, AgentInstance, Zoo};
use crate::engine::log::{EpisodeLog, LogError};
use crate::engine::{EgoInput, EgoSetup, EngineConfig, EngineError, Simulation};
use crate::scenario::{load_bundle, BoundScenario, ScenarioError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Log(#[from] LogError),
}

/// What to run and how.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenarios: Vec<PathBuf>,
    pub episodes: u32,
    pub seed: u64,
    /// Mission agent id -> policy reference (zoo name, manifest name, or
    /// `remote:host:port`).
    pub assignments: BTreeMap<String, String>,
    pub record_dir: Option<PathBuf>,
    pub parallel: usize,
    pub gzip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenarios: vec![],
            episodes: 1,
            seed: 0,
            assignments: BTreeMap::new(),
            record_dir: None,
            parallel: 1,
            gzip: false,
        }
    }
}

/// Outcome of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeSummary {
    pub scenario: String,
    pub episode: u32,
    pub seed: u64,
    pub steps: u64,
    pub collided: BTreeMap<String, bool>,
    pub completed: BTreeMap<String, bool>,
    pub log_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub episodes: Vec<EpisodeSummary>,
    pub logs: Vec<EpisodeLog>,
}

impl RunOutcome {
    pub fn summary_line(&self) -> String {
        let total = self.episodes.len();
        let collided = self
            .episodes
            .iter()
            .filter(|e| e.collided.values().any(|c| *c))
            .count();
        let completed = self
            .episodes
            .iter()
            .filter(|e| !e.completed.is_empty() && e.completed.values().all(|c| *c))
            .count();
        format!("episodes={total} with_collision={collided} all_completed={completed}")
    }
}

/// Run one episode of a bound scenario with the given policy assignments.
pub fn run_episode(
    scenario: &BoundScenario,
    seed: u64,
    assignments: &BTreeMap<String, String>,
    zoo: &Arc<Zoo>,
    config: &EngineConfig,
) -> Result<(EpisodeLog, EpisodeSummary), RunError> {
    // resolve policies and interfaces
    let mut egos: BTreeMap<String, EgoSetup> = BTreeMap::new();
    let mut drivers: BTreeMap<String, AgentInstance> = BTreeMap::new();
    for mission in &scenario.missions {
        let reference = assignments
            .get(&mission.agent_id)
            .cloned()
            .unwrap_or_else(|| "keep_lane".to_string());
        let spec = zoo.resolve(&reference)?;
        let instance = build_agent(
            &spec,
            zoo,
            format!("ego:{}:{}", mission.agent_id, seed),
            &config.remote,
        )?;
        egos.insert(
            mission.agent_id.clone(),
            EgoSetup {
                interface: spec.interface.clone(),
                policy_label: reference,
            },
        );
        drivers.insert(mission.agent_id.clone(), instance);
    }

    let (mut sim, mut last) =
        Simulation::reset(scenario, seed, &egos, zoo.clone(), config.clone())?;
    let mut collided: BTreeMap<String, bool> = BTreeMap::new();
    let mut completed: BTreeMap<String, bool> = BTreeMap::new();
    for m in &scenario.missions {
        collided.insert(m.agent_id.clone(), false);
        completed.insert(m.agent_id.clone(), false);
    }

    let step_cap = scenario.spec.max_episode_steps as u64 + 8;
    while !sim.all_done() && sim.world.step_index < step_cap {
        let mut inputs: BTreeMap<String, EgoInput> = BTreeMap::new();
        for id in sim.live_egos() {
            let result = &last[&id];
            let driver = drivers.get_mut(&id).expect("driver per mission");
            let (action, substituted) =
                driver.act(sim.world.step_index, &result.observation, &result.context);
            inputs.insert(
                id,
                EgoInput {
                    action,
                    substituted,
                },
            );
        }
        let results = sim.step(&inputs)?;
        for (id, r) in &results {
            if r.events.collision {
                collided.insert(id.clone(), true);
            }
            if r.events.reached_goal {
                completed.insert(id.clone(), true);
            }
            last.insert(id.clone(), r.clone());
        }
    }
    for driver in drivers.values_mut() {
        driver.close();
    }

    let steps = sim.world.step_index;
    let log = sim.log;
    let summary = EpisodeSummary {
        scenario: scenario.name.clone(),
        episode: 0,
        seed,
        steps,
        collided,
        completed,
        log_path: None,
    };
    Ok((log, summary))
}

/// Run the configured batch. Episodes are assigned to scenarios round-robin
/// and to workers round-robin; per-episode seed = seed + episode index.
pub fn run(config: &RunConfig, zoo: Arc<Zoo>) -> Result<RunOutcome, RunError> {
    if config.episodes < 1 {
        return Err(RunError::BadConfig("episodes must be >= 1".into()));
    }
    if config.parallel < 1 {
        return Err(RunError::BadConfig("parallel must be >= 1".into()));
    }
    if config.scenarios.is_empty() {
        return Err(RunError::BadConfig("at least one scenario required".into()));
    }

    let mut scenarios: Vec<Arc<BoundScenario>> = Vec::new();
    for path in &config.scenarios {
        scenarios.push(Arc::new(load_bundle(path)?));
    }

    let workers = config.parallel.min(config.episodes as usize);
    let mut slots: Vec<Option<(EpisodeLog, EpisodeSummary)>> =
        (0..config.episodes).map(|_| None).collect();

    std::thread::scope(|scope| -> Result<(), RunError> {
        let mut handles = Vec::new();
        for w in 0..workers {
            let scenarios = &scenarios;
            let zoo = zoo.clone();
            let run_cfg = config.clone();
            handles.push(scope.spawn(move || -> Result<Vec<(u32, EpisodeLog, EpisodeSummary)>, RunError> {
                let mut done = Vec::new();
                let mut i = w as u32;
                while i < run_cfg.episodes {
                    let scenario = &scenarios[i as usize % scenarios.len()];
                    let seed = run_cfg.seed + i as u64;
                    let engine_cfg = EngineConfig::default();
                    let (log, mut summary) =
                        run_episode(scenario, seed, &run_cfg.assignments, &zoo, &engine_cfg)?;
                    summary.episode = i;
                    done.push((i, log, summary));
                    i += workers as u32;
                }
                Ok(done)
            }));
        }
        for handle in handles {
            let results = handle.join().expect("worker panicked")?;
            for (i, log, summary) in results {
                slots[i as usize] = Some((log, summary));
            }
        }
        Ok(())
    })?;

    let mut outcome = RunOutcome {
        episodes: Vec::with_capacity(config.episodes as usize),
        logs: Vec::with_capacity(config.episodes as usize),
    };
    for (i, slot) in slots.into_iter().enumerate() {
        let (log, mut summary) = slot.expect("episode completed");
        if let Some(dir) = &config.record_dir {
            let ext = if config.gzip { "jsonl.gz" } else { "jsonl" };
            let path = dir.join(format!("{}_ep{:03}.{ext}", summary.scenario, i));
            log.write_to(&path)?;
            summary.log_path = Some(path);
        }
        outcome.episodes.push(summary);
        outcome.logs.push(log);
    }
    Ok(outcome)
}

/// Plain-text per-step trace of a recorded episode.
pub fn dump_trace(log: &EpisodeLog) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# scenario={} seed={} agents={}\n",
        log.header.scenario,
        log.header.seed,
        log.header
            .agents
            .keys()
            .cloned()
            .collect::<Vec<_>>()
            .join("+")
    ));
    for step in &log.steps {
        let mut egos = String::new();
        for v in &step.vehicles {
            if log.header.agents.contains_key(v.id.as_str()) {
                egos.push_str(&format!(
                    " {}=({:.2},{:.2} v={:.2})",
                    v.id, v.x, v.y, v.speed
                ));
            }
        }
        let traffic = step
            .vehicles
            .iter()
            .filter(|v| !log.header.agents.contains_key(v.id.as_str()))
            .count();
        out.push_str(&format!(
            "step={:<5} t={:<7.1}{} traffic={} events={}\n",
            step.step,
            step.time,
            egos,
            traffic,
            step.events
                .iter()
                .filter(|(_, e)| e.collision || e.reached_goal || e.off_road || e.timeout)
                .map(|(a, e)| {
                    let mut tags = Vec::new();
                    if e.collision {
                        tags.push("collision");
                    }
                    if e.reached_goal {
                        tags.push("goal");
                    }
                    if e.off_road {
                        tags.push("off_road");
                    }
                    if e.timeout {
                        tags.push("timeout");
                    }
                    format!("{a}:{}", tags.join("+"))
                })
                .collect::<Vec<_>>()
                .join(",")
        ));
    }
    out
}

/// Validate and canonicalize every scenario in a directory: binds each
/// `*.json` scenario, caches routes, writes `build/<name>.bundle.json`.
/// Returns (bundle path, content hash) per scenario; unchanged inputs give
/// identical hashes.
pub fn build_scenarios(dir: &Path) -> Result<Vec<(PathBuf, String)>, RunError> {
    let mut out = Vec::new();
    let build_dir = dir.join("build");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| RunError::Scenario(ScenarioError::Io(e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(RunError::BadConfig(format!(
            "no scenario files in {}",
            dir.display()
        )));
    }
    for path in entries {
        let bound = load_bundle(&path)?;
        let canonical_spec = crate::scenario::serialize_scenario(&bound.spec);
        let map_path = dir.join(&bound.spec.map);
        let map_doc = std::fs::read_to_string(&map_path)
            .map_err(|e| RunError::Scenario(ScenarioError::Io(e)))?;
        let map_value: serde_json::Value = serde_json::from_str(&map_doc)
            .map_err(|e| RunError::Scenario(ScenarioError::Parse(e.to_string())))?;
        let routes: Vec<serde_json::Value> = bound
            .missions
            .iter()
            .map(|m| {
                serde_json::json!({
                    "agent_id": m.agent_id,
                    "lanes": m.route.lane_ids,
                    "length": m.route.total_length,
                })
            })
            .collect();
        let bundle = serde_json::json!({
            "format": 1,
            "name": bound.name,
            "scenario": serde_json::from_str::<serde_json::Value>(&canonical_spec).unwrap(),
            "map": map_value,
            "routes": routes,
        });
        let bytes = serde_json::to_string_pretty(&bundle).unwrap();
        let hash = crate::engine::log::config_hash(&[&bytes]);
        std::fs::create_dir_all(&build_dir).map_err(|e| RunError::Scenario(ScenarioError::Io(e)))?;
        let out_path = build_dir.join(format!("{}.bundle.json", bound.name));
        let tmp = out_path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| RunError::Scenario(ScenarioError::Io(e)))?;
        std::fs::rename(&tmp, &out_path).map_err(|e| RunError::Scenario(ScenarioError::Io(e)))?;
        out.push((out_path, hash));
    }
    Ok(out)
}
