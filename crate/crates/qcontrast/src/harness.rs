//! Experiment orchestration: trains the policy suite, runs the three
//! comparison scenarios, gathers behavioral statistics and writes reports.
//!
//! Everything is keyed off one master seed. Policy trainings and scenario
//! collections run as independent parallel jobs with derived sub-seeds, so
//! results are byte-identical across runs regardless of scheduling.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::disagreement::{collect, DisagreementSet};
use crate::dqn::{
    act_greedy, save_trace, train_dqn, EpisodeRecord, QFunction, QPolicy, TrainConfig,
};
use crate::env::{EnvParams, MergingEnv, RewardWeights, Termination};
use crate::error::{Error, Result};
use crate::explain::{findings_csv, generate_explanation, Explanation};
use crate::filter::{filter, FilterThresholds};
use crate::seeds;

/// Desk-scale profile for continuous testing vs. the full-size run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Fast,
    Full,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Fast => "fast",
            Profile::Full => "full",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Profile::Fast),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected fast or full)"
            ))),
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvParams,
    /// Cost weights shared by every policy: goal, proximity, speed, steering.
    pub base_costs: [f64; 4],
    /// Progress weights to sweep.
    pub p_values: Vec<f64>,
    /// Template hyperparameters; per-policy copies get their own seed.
    pub train: TrainConfig,
    /// Steps for the capable policies.
    pub train_steps: u64,
    /// Steps for the undertrained `rand` policies.
    pub rand_train_steps: u64,
    /// Data-collection episodes per scenario pair.
    pub episodes: u64,
    /// Maximum disagreement-branch length.
    pub branch_len: u32,
    pub thresholds: FilterThresholds,
    pub p_thres: f64,
    /// Greedy episodes per policy for behavioral statistics.
    pub eval_episodes: u32,
    pub master_seed: u64,
    pub profile: Profile,
}

impl ExperimentConfig {
    pub fn full() -> Self {
        Self {
            env: EnvParams::default(),
            base_costs: [5.0, 10.0, 20.0, 50.0],
            p_values: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            train: TrainConfig::default(),
            train_steps: 100_000,
            rand_train_steps: 10_000,
            episodes: 1000,
            branch_len: 10,
            thresholds: FilterThresholds::default(),
            p_thres: 0.05,
            eval_episodes: 100,
            master_seed: 7,
            profile: Profile::Full,
        }
    }

    pub fn fast() -> Self {
        Self {
            train_steps: 20_000,
            rand_train_steps: 2_000,
            episodes: 100,
            profile: Profile::Fast,
            ..Self::full()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Fast => Self::fast(),
            Profile::Full => Self::full(),
        }
    }

    pub const CONFIG_KEYS: [&'static str; 21] = [
        "base_theta",
        "p_values",
        "train_steps",
        "rand_train_steps",
        "learning_rate",
        "batch_size",
        "buffer_size",
        "exploration_fraction",
        "final_epsilon",
        "discount",
        "target_update_interval",
        "learning_starts",
        "updates_per_step",
        "episodes",
        "branch_len",
        "alpha",
        "beta",
        "gamma",
        "p_thres",
        "eval_episodes",
        "seed",
    ];

    /// Profile defaults overridden by any matching keys in `cfg`; the
    /// environment block is read from the same file.
    pub fn from_config(cfg: &Config, profile: Profile) -> Result<Self> {
        let mut e = Self::for_profile(profile);
        e.env = EnvParams::from_config(cfg)?;
        if let Some(v) = cfg.get_f64_list("base_theta")? {
            if v.len() != 4 {
                return Err(Error::Config(
                    "base_theta needs exactly 4 values (goal, proximity, speed, steering)".into(),
                ));
            }
            e.base_costs.copy_from_slice(&v);
        }
        if let Some(v) = cfg.get_f64_list("p_values")? {
            if v.is_empty() {
                return Err(Error::Config("p_values must not be empty".into()));
            }
            e.p_values = v;
        }
        if let Some(v) = cfg.get_u64("train_steps")? {
            e.train_steps = v;
        }
        if let Some(v) = cfg.get_u64("rand_train_steps")? {
            e.rand_train_steps = v;
        }
        if let Some(v) = cfg.get_f64("learning_rate")? {
            e.train.learning_rate = v;
        }
        if let Some(v) = cfg.get_usize("batch_size")? {
            e.train.batch_size = v;
        }
        if let Some(v) = cfg.get_usize("buffer_size")? {
            e.train.buffer_size = v;
        }
        if let Some(v) = cfg.get_f64("exploration_fraction")? {
            e.train.exploration_fraction = v;
        }
        if let Some(v) = cfg.get_f64("final_epsilon")? {
            e.train.final_epsilon = v;
        }
        if let Some(v) = cfg.get_f64("discount")? {
            e.train.discount = v;
        }
        if let Some(v) = cfg.get_u64("target_update_interval")? {
            e.train.target_update_interval = v;
        }
        if let Some(v) = cfg.get_u64("learning_starts")? {
            e.train.learning_starts = v;
        }
        if let Some(v) = cfg.get_u32("updates_per_step")? {
            e.train.updates_per_step = v;
        }
        if let Some(v) = cfg.get_u64("episodes")? {
            e.episodes = v;
        }
        if let Some(v) = cfg.get_u32("branch_len")? {
            e.branch_len = v;
        }
        let alpha = cfg.get_f64("alpha")?.unwrap_or(e.thresholds.alpha);
        let beta = cfg.get_f64("beta")?.unwrap_or(e.thresholds.beta);
        let gamma = cfg.get_f64("gamma")?.unwrap_or(e.thresholds.gamma);
        e.thresholds = FilterThresholds::new(alpha, beta, gamma)?;
        if let Some(v) = cfg.get_f64("p_thres")? {
            e.p_thres = v;
        }
        if let Some(v) = cfg.get_u32("eval_episodes")? {
            e.eval_episodes = v;
        }
        if let Some(v) = cfg.get_u64("seed")? {
            e.master_seed = v;
        }
        e.train.validate()?;
        Ok(e)
    }

    /// All config keys this crate understands (environment + experiment).
    pub fn all_config_keys() -> Vec<&'static str> {
        let mut keys = EnvParams::CONFIG_KEYS.to_vec();
        keys.extend_from_slice(&Self::CONFIG_KEYS);
        keys
    }

    pub fn weights_for(&self, p: f64) -> RewardWeights {
        let c = self.base_costs;
        RewardWeights::new([c[0], c[1], c[2], c[3], p])
    }

    /// Sub-seeded training config for one suite policy.
    pub fn train_config_for(&self, label: &str, steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            seed: seeds::derive(self.master_seed, label),
            ..self.train.clone()
        }
    }
}

/// One policy to train: label, reward weights, hyperparameters.
#[derive(Debug, Clone)]
pub struct PolicyJob {
    pub label: String,
    pub weights: RewardWeights,
    pub train: TrainConfig,
}

/// The baseline policy plus A/B/rand triples for every progress weight.
pub fn suite_jobs(cfg: &ExperimentConfig) -> Vec<PolicyJob> {
    let mut jobs = vec![PolicyJob {
        label: "pi_safe".to_string(),
        weights: RewardWeights::new([
            cfg.base_costs[0],
            cfg.base_costs[1],
            cfg.base_costs[2],
            cfg.base_costs[3],
            0.0,
        ]),
        train: cfg.train_config_for("pi_safe", cfg.train_steps),
    }];
    for &p in &cfg.p_values {
        for (role, steps) in [
            ("a", cfg.train_steps),
            ("b", cfg.train_steps),
            ("rand", cfg.rand_train_steps),
        ] {
            let label = format!("pi_{role}_p{p}");
            jobs.push(PolicyJob {
                label: label.clone(),
                weights: cfg.weights_for(p),
                train: cfg.train_config_for(&label, steps),
            });
        }
    }
    jobs
}

/// Results of training the whole suite; divergent policies land in
/// `failures` and their scenarios are skipped later.
#[derive(Debug, Default)]
pub struct TrainedSuite {
    pub policies: BTreeMap<String, QFunction>,
    pub traces: BTreeMap<String, Vec<EpisodeRecord>>,
    pub failures: BTreeMap<String, String>,
}

/// Trains every suite policy (in parallel, each deterministically
/// sub-seeded) and persists policies and traces when `out_dir` is given.
pub fn train_suite(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainedSuite> {
    let jobs = suite_jobs(cfg);
    let results: Vec<_> = jobs
        .par_iter()
        .map(|job| {
            (
                job.label.clone(),
                train_dqn(&cfg.env, &job.weights, &job.train, &job.label),
            )
        })
        .collect();

    let mut suite = TrainedSuite::default();
    for (label, result) in results {
        match result {
            Ok(outcome) => {
                suite.traces.insert(label.clone(), outcome.trace);
                suite.policies.insert(label, outcome.policy);
            }
            Err(e) => {
                suite.failures.insert(label, e.to_string());
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (label, policy) in &suite.policies {
            policy.save(&dir.join(format!("{label}.qpol")))?;
            save_trace(&suite.traces[label], &dir.join(format!("{label}_trace.csv")))?;
        }
    }
    Ok(suite)
}

/// Greedy-rollout behavioral statistics for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub policy: String,
    pub episodes: u32,
    pub merged_episodes: u32,
    /// Mean of (agent.y - other.y) at the merge step, over merged episodes.
    pub avg_merge_y_distance: Option<f64>,
    /// Mean agent velocity over every step of every episode.
    pub avg_velocity: f64,
}

/// Rolls a policy greedily and aggregates merge-side and velocity
/// statistics. Episodes that never merge are excluded from the y-distance
/// mean and reported via `merged_episodes`.
pub fn behavior_stats(
    policy: &dyn QPolicy,
    params: &EnvParams,
    episodes: u32,
    seed: u64,
) -> Result<BehaviorStats> {
    if episodes == 0 {
        return Err(Error::Config("behavior stats need at least one episode".into()));
    }
    let mut env = MergingEnv::new(params.clone(), RewardWeights::zero(), seed);
    let mut merged = 0u32;
    let mut y_dist_sum = 0.0;
    let mut vel_sum = 0.0;
    let mut step_count = 0u64;
    for _ in 0..episodes {
        let mut state = env.reset();
        loop {
            let action = act_greedy(policy, &crate::env::observe(&state))?;
            let r = env.step(action)?;
            state = r.next;
            vel_sum += state.agent.v;
            step_count += 1;
            if let Some(reason) = r.reason {
                if reason == Termination::Merged {
                    merged += 1;
                    y_dist_sum += state.agent.y - state.other.y;
                }
                break;
            }
        }
    }
    Ok(BehaviorStats {
        policy: policy.label().to_string(),
        episodes,
        merged_episodes: merged,
        avg_merge_y_distance: (merged > 0).then(|| y_dist_sum / merged as f64),
        avg_velocity: vel_sum / step_count as f64,
    })
}

/// One comparison row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub p: f64,
    pub scenario: String,
    pub policy_a: String,
    pub policy_b: String,
    pub total_disagreements: u64,
    pub preference_disagreements: u64,
    pub explanation: Option<Explanation>,
    pub skipped: bool,
}

/// The assembled experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub profile: String,
    pub master_seed: u64,
    pub episodes: u64,
    pub branch_len: u32,
    pub rows: Vec<ScenarioRow>,
    pub behavior: Vec<BehaviorStats>,
}

/// Compares one policy pair: collect, filter, explain.
pub fn compare_pair(
    cfg: &ExperimentConfig,
    policy_a: &QFunction,
    policy_b: &QFunction,
    seed: u64,
) -> Result<(DisagreementSet, u64, Option<Explanation>)> {
    let mut env = MergingEnv::new(
        cfg.env.clone(),
        RewardWeights::new(policy_a.meta().theta),
        seed,
    );
    let ds = collect(&mut env, policy_a, policy_b, cfg.episodes, cfg.branch_len)?;
    if ds.is_empty() {
        return Ok((ds, 0, None));
    }
    let ps = filter(&ds, &cfg.thresholds)?;
    let explanation = if ps.is_empty() {
        None
    } else {
        Some(generate_explanation(&ps, cfg.p_thres)?)
    };
    Ok((ds, ps.len() as u64, explanation))
}

/// Runs the three scenarios (A vs safe, A vs B, A vs rand) for every
/// progress weight. Rows with missing or failed policies are marked skipped.
pub fn run_scenarios(cfg: &ExperimentConfig, suite: &TrainedSuite) -> Result<ScenarioReport> {
    let mut pair_specs = Vec::new();
    for &p in &cfg.p_values {
        let a = format!("pi_a_p{p}");
        for (scenario, b) in [
            ("a_vs_safe", "pi_safe".to_string()),
            ("a_vs_b", format!("pi_b_p{p}")),
            ("a_vs_rand", format!("pi_rand_p{p}")),
        ] {
            pair_specs.push((p, scenario.to_string(), a.clone(), b));
        }
    }

    let rows: Vec<ScenarioRow> = pair_specs
        .par_iter()
        .map(|(p, scenario, label_a, label_b)| {
            let (pa, pb) = match (suite.policies.get(label_a), suite.policies.get(label_b)) {
                (Some(pa), Some(pb)) => (pa, pb),
                _ => {
                    return Ok(ScenarioRow {
                        p: *p,
                        scenario: scenario.clone(),
                        policy_a: label_a.clone(),
                        policy_b: label_b.clone(),
                        total_disagreements: 0,
                        preference_disagreements: 0,
                        explanation: None,
                        skipped: true,
                    })
                }
            };
            let seed = seeds::derive(cfg.master_seed, &format!("collect/{label_a}/{label_b}"));
            let (ds, preference, explanation) = compare_pair(cfg, pa, pb, seed)?;
            Ok(ScenarioRow {
                p: *p,
                scenario: scenario.clone(),
                policy_a: label_a.clone(),
                policy_b: label_b.clone(),
                total_disagreements: ds.len() as u64,
                preference_disagreements: preference,
                explanation,
                skipped: false,
            })
        })
        .collect::<Result<_>>()?;

    let behavior: Vec<BehaviorStats> = suite
        .policies
        .par_iter()
        .map(|(label, policy)| {
            behavior_stats(
                policy,
                &cfg.env,
                cfg.eval_episodes,
                seeds::derive(cfg.master_seed, &format!("behavior/{label}")),
            )
        })
        .collect::<Result<_>>()?;

    Ok(ScenarioReport {
        profile: cfg.profile.name().to_string(),
        master_seed: cfg.master_seed,
        episodes: cfg.episodes,
        branch_len: cfg.branch_len,
        rows,
        behavior,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes the report bundle: disagreement-count table, full JSON, per-figure
/// plot data and plain-text explanations.
pub fn emit_report(report: &ScenarioReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut table = String::from("p,scenario,total_disagreements,preference_disagreements,status\n");
    for row in &report.rows {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            row.p,
            row.scenario,
            row.total_disagreements,
            row.preference_disagreements,
            if row.skipped { "skipped" } else { "ok" }
        ));
    }
    std::fs::write(out_dir.join("table4.csv"), table)?;

    let mut fig2 = String::from("policy,avg_merge_y_distance,merged_episodes,episodes\n");
    for b in &report.behavior {
        fig2.push_str(&format!(
            "{},{},{},{}\n",
            b.policy,
            fmt_opt(b.avg_merge_y_distance),
            b.merged_episodes,
            b.episodes
        ));
    }
    std::fs::write(out_dir.join("fig2_merge_y_distance.csv"), fig2)?;

    let mut fig3 = String::from("policy,avg_velocity\n");
    for b in &report.behavior {
        fig3.push_str(&format!("{},{}\n", b.policy, b.avg_velocity));
    }
    std::fs::write(out_dir.join("fig3_avg_velocity.csv"), fig3)?;

    let expl_dir = out_dir.join("explanations");
    std::fs::create_dir_all(&expl_dir)?;
    for row in &report.rows {
        if let Some(e) = &row.explanation {
            let stem = format!("p{}_{}", row.p, row.scenario);
            std::fs::write(expl_dir.join(format!("{stem}.txt")), format!("{}\n", e.text))?;
            std::fs::write(expl_dir.join(format!("{stem}_findings.csv")), findings_csv(e))?;
        }
    }

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(())
}

/// Loads a report written by [`emit_report`].
pub fn load_report(path: &Path) -> Result<ScenarioReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad report JSON: {e}")))
}

/// The full pipeline: train, evaluate behavior, run scenarios, emit reports.
/// Returns the suite and the report for further inspection.
pub fn evaluate_pipeline(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(TrainedSuite, ScenarioReport)> {
    std::fs::create_dir_all(out_dir)?;
    let suite = train_suite(cfg, Some(&out_dir.join("policies")))?;
    let report = run_scenarios(cfg, &suite)?;
    emit_report(&report, out_dir)?;
    Ok((suite, report))
}
