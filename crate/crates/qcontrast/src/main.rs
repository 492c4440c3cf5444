//! Thin CLI over the library pipeline.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use qcontrast::config::Config;
use qcontrast::disagreement::{collect, load_set, save_set};
use qcontrast::dqn::{train_dqn, QFunction, QPolicy};
use qcontrast::env::MergingEnv;
use qcontrast::explain::{findings_csv, generate_explanation};
use qcontrast::filter::{filter, load_preference_set, save_preference_set, FilterThresholds};
use qcontrast::harness::{
    behavior_stats, evaluate_pipeline, suite_jobs, ExperimentConfig, Profile,
};
use qcontrast::seeds;

#[derive(Parser)]
#[command(name = "qcontrast", version, about = "Train, compare and explain Q-learning driving policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy of the suite and write it to disk.
    Train {
        /// Flat key = value config file (environment + experiment keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Suite label: pi_safe, pi_a_p<k>, pi_b_p<k> or pi_rand_p<k>.
        #[arg(long)]
        policy: String,
        /// Overrides the seed derived from the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Profile supplying the training defaults.
        #[arg(long, default_value = "full")]
        profile: String,
        /// Output directory for the policy and its trace.
        #[arg(long, default_value = "out/policies")]
        out: PathBuf,
    },
    /// Roll policy A against policy B and record their disagreements.
    Collect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "policy-a")]
        policy_a: PathBuf,
        #[arg(long = "policy-b")]
        policy_b: PathBuf,
        /// Number of data-collection episodes.
        #[arg(long)]
        episodes: Option<u64>,
        /// Maximum disagreement-branch length.
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output disagreement-set file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep only preference-based disagreements.
    Filter {
        /// Input disagreement-set file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        /// Output preference-set file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the contrastive explanation from a preference set.
    Explain {
        /// Input preference-set file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "p-thres", default_value_t = 0.05)]
        p_thres: f64,
        /// Output stem; writes <out>.txt and <out>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: train the suite, run all scenarios, emit reports.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// fast (desk-scale) or full.
        #[arg(long, default_value = "fast")]
        profile: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Greedy-rollout behavior statistics for one saved policy.
    Behavior {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    };
    cfg.check_known(&ExperimentConfig::all_config_keys())?;
    Ok(cfg)
}

fn experiment_config(
    path: &Option<PathBuf>,
    profile: &str,
    seed: Option<u64>,
) -> anyhow::Result<ExperimentConfig> {
    let profile: Profile = profile.parse()?;
    let cfg = load_config(path)?;
    let mut exp = ExperimentConfig::from_config(&cfg, profile)?;
    if let Some(seed) = seed {
        exp.master_seed = seed;
    }
    Ok(exp)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train { config, policy, seed, profile, out } => {
            let exp = experiment_config(&config, &profile, None)?;
            let job = suite_jobs(&exp)
                .into_iter()
                .find(|j| j.label == policy)
                .with_context(|| {
                    format!(
                        "unknown policy label `{policy}`; expected pi_safe or pi_{{a,b,rand}}_p<k> \
                         with k in the configured p_values"
                    )
                })?;
            let mut train_cfg = job.train;
            if let Some(seed) = seed {
                train_cfg.seed = seed;
            }
            std::fs::create_dir_all(&out)?;
            let started = Instant::now();
            let outcome = train_dqn(&exp.env, &job.weights, &train_cfg, &job.label)?;
            let policy_path = out.join(format!("{}.qpol", job.label));
            outcome.policy.save(&policy_path)?;
            qcontrast::dqn::save_trace(&outcome.trace, &out.join(format!("{}_trace.csv", job.label)))?;
            println!(
                "trained {} ({} steps, {} episodes) in {:.1?} -> {}",
                job.label,
                train_cfg.total_steps,
                outcome.trace.len(),
                started.elapsed(),
                policy_path.display()
            );
        }
        Command::Collect { config, policy_a, policy_b, episodes, k, seed, out } => {
            let exp = experiment_config(&config, "full", None)?;
            let a = QFunction::load(&policy_a)
                .with_context(|| format!("loading {}", policy_a.display()))?;
            let b = QFunction::load(&policy_b)
                .with_context(|| format!("loading {}", policy_b.display()))?;
            let episodes = episodes.unwrap_or(exp.episodes);
            let k = k.unwrap_or(exp.branch_len);
            let seed = seed.unwrap_or_else(|| {
                seeds::derive(
                    exp.master_seed,
                    &format!("collect/{}/{}", a.label(), b.label()),
                )
            });
            let mut env = MergingEnv::new(
                exp.env.clone(),
                qcontrast::env::RewardWeights::new(a.meta().theta),
                seed,
            );
            let ds = collect(&mut env, &a, &b, episodes, k)?;
            save_set(&ds, &out)?;
            println!(
                "collected {} disagreements over {episodes} episodes ({} vs {}) -> {}",
                ds.len(),
                a.label(),
                b.label(),
                out.display()
            );
        }
        Command::Filter { input, alpha, beta, gamma, out } => {
            let ds = load_set(&input)?;
            let thresholds = FilterThresholds::new(alpha, beta, gamma)?;
            if ds.is_empty() {
                bail!("disagreement set {} is empty", input.display());
            }
            let ps = filter(&ds, &thresholds)?;
            save_preference_set(&ps, &out)?;
            println!(
                "{} of {} disagreements are preference-based (alpha {alpha}, beta {beta}, gamma {gamma}) -> {}",
                ps.len(),
                ds.len(),
                out.display()
            );
        }
        Command::Explain { input, p_thres, out } => {
            let ps = load_preference_set(&input)?;
            if ps.is_empty() {
                bail!(
                    "preference set {} is empty; no explanation to generate",
                    input.display()
                );
            }
            let e = generate_explanation(&ps, p_thres)?;
            println!("{}", e.text);
            if let Some(stem) = out {
                let txt = stem.with_extension("txt");
                let csv = stem.with_extension("csv");
                std::fs::write(&txt, format!("{}\n", e.text))?;
                std::fs::write(&csv, findings_csv(&e))?;
                println!("wrote {} and {}", txt.display(), csv.display());
            }
        }
        Command::Evaluate { config, profile, seed, out } => {
            let exp = experiment_config(&config, &profile, seed)?;
            let started = Instant::now();
            let (suite, report) = evaluate_pipeline(&exp, &out)?;
            for (label, err) in &suite.failures {
                eprintln!("warning: training {label} failed: {err}");
            }
            println!(
                "profile {} seed {}: {} policies, {} scenario rows in {:.1?}",
                report.profile,
                report.master_seed,
                suite.policies.len(),
                report.rows.len(),
                started.elapsed()
            );
            for row in &report.rows {
                println!(
                    "  p={} {:<10} total {:>6} preference {:>6}{}",
                    row.p,
                    row.scenario,
                    row.total_disagreements,
                    row.preference_disagreements,
                    if row.skipped { "  (skipped)" } else { "" }
                );
            }
            println!("reports written to {}", out.display());
        }
        Command::Behavior { config, policy, episodes, seed } => {
            let exp = experiment_config(&config, "full", None)?;
            let p = QFunction::load(&policy)
                .with_context(|| format!("loading {}", policy.display()))?;
            let stats = behavior_stats(&p, &exp.env, episodes, seed)?;
            println!(
                "{}: merged {}/{} episodes, avg merge y-distance {}, avg velocity {:.3}",
                stats.policy,
                stats.merged_episodes,
                stats.episodes,
                stats
                    .avg_merge_y_distance
                    .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}")),
                stats.avg_velocity
            );
        }
    }
    Ok(())
}
