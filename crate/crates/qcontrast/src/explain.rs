//! Contrastive explanations from preference-based disagreement outcomes.
//!
//! For every observation feature, the outcomes reached by the two policies
//! form a paired sample; features whose paired t-test clears the
//! significance threshold enter the rendered explanation with a direction
//! taken from the sample means.

use serde::{Deserialize, Serialize};

use crate::env::{self, OBS_DIM};
use crate::error::{Error, Result};
use crate::filter::PreferenceSet;
use crate::stats;

/// Observation feature names, agent first, other vehicle primed.
pub const FEATURE_NAMES: [&str; OBS_DIM] = ["x", "y", "h", "v", "u", "x'", "y'", "h'", "v'", "u'"];

/// Paired per-feature outcome samples; index `i` in both lists comes from
/// the same disagreement.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSamples {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl OutcomeSamples {
    pub fn len(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Extracts outcome observations column-per-feature.
pub fn outcome_samples(ps: &PreferenceSet) -> Result<OutcomeSamples> {
    if ps.is_empty() {
        return Err(Error::Stats(
            "cannot build outcome samples from an empty preference set".into(),
        ));
    }
    let mut a = vec![Vec::with_capacity(ps.len()); OBS_DIM];
    let mut b = vec![Vec::with_capacity(ps.len()); OBS_DIM];
    for rec in &ps.records {
        let obs_a = env::observe(rec.disagreement.outcome_a());
        let obs_b = env::observe(rec.disagreement.outcome_b());
        for f in 0..OBS_DIM {
            a[f].push(obs_a[f]);
            b[f].push(obs_b[f]);
        }
    }
    Ok(OutcomeSamples { a, b })
}

/// Which side of the pair reaches larger values of a feature, from policy
/// A's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Larger,
    Smaller,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Larger => write!(f, "larger"),
            Direction::Smaller => write!(f, "smaller"),
        }
    }
}

/// Test result for a single feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFinding {
    pub feature: String,
    pub t: f64,
    pub p: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub direction: Direction,
    pub significant: bool,
}

/// All ten per-feature findings plus the rendered sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub findings: Vec<FeatureFinding>,
    pub text: String,
}

impl Explanation {
    pub fn significant(&self) -> impl Iterator<Item = &FeatureFinding> {
        self.findings.iter().filter(|f| f.significant)
    }
}

fn render(findings: &[FeatureFinding]) -> String {
    let parts: Vec<String> = findings
        .iter()
        .filter(|f| f.significant)
        .map(|f| format!("{} {}", f.feature, f.direction))
        .collect();
    if parts.is_empty() {
        "No preference difference detected between policy A and policy B.".to_string()
    } else {
        format!(
            "Policy A prefers states with {} compared to policy B.",
            parts.join(", ")
        )
    }
}

/// Runs the paired t-test per feature and renders the explanation. A feature
/// is included exactly when its p-value is below `p_thres`; with a single
/// record (or otherwise undefined test) every feature is non-significant.
pub fn generate_explanation(ps: &PreferenceSet, p_thres: f64) -> Result<Explanation> {
    if !(0.0..=1.0).contains(&p_thres) {
        return Err(Error::Config(format!(
            "p-value threshold must lie in [0, 1], got {p_thres}"
        )));
    }
    let samples = outcome_samples(ps)?;
    let mut findings = Vec::with_capacity(OBS_DIM);
    for f in 0..OBS_DIM {
        let (t, p, mean_a, mean_b) = match stats::paired_t_test(&samples.a[f], &samples.b[f]) {
            Ok(r) => (r.t, r.p, r.mean_a, r.mean_b),
            Err(_) => {
                let n = samples.a[f].len() as f64;
                let mean_a = samples.a[f].iter().sum::<f64>() / n;
                let mean_b = samples.b[f].iter().sum::<f64>() / n;
                (0.0, 1.0, mean_a, mean_b)
            }
        };
        let direction = if mean_a > mean_b {
            Direction::Larger
        } else {
            Direction::Smaller
        };
        findings.push(FeatureFinding {
            feature: FEATURE_NAMES[f].to_string(),
            t,
            p,
            mean_a,
            mean_b,
            direction,
            significant: p < p_thres,
        });
    }
    let text = render(&findings);
    Ok(Explanation { findings, text })
}

/// Machine-readable findings table.
pub fn findings_csv(explanation: &Explanation) -> String {
    let mut out = String::from("feature,t,p,mean_a,mean_b,direction,significant\n");
    for f in &explanation.findings {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            f.feature, f.t, f.p, f.mean_a, f.mean_b, f.direction, f.significant
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disagreement::{Disagreement, DisagreementSet, Provenance, TrajStep};
    use crate::env::{Action, VehicleState, WorldState};
    use crate::filter::{filter, FilterThresholds};

    fn state_with(v: f64, y: f64) -> WorldState {
        WorldState {
            agent: VehicleState { x: 15.0, y, h: 0.0, v, u: 0.0 },
            other: VehicleState { x: 25.0, y: y + 30.0, h: 0.0, v: 15.0, u: 0.0 },
            step: 0,
            terminal: None,
        }
    }

    /// Builds a preference set whose A-outcomes and B-outcomes are fully
    /// controlled per record.
    fn crafted_set(outcomes: Vec<(WorldState, WorldState)>) -> PreferenceSet {
        let passing_q_a = [10.0, 0.0, 0.0, 0.0, 0.0];
        let passing_q_b = [0.0, 10.0, 0.0, 0.0, 0.0];
        let records = outcomes
            .into_iter()
            .map(|(oa, ob)| {
                let s = state_with(15.0, 0.0);
                Disagreement {
                    state: s,
                    action_a: Action::Accelerate,
                    action_b: Action::Decelerate,
                    traj_a: vec![
                        TrajStep { state: s, action: Action::Accelerate },
                        TrajStep { state: oa, action: Action::NoOp },
                    ],
                    traj_b: vec![
                        TrajStep { state: s, action: Action::Decelerate },
                        TrajStep { state: ob, action: Action::NoOp },
                    ],
                    q_a_state: passing_q_a,
                    q_b_state: passing_q_b,
                    q_a_outcome: passing_q_a,
                    q_b_outcome: passing_q_b,
                }
            })
            .collect();
        let ds = DisagreementSet {
            records,
            provenance: Provenance {
                episodes: 1,
                branch_len: 1,
                seed: 0,
                policy_a: "a".into(),
                policy_b: "b".into(),
                env_hash: 0,
            },
        };
        filter(&ds, &FilterThresholds::default()).unwrap()
    }

    fn velocity_offset_set(n: usize, offset: f64) -> PreferenceSet {
        // A's outcome velocity is B's minus `offset`; slight y jitter keeps
        // the variance of other paired features at zero
        let outcomes = (0..n)
            .map(|i| {
                let vb = 15.0 + (i as f64 % 3.0) * 0.4;
                let y = 10.0 + i as f64;
                (state_with(vb - offset, y), state_with(vb, y))
            })
            .collect();
        crafted_set(outcomes)
    }

    #[test]
    fn samples_are_paired_and_complete() {
        let ps = velocity_offset_set(7, 5.0);
        let s = outcome_samples(&ps).unwrap();
        assert_eq!(s.len(), 7);
        for f in 0..OBS_DIM {
            assert_eq!(s.a[f].len(), 7);
            assert_eq!(s.b[f].len(), 7);
        }
        // columns reassemble into the original observation rows
        for (i, rec) in ps.records.iter().enumerate() {
            let oa = env::observe(rec.disagreement.outcome_a());
            for f in 0..OBS_DIM {
                assert_eq!(s.a[f][i], oa[f]);
            }
        }
    }

    #[test]
    fn single_record_set_yields_unit_columns() {
        let ps = velocity_offset_set(1, 5.0);
        let s = outcome_samples(&ps).unwrap();
        assert_eq!(s.len(), 1);
        // t-test undefined: everything non-significant
        let e = generate_explanation(&ps, 0.05).unwrap();
        assert!(e.significant().count() == 0);
        assert!(e.text.contains("No preference difference"));
    }

    #[test]
    fn exact_velocity_shift_is_the_only_significant_feature() {
        let ps = velocity_offset_set(12, 5.0);
        let e = generate_explanation(&ps, 0.05).unwrap();
        let significant: Vec<&str> = e.significant().map(|f| f.feature.as_str()).collect();
        assert_eq!(significant, vec!["v"]);
        let v = e.findings.iter().find(|f| f.feature == "v").unwrap();
        assert_eq!(v.direction, Direction::Smaller);
        assert!(v.p < 0.05);
        assert_eq!(e.text, "Policy A prefers states with v smaller compared to policy B.");
    }

    #[test]
    fn identical_outcomes_detect_nothing() {
        let outcomes = (0..6)
            .map(|i| {
                let s = state_with(14.0 + i as f64 * 0.3, 5.0 + i as f64);
                (s, s)
            })
            .collect();
        let ps = crafted_set(outcomes);
        let e = generate_explanation(&ps, 0.05).unwrap();
        assert_eq!(e.significant().count(), 0);
        assert_eq!(
            e.text,
            "No preference difference detected between policy A and policy B."
        );
    }

    #[test]
    fn swapping_roles_flips_directions_and_negates_t() {
        let ps = velocity_offset_set(10, 3.0);
        let swapped = PreferenceSet {
            records: ps
                .records
                .iter()
                .map(|r| {
                    let mut d = r.disagreement.clone();
                    std::mem::swap(&mut d.traj_a, &mut d.traj_b);
                    std::mem::swap(&mut d.q_a_state, &mut d.q_b_state);
                    std::mem::swap(&mut d.q_a_outcome, &mut d.q_b_outcome);
                    std::mem::swap(&mut d.action_a, &mut d.action_b);
                    crate::filter::PreferenceRecord {
                        disagreement: d,
                        diagnostics: r.diagnostics,
                    }
                })
                .collect(),
            thresholds: ps.thresholds,
            provenance: ps.provenance.clone(),
        };
        let e1 = generate_explanation(&ps, 0.05).unwrap();
        let e2 = generate_explanation(&swapped, 0.05).unwrap();
        for (f1, f2) in e1.findings.iter().zip(&e2.findings) {
            assert_eq!(f1.significant, f2.significant);
            assert_eq!(f1.p.to_bits(), f2.p.to_bits());
            if f1.t != 0.0 {
                assert_eq!(f1.t, -f2.t);
                assert_ne!(f1.direction, f2.direction);
            }
        }
    }

    #[test]
    fn explanation_text_is_deterministic() {
        let ps = velocity_offset_set(9, 4.0);
        let a = generate_explanation(&ps, 0.05).unwrap();
        let b = generate_explanation(&ps, 0.05).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(findings_csv(&a), findings_csv(&b));
    }

    #[test]
    fn significance_rule_is_exactly_p_below_threshold() {
        let ps = velocity_offset_set(12, 5.0);
        let e = generate_explanation(&ps, 0.05).unwrap();
        for f in &e.findings {
            assert_eq!(f.significant, f.p < 0.05);
        }
        // threshold zero: nothing can pass a strict inequality
        let none = generate_explanation(&ps, 0.0).unwrap();
        assert_eq!(none.significant().count(), 0);
    }
}
