//! Disagreement collection.
//!
//! Policy A drives the episode. At every state where the two greedy actions
//! differ, the state is snapshotted, each policy is rolled out for up to `k`
//! steps from it, and the episode then resumes from the end of A's branch.
//! Each event is recorded together with the Q vectors of both policies at
//! the disagreement state and at their own branch outcomes, so downstream
//! filtering never needs the environment again.

use crate::dqn::{act_greedy, QPolicy};
use crate::env::{self, Action, MergingEnv, WorldState, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::wire::{self, Reader, Writer};

/// One state/action pair along a branch; the final entry's action was chosen
/// but never executed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajStep {
    pub state: WorldState,
    pub action: Action,
}

/// One disagreement event.
#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    /// The disagreement state itself.
    pub state: WorldState,
    pub action_a: Action,
    pub action_b: Action,
    /// Branch of policy A, starting at `state`, at most `k + 1` entries.
    pub traj_a: Vec<TrajStep>,
    /// Branch of policy B, starting at `state`.
    pub traj_b: Vec<TrajStep>,
    /// Q vectors at the disagreement state.
    pub q_a_state: [f64; NUM_ACTIONS],
    pub q_b_state: [f64; NUM_ACTIONS],
    /// Each policy's Q vector at its own outcome.
    pub q_a_outcome: [f64; NUM_ACTIONS],
    pub q_b_outcome: [f64; NUM_ACTIONS],
}

impl Disagreement {
    pub fn outcome_a(&self) -> &WorldState {
        &self.traj_a.last().expect("trajectory is never empty").state
    }

    pub fn outcome_b(&self) -> &WorldState {
        &self.traj_b.last().expect("trajectory is never empty").state
    }

    pub fn observation(&self) -> [f64; env::OBS_DIM] {
        env::observe(&self.state)
    }

    fn validate(&self, branch_len: u32) -> Result<()> {
        if self.action_a == self.action_b {
            return Err(Error::Format("record without an actual disagreement".into()));
        }
        let max_len = branch_len as usize + 1;
        for (name, traj) in [("A", &self.traj_a), ("B", &self.traj_b)] {
            if traj.is_empty() || traj.len() > max_len {
                return Err(Error::Format(format!(
                    "trajectory {name} has invalid length {}",
                    traj.len()
                )));
            }
            if traj[0].state != self.state {
                return Err(Error::Format(format!(
                    "trajectory {name} does not start at the disagreement state"
                )));
            }
        }
        Ok(())
    }
}

/// Collection provenance stored in set files.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub episodes: u64,
    pub branch_len: u32,
    pub seed: u64,
    pub policy_a: String,
    pub policy_b: String,
    pub env_hash: u64,
}

/// An ordered set of disagreements with its collection provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementSet {
    pub records: Vec<Disagreement>,
    pub provenance: Provenance,
}

impl DisagreementSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Rolls `policy` greedily from `start` for up to `k` steps, recording
/// (state, chosen action) pairs. Ends early at a terminal state; the final
/// entry's action is never executed. Leaves the environment at the branch's
/// last state.
fn roll_branch(
    env: &mut MergingEnv,
    start: &WorldState,
    policy: &dyn QPolicy,
    k: u32,
) -> Result<Vec<TrajStep>> {
    env.restore(start);
    let mut traj = Vec::with_capacity(k as usize + 1);
    let mut state = *start;
    loop {
        let action = act_greedy(policy, &env::observe(&state))?;
        traj.push(TrajStep { state, action });
        if traj.len() as u32 == k + 1 || state.terminal.is_some() {
            break;
        }
        state = env.step(action)?.next;
    }
    Ok(traj)
}

/// Runs `episodes` episodes under policy A and records every disagreement
/// with policy B, branching both policies for up to `branch_len` steps.
///
/// Deterministic for a fixed environment seed and policy pair. An
/// environment fault inside an episode discards that episode's partial work
/// and moves on to the next.
pub fn collect(
    env: &mut MergingEnv,
    policy_a: &dyn QPolicy,
    policy_b: &dyn QPolicy,
    episodes: u64,
    branch_len: u32,
) -> Result<DisagreementSet> {
    if episodes == 0 {
        return Err(Error::Config("need at least one collection episode".into()));
    }
    if branch_len == 0 {
        return Err(Error::Config("branch length must be at least 1".into()));
    }

    let provenance = Provenance {
        episodes,
        branch_len,
        seed: env.seed(),
        policy_a: policy_a.label().to_string(),
        policy_b: policy_b.label().to_string(),
        env_hash: env.params().hash(),
    };

    let mut records = Vec::new();
    'episodes: for _ in 0..episodes {
        let mut state = env.reset();
        while state.terminal.is_none() {
            let obs = env::observe(&state);
            let q_a = policy_a.q_values(&obs)?;
            let q_b = policy_b.q_values(&obs)?;
            let action_a = crate::dqn::greedy_action(&q_a);
            let action_b = crate::dqn::greedy_action(&q_b);

            if action_a != action_b {
                let traj_a = match roll_branch(env, &state, policy_a, branch_len) {
                    Ok(t) => t,
                    Err(Error::Policy(e)) => return Err(Error::Policy(e)),
                    Err(_) => continue 'episodes,
                };
                let traj_b = match roll_branch(env, &state, policy_b, branch_len) {
                    Ok(t) => t,
                    Err(Error::Policy(e)) => return Err(Error::Policy(e)),
                    Err(_) => continue 'episodes,
                };
                let outcome_a = traj_a.last().expect("non-empty").state;
                let outcome_b = traj_b.last().expect("non-empty").state;
                let q_a_outcome = policy_a.q_values(&env::observe(&outcome_a))?;
                let q_b_outcome = policy_b.q_values(&env::observe(&outcome_b))?;
                records.push(Disagreement {
                    state,
                    action_a,
                    action_b,
                    traj_a,
                    traj_b,
                    q_a_state: q_a,
                    q_b_state: q_b,
                    q_a_outcome,
                    q_b_outcome,
                });
                // control returns to A at the end of its own branch
                env.restore(&outcome_a);
                state = outcome_a;
            } else {
                match env.step(action_a) {
                    Ok(r) => state = r.next,
                    Err(_) => continue 'episodes,
                }
            }
        }
    }

    Ok(DisagreementSet {
        records,
        provenance,
    })
}

const SET_MAGIC: &[u8; 4] = b"QDIS";
const SET_VERSION: u32 = 1;

fn encode_q(w: &mut Writer, q: &[f64; NUM_ACTIONS]) {
    for &v in q {
        w.put_f64(v);
    }
}

fn decode_q(r: &mut Reader) -> Result<[f64; NUM_ACTIONS]> {
    let mut q = [0.0; NUM_ACTIONS];
    for v in q.iter_mut() {
        *v = r.get_f64()?;
    }
    Ok(q)
}

fn encode_traj(w: &mut Writer, traj: &[TrajStep]) {
    w.put_u32(traj.len() as u32);
    for step in traj {
        env::encode_state(w, &step.state);
        w.put_u8(step.action.index() as u8);
    }
}

fn decode_traj(r: &mut Reader) -> Result<Vec<TrajStep>> {
    let len = r.get_u32()? as usize;
    let mut traj = Vec::with_capacity(len.min(1 << 16));
    for _ in 0..len {
        let state = env::decode_state(r)?;
        let action = Action::from_index(r.get_u8()? as usize)?;
        traj.push(TrajStep { state, action });
    }
    Ok(traj)
}

pub(crate) fn encode_provenance(w: &mut Writer, p: &Provenance) {
    w.put_u64(p.episodes);
    w.put_u32(p.branch_len);
    w.put_u64(p.seed);
    w.put_str(&p.policy_a);
    w.put_str(&p.policy_b);
    w.put_u64(p.env_hash);
}

pub(crate) fn decode_provenance(r: &mut Reader) -> Result<Provenance> {
    Ok(Provenance {
        episodes: r.get_u64()?,
        branch_len: r.get_u32()?,
        seed: r.get_u64()?,
        policy_a: r.get_str()?,
        policy_b: r.get_str()?,
        env_hash: r.get_u64()?,
    })
}

pub(crate) fn encode_record(w: &mut Writer, d: &Disagreement) {
    env::encode_state(w, &d.state);
    w.put_u8(d.action_a.index() as u8);
    w.put_u8(d.action_b.index() as u8);
    encode_q(w, &d.q_a_state);
    encode_q(w, &d.q_b_state);
    encode_q(w, &d.q_a_outcome);
    encode_q(w, &d.q_b_outcome);
    encode_traj(w, &d.traj_a);
    encode_traj(w, &d.traj_b);
}

pub(crate) fn decode_record(r: &mut Reader, branch_len: u32) -> Result<Disagreement> {
    let state = env::decode_state(r)?;
    let action_a = Action::from_index(r.get_u8()? as usize)?;
    let action_b = Action::from_index(r.get_u8()? as usize)?;
    let q_a_state = decode_q(r)?;
    let q_b_state = decode_q(r)?;
    let q_a_outcome = decode_q(r)?;
    let q_b_outcome = decode_q(r)?;
    let traj_a = decode_traj(r)?;
    let traj_b = decode_traj(r)?;
    let d = Disagreement {
        state,
        action_a,
        action_b,
        traj_a,
        traj_b,
        q_a_state,
        q_b_state,
        q_a_outcome,
        q_b_outcome,
    };
    d.validate(branch_len)?;
    Ok(d)
}

/// Writes a set to its columnar binary format.
pub fn save_set(ds: &DisagreementSet, path: &std::path::Path) -> Result<()> {
    let mut w = Writer::new();
    w.put_bytes(SET_MAGIC);
    w.put_u32(SET_VERSION);
    encode_provenance(&mut w, &ds.provenance);
    w.put_u64(ds.records.len() as u64);
    for d in &ds.records {
        encode_record(&mut w, d);
    }
    std::fs::write(path, w.into_bytes())?;
    Ok(())
}

/// Loads a set, re-validating every record against the header's branch
/// length so provenance mismatches surface immediately.
pub fn load_set(path: &std::path::Path) -> Result<DisagreementSet> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    wire::expect_header(&mut r, SET_MAGIC, SET_VERSION)?;
    let provenance = decode_provenance(&mut r)?;
    let count = r.get_u64()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        records.push(decode_record(&mut r, provenance.branch_len)?);
    }
    r.finish()?;
    Ok(DisagreementSet {
        records,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvParams, RewardWeights, OBS_DIM};

    /// Scripted policy: a fixed action everywhere, except a different one
    /// while the agent's y lies inside a trigger window.
    pub(crate) struct Scripted {
        pub label: String,
        pub base: Action,
        pub window: Option<(f64, f64, Action)>,
    }

    impl QPolicy for Scripted {
        fn q_values(&self, obs: &[f64; OBS_DIM]) -> crate::error::Result<[f64; NUM_ACTIONS]> {
            let mut q = [0.0; NUM_ACTIONS];
            let mut pick = self.base;
            if let Some((lo, hi, alt)) = self.window {
                if obs[1] >= lo && obs[1] <= hi {
                    pick = alt;
                }
            }
            q[pick.index()] = 1.0;
            Ok(q)
        }

        fn label(&self) -> &str {
            &self.label
        }
    }

    fn quiet_params() -> EnvParams {
        // other vehicle far ahead: no crash, no merge, episodes run to the cap
        EnvParams {
            spawn_min: 120.0,
            spawn_max: 120.0,
            ..EnvParams::default()
        }
    }

    #[test]
    fn identical_policies_never_disagree() {
        let a = Scripted { label: "a".into(), base: Action::NoOp, window: None };
        let b = Scripted { label: "b".into(), base: Action::NoOp, window: None };
        let mut env = MergingEnv::new(quiet_params(), RewardWeights::zero(), 1);
        let ds = collect(&mut env, &a, &b, 3, 10).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.provenance.episodes, 3);
    }

    #[test]
    fn single_crafted_disagreement_is_recorded_exactly() {
        let a = Scripted { label: "a".into(), base: Action::NoOp, window: None };
        // y advances 1.5 per NoOp step; window [4.4, 4.6] is hit exactly at y = 4.5
        let b = Scripted {
            label: "b".into(),
            base: Action::NoOp,
            window: Some((4.4, 4.6, Action::Accelerate)),
        };
        let k = 10;
        let mut env = MergingEnv::new(quiet_params(), RewardWeights::zero(), 2);
        let ds = collect(&mut env, &a, &b, 1, k).unwrap();
        assert_eq!(ds.len(), 1);
        let d = &ds.records[0];
        assert_eq!(d.state.agent.y, 4.5);
        assert_eq!(d.action_a, Action::NoOp);
        assert_eq!(d.action_b, Action::Accelerate);
        assert_eq!(d.traj_a.len(), k as usize + 1);
        assert_eq!(d.traj_b.len(), k as usize + 1);
        assert_eq!(d.traj_a[0].state, d.state);
        assert_eq!(d.traj_b[0].state, d.state);
        // B accelerated at s_d, so its branch drifts ahead of A's
        assert!(d.outcome_b().agent.y > d.outcome_a().agent.y);
    }

    #[test]
    fn branches_truncate_at_terminal_states() {
        // a tight step cap ends the episode inside the branch
        let params = EnvParams {
            max_steps: 6,
            ..quiet_params()
        };
        let a = Scripted { label: "a".into(), base: Action::NoOp, window: None };
        let b = Scripted { label: "b".into(), base: Action::Accelerate, window: None };
        let mut env = MergingEnv::new(params, RewardWeights::zero(), 3);
        let ds = collect(&mut env, &a, &b, 1, 100).unwrap();
        assert_eq!(ds.len(), 1);
        let d = &ds.records[0];
        // disagreement at step 0; the cap truncates the branch to 7 states
        assert_eq!(d.traj_a.len(), 7);
        assert_eq!(d.outcome_a().terminal, Some(crate::env::Termination::MaxSteps));
        assert_eq!(d.traj_a.last().unwrap().state.terminal, d.outcome_a().terminal);
        // resuming at a terminal outcome ends the driving episode too
        assert!(env.current().terminal.is_some());
    }

    #[test]
    fn collection_is_deterministic() {
        let a = Scripted {
            label: "a".into(),
            base: Action::NoOp,
            window: Some((3.0, 9.0, Action::Decelerate)),
        };
        let b = Scripted { label: "b".into(), base: Action::NoOp, window: None };
        let run = || {
            let mut env = MergingEnv::new(EnvParams::default(), RewardWeights::zero(), 17);
            collect(&mut env, &a, &b, 5, 4).unwrap()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
        assert!(!first.is_empty());
    }

    #[test]
    fn resume_point_equals_end_of_a_branch() {
        // A's alternate action inside the window makes step counts observable:
        // after the branch, the main rollout must continue from o_A, whose
        // step counter is k ahead of s_d.
        let a = Scripted { label: "a".into(), base: Action::NoOp, window: None };
        let b = Scripted {
            label: "b".into(),
            base: Action::NoOp,
            window: Some((4.4, 4.6, Action::SteerLeft)),
        };
        let k = 6;
        let mut env = MergingEnv::new(quiet_params(), RewardWeights::zero(), 4);
        let ds = collect(&mut env, &a, &b, 1, k).unwrap();
        assert_eq!(ds.len(), 1);
        let d = &ds.records[0];
        assert_eq!(d.outcome_a().step, d.state.step + k as u64);
        // the driving episode continued: it ran to the step cap, which it
        // could only reach by resuming from o_A rather than s_d
        assert_eq!(env.current().terminal, Some(crate::env::Termination::MaxSteps));
    }

    #[test]
    fn cached_q_vectors_match_reevaluation() {
        let a = Scripted {
            label: "a".into(),
            base: Action::NoOp,
            window: Some((0.0, 30.0, Action::Accelerate)),
        };
        let b = Scripted { label: "b".into(), base: Action::NoOp, window: None };
        let mut env = MergingEnv::new(quiet_params(), RewardWeights::zero(), 5);
        let ds = collect(&mut env, &a, &b, 2, 3).unwrap();
        assert!(!ds.is_empty());
        for d in &ds.records {
            assert_eq!(d.q_a_state, a.q_values(&d.observation()).unwrap());
            assert_eq!(d.q_b_state, b.q_values(&d.observation()).unwrap());
            assert_eq!(
                d.q_a_outcome,
                a.q_values(&env::observe(d.outcome_a())).unwrap()
            );
            assert_eq!(
                d.q_b_outcome,
                b.q_values(&env::observe(d.outcome_b())).unwrap()
            );
        }
    }

    #[test]
    fn set_round_trip_preserves_everything() {
        let a = Scripted {
            label: "pi_a".into(),
            base: Action::NoOp,
            window: Some((2.0, 20.0, Action::SteerRight)),
        };
        let b = Scripted { label: "pi_b".into(), base: Action::NoOp, window: None };
        let mut env = MergingEnv::new(quiet_params(), RewardWeights::zero(), 6);
        let ds = collect(&mut env, &a, &b, 2, 5).unwrap();
        assert!(ds.len() >= 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dset");
        save_set(&ds, &path).unwrap();
        let loaded = load_set(&path).unwrap();
        assert_eq!(loaded, ds);
        // provenance is surfaced for mismatch checks by consumers
        assert_eq!(loaded.provenance.branch_len, 5);
        assert_eq!(loaded.provenance.policy_a, "pi_a");
    }

    #[test]
    fn corrupted_set_file_is_rejected() {
        let a = Scripted {
            label: "a".into(),
            base: Action::NoOp,
            window: Some((4.4, 4.6, Action::Accelerate)),
        };
        let b = Scripted { label: "b".into(), base: Action::NoOp, window: None };
        let mut env = MergingEnv::new(quiet_params(), RewardWeights::zero(), 7);
        let ds = collect(&mut env, &a, &b, 1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dset");
        save_set(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_set(&path).is_err());
    }
}
