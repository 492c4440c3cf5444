//! Drives the merging environment with a hand-scripted controller and prints
//! the trajectory: open a gap to the other vehicle, then sweep into the goal
//! lane and straighten out.
//!
//! Run with `cargo run --example drive [seed]`.

use qcontrast::env::{observe, Action, EnvParams, MergingEnv, RewardWeights, Termination};

/// One decision per step: speed control until the gap is safe, then a
/// proportional lateral controller on heading and steering.
fn controller(params: &EnvParams, obs: &[f64; 10]) -> Action {
    let (x, h, v, u) = (obs[0], obs[2], obs[3], obs[4]);
    let gap = obs[6] - obs[1]; // other.y - agent.y

    // longitudinal phase: fall back (or pull ahead) until a car length plus
    // margin separates the vehicles
    if gap.abs() < 12.0 {
        return if gap >= 0.0 {
            // other is ahead: drop back
            if v > 11.0 { Action::Decelerate } else { Action::NoOp }
        } else {
            // other is behind: pull away
            if v < params.v_max - 0.5 { Action::Accelerate } else { Action::NoOp }
        };
    }

    // lateral phase: cascade of proportional loops with tight rate caps so
    // the heading stays shallow and settles before the centerline
    let err = params.x_goal - x;
    let h_des = (0.02 * err).clamp(-0.12, 0.12);
    let u_des = (150.0 * (h_des - h)).clamp(-12.0, 12.0);
    if u < u_des - 1.6 {
        Action::SteerRight
    } else if u > u_des + 1.6 {
        Action::SteerLeft
    } else if v < params.v_init - 1.0 {
        Action::Accelerate
    } else {
        Action::NoOp
    }
}

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(42);

    let params = EnvParams::default();
    let mut env = MergingEnv::new(params.clone(), RewardWeights::safe(), seed);

    let mut outcomes = std::collections::BTreeMap::<String, u32>::new();
    let episodes = 100;
    for ep in 0..episodes {
        let mut state = env.reset();
        let mut ret = 0.0;
        let trace = ep == 0;
        if trace {
            println!("episode 0 (offset {:+.1}):", state.other.y - state.agent.y);
            println!("{:>4} {:>7} {:>7} {:>7} {:>7} {:>6} {:>12}", "step", "x", "y", "h", "v", "u", "action");
        }
        loop {
            let action = controller(&params, &observe(&state));
            let r = env.step(action).expect("non-terminal state");
            ret += r.reward;
            state = r.next;
            if trace && state.step % 10 == 0 {
                println!(
                    "{:4} {:7.2} {:7.1} {:7.3} {:7.2} {:6.1} {:>12}",
                    state.step, state.agent.x, state.agent.y, state.agent.h, state.agent.v,
                    state.agent.u, action.to_string()
                );
            }
            if let Some(reason) = r.reason {
                if trace {
                    println!(
                        "  -> {reason} at step {} (return {ret:.1}, y-distance {:+.1})",
                        state.step,
                        state.agent.y - state.other.y
                    );
                }
                *outcomes.entry(reason.to_string()).or_default() += 1;
                if reason == Termination::Merged && trace {
                    println!(
                        "  merged {} the other vehicle",
                        if state.agent.y > state.other.y { "in front of" } else { "behind" }
                    );
                }
                break;
            }
        }
    }
    println!("\noutcomes over {episodes} episodes: {outcomes:?}");
}
