//! Three-lane merging environment.
//!
//! The agent starts in the center lane and has to merge into the right lane,
//! which is occupied by a second vehicle driving straight at constant speed.
//! Kinematics are a rear-axle bicycle model integrated with explicit Euler
//! steps; actions are five discrete speed/steering adjustments. Episodes end
//! on a successful merge, a crash, or a step cap.
//!
//! Every state is a plain value and can be snapshotted and restored exactly,
//! which the disagreement collector relies on to branch two policies from
//! the same state.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

/// Observation width: five features per vehicle, agent first.
pub const OBS_DIM: usize = 10;
/// Number of discrete actions.
pub const NUM_ACTIONS: usize = 5;

/// Lateral tolerance around the goal centerline for a successful merge.
pub const MERGE_X_TOL: f64 = 1.0;
/// Heading tolerance (degrees) for a successful merge.
pub const MERGE_H_TOL_DEG: f64 = 3.0;

const MERGE_BONUS: f64 = 1000.0;
const CRASH_PENALTY: f64 = -1000.0;
const OFF_ROAD_PENALTY: f64 = -10.0;

/// Speed multiplier applied by the accelerate/decelerate actions.
const SPEED_FACTOR: f64 = 0.1;
/// Steering increment (degrees) applied by the steer actions.
const STEER_STEP_DEG: f64 = 3.0;

/// Pose of one vehicle: rear-axle position, heading, velocity, steering angle.
///
/// `h` is in radians with 0 pointing straight down the lane; `u` is the
/// steering wheel angle in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub v: f64,
    pub u: f64,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Merged,
    Crashed,
    MaxSteps,
}

impl Termination {
    fn code(self) -> u8 {
        match self {
            Termination::Merged => 1,
            Termination::Crashed => 2,
            Termination::MaxSteps => 3,
        }
    }

    fn from_code(code: u8) -> Result<Option<Termination>> {
        match code {
            0 => Ok(None),
            1 => Ok(Some(Termination::Merged)),
            2 => Ok(Some(Termination::Crashed)),
            3 => Ok(Some(Termination::MaxSteps)),
            other => Err(Error::Format(format!("bad termination code {other}"))),
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::Merged => write!(f, "merged"),
            Termination::Crashed => write!(f, "crashed"),
            Termination::MaxSteps => write!(f, "max-steps"),
        }
    }
}

/// Full simulator state. Copyable; a copy is an exact snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldState {
    pub agent: VehicleState,
    pub other: VehicleState,
    pub step: u64,
    pub terminal: Option<Termination>,
}

/// The five discrete actions, in their stable index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Accelerate,
    Decelerate,
    SteerLeft,
    SteerRight,
    NoOp,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Accelerate,
        Action::Decelerate,
        Action::SteerLeft,
        Action::SteerRight,
        Action::NoOp,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::Accelerate => 0,
            Action::Decelerate => 1,
            Action::SteerLeft => 2,
            Action::SteerRight => 3,
            Action::NoOp => 4,
        }
    }

    pub fn from_index(idx: usize) -> Result<Action> {
        Action::ALL
            .get(idx)
            .copied()
            .ok_or_else(|| Error::Format(format!("bad action index {idx}")))
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Action::Accelerate => "accelerate",
            Action::Decelerate => "decelerate",
            Action::SteerLeft => "steer-left",
            Action::SteerRight => "steer-right",
            Action::NoOp => "no-op",
        };
        write!(f, "{name}")
    }
}

/// Environment geometry and dynamics parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    pub num_lanes: u32,
    pub lane_width: f64,
    pub car_length: f64,
    pub car_width: f64,
    pub v_init: f64,
    pub v_max: f64,
    pub steer_min: f64,
    pub steer_max: f64,
    pub dt: f64,
    pub max_steps: u64,
    pub sigma: f64,
    pub spawn_min: f64,
    pub spawn_max: f64,
    pub x_goal: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            num_lanes: 3,
            lane_width: 10.0,
            car_length: 10.0,
            car_width: 5.0,
            v_init: 15.0,
            v_max: 20.0,
            steer_min: -30.0,
            steer_max: 30.0,
            dt: 0.1,
            max_steps: 200,
            sigma: 5.0_f64.sqrt(),
            spawn_min: -20.0,
            spawn_max: 20.0,
            x_goal: 25.0,
        }
    }
}

impl EnvParams {
    pub const CONFIG_KEYS: [&'static str; 14] = [
        "num_lanes",
        "lane_width",
        "car_length",
        "car_width",
        "v_init",
        "v_max",
        "steer_min",
        "steer_max",
        "dt",
        "max_steps",
        "sigma",
        "spawn_min",
        "spawn_max",
        "x_goal",
    ];

    /// Defaults overridden by any matching keys in `cfg`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let mut p = Self::default();
        if let Some(v) = cfg.get_u32("num_lanes")? {
            p.num_lanes = v;
        }
        if let Some(v) = cfg.get_f64("lane_width")? {
            p.lane_width = v;
        }
        if let Some(v) = cfg.get_f64("car_length")? {
            p.car_length = v;
        }
        if let Some(v) = cfg.get_f64("car_width")? {
            p.car_width = v;
        }
        if let Some(v) = cfg.get_f64("v_init")? {
            p.v_init = v;
        }
        if let Some(v) = cfg.get_f64("v_max")? {
            p.v_max = v;
        }
        if let Some(v) = cfg.get_f64("steer_min")? {
            p.steer_min = v;
        }
        if let Some(v) = cfg.get_f64("steer_max")? {
            p.steer_max = v;
        }
        if let Some(v) = cfg.get_f64("dt")? {
            p.dt = v;
        }
        if let Some(v) = cfg.get_u64("max_steps")? {
            p.max_steps = v;
        }
        if let Some(v) = cfg.get_f64("sigma")? {
            p.sigma = v;
        }
        if let Some(v) = cfg.get_f64("spawn_min")? {
            p.spawn_min = v;
        }
        if let Some(v) = cfg.get_f64("spawn_max")? {
            p.spawn_max = v;
        }
        if let Some(v) = cfg.get_f64("x_goal")? {
            p.x_goal = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_lanes == 0
            || self.lane_width <= 0.0
            || self.car_length <= 0.0
            || self.car_width <= 0.0
            || self.v_max <= 0.0
            || self.dt <= 0.0
            || self.sigma <= 0.0
            || self.max_steps == 0
        {
            return Err(Error::Config("environment dimensions must be positive".into()));
        }
        if self.v_init < 0.0 || self.v_init > self.v_max {
            return Err(Error::Config("v_init must lie in [0, v_max]".into()));
        }
        if self.steer_min >= self.steer_max {
            return Err(Error::Config("steer_min must be below steer_max".into()));
        }
        if self.spawn_min > self.spawn_max {
            return Err(Error::Config("spawn_min must not exceed spawn_max".into()));
        }
        Ok(())
    }

    pub fn road_width(&self) -> f64 {
        self.num_lanes as f64 * self.lane_width
    }

    /// Centerline of the lane the agent starts in (middle lane).
    pub fn start_lane_center(&self) -> f64 {
        (self.num_lanes as f64 / 2.0) * self.lane_width
    }

    /// Stable hash of the parameter set, used as provenance in data files.
    pub fn hash(&self) -> u64 {
        let mut w = Writer::new();
        w.put_u32(self.num_lanes);
        for v in [
            self.lane_width,
            self.car_length,
            self.car_width,
            self.v_init,
            self.v_max,
            self.steer_min,
            self.steer_max,
            self.dt,
            self.sigma,
            self.spawn_min,
            self.spawn_max,
            self.x_goal,
        ] {
            w.put_f64(v);
        }
        w.put_u64(self.max_steps);
        crate::seeds::fnv1a64(&w.into_bytes())
    }
}

/// Reward weights `[goal, proximity, speed-dev, steer-dev, progress]`.
///
/// The first four enter the per-step reward as costs, progress as a bonus;
/// magnitudes are taken so the sign convention cannot be configured away.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights(pub [f64; 5]);

impl RewardWeights {
    pub fn new(theta: [f64; 5]) -> Self {
        Self(theta)
    }

    /// The safety-oriented baseline weights.
    pub fn safe() -> Self {
        Self([5.0, 10.0, 20.0, 50.0, 0.0])
    }

    /// Baseline weights with the progress coefficient swapped in.
    pub fn with_progress(p: f64) -> Self {
        Self([5.0, 10.0, 20.0, 50.0, p])
    }

    pub fn zero() -> Self {
        Self([0.0; 5])
    }
}

/// Per-step reward features, each normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub d_goal: f64,
    pub d_car: f64,
    pub d_vel: f64,
    pub d_steer: f64,
    pub d_prog: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 5] {
        [self.d_goal, self.d_car, self.d_vel, self.d_steer, self.d_prog]
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next: WorldState,
    pub reward: f64,
    pub reason: Option<Termination>,
    pub features: FeatureVector,
}

impl StepResult {
    pub fn terminal(&self) -> bool {
        self.reason.is_some()
    }
}

/// Fresh episode start: agent centered in the middle lane, other vehicle on
/// the goal centerline at a uniformly drawn longitudinal offset.
pub fn reset<R: Rng>(params: &EnvParams, rng: &mut R) -> WorldState {
    let offset = if params.spawn_min == params.spawn_max {
        params.spawn_min
    } else {
        rng.gen_range(params.spawn_min..=params.spawn_max)
    };
    WorldState {
        agent: VehicleState {
            x: params.start_lane_center(),
            y: 0.0,
            h: 0.0,
            v: params.v_init,
            u: 0.0,
        },
        other: VehicleState {
            x: params.x_goal,
            y: offset,
            h: 0.0,
            v: params.v_init,
            u: 0.0,
        },
        step: 0,
        terminal: None,
    }
}

/// Applies an action and advances both vehicles one time step.
///
/// The action mutates velocity or steering first, then one Euler step of the
/// rear-axle bicycle model runs with wheelbase equal to the car length.
pub fn step(
    params: &EnvParams,
    weights: &RewardWeights,
    state: &WorldState,
    action: Action,
) -> Result<StepResult> {
    if let Some(reason) = state.terminal {
        return Err(Error::Env(format!(
            "cannot step a terminal state (episode ended: {reason})"
        )));
    }

    let mut agent = state.agent;
    match action {
        Action::Accelerate => agent.v = (agent.v * (1.0 + SPEED_FACTOR)).clamp(0.0, params.v_max),
        Action::Decelerate => agent.v = (agent.v * (1.0 - SPEED_FACTOR)).clamp(0.0, params.v_max),
        Action::SteerLeft => {
            agent.u = (agent.u - STEER_STEP_DEG).clamp(params.steer_min, params.steer_max)
        }
        Action::SteerRight => {
            agent.u = (agent.u + STEER_STEP_DEG).clamp(params.steer_min, params.steer_max)
        }
        Action::NoOp => {}
    }

    let (sin_h, cos_h) = agent.h.sin_cos();
    agent.x += agent.v * sin_h * params.dt;
    agent.y += agent.v * cos_h * params.dt;
    agent.h += agent.v / params.car_length * agent.u.to_radians().tan() * params.dt;

    let mut other = state.other;
    other.y += other.v * params.dt;

    let mut next = WorldState {
        agent,
        other,
        step: state.step + 1,
        terminal: None,
    };
    let reason = termination(params, &next);
    next.terminal = reason;

    let features = reward_features(state, &next, params);
    let reward = reward_total(&features, weights, reason, off_road(params, &next.agent));
    Ok(StepResult {
        next,
        reward,
        reason,
        features,
    })
}

fn termination(params: &EnvParams, s: &WorldState) -> Option<Termination> {
    if crashed(params, s) {
        Some(Termination::Crashed)
    } else if merged(params, &s.agent) {
        Some(Termination::Merged)
    } else if s.step >= params.max_steps {
        Some(Termination::MaxSteps)
    } else {
        None
    }
}

/// Axis-aligned rectangle overlap; each body spans `car_width` laterally and
/// extends one `car_length` forward of the rear axle.
pub fn crashed(params: &EnvParams, s: &WorldState) -> bool {
    (s.agent.x - s.other.x).abs() < params.car_width
        && (s.agent.y - s.other.y).abs() < params.car_length
}

/// Within the goal-lane centerline window and nearly straight.
pub fn merged(params: &EnvParams, agent: &VehicleState) -> bool {
    (agent.x - params.x_goal).abs() < MERGE_X_TOL
        && agent.h.abs() < MERGE_H_TOL_DEG.to_radians()
}

/// Any part of the body outside the paved width.
pub fn off_road(params: &EnvParams, agent: &VehicleState) -> bool {
    agent.x - params.car_width / 2.0 < 0.0 || agent.x + params.car_width / 2.0 > params.road_width()
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// The five reward features for the transition `prev -> cur`, normalized to
/// [0, 1] by fixed scale constants.
pub fn reward_features(prev: &WorldState, cur: &WorldState, params: &EnvParams) -> FeatureVector {
    let raw_goal = (params.x_goal - cur.agent.x).abs().max(0.0);
    let dx = cur.agent.x - cur.other.x;
    let dy = cur.agent.y - cur.other.y;
    let raw_car = (-(dx * dx + dy * dy).sqrt() / (2.0 * params.sigma * params.sigma)).exp();
    let raw_vel = (cur.agent.v - params.v_init).abs();
    let raw_steer = cur.agent.u.abs();
    let raw_prog = (cur.agent.y - prev.agent.y).abs();

    FeatureVector {
        d_goal: clamp01(raw_goal / params.road_width()),
        d_car: clamp01(raw_car),
        d_vel: clamp01(raw_vel / params.v_max),
        d_steer: clamp01(raw_steer / (params.steer_max - params.steer_min)),
        d_prog: clamp01(raw_prog / (params.v_max * params.dt)),
    }
}

/// Per-step reward: weighted feature costs, a progress bonus, terminal
/// bonuses/penalties and the off-road penalty.
pub fn reward_total(
    features: &FeatureVector,
    weights: &RewardWeights,
    reason: Option<Termination>,
    off_road: bool,
) -> f64 {
    let t = weights.0;
    let mut reward = -(t[0].abs() * features.d_goal
        + t[1].abs() * features.d_car
        + t[2].abs() * features.d_vel
        + t[3].abs() * features.d_steer)
        + t[4].abs() * features.d_prog;
    match reason {
        Some(Termination::Merged) => reward += MERGE_BONUS,
        Some(Termination::Crashed) => reward += CRASH_PENALTY,
        _ => {}
    }
    if off_road {
        reward += OFF_ROAD_PENALTY;
    }
    reward
}

/// Raw observation vector `[x, y, h, v, u, x', y', h', v', u']`.
pub fn observe(s: &WorldState) -> [f64; OBS_DIM] {
    [
        s.agent.x, s.agent.y, s.agent.h, s.agent.v, s.agent.u, s.other.x, s.other.y, s.other.h,
        s.other.v, s.other.u,
    ]
}

const TOKEN_MAGIC: u8 = 0x51; // 'Q'
const TOKEN_VERSION: u8 = 1;

/// Opaque, exactly restorable serialization of a [`WorldState`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateToken(Vec<u8>);

impl StateToken {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }
}

pub(crate) fn encode_state(w: &mut Writer, s: &WorldState) {
    for v in [s.agent.x, s.agent.y, s.agent.h, s.agent.v, s.agent.u] {
        w.put_f64(v);
    }
    for v in [s.other.x, s.other.y, s.other.h, s.other.v, s.other.u] {
        w.put_f64(v);
    }
    w.put_u64(s.step);
    w.put_u8(s.terminal.map_or(0, Termination::code));
}

pub(crate) fn decode_state(r: &mut Reader) -> Result<WorldState> {
    let mut vals = [0.0_f64; 10];
    for v in vals.iter_mut() {
        *v = r.get_f64()?;
    }
    let step = r.get_u64()?;
    let terminal = Termination::from_code(r.get_u8()?)?;
    Ok(WorldState {
        agent: VehicleState {
            x: vals[0],
            y: vals[1],
            h: vals[2],
            v: vals[3],
            u: vals[4],
        },
        other: VehicleState {
            x: vals[5],
            y: vals[6],
            h: vals[7],
            v: vals[8],
            u: vals[9],
        },
        step,
        terminal,
    })
}

/// Serializes a state into an opaque token.
pub fn snapshot(s: &WorldState) -> StateToken {
    let mut w = Writer::new();
    w.put_u8(TOKEN_MAGIC);
    w.put_u8(TOKEN_VERSION);
    encode_state(&mut w, s);
    StateToken(w.into_bytes())
}

/// Reconstructs the exact state a token was taken from.
pub fn restore(token: &StateToken) -> Result<WorldState> {
    let mut r = Reader::new(&token.0);
    if r.get_u8()? != TOKEN_MAGIC || r.get_u8()? != TOKEN_VERSION {
        return Err(Error::Format("corrupted state token".into()));
    }
    let state = decode_state(&mut r)?;
    r.finish()?;
    Ok(state)
}

/// Stateful wrapper owning the current episode state and the spawn RNG.
///
/// Stepping is pure; the RNG is consumed only by [`MergingEnv::reset`], so
/// restoring a snapshot and re-rolling a branch is exactly reproducible.
#[derive(Debug, Clone)]
pub struct MergingEnv {
    params: EnvParams,
    weights: RewardWeights,
    rng: ChaCha12Rng,
    seed: u64,
    state: WorldState,
}

impl MergingEnv {
    pub fn new(params: EnvParams, weights: RewardWeights, seed: u64) -> Self {
        // Placeholder pre-first-reset state; callers reset() to start episodes.
        let initial = WorldState {
            agent: VehicleState {
                x: params.start_lane_center(),
                y: 0.0,
                h: 0.0,
                v: params.v_init,
                u: 0.0,
            },
            other: VehicleState {
                x: params.x_goal,
                y: 0.0,
                h: 0.0,
                v: params.v_init,
                u: 0.0,
            },
            step: 0,
            terminal: None,
        };
        Self {
            params,
            weights,
            rng: ChaCha12Rng::seed_from_u64(seed),
            seed,
            state: initial,
        }
    }

    pub fn reset(&mut self) -> WorldState {
        self.state = reset(&self.params, &mut self.rng);
        self.state
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let result = step(&self.params, &self.weights, &self.state, action)?;
        self.state = result.next;
        Ok(result)
    }

    /// Jumps the environment to an arbitrary state (Algorithm-style branch
    /// restore).
    pub fn restore(&mut self, state: &WorldState) {
        self.state = *state;
    }

    pub fn current(&self) -> &WorldState {
        &self.state
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}
