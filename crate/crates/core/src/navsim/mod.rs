//! Episodic goal navigation in a box room with shaped rewards.
//!
//! The agent turns or steps forward; an episode ends on reaching a box,
//! hitting a wall (configurable) or the step limit.

mod reward;

use std::io::Write;
use std::path::Path;

use edgenav_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use reward::{reward_fn, Events, RewardParts};

use crate::detector::DetectorModel;
use crate::distill::decode;
use crate::error::{Error, Result};
use crate::scenegen::{batch_tensor, project_box, render_view, Camera, LabeledImage, Room, Style, WorldBox, NUM_CLASSES};

pub const NUM_ACTIONS: usize = 3;
/// `4n` corners, `n` goal one-hot, `a` last-action one-hot.
pub const STATE_DIM: usize = 5 * NUM_CLASSES + NUM_ACTIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
    Forward,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Left, Action::Right, Action::Forward];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract("action", format!("index {i} outside 0..{NUM_ACTIONS}")))
    }

    pub fn is_turn(self) -> bool {
        self != Action::Forward
    }

    pub fn opposite(self, other: Action) -> bool {
        matches!((self, other), (Action::Left, Action::Right) | (Action::Right, Action::Left))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub room: Room,
    /// Boxes placed per episode, 1 to 3; one of them is the goal.
    pub num_objects: usize,
    pub turn_deg: f64,
    pub stride: f64,
    /// Agent-to-box distance below which the box counts as reached.
    pub reach: f64,
    pub box_size: f64,
    pub max_steps: usize,
    /// Wall clearance of the agent's position.
    pub agent_radius: f64,
    pub collision_terminates: bool,
    /// Side of rendered observations.
    pub image_size: usize,
    /// Detector confidence threshold.
    pub conf_threshold: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            room: Room::default(),
            num_objects: 3,
            turn_deg: 15.0,
            stride: 0.25,
            reach: 0.6,
            box_size: 0.8,
            max_steps: 1024,
            agent_radius: 0.2,
            collision_terminates: true,
            image_size: 224,
            conf_threshold: 0.25,
        }
    }
}

impl EnvConfig {
    pub fn with_objects(num_objects: usize) -> Self {
        EnvConfig {
            num_objects,
            ..EnvConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_CLASSES).contains(&self.num_objects) {
            return Err(Error::config(format!("num_objects must be 1..={NUM_CLASSES}, got {}", self.num_objects)));
        }
        if !(self.stride > 0.0 && self.turn_deg > 0.0 && self.reach > 0.0 && self.box_size > 0.0) {
            return Err(Error::config("stride, turn_deg, reach and box_size must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        let free = self.room.width.min(self.room.depth) - 2.0 * self.box_size;
        if free < 2.0 * self.box_size {
            return Err(Error::config("room too small for the boxes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Placed boxes; class ids are distinct.
    pub boxes: Vec<WorldBox>,
    pub goal_class: usize,
    pub step_count: usize,
    pub last_action: Option<Action>,
    pub prev_goal_distance: f64,
    pub goal_seen_before: bool,
    pub done: bool,
}

impl EnvState {
    pub fn camera(&self) -> Camera {
        Camera::new(self.x, self.y, self.heading)
    }

    pub fn goal_box(&self) -> &WorldBox {
        self.boxes
            .iter()
            .find(|b| b.class_id == self.goal_class)
            .expect("goal class is always placed")
    }

    pub fn goal_distance(&self) -> f64 {
        let g = self.goal_box();
        (self.x - g.x).hypot(self.y - g.y)
    }

    /// Goal's projection is non-empty inside the view frustum.
    pub fn goal_in_view(&self) -> bool {
        project_box(&self.camera(), self.goal_box()).is_some()
    }
}

/// True iff the agent is strictly closer than `reach` to the goal centre.
pub fn success(state: &EnvState, reach: f64) -> bool {
    state.goal_distance() < reach
}

/// Source of the bounding boxes in the state vector.
pub enum Observer<'a> {
    /// Exact projections of every box in the frustum (occlusion ignored).
    Oracle,
    /// The detector run on the rendered first-person view.
    Detector(&'a DetectorModel),
}

/// Policy input plus, for detector observations, the rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state_vector: Vec<f64>,
    pub image: Option<LabeledImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub parts: RewardParts,
    pub done: bool,
    /// Episode ended at the correct goal.
    pub success: bool,
    pub observation: Observation,
}

pub fn state_vector(boxes: &[Option<[f64; 4]>; NUM_CLASSES], goal: usize, last: Option<Action>) -> Vec<f64> {
    let mut v = vec![0.0; STATE_DIM];
    for (c, b) in boxes.iter().enumerate() {
        if let Some(b) = b {
            v[4 * c..4 * c + 4].copy_from_slice(b);
        }
    }
    v[4 * NUM_CLASSES + goal] = 1.0;
    if let Some(a) = last {
        v[5 * NUM_CLASSES + a.index()] = 1.0;
    }
    v
}

/// Builds the observation of `state`.
pub fn observe(state: &EnvState, observer: &Observer, cfg: &EnvConfig) -> Result<Observation> {
    let mut boxes = [None; NUM_CLASSES];
    let cam = state.camera();
    let image = match observer {
        Observer::Oracle => {
            for b in &state.boxes {
                boxes[b.class_id] = project_box(&cam, b);
            }
            None
        }
        Observer::Detector(model) => {
            let size = model.cfg.input_size;
            let view = render_view(&cfg.room, &cam, &state.boxes, &Style::default(), size, state.step_count as u64);
            let img = LabeledImage {
                size,
                pixels: view.rgb,
                labels: Vec::new(),
            };
            let x = batch_tensor::<f32>(&[&img], &model.norm_stats)?;
            let out = model.infer::<f32>(&x)?;
            for d in decode::<f32>(&out.head, cfg.conf_threshold)?.remove(0) {
                if d.class_id < NUM_CLASSES {
                    boxes[d.class_id] = Some(d.bbox);
                }
            }
            Some(img)
        }
    };
    Ok(Observation {
        state_vector: state_vector(&boxes, state.goal_class, state.last_action),
        image,
    })
}

/// One environment instance with its own random stream.
pub struct NavEnv {
    pub cfg: EnvConfig,
    pub state: EnvState,
    rng: ChaCha8Rng,
}

fn random_layout<R: Rng + ?Sized>(rng: &mut R, cfg: &EnvConfig) -> EnvState {
    let room = cfg.room;
    let s = cfg.box_size;
    let mut classes: Vec<usize> = (0..NUM_CLASSES).collect();
    classes.shuffle(rng);
    classes.truncate(cfg.num_objects);
    let goal_class = classes[rng.gen_range(0..classes.len())];
    loop {
        let mut boxes: Vec<WorldBox> = Vec::new();
        for &class_id in &classes {
            for _ in 0..100 {
                let b = WorldBox {
                    class_id,
                    x: rng.gen_range(s..room.width - s),
                    y: rng.gen_range(s..room.depth - s),
                    size: s,
                };
                if boxes.iter().all(|o| (o.x - b.x).hypot(o.y - b.y) >= 2.0 * s) {
                    boxes.push(b);
                    break;
                }
            }
        }
        if boxes.len() != classes.len() {
            continue;
        }
        let m = cfg.agent_radius + 0.3;
        for _ in 0..100 {
            let (x, y) = (rng.gen_range(m..room.width - m), rng.gen_range(m..room.depth - m));
            if boxes.iter().all(|b| (b.x - x).hypot(b.y - y) >= cfg.reach + s) {
                let mut st = EnvState {
                    x,
                    y,
                    heading: rng.gen_range(0.0..std::f64::consts::TAU),
                    boxes,
                    goal_class,
                    step_count: 0,
                    last_action: None,
                    prev_goal_distance: 0.0,
                    goal_seen_before: false,
                    done: false,
                };
                st.prev_goal_distance = st.goal_distance();
                st.goal_seen_before = st.goal_in_view();
                return st;
            }
        }
    }
}

impl NavEnv {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_layout(&mut rng, &cfg);
        Ok(NavEnv { cfg, state, rng })
    }

    /// Starts a new episode from this instance's random stream.
    pub fn reset(&mut self, observer: &Observer) -> Result<Observation> {
        self.state = random_layout(&mut self.rng, &self.cfg);
        observe(&self.state, observer, &self.cfg)
    }

    /// Starts from a given state (for tests and demonstrations).
    pub fn reset_to(&mut self, state: EnvState, observer: &Observer) -> Result<Observation> {
        self.state = state;
        observe(&self.state, observer, &self.cfg)
    }

    pub fn step(&mut self, action: Action, observer: &Observer) -> Result<StepResult> {
        let (next, parts, ev) = transition(&self.state, action, &self.cfg)?;
        self.state = next;
        Ok(StepResult {
            reward: parts.total(),
            parts,
            done: self.state.done,
            success: ev.reached_goal,
            observation: observe(&self.state, observer, &self.cfg)?,
        })
    }
}

/// Pure transition: next state, reward components and the events behind them.
pub fn transition(state: &EnvState, action: Action, cfg: &EnvConfig) -> Result<(EnvState, RewardParts, Events)> {
    if state.done {
        return Err(Error::contract("step", "episode is already done; call reset"));
    }
    let mut next = state.clone();
    let mut collision = false;
    match action {
        Action::Left => next.heading += cfg.turn_deg.to_radians(),
        Action::Right => next.heading -= cfg.turn_deg.to_radians(),
        Action::Forward => {
            let (s, c) = state.heading.sin_cos();
            let r = cfg.agent_radius;
            let (nx, ny) = (state.x + cfg.stride * c, state.y + cfg.stride * s);
            let cx = nx.clamp(r, cfg.room.width - r);
            let cy = ny.clamp(r, cfg.room.depth - r);
            collision = cx != nx || cy != ny;
            next.x = cx;
            next.y = cy;
        }
    }
    next.heading = next.heading.rem_euclid(std::f64::consts::TAU);
    next.step_count += 1;
    next.last_action = Some(action);
    let reached_goal = success(&next, cfg.reach);
    let wrong_goal = !reached_goal
        && next
            .boxes
            .iter()
            .any(|b| b.class_id != next.goal_class && (b.x - next.x).hypot(b.y - next.y) < cfg.reach);
    let d_curr = next.goal_distance();
    let in_view = next.goal_in_view();
    let ev = Events {
        action,
        last_action: state.last_action,
        reached_goal,
        wrong_goal,
        collision,
        goal_in_view: in_view,
        first_sight: in_view && !state.goal_seen_before,
        d_prev: state.prev_goal_distance,
        d_curr,
    };
    let parts = reward_fn(&ev);
    next.prev_goal_distance = d_curr;
    next.goal_seen_before |= in_view;
    next.done = reached_goal
        || wrong_goal
        || (collision && cfg.collision_terminates)
        || next.step_count >= cfg.max_steps;
    Ok((next, parts, ev))
}

/// One line of an episode trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: Action,
    pub reward: f64,
    pub parts: RewardParts,
    pub state_vector: Vec<f64>,
}

/// Writes `records` as JSON lines.
pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trace records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Observation as a `[1, STATE_DIM]` tensor.
pub fn obs_tensor(obs: &Observation) -> Result<Tensor<f64>> {
    Ok(Tensor::new(obs.state_vector.clone(), &[1, STATE_DIM])?)
}
