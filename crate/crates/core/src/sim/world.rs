use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::render::render_views;
use super::*;
use crate::error::{CoreError, Result};
use crate::modality::{ImageObs, Instruction, Proprio, TaskId};
use crate::policy::{clamp_action, Observation, ACTION_DIM};
use crate::tactile::{detect_contact, ContactState, ContactThresholds, TactileMap, COLS, ROWS, TAXELS};

const MAX_THETA: f64 = std::f64::consts::FRAC_PI_2;
/// Opening command above the grasp aperture by this much releases the object.
const RELEASE_MARGIN: f64 = 0.1;
const BISECT_ITERS: usize = 40;

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, hx: f64, hy: f64) -> Self {
        Self {
            x0: cx - hx,
            x1: cx + hx,
            y0: cy - hy,
            y1: cy + hy,
        }
    }

    /// Overlap lengths along x and y (negative when separated).
    pub fn overlap(&self, o: &Rect) -> (f64, f64) {
        (self.x1.min(o.x1) - self.x0.max(o.x0), self.y1.min(o.y1) - self.y0.max(o.y0))
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        let (a, b) = self.overlap(o);
        a > 1e-12 && b > 1e-12
    }

    /// Minimum-axis interpenetration depth, zero when disjoint.
    pub fn penetration(&self, o: &Rect) -> f64 {
        let (a, b) = self.overlap(o);
        if a > 0.0 && b > 0.0 {
            a.min(b)
        } else {
            0.0
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Penetration-to-pressure synthesis for the finger pad.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactModel {
    /// Pressure per meter of penetration.
    pub gain: f64,
    /// Gaussian smearing radius along the pad, in taxel rows.
    pub smear_sigma: f64,
    pub noise_sigma: f64,
    /// Upper bound of the per-episode sensor offset.
    pub bias_max: f64,
    /// Per-frame probability of a spurious one- or two-taxel spike.
    pub spike_prob: f64,
    pub spike_low: f64,
    pub spike_high: f64,
    /// Extra penetration per meter of blocked motion while grasping.
    pub push_gain: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        Self {
            gain: 250.0,
            smear_sigma: 1.5,
            noise_sigma: 0.02,
            bias_max: 0.03,
            spike_prob: 0.03,
            spike_low: 0.15,
            spike_high: 0.35,
            push_gain: 0.25,
        }
    }
}

impl ContactModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gain >= 0.0
            && self.smear_sigma >= 0.0
            && self.noise_sigma >= 0.0
            && self.bias_max >= 0.0
            && (0.0..=1.0).contains(&self.spike_prob)
            && self.spike_low <= self.spike_high
            && self.push_gain >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid contact model {self:?}")))
        }
    }

    fn kernel(&self) -> Vec<f64> {
        if self.smear_sigma == 0.0 {
            return vec![1.0];
        }
        let r = (3.0 * self.smear_sigma).ceil() as i64;
        let w: Vec<f64> = (-r..=r)
            .map(|k| (-(k * k) as f64 / (2.0 * self.smear_sigma * self.smear_sigma)).exp())
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Noise-free per-row pressure for a penetration `depth` covering each row
    /// by the given fraction; rows beyond the pad edge contribute nothing.
    pub fn row_pressure(&self, depth: f64, coverage: &[f64; ROWS]) -> [f64; ROWS] {
        let raw: Vec<f64> = coverage.iter().map(|c| self.gain * depth.max(0.0) * c).collect();
        let k = self.kernel();
        let r = (k.len() / 2) as i64;
        std::array::from_fn(|i| {
            let mut s = 0.0;
            for (j, w) in k.iter().enumerate() {
                let src = i as i64 + j as i64 - r;
                if (0..ROWS as i64).contains(&src) {
                    s += w * raw[src as usize];
                }
            }
            s
        })
    }

    /// One sensor frame: smeared pressure plus offset, noise and rare spikes,
    /// clamped to [0, 1] and rounded to `f32` precision.
    pub fn synthesize<R: Rng + ?Sized>(&self, depth: f64, coverage: &[f64; ROWS], bias: f64, rng: &mut R) -> TactileMap {
        let rows = self.row_pressure(depth, coverage);
        let mut v = vec![0.0; TAXELS];
        for (i, x) in v.iter_mut().enumerate() {
            let n: f64 = rng.sample(StandardNormal);
            *x = rows[i / COLS] + bias + self.noise_sigma * n;
        }
        if rng.random::<f64>() < self.spike_prob {
            let count = rng.random_range(1..=2);
            for _ in 0..count {
                let at = rng.random_range(0..TAXELS);
                v[at] += rng.random_range(self.spike_low..=self.spike_high);
            }
        }
        for x in &mut v {
            *x = (x.clamp(0.0, 1.0) as f32) as f64;
        }
        TactileMap::new(v).expect("clamped frame is valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub contact: ContactModel,
    /// Wrist-view brightness multiplier inside the box.
    pub darkness: f64,
    pub wrist_noise: f64,
    /// Std of the execution noise added to demonstration actions (x, y only).
    pub dart_sigma: f64,
    /// Fraction of in-box demonstrations that contain a disturbance.
    pub disturb_prob: f64,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            contact: ContactModel::default(),
            darkness: 0.005,
            wrist_noise: 0.02,
            dart_sigma: 0.002,
            disturb_prob: 0.3,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.contact.validate()?;
        if !(0.0..=1.0).contains(&self.darkness)
            || self.wrist_noise < 0.0
            || self.dart_sigma < 0.0
            || !(0.0..=1.0).contains(&self.disturb_prob)
            || self.max_steps == 0
        {
            return Err(CoreError::Config(format!("invalid sim config {self:?}")));
        }
        Ok(())
    }
}

/// Evaluation condition for a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Nominal,
    BlockFront,
    Disturb,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nominal, Condition::BlockFront, Condition::Disturb];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Nominal => "nominal",
            Condition::BlockFront => "block_front",
            Condition::Disturb => "disturb",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown condition `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disturbance {
    ReturnToBox,
}

impl FromStr for Disturbance {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "return_to_box" => Ok(Disturbance::ReturnToBox),
            other => Err(CoreError::InvalidDisturbance(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Grasp,
    Release,
    Unlock,
    Disturbance,
    Success,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: usize,
    pub kind: EventKind,
}

/// Prismatic lock: while locked the object can only travel along +y between
/// `y0` and `y0 + travel`; reaching the stop unlocks it. The stop keeps
/// blocking inward motion afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rail {
    pub x: f64,
    pub y0: f64,
    pub travel: f64,
    pub locked: bool,
    /// Largest inward slide reached so far.
    pub slid: f64,
}

impl Rail {
    pub fn stop(&self) -> f64 {
        self.y0 + self.travel
    }
}

/// Open-fronted box; the opening faces -y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGeom {
    pub interior: Rect,
    pub wall: f64,
}

impl BoxGeom {
    pub fn walls(&self) -> [Rect; 3] {
        let i = self.interior;
        let w = self.wall;
        [
            Rect {
                x0: i.x0 - w,
                x1: i.x0,
                y0: i.y0,
                y1: i.y1 + w,
            },
            Rect {
                x0: i.x1,
                x1: i.x1 + w,
                y0: i.y0,
                y1: i.y1 + w,
            },
            Rect {
                x0: i.x0 - w,
                x1: i.x1 + w,
                y0: i.y1,
                y1: i.y1 + w,
            },
        ]
    }

    pub fn outer(&self) -> Rect {
        Rect {
            x0: self.interior.x0 - self.wall,
            x1: self.interior.x1 + self.wall,
            y0: self.interior.y0,
            y1: self.interior.y1 + self.wall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bowl {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

pub(crate) const RAIL_X: f64 = 0.20;
pub(crate) const RAIL_Y: (f64, f64) = (0.17, 0.33);
pub(crate) const BOX_INTERIOR: Rect = Rect {
    x0: 0.05,
    x1: 0.17,
    y0: 0.20,
    y1: 0.38,
};
pub(crate) const BOX_OBJECT_X: f64 = 0.11;
pub(crate) const BOX_OBJECT_Y: (f64, f64) = (0.25, 0.34);
const BOWL: Bowl = Bowl {
    x: 0.32,
    y: 0.10,
    r: 0.035,
};

/// Full simulator state; every random draw comes from streams derived from
/// the construction seed.
#[derive(Clone, Debug)]
pub struct World {
    pub task: TaskId,
    pub config: SimConfig,
    pub t: usize,
    /// `(x, y, theta)` of the palm center.
    pub gripper: [f64; 3],
    pub aperture: f64,
    pub object: [f64; 2],
    pub grasped: bool,
    pub rail: Option<Rail>,
    pub boxg: Option<BoxGeom>,
    pub bowl: Bowl,
    pub success: bool,
    pub events: Vec<Event>,
    pub last_command: [f64; ACTION_DIM],
    /// Motion blocked by a constraint during the last step while grasping.
    pub push: f64,
    pub sensor_bias: f64,
    pub tactile: TactileMap,
    noise_seed: u64,
    noise: ChaCha8Rng,
    disturb_rng: ChaCha8Rng,
}

impl World {
    /// Randomized initial state for a simulated task.
    pub fn new(task: TaskId, config: SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = crate::rng::stream(seed, "world-init");
        let gx_center = match task {
            TaskId::Slide => RAIL_X,
            TaskId::InBox => 0.12,
            other => return Err(CoreError::UnsupportedTask(other.name().to_string())),
        };
        let gripper = [
            gx_center + init.random_range(-0.03..=0.03),
            0.08 + init.random_range(-0.02..=0.02),
            0.0,
        ];
        let (object, rail, boxg) = match task {
            TaskId::Slide => {
                let y0 = init.random_range(0.235..=0.255);
                let travel = init.random_range(0.015..=0.04);
                let rail = Rail {
                    x: RAIL_X,
                    y0,
                    travel,
                    locked: true,
                    slid: 0.0,
                };
                ([RAIL_X, y0], Some(rail), None)
            }
            _ => {
                let ox = BOX_OBJECT_X + init.random_range(-0.002..=0.002);
                let oy = init.random_range(BOX_OBJECT_Y.0..=BOX_OBJECT_Y.1);
                let b = BoxGeom {
                    interior: BOX_INTERIOR,
                    wall: 0.01,
                };
                ([ox, oy], None, Some(b))
            }
        };
        let sensor_bias = init.random_range(0.0..=config.contact.bias_max);
        let noise_seed: u64 = init.random();
        let mut w = Self {
            task,
            config,
            t: 0,
            gripper,
            aperture: 0.0,
            object,
            grasped: false,
            rail,
            boxg,
            bowl: BOWL,
            success: false,
            events: Vec::new(),
            last_command: [0.0; ACTION_DIM],
            push: 0.0,
            sensor_bias,
            tactile: TactileMap::zeros(),
            noise_seed,
            noise: crate::rng::stream(noise_seed, "tactile"),
            disturb_rng: crate::rng::stream(noise_seed, "disturbance"),
        };
        w.tactile = w.synthesize_tactile();
        Ok(w)
    }

    pub fn object_rect(&self) -> Rect {
        Rect::centered(self.object[0], self.object[1], OBJECT_HALF, OBJECT_HALF)
    }

    /// `[left finger, right finger, palm]` at the given pose.
    pub fn gripper_rects(gx: f64, gy: f64, aperture: f64) -> [Rect; 3] {
        let h = MAX_OPEN * aperture / 2.0;
        [
            Rect {
                x0: gx - h - FINGER_WIDTH,
                x1: gx - h,
                y0: gy,
                y1: gy + FINGER_LEN,
            },
            Rect {
                x0: gx + h,
                x1: gx + h + FINGER_WIDTH,
                y0: gy,
                y1: gy + FINGER_LEN,
            },
            Rect {
                x0: gx - h - FINGER_WIDTH,
                x1: gx + h + FINGER_WIDTH,
                y0: gy - PALM_DEPTH,
                y1: gy,
            },
        ]
    }

    pub fn fingers(&self) -> [Rect; 3] {
        Self::gripper_rects(self.gripper[0], self.gripper[1], self.aperture)
    }

    pub fn jaw_center(&self) -> [f64; 2] {
        [self.gripper[0], self.gripper[1] + JAW_OFFSET]
    }

    pub fn object_in_box(&self) -> bool {
        self.boxg
            .is_some_and(|b| b.interior.contains(self.object[0], self.object[1]) && self.object[1] - OBJECT_HALF >= b.interior.y0)
    }

    /// Carrying the object toward the goal: grasped and free of the rail or box.
    pub fn in_transit(&self) -> bool {
        if !self.grasped {
            return false;
        }
        match (self.rail, self.boxg) {
            (Some(r), _) => !r.locked,
            (_, Some(b)) => self.object[1] + OBJECT_HALF < b.interior.y0,
            _ => true,
        }
    }

    pub fn rail_locked(&self) -> bool {
        self.rail.is_some_and(|r| r.locked)
    }

    fn record(&mut self, kind: EventKind) {
        self.events.push(Event { t: self.t, kind });
    }

    /// Penetration of the left (sensing) finger into the object and the
    /// fraction of each taxel row the contact covers.
    pub fn pad_contact(&self) -> (f64, [f64; ROWS]) {
        let [left, _, _] = self.fingers();
        let o = self.object_rect();
        let depth = left.penetration(&o);
        let mut cov = [0.0; ROWS];
        if depth > 0.0 {
            let h = FINGER_LEN / ROWS as f64;
            for (i, c) in cov.iter_mut().enumerate() {
                let top = left.y1 - i as f64 * h;
                let bot = top - h;
                *c = ((top.min(o.y1) - bot.max(o.y0)) / h).clamp(0.0, 1.0);
            }
        }
        (depth, cov)
    }

    fn synthesize_tactile(&mut self) -> TactileMap {
        let (depth, cov) = self.pad_contact();
        let depth = if depth > 0.0 {
            depth + self.config.contact.push_gain * self.push
        } else {
            0.0
        };
        let model = self.config.contact;
        model.synthesize(depth, &cov, self.sensor_bias, &mut self.noise)
    }

    pub fn contact_state(&self) -> ContactState {
        let th = ContactThresholds::default();
        detect_contact(&self.tactile, th.p_th, th.k_th).expect("default thresholds are valid")
    }

    /// Pose, aperture and the last commanded velocity.
    pub fn proprio(&self) -> Proprio {
        let a = self.last_command;
        Proprio::new([
            self.gripper[0],
            self.gripper[1],
            self.gripper[2],
            self.aperture,
            a[0] / STEP_SECONDS,
            a[1] / STEP_SECONDS,
            a[2] / STEP_SECONDS,
            0.0,
        ])
        .expect("simulator state is finite")
    }

    /// Renders both views; the wrist view carries per-step sensor noise drawn
    /// from a stream keyed by the time index, so observing never perturbs the
    /// dynamics' random streams.
    pub fn observe(&self, occluded: bool) -> Observation {
        let ImageObs {
            front,
            mut wrist,
            front_blocked,
        } = render_views(self, occluded);
        if self.config.wrist_noise > 0.0 {
            let mut rng = crate::rng::substream(self.noise_seed, "wrist", self.t as u64);
            for v in &mut wrist {
                let n: f64 = rng.sample(StandardNormal);
                *v = ((*v + self.config.wrist_noise * n).clamp(0.0, 1.0) as f32) as f64;
            }
        }
        let mut images = ImageObs::new(front, wrist).expect("rendered views are valid");
        if front_blocked {
            images.block_front();
        }
        Observation {
            images,
            instruction: Instruction::for_task(self.task),
            proprio: self.proprio(),
            tactile: self.tactile.clone(),
        }
    }

    /// Advances one step and returns the new observation bundle.
    pub fn step(&mut self, action: [f64; ACTION_DIM], occluded: bool) -> Result<Observation> {
        self.advance(action)?;
        Ok(self.observe(occluded))
    }

    /// Dynamics only: kinematics, constraints, grasp latch, goal check and
    /// tactile synthesis. Actions outside the bounds are clamped.
    pub fn advance(&mut self, action: [f64; ACTION_DIM]) -> Result<()> {
        if action.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidAction(format!("non-finite action {action:?}")));
        }
        let a = clamp_action(action);
        self.t += 1;
        self.push = 0.0;
        self.last_command = a;
        self.gripper[2] = (self.gripper[2] + a[2]).clamp(-MAX_THETA, MAX_THETA);
        self.update_aperture(a[3]);
        self.translate(a[0], a[1]);
        if !self.success && self.in_goal() {
            self.success = true;
            self.record(EventKind::Success);
        }
        self.tactile = self.synthesize_tactile();
        Ok(())
    }

    pub fn in_goal(&self) -> bool {
        (self.object[0] - self.bowl.x).hypot(self.object[1] - self.bowl.y) <= self.bowl.r
    }

    /// Whether a gripper pose (and the carried object) respects walls and the
    /// penetration limit.
    fn valid(&self, gx: f64, gy: f64, ap: f64, obj: [f64; 2]) -> bool {
        let parts = Self::gripper_rects(gx, gy, ap);
        if let Some(b) = self.boxg {
            for w in b.walls() {
                if parts.iter().any(|p| p.intersects(&w)) {
                    return false;
                }
                if self.grasped && Rect::centered(obj[0], obj[1], OBJECT_HALF, OBJECT_HALF).intersects(&w) {
                    return false;
                }
            }
        }
        if !self.grasped {
            let o = self.object_rect();
            if parts.iter().any(|p| p.penetration(&o) > MAX_PENETRATION) {
                return false;
            }
        }
        true
    }

    /// Largest fraction in [0, 1] of a motion that keeps the state valid.
    fn feasible_fraction(&self, f: impl Fn(f64) -> bool) -> f64 {
        if f(1.0) || !f(0.0) {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if f(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    fn can_latch(&self, next: f64) -> bool {
        let [gx, gy] = self.jaw_center();
        let [ox, oy] = self.object;
        (ox - gx).abs() + OBJECT_HALF <= MAX_OPEN * self.aperture / 2.0 + MAX_PENETRATION
            && (oy - gy).abs() <= GRASP_WINDOW
            && MAX_OPEN * next <= 2.0 * OBJECT_HALF
    }

    fn update_aperture(&mut self, target: f64) {
        if self.grasped {
            if target > GRASP_APERTURE + RELEASE_MARGIN {
                self.grasped = false;
                self.aperture = (self.aperture + APERTURE_RATE).min(target);
                self.record(EventKind::Release);
            }
            return;
        }
        let next = self.aperture + (target - self.aperture).clamp(-APERTURE_RATE, APERTURE_RATE);
        if next < self.aperture && self.can_latch(next) {
            if self.rail_locked() {
                self.gripper[0] = self.object[0];
            } else {
                self.object[0] = self.gripper[0];
            }
            self.aperture = GRASP_APERTURE;
            self.grasped = true;
            self.record(EventKind::Grasp);
            return;
        }
        let (gx, gy, ap0) = (self.gripper[0], self.gripper[1], self.aperture);
        let s = self.feasible_fraction(|s| self.valid(gx, gy, ap0 + s * (next - ap0), self.object));
        self.aperture = (ap0 + s * (next - ap0)).clamp(0.0, 1.0);
    }

    fn translate(&mut self, dx: f64, dy: f64) {
        let (gx, gy) = (self.gripper[0], self.gripper[1]);
        let mut dx = (gx + dx).clamp(0.0, WORKSPACE) - gx;
        let mut dy = (gy + dy).clamp(0.0, WORKSPACE) - gy;
        if !self.grasped {
            let (ap, obj) = (self.aperture, self.object);
            let s = self.feasible_fraction(|s| self.valid(gx + s * dx, gy + s * dy, ap, obj));
            self.gripper[0] = gx + s * dx;
            self.gripper[1] = gy + s * dy;
            return;
        }
        let mut blocked = 0.0;
        let mut rail_target = None;
        if let Some(r) = self.rail {
            let oy = self.object[1];
            if r.locked {
                let ny = (oy + dy).clamp(r.y0, r.stop());
                blocked = dx.hypot(dy - (ny - oy));
                dx = 0.0;
                dy = ny - oy;
                rail_target = Some(ny);
            } else if oy <= r.stop() && oy + dy > r.stop() && (self.object[0] - r.x).abs() < OBJECT_HALF {
                // The end stop still blocks further inward travel.
                blocked = oy + dy - r.stop();
                dy = r.stop() - oy;
                rail_target = Some(r.stop());
            }
        }
        let (ap, [ox, oy]) = (self.aperture, self.object);
        let s = self.feasible_fraction(|s| self.valid(gx + s * dx, gy + s * dy, ap, [ox + s * dx, oy + s * dy]));
        blocked += (1.0 - s) * dx.hypot(dy);
        self.gripper[0] = gx + s * dx;
        self.gripper[1] = gy + s * dy;
        self.object[0] = ox + s * dx;
        self.object[1] = match rail_target {
            Some(ny) if s == 1.0 => ny,
            _ => oy + s * dy,
        };
        self.push = blocked;
        let t = self.t;
        if let Some(r) = self.rail.as_mut().filter(|r| r.locked) {
            r.slid = r.slid.max(self.object[1] - r.y0);
            if self.object[1] >= r.stop() {
                r.locked = false;
                self.events.push(Event {
                    t,
                    kind: EventKind::Unlock,
                });
            }
        }
    }

    /// Puts the object back at a random interior box pose and empties the
    /// gripper. A no-op when the object already rests in the box.
    pub fn inject_disturbance(&mut self, kind: Disturbance) -> Result<()> {
        let Disturbance::ReturnToBox = kind;
        if self.boxg.is_none() {
            return Err(CoreError::InvalidDisturbance(format!(
                "return_to_box needs a box, task is {}",
                self.task
            )));
        }
        if !self.grasped && self.object_in_box() {
            return Ok(());
        }
        let ox = BOX_OBJECT_X + self.disturb_rng.random_range(-0.002..=0.002);
        let oy = self.disturb_rng.random_range(BOX_OBJECT_Y.0..=BOX_OBJECT_Y.1);
        self.object = [ox, oy];
        self.grasped = false;
        self.push = 0.0;
        self.record(EventKind::Disturbance);
        self.tactile = self.synthesize_tactile();
        Ok(())
    }

    pub fn has_event(&self, kind: EventKind) -> bool {
        self.events.iter().any(|e| e.kind == kind)
    }
}
