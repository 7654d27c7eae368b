//! Scripted demonstrator. It reads privileged state for geometry, but the
//! in-box exploration only advances to grasping once the tactile frame
//! reports contact.

use serde::{Deserialize, Serialize};

use super::world::{World, BOX_INTERIOR, BOX_OBJECT_X};
use super::*;
use crate::error::{CoreError, Result};
use crate::modality::TaskId;
use crate::policy::ACTION_DIM;

const TRAVEL_SPEED: f64 = 0.02;
const SWEEP_SPEED: f64 = 0.01;
const SLIDE_SPEED: f64 = 0.008;
/// A blocked push of at least this much means the end stop was reached.
const STOP_PUSH: f64 = 0.004;
const REACH_TOL: f64 = 0.0015;
/// Sweep line: the left finger overlaps the object's left edge by 3 mm.
const ENTRY_X: f64 = BOX_OBJECT_X + 0.018;
const ENTRY_Y: f64 = 0.19;
/// Gripper height below which it can move sideways without touching the box.
const CLEAR_Y: f64 = 0.15;
/// Height ceiling lost per meter of sideways error while approaching the box.
const ALIGN_SLOPE: f64 = 5.0;
const EXTRACT_Y: f64 = 0.16;
const RELEASE_TOL: f64 = 0.004;
const MAX_FAILED_CLOSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Sweep,
    Center,
    Close,
    SlideIn,
    Extract,
    Transport,
    Release,
    Done,
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub task: TaskId,
    pub phase: Phase,
    failed_closes: usize,
    /// Aperture seen on the previous closing step.
    closing_from: Option<f64>,
}

fn toward(cur: f64, target: f64, speed: f64) -> f64 {
    (target - cur).clamp(-speed, speed)
}

impl Expert {
    pub fn new(task: TaskId) -> Result<Self> {
        match task {
            TaskId::Slide | TaskId::InBox => Ok(Self {
                task,
                phase: Phase::Approach,
                failed_closes: 0,
                closing_from: None,
            }),
            other => Err(CoreError::UnsupportedTask(other.name().to_string())),
        }
    }

    /// Next action for the current world state.
    pub fn act(&mut self, w: &World) -> Result<[f64; ACTION_DIM]> {
        if matches!(self.phase, Phase::Extract | Phase::Transport | Phase::Release) && !w.grasped && !w.success {
            // Lost the object (e.g. it was put back): explore again.
            self.phase = Phase::Approach;
        }
        // Phases may hand over within one call; bounded by the phase count.
        for _ in 0..8 {
            if let Some(a) = self.phase_action(w)? {
                return Ok(a);
            }
        }
        Err(CoreError::ExpertFailure(format!("phase machine did not settle in {:?}", self.phase)))
    }

    fn phase_action(&mut self, w: &World) -> Result<Option<[f64; ACTION_DIM]>> {
        let [gx, gy, _] = w.gripper;
        let [ox, oy] = w.object;
        let a = match self.phase {
            Phase::Approach => {
                // The in-box ceiling falls with the sideways error, so the
                // command is a continuous function of the gripper position.
                let (tx, ty) = match self.task {
                    TaskId::Slide => (ox, oy - JAW_OFFSET),
                    _ => {
                        let ceiling = ENTRY_Y - ALIGN_SLOPE * (gx - ENTRY_X).abs();
                        (ENTRY_X, ceiling.max(CLEAR_Y.min(gy)))
                    }
                };
                let arrived = match self.task {
                    TaskId::Slide => (gx - tx).abs() <= REACH_TOL && (gy - ty).abs() <= REACH_TOL,
                    _ => (gx - ENTRY_X).abs() <= REACH_TOL && (gy - ENTRY_Y).abs() <= REACH_TOL,
                };
                if arrived {
                    self.phase = match self.task {
                        TaskId::Slide => Phase::Close,
                        _ => Phase::Sweep,
                    };
                    return Ok(None);
                }
                [toward(gx, tx, TRAVEL_SPEED), toward(gy, ty, TRAVEL_SPEED), 0.0, 1.0]
            }
            Phase::Sweep => {
                if w.contact_state().flag {
                    self.phase = Phase::Center;
                    return Ok(None);
                }
                if gy + FINGER_LEN >= BOX_INTERIOR.y1 - 0.005 {
                    return Err(CoreError::ExpertFailure("sweep reached the back wall without contact".into()));
                }
                [toward(gx, ENTRY_X, SWEEP_SPEED), SWEEP_SPEED, 0.0, 1.0]
            }
            Phase::Center => {
                // Contact located the object, so the jaw can now line up with it.
                let ty = oy - JAW_OFFSET;
                if (gx - ox).abs() <= REACH_TOL && (gy - ty).abs() <= REACH_TOL {
                    self.phase = Phase::Close;
                    return Ok(None);
                }
                [toward(gx, ox, SWEEP_SPEED), toward(gy, ty, SWEEP_SPEED), 0.0, 1.0]
            }
            Phase::Close => {
                if w.grasped {
                    self.closing_from = None;
                    self.phase = match self.task {
                        TaskId::Slide => Phase::SlideIn,
                        _ => Phase::Extract,
                    };
                    return Ok(None);
                }
                // Fully shut, or jammed against the object without latching.
                let jammed = self.closing_from.is_some_and(|prev| w.aperture >= prev);
                self.closing_from = Some(w.aperture);
                if w.aperture <= 0.01 || jammed {
                    self.failed_closes += 1;
                    if self.failed_closes > MAX_FAILED_CLOSES {
                        return Err(CoreError::ExpertFailure("grasp did not latch".into()));
                    }
                    self.phase = Phase::Approach;
                    self.closing_from = None;
                    return Ok(Some([0.0, 0.0, 0.0, 1.0]));
                }
                [0.0, 0.0, 0.0, 0.0]
            }
            Phase::SlideIn => {
                let unlocked = w.rail.is_some_and(|r| !r.locked);
                if unlocked && w.push >= STOP_PUSH {
                    self.phase = Phase::Extract;
                    return Ok(None);
                }
                [0.0, SLIDE_SPEED, 0.0, 0.0]
            }
            Phase::Extract => {
                if oy <= EXTRACT_Y {
                    self.phase = Phase::Transport;
                    return Ok(None);
                }
                [0.0, -TRAVEL_SPEED, 0.0, 0.0]
            }
            Phase::Transport => {
                let (ex, ey) = (w.bowl.x - ox, w.bowl.y - oy);
                if ex.hypot(ey) <= RELEASE_TOL {
                    self.phase = Phase::Release;
                    return Ok(None);
                }
                [ex.clamp(-TRAVEL_SPEED, TRAVEL_SPEED), ey.clamp(-TRAVEL_SPEED, TRAVEL_SPEED), 0.0, 0.0]
            }
            Phase::Release => {
                if !w.grasped {
                    self.phase = Phase::Done;
                    return Ok(None);
                }
                [0.0, 0.0, 0.0, 1.0]
            }
            Phase::Done => [0.0, 0.0, 0.0, 1.0],
        };
        Ok(Some(a))
    }
}
