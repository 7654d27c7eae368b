//! Schematic top-down rasters with analytic anti-aliasing.
//!
//! Shapes are transformed into pixel units before coverage is computed. The
//! wrist view works in palm-relative coordinates, so moving the gripper and
//! the object by the same offset reproduces the same bytes.

use super::world::{Rect, World, RAIL_X, RAIL_Y};
use super::*;
use crate::modality::{ImageObs, CHANNELS, IMG, IMG_LEN};

/// Front camera meters per pixel (the whole workspace).
pub const FRONT_PIXEL: f64 = WORKSPACE / IMG as f64;
/// Side length of the wrist crop in meters.
pub const WRIST_SPAN: f64 = 0.16;
pub const WRIST_PIXEL: f64 = WRIST_SPAN / IMG as f64;

const SUPERSAMPLE: usize = 4;

type Rgb = [f64; 3];
const TABLE: Rgb = [0.25, 0.25, 0.25];
const BOWL_COLOR: Rgb = [0.15, 0.25, 0.85];
const RAIL_COLOR: Rgb = [0.55, 0.55, 0.55];
const STOP_COLOR: Rgb = [0.95, 0.9, 0.1];
const OBJECT_COLOR: Rgb = [0.2, 0.85, 0.25];
const WALL_COLOR: Rgb = [0.55, 0.35, 0.15];
const LID_COLOR: Rgb = [0.45, 0.3, 0.12];
const PALM_COLOR: Rgb = [0.6, 0.1, 0.1];
const FINGER_COLOR: Rgb = [0.9, 0.15, 0.1];

const RAIL_HALF_WIDTH: f64 = 0.006;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect(Rect),
    Disk { cx: f64, cy: f64, r: f64 },
    Rounded { rect: Rect, r: f64 },
}

/// Maps local coordinates to pixel units: `u = (x - x0) / s`, `v = (y1 - y) / s`.
#[derive(Clone, Copy, Debug)]
struct View {
    x0: f64,
    y1: f64,
    s: f64,
}

impl View {
    fn rect(&self, r: &Rect) -> Rect {
        Rect {
            x0: (r.x0 - self.x0) / self.s,
            x1: (r.x1 - self.x0) / self.s,
            y0: (self.y1 - r.y1) / self.s,
            y1: (self.y1 - r.y0) / self.s,
        }
    }
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new(bg: Rgb) -> Self {
        let mut px = Vec::with_capacity(IMG_LEN);
        for _ in 0..IMG * IMG {
            px.extend_from_slice(&bg);
        }
        Self { px }
    }

    fn blend(&mut self, r: usize, c: usize, cov: f64, color: &Rgb) {
        if cov <= 0.0 {
            return;
        }
        let at = (r * IMG + c) * CHANNELS;
        for k in 0..CHANNELS {
            self.px[at + k] = self.px[at + k] * (1.0 - cov) + color[k] * cov;
        }
    }

    fn scale(&mut self, r: usize, c: usize, f: f64) {
        let at = (r * IMG + c) * CHANNELS;
        for k in 0..CHANNELS {
            self.px[at + k] *= f;
        }
    }

    fn finish(self) -> Vec<f64> {
        self.px.into_iter().map(|v| (v.clamp(0.0, 1.0) as f32) as f64).collect()
    }
}

fn pixel_span(lo: f64, hi: f64) -> std::ops::Range<usize> {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().min(IMG as f64)).max(0.0) as usize;
    a.min(IMG)..b
}

/// Exact area of a pixel-unit rectangle inside each pixel.
fn rect_coverage(p: &Rect, mut f: impl FnMut(usize, usize, f64)) {
    for r in pixel_span(p.y0, p.y1) {
        let oy = (p.y1.min(r as f64 + 1.0) - p.y0.max(r as f64)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for c in pixel_span(p.x0, p.x1) {
            let ox = (p.x1.min(c as f64 + 1.0) - p.x0.max(c as f64)).max(0.0);
            f(r, c, ox * oy);
        }
    }
}

/// Supersampled coverage of a region given by an inside test in pixel units.
fn sampled_coverage(bounds: &Rect, inside: impl Fn(f64, f64) -> bool, mut f: impl FnMut(usize, usize, f64)) {
    let n = SUPERSAMPLE;
    let w = 1.0 / (n * n) as f64;
    for r in pixel_span(bounds.y0, bounds.y1) {
        for c in pixel_span(bounds.x0, bounds.x1) {
            let mut hits = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let u = c as f64 + (j as f64 + 0.5) / n as f64;
                    let v = r as f64 + (i as f64 + 0.5) / n as f64;
                    if inside(u, v) {
                        hits += 1;
                    }
                }
            }
            f(r, c, hits as f64 * w);
        }
    }
}

fn paint(canvas: &mut Canvas, view: &View, shape: Shape, color: Rgb) {
    match shape {
        Shape::Rect(rect) => rect_coverage(&view.rect(&rect), |r, c, cov| canvas.blend(r, c, cov, &color)),
        Shape::Disk { cx, cy, r } => {
            let (u, v, ru) = ((cx - view.x0) / view.s, (view.y1 - cy) / view.s, r / view.s);
            let b = Rect::centered(u, v, ru, ru);
            sampled_coverage(
                &b,
                |x, y| (x - u) * (x - u) + (y - v) * (y - v) <= ru * ru,
                |r, c, cov| canvas.blend(r, c, cov, &color),
            );
        }
        Shape::Rounded { rect, r } => {
            let p = view.rect(&rect);
            let ru = r / view.s;
            let (cu, cv) = (0.5 * (p.x0 + p.x1), 0.5 * (p.y0 + p.y1));
            let (hu, hv) = (0.5 * (p.x1 - p.x0) - ru, 0.5 * (p.y1 - p.y0) - ru);
            sampled_coverage(
                &p,
                |x, y| {
                    let dx = ((x - cu).abs() - hu).max(0.0);
                    let dy = ((y - cv).abs() - hv).max(0.0);
                    dx * dx + dy * dy <= ru * ru
                },
                |r, c, cov| canvas.blend(r, c, cov, &color),
            );
        }
    }
}

fn shift(r: Rect, dx: f64, dy: f64) -> Rect {
    Rect {
        x0: r.x0 - dx,
        x1: r.x1 - dx,
        y0: r.y0 - dy,
        y1: r.y1 - dy,
    }
}

/// Scene in a frame whose origin is `(ox, oy)` in world coordinates; the
/// gripper is always built directly in that frame.
fn scene(w: &World, ox: f64, oy: f64, front: bool) -> Vec<(Shape, Rgb)> {
    let mut out = Vec::new();
    out.push((
        Shape::Disk {
            cx: w.bowl.x - ox,
            cy: w.bowl.y - oy,
            r: w.bowl.r,
        },
        BOWL_COLOR,
    ));
    if let Some(rail) = w.rail {
        let r = Rect {
            x0: RAIL_X - RAIL_HALF_WIDTH,
            x1: RAIL_X + RAIL_HALF_WIDTH,
            y0: RAIL_Y.0,
            y1: RAIL_Y.1,
        };
        out.push((Shape::Rect(shift(r, ox, oy)), RAIL_COLOR));
        if front {
            let m = Rect::centered(rail.x, rail.stop() + OBJECT_HALF + 0.002, OBJECT_HALF, 0.002);
            out.push((Shape::Rect(shift(m, ox, oy)), STOP_COLOR));
        }
    }
    let obj = Rect::centered(w.object[0] - ox, w.object[1] - oy, OBJECT_HALF, OBJECT_HALF);
    out.push((
        Shape::Rounded {
            rect: obj,
            r: OBJECT_CORNER,
        },
        OBJECT_COLOR,
    ));
    let [l, r, palm] = World::gripper_rects(w.gripper[0] - ox, w.gripper[1] - oy, w.aperture);
    let gripper = [(palm, PALM_COLOR), (l, FINGER_COLOR), (r, FINGER_COLOR)];
    if !front {
        push_box(&mut out, w, ox, oy, false);
    }
    out.extend(gripper.into_iter().map(|(r, c)| (Shape::Rect(r), c)));
    if front {
        push_box(&mut out, w, ox, oy, true);
    }
    out
}

fn push_box(out: &mut Vec<(Shape, Rgb)>, w: &World, ox: f64, oy: f64, lid: bool) {
    if let Some(b) = w.boxg {
        for wall in b.walls() {
            out.push((Shape::Rect(shift(wall, ox, oy)), WALL_COLOR));
        }
        if lid {
            out.push((Shape::Rect(shift(b.interior, ox, oy)), LID_COLOR));
        }
    }
}

fn render_front(w: &World) -> Vec<f64> {
    let view = View {
        x0: 0.0,
        y1: WORKSPACE,
        s: FRONT_PIXEL,
    };
    let mut c = Canvas::new(TABLE);
    for (shape, color) in scene(w, 0.0, 0.0, true) {
        paint(&mut c, &view, shape, color);
    }
    c.finish()
}

/// Wrist crop centered on the jaw, in palm-relative coordinates.
fn render_wrist(w: &World) -> Vec<f64> {
    let (gx, gy) = (w.gripper[0], w.gripper[1]);
    let half = 0.5 * WRIST_SPAN;
    let view = View {
        x0: -half,
        y1: JAW_OFFSET + half,
        s: WRIST_PIXEL,
    };
    let mut c = Canvas::new(TABLE);
    for (shape, color) in scene(w, gx, gy, false) {
        paint(&mut c, &view, shape, color);
    }
    if let Some(b) = w.boxg {
        let dark = w.config.darkness;
        let interior = view.rect(&shift(b.interior, gx, gy));
        let mut cells = Vec::new();
        rect_coverage(&interior, |r, col, cov| cells.push((r, col, cov)));
        for (r, col, cov) in cells {
            c.scale(r, col, 1.0 - cov * (1.0 - dark));
        }
    }
    c.finish()
}

/// Front and wrist rasters without sensor noise. With `occluded` the front
/// frame is zeroed and flagged as blocked.
pub fn render_views(w: &World, occluded: bool) -> ImageObs {
    let mut obs = ImageObs::new(render_front(w), render_wrist(w)).expect("rasters are in range");
    if occluded {
        obs.block_front();
    }
    obs
}
