//! Rasterization of scripted scenes into RGB frames.
//!
//! Visual encoding (each label level must be decodable from pixels):
//! - phase → background hue,
//! - step → position of a white 8×8 marker on the border ring,
//! - instrument class → (shape, hue) pair,
//! - actions → motion/size patterns over the clip plus blob proximity.

use super::script::{Blob, InstrumentTrack, SceneScript, Segment};
use crate::annotation::BoundingBox;

pub const MARKER_CELL: usize = 8;

/// HSV (all in [0,1]) to RGB bytes.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

pub fn instrument_color(instrument_id: usize) -> [u8; 3] {
    hsv_to_rgb(instrument_id as f64 / 7.0, 0.95, 0.95)
}

pub fn phase_background(phase_id: usize) -> (f64, f64, f64) {
    (phase_id as f64 / 11.0, 0.30, 0.35)
}

/// Top-left pixel of the step marker: cell `step_id` of the clockwise
/// border-ring walk over an (H/8)×(W/8) cell grid.
pub fn marker_origin(step_id: usize, height: usize, width: usize) -> (usize, usize) {
    let rows = height / MARKER_CELL;
    let cols = width / MARKER_CELL;
    let mut ring = Vec::new();
    for c in 0..cols {
        ring.push((0, c));
    }
    for r in 1..rows {
        ring.push((r, cols - 1));
    }
    for c in (0..cols - 1).rev() {
        ring.push((rows - 1, c));
    }
    for r in (1..rows - 1).rev() {
        ring.push((r, 0));
    }
    let (r, c) = ring[step_id % ring.len()];
    (r * MARKER_CELL, c * MARKER_CELL)
}

/// Whether a point (pixel center, relative to the shape center) is inside
/// the shape of nominal radius `r`.
pub fn shape_mask(instrument_id: usize, dx: f64, dy: f64, r: f64) -> bool {
    match instrument_id {
        // Disc.
        0 => dx * dx + dy * dy <= r * r,
        // Square.
        1 => dx.abs().max(dy.abs()) <= 0.9 * r,
        // Triangle pointing up: apex at the top, base at the bottom.
        2 => {
            let s = 0.9 * r;
            dy.abs() <= s && dx.abs() <= s * (dy + s) / (2.0 * s)
        }
        // Triangle pointing down.
        3 => {
            let s = 0.9 * r;
            dy.abs() <= s && dx.abs() <= s * (s - dy) / (2.0 * s)
        }
        // Diamond.
        4 => dx.abs() + dy.abs() <= r,
        // Ring.
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        // Cross.
        _ => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
    }
}

/// Half-extents (ex, ey) of the continuous shape support: every point of the
/// shape satisfies |dx| ≤ ex, |dy| ≤ ey, with equality attained.
pub fn shape_extent(instrument_id: usize, r: f64) -> (f64, f64) {
    match instrument_id {
        0 => (r, r),
        1 => (0.9 * r, 0.9 * r),
        2 | 3 => (0.9 * r, 0.9 * r),
        4 => (r, r),
        5 => (r, r),
        _ => (r, r),
    }
}

/// Tight analytic bounding box of one track at one frame, in normalized
/// coordinates, clamped to the canvas. The rendered raster stays within one
/// pixel of this box by construction (pixel centers inside the continuous
/// support, each pixel extending half a unit outward).
pub fn analytic_box(
    seg: &Segment,
    track: &InstrumentTrack,
    frame: usize,
    height: usize,
    width: usize,
) -> BoundingBox {
    let (cx, cy) = seg.center_at(track, frame);
    let r = seg.radius_at(track, frame);
    let (ex, ey) = shape_extent(track.instrument_id, r);
    let (w, h) = (width as f64, height as f64);
    BoundingBox {
        x1: ((cx - ex) / w).clamp(0.0, 1.0),
        y1: ((cy - ey) / h).clamp(0.0, 1.0),
        x2: ((cx + ex) / w).clamp(0.0, 1.0),
        y2: ((cy + ey) / h).clamp(0.0, 1.0),
    }
}

/// Static per-video background texture parameters.
#[derive(Debug, Clone, Copy)]
pub struct Texture {
    pub fx: f64,
    pub fy: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

impl Texture {
    pub fn from_rng(rng: &mut rand_chacha::ChaCha20Rng) -> Self {
        use rand::Rng;
        Self {
            fx: rng.gen_range(1.0..2.5),
            fy: rng.gen_range(1.0..2.5),
            phase_x: rng.gen_range(0.0..std::f64::consts::TAU),
            phase_y: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }
}

/// Render one frame to an RGB byte buffer (row-major, 3 bytes per pixel).
pub fn render_frame(
    script: &SceneScript,
    frame: usize,
    height: usize,
    width: usize,
    texture: &Texture,
) -> Vec<u8> {
    let seg = script.segment_at(frame);
    let (hue, sat, val) = phase_background(seg.phase_id);
    let mut buf = vec![0u8; height * width * 3];

    for y in 0..height {
        for x in 0..width {
            let tex = 0.05
                * (std::f64::consts::TAU * x as f64 * texture.fx / width as f64 + texture.phase_x)
                    .sin()
                * (std::f64::consts::TAU * y as f64 * texture.fy / height as f64 + texture.phase_y)
                    .sin();
            let rgb = hsv_to_rgb(hue, sat, (val + tex).clamp(0.0, 1.0));
            let o = (y * width + x) * 3;
            buf[o..o + 3].copy_from_slice(&rgb);
        }
    }

    // Step marker: white cell on the border ring.
    let (my, mx) = marker_origin(seg.step_id, height, width);
    for y in my..(my + MARKER_CELL).min(height) {
        for x in mx..(mx + MARKER_CELL).min(width) {
            let o = (y * width + x) * 3;
            buf[o..o + 3].copy_from_slice(&[255, 255, 255]);
        }
    }

    // Target blob under the instruments.
    if let Some(blob) = &seg.blob {
        paint_disc(&mut buf, height, width, blob, [150, 150, 150]);
    }

    // Instruments in track order (later tracks composite on top).
    for track in &seg.tracks {
        let (cx, cy) = seg.center_at(track, frame);
        let r = seg.radius_at(track, frame);
        let color = instrument_color(track.instrument_id);
        let (ex, ey) = shape_extent(track.instrument_id, r);
        let x_lo = ((cx - ex).floor().max(0.0)) as usize;
        let x_hi = ((cx + ex).ceil().min(width as f64 - 1.0)) as usize;
        let y_lo = ((cy - ey).floor().max(0.0)) as usize;
        let y_hi = ((cy + ey).ceil().min(height as f64 - 1.0)) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if shape_mask(track.instrument_id, dx, dy, r) {
                    let o = (y * width + x) * 3;
                    buf[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }
    buf
}

fn paint_disc(buf: &mut [u8], height: usize, width: usize, blob: &Blob, color: [u8; 3]) {
    let (cx, cy) = blob.center;
    let r = blob.radius;
    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil().min(width as f64 - 1.0)) as usize;
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil().min(height as f64 - 1.0)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                let o = (y * width + x) * 3;
                buf[o..o + 3].copy_from_slice(&color);
            }
        }
    }
}
