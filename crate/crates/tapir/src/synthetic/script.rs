//! Procedure scripting: segment timeline, instrument motion paths, and the
//! derivation of action labels from the scripted motion.
//!
//! Everything downstream (rendering, annotation, tests) reads positions and
//! sizes from the closed-form functions here, so labels can never drift from
//! pixels: the label derivation and the renderer consume the same script.

use super::GeneratorConfig;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

// Geometry constants (pixels at the default 64×64 canvas; scale-free logic).
pub const BASE_RADIUS_MIN: f64 = 4.0;
pub const BASE_RADIUS_MAX: f64 = 5.5;
pub const MOVE_SPEED: f64 = 0.6;
pub const ORBIT_RADIUS: f64 = 4.0;
pub const ORBIT_OMEGA: f64 = std::f64::consts::TAU / 16.0;
pub const OSC_AMPLITUDE: f64 = 3.5;
pub const OSC_PERIOD: f64 = 12.0;
pub const GROW_RATE: f64 = 0.08;
pub const PULSE_AMPLITUDE: f64 = 1.2;
pub const PULSE_PERIOD: f64 = 12.0;
pub const BLOB_RADIUS: f64 = 5.0;
pub const INTERIOR_MARGIN: f64 = 12.0;
/// Surface-distance bound for the Hover label.
pub const HOVER_MARGIN: f64 = 6.0;
/// Half-window (frames) and minimum distance change for Approach/Retreat.
pub const RELATION_WINDOW: i64 = 3;
pub const RELATION_MIN_DELTA: f64 = 2.0;

// Action vocabulary layout: 0..=8 translation patterns (exactly one per
// instrument), 9..=11 size patterns (at most one), 12..=15 target relations
// (at most one, derived from the distance profile to the target blob).
pub const ACTION_STILL: usize = 0;
pub const ACTION_GROUP_B_START: usize = 9;
pub const ACTION_CONTACT: usize = 12;
pub const ACTION_HOVER: usize = 13;
pub const ACTION_APPROACH: usize = 14;
pub const ACTION_RETREAT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    Still,
    MoveUp,
    MoveDown,
    MoveLeft,
    MoveRight,
    /// `phase0` is the starting angle; sign of rotation fixed per variant.
    OrbitCw { phase0: f64 },
    OrbitCcw { phase0: f64 },
    OscillateH { phase0: f64 },
    OscillateV { phase0: f64 },
}

impl Motion {
    /// The group-A action id this motion realizes.
    pub fn action_id(&self) -> usize {
        match self {
            Motion::Still => 0,
            Motion::MoveUp => 1,
            Motion::MoveDown => 2,
            Motion::MoveLeft => 3,
            Motion::MoveRight => 4,
            Motion::OrbitCw { .. } => 5,
            Motion::OrbitCcw { .. } => 6,
            Motion::OscillateH { .. } => 7,
            Motion::OscillateV { .. } => 8,
        }
    }

    pub fn is_translation(&self) -> bool {
        matches!(
            self,
            Motion::MoveUp | Motion::MoveDown | Motion::MoveLeft | Motion::MoveRight
        )
    }

    /// Unit drift direction for translational motions (x right, y down).
    pub fn direction(&self) -> Option<(f64, f64)> {
        match self {
            Motion::MoveUp => Some((0.0, -1.0)),
            Motion::MoveDown => Some((0.0, 1.0)),
            Motion::MoveLeft => Some((-1.0, 0.0)),
            Motion::MoveRight => Some((1.0, 0.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SizePattern {
    Fixed,
    Grow,
    Shrink,
    Pulse { phase0: f64 },
}

impl SizePattern {
    pub fn action_id(&self) -> Option<usize> {
        match self {
            SizePattern::Fixed => None,
            SizePattern::Grow => Some(9),
            SizePattern::Shrink => Some(10),
            SizePattern::Pulse { .. } => Some(11),
        }
    }
}

/// One instrument's scripted behavior over a segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstrumentTrack {
    pub instrument_id: usize,
    /// Anchor position at the segment's temporal midpoint.
    pub base: (f64, f64),
    pub base_radius: f64,
    pub motion: Motion,
    pub size: SizePattern,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub phase_id: usize,
    pub step_id: usize,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub tracks: Vec<InstrumentTrack>,
    pub blob: Option<Blob>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..self.end_frame).contains(&frame)
    }

    /// Local time of a frame, measured from the segment midpoint.
    fn local(&self, frame: usize) -> f64 {
        frame as f64 - self.start_frame as f64 - self.len() as f64 / 2.0
    }

    /// Instrument center at a frame (global pixel coordinates).
    pub fn center_at(&self, track: &InstrumentTrack, frame: usize) -> (f64, f64) {
        let t = self.local(frame);
        let (bx, by) = track.base;
        match track.motion {
            Motion::Still => (bx, by),
            Motion::MoveUp => (bx, by - MOVE_SPEED * t),
            Motion::MoveDown => (bx, by + MOVE_SPEED * t),
            Motion::MoveLeft => (bx - MOVE_SPEED * t, by),
            Motion::MoveRight => (bx + MOVE_SPEED * t, by),
            Motion::OrbitCw { phase0 } => {
                let a = phase0 + ORBIT_OMEGA * t;
                (bx + ORBIT_RADIUS * a.cos(), by + ORBIT_RADIUS * a.sin())
            }
            Motion::OrbitCcw { phase0 } => {
                let a = phase0 - ORBIT_OMEGA * t;
                (bx + ORBIT_RADIUS * a.cos(), by + ORBIT_RADIUS * a.sin())
            }
            Motion::OscillateH { phase0 } => (
                bx + OSC_AMPLITUDE * (std::f64::consts::TAU * t / OSC_PERIOD + phase0).sin(),
                by,
            ),
            Motion::OscillateV { phase0 } => (
                bx,
                by + OSC_AMPLITUDE * (std::f64::consts::TAU * t / OSC_PERIOD + phase0).sin(),
            ),
        }
    }

    /// Instrument nominal radius at a frame.
    pub fn radius_at(&self, track: &InstrumentTrack, frame: usize) -> f64 {
        let t = self.local(frame);
        match track.size {
            SizePattern::Fixed => track.base_radius,
            SizePattern::Grow => track.base_radius + GROW_RATE * t,
            SizePattern::Shrink => track.base_radius - GROW_RATE * t,
            SizePattern::Pulse { phase0 } => {
                track.base_radius
                    + PULSE_AMPLITUDE
                        * (std::f64::consts::TAU * t / PULSE_PERIOD + phase0).sin()
            }
        }
    }

    /// Signed surface distance between instrument and blob at a frame.
    fn surface_distance(&self, track: &InstrumentTrack, blob: &Blob, frame: usize) -> f64 {
        let (cx, cy) = self.center_at(track, frame);
        let d = ((cx - blob.center.0).powi(2) + (cy - blob.center.1).powi(2)).sqrt();
        d - self.radius_at(track, frame) - blob.radius
    }

    /// Derive the relation (group-C) action at a keyframe, if any.
    ///
    /// Check order is fixed: Contact, then Approach/Retreat from the distance
    /// trend over ±RELATION_WINDOW frames (clamped to the segment), then
    /// Hover by proximity.
    pub fn relation_at(&self, track: &InstrumentTrack, frame: usize) -> Option<usize> {
        let blob = self.blob.as_ref()?;
        let d_now = self.surface_distance(track, blob, frame);
        if d_now <= 0.0 {
            return Some(ACTION_CONTACT);
        }
        let lo = (frame as i64 - RELATION_WINDOW).max(self.start_frame as i64) as usize;
        let hi = ((frame as i64 + RELATION_WINDOW).min(self.end_frame as i64 - 1)) as usize;
        let trend = self.surface_distance(track, blob, hi) - self.surface_distance(track, blob, lo);
        if trend <= -RELATION_MIN_DELTA {
            return Some(ACTION_APPROACH);
        }
        if trend >= RELATION_MIN_DELTA {
            return Some(ACTION_RETREAT);
        }
        if d_now <= HOVER_MARGIN {
            return Some(ACTION_HOVER);
        }
        None
    }

    /// Full action label set for a track at a keyframe: always the motion
    /// action, plus the size action and derived relation when present.
    /// Guaranteed 1–3 labels, sorted ascending.
    pub fn actions_at(&self, track: &InstrumentTrack, frame: usize) -> Vec<usize> {
        let mut out = vec![track.motion.action_id()];
        if let Some(a) = track.size.action_id() {
            out.push(a);
        }
        if let Some(a) = self.relation_at(track, frame) {
            out.push(a);
        }
        out.sort_unstable();
        out
    }
}

/// A whole video's scripted timeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScript {
    pub video_index: usize,
    pub segments: Vec<Segment>,
}

impl SceneScript {
    pub fn segment_at(&self, frame: usize) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.contains(frame))
            .expect("segments tile the video")
    }
}

fn sample_categorical(rng: &mut ChaCha20Rng, priors: &[f64]) -> usize {
    let total: f64 = priors.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &p) in priors.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    priors.len() - 1
}

/// Draw from `priors` restricted to `support`, renormalized; uniform over the
/// support when its prior mass is zero.
fn sample_restricted(rng: &mut ChaCha20Rng, priors: &[f64], support: &[usize]) -> usize {
    let mass: f64 = support.iter().map(|&i| priors[i]).sum();
    if mass <= 0.0 {
        return support[rng.gen_range(0..support.len())];
    }
    let mut u = rng.gen_range(0.0..mass);
    for &i in support {
        if u < priors[i] {
            return i;
        }
        u -= priors[i];
    }
    support[support.len() - 1]
}

/// Probability that an instrument takes its preferred action rather than a
/// prior draw; this is what couples instrument identity to actions, which the
/// box-feature ablation experiment relies on.
const PREFERENCE_STRENGTH: f64 = 0.85;
const SIZE_PRESENCE_PROB: f64 = 0.5;
const RELATION_PRESENCE_PROB: f64 = 0.55;

fn preferred_motion(instrument_id: usize) -> usize {
    instrument_id % 9
}

fn preferred_size(instrument_id: usize) -> usize {
    ACTION_GROUP_B_START + instrument_id % 3
}

fn preferred_relation(instrument_id: usize) -> usize {
    ACTION_CONTACT + instrument_id % 4
}

fn motion_from_id(id: usize, rng: &mut ChaCha20Rng) -> Motion {
    match id {
        0 => Motion::Still,
        1 => Motion::MoveUp,
        2 => Motion::MoveDown,
        3 => Motion::MoveLeft,
        4 => Motion::MoveRight,
        5 => Motion::OrbitCw {
            phase0: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        6 => Motion::OrbitCcw {
            phase0: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        7 => Motion::OscillateH {
            phase0: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        _ => Motion::OscillateV {
            phase0: rng.gen_range(0.0..std::f64::consts::TAU),
        },
    }
}

fn size_from_id(id: usize, rng: &mut ChaCha20Rng) -> SizePattern {
    match id {
        9 => SizePattern::Grow,
        10 => SizePattern::Shrink,
        _ => SizePattern::Pulse {
            phase0: rng.gen_range(0.0..std::f64::consts::TAU),
        },
    }
}

fn clamp_point(p: (f64, f64), w: f64, h: f64, margin: f64) -> (f64, f64) {
    (p.0.clamp(margin, w - 1.0 - margin), p.1.clamp(margin, h - 1.0 - margin))
}

/// Place the blob so the requested relation is actually derived at the
/// keyframe closest to the segment midpoint. Returns None when the request
/// is incompatible with the track's motion (callers then get no relation or
/// whatever the derivation yields).
fn place_blob_for(
    seg: &Segment,
    track: &InstrumentTrack,
    desired: usize,
    anchor_frame: usize,
    rng: &mut ChaCha20Rng,
    (w, h): (f64, f64),
) -> Option<Blob> {
    let c = seg.center_at(track, anchor_frame);
    let r = seg.radius_at(track, anchor_frame);
    let place = |center: (f64, f64)| -> Blob {
        Blob {
            center: clamp_point(center, w, h, BLOB_RADIUS + 1.0),
            radius: BLOB_RADIUS,
        }
    };
    match desired {
        ACTION_CONTACT => Some(place((c.0 + 1.0, c.1))),
        ACTION_HOVER => {
            let gap = r + BLOB_RADIUS + 3.5;
            match track.motion {
                Motion::Still => {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    Some(place((c.0 + gap * a.cos(), c.1 + gap * a.sin())))
                }
                // Perpendicular placement keeps the distance profile flat.
                Motion::OscillateH { .. } => Some(place((c.0, c.1 + gap))),
                Motion::OscillateV { .. } => Some(place((c.0 + gap, c.1))),
                _ => None,
            }
        }
        ACTION_APPROACH => {
            let dir = track.motion.direction()?;
            let gap = r + BLOB_RADIUS + 4.0;
            Some(place((c.0 + dir.0 * gap, c.1 + dir.1 * gap)))
        }
        ACTION_RETREAT => {
            let dir = track.motion.direction()?;
            let gap = r + BLOB_RADIUS + 4.0;
            Some(place((c.0 - dir.0 * gap, c.1 - dir.1 * gap)))
        }
        _ => None,
    }
}

/// Script one video: a timeline of phase/step segments with instrument
/// tracks, deterministic from the provided RNG.
pub fn script_procedure(config: &GeneratorConfig, rng: &mut ChaCha20Rng) -> Vec<Segment> {
    let taxonomy = crate::annotation::Taxonomy::synthetic();
    let (h, w) = (config.image_size.0 as f64, config.image_size.1 as f64);
    let mut segments = Vec::new();
    let mut frame = 0usize;
    while frame < config.frames_per_video {
        let min_len = 3 * config.fps;
        let max_len = 8 * config.fps;
        let len = rng
            .gen_range(min_len..=max_len)
            .min(config.frames_per_video - frame)
            .max(1);
        let phase_id = sample_categorical(rng, &config.phase_priors);
        let children: Vec<usize> = taxonomy
            .steps_of(phase_id)
            .expect("synthetic taxonomy covers all phases")
            .iter()
            .copied()
            .collect();
        let step_id = sample_restricted(rng, &config.step_priors, &children);

        let mut seg = Segment {
            phase_id,
            step_id,
            start_frame: frame,
            end_frame: frame + len,
            tracks: Vec::new(),
            blob: None,
        };

        if phase_id != taxonomy.idle_phase_id {
            let u: f64 = rng.gen();
            let n_instruments = if u < 0.35 {
                1
            } else if u < 0.80 {
                2
            } else {
                3
            };
            let mut available: Vec<usize> = (0..taxonomy.instruments.len()).collect();
            let mut priors = config.instrument_priors.clone();
            for _ in 0..n_instruments {
                let id = sample_restricted(rng, &priors, &available);
                available.retain(|&x| x != id);
                priors[id] = 0.0;

                let motion_id = if rng.gen::<f64>() < PREFERENCE_STRENGTH {
                    preferred_motion(id)
                } else {
                    sample_restricted(rng, &config.action_priors, &(0..=8).collect::<Vec<_>>())
                };
                let motion = motion_from_id(motion_id, rng);
                let size = if rng.gen::<f64>() < SIZE_PRESENCE_PROB {
                    let size_id = if rng.gen::<f64>() < PREFERENCE_STRENGTH {
                        preferred_size(id)
                    } else {
                        sample_restricted(
                            rng,
                            &config.action_priors,
                            &(9..=11).collect::<Vec<_>>(),
                        )
                    };
                    size_from_id(size_id, rng)
                } else {
                    SizePattern::Fixed
                };
                let base = (
                    rng.gen_range(INTERIOR_MARGIN..w - 1.0 - INTERIOR_MARGIN),
                    rng.gen_range(INTERIOR_MARGIN..h - 1.0 - INTERIOR_MARGIN),
                );
                let base_radius = rng.gen_range(BASE_RADIUS_MIN..BASE_RADIUS_MAX);
                seg.tracks.push(InstrumentTrack {
                    instrument_id: id,
                    base,
                    base_radius,
                    motion,
                    size,
                });
            }

            // At most one blob per segment, targeted at the first track that
            // drew a relation.
            if !seg.tracks.is_empty() && rng.gen::<f64>() < RELATION_PRESENCE_PROB {
                let track = seg.tracks[0].clone();
                let desired = if rng.gen::<f64>() < PREFERENCE_STRENGTH {
                    preferred_relation(track.instrument_id)
                } else {
                    sample_restricted(
                        rng,
                        &config.action_priors,
                        &(12..=15).collect::<Vec<_>>(),
                    )
                };
                let anchor = seg.start_frame + seg.len() / 2;
                // Incompatible requests degrade to Contact, which every
                // motion supports.
                seg.blob = place_blob_for(&seg, &track, desired, anchor, rng, (w, h))
                    .or_else(|| place_blob_for(&seg, &track, ACTION_CONTACT, anchor, rng, (w, h)));
            }
        }

        segments.push(seg);
        frame += len;
    }
    segments
}
