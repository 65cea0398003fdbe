//! Procedural anchor world: identities, skeleton poses, rendering of frames,
//! condition maps and foreground masks, and head boxes.
//!
//! Frames are `[3, 32, 32]` images in `[0,1]`. Geometry is in frame pixels
//! with pixel `(i, j)` covering `[j, j+1) × [i, i+1)`. Skeleton lengths are
//! shared by all identities, so condition maps carry no appearance.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::numerics::{Rng, Tensor};
use crate::sgdm::ConditionMap;

pub const FRAME_SIZE: usize = 32;
pub const FACE_SIZE: usize = 16;
/// Joint angles: left shoulder, left elbow, right shoulder, right elbow,
/// head tilt, torso lean.
pub const NUM_ANGLES: usize = 6;
pub const MARGIN: f64 = 2.0;
pub const MAX_STEP: f64 = 0.15;

const TORSO: f64 = 10.0;
const HEAD_OFFSET: f64 = 4.5;
const UPPER_ARM: f64 = 6.0;
const FOREARM: f64 = 5.5;
const HAND_RADIUS: f64 = 1.5;
const HEAD_RADIUS: (f64, f64) = (3.0, 4.0);
const LIMB_WIDTH: (f64, f64) = (2.0, 3.0);
const TORSO_LENGTH: (f64, f64) = (8.0, 11.0);
const ANGLE_RANGE: [(f64, f64); NUM_ANGLES] = [(0.3, 2.8), (-1.8, 1.8), (0.3, 2.8), (-1.8, 1.8), (-0.35, 0.35), (-0.25, 0.25)];
const ROOT_X: (f64, f64) = (14.0, 18.0);
const ROOT_Y: (f64, f64) = (25.5, 27.0);
const STROKE_HALF_WIDTH: f64 = 0.6;
const MARKER_RADIUS: f64 = 1.25;
/// Minimum per-channel gap between foreground and background colors.
pub const COLOR_SEPARATION: f64 = 0.2;
/// Minimum per-channel gap between head and body colors.
pub const PART_SEPARATION: f64 = 0.3;

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Identity {
    pub body_color: Rgb,
    pub head_color: Rgb,
    pub background_color: Rgb,
    pub limb_width: f64,
    pub head_radius: f64,
    /// Length of the drawn torso below the neck.
    pub torso_length: f64,
}

fn max_gap(a: &Rgb, b: &Rgb) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

impl Identity {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(in_unit(&self.body_color) && in_unit(&self.head_color) && in_unit(&self.background_color)) {
            return Err(invalid("Identity", "colors must lie in [0, 1]"));
        }
        if max_gap(&self.body_color, &self.background_color) < COLOR_SEPARATION || max_gap(&self.head_color, &self.background_color) < COLOR_SEPARATION {
            return Err(invalid("Identity", "foreground too close to background"));
        }
        if max_gap(&self.head_color, &self.body_color) < PART_SEPARATION {
            return Err(invalid("Identity", "head and body colors too close"));
        }
        let within = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        if !within(self.head_radius, HEAD_RADIUS) || !within(self.limb_width, LIMB_WIDTH) || !within(self.torso_length, TORSO_LENGTH) {
            return Err(invalid("Identity", "geometry outside the supported range"));
        }
        Ok(())
    }
}

/// Colors and geometry drawn uniformly, rejecting draws that violate the
/// separation invariants.
pub fn sample_identity(rng: &mut Rng) -> Identity {
    let color = |rng: &mut Rng| [rng.uniform(), rng.uniform(), rng.uniform()];
    loop {
        let id = Identity {
            background_color: color(rng),
            body_color: color(rng),
            head_color: color(rng),
            limb_width: rng.uniform_range(LIMB_WIDTH.0, LIMB_WIDTH.1),
            head_radius: rng.uniform_range(HEAD_RADIUS.0, HEAD_RADIUS.1),
            torso_length: rng.uniform_range(TORSO_LENGTH.0, TORSO_LENGTH.1),
        };
        if id.validate().is_ok() {
            return id;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    pub root: [f64; 2],
    pub angles: [f64; NUM_ANGLES],
}

/// Joint positions from forward kinematics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joints {
    pub root: [f64; 2],
    pub neck: [f64; 2],
    pub head: [f64; 2],
    pub left_elbow: [f64; 2],
    pub left_hand: [f64; 2],
    pub right_elbow: [f64; 2],
    pub right_hand: [f64; 2],
}

impl Joints {
    pub fn all(&self) -> [[f64; 2]; 7] {
        [self.root, self.neck, self.head, self.left_elbow, self.left_hand, self.right_elbow, self.right_hand]
    }
    /// Landmarks scored by the joint-error metric: head, left hand, right hand.
    pub fn landmarks(&self) -> [[f64; 2]; 3] {
        [self.head, self.left_hand, self.right_hand]
    }
    fn bones(&self) -> [([f64; 2], [f64; 2]); 6] {
        [
            (self.root, self.neck),
            (self.neck, self.head),
            (self.neck, self.left_elbow),
            (self.left_elbow, self.left_hand),
            (self.neck, self.right_elbow),
            (self.right_elbow, self.right_hand),
        ]
    }
}

fn up(a: f64) -> [f64; 2] {
    [libm::sin(a), -libm::cos(a)]
}

fn offset(p: [f64; 2], d: [f64; 2], l: f64) -> [f64; 2] {
    [p[0] + l * d[0], p[1] + l * d[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0) };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

impl Pose {
    pub fn joints(&self) -> Joints {
        let a = &self.angles;
        let neck = offset(self.root, up(a[5]), TORSO);
        let head = offset(neck, up(a[5] + a[4]), HEAD_OFFSET);
        // Shoulder angle 0 points straight down; arms open outwards.
        let left = |ang: f64| [-libm::sin(ang), libm::cos(ang)];
        let right = |ang: f64| [libm::sin(ang), libm::cos(ang)];
        let left_elbow = offset(neck, left(a[0]), UPPER_ARM);
        let left_hand = offset(left_elbow, left(a[0] + a[1]), FOREARM);
        let right_elbow = offset(neck, right(a[2]), UPPER_ARM);
        let right_hand = offset(right_elbow, right(a[2] + a[3]), FOREARM);
        Joints {
            root: self.root,
            neck,
            head,
            left_elbow,
            left_hand,
            right_elbow,
            right_hand,
        }
    }

    /// Joints inside the frame with the margin, head disc inside the frame,
    /// hands clear of the head and of each other, angles within range.
    pub fn is_valid(&self) -> bool {
        if !self.angles.iter().zip(ANGLE_RANGE).all(|(a, r)| a.is_finite() && *a >= r.0 && *a <= r.1) {
            return false;
        }
        let lim = FRAME_SIZE as f64 - MARGIN;
        let j = self.joints();
        if !j.all().iter().all(|p| p[0] >= MARGIN && p[0] <= lim && p[1] >= MARGIN && p[1] <= lim) {
            return false;
        }
        let r = HEAD_RADIUS.1;
        let (hx, hy) = (j.head[0], j.head[1]);
        if hx - r < 0.0 || hy - r < 0.0 || hx + r > FRAME_SIZE as f64 || hy + r > FRAME_SIZE as f64 {
            return false;
        }
        let clear = r + HAND_RADIUS + 1.0;
        let limbs = [j.left_elbow, j.left_hand, j.right_elbow, j.right_hand];
        if !limbs.iter().all(|&p| dist(p, j.head) >= clear) || dist(j.left_hand, j.right_hand) < 4.0 * HAND_RADIUS {
            return false;
        }
        // Joint markers stay apart so each one is separately visible.
        let all = j.all();
        (0..all.len()).all(|a| (a + 1..all.len()).all(|b| dist(all[a], all[b]) >= 3.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(invalid("Pose", "pose violates the frame margin or joint constraints"))
        }
    }
}

fn random_pose(rng: &mut Rng, root: [f64; 2]) -> Pose {
    loop {
        let mut angles = [0.0; NUM_ANGLES];
        for (a, r) in angles.iter_mut().zip(ANGLE_RANGE) {
            *a = rng.uniform_range(r.0, r.1);
        }
        let p = Pose { root, angles };
        if p.is_valid() {
            return p;
        }
    }
}

/// Smooth bounded random walk over joint angles with a fixed root. Each step
/// changes every angle by at most [`MAX_STEP`]; invalid proposals reverse
/// and damp the velocity, and after repeated failures the pose holds still.
pub fn sample_pose_sequence(rng: &mut Rng, n: usize) -> Vec<Pose> {
    let root = [rng.uniform_range(ROOT_X.0, ROOT_X.1), rng.uniform_range(ROOT_Y.0, ROOT_Y.1)];
    let mut pose = random_pose(rng, root);
    let mut vel = [0.0f64; NUM_ANGLES];
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(pose);
    while out.len() < n {
        for v in vel.iter_mut() {
            *v = (0.85 * *v + 0.04 * rng.normal()).clamp(-MAX_STEP, MAX_STEP);
        }
        let mut accepted = false;
        for _ in 0..8 {
            let mut next = pose;
            for (a, v) in next.angles.iter_mut().zip(&vel) {
                *a += v;
            }
            if next.is_valid() {
                pose = next;
                accepted = true;
                break;
            }
            for v in vel.iter_mut() {
                *v *= -0.5;
            }
        }
        if !accepted {
            vel = [0.0; NUM_ANGLES];
        }
        out.push(pose);
    }
    out
}

/// Adds Gaussian noise (std `magnitude`, clipped at three standard
/// deviations) to the joint angles, then moves back towards the original
/// pose by bisection until the result is valid.
pub fn perturb_pose(pose: &Pose, rng: &mut Rng, magnitude: f64) -> Result<Pose> {
    if !(magnitude >= 0.0) {
        return Err(invalid("perturb_pose", "magnitude must be non-negative"));
    }
    let mut noise = [0.0; NUM_ANGLES];
    for n in noise.iter_mut() {
        *n = (magnitude * rng.normal()).clamp(-3.0 * magnitude, 3.0 * magnitude);
    }
    let at = |s: f64| {
        let mut p = *pose;
        for (a, n) in p.angles.iter_mut().zip(&noise) {
            *a += s * n;
        }
        p
    };
    let full = at(1.0);
    if full.is_valid() || !pose.is_valid() {
        return Ok(full);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if at(mid).is_valid() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Head,
    Hand,
    Body,
}

fn part_at(id: &Identity, j: &Joints, p: [f64; 2]) -> Option<Part> {
    if dist(p, j.head) <= id.head_radius {
        return Some(Part::Head);
    }
    if dist(p, j.left_hand) <= HAND_RADIUS || dist(p, j.right_hand) <= HAND_RADIUS {
        return Some(Part::Hand);
    }
    let half = 0.5 * id.limb_width;
    let dir = [j.neck[0] - j.root[0], j.neck[1] - j.root[1]];
    let hip = offset(j.neck, [-dir[0] / TORSO, -dir[1] / TORSO], id.torso_length);
    let arms = [(j.neck, j.left_elbow), (j.left_elbow, j.left_hand), (j.neck, j.right_elbow), (j.right_elbow, j.right_hand)];
    if seg_dist(p, j.neck, hip) <= half || arms.iter().any(|&(a, b)| seg_dist(p, a, b) <= half) {
        return Some(Part::Body);
    }
    None
}

/// Sub-sample offsets of the 2×2 supersampling grid.
const SUB: [f64; 2] = [0.25, 0.75];

fn supersample(size: usize, mut f: impl FnMut([f64; 2]) -> [f64; 3]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for jx in 0..size {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let v = f([jx as f64 + sx, i as f64 + sy]);
                    for c in 0..3 {
                        acc[c] += 0.25 * v[c];
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

fn planar(size: usize, px: &[[f64; 3]], channels: usize) -> Tensor {
    let hw = size * size;
    Tensor::from_fn(&[channels, size, size], |i| px[i % hw][i / hw].clamp(0.0, 1.0) as f32)
}

/// Anti-aliased raster of the figure over the background.
pub fn render_frame(id: &Identity, pose: &Pose) -> Tensor {
    let j = pose.joints();
    let px = supersample(FRAME_SIZE, |p| match part_at(id, &j, p) {
        Some(Part::Head) | Some(Part::Hand) => id.head_color,
        Some(Part::Body) => id.body_color,
        None => id.background_color,
    });
    planar(FRAME_SIZE, &px, 3)
}

/// Binary foreground mask `[1, 32, 32]`: pixels at least half covered,
/// coverage measured on a 4×4 grid.
pub fn foreground_mask(id: &Identity, pose: &Pose) -> Tensor {
    let j = pose.joints();
    let n = FRAME_SIZE;
    Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let p = [x + (sx as f64 + 0.5) / 4.0, y + (sy as f64 + 0.5) / 4.0];
                hits += part_at(id, &j, p).is_some() as usize;
            }
        }
        if hits >= 8 {
            1.0
        } else {
            0.0
        }
    })
}

/// Condition-map levels: bone strokes, trunk joints (root, neck, elbows),
/// head, hands. Distinct marker levels tell hands from elbows.
pub const STROKE_LEVEL: f64 = 0.3;
pub const JOINT_LEVEL: f64 = 0.6;
pub const HEAD_LEVEL: f64 = 0.8;
pub const HAND_LEVEL: f64 = 1.0;

fn skeleton_value(markers: &[([f64; 2], f64)], bones: &[([f64; 2], [f64; 2])], p: [f64; 2]) -> f64 {
    let m = markers.iter().filter(|(q, _)| dist(p, *q) <= MARKER_RADIUS).map(|&(_, v)| v).fold(0.0, f64::max);
    if m > 0.0 {
        m
    } else if bones.iter().any(|&(a, b)| seg_dist(p, a, b) <= STROKE_HALF_WIDTH) {
        STROKE_LEVEL
    } else {
        0.0
    }
}

fn body_markers(j: &Joints) -> [([f64; 2], f64); 7] {
    [
        (j.root, JOINT_LEVEL),
        (j.neck, JOINT_LEVEL),
        (j.head, HEAD_LEVEL),
        (j.left_elbow, JOINT_LEVEL),
        (j.left_hand, HAND_LEVEL),
        (j.right_elbow, JOINT_LEVEL),
        (j.right_hand, HAND_LEVEL),
    ]
}

/// White-on-black skeleton strokes with joint markers, graded by joint kind.
pub fn render_condition(pose: &Pose) -> ConditionMap {
    let j = pose.joints();
    let (markers, bones) = (body_markers(&j), j.bones());
    let px = supersample(FRAME_SIZE, |p| [skeleton_value(&markers, &bones, p); 3]);
    ConditionMap::new(planar(FRAME_SIZE, &px, 1)).expect("values in [0,1]")
}

/// Axis-aligned square in frame pixels, mapped to a `size × size` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub size: usize,
}

impl CropTransform {
    pub fn new(cx: f64, cy: f64, side: f64, size: usize) -> Result<Self> {
        let n = FRAME_SIZE as f64;
        let eps = 1e-9;
        if !(side > 0.0) || size == 0 || cx - side / 2.0 < -eps || cy - side / 2.0 < -eps || cx + side / 2.0 > n + eps || cy + side / 2.0 > n + eps {
            return Err(invalid("CropTransform", "box must be non-degenerate and inside the frame"));
        }
        Ok(Self { cx, cy, side, size })
    }
    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.size as f64
    }
    /// Frame coordinates of a point given in crop coordinates.
    pub fn to_frame(&self, u: f64, v: f64) -> [f64; 2] {
        let s = self.scale();
        [self.cx - self.side / 2.0 + u * s, self.cy - self.side / 2.0 + v * s]
    }
    /// Crop coordinates of a point given in frame coordinates.
    pub fn to_crop(&self, x: f64, y: f64) -> [f64; 2] {
        let s = self.scale();
        [(x - self.cx + self.side / 2.0) / s, (y - self.cy + self.side / 2.0) / s]
    }
}

/// Square of side `2.5·head_radius` centered on the head joint, shifted to
/// lie inside the frame.
pub fn head_box(pose: &Pose, id: &Identity) -> (f64, f64, f64) {
    let h = pose.joints().head;
    let n = FRAME_SIZE as f64;
    let side = (2.5 * id.head_radius).min(n);
    let c = |v: f64| v.clamp(side / 2.0, n - side / 2.0);
    (c(h[0]), c(h[1]), side)
}

pub fn head_transform(pose: &Pose, id: &Identity) -> CropTransform {
    let (cx, cy, side) = head_box(pose, id);
    CropTransform::new(cx, cy, side, FACE_SIZE).expect("head box lies inside the frame")
}

/// Head strokes and markers re-rendered in crop coordinates.
pub fn render_face_condition(pose: &Pose, tf: &CropTransform) -> ConditionMap {
    let j = pose.joints();
    let markers = [(j.neck, JOINT_LEVEL), (j.head, HEAD_LEVEL)];
    let bones = [(j.neck, j.head)];
    let px = supersample(tf.size, |p| [skeleton_value(&markers, &bones, tf.to_frame(p[0], p[1])); 3]);
    ConditionMap::new(planar(tf.size, &px, 1)).expect("values in [0,1]")
}

/// Binary mask of the head disc in crop coordinates, dilated by half a frame
/// pixel so anti-aliased rim pixels are included.
pub fn head_mask(id: &Identity, pose: &Pose, tf: &CropTransform) -> Tensor {
    let h = pose.joints().head;
    let n = tf.size;
    Tensor::from_fn(&[1, n, n], |i| {
        let q = tf.to_frame((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
        if dist(q, h) <= id.head_radius + 0.5 + 0.5 * tf.scale() {
            1.0
        } else {
            0.0
        }
    })
}

/// One identity with a pose sequence.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Clip {
    pub identity: Identity,
    pub poses: Vec<Pose>,
}

impl Clip {
    pub fn frames(&self) -> Vec<Tensor> {
        self.poses.iter().map(|p| render_frame(&self.identity, p)).collect()
    }
}

/// Dataset sizes for the two training stages and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetRecipe {
    pub pretrain_identities: usize,
    pub pretrain_frames: usize,
    pub finetune_frames: usize,
    pub test_sequences: usize,
    pub test_frames: usize,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            pretrain_identities: 4,
            pretrain_frames: 600,
            finetune_frames: 300,
            test_sequences: 3,
            test_frames: 60,
        }
    }
}

/// Pretraining clips (one per identity), the fine-tuning clip of the held-out
/// identity, and held-out test pose sequences of that identity.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldData {
    pub pretrain: Vec<Clip>,
    pub finetune: Clip,
    pub test: Vec<Clip>,
}

pub fn generate_world(recipe: &DatasetRecipe, seed: u64) -> Result<WorldData> {
    if recipe.pretrain_identities == 0 || recipe.pretrain_frames == 0 || recipe.finetune_frames == 0 {
        return Err(invalid("generate_world", "dataset sizes must be positive"));
    }
    let root = Rng::new(seed, 0);
    let clip = |tag: u64, idx: u64, id: Identity, n: usize| Clip {
        identity: id,
        poses: sample_pose_sequence(&mut root.fork(&[tag, idx]), n),
    };
    let mut ids = root.fork(&[0]);
    let pretrain = (0..recipe.pretrain_identities)
        .map(|i| {
            let id = sample_identity(&mut ids);
            clip(1, i as u64, id, recipe.pretrain_frames)
        })
        .collect();
    let target = sample_identity(&mut ids);
    let finetune = clip(2, 0, target.clone(), recipe.finetune_frames);
    let test = (0..recipe.test_sequences).map(|i| clip(3, i as u64, target.clone(), recipe.test_frames)).collect();
    Ok(WorldData { pretrain, finetune, test })
}
