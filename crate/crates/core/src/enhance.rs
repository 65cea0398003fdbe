//! Identity-specific face enhancement: crop the head region, regenerate it
//! with the inpainting face model, and blend it back with a linear feather.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{stream_key, Rng, Tensor};
use crate::scheduler::{clip_eps, GuidanceConfig, NoiseSchedule, Sampler};
use crate::sgdm::{self, denoise_guided, encode_appearance, from_latent, to_latent, AppearanceTokens, AttentionMode, ConditionMap, FaceInpaintInput, SgdmParams};
use crate::world::{head_mask, head_transform, render_face_condition, CropTransform, Identity, Pose, FACE_SIZE};

pub const DEFAULT_FEATHER: f64 = 2.0;
const FACE_TAG: u64 = 0x6661_6365;

/// Bilinear lookup in `[C, H, W]` at continuous coordinates where pixel
/// `(i, j)` is centered on `(j + 0.5, i + 0.5)`; edges are clamped.
pub fn bilinear(img: &Tensor, c: usize, x: f64, y: f64) -> f32 {
    let (h, w) = (img.dim(1), img.dim(2));
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (libm::floor(fx) as usize, libm::floor(fy) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
    let d = &img.data()[c * h * w..(c + 1) * h * w];
    let at = |i: usize, j: usize| d[i * w + j];
    let top = if ax == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - ax) + at(y0, x1) * ax };
    let bot = if ax == 0.0 { at(y1, x0) } else { at(y1, x0) * (1.0 - ax) + at(y1, x1) * ax };
    if ay == 0.0 {
        top
    } else {
        top * (1.0 - ay) + bot * ay
    }
}

/// Resamples the box of `tf` from `frame [C, H, W]` to `[C, size, size]`.
pub fn crop_with(frame: &Tensor, tf: &CropTransform) -> Result<Tensor> {
    if frame.rank() != 3 {
        return Err(invalid("crop", "expected [C, H, W]"));
    }
    let n = tf.size;
    Ok(Tensor::from_fn(&[frame.dim(0), n, n], |i| {
        let (c, v, u) = (i / (n * n), (i / n) % n, i % n);
        let p = tf.to_frame(u as f64 + 0.5, v as f64 + 0.5);
        bilinear(frame, c, p[0], p[1])
    }))
}

/// Face crop at face resolution and the transform that produced it.
pub fn crop_face(frame: &Tensor, pose: &Pose, id: &Identity) -> Result<(Tensor, CropTransform)> {
    let tf = head_transform(pose, id);
    Ok((crop_with(frame, &tf)?, tf))
}

/// Binary head-disc mask `[1, 16, 16]` in crop coordinates.
pub fn face_mask(id: &Identity, pose: &Pose, tf: &CropTransform) -> Tensor {
    head_mask(id, pose, tf)
}

/// Blend weight of every frame pixel: 1 over masked crop pixels, falling
/// linearly to 0 over `feather` frame pixels, and 0 outside the box.
pub fn paste_weights(mask: &Tensor, tf: &CropTransform, h: usize, w: usize, feather: f64) -> Vec<f64> {
    let n = tf.size;
    let masked: Vec<[f64; 2]> = (0..n * n).filter(|&i| mask.data()[i] == 1.0).map(|i| tf.to_frame((i % n) as f64 + 0.5, (i / n) as f64 + 0.5)).collect();
    let half = 0.5 * tf.scale();
    let (x0, y0) = (tf.cx - tf.side / 2.0, tf.cy - tf.side / 2.0);
    (0..h * w)
        .map(|i| {
            let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
            if p[0] < x0 || p[1] < y0 || p[0] > x0 + tf.side || p[1] > y0 + tf.side || masked.is_empty() {
                return 0.0;
            }
            // Distance from p to the union of masked crop cells.
            let d = masked
                .iter()
                .map(|q| {
                    let dx = ((p[0] - q[0]).abs() - half).max(0.0);
                    let dy = ((p[1] - q[1]).abs() - half).max(0.0);
                    libm::hypot(dx, dy)
                })
                .fold(f64::INFINITY, f64::min);
            if feather <= 0.0 {
                return if d == 0.0 { 1.0 } else { 0.0 };
            }
            (1.0 - d / feather).clamp(0.0, 1.0)
        })
        .collect()
}

/// Writes `crop` back through `tf`, weighted by `weights`. Pixels with zero
/// weight are copied unchanged.
pub fn paste(frame: &Tensor, crop: &Tensor, tf: &CropTransform, weights: &[f64]) -> Result<Tensor> {
    let (c, h, w) = (frame.dim(0), frame.dim(1), frame.dim(2));
    if crop.shape() != [c, tf.size, tf.size] || weights.len() != h * w {
        return Err(shape_err("paste", &[c, tf.size, tf.size], crop.shape()));
    }
    let mut out = frame.clone();
    let data = out.data_mut();
    for (i, &wt) in weights.iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        let q = tf.to_crop((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        for ch in 0..c {
            let v = bilinear(crop, ch, q[0], q[1]);
            let k = ch * h * w + i;
            data[k] = if wt == 1.0 { v } else { ((1.0 - wt) * data[k] as f64 + wt * v as f64) as f32 };
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhanceConfig {
    pub sampler: Sampler,
    pub guidance: GuidanceConfig,
    pub w_c: f32,
    pub feather: f64,
    pub seed: u64,
    /// Clamp clean estimates to the latent range at every step.
    pub clip_denoised: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::default(),
            guidance: GuidanceConfig::default(),
            w_c: sgdm::DEFAULT_CONTROL_WEIGHT,
            feather: DEFAULT_FEATHER,
            seed: 0,
            clip_denoised: true,
        }
    }
}

/// Regenerates the masked part of one crop from pure noise. Returns the
/// crop with the mask region replaced.
pub fn inpaint_crop(crop: &Tensor, mask: &Tensor, cond: &ConditionMap, tokens: &AppearanceTokens, params_face: &SgdmParams, sched: &NoiseSchedule, cfg: &EnhanceConfig, frame: u64) -> Result<Tensor> {
    let clean = to_latent(crop);
    let mut rng = Rng::new(cfg.seed, stream_key(&[FACE_TAG, frame]));
    let mut z: Tensor = rng.normal_tensor(crop.shape());
    let conds = core::slice::from_ref(cond);
    for (t, t_prev) in cfg.sampler.timesteps(sched)? {
        let input = FaceInpaintInput::new(z.clone(), mask.clone(), &clean)?;
        let eps = denoise_guided(&input.stacked().unsqueeze0(), t, tokens, conds, cfg.w_c, cfg.guidance, AttentionMode::PerFrame, params_face)?.eps;
        let mut eps = eps.reshape(crop.shape())?;
        if cfg.clip_denoised {
            eps = clip_eps(&z, &eps, t, sched, -1.0, 1.0)?;
        }
        z = cfg.sampler.step(&z, &eps, t, t_prev, sched, &mut rng)?;
    }
    let gen = from_latent(&z);
    let hw = crop.dim(1) * crop.dim(2);
    Ok(Tensor::from_fn(crop.shape(), |i| if mask.data()[i % hw] == 1.0 { gen.data()[i] } else { crop.data()[i] }))
}

/// Enhances one frame with an explicit mask and transform.
#[allow(clippy::too_many_arguments)]
pub fn enhance_masked(frame: &Tensor, pose: &Pose, mask: &Tensor, tf: &CropTransform, tokens: &AppearanceTokens, params_face: &SgdmParams, sched: &NoiseSchedule, cfg: &EnhanceConfig, index: u64) -> Result<Tensor> {
    if mask.shape() != [1, tf.size, tf.size] {
        return Err(shape_err("enhance", &[1, tf.size, tf.size], mask.shape()));
    }
    if mask.data().iter().all(|&m| m == 0.0) {
        return Ok(frame.clone());
    }
    let crop = crop_with(frame, tf)?;
    let cond = render_face_condition(pose, tf);
    let fixed = inpaint_crop(&crop, mask, &cond, tokens, params_face, sched, cfg, index)?;
    let weights = paste_weights(mask, tf, frame.dim(1), frame.dim(2), cfg.feather);
    paste(frame, &fixed, tf, &weights)
}

/// Frame-wise enhancement of a generated sequence. `face_ref` is a face
/// crop `[3, 16, 16]` of the identity's reference frame.
pub fn enhance_sequence(frames: &[Tensor], poses: &[Pose], id: &Identity, face_ref: &Tensor, params_face: &SgdmParams, sched: &NoiseSchedule, cfg: &EnhanceConfig) -> Result<Vec<Tensor>> {
    if frames.len() != poses.len() {
        return Err(invalid("enhance_sequence", "frames and poses must align"));
    }
    if params_face.config.image_size != FACE_SIZE {
        return Err(invalid("enhance_sequence", "face model must run at face resolution"));
    }
    let tokens = encode_appearance(face_ref, params_face)?;
    frames
        .iter()
        .zip(poses)
        .enumerate()
        .map(|(k, (f, p))| {
            let tf = head_transform(p, id);
            let mask = face_mask(id, p, &tf);
            enhance_masked(f, p, &mask, &tf, &tokens, params_face, sched, cfg, k as u64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgdm::{init_params, SgdmConfig};
    use crate::world::{render_frame, sample_identity, sample_pose_sequence, FRAME_SIZE};

    fn random_frame(rng: &mut Rng) -> Tensor {
        Tensor::from_fn(&[3, 32, 32], |_| rng.uniform() as f32)
    }

    #[test]
    fn constant_region_gives_constant_crop() {
        let mut rng = Rng::new(1, 0);
        let id = sample_identity(&mut rng);
        let pose = sample_pose_sequence(&mut rng, 1)[0];
        let f = Tensor::full(&[3, 32, 32], 0.37);
        let (crop, tf) = crop_face(&f, &pose, &id).unwrap();
        assert_eq!(crop.shape(), &[3, 16, 16]);
        assert!(crop.data().iter().all(|&v| v == 0.37));
        assert!(tf.side > 0.0);
    }

    #[test]
    fn identity_scale_round_trip_is_exact() {
        let mut rng = Rng::new(2, 0);
        let f = random_frame(&mut rng);
        let tf = CropTransform::new(13.0, 17.0, 16.0, 16).unwrap();
        let crop = crop_with(&f, &tf).unwrap();
        let ones = Tensor::full(&[1, 16, 16], 1.0);
        let w = paste_weights(&ones, &tf, 32, 32, 0.0);
        let blank = Tensor::zeros(&[3, 32, 32]);
        let back = paste(&blank, &crop, &tf, &w).unwrap();
        for c in 0..3 {
            for y in 9..25 {
                for x in 5..21 {
                    let k = c * 1024 + y * 32 + x;
                    assert_eq!(back.data()[k], f.data()[k]);
                }
            }
        }
        assert_eq!(back.data()[4], 0.0);
    }

    #[test]
    fn scale_two_round_trip_is_close() {
        let mut rng = Rng::new(3, 0);
        let id = sample_identity(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for pose in sample_pose_sequence(&mut rng, 10) {
            let f = render_frame(&id, &pose);
            let h = pose.joints().head;
            let tf = CropTransform::new(h[0].clamp(4.0, 28.0), h[1].clamp(4.0, 28.0), 8.0, 16).unwrap();
            assert!((1.0 / tf.scale() - 2.0).abs() < 1e-12);
            let crop = crop_with(&f, &tf).unwrap();
            let ones = Tensor::full(&[1, 16, 16], 1.0);
            let w = paste_weights(&ones, &tf, 32, 32, 0.0);
            let back = paste(&f.map(|_| 0.0), &crop, &tf, &w).unwrap();
            for (i, &wt) in w.iter().enumerate() {
                if wt == 1.0 {
                    for c in 0..3 {
                        total += (back.data()[c * 1024 + i] - f.data()[c * 1024 + i]).abs() as f64;
                        count += 1;
                    }
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean < 0.05, "round trip {mean}");
    }

    #[test]
    fn mask_covers_the_head() {
        let mut rng = Rng::new(4, 0);
        for _ in 0..5 {
            let id = sample_identity(&mut rng);
            for pose in sample_pose_sequence(&mut rng, 10) {
                let (crop, tf) = crop_face(&render_frame(&id, &pose), &pose, &id).unwrap();
                let m = face_mask(&id, &pose, &tf);
                assert!(m.sum_f64() > 0.0);
                let (mut head, mut covered) = (0, 0);
                for i in 0..256 {
                    let gap = (0..3).map(|c| (crop.data()[c * 256 + i] as f64 - id.head_color[c]).abs()).fold(0.0, f64::max);
                    let q = tf.to_frame((i % 16) as f64 + 0.5, (i / 16) as f64 + 0.5);
                    let j = pose.joints();
                    let near_hand = [j.left_hand, j.right_hand].iter().any(|h| libm::hypot(q[0] - h[0], q[1] - h[1]) < 2.5);
                    if gap < 0.02 && !near_hand {
                        head += 1;
                        covered += (m.data()[i] == 1.0) as usize;
                    }
                }
                assert!(covered as f64 >= 0.95 * head as f64, "{covered}/{head}");
            }
        }
    }

    fn face_model(seed: u64) -> SgdmParams {
        init_params(&mut Rng::new(seed, 0), &SgdmConfig::face()).unwrap()
    }

    #[test]
    fn enhancement_is_local_and_deterministic() {
        let mut rng = Rng::new(5, 0);
        let id = sample_identity(&mut rng);
        let poses = sample_pose_sequence(&mut rng, 2);
        let frames: Vec<Tensor> = poses.iter().map(|p| render_frame(&id, p)).collect();
        let p = face_model(1);
        let sched = NoiseSchedule::default_training();
        let cfg = EnhanceConfig { sampler: Sampler::Ddim { steps: 3 }, seed: 4, ..Default::default() };
        let (face_ref, _) = crop_face(&frames[0], &poses[0], &id).unwrap();
        let a = enhance_sequence(&frames, &poses, &id, &face_ref, &p, &sched, &cfg).unwrap();
        let b = enhance_sequence(&frames, &poses, &id, &face_ref, &p, &sched, &cfg).unwrap();
        assert_eq!(a, b);
        for (k, pose) in poses.iter().enumerate() {
            let tf = head_transform(pose, &id);
            let w = paste_weights(&face_mask(&id, pose, &tf), &tf, FRAME_SIZE, FRAME_SIZE, cfg.feather);
            let mut changed = 0;
            for (i, &wt) in w.iter().enumerate() {
                for c in 0..3 {
                    let (x, y) = (a[k].data()[c * 1024 + i], frames[k].data()[c * 1024 + i]);
                    if wt == 0.0 {
                        assert_eq!(x.to_bits(), y.to_bits());
                    } else if x != y {
                        changed += 1;
                    }
                }
            }
            assert!(changed > 0);
        }
        assert!(enhance_sequence(&frames, &poses[..1], &id, &face_ref, &p, &sched, &cfg).is_err());
    }

    #[test]
    fn degenerate_masks() {
        let mut rng = Rng::new(6, 0);
        let id = sample_identity(&mut rng);
        let pose = sample_pose_sequence(&mut rng, 1)[0];
        let f = render_frame(&id, &pose);
        let p = face_model(2);
        let sched = NoiseSchedule::default_training();
        let cfg = EnhanceConfig { sampler: Sampler::Ddim { steps: 2 }, ..Default::default() };
        let (crop, tf) = crop_face(&f, &pose, &id).unwrap();
        let tok = encode_appearance(&crop, &p).unwrap();
        let none = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(enhance_masked(&f, &pose, &none, &tf, &tok, &p, &sched, &cfg, 0).unwrap(), f);
        let all = Tensor::full(&[1, 16, 16], 1.0);
        let out = enhance_masked(&f, &pose, &all, &tf, &tok, &p, &sched, &cfg, 0).unwrap();
        assert!(out.is_finite());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
