//! Evaluation: landmark error against exact joints, temporal flicker, a
//! Fréchet distance over handcrafted frame features, and PSNR.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::world::{Identity, Pose, FRAME_SIZE};

/// Peak-to-runner-up ratio below which a detection is rejected.
pub const CONFIDENCE_RATIO: f64 = 1.5;
pub const PSNR_CAP: f64 = 99.0;
const HAND_RADIUS: f64 = 1.5;
pub const FEATURE_DIM: usize = 19;

fn frame_check(op: &'static str, f: &Tensor) -> Result<()> {
    let want = [3, FRAME_SIZE, FRAME_SIZE];
    if f.shape() != want {
        return Err(shape_err(op, &want, f.shape()));
    }
    Ok(())
}

/// Per-channel `[1 2 1]` binomial blur, renormalized at the border.
fn binomial3(frame: &Tensor) -> Vec<f64> {
    let n = FRAME_SIZE;
    let d = frame.data();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let (mut acc, mut w) = (0.0, 0.0);
                    for (k, wk) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
                        let (u, v) = if horizontal { (x as i64 + k, y as i64) } else { (x as i64, y as i64 + k) };
                        if u >= 0 && v >= 0 && u < n as i64 && v < n as i64 {
                            acc += wk * src[c * n * n + v as usize * n + u as usize];
                            w += wk;
                        }
                    }
                    out[c * n * n + y * n + x] = acc / w;
                }
            }
        }
        out
    };
    let raw: Vec<f64> = d.iter().map(|&v| v as f64).collect();
    pass(&pass(&raw, true), false)
}

/// Per-pixel head-color affinity in `[0, 1]`: the relative margin by which
/// the lightly blurred color is nearer the head color than the body and
/// background colors.
fn head_affinity(frame: &Tensor, id: &Identity) -> Vec<f64> {
    let hw = FRAME_SIZE * FRAME_SIZE;
    let d = binomial3(frame);
    let dist_to = |i: usize, rgb: &[f64; 3]| libm::sqrt((0..3).map(|c| (d[c * hw + i] - rgb[c]).powi(2)).sum::<f64>());
    (0..hw)
        .map(|i| {
            let h = dist_to(i, &id.head_color);
            let m = dist_to(i, &id.body_color).min(dist_to(i, &id.background_color));
            if m + h > 0.0 {
                ((m - h) / (m + h)).max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn center(i: usize) -> [f64; 2] {
    [(i % FRAME_SIZE) as f64 + 0.5, (i / FRAME_SIZE) as f64 + 0.5]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

/// Sum of `a` over the disc of radius `r` around every pixel center.
fn disc_response(a: &[f64], r: f64) -> Vec<f64> {
    let n = FRAME_SIZE as i64;
    let k = libm::ceil(r) as i64;
    let mut offs = Vec::new();
    for dy in -k..=k {
        for dx in -k..=k {
            if ((dx * dx + dy * dy) as f64) <= r * r {
                offs.push((dx, dy));
            }
        }
    }
    (0..a.len())
        .map(|i| {
            let (x, y) = ((i % FRAME_SIZE) as i64, (i / FRAME_SIZE) as i64);
            offs.iter()
                .filter_map(|&(dx, dy)| {
                    let (u, v) = (x + dx, y + dy);
                    (u >= 0 && v >= 0 && u < n && v < n).then(|| a[(v * n + u) as usize])
                })
                .sum()
        })
        .collect()
}

fn argmax(r: &[f64], allowed: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in r.iter().enumerate() {
        if allowed(i) && best.map_or(true, |b| v > b.1) {
            best = Some((i, v));
        }
    }
    best
}

/// Affinity-weighted centroid of the pixels within `r` of `p`.
fn centroid(a: &[f64], p: [f64; 2], r: f64) -> [f64; 2] {
    let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in a.iter().enumerate() {
        let q = center(i);
        if v > 0.0 && dist(q, p) <= r {
            w += v;
            sx += v * q[0];
            sy += v * q[1];
        }
    }
    if w > 0.0 {
        [sx / w, sy / w]
    } else {
        p
    }
}

fn confident(peak: f64, runner_up: f64) -> bool {
    peak > 0.0 && peak >= CONFIDENCE_RATIO * runner_up
}

/// Head and hand positions found by color-peak search, or `None` when a
/// peak fails the confidence ratio. Hands are returned unordered.
pub fn detect_landmarks(frame: &Tensor, id: &Identity) -> Option<[[f64; 2]; 3]> {
    let a = head_affinity(frame, id);
    let r = id.head_radius;
    let head_area = core::f64::consts::PI * r * r;
    let rh = disc_response(&a, r);
    let (hi, hv) = argmax(&rh, |_| true)?;
    let hp = center(hi);
    let away = argmax(&rh, |i| dist(center(i), hp) > r + 2.0).map_or(0.0, |b| b.1);
    if hv < 0.25 * head_area || !confident(hv, away) {
        return None;
    }
    let head = centroid(&a, hp, r + 0.5);

    let mut rest = a.clone();
    for (i, v) in rest.iter_mut().enumerate() {
        if dist(center(i), head) <= r + 1.0 {
            *v = 0.0;
        }
    }
    let rk = disc_response(&rest, HAND_RADIUS);
    let (i1, _) = argmax(&rk, |_| true)?;
    let p1 = center(i1);
    let (i2, v2) = argmax(&rk, |i| dist(center(i), p1) > 3.0)?;
    let p2 = center(i2);
    let third = argmax(&rk, |i| dist(center(i), p1) > 3.0 && dist(center(i), p2) > 3.0).map_or(0.0, |b| b.1);
    if !confident(v2, third) {
        return None;
    }
    Some([head, centroid(&rest, p1, 2.0), centroid(&rest, p2, 2.0)])
}

/// Mean landmark distance per frame, `None` for excluded frames. Detected
/// hands are matched to the true hands by the cheaper of the two pairings.
pub fn joint_errors(frames: &[Tensor], poses: &[Pose], id: &Identity) -> Result<Vec<Option<f64>>> {
    if frames.len() != poses.len() {
        return Err(invalid("joint_error", "frames and poses must align"));
    }
    frames
        .iter()
        .zip(poses)
        .map(|(f, p)| {
            frame_check("joint_error", f)?;
            let truth = p.joints().landmarks();
            Ok(detect_landmarks(f, id).map(|[h, a, b]| {
                let straight = dist(a, truth[1]) + dist(b, truth[2]);
                let crossed = dist(a, truth[2]) + dist(b, truth[1]);
                (dist(h, truth[0]) + straight.min(crossed)) / 3.0
            }))
        })
        .collect()
}

/// Mean landmark error in pixels over frames with confident detections.
pub fn joint_error(frames: &[Tensor], poses: &[Pose], id: &Identity) -> Result<f64> {
    let kept: Vec<f64> = joint_errors(frames, poses, id)?.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(invalid("joint_error", "every frame was excluded by the confidence test"));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Mean squared second temporal difference.
pub fn flicker(frames: &[Tensor]) -> Result<f64> {
    if frames.len() < 3 {
        return Err(invalid("flicker", "need at least three frames"));
    }
    for f in frames {
        if f.shape() != frames[0].shape() {
            return Err(shape_err("flicker", frames[0].shape(), f.shape()));
        }
    }
    let mut total = 0.0;
    for w in frames.windows(3) {
        let (a, b, c) = (w[0].data(), w[1].data(), w[2].data());
        let s: f64 = (0..a.len())
            .map(|i| {
                let d = c[i] as f64 - 2.0 * b[i] as f64 + a[i] as f64;
                d * d
            })
            .sum();
        total += s / a.len() as f64;
    }
    Ok(total / (frames.len() - 2) as f64)
}

/// Per-channel means, per-channel variances, per-channel quadrant means and
/// mean squared gradient.
pub fn frame_features(f: &Tensor) -> Result<[f64; FEATURE_DIM]> {
    if f.rank() != 3 || f.dim(0) != 3 || f.dim(1) < 2 || f.dim(1) % 2 != 0 || f.dim(2) != f.dim(1) {
        return Err(invalid("frame_features", "expected [3, S, S] with even S"));
    }
    let s = f.dim(1);
    let hw = s * s;
    let d = f.data();
    let mut out = [0.0; FEATURE_DIM];
    let mut edge = 0.0;
    for c in 0..3 {
        let px = &d[c * hw..(c + 1) * hw];
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        out[c] = mean;
        out[3 + c] = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let h = s / 2;
        for q in 0..4 {
            let (y0, x0) = ((q / 2) * h, (q % 2) * h);
            let mut acc = 0.0;
            for y in y0..y0 + h {
                for x in x0..x0 + h {
                    acc += px[y * s + x] as f64;
                }
            }
            out[6 + c * 4 + q] = acc / (h * h) as f64;
        }
        for y in 0..s {
            for x in 0..s {
                let v = px[y * s + x] as f64;
                if x + 1 < s {
                    edge += (px[y * s + x + 1] as f64 - v).powi(2);
                }
                if y + 1 < s {
                    edge += (px[(y + 1) * s + x] as f64 - v).powi(2);
                }
            }
        }
    }
    out[18] = edge / (3 * 2 * s * (s - 1)) as f64;
    Ok(out)
}

/// Row-major symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(shape_err("SymMatrix", &[n, n], &[data.len()]));
        }
        Ok(Self { n, data })
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }
    fn matmul(&self, o: &SymMatrix) -> SymMatrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                for j in 0..n {
                    data[i * n + j] += a * o.at(k, j);
                }
            }
        }
        SymMatrix { n, data }
    }
    fn symmetrized(mut self) -> SymMatrix {
        let n = self.n;
        for i in 0..n {
            for j in i + 1..n {
                let m = 0.5 * (self.at(i, j) + self.at(j, i));
                self.data[i * n + j] = m;
                self.data[j * n + i] = m;
            }
        }
        self
    }
}

/// Cyclic Jacobi eigendecomposition. Returns eigenvalues and the matrix
/// whose columns are the eigenvectors.
pub fn jacobi_eigen(m: &SymMatrix) -> (Vec<f64>, SymMatrix) {
    let n = m.n;
    let mut a = m.clone().symmetrized();
    let mut v = SymMatrix { n, data: (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect() };
    let scale = a.data.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a.at(i, j).powi(2)).sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.data[k * n + p] = c * akp - s * akq;
                    a.data[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.data[p * n + k] = c * apk - s * aqk;
                    a.data[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.data[k * n + p] = c * vkp - s * vkq;
                    v.data[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a.at(i, i)).collect(), v)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrt_psd(m: &SymMatrix) -> SymMatrix {
    let n = m.n;
    let (vals, v) = jacobi_eigen(m);
    let mut data = vec![0.0; n * n];
    for (k, &l) in vals.iter().enumerate() {
        let r = libm::sqrt(l.max(0.0));
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] += r * v.at(i, k) * v.at(j, k);
            }
        }
    }
    SymMatrix { n, data }.symmetrized()
}

/// Gaussian fit: mean and unbiased covariance.
pub fn gaussian_fit(xs: &[[f64; FEATURE_DIM]]) -> (Vec<f64>, SymMatrix) {
    let n = xs.len() as f64;
    let mut mu = vec![0.0; FEATURE_DIM];
    for x in xs {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; FEATURE_DIM * FEATURE_DIM];
    for x in xs {
        for i in 0..FEATURE_DIM {
            for j in 0..FEATURE_DIM {
                cov[i * FEATURE_DIM + j] += (x[i] - mu[i]) * (x[j] - mu[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n - 1.0);
    (mu, SymMatrix { n: FEATURE_DIM, data: cov })
}

/// Squared Fréchet distance between two Gaussians. The cross term uses the
/// symmetric form `Tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_distance(mu1: &[f64], s1: &SymMatrix, mu2: &[f64], s2: &SymMatrix) -> Result<f64> {
    if mu1.len() != s1.n || mu2.len() != s2.n || s1.n != s2.n {
        return Err(invalid("frechet_distance", "dimension mismatch"));
    }
    let dm: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let r1 = sqrt_psd(s1);
    let inner = r1.matmul(s2).matmul(&r1).symmetrized();
    let (vals, _) = jacobi_eigen(&inner);
    let cross: f64 = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    Ok((dm + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

fn regularized(mut s: SymMatrix) -> SymMatrix {
    for i in 0..s.n {
        s.data[i * s.n + i] += 1e-6;
    }
    s
}

/// Fréchet distance (squared) between Gaussian fits of frame features.
pub fn frechet_features(set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    if set_a.len() <= FEATURE_DIM || set_b.len() <= FEATURE_DIM {
        return Err(invalid("frechet_features", "each set needs more frames than feature dimensions"));
    }
    let fa = set_a.iter().map(frame_features).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(frame_features).collect::<Result<Vec<_>>>()?;
    let (ma, sa) = gaussian_fit(&fa);
    let (mb, sb) = gaussian_fit(&fb);
    frechet_distance(&ma, &regularized(sa), &mb, &regularized(sb))
}

/// Peak signal-to-noise ratio for `[0,1]` images, capped at 99 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("psnr", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Empty { op: "psnr" });
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
}

/// Scores for one generated sequence. `joint_error_px` is `None` when every
/// frame failed the confidence test.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SequenceEval {
    pub joint_error_px: Option<f64>,
    pub flicker: f64,
    pub psnr_db: f64,
    pub excluded_frames: usize,
}

/// Aggregate evaluation over all scored sequences. The joint error averages
/// the sequences that kept at least one frame.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub joint_error_px: Option<f64>,
    pub flicker: f64,
    pub frechet: f64,
    pub psnr_db: f64,
    pub sequences: Vec<SequenceEval>,
}

/// Scores one generated sequence against its ground-truth renders.
pub fn evaluate_sequence(generated: &[Tensor], truth: &[Tensor], poses: &[Pose], id: &Identity) -> Result<SequenceEval> {
    if generated.len() != truth.len() {
        return Err(invalid("evaluate_sequence", "generated and ground-truth lengths differ"));
    }
    let per = joint_errors(generated, poses, id)?;
    let kept: Vec<f64> = per.iter().flatten().copied().collect();
    let mut mse = 0.0;
    for (g, t) in generated.iter().zip(truth) {
        let p = psnr(g, t)?;
        mse += libm::pow(10.0, -p / 10.0);
    }
    Ok(SequenceEval {
        joint_error_px: (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64),
        flicker: flicker(generated)?,
        psnr_db: psnr_from_mse(mse / generated.len() as f64),
        excluded_frames: per.len() - kept.len(),
    })
}

impl EvalReport {
    pub fn new(sequences: Vec<SequenceEval>, frechet: f64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty { op: "EvalReport" });
        }
        let n = sequences.len() as f64;
        let mean = |f: fn(&SequenceEval) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        let joints: Vec<f64> = sequences.iter().filter_map(|s| s.joint_error_px).collect();
        Ok(Self {
            joint_error_px: (!joints.is_empty()).then(|| joints.iter().sum::<f64>() / joints.len() as f64),
            flicker: mean(|s| s.flicker),
            psnr_db: mean(|s| s.psnr_db),
            frechet,
            sequences,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::world::{render_frame, sample_identity, sample_pose_sequence};
    use nalgebra::{DMatrix, DVector, SymmetricEigen};
    use proptest::prelude::*;

    fn shifted(f: &Tensor, k: usize, fill: [f64; 3]) -> Tensor {
        let n = FRAME_SIZE;
        Tensor::from_fn(&[3, n, n], |i| {
            let (c, y, x) = (i / (n * n), (i / n) % n, i % n);
            if x >= k {
                f.data()[c * n * n + y * n + x - k]
            } else {
                fill[c] as f32
            }
        })
    }

    #[test]
    fn ground_truth_renders_are_located() {
        let mut rng = Rng::new(4, 0);
        for _ in 0..5 {
            let id = sample_identity(&mut rng);
            let poses = sample_pose_sequence(&mut rng, 20);
            let frames: Vec<Tensor> = poses.iter().map(|p| render_frame(&id, p)).collect();
            let per = joint_errors(&frames, &poses, &id).unwrap();
            assert!(per.iter().all(|e| e.is_some()), "no ground-truth frame may be excluded");
            let e = joint_error(&frames, &poses, &id).unwrap();
            assert!(e <= 1.0, "round-trip error {e}");
        }
    }

    #[test]
    fn translation_raises_error_by_the_shift() {
        let mut rng = Rng::new(5, 0);
        let mut checked = 0;
        while checked < 4 {
            let id = sample_identity(&mut rng);
            let poses: Vec<Pose> = sample_pose_sequence(&mut rng, 30)
                .into_iter()
                .filter(|p| p.joints().all().iter().map(|j| j[0]).fold(f64::MIN, f64::max) + id.head_radius.max(1.5) + 3.5 < FRAME_SIZE as f64)
                .collect();
            if poses.len() < 3 {
                continue;
            }
            let frames: Vec<Tensor> = poses.iter().map(|p| shifted(&render_frame(&id, p), 3, id.background_color)).collect();
            let e = joint_error(&frames, &poses, &id).unwrap();
            assert!((e - 3.0).abs() <= 0.5, "shifted error {e}");
            checked += 1;
        }
    }

    #[test]
    fn blank_frames_are_all_excluded() {
        let mut rng = Rng::new(6, 0);
        let id = sample_identity(&mut rng);
        let poses = sample_pose_sequence(&mut rng, 4);
        let bg = id.background_color;
        let blank: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[3, 32, 32], |i| bg[i / 1024] as f32)).collect();
        assert!(joint_error(&blank, &poses, &id).is_err());
        let flat: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[3, 32, 32], |i| id.head_color[i / 1024] as f32)).collect();
        assert!(joint_error(&flat, &poses, &id).is_err());
        assert!(joint_error(&blank[..2], &poses, &id).is_err());
    }

    #[test]
    fn flicker_examples() {
        let mut rng = Rng::new(7, 0);
        let a = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform() as f32);
        let b = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform() as f32);
        assert_eq!(flicker(&[a.clone(), a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let lerp: Vec<Tensor> = (0..5).map(|k| Tensor::from_fn(&[3, 8, 8], |i| 0.1 * k as f32 + 0.05 * (i % 7) as f32)).collect();
        assert!(flicker(&lerp).unwrap() < 1e-12);
        let m = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
        let alt = flicker(&[a.clone(), b.clone(), a.clone(), b.clone()]).unwrap();
        assert!((alt - 4.0 * m).abs() < 1e-9 * m.max(1.0));
        assert!(flicker(&[a.clone(), b]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr(&a, &Tensor::full(&[3, 4, 4], 0.6)).unwrap() - 20.0).abs() < 1e-4);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn one_dimensional_closed_form() {
        let one = SymMatrix::new(1, vec![1.0]).unwrap();
        let d = frechet_distance(&[0.0], &one, &[1.0], &one).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let four = SymMatrix::new(1, vec![4.0]).unwrap();
        // (σ₁ − σ₂)² for 1-D Gaussians.
        assert!((frechet_distance(&[0.0], &one, &[0.0], &four).unwrap() - 1.0).abs() < 1e-12);
    }

    fn random_set(rng: &mut Rng, n: usize, tilt: f32) -> Vec<Tensor> {
        (0..n).map(|_| Tensor::from_fn(&[3, 8, 8], |_| rng.uniform() as f32).map(|v| (v * (1.0 - tilt) + tilt * 0.5).clamp(0.0, 1.0))).collect()
    }

    fn oracle(a: &[Tensor], b: &[Tensor]) -> f64 {
        let fit = |s: &[Tensor]| {
            let rows: Vec<DVector<f64>> = s.iter().map(|f| DVector::from_row_slice(&frame_features(f).unwrap())).collect();
            let n = rows.len() as f64;
            let mu = rows.iter().fold(DVector::zeros(FEATURE_DIM), |acc, r| acc + r) / n;
            let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
            for r in &rows {
                let d = r - &mu;
                cov += &d * d.transpose();
            }
            (mu, cov / (n - 1.0) + DMatrix::identity(FEATURE_DIM, FEATURE_DIM) * 1e-6)
        };
        let (m1, s1) = fit(a);
        let (m2, s2) = fit(b);
        let sq = |m: &DMatrix<f64>| {
            let e = SymmetricEigen::new(m.clone());
            &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt())) * e.eigenvectors.transpose()
        };
        let r1 = sq(&s1);
        let inner = &r1 * &s2 * &r1;
        let inner = (&inner + inner.transpose()) * 0.5;
        let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross
    }

    #[test]
    fn frechet_matches_nalgebra_oracle() {
        let mut rng = Rng::new(8, 0);
        for tilt in [0.0, 0.3, 0.6] {
            let a = random_set(&mut rng, 40, 0.0);
            let b = random_set(&mut rng, 30, tilt);
            let got = frechet_features(&a, &b).unwrap();
            let want = oracle(&a, &b);
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1e-6), "{got} vs {want}");
        }
        let a = random_set(&mut rng, 25, 0.0);
        assert!(frechet_features(&a, &a).unwrap().abs() < 1e-6);
        assert!(frechet_features(&a[..19], &a).is_err());
    }

    #[test]
    fn jacobi_reconstructs() {
        let mut rng = Rng::new(9, 0);
        let n = 6;
        let b: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
            }
        }
        let m = SymMatrix::new(n, m).unwrap();
        let r = sqrt_psd(&m);
        let back = r.matmul(&r);
        for (x, y) in back.data.iter().zip(&m.data) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn frechet_is_symmetric(seed in 0u64..1000) {
            let mut rng = Rng::new(seed, 1);
            let a = random_set(&mut rng, 24, 0.0);
            let b = random_set(&mut rng, 26, 0.4);
            let ab = frechet_features(&a, &b).unwrap();
            let ba = frechet_features(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
        }

        #[test]
        fn metrics_ignore_batch_order(seed in 0u64..1000) {
            let mut rng = Rng::new(seed, 2);
            let id = sample_identity(&mut rng);
            let poses = sample_pose_sequence(&mut rng, 6);
            let frames: Vec<Tensor> = poses.iter().map(|p| render_frame(&id, p)).collect();
            let mut idx: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                idx.swap(i, rng.below(i + 1));
            }
            let pf: Vec<Tensor> = idx.iter().map(|&i| frames[i].clone()).collect();
            let pp: Vec<Pose> = idx.iter().map(|&i| poses[i]).collect();
            let a = joint_error(&frames, &poses, &id).unwrap();
            let b = joint_error(&pf, &pp, &id).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
            let s1 = random_set(&mut rng, 22, 0.0);
            let mut s2 = s1.clone();
            s2.reverse();
            let other = random_set(&mut rng, 22, 0.2);
            prop_assert!((frechet_features(&s1, &other).unwrap() - frechet_features(&s2, &other).unwrap()).abs() < 1e-6);
        }
    }
}
