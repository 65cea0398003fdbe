//! Video inference: all-frame attention over a window of frames and
//! batch-overlapped temporal denoising of arbitrary-length sequences.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{stream_key, Rng, Tensor};
use crate::scheduler::{clip_eps, GuidanceConfig, NoiseSchedule, Sampler};
use crate::sgdm::{self, denoise_batch, encode_appearance, from_latent, AppearanceTokens, AttentionMode, ConditionMap, Denoised, SgdmParams};
use crate::world::{render_condition, Pose};

pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_OVERLAP: usize = 4;

const INIT_TAG: u64 = 0x696e_6974;
const STEP_TAG: u64 = 0x7374_6570;

/// Overlapped windows `[wb, we)` over `n` frames and per-frame visit counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub windows: Vec<(usize, usize)>,
    pub counts: Vec<u32>,
    pub ws: usize,
    pub os: usize,
}

impl WindowPlan {
    pub fn frames(&self) -> usize {
        self.counts.len()
    }
    /// Total frame evaluations, `Σ_w (we − wb)`.
    pub fn work(&self) -> usize {
        self.windows.iter().map(|(b, e)| e - b).sum()
    }
}

/// Windows start at `i·(ws−os)`; a window running past `n` is clamped to
/// `(n−ws, n)` and a repeated start is emitted once.
pub fn plan_windows(n: usize, ws: usize, os: usize) -> Result<WindowPlan> {
    if ws == 0 || os >= ws || ws > n {
        return Err(invalid("plan_windows", "need 0 ≤ os < ws ≤ N"));
    }
    let stride = ws - os;
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    loop {
        let start = (i * stride).min(n - ws);
        if windows.last().map(|w| w.0) != Some(start) {
            windows.push((start, start + ws));
        }
        if start + ws == n {
            break;
        }
        i += 1;
    }
    let mut counts = vec![0u32; n];
    for &(b, e) in &windows {
        for c in &mut counts[b..e] {
            *c += 1;
        }
    }
    Ok(WindowPlan { windows, counts, ws, os })
}

/// Frame latents `[N, C, H, W]` at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub frames: Tensor,
    pub t: usize,
}

impl LatentSeq {
    pub fn new(frames: Tensor, t: usize) -> Result<Self> {
        if frames.rank() != 4 || frames.dim(0) == 0 {
            return Err(invalid("LatentSeq", "expected [N, C, H, W] with N ≥ 1"));
        }
        frames.ensure_finite("LatentSeq")?;
        Ok(Self { frames, t })
    }
    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The frame model with every self-attention block widened to attend over
/// all frames of the window.
pub fn batched_denoise(z: &Tensor, t: usize, tokens: &AppearanceTokens, conds: &[ConditionMap], w_c: f32, params: &SgdmParams) -> Result<Denoised> {
    if z.rank() != 4 || conds.len() != z.dim(0) {
        return Err(invalid("batched_denoise", "one condition map per frame required"));
    }
    denoise_batch(z, t, tokens, Some(conds), w_c, AttentionMode::AllFrame, params)
}

/// Per-frame noise stream for the reverse step leaving `t`.
pub fn step_rng(seed: u64, frame: u64, t: usize) -> Rng {
    Rng::new(seed, stream_key(&[STEP_TAG, frame, t as u64]))
}

/// Initial latent of one frame, drawn from `(seed, frame, T)`.
pub fn initial_latent(seed: u64, frame: u64, sched: &NoiseSchedule, shape: &[usize]) -> Tensor {
    Rng::new(seed, stream_key(&[INIT_TAG, frame, sched.steps() as u64])).normal_tensor(shape)
}

/// Reverse step with a frame range.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub t: usize,
    pub t_prev: usize,
    pub sampler: Sampler,
    pub sched: &'a NoiseSchedule,
    pub seed: u64,
    /// Global index of frame 0, for keyed noise.
    pub first_frame: u64,
    /// Clamp clean estimates to the latent range before stepping.
    pub clip_denoised: bool,
}

/// One overlapped step with a pluggable window denoiser. Windows are evaluated
/// in `order` (a permutation of window indices), their predictions summed
/// into the noise buffer in plan order, divided by the visit counts, and
/// every frame is advanced with its own keyed noise.
pub fn overlapped_step_with<F>(z: &LatentSeq, plan: &WindowPlan, order: &[usize], ctx: &StepContext, mut denoise: F) -> Result<LatentSeq>
where
    F: FnMut(&Tensor, usize, usize) -> Result<Tensor>,
{
    let n = z.len();
    if plan.frames() != n {
        return Err(invalid("overlapped_denoise_step", "plan built for a different length"));
    }
    let mut seen = vec![false; plan.windows.len()];
    if order.len() != seen.len() || !order.iter().all(|&w| w < seen.len() && !core::mem::replace(&mut seen[w], true)) {
        return Err(invalid("overlapped_denoise_step", "order must permute the windows"));
    }
    let per = z.frames.len() / n;
    let mut outputs: Vec<Option<Tensor>> = vec![None; plan.windows.len()];
    for &w in order {
        let (wb, we) = plan.windows[w];
        let window = z.frames.slice0(wb, we)?;
        let eps = denoise(&window, wb, we)?;
        if eps.shape() != window.shape() {
            return Err(shape_err("window noise", window.shape(), eps.shape()));
        }
        outputs[w] = Some(eps);
    }
    let mut noise = vec![0.0f32; z.frames.len()];
    let mut count = vec![0u32; n];
    for (&(wb, we), eps) in plan.windows.iter().zip(&outputs) {
        let eps = eps.as_ref().expect("every window evaluated");
        for (acc, &v) in noise[wb * per..we * per].iter_mut().zip(eps.data()) {
            *acc += v;
        }
        for c in &mut count[wb..we] {
            *c += 1;
        }
    }
    for (f, &c) in count.iter().enumerate() {
        for v in &mut noise[f * per..(f + 1) * per] {
            *v /= c as f32;
        }
    }
    let frame_shape = &z.frames.shape()[1..];
    let mut next = Vec::with_capacity(z.frames.len());
    for f in 0..n {
        let x = Tensor::new(frame_shape, z.frames.data()[f * per..(f + 1) * per].to_vec())?;
        let mut e = Tensor::new(frame_shape, noise[f * per..(f + 1) * per].to_vec())?;
        if ctx.clip_denoised {
            e = clip_eps(&x, &e, ctx.t, ctx.sched, -1.0, 1.0)?;
        }
        let mut rng = step_rng(ctx.seed, ctx.first_frame + f as u64, ctx.t);
        let y = ctx.sampler.step(&x, &e, ctx.t, ctx.t_prev, ctx.sched, &mut rng)?;
        next.extend_from_slice(y.data());
    }
    LatentSeq::new(Tensor::new(z.frames.shape(), next)?, ctx.t_prev)
}

/// Everything a guided window evaluation needs.
#[derive(Clone, Copy)]
pub struct WindowModel<'a> {
    pub params: &'a SgdmParams,
    pub tokens: &'a AppearanceTokens,
    pub conds: &'a [ConditionMap],
    pub guidance: GuidanceConfig,
    pub w_c: f32,
}

impl WindowModel<'_> {
    /// Guided all-frame prediction for frames `[wb, we)`.
    pub fn window_eps(&self, z: &Tensor, t: usize, wb: usize, we: usize) -> Result<Denoised> {
        sgdm::denoise_guided(z, t, self.tokens, &self.conds[wb..we], self.w_c, self.guidance, AttentionMode::AllFrame, self.params)
    }
}

/// One timestep of batch-overlapped temporal denoising with classifier-free
/// guidance applied inside each window. Windows run in plan order.
pub fn overlapped_denoise_step(z: &LatentSeq, plan: &WindowPlan, model: &WindowModel, ctx: &StepContext) -> Result<LatentSeq> {
    if model.conds.len() != z.len() {
        return Err(invalid("overlapped_denoise_step", "one condition map per frame required"));
    }
    let order: Vec<usize> = (0..plan.windows.len()).collect();
    overlapped_step_with(z, plan, &order, ctx, |w, wb, we| Ok(model.window_eps(w, ctx.t, wb, we)?.eps))
}

/// Settings for sequence synthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub ws: usize,
    pub os: usize,
    pub sampler: Sampler,
    pub guidance: GuidanceConfig,
    pub w_c: f32,
    pub seed: u64,
    /// Global index of the first frame; keys the per-frame noise so a
    /// sequence can be generated in independent chunks.
    pub first_frame: u64,
    /// Clamp clean estimates to the latent range at every step.
    pub clip_denoised: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            ws: DEFAULT_WINDOW,
            os: DEFAULT_OVERLAP,
            sampler: Sampler::default(),
            guidance: GuidanceConfig::default(),
            w_c: sgdm::DEFAULT_CONTROL_WEIGHT,
            seed: 0,
            first_frame: 0,
            clip_denoised: true,
        }
    }
}

impl SynthesisConfig {
    /// Window plan for `n` frames; sequences shorter than the window use a
    /// single window over all frames.
    pub fn plan(&self, n: usize) -> Result<WindowPlan> {
        if self.os >= self.ws {
            return Err(invalid("SynthesisConfig", "overlap must be smaller than the window"));
        }
        if n < self.ws {
            return plan_windows(n, n, 0);
        }
        plan_windows(n, self.ws, self.os)
    }
}

/// Renders condition maps from `poses`, draws per-frame initial latents and
/// runs the reverse process with overlapped windows. Returns frames
/// `[N, C, H, W]` in `[0,1]`.
pub fn generate_sequence(poses: &[Pose], ref_frame: &Tensor, params: &SgdmParams, sched: &NoiseSchedule, cfg: &SynthesisConfig) -> Result<Tensor> {
    let conds: Vec<ConditionMap> = poses.iter().map(render_condition).collect();
    generate_from_conditions(&conds, ref_frame, params, sched, cfg)
}

pub fn generate_from_conditions(conds: &[ConditionMap], ref_frame: &Tensor, params: &SgdmParams, sched: &NoiseSchedule, cfg: &SynthesisConfig) -> Result<Tensor> {
    let n = conds.len();
    if n == 0 {
        return Err(crate::Error::Empty { op: "generate_sequence" });
    }
    let plan = cfg.plan(n)?;
    let tokens = encode_appearance(ref_frame, params)?;
    let c = &params.config;
    let shape = [c.channels, c.image_size, c.image_size];
    let init: Vec<Tensor> = (0..n).map(|f| initial_latent(cfg.seed, cfg.first_frame + f as u64, sched, &shape)).collect();
    let mut z = LatentSeq::new(Tensor::stack(&init)?, sched.steps())?;
    let model = WindowModel {
        params,
        tokens: &tokens,
        conds,
        guidance: cfg.guidance,
        w_c: cfg.w_c,
    };
    for (t, t_prev) in cfg.sampler.timesteps(sched)? {
        let ctx = StepContext {
            t,
            t_prev,
            sampler: cfg.sampler,
            sched,
            seed: cfg.seed,
            first_frame: cfg.first_frame,
            clip_denoised: cfg.clip_denoised,
        };
        z = overlapped_denoise_step(&z, &plan, &model, &ctx)?;
    }
    Ok(from_latent(&z.frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::scheduler::{cfg_combine, ddim_step};
    use crate::sgdm::{denoise_frame, init_params, null_tokens, SgdmConfig};
    use crate::world::{sample_identity, sample_pose_sequence, render_frame};
    use proptest::prelude::*;

    #[test]
    fn plan_examples() {
        let p = plan_windows(300, 16, 4).unwrap();
        assert_eq!(p.windows.len(), 25);
        assert_eq!(p.counts.iter().sum::<u32>(), 400);
        assert_eq!(*p.windows.last().unwrap(), (284, 300));
        let p = plan_windows(16, 16, 4).unwrap();
        assert_eq!(p.windows, vec![(0, 16)]);
        assert!(p.counts.iter().all(|&c| c == 1));
        let p = plan_windows(20, 16, 4).unwrap();
        assert_eq!(p.windows, vec![(0, 16), (4, 20)]);
        for (i, &c) in p.counts.iter().enumerate() {
            assert_eq!(c, if (4..16).contains(&i) { 2 } else { 1 }, "frame {i}");
        }
        assert_eq!(p.work(), 32);
        assert!(plan_windows(10, 16, 4).is_err());
        assert!(plan_windows(20, 4, 4).is_err());
        assert!(plan_windows(20, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn plan_invariants(n in 1usize..400, ws in 1usize..40, os in 0usize..40) {
            prop_assume!(os < ws && ws <= n);
            let p = plan_windows(n, ws, os).unwrap();
            prop_assert!(p.counts.iter().all(|&c| c >= 1));
            prop_assert_eq!(p.work() as u32, p.counts.iter().sum::<u32>());
            prop_assert!(p.windows.iter().all(|&(b, e)| e - b == ws && e <= n));
            let w = &p.windows;
            for i in 1..w.len() {
                prop_assert!(w[i].0 > w[i - 1].0);
                if i + 1 < w.len() {
                    prop_assert_eq!(w[i - 1].1 - w[i].0, os);
                } else {
                    prop_assert!(w[i - 1].1 - w[i].0 >= os);
                }
            }
        }

        #[test]
        fn window_order_never_changes_the_result(seed in 0u64..50, n in 5usize..30) {
            let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
            let mut rng = Rng::new(seed, 3);
            let z = LatentSeq::new(rng.normal_tensor(&[n, 2, 2, 2]), 30).unwrap();
            let plan = plan_windows(n, 4.min(n), 1.min(4.min(n) - 1)).unwrap();
            let ctx = StepContext { t: 30, t_prev: 29, sampler: Sampler::Ddpm, sched: &sched, seed, first_frame: 0, clip_denoised: false };
            let stub = |w: &Tensor, wb: usize, _we: usize| Ok(w.map(|v| v * 0.5 + wb as f32 * 0.01));
            let fwd: Vec<usize> = (0..plan.windows.len()).collect();
            let mut perm = fwd.clone();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let a = overlapped_step_with(&z, &plan, &fwd, &ctx, stub).unwrap();
            let b = overlapped_step_with(&z, &plan, &perm, &ctx, stub).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn normalization_averages_window_predictions() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let n = 23;
        let z = LatentSeq::new(Tensor::zeros(&[n, 1, 2, 2]), 10).unwrap();
        let plan = plan_windows(n, 8, 3).unwrap();
        // Window w predicts the constant w + 1; with DDIM from t to t−1 the
        // step is affine, so the applied noise can be read back per frame.
        let ctx = StepContext { t: 10, t_prev: 9, sampler: Sampler::Ddim { steps: 50 }, sched: &sched, seed: 0, first_frame: 0, clip_denoised: false };
        let order: Vec<usize> = (0..plan.windows.len()).collect();
        let out = overlapped_step_with(&z, &plan, &order, &ctx, |w, wb, _| {
            let idx = plan.windows.iter().position(|x| x.0 == wb).unwrap();
            Ok(Tensor::full(w.shape(), idx as f32 + 1.0))
        })
        .unwrap();
        let unit = ddim_step(&Tensor::<f32>::zeros(&[1]), &Tensor::full(&[1], 1.0), 10, 9, &sched).unwrap().data()[0];
        for f in 0..n {
            let ids: Vec<f64> = plan.windows.iter().enumerate().filter(|(_, w)| (w.0..w.1).contains(&f)).map(|(i, _)| i as f64 + 1.0).collect();
            let mean = ids.iter().sum::<f64>() / ids.len() as f64;
            let got = out.frames.data()[f * 4] as f64 / unit as f64;
            assert!((got - mean).abs() < 1e-5, "frame {f}: {got} vs {mean}");
        }
        // Constant predictions survive normalization unchanged.
        let c = overlapped_step_with(&z, &plan, &order, &ctx, |w, _, _| Ok(Tensor::full(w.shape(), 0.75))).unwrap();
        let want = ddim_step(&z.frames, &Tensor::full(z.frames.shape(), 0.75), 10, 9, &sched).unwrap();
        assert_eq!(c.frames, want);
        let short = plan_windows(10, 8, 3).unwrap();
        assert!(overlapped_step_with(&z, &short, &[0, 1], &ctx, |w, _, _| Ok(w.clone())).is_err());
        assert!(overlapped_step_with(&z, &plan, &[0, 0, 1, 2], &ctx, |w, _, _| Ok(w.clone())).is_err());
    }

    fn toy(seed: u64) -> (SgdmParams, Tensor, Vec<Pose>) {
        let mut rng = Rng::new(seed, 0);
        let p = init_params(&mut rng, &SgdmConfig::body()).unwrap();
        let id = sample_identity(&mut rng);
        let poses = sample_pose_sequence(&mut rng, 8);
        let r = render_frame(&id, &poses[0]);
        (p, r, poses)
    }

    #[test]
    fn disjoint_windows_match_independent_chunks() {
        let (p, r, poses) = toy(1);
        let sched = NoiseSchedule::default_training();
        let cfg = SynthesisConfig { ws: 4, os: 0, sampler: Sampler::Ddim { steps: 3 }, seed: 9, ..Default::default() };
        let whole = generate_sequence(&poses, &r, &p, &sched, &cfg).unwrap();
        for (wb, we) in [(0, 4), (4, 8)] {
            let part = generate_sequence(&poses[wb..we], &r, &p, &sched, &SynthesisConfig { first_frame: wb as u64, ..cfg }).unwrap();
            assert_eq!(part, whole.slice0(wb, we).unwrap());
        }
    }

    #[test]
    fn single_frame_sequence_matches_frame_model() {
        let (p, r, poses) = toy(2);
        let sched = NoiseSchedule::default_training();
        let cfg = SynthesisConfig { sampler: Sampler::Ddim { steps: 4 }, seed: 3, ..Default::default() };
        let got = generate_sequence(&poses[..1], &r, &p, &sched, &cfg).unwrap();
        let tok = encode_appearance(&r, &p).unwrap();
        let null = null_tokens(&p);
        let cond = render_condition(&poses[0]);
        let blank = ConditionMap::blank(1, 32);
        let mut z = initial_latent(3, 0, &sched, &[3, 32, 32]);
        for (t, tp) in cfg.sampler.timesteps(&sched).unwrap() {
            let c = denoise_frame(&z, t, &tok, Some(&cond), 2.0, &p).unwrap();
            let u = denoise_frame(&z, t, &null, Some(&blank), 2.0, &p).unwrap();
            let e = cfg_combine(&u, &c, 7.5).unwrap();
            let e = clip_eps(&z, &e, t, &sched, -1.0, 1.0).unwrap();
            z = ddim_step(&z, &e, t, tp, &sched).unwrap();
        }
        assert!(got.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(got.reshape(&[3, 32, 32]).unwrap(), from_latent(&z));
    }

    #[test]
    fn sequence_shorter_than_window_uses_one_window() {
        let cfg = SynthesisConfig::default();
        let p = cfg.plan(5).unwrap();
        assert_eq!(p.windows, vec![(0, 5)]);
        assert!(SynthesisConfig { os: 16, ..cfg }.plan(40).is_err());
        let (pp, r, _) = toy(3);
        let sched = NoiseSchedule::default_training();
        assert!(generate_sequence(&[], &r, &pp, &sched, &cfg).is_err());
    }
}
