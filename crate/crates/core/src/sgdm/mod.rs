//! Structure-guided denoiser: a small U-shaped ε-predictor with
//! appearance-token cross-attention, a zero-coupled control branch that reads
//! condition maps, and the face-inpainting variant.
//!
//! Diffusion runs in pixel space. Images in `[0, 1]` map to latents in
//! `[−1, 1]` through [`to_latent`] / [`from_latent`].

mod config;
mod net;
mod params;

use alloc::vec::Vec;

pub use config::SgdmConfig;
pub use net::{batch_loss, precondition_gains, timestep_embedding, SIGMA_DATA, AttentionMode, NetInput, ParamVars, TrainBatch};
pub use params::{init_params, ParamStore, SgdmParams, COUPLING_PREFIXES};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Tape, Tensor};
use crate::scheduler::{cfg_combine, GuidanceConfig};
use net::Net;

/// Default weight of the control term in `F_up + W_c·ControlN(p)`.
pub const DEFAULT_CONTROL_WEIGHT: f32 = 2.0;

/// `[0,1]` image → `[−1,1]` latent.
pub fn to_latent(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Latent → image, clamped to `[0,1]`.
pub fn from_latent(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Flattened feature grid of a reference image, `[L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceTokens {
    tokens: Tensor,
}

impl AppearanceTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.is_empty() {
            return Err(invalid("AppearanceTokens", "expected a non-empty [L, d] tensor"));
        }
        tokens.ensure_finite("AppearanceTokens")?;
        Ok(Self { tokens })
    }
    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }
    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn width(&self) -> usize {
        self.tokens.dim(1)
    }

    fn repeated(&self, b: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.tokens.len() * b);
        for _ in 0..b {
            data.extend_from_slice(self.tokens.data());
        }
        Tensor::new(&[b, self.len(), self.width()], data).expect("sizes agree")
    }
}

/// Rendered structure image `[C_p, H, W]` with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap {
    image: Tensor,
}

impl ConditionMap {
    pub fn new(image: Tensor) -> Result<Self> {
        if image.rank() != 3 {
            return Err(invalid("ConditionMap", "expected [C, H, W]"));
        }
        if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("ConditionMap", "values must lie in [0, 1]"));
        }
        Ok(Self { image })
    }
    /// All-zero map, the null structure condition.
    pub fn blank(channels: usize, size: usize) -> Self {
        Self {
            image: Tensor::zeros(&[channels, size, size]),
        }
    }
    pub fn tensor(&self) -> &Tensor {
        &self.image
    }
    pub fn into_tensor(self) -> Tensor {
        self.image
    }
}

/// Input of the face inpainting model: the noisy latent, the binary mask of
/// the region to regenerate and the clean latent outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceInpaintInput {
    pub latent: Tensor,
    pub mask: Tensor,
    pub masked_latent: Tensor,
}

impl FaceInpaintInput {
    /// `masked_latent = clean ⊙ (1 − mask)`.
    pub fn new(latent: Tensor, mask: Tensor, clean: &Tensor) -> Result<Self> {
        let s = latent.shape();
        if s.len() != 3 || clean.shape() != s || mask.shape() != [1, s[1], s[2]] {
            return Err(shape_err("FaceInpaintInput", s, mask.shape()));
        }
        if !mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(invalid("FaceInpaintInput", "mask entries must be 0 or 1"));
        }
        let hw = s[1] * s[2];
        let masked_latent = Tensor::from_fn(s, |i| if mask.data()[i % hw] == 1.0 { 0.0 } else { clean.data()[i] });
        Ok(Self {
            latent,
            mask,
            masked_latent,
        })
    }

    /// Channels `[latent, mask, masked_latent]`.
    pub fn stacked(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.latent.len() * 2 + self.mask.len());
        data.extend_from_slice(self.latent.data());
        data.extend_from_slice(self.mask.data());
        data.extend_from_slice(self.masked_latent.data());
        let s = self.latent.shape();
        Tensor::new(&[2 * s[0] + 1, s[1], s[2]], data).expect("sizes agree")
    }
}

/// ε prediction and attention work for one batched evaluation.
#[derive(Clone, Debug)]
pub struct Denoised {
    pub eps: Tensor,
    /// Multiply-accumulates spent inside attention.
    pub attention_macs: u64,
}

fn stack_conds(conds: &[ConditionMap], cfg: &SgdmConfig) -> Result<Tensor> {
    let want = [cfg.cond_channels, cfg.image_size, cfg.image_size];
    for c in conds {
        if c.tensor().shape() != want {
            return Err(shape_err("condition map", &want, c.tensor().shape()));
        }
    }
    let parts: Vec<Tensor> = conds.iter().map(|c| c.tensor().clone()).collect();
    Tensor::stack(&parts)
}

/// Runs the network on a prepared input `[B, C + extra, S, S]`.
fn run(params: &SgdmParams, input: Tensor, t: usize, c: &AppearanceTokens, conds: Option<&[ConditionMap]>, w_c: f32, mode: AttentionMode) -> Result<Denoised> {
    let cfg = &params.config;
    let b = input.dim(0);
    if c.len() != cfg.tokens() || c.width() != cfg.width {
        return Err(shape_err("appearance tokens", &[cfg.tokens(), cfg.width], c.tensor().shape()));
    }
    if conds.is_some_and(|cs| cs.len() != b) {
        return Err(invalid("denoise", "one condition map per frame required"));
    }
    let ts: Vec<usize> = alloc::vec![t; b];
    let mut tape = Tape::inference();
    let pv = ParamVars::bind(&mut tape, &params.store);
    let z = tape.input(input);
    let tokens = tape.input(c.repeated(b));
    let cond = match conds {
        Some(cs) => Some(tape.input(stack_conds(cs, cfg)?)),
        None => None,
    };
    let mut net = Net {
        tape: &mut tape,
        pv: &pv,
        cfg,
        mode,
    };
    let out = net.forward(&NetInput {
        z,
        t: &ts,
        tokens,
        cond,
        w_c: w_c as f64,
        mode,
    })?;
    let macs = tape.attention_macs();
    let eps = tape.value(out).clone();
    eps.ensure_finite("denoise")?;
    Ok(Denoised { eps, attention_macs: macs })
}

/// Appearance tokens of one reference image `[C, S, S]` in `[0,1]`.
pub fn encode_appearance(ref_frame: &Tensor, params: &SgdmParams) -> Result<AppearanceTokens> {
    let cfg = &params.config;
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if ref_frame.shape() != want {
        return Err(shape_err("encode_appearance", &want, ref_frame.shape()));
    }
    let mut tape = Tape::inference();
    let pv = ParamVars::bind(&mut tape, &params.store);
    let x = tape.input(to_latent(ref_frame).unsqueeze0());
    let mut net = Net {
        tape: &mut tape,
        pv: &pv,
        cfg,
        mode: AttentionMode::PerFrame,
    };
    let tok = net.appearance(x)?;
    let t = tape.value(tok).clone().reshape(&[cfg.tokens(), cfg.width])?;
    AppearanceTokens::new(t)
}

/// The learned null appearance condition.
pub fn null_tokens(params: &SgdmParams) -> AppearanceTokens {
    AppearanceTokens {
        tokens: params.get("null_tokens").clone(),
    }
}

/// Coupled control features for one frame, one per decoder level, innermost
/// first, before scaling by `W_c`. The trunk reads the noisy latent as well
/// as the condition map.
pub fn control_features(p: &ConditionMap, z_t: &Tensor, t: usize, c: &AppearanceTokens, params: &SgdmParams) -> Result<Vec<Tensor>> {
    let cfg = &params.config;
    let want = [cfg.input_channels(), cfg.image_size, cfg.image_size];
    if z_t.shape() != want {
        return Err(shape_err("control_features", &want, z_t.shape()));
    }
    let want_p = [cfg.cond_channels, cfg.image_size, cfg.image_size];
    if p.tensor().shape() != want_p {
        return Err(shape_err("control_features", &want_p, p.tensor().shape()));
    }
    let mut tape = Tape::inference();
    let pv = ParamVars::bind(&mut tape, &params.store);
    let z = tape.input(z_t.clone().unsqueeze0());
    let tokens = tape.input(c.repeated(1));
    let cond = tape.input(p.tensor().clone().unsqueeze0());
    let mut net = Net {
        tape: &mut tape,
        pv: &pv,
        cfg,
        mode: AttentionMode::PerFrame,
    };
    let feats = net.control(z, &[t], tokens, cond)?;
    feats
        .iter()
        .map(|&v| {
            let s = tape.shape(v)[1..].to_vec();
            tape.value(v).clone().reshape(&s)
        })
        .collect()
}

/// Batched ε prediction for latents `[B, C, S, S]` sharing one timestep and
/// one appearance condition. `conds = None` detaches the control branch.
pub fn denoise_batch(
    z: &Tensor,
    t: usize,
    c: &AppearanceTokens,
    conds: Option<&[ConditionMap]>,
    w_c: f32,
    mode: AttentionMode,
    params: &SgdmParams,
) -> Result<Denoised> {
    let cfg = &params.config;
    if cfg.extra_channels != 0 {
        return Err(invalid("denoise_batch", "face parameters need denoise_face"));
    }
    if z.rank() != 4 || z.dim(0) == 0 {
        return Err(invalid("denoise_batch", "expected [B, C, S, S] with B ≥ 1"));
    }
    run(params, z.clone(), t, c, conds, w_c, mode)
}

/// ε prediction for one latent `[C, S, S]`.
pub fn denoise_frame(z_t: &Tensor, t: usize, c: &AppearanceTokens, p: Option<&ConditionMap>, w_c: f32, params: &SgdmParams) -> Result<Tensor> {
    let conds = p.map(|p| core::slice::from_ref(p));
    let out = denoise_batch(&z_t.clone().unsqueeze0(), t, c, conds, w_c, AttentionMode::PerFrame, params)?;
    let s = z_t.shape().to_vec();
    out.eps.reshape(&s)
}

/// ε prediction of the face inpainting model for one crop.
pub fn denoise_face(f: &FaceInpaintInput, t: usize, c_f: &AppearanceTokens, p_f: Option<&ConditionMap>, w_c: f32, params_face: &SgdmParams) -> Result<Tensor> {
    let cfg = &params_face.config;
    let input = f.stacked();
    if cfg.extra_channels != cfg.channels + 1 || input.dim(0) != 2 * cfg.channels + 1 {
        return Err(shape_err("denoise_face", &[2 * cfg.channels + 1], &[input.dim(0)]));
    }
    let conds = p_f.map(|p| core::slice::from_ref(p));
    let out = run(params_face, input.unsqueeze0(), t, c_f, conds, w_c, AttentionMode::PerFrame)?;
    let s = f.latent.shape().to_vec();
    out.eps.reshape(&s)
}

/// Classifier-free guided prediction: a conditional pass with `c` and
/// `conds`, a null pass with the null tokens and blank maps, then
/// `ε_u + s·(ε_c − ε_u)`. Face parameters take the stacked inpainting input.
pub fn denoise_guided(
    input: &Tensor,
    t: usize,
    c: &AppearanceTokens,
    conds: &[ConditionMap],
    w_c: f32,
    guidance: GuidanceConfig,
    mode: AttentionMode,
    params: &SgdmParams,
) -> Result<Denoised> {
    let cond = run(params, input.clone(), t, c, Some(conds), w_c, mode)?;
    if guidance.is_unguided() {
        return Ok(cond);
    }
    let cfg = &params.config;
    let blank: Vec<ConditionMap> = conds.iter().map(|_| ConditionMap::blank(cfg.cond_channels, cfg.image_size)).collect();
    let uncond = run(params, input.clone(), t, &null_tokens(params), Some(&blank), w_c, mode)?;
    Ok(Denoised {
        eps: cfg_combine(&uncond.eps, &cond.eps, guidance.scale)?,
        attention_macs: cond.attention_macs + uncond.attention_macs,
    })
}

/// Finite-difference check of the full ε-loss in 64-bit on the smallest
/// configuration, with random couplings so the control branch contributes.
pub fn network_grad_check(seed: u64, per_tensor: usize) -> Result<crate::numerics::GradCheckReport> {
    use crate::numerics::{grad_check, GradCheck, Rng};
    use crate::scheduler::{q_sample, NoiseSchedule};
    let cfg = SgdmConfig::tiny();
    let mut rng = Rng::new(seed, 0);
    let mut p = init_params(&mut rng, &cfg)?;
    for name in COUPLING_PREFIXES {
        for suffix in [".w", ".b"] {
            let t = p.store.get_mut(&alloc::format!("{name}{suffix}")).expect("coupling present");
            *t = rng.normal_tensor::<f32>(t.shape()).map(|v| 0.1 * v);
        }
    }
    let p64 = p.store.cast::<f64>();
    let (b, s, c) = (2, cfg.image_size, cfg.channels);
    let sched = NoiseSchedule::default_training();
    let t: Vec<usize> = (0..b).map(|i| 1 + (i * 397) % 1000).collect();
    let x0: Tensor<f64> = rng.normal_tensor(&[b, c, s, s]);
    let eps: Tensor<f64> = rng.normal_tensor(&[b, c, s, s]);
    let parts = (0..b).map(|i| q_sample(&x0.slice0(i, i + 1)?, t[i], &eps.slice0(i, i + 1)?, &sched)).collect::<Result<Vec<_>>>()?;
    let batch = TrainBatch {
        x_t: Tensor::stack0(&parts)?,
        t,
        eps,
        refs: rng.normal_tensor(&[b, c, s, s]),
        conds: Tensor::from_fn(&[b, cfg.cond_channels, s, s], |_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }),
        drop: (0..b).map(|i| i == 0).collect(),
        w_c: DEFAULT_CONTROL_WEIGHT as f64,
    };
    grad_check(p64.tensors(), &GradCheck::new(1e-5).sampled(per_tensor), |tape, vars| {
        let pv = ParamVars::from_vars(&p64, vars)?;
        batch_loss(tape, &pv, &cfg, &batch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Gradients, Rng};
    use crate::scheduler::{eps_loss, q_sample, NoiseSchedule};

    fn randomize_couplings(p: &mut SgdmParams, rng: &mut Rng) {
        for name in COUPLING_PREFIXES {
            for suffix in [".w", ".b"] {
                let t = p.store.get_mut(&alloc::format!("{name}{suffix}")).unwrap();
                *t = rng.normal_tensor::<f32>(t.shape()).map(|v| 0.1 * v);
            }
        }
    }

    fn cond_map(rng: &mut Rng, cfg: &SgdmConfig) -> ConditionMap {
        let t = Tensor::from_fn(&[cfg.cond_channels, cfg.image_size, cfg.image_size], |_| if rng.uniform() < 0.2 { 1.0 } else { 0.0 });
        ConditionMap::new(t).unwrap()
    }

    fn setup(cfg: SgdmConfig, seed: u64) -> (SgdmParams, Rng, AppearanceTokens) {
        let mut rng = Rng::new(seed, 0);
        let p = init_params(&mut rng, &cfg).unwrap();
        let r = rng.normal_tensor::<f32>(&[cfg.channels, cfg.image_size, cfg.image_size]).map(|v| v.abs().min(1.0));
        let tok = encode_appearance(&r, &p).unwrap();
        (p, rng, tok)
    }

    #[test]
    fn preconditioned_target_has_unit_variance() {
        let sched = NoiseSchedule::default_training();
        let mut rng = Rng::new(9, 0);
        for t in [1, 50, 400, 900, 1000] {
            let (s, n) = (sched.signal(t), sched.noise(t));
            let (c_skip, c_out) = precondition_gains(&sched, t);
            let m = 200_000;
            let var = (0..m)
                .map(|_| {
                    let (x0, e) = (SIGMA_DATA * rng.normal(), rng.normal());
                    let target = (e - c_skip * (s * x0 + n * e)) / c_out;
                    target * target
                })
                .sum::<f64>()
                / m as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t} var={var}");
        }
    }

    #[test]
    fn zero_coupling_makes_control_a_no_op_at_init() {
        let cfg = SgdmConfig::body();
        let (p, mut rng, tok) = setup(cfg, 1);
        for i in 0..4 {
            let z = rng.normal_tensor(&[3, 32, 32]);
            let c = cond_map(&mut rng, &cfg);
            let t = 1 + rng.below(1000);
            let base = denoise_frame(&z, t, &tok, None, 2.0, &p).unwrap();
            for w_c in [0.0, 2.0, -7.0] {
                let with = denoise_frame(&z, t, &tok, Some(&c), w_c, &p).unwrap();
                assert_eq!(with, base, "sample {i} w_c {w_c}");
            }
            let feats = control_features(&c, &z, t, &tok, &p).unwrap();
            for (f, (ch, side)) in feats.iter().zip(cfg.decoder_levels()) {
                assert_eq!(f.shape(), [ch, side, side]);
                assert!(f.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_control_weight_matches_detached_branch() {
        let cfg = SgdmConfig::tiny();
        let (mut p, mut rng, tok) = setup(cfg, 2);
        randomize_couplings(&mut p, &mut rng);
        let z = rng.normal_tensor(&[3, cfg.image_size, cfg.image_size]);
        let c = cond_map(&mut rng, &cfg);
        let base = denoise_frame(&z, 10, &tok, None, 2.0, &p).unwrap();
        assert_eq!(denoise_frame(&z, 10, &tok, Some(&c), 0.0, &p).unwrap(), base);
        assert_ne!(denoise_frame(&z, 10, &tok, Some(&c), 2.0, &p).unwrap(), base);
        let feats = control_features(&c, &z, 10, &tok, &p).unwrap();
        assert!(feats.iter().all(|f| f.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn appearance_tokens_shape_and_determinism() {
        let cfg = SgdmConfig::body();
        let mut rng = Rng::new(3, 0);
        let p = init_params(&mut rng, &cfg).unwrap();
        let r = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let a = encode_appearance(&r, &p).unwrap();
        assert_eq!(a.tensor().shape(), [16, 64]);
        assert_eq!(a, encode_appearance(&r, &p).unwrap());
        assert!(encode_appearance(&Tensor::zeros(&[3, 16, 16]), &p).is_err());
        assert_eq!(null_tokens(&p).tensor().shape(), [16, 64]);
    }

    #[test]
    fn token_permutation_leaves_prediction_unchanged() {
        let cfg = SgdmConfig::body();
        let (mut p, mut rng, tok) = setup(cfg, 4);
        randomize_couplings(&mut p, &mut rng);
        let z = rng.normal_tensor(&[3, 32, 32]);
        let c = cond_map(&mut rng, &cfg);
        let l = tok.len();
        let perm: Vec<usize> = (0..l).map(|i| (i * 5 + 3) % l).collect();
        let d = tok.width();
        let permuted = AppearanceTokens::new(Tensor::from_fn(&[l, d], |i| tok.tensor().data()[perm[i / d] * d + i % d])).unwrap();
        let a = denoise_frame(&z, 321, &tok, Some(&c), 2.0, &p).unwrap();
        let b = denoise_frame(&z, 321, &permuted, Some(&c), 2.0, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn batch_of_one_all_frame_matches_frame_model() {
        let cfg = SgdmConfig::tiny();
        let (mut p, mut rng, tok) = setup(cfg, 5);
        randomize_couplings(&mut p, &mut rng);
        let z: Tensor = rng.normal_tensor(&[3, 16, 16]);
        let c = cond_map(&mut rng, &cfg);
        let f = denoise_frame(&z, 77, &tok, Some(&c), 2.0, &p).unwrap();
        let b = denoise_batch(&z.clone().unsqueeze0(), 77, &tok, Some(&[c.clone()]), 2.0, AttentionMode::AllFrame, &p).unwrap();
        assert_eq!(b.eps.reshape(&[3, 16, 16]).unwrap(), f);
        // Identical frames under all-frame attention stay identical.
        let zz = Tensor::stack(&[z.clone(), z.clone()]).unwrap();
        let two = denoise_batch(&zz, 77, &tok, Some(&[c.clone(), c]), 2.0, AttentionMode::AllFrame, &p).unwrap();
        assert_eq!(two.eps.slice0(0, 1).unwrap(), two.eps.slice0(1, 2).unwrap());
    }

    #[test]
    fn all_frame_attention_cost_is_quadratic_in_window() {
        let cfg = SgdmConfig::tiny();
        let (p, mut rng, tok) = setup(cfg, 6);
        let macs = |n: usize, mode, rng: &mut Rng| {
            let z = rng.normal_tensor(&[n, 3, 16, 16]);
            let c: Vec<ConditionMap> = (0..n).map(|_| ConditionMap::blank(1, 16)).collect();
            denoise_batch(&z, 5, &tok, Some(&c), 2.0, mode, &p).unwrap().attention_macs
        };
        let per_frame = macs(1, AttentionMode::PerFrame, &mut rng);
        let (a4, a8) = (macs(4, AttentionMode::AllFrame, &mut rng), macs(8, AttentionMode::AllFrame, &mut rng));
        assert_eq!(macs(4, AttentionMode::PerFrame, &mut rng), 4 * per_frame);
        // Self-attention grows by 4× when the window doubles; cross-attention by 2×.
        let ratio = a8 as f64 / a4 as f64;
        assert!(ratio > 3.0 && ratio <= 4.0, "{ratio}");
    }

    #[test]
    fn shapes_are_checked() {
        let cfg = SgdmConfig::tiny();
        let (p, mut rng, tok) = setup(cfg, 7);
        let z: Tensor = rng.normal_tensor(&[3, 16, 16]);
        assert!(denoise_frame(&Tensor::zeros(&[3, 8, 8]), 1, &tok, None, 2.0, &p).is_err());
        assert!(denoise_frame(&z, 1, &tok, Some(&ConditionMap::blank(1, 8)), 2.0, &p).is_err());
        let bad = AppearanceTokens::new(Tensor::zeros(&[3, 8])).unwrap();
        assert!(denoise_frame(&z, 1, &bad, None, 2.0, &p).is_err());
        let out = denoise_frame(&z, 1, &tok, None, 2.0, &p).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(ConditionMap::new(Tensor::full(&[1, 4, 4], 1.5)).is_err());
        let zz = Tensor::stack(&[z.clone(), z.clone()]).unwrap();
        assert!(denoise_batch(&zz, 1, &tok, Some(&[ConditionMap::blank(1, 16)]), 2.0, AttentionMode::AllFrame, &p).is_err());
    }

    #[test]
    fn face_input_layout() {
        let cfg = SgdmConfig::face();
        let mut rng = Rng::new(8, 0);
        let pf = init_params(&mut rng, &cfg).unwrap();
        let clean: Tensor = rng.normal_tensor(&[3, 16, 16]);
        let noisy: Tensor = rng.normal_tensor(&[3, 16, 16]);
        let mask = Tensor::from_fn(&[1, 16, 16], |i| if (i / 16) < 8 { 1.0 } else { 0.0 });
        let f = FaceInpaintInput::new(noisy.clone(), mask.clone(), &clean).unwrap();
        for c in 0..3 {
            for i in 0..256 {
                let m = mask.data()[i];
                let v = f.masked_latent.data()[c * 256 + i];
                if m == 1.0 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, clean.data()[c * 256 + i]);
                }
            }
        }
        assert_eq!(f.stacked().dim(0), 7);
        let full = FaceInpaintInput::new(noisy.clone(), Tensor::full(&[1, 16, 16], 1.0), &clean).unwrap();
        assert!(full.masked_latent.data().iter().all(|&v| v == 0.0));
        let tok = encode_appearance(&clean.map(|v| v.abs().min(1.0)), &pf).unwrap();
        assert_eq!(tok.len(), 4);
        let eps = denoise_face(&f, 500, &tok, Some(&ConditionMap::blank(1, 16)), 2.0, &pf).unwrap();
        assert_eq!(eps.shape(), [3, 16, 16]);
        let (body, _, btok) = setup(SgdmConfig::tiny(), 9);
        assert!(denoise_face(&f, 500, &btok, None, 2.0, &body).is_err());
        assert!(FaceInpaintInput::new(noisy, Tensor::full(&[1, 16, 16], 0.5), &clean).is_err());
    }

    fn train_batch<T: crate::numerics::Scalar>(cfg: &SgdmConfig, rng: &mut Rng, b: usize) -> TrainBatch<T> {
        let s = cfg.image_size;
        let sched = NoiseSchedule::default_training();
        let x0: Tensor<T> = rng.normal_tensor(&[b, cfg.channels, s, s]);
        let eps: Tensor<T> = rng.normal_tensor(&[b, cfg.channels, s, s]);
        let t: Vec<usize> = (0..b).map(|i| 1 + (i * 397) % 1000).collect();
        let mut x_t = Tensor::zeros(&[b, cfg.channels, s, s]);
        let per = cfg.channels * s * s;
        for i in 0..b {
            let xi = q_sample(&x0.slice0(i, i + 1).unwrap(), t[i], &eps.slice0(i, i + 1).unwrap(), &sched).unwrap();
            x_t.data_mut()[i * per..(i + 1) * per].copy_from_slice(xi.data());
        }
        TrainBatch {
            x_t,
            t,
            eps,
            refs: rng.normal_tensor(&[b, cfg.channels, s, s]),
            conds: Tensor::from_fn(&[b, 1, s, s], |_| T::of((rng.uniform() < 0.3) as u8 as f64)),
            drop: (0..b).map(|i| i == 0).collect(),
            w_c: 2.0,
        }
    }

    #[test]
    fn full_network_gradient_check() {
        let report = network_grad_check(10, 2).unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn every_parameter_receives_a_finite_gradient() {
        let cfg = SgdmConfig::body();
        let mut rng = Rng::new(11, 0);
        let mut p = init_params(&mut rng, &cfg).unwrap();
        randomize_couplings(&mut p, &mut rng);
        let batch = train_batch::<f32>(&cfg, &mut rng, 2);
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &p.store);
        let loss = batch_loss(&mut tape, &pv, &cfg, &batch).unwrap();
        let grads: Gradients<f32> = tape.backward(loss).unwrap();
        for (name, &v) in p.store.names().iter().zip(pv.vars()) {
            let g = grads.get(v).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.is_finite(), "{name}");
        }
        let l = tape.value(loss).data()[0] as f64;
        let direct = eps_loss(&batch.eps, &batch.eps).unwrap();
        assert!(l > direct && l.is_finite());
    }
}
