//! Two-stage training of the body model and training of the face model.
//!
//! Stage one sees several identities with the background replaced by neutral
//! gray; stage two fine-tunes every parameter on one identity with its true
//! background. The face model learns inpainting from clean crops alone.

use alloc::vec;
use alloc::vec::Vec;

use crate::enhance::{crop_face, face_mask};
use crate::error::{invalid, Error, Result};
use crate::numerics::{stream_key, Rng, Tape, Tensor};
use crate::scheduler::{q_sample, NoiseSchedule};
use crate::sgdm::{batch_loss, to_latent, ConditionMap, FaceInpaintInput, ParamVars, SgdmParams, TrainBatch, DEFAULT_CONTROL_WEIGHT};
use crate::world::{foreground_mask, perturb_pose, render_condition, render_face_condition, render_frame, Clip, Pose};

/// Gray that replaces the background of stage-one targets.
pub const NEUTRAL_GRAY: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Stage {
    Pretrain,
    Finetune,
    Face,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_dropout: f64,
    /// Standard deviation of the joint-angle noise applied before rendering
    /// condition maps; 0 disables perturbation.
    pub perturb_magnitude: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub w_c: f32,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            cond_dropout: 0.1,
            perturb_magnitude: 0.05,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            w_c: DEFAULT_CONTROL_WEIGHT,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            steps: 500,
            perturb_magnitude: 0.0,
            ..Self::pretrain()
        }
    }

    pub fn face() -> Self {
        Self {
            stage: Stage::Face,
            steps: 2000,
            perturb_magnitude: 0.0,
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
            Stage::Face => Self::face(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "TrainConfig";
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid(op, "steps and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(invalid(op, "cond_dropout must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) || !(self.perturb_magnitude >= 0.0) || !(self.clip_norm >= 0.0) || !self.w_c.is_finite() {
            return Err(invalid(op, "learning_rate must be positive; perturb_magnitude and clip_norm non-negative"));
        }
        Ok(())
    }
}

/// Parameters after training and the per-step loss.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: SgdmParams,
    pub losses: Vec<f64>,
}

/// One training example before batching, all tensors in latent range.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Clean target `x_0` in `[0,1]`.
    pub target: Tensor,
    /// Network input besides the noisy latent (mask and masked latent for
    /// the face model), empty for the body model.
    pub mask: Option<Tensor>,
    pub reference: Tensor,
    pub cond: ConditionMap,
}

/// Stage-one composite: foreground over neutral gray.
pub fn composite_on_gray(frame: &Tensor, mask: &Tensor) -> Tensor {
    let hw = mask.len();
    Tensor::from_fn(frame.shape(), |i| if mask.data()[i % hw] >= 0.5 { frame.data()[i] } else { NEUTRAL_GRAY })
}

struct BodySource<'a> {
    clips: &'a [Clip],
    /// Targets per clip and frame, composited when the background is hidden.
    targets: Vec<Vec<Tensor>>,
}

impl<'a> BodySource<'a> {
    fn new(clips: &'a [Clip], background: bool) -> Self {
        let targets = clips
            .iter()
            .map(|c| {
                c.poses
                    .iter()
                    .map(|p| {
                        let f = render_frame(&c.identity, p);
                        if background {
                            f
                        } else {
                            composite_on_gray(&f, &foreground_mask(&c.identity, p))
                        }
                    })
                    .collect()
            })
            .collect();
        Self { clips, targets }
    }

    fn draw(&self, rng: &mut Rng, perturb: f64) -> Result<Example> {
        let ci = rng.below(self.clips.len());
        let clip = &self.clips[ci];
        let k = rng.below(clip.poses.len());
        let r = rng.below(clip.poses.len());
        let pose = conditioned_pose(&clip.poses[k], rng, perturb)?;
        Ok(Example {
            target: self.targets[ci][k].clone(),
            mask: None,
            reference: self.targets[ci][r].clone(),
            cond: render_condition(&pose),
        })
    }
}

fn conditioned_pose(p: &Pose, rng: &mut Rng, perturb: f64) -> Result<Pose> {
    if perturb > 0.0 {
        perturb_pose(p, rng, perturb)
    } else {
        Ok(*p)
    }
}

struct FaceSource<'a> {
    clips: &'a [Clip],
    crops: Vec<Vec<(Tensor, Tensor)>>,
}

impl<'a> FaceSource<'a> {
    fn new(clips: &'a [Clip]) -> Result<Self> {
        let crops = clips
            .iter()
            .map(|c| {
                c.poses
                    .iter()
                    .map(|p| {
                        let (crop, tf) = crop_face(&render_frame(&c.identity, p), p, &c.identity)?;
                        Ok((crop, face_mask(&c.identity, p, &tf)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips, crops })
    }

    fn draw(&self, rng: &mut Rng, perturb: f64) -> Result<Example> {
        let ci = rng.below(self.clips.len());
        let clip = &self.clips[ci];
        let k = rng.below(clip.poses.len());
        let r = rng.below(clip.poses.len());
        let pose = conditioned_pose(&clip.poses[k], rng, perturb)?;
        let tf = crate::world::head_transform(&clip.poses[k], &clip.identity);
        let (crop, mask) = self.crops[ci][k].clone();
        Ok(Example {
            target: crop,
            mask: Some(mask),
            reference: self.crops[ci][r].0.clone(),
            cond: render_face_condition(&pose, &tf),
        })
    }
}

/// Noises every example at its own timestep and assembles the network
/// batch. Dropped samples get the null tokens and a blank condition map.
pub fn make_batch(examples: &[Example], rng: &mut Rng, sched: &NoiseSchedule, cond_dropout: f64, w_c: f32) -> Result<TrainBatch<f32>> {
    if examples.is_empty() {
        return Err(Error::Empty { op: "make_batch" });
    }
    let (mut xs, mut eps, mut refs, mut conds, mut ts, mut drop) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for ex in examples {
        let x0 = to_latent(&ex.target);
        let t = 1 + rng.below(sched.steps());
        let e: Tensor = rng.normal_tensor(x0.shape());
        let x_t = q_sample(&x0, t, &e, sched)?;
        let input = match &ex.mask {
            Some(m) => FaceInpaintInput::new(x_t, m.clone(), &x0)?.stacked(),
            None => x_t,
        };
        let dropped = cond_dropout > 0.0 && rng.uniform() < cond_dropout;
        let c = ex.cond.tensor();
        conds.push(if dropped { Tensor::zeros(c.shape()) } else { c.clone() });
        xs.push(input);
        eps.push(e);
        refs.push(to_latent(&ex.reference));
        ts.push(t);
        drop.push(dropped);
    }
    Ok(TrainBatch {
        x_t: Tensor::stack(&xs)?,
        t: ts,
        eps: Tensor::stack(&eps)?,
        refs: Tensor::stack(&refs)?,
        conds: Tensor::stack(&conds)?,
        drop,
        w_c: w_c as f64,
    })
}

/// Loss and one gradient per parameter, zero for parameters the batch
/// never touched.
pub fn loss_and_grads(params: &SgdmParams, batch: &TrainBatch<f32>) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, &params.store);
    let loss = batch_loss(&mut tape, &pv, &params.config, batch)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut g = tape.backward(loss)?;
    let grads = pv
        .vars()
        .iter()
        .zip(params.store.tensors())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Plain SGD or Adam with optional global-norm clipping.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, clip: f64) -> Self {
        Self { kind, lr, clip, step: 0, m: vec![], v: vec![] }
    }

    pub fn apply(&mut self, params: &mut SgdmParams, grads: &[Tensor]) -> Result<()> {
        let store = params.store.tensors_mut();
        if grads.len() != store.len() {
            return Err(invalid("Optimizer", "one gradient per parameter required"));
        }
        let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>());
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in store.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = (*w as f64 - self.lr * scale * d as f64) as f32;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = store.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - libm::pow(Self::B1, self.step as f64);
                let c2 = 1.0 - libm::pow(Self::B2, self.step as f64);
                for (k, (p, g)) in store.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d as f64 * scale;
                        m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * d;
                        v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * d * d;
                        *w = (*w as f64 - self.lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + Self::EPS)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => 1,
        Stage::Finetune => 2,
        Stage::Face => 3,
    }
}

fn run(mut params: SgdmParams, cfg: &TrainConfig, sched: &NoiseSchedule, mut draw: impl FnMut(&mut Rng) -> Result<Example>, mut progress: impl FnMut(usize, f64)) -> Result<Trained> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.clip_norm);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = Rng::new(cfg.seed, stream_key(&[stage_tag(cfg.stage), step as u64]));
        let examples = (0..cfg.batch_size).map(|_| draw(&mut rng)).collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&examples, &mut rng, sched, cfg.cond_dropout, cfg.w_c)?;
        let (loss, grads) = loss_and_grads(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        opt.apply(&mut params, &grads)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(Trained { params, losses })
}

fn body_check(params: &SgdmParams) -> Result<()> {
    if params.config.extra_channels != 0 {
        return Err(invalid("training", "body stages need body parameters"));
    }
    Ok(())
}

fn single_identity(clips: &[Clip]) -> Result<()> {
    let first = clips.first().ok_or(Error::Empty { op: "finetune" })?;
    if clips.iter().any(|c| c.identity != first.identity) {
        return Err(invalid("finetune", "fine-tuning takes exactly one identity"));
    }
    Ok(())
}

fn non_empty(clips: &[Clip], op: &'static str) -> Result<()> {
    if clips.is_empty() || clips.iter().any(|c| c.poses.is_empty()) {
        return Err(Error::Empty { op });
    }
    Ok(())
}

/// Trains the body model on `clips` with either true or gray backgrounds.
pub fn train_body(params: SgdmParams, clips: &[Clip], background: bool, cfg: &TrainConfig, sched: &NoiseSchedule, progress: impl FnMut(usize, f64)) -> Result<Trained> {
    non_empty(clips, "train_body")?;
    body_check(&params)?;
    let src = BodySource::new(clips, background);
    run(params, cfg, sched, |rng| src.draw(rng, cfg.perturb_magnitude), progress)
}

/// Multi-identity stage on foreground-only targets.
pub fn pretrain(clips: &[Clip], params: SgdmParams, cfg: &TrainConfig, sched: &NoiseSchedule, progress: impl FnMut(usize, f64)) -> Result<Trained> {
    non_empty(clips, "pretrain")?;
    let first = &clips[0].identity;
    if clips.iter().all(|c| &c.identity == first) {
        return Err(invalid("pretrain", "pretraining needs at least two identities"));
    }
    train_body(params, clips, false, cfg, sched, progress)
}

/// Single-identity stage with the true background; all parameters train.
pub fn finetune(params: SgdmParams, clips: &[Clip], cfg: &TrainConfig, sched: &NoiseSchedule, progress: impl FnMut(usize, f64)) -> Result<Trained> {
    non_empty(clips, "finetune")?;
    single_identity(clips)?;
    train_body(params, clips, true, cfg, sched, progress)
}

/// Face inpainting model on aligned head crops.
pub fn train_face(params_face: SgdmParams, clips: &[Clip], cfg: &TrainConfig, sched: &NoiseSchedule, progress: impl FnMut(usize, f64)) -> Result<Trained> {
    non_empty(clips, "train_face")?;
    if params_face.config.extra_channels != params_face.config.channels + 1 {
        return Err(invalid("train_face", "face parameters need the inpainting inputs"));
    }
    let src = FaceSource::new(clips)?;
    run(params_face, cfg, sched, |rng| src.draw(rng, cfg.perturb_magnitude), progress)
}

/// Body training plans: the two-stage strategy and its two ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TrainingPlan {
    TwoStage,
    /// Train from scratch on the target identity only.
    ScratchSingle,
    /// Train once on every identity with true backgrounds.
    JointAll,
}

/// Runs a body plan. Ablations spend the same total number of steps as the
/// two-stage plan.
pub fn train_plan(plan: TrainingPlan, init: SgdmParams, pretrain_clips: &[Clip], target: &Clip, pre: &TrainConfig, fine: &TrainConfig, sched: &NoiseSchedule, mut progress: impl FnMut(Stage, usize, f64)) -> Result<(Trained, Option<Trained>)> {
    let total = TrainConfig { steps: pre.steps + fine.steps, ..*fine };
    match plan {
        TrainingPlan::TwoStage => {
            let stage1 = pretrain(pretrain_clips, init, pre, sched, |s, l| progress(Stage::Pretrain, s, l))?;
            let stage2 = finetune(stage1.params.clone(), core::slice::from_ref(target), fine, sched, |s, l| progress(Stage::Finetune, s, l))?;
            Ok((stage2, Some(stage1)))
        }
        TrainingPlan::ScratchSingle => Ok((finetune(init, core::slice::from_ref(target), &total, sched, |s, l| progress(Stage::Finetune, s, l))?, None)),
        TrainingPlan::JointAll => {
            let mut all = pretrain_clips.to_vec();
            all.push(target.clone());
            Ok((train_body(init, &all, true, &total, sched, |s, l| progress(Stage::Finetune, s, l))?, None))
        }
    }
}

/// Mean of consecutive `window`-step blocks of a loss curve.
pub fn block_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks(window.max(1)).filter(|c| c.len() == window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}
