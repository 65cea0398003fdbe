//! Subcommand implementations. Each reads its inputs from the run directory,
//! writes its outputs there and records itself in `manifest.json`.

use std::path::{Path, PathBuf};

use anchorgen_core::enhance::{crop_face, enhance_sequence, face_mask, paste_weights};
use anchorgen_core::metrics::{evaluate_sequence, frechet_features, EvalReport};
use anchorgen_core::numerics::{primitive_suite, stream_key, Rng, Tensor};
use anchorgen_core::scheduler::{oracle_chains, NoiseSchedule, Sampler, DEFAULT_BETA_END, DEFAULT_BETA_START};
use anchorgen_core::sgdm::{init_params, network_grad_check, SgdmConfig, SgdmParams};
use anchorgen_core::temporal::{generate_sequence, plan_windows};
use anchorgen_core::training::{pretrain, train_face, train_plan, finetune, Stage, Trained, TrainingPlan};
use anchorgen_core::world::{generate_world, head_transform, render_frame, WorldData, FRAME_SIZE};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingSummary};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_image, read_json, write_image, write_json, write_loss_csv};

const BODY_INIT: u64 = 0xB0D1;
const FACE_INIT: u64 = 0xFACE;

/// `v<crate version>`, with the git description appended when the build
/// environment provides one.
pub fn version_string() -> String {
    match option_env!("ANCHORGEN_GIT_DESCRIBE") {
        Some(g) if !g.is_empty() => format!("v{}-{g}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub commands: Vec<String>,
}

fn record(cfg: &RunConfig, command: &str) -> CliResult<()> {
    let path = cfg.paths().manifest;
    let mut commands = if path.exists() { read_json::<Manifest>(&path)?.commands } else { Vec::new() };
    commands.push(command.to_string());
    write_json(&path, &Manifest { version: version_string(), seed: cfg.seed, config: cfg.clone(), commands })
}

pub fn frame_path(dir: &Path, seq: usize, frame: usize, suffix: &str) -> PathBuf {
    dir.join(format!("seq{seq:02}")).join(format!("frame_{frame:04}{suffix}.ppm"))
}

fn mask_path(dir: &Path, seq: usize, frame: usize) -> PathBuf {
    dir.join(format!("seq{seq:02}")).join(format!("mask_{frame:04}.pgm"))
}

pub fn load_world(cfg: &RunConfig) -> CliResult<WorldData> {
    read_json(&cfg.paths().world)
}

/// The reference frame and face crop that carry the target's appearance.
pub fn references(world: &WorldData) -> CliResult<(Tensor, Tensor)> {
    let clip = &world.finetune;
    let frame = render_frame(&clip.identity, &clip.poses[0]);
    let (face, _) = crop_face(&frame, &clip.poses[0], &clip.identity)?;
    Ok((frame, face))
}

fn checkpoint_of(trained: &Trained, sched: &NoiseSchedule, stage: &str, seed: u64) -> Checkpoint {
    Checkpoint {
        params: trained.params.clone(),
        schedule: sched.clone(),
        summary: TrainingSummary {
            stage: stage.to_string(),
            steps: trained.losses.len() as u64,
            final_loss: trained.losses.last().copied().unwrap_or(f64::NAN),
            seed,
        },
    }
}

fn progress(stage: Stage) -> impl FnMut(usize, f64) {
    let mut acc = 0.0;
    move |step, loss| {
        acc += loss;
        if (step + 1) % 100 == 0 {
            log::info!("{stage:?} step {}: mean loss {:.4}", step + 1, acc / 100.0);
            acc = 0.0;
        }
    }
}

fn save_trained(cfg: &RunConfig, trained: &Trained, path: &Path, stage: &str) -> CliResult<()> {
    let sched = cfg.schedule()?;
    save_checkpoint(&checkpoint_of(trained, &sched, stage, cfg.seed), path)?;
    write_loss_csv(&path.with_extension("loss.csv"), &trained.losses)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_params(path: &Path, sched: &NoiseSchedule) -> CliResult<SgdmParams> {
    let ck = load_checkpoint(path)?;
    if &ck.schedule != sched {
        log::warn!("{} was trained with a different noise schedule", path.display());
    }
    Ok(ck.params)
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<WorldData> {
    let world = generate_world(&cfg.recipe(), cfg.seed)?;
    let paths = cfg.paths();
    write_json(&paths.world, &world)?;
    let truth = paths.world.with_file_name("truth");
    for (k, clip) in world.test.iter().enumerate() {
        for (i, f) in clip.frames().iter().enumerate() {
            write_image(&frame_path(&truth, k, i, ""), f)?;
        }
    }
    log::info!("wrote {} and ground-truth frames under {}", paths.world.display(), truth.display());
    record(cfg, "gen-data")?;
    Ok(world)
}

pub fn run_pretrain(cfg: &RunConfig) -> CliResult<Trained> {
    let world = load_world(cfg)?;
    let sched = cfg.schedule()?;
    let init = init_params(&mut Rng::new(cfg.seed, stream_key(&[BODY_INIT])), &SgdmConfig::body())?;
    let trained = pretrain(&world.pretrain, init, &cfg.train_config(Stage::Pretrain), &sched, progress(Stage::Pretrain))?;
    save_trained(cfg, &trained, &cfg.paths().pretrain_checkpoint, "pretrain")?;
    record(cfg, "pretrain")?;
    Ok(trained)
}

/// Fine-tunes the pretrained checkpoint, or under an ablation plan trains
/// the body model from initialization with the same total step budget.
pub fn run_finetune(cfg: &RunConfig) -> CliResult<Trained> {
    let world = load_world(cfg)?;
    let sched = cfg.schedule()?;
    let paths = cfg.paths();
    let fine = cfg.train_config(Stage::Finetune);
    let trained = match cfg.plan {
        TrainingPlan::TwoStage => {
            let params = load_params(&paths.pretrain_checkpoint, &sched)?;
            finetune(params, std::slice::from_ref(&world.finetune), &fine, &sched, progress(Stage::Finetune))?
        }
        plan => {
            let init = init_params(&mut Rng::new(cfg.seed, stream_key(&[BODY_INIT])), &SgdmConfig::body())?;
            let pre = cfg.train_config(Stage::Pretrain);
            let mut log = progress(Stage::Finetune);
            train_plan(plan, init, &world.pretrain, &world.finetune, &pre, &fine, &sched, |_, s, l| log(s, l))?.0
        }
    };
    save_trained(cfg, &trained, &paths.checkpoint, "finetune")?;
    record(cfg, "finetune")?;
    Ok(trained)
}

pub fn run_train_face(cfg: &RunConfig) -> CliResult<Trained> {
    let world = load_world(cfg)?;
    let sched = cfg.schedule()?;
    let init = init_params(&mut Rng::new(cfg.seed, stream_key(&[FACE_INIT])), &SgdmConfig::face())?;
    let trained = train_face(init, std::slice::from_ref(&world.finetune), &cfg.train_config(Stage::Face), &sched, progress(Stage::Face))?;
    save_trained(cfg, &trained, &cfg.paths().face_checkpoint, "face")?;
    record(cfg, "train-face")?;
    Ok(trained)
}

fn split_frames(seq: &Tensor) -> CliResult<Vec<Tensor>> {
    let n = seq.dim(0);
    let shape = [seq.dim(1), seq.dim(2), seq.dim(3)];
    (0..n).map(|i| Ok(seq.slice0(i, i + 1)?.reshape(&shape)?)).collect()
}

/// Generates every held-out test sequence; sequence `k` uses seed `seed + k`.
pub fn synthesize(cfg: &RunConfig) -> CliResult<Vec<Vec<Tensor>>> {
    let world = load_world(cfg)?;
    let sched = cfg.schedule()?;
    let paths = cfg.paths();
    let params = load_params(&paths.checkpoint, &sched)?;
    let (reference, _) = references(&world)?;
    let mut out = Vec::new();
    for (k, clip) in world.test.iter().enumerate() {
        let syn = cfg.synthesis(cfg.seed.wrapping_add(k as u64))?;
        let frames = split_frames(&generate_sequence(&clip.poses, &reference, &params, &sched, &syn)?)?;
        for (i, f) in frames.iter().enumerate() {
            write_image(&frame_path(&paths.synth_dir, k, i, ""), f)?;
        }
        log::info!("sequence {k}: {} frames", frames.len());
        out.push(frames);
    }
    record(cfg, "synthesize")?;
    Ok(out)
}

fn read_sequence(dir: &Path, k: usize, n: usize, suffix: &str) -> CliResult<Vec<Tensor>> {
    (0..n).map(|i| read_image(&frame_path(dir, k, i, suffix))).collect()
}

/// Face-enhances the synthesized frames, writing `_enh` frames and the
/// frame-resolution paste weights as masks.
pub fn enhance(cfg: &RunConfig) -> CliResult<Vec<Vec<Tensor>>> {
    let world = load_world(cfg)?;
    let sched = cfg.schedule()?;
    let paths = cfg.paths();
    let params = load_params(&paths.face_checkpoint, &sched)?;
    let (_, face_ref) = references(&world)?;
    let id = &world.finetune.identity;
    let mut out = Vec::new();
    for (k, clip) in world.test.iter().enumerate() {
        let frames = read_sequence(&paths.synth_dir, k, clip.poses.len(), "")?;
        let ec = cfg.enhancement(cfg.seed.wrapping_add(k as u64))?;
        let enhanced = enhance_sequence(&frames, &clip.poses, id, &face_ref, &params, &sched, &ec)?;
        for (i, (e, p)) in enhanced.iter().zip(&clip.poses).enumerate() {
            write_image(&frame_path(&paths.synth_dir, k, i, "_enh"), e)?;
            let tf = head_transform(p, id);
            let w = paste_weights(&face_mask(id, p, &tf), &tf, FRAME_SIZE, FRAME_SIZE, cfg.feather);
            let mask = Tensor::new(&[1, FRAME_SIZE, FRAME_SIZE], w.iter().map(|&v| v as f32).collect())?;
            write_image(&mask_path(&paths.synth_dir, k, i), &mask)?;
        }
        out.push(enhanced);
    }
    record(cfg, "enhance")?;
    Ok(out)
}

/// Scores synthesized (or enhanced) frames against ground-truth renders and
/// writes `eval.json` next to them.
/// Descriptions stored with every evaluation report.
pub const ANALOG_LABELS: [(&str, &str); 2] = [
    ("frechet", "Fréchet distance on handcrafted frame features, an FID analog without a pretrained network"),
    ("flicker", "mean squared second temporal difference, an FVD analog for temporal consistency"),
];

#[derive(Serialize)]
struct EvalFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    analogs: std::collections::BTreeMap<&'a str, &'a str>,
}

pub fn evaluate(cfg: &RunConfig, enhanced: bool) -> CliResult<EvalReport> {
    let world = load_world(cfg)?;
    let paths = cfg.paths();
    let suffix = if enhanced { "_enh" } else { "" };
    let id = &world.finetune.identity;
    let (mut all_gen, mut all_truth, mut seqs) = (Vec::new(), Vec::new(), Vec::new());
    for (k, clip) in world.test.iter().enumerate() {
        let generated = read_sequence(&paths.synth_dir, k, clip.poses.len(), suffix)?;
        let truth = clip.frames();
        seqs.push(evaluate_sequence(&generated, &truth, &clip.poses, id)?);
        all_gen.extend(generated);
        all_truth.extend(truth);
    }
    let report = EvalReport::new(seqs, frechet_features(&all_gen, &all_truth)?)?;
    let eval_path = if enhanced { paths.eval.with_file_name("eval_enh.json") } else { paths.eval };
    write_json(&eval_path, &EvalFile { report: &report, analogs: ANALOG_LABELS.into_iter().collect() })?;
    if report.joint_error_px.is_none() {
        log::warn!("every frame failed the landmark confidence test; joint error is undefined");
    }
    let joint = |j: Option<f64>| j.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    println!("{:<10} {:>12} {:>10} {:>10} {:>9}", "sequence", "joint (px)", "flicker", "psnr (dB)", "excluded");
    for (k, s) in report.sequences.iter().enumerate() {
        println!("{:<10} {:>12} {:>10.6} {:>10.2} {:>9}", k, joint(s.joint_error_px), s.flicker, s.psnr_db, s.excluded_frames);
    }
    println!("{:<10} {:>12} {:>10.6} {:>10.2}", "mean", joint(report.joint_error_px), report.flicker, report.psnr_db);
    println!("frechet {:.5}", report.frechet);
    for (name, label) in ANALOG_LABELS {
        println!("  {name}: {label}");
    }
    record(cfg, "evaluate")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn check(name: impl Into<String>, value: f64, tolerance: f64) -> Check {
    Check { name: name.into(), value, tolerance, pass: value.is_finite() && value.abs() < tolerance }
}

/// Gradient checks, Gaussian-oracle sampling and window accounting.
pub fn verify_checks(seed: u64) -> CliResult<Vec<Check>> {
    let mut out = Vec::new();
    for (name, err) in primitive_suite()? {
        out.push(check(format!("grad/{name}"), err, 1e-4));
    }
    let net = network_grad_check(seed, 2)?;
    out.push(check("grad/network", net.max_rel_err, 1e-3));
    let (mu, var) = (0.3, 0.04);
    let short = NoiseSchedule::linear(50, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    let full = NoiseSchedule::default_training();
    for (name, sampler, sched) in [("ddpm-50", Sampler::Ddpm, &short), ("ddim-20", Sampler::Ddim { steps: 20 }, &full)] {
        let (m, v) = oracle_chains(sampler, sched, mu, var, 10_000, seed)?;
        out.push(check(format!("oracle/{name}/mean"), m - mu, 0.05));
        out.push(check(format!("oracle/{name}/var-ratio"), v / var - 1.0, 0.1));
    }
    let plan = plan_windows(300, 16, 4)?;
    out.push(check("plan/windows-300-16-4", plan.windows.len() as f64 - 25.0, 0.5));
    out.push(check("plan/work-300-16-4", plan.work() as f64 - 400.0, 0.5));
    Ok(out)
}

pub fn verify(cfg: &RunConfig) -> CliResult<Vec<Check>> {
    let checks = verify_checks(cfg.seed)?;
    write_json(&cfg.paths().verify, &checks)?;
    for c in &checks {
        println!("{:<28} {:>12.3e} < {:<8.0e} {}", c.name, c.value.abs(), c.tolerance, if c.pass { "pass" } else { "FAIL" });
    }
    record(cfg, "verify")?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
