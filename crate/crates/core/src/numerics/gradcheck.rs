//! Central finite-difference verification of tape gradients (64-bit).

use alloc::vec::Vec;

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Which coordinates to perturb and how.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Check only this many randomly chosen coordinates per tensor.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            floor: 1e-6,
            per_tensor: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, per_tensor: usize) -> Self {
        self.per_tensor = Some(per_tensor);
        self
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Analytic gradients, one per parameter tensor.
    pub analytic: Vec<Tensor<f64>>,
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` and returns the worst relative error.
pub fn grad_check<F>(params: &[Tensor<f64>], cfg: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    if cfg.h <= 0.0 {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).data()[0].is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut rng = Rng::new(cfg.seed, 0x6772_6164);
    let mut report = GradCheckReport::default();
    for ti in 0..params.len() {
        let n = params[ti].len();
        let coords: Vec<usize> = match cfg.per_tensor {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + cfg.h;
            let fp = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig - cfg.h;
            let fm = eval(&f, &work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[ti].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((ti, c));
            }
        }
    }
    report.analytic = analytic;
    Ok(report)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

fn run_check<F>(params: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check(params, &GradCheck::new(1e-4), f)?.max_rel_err)
}

/// Worst relative error of every tape primitive, each checked on a small
/// random objective at every coordinate.
pub fn primitive_suite() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut rng = Rng::new(2, 0);
    let (a, b, c) = (randn(&mut rng, &[2, 3, 2, 2]), randn(&mut rng, &[2, 3, 2, 2]), randn(&mut rng, &[2, 3]));
    out.push((
        "add/sub/mul/silu/scale/add_channel/sum",
        run_check(&[a, b, c], |t, v| {
            let x = t.add(v[0], v[1])?;
            let x = t.mul(x, v[1])?;
            let x = t.sub(x, v[0])?;
            let x = t.silu(x);
            let x = t.scale(x, 0.7);
            let x = t.add_channel(x, v[2])?;
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        })?,
    ));

    let (x, w, b) = (randn(&mut rng, &[2, 3, 4]), randn(&mut rng, &[4, 5]), randn(&mut rng, &[5]));
    let target = randn(&mut rng, &[2, 3, 5]);
    out.push((
        "linear/mse",
        run_check(&[x, w, b], move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let tg = t.input(target.clone());
            t.mse(y, tg)
        })?,
    ));

    let mut conv = 0.0f64;
    for &(k, stride, pad, h) in &[(3, 1, 1, 5), (3, 2, 1, 7), (1, 1, 0, 4), (5, 1, 2, 5)] {
        let (x, w, b) = (randn(&mut rng, &[2, 3, h, h]), randn(&mut rng, &[4, 3, k, k]), randn(&mut rng, &[4]));
        conv = conv.max(run_check(&[x, w, b], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        })?);
    }
    out.push(("conv2d", conv));

    let (x, g, b, w) = (randn(&mut rng, &[2, 8, 3, 3]), randn(&mut rng, &[8]), randn(&mut rng, &[8]), randn(&mut rng, &[2, 8, 3, 3]));
    out.push((
        "group_norm",
        run_check(&[x, g, b], move |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 4)?;
            let wv = t.input(w.clone());
            let y = t.mul(y, wv)?;
            Ok(t.sum(y))
        })?,
    ));

    let mut sm = 0.0f64;
    for axis in 0..3 {
        let (x, w) = (randn(&mut rng, &[3, 4, 2]), randn(&mut rng, &[3, 4, 2]));
        sm = sm.max(run_check(&[x], move |t, v| {
            let y = t.softmax(v[0], axis)?;
            let wv = t.input(w.clone());
            let y = t.mul(y, wv)?;
            Ok(t.sum(y))
        })?);
    }
    out.push(("softmax", sm));

    let (q, k, v) = (randn(&mut rng, &[2, 5, 4]), randn(&mut rng, &[2, 3, 4]), randn(&mut rng, &[2, 3, 6]));
    let target = randn(&mut rng, &[2, 5, 6]);
    out.push((
        "attention",
        run_check(&[q, k, v], move |t, p| {
            let y = t.attention(p[0], p[1], p[2], 2)?;
            let tg = t.input(target.clone());
            t.mse(y, tg)
        })?,
    ));

    let (x, y, alt, one) = (randn(&mut rng, &[2, 4, 4, 2]), randn(&mut rng, &[2, 3, 4, 2]), randn(&mut rng, &[4, 4, 2]), randn(&mut rng, &[1, 4, 4, 2]));
    let w = randn(&mut rng, &[2, 4, 8, 4]);
    out.push((
        "concat/space_to_depth/depth_to_space/tokens/upsample/select_rows/repeat/reshape",
        run_check(&[x, y, alt, one], move |t, v| {
            let a = t.concat(&[v[0], v[1]], 1)?;
            let a = t.space_to_depth(a)?;
            let a = t.depth_to_space(a)?;
            let a = t.to_tokens(a)?;
            let a = t.from_tokens(a, 4, 2)?;
            let a = t.upsample2x(a);
            let s = t.select_rows(v[0], v[2], &[true, false])?;
            let r = t.repeat0(v[3], 2)?;
            let sr = t.add(s, r)?;
            let sr = t.reshape(sr, &[2, 4, 8])?;
            let sr = t.reshape(sr, &[2, 4, 4, 2])?;
            let u = t.upsample2x(sr);
            let wv = t.input(w.clone());
            let u = t.mul(u, wv)?;
            let a2 = t.mul(a, a)?;
            let s1 = t.sum(a2);
            let s2 = t.sum(u);
            t.add(s1, s2)
        })?,
    ));
    Ok(out)
}
