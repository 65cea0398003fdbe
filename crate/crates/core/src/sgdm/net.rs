//! Forward graph of the denoiser on a [`Tape`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::SgdmConfig;
use super::params::ParamStore;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::scheduler::NoiseSchedule;

/// Tape handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
    order: Vec<Var>,
}

impl ParamVars {
    /// Registers every tensor of `store` as a trainable leaf.
    pub fn bind<'p, T: Scalar>(tape: &mut Tape<'p, T>, store: &'p ParamStore<T>) -> Self {
        let order: Vec<Var> = store.tensors().iter().map(|t| tape.param(t)).collect();
        Self::from_vars(store, &order).expect("one var per tensor")
    }

    /// Pairs already-registered leaves with the store's names, in order.
    pub fn from_vars<T: Scalar>(store: &ParamStore<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(shape_err("ParamVars", &[store.len()], &[vars.len()]));
        }
        let map = store.names().iter().cloned().zip(vars.iter().copied()).collect();
        Ok(Self { map, order: vars.to_vec() })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| invalid("ParamVars", format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// How self-attention blocks group their tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Each frame attends to its own tokens.
    #[default]
    PerFrame,
    /// Queries, keys and values span the concatenated tokens of all frames
    /// in the batch.
    AllFrame,
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let k = j % half;
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let a = t[b] as f64 * freq;
        T::of(if j < half { libm::sin(a) } else { libm::cos(a) })
    })
}

/// Assumed standard deviation of clean latents.
pub const SIGMA_DATA: f64 = 0.5;

/// `(c_skip, c_out)` at timestep `t`. Any positive gains give a valid
/// parameterization; these are tuned to the default training schedule.
pub fn precondition_gains(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (s, n) = (sched.signal(t), sched.noise(t));
    let v = n * n + s * s * SIGMA_DATA * SIGMA_DATA;
    (n / v, s * SIGMA_DATA / libm::sqrt(v))
}

/// One denoiser evaluation over a batch.
pub struct NetInput<'a> {
    /// Network input `[B, C + extra, S, S]` (latent first).
    pub z: Var,
    pub t: &'a [usize],
    /// Appearance tokens `[B, L, d]`.
    pub tokens: Var,
    /// Condition maps `[B, C_p, S, S]`; `None` detaches the control branch.
    pub cond: Option<Var>,
    pub w_c: f64,
    pub mode: AttentionMode,
}

pub(crate) struct Net<'a, 'p, T: Scalar> {
    pub tape: &'a mut Tape<'p, T>,
    pub pv: &'a ParamVars,
    pub cfg: &'a SgdmConfig,
    pub mode: AttentionMode,
}

struct Skips {
    sf: Var,
    s0: Var,
    s1: Var,
    m: Var,
}

impl<'a, 'p, T: Scalar> Net<'a, 'p, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.pv.get(name)
    }

    fn conv(&mut self, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.conv2d(x, w, Some(b), 1, pad)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.group_norm(x, g, b, self.cfg.groups)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let bname = format!("{name}.b");
        let b = if self.pv.has(&bname) { Some(self.p(&bname)?) } else { None };
        self.tape.linear(x, w, b)
    }

    /// Timestep MLP; returns `silu(temb)` ready for per-block projections.
    fn temb(&mut self, pre: &str, t: &[usize]) -> Result<Var> {
        let e = self.tape.input(timestep_embedding(t, self.cfg.temb_dim));
        let h = self.linear(&format!("{pre}temb.l1"), e)?;
        let h = self.tape.silu(h);
        let h = self.linear(&format!("{pre}temb.l2"), h)?;
        Ok(self.tape.silu(h))
    }

    fn res(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = self.tape.silu(h);
        let h = self.conv(&format!("{name}.conv1"), h, 1)?;
        let e = self.linear(&format!("{name}.temb"), temb)?;
        let h = self.tape.add_channel(h, e)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let h = self.tape.silu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.pv.has(&format!("{skip_name}.w")) { self.conv(&skip_name, x, 0)? } else { x };
        self.tape.add(h, skip)
    }

    /// Residual attention block. `context = None` attends over the block's
    /// own features (grouped per frame or across all frames per `mode`);
    /// otherwise keys and values come from `context` `[B, L, d]`.
    fn attn(&mut self, name: &str, x: Var, context: Option<Var>) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let n = self.norm(&format!("{name}.norm"), x)?;
        let tok = self.tape.to_tokens(n)?;
        let q = self.linear(&format!("{name}.q"), tok)?;
        let src = context.unwrap_or(tok);
        let k = self.linear(&format!("{name}.k"), src)?;
        let v = self.linear(&format!("{name}.v"), src)?;
        let groups = match (context, self.mode) {
            (None, AttentionMode::AllFrame) => 1,
            _ => b,
        };
        let a = self.tape.attention(q, k, v, groups)?;
        let o = self.linear(&format!("{name}.o"), a)?;
        let o = self.tape.from_tokens(o, h, w)?;
        self.tape.add(x, o)
    }

    fn encoder(&mut self, pre: &str, z: Var, hint: Option<Var>, temb: Var, tokens: Var) -> Result<Skips> {
        let sf = self.conv(&format!("{pre}stem"), z, 1)?;
        let h = self.tape.silu(sf);
        let h = self.tape.space_to_depth(h)?;
        let mut h = self.conv(&format!("{pre}conv_in"), h, 1)?;
        if let Some(c) = hint {
            h = self.tape.add(h, c)?;
        }
        let h = self.res(&format!("{pre}enc0.res"), h, temb)?;
        let s0 = self.attn(&format!("{pre}enc0.xattn"), h, Some(tokens))?;
        let h = self.tape.space_to_depth(s0)?;
        let h = self.conv(&format!("{pre}down0"), h, 1)?;
        let h = self.res(&format!("{pre}enc1.res"), h, temb)?;
        let h = self.attn(&format!("{pre}enc1.attn"), h, None)?;
        let s1 = self.attn(&format!("{pre}enc1.xattn"), h, Some(tokens))?;
        let h = self.tape.space_to_depth(s1)?;
        let h = self.conv(&format!("{pre}down1"), h, 1)?;
        let h = self.res(&format!("{pre}mid.res"), h, temb)?;
        let h = self.attn(&format!("{pre}mid.attn"), h, None)?;
        let m = self.attn(&format!("{pre}mid.xattn"), h, Some(tokens))?;
        Ok(Skips { sf, s0, s1, m })
    }

    /// Control trunk outputs passed through the zero-initialized couplings,
    /// innermost level first.
    pub fn control(&mut self, z: Var, t: &[usize], tokens: Var, cond: Var) -> Result<[Var; 4]> {
        let temb = self.temb("ctrl.", t)?;
        let c = self.tape.space_to_depth(cond)?;
        let c = self.conv("ctrl.hint.c1", c, 1)?;
        let c = self.tape.silu(c);
        let c = self.conv("ctrl.hint.c2", c, 1)?;
        let sk = self.encoder("ctrl.", z, Some(c), temb, tokens)?;
        Ok([
            self.conv("ctrl.zero_mid", sk.m, 0)?,
            self.conv("ctrl.zero1", sk.s1, 0)?,
            self.conv("ctrl.zero0", sk.s0, 0)?,
            self.conv("ctrl.zero_full", sk.sf, 0)?,
        ])
    }

    fn couple(&mut self, f: Var, ctrl: Option<Var>, w_c: f64) -> Result<Var> {
        match ctrl {
            Some(c) => {
                let c = self.tape.scale(c, T::of(w_c));
                self.tape.add(f, c)
            }
            None => Ok(f),
        }
    }

    /// ε prediction `[B, C, S, S]`.
    pub fn forward(&mut self, inp: &NetInput) -> Result<Var> {
        let cfg = *self.cfg;
        let zs = self.tape.shape(inp.z).to_vec();
        let want = [zs[0], cfg.input_channels(), cfg.image_size, cfg.image_size];
        if zs.len() != 4 || zs[..] != want[..] || inp.t.len() != zs[0] {
            return Err(shape_err("denoise", &want, &zs));
        }
        let ctrl = match inp.cond {
            Some(c) => Some(self.control(inp.z, inp.t, inp.tokens, c)?),
            None => None,
        };
        let temb = self.temb("base.", inp.t)?;
        let sk = self.encoder("base.", inp.z, None, temb, inp.tokens)?;
        let m = self.couple(sk.m, ctrl.map(|c| c[0]), inp.w_c)?;

        let u = self.tape.upsample2x(m);
        let u = self.tape.concat(&[u, sk.s1], 1)?;
        let u = self.res("base.up1.res", u, temb)?;
        let u = self.attn("base.up1.attn", u, None)?;
        let u = self.attn("base.up1.xattn", u, Some(inp.tokens))?;
        let u = self.couple(u, ctrl.map(|c| c[1]), inp.w_c)?;

        let u = self.tape.upsample2x(u);
        let u = self.tape.concat(&[u, sk.s0], 1)?;
        let u = self.res("base.up0.res", u, temb)?;
        let u = self.attn("base.up0.xattn", u, Some(inp.tokens))?;
        let u = self.couple(u, ctrl.map(|c| c[2]), inp.w_c)?;

        let u = self.norm("base.lift.norm", u)?;
        let u = self.tape.silu(u);
        let u = self.conv("base.lift.conv", u, 1)?;
        let u = self.tape.depth_to_space(u)?;
        let u = self.couple(u, ctrl.map(|c| c[3]), inp.w_c)?;
        let u = self.tape.concat(&[u, sk.sf], 1)?;
        let u = self.res("base.full.res", u, temb)?;

        let o = self.norm("base.out.norm", u)?;
        let o = self.tape.silu(o);
        let f = self.conv("base.out.conv", o, 1)?;
        self.precondition(inp.z, inp.t, f)
    }

    /// `ε̂ = c_skip(t)·z_t + c_out(t)·F`. The gains make the regression
    /// target of `F` unit-variance at every `t`, so `F` is close to an `x₀`
    /// estimate at high noise and to `ε` at low noise.
    fn precondition(&mut self, z: Var, t: &[usize], f: Var) -> Result<Var> {
        let sched = NoiseSchedule::default_training();
        let gains: Vec<(f64, f64)> = t.iter().map(|&t| precondition_gains(&sched, t)).collect();
        let fs = self.tape.shape(f).to_vec();
        let zs = self.tape.shape(z).to_vec();
        let per = fs[1] * fs[2] * fs[3];
        let zv = self.tape.value(z);
        let skip = Tensor::from_fn(&fs, |i| {
            let (b, j) = (i / per, i % per);
            zv.data()[b * zs[1] * fs[2] * fs[3] + j] * T::of(gains[b].0)
        });
        let out = Tensor::from_fn(&fs, |i| T::of(gains[i / per].1));
        let skip = self.tape.input(skip);
        let out = self.tape.input(out);
        let f = self.tape.mul(f, out)?;
        self.tape.add(f, skip)
    }

    /// Appearance tokens `[B, L, d]` from reference images `[B, C, S, S]`
    /// already mapped to latent range. The final grid is flattened as is.
    pub fn appearance(&mut self, refs: Var) -> Result<Var> {
        let s = self.tape.shape(refs).to_vec();
        let want = [s[0], self.cfg.channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[..] != want[..] {
            return Err(shape_err("encode_appearance", &want, &s));
        }
        let h = self.tape.space_to_depth(refs)?;
        let h = self.conv("app.c0", h, 1)?;
        let h = self.tape.silu(h);
        let h = self.tape.space_to_depth(h)?;
        let h = self.conv("app.c1", h, 1)?;
        let h = self.tape.silu(h);
        let h = self.tape.space_to_depth(h)?;
        let h = self.conv("app.c2", h, 1)?;
        let h = self.norm("app.norm", h)?;
        self.tape.to_tokens(h)
    }
}

/// One training minibatch for the ε-prediction objective.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Scalar> {
    /// Noised network input `[B, C + extra, S, S]`.
    pub x_t: Tensor<T>,
    pub t: Vec<usize>,
    /// Regression target `[B, C, S, S]`.
    pub eps: Tensor<T>,
    /// Reference images in latent range `[B, C, S, S]`.
    pub refs: Tensor<T>,
    /// Condition maps `[B, C_p, S, S]` (already blanked where dropped).
    pub conds: Tensor<T>,
    /// Samples whose appearance condition is replaced by the null tokens.
    pub drop: Vec<bool>,
    pub w_c: f64,
}

/// `mean ‖ε − ε̂‖²` for a batch, with gradients flowing into every
/// parameter used.
pub fn batch_loss<'p, T: Scalar>(tape: &mut Tape<'p, T>, pv: &ParamVars, cfg: &SgdmConfig, batch: &TrainBatch<T>) -> Result<Var> {
    let mut net = Net {
        tape,
        pv,
        cfg,
        mode: AttentionMode::PerFrame,
    };
    let refs = net.tape.input(batch.refs.clone());
    let tokens = net.appearance(refs)?;
    let tokens = if batch.drop.iter().any(|&d| d) {
        let null = net.p("null_tokens")?;
        net.tape.select_rows(tokens, null, &batch.drop)?
    } else {
        tokens
    };
    let z = net.tape.input(batch.x_t.clone());
    let cond = net.tape.input(batch.conds.clone());
    let eps_hat = net.forward(&NetInput {
        z,
        t: &batch.t,
        tokens,
        cond: Some(cond),
        w_c: batch.w_c,
        mode: AttentionMode::PerFrame,
    })?;
    let target = net.tape.input(batch.eps.clone());
    net.tape.mse(eps_hat, target)
}
