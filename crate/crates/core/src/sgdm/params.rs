use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::config::SgdmConfig;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Rng, Scalar, Tensor};

/// Named tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(invalid("ParamStore::insert", format!("duplicate name {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }
    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
    /// Same names and shapes in the same order.
    pub fn same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

/// All learnable weights of one denoiser: base U-shaped network (`base.*`),
/// control branch (`ctrl.*`), appearance encoder (`app.*`) and the learned
/// null appearance condition (`null_tokens`).
#[derive(Clone, Debug, PartialEq)]
pub struct SgdmParams<T: Scalar = f32> {
    pub config: SgdmConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> SgdmParams<T> {
    /// Wraps a store after checking it matches the layout `config` implies.
    pub fn from_store(config: SgdmConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let spec = layout(&config);
        if spec.len() != store.len() {
            return Err(invalid("SgdmParams", format!("expected {} tensors, found {}", spec.len(), store.len())));
        }
        for (s, (name, t)) in spec.iter().zip(store.iter()) {
            if s.name != name {
                return Err(invalid("SgdmParams", format!("expected tensor {}, found {name}", s.name)));
            }
            if s.shape != t.shape() {
                return Err(shape_err("SgdmParams", &s.shape, t.shape()));
            }
        }
        Ok(Self { config, store })
    }

    pub fn cast<U: Scalar>(&self) -> SgdmParams<U> {
        SgdmParams {
            config: self.config,
            store: self.store.cast(),
        }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Zero,
    One,
    CopyOf(String),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Builder(Vec<ParamSpec>);

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let std = 1.0 / libm::sqrt((cin * k * k) as f64);
        self.push(format!("{name}.w"), vec![cout, cin, k, k], Init::Normal(std));
        self.push(format!("{name}.b"), vec![cout], Init::Zero);
    }
    fn zero_conv(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.w"), vec![c, c, 1, 1], Init::Zero);
        self.push(format!("{name}.b"), vec![c], Init::Zero);
    }
    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], Init::One);
        self.push(format!("{name}.b"), vec![c], Init::Zero);
    }
    fn linear(&mut self, name: &str, i: usize, o: usize, bias: bool) {
        self.push(format!("{name}.w"), vec![i, o], Init::Normal(1.0 / libm::sqrt(i as f64)));
        if bias {
            self.push(format!("{name}.b"), vec![o], Init::Zero);
        }
    }
    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cout, cin, 3);
        self.linear(&format!("{name}.temb"), temb, cout, true);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1);
        }
    }
    fn attn(&mut self, name: &str, c: usize, kv_in: usize, d: usize) {
        self.norm(&format!("{name}.norm"), c);
        self.linear(&format!("{name}.q"), c, d, false);
        self.linear(&format!("{name}.k"), kv_in, d, false);
        self.linear(&format!("{name}.v"), kv_in, d, false);
        self.linear(&format!("{name}.o"), d, c, true);
    }
    fn encoder(&mut self, pre: &str, cfg: &SgdmConfig) {
        let (w0, w1, d, te) = (cfg.base_width, cfg.width, cfg.width, cfg.temb_dim);
        let wf = cfg.stem_width();
        self.conv(&format!("{pre}stem"), wf, cfg.input_channels(), 3);
        self.conv(&format!("{pre}conv_in"), w0, 4 * wf, 3);
        self.linear(&format!("{pre}temb.l1"), te, te, true);
        self.linear(&format!("{pre}temb.l2"), te, te, true);
        self.res(&format!("{pre}enc0.res"), w0, w0, te);
        self.attn(&format!("{pre}enc0.xattn"), w0, d, d);
        self.conv(&format!("{pre}down0"), w1, 4 * w0, 3);
        self.res(&format!("{pre}enc1.res"), w1, w1, te);
        self.attn(&format!("{pre}enc1.attn"), w1, w1, d);
        self.attn(&format!("{pre}enc1.xattn"), w1, d, d);
        self.conv(&format!("{pre}down1"), w1, 4 * w1, 3);
        self.res(&format!("{pre}mid.res"), w1, w1, te);
        self.attn(&format!("{pre}mid.attn"), w1, w1, d);
        self.attn(&format!("{pre}mid.xattn"), w1, d, d);
    }
}

/// Names, shapes and initializers of every tensor, in storage order.
pub(crate) fn layout(cfg: &SgdmConfig) -> Vec<ParamSpec> {
    let (w0, w1, d, te) = (cfg.base_width, cfg.width, cfg.width, cfg.temb_dim);
    let wf = cfg.stem_width();
    let mut b = Builder(Vec::new());
    b.encoder("base.", cfg);
    b.res("base.up1.res", 2 * w1, w1, te);
    b.attn("base.up1.attn", w1, w1, d);
    b.attn("base.up1.xattn", w1, d, d);
    b.res("base.up0.res", w1 + w0, w0, te);
    b.attn("base.up0.xattn", w0, d, d);
    b.norm("base.lift.norm", w0);
    b.conv("base.lift.conv", 4 * wf, w0, 3);
    b.res("base.full.res", 2 * wf, wf, te);
    b.norm("base.out.norm", wf);
    b.conv("base.out.conv", cfg.channels, wf, 3);

    let base_encoder: Vec<ParamSpec> = {
        let mut e = Builder(Vec::new());
        e.encoder("base.", cfg);
        e.0
    };
    for s in base_encoder {
        let name = s.name.replacen("base.", "ctrl.", 1);
        b.push(name, s.shape, Init::CopyOf(s.name));
    }
    b.conv("ctrl.hint.c1", cfg.hint_width, 4 * cfg.cond_channels, 3);
    b.conv("ctrl.hint.c2", w0, cfg.hint_width, 3);
    b.zero_conv("ctrl.zero_mid", w1);
    b.zero_conv("ctrl.zero1", w1);
    b.zero_conv("ctrl.zero0", w0);
    b.zero_conv("ctrl.zero_full", wf);

    b.conv("app.c0", w0, 4 * cfg.channels, 3);
    b.conv("app.c1", w1, 4 * w0, 3);
    b.conv("app.c2", d, 4 * w1, 3);
    b.norm("app.norm", d);
    b.push("null_tokens".into(), vec![cfg.tokens(), d], Init::Normal(1.0));
    b.0
}

/// Names of the zero-initialized coupling projections.
pub const COUPLING_PREFIXES: [&str; 4] = ["ctrl.zero_mid", "ctrl.zero1", "ctrl.zero0", "ctrl.zero_full"];

/// Scaled-normal initialization, zero couplings, control trunk copied from
/// the base encoder.
pub fn init_params(rng: &mut Rng, config: &SgdmConfig) -> Result<SgdmParams> {
    config.validate()?;
    let mut store: ParamStore<f32> = ParamStore::new();
    for spec in layout(config) {
        let t = match &spec.init {
            Init::Normal(std) => {
                let s = *std as f32;
                rng.normal_tensor::<f32>(&spec.shape).map(|v| v * s)
            }
            Init::Zero => Tensor::zeros(&spec.shape),
            Init::One => Tensor::full(&spec.shape, 1.0),
            Init::CopyOf(src) => store.get(src).cloned().ok_or_else(|| invalid("init_params", "copy source missing"))?,
        };
        store.insert(&spec.name, t)?;
    }
    SgdmParams::from_store(*config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn couplings_start_at_zero_and_trunk_copies_encoder() {
        let p = init_params(&mut Rng::new(1, 0), &SgdmConfig::body()).unwrap();
        for (name, t) in p.store.iter() {
            if COUPLING_PREFIXES.iter().any(|c| name.starts_with(c)) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if let Some(rest) = name.strip_prefix("ctrl.") {
                if let Some(base) = p.store.get(&format!("base.{rest}")) {
                    assert_eq!(base, t, "{name}");
                }
            }
        }
        assert!(p.store.get("ctrl.enc1.attn.q.w").is_some());
    }

    #[test]
    fn equal_seeds_give_identical_params() {
        let cfg = SgdmConfig::face();
        let a = init_params(&mut Rng::new(5, 1), &cfg).unwrap();
        let b = init_params(&mut Rng::new(5, 1), &cfg).unwrap();
        let c = init_params(&mut Rng::new(6, 1), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn attention_width_is_shared() {
        let cfg = SgdmConfig::body();
        let p = init_params(&mut Rng::new(0, 0), &cfg).unwrap();
        for (name, t) in p.store.iter() {
            if name.contains("attn.q.w") || name.contains("attn.k.w") || name.contains("attn.v.w") {
                assert_eq!(t.dim(1), cfg.width, "{name}");
            }
        }
    }

    #[test]
    fn store_rejects_wrong_layout() {
        let cfg = SgdmConfig::tiny();
        let p = init_params(&mut Rng::new(0, 0), &cfg).unwrap();
        let mut store = p.store.clone();
        *store.get_mut("base.out.conv.b").unwrap() = Tensor::zeros(&[1]);
        assert!(SgdmParams::from_store(cfg, store).is_err());
        assert!(SgdmParams::from_store(SgdmConfig::body(), p.store.clone()).is_err());
        assert!(p.store.clone().insert("null_tokens", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SgdmConfig::body();
        c.image_size = 20;
        assert!(init_params(&mut Rng::new(0, 0), &c).is_err());
        let mut c = SgdmConfig::body();
        c.base_width = 30;
        assert!(c.validate().is_err());
        assert!(SgdmConfig::face().validate().is_ok());
    }
}
