use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use super::mask::SegmentMask;
use super::selector::Modality;
use crate::autograd::{Graph, Var};
use crate::conditioning::resample_sequence;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Shape of a denoiser. The network sees a `2 x steps x pitches` window of
/// the scaled roll starting at MIDI pitch `pitch_lo`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub steps: usize,
    pub pitch_lo: usize,
    pub pitches: usize,
    /// Feature channels per level; the level count is its length.
    pub channels: Vec<usize>,
    /// Width of the timestep embedding.
    pub d_model: usize,
    pub d_cond: usize,
    /// Key width; values use the same width.
    pub d_key: usize,
    pub d_fv: usize,
    pub d_fl: usize,
    /// Attention block size in condition frames.
    pub k: usize,
    /// Key timestep of the feature selector.
    pub t0: usize,
    /// Unconditional nets carry no attention or projection parameters.
    pub conditional: bool,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            steps: 128,
            pitch_lo: 0,
            pitches: 128,
            channels: vec![8, 16],
            d_model: 32,
            d_cond: 32,
            d_key: 16,
            d_fv: 512,
            d_fl: 768,
            k: 8,
            t0: 200,
            conditional: true,
        }
    }
}

impl ArchDescriptor {
    /// A 2x16x16 instance small enough for exhaustive gradient checks.
    pub fn toy() -> Self {
        Self {
            steps: 16,
            pitch_lo: 56,
            pitches: 16,
            channels: vec![4, 8],
            d_model: 8,
            d_cond: 8,
            d_key: 8,
            d_fv: 6,
            d_fl: 10,
            k: 8,
            t0: 200,
            conditional: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return fail(format!("channels must be non-empty and positive, got {:?}", self.channels));
        }
        let unit = 1usize << (self.levels() - 1);
        if self.steps == 0 || !self.steps.is_multiple_of(unit) || self.pitches == 0 || !self.pitches.is_multiple_of(unit) {
            return fail(format!(
                "steps {} and pitches {} must be positive multiples of {unit}",
                self.steps, self.pitches
            ));
        }
        if self.steps > crate::codec::SEGMENT_STEPS {
            return fail(format!("steps {} exceed one segment", self.steps));
        }
        if self.pitch_lo + self.pitches > crate::codec::PITCHES {
            return fail(format!("pitch window {}+{} exceeds 128", self.pitch_lo, self.pitches));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_cond", self.d_cond),
            ("d_key", self.d_key),
            ("d_fv", self.d_fv),
            ("d_fl", self.d_fl),
            ("k", self.k),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [2, self.steps, self.pitches]
    }

    pub fn feature_width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Dynamic => self.d_fv,
            Modality::Semantic => self.d_fl,
        }
    }

    /// Sequence length seen by attention at `level`.
    pub fn level_len(&self, level: usize) -> usize {
        self.steps >> level
    }

    /// Block size rescaled from `frames` condition frames to `len` positions.
    pub fn level_block(&self, len: usize, frames: usize) -> usize {
        ((self.k * len) as f64 / frames as f64).round().max(1.0) as usize
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "levels={}", self.levels());
        let _ = writeln!(s, "channels={}", channels.join(","));
        for (k, v) in [
            ("steps", self.steps),
            ("pitch_lo", self.pitch_lo),
            ("pitches", self.pitches),
            ("d_model", self.d_model),
            ("d_cond", self.d_cond),
            ("d_key", self.d_key),
            ("d_fv", self.d_fv),
            ("d_fl", self.d_fl),
            ("k", self.k),
            ("t0", self.t0),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "conditional={}", self.conditional);
        s
    }

    /// Reads the fields written by [`to_text`](Self::to_text) from a
    /// key/value map; missing keys keep their default.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut a = Self::default();
        let num = |key: &str, v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        for (key, v) in pairs {
            match key.as_str() {
                "channels" => {
                    a.channels = v
                        .split(',')
                        .map(|c| num(key, c))
                        .collect::<Result<Vec<_>>>()?;
                }
                "steps" => a.steps = num(key, v)?,
                "pitch_lo" => a.pitch_lo = num(key, v)?,
                "pitches" => a.pitches = num(key, v)?,
                "d_model" => a.d_model = num(key, v)?,
                "d_cond" => a.d_cond = num(key, v)?,
                "d_key" => a.d_key = num(key, v)?,
                "d_fv" => a.d_fv = num(key, v)?,
                "d_fl" => a.d_fl = num(key, v)?,
                "k" => a.k = num(key, v)?,
                "t0" => a.t0 = num(key, v)?,
                "conditional" => {
                    a.conditional = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("conditional: expected true or false, got {v:?}")))?
                }
                _ => {}
            }
        }
        if let Some(levels) = pairs.get("levels") {
            if num("levels", levels)? != a.levels() {
                return Err(Error::Config(format!(
                    "levels={levels} disagrees with {} channel widths",
                    a.levels()
                )));
            }
        }
        a.validate()?;
        Ok(a)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_pairs(&pairs)
    }
}

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Fan-in for `N(0, 1/fan_in)` initialization; zero means zero-init.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout(a: &ArchDescriptor) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, shape: Vec<usize>, fan_in: usize| {
        let len: usize = shape.iter().product();
        specs.push(ParamSpec {
            name,
            shape,
            offset,
            fan_in,
        });
        offset += len;
    };
    let (dm, dc, dk) = (a.d_model, a.d_cond, a.d_key);
    add("time.w".into(), vec![dm, dm], dm);
    add("time.b".into(), vec![dm], 0);
    let c0 = a.channels[0];
    add("in.w".into(), vec![c0, 2, 3, 3], 2 * 9);
    add("in.b".into(), vec![c0], 0);
    add("pos.emb".into(), vec![c0, a.steps, a.pitches], 0);
    if a.conditional {
        add("cond.fv.w".into(), vec![a.d_fv, dc], a.d_fv);
        add("cond.fv.b".into(), vec![dc], 0);
        add("cond.fl.w".into(), vec![a.d_fl, dc], a.d_fl);
        add("cond.fl.b".into(), vec![dc], 0);
    }
    let block = |add: &mut dyn FnMut(String, Vec<usize>, usize), p: &str, c: usize| {
        add(format!("{p}.conv1.w"), vec![c, c, 3, 3], c * 9);
        add(format!("{p}.conv1.b"), vec![c], 0);
        add(format!("{p}.film.w"), vec![dm, 2 * c], dm);
        add(format!("{p}.film.b"), vec![2 * c], 0);
        add(format!("{p}.conv2.w"), vec![c, c, 3, 3], c * 9);
        add(format!("{p}.conv2.b"), vec![c], 0);
        if a.conditional {
            add(format!("{p}.attn.wq"), vec![c, dk], c);
            add(format!("{p}.attn.wk"), vec![dc, dk], dc);
            add(format!("{p}.attn.wv"), vec![dc, dk], dc);
            add(format!("{p}.attn.wo"), vec![dk, c], dk);
        }
    };
    for (l, &c) in a.channels.iter().enumerate() {
        if l > 0 {
            let prev = a.channels[l - 1];
            add(format!("down{l}.w"), vec![c, prev, 3, 3], prev * 9);
            add(format!("down{l}.b"), vec![c], 0);
        }
        block(&mut add, &format!("enc{l}"), c);
    }
    for l in (0..a.levels()).rev() {
        let c = a.channels[l];
        if l + 1 < a.levels() {
            let next = a.channels[l + 1];
            add(format!("up{l}.w"), vec![c, next, 3, 3], next * 9);
            add(format!("up{l}.b"), vec![c], 0);
        }
        block(&mut add, &format!("dec{l}"), c);
    }
    add("out.w".into(), vec![2, c0, 3, 3], 0);
    add("out.b".into(), vec![2], 0);
    specs
}

/// Sinusoidal embedding of a diffusion timestep: `sin` of each frequency in
/// the first half, `cos` in the second.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[i] = arg.sin();
        v[half + i] = arg.cos();
    }
    Tensor::from_vec(&[dim], v).expect("shape")
}

/// Fixed `len x dim` positional code with interleaved `sin`/`cos` columns.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut v = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            v.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(&[len, dim], v).expect("shape")
}

/// The condition stream chosen for one denoising step, `frames x width`.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub features: &'a Tensor,
    pub modality: Modality,
}

impl<'a> Conditioning<'a> {
    pub fn new(features: &'a Tensor, modality: Modality) -> Self {
        Self { features, modality }
    }
}

/// Noise-prediction network: a small convolutional encoder-decoder with
/// timestep modulation and masked cross-attention to the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    arch: ArchDescriptor,
    specs: Vec<ParamSpec>,
    index: BTreeMap<String, usize>,
    params: Vec<f64>,
}

impl DenoiserNet {
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let specs = layout(&arch);
        let total = specs.iter().map(ParamSpec::len).sum();
        let mut params = vec![0.0; total];
        let mut rng = seeded(seed);
        for s in &specs {
            if s.fan_in > 0 {
                let dist = Normal::new(0.0, 1.0 / (s.fan_in as f64).sqrt()).expect("finite std");
                for p in &mut params[s.offset..s.offset + s.len()] {
                    *p = dist.sample(&mut rng);
                }
            }
        }
        Ok(Self::assemble(arch, specs, params))
    }

    /// Rebuilds a net around an existing parameter vector.
    pub fn from_params(arch: ArchDescriptor, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let specs = layout(&arch);
        let total: usize = specs.iter().map(ParamSpec::len).sum();
        if params.len() != total {
            return Err(Error::Shape(format!(
                "descriptor implies {total} parameters, got {}",
                params.len()
            )));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(Self::assemble(arch, specs, params))
    }

    fn assemble(arch: ArchDescriptor, specs: Vec<ParamSpec>, params: Vec<f64>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self {
            arch,
            specs,
            index,
            params,
        }
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    /// A copy of the named parameter tensor.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let s = self.spec(name)?;
        Some(Tensor::from_vec(&s.shape, self.params[s.offset..s.offset + s.len()].to_vec()).expect("shape"))
    }

    fn var(&self, g: &mut Graph, name: &str) -> Var {
        let s = self.spec(name).unwrap_or_else(|| panic!("no parameter {name}"));
        g.param(&self.params[s.offset..s.offset + s.len()], s.offset, &s.shape)
    }

    fn check_inputs(&self, x_t: &Tensor, cond: Option<Conditioning<'_>>) -> Result<()> {
        let want = self.arch.input_shape();
        if x_t.shape() != want {
            return Err(Error::Shape(format!("denoiser input {:?}, expected {want:?}", x_t.shape())));
        }
        if !x_t.all_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        if let (Some(c), true) = (cond, self.arch.conditional) {
            let (frames, width) = c.features.dims2()?;
            let want = self.arch.feature_width(c.modality);
            if frames == 0 || width != want {
                return Err(Error::Shape(format!(
                    "{} features {frames}x{width}, expected width {want}",
                    c.modality.as_str()
                )));
            }
            if !c.features.all_finite() {
                return Err(Error::NonFinite("condition features".into()));
            }
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph, x_t: &Tensor, t: usize, cond: Option<Conditioning<'_>>) -> Result<Var> {
        self.check_inputs(x_t, cond)?;
        let a = &self.arch;
        let cond = cond.filter(|_| a.conditional);

        let temb = g.input(&timestep_embedding(t, a.d_model));
        let (tw, tb) = (self.var(g, "time.w"), self.var(g, "time.b"));
        let e = g.linear(temb, tw, Some(tb));
        let e = g.silu(e);

        let x = g.input(x_t);
        let (w, b) = (self.var(g, "in.w"), self.var(g, "in.b"));
        let h = g.conv3x3(x, w, b, 1);
        let emb = self.var(g, "pos.emb");
        let mut h = g.add(h, emb);

        let mut level_cond: Vec<Option<Var>> = vec![None; a.levels()];
        let mut skips = Vec::with_capacity(a.levels());
        for l in 0..a.levels() {
            if l > 0 {
                let (w, b) = (self.var(g, &format!("down{l}.w")), self.var(g, &format!("down{l}.b")));
                h = g.conv3x3(h, w, b, 2);
            }
            h = self.res_block(g, h, e, &format!("enc{l}"));
            if let Some(c) = cond {
                h = self.attend(g, h, l, c, &mut level_cond, &format!("enc{l}"));
            }
            skips.push(h);
        }
        for l in (0..a.levels()).rev() {
            if l + 1 < a.levels() {
                h = g.upsample2(h);
                let (w, b) = (self.var(g, &format!("up{l}.w")), self.var(g, &format!("up{l}.b")));
                h = g.conv3x3(h, w, b, 1);
                h = g.add(h, skips[l]);
            }
            h = self.res_block(g, h, e, &format!("dec{l}"));
            if let Some(c) = cond {
                h = self.attend(g, h, l, c, &mut level_cond, &format!("dec{l}"));
            }
        }
        let h = g.silu(h);
        let (w, b) = (self.var(g, "out.w"), self.var(g, "out.b"));
        Ok(g.conv3x3(h, w, b, 1))
    }

    fn res_block(&self, g: &mut Graph, h: Var, e: Var, p: &str) -> Var {
        let r = g.silu(h);
        let (w, b) = (self.var(g, &format!("{p}.conv1.w")), self.var(g, &format!("{p}.conv1.b")));
        let r = g.conv3x3(r, w, b, 1);
        let (fw, fb) = (self.var(g, &format!("{p}.film.w")), self.var(g, &format!("{p}.film.b")));
        let m = g.linear(e, fw, Some(fb));
        let r = g.film(r, m);
        let r = g.silu(r);
        let (w, b) = (self.var(g, &format!("{p}.conv2.w")), self.var(g, &format!("{p}.conv2.b")));
        let r = g.conv3x3(r, w, b, 1);
        g.add(h, r)
    }

    /// Projected, position-coded condition at one level's sequence length.
    fn level_condition(&self, g: &mut Graph, level: usize, c: Conditioning<'_>) -> Var {
        let a = &self.arch;
        let len = a.level_len(level);
        let raw = g.input(&resample_sequence(c.features, len));
        let tag = match c.modality {
            Modality::Dynamic => "fv",
            Modality::Semantic => "fl",
        };
        let (w, b) = (self.var(g, &format!("cond.{tag}.w")), self.var(g, &format!("cond.{tag}.b")));
        let proj = g.linear(raw, w, Some(b));
        let pe = g.input(&positional_encoding(len, a.d_cond));
        g.add(proj, pe)
    }

    fn attend(
        &self,
        g: &mut Graph,
        h: Var,
        level: usize,
        c: Conditioning<'_>,
        cache: &mut [Option<Var>],
        p: &str,
    ) -> Var {
        let a = &self.arch;
        let fc = match cache[level] {
            Some(v) => v,
            None => {
                let v = self.level_condition(g, level, c);
                cache[level] = Some(v);
                v
            }
        };
        let len = a.level_len(level);
        let frames = c.features.shape()[0];
        let mask = SegmentMask::new(len, a.level_block(len, frames));
        let wk = self.var(g, &format!("{p}.attn.wk"));
        let wv = self.var(g, &format!("{p}.attn.wv"));
        let k = g.linear(fc, wk, None);
        let v = g.linear(fc, wv, None);
        let wq = self.var(g, &format!("{p}.attn.wq"));
        let wo = self.var(g, &format!("{p}.attn.wo"));
        let pe = positional_encoding(len, a.channels[level]).into_data();
        g.attention(h, k, v, wq, wo, pe, mask)
    }

    /// Predicted noise for `x_t` at timestep `t`. Without a condition (or for
    /// an unconditional net) the attention blocks are skipped.
    pub fn forward(&self, x_t: &Tensor, t: usize, cond: Option<Conditioning<'_>>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.build(&mut g, x_t, t, cond)?;
        Ok(g.tensor(out))
    }

    /// Mean-square error against `target` and its gradient with respect to
    /// every parameter.
    pub fn loss_and_grad(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Option<Conditioning<'_>>,
        target: &Tensor,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.build(&mut g, x_t, t, cond)?;
        if g.shape(out) != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                g.shape(out),
                target.shape()
            )));
        }
        let loss = g.mean_square(out, target);
        let mut grad = vec![0.0; self.params.len()];
        g.backward(loss, &mut grad);
        Ok((g.value(loss)[0], grad))
    }
}
