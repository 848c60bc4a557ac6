//! Gaussian diffusion over scaled piano rolls: schedules, the closed-form
//! forward process, the training objective and ancestral sampling.

use std::fmt;
use std::str::FromStr;

use crate::codec::{PianoRoll, CHANNELS, PITCHES};
use crate::conditioning::ConditionFeatures;
use crate::denoiser::{select_condition, ArchDescriptor, Conditioning, DenoiserNet};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Constant,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Constant => "constant",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "constant" => Ok(ScheduleKind::Constant),
            _ => Err(Error::Unknown {
                kind: "schedule",
                name: s.to_string(),
            }),
        }
    }
}

/// Variances `beta_1..beta_N` with their derived products. Timesteps are
/// 1-based throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).expect("valid default")
    }
}

pub fn make_schedule(kind: ScheduleKind, n: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let end = match kind {
        ScheduleKind::Linear => beta_end,
        ScheduleKind::Constant => beta_start,
    };
    if !(beta_start > 0.0 && beta_start <= end && end < 1.0) {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..n)
        .map(|i| match kind {
            ScheduleKind::Constant => beta_start,
            ScheduleKind::Linear if n == 1 => beta_start,
            ScheduleKind::Linear => beta_start + i as f64 / (n - 1) as f64 * (beta_end - beta_start),
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(n);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        kind,
        beta_start,
        beta_end: end,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.n() {
            return Err(Error::TimestepOutOfRange { t, n: self.n() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.check(t).expect("timestep in range")]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.check(t).expect("timestep in range")]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Maps a roll's `{0, 1}` cells to `{-1, +1}`, shaped `2 x steps x 128`.
pub fn scale_roll(roll: &PianoRoll) -> Tensor {
    let data = roll.data().iter().map(|&v| if v != 0 { 1.0 } else { -1.0 }).collect();
    Tensor::from_vec(&[CHANNELS, roll.steps(), PITCHES], data).expect("roll shape")
}

/// Thresholds at zero and repairs the result into a valid roll; also returns
/// the repair count.
pub fn unscale(x: &Tensor) -> Result<(PianoRoll, usize)> {
    match *x.shape() {
        [CHANNELS, steps, PITCHES] => {
            let cells = x.data().iter().map(|&v| u8::from(v > 0.0)).collect();
            let raw = PianoRoll::from_raw(steps, cells)?;
            Ok(raw.repaired())
        }
        _ => Err(Error::Shape(format!("expected 2 x steps x 128, got {:?}", x.shape()))),
    }
}

impl ArchDescriptor {
    /// The network's view of a roll: the first `steps` steps of the pitch
    /// band, scaled to `{-1, +1}`.
    pub fn window(&self, roll: &PianoRoll) -> Result<Tensor> {
        if roll.steps() < self.steps {
            return Err(Error::Shape(format!("roll has {} steps, window needs {}", roll.steps(), self.steps)));
        }
        let mut data = Vec::with_capacity(CHANNELS * self.steps * self.pitches);
        for c in 0..CHANNELS {
            for s in 0..self.steps {
                for p in self.pitch_lo..self.pitch_lo + self.pitches {
                    data.push(if roll.get(c, s, p) { 1.0 } else { -1.0 });
                }
            }
        }
        Tensor::from_vec(&self.input_shape(), data)
    }

    /// Places a window tensor back into a full-width tensor, filling the rest
    /// with `-1`.
    pub fn embed(&self, window: &Tensor) -> Result<Tensor> {
        if window.shape() != self.input_shape() {
            return Err(Error::Shape(format!("window {:?}, expected {:?}", window.shape(), self.input_shape())));
        }
        let mut full = Tensor::full(&[CHANNELS, self.steps, PITCHES], -1.0);
        let w = window.data();
        for c in 0..CHANNELS {
            for s in 0..self.steps {
                let src = (c * self.steps + s) * self.pitches;
                let dst = (c * self.steps + s) * PITCHES + self.pitch_lo;
                full.data_mut()[dst..dst + self.pitches].copy_from_slice(&w[src..src + self.pitches]);
            }
        }
        Ok(full)
    }

    /// True if every note of `roll` lies inside the window.
    pub fn covers(&self, roll: &PianoRoll) -> bool {
        (0..roll.steps()).all(|s| {
            (0..PITCHES).all(|p| {
                let inside = s < self.steps && (self.pitch_lo..self.pitch_lo + self.pitches).contains(&p);
                inside || !(roll.get(0, s, p) || roll.get(1, s, p))
            })
        })
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<Conditioning<'_>>) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserNet {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: Option<Conditioning<'_>>) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}

fn mean_square(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `mean((eps - net(q_sample(x0, t, eps), t, cond))^2)`.
pub fn training_loss<N: NoisePredictor + ?Sized>(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: Option<Conditioning<'_>>,
    net: &N,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let pred = net.predict_noise(&x_t, t, cond)?;
    mean_square(&pred, eps)
}

/// Reverse-process mean given a noise prediction.
pub fn posterior_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("x_t {:?} vs prediction {:?}", x_t.shape(), eps_hat.shape())));
    }
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| inv * (x - coef * e)).collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// One ancestral step `x_t -> x_{t-1}` with variance `beta_t`. The noise is
/// ignored at `t = 1`.
pub fn p_sample_step<N: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    cond: Option<Conditioning<'_>>,
    net: &N,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let eps_hat = net.predict_noise(x_t, t, cond)?;
    let mut mean = posterior_mean(x_t, t, &eps_hat, sched)?;
    if t > 1 {
        if noise.shape() != x_t.shape() {
            return Err(Error::Shape(format!("noise {:?} vs x_t {:?}", noise.shape(), x_t.shape())));
        }
        let sigma = sched.beta(t).sqrt();
        for (m, z) in mean.data_mut().iter_mut().zip(noise.data()) {
            *m += sigma * z;
        }
    }
    Ok(mean)
}

/// Runs the reverse chain from `N` to 0 on a tensor of `shape`, choosing the
/// condition stream per step with key timestep `t0`.
pub fn sample_tensor<N: NoisePredictor + ?Sized>(
    net: &N,
    shape: &[usize],
    cond: Option<&ConditionFeatures>,
    t0: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = seeded(seed);
    let mut x = normal_tensor(&mut rng, shape);
    let zeros = Tensor::zeros(shape);
    for t in (1..=sched.n()).rev() {
        let c = cond.map(|c| {
            let (f, m) = select_condition(c, t, t0);
            Conditioning::new(f, m)
        });
        let noise = if t > 1 { normal_tensor(&mut rng, shape) } else { zeros.clone() };
        x = p_sample_step(&x, t, c, net, &noise, sched)?;
    }
    Ok(x)
}

/// Samples a roll from `net`. The result spans the net's window; cells
/// outside it stay silent.
pub fn generate(
    net: &DenoiserNet,
    cond: Option<&ConditionFeatures>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<PianoRoll> {
    let arch = net.arch();
    let x0 = sample_tensor(net, &arch.input_shape(), cond, arch.t0, sched, seed)?;
    Ok(unscale(&arch.embed(&x0)?)?.0)
}
