use rand::Rng as _;

use super::net::{Conditioning, DenoiserNet};
use super::selector::select_condition;
use crate::conditioning::ConditionFeatures;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::Error;
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Draws averaged per update.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch: 1,
            seed: 0,
        }
    }
}

/// One training example: a scaled roll window and its optional condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: Tensor,
    pub condition: Option<ConditionFeatures>,
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// A run that stopped early. The net holds the last parameters that
/// produced a finite loss.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub losses: Vec<f64>,
}

/// Trains `net` on `corpus`, returning the per-step loss trace.
pub fn train(
    net: &mut DenoiserNet,
    corpus: &[TrainItem],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainFailure> {
    let fail = |error, losses| Err(TrainFailure { error, losses });
    if corpus.is_empty() {
        return fail(Error::Config("training corpus is empty".into()), Vec::new());
    }
    if cfg.batch == 0 {
        return fail(Error::Config("batch must be at least 1".into()), Vec::new());
    }
    let mut rng = seeded(cfg.seed);
    let mut adam = Adam::new(net.param_count());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last_good = net.params().to_vec();
    let t0 = net.arch().t0;
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; net.param_count()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let item = &corpus[rng.random_range(0..corpus.len())];
            let t = rng.random_range(1..=sched.n());
            let eps = normal_tensor(&mut rng, item.x0.shape());
            let x_t = match q_sample(&item.x0, t, &eps, sched) {
                Ok(x) => x,
                Err(e) => return fail(e, losses),
            };
            let cond = item.condition.as_ref().map(|c| {
                let (f, m) = select_condition(c, t, t0);
                Conditioning::new(f, m)
            });
            let (l, g) = match net.loss_and_grad(&x_t, t, cond, &eps) {
                Ok(r) => r,
                Err(e) => return fail(e, losses),
            };
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            net.params_mut().copy_from_slice(&last_good);
            losses.push(loss);
            return fail(Error::Divergence { step, loss }, losses);
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        losses.push(loss);
        on_step(step, loss);
        last_good.copy_from_slice(net.params());
        adam.update(net.params_mut(), &grad, cfg);
    }
    Ok(losses)
}
