//! ADAM updates, cosine-annealed learning rate, and the two-phase
//! (outer, then inner) subsampled training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Normalizer;
use crate::error::{Error, Result};
use crate::fom::SampleRecord;
use crate::kernel::{mse_loss, Mode};
use crate::model::Model;
use crate::sampler::{gather_batch, subsample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta_min: f64,
    pub eta_max: f64,
    pub step_f: u64,
}

impl LrSchedule {
    pub fn new(eta_min: f64, eta_max: f64, step_f: u64) -> Result<Self> {
        if !(eta_min > 0.0 && eta_min <= eta_max) || !eta_max.is_finite() {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < eta_min <= eta_max, got {eta_min} / {eta_max}"
            )));
        }
        if step_f == 0 {
            return Err(Error::Config("step_f must be >= 1".into()));
        }
        Ok(Self {
            eta_min,
            eta_max,
            step_f,
        })
    }
}

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * step_c / step_f)) / 2`.
pub fn cosine_lr(step_c: u64, sched: &LrSchedule) -> Result<f64> {
    if step_c > sched.step_f {
        return Err(Error::Range(format!(
            "step {step_c} past the final step {}",
            sched.step_f
        )));
    }
    let frac = step_c as f64 / sched.step_f as f64;
    Ok(sched.eta_min
        + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub step_c: u64,
    pub adam: AdamConfig,
}

impl OptimState {
    pub fn new(lengths: &[usize], adam: AdamConfig) -> Self {
        Self {
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step_c: 0,
            adam,
        }
    }

    pub fn for_model(model: &Model, adam: AdamConfig) -> Self {
        let lengths: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        Self::new(&lengths, adam)
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimState,
    eta: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} parameter arrays, {} gradient arrays, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "array {i}: {} params, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    state.m[i].len()
                ),
            ));
        }
    }
    if !(eta > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let t = (state.step_c + 1) as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= eta * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step_c += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Lattice points drawn per backpropagation pass.
    pub n_sub: usize,
    pub outer_steps: u64,
    pub inner_steps: u64,
    pub eta_min: f64,
    pub eta_max_outer: f64,
    pub eta_max_inner: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_sub: 4096,
            outer_steps: 2000,
            inner_steps: 500,
            eta_min: 1e-16,
            eta_max_outer: 1e-4,
            eta_max_inner: 1e-5,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sub == 0 {
            return Err(Error::Config("n_sub must be >= 1".into()));
        }
        if self.outer_steps + self.inner_steps == 0 {
            return Err(Error::Config(
                "at least one training step is required".into(),
            ));
        }
        LrSchedule::new(self.eta_min, self.eta_max_outer, 1)?;
        LrSchedule::new(self.eta_min, self.eta_max_inner, 1)?;
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.outer_steps + self.inner_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Outer,
    Inner,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Outer => "outer",
            Phase::Inner => "inner",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub eta: f64,
    pub mse: f64,
}

/// Serializable position of the trainer's ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Resumable training state: model, moments, RNG and global step.
pub struct Trainer {
    pub model: Model,
    pub optim: OptimState,
    rng: ChaCha8Rng,
    step: u64,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.set_mode(Mode::Train);
        let optim = OptimState::for_model(&model, config.adam);
        Ok(Self {
            model,
            optim,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            config,
        })
    }

    pub fn resume(
        mut model: Model,
        optim: OptimState,
        rng: &RngState,
        step: u64,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let expected: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        let got: Vec<usize> = optim.m.iter().map(Vec::len).collect();
        if expected != got {
            return Err(Error::dim(
                "Trainer::resume",
                "optimizer buffers do not match the model",
            ));
        }
        model.set_mode(Mode::Train);
        Ok(Self {
            model,
            optim,
            rng: rng.restore()?,
            step,
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Phase and learning rate for a global step index.
    pub fn schedule_at(&self, step: u64) -> Result<(Phase, f64)> {
        let c = &self.config;
        if step < c.outer_steps {
            let s = LrSchedule::new(c.eta_min, c.eta_max_outer, c.outer_steps)?;
            Ok((Phase::Outer, cosine_lr(step, &s)?))
        } else {
            let s = LrSchedule::new(c.eta_min, c.eta_max_inner, c.inner_steps.max(1))?;
            Ok((Phase::Inner, cosine_lr(step - c.outer_steps, &s)?))
        }
    }

    /// Draws one training case and a fresh subsample, then applies one
    /// ADAM update. The returned loss is measured before the update.
    pub fn train_step(
        &mut self,
        samples: &[SampleRecord],
        norm: &Normalizer,
    ) -> Result<LossRecord> {
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let (phase, eta) = self.schedule_at(self.step)?;
        let sample = &samples[self.rng.gen_range(0..samples.len())];
        let idx = subsample(&sample.grid, self.config.n_sub, &mut self.rng);
        let batch = gather_batch(sample, &idx, norm)?;
        let pred = self.model.forward(&batch, &mut self.rng)?;
        let target = batch
            .target
            .as_ref()
            .expect("gathered batches carry targets");
        let (mse, d_pred) = mse_loss(&pred, target)?;
        if !mse.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: mse,
            });
        }
        let grads = self.model.backward(&d_pred)?;
        let g = grads.slices();
        adam_step(&mut self.model.param_slices_mut(), &g, &mut self.optim, eta)?;
        let rec = LossRecord {
            step: self.step,
            phase,
            eta,
            mse,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Runs until `max_steps` more updates are done or the schedule ends.
    pub fn run_for(
        &mut self,
        samples: &[SampleRecord],
        norm: &Normalizer,
        max_steps: u64,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let mut history = Vec::new();
        let stop = (self.step + max_steps).min(self.config.total_steps());
        while self.step < stop {
            let rec = self.train_step(samples, norm)?;
            on_step(&rec);
            history.push(rec);
        }
        Ok(history)
    }

    pub fn run(&mut self, samples: &[SampleRecord], norm: &Normalizer) -> Result<Vec<LossRecord>> {
        self.run_for(samples, norm, u64::MAX - self.step, |_| {})
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Outer then inner phase over `samples`; returns the trained model (in
/// eval mode) and the per-step loss history.
pub fn run_training(
    model: Model,
    samples: &[SampleRecord],
    norm: &Normalizer,
    config: &TrainConfig,
) -> Result<(Model, Vec<LossRecord>)> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let history = trainer.run(samples, norm)?;
    let mut model = trainer.into_model();
    model.set_mode(Mode::Eval);
    Ok((model, history))
}
