//! AdamW training loop, checkpointing and the Euler sampler.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarr::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, HifiError, Result};
use crate::hifidit::{
    round_f32, save_checkpoint, unpatchify, Checkpoint, Dit, ModelConfig, ModelInput, ModelState,
};
use crate::image::{write_atomic, Image};
use crate::objective::{loss_overall, BatchItem, Conditioning, Example, LossConfig, LossReport};
use crate::spectral::{HighPassConfig, Normalize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub lambda_da: f64,
    pub radius_fraction: f64,
    pub use_sea: bool,
    pub use_dal: bool,
    /// Train on generator-produced records; when false they are dropped.
    pub use_synth_data: bool,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 300,
            batch: 8,
            seed: 0,
            lambda_da: 1.0,
            radius_fraction: 0.1,
            use_sea: true,
            use_dal: true,
            use_synth_data: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || self.batch == 0 {
            return Err(HifiError::Config(
                "need lr > 0, steps >= 1 and batch >= 1".into(),
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(HifiError::Config(
                "betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.lambda_da < 0.0 {
            return Err(HifiError::Config(
                "weight_decay and lambda_da must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.radius_fraction) {
            return Err(HifiError::Config(
                "radius_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_da: if self.use_dal { self.lambda_da } else { 0.0 },
            hf: self.detail_filter(),
        }
    }

    /// Unnormalized filter used by the detail loss.
    pub fn detail_filter(&self) -> HighPassConfig {
        HighPassConfig {
            radius_fraction: self.radius_fraction,
            normalize: Normalize::None,
        }
    }

    /// Normalized filter used for the high-frequency condition.
    pub fn condition_filter(&self) -> HighPassConfig {
        HighPassConfig {
            radius_fraction: self.radius_fraction,
            normalize: Normalize::MinMax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            betas: c.betas,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Applied updates, used for bias correction.
    pub t: u64,
    /// Steps dropped because a gradient was not finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected
/// moments. Returns `false` (and counts a skip) when any gradient is not
/// finite, leaving everything else untouched.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return contract("parameter, gradient and moment lists differ in length");
    }
    if params
        .iter()
        .zip(grads)
        .any(|(p, g)| p.shape() != g.shape())
    {
        return contract("gradient shape does not match its parameter");
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m: Vec<f64> = state.m[i]
            .data()
            .iter()
            .zip(g)
            .map(|(m, g)| b1 * m + (1.0 - b1) * g)
            .collect();
        let v: Vec<f64> = state.v[i]
            .data()
            .iter()
            .zip(g)
            .map(|(v, g)| b2 * v + (1.0 - b2) * g * g)
            .collect();
        let p: Vec<f64> = params[i]
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(&p, (&m, &v))| {
                let decayed = p - cfg.lr * cfg.weight_decay * p;
                decayed - cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps)
            })
            .collect();
        let shape = params[i].shape().to_vec();
        params[i] = Tensor::new(&shape, p)?;
        state.m[i] = Tensor::new(&shape, m)?;
        state.v[i] = Tensor::new(&shape, v)?;
    }
    Ok(true)
}

fn round_all(ts: &mut [Tensor]) {
    for t in ts.iter_mut() {
        *t = t.map(round_f32);
    }
}

/// A training example and whether it came from the procedural generator.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub example: Example,
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub step: u64,
    pub l_mse: f64,
    pub l_da: f64,
    pub l_overall: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// False when the update was skipped for a non-finite gradient.
    pub applied: bool,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub state: ModelState,
    pub adam: AdamState,
    pub step: u64,
    data: Vec<&'d Example>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: &ModelConfig, config: &TrainConfig, data: &'d [TrainRecord]) -> Result<Self> {
        config.validate()?;
        let model = ModelConfig {
            use_sea: config.use_sea,
            ..model.clone()
        };
        let state = ModelState::init(&model, config.seed)?;
        let adam = AdamState::new(&state.params);
        Self::assemble(config, state, adam, 0, data)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        config: &TrainConfig,
        data: &'d [TrainRecord],
    ) -> Result<Self> {
        config.validate()?;
        if ckpt.state.config.use_sea != config.use_sea {
            return contract("checkpoint and training config disagree on use_sea");
        }
        let layout = &ckpt.state.layout;
        let mut adam = AdamState::new(&ckpt.state.params);
        for i in 0..layout.len() {
            let name = layout.name(i);
            if let (Some(m), Some(v)) = (
                ckpt.extra(&format!("adam.m.{name}")),
                ckpt.extra(&format!("adam.v.{name}")),
            ) {
                adam.m[i] = m.clone();
                adam.v[i] = v.clone();
            } else {
                return contract(format!("checkpoint lacks optimizer moments for {name}"));
            }
        }
        adam.t = ckpt
            .meta
            .get("adam_t")
            .and_then(|v| v.as_u64())
            .unwrap_or(ckpt.step);
        adam.skipped = ckpt
            .meta
            .get("skipped")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        Self::assemble(config, ckpt.state.clone(), adam, ckpt.step, data)
    }

    fn assemble(
        config: &TrainConfig,
        state: ModelState,
        adam: AdamState,
        step: u64,
        data: &'d [TrainRecord],
    ) -> Result<Self> {
        let data: Vec<&Example> = data
            .iter()
            .filter(|r| config.use_synth_data || !r.synthetic)
            .map(|r| &r.example)
            .collect();
        if data.is_empty() {
            return contract("training set is empty");
        }
        Ok(Self {
            config: config.clone(),
            state,
            adam,
            step,
            data,
        })
    }

    /// Dataset indices for the batch of `step`: consecutive slices of a
    /// fresh permutation per epoch.
    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch as u64;
        let mut perm_epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (step * b..(step + 1) * b)
            .map(|k| {
                let epoch = k / n;
                if epoch != perm_epoch {
                    perm = (0..n as usize).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0000_0000);
                    rng.set_stream(epoch);
                    perm.shuffle(&mut rng);
                    perm_epoch = epoch;
                }
                perm[(k % n) as usize]
            })
            .collect()
    }

    /// Timesteps and noise for `step`.
    fn draws(&self, step: u64) -> Result<Vec<(f64, Tensor)>> {
        let mut rng = step_rng(self.config.seed, step);
        let shape = self.data[0].target.shape().to_vec();
        (0..self.config.batch)
            .map(|_| {
                let t: f64 = rng.gen();
                Ok((t, normal_tensor(&mut rng, &shape)?))
            })
            .collect()
    }

    /// Batch-mean loss and gradients without touching the parameters.
    pub fn loss_and_grads(&self) -> Result<(LossReport, Vec<Tensor>)> {
        let idx = self.batch_indices(self.step);
        let draws = self.draws(self.step)?;
        let loss_cfg = self.config.loss_config();
        let state = &self.state;
        let per_sample: Vec<Result<(LossReport, Vec<Tensor>)>> = idx
            .par_iter()
            .zip(draws.par_iter())
            .map(|(&i, (t, eps))| {
                let tape = Tape::new();
                let dit = Dit::trainable(state, &tape);
                let item = BatchItem {
                    example: self.data[i],
                    t: *t,
                    eps,
                };
                let (loss, report) = loss_overall(&tape, &dit, &[item], &loss_cfg)?;
                let grads = tape.backward(loss)?;
                Ok((report, dit.params.iter().map(|p| grads.wrt(*p)).collect()))
            })
            .collect();
        // fixed-order reduction
        let n = idx.len() as f64;
        let mut total: Option<Vec<Vec<f64>>> = None;
        let mut report = LossReport {
            l_mse: 0.0,
            l_da: 0.0,
            l_overall: 0.0,
            lambda_da: loss_cfg.lambda_da,
            empty_masks: 0,
        };
        for r in per_sample {
            let (rep, grads) = r?;
            report.l_mse += rep.l_mse / n;
            report.l_da += rep.l_da / n;
            report.l_overall += rep.l_overall / n;
            report.empty_masks += rep.empty_masks;
            match total.as_mut() {
                None => {
                    total = Some(
                        grads
                            .into_iter()
                            .map(|g| g.data().iter().map(|v| v / n).collect())
                            .collect(),
                    )
                }
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.iter_mut().zip(g.data()) {
                            *x += y / n;
                        }
                    }
                }
            }
        }
        let grads = total
            .unwrap_or_default()
            .into_iter()
            .zip(&state.params)
            .map(|(g, p)| Tensor::new(p.shape(), g))
            .collect::<ndarr::Result<Vec<_>>>()?;
        Ok((report, grads))
    }

    /// Runs one optimization step.
    pub fn step_once(&mut self) -> Result<RunLogRecord> {
        let start = Instant::now();
        let (report, grads) = self.loss_and_grads()?;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let applied = adamw_step(
            &mut self.state.params,
            &grads,
            &AdamConfig::from(&self.config),
            &mut self.adam,
        )?;
        round_all(&mut self.state.params);
        round_all(&mut self.adam.m);
        round_all(&mut self.adam.v);
        self.step += 1;
        Ok(RunLogRecord {
            step: self.step,
            l_mse: report.l_mse,
            l_da: report.l_da,
            l_overall: report.l_overall,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            applied,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.state.clone());
        ck.step = self.step;
        ck.meta = serde_json::json!({
            "train": self.config,
            "adam_t": self.adam.t,
            "skipped": self.adam.skipped,
        });
        let layout = &self.state.layout;
        for i in 0..layout.len() {
            ck.extra
                .push((format!("adam.m.{}", layout.name(i)), self.adam.m[i].clone()));
        }
        for i in 0..layout.len() {
            ck.extra
                .push((format!("adam.v.{}", layout.name(i)), self.adam.v[i].clone()));
        }
        Ok(ck)
    }

    /// Steps until `config.steps`, calling `observe` after each one.
    pub fn run(
        &mut self,
        mut observe: impl FnMut(&Trainer<'d>, &RunLogRecord) -> Result<()>,
    ) -> Result<Vec<RunLogRecord>> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let rec = self.step_once()?;
            observe(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Trains from scratch. With `out_dir`, writes `train_log.jsonl`, periodic
/// `step_NNNNNN.hifi` checkpoints and `model.hifi`.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    data: &[TrainRecord],
    out_dir: Option<&Path>,
) -> Result<(ModelState, Vec<RunLogRecord>)> {
    let mut trainer = Trainer::new(model, config, data)?;
    run_to_end(&mut trainer, out_dir)
}

pub fn run_to_end(
    trainer: &mut Trainer<'_>,
    out_dir: Option<&Path>,
) -> Result<(ModelState, Vec<RunLogRecord>)> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HifiError::io(dir, e))?;
    }
    let every = trainer.config.checkpoint_every;
    let mut lines = String::new();
    let log = trainer.run(|t, rec| {
        if let Some(dir) = out_dir {
            lines.push_str(&serde_json::to_string(rec).expect("log record serializes"));
            lines.push('\n');
            if every > 0 && t.step % every == 0 {
                save_checkpoint(
                    dir.join(format!("step_{:06}.hifi", t.step)),
                    &t.checkpoint()?,
                )?;
                write_atomic(dir.join("train_log.jsonl"), lines.as_bytes())?;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = out_dir {
        write_atomic(dir.join("train_log.jsonl"), lines.as_bytes())?;
        save_checkpoint(dir.join("model.hifi"), &trainer.checkpoint()?)?;
    }
    Ok((trainer.state.clone(), log))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.hifi")
}

/// Euler integration of the learned flow from noise (`t = 1`) to data
/// (`t = 0`) in `steps` uniform steps. The decoded result is clamped to
/// `[0, 1]` and pasted into `human` inside the mask only.
pub fn sample_with(
    cond: &Conditioning,
    human: &Image,
    steps: usize,
    seed: u64,
    mut velocity: impl FnMut(&ModelInput<'_>) -> Result<Tensor>,
) -> Result<Image> {
    if steps == 0 {
        return contract("sampling needs at least one step");
    }
    let (w, h, c) = cond.size;
    if (human.width(), human.height(), human.channels()) != (w, h, c) {
        return contract("human image does not match the conditioning");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = normal_tensor(&mut rng, cond.human.shape())?;
    for k in 0..steps {
        let t = 1.0 - k as f64 / steps as f64;
        let t_next = 1.0 - (k + 1) as f64 / steps as f64;
        let (z, z_hf) = cond.token_batches(&x)?;
        let v = velocity(&ModelInput {
            z: &z,
            z_hf: &z_hf,
            t,
            mask: &cond.mask_ds,
        })?;
        let dt = t_next - t;
        x = x.zip_map(&v, |a, b| a + dt * b)?;
    }
    let generated = unpatchify(&x.map(|v| v.clamp(0.0, 1.0)), w, h, c, cond.patch)?;
    let mut out = human.clone();
    for y in 0..h {
        for xx in 0..w {
            if cond.mask.get(xx, y) {
                for ch in 0..c {
                    out.set(xx, y, ch, generated.get(xx, y, ch));
                }
            }
        }
    }
    Ok(out)
}

/// [`sample_with`] driven by a model state.
pub fn sample(
    state: &ModelState,
    cond: &Conditioning,
    human: &Image,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    sample_with(cond, human, steps, seed, |input| {
        crate::hifidit::predict_velocity(state, input)
    })
}
