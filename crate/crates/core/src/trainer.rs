//! End-to-end training: Adam, step-decayed learning rate, geometric temperature
//! annealing (updated once per epoch) and fresh source samples every epoch.

use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::checkpoint::{Checkpoint, CheckpointMeta, TOOL_VERSION};
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{PriorKind, RefinementModel};
use crate::objective::{build_loss, prior_cross_entropy, MessageMode};
use crate::stochastic::{sample_pair_batch, RngState};

const INIT_STREAM: u64 = u64::MAX;
const DATA_SHARD: u64 = 0;
const GUMBEL_SHARD: u64 = 1;

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: store.iter().map(|t| vec![0.0; t.len()]).collect(),
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.first[id.index()]
    }

    /// One bias-corrected Adam update of every tensor with `requires_grad`, using the
    /// gradients accumulated in the store. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, epoch: usize) -> Result<()> {
        if let Some(bad) = store
            .iter()
            .find(|t| t.requires_grad && t.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient {
                param: bad.name.clone(),
                epoch,
            });
        }
        if self.first.len() != store.len() {
            return Err(Error::contract(
                "optimizer state does not match parameter store",
            ));
        }
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        for (i, t) in store.iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..t.values.len() {
                let g = t.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                t.values[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr_initial * lr_decay_factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig, kind: PriorKind) -> f64 {
    let decays = epoch / config.decay_every(kind);
    let mut lr = config.lr_initial;
    for _ in 0..decays {
        lr *= config.lr_decay_factor;
    }
    lr
}

/// Geometric interpolation from `tau_start` at epoch 0 to `tau_end` at the last epoch.
pub fn tau_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.tau_start;
    }
    let frac = epoch as f64 / (config.epochs - 1) as f64;
    config.tau_start * crate::math::pow(config.tau_end / config.tau_start, frac)
}

/// One row of the training log per (epoch, stage).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub tau: f64,
    pub lr: f64,
    /// 1-based.
    pub stage: usize,
    pub rate_term_bits: f64,
    pub mse: f64,
    /// Epoch-mean total loss (identical across the stage rows of one epoch).
    pub total_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,tau,lr,stage,rate_term_bits,mse,total_loss";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{},{:.17e},{:.17e},{:.17e}",
            self.epoch,
            self.tau,
            self.lr,
            self.stage,
            self.rate_term_bits,
            self.mse,
            self.total_loss
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RefinementModel,
    pub log: Vec<LogRow>,
    pub checkpoint: Checkpoint,
    /// Batches whose gradient norm hit `grad_clip_norm`.
    pub clipped_batches: usize,
}

pub fn make_checkpoint(
    config: &RunConfig,
    model: &RefinementModel,
    epochs_completed: usize,
    final_tau: f64,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            tool_version: TOOL_VERSION.into(),
            seed: config.train.seed,
            epochs_completed,
            final_tau,
            aux_prior: model.aux_prior.is_some(),
            config: config.clone(),
        },
        store: model.store.clone(),
    }
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> bool {
    let norm = store
        .iter()
        .filter(|t| t.requires_grad)
        .flat_map(|t| t.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm {
        return false;
    }
    let s = max_norm / norm;
    for t in store.iter_mut() {
        t.grad.iter_mut().for_each(|g| *g *= s);
    }
    true
}

/// Observer for per-epoch progress.
pub trait EpochHook {
    fn epoch_done(&mut self, rows: &[LogRow]);
}

impl EpochHook for () {
    fn epoch_done(&mut self, _: &[LogRow]) {}
}

impl<F: FnMut(&[LogRow])> EpochHook for F {
    fn epoch_done(&mut self, rows: &[LogRow]) {
        self(rows)
    }
}

pub fn train_run(config: &RunConfig) -> Result<TrainOutcome> {
    train_run_with(config, &mut ())
}

/// Trains encoder, decoder and prior jointly from a fresh initialization.
pub fn train_run_with(config: &RunConfig, hook: &mut dyn EpochHook) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let kind = config.model.prior_kind;
    let mut model = RefinementModel::init(
        &config.model,
        &mut RngState::derived(tc.seed, INIT_STREAM, 0),
    )?;
    let mut adam = AdamState::new(&model.store);
    let batches = tc.samples_per_epoch / tc.batch_size;
    let stages = config.model.stages;

    let mut log = Vec::with_capacity(tc.epochs * stages);
    let mut last_good: Option<Checkpoint> = None;
    let mut clipped = 0;
    let mut final_tau = tc.tau_start;

    for epoch in 0..tc.epochs {
        let tau = tau_at(epoch, tc);
        let lr = lr_at(epoch, tc, kind);
        let mut data_rng = RngState::derived(tc.seed, epoch as u64, DATA_SHARD);
        let mut noise_rng = RngState::derived(tc.seed, epoch as u64, GUMBEL_SHARD);
        let samples = sample_pair_batch(tc.samples_per_epoch, tc.noise_variance, &mut data_rng)?;

        let mut rate_sum = vec![0.0; stages];
        let mut mse_sum = vec![0.0; stages];
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let batch = samples.slice(b * tc.batch_size..(b + 1) * tc.batch_size);
            model.store.zero_grads();
            let mut tape = Tape::new();
            let graph = build_loss(
                &mut tape,
                &model,
                &batch,
                MessageMode::Gumbel { tau },
                tc.lambda,
                &mut noise_rng,
            )?;
            let parts = graph.breakdown(&tape);
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: last_good.map(Box::new),
                });
            }
            tape.backward(graph.total, &mut model.store)?;
            drop(tape);
            if let Some(max_norm) = tc.grad_clip_norm {
                if clip_gradients(&mut model.store, max_norm) {
                    clipped += 1;
                }
            }
            adam.step(&mut model.store, lr, epoch)?;
            for (k, s) in parts.stages.iter().enumerate() {
                rate_sum[k] += s.rate_term_bits;
                mse_sum[k] += s.distortion;
            }
            loss_sum += parts.total;
        }

        let nb = batches as f64;
        let rows: Vec<LogRow> = (0..stages)
            .map(|k| LogRow {
                epoch,
                tau,
                lr,
                stage: k + 1,
                rate_term_bits: rate_sum[k] / nb,
                mse: mse_sum[k] / nb,
                total_loss: loss_sum / nb,
            })
            .collect();
        hook.epoch_done(&rows);
        log.extend(rows);
        final_tau = tau;
        last_good = Some(make_checkpoint(config, &model, epoch + 1, tau));
    }

    model.store.zero_grads();
    let checkpoint = make_checkpoint(config, &model, tc.epochs, final_tau);
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
        clipped_batches: clipped,
    })
}

/// Settings for fitting a prior to a frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorFitConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_variance: f64,
    pub seed: u64,
}

impl PriorFitConfig {
    pub fn new(noise_variance: f64, seed: u64) -> Self {
        Self {
            epochs: 10,
            samples_per_epoch: 50_000,
            batch_size: 1000,
            lr: 1e-3,
            noise_variance,
            seed,
        }
    }
}

/// Trains a prior of `kind` by cross-entropy on the frozen encoder's hard codes. When
/// `kind` is the model's own prior kind that prior is fine-tuned in place; otherwise an
/// auxiliary prior is created (or continued). The encoder and decoder are unchanged.
/// Returns the per-stage cross-entropy of the final epoch in bits.
pub fn fit_prior(
    model: &mut RefinementModel,
    kind: PriorKind,
    cfg: &PriorFitConfig,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || cfg.samples_per_epoch % cfg.batch_size != 0 {
        return Err(Error::config("batch_size", "must divide samples_per_epoch"));
    }
    if model.prior.kind != kind && model.aux_prior.is_none() {
        model.add_aux_prior(&mut RngState::derived(cfg.seed, INIT_STREAM, 1));
    }
    let prior = model
        .prior_of_kind(kind)
        .cloned()
        .expect("prior of the requested kind exists");
    let trainable: Vec<ParamId> = prior.param_ids();
    let saved_flags: Vec<bool> = model.store.iter().map(|t| t.requires_grad).collect();
    for t in model.store.iter_mut() {
        t.requires_grad = false;
    }
    for &id in &trainable {
        model.store.get_mut(id).requires_grad = true;
    }

    let result = (|| {
        let mut adam = AdamState::new(&model.store);
        let stages = model.stages();
        let mut last = vec![0.0; stages];
        for epoch in 0..cfg.epochs {
            let mut rng = RngState::derived(cfg.seed ^ 0xF17, epoch as u64, DATA_SHARD);
            let samples = sample_pair_batch(cfg.samples_per_epoch, cfg.noise_variance, &mut rng)?;
            let codes = model.hard_codes(&samples.x)?;
            let batches = cfg.samples_per_epoch / cfg.batch_size;
            let mut acc = vec![0.0; stages];
            for b in 0..batches {
                let range = b * cfg.batch_size..(b + 1) * cfg.batch_size;
                let y = &samples.y[range.clone()];
                let c: Vec<Vec<usize>> = codes.iter().map(|s| s[range.clone()].to_vec()).collect();
                model.store.zero_grads();
                let mut tape = Tape::new();
                let (total, per_stage) = prior_cross_entropy(&mut tape, model, &prior, y, &c)?;
                for (k, &v) in per_stage.iter().enumerate() {
                    acc[k] += tape.value(v).data()[0];
                }
                tape.backward(total, &mut model.store)?;
                adam.step(&mut model.store, cfg.lr, epoch)?;
            }
            last = acc.iter().map(|v| v / batches as f64).collect();
        }
        Ok(last)
    })();

    for (t, flag) in model.store.iter_mut().zip(saved_flags) {
        t.requires_grad = flag;
        t.zero_grad();
    }
    result
}
