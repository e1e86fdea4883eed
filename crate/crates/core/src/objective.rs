//! Rate-distortion losses, distortion, and inference-time rate estimators.
//!
//! The training rate term of stage `k` is the per-sample expectation over `m_k` of
//! `log2 p(m_k | .., x) - log2 q(m_k | ..)`, taken exactly over the `M` categories,
//! while earlier stages enter through the sampled message path. The total loss is
//! `sum_k (rate_k + lambda * mse_k)`, batch-averaged.

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{one_hot_matrix, PriorKind, PriorNet, RefinementModel};
use crate::stochastic::{hard_argmax, sample_gumbel, RngState, SampleBatch};

/// Lower clamp applied to prior probabilities before taking logs in the estimators.
pub const PROB_CLAMP: f64 = 1e-9;

/// `sum_m p[m] (log2 p[m] - log2 q[m])` with `0 log 0 = 0` and `q` clamped at
/// [`PROB_CLAMP`].
pub fn stage_rate_term(enc_probs: &[f64], prior_probs: &[f64]) -> Result<f64> {
    validate_probs(enc_probs, "encoder")?;
    validate_probs(prior_probs, "prior")?;
    if enc_probs.len() != prior_probs.len() {
        return Err(Error::Shape {
            op: "stage_rate_term",
            left: (1, enc_probs.len()),
            right: (1, prior_probs.len()),
        });
    }
    Ok(enc_probs
        .iter()
        .zip(prior_probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (math::log2(p) - math::log2(q.max(PROB_CLAMP))))
        .sum())
}

fn validate_probs(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.len() < 2 || p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "{what} probabilities are not a distribution"
        )));
    }
    Ok(())
}

/// Mean squared error.
pub fn distortion_mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::contract("distortion of an empty batch"));
    }
    if x.len() != x_hat.len() {
        return Err(Error::Shape {
            op: "distortion_mse",
            left: (x.len(), 1),
            right: (x_hat.len(), 1),
        });
    }
    Ok(x.iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// How stage messages are formed when building a training graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MessageMode {
    /// Gumbel-softmax samples at temperature `tau`.
    Gumbel { tau: f64 },
    /// Indicators of the encoder argmax, as at inference.
    Hard,
}

#[derive(Clone, Copy, Debug)]
pub struct StageTerms {
    /// Batch-mean rate term in bits.
    pub rate: Var,
    /// Batch-mean squared error.
    pub mse: Var,
}

/// A recorded loss: the scalar to differentiate plus its per-stage parts.
#[derive(Debug)]
pub struct LossGraph {
    pub total: Var,
    pub stages: Vec<StageTerms>,
    pub lambda: f64,
    /// Stage messages as fed to the decoder (`B x M` each).
    pub messages: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLoss {
    pub rate_term_bits: f64,
    pub distortion: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub stages: Vec<StageLoss>,
    pub total: f64,
    pub lambda: f64,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let rate = tape.value(s.rate).data()[0];
                let mse = tape.value(s.mse).data()[0];
                StageLoss {
                    rate_term_bits: rate,
                    distortion: mse,
                    combined: rate + self.lambda * mse,
                }
            })
            .collect();
        LossBreakdown {
            stages,
            total: tape.value(self.total).data()[0],
            lambda: self.lambda,
        }
    }
}

/// Batch-mean `sum_m p (log p - log q)` in bits.
pub fn rate_term_node(
    tape: &mut Tape,
    enc_log_probs: Var,
    enc_probs: Var,
    prior_log_probs: Var,
) -> Result<Var> {
    let batch = tape.shape(enc_probs).0 as f64;
    let diff = tape.sub(enc_log_probs, prior_log_probs)?;
    let weighted = tape.mul(enc_probs, diff)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / (batch * math::LN_2)))
}

/// Batch-mean squared error between two `B x 1` columns.
pub fn mse_node(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    let d = tape.sub(x, x_hat)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `sum_k (rate_k + lambda * mse_k)`.
pub fn total_loss(tape: &mut Tape, stages: &[StageTerms], lambda: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in stages {
        let d = tape.scale(s.mse, lambda);
        let term = tape.add(s.rate, d)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("loss over zero stages"))
}

/// Records the full training objective for one batch: encoder, message sampling,
/// decoder on the messages, prior on stop-gradient messages.
pub fn build_loss(
    tape: &mut Tape,
    model: &RefinementModel,
    batch: &SampleBatch,
    mode: MessageMode,
    lambda: f64,
    rng: &mut RngState,
) -> Result<LossGraph> {
    let n = batch.len();
    let m = model.alphabet();
    let store = &model.store;
    let x = tape.constant(Matrix::column(batch.x.clone()));
    let y = tape.constant(Matrix::column(batch.y.clone()));

    let logits = model.encoder.forward(tape, store, x)?;
    let mut log_probs = Vec::with_capacity(logits.len());
    let mut probs = Vec::with_capacity(logits.len());
    let mut messages = Vec::with_capacity(logits.len());
    for &l in &logits {
        let lp = tape.log_softmax(l)?;
        let p = tape.softmax(l)?;
        let msg = match mode {
            MessageMode::Gumbel { tau } => {
                if !(tau > 0.0) {
                    return Err(Error::domain(format!(
                        "temperature must be positive, got {tau}"
                    )));
                }
                let g = tape.constant(sample_gumbel(n, m, rng));
                let perturbed = tape.add(lp, g)?;
                let scaled = tape.scale(perturbed, 1.0 / tau);
                tape.softmax(scaled)?
            }
            MessageMode::Hard => {
                let v = tape.value(l);
                let codes: Vec<usize> = (0..n).map(|r| hard_argmax(v.row(r))).collect();
                tape.constant(one_hot_matrix(&codes, m))
            }
        };
        log_probs.push(lp);
        probs.push(p);
        messages.push(msg);
    }

    let x_hat = model.decoder.forward(tape, store, y, &messages)?;

    let detached: Vec<Var> = messages.iter().map(|&v| tape.stop_gradient(v)).collect();
    let prior_y = match model.prior.kind {
        PriorKind::Conditional => Some(y),
        PriorKind::Marginal => None,
    };
    let prior_logits = model.prior.forward(tape, store, prior_y, &detached, n)?;

    let mut stages = Vec::with_capacity(logits.len());
    for k in 0..logits.len() {
        let q = tape.log_softmax(prior_logits[k])?;
        let rate = rate_term_node(tape, log_probs[k], probs[k], q)?;
        let mse = mse_node(tape, x, x_hat[k])?;
        stages.push(StageTerms { rate, mse });
    }
    let total = total_loss(tape, &stages, lambda)?;
    Ok(LossGraph {
        total,
        stages,
        lambda,
        messages,
    })
}

/// Mean cross-entropy `-log2 q(m_k | ..)` of `prior` on the given hard codes, summed
/// over stages; used to fit a prior against a frozen encoder.
pub fn prior_cross_entropy(
    tape: &mut Tape,
    model: &RefinementModel,
    prior: &PriorNet,
    y: &[f64],
    codes: &[Vec<usize>],
) -> Result<(Var, Vec<Var>)> {
    let n = y.len();
    let m = model.alphabet();
    let onehots: Vec<Var> = codes
        .iter()
        .map(|c| tape.constant(one_hot_matrix(c, m)))
        .collect();
    let yv = match prior.kind {
        PriorKind::Conditional => Some(tape.constant(Matrix::column(y.to_vec()))),
        PriorKind::Marginal => None,
    };
    let logits = prior.forward(tape, &model.store, yv, &onehots, n)?;
    let mut per_stage = Vec::with_capacity(logits.len());
    for (k, &l) in logits.iter().enumerate() {
        let lq = tape.log_softmax(l)?;
        let picked = tape.mul(lq, onehots[k])?;
        let s = tape.sum(picked);
        per_stage.push(tape.scale(s, -1.0 / (n as f64 * math::LN_2)));
    }
    let mut total = per_stage[0];
    for &s in &per_stage[1..] {
        total = tape.add(total, s)?;
    }
    Ok((total, per_stage))
}

/// Running mean with standard error, merged in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeanAccumulator {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

/// Per-sample `-log2 q(m_k | ..)` at the encoder's hard codes, accumulated per stage.
pub fn rate_accumulators(
    model: &RefinementModel,
    prior: &PriorNet,
    batch: &SampleBatch,
    codes: &[Vec<usize>],
) -> Result<Vec<MeanAccumulator>> {
    let m = model.alphabet();
    let onehots: Vec<Matrix> = codes.iter().map(|c| one_hot_matrix(c, m)).collect();
    let y = match prior.kind {
        PriorKind::Conditional => Some(batch.y.as_slice()),
        PriorKind::Marginal => None,
    };
    let lq = model.prior_log_probs(prior, y, &onehots, batch.len())?;
    Ok(lq
        .iter()
        .zip(codes)
        .map(|(lq, c)| {
            let mut acc = MeanAccumulator::default();
            for (n, &code) in c.iter().enumerate() {
                let q = math::exp(lq.get(n, code)).max(PROB_CLAMP);
                acc.push(-math::log2(q));
            }
            acc
        })
        .collect())
}

fn estimate_rate(
    model: &RefinementModel,
    kind: PriorKind,
    batch: &SampleBatch,
) -> Result<Vec<f64>> {
    let prior = model
        .prior_of_kind(kind)
        .ok_or_else(|| Error::contract(format!("model has no {kind} prior")))?;
    let codes = model.hard_codes(&batch.x)?;
    Ok(rate_accumulators(model, prior, batch, &codes)?
        .iter()
        .map(MeanAccumulator::mean)
        .collect())
}

/// Per-stage ideal entropy-coder rate `(1/N) sum_n -log2 q_m(m_{n,k} | m_{n,1}^{k-1})`.
pub fn estimate_rate_marginal(model: &RefinementModel, batch: &SampleBatch) -> Result<Vec<f64>> {
    estimate_rate(model, PriorKind::Marginal, batch)
}

/// Per-stage ideal Slepian-Wolf rate `(1/N) sum_n -log2 q_c(m_{n,k} | m_{n,1}^{k-1}, y_n)`.
pub fn estimate_rate_conditional(model: &RefinementModel, batch: &SampleBatch) -> Result<Vec<f64>> {
    estimate_rate(model, PriorKind::Conditional, batch)
}

/// One evaluated stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    /// 1-based stage index.
    pub stage: usize,
    pub rate_marginal_bits: Option<f64>,
    pub rate_conditional_bits: Option<f64>,
    pub stderr_marginal: Option<f64>,
    pub stderr_conditional: Option<f64>,
    pub distortion_mse: f64,
    pub stderr_mse: f64,
    pub distortion_db: f64,
    /// Cumulative rate through this stage under the model's own prior kind.
    pub sum_rate_bits: f64,
    pub prior_kind: PriorKind,
}

impl StageReport {
    /// Rate under the model's own prior kind.
    pub fn rate_bits(&self) -> f64 {
        self.rate_for(self.prior_kind)
            .expect("primary prior rate is always present")
    }

    pub fn stderr_rate(&self) -> f64 {
        match self.prior_kind {
            PriorKind::Marginal => self.stderr_marginal,
            PriorKind::Conditional => self.stderr_conditional,
        }
        .unwrap_or(0.0)
    }

    pub fn rate_for(&self, kind: PriorKind) -> Option<f64> {
        match kind {
            PriorKind::Marginal => self.rate_marginal_bits,
            PriorKind::Conditional => self.rate_conditional_bits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::stochastic::sample_pair_batch;

    #[test]
    fn rate_term_examples() {
        assert!(stage_rate_term(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-15);
        assert!((stage_rate_term(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        // 1 - h_b(0.75), evaluated independently
        let hb = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        let v = stage_rate_term(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        assert!((v - (1.0 - hb)).abs() < 1e-14);
        assert!((v - 0.18872).abs() < 1e-5);
        // the clamp keeps a zero prior entry finite
        let clamped = stage_rate_term(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(clamped.is_finite());
        assert!(stage_rate_term(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(stage_rate_term(&[0.5, 0.5], &[0.2, 0.3, 0.5]).is_err());
    }

    #[test]
    fn gibbs_inequality_at_matched_marginals() {
        let mut rng = RngState::new(8);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| {
                    let a: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
                    let s: f64 = a.iter().sum();
                    a.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let q: Vec<f64> = (0..3)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 6.0)
                .collect();
            let avg: f64 = rows
                .iter()
                .map(|r| stage_rate_term(r, &q).unwrap())
                .sum::<f64>()
                / 6.0;
            assert!(avg >= -1e-12);
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(distortion_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distortion_mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!(distortion_mse(&[], &[]).is_err());
        assert!(distortion_mse(&[1.0], &[1.0, 2.0]).is_err());
        let b = sample_pair_batch(200_000, 0.5, &mut RngState::new(1)).unwrap();
        let zeros = vec![0.0; b.len()];
        let noise: Vec<f64> = b.x.iter().zip(&b.y).map(|(x, y)| x - y).collect();
        let mse = distortion_mse(&noise, &zeros).unwrap();
        // Var of a squared N(0, 0.5) is 2 * 0.25; 3 sigma band
        let band = 3.0 * (0.5f64 / 200_000.0).sqrt();
        assert!((mse - 0.5).abs() < band, "mse = {mse}");
    }

    fn tiny(kind: PriorKind, stages: usize) -> RefinementModel {
        let cfg = ModelConfig::new(stages, 2, kind).with_hidden(5);
        RefinementModel::init(&cfg, &mut RngState::new(21)).unwrap()
    }

    #[test]
    fn total_loss_is_sum_of_stage_combinations() {
        let model = tiny(PriorKind::Conditional, 3);
        let batch = sample_pair_batch(16, 0.1, &mut RngState::new(2)).unwrap();
        let mut tape = Tape::new();
        let g = build_loss(
            &mut tape,
            &model,
            &batch,
            MessageMode::Gumbel { tau: 0.7 },
            12.0,
            &mut RngState::new(3),
        )
        .unwrap();
        let b = g.breakdown(&tape);
        let sum: f64 = b.stages.iter().map(|s| s.combined).sum();
        assert!((b.total - sum).abs() < 1e-9);
    }

    #[test]
    fn lambda_scales_distortion_linearly() {
        let model = tiny(PriorKind::Marginal, 2);
        let batch = sample_pair_batch(16, 0.1, &mut RngState::new(2)).unwrap();
        let run = |lambda: f64| {
            let mut tape = Tape::new();
            let g = build_loss(
                &mut tape,
                &model,
                &batch,
                MessageMode::Gumbel { tau: 0.5 },
                lambda,
                &mut RngState::new(3),
            )
            .unwrap();
            g.breakdown(&tape)
        };
        let a = run(5.0);
        let b = run(10.0);
        let z = run(0.0);
        for k in 0..2 {
            let da = a.stages[k].combined - a.stages[k].rate_term_bits;
            let db = b.stages[k].combined - b.stages[k].rate_term_bits;
            assert!((db - 2.0 * da).abs() < 1e-12);
            assert_eq!(z.stages[k].rate_term_bits, a.stages[k].rate_term_bits);
        }
    }

    #[test]
    fn single_stage_loss_is_the_stage_loss() {
        let model = tiny(PriorKind::Conditional, 1);
        let batch = sample_pair_batch(8, 0.1, &mut RngState::new(2)).unwrap();
        let mut tape = Tape::new();
        let g = build_loss(
            &mut tape,
            &model,
            &batch,
            MessageMode::Hard,
            3.0,
            &mut RngState::new(3),
        )
        .unwrap();
        let b = g.breakdown(&tape);
        assert_eq!(b.stages.len(), 1);
        assert!((b.total - b.stages[0].combined).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_leaves_decoder_without_gradient() {
        let mut model = tiny(PriorKind::Conditional, 2);
        let batch = sample_pair_batch(8, 0.1, &mut RngState::new(2)).unwrap();
        let mut tape = Tape::new();
        let g = build_loss(
            &mut tape,
            &model,
            &batch,
            MessageMode::Gumbel { tau: 1.0 },
            0.0,
            &mut RngState::new(3),
        )
        .unwrap();
        tape.backward(g.total, &mut model.store).unwrap();
        for id in model.decoder.param_ids() {
            assert!(model.store.get(id).grad.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn estimators_for_uniform_and_certain_priors() {
        let mut model = tiny(PriorKind::Marginal, 2);
        // zero every prior head: constant zero logits -> uniform prior
        for h in model.prior.heads.clone() {
            for id in h.ids() {
                model
                    .store
                    .get_mut(id)
                    .values
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let batch = sample_pair_batch(500, 0.1, &mut RngState::new(2)).unwrap();
        let r = estimate_rate_marginal(&model, &batch).unwrap();
        for v in &r {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(estimate_rate_conditional(&model, &batch).is_err());

        // a constant encoder: push its head bias hard toward code 0, prior likewise
        let eb = model.encoder.head.bias;
        model.store.get_mut(eb).values.copy_from_slice(&[1e3, -1e3]);
        for h in model.prior.heads.clone() {
            model
                .store
                .get_mut(h.bias)
                .values
                .copy_from_slice(&[60.0, -60.0]);
        }
        let r = estimate_rate_marginal(&model, &batch).unwrap();
        for v in &r {
            assert!(*v < 1e-12);
        }
    }

    #[test]
    fn accumulator_stderr() {
        let mut a = MeanAccumulator::default();
        for v in [1.0, 2.0, 3.0, 4.0] {
            a.push(v);
        }
        assert_eq!(a.mean(), 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((a.stderr() - sd / 2.0).abs() < 1e-12);
    }
}
