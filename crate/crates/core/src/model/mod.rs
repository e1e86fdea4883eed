//! Encoder, decoder and prior networks of the successive-refinement coder.
//!
//! All three families are stacked Elman RNNs unrolled over the `K` stages:
//!
//! * the encoder reads `x` at every stage and emits `softmax(f(h_k))` through one linear
//!   head `f` shared by all stages;
//! * the decoder reads `(y, m_k)` at stage `k` and emits `x_hat_k = g(h_k)`;
//! * the prior reads `m_{k-1}` (marginal) or `(y, m_{k-1})` (conditional) and emits
//!   `softmax(p_k(h_k))` through a separate head per stage. Stage 1 reads an all-zero
//!   message slot.
//!
//! Messages are size-`M` vectors: Gumbel-softmax samples while training, one-hot
//! indicators at inference.

mod config;
mod rnn;

pub use config::{ModelConfig, PriorKind};
pub use rnn::{Linear, RnnLayer, RnnStack};

use crate::autodiff::{log_softmax_rows, Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::stochastic::{hard_argmax, RngState};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    pub rnn: RnnStack,
    pub head: Linear,
    pub stages: usize,
}

impl EncoderNet {
    /// Per-stage logits `f(h_k)` for a `B x 1` column of sources.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let mut rnn = self.rnn.bind(tape, store);
        let head = self.head.bind(tape, store);
        (0..self.stages)
            .map(|_| {
                let h = rnn.step(tape, x)?;
                head.apply(tape, h)
            })
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.rnn.ids().chain(self.head.ids()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    pub rnn: RnnStack,
    pub head: Linear,
    pub stages: usize,
}

impl DecoderNet {
    /// Reconstructions for as many stages as `messages` holds (at most `K`), each a
    /// `B x 1` column. `messages[k]` is the `B x M` stage-`k` message.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        messages: &[Var],
    ) -> Result<Vec<Var>> {
        if messages.len() > self.stages {
            return Err(Error::contract(format!(
                "decoder has {} stages but received {} messages",
                self.stages,
                messages.len()
            )));
        }
        let mut rnn = self.rnn.bind(tape, store);
        let head = self.head.bind(tape, store);
        messages
            .iter()
            .map(|&m| {
                let input = tape.concat_cols(&[y, m])?;
                let h = rnn.step(tape, input)?;
                head.apply(tape, h)
            })
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.rnn.ids().chain(self.head.ids()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorNet {
    pub kind: PriorKind,
    pub rnn: RnnStack,
    pub heads: Vec<Linear>,
    pub alphabet: usize,
}

impl PriorNet {
    /// Per-stage prior logits. Stage `k` consumes `messages[k - 1]`; stage 1 consumes a
    /// zero slot, so only the first `K - 1` messages are read.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Option<Var>,
        messages: &[Var],
        batch: usize,
    ) -> Result<Vec<Var>> {
        let stages = self.heads.len();
        match (self.kind, y) {
            (PriorKind::Marginal, Some(_)) => {
                return Err(Error::contract(
                    "marginal prior does not take side information",
                ))
            }
            (PriorKind::Conditional, None) => {
                return Err(Error::contract(
                    "conditional prior requires side information",
                ))
            }
            _ => {}
        }
        if messages.len() + 1 < stages {
            return Err(Error::contract(format!(
                "prior over {stages} stages needs at least {} messages, got {}",
                stages - 1,
                messages.len()
            )));
        }
        let mut rnn = self.rnn.bind(tape, store);
        let start = tape.constant(Matrix::zeros(batch, self.alphabet));
        let mut out = Vec::with_capacity(stages);
        for (k, head) in self.heads.iter().enumerate() {
            let head = head.bind(tape, store);
            let prev = if k == 0 { start } else { messages[k - 1] };
            let input = match y {
                Some(y) => tape.concat_cols(&[y, prev])?,
                None => prev,
            };
            let h = rnn.step(tape, input)?;
            out.push(head.apply(tape, h)?);
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.rnn
            .ids()
            .chain(self.heads.iter().flat_map(Linear::ids))
            .collect()
    }
}

/// Codes `m_1..m_K` of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum MessageSet {
    /// One probability vector per stage.
    Soft(Vec<Vec<f64>>),
    /// One code index per stage.
    Hard(Vec<usize>),
}

impl MessageSet {
    pub fn stages(&self) -> usize {
        match self {
            MessageSet::Soft(v) => v.len(),
            MessageSet::Hard(v) => v.len(),
        }
    }

    pub fn validate(&self, alphabet: usize) -> Result<()> {
        match self {
            MessageSet::Soft(rows) => {
                for (k, r) in rows.iter().enumerate() {
                    let total: f64 = r.iter().sum();
                    if r.len() != alphabet
                        || (total - 1.0).abs() > 1e-9
                        || r.iter().any(|&p| p < 0.0)
                    {
                        return Err(Error::contract(format!(
                            "stage {} soft message is not a probability vector of size {alphabet}",
                            k + 1
                        )));
                    }
                }
            }
            MessageSet::Hard(codes) => {
                if let Some(&c) = codes.iter().find(|&&c| c >= alphabet) {
                    return Err(Error::contract(format!(
                        "code {c} outside alphabet of size {alphabet}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stage messages as size-`M` vectors (hard codes become indicators).
    pub fn vectors(&self, alphabet: usize) -> Vec<Vec<f64>> {
        match self {
            MessageSet::Soft(rows) => rows.clone(),
            MessageSet::Hard(codes) => codes.iter().map(|&c| one_hot(c, alphabet)).collect(),
        }
    }
}

pub fn one_hot(code: usize, alphabet: usize) -> Vec<f64> {
    let mut v = vec![0.0; alphabet];
    v[code] = 1.0;
    v
}

/// `B x M` indicator matrix of `codes`.
pub fn one_hot_matrix(codes: &[usize], alphabet: usize) -> Matrix {
    let mut m = Matrix::zeros(codes.len(), alphabet);
    for (r, &c) in codes.iter().enumerate() {
        m.data_mut()[r * alphabet + c] = 1.0;
    }
    m
}

/// Encoder, decoder and prior sharing one parameter store. An optional auxiliary prior
/// of the other kind can be fitted afterwards against the frozen encoder so that both
/// rate estimators are available.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub prior: PriorNet,
    pub aux_prior: Option<PriorNet>,
}

pub(crate) fn init_prior(
    store: &mut ParamStore,
    prefix: &str,
    config: &ModelConfig,
    kind: PriorKind,
    rng: &mut RngState,
) -> PriorNet {
    let input = match kind {
        PriorKind::Marginal => config.alphabet,
        PriorKind::Conditional => 1 + config.alphabet,
    };
    let rnn = RnnStack::init(
        store,
        prefix,
        input,
        config.hidden,
        config.layers,
        config.leaky_slope,
        rng,
    );
    let heads = (0..config.stages)
        .map(|k| {
            Linear::init(
                store,
                &format!("{prefix}.head{k}"),
                config.hidden,
                config.alphabet,
                rng,
            )
        })
        .collect();
    PriorNet {
        kind,
        rnn,
        heads,
        alphabet: config.alphabet,
    }
}

impl RefinementModel {
    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero. Draw order:
    /// encoder, decoder, prior, each layer by layer.
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config;
        let encoder = EncoderNet {
            rnn: RnnStack::init(
                &mut store,
                "encoder",
                1,
                c.hidden,
                c.layers,
                c.leaky_slope,
                rng,
            ),
            head: Linear::init(&mut store, "encoder.head", c.hidden, c.alphabet, rng),
            stages: c.stages,
        };
        let decoder = DecoderNet {
            rnn: RnnStack::init(
                &mut store,
                "decoder",
                1 + c.alphabet,
                c.hidden,
                c.layers,
                c.leaky_slope,
                rng,
            ),
            head: Linear::init(&mut store, "decoder.head", c.hidden, 1, rng),
            stages: c.stages,
        };
        let prior = init_prior(&mut store, "prior", c, c.prior_kind, rng);
        Ok(Self {
            config: c.clone(),
            store,
            encoder,
            decoder,
            prior,
            aux_prior: None,
        })
    }

    /// Rebuilds the network structure over an existing store (as read from a
    /// checkpoint). The store must hold exactly the tensors `init` would create.
    pub fn from_store(config: &ModelConfig, store: ParamStore, with_aux: bool) -> Result<Self> {
        let mut fresh = Self::init(config, &mut RngState::new(0))?;
        if with_aux {
            fresh.add_aux_prior(&mut RngState::new(0));
        }
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (a, b) in fresh.store.iter().zip(store.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }

    /// Appends a freshly initialized prior of the opposite kind.
    pub fn add_aux_prior(&mut self, rng: &mut RngState) -> &PriorNet {
        let kind = self.config.prior_kind.other();
        let prior = init_prior(&mut self.store, "aux_prior", &self.config, kind, rng);
        self.aux_prior.insert(prior)
    }

    pub fn prior_of_kind(&self, kind: PriorKind) -> Option<&PriorNet> {
        if self.prior.kind == kind {
            Some(&self.prior)
        } else {
            self.aux_prior.as_ref().filter(|p| p.kind == kind)
        }
    }

    pub fn stages(&self) -> usize {
        self.config.stages
    }

    pub fn alphabet(&self) -> usize {
        self.config.alphabet
    }

    /// Per-stage encoder log-probabilities for a batch of sources.
    pub fn encoder_log_probs(&self, x: &[f64]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let xv = tape.constant(Matrix::column(x.to_vec()));
        let logits = self.encoder.forward(&mut tape, &self.store, xv)?;
        logits
            .iter()
            .map(|&l| log_softmax_rows(tape.value(l)))
            .collect()
    }

    /// Inference-mode codes, `codes[k][n]` for stage `k` of sample `n`.
    pub fn hard_codes(&self, x: &[f64]) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let xv = tape.constant(Matrix::column(x.to_vec()));
        let logits = self.encoder.forward(&mut tape, &self.store, xv)?;
        Ok(logits
            .iter()
            .map(|&l| {
                let m = tape.value(l);
                (0..m.rows()).map(|r| hard_argmax(m.row(r))).collect()
            })
            .collect())
    }

    /// Reconstructions given per-stage `B x M` message matrices (a prefix of the stages
    /// is allowed); returns `x_hat[k][n]`.
    pub fn decode_batch(&self, y: &[f64], messages: &[Matrix]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let yv = tape.constant(Matrix::column(y.to_vec()));
        let ms: Vec<Var> = messages.iter().map(|m| tape.constant(m.clone())).collect();
        let out = self.decoder.forward(&mut tape, &self.store, yv, &ms)?;
        Ok(out.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }

    /// Per-stage prior log-probabilities (`B x M` each).
    pub fn prior_log_probs(
        &self,
        prior: &PriorNet,
        y: Option<&[f64]>,
        messages: &[Matrix],
        batch: usize,
    ) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let yv = y.map(|y| tape.constant(Matrix::column(y.to_vec())));
        let ms: Vec<Var> = messages.iter().map(|m| tape.constant(m.clone())).collect();
        let out = prior.forward(&mut tape, &self.store, yv, &ms, batch)?;
        out.iter()
            .map(|&l| log_softmax_rows(tape.value(l)))
            .collect()
    }

    /// Stage distributions `p(m_k | m_1^{k-1}, x)` for one source value.
    pub fn encode(&self, x: f64) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .encoder_log_probs(&[x])?
            .into_iter()
            .map(|m| m.data().iter().map(|v| crate::math::exp(*v)).collect())
            .collect())
    }

    /// Reconstructions `x_hat_1..x_hat_K` for one sample.
    pub fn decode(&self, y: f64, messages: &MessageSet) -> Result<Vec<f64>> {
        if messages.stages() != self.stages() {
            return Err(Error::contract(format!(
                "expected {} stage messages, got {}",
                self.stages(),
                messages.stages()
            )));
        }
        messages.validate(self.alphabet())?;
        let ms: Vec<Matrix> = messages
            .vectors(self.alphabet())
            .into_iter()
            .map(Matrix::row_vector)
            .collect();
        Ok(self
            .decode_batch(&[y], &ms)?
            .into_iter()
            .map(|v| v[0])
            .collect())
    }

    /// Prior stage distributions for one sample; `y` must be given exactly when the
    /// model's prior is conditional.
    pub fn prior_forward(&self, y: Option<f64>, messages: &MessageSet) -> Result<Vec<Vec<f64>>> {
        self.prior_forward_with(&self.prior, y, messages)
    }

    pub fn prior_forward_with(
        &self,
        prior: &PriorNet,
        y: Option<f64>,
        messages: &MessageSet,
    ) -> Result<Vec<Vec<f64>>> {
        messages.validate(self.alphabet())?;
        let ms: Vec<Matrix> = messages
            .vectors(self.alphabet())
            .into_iter()
            .map(Matrix::row_vector)
            .collect();
        let ys = y.map(|v| vec![v]);
        Ok(self
            .prior_log_probs(prior, ys.as_deref(), &ms, 1)?
            .into_iter()
            .map(|m| m.data().iter().map(|v| crate::math::exp(*v)).collect())
            .collect())
    }
}
