use crate::autodiff::{ParamId, ParamStore, ParamTensor, Tape, Var};
use crate::error::Result;
use crate::stochastic::RngState;

fn uniform_param(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut RngState,
) -> ParamId {
    let a = 1.0 / (fan_in as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.uniform_in(-a, a)).collect();
    store.push(ParamTensor::new(name, vec![rows, cols], values).expect("positive dimensions"))
}

fn zero_param(store: &mut ParamStore, name: String, cols: usize) -> ParamId {
    store.push(ParamTensor::new(name, vec![1, cols], vec![0.0; cols]).expect("positive dimensions"))
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut RngState,
    ) -> Self {
        let weight = uniform_param(store, format!("{prefix}.weight"), input, output, input, rng);
        let bias = zero_param(store, format!("{prefix}.bias"), output);
        Self { weight, bias }
    }

    pub(crate) fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl BoundLinear {
    pub(crate) fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnLayer {
    pub w_in: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

/// Stacked Elman recurrence:
/// `h[l]_k = LeakyReLU(in[l]_k W_in[l] + h[l]_{k-1} W_hh[l] + b[l])`, with `in[1]_k` the
/// external input, `in[l]_k = h[l-1]_k` above it, and `h[l]_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnStack {
    pub layers: Vec<RnnLayer>,
    pub hidden: usize,
    pub slope: f64,
}

impl RnnStack {
    pub(crate) fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        slope: f64,
        rng: &mut RngState,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                RnnLayer {
                    w_in: uniform_param(
                        store,
                        format!("{prefix}.rnn{l}.w_in"),
                        in_dim,
                        hidden,
                        in_dim,
                        rng,
                    ),
                    w_hh: uniform_param(
                        store,
                        format!("{prefix}.rnn{l}.w_hh"),
                        hidden,
                        hidden,
                        hidden,
                        rng,
                    ),
                    bias: zero_param(store, format!("{prefix}.rnn{l}.bias"), hidden),
                }
            })
            .collect();
        Self {
            layers,
            hidden,
            slope,
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundRnn {
        BoundRnn {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.param(store, l.w_in),
                        tape.param(store, l.w_hh),
                        tape.param(store, l.bias),
                    )
                })
                .collect(),
            state: None,
            slope: self.slope,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.w_in, l.w_hh, l.bias])
    }
}

/// An [`RnnStack`] bound to a tape, carrying its hidden state across steps.
pub(crate) struct BoundRnn {
    layers: Vec<(Var, Var, Var)>,
    state: Option<Vec<Var>>,
    slope: f64,
}

impl BoundRnn {
    /// Advances one stage and returns the top-layer hidden state.
    pub(crate) fn step(&mut self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut next = Vec::with_capacity(self.layers.len());
        let mut below = input;
        for (l, &(w_in, w_hh, bias)) in self.layers.iter().enumerate() {
            let mut pre = tape.matmul(below, w_in)?;
            // with a zero initial state the recurrent product vanishes exactly
            if let Some(prev) = &self.state {
                let rec = tape.matmul(prev[l], w_hh)?;
                pre = tape.add(pre, rec)?;
            }
            let pre = tape.add_row(pre, bias)?;
            let h = tape.leaky_relu(pre, self.slope)?;
            next.push(h);
            below = h;
        }
        self.state = Some(next);
        Ok(below)
    }
}
