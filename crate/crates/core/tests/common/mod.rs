//! Finite-difference gradient checks shared by the gradient and acceptance suites.

#![allow(dead_code)]

use wzsr_core::autodiff::{Matrix, Tape, Var};
use wzsr_core::model::RefinementModel;
use wzsr_core::objective::{
    build_loss, mse_node, rate_term_node, total_loss, MessageMode, StageTerms,
};
use wzsr_core::stochastic::{sample_gumbel, sample_pair_batch, RngState, SampleBatch};
use wzsr_core::{ModelConfig, PriorKind, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckSummary {
    pub instances: usize,
    pub worst: f64,
    pub worst_case: String,
}

impl CheckSummary {
    fn record(&mut self, err: f64, case: impl FnOnce() -> String) {
        self.instances += 1;
        if err > self.worst || self.worst_case.is_empty() {
            self.worst = self.worst.max(err);
            self.worst_case = case();
        }
    }

    pub fn merge(&mut self, other: &CheckSummary) {
        self.instances += other.instances;
        if other.worst >= self.worst {
            self.worst = other.worst;
            self.worst_case = other.worst_case.clone();
        }
    }

    pub fn passed(&self, min_instances: usize) -> bool {
        self.instances >= min_instances && self.worst < GRAD_TOL
    }
}

/// Builds a graph over the inputs. The third argument is `Some(base)` during
/// finite differencing, so that stop-gradient paths can be held at the unperturbed
/// inputs, and `None` when recording for backpropagation.
pub type Build = dyn Fn(&mut Tape, &[Var], Option<&[Matrix]>) -> Result<Var>;

fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RngState) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform_in(lo, hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Scalar probe `sum(W ∘ out)` with fixed random weights, so every output entry
/// contributes with a distinct sensitivity.
fn probe(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn eval_probe(build: &Build, inputs: &[Matrix], base: &[Matrix], weights: &Matrix) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.constant(m.clone())).collect();
    let out = build(&mut t, &vars, Some(base)).unwrap();
    let s = probe(&mut t, out, weights).unwrap();
    t.value(s).data()[0]
}

/// Relative error of backpropagated gradients against central differences for
/// every input of one op instance.
pub fn check_op(build: &Build, inputs: &[Matrix], rng: &mut RngState) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.input(m.clone())).collect();
    let out = build(&mut t, &vars, None).unwrap();
    let (r, c) = t.shape(out);
    let weights = random_matrix(r, c, -1.0, 1.0, rng);
    let s = probe(&mut t, out, &weights).unwrap();
    let grads = t.gradients(s).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let g = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.data().len()]);
        analytic.extend(g);
        for j in 0..input.data().len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            minus[i].data_mut()[j] -= FD_STEP;
            let fp = eval_probe(build, &plus, inputs, &weights);
            let fm = eval_probe(build, &minus, inputs, &weights);
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn dim(rng: &mut RngState) -> usize {
    1 + (rng.next_u64() % 5) as usize
}

/// Matrix with entries at least `gap` away from zero, for ops with a kink there.
fn off_kink(rows: usize, cols: usize, gap: f64, rng: &mut RngState) -> Matrix {
    let mut m = random_matrix(rows, cols, gap, 2.0, rng);
    for v in m.data_mut() {
        if rng.uniform() < 0.5 {
            *v = -*v;
        }
    }
    m
}

/// Per-op suites, `instances` random shapes and values each.
pub fn check_all_ops(instances: usize, seed: u64) -> Vec<(&'static str, CheckSummary)> {
    let mut rng = RngState::new(seed);
    let mut out = Vec::new();
    let mut run =
        |name: &'static str,
         rng: &mut RngState,
         gen: &mut dyn FnMut(&mut RngState) -> (Box<Build>, Vec<Matrix>)| {
            let mut s = CheckSummary::default();
            for i in 0..instances {
                let (b, inputs) = gen(rng);
                let err = check_op(b.as_ref(), &inputs, rng);
                s.record(err, || format!("{name} instance {i}"));
            }
            out.push((name, s));
        };

    run("matmul", &mut rng, &mut |rng| {
        let (r, k, c) = (dim(rng), dim(rng), dim(rng));
        let b: Box<Build> = Box::new(|t, v, _| t.matmul(v[0], v[1]));
        (
            b,
            vec![
                random_matrix(r, k, -2.0, 2.0, rng),
                random_matrix(k, c, -2.0, 2.0, rng),
            ],
        )
    });
    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        run(name, &mut rng, &mut |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let b: Box<Build> = Box::new(move |t, v, _| match which {
                0 => t.add(v[0], v[1]),
                1 => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            });
            (
                b,
                vec![
                    random_matrix(r, c, -2.0, 2.0, rng),
                    random_matrix(r, c, -2.0, 2.0, rng),
                ],
            )
        });
    }
    run("add_row", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let b: Box<Build> = Box::new(|t, v, _| t.add_row(v[0], v[1]));
        (
            b,
            vec![
                random_matrix(r, c, -2.0, 2.0, rng),
                random_matrix(1, c, -2.0, 2.0, rng),
            ],
        )
    });
    run("scale", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let s = rng.uniform_in(-3.0, 3.0);
        let b: Box<Build> = Box::new(move |t, v, _| Ok(t.scale(v[0], s)));
        (b, vec![random_matrix(r, c, -2.0, 2.0, rng)])
    });
    run("leaky_relu", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let slope = rng.uniform_in(0.0, 1.0);
        let b: Box<Build> = Box::new(move |t, v, _| t.leaky_relu(v[0], slope));
        (b, vec![off_kink(r, c, 1e-3, rng)])
    });
    run("softmax", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), 1 + dim(rng));
        let b: Box<Build> = Box::new(|t, v, _| t.softmax(v[0]));
        (b, vec![random_matrix(r, c, -3.0, 3.0, rng)])
    });
    run("log_softmax", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), 1 + dim(rng));
        let b: Box<Build> = Box::new(|t, v, _| t.log_softmax(v[0]));
        (b, vec![random_matrix(r, c, -3.0, 3.0, rng)])
    });
    run("concat_cols", &mut rng, &mut |rng| {
        let r = dim(rng);
        let parts = 1 + (rng.next_u64() % 3) as usize;
        let inputs: Vec<Matrix> = (0..parts)
            .map(|_| {
                let c = dim(rng);
                random_matrix(r, c, -2.0, 2.0, rng)
            })
            .collect();
        let b: Box<Build> = Box::new(|t, v, _| t.concat_cols(v));
        (b, inputs)
    });
    run("slice_cols", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), 1 + dim(rng));
        let start = (rng.next_u64() % c as u64) as usize;
        let end = start + 1 + (rng.next_u64() % (c - start) as u64) as usize;
        let b: Box<Build> = Box::new(move |t, v, _| t.slice_cols(v[0], start, end));
        (b, vec![random_matrix(r, c, -2.0, 2.0, rng)])
    });
    for (name, which) in [("sum", 0u8), ("mean", 1), ("sum_rows", 2)] {
        run(name, &mut rng, &mut |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let b: Box<Build> = Box::new(move |t, v, _| {
                Ok(match which {
                    0 => t.sum(v[0]),
                    1 => t.mean(v[0]),
                    _ => t.sum_rows(v[0]),
                })
            });
            (b, vec![random_matrix(r, c, -2.0, 2.0, rng)])
        });
    }
    // stop(a) * a: the reference holds the stopped factor at its unperturbed value.
    run("stop_gradient", &mut rng, &mut |rng| {
        let (r, c) = (dim(rng), dim(rng));
        let b: Box<Build> = Box::new(|t, v, base| {
            let held = match base {
                Some(base) => t.constant(base[0].clone()),
                None => t.stop_gradient(v[0]),
            };
            t.mul(held, v[0])
        });
        (b, vec![random_matrix(r, c, -2.0, 2.0, rng)])
    });
    out
}

/// The training objective with the prior's message inputs optionally replaced by
/// fixed values. Gumbel noise is redrawn from `noise_seed` on every call.
pub fn loss_with_held_prior_inputs(
    model: &RefinementModel,
    batch: &SampleBatch,
    tau: f64,
    lambda: f64,
    noise_seed: u64,
    held: Option<&[Matrix]>,
) -> (f64, Vec<Matrix>) {
    let mut rng = RngState::new(noise_seed);
    let n = batch.len();
    let m = model.alphabet();
    let store = &model.store;
    let mut t = Tape::new();
    let x = t.constant(Matrix::column(batch.x.clone()));
    let y = t.constant(Matrix::column(batch.y.clone()));
    let logits = model.encoder.forward(&mut t, store, x).unwrap();
    let mut lps = Vec::new();
    let mut ps = Vec::new();
    let mut msgs = Vec::new();
    for &l in &logits {
        let lp = t.log_softmax(l).unwrap();
        let p = t.softmax(l).unwrap();
        let g = t.constant(sample_gumbel(n, m, &mut rng));
        let pert = t.add(lp, g).unwrap();
        let sc = t.scale(pert, 1.0 / tau);
        msgs.push(t.softmax(sc).unwrap());
        lps.push(lp);
        ps.push(p);
    }
    let x_hat = model.decoder.forward(&mut t, store, y, &msgs).unwrap();
    let prior_in: Vec<Var> = match held {
        Some(h) => h.iter().map(|v| t.constant(v.clone())).collect(),
        None => msgs.clone(),
    };
    let py = match model.prior.kind {
        PriorKind::Conditional => Some(y),
        PriorKind::Marginal => None,
    };
    let pl = model
        .prior
        .forward(&mut t, store, py, &prior_in, n)
        .unwrap();
    let mut stages = Vec::new();
    for k in 0..logits.len() {
        let q = t.log_softmax(pl[k]).unwrap();
        stages.push(StageTerms {
            rate: rate_term_node(&mut t, lps[k], ps[k], q).unwrap(),
            mse: mse_node(&mut t, x, x_hat[k]).unwrap(),
        });
    }
    let total = total_loss(&mut t, &stages, lambda).unwrap();
    let values = msgs.iter().map(|&v| t.value(v).clone()).collect();
    (t.value(total).data()[0], values)
}

/// Backpropagated parameter gradient of the recorded training loss.
pub fn analytic_param_grads(
    model: &RefinementModel,
    batch: &SampleBatch,
    mode: MessageMode,
    lambda: f64,
    noise_seed: u64,
) -> (f64, Vec<f64>) {
    let mut model = model.clone();
    let mut rng = RngState::new(noise_seed);
    let mut t = Tape::new();
    let g = build_loss(&mut t, &model, batch, mode, lambda, &mut rng).unwrap();
    model.store.zero_grads();
    t.backward(g.total, &mut model.store).unwrap();
    let value = t.value(g.total).data()[0];
    (
        value,
        model.store.iter().flat_map(|p| p.grad.clone()).collect(),
    )
}

/// Central differences of `f` over every scalar parameter of `model`.
pub fn numeric_param_grads(
    model: &RefinementModel,
    f: &dyn Fn(&RefinementModel) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let ids: Vec<_> = model.store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        for j in 0..model.store.get(id).values.len() {
            let v0 = model.store.get(id).values[j];
            probe.store.get_mut(id).values[j] = v0 + FD_STEP;
            let fp = f(&probe);
            probe.store.get_mut(id).values[j] = v0 - FD_STEP;
            let fm = f(&probe);
            probe.store.get_mut(id).values[j] = v0;
            out.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Model with every parameter, biases included, drawn at random. Fresh
/// initialisation puts zero biases on the LeakyReLU kink for constant inputs.
pub fn random_model(cfg: &ModelConfig, rng: &mut RngState) -> RefinementModel {
    let mut model = RefinementModel::init(cfg, &mut RngState::new(rng.next_u64())).unwrap();
    for p in model.store.iter_mut() {
        for v in p.values.iter_mut() {
            *v += rng.uniform_in(-0.5, 0.5);
        }
    }
    model
}

/// End-to-end checks of the `K = 2, M = 2, hidden = 5` objective. Gumbel instances
/// difference the loss with the prior's stop-gradient inputs held fixed; hard-message
/// instances difference the recorded loss directly.
pub fn check_end_to_end(instances: usize, seed: u64) -> CheckSummary {
    let mut rng = RngState::new(seed);
    let mut s = CheckSummary::default();
    for i in 0..instances {
        let kind = if i % 2 == 0 {
            PriorKind::Conditional
        } else {
            PriorKind::Marginal
        };
        let cfg = ModelConfig::new(2, 2, kind).with_hidden(5);
        let model = random_model(&cfg, &mut rng);
        let nv = rng.uniform_in(0.01, 0.5);
        let batch = sample_pair_batch(6, nv, &mut RngState::new(rng.next_u64())).unwrap();
        let lambda = rng.uniform_in(0.5, 50.0);
        let noise_seed = rng.next_u64();
        let hard = i % 5 == 4;
        let err = if hard {
            let f = |m: &RefinementModel| {
                let mut t = Tape::new();
                let g = build_loss(
                    &mut t,
                    m,
                    &batch,
                    MessageMode::Hard,
                    lambda,
                    &mut RngState::new(noise_seed),
                )
                .unwrap();
                t.value(g.total).data()[0]
            };
            let (_, a) =
                analytic_param_grads(&model, &batch, MessageMode::Hard, lambda, noise_seed);
            relative_error(&a, &numeric_param_grads(&model, &f))
        } else {
            let tau = rng.uniform_in(0.5, 1.5);
            let (recorded, a) = analytic_param_grads(
                &model,
                &batch,
                MessageMode::Gumbel { tau },
                lambda,
                noise_seed,
            );
            let (replica, held) =
                loss_with_held_prior_inputs(&model, &batch, tau, lambda, noise_seed, None);
            assert!(
                (recorded - replica).abs() <= 1e-12 * recorded.abs().max(1.0),
                "replica loss diverges from the recorded loss"
            );
            let f = |m: &RefinementModel| {
                loss_with_held_prior_inputs(m, &batch, tau, lambda, noise_seed, Some(&held)).0
            };
            relative_error(&a, &numeric_param_grads(&model, &f))
        };
        s.record(err, || {
            format!(
                "end-to-end instance {i} ({}, {})",
                kind.as_str(),
                if hard { "hard" } else { "gumbel" }
            )
        });
    }
    s
}
