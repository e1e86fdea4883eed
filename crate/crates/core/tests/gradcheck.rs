mod common;

use common::{
    analytic_param_grads, check_all_ops, check_end_to_end, loss_with_held_prior_inputs,
    numeric_param_grads, relative_error, GRAD_TOL,
};
use wzsr_core::objective::MessageMode;
use wzsr_core::stochastic::{sample_pair_batch, RngState};
use wzsr_core::{ModelConfig, PriorKind};

#[test]
fn every_op_matches_central_differences() {
    for (name, s) in check_all_ops(100, 11) {
        assert!(
            s.passed(100),
            "{name}: worst relative error {:.3e} at {}",
            s.worst,
            s.worst_case
        );
    }
}

#[test]
fn end_to_end_loss_matches_central_differences() {
    let s = check_end_to_end(100, 12);
    assert!(
        s.passed(100),
        "worst relative error {:.3e} at {}",
        s.worst,
        s.worst_case
    );
}

/// Encoder gradients must not flow back through the prior's message inputs: the
/// recorded gradient matches differences with those inputs held fixed, and clearly
/// differs from differences that let them move.
#[test]
fn prior_inputs_do_not_carry_encoder_gradient() {
    let cfg = ModelConfig::new(3, 2, PriorKind::Conditional).with_hidden(5);
    let model = common::random_model(&cfg, &mut RngState::new(5));
    let batch = sample_pair_batch(8, 0.1, &mut RngState::new(6)).unwrap();
    let (tau, lambda, noise) = (0.8, 0.5, 7);
    let (_, analytic) =
        analytic_param_grads(&model, &batch, MessageMode::Gumbel { tau }, lambda, noise);
    let (_, held) = loss_with_held_prior_inputs(&model, &batch, tau, lambda, noise, None);

    let with_held = numeric_param_grads(&model, &|m| {
        loss_with_held_prior_inputs(m, &batch, tau, lambda, noise, Some(&held)).0
    });
    let free = numeric_param_grads(&model, &|m| {
        loss_with_held_prior_inputs(m, &batch, tau, lambda, noise, None).0
    });

    // Only encoder entries see the difference; restrict to them.
    let mut offset = 0;
    let mut enc = Vec::new();
    let enc_ids = model.encoder.param_ids();
    for id in model.store.ids() {
        let n = model.store.get(id).values.len();
        if enc_ids.contains(&id) {
            enc.extend(offset..offset + n);
        }
        offset += n;
    }
    let pick = |v: &[f64]| enc.iter().map(|&i| v[i]).collect::<Vec<_>>();
    assert!(relative_error(&analytic, &with_held) < GRAD_TOL);
    assert!(relative_error(&pick(&analytic), &pick(&free)) > 1e-3);
    // Prior parameters only see the rate terms, so both references agree there.
    let mut offset = 0;
    let prior_ids = model.prior.param_ids();
    for id in model.store.ids() {
        let n = model.store.get(id).values.len();
        if prior_ids.contains(&id) {
            let a = &analytic[offset..offset + n];
            assert!(relative_error(a, &free[offset..offset + n]) < GRAD_TOL);
        }
        offset += n;
    }
}
