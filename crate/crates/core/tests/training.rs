use wzsr_core::autodiff::Tape;
use wzsr_core::evaluator::evaluate;
use wzsr_core::objective::{build_loss, estimate_rate_conditional, MessageMode};
use wzsr_core::stochastic::{sample_pair_batch, RngState};
use wzsr_core::trainer::{train_run, LogRow, TrainOutcome};
use wzsr_core::{EvalConfig, ModelConfig, PriorKind, RefinementModel, RunConfig, TrainConfig};

fn smoke_config() -> RunConfig {
    let mut train = TrainConfig::new(50.0, 0.1, 3);
    train.epochs = 20;
    train.samples_per_epoch = 20_000;
    RunConfig {
        scenario: "mono-2".into(),
        out_dir: "runs".into(),
        model: ModelConfig::new(1, 2, PriorKind::Conditional),
        train,
        eval: EvalConfig {
            samples: 200_000,
            ..EvalConfig::default()
        },
    }
}

fn smoke_run() -> &'static TrainOutcome {
    static RUN: std::sync::OnceLock<TrainOutcome> = std::sync::OnceLock::new();
    RUN.get_or_init(|| train_run(&smoke_config()).expect("smoke training runs"))
}

fn epoch_loss(log: &[LogRow], epoch: usize) -> f64 {
    log.iter()
        .find(|r| r.epoch == epoch)
        .expect("epoch logged")
        .total_loss
}

#[test]
fn single_stage_smoke_run_beats_sending_nothing() {
    let cfg = smoke_config();
    let run = smoke_run();
    let report = evaluate(&run.model, cfg.train.noise_variance, &cfg.eval).unwrap();
    let r = &report[0];
    let rate = r.rate_conditional_bits.unwrap();
    assert!(rate < 1.0, "conditional rate {rate}");
    assert!(
        r.distortion_mse < cfg.train.noise_variance,
        "distortion {}",
        r.distortion_mse
    );
}

#[test]
fn epoch_twenty_loss_is_below_epoch_one() {
    let log = &smoke_run().log;
    // epochs are 0-based in the log
    assert!(epoch_loss(log, 19) < epoch_loss(log, 0));
}

/// With the encoder softmax sharpened by `1 / t`, the training rate term on hard
/// message paths converges to the evaluator's cross-entropy estimate as `t -> 0`.
#[test]
fn hard_code_rate_term_converges_to_the_estimator() {
    let cfg = ModelConfig::new(3, 2, PriorKind::Conditional).with_hidden(8);
    let base = RefinementModel::init(&cfg, &mut RngState::new(21)).unwrap();
    let batch = sample_pair_batch(20_000, 0.1, &mut RngState::new(22)).unwrap();
    let est = estimate_rate_conditional(&base, &batch).unwrap();
    let mut gaps = Vec::new();
    for t in [1.0, 1e-2, 1e-4, 1e-6] {
        let mut model = base.clone();
        for id in model.encoder.head.ids() {
            model
                .store
                .get_mut(id)
                .values
                .iter_mut()
                .for_each(|v| *v /= t);
        }
        assert_eq!(
            model.hard_codes(&batch.x).unwrap(),
            base.hard_codes(&batch.x).unwrap()
        );
        let mut tape = Tape::new();
        let g = build_loss(
            &mut tape,
            &model,
            &batch,
            MessageMode::Hard,
            1.0,
            &mut RngState::new(0),
        )
        .unwrap();
        let terms = g.breakdown(&tape);
        gaps.push(
            terms
                .stages
                .iter()
                .zip(&est)
                .map(|(s, e)| (s.rate_term_bits - e).abs())
                .fold(0.0, f64::max),
        );
    }
    assert!(gaps[3] < 0.05, "gaps {gaps:?}");
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "gaps {gaps:?}");
}
