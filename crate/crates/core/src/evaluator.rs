//! Inference-mode measurement: per-stage rates and distortions over fresh samples,
//! rate-distortion sweeps over `lambda`, and exports of the learned bins and
//! reconstruction functions.

use std::path::{Path, PathBuf};

use crate::bounds::{self, find_pieces_by, CodeMap};
use crate::checkpoint::{Checkpoint, TOOL_VERSION};
use crate::config::{EvalConfig, RunConfig};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{one_hot_matrix, PriorKind, RefinementModel};
use crate::objective::{rate_accumulators, MeanAccumulator, StageReport};
use crate::stochastic::{sample_pair_batch, RngState};
use crate::trainer::train_run;

/// Smallest sample count [`evaluate`] accepts.
pub const MIN_EVAL_SAMPLES: usize = 10_000;

const EVAL_STREAM: u64 = 0xE7A1;

/// Running sums for one shard, merged in shard order.
#[derive(Clone, Debug)]
struct ShardStats {
    mse: Vec<MeanAccumulator>,
    marginal: Option<Vec<MeanAccumulator>>,
    conditional: Option<Vec<MeanAccumulator>>,
}

fn shard_stats(
    model: &RefinementModel,
    noise_variance: f64,
    n: usize,
    seed: u64,
    shard: u64,
) -> Result<ShardStats> {
    let mut rng = RngState::derived(seed, EVAL_STREAM, shard);
    let batch = sample_pair_batch(n, noise_variance, &mut rng)?;
    let codes = model.hard_codes(&batch.x)?;
    let m = model.alphabet();
    let onehots: Vec<_> = codes.iter().map(|c| one_hot_matrix(c, m)).collect();
    let x_hat = model.decode_batch(&batch.y, &onehots)?;
    let mse = x_hat
        .iter()
        .map(|xh| {
            let mut acc = MeanAccumulator::default();
            for (a, b) in batch.x.iter().zip(xh) {
                acc.push((a - b) * (a - b));
            }
            acc
        })
        .collect();
    let rates = |kind: PriorKind| -> Result<Option<Vec<MeanAccumulator>>> {
        match model.prior_of_kind(kind) {
            Some(p) => Ok(Some(rate_accumulators(model, p, &batch, &codes)?)),
            None => Ok(None),
        }
    };
    Ok(ShardStats {
        mse,
        marginal: rates(PriorKind::Marginal)?,
        conditional: rates(PriorKind::Conditional)?,
    })
}

fn merge_all(acc: &mut [MeanAccumulator], other: &[MeanAccumulator]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.merge(b);
    }
}

/// Evaluates with `threads` workers (at least one). Shards are `cfg.shard_size`
/// samples, each drawn from its own stream, and are reduced in shard order, so the
/// report does not depend on `threads`.
pub fn evaluate_parallel(
    model: &RefinementModel,
    noise_variance: f64,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<Vec<StageReport>> {
    if cfg.samples < MIN_EVAL_SAMPLES {
        return Err(Error::contract(format!(
            "evaluation needs at least {MIN_EVAL_SAMPLES} samples, got {}",
            cfg.samples
        )));
    }
    if cfg.shard_size == 0 {
        return Err(Error::config("eval.shard_size", "must be positive"));
    }
    let shards: Vec<(u64, usize)> = (0..cfg.samples.div_ceil(cfg.shard_size))
        .map(|i| {
            (
                i as u64,
                cfg.shard_size.min(cfg.samples - i * cfg.shard_size),
            )
        })
        .collect();
    let threads = threads.clamp(1, shards.len());
    let mut results: Vec<Option<Result<ShardStats>>> = (0..shards.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &(id, n)) in results.iter_mut().zip(&shards) {
            *slot = Some(shard_stats(model, noise_variance, n, cfg.seed, id));
        }
    } else {
        std::thread::scope(|scope| {
            let chunk = shards.len().div_ceil(threads);
            for (slots, work) in results.chunks_mut(chunk).zip(shards.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &(id, n)) in slots.iter_mut().zip(work) {
                        *slot = Some(shard_stats(model, noise_variance, n, cfg.seed, id));
                    }
                });
            }
        });
    }

    let stages = model.stages();
    let mut mse = vec![MeanAccumulator::default(); stages];
    let mut marginal = model
        .prior_of_kind(PriorKind::Marginal)
        .map(|_| vec![MeanAccumulator::default(); stages]);
    let mut conditional = model
        .prior_of_kind(PriorKind::Conditional)
        .map(|_| vec![MeanAccumulator::default(); stages]);
    for r in results {
        let s = r.expect("every shard ran")?;
        merge_all(&mut mse, &s.mse);
        if let (Some(acc), Some(s)) = (marginal.as_mut(), s.marginal.as_ref()) {
            merge_all(acc, s);
        }
        if let (Some(acc), Some(s)) = (conditional.as_mut(), s.conditional.as_ref()) {
            merge_all(acc, s);
        }
    }

    let kind = model.config.prior_kind;
    let mut sum_rate = 0.0;
    Ok((0..stages)
        .map(|k| {
            let mean = |a: &Option<Vec<MeanAccumulator>>| a.as_ref().map(|v| v[k].mean());
            let se = |a: &Option<Vec<MeanAccumulator>>| a.as_ref().map(|v| v[k].stderr());
            let own = match kind {
                PriorKind::Marginal => &marginal,
                PriorKind::Conditional => &conditional,
            };
            sum_rate += own.as_ref().expect("primary prior present")[k].mean();
            let d = mse[k].mean();
            StageReport {
                stage: k + 1,
                rate_marginal_bits: mean(&marginal),
                rate_conditional_bits: mean(&conditional),
                stderr_marginal: se(&marginal),
                stderr_conditional: se(&conditional),
                distortion_mse: d,
                stderr_mse: mse[k].stderr(),
                distortion_db: math::to_db(d),
                sum_rate_bits: sum_rate,
                prior_kind: kind,
            }
        })
        .collect())
}

/// Single-threaded [`evaluate_parallel`].
pub fn evaluate(
    model: &RefinementModel,
    noise_variance: f64,
    cfg: &EvalConfig,
) -> Result<Vec<StageReport>> {
    evaluate_parallel(model, noise_variance, cfg, 1)
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<RefinementModel> {
    RefinementModel::from_store(&ck.meta.config.model, ck.store.clone(), ck.meta.aux_prior)
}

/// Evaluates a checkpoint at its training noise variance.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<StageReport>> {
    let model = model_from_checkpoint(ck)?;
    let cfg = EvalConfig {
        samples: n_samples,
        seed,
        shard_size: ck.meta.config.eval.shard_size,
    };
    evaluate(&model, ck.meta.config.train.noise_variance, &cfg)
}

/// First line of every exported CSV.
pub fn artifact_header(checkpoint_hash: &str, seed: u64) -> String {
    format!("# checkpoint_sha256={checkpoint_hash} seed={seed} tool={TOOL_VERSION}\n")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.17e}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "stage,prior_kind,rate_bits,sum_rate_bits,rate_marginal_bits,rate_conditional_bits,stderr_marginal,stderr_conditional,mse,stderr_mse,db";

/// Evaluation report as CSV (without the artifact header).
pub fn report_csv(reports: &[StageReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{:.17e},{:.17e},{},{},{},{},{:.17e},{:.17e},{:.17e}\n",
            r.stage,
            r.prior_kind,
            r.rate_bits(),
            r.sum_rate_bits,
            opt(r.rate_marginal_bits),
            opt(r.rate_conditional_bits),
            opt(r.stderr_marginal),
            opt(r.stderr_conditional),
            r.distortion_mse,
            r.stderr_mse,
            r.distortion_db
        ));
    }
    s
}

/// Reads a report written by [`report_csv`]; `#` comment lines are skipped.
pub fn parse_report_csv(text: &str) -> Result<Vec<StageReport>> {
    let bad = |what: &str| Error::Checkpoint(format!("malformed report CSV: {what}"));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(REPORT_HEADER) {
        return Err(bad("unexpected header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let opt = |s: &str| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            Ok(StageReport {
                stage: f[0].parse().map_err(|_| bad(line))?,
                prior_kind: f[1].parse()?,
                sum_rate_bits: num(f[3])?,
                rate_marginal_bits: opt(f[4])?,
                rate_conditional_bits: opt(f[5])?,
                stderr_marginal: opt(f[6])?,
                stderr_conditional: opt(f[7])?,
                distortion_mse: num(f[8])?,
                stderr_mse: num(f[9])?,
                distortion_db: num(f[10])?,
            })
        })
        .collect()
}

/// Aligned plain-text summary of a report.
pub fn report_table(reports: &[StageReport]) -> String {
    let mut s = format!(
        "{:>5} {:>12} {:>12} {:>12} {:>12} {:>10}\n",
        "stage", "R_marginal", "R_cond", "sum_rate", "mse", "dB"
    );
    let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for r in reports {
        s.push_str(&format!(
            "{:>5} {:>12} {:>12} {:>12.4} {:>12.6} {:>10.3}\n",
            r.stage,
            f(r.rate_marginal_bits),
            f(r.rate_conditional_bits),
            r.sum_rate_bits,
            r.distortion_mse,
            r.distortion_db
        ));
    }
    s
}

// ---------------------------------------------------------------------------------------
// Rate-distortion sweeps

pub const RD_HEADER: &str =
    "scenario,prior_kind,lambda,stage,rate_bits,sum_rate_bits,mse,db,stderr_rate,stderr_mse";

/// One row of the RD CSV. Analytic-curve rows carry the curve label in `prior_kind`
/// and leave `lambda`, `stage` and the standard errors empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RdRow {
    pub scenario: String,
    pub prior_kind: String,
    pub lambda: Option<f64>,
    pub stage: Option<usize>,
    pub rate_bits: f64,
    pub sum_rate_bits: f64,
    pub mse: f64,
    pub db: f64,
    pub stderr_rate: Option<f64>,
    pub stderr_mse: Option<f64>,
}

impl RdRow {
    pub fn is_model(&self) -> bool {
        self.stage.is_some()
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            self.scenario,
            self.prior_kind,
            self.lambda.map(|l| l.to_string()).unwrap_or_default(),
            self.stage.map(|s| s.to_string()).unwrap_or_default(),
            self.rate_bits,
            self.sum_rate_bits,
            self.mse,
            self.db,
            opt(self.stderr_rate),
            opt(self.stderr_mse)
        )
    }
}

pub fn rd_rows(scenario: &str, lambda: f64, reports: &[StageReport]) -> Vec<RdRow> {
    reports
        .iter()
        .map(|r| RdRow {
            scenario: scenario.into(),
            prior_kind: r.prior_kind.to_string(),
            lambda: Some(lambda),
            stage: Some(r.stage),
            rate_bits: r.rate_bits(),
            sum_rate_bits: r.sum_rate_bits,
            mse: r.distortion_mse,
            db: r.distortion_db,
            stderr_rate: Some(r.stderr_rate()),
            stderr_mse: Some(r.stderr_mse),
        })
        .collect()
}

/// Rows for both analytic curves over `points` rates spanning `[0, max_rate]` bits.
pub fn analytic_rows(
    scenario: &str,
    noise_variance: f64,
    max_rate: f64,
    points: usize,
) -> Result<Vec<RdRow>> {
    let points = points.max(2);
    let ds: Vec<f64> = (0..points)
        .map(|i| bounds::wz_distortion(max_rate * i as f64 / (points - 1) as f64, noise_variance))
        .collect::<Result<_>>()?;
    Ok(bounds::analytic_curves(noise_variance, &ds)?
        .into_iter()
        .map(|p| RdRow {
            scenario: scenario.into(),
            prior_kind: p.label.to_string(),
            lambda: None,
            stage: None,
            rate_bits: p.rate_bits,
            sum_rate_bits: p.rate_bits,
            mse: p.distortion_mse,
            db: math::to_db(p.distortion_mse),
            stderr_rate: None,
            stderr_mse: None,
        })
        .collect())
}

pub fn rd_csv(rows: &[RdRow]) -> String {
    let mut s = format!("{RD_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Where a sweep finds (and stores) one checkpoint per `lambda`.
#[derive(Clone, Debug)]
pub struct SweepCache {
    pub dir: PathBuf,
    /// Train and store missing checkpoints; otherwise a missing one is an error.
    pub allow_training: bool,
}

/// Compact `lambda` for file names: integers without a fraction, others in
/// shortest round-trip form.
pub fn lambda_label(lambda: f64) -> String {
    if lambda.fract() == 0.0 && lambda.abs() < 1e15 {
        format!("{}", lambda as i64)
    } else {
        format!("{lambda:?}")
    }
}

/// Canonical checkpoint file for a config: scenario, prior, lambda and a digest of
/// the full config.
pub fn checkpoint_path(dir: &Path, cfg: &RunConfig) -> PathBuf {
    use sha2::{Digest, Sha256};
    let digest = hex::encode(Sha256::digest(cfg.to_toml_string().as_bytes()));
    dir.join(format!(
        "{}-{}-lambda{}-seed{}-{}.wzsr",
        cfg.scenario,
        cfg.model.prior_kind,
        lambda_label(cfg.train.lambda),
        cfg.train.seed,
        &digest[..16]
    ))
}

/// Loads the checkpoint for `cfg` from the cache, training it first if allowed.
pub fn load_or_train(cfg: &RunConfig, cache: &SweepCache) -> Result<Checkpoint> {
    let path = checkpoint_path(&cache.dir, cfg);
    if path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.meta.config != *cfg {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different config",
                path.display()
            )));
        }
        return Ok(ck);
    }
    if !cache.allow_training {
        return Err(Error::contract(format!(
            "no checkpoint at {} and training is disabled",
            path.display()
        )));
    }
    let out = train_run(cfg)?;
    std::fs::create_dir_all(&cache.dir)?;
    out.checkpoint.save(&path)?;
    Ok(out.checkpoint)
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    /// Model rows (per `lambda`, per stage) followed by the analytic curves.
    pub rows: Vec<RdRow>,
    pub checkpoint_hashes: Vec<String>,
}

/// Trains (or loads) one model per `lambda` from `template`, evaluates each, and
/// appends both analytic curves for overlay.
pub fn rd_sweep(template: &RunConfig, lambdas: &[f64], cache: &SweepCache) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::contract("sweep needs at least one lambda"));
    }
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for &lambda in lambdas {
        let mut cfg = template.clone();
        cfg.train.lambda = lambda;
        cfg.validate()?;
        let ck = load_or_train(&cfg, cache)?;
        let model = model_from_checkpoint(&ck)?;
        let reports = evaluate(&model, cfg.train.noise_variance, &cfg.eval)?;
        rows.extend(rd_rows(&cfg.scenario, lambda, &reports));
        hashes.push(ck.hash());
    }
    let max_rate = template.model.max_total_rate() + 1.0;
    rows.extend(analytic_rows(
        &template.scenario,
        template.train.noise_variance,
        max_rate,
        41,
    )?);
    Ok(SweepResult {
        rows,
        checkpoint_hashes: hashes,
    })
}

// ---------------------------------------------------------------------------------------
// Binning export

/// Scan radius of [`export_binning`] in units of the source standard deviation.
pub const BINNING_SPAN_SD: f64 = 4.0;
pub const TRANSITION_TOL: f64 = 1e-8;

/// Encoder map over an `x` grid. `message` is the concatenated code
/// `sum_k m_k M^(K-k)` at each grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct BinningMap {
    pub x_grid: Vec<f64>,
    pub alphabet: usize,
    /// `codes[k][i]`: stage `k + 1` code at `x_grid[i]`.
    pub codes: Vec<Vec<usize>>,
    /// Refined code-change points of each stage.
    pub transitions: Vec<Vec<f64>>,
    pub message: Vec<usize>,
    pub message_transitions: Vec<f64>,
}

impl BinningMap {
    pub fn stages(&self) -> usize {
        self.codes.len()
    }

    pub fn transition_counts(&self) -> Vec<usize> {
        self.transitions.iter().map(Vec::len).collect()
    }

    /// Constant-code intervals of stage `k` (0-based) as `(lo, hi, code)`, bounded by
    /// the grid ends.
    pub fn intervals(&self, k: usize) -> Vec<(f64, f64, usize)> {
        self.runs(&self.transitions[k], &self.codes[k])
    }

    /// Intervals between `edges` labelled with the grid code inside each.
    fn runs(&self, edges: &[f64], codes: &[usize]) -> Vec<(f64, f64, usize)> {
        let lo = self.x_grid[0];
        let hi = *self.x_grid.last().expect("grid is nonempty");
        let mut all = vec![lo];
        all.extend(edges.iter().copied());
        all.push(hi);
        all.windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                let idx = self
                    .x_grid
                    .partition_point(|&x| x < mid)
                    .min(self.x_grid.len() - 1);
                // the grid point nearest the midpoint lies inside the interval unless the
                // interval is narrower than the grid step; fall back to the left edge code
                let i = if self.x_grid[idx] >= w[0] && self.x_grid[idx] <= w[1] {
                    idx
                } else {
                    self.x_grid
                        .partition_point(|&x| x < w[0])
                        .min(self.x_grid.len() - 1)
                };
                (w[0], w[1], codes[i])
            })
            .collect()
    }

    /// Disjoint `x` intervals on which the first `prefix.len()` codes equal `prefix`,
    /// i.e. the bin addressed by that prefix.
    pub fn prefix_intervals(&self, prefix: &[usize]) -> Vec<(f64, f64)> {
        let k = prefix.len();
        if k == 0 || k > self.stages() {
            return Vec::new();
        }
        let want = prefix.iter().fold(0, |acc, &c| acc * self.alphabet + c);
        let shift = self.alphabet.pow((self.stages() - k) as u32);
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (lo, hi, msg) in self.runs(&self.message_transitions, &self.message) {
            if msg / shift != want {
                continue;
            }
            match out.last_mut() {
                Some(last) if last.1 == lo => last.1 = hi,
                _ => out.push((lo, hi)),
            }
        }
        out
    }

    /// Number of disjoint intervals each code value of stage `k` occupies.
    pub fn intervals_per_code(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; self.alphabet];
        for (_, _, c) in self.intervals(k) {
            counts[c] += 1;
        }
        counts
    }

    /// CSV rows `x,stage,code`, one per grid point and stage (stage-major).
    pub fn csv(&self) -> String {
        let mut s = String::from("x,stage,code\n");
        for (k, codes) in self.codes.iter().enumerate() {
            for (x, c) in self.x_grid.iter().zip(codes) {
                s.push_str(&format!("{x:.17e},{},{c}\n", k + 1));
            }
        }
        s
    }

    /// CSV rows `x,message` for the concatenated message.
    pub fn message_csv(&self) -> String {
        let mut s = String::from("x,message\n");
        for (x, m) in self.x_grid.iter().zip(&self.message) {
            s.push_str(&format!("{x:.17e},{m}\n"));
        }
        s
    }

    /// CSV rows `stage,x` of refined transitions; stage `all` marks the message map.
    pub fn transitions_csv(&self) -> String {
        let mut s = String::from("stage,x\n");
        for (k, t) in self.transitions.iter().enumerate() {
            for x in t {
                s.push_str(&format!("{},{x:.17e}\n", k + 1));
            }
        }
        for x in &self.message_transitions {
            s.push_str(&format!("all,{x:.17e}\n"));
        }
        s
    }

    /// Re-evaluates `per_piece` random points strictly inside every constant piece
    /// and fails if any code differs from the piece's code.
    pub fn verify_constant(
        &self,
        map: &dyn CodeMap,
        per_piece: usize,
        rng: &mut RngState,
    ) -> Result<()> {
        for k in 0..self.stages() {
            let intervals = self.intervals(k);
            let mut xs = Vec::new();
            let mut want = Vec::new();
            for &(lo, hi, code) in &intervals {
                let margin = (hi - lo) * 1e-6 + TRANSITION_TOL;
                if hi - lo <= 2.0 * margin {
                    continue;
                }
                for _ in 0..per_piece {
                    xs.push(rng.uniform_in(lo + margin, hi - margin));
                    want.push(code);
                }
            }
            let got = map.codes(&xs)?;
            for ((x, g), w) in xs.iter().zip(got).zip(want) {
                if g[k] != w {
                    return Err(Error::Accuracy(format!(
                        "stage {} code at x = {x} is {} inside a piece coded {w}",
                        k + 1,
                        g[k]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Default scan range `±4 sd(x)` for noise variance `nv`.
pub fn default_binning_range(noise_variance: f64) -> (f64, f64) {
    let r = BINNING_SPAN_SD * (1.0 + noise_variance).sqrt();
    (-r, r)
}

/// Scans inference-mode codes on `resolution` grid points over `[lo, hi]` and
/// bisects every code change to [`TRANSITION_TOL`].
pub fn export_binning(
    model: &RefinementModel,
    lo: f64,
    hi: f64,
    resolution: usize,
) -> Result<BinningMap> {
    if resolution < 1000 {
        return Err(Error::contract(format!(
            "binning resolution must be at least 1000, got {resolution}"
        )));
    }
    if !(hi > lo) {
        return Err(Error::contract("binning range must satisfy lo < hi"));
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    let x_grid: Vec<f64> = (0..resolution).map(|i| lo + i as f64 * step).collect();
    let tuples = CodeMap::codes(model, &x_grid)?;
    let stages = model.stages();
    let m = model.alphabet();
    let codes: Vec<Vec<usize>> = (0..stages)
        .map(|k| tuples.iter().map(|t| t[k]).collect())
        .collect();
    let message: Vec<usize> = tuples
        .iter()
        .map(|t| t.iter().fold(0, |acc, &c| acc * m + c))
        .collect();

    let edges =
        |pieces: Vec<bounds::Piece>| pieces.iter().skip(1).map(|p| p.lo).collect::<Vec<_>>();
    let mut transitions = Vec::with_capacity(stages);
    for k in 0..stages {
        let pieces = find_pieces_by(
            model,
            lo,
            hi,
            resolution,
            TRANSITION_TOL,
            &move |c: &[usize]| vec![c[k]],
        )?;
        transitions.push(edges(pieces));
    }
    let message_transitions = edges(find_pieces_by(
        model,
        lo,
        hi,
        resolution,
        TRANSITION_TOL,
        &|c: &[usize]| c.to_vec(),
    )?);
    Ok(BinningMap {
        x_grid,
        alphabet: m,
        codes,
        transitions,
        message,
        message_transitions,
    })
}

// ---------------------------------------------------------------------------------------
// Reconstruction export

/// Decoder output of stage `prefix.len()` over a `y` grid with the message prefix held
/// fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionMap {
    pub prefix: Vec<usize>,
    pub y_grid: Vec<f64>,
    pub x_hat: Vec<f64>,
}

/// Least-squares line through `(xs, ys)` and the RMS residual.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    (slope, intercept, (rss / n).sqrt())
}

impl ReconstructionMap {
    /// Label such as `0XX` (the prefix padded with `X` to `stages` symbols); symbols
    /// are dot-separated for alphabets above ten.
    pub fn label(&self, stages: usize, alphabet: usize) -> String {
        let mut parts: Vec<String> = self.prefix.iter().map(|c| c.to_string()).collect();
        parts.resize(stages.max(self.prefix.len()), "X".into());
        parts.join(if alphabet > 10 { "." } else { "" })
    }

    /// `(rms residual, output range, points)` of the affine fit over grid points with
    /// `lo <= y <= hi`, or `None` with fewer than `min_points` such points.
    pub fn fit_on(&self, lo: f64, hi: f64, min_points: usize) -> Option<(f64, f64, usize)> {
        let a = self.y_grid.partition_point(|&y| y < lo);
        let b = self.y_grid.partition_point(|&y| y <= hi);
        if b < a + min_points.max(2) {
            return None;
        }
        let ys = &self.x_hat[a..b];
        let (_, _, rms) = affine_fit(&self.y_grid[a..b], ys);
        let range = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - ys.iter().cloned().fold(f64::INFINITY, f64::min);
        Some((rms, range, b - a))
    }
}

/// Affine fit of one reconstruction map on one interval of its prefix's bin.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceFit {
    pub prefix: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub rms: f64,
    pub range: f64,
    pub points: usize,
}

impl PieceFit {
    /// Residual RMS as a fraction of the output range.
    pub fn relative_rms(&self) -> f64 {
        if self.range > 0.0 {
            self.rms / self.range
        } else if self.rms == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Splits each reconstruction map at the `x` intervals of its prefix's bin (taken as
/// `y` intervals, since `y` is `x` up to noise) and fits each piece with at least
/// `min_points` grid points.
pub fn bin_piece_fits(
    binning: &BinningMap,
    maps: &[ReconstructionMap],
    min_points: usize,
) -> Vec<PieceFit> {
    let mut out = Vec::new();
    for map in maps {
        for (lo, hi) in binning.prefix_intervals(&map.prefix) {
            if let Some((rms, range, points)) = map.fit_on(lo, hi, min_points) {
                out.push(PieceFit {
                    prefix: map.prefix.clone(),
                    lo,
                    hi,
                    rms,
                    range,
                    points,
                });
            }
        }
    }
    out
}

/// Default `y` range, `±4` standard deviations of the side information.
pub const RECON_SPAN: f64 = 4.0;

pub fn export_reconstruction(
    model: &RefinementModel,
    lo: f64,
    hi: f64,
    resolution: usize,
    prefixes: &[Vec<usize>],
) -> Result<Vec<ReconstructionMap>> {
    if resolution < 2 || !(hi > lo) {
        return Err(Error::contract(
            "reconstruction grid needs lo < hi and two or more points",
        ));
    }
    let (stages, m) = (model.stages(), model.alphabet());
    for p in prefixes {
        if p.is_empty() || p.len() > stages {
            return Err(Error::contract(format!(
                "prefix length {} outside 1..={stages}",
                p.len()
            )));
        }
        if let Some(&bad) = p.iter().find(|&&c| c >= m) {
            return Err(Error::contract(format!(
                "prefix symbol {bad} is not below alphabet size {m}"
            )));
        }
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    let y_grid: Vec<f64> = (0..resolution).map(|i| lo + i as f64 * step).collect();
    prefixes
        .iter()
        .map(|p| {
            let messages: Vec<_> = p
                .iter()
                .map(|&c| one_hot_matrix(&vec![c; resolution], m))
                .collect();
            let out = model.decode_batch(&y_grid, &messages)?;
            Ok(ReconstructionMap {
                prefix: p.clone(),
                y_grid: y_grid.clone(),
                x_hat: out.into_iter().next_back().expect("one output per stage"),
            })
        })
        .collect()
}

/// CSV rows `prefix,y,x_hat` for a list of maps.
pub fn reconstruction_csv(maps: &[ReconstructionMap], stages: usize, alphabet: usize) -> String {
    let mut s = String::from("prefix,y,x_hat\n");
    for map in maps {
        let label = map.label(stages, alphabet);
        for (y, v) in map.y_grid.iter().zip(&map.x_hat) {
            s.push_str(&format!("{label},{y:.17e},{v:.17e}\n"));
        }
    }
    s
}

/// All prefixes of length `len` in lexicographic order.
pub fn all_prefixes(len: usize, alphabet: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..alphabet).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}
