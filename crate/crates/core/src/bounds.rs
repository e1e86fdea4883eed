//! Rate-distortion references for the Gaussian source `x = y + n` and numerical oracles
//! used to validate the learned rate estimators.

use std::fmt;

use crate::error::{Error, Result};
use crate::math;
use crate::model::RefinementModel;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "{name} must be finite and positive, got {v}"
        )))
    }
}

/// Wyner-Ziv rate in bits for MSE `d` when the decoder knows `y` and `x - y` has
/// variance `noise_variance`.
pub fn wz_rate(d: f64, noise_variance: f64) -> Result<f64> {
    check_positive("distortion", d)?;
    check_positive("noise variance", noise_variance)?;
    Ok((0.5 * math::log2(noise_variance / d)).max(0.0))
}

/// Rate in bits for MSE `d` without side information, `Var(x) = 1 + noise_variance`.
pub fn rate_no_side_info(d: f64, noise_variance: f64) -> Result<f64> {
    check_positive("distortion", d)?;
    check_positive("noise variance", noise_variance)?;
    Ok((0.5 * math::log2((1.0 + noise_variance) / d)).max(0.0))
}

/// Inverse of [`wz_rate`] on its nonzero branch.
pub fn wz_distortion(rate_bits: f64, noise_variance: f64) -> Result<f64> {
    if !(rate_bits >= 0.0) || !rate_bits.is_finite() {
        return Err(Error::domain(format!(
            "rate must be finite and non-negative, got {rate_bits}"
        )));
    }
    check_positive("noise variance", noise_variance)?;
    Ok(noise_variance * math::pow(2.0, -2.0 * rate_bits))
}

/// `10 log10` of the Wyner-Ziv distortion at `rate_bits`.
pub fn wz_distortion_db(rate_bits: f64, noise_variance: f64) -> Result<f64> {
    Ok(math::to_db(wz_distortion(rate_bits, noise_variance)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CurveLabel {
    WzBound,
    NoSideInfo,
    Model,
}

impl CurveLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveLabel::WzBound => "wz_bound",
            CurveLabel::NoSideInfo => "no_side_info",
            CurveLabel::Model => "model",
        }
    }
}

impl fmt::Display for CurveLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurvePoint {
    pub rate_bits: f64,
    pub distortion_mse: f64,
    pub label: CurveLabel,
}

/// Both analytic curves evaluated on a distortion grid, WZ points first.
pub fn analytic_curves(noise_variance: f64, distortions: &[f64]) -> Result<Vec<RdCurvePoint>> {
    let mut out = Vec::with_capacity(2 * distortions.len());
    for &d in distortions {
        out.push(RdCurvePoint {
            rate_bits: wz_rate(d, noise_variance)?,
            distortion_mse: d,
            label: CurveLabel::WzBound,
        });
    }
    for &d in distortions {
        out.push(RdCurvePoint {
            rate_bits: rate_no_side_info(d, noise_variance)?,
            distortion_mse: d,
            label: CurveLabel::NoSideInfo,
        });
    }
    Ok(out)
}

pub const BOUNDS_HEADER: &str = "curve,distortion_mse,rate_bits";

/// CSV body (header line included) for analytic curve points.
pub fn bounds_csv(points: &[RdCurvePoint]) -> String {
    let mut s = String::from(BOUNDS_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{:.17e},{:.17e}\n",
            p.label, p.distortion_mse, p.rate_bits
        ));
    }
    s
}

// ---------------------------------------------------------------------------------------
// Blahut-Arimoto

/// Discretization used by [`blahut_arimoto_gaussian`].
#[derive(Clone, Debug, PartialEq)]
pub struct BaGrid {
    /// Source support points, spread over `±span` standard deviations.
    pub source_points: usize,
    /// Reconstruction alphabet size over the same range.
    pub recon_points: usize,
    pub span: f64,
    pub max_iters: usize,
    /// Stop once the reconstruction marginal moves less than this (max-abs).
    pub tol: f64,
}

impl Default for BaGrid {
    fn default() -> Self {
        Self {
            source_points: 257,
            recon_points: 257,
            span: 6.0,
            max_iters: 20_000,
            tol: 1e-12,
        }
    }
}

/// One point on a discretized rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaPoint {
    pub rate_bits: f64,
    pub distortion: f64,
    pub iterations: usize,
}

/// Rate-distortion point of a discretized `N(0, variance)` source at Lagrange slope
/// `beta` (nats per unit of squared error), by Blahut-Arimoto iteration.
///
/// The source mass of each grid point is the Gaussian probability of its cell.
///
/// Because `x | y` is `N(y, noise_variance)` for every `y` and squared error is
/// translation invariant, the conditional rate-distortion function `min I(X; U | Y)`
/// equals this curve for `variance = noise_variance`.
pub fn blahut_arimoto_gaussian(variance: f64, beta: f64, grid: &BaGrid) -> Result<BaPoint> {
    check_positive("variance", variance)?;
    check_positive("beta", beta)?;
    if grid.source_points < 2 || grid.recon_points < 2 {
        return Err(Error::contract(
            "need at least two source and reconstruction points",
        ));
    }
    let sd = variance.sqrt();
    let lo = -grid.span * sd;
    let step_x = 2.0 * grid.span * sd / (grid.source_points - 1) as f64;
    let xs: Vec<f64> = (0..grid.source_points)
        .map(|i| lo + i as f64 * step_x)
        .collect();
    let px: Vec<f64> = {
        let mass: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let a = if i == 0 {
                    f64::NEG_INFINITY
                } else {
                    (x - 0.5 * step_x) / sd
                };
                let b = if i + 1 == xs.len() {
                    f64::INFINITY
                } else {
                    (x + 0.5 * step_x) / sd
                };
                normal_mass(a, b)
            })
            .collect();
        let total: f64 = mass.iter().sum();
        mass.into_iter().map(|m| m / total).collect()
    };
    let step_u = 2.0 * grid.span * sd / (grid.recon_points - 1) as f64;
    let us: Vec<f64> = (0..grid.recon_points)
        .map(|j| lo + j as f64 * step_u)
        .collect();
    let nu = us.len();

    let dist: Vec<f64> = xs
        .iter()
        .flat_map(|&x| us.iter().map(move |&u| (x - u) * (x - u)))
        .collect();
    let kernel: Vec<f64> = dist.iter().map(|&d| math::exp(-beta * d)).collect();

    let mut q = vec![1.0 / nu as f64; nu];
    let mut cond = vec![0.0; kernel.len()];
    let mut iterations = 0;
    for it in 0..grid.max_iters {
        iterations = it + 1;
        let mut next = vec![0.0; nu];
        for (i, &p) in px.iter().enumerate() {
            let row = &kernel[i * nu..(i + 1) * nu];
            let z: f64 = row.iter().zip(&q).map(|(k, q)| k * q).sum();
            if !(z > 0.0) {
                return Err(Error::Accuracy(format!(
                    "beta {beta} underflows the kernel at x = {}",
                    xs[i]
                )));
            }
            let c = &mut cond[i * nu..(i + 1) * nu];
            for j in 0..nu {
                c[j] = row[j] * q[j] / z;
                next[j] += p * c[j];
            }
        }
        let delta = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if delta < grid.tol {
            break;
        }
    }

    let mut rate = 0.0;
    let mut distortion = 0.0;
    for (i, &p) in px.iter().enumerate() {
        for j in 0..nu {
            let c = cond[i * nu + j];
            if c > 0.0 && q[j] > 0.0 {
                rate += p * c * math::log2(c / q[j]);
            }
            distortion += p * c * dist[i * nu + j];
        }
    }
    Ok(BaPoint {
        rate_bits: rate,
        distortion,
        iterations,
    })
}

/// `P(a < Z < b)` for standard normal `Z`, evaluated on the tail side that keeps
/// precision.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    let s = std::f64::consts::SQRT_2;
    if a > 0.0 {
        0.5 * (math::erfc(a / s) - math::erfc(b / s))
    } else if b < 0.0 {
        0.5 * (math::erfc(-b / s) - math::erfc(-a / s))
    } else {
        1.0 - 0.5 * math::erfc(-a / s) - 0.5 * math::erfc(b / s)
    }
}

// ---------------------------------------------------------------------------------------
// Conditional-entropy oracle

/// A deterministic map from source values to full message tuples.
pub trait CodeMap {
    fn stages(&self) -> usize;
    /// `out[i]` is the message tuple `m_1..m_K` for `xs[i]`.
    fn codes(&self, xs: &[f64]) -> Result<Vec<Vec<usize>>>;
}

/// A code map given by a plain function.
pub struct FnCodeMap<F> {
    pub stages: usize,
    pub f: F,
}

impl<F: Fn(f64) -> Vec<usize>> CodeMap for FnCodeMap<F> {
    fn stages(&self) -> usize {
        self.stages
    }

    fn codes(&self, xs: &[f64]) -> Result<Vec<Vec<usize>>> {
        Ok(xs.iter().map(|&x| (self.f)(x)).collect())
    }
}

const CODE_CHUNK: usize = 4096;

/// Inference-mode (hard argmax) encoder.
impl CodeMap for RefinementModel {
    fn stages(&self) -> usize {
        RefinementModel::stages(self)
    }

    fn codes(&self, xs: &[f64]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CODE_CHUNK) {
            let per_stage = self.hard_codes(chunk)?;
            for n in 0..chunk.len() {
                out.push(per_stage.iter().map(|c| c[n]).collect());
            }
        }
        Ok(out)
    }
}

/// An interval of `x` on which the code map is constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub code: Vec<usize>,
}

/// Splits `[lo, hi]` into constant-code pieces by a uniform scan of `scan_points`
/// points, with each code change bisected down to `boundary_tol`. Only the first
/// `prefix_len` code symbols are compared. Pieces narrower than the scan step can go
/// undetected; refine the scan to check.
pub fn find_pieces(
    map: &dyn CodeMap,
    lo: f64,
    hi: f64,
    scan_points: usize,
    prefix_len: usize,
    boundary_tol: f64,
) -> Result<Vec<Piece>> {
    find_pieces_by(map, lo, hi, scan_points, boundary_tol, &|c: &[usize]| {
        c[..prefix_len].to_vec()
    })
}

/// As [`find_pieces`], comparing `key(code)` instead of a prefix. Piece codes are keys.
pub fn find_pieces_by(
    map: &dyn CodeMap,
    lo: f64,
    hi: f64,
    scan_points: usize,
    boundary_tol: f64,
    key: &dyn Fn(&[usize]) -> Vec<usize>,
) -> Result<Vec<Piece>> {
    if !(hi > lo) || scan_points < 2 {
        return Err(Error::contract(
            "scan needs hi > lo and at least two points",
        ));
    }
    let step = (hi - lo) / (scan_points - 1) as f64;
    let xs: Vec<f64> = (0..scan_points).map(|i| lo + i as f64 * step).collect();
    let codes: Vec<Vec<usize>> = map.codes(&xs)?.iter().map(|c| key(c)).collect();

    // Brackets (left x, right x, left key) around each change, bisected in lockstep.
    let mut brackets: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    for i in 1..xs.len() {
        if codes[i] != codes[i - 1] {
            brackets.push((xs[i - 1], xs[i], codes[i - 1].clone()));
        }
    }
    loop {
        let open: Vec<usize> = (0..brackets.len())
            .filter(|&i| brackets[i].1 - brackets[i].0 > boundary_tol)
            .collect();
        if open.is_empty() {
            break;
        }
        let mids: Vec<f64> = open
            .iter()
            .map(|&i| 0.5 * (brackets[i].0 + brackets[i].1))
            .collect();
        let mid_codes = map.codes(&mids)?;
        for ((&i, m), c) in open.iter().zip(mids).zip(mid_codes) {
            let (a, b, left) = &mut brackets[i];
            if m <= *a || m >= *b {
                // no representable midpoint left
                *b = *a;
            } else if key(&c) == *left {
                *a = m;
            } else {
                *b = m;
            }
        }
    }

    let mut pieces = Vec::with_capacity(brackets.len() + 1);
    let mut start = lo;
    for (a, b, left) in brackets {
        let edge = 0.5 * (a + b);
        pieces.push(Piece {
            lo: start,
            hi: edge,
            code: left,
        });
        start = edge;
    }
    pieces.push(Piece {
        lo: start,
        hi,
        code: codes.last().expect("scan is nonempty").clone(),
    });
    Ok(pieces)
}

/// Settings for [`oracle_conditional_entropy`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGrid {
    /// Standard deviations of `y` (and of `x | y`) covered by the integration ranges.
    pub span: f64,
    pub scan_points: usize,
    pub boundary_tol: f64,
    /// Uniform panels over the `y` range, before local refinement around boundaries.
    pub y_panels: usize,
    pub gl_order: usize,
    /// Largest accepted change between the panel layout and its halving, in bits.
    pub tolerance: f64,
}

impl Default for OracleGrid {
    fn default() -> Self {
        Self {
            span: 6.0,
            scan_points: 20_001,
            boundary_tol: 1e-10,
            y_panels: 96,
            gl_order: 8,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleEstimate {
    pub bits: f64,
    /// Difference between the panel layout and its halving.
    pub quadrature_error: f64,
    /// Upper bound on the contribution of `|y| > span`.
    pub truncation_bits: f64,
    pub pieces: usize,
}

/// `H(M_k | M_1^{k-1}, Y)` in bits for the deterministic code map, with `k` 1-based.
///
/// Bin boundaries of the first `k` symbols are located by [`find_pieces`]. For each `y`,
/// the probability of a prefix is the exact Gaussian mass of `x | y ~ N(y, noise_variance)`
/// over its pieces. The outer average over `y ~ N(0, 1)` is composite Gauss-Legendre
/// with extra panel breaks near every bin boundary.
pub fn oracle_conditional_entropy(
    map: &dyn CodeMap,
    stage: usize,
    noise_variance: f64,
    grid: &OracleGrid,
) -> Result<OracleEstimate> {
    check_positive("noise variance", noise_variance)?;
    if stage == 0 || stage > map.stages() {
        return Err(Error::contract(format!(
            "stage {stage} outside 1..={}",
            map.stages()
        )));
    }
    if grid.span < 6.0 {
        return Err(Error::Accuracy(format!(
            "integration span {} is below 6 standard deviations",
            grid.span
        )));
    }
    let sn = noise_variance.sqrt();
    let x_range = grid.span * (1.0 + sn);
    let pieces = find_pieces(
        map,
        -x_range,
        x_range,
        grid.scan_points,
        stage,
        grid.boundary_tol,
    )?;
    let bounds: Vec<f64> = pieces.iter().skip(1).map(|p| p.lo).collect();

    // Distinct prefixes of length k and k-1, and the piece -> prefix index maps.
    let index_of = |len: usize| {
        let mut keys: Vec<Vec<usize>> = Vec::new();
        let idx: Vec<usize> = pieces
            .iter()
            .map(|p| {
                let key = p.code[..len].to_vec();
                match keys.iter().position(|k| *k == key) {
                    Some(i) => i,
                    None => {
                        keys.push(key);
                        keys.len() - 1
                    }
                }
            })
            .collect();
        (idx, keys.len())
    };
    let (full_idx, n_full) = index_of(stage);
    let (prev_idx, n_prev) = index_of(stage - 1);

    let integrand = |y: f64| -> f64 {
        let mut pf = vec![0.0; n_full];
        let mut pp = vec![0.0; n_prev];
        for (j, _) in pieces.iter().enumerate() {
            let a = if j == 0 {
                f64::NEG_INFINITY
            } else {
                (bounds[j - 1] - y) / sn
            };
            let b = if j + 1 == pieces.len() {
                f64::INFINITY
            } else {
                (bounds[j] - y) / sn
            };
            let m = normal_mass(a, b);
            pf[full_idx[j]] += m;
            pp[prev_idx[j]] += m;
        }
        let h = |p: &[f64]| -> f64 {
            p.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -v * math::log2(v))
                .sum::<f64>()
        };
        (h(&pf) - h(&pp)).max(0.0)
    };

    let ylim = grid.span;
    let mut breaks: Vec<f64> = (0..=grid.y_panels)
        .map(|i| -ylim + 2.0 * ylim * i as f64 / grid.y_panels as f64)
        .collect();
    for &b in &bounds {
        for s in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            for sign in [-1.0, 1.0] {
                let t = b + sign * s * sn;
                if t > -ylim && t < ylim {
                    breaks.push(t);
                }
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let (nodes, weights) = math::gauss_legendre(grid.gl_order);
    let density = |y: f64| math::exp(-0.5 * y * y) / (2.0 * std::f64::consts::PI).sqrt();
    let integrate = |edges: &[f64]| -> f64 {
        let mut total = 0.0;
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
            for (t, wt) in nodes.iter().zip(&weights) {
                let y = c + r * t;
                total += r * wt * density(y) * integrand(y);
            }
        }
        total
    };
    let coarse = integrate(&breaks);
    let mut halved = Vec::with_capacity(2 * breaks.len());
    for w in breaks.windows(2) {
        halved.push(w[0]);
        halved.push(0.5 * (w[0] + w[1]));
    }
    halved.push(*breaks.last().expect("at least two breaks"));
    let fine = integrate(&halved);

    let max_entropy = math::log2(map_alphabet_bound(&pieces, stage) as f64);
    let truncation_bits = 2.0 * normal_mass(ylim, f64::INFINITY) * max_entropy;
    let quadrature_error = (fine - coarse).abs();
    if quadrature_error > grid.tolerance {
        return Err(Error::Accuracy(format!(
            "quadrature changed by {quadrature_error:.3e} bits when panels were halved"
        )));
    }
    Ok(OracleEstimate {
        bits: fine,
        quadrature_error,
        truncation_bits,
        pieces: pieces.len(),
    })
}

fn map_alphabet_bound(pieces: &[Piece], stage: usize) -> usize {
    pieces
        .iter()
        .map(|p| p.code[stage - 1] + 1)
        .max()
        .unwrap_or(1)
        .max(2)
}
