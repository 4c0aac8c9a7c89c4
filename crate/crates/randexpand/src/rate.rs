//! Rate functions (certified bits per round as a function of the Bell
//! value), the interval partition, the min-entropy certifier, and exact
//! brute-force oracles that verify the certifier's guarantees by full
//! enumeration at small n.

use thiserror::Error;

use crate::bell::{
    bell_value, concentration_const, estimate_ihat, BellCoefficients, BellError,
    InputDistribution, Round, Transcript,
};
use crate::device::{new_engine, DeviceError, DeviceStrategy, InteractionEngine};

/// Slack tolerated above the rate domain before evaluation is an error.
pub const DOMAIN_TOL: f64 = 1e-9;

/// Hard cap on enumerated paths in the oracles.
pub const MAX_ENUMERATION: u128 = 1 << 21;

#[derive(Debug, Error)]
pub enum RateError {
    #[error("Bell value {0} above the rate domain end {1}")]
    AboveDomain(f64, f64),
    #[error("certification requires a convex rate function")]
    NonConvexRate,
    #[error("invalid rate table: {0}")]
    InvalidTable(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("enumeration size {0} exceeds cap {MAX_ENUMERATION}")]
    EnumerationTooLarge(u128),
    #[error("conditioning event has zero probability")]
    ZeroProbabilityEvent,
    #[error(transparent)]
    Bell(#[from] BellError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone)]
enum RateKind {
    /// max(0, 1 − log₂(1 + √(2 − I²/4))) — the closed-form CHSH bound.
    ChshAnalytic,
    /// Step envelope: value at the smallest stored grid point ≥ I.
    StepEnvelope { grid: Vec<f64>, values: Vec<f64> },
    /// Linear interpolation between table rows.
    PiecewiseLinear { xs: Vec<f64>, ys: Vec<f64> },
}

/// A map from Bell value to certified bits per round on [i0, i_max].
/// Below-domain evaluation clamps to 0 (a device can always be classical);
/// above-domain evaluation is an error — it indicates a simulator bug.
#[derive(Debug, Clone)]
pub struct RateFunction {
    pub name: String,
    pub i0: f64,
    pub i_max: f64,
    /// Set only when midpoint convexity has been established; Theorem 1
    /// style certification requires it.
    pub convex: bool,
    kind: RateKind,
}

impl RateFunction {
    pub fn eval(&self, i: f64) -> Result<f64, RateError> {
        if i > self.i_max + DOMAIN_TOL {
            return Err(RateError::AboveDomain(i, self.i_max));
        }
        if i < self.i0 {
            return Ok(0.0);
        }
        let i = i.min(self.i_max);
        Ok(match &self.kind {
            RateKind::ChshAnalytic => {
                let arg = (2.0 - i * i / 4.0).max(0.0);
                (1.0 - (1.0 + arg.sqrt()).log2()).max(0.0)
            }
            RateKind::StepEnvelope { grid, values } => {
                let k = grid.partition_point(|&g| g < i - 1e-12).min(grid.len() - 1);
                values[k]
            }
            RateKind::PiecewiseLinear { xs, ys } => {
                let k = xs.partition_point(|&x| x <= i);
                if k == 0 {
                    ys[0]
                } else if k == xs.len() {
                    *ys.last().unwrap()
                } else {
                    let t = (i - xs[k - 1]) / (xs[k] - xs[k - 1]);
                    ys[k - 1] + t * (ys[k] - ys[k - 1])
                }
            }
        })
    }
}

/// The analytical CHSH rate lower bound; convex, 0 at I=2, 1 at I=2√2.
pub fn chsh_analytic_rate() -> RateFunction {
    RateFunction {
        name: "chsh-analytic".to_string(),
        i0: 2.0,
        i_max: 2.0 * 2.0f64.sqrt(),
        convex: true,
        kind: RateKind::ChshAnalytic,
    }
}

/// A piecewise-linear rate function from table rows (I, bits). Convexity,
/// monotonicity and nonnegativity are verified on load.
pub fn piecewise_linear(name: &str, points: &[(f64, f64)]) -> Result<RateFunction, RateError> {
    if points.len() < 2 {
        return Err(RateError::InvalidTable("need at least two rows".into()));
    }
    for w in points.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(RateError::InvalidTable(format!(
                "rows not strictly increasing in I at {}",
                w[1].0
            )));
        }
        if w[1].1 < w[0].1 - 1e-12 {
            return Err(RateError::InvalidTable(format!("decreasing value at I = {}", w[1].0)));
        }
    }
    if points[0].1 < 0.0 {
        return Err(RateError::InvalidTable("negative rate value".into()));
    }
    // Convexity: slopes must be nondecreasing.
    let mut prev_slope = f64::NEG_INFINITY;
    for w in points.windows(2) {
        let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
        if slope < prev_slope - 1e-9 {
            return Err(RateError::InvalidTable(format!("not convex near I = {}", w[0].0)));
        }
        prev_slope = slope;
    }
    Ok(RateFunction {
        name: name.to_string(),
        i0: points[0].0,
        i_max: points.last().unwrap().0,
        convex: true,
        kind: RateKind::PiecewiseLinear {
            xs: points.iter().map(|p| p.0).collect(),
            ys: points.iter().map(|p| p.1).collect(),
        },
    })
}

/// A brute-force sanity envelope for the single-round rate h: scans a fixed
/// grid of two-qubit strategies (the singlet mixed with |00⟩ at 21 weights,
/// projective measurement angles on a 24-step circle per input) and records,
/// for each grid Bell value I, the smallest min_{x,y}(−log₂ max_{ab} P(ab|xy))
/// among strategies with Bell value ≥ I. This is NOT a certified computation
/// of h — it upper-bounds h on the grid and is used to sanity-check that the
/// analytic lower bound stays below it.
pub fn brute_force_rate() -> RateFunction {
    const STEPS: usize = 24;
    const WEIGHTS: usize = 21;
    const GRID: usize = 415;
    let i0 = 2.0;
    let i_max = 2.0 * 2.0f64.sqrt();
    let width = (i_max - i0) / GRID as f64;
    // cos(θ_i − θ_j) depends only on (i − j) mod STEPS, so one table serves
    // both the marginals and the correlators.
    let cos_t: Vec<f64> = (0..STEPS)
        .map(|k| (2.0 * std::f64::consts::PI * k as f64 / STEPS as f64).cos())
        .collect();
    // best[k] = smallest g among strategies whose Bell value lies in grid bin k
    let mut best = vec![f64::INFINITY; GRID + 1];
    for wi in 0..WEIGHTS {
        let w = wi as f64 / (WEIGHTS - 1) as f64;
        for ax0 in 0..STEPS {
            for ax1 in 0..STEPS {
                for by0 in 0..STEPS {
                    for by1 in 0..STEPS {
                        let a_marg = [(1.0 - w) * cos_t[ax0], (1.0 - w) * cos_t[ax1]];
                        let b_marg = [(1.0 - w) * cos_t[by0], (1.0 - w) * cos_t[by1]];
                        let axs = [ax0, ax1];
                        let bys = [by0, by1];
                        let mut corr = [[0.0; 2]; 2];
                        for x in 0..2 {
                            for y in 0..2 {
                                let d = (axs[x] + STEPS - bys[y]) % STEPS;
                                corr[x][y] = w * cos_t[d]
                                    + (1.0 - w) * cos_t[axs[x]] * cos_t[bys[y]];
                            }
                        }
                        let i_val = corr[0][0] + corr[0][1] + corr[1][0] - corr[1][1];
                        if i_val < i0 - 1e-12 {
                            continue;
                        }
                        let mut g = f64::INFINITY;
                        for x in 0..2 {
                            for y in 0..2 {
                                let (ma, mb, e) = (a_marg[x], b_marg[y], corr[x][y]);
                                let max_p = [
                                    ma + mb + e,
                                    ma - mb - e,
                                    -ma + mb - e,
                                    -ma - mb + e,
                                ]
                                .into_iter()
                                .fold(f64::NEG_INFINITY, f64::max);
                                let p = ((1.0 + max_p) / 4.0).clamp(0.0, 1.0);
                                g = g.min(-(p.max(f64::MIN_POSITIVE)).log2());
                            }
                        }
                        let bin = if i_val >= i_max - 1e-9 {
                            GRID
                        } else {
                            (((i_val - i0) / width) as usize).min(GRID)
                        };
                        if g < best[bin] {
                            best[bin] = g;
                        }
                    }
                }
            }
        }
    }
    // suffix min: envelope(grid[k]) covers strategies with Bell value ≥ grid[k]
    let mut suffix = f64::INFINITY;
    let mut values = vec![0.0; GRID + 1];
    for k in (0..=GRID).rev() {
        suffix = suffix.min(best[k]);
        values[k] = if suffix.is_finite() { suffix } else { 0.0 };
    }
    let grid: Vec<f64> = (0..=GRID).map(|k| i0 + k as f64 * width).collect();
    RateFunction {
        name: "brute-force-envelope".to_string(),
        i0,
        i_max,
        convex: false,
        kind: RateKind::StepEnvelope { grid, values },
    }
}

/// The partition Ω_0, …, Ω_{m−1} of [i0, i_max] by boundary points
/// J_0 ≤ … ≤ J_{m−1}; Ω_ℓ = [J_ℓ, J_{ℓ+1}) and the top block is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalPartition {
    boundaries: Vec<f64>,
    pub i_max: f64,
}

impl IntervalPartition {
    pub fn new(boundaries: &[f64], i0: f64, i_max: f64) -> Result<Self, RateError> {
        if boundaries.is_empty() {
            return Err(RateError::InvalidPartition("no boundary points".into()));
        }
        if boundaries[0] != i0 {
            return Err(RateError::InvalidPartition(format!(
                "J_0 = {} must equal i0 = {i0}",
                boundaries[0]
            )));
        }
        for w in boundaries.windows(2) {
            if w[1] < w[0] {
                return Err(RateError::InvalidPartition("boundaries decrease".into()));
            }
        }
        if *boundaries.last().unwrap() > i_max {
            return Err(RateError::InvalidPartition(format!(
                "J_{{m−1}} = {} above i_max = {i_max}",
                boundaries.last().unwrap()
            )));
        }
        Ok(Self { boundaries: boundaries.to_vec(), i_max })
    }

    /// The standard CHSH example partition {2, 2.2, 2.4, 2.6}.
    pub fn chsh_example() -> Self {
        Self::new(&[2.0, 2.2, 2.4, 2.6], 2.0, 2.0 * 2.0f64.sqrt()).unwrap()
    }

    pub fn m(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundary(&self, ell: usize) -> f64 {
        self.boundaries[ell]
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }
}

/// The index ℓ with Î − ε ∈ Ω_ℓ, clamped into {0, …, m−1} outside the range.
pub fn assign_interval(i_hat: f64, eps: f64, p: &IntervalPartition) -> usize {
    let v = i_hat - eps;
    // largest ℓ with J_ℓ ≤ v (blocks are left-closed)
    p.boundaries.partition_point(|&j| j <= v).saturating_sub(1)
}

/// The estimator slack ε and smoothing δ of the certification statement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificationParams {
    pub eps: f64,
    pub delta: f64,
}

impl CertificationParams {
    pub fn new(eps: f64, delta: f64) -> Result<Self, RateError> {
        if eps <= 0.0 || delta <= 0.0 {
            return Err(RateError::InvalidParams(format!(
                "eps = {eps} and delta = {delta} must be strictly positive"
            )));
        }
        Ok(Self { eps, delta })
    }
}

/// Everything the certifier concluded from one transcript.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub i_hat: f64,
    pub ell: usize,
    /// n·rate(J_ℓ) − δn − 1; may be negative, reported as-is.
    pub minentropy_bound: f64,
    pub vacuous: bool,
    /// min(1, m·2^{−δn} + 3·2^{−c(p_min)ε²n})
    pub failure_prob_bound: f64,
    pub n: usize,
    pub params: CertificationParams,
    pub partition: IntervalPartition,
    pub p_min: f64,
    pub rate_name: String,
}

/// Certifies a min-entropy bound from observed data: Î → ℓ →
/// n·rate(J_ℓ) − δn − 1, with the stated failure probability.
pub fn certify(
    t: &Transcript,
    c: &BellCoefficients,
    rate: &RateFunction,
    p: &IntervalPartition,
    params: &CertificationParams,
) -> Result<CertificationReport, RateError> {
    if !rate.convex {
        return Err(RateError::NonConvexRate);
    }
    let n = t.n();
    let i_hat = estimate_ihat(t, c)?;
    let ell = assign_interval(i_hat, params.eps, p);
    let nf = n as f64;
    let bound = nf * rate.eval(p.boundary(ell))? - params.delta * nf - 1.0;
    let cc = concentration_const(t.input_dist.p_min, c)?;
    let failure = (p.m() as f64 * 2f64.powf(-params.delta * nf)
        + 3.0 * 2f64.powf(-cc * params.eps * params.eps * nf))
    .min(1.0);
    Ok(CertificationReport {
        i_hat,
        ell,
        minentropy_bound: bound,
        vacuous: bound <= 0.0,
        failure_prob_bound: failure,
        n,
        params: *params,
        partition: p.clone(),
        p_min: t.input_dist.p_min,
        rate_name: rate.name.clone(),
    })
}

// ---------------------------------------------------------------------------
// Exact enumeration oracles.
// ---------------------------------------------------------------------------

/// One complete outcome path for a fixed input sequence.
#[derive(Debug, Clone, Copy)]
pub struct PathRecord {
    /// P(a,b | x,y): the chain-rule product of conditional round probabilities.
    pub p_cond: f64,
    /// The data-only estimate Î of this path.
    pub i_hat: f64,
    /// The true average Bell value Ī along this path.
    pub i_bar: f64,
}

/// All positive-probability paths of a device over n rounds, grouped by
/// input sequence (index Σ_j (x_j·ny + y_j)·(nx·ny)^j).
#[derive(Debug)]
pub struct PathEnumeration {
    pub n: usize,
    pub input_dist: InputDistribution,
    pub records: Vec<Vec<PathRecord>>,
}

impl PathEnumeration {
    /// P(x,y) of the input sequence with the given index.
    pub fn input_prob(&self, mut idx: usize) -> f64 {
        let (nx, ny) = (self.input_dist.nx, self.input_dist.ny);
        let mut p = 1.0;
        for _ in 0..self.n {
            let xy = idx % (nx * ny);
            p *= self.input_dist.prob(xy / ny, xy % ny);
            idx /= nx * ny;
        }
        p
    }
}

#[allow(clippy::too_many_arguments)]
fn enumerate_recurse(
    engine: &InteractionEngine,
    c: &BellCoefficients,
    dist_in: &InputDistribution,
    n: usize,
    depth: usize,
    in_idx: usize,
    p_cond: f64,
    ihat_sum: f64,
    ibar_sum: f64,
    out: &mut [Vec<PathRecord>],
) -> Result<(), RateError> {
    if depth == n {
        out[in_idx].push(PathRecord {
            p_cond,
            i_hat: ihat_sum / n as f64,
            i_bar: ibar_sum / n as f64,
        });
        return Ok(());
    }
    let al = engine.strategy().alphabets();
    let dist = engine.round_distribution()?;
    let i_j = bell_value(&dist, c)?;
    let stride = (al.x * al.y).pow(depth as u32);
    for x in 0..al.x {
        for y in 0..al.y {
            let child_in = in_idx + (x * al.y + y) * stride;
            for a in 0..al.a {
                for b in 0..al.b {
                    let p = dist.prob(a, b, x, y);
                    if p <= 0.0 {
                        continue;
                    }
                    let mut child = engine.clone();
                    child.force_round(x, y, a, b)?;
                    enumerate_recurse(
                        &child,
                        c,
                        dist_in,
                        n,
                        depth + 1,
                        child_in,
                        p_cond * p,
                        ihat_sum + c.coeff(a, b, x, y) / dist_in.prob(x, y),
                        ibar_sum + i_j,
                        out,
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Fully enumerates every (input, outcome) path of the device at small n.
pub fn enumerate_device(
    s: &DeviceStrategy,
    input_dist: &InputDistribution,
    c: &BellCoefficients,
    n: usize,
) -> Result<PathEnumeration, RateError> {
    let al = s.alphabets();
    let total = ((al.a * al.b * al.x * al.y) as u128).pow(n as u32);
    if total > MAX_ENUMERATION {
        return Err(RateError::EnumerationTooLarge(total));
    }
    let engine = new_engine(s, 0)?;
    let n_inputs = (al.x * al.y).pow(n as u32);
    let mut records = vec![Vec::new(); n_inputs];
    enumerate_recurse(&engine, c, input_dist, n, 0, 0, 1.0, 0.0, 0.0, &mut records)?;
    Ok(PathEnumeration { n, input_dist: input_dist.clone(), records })
}

/// Exact guessing probability of the outcome sequence for fixed inputs,
/// conditioned on a predicate over the complete round sequence:
/// max over outcome sequences of P(a,b | x,y, event).
pub fn oracle_guessing(
    s: &DeviceStrategy,
    inputs: &[(usize, usize)],
    condition: &dyn Fn(&[Round]) -> bool,
) -> Result<f64, RateError> {
    let al = s.alphabets();
    let n = inputs.len();
    let total = ((al.a * al.b) as u128).pow(n as u32);
    if total > MAX_ENUMERATION {
        return Err(RateError::EnumerationTooLarge(total));
    }
    fn recurse(
        engine: &InteractionEngine,
        inputs: &[(usize, usize)],
        depth: usize,
        p: f64,
        rounds: &mut Vec<Round>,
        condition: &dyn Fn(&[Round]) -> bool,
        acc: &mut (f64, f64),
    ) -> Result<(), RateError> {
        if depth == inputs.len() {
            if condition(rounds) {
                acc.0 = acc.0.max(p);
                acc.1 += p;
            }
            return Ok(());
        }
        let (x, y) = inputs[depth];
        let al = engine.strategy().alphabets();
        for a in 0..al.a {
            for b in 0..al.b {
                let mut child = engine.clone();
                let pr = child.force_round(x, y, a, b)?;
                if pr <= 0.0 {
                    continue;
                }
                rounds.push(Round { x, y, a, b });
                recurse(&child, inputs, depth + 1, p * pr, rounds, condition, acc)?;
                rounds.pop();
            }
        }
        Ok(())
    }
    let engine = new_engine(s, 0)?;
    let mut acc = (0.0f64, 0.0f64);
    recurse(&engine, inputs, 0, 1.0, &mut Vec::new(), condition, &mut acc)?;
    if acc.1 <= 0.0 {
        return Err(RateError::ZeroProbabilityEvent);
    }
    Ok(acc.0 / acc.1)
}

/// The exact construction of the certification statement's good event and
/// the quantities both of its inequalities are about.
#[derive(Debug, Clone)]
pub struct GoodEventModel {
    pub n: usize,
    pub m: usize,
    /// P[Ī ≤ Î − ε]
    pub p_bguess: f64,
    /// number of input sequences with P[bad | x,y] ≥ 1/2
    pub b1_count: usize,
    pub p_good: f64,
    /// 1 − m·2^{−δn} − 3·2^{−c(p_min)ε²n}; may be negative at small n
    pub p_good_lower_bound: f64,
    /// max over (x,y,ℓ) of Guess(AB | x,y,ℓ,G) / 2^{−n·rate(J_ℓ)+δn+1};
    /// ≤ 1 iff the guessing inequality holds everywhere it applies
    pub max_guess_excess: f64,
}

/// Builds the good event G = G^guess ∧ G₁ ∧ G₂ from an exact path
/// enumeration and evaluates both certification inequalities on it.
pub fn oracle_good_event(
    en: &PathEnumeration,
    c: &BellCoefficients,
    rate: &RateFunction,
    p: &IntervalPartition,
    params: &CertificationParams,
) -> Result<GoodEventModel, RateError> {
    if !rate.convex {
        return Err(RateError::NonConvexRate);
    }
    let n = en.n;
    let nf = n as f64;
    let m = p.m();
    let thresh_b2 = 2f64.powf(-params.delta * nf);
    let per_path_ell =
        |r: &PathRecord| -> usize { assign_interval(r.i_hat, params.eps, p) };
    let is_bad = |r: &PathRecord| -> bool { r.i_bar <= r.i_hat - params.eps };

    let mut p_bguess = 0.0;
    let mut b1_count = 0;
    let mut p_good = 0.0;
    // (max path prob, total prob) over G-paths, per ℓ aggregated over (x,y)
    // is wrong — the guessing bound is per (x,y,ℓ), so track per input seq.
    let mut max_excess = 0.0f64;
    for (in_idx, recs) in en.records.iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        let p_xy = en.input_prob(in_idx);
        let p_bad_xy: f64 = recs.iter().filter(|r| is_bad(r)).map(|r| r.p_cond).sum();
        let p_tot_xy: f64 = recs.iter().map(|r| r.p_cond).sum();
        p_bguess += p_xy * p_bad_xy;
        let in_b1 = p_bad_xy / p_tot_xy >= 0.5;
        if in_b1 {
            b1_count += 1;
            continue; // G requires (x,y) ∉ B₁
        }
        let p_gg_xy = p_tot_xy - p_bad_xy;
        if p_gg_xy <= 0.0 {
            continue;
        }
        // P(ℓ | x,y, G^guess) per ℓ, to decide B₂ membership
        let mut p_ell_gg = vec![0.0; m];
        for r in recs.iter().filter(|r| !is_bad(r)) {
            p_ell_gg[per_path_ell(r)] += r.p_cond;
        }
        for ell in 0..m {
            if p_ell_gg[ell] <= 0.0 || p_ell_gg[ell] / p_gg_xy <= thresh_b2 {
                continue; // (x,y,ℓ) ∈ B₂ or unreachable: excluded from G
            }
            let mut max_p = 0.0f64;
            let mut sum_p = 0.0;
            for r in recs.iter().filter(|r| !is_bad(r) && per_path_ell(r) == ell) {
                max_p = max_p.max(r.p_cond);
                sum_p += r.p_cond;
            }
            p_good += p_xy * sum_p;
            let guess = max_p / sum_p;
            let bound = 2f64.powf(-nf * rate.eval(p.boundary(ell))? + params.delta * nf + 1.0);
            max_excess = max_excess.max(guess / bound);
        }
    }
    let cc = concentration_const(en.input_dist.p_min, c)?;
    let lower = 1.0
        - m as f64 * 2f64.powf(-params.delta * nf)
        - 3.0 * 2f64.powf(-cc * params.eps * params.eps * nf);
    Ok(GoodEventModel {
        n,
        m,
        p_bguess,
        b1_count,
        p_good,
        p_good_lower_bound: lower,
        max_guess_excess: max_excess,
    })
}

/// Checks the pointwise chain-rule bound P(a,b|x,y) ≤ 2^{−n·rate(Ī)} for
/// every input and outcome sequence. Sound for any convex lower bound on
/// the true rate: substituting a smaller rate only weakens the right side.
pub fn verify_eq3(
    s: &DeviceStrategy,
    n: usize,
    rate: &RateFunction,
    c: &BellCoefficients,
) -> Result<bool, RateError> {
    let al = s.alphabets();
    let uniform = InputDistribution::uniform(al.x, al.y);
    let en = enumerate_device(s, &uniform, c, n)?;
    for recs in &en.records {
        for r in recs {
            let rhs = 2f64.powf(-(n as f64) * rate.eval(r.i_bar.min(rate.i_max))?);
            if r.p_cond > rhs * (1.0 + 1e-9) + 1e-12 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
