//! Bell coefficients, Bell values, the transcript estimator Î and the
//! martingale tail bound on the gap between Î and the true average value.

use thiserror::Error;

use crate::qmath::TOL_PROB;

#[derive(Debug, Error)]
pub enum BellError {
    #[error("alphabet mismatch: {0}")]
    AlphabetMismatch(String),
    #[error("deterministic strategy space too large ({0} > {1})")]
    SearchSpaceTooLarge(u128, u128),
    #[error("transcript round {round} uses input ({x},{y}) with zero declared probability")]
    ZeroProbabilityInput { round: usize, x: usize, y: usize },
    #[error("p_min must be positive, got {0}")]
    NonPositivePMin(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Alphabet sizes shared by coefficients, distributions and transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alphabets {
    pub a: usize,
    pub b: usize,
    pub x: usize,
    pub y: usize,
}

impl Alphabets {
    pub const CHSH: Alphabets = Alphabets { a: 2, b: 2, x: 2, y: 2 };
}

/// A set of Bell coefficients c_abxy together with the classical bound I₀,
/// the quantum maximum and the largest coefficient.
#[derive(Debug, Clone)]
pub struct BellCoefficients {
    pub alphabets: Alphabets,
    /// Indexed by ((a * |B| + b) * |X| + x) * |Y| + y.
    coeffs: Vec<f64>,
    pub i0: f64,
    pub i_max: f64,
    pub c_max: f64,
    /// Identifier used in transcript headers ("chsh" or "custom").
    pub id: String,
}

impl BellCoefficients {
    pub fn new(
        alphabets: Alphabets,
        coeffs: Vec<f64>,
        i0: f64,
        i_max: f64,
        id: &str,
    ) -> Result<Self, BellError> {
        let len = alphabets.a * alphabets.b * alphabets.x * alphabets.y;
        if coeffs.len() != len {
            return Err(BellError::AlphabetMismatch(format!(
                "coefficient table has {} entries, expected {len}",
                coeffs.len()
            )));
        }
        if i0 > i_max {
            return Err(BellError::InvalidDistribution(format!("i0 {i0} > i_max {i_max}")));
        }
        // Signed max over the raw coefficients, as defined.
        let c_max = coeffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { alphabets, coeffs, i0, i_max, c_max, id: id.to_string() })
    }

    #[inline]
    pub fn coeff(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        let al = self.alphabets;
        self.coeffs[((a * al.b + b) * al.x + x) * al.y + y]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

/// CHSH coefficients c_abxy = (−1)^{xy}(−1)^{a⊕b}; I₀ = 2, I_max = 2√2.
pub fn chsh() -> BellCoefficients {
    let al = Alphabets::CHSH;
    let mut coeffs = vec![0.0; 16];
    for a in 0..2usize {
        for b in 0..2usize {
            for x in 0..2usize {
                for y in 0..2usize {
                    let sign = if (x * y + (a ^ b)) % 2 == 0 { 1.0 } else { -1.0 };
                    coeffs[((a * 2 + b) * 2 + x) * 2 + y] = sign;
                }
            }
        }
    }
    BellCoefficients::new(al, coeffs, 2.0, 2.0 * 2.0_f64.sqrt(), "chsh").unwrap()
}

/// A conditional distribution P(a,b|x,y); every (x,y)-slice sums to one.
#[derive(Debug, Clone)]
pub struct ConditionalDistribution {
    pub alphabets: Alphabets,
    /// Indexed like the coefficient table.
    probs: Vec<f64>,
}

impl ConditionalDistribution {
    pub fn new(alphabets: Alphabets, probs: Vec<f64>) -> Result<Self, BellError> {
        let len = alphabets.a * alphabets.b * alphabets.x * alphabets.y;
        if probs.len() != len {
            return Err(BellError::AlphabetMismatch(format!(
                "probability table has {} entries, expected {len}",
                probs.len()
            )));
        }
        let dist = Self { alphabets, probs };
        for x in 0..alphabets.x {
            for y in 0..alphabets.y {
                let mut slice = 0.0;
                for a in 0..alphabets.a {
                    for b in 0..alphabets.b {
                        let p = dist.prob(a, b, x, y);
                        if !(-TOL_PROB..=1.0 + TOL_PROB).contains(&p) {
                            return Err(BellError::InvalidDistribution(format!(
                                "P({a},{b}|{x},{y}) = {p}"
                            )));
                        }
                        slice += p;
                    }
                }
                if (slice - 1.0).abs() > TOL_PROB {
                    return Err(BellError::InvalidDistribution(format!(
                        "slice ({x},{y}) sums to {slice}"
                    )));
                }
            }
        }
        Ok(dist)
    }

    #[inline]
    pub fn prob(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        let al = self.alphabets;
        self.probs[((a * al.b + b) * al.x + x) * al.y + y]
    }
}

/// An exact rational probability, kept exact for bit-reproducible headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0);
        Self { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Rational {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for Rational {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (n, d) = s.split_once('/').ok_or_else(|| format!("bad rational: {s}"))?;
        let num = n.parse().map_err(|e| format!("bad rational numerator {n}: {e}"))?;
        let den: u64 = d.parse().map_err(|e| format!("bad rational denominator {d}: {e}"))?;
        if den == 0 {
            return Err("rational denominator is zero".into());
        }
        Ok(Rational::new(num, den))
    }
}

/// The input distribution P(x,y) with its minimum entry.
#[derive(Debug, Clone)]
pub struct InputDistribution {
    pub nx: usize,
    pub ny: usize,
    /// Exact probabilities, row-major over (x, y).
    table: Vec<Rational>,
    pub p_min: f64,
}

impl InputDistribution {
    pub fn new(nx: usize, ny: usize, table: Vec<Rational>) -> Result<Self, BellError> {
        if table.len() != nx * ny {
            return Err(BellError::AlphabetMismatch(format!(
                "input table has {} entries, expected {}",
                table.len(),
                nx * ny
            )));
        }
        let sum: f64 = table.iter().map(|r| r.to_f64()).sum();
        if (sum - 1.0).abs() > TOL_PROB {
            return Err(BellError::InvalidDistribution(format!("input table sums to {sum}")));
        }
        let p_min = table.iter().map(|r| r.to_f64()).fold(f64::INFINITY, f64::min);
        if p_min <= 0.0 {
            return Err(BellError::NonPositivePMin(p_min));
        }
        Ok(Self { nx, ny, table, p_min })
    }

    pub fn uniform(nx: usize, ny: usize) -> Self {
        let den = (nx * ny) as u64;
        Self::new(nx, ny, vec![Rational::new(1, den); nx * ny]).unwrap()
    }

    #[inline]
    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.ny + y].to_f64()
    }

    pub fn rational(&self, x: usize, y: usize) -> Rational {
        self.table[x * self.ny + y]
    }

    pub fn table(&self) -> &[Rational] {
        &self.table
    }
}

/// One observed round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Round {
    pub x: usize,
    pub y: usize,
    pub a: usize,
    pub b: usize,
}

/// The observed data of n sequential rounds plus the sampling context.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub alphabets: Alphabets,
    pub rounds: Vec<Round>,
    pub input_dist: InputDistribution,
    pub coefficients_id: String,
    pub seed: u64,
}

impl Transcript {
    pub fn n(&self) -> usize {
        self.rounds.len()
    }
}

/// Bell value I(P) = Σ c_abxy P(a,b|x,y).
pub fn bell_value(p: &ConditionalDistribution, c: &BellCoefficients) -> Result<f64, BellError> {
    if p.alphabets != c.alphabets {
        return Err(BellError::AlphabetMismatch("distribution vs coefficients".into()));
    }
    let al = c.alphabets;
    let mut v = 0.0;
    for a in 0..al.a {
        for b in 0..al.b {
            for x in 0..al.x {
                for y in 0..al.y {
                    v += c.coeff(a, b, x, y) * p.prob(a, b, x, y);
                }
            }
        }
    }
    Ok(v)
}

const MAX_STRATEGY_SPACE: u128 = 1_000_000;

/// Maximal Bell value over all local (classical) distributions, by
/// enumerating deterministic strategies a = f(x), b = g(y). Local
/// randomness is a convex mixture of these, so the maximum is a vertex.
pub fn classical_max(c: &BellCoefficients) -> Result<f64, BellError> {
    let al = c.alphabets;
    let n_f = (al.a as u128).pow(al.x as u32);
    let n_g = (al.b as u128).pow(al.y as u32);
    let space = n_f.saturating_mul(n_g);
    if space > MAX_STRATEGY_SPACE {
        return Err(BellError::SearchSpaceTooLarge(space, MAX_STRATEGY_SPACE));
    }
    let mut best = f64::NEG_INFINITY;
    for fi in 0..n_f {
        let f: Vec<usize> = decode_function(fi, al.a, al.x);
        for gi in 0..n_g {
            let g: Vec<usize> = decode_function(gi, al.b, al.y);
            let mut v = 0.0;
            for x in 0..al.x {
                for y in 0..al.y {
                    v += c.coeff(f[x], g[y], x, y);
                }
            }
            best = best.max(v);
        }
    }
    Ok(best)
}

/// Decodes an index into a function table domain → codomain (base-|codomain|).
pub fn decode_function(mut idx: u128, codomain: usize, domain: usize) -> Vec<usize> {
    let mut f = vec![0usize; domain];
    for slot in f.iter_mut() {
        *slot = (idx % codomain as u128) as usize;
        idx /= codomain as u128;
    }
    f
}

/// The data-only estimator Î = (1/n) Σ_j c_{a_j b_j x_j y_j} / P_XY(x_j, y_j).
/// Exactly one indicator fires per round, so the inner double sum of the
/// defining formula reduces to a single reweighted coefficient.
pub fn estimate_ihat(t: &Transcript, c: &BellCoefficients) -> Result<f64, BellError> {
    if t.alphabets != c.alphabets {
        return Err(BellError::AlphabetMismatch("transcript vs coefficients".into()));
    }
    let mut sum = 0.0;
    for (j, r) in t.rounds.iter().enumerate() {
        let p = t.input_dist.prob(r.x, r.y);
        if p <= 0.0 {
            return Err(BellError::ZeroProbabilityInput { round: j, x: r.x, y: r.y });
        }
        sum += c.coeff(r.a, r.b, r.x, r.y) / p;
    }
    Ok(sum / t.n() as f64)
}

/// c(p_min) = (ln 2 / 2) · (c_max/p_min + I_max)⁻¹, the base-2 exponent
/// constant of the tail bound.
pub fn concentration_const(p_min: f64, c: &BellCoefficients) -> Result<f64, BellError> {
    if p_min <= 0.0 {
        return Err(BellError::NonPositivePMin(p_min));
    }
    Ok((std::f64::consts::LN_2 / 2.0) / (c.c_max / p_min + c.i_max))
}

/// Tail bound P[Ī ≤ Î − ε] ≤ 2^{−c(p_min) ε² n}, clamped to 1.
pub fn tail_bound(eps: f64, n: usize, p_min: f64, c: &BellCoefficients) -> Result<f64, BellError> {
    assert!(eps > 0.0 && n >= 1, "tail_bound requires eps > 0 and n >= 1");
    let cc = concentration_const(p_min, c)?;
    Ok(2f64.powf(-cc * eps * eps * n as f64).min(1.0))
}
