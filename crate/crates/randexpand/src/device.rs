//! The untrusted two-component device model: a fixed bipartite state,
//! fixed per-component measurement families, and inter-round unitaries
//! that let the components communicate between rounds. The engine evolves
//! the exact conditional state round by round.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::bell::{
    bell_value, Alphabets, BellCoefficients, BellError, ConditionalDistribution,
    InputDistribution, Round, Transcript,
};
use crate::qmath::{
    born_prob_joint, cnum, collapse_joint, tensor, CMat, DensityMatrix, MeasurementFamily,
    QmathError, Unitary,
};

/// Hard cap on the Hilbert-space dimension per component.
pub const MAX_COMPONENT_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Qmath(#[from] QmathError),
    #[error(transparent)]
    Bell(#[from] BellError),
    #[error("input ({x},{y}) outside alphabets {nx}x{ny}")]
    InputOutOfRange { x: usize, y: usize, nx: usize, ny: usize },
    #[error("component dimension {0} exceeds cap {MAX_COMPONENT_DIM}")]
    DimensionTooLarge(usize),
    #[error("strategy dimensions inconsistent: state dim {state}, components {a}x{b}")]
    InconsistentDims { state: usize, a: usize, b: usize },
    #[error("run requires a nonempty input sequence")]
    EmptyInputs,
    #[error("bell value {0} outside the reachable range [2, 2*sqrt(2)]")]
    UnreachableBellValue(f64),
}

/// How the components communicate between rounds.
#[derive(Clone)]
pub enum InterRoundRule {
    /// No inter-round communication.
    Identity,
    /// The same unitary after every round.
    Fixed(Unitary),
    /// `regular` after every round, except `at_switch` is applied as
    /// U_{switch_round} (i.e. after round switch_round − 1).
    SwitchAt { switch_round: usize, regular: Unitary, at_switch: Unitary },
}

impl InterRoundRule {
    /// The unitary U_{j+1} applied after completing round j (1-based).
    fn unitary_after(&self, j: usize) -> Option<&Unitary> {
        match self {
            InterRoundRule::Identity => None,
            InterRoundRule::Fixed(u) => Some(u),
            InterRoundRule::SwitchAt { switch_round, regular, at_switch } => {
                if j + 1 == *switch_round {
                    Some(at_switch)
                } else {
                    Some(regular)
                }
            }
        }
    }
}

impl std::fmt::Debug for InterRoundRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterRoundRule::Identity => write!(f, "Identity"),
            InterRoundRule::Fixed(_) => write!(f, "Fixed(..)"),
            InterRoundRule::SwitchAt { switch_round, .. } => {
                write!(f, "SwitchAt({switch_round})")
            }
        }
    }
}

/// A full device description: state, measurements, inter-round rule.
#[derive(Debug, Clone)]
pub struct DeviceStrategy {
    pub name: String,
    initial_state: DensityMatrix,
    meas_a: MeasurementFamily,
    meas_b: MeasurementFamily,
    inter_round: InterRoundRule,
}

impl DeviceStrategy {
    pub fn new(
        name: &str,
        initial_state: DensityMatrix,
        meas_a: MeasurementFamily,
        meas_b: MeasurementFamily,
        inter_round: InterRoundRule,
    ) -> Result<Self, DeviceError> {
        if meas_a.dim() > MAX_COMPONENT_DIM {
            return Err(DeviceError::DimensionTooLarge(meas_a.dim()));
        }
        if meas_b.dim() > MAX_COMPONENT_DIM {
            return Err(DeviceError::DimensionTooLarge(meas_b.dim()));
        }
        if meas_a.dim() * meas_b.dim() != initial_state.dim() {
            return Err(DeviceError::InconsistentDims {
                state: initial_state.dim(),
                a: meas_a.dim(),
                b: meas_b.dim(),
            });
        }
        if let InterRoundRule::Fixed(u) | InterRoundRule::SwitchAt { regular: u, .. } =
            &inter_round
        {
            if u.dim() != initial_state.dim() {
                return Err(DeviceError::InconsistentDims {
                    state: initial_state.dim(),
                    a: meas_a.dim(),
                    b: meas_b.dim(),
                });
            }
        }
        Ok(Self { name: name.to_string(), initial_state, meas_a, meas_b, inter_round })
    }

    pub fn alphabets(&self) -> Alphabets {
        Alphabets {
            a: self.meas_a.outcomes(),
            b: self.meas_b.outcomes(),
            x: self.meas_a.inputs(),
            y: self.meas_b.inputs(),
        }
    }

    pub fn initial_state(&self) -> &DensityMatrix {
        &self.initial_state
    }

    pub fn component_dims(&self) -> (usize, usize) {
        (self.meas_a.dim(), self.meas_b.dim())
    }

    pub fn meas_a(&self) -> &MeasurementFamily {
        &self.meas_a
    }

    pub fn meas_b(&self) -> &MeasurementFamily {
        &self.meas_b
    }

    pub fn inter_round(&self) -> &InterRoundRule {
        &self.inter_round
    }
}

/// Per-round true Bell values I_j and their average Ī.
#[derive(Debug, Clone)]
pub struct RoundBellTrace {
    pub per_round: Vec<f64>,
}

impl RoundBellTrace {
    pub fn average(&self) -> f64 {
        self.per_round.iter().sum::<f64>() / self.per_round.len() as f64
    }
}

/// The evolving conditional state of a device across sequential rounds.
#[derive(Clone)]
pub struct InteractionEngine {
    strategy: Arc<DeviceStrategy>,
    /// Pre-tensored Kraus operators Mₓᵃ ⊗ N_yᵇ, indexed by ((x*ny+y)*na+a)*nb+b.
    joint_kraus: Arc<Vec<CMat>>,
    current_state: DensityMatrix,
    history: Vec<Round>,
    round_index: usize,
    rng: ChaCha12Rng,
}

/// Creates an engine at round 1 with the strategy's initial state.
pub fn new_engine(s: &DeviceStrategy, seed: u64) -> Result<InteractionEngine, DeviceError> {
    s.initial_state.validate()?;
    let al = s.alphabets();
    let mut joint = Vec::with_capacity(al.x * al.y * al.a * al.b);
    for x in 0..al.x {
        for y in 0..al.y {
            for a in 0..al.a {
                for b in 0..al.b {
                    joint.push(tensor(s.meas_a.operator(x, a), s.meas_b.operator(y, b)));
                }
            }
        }
    }
    Ok(InteractionEngine {
        strategy: Arc::new(s.clone()),
        joint_kraus: Arc::new(joint),
        current_state: s.initial_state.clone(),
        history: Vec::new(),
        round_index: 1,
        rng: ChaCha12Rng::seed_from_u64(seed),
    })
}

impl InteractionEngine {
    pub fn strategy(&self) -> &DeviceStrategy {
        &self.strategy
    }

    pub fn current_state(&self) -> &DensityMatrix {
        &self.current_state
    }

    pub fn history(&self) -> &[Round] {
        &self.history
    }

    /// Upcoming round index (1-based).
    pub fn round_index(&self) -> usize {
        self.round_index
    }

    #[inline]
    fn kraus(&self, x: usize, y: usize, a: usize, b: usize) -> &CMat {
        let al = self.strategy.alphabets();
        &self.joint_kraus[((x * al.y + y) * al.a + a) * al.b + b]
    }

    fn check_input(&self, x: usize, y: usize) -> Result<(), DeviceError> {
        let al = self.strategy.alphabets();
        if x >= al.x || y >= al.y {
            return Err(DeviceError::InputOutOfRange { x, y, nx: al.x, ny: al.y });
        }
        Ok(())
    }

    /// The exact conditional distribution P(a,b|x,y, hist) of the upcoming
    /// round given the current history.
    pub fn round_distribution(&self) -> Result<ConditionalDistribution, DeviceError> {
        let al = self.strategy.alphabets();
        let mut probs = vec![0.0; al.a * al.b * al.x * al.y];
        for x in 0..al.x {
            for y in 0..al.y {
                for a in 0..al.a {
                    for b in 0..al.b {
                        let p = born_prob_joint(&self.current_state, self.kraus(x, y, a, b))?;
                        probs[((a * al.b + b) * al.x + x) * al.y + y] = p;
                    }
                }
            }
        }
        Ok(ConditionalDistribution::new(al, probs)?)
    }

    fn advance(&mut self, x: usize, y: usize, a: usize, b: usize) -> Result<(), DeviceError> {
        let post = collapse_joint(&self.current_state, self.kraus(x, y, a, b))?;
        self.current_state = match self.strategy.inter_round.unitary_after(self.round_index) {
            Some(u) => crate::qmath::apply_unitary(&post, u)?,
            None => post,
        };
        self.history.push(Round { x, y, a, b });
        self.round_index += 1;
        Ok(())
    }

    /// Plays one round: samples (a,b) by the Born rule from the engine's
    /// seeded randomness stream, collapses, and applies the inter-round
    /// unitary. Inverse-CDF sampling; a draw landing exactly on a CDF
    /// boundary resolves to the lexicographically smaller outcome.
    pub fn round(&mut self, x: usize, y: usize) -> Result<(usize, usize), DeviceError> {
        self.check_input(x, y)?;
        let al = self.strategy.alphabets();
        let mut probs = Vec::with_capacity(al.a * al.b);
        for a in 0..al.a {
            for b in 0..al.b {
                probs.push(born_prob_joint(&self.current_state, self.kraus(x, y, a, b))?);
            }
        }
        let u: f64 = self.rng.random();
        let mut cdf = 0.0;
        let mut pick = None;
        for (k, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            cdf += p;
            if u <= cdf {
                pick = Some(k);
                break;
            }
        }
        // Floating-point shortfall at the top of the CDF: take the last
        // outcome with positive probability.
        let k = pick.unwrap_or_else(|| {
            probs.iter().enumerate().rev().find(|(_, p)| **p > 0.0).map(|(k, _)| k).unwrap()
        });
        let (a, b) = (k / al.b, k % al.b);
        self.advance(x, y, a, b)?;
        Ok((a, b))
    }

    /// Forces the round outcome (for exhaustive enumeration); returns the
    /// conditional probability of that outcome and advances the state.
    pub fn force_round(
        &mut self,
        x: usize,
        y: usize,
        a: usize,
        b: usize,
    ) -> Result<f64, DeviceError> {
        self.check_input(x, y)?;
        let p = born_prob_joint(&self.current_state, self.kraus(x, y, a, b))?;
        if p > 0.0 {
            self.advance(x, y, a, b)?;
        }
        Ok(p)
    }
}

/// Runs the device over a fixed input sequence, recording both the
/// observed transcript and the true per-round Bell values I_j (computed
/// from the simulator's privileged view of the state, before each round's
/// inputs are consumed).
pub fn run(
    s: &DeviceStrategy,
    inputs: &[(usize, usize)],
    input_dist: &InputDistribution,
    coefficients: &BellCoefficients,
    seed: u64,
) -> Result<(Transcript, RoundBellTrace), DeviceError> {
    if inputs.is_empty() {
        return Err(DeviceError::EmptyInputs);
    }
    let mut engine = new_engine(s, seed)?;
    let mut rounds = Vec::with_capacity(inputs.len());
    let mut per_round = Vec::with_capacity(inputs.len());
    for &(x, y) in inputs {
        per_round.push(bell_value(&engine.round_distribution()?, coefficients)?);
        let (a, b) = engine.round(x, y)?;
        rounds.push(Round { x, y, a, b });
    }
    let transcript = Transcript {
        alphabets: s.alphabets(),
        rounds,
        input_dist: input_dist.clone(),
        coefficients_id: coefficients.id.clone(),
        seed,
    };
    Ok((transcript, RoundBellTrace { per_round }))
}

// ---------------------------------------------------------------------------
// Strategy library.
//
// The honest and flag-carrying strategies use "reset" Kraus operators
// |0⟩⟨v| instead of projectors: outcome probabilities match the projective
// measurement, but the post-measurement state is input-independent, so a
// fixed inter-round unitary can restore the entangled state for the next
// round. Phase switching is driven by a diagonal flag register and control
// measurements; the flag is flipped by the inter-round unitary.
// ---------------------------------------------------------------------------

/// Measurement direction cos θ Z + sin θ X; eigenvector of outcome `a`.
fn angle_eigvec(theta: f64, outcome: usize) -> [Complex64; 2] {
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    if outcome == 0 {
        [cnum(c, 0.0), cnum(s, 0.0)]
    } else {
        [cnum(-s, 0.0), cnum(c, 0.0)]
    }
}

/// Reset Kraus operator |0⟩⟨v| for the eigenvector v of the given angle.
fn reset_kraus(theta: f64, outcome: usize) -> CMat {
    let v = angle_eigvec(theta, outcome);
    let mut m = CMat::zeros(2, 2);
    m[(0, 0)] = v[0].conj();
    m[(0, 1)] = v[1].conj();
    m
}

/// Optimal CHSH angles: A measures {0, π/2}, B measures {π/4, −π/4}.
const ANGLES_A: [f64; 2] = [0.0, std::f64::consts::FRAC_PI_2];
const ANGLES_B: [f64; 2] = [std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_4];

/// |φ⁺⟩ = (|00⟩ + |11⟩)/√2 as a 4-vector.
fn phi_plus_vec() -> [Complex64; 4] {
    let s = cnum(1.0 / 2.0f64.sqrt(), 0.0);
    [s, cnum(0.0, 0.0), cnum(0.0, 0.0), s]
}

/// A 4×4 unitary whose first column is |φ⁺⟩: maps the reset state |00⟩
/// back to the entangled pair between rounds.
fn restore_phi_plus() -> Unitary {
    let s = 1.0 / 2.0f64.sqrt();
    let mut m = CMat::zeros(4, 4);
    m[(0, 0)] = cnum(s, 0.0);
    m[(3, 0)] = cnum(s, 0.0);
    m[(1, 1)] = cnum(1.0, 0.0);
    m[(2, 2)] = cnum(1.0, 0.0);
    m[(0, 3)] = cnum(s, 0.0);
    m[(3, 3)] = cnum(-s, 0.0);
    Unitary::new(m).unwrap()
}

/// Honest optimal CHSH device: |φ⁺⟩ with the optimal angles; every round's
/// distribution has Bell value 2√2.
pub fn strategy_honest_chsh() -> DeviceStrategy {
    let state = DensityMatrix::pure(&phi_plus_vec()).unwrap();
    let meas_a = MeasurementFamily::new(
        2,
        2,
        ANGLES_A.iter().flat_map(|&t| [reset_kraus(t, 0), reset_kraus(t, 1)]).collect(),
    )
    .unwrap();
    let meas_b = MeasurementFamily::new(
        2,
        2,
        ANGLES_B.iter().flat_map(|&t| [reset_kraus(t, 0), reset_kraus(t, 1)]).collect(),
    )
    .unwrap();
    DeviceStrategy::new(
        "honest-chsh",
        state,
        meas_a,
        meas_b,
        InterRoundRule::Fixed(restore_phi_plus()),
    )
    .unwrap()
}

/// Deterministic local strategy a = f(x), b = g(y) on one-dimensional
/// components: the measurement operator is 1 exactly on the chosen outcome.
pub fn strategy_deterministic(f: [usize; 2], g: [usize; 2]) -> DeviceStrategy {
    let scalar_ops = |h: [usize; 2]| -> Vec<CMat> {
        let mut ops = Vec::new();
        for x in 0..2 {
            for out in 0..2 {
                let v = if h[x] == out { 1.0 } else { 0.0 };
                ops.push(CMat::from_element(1, 1, cnum(v, 0.0)));
            }
        }
        ops
    };
    let state = DensityMatrix::diagonal(&[1.0]).unwrap();
    DeviceStrategy::new(
        &format!("deterministic-a{}{}-b{}{}", f[0], f[1], g[0], g[1]),
        state,
        MeasurementFamily::new(2, 2, scalar_ops(f)).unwrap(),
        MeasurementFamily::new(2, 2, scalar_ops(g)).unwrap(),
        InterRoundRule::Identity,
    )
    .unwrap()
}

/// Builds the (qubit ⊗ flag) measurement family: honest reset measurement
/// when the flag is 0, deterministic outcome 0 when the flag is 1.
fn flagged_family(angles: [f64; 2]) -> MeasurementFamily {
    let mut ops = Vec::new();
    for &theta in &angles {
        for outcome in 0..2usize {
            let honest = reset_kraus(theta, outcome);
            // |0⟩⟨0| on the flag keeps the honest branch in phase 0.
            let mut flag0 = CMat::zeros(2, 2);
            flag0[(0, 0)] = cnum(1.0, 0.0);
            let mut op = tensor(&honest, &flag0);
            if outcome == 0 {
                let mut flag1 = CMat::zeros(2, 2);
                flag1[(1, 1)] = cnum(1.0, 0.0);
                op += tensor(&crate::qmath::identity(2), &flag1);
            }
            ops.push(op);
        }
    }
    MeasurementFamily::new(2, 2, ops).unwrap()
}

/// Joint (qa,fa,qb,fb) basis vector for pure qubit amplitudes and fixed flags.
fn flagged_vec(qubit_amps: &[Complex64; 4], flag: usize) -> Vec<Complex64> {
    let mut v = vec![Complex64::default(); 16];
    for qa in 0..2 {
        for qb in 0..2 {
            v[(qa * 2 + flag) * 4 + qb * 2 + flag] = qubit_amps[qa * 2 + qb];
        }
    }
    v
}

/// 16×16 unitary acting as `qubit_part` on (qa,qb) and `flag_part` on (fa,fb).
fn flagged_unitary(qubit_part: &CMat, flag_part: &CMat) -> Unitary {
    let mut m = CMat::zeros(16, 16);
    for qa1 in 0..2 {
        for fa1 in 0..2 {
            for qb1 in 0..2 {
                for fb1 in 0..2 {
                    for qa0 in 0..2 {
                        for fa0 in 0..2 {
                            for qb0 in 0..2 {
                                for fb0 in 0..2 {
                                    let row = (qa1 * 2 + fa1) * 4 + qb1 * 2 + fb1;
                                    let col = (qa0 * 2 + fa0) * 4 + qb0 * 2 + fb0;
                                    m[(row, col)] = qubit_part[(qa1 * 2 + qb1, qa0 * 2 + qb0)]
                                        * flag_part[(fa1 * 2 + fb1, fa0 * 2 + fb0)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Unitary::new(m).unwrap()
}

fn flag_identity() -> CMat {
    crate::qmath::identity(4)
}

/// X⊗X on the two flags: flips both phases simultaneously.
fn flag_flip() -> CMat {
    let x = CMat::from_row_slice(
        2,
        2,
        &[cnum(0., 0.), cnum(1., 0.), cnum(1., 0.), cnum(0., 0.)],
    );
    tensor(&x, &x)
}

fn det_phase_qubits() -> [Complex64; 4] {
    [cnum(1.0, 0.0), cnum(0.0, 0.0), cnum(0.0, 0.0), cnum(0.0, 0.0)]
}

/// Mixes the honest strategy with the deterministic (a,b) = (0,0) strategy
/// (Bell value 2) through a static flag register, hitting Bell value `v`.
pub fn strategy_partial(v: f64) -> Result<DeviceStrategy, DeviceError> {
    let i_max = 2.0 * 2.0f64.sqrt();
    if !(2.0 - 1e-12..=i_max + 1e-12).contains(&v) {
        return Err(DeviceError::UnreachableBellValue(v));
    }
    let lambda = ((v - 2.0) / (i_max - 2.0)).clamp(0.0, 1.0);
    let honest = DensityMatrix::pure(&flagged_vec(&phi_plus_vec(), 0)).unwrap();
    let det = DensityMatrix::pure(&flagged_vec(&det_phase_qubits(), 1)).unwrap();
    let state = DensityMatrix::mix(&[(lambda, honest), (1.0 - lambda, det)])?;
    DeviceStrategy::new(
        &format!("partial-{v}"),
        state,
        flagged_family(ANGLES_A),
        flagged_family(ANGLES_B),
        InterRoundRule::Fixed(flagged_unitary(restore_phi_plus().matrix(), &flag_identity())),
    )
}

/// Plays honestly for rounds 1..switch_round−1, then deterministically
/// (a,b) = (0,0) from round switch_round onward. The phase lives in a
/// diagonal flag register flipped by the inter-round unitary.
pub fn strategy_memory_cheater(switch_round: usize) -> DeviceStrategy {
    let start_flag = if switch_round <= 1 { 1 } else { 0 };
    let state = DensityMatrix::pure(&flagged_vec(&phi_plus_vec(), start_flag)).unwrap();
    let regular = flagged_unitary(restore_phi_plus().matrix(), &flag_identity());
    let at_switch = flagged_unitary(restore_phi_plus().matrix(), &flag_flip());
    DeviceStrategy::new(
        &format!("memory-cheater-{switch_round}"),
        state,
        flagged_family(ANGLES_A),
        flagged_family(ANGLES_B),
        InterRoundRule::SwitchAt { switch_round, regular, at_switch },
    )
    .unwrap()
}

/// The standard strategy library exercised by the oracle suites: the honest
/// device, three deterministic devices, a partial violator, and a
/// memory cheater switching halfway. `n_hint` positions the switch.
pub fn strategy_library(n_hint: usize) -> Vec<DeviceStrategy> {
    vec![
        strategy_honest_chsh(),
        strategy_deterministic([0, 0], [0, 0]),
        strategy_deterministic([0, 1], [0, 0]),
        strategy_deterministic([1, 1], [0, 1]),
        strategy_partial(2.4).unwrap(),
        strategy_memory_cheater(n_hint / 2 + 1),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bell::chsh;

    const SQRT8: f64 = 2.828427124746190;

    #[test]
    fn honest_round_distribution_is_optimal() {
        let engine = new_engine(&strategy_honest_chsh(), 1).unwrap();
        let dist = engine.round_distribution().unwrap();
        let e = 1.0 / 2.0f64.sqrt();
        for a in 0..2usize {
            for b in 0..2usize {
                for x in 0..2usize {
                    for y in 0..2usize {
                        let corr = if (a ^ b) == (x & y) { e } else { -e };
                        assert!(
                            (dist.prob(a, b, x, y) - 0.25 * (1.0 + corr)).abs() < 1e-12,
                            "P({a},{b}|{x},{y}) = {}",
                            dist.prob(a, b, x, y)
                        );
                    }
                }
            }
        }
        assert!((bell_value(&dist, &chsh()).unwrap() - SQRT8).abs() < 1e-9);
    }

    #[test]
    fn honest_winning_probability_is_cos2_pi8() {
        let engine = new_engine(&strategy_honest_chsh(), 1).unwrap();
        let dist = engine.round_distribution().unwrap();
        let target = (std::f64::consts::PI / 8.0).cos().powi(2);
        for x in 0..2usize {
            for y in 0..2usize {
                let mut win = 0.0;
                for a in 0..2usize {
                    for b in 0..2usize {
                        if a ^ b == x & y {
                            win += dist.prob(a, b, x, y);
                        }
                    }
                }
                assert!((win - target).abs() < 1e-9, "win({x},{y}) = {win}");
            }
        }
    }

    #[test]
    fn honest_state_restores_every_round() {
        let s = strategy_honest_chsh();
        let mut engine = new_engine(&s, 42).unwrap();
        for x in [0usize, 1, 0, 1, 1] {
            engine.round(x, 1 - x).unwrap();
            assert!(
                crate::qmath::trace_distance(engine.current_state(), s.initial_state()).unwrap()
                    < 1e-9
            );
            engine.current_state().validate().unwrap();
        }
    }

    #[test]
    fn deterministic_strategy_always_same_outputs() {
        let s = strategy_deterministic([0, 1], [1, 0]);
        let mut engine = new_engine(&s, 9).unwrap();
        for (x, y) in [(0, 0), (1, 1), (0, 1), (1, 0)] {
            let (a, b) = engine.round(x, y).unwrap();
            assert_eq!((a, b), ([0, 1][x], [1, 0][y]));
        }
        let dist = new_engine(&s, 0).unwrap().round_distribution().unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        let p = dist.prob(a, b, x, y);
                        assert!(p == 0.0 || p == 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn partial_hits_requested_bell_value() {
        let c = chsh();
        for v in [2.0, 2.4, SQRT8] {
            let s = strategy_partial(v).unwrap();
            let dist = new_engine(&s, 0).unwrap().round_distribution().unwrap();
            assert!(
                (bell_value(&dist, &c).unwrap() - v).abs() < 1e-9,
                "I = {} for target {v}",
                bell_value(&dist, &c).unwrap()
            );
        }
        assert!(strategy_partial(2.9).is_err());
    }

    #[test]
    fn partial_at_max_equals_honest_distribution() {
        let honest = new_engine(&strategy_honest_chsh(), 0).unwrap().round_distribution().unwrap();
        let partial =
            new_engine(&strategy_partial(SQRT8).unwrap(), 0).unwrap().round_distribution().unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        assert!((honest.prob(a, b, x, y) - partial.prob(a, b, x, y)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn memory_cheater_switches_phase() {
        let c = chsh();
        let s = strategy_memory_cheater(3);
        let mut engine = new_engine(&s, 17).unwrap();
        for j in 1..=5usize {
            let i_j = bell_value(&engine.round_distribution().unwrap(), &c).unwrap();
            let expected = if j < 3 { SQRT8 } else { 2.0 };
            assert!((i_j - expected).abs() < 1e-9, "round {j}: I = {i_j}");
            engine.round(j % 2, (j + 1) % 2).unwrap();
            engine.current_state().validate().unwrap();
        }
    }

    #[test]
    fn memory_cheater_round2_matches_hand_collapse() {
        // With a fixed round-1 history the round-2 distribution must equal
        // the collapse-then-unitary computation done directly on operators.
        let s = strategy_memory_cheater(4);
        let mut engine = new_engine(&s, 0).unwrap();
        let p1 = engine.force_round(0, 1, 1, 0).unwrap();
        assert!(p1 > 0.0);
        let d2 = engine.round_distribution().unwrap();
        // By the reset construction, the qubit pair is restored to |φ⁺⟩ and
        // the flag stays 0, so round 2 must look exactly like round 1.
        let fresh = new_engine(&s, 0).unwrap().round_distribution().unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        assert!((d2.prob(a, b, x, y) - fresh.prob(a, b, x, y)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn nonsignalling_marginals() {
        for s in strategy_library(6) {
            let mut engine = new_engine(&s, 23).unwrap();
            for step in 0..4usize {
                let dist = engine.round_distribution().unwrap();
                for x in 0..2usize {
                    for a in 0..2usize {
                        let m0: f64 = (0..2).map(|b| dist.prob(a, b, x, 0)).sum();
                        let m1: f64 = (0..2).map(|b| dist.prob(a, b, x, 1)).sum();
                        assert!((m0 - m1).abs() < 1e-9, "{} signals A-side", s.name);
                    }
                }
                for y in 0..2usize {
                    for b in 0..2usize {
                        let m0: f64 = (0..2).map(|a| dist.prob(a, b, 0, y)).sum();
                        let m1: f64 = (0..2).map(|a| dist.prob(a, b, 1, y)).sum();
                        assert!((m0 - m1).abs() < 1e-9, "{} signals B-side", s.name);
                    }
                }
                engine.round(step % 2, step / 2 % 2).unwrap();
            }
        }
    }

    #[test]
    fn run_honest_all_rounds_maximal() {
        let c = chsh();
        let dist = InputDistribution::uniform(2, 2);
        let inputs: Vec<(usize, usize)> = (0..100).map(|j| (j % 2, (j / 2) % 2)).collect();
        let (t, trace) = run(&strategy_honest_chsh(), &inputs, &dist, &c, 7).unwrap();
        assert_eq!(t.n(), 100);
        for i_j in &trace.per_round {
            assert!((i_j - SQRT8).abs() < 1e-9);
        }
        assert!((trace.average() - SQRT8).abs() < 1e-9);
    }

    #[test]
    fn run_memory_cheater_average_is_phase_mix() {
        let c = chsh();
        let dist = InputDistribution::uniform(2, 2);
        let inputs: Vec<(usize, usize)> = (0..10).map(|j| (j % 2, (j / 2) % 2)).collect();
        let (_, trace) = run(&strategy_memory_cheater(6), &inputs, &dist, &c, 3).unwrap();
        // 5 honest rounds then 5 deterministic rounds
        let expected = (5.0 * SQRT8 + 5.0 * 2.0) / 10.0;
        assert!((trace.average() - expected).abs() < 1e-9);
    }

    #[test]
    fn trace_is_independent_of_final_round_input() {
        // I_j is computed before the round's inputs are consumed, so
        // changing only the final-round input cannot change any I_j as long
        // as the sampled outcomes of earlier rounds are identical.
        let c = chsh();
        let dist = InputDistribution::uniform(2, 2);
        let mut inputs: Vec<(usize, usize)> = (0..8).map(|j| (j % 2, (j / 2) % 2)).collect();
        let (_, trace1) = run(&strategy_memory_cheater(4), &inputs, &dist, &c, 11).unwrap();
        inputs[7] = (1 - inputs[7].0, inputs[7].1);
        let (_, trace2) = run(&strategy_memory_cheater(4), &inputs, &dist, &c, 11).unwrap();
        assert_eq!(trace1.per_round, trace2.per_round);
    }

    #[test]
    fn reproducible_transcripts() {
        let c = chsh();
        let dist = InputDistribution::uniform(2, 2);
        let inputs: Vec<(usize, usize)> = (0..50).map(|j| (j % 2, (j * 3 / 2) % 2)).collect();
        let (t1, _) = run(&strategy_honest_chsh(), &inputs, &dist, &c, 99).unwrap();
        let (t2, _) = run(&strategy_honest_chsh(), &inputs, &dist, &c, 99).unwrap();
        assert_eq!(t1.rounds, t2.rounds);
        let (t3, _) = run(&strategy_honest_chsh(), &inputs, &dist, &c, 100).unwrap();
        assert_ne!(t3.rounds, t1.rounds);
    }

    #[test]
    fn chain_rule_matches_direct_evolution() {
        // Π_j P(a_j,b_j|x_j,y_j,hist_j) from round_distribution equals the
        // unnormalized direct evolution tr(K_n … K_1 ρ K_1† … K_n†) for all
        // 4^n outcome paths at n = 3, on a fixed input sequence.
        let s = strategy_memory_cheater(3);
        let inputs = [(0usize, 1usize), (1, 1), (0, 0)];
        for path in 0..64usize {
            let outs: Vec<(usize, usize)> =
                (0..3).map(|j| ((path >> (2 * j + 1)) & 1, (path >> (2 * j)) & 1)).collect();
            // route 1: product of conditional probabilities
            let mut engine = new_engine(&s, 0).unwrap();
            let mut prod = 1.0;
            for (j, &(x, y)) in inputs.iter().enumerate() {
                let p = engine.force_round(x, y, outs[j].0, outs[j].1).unwrap();
                prod *= p;
                if p == 0.0 {
                    break;
                }
            }
            // route 2: unnormalized Kraus-chain evolution
            let fresh = new_engine(&s, 0).unwrap();
            let mut m = s.initial_state().matrix().clone();
            for (j, &(x, y)) in inputs.iter().enumerate() {
                let k = fresh.kraus(x, y, outs[j].0, outs[j].1);
                m = k * m * k.adjoint();
                if let Some(u) = s.inter_round.unitary_after(j + 1) {
                    m = u.matrix() * m * u.matrix().adjoint();
                }
            }
            let direct = m.trace().re;
            assert!((prod - direct).abs() < 1e-12, "path {path}: {prod} vs {direct}");
        }
    }

    #[test]
    fn invalid_initial_state_rejected() {
        let mut m = CMat::zeros(4, 4);
        m[(0, 0)] = cnum(0.9, 0.0);
        m[(1, 1)] = cnum(0.2, 0.0);
        // trace 1.1: not a state
        assert!(DensityMatrix::new(m).is_err());
    }

    #[test]
    fn engine_rejects_out_of_range_inputs() {
        let mut engine = new_engine(&strategy_honest_chsh(), 0).unwrap();
        assert!(matches!(engine.round(2, 0), Err(DeviceError::InputOutOfRange { .. })));
    }
}
