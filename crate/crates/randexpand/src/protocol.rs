//! End-to-end randomness expansion: sample inputs, run the device, certify
//! a min-entropy bound, extract — plus the two-device alternating
//! composition where one activation's output funds the next one's inputs.

use thiserror::Error;

use crate::bell::{chsh, BellError, Transcript};
use crate::device::{run, DeviceError, DeviceStrategy};
use crate::extractor::{
    encode_outputs, output_length, toeplitz_extract, BitString, ExtractorError, ExtractorParams,
};
use crate::rate::{certify, CertificationParams, CertificationReport, IntervalPartition, RateError, RateFunction};
use crate::sampler::{
    expected_bits, q_biased, sample_inputs, sample_inputs_amortized, BitSource, QBiasedDistribution,
    SampleRun, SamplerError,
};
use crate::bell::Rational;

#[derive(Debug, Error)]
pub enum ProtocolError {
    /// Certification came in below the configured threshold; no output is
    /// released. Carries the report so callers can show why.
    #[error("abort: {reason}")]
    Abort { reason: String, report: Box<CertificationReport> },
    #[error("cannot fund next activation: {available} bits available, ~{needed} expected input cost")]
    InsufficientFunding { available: u64, needed: u64 },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Bell(#[from] BellError),
}

/// How the input sequence is drawn from the bit source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// One independent Knuth–Yao walk per round.
    PerSample,
    /// One range-decoder state across the sequence; amortized cost ≈ n·H(q).
    Amortized,
}

/// Where composed activations after the first get their randomness.
///
/// Output chaining funds the next activation's *input sampling* from the
/// previous activation's extracted output; extractor seeds always come from
/// the external source, since a Toeplitz seed (2n+ξ−1 bits) is longer than
/// any output the activation can certify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundingPolicy {
    OutputChained,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleasePolicy {
    ReleaseEach,
    ReleaseLast,
}

/// Parameters of one expansion run.
#[derive(Debug, Clone)]
pub struct ExpansionConfig {
    pub n: usize,
    pub q: Rational,
    pub partition: IntervalPartition,
    pub params: CertificationParams,
    pub eps_ext: f64,
    pub rate: RateFunction,
    /// Minimum interval index that counts as success.
    pub abort_threshold_ell: usize,
    pub sampling_mode: SamplingMode,
}

/// Exact randomness accounting of a run. The inputs-only expansion factor
/// charges only the sampled input bits; the full factor also charges the
/// extractor seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ledger {
    pub bits_in_inputs: u64,
    pub bits_in_seed: u64,
    pub bits_out: u64,
    pub worst_sample_depth: u64,
}

impl Ledger {
    pub fn expansion_factor_inputs(&self) -> f64 {
        self.bits_out as f64 / self.bits_in_inputs as f64
    }

    pub fn expansion_factor_full(&self) -> f64 {
        self.bits_out as f64 / (self.bits_in_inputs + self.bits_in_seed) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExpansionResult {
    pub output: BitString,
    pub report: CertificationReport,
    pub ledger: Ledger,
    pub transcript: Transcript,
}

fn draw_inputs(
    cfg: &ExpansionConfig,
    d: &QBiasedDistribution,
    src: &mut BitSource,
) -> Result<SampleRun, ProtocolError> {
    Ok(match cfg.sampling_mode {
        SamplingMode::PerSample => sample_inputs(cfg.n, d, src)?,
        SamplingMode::Amortized => sample_inputs_amortized(cfg.n, d, src)?,
    })
}

/// One full expansion: returns the extracted output with its certification
/// report and exact ledger, or aborts when the certificate is too weak.
/// `engine_seed` drives the device's internal sampling only — the user's
/// randomness all flows through `src`.
pub fn expand_once(
    s: &DeviceStrategy,
    cfg: &ExpansionConfig,
    src: &mut BitSource,
    engine_seed: u64,
) -> Result<ExpansionResult, ProtocolError> {
    let c = chsh();
    let d = q_biased(cfg.q)?;
    let sample = draw_inputs(cfg, &d, src)?;
    let (transcript, _trace) =
        run(s, &sample.inputs, &d.to_input_distribution(), &c, engine_seed)?;
    let report = certify(&transcript, &c, &cfg.rate, &cfg.partition, &cfg.params)?;
    if report.vacuous || report.ell < cfg.abort_threshold_ell {
        return Err(ProtocolError::Abort {
            reason: format!(
                "certified interval {} below threshold {} (Î = {:.6}, bound = {:.3})",
                report.ell, cfg.abort_threshold_ell, report.i_hat, report.minentropy_bound
            ),
            report: Box::new(report),
        });
    }
    let xi = output_length(report.minentropy_bound, cfg.eps_ext);
    if xi == 0 {
        return Err(ProtocolError::Abort {
            reason: "certified bound too small to extract any bits".to_string(),
            report: Box::new(report),
        });
    }
    let raw = encode_outputs(&transcript);
    let ext = ExtractorParams::new(raw.len(), xi, cfg.eps_ext)?;
    let seed = BitString::from_source(src, ext.seed_len())?;
    let output = toeplitz_extract(&raw, &seed, &ext)?;
    let ledger = Ledger {
        bits_in_inputs: sample.bits_consumed,
        bits_in_seed: ext.seed_len() as u64,
        bits_out: xi as u64,
        worst_sample_depth: sample.worst_depth,
    };
    Ok(ExpansionResult { output, report, ledger, transcript })
}

/// Two devices activated alternately.
#[derive(Debug, Clone)]
pub struct ComposeConfig {
    pub iterations: usize,
    pub expansion: ExpansionConfig,
    pub funding: FundingPolicy,
    pub release: ReleasePolicy,
}

#[derive(Debug, Clone)]
pub struct ComposeResult {
    pub released: BitString,
    pub reports: Vec<CertificationReport>,
    pub per_activation: Vec<Ledger>,
    /// Initial-source bits vs. released bits across the whole composition.
    pub ledger: Ledger,
}

/// Applies the release policy to the per-activation outputs.
pub fn release_policy(outputs: &[BitString], policy: ReleasePolicy) -> BitString {
    match policy {
        ReleasePolicy::ReleaseLast => outputs.last().cloned().unwrap_or_else(|| BitString::zeros(0)),
        ReleasePolicy::ReleaseEach => {
            let mut bits = Vec::new();
            for o in outputs {
                bits.extend_from_slice(o.bits());
            }
            BitString::new(bits)
        }
    }
}

/// Alternates activations between two structurally independent devices.
/// An output is never fed back to the device that produced it: activation
/// i runs device A for even i and device B for odd i, and under output
/// chaining each activation's inputs are funded by the other device's
/// latest output. Any abort aborts the whole composition.
pub fn compose(
    strategy_a: &DeviceStrategy,
    strategy_b: &DeviceStrategy,
    cfg: &ComposeConfig,
    initial_src: &mut BitSource,
    base_engine_seed: u64,
) -> Result<ComposeResult, ProtocolError> {
    assert!(cfg.iterations >= 1, "compose requires at least one iteration");
    let d = q_biased(cfg.expansion.q)?;
    let mut reports = Vec::new();
    let mut ledgers = Vec::new();
    let mut outputs: Vec<BitString> = Vec::new();
    let mut initial_inputs = 0u64;
    let mut initial_seed = 0u64;
    for it in 0..cfg.iterations {
        let strategy = if it % 2 == 0 { strategy_a } else { strategy_b };
        let engine_seed = derive_seed(base_engine_seed, &format!("activation-{it}"));
        let result = match (cfg.funding, it) {
            (FundingPolicy::External, _) | (FundingPolicy::OutputChained, 0) => {
                let before = initial_src.consumed();
                let r = expand_once(strategy, &cfg.expansion, initial_src, engine_seed).map_err(
                    |e| match e {
                        ProtocolError::Abort { reason, report } => ProtocolError::Abort {
                            reason: format!("activation {it}: {reason}"),
                            report,
                        },
                        other => other,
                    },
                )?;
                initial_inputs += r.ledger.bits_in_inputs;
                initial_seed += r.ledger.bits_in_seed;
                debug_assert_eq!(
                    initial_src.consumed() - before,
                    r.ledger.bits_in_inputs + r.ledger.bits_in_seed
                );
                r
            }
            (FundingPolicy::OutputChained, _) => {
                // fund this activation's inputs from the previous output;
                // the extractor seed still comes from the external source
                let prev = outputs.last().unwrap();
                let available = prev.len() as u64;
                let mut needed = (cfg.expansion.n as f64 * expected_bits(&d)).ceil() as u64;
                if cfg.expansion.sampling_mode == SamplingMode::Amortized {
                    needed = 64 + (cfg.expansion.n as f64 * d.entropy()).ceil() as u64;
                }
                if available < needed {
                    return Err(ProtocolError::InsufficientFunding { available, needed });
                }
                let mut chained =
                    BitSource::from_bytes_with_len(prev.to_bytes(), prev.len() as u64);
                let c = chsh();
                let sample = draw_inputs(&cfg.expansion, &d, &mut chained)?;
                let (transcript, _) =
                    run(strategy, &sample.inputs, &d.to_input_distribution(), &c, engine_seed)?;
                let report = certify(
                    &transcript,
                    &c,
                    &cfg.expansion.rate,
                    &cfg.expansion.partition,
                    &cfg.expansion.params,
                )?;
                if report.vacuous || report.ell < cfg.expansion.abort_threshold_ell {
                    return Err(ProtocolError::Abort {
                        reason: format!(
                            "activation {it}: certified interval {} below threshold {}",
                            report.ell, cfg.expansion.abort_threshold_ell
                        ),
                        report: Box::new(report),
                    });
                }
                let xi = output_length(report.minentropy_bound, cfg.expansion.eps_ext);
                if xi == 0 {
                    return Err(ProtocolError::Abort {
                        reason: format!("activation {it}: nothing extractable"),
                        report: Box::new(report),
                    });
                }
                let raw = encode_outputs(&transcript);
                let ext = ExtractorParams::new(raw.len(), xi, cfg.expansion.eps_ext)?;
                let seed = BitString::from_source(initial_src, ext.seed_len())?;
                initial_seed += ext.seed_len() as u64;
                let output = toeplitz_extract(&raw, &seed, &ext)?;
                let ledger = Ledger {
                    bits_in_inputs: sample.bits_consumed,
                    bits_in_seed: ext.seed_len() as u64,
                    bits_out: xi as u64,
                    worst_sample_depth: sample.worst_depth,
                };
                ExpansionResult { output, report, ledger, transcript }
            }
        };
        reports.push(result.report.clone());
        ledgers.push(result.ledger);
        outputs.push(result.output);
    }
    let released = release_policy(&outputs, cfg.release);
    let ledger = Ledger {
        bits_in_inputs: initial_inputs,
        bits_in_seed: initial_seed,
        bits_out: released.len() as u64,
        worst_sample_depth: ledgers.iter().map(|l| l.worst_sample_depth).max().unwrap_or(0),
    };
    Ok(ComposeResult { released, reports, per_activation: ledgers, ledger })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expands one global seed into independent per-component subseeds by a
/// fixed labeled derivation, so a single --seed reproduces everything.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut h = splitmix64(global);
    for &byte in label.as_bytes() {
        h = splitmix64(h ^ byte as u64);
    }
    h
}
