//! Verification sweeps and report assembly behind the `sepalab` binary.
//!
//! Every sweep is a pure function of its parameters: trials are seeded
//! through [`trial_seed`], parallel iteration preserves trial order, and
//! reports carry no timestamps, so rerunning a command with the same
//! configuration reproduces the report byte for byte. The acceptance
//! suite drives the same sweep functions the binary does.

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::constructions::{
    build_equality_tf, build_index_lookup_tf, build_nearest_neighbor_tf,
    build_partition_equality_tf, build_threshold_ksparse_tf, report, ConstructError,
    ConstructionReport,
};
use crate::fixed::{FixedError, PrecisionConfig};
use crate::jl::{generate_family, orthogonal_family, JlError, ToleranceProfile};
use crate::protocols::{
    enumerate_dyck_fooling_set, fooling_report, lower_bound_table, BoundsTable, FoolingReport,
    Partition, ProtocolError,
};
use crate::rnn::{ceil_log2, dyck22_dfa, RnnError, RnnModel};
use crate::tasks::{
    disj_features, gen_dyck22, gen_equality, gen_index_lookup, gen_nn_instance, ineq_features,
    oracle_boolean, oracle_nearest_neighbor, sign_dot, trial_seed, BoolKind, EqVariant, Feature,
    LengthMode, TaskError, TaskInstance,
};
use crate::transformer::{Decision, ModelInput, PointItem, TfError, TransformerModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Jl(#[from] JlError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tf(#[from] TfError),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Construct(#[from] ConstructError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("serialization failed: {0}")]
    Serde(String),
}

fn params(msg: impl Into<String>) -> CliError {
    CliError::Params(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Full configuration of one run, echoed into every report header.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub target: String,
    pub n: Vec<usize>,
    pub trials: u64,
    pub seed: u64,
    pub kc: u32,
    pub gamma: Option<f64>,
    pub p: u64,
    pub format: Format,
    pub out: Option<String>,
}

impl RunConfig {
    pub fn new(command: &str, target: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            target: target.to_string(),
            n: vec![8, 16, 32, 64],
            trials: 1000,
            seed: 42,
            kc: 2,
            gamma: None,
            p: 20,
            format: Format::Json,
            out: None,
        }
    }
}

// ---------------------------------------------------------------------
// Construction sweeps
// ---------------------------------------------------------------------

/// Result of sweeping one built model against its oracle.
#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub construction: String,
    pub n: usize,
    /// Case source: "exhaustive", "random", "mqar", or "fresh".
    pub mode: String,
    pub cases: u64,
    pub mismatches: u64,
    /// Attention-weight assertions evaluated (0 when the sweep has none).
    pub weight_checks: u64,
    pub weight_violations: u64,
    /// Smallest target attention weight seen, where the sweep tracks one.
    pub min_target_weight: Option<f64>,
    pub model: ConstructionReport,
    pub pass: bool,
    pub first_counterexample: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Default)]
struct TrialRecord {
    ok: bool,
    weight_checks: u64,
    weight_violations: u64,
    min_weight: Option<f64>,
    counterexample: Option<serde_json::Value>,
}

impl TrialRecord {
    fn pass() -> Self {
        TrialRecord { ok: true, ..Default::default() }
    }
}

fn fold_records(
    construction: &str,
    n: usize,
    mode: &str,
    model_report: ConstructionReport,
    records: Vec<TrialRecord>,
) -> SweepOutcome {
    let mut out = SweepOutcome {
        construction: construction.to_string(),
        n,
        mode: mode.to_string(),
        cases: records.len() as u64,
        mismatches: 0,
        weight_checks: 0,
        weight_violations: 0,
        min_target_weight: None,
        model: model_report,
        pass: true,
        first_counterexample: None,
    };
    for r in records {
        if !r.ok {
            out.mismatches += 1;
        }
        out.weight_checks += r.weight_checks;
        out.weight_violations += r.weight_violations;
        if let Some(w) = r.min_weight {
            out.min_target_weight =
                Some(out.min_target_weight.map_or(w, |m: f64| m.min(w)));
        }
        if out.first_counterexample.is_none() {
            out.first_counterexample = r.counterexample;
        }
    }
    out.pass = out.mismatches == 0 && out.weight_violations == 0;
    out
}

fn grid(n: usize, kc: u32) -> Result<PrecisionConfig, CliError> {
    Ok(PrecisionConfig::new(n as u32, kc)?)
}

fn coarse_k(n: usize) -> usize {
    32 * ceil_log2(n).max(1)
}

/// Sweeps the retrieval construction: oracle match plus the target
/// attention weight >= 3/4 on every case.
pub fn sweep_index_lookup(
    n: usize,
    sigma: u32,
    trials: u64,
    seed: u64,
    kc: u32,
) -> Result<SweepOutcome, CliError> {
    let cfg = grid(n, kc)?;
    let family = generate_family(n, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    let model = build_index_lookup_tf(&cfg, n, sigma, family)?;
    let scale = cfg.scale();
    let mode = if n >= 10 { LengthMode::Uniform } else { LengthMode::Fixed };
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<TrialRecord, CliError> {
            let inst = gen_index_lookup(n, sigma, mode, trial_seed(seed, t))?;
            let input = ModelInput::SymbolQuery { seq: inst.seq.clone(), pos: inst.pos };
            let out = model.forward(&input)?;
            let ok = out.decision == Decision::Symbol(inst.label);
            let w = model.attention_weights(&input, 0, inst.seq.len())?;
            let target = w[0][inst.pos - 1];
            let weight_ok = 4 * target.ticks() >= 3 * scale;
            let counterexample = (!ok || !weight_ok).then(|| {
                json!({
                    "trial": t,
                    "seq": inst.seq,
                    "pos": inst.pos,
                    "expected": inst.label,
                    "decision": format!("{:?}", out.decision),
                    "target_weight": target.to_f64(),
                })
            });
            Ok(TrialRecord {
                ok,
                weight_checks: 1,
                weight_violations: u64::from(!weight_ok),
                min_weight: Some(target.to_f64()),
                counterexample,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(fold_records("index-lookup", n, "random", report("index-lookup", n, &model), records))
}

fn bits_from_u64(v: u64, n: usize) -> Vec<i8> {
    (0..n).map(|i| if (v >> i) & 1 == 1 { 1 } else { -1 }).collect()
}

/// Layer-1 weights must land on exactly 0 or exactly 1 on the grid for
/// every query row.
fn exact_weight_check(
    model: &TransformerModel,
    input: &ModelInput,
    rows: usize,
) -> Result<(u64, u64), CliError> {
    let scale = model.cfg.scale();
    let mut checks = 0;
    let mut violations = 0;
    for row in 0..rows {
        for head in model.attention_weights(input, 0, row)? {
            for w in head {
                checks += 1;
                if w.ticks() != 0 && w.ticks() != scale {
                    violations += 1;
                }
            }
        }
    }
    Ok((checks, violations))
}

/// Oracle for the pairing induced by a position partition: 1 iff some
/// paired positions disagree.
fn partition_mismatch(bits: &[i8], s_a: &[usize], s_b: &[usize]) -> u8 {
    u8::from(s_a.iter().zip(s_b).any(|(a, b)| bits[*a] != bits[*b]))
}

enum EqOracle {
    Halves,
    Paired { s_a: Vec<usize>, s_b: Vec<usize> },
}

impl EqOracle {
    /// Expected model output bit: 1 on equality for the halves task, 1 on
    /// mismatch for the paired task.
    fn expect(&self, bits: &[i8]) -> Result<u8, CliError> {
        Ok(match self {
            EqOracle::Halves => oracle_boolean(BoolKind::Eq, bits)?,
            EqOracle::Paired { s_a, s_b } => partition_mismatch(bits, s_a, s_b),
        })
    }
}

fn sweep_equality_like(
    construction: &str,
    n: usize,
    oracle: &EqOracle,
    model: TransformerModel,
    trials: Option<u64>,
    seed: u64,
    weight_stride: u64,
) -> Result<SweepOutcome, CliError> {
    let scale_bits = move |bits: Vec<i8>| ModelInput::Bits(bits);
    let run_case = |bits: Vec<i8>, idx: u64, check_weights: bool| -> Result<TrialRecord, CliError> {
        let expect = oracle.expect(&bits)?;
        let input = scale_bits(bits.clone());
        let out = model.forward(&input)?;
        let ok = out.decision == Decision::Bit(expect);
        let (weight_checks, weight_violations) = if check_weights {
            exact_weight_check(&model, &input, n)?
        } else {
            (0, 0)
        };
        let counterexample = (!ok || weight_violations > 0).then(|| {
            json!({
                "case": idx,
                "bits": bits,
                "expected": expect,
                "decision": format!("{:?}", out.decision),
            })
        });
        Ok(TrialRecord { ok, weight_checks, weight_violations, min_weight: None, counterexample })
    };
    let (mode, records) = match trials {
        None => {
            if n > 20 {
                return Err(params(format!("exhaustive sweep over 2^{n} inputs refused")));
            }
            let records: Vec<TrialRecord> = (0u64..1 << n)
                .into_par_iter()
                .map(|v| run_case(bits_from_u64(v, n), v, true))
                .collect::<Result<_, _>>()?;
            ("exhaustive", records)
        }
        Some(trials) => {
            let records: Vec<TrialRecord> = (0..trials)
                .into_par_iter()
                .map(|t| -> Result<TrialRecord, CliError> {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, t));
                    let half = n / 2;
                    let first: Vec<i8> =
                        (0..half).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
                    let second: Vec<i8> = if rng.gen::<bool>() {
                        first.clone()
                    } else {
                        (0..half).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
                    };
                    let mut bits = first;
                    bits.extend(second);
                    run_case(bits, t, t % weight_stride == 0)
                })
                .collect::<Result<_, _>>()?;
            ("random", records)
        }
    };
    let model_report = report(construction, n, &model);
    Ok(fold_records(construction, n, mode, model_report, records))
}

/// Sweeps the two-half equality construction. `trials = None` runs all
/// 2^n inputs and checks weight exactness on every case; a random sweep
/// checks weights on every `weight_stride`-th trial.
pub fn sweep_equality(
    n: usize,
    trials: Option<u64>,
    seed: u64,
    kc: u32,
    weight_stride: u64,
) -> Result<SweepOutcome, CliError> {
    let cfg = grid(n, kc)?;
    let family = generate_family(n, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    let model = build_equality_tf(&cfg, n, family)?;
    sweep_equality_like("equality", n, &EqOracle::Halves, model, trials, seed, weight_stride)
}

/// Seeded balanced split of token positions for the paired-equality
/// sweep; returns the sorted first side.
pub fn seeded_pairing(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70617274);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut s_a = idx[..n / 2].to_vec();
    s_a.sort_unstable();
    s_a
}

pub fn sweep_partition_equality(
    n: usize,
    trials: Option<u64>,
    seed: u64,
    kc: u32,
    weight_stride: u64,
) -> Result<SweepOutcome, CliError> {
    let cfg = grid(n, kc)?;
    let family = generate_family(n, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    let s_a = seeded_pairing(n, seed);
    let model = build_partition_equality_tf(&cfg, n, &s_a, family)?;
    let in_a: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &s_a {
            v[i] = true;
        }
        v
    };
    let s_b: Vec<usize> = (0..n).filter(|i| !in_a[*i]).collect();
    let oracle = EqOracle::Paired { s_a, s_b };
    sweep_equality_like("partition-equality", n, &oracle, model, trials, seed, weight_stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdKind {
    Ineq,
    Disj,
}

impl ThresholdKind {
    fn name(self) -> &'static str {
        match self {
            ThresholdKind::Ineq => "threshold-ineq",
            ThresholdKind::Disj => "threshold-disj",
        }
    }
    fn features(self, n: usize) -> Vec<Feature> {
        match self {
            ThresholdKind::Ineq => ineq_features(n),
            ThresholdKind::Disj => disj_features(n),
        }
    }
    fn oracle(self, bits: &[i8]) -> Result<u8, CliError> {
        Ok(match self {
            ThresholdKind::Ineq => oracle_boolean(BoolKind::Ineq, bits)?,
            ThresholdKind::Disj => oracle_boolean(BoolKind::Disj, bits)?,
        })
    }
    /// Half the random cases get the label-0 structure forced, keeping
    /// the sweep balanced where uniform bits would almost surely hit 1.
    fn gen_bits(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<i8> {
        let half = n / 2;
        let first: Vec<i8> = (0..half).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let second: Vec<i8> = if rng.gen::<bool>() {
            match self {
                ThresholdKind::Ineq => first.clone(),
                ThresholdKind::Disj => first
                    .iter()
                    .map(|b| if *b == 1 { -1 } else if rng.gen::<bool>() { 1 } else { -1 })
                    .collect(),
            }
        } else {
            (0..half).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
        };
        let mut bits = first;
        bits.extend(second);
        bits
    }
}

/// Sweeps a sparse-feature threshold construction (both benchmark
/// instantiations use threshold 0 over pairwise features).
pub fn sweep_threshold(
    kind: ThresholdKind,
    n: usize,
    trials: Option<u64>,
    seed: u64,
    kc: u32,
) -> Result<SweepOutcome, CliError> {
    let cfg = grid(n, kc)?;
    let family = generate_family(n + 1, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    let features = kind.features(n);
    let model = build_threshold_ksparse_tf(&cfg, n, &features, 0, family)?;
    let run_case = |bits: Vec<i8>, idx: u64| -> Result<TrialRecord, CliError> {
        let expect = kind.oracle(&bits)?;
        let out = model.forward(&ModelInput::Bits(bits.clone()))?;
        let ok = out.decision == Decision::Bit(expect);
        let counterexample = (!ok).then(|| {
            json!({
                "case": idx,
                "bits": bits,
                "expected": expect,
                "decision": format!("{:?}", out.decision),
            })
        });
        Ok(TrialRecord { ok, counterexample, ..TrialRecord::pass() })
    };
    let (mode, records) = match trials {
        None => {
            if n > 20 {
                return Err(params(format!("exhaustive sweep over 2^{n} inputs refused")));
            }
            let records: Vec<TrialRecord> = (0u64..1 << n)
                .into_par_iter()
                .map(|v| run_case(bits_from_u64(v, n), v))
                .collect::<Result<_, _>>()?;
            ("exhaustive", records)
        }
        Some(trials) => {
            let records: Vec<TrialRecord> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, t));
                    run_case(kind.gen_bits(n, &mut rng), t)
                })
                .collect::<Result<_, _>>()?;
            ("random", records)
        }
    };
    let model_report = report(kind.name(), n, &model);
    Ok(fold_records(kind.name(), n, mode, model_report, records))
}

fn nn_stream(points: &[Vec<i8>], labels: &[u8], d: usize) -> ModelInput {
    let unit = 1.0 / (d as f64).sqrt();
    let mut items = Vec::with_capacity(2 * points.len());
    for (p, y) in points.iter().zip(labels) {
        items.push(PointItem::Point(p.iter().map(|s| *s as f64 * unit).collect()));
        items.push(PointItem::Label(*y));
    }
    ModelInput::PointStream(items)
}

/// Sweeps the retrieval-by-similarity construction on margin-certified
/// instances; every query of every `weight_stride`-th instance also has
/// its layer-1 weight on the best stored row checked against 9/10.
pub fn sweep_nearest_neighbor(
    n: usize,
    sigma: u32,
    mqar: bool,
    trials: u64,
    seed: u64,
    kc: u32,
    gamma_override: Option<f64>,
    weight_stride: u64,
) -> Result<SweepOutcome, CliError> {
    let cfg = grid(n, kc)?;
    let d_in = ceil_log2(sigma as usize).max(1);
    // Sign vectors of equal dimension have dot products of one parity, so
    // a tie-free instance has an integer gap of at least 2: margin 2/d is
    // certified for every generated instance.
    let gamma = gamma_override.unwrap_or(2.0 / d_in as f64);
    let family = orthogonal_family(2 * n, ToleranceProfile::Fine { gamma })?;
    let model = build_nearest_neighbor_tf(&cfg, n, d_in, gamma, family)?;
    let scale = cfg.scale();
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<TrialRecord, CliError> {
            let inst = gen_nn_instance(n, sigma, trial_seed(seed, t), mqar)?;
            let input = nn_stream(&inst.points, &inst.labels, inst.d);
            let query_rows: Vec<usize> =
                (inst.stored..inst.points.len()).map(|q| 2 * q).collect();
            let outs = model.forward_at(&input, &query_rows)?;
            let mut rec = TrialRecord::pass();
            for (out, q) in outs.iter().zip(inst.stored..inst.points.len()) {
                let expect = oracle_nearest_neighbor(&inst, q + 1)?;
                if out.decision != Decision::Bit(expect) {
                    rec.ok = false;
                    rec.counterexample.get_or_insert_with(|| {
                        json!({
                            "trial": t,
                            "query": q,
                            "expected": expect,
                            "decision": format!("{:?}", out.decision),
                            "margin_ticks": inst.margin_ticks,
                        })
                    });
                }
            }
            if t % weight_stride == 0 {
                for q in inst.stored..inst.points.len() {
                    let best = (0..q)
                        .max_by_key(|i| sign_dot(&inst.points[*i], &inst.points[q]))
                        .expect("queries follow stored points");
                    let w = model.attention_weights(&input, 0, 2 * q)?;
                    let target = w[0][2 * best];
                    rec.weight_checks += 1;
                    if 10 * target.ticks() < 9 * scale {
                        rec.weight_violations += 1;
                        rec.counterexample.get_or_insert_with(|| {
                            json!({
                                "trial": t,
                                "query": q,
                                "target_weight": target.to_f64(),
                            })
                        });
                    }
                    let w_f = target.to_f64();
                    rec.min_weight = Some(rec.min_weight.map_or(w_f, |m: f64| m.min(w_f)));
                }
            }
            Ok(rec)
        })
        .collect::<Result<_, _>>()?;
    let mode = if mqar { "mqar" } else { "fresh" };
    let model_report = report("nearest-neighbor", n, &model);
    Ok(fold_records("nearest-neighbor", n, mode, model_report, records))
}

// ---------------------------------------------------------------------
// Protocol sweeps
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolOutcome {
    pub protocol: String,
    pub n: usize,
    pub p_bits: u32,
    pub cases: u64,
    pub output_mismatches: u64,
    pub budget_violations: u64,
    pub max_total_bits: u64,
    /// Closed-form budget: exact m*p for the recurrent protocol, the
    /// headline 3*width*(p + log2 n)*H for attention.
    pub bound_bits: u64,
    /// Per-step bits of the first case (attention protocol only).
    pub decomposition: Option<[u64; 4]>,
    pub pass: bool,
    pub first_counterexample: Option<serde_json::Value>,
}

/// Runs the attention protocol on retrieval instances, rotating through
/// prefix, interleaved, and seeded partitions, and demands bit-identical
/// outputs plus per-message budget conformance on every case.
pub fn sweep_tf_protocol(
    n: usize,
    trials: u64,
    seed: u64,
    kc: u32,
) -> Result<ProtocolOutcome, CliError> {
    let cfg = grid(n, kc)?;
    let family = generate_family(n, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    let model = build_index_lookup_tf(&cfg, n, 64, family)?;
    struct Case {
        ok: bool,
        budget_ok: bool,
        total: u64,
        bound: u64,
        decomposition: [u64; 4],
        counterexample: Option<serde_json::Value>,
    }
    let cases: Vec<Case> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Case, CliError> {
            let inst = gen_index_lookup(n, 64, LengthMode::Fixed, trial_seed(seed, t))?;
            let input = ModelInput::SymbolQuery { seq: inst.seq.clone(), pos: inst.pos };
            let rows = inst.seq.len() + 1;
            let partition = match t % 3 {
                0 => Partition::prefix(rows, 1 + (t as usize / 3) % (rows - 1))?,
                1 => Partition::interleaved(rows)?,
                _ => Partition::seeded(rows, trial_seed(seed, t))?,
            };
            let direct = model.forward(&input)?;
            let (out, transcript, rep) = crate::protocols::run_one_layer_tf_protocol(
                &model, &input, &partition,
            )?;
            let direct_ticks: Vec<i64> = direct.vector.iter().map(|v| v.ticks()).collect();
            let proto_ticks: Vec<i64> = out.vector.iter().map(|v| v.ticks()).collect();
            let ok = direct_ticks == proto_ticks && out.decision == direct.decision;
            // The per-step widths are part of the contract, not just the
            // headline total.
            let p = cfg.p_bits() as u64;
            let log2n = ceil_log2(rows) as u64;
            let d = model.stats().d as u64;
            let m_v: u64 = model.layers[0].heads.iter().map(|h| h.w_v.rows() as u64).sum();
            let heads = model.layers[0].heads.len() as u64;
            let expected = [d * p * heads, 2 * p * heads, 2 * (p + log2n) * heads, 4 * m_v * p];
            let budget_ok = rep.within_headline
                && rep.step_bits == expected
                && rep.total_bits == transcript.total_bits();
            let counterexample = (!ok || !budget_ok).then(|| {
                json!({
                    "trial": t,
                    "partition": format!("{:?}", partition.kind),
                    "output_equal": ok,
                    "step_bits": rep.step_bits,
                    "expected_step_bits": expected,
                    "total_bits": rep.total_bits,
                    "headline_bound": rep.headline_bound,
                })
            });
            Ok(Case {
                ok,
                budget_ok,
                total: rep.total_bits,
                bound: rep.headline_bound,
                decomposition: rep.step_bits,
                counterexample,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut outcome = ProtocolOutcome {
        protocol: "one-layer".to_string(),
        n,
        p_bits: cfg.p_bits(),
        cases: cases.len() as u64,
        output_mismatches: 0,
        budget_violations: 0,
        max_total_bits: 0,
        bound_bits: 0,
        decomposition: cases.first().map(|c| c.decomposition),
        pass: true,
        first_counterexample: None,
    };
    for c in &cases {
        if !c.ok {
            outcome.output_mismatches += 1;
        }
        if !c.budget_ok {
            outcome.budget_violations += 1;
        }
        outcome.max_total_bits = outcome.max_total_bits.max(c.total);
        outcome.bound_bits = outcome.bound_bits.max(c.bound);
        if outcome.first_counterexample.is_none() {
            outcome.first_counterexample = c.counterexample.clone();
        }
    }
    outcome.pass = outcome.output_mismatches == 0 && outcome.budget_violations == 0;
    Ok(outcome)
}

/// Runs the hidden-state prefix protocol on bracket strings at every
/// rotating split and demands agreement with the direct run plus an
/// exactly m*p-bit transcript.
pub fn sweep_rnn_protocol(
    len: usize,
    trials: u64,
    seed: u64,
    p_bits: u32,
) -> Result<ProtocolOutcome, CliError> {
    if len < 2 {
        return Err(params(format!("need strings of length >= 2, got {len}")));
    }
    let rnn = RnnModel::from_dfa(dyck22_dfa(), p_bits)?;
    let bound = (rnn.m as u64) * p_bits as u64;
    struct Case {
        ok: bool,
        budget_ok: bool,
        total: u64,
        counterexample: Option<serde_json::Value>,
    }
    let cases: Vec<Case> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Case, CliError> {
            let inst = gen_dyck22(len, trial_seed(seed, t))?;
            let symbols: Vec<usize> = inst.tokens.iter().map(|s| *s as usize).collect();
            let k = 1 + (t as usize) % (symbols.len() - 1);
            let direct = rnn.accepts(&symbols)?;
            let (out, transcript) =
                crate::protocols::run_rnn_prefix_protocol(&rnn, &symbols, k)?;
            let ok = out == direct;
            let total = transcript.total_bits();
            let budget_ok = total == bound;
            let counterexample = (!ok || !budget_ok).then(|| {
                json!({
                    "trial": t,
                    "split": k,
                    "direct": direct,
                    "protocol": out,
                    "total_bits": total,
                    "bound_bits": bound,
                })
            });
            Ok(Case { ok, budget_ok, total, counterexample })
        })
        .collect::<Result<_, _>>()?;
    let mut outcome = ProtocolOutcome {
        protocol: "rnn-prefix".to_string(),
        n: len,
        p_bits,
        cases: cases.len() as u64,
        output_mismatches: 0,
        budget_violations: 0,
        max_total_bits: 0,
        bound_bits: bound,
        decomposition: None,
        pass: true,
        first_counterexample: None,
    };
    for c in &cases {
        if !c.ok {
            outcome.output_mismatches += 1;
        }
        if !c.budget_ok {
            outcome.budget_violations += 1;
        }
        outcome.max_total_bits = outcome.max_total_bits.max(c.total);
        if outcome.first_counterexample.is_none() {
            outcome.first_counterexample = c.counterexample.clone();
        }
    }
    outcome.pass = outcome.output_mismatches == 0 && outcome.budget_violations == 0;
    Ok(outcome)
}

/// Enumerates the bracket fooling set and verifies its properties; the
/// quadratic pair sweep runs only up to length 10.
pub fn run_fooling(n: usize) -> Result<FoolingReport, CliError> {
    let set = enumerate_dyck_fooling_set(n)?;
    Ok(fooling_report(&set, n, n <= 10)?)
}

// ---------------------------------------------------------------------
// Width measurements for the scaling comparison
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct WidthRecord {
    pub construction: String,
    pub n: usize,
    pub width: usize,
    pub size_bits: u64,
}

/// Builds every construction at length `n` and reports the attention
/// width that the closed-form floors are compared against. The
/// similarity-retrieval model needs `4*eta + 1` to fit the grid, which
/// fails below n = 16 at the default alphabet; those lengths are
/// reported without it.
pub fn construction_widths(n: usize, seed: u64, kc: u32) -> Result<Vec<WidthRecord>, CliError> {
    let cfg = grid(n, kc)?;
    let family = generate_family(n, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    let mut out = Vec::new();
    let mut push = |name: &str, model: &TransformerModel| {
        let stats = model.stats();
        out.push(WidthRecord {
            construction: name.to_string(),
            n,
            width: stats.width,
            size_bits: stats.size_bits,
        });
    };
    push("index-lookup", &build_index_lookup_tf(&cfg, n, 64, family.clone())?);
    push("equality", &build_equality_tf(&cfg, n, family)?);
    let features = ineq_features(n);
    let marker_family = generate_family(n + 1, coarse_k(n), ToleranceProfile::Coarse, seed)?;
    push("threshold-ksparse", &build_threshold_ksparse_tf(&cfg, n, &features, 0, marker_family)?);
    let d_in = ceil_log2(64).max(1);
    let gamma = 2.0 / d_in as f64;
    let fine = orthogonal_family(2 * n, ToleranceProfile::Fine { gamma })?;
    match build_nearest_neighbor_tf(&cfg, n, d_in, gamma, fine) {
        Ok(model) => push("nearest-neighbor", &model),
        Err(ConstructError::Params(_)) if n < 16 => {}
        Err(e) => return Err(e.into()),
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Commands and report assembly
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum CmdResult {
    Verify(Vec<SweepOutcome>),
    Protocol(Vec<ProtocolOutcome>),
    Fooling(Vec<FoolingReport>),
    Bounds(Vec<BoundsTable>),
    Gen { count: u64, lines: String },
}

impl CmdResult {
    pub fn pass(&self) -> bool {
        match self {
            CmdResult::Verify(v) => v.iter().all(|o| o.pass),
            CmdResult::Protocol(v) => v.iter().all(|o| o.pass),
            CmdResult::Fooling(v) => {
                v.iter().all(|r| r.size_ok && r.pairs_ok && r.uniqueness_ok)
            }
            CmdResult::Bounds(_) => true,
            CmdResult::Gen { .. } => true,
        }
    }
}

pub const CONSTRUCTION_NAMES: [&str; 5] =
    ["index-lookup", "equality", "partition-equality", "threshold-ksparse", "nearest-neighbor"];

/// Exhaustive up to 12 input bits, seeded random above.
fn eq_trials(n: usize, trials: u64) -> Option<u64> {
    (n > 12).then_some(trials)
}

pub fn cmd_verify(config: &RunConfig) -> Result<CmdResult, CliError> {
    let mut out = Vec::new();
    for &n in &config.n {
        match config.target.as_str() {
            "index-lookup" => {
                out.push(sweep_index_lookup(n, 64, config.trials, config.seed, config.kc)?)
            }
            "equality" => out.push(sweep_equality(
                n,
                eq_trials(n, config.trials),
                config.seed,
                config.kc,
                100,
            )?),
            "partition-equality" => out.push(sweep_partition_equality(
                n,
                eq_trials(n, config.trials),
                config.seed,
                config.kc,
                100,
            )?),
            "threshold-ksparse" => {
                for kind in [ThresholdKind::Ineq, ThresholdKind::Disj] {
                    out.push(sweep_threshold(
                        kind,
                        n,
                        eq_trials(n, config.trials),
                        config.seed,
                        config.kc,
                    )?);
                }
            }
            "nearest-neighbor" => {
                for (sigma, mqar) in [(64, true), (1024, false)] {
                    out.push(sweep_nearest_neighbor(
                        n,
                        sigma,
                        mqar,
                        config.trials,
                        config.seed,
                        config.kc,
                        config.gamma,
                        20,
                    )?);
                }
            }
            other => {
                return Err(params(format!(
                    "unknown construction {other:?}; expected one of {CONSTRUCTION_NAMES:?}"
                )))
            }
        }
    }
    Ok(CmdResult::Verify(out))
}

pub fn cmd_protocol(config: &RunConfig) -> Result<CmdResult, CliError> {
    match config.target.as_str() {
        "one-layer" => {
            let mut out = Vec::new();
            for &n in &config.n {
                out.push(sweep_tf_protocol(n, config.trials, config.seed, config.kc)?);
            }
            Ok(CmdResult::Protocol(out))
        }
        "rnn-prefix" => {
            let mut out = Vec::new();
            for &n in &config.n {
                for p_bits in [1, 8] {
                    out.push(sweep_rnn_protocol(n, config.trials, config.seed, p_bits)?);
                }
            }
            Ok(CmdResult::Protocol(out))
        }
        "fooling" => {
            let mut out = Vec::new();
            for &n in &config.n {
                out.push(run_fooling(n)?);
            }
            Ok(CmdResult::Fooling(out))
        }
        other => Err(params(format!(
            "unknown protocol {other:?}; expected one-layer, rnn-prefix, or fooling"
        ))),
    }
}

pub fn cmd_bounds(config: &RunConfig) -> Result<CmdResult, CliError> {
    let mut out = Vec::new();
    for &n in &config.n {
        out.push(lower_bound_table(n as u64, config.p)?);
    }
    Ok(CmdResult::Bounds(out))
}

pub fn cmd_gen(config: &RunConfig) -> Result<CmdResult, CliError> {
    let mut instances = Vec::new();
    for &n in &config.n {
        for t in 0..config.trials {
            let seed = trial_seed(config.seed, t);
            let inst = match config.target.as_str() {
                "index-lookup" => {
                    let mode = if n >= 10 { LengthMode::Uniform } else { LengthMode::Fixed };
                    TaskInstance::IndexLookup(gen_index_lookup(n, 64, mode, seed)?)
                }
                "dyck22" => TaskInstance::Dyck22(gen_dyck22(n, seed)?),
                "eq-random" => {
                    TaskInstance::from_equality(gen_equality(EqVariant::Random, n, 2, seed)?)
                }
                "eq-one" => TaskInstance::from_equality(gen_equality(EqVariant::One, n, 2, seed)?),
                "eq-ncp" => TaskInstance::from_equality(gen_equality(EqVariant::Ncp, n, 2, seed)?),
                "nn" => {
                    let inst = gen_nn_instance(n, 1024, seed, false)?;
                    check_nn_labels(&inst)?;
                    TaskInstance::from_nn(inst)
                }
                "mqar" => {
                    let inst = gen_nn_instance(n, 64, seed, true)?;
                    check_nn_labels(&inst)?;
                    TaskInstance::from_nn(inst)
                }
                other => {
                    return Err(params(format!(
                        "unknown task {other:?}; expected index-lookup, dyck22, eq-random, \
                         eq-one, eq-ncp, nn, or mqar"
                    )))
                }
            };
            instances.push(inst);
        }
    }
    let lines = crate::tasks::to_jsonl(&instances)?;
    Ok(CmdResult::Gen { count: instances.len() as u64, lines })
}

/// Emitted instances must agree with the oracle and carry the parity
/// margin; generation bugs fail the run instead of polluting a dataset.
fn check_nn_labels(inst: &crate::tasks::NnInstance) -> Result<(), CliError> {
    if inst.margin_ticks < 2 {
        return Err(params(format!("generated instance with margin {}", inst.margin_ticks)));
    }
    for q in inst.stored..inst.points.len() {
        let expect = oracle_nearest_neighbor(inst, q + 1)?;
        if inst.labels[q] != expect {
            return Err(params(format!("label mismatch at query {q}")));
        }
    }
    Ok(())
}

pub fn run_command(config: &RunConfig) -> Result<CmdResult, CliError> {
    match config.command.as_str() {
        "verify" => cmd_verify(config),
        "protocol" => cmd_protocol(config),
        "bounds" => cmd_bounds(config),
        "gen" => cmd_gen(config),
        other => Err(params(format!("unknown command {other:?}"))),
    }
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_body(result: &CmdResult) -> String {
    let mut out = String::new();
    match result {
        CmdResult::Verify(rows) => {
            out.push_str(
                "construction,n,mode,cases,mismatches,weight_checks,weight_violations,\
                 min_target_weight,width,size_bits,pass\n",
            );
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.construction,
                    r.n,
                    r.mode,
                    r.cases,
                    r.mismatches,
                    r.weight_checks,
                    r.weight_violations,
                    fmt_opt_f64(r.min_target_weight),
                    r.model.width,
                    r.model.size_bits,
                    r.pass,
                ));
            }
        }
        CmdResult::Protocol(rows) => {
            out.push_str(
                "protocol,n,p_bits,cases,output_mismatches,budget_violations,\
                 max_total_bits,bound_bits,pass\n",
            );
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.protocol,
                    r.n,
                    r.p_bits,
                    r.cases,
                    r.output_mismatches,
                    r.budget_violations,
                    r.max_total_bits,
                    r.bound_bits,
                    r.pass,
                ));
            }
        }
        CmdResult::Fooling(rows) => {
            out.push_str("n,size,expected_size,pairs_checked,pairs_ok,uniqueness_ok,pass\n");
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.n,
                    r.size,
                    r.expected_size,
                    r.pairs_checked,
                    r.pairs_ok,
                    r.uniqueness_ok,
                    r.size_ok && r.pairs_ok && r.uniqueness_ok,
                ));
            }
        }
        CmdResult::Bounds(tables) => {
            out.push_str("n,p,task,architecture,quantity,floor\n");
            for t in tables {
                for r in &t.rows {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        t.n,
                        t.p,
                        r.task,
                        r.architecture,
                        csv_escape(r.quantity),
                        r.floor,
                    ));
                }
            }
        }
        CmdResult::Gen { lines, .. } => out.push_str(lines),
    }
    out
}

/// Serializes a finished run. JSON reports are one self-describing
/// object; CSV reports carry the configuration in `#` comment lines
/// around fixed per-command columns; generated datasets are JSONL with a
/// header line. No timestamps anywhere, so identical configurations
/// yield identical bytes.
pub fn render_report(config: &RunConfig, result: &CmdResult) -> Result<Vec<u8>, CliError> {
    let header = json!({
        "schema": 1,
        "config": config,
    });
    if let CmdResult::Gen { count, lines } = result {
        let mut head = header;
        head["count"] = json!(count);
        let mut out = serde_json::to_string(&head).map_err(|e| CliError::Serde(e.to_string()))?;
        out.push('\n');
        out.push_str(lines);
        return Ok(out.into_bytes());
    }
    match config.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Report<'a> {
                schema: u32,
                config: &'a RunConfig,
                pass: bool,
                results: &'a CmdResult,
            }
            let report = Report { schema: 1, config, pass: result.pass(), results: result };
            let mut bytes = serde_json::to_vec_pretty(&report)
                .map_err(|e| CliError::Serde(e.to_string()))?;
            bytes.push(b'\n');
            Ok(bytes)
        }
        Format::Csv => {
            let cfg_line =
                serde_json::to_string(config).map_err(|e| CliError::Serde(e.to_string()))?;
            let mut out = format!("# schema=1 config={cfg_line}\n");
            out.push_str(&csv_body(result));
            out.push_str(&format!("# pass={}\n", result.pass()));
            Ok(out.into_bytes())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(command: &str, target: &str, n: Vec<usize>, trials: u64) -> RunConfig {
        let mut c = RunConfig::new(command, target);
        c.n = n;
        c.trials = trials;
        c
    }

    #[test]
    fn index_lookup_sweep_passes_and_tracks_weights() {
        let out = sweep_index_lookup(8, 64, 50, 42, 2).expect("sweep");
        assert!(out.pass, "{:?}", out.first_counterexample);
        assert_eq!(out.cases, 50);
        assert_eq!(out.weight_checks, 50);
        let w = out.min_target_weight.expect("tracked");
        assert!(w >= 0.75, "min weight {w}");
    }

    #[test]
    fn equality_sweeps_pass_exhaustively_and_randomly() {
        let ex = sweep_equality(8, None, 42, 2, 1).expect("sweep");
        assert!(ex.pass, "{:?}", ex.first_counterexample);
        assert_eq!(ex.cases, 256);
        assert!(ex.weight_checks > 0);
        let rnd = sweep_equality(16, Some(60), 42, 2, 10).expect("sweep");
        assert!(rnd.pass, "{:?}", rnd.first_counterexample);
        assert_eq!(rnd.cases, 60);
        assert_eq!(rnd.weight_checks, 6 * 16 * 16);
    }

    #[test]
    fn partition_equality_sweep_passes() {
        let out = sweep_partition_equality(8, None, 42, 2, 4).expect("sweep");
        assert!(out.pass, "{:?}", out.first_counterexample);
        assert_eq!(out.cases, 256);
    }

    #[test]
    fn threshold_sweeps_pass_for_both_kinds() {
        for kind in [ThresholdKind::Ineq, ThresholdKind::Disj] {
            let ex = sweep_threshold(kind, 8, None, 42, 2).expect("sweep");
            assert!(ex.pass, "{}: {:?}", ex.construction, ex.first_counterexample);
            assert_eq!(ex.cases, 256);
            let rnd = sweep_threshold(kind, 16, Some(40), 42, 2).expect("sweep");
            assert!(rnd.pass, "{}: {:?}", rnd.construction, rnd.first_counterexample);
        }
    }

    #[test]
    fn threshold_random_cases_cover_both_labels() {
        for kind in [ThresholdKind::Ineq, ThresholdKind::Disj] {
            let mut seen = [false; 2];
            for t in 0..40u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(42, t));
                let bits = kind.gen_bits(16, &mut rng);
                seen[kind.oracle(&bits).expect("oracle") as usize] = true;
            }
            assert_eq!(seen, [true, true], "{}", kind.name());
        }
    }

    #[test]
    fn nearest_neighbor_sweep_passes_on_both_modes() {
        let mqar = sweep_nearest_neighbor(16, 64, true, 10, 42, 2, None, 5).expect("sweep");
        assert!(mqar.pass, "{:?}", mqar.first_counterexample);
        assert!(mqar.weight_checks > 0);
        assert!(mqar.min_target_weight.expect("tracked") >= 0.9);
        let fresh = sweep_nearest_neighbor(16, 1024, false, 10, 42, 2, None, 5).expect("sweep");
        assert!(fresh.pass, "{:?}", fresh.first_counterexample);
    }

    #[test]
    fn protocol_sweeps_pass() {
        let tf = sweep_tf_protocol(8, 30, 42, 2).expect("sweep");
        assert!(tf.pass, "{:?}", tf.first_counterexample);
        assert!(tf.max_total_bits <= tf.bound_bits);
        let dec = tf.decomposition.expect("recorded");
        assert_eq!(dec.iter().sum::<u64>(), tf.max_total_bits);
        let rnn = sweep_rnn_protocol(12, 30, 42, 1).expect("sweep");
        assert!(rnn.pass, "{:?}", rnn.first_counterexample);
        assert_eq!(rnn.max_total_bits, rnn.bound_bits);
    }

    #[test]
    fn width_records_cover_constructions() {
        let small = construction_widths(8, 42, 2).expect("widths");
        assert_eq!(small.len(), 3, "similarity retrieval skipped below its grid floor");
        let wide = construction_widths(16, 42, 2).expect("widths");
        assert_eq!(wide.len(), 4);
        assert!(wide.iter().all(|r| r.width > 0 && r.size_bits > 0));
    }

    #[test]
    fn verify_command_rejects_unknown_names() {
        let config = quick_config("verify", "nope", vec![8], 5);
        assert!(matches!(cmd_verify(&config), Err(CliError::Params(_))));
    }

    #[test]
    fn reports_are_byte_identical_across_reruns() {
        for format in [Format::Json, Format::Csv] {
            let mut config = quick_config("verify", "index-lookup", vec![8], 20);
            config.format = format;
            let a = render_report(&config, &run_command(&config).expect("run")).expect("render");
            let b = render_report(&config, &run_command(&config).expect("run")).expect("render");
            assert_eq!(a, b);
        }
    }

    #[test]
    fn json_report_is_schema_tagged_and_self_describing() {
        let config = quick_config("bounds", "", vec![1024], 1);
        let result = run_command(&config).expect("run");
        let bytes = render_report(&config, &result).expect("render");
        let v: serde_json::Value = serde_json::from_slice(&bytes).expect("parse");
        assert_eq!(v["schema"], 1);
        assert_eq!(v["config"]["command"], "bounds");
        assert_eq!(v["pass"], true);
        let rows = v["results"][0]["rows"].as_array().expect("rows");
        assert!(rows.iter().any(|r| r["floor"] == 52));
    }

    #[test]
    fn csv_report_has_fixed_columns() {
        let mut config = quick_config("protocol", "rnn-prefix", vec![8], 5);
        config.format = Format::Csv;
        let result = run_command(&config).expect("run");
        let text = String::from_utf8(render_report(&config, &result).expect("render")).expect("utf8");
        let mut lines = text.lines();
        assert!(lines.next().expect("header").starts_with("# schema=1"));
        assert_eq!(
            lines.next().expect("columns"),
            "protocol,n,p_bits,cases,output_mismatches,budget_violations,max_total_bits,bound_bits,pass"
        );
        assert!(text.trim_end().ends_with("# pass=true"));
    }

    #[test]
    fn gen_command_emits_oracle_consistent_jsonl() {
        let config = quick_config("gen", "mqar", vec![16], 5);
        let result = run_command(&config).expect("run");
        let CmdResult::Gen { count, .. } = &result else { panic!("wrong variant") };
        assert_eq!(*count, 5);
        let bytes = render_report(&config, &result).expect("render");
        let text = String::from_utf8(bytes).expect("utf8");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6, "header plus five instances");
        let head: serde_json::Value = serde_json::from_str(lines[0]).expect("head");
        assert_eq!(head["schema"], 1);
        for line in &lines[1..] {
            let v: serde_json::Value = serde_json::from_str(line).expect("instance");
            assert_eq!(v["kind"], "mqar");
        }
    }

    #[test]
    fn fooling_command_reports_expected_sizes() {
        let config = quick_config("protocol", "fooling", vec![2, 4, 12], 1);
        let CmdResult::Fooling(reports) = run_command(&config).expect("run") else {
            panic!("wrong variant")
        };
        let sizes: Vec<u64> = reports.iter().map(|r| r.size).collect();
        assert_eq!(sizes, vec![2, 8, 2048]);
        assert!(reports.iter().all(|r| r.size_ok && r.uniqueness_ok));
        // Pairs are swept only at small lengths.
        assert!(reports[0].pairs_checked > 0);
        assert_eq!(reports[2].pairs_checked, 0);
    }
}
