//! Seeded task generators and the brute-force oracles that define ground
//! truth for every construction test.
//!
//! Generators are pure functions of their parameters and seed. Labels are
//! never trusted from the sampling path: each instance's label field is
//! recomputed through the matching oracle, so "label equals oracle" holds
//! by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rnn::ceil_log2;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("retries exhausted: {0}")]
    RetriesExhausted(String),
    #[error("margin violation at query {query}: top dot {top} tied with second {second} (units of 1/{den})")]
    MarginViolation { query: usize, top: i64, second: i64, den: i64 },
    #[error("arity mismatch: {0}")]
    Arity(String),
}

/// Derives an independent per-trial seed from a sweep seed (splitmix-style
/// finalizer; consecutive trials land far apart).
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    let mut z = seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------
// Index lookup
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthMode {
    /// Length exactly n; used for construction verification.
    Fixed,
    /// Length uniform on [10, n]; the training-data regime.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexLookupInstance {
    pub n: usize,
    pub sigma: u32,
    pub seq: Vec<u32>,
    /// 1-based retrieval position.
    pub pos: usize,
    pub label: u32,
}

pub fn oracle_index(seq: &[u32], pos: usize) -> Result<u32, TaskError> {
    if pos < 1 || pos > seq.len() {
        return Err(TaskError::Arity(format!("position {pos} outside 1..={}", seq.len())));
    }
    Ok(seq[pos - 1])
}

pub fn gen_index_lookup(
    n: usize,
    sigma: u32,
    mode: LengthMode,
    seed: u64,
) -> Result<IndexLookupInstance, TaskError> {
    if sigma < 2 {
        return Err(TaskError::BadParams(format!("alphabet size {sigma} < 2")));
    }
    if n < 1 {
        return Err(TaskError::BadParams("empty sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = match mode {
        LengthMode::Fixed => n,
        LengthMode::Uniform => {
            if n < 10 {
                return Err(TaskError::BadParams(format!("uniform length mode needs n >= 10, got {n}")));
            }
            rng.gen_range(10..=n)
        }
    };
    let seq: Vec<u32> = (0..len).map(|_| rng.gen_range(0..sigma)).collect();
    let pos = rng.gen_range(1..=len);
    let label = oracle_index(&seq, pos)?;
    Ok(IndexLookupInstance { n, sigma, seq, pos, label })
}

// ---------------------------------------------------------------------
// Bounded-depth bracket strings
// ---------------------------------------------------------------------

/// Token encoding: bracket type t opens as 2t and closes as 2t+1.
pub fn bracket_char(token: u8) -> char {
    ['(', ')', '[', ']'][token as usize]
}

/// Parses a bracket string over two types; test helper and CLI input aid.
pub fn parse_brackets(s: &str) -> Result<Vec<u8>, TaskError> {
    s.chars()
        .map(|c| match c {
            '(' => Ok(0),
            ')' => Ok(1),
            '[' => Ok(2),
            ']' => Ok(3),
            other => Err(TaskError::BadParams(format!("unexpected character {other:?}"))),
        })
        .collect()
}

/// Stack-simulation membership test for bracket strings with `n_types`
/// bracket types and nesting depth at most `depth_cap`. Total over
/// arbitrary token strings.
pub fn oracle_dyck(tokens: &[u8], n_types: u8, depth_cap: usize) -> Result<bool, TaskError> {
    let mut stack: Vec<u8> = Vec::new();
    for &tok in tokens {
        let ty = tok / 2;
        if ty >= n_types {
            return Err(TaskError::BadParams(format!("token {tok} outside {n_types} bracket types")));
        }
        if tok % 2 == 0 {
            if stack.len() == depth_cap {
                return Ok(false);
            }
            stack.push(ty);
        } else {
            match stack.pop() {
                Some(top) if top == ty => {}
                _ => return Ok(false),
            }
        }
    }
    Ok(stack.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyckInstance {
    pub n: usize,
    pub tokens: Vec<u8>,
    pub label: u8,
}

/// Constrained random walk producing a member of length exactly n:
/// n-2 steps of depth-driven choices, then a tail patch.
fn dyck_walk(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut tokens: Vec<u8> = Vec::with_capacity(n);
    let mut stack: Vec<u8> = Vec::new();
    for _ in 0..n - 2 {
        if stack.len() == 2 {
            let t = stack.pop().unwrap();
            tokens.push(2 * t + 1);
        } else if stack.is_empty() {
            let t = rng.gen_range(0..2u8);
            stack.push(t);
            tokens.push(2 * t);
        } else {
            // Depth one: two opens and the matching close, uniformly.
            let c = rng.gen_range(0..3u8);
            if c < 2 {
                stack.push(c);
                tokens.push(2 * c);
            } else {
                let t = stack.pop().unwrap();
                tokens.push(2 * t + 1);
            }
        }
    }
    if stack.is_empty() {
        let t = rng.gen_range(0..2u8);
        tokens.push(2 * t);
        tokens.push(2 * t + 1);
    } else {
        while let Some(t) = stack.pop() {
            tokens.push(2 * t + 1);
        }
    }
    debug_assert_eq!(tokens.len(), n);
    tokens
}

const CORRUPTION_RETRY_CAP: usize = 100;

pub fn gen_dyck22(n: usize, seed: u64) -> Result<DyckInstance, TaskError> {
    if n < 4 || n % 2 != 0 {
        return Err(TaskError::BadParams(format!("length {n} must be even and at least 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = rng.gen_bool(0.5);
    let base = dyck_walk(n, &mut rng);
    if positive {
        let label = u8::from(oracle_dyck(&base, 2, 2)?);
        debug_assert_eq!(label, 1);
        return Ok(DyckInstance { n, tokens: base, label });
    }
    for _ in 0..CORRUPTION_RETRY_CAP {
        let mut tokens = base.clone();
        let k = rng.gen_range(1..=(n / 10).max(1));
        let idxs = rand::seq::index::sample(&mut rng, n, k);
        for i in idxs.iter() {
            if rng.gen_bool(0.5) {
                tokens[i] ^= 2; // swap bracket type
            } else {
                tokens[i] ^= 1; // open <-> close
            }
        }
        if !oracle_dyck(&tokens, 2, 2)? {
            return Ok(DyckInstance { n, tokens, label: 0 });
        }
    }
    Err(TaskError::RetriesExhausted(format!(
        "corruption produced members {CORRUPTION_RETRY_CAP} times in a row at n={n}"
    )))
}

// ---------------------------------------------------------------------
// Equality variants
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqVariant {
    Random,
    One,
    Ncp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqualityInstance {
    pub variant: EqVariant,
    pub n: usize,
    pub sigma: u32,
    pub first: Vec<u32>,
    pub second: Vec<u32>,
    pub label: u8,
    /// Next-character-prediction variant only: per token position, the
    /// forced symbol there given the preceding prefix, or -1 where every
    /// symbol is a valid continuation. Indexed like `tokens()`.
    pub ncp_forced: Option<Vec<i64>>,
}

impl EqualityInstance {
    /// Separator token id: one past the symbol alphabet.
    pub fn sep(&self) -> u32 {
        self.sigma
    }

    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.first.clone();
        t.push(self.sep());
        t.extend_from_slice(&self.second);
        t
    }
}

pub fn oracle_equality(first: &[u32], second: &[u32]) -> Result<u8, TaskError> {
    if first.len() != second.len() {
        return Err(TaskError::Arity(format!("halves of length {} vs {}", first.len(), second.len())));
    }
    Ok(u8::from(first == second))
}

/// Forced-continuation labels for the copy phase: positions up to and
/// including the separator admit any symbol; each position after it must
/// repeat the first half.
pub fn ncp_forced_labels(first: &[u32]) -> Vec<i64> {
    let half = first.len();
    let mut out = vec![-1i64; 2 * half + 1];
    for (i, s) in first.iter().enumerate() {
        out[half + 1 + i] = *s as i64;
    }
    out
}

fn even_floor_length_start(n: usize) -> usize {
    let raw = n / 10;
    let raw = if raw % 2 == 1 { raw + 1 } else { raw };
    raw.max(2)
}

pub fn gen_equality(
    variant: EqVariant,
    n: usize,
    sigma: u32,
    seed: u64,
) -> Result<EqualityInstance, TaskError> {
    if n < 2 || n % 2 != 0 {
        return Err(TaskError::BadParams(format!("length {n} must be even and at least 2")));
    }
    match variant {
        EqVariant::Random if sigma != 2 => {
            return Err(TaskError::BadParams(format!("random variant is binary, got alphabet {sigma}")));
        }
        EqVariant::One | EqVariant::Ncp if sigma < 2 => {
            return Err(TaskError::BadParams(format!("alphabet size {sigma} < 2")));
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = even_floor_length_start(n);
    let k = start + 2 * rng.gen_range(0..=(n - start) / 2);
    let half = k / 2;
    let first: Vec<u32> = (0..half).map(|_| rng.gen_range(0..sigma)).collect();
    let (second, ncp_forced) = match variant {
        EqVariant::Random => {
            let second = if rng.gen_bool(0.5) {
                first.clone()
            } else {
                (0..half).map(|_| rng.gen_range(0..sigma)).collect()
            };
            (second, None)
        }
        EqVariant::One => {
            let mut second = first.clone();
            let p = rng.gen_range(0..half);
            let mut replacement = rng.gen_range(0..sigma - 1);
            if replacement >= second[p] {
                replacement += 1;
            }
            second[p] = replacement;
            (second, None)
        }
        EqVariant::Ncp => {
            let second = first.clone();
            let forced = ncp_forced_labels(&first);
            (second, Some(forced))
        }
    };
    let label = oracle_equality(&first, &second)?;
    Ok(EqualityInstance { variant, n, sigma, first, second, label, ncp_forced })
}

// ---------------------------------------------------------------------
// Nearest neighbor / multi-query associative recall
// ---------------------------------------------------------------------

/// Points are sign vectors; the real vector is signs scaled by 1/sqrt(d),
/// so every point has exact unit norm and all dot products are integers
/// over denominator d.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NnInstance {
    pub n: usize,
    pub sigma: u32,
    pub d: usize,
    pub mqar: bool,
    /// n sign vectors: the first `stored` are labelled points, the rest
    /// are queries in stream order.
    pub points: Vec<Vec<i8>>,
    /// Labels aligned with points; query labels are oracle outputs.
    pub labels: Vec<u8>,
    pub stored: usize,
    /// Smallest top-minus-second integer dot gap over all queries.
    pub margin_ticks: i64,
}

impl NnInstance {
    /// Certified margin as a real number; at least 1/d on any generated
    /// instance.
    pub fn gamma(&self) -> f64 {
        self.margin_ticks as f64 / self.d as f64
    }
}

pub fn sign_dot(a: &[i8], b: &[i8]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (*x as i64) * (*y as i64)).sum()
}

fn scan_argmax(points: &[Vec<i8>], upto: usize, q: &[i8]) -> (usize, i64, Option<i64>) {
    let mut top_i = 0;
    let mut top = i64::MIN;
    let mut second = None;
    for (i, p) in points.iter().enumerate().take(upto) {
        let s = sign_dot(q, p);
        if s > top {
            second = if top == i64::MIN { None } else { Some(top) };
            top = s;
            top_i = i;
        } else if second.map_or(true, |sec| s > sec) {
            second = Some(s);
        }
    }
    (top_i, top, second)
}

/// Label of the `k`-th point's nearest neighbor among all preceding
/// points (1-based k, stored < k <= n). Exact integer dot products; an
/// argmax tie is an error, never a silent tie-break.
pub fn oracle_nearest_neighbor(inst: &NnInstance, k: usize) -> Result<u8, TaskError> {
    if k <= inst.stored || k > inst.n {
        return Err(TaskError::BadParams(format!(
            "query index {k} outside {}..={}",
            inst.stored + 1,
            inst.n
        )));
    }
    let q = &inst.points[k - 1];
    let (top_i, top, second) = scan_argmax(&inst.points, k - 1, q);
    if second == Some(top) {
        return Err(TaskError::MarginViolation {
            query: k,
            top,
            second: top,
            den: inst.d as i64,
        });
    }
    Ok(inst.labels[top_i])
}

/// Minimum top-minus-second dot gap over every query; errors on any tie.
pub fn certify_margin(inst: &NnInstance) -> Result<i64, TaskError> {
    let mut min_gap = i64::MAX;
    for k in inst.stored + 1..=inst.n {
        let q = &inst.points[k - 1];
        let (_, top, second) = scan_argmax(&inst.points, k - 1, q);
        let gap = match second {
            Some(s) if s == top => {
                return Err(TaskError::MarginViolation { query: k, top, second: s, den: inst.d as i64 })
            }
            Some(s) => top - s,
            None => i64::MAX,
        };
        min_gap = min_gap.min(gap);
    }
    Ok(min_gap)
}

fn index_to_signs(idx: usize, d: usize) -> Vec<i8> {
    (0..d).map(|b| if (idx >> b) & 1 == 1 { 1 } else { -1 }).collect()
}

pub fn gen_nn_instance(
    n: usize,
    sigma: u32,
    seed: u64,
    mqar: bool,
) -> Result<NnInstance, TaskError> {
    if n < 2 || n % 2 != 0 {
        return Err(TaskError::BadParams(format!("length {n} must be even and at least 2")));
    }
    if sigma < 2 {
        return Err(TaskError::BadParams(format!("alphabet size {sigma} < 2")));
    }
    let stored = n / 2;
    if mqar && (sigma as usize) < stored {
        return Err(TaskError::BadParams(format!(
            "mqar needs alphabet >= {stored} distinct keys, got {sigma}"
        )));
    }
    let d = ceil_log2(sigma as usize).max(1);
    if d > 30 {
        return Err(TaskError::BadParams(format!("alphabet 2^{d} too large to index")));
    }
    let space = 1usize << d;
    let needed = if mqar { stored } else { n };
    if space < needed {
        return Err(TaskError::BadParams(format!(
            "insufficient distinct vectors: need {needed}, hypercube has {space}"
        )));
    }
    // Spare vectors let fresh-query mode replace a query whose nearest
    // neighbor ties; exact-match queries can never tie.
    let spares = if mqar { 0 } else { (space - needed).min(n + 64) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = rand::seq::index::sample(&mut rng, space, needed + spares).into_vec();
    let mut points: Vec<Vec<i8>> = pool[..stored].iter().map(|i| index_to_signs(*i, d)).collect();
    let mut labels: Vec<u8> = (0..stored).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    let mut cursor = stored;
    let mut margin_ticks = i64::MAX;
    if mqar {
        let mut perm: Vec<usize> = (0..stored).collect();
        perm.shuffle(&mut rng);
        for j in perm {
            let q = points[j].clone();
            let (top_i, top, second) = scan_argmax(&points, points.len(), &q);
            debug_assert_eq!(top, d as i64);
            if let Some(s) = second {
                margin_ticks = margin_ticks.min(top - s);
            }
            labels.push(labels[top_i]);
            points.push(q);
        }
    } else {
        for _ in 0..stored {
            loop {
                if cursor >= pool.len() {
                    return Err(TaskError::RetriesExhausted(
                        "ran out of spare query vectors while resolving argmax ties".into(),
                    ));
                }
                let q = index_to_signs(pool[cursor], d);
                cursor += 1;
                let (top_i, top, second) = scan_argmax(&points, points.len(), &q);
                if second == Some(top) {
                    continue;
                }
                if let Some(s) = second {
                    margin_ticks = margin_ticks.min(top - s);
                }
                labels.push(labels[top_i]);
                points.push(q);
                break;
            }
        }
    }
    let inst = NnInstance { n, sigma, d, mqar, points, labels, stored, margin_ticks };
    let certified = certify_margin(&inst)?;
    debug_assert_eq!(certified, inst.margin_ticks);
    Ok(inst)
}

// ---------------------------------------------------------------------
// Boolean function oracles
// ---------------------------------------------------------------------

/// One per-position feature of a threshold function: up to `arity`
/// argument positions (1-based; 0 marks an unused slot) and a truth table
/// over sign assignments of the arguments. Table index bit h is 1 when
/// argument h is +1; entries whose unused-slot bits are not all 1 must be
/// zero so that each live assignment is counted exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub args: Vec<u32>,
    pub table: Vec<u8>,
}

impl Feature {
    pub fn arity(&self) -> usize {
        self.args.len()
    }

    pub fn validate(&self, n: usize) -> Result<(), TaskError> {
        let k = self.arity();
        if self.table.len() != 1 << k {
            return Err(TaskError::Arity(format!(
                "table of {} entries for arity {k}",
                self.table.len()
            )));
        }
        for a in &self.args {
            if *a as usize > n {
                return Err(TaskError::Arity(format!("argument position {a} outside 1..={n}")));
            }
        }
        for (a, t) in self.table.iter().enumerate() {
            if *t > 1 {
                return Err(TaskError::Arity(format!("table entry {t} at {a} is not a bit")));
            }
            if *t == 1 {
                for (h, arg) in self.args.iter().enumerate() {
                    if *arg == 0 && (a >> h) & 1 == 0 {
                        return Err(TaskError::Arity(format!(
                            "nonzero table entry {a} sets an unused argument slot to -1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[i8]) -> Result<u8, TaskError> {
        let mut idx = 0usize;
        for (h, arg) in self.args.iter().enumerate() {
            let bit = if *arg == 0 {
                1
            } else {
                let pos = *arg as usize;
                if pos > x.len() {
                    return Err(TaskError::Arity(format!("argument position {pos} outside input of {}", x.len())));
                }
                usize::from(x[pos - 1] == 1)
            };
            idx |= bit << h;
        }
        Ok(self.table[idx])
    }
}

/// Per-position XOR features pairing i with i + n/2; positions in the
/// second half carry the empty feature.
pub fn ineq_features(n: usize) -> Vec<Feature> {
    pairwise_features(n, |b0, b1| b0 ^ b1)
}

/// Per-position AND features pairing i with i + n/2 (set intersection
/// when +1 encodes membership).
pub fn disj_features(n: usize) -> Vec<Feature> {
    pairwise_features(n, |b0, b1| b0 & b1)
}

fn pairwise_features(n: usize, op: impl Fn(u8, u8) -> u8) -> Vec<Feature> {
    assert!(n % 2 == 0, "paired features need even n");
    (1..=n)
        .map(|i| {
            if i <= n / 2 {
                let table = (0..4u8).map(|a| op(a & 1, (a >> 1) & 1)).collect();
                Feature { args: vec![i as u32, (i + n / 2) as u32], table }
            } else {
                Feature { args: vec![0, 0], table: vec![0; 4] }
            }
        })
        .collect()
}

pub enum BoolKind<'a> {
    Eq,
    Ineq,
    Disj,
    Index { pos: usize },
    ThresholdKSparse { features: &'a [Feature], b: i64 },
}

/// Reference evaluation of the boolean task family on a +/-1 string.
pub fn oracle_boolean(kind: BoolKind<'_>, x: &[i8]) -> Result<u8, TaskError> {
    for v in x {
        if *v != 1 && *v != -1 {
            return Err(TaskError::Arity(format!("inputs must be +/-1, got {v}")));
        }
    }
    let halves = |x: &[i8]| -> Result<usize, TaskError> {
        if x.len() % 2 != 0 {
            return Err(TaskError::Arity(format!("odd input length {}", x.len())));
        }
        Ok(x.len() / 2)
    };
    match kind {
        BoolKind::Eq => {
            let h = halves(x)?;
            Ok(u8::from(x[..h] == x[h..]))
        }
        BoolKind::Ineq => {
            let h = halves(x)?;
            Ok(u8::from(x[..h] != x[h..]))
        }
        BoolKind::Disj => {
            let h = halves(x)?;
            Ok(u8::from((0..h).any(|i| x[i] == 1 && x[i + h] == 1)))
        }
        BoolKind::Index { pos } => {
            if pos < 1 || pos > x.len() {
                return Err(TaskError::Arity(format!("index {pos} outside 1..={}", x.len())));
            }
            Ok(u8::from(x[pos - 1] == 1))
        }
        BoolKind::ThresholdKSparse { features, b } => {
            let mut count = 0i64;
            for f in features {
                count += f.eval(x)? as i64;
            }
            Ok(u8::from(count > b))
        }
    }
}

// ---------------------------------------------------------------------
// Uniform instance wrapper for JSONL export
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskInstance {
    IndexLookup(IndexLookupInstance),
    Dyck22(DyckInstance),
    EqRandom(EqualityInstance),
    EqOne(EqualityInstance),
    EqNcp(EqualityInstance),
    NearestNeighbor(NnInstance),
    Mqar(NnInstance),
}

impl TaskInstance {
    pub fn from_equality(inst: EqualityInstance) -> Self {
        match inst.variant {
            EqVariant::Random => TaskInstance::EqRandom(inst),
            EqVariant::One => TaskInstance::EqOne(inst),
            EqVariant::Ncp => TaskInstance::EqNcp(inst),
        }
    }

    pub fn from_nn(inst: NnInstance) -> Self {
        if inst.mqar {
            TaskInstance::Mqar(inst)
        } else {
            TaskInstance::NearestNeighbor(inst)
        }
    }
}

/// One JSON object per line.
pub fn to_jsonl(instances: &[TaskInstance]) -> Result<String, TaskError> {
    let mut out = String::new();
    for inst in instances {
        let line = serde_json::to_string(inst)
            .map_err(|e| TaskError::BadParams(format!("serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_lookup_is_deterministic_and_oracle_consistent() {
        let a = gen_index_lookup(64, 64, LengthMode::Uniform, 7).unwrap();
        let b = gen_index_lookup(64, 64, LengthMode::Uniform, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, oracle_index(&a.seq, a.pos).unwrap());
        assert!(a.seq.len() >= 10 && a.seq.len() <= 64);
    }

    #[test]
    fn index_lookup_uniform_mode_covers_range() {
        let mut seen_min = false;
        let mut seen_max = false;
        for t in 0..2000 {
            let inst = gen_index_lookup(20, 4, LengthMode::Uniform, trial_seed(3, t)).unwrap();
            assert!(inst.seq.len() >= 10 && inst.seq.len() <= 20);
            seen_min |= inst.seq.len() == 10;
            seen_max |= inst.seq.len() == 20;
        }
        assert!(seen_min && seen_max);
    }

    #[test]
    fn index_lookup_short_uniform_errors_but_fixed_allows() {
        assert!(gen_index_lookup(8, 64, LengthMode::Uniform, 1).is_err());
        let inst = gen_index_lookup(8, 64, LengthMode::Fixed, 1).unwrap();
        assert_eq!(inst.seq.len(), 8);
    }

    #[test]
    fn bracket_oracle_matches_reference_strings() {
        assert!(oracle_dyck(&parse_brackets("([])()").unwrap(), 2, 2).unwrap());
        assert!(!oracle_dyck(&parse_brackets("([[]])").unwrap(), 2, 2).unwrap());
        assert!(oracle_dyck(&[], 2, 2).unwrap());
        assert!(!oracle_dyck(&parse_brackets("(]").unwrap(), 2, 2).unwrap());
        assert!(!oracle_dyck(&parse_brackets("(").unwrap(), 2, 2).unwrap());
        // Depth three is fine at a higher cap.
        assert!(oracle_dyck(&parse_brackets("([[]])").unwrap(), 2, 3).unwrap());
    }

    #[test]
    fn dyck_generator_labels_match_oracle() {
        let mut positives = 0usize;
        for t in 0..1000 {
            let inst = gen_dyck22(40, trial_seed(11, t)).unwrap();
            assert_eq!(inst.tokens.len(), 40);
            let member = oracle_dyck(&inst.tokens, 2, 2).unwrap();
            assert_eq!(u8::from(member), inst.label);
            positives += inst.label as usize;
        }
        assert!((350..=650).contains(&positives), "positive fraction {positives}/1000");
    }

    #[test]
    fn dyck_generator_is_deterministic() {
        assert_eq!(gen_dyck22(24, 99).unwrap(), gen_dyck22(24, 99).unwrap());
        assert!(gen_dyck22(3, 1).is_err());
        assert!(gen_dyck22(6, 1).is_ok());
    }

    #[test]
    fn equality_one_differs_in_exactly_one_position() {
        for t in 0..200 {
            let inst = gen_equality(EqVariant::One, 40, 1024, trial_seed(5, t)).unwrap();
            let diffs = inst.first.iter().zip(&inst.second).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, 1);
            assert_eq!(inst.label, 0);
            assert_eq!(inst.label, oracle_equality(&inst.first, &inst.second).unwrap());
        }
    }

    #[test]
    fn equality_random_lengths_stay_on_even_grid() {
        for t in 0..500 {
            let inst = gen_equality(EqVariant::Random, 40, 2, trial_seed(6, t)).unwrap();
            let k = inst.first.len() * 2;
            assert!(k >= 4 && k <= 40 && k % 2 == 0, "k={k}");
            assert_eq!(inst.label, oracle_equality(&inst.first, &inst.second).unwrap());
        }
        // Binary-only contract for the random variant.
        assert!(gen_equality(EqVariant::Random, 40, 1024, 1).is_err());
    }

    #[test]
    fn equality_ncp_forces_the_copy_phase() {
        let inst = gen_equality(EqVariant::Ncp, 30, 1024, 4).unwrap();
        assert_eq!(inst.label, 1);
        let forced = inst.ncp_forced.as_ref().unwrap();
        let tokens = inst.tokens();
        assert_eq!(forced.len(), tokens.len());
        let half = inst.first.len();
        for (i, f) in forced.iter().enumerate() {
            if i <= half {
                assert_eq!(*f, -1, "prefix position {i} should be unconstrained");
            } else {
                assert_eq!(*f, inst.first[i - half - 1] as i64);
                assert_eq!(tokens[i] as i64, *f, "generated copy must satisfy its own constraint");
            }
        }
    }

    #[test]
    fn mqar_queries_always_hit_their_key_exactly() {
        let inst = gen_nn_instance(32, 64, 12, true).unwrap();
        assert_eq!(inst.points.len(), 32);
        assert_eq!(inst.margin_ticks, 2);
        for k in inst.stored + 1..=inst.n {
            let q = &inst.points[k - 1];
            let best = (0..k - 1).map(|i| sign_dot(q, &inst.points[i])).max().unwrap();
            assert_eq!(best, inst.d as i64, "exact match has full dot product");
            assert_eq!(inst.labels[k - 1], oracle_nearest_neighbor(&inst, k).unwrap());
        }
    }

    #[test]
    fn fresh_query_instances_carry_positive_margin() {
        for t in 0..50 {
            let inst = gen_nn_instance(16, 1024, trial_seed(21, t), false).unwrap();
            assert!(inst.margin_ticks >= 2, "sign dots change in steps of 2");
            assert!(inst.gamma() >= 1.0 / inst.d as f64);
            assert_eq!(certify_margin(&inst).unwrap(), inst.margin_ticks);
            // All points distinct.
            for i in 0..inst.n {
                for j in 0..i {
                    assert_ne!(inst.points[i], inst.points[j]);
                }
            }
        }
    }

    #[test]
    fn nn_generation_is_deterministic() {
        let a = gen_nn_instance(16, 1024, 5, false).unwrap();
        let b = gen_nn_instance(16, 1024, 5, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nn_rejects_impossible_demands() {
        // 16 distinct vectors demanded from a 3-bit hypercube.
        assert!(gen_nn_instance(16, 8, 1, false).is_err());
        // mqar needs at least n/2 symbols.
        assert!(gen_nn_instance(16, 4, 1, true).is_err());
    }

    #[test]
    fn oracle_reports_ties_instead_of_breaking_them() {
        // d=2: query [1,-1] has dot 0 with both stored points.
        let inst = NnInstance {
            n: 4,
            sigma: 4,
            d: 2,
            mqar: false,
            points: vec![vec![1, 1], vec![-1, -1], vec![1, -1], vec![-1, 1]],
            labels: vec![1, 0, 0, 0],
            stored: 2,
            margin_ticks: 0,
        };
        assert!(matches!(
            oracle_nearest_neighbor(&inst, 3),
            Err(TaskError::MarginViolation { .. })
        ));
    }

    #[test]
    fn two_point_instance_returns_the_matching_label() {
        let inst = NnInstance {
            n: 2,
            sigma: 4,
            d: 2,
            mqar: true,
            points: vec![vec![1, -1], vec![1, -1]],
            labels: vec![1, 1],
            stored: 1,
            margin_ticks: i64::MAX,
        };
        assert_eq!(oracle_nearest_neighbor(&inst, 2).unwrap(), 1);
    }

    #[test]
    fn boolean_oracles_agree_with_definitions() {
        let x = [-1, 1, -1, 1, -1, 1, -1, 1]; // "0101" twice
        assert_eq!(oracle_boolean(BoolKind::Eq, &x).unwrap(), 1);
        assert_eq!(oracle_boolean(BoolKind::Ineq, &x).unwrap(), 0);
        let y = [1, -1, -1, -1, -1, -1, -1, 1]; // 1000 vs 0001
        assert_eq!(oracle_boolean(BoolKind::Disj, &y).unwrap(), 0);
        let z = [1, -1, -1, -1, 1, -1, -1, 1];
        assert_eq!(oracle_boolean(BoolKind::Disj, &z).unwrap(), 1);
        assert_eq!(oracle_boolean(BoolKind::Index { pos: 2 }, &x).unwrap(), 1);
        assert_eq!(oracle_boolean(BoolKind::Index { pos: 1 }, &x).unwrap(), 0);
    }

    #[test]
    fn threshold_features_reproduce_ineq_exhaustively() {
        let n = 8;
        let features = ineq_features(n);
        for f in &features {
            f.validate(n).unwrap();
        }
        for code in 0..(1u32 << n) {
            let x: Vec<i8> = (0..n).map(|i| if (code >> i) & 1 == 1 { 1 } else { -1 }).collect();
            let via_threshold =
                oracle_boolean(BoolKind::ThresholdKSparse { features: &features, b: 0 }, &x).unwrap();
            let direct = oracle_boolean(BoolKind::Ineq, &x).unwrap();
            assert_eq!(via_threshold, direct, "code {code:#b}");
        }
    }

    #[test]
    fn threshold_features_reproduce_disj_exhaustively() {
        let n = 8;
        let features = disj_features(n);
        for code in 0..(1u32 << n) {
            let x: Vec<i8> = (0..n).map(|i| if (code >> i) & 1 == 1 { 1 } else { -1 }).collect();
            let via_threshold =
                oracle_boolean(BoolKind::ThresholdKSparse { features: &features, b: 0 }, &x).unwrap();
            let direct = oracle_boolean(BoolKind::Disj, &x).unwrap();
            assert_eq!(via_threshold, direct);
        }
    }

    #[test]
    fn feature_validation_rejects_bad_tables() {
        let f = Feature { args: vec![1, 0], table: vec![0, 1, 0, 0] };
        // Entry 1 has the unused slot (bit 1) at 0: double counting hazard.
        assert!(f.validate(4).is_err());
        let ok = Feature { args: vec![1, 0], table: vec![0, 0, 0, 1] };
        ok.validate(4).unwrap();
        assert!(Feature { args: vec![1], table: vec![0] }.validate(4).is_err());
        assert!(Feature { args: vec![9], table: vec![0, 1] }.validate(4).is_err());
    }

    #[test]
    fn jsonl_export_round_trips() {
        let il = TaskInstance::IndexLookup(gen_index_lookup(12, 8, LengthMode::Fixed, 2).unwrap());
        let dy = TaskInstance::Dyck22(gen_dyck22(12, 2).unwrap());
        let eq = TaskInstance::from_equality(gen_equality(EqVariant::One, 12, 16, 2).unwrap());
        let nn = TaskInstance::from_nn(gen_nn_instance(8, 64, 2, true).unwrap());
        let text = to_jsonl(&[il.clone(), dy.clone(), eq.clone(), nn.clone()]).unwrap();
        let mut lines = text.lines();
        for want in [&il, &dy, &eq, &nn] {
            let got: TaskInstance = serde_json::from_str(lines.next().unwrap()).unwrap();
            assert_eq!(&got, want);
        }
        assert!(text.lines().next().unwrap().contains("\"kind\":\"index_lookup\""));
        assert!(text.lines().nth(3).unwrap().contains("\"kind\":\"mqar\""));
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..10_000u64 {
            assert!(seen.insert(trial_seed(42, t)));
        }
    }
}
