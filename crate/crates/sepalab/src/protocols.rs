//! Two-party simulations with literal bit accounting.
//!
//! A [`Transcript`] records every message a simulated protocol sends; bit
//! lengths come from the serialized payloads themselves, so the totals the
//! tests compare against closed-form budgets are counted, not estimated.
//! The module also enumerates the depth-two bracket fooling set and
//! tabulates the closed-form width floors the experiments are judged
//! against.

use serde::Serialize;
use thiserror::Error;

use crate::fixed::{FixedError, FixedNum};
use crate::rnn::{ceil_log2, RnnError, RnnModel};
use crate::tasks::{bracket_char, oracle_dyck, parse_brackets, TaskError};
use crate::transformer::{ModelInput, ReadOut, TfError, TransformerModel};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("payload {label} value {value} does not fit {width} bits")]
    Overflow { label: String, value: i64, width: u32 },
    #[error(transparent)]
    Tf(#[from] TfError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("serialization failed: {0}")]
    Serde(String),
}

fn params(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Params(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn other(self) -> Party {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }
}

/// One message: who sent it, what it carries, and exactly how many bits
/// the serialized payload occupies.
#[derive(Debug, Clone, Serialize)]
pub struct Message {
    pub sender: Party,
    pub label: String,
    pub bits: u64,
    /// Raw payload words (ticks, register values, or indices).
    pub payload: Vec<i64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Transcript {
    pub messages: Vec<Message>,
}

/// Signed two's-complement range check for a declared width.
fn fits_signed(value: i64, width: u32) -> bool {
    if width == 0 {
        return value == 0;
    }
    if width >= 64 {
        return true;
    }
    let half = 1i64 << (width - 1);
    (-half..half).contains(&value)
}

fn fits_unsigned(value: i64, width: u32) -> bool {
    if value < 0 {
        return false;
    }
    if width >= 63 {
        return true;
    }
    value < 1i64 << width
}

impl Transcript {
    fn push(
        &mut self,
        sender: Party,
        label: String,
        payload: &[i64],
        width: u32,
        ok: impl Fn(i64, u32) -> bool,
    ) -> Result<(), ProtocolError> {
        for v in payload {
            if !ok(*v, width) {
                return Err(ProtocolError::Overflow { label, value: *v, width });
            }
        }
        self.messages.push(Message {
            sender,
            label,
            bits: payload.len() as u64 * width as u64,
            payload: payload.to_vec(),
        });
        Ok(())
    }

    /// Sends signed two's-complement words of the given width.
    pub fn send(
        &mut self,
        sender: Party,
        label: impl Into<String>,
        payload: &[i64],
        width: u32,
    ) -> Result<(), ProtocolError> {
        self.push(sender, label.into(), payload, width, fits_signed)
    }

    /// Sends unsigned words (registers, indices) of the given width.
    pub fn send_unsigned(
        &mut self,
        sender: Party,
        label: impl Into<String>,
        payload: &[i64],
        width: u32,
    ) -> Result<(), ProtocolError> {
        self.push(sender, label.into(), payload, width, fits_unsigned)
    }

    pub fn total_bits(&self) -> u64 {
        self.messages.iter().map(|m| m.bits).sum()
    }

    /// Total bits of every message whose label starts with the prefix.
    pub fn bits_for(&self, prefix: &str) -> u64 {
        self.messages.iter().filter(|m| m.label.starts_with(prefix)).map(|m| m.bits).sum()
    }

    pub fn to_json(&self) -> Result<String, ProtocolError> {
        #[derive(Serialize)]
        struct Export<'a> {
            total_bits: u64,
            messages: &'a [Message],
        }
        serde_json::to_string_pretty(&Export { total_bits: self.total_bits(), messages: &self.messages })
            .map_err(|e| ProtocolError::Serde(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PartitionKind {
    Prefix { k: usize },
    Interleaved,
    Seeded { seed: u64 },
    Arbitrary,
}

/// Disjoint covering split of the 0-based positions `0..n`.
#[derive(Debug, Clone, Serialize)]
pub struct Partition {
    pub n: usize,
    pub kind: PartitionKind,
    s_a: Vec<usize>,
    s_b: Vec<usize>,
}

impl Partition {
    fn validated(
        n: usize,
        kind: PartitionKind,
        s_a: Vec<usize>,
        s_b: Vec<usize>,
    ) -> Result<Self, ProtocolError> {
        if s_a.is_empty() || s_b.is_empty() {
            return Err(params("both sides of a partition must be nonempty"));
        }
        let mut seen = vec![false; n];
        for &i in s_a.iter().chain(&s_b) {
            if i >= n {
                return Err(params(format!("position {i} outside 0..{n}")));
            }
            if seen[i] {
                return Err(params(format!("position {i} assigned twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(params("partition does not cover every position"));
        }
        Ok(Partition { n, kind, s_a, s_b })
    }

    /// First `k` positions against the rest.
    pub fn prefix(n: usize, k: usize) -> Result<Self, ProtocolError> {
        if k == 0 || k >= n {
            return Err(params(format!("prefix split k = {k} outside 1..{n}")));
        }
        Self::validated(n, PartitionKind::Prefix { k }, (0..k).collect(), (k..n).collect())
    }

    /// Even positions against odd positions.
    pub fn interleaved(n: usize) -> Result<Self, ProtocolError> {
        Self::validated(
            n,
            PartitionKind::Interleaved,
            (0..n).step_by(2).collect(),
            (1..n).step_by(2).collect(),
        )
    }

    /// Reproducible random balanced split.
    pub fn seeded(n: usize, seed: u64) -> Result<Self, ProtocolError> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let half = n / 2;
        let (a, b) = idx.split_at(half.max(1));
        let mut s_a = a.to_vec();
        let mut s_b = b.to_vec();
        s_a.sort_unstable();
        s_b.sort_unstable();
        Self::validated(n, PartitionKind::Seeded { seed }, s_a, s_b)
    }

    /// Explicit first-party set; the complement goes to the second party.
    pub fn custom(n: usize, s_a: Vec<usize>) -> Result<Self, ProtocolError> {
        let mut in_a = vec![false; n];
        for &i in &s_a {
            if i >= n {
                return Err(params(format!("position {i} outside 0..{n}")));
            }
            in_a[i] = true;
        }
        let s_b: Vec<usize> = (0..n).filter(|i| !in_a[*i]).collect();
        Self::validated(n, PartitionKind::Arbitrary, s_a, s_b)
    }

    pub fn side_a(&self) -> &[usize] {
        &self.s_a
    }

    pub fn side_b(&self) -> &[usize] {
        &self.s_b
    }

    pub fn side_of(&self, i: usize) -> Party {
        if self.s_a.contains(&i) {
            Party::Alice
        } else {
            Party::Bob
        }
    }
}

/// One-way prefix protocol for a recurrent recognizer: the party holding
/// the first `k` symbols runs the recurrence, ships the packed hidden
/// state (exactly `m * p` bits), and the other party finishes the run.
pub fn run_rnn_prefix_protocol(
    rnn: &RnnModel,
    input: &[usize],
    k: usize,
) -> Result<(bool, Transcript), ProtocolError> {
    if input.is_empty() {
        return Err(params("input must be nonempty"));
    }
    if k == 0 || k >= input.len() {
        return Err(params(format!("split k = {k} outside 1..{}", input.len())));
    }
    let mut transcript = Transcript::default();
    // Alice's half.
    let mid = rnn.run_from(rnn.start_state(), &input[..k])?;
    let regs: Vec<i64> = rnn.state_registers(mid).iter().map(|r| *r as i64).collect();
    transcript.send_unsigned(Party::Alice, "hidden-state", &regs, rnn.p_bits)?;
    // Bob's half: rebuild the state from the wire image and continue.
    let wire = rnn.state_wire_bits(mid);
    let resumed = rnn.state_from_wire_bits(&wire)?;
    let fin = rnn.run_from(resumed, &input[k..])?;
    Ok((rnn.is_accepting(fin), transcript))
}

/// Per-head bit decomposition of the attention protocol, plus the
/// closed-form budget it is compared against.
#[derive(Debug, Clone, Serialize)]
pub struct TfProtocolReport {
    pub heads: usize,
    pub p_bits: u32,
    pub log2n: u32,
    /// Step totals across heads: query row, max logit, partial
    /// denominators, partial value sums.
    pub step_bits: [u64; 4],
    pub total_bits: u64,
    /// 3 * width * (p + log2 n) * heads.
    pub headline_bound: u64,
    pub within_headline: bool,
}

/// Four-step simulation of a single-layer attention model under an
/// arbitrary input partition. The party holding the final row leads;
/// roles swap silently when that row belongs to the second party. Output
/// is bit-identical to direct evaluation because the grid's nonnegative
/// additions are associative (normalizer) and the value sums stay far
/// from saturation.
pub fn run_one_layer_tf_protocol(
    tf: &TransformerModel,
    input: &ModelInput,
    partition: &Partition,
) -> Result<(ReadOut, Transcript, TfProtocolReport), ProtocolError> {
    if tf.layers.len() != 1 {
        return Err(params(format!("protocol covers 1-layer models, got {}", tf.layers.len())));
    }
    let rows = tf.embed_rows(input)?;
    let n_rows = rows.len();
    if partition.n != n_rows {
        return Err(params(format!(
            "partition over {} positions, input embeds to {n_rows}",
            partition.n
        )));
    }
    let layer = &tf.layers[0];
    let read_row = n_rows - 1;
    let leader = partition.side_of(read_row);
    let follower = leader.other();
    let my = |p: Party| -> &[usize] {
        if p == Party::Alice {
            partition.side_a()
        } else {
            partition.side_b()
        }
    };

    let cfg = &tf.cfg;
    let p = cfg.p_bits();
    let log2n = ceil_log2(n_rows) as u32;
    let zero = cfg.zero();
    let x_read = &rows[read_row];
    let mut transcript = Transcript::default();
    let mut concat: Vec<FixedNum> = Vec::new();

    for (h, head) in layer.heads.iter().enumerate() {
        // Step 1: the leader ships the final row so both sides can form
        // the query.
        let ticks: Vec<i64> = x_read.iter().map(|v| v.ticks()).collect();
        transcript.send(leader, format!("h{h}/step1/query-row"), &ticks, p)?;
        let q_raw = head.w_q.matvec(x_read)?;
        let q: Vec<FixedNum> =
            q_raw.iter().map(|v| v.mul(&head.query_scale)).collect::<Result<_, _>>()?;

        // Both parties compute logits for their own positions.
        let logit_at = |i: usize| -> Result<FixedNum, ProtocolError> {
            let key = head.w_k.matvec(&rows[i])?;
            let mut acc = zero;
            for (qv, kv) in q.iter().zip(&key) {
                if !qv.is_zero() && !kv.is_zero() {
                    acc = acc.add(&qv.mul(kv)?)?;
                }
            }
            Ok(acc)
        };
        let mut logits: Vec<Option<FixedNum>> = vec![None; n_rows];
        for &i in partition.side_a().iter().chain(partition.side_b()) {
            logits[i] = Some(logit_at(i)?);
        }
        let side_max = |p_side: Party| -> FixedNum {
            my(p_side)
                .iter()
                .map(|i| logits[*i].expect("filled"))
                .max_by_key(|l| l.ticks())
                .expect("nonempty side")
        };

        // Step 2: exchange per-side maxima; both sides now hold M.
        let m_lead = side_max(leader);
        let m_follow = side_max(follower);
        transcript.send(leader, format!("h{h}/step2/max-logit"), &[m_lead.ticks()], p)?;
        transcript.send(follower, format!("h{h}/step2/max-logit"), &[m_follow.ticks()], p)?;
        let m = if m_lead.ticks() >= m_follow.ticks() { m_lead } else { m_follow };

        // Step 3: per-side normalizer halves. Nonnegative grid addition
        // is associative, so Z_A + Z_B equals the direct sum over all
        // positions regardless of the partition.
        let mut exps: Vec<Option<FixedNum>> = vec![None; n_rows];
        let side_z = |side: Party, exps: &mut Vec<Option<FixedNum>>| -> Result<FixedNum, ProtocolError> {
            let mut z = zero;
            for &i in my(side) {
                let e = logits[i].expect("filled").sub(&m)?.exp();
                z = z.add(&e)?;
                exps[i] = Some(e);
            }
            Ok(z)
        };
        let z_lead = side_z(leader, &mut exps)?;
        let z_follow = side_z(follower, &mut exps)?;
        transcript.send(leader, format!("h{h}/step3/partial-denominator"), &[z_lead.ticks()], p + log2n)?;
        transcript.send(
            follower,
            format!("h{h}/step3/partial-denominator"),
            &[z_follow.ticks()],
            p + log2n,
        )?;
        let z = z_lead.add(&z_follow)?;

        // Step 4: per-side weighted value sums, exchanged at doubled
        // precision, then combined.
        let m_v = head.w_v.rows();
        let side_u = |side: Party| -> Result<Vec<FixedNum>, ProtocolError> {
            let mut u = vec![zero; m_v];
            for &i in my(side) {
                let w = exps[i].expect("filled").div(&z)?;
                if w.is_zero() {
                    continue;
                }
                let val = head.w_v.matvec(&rows[i])?;
                for (acc, v) in u.iter_mut().zip(&val) {
                    if !v.is_zero() {
                        *acc = acc.add(&w.mul(v)?)?;
                    }
                }
            }
            Ok(u)
        };
        let u_lead = side_u(leader)?;
        let u_follow = side_u(follower)?;
        let lead_ticks: Vec<i64> = u_lead.iter().map(|v| v.ticks()).collect();
        let follow_ticks: Vec<i64> = u_follow.iter().map(|v| v.ticks()).collect();
        transcript.send(leader, format!("h{h}/step4/partial-value"), &lead_ticks, 2 * p)?;
        transcript.send(follower, format!("h{h}/step4/partial-value"), &follow_ticks, 2 * p)?;
        for (a, b) in u_lead.iter().zip(&u_follow) {
            concat.push(a.add(b)?);
        }
    }

    // Both parties hold the combined head outputs; the rest is local.
    let mut v = layer.w_o.matvec(&concat)?;
    if layer.residual {
        for (acc, x) in v.iter_mut().zip(x_read) {
            *acc = acc.add(x)?;
        }
    }
    let v = layer.ffn.eval(&v)?;
    let out = tf.apply_readout(read_row, &v)?;

    let heads = layer.heads.len();
    let step_bits = [
        transcript.messages.iter().filter(|m| m.label.contains("/step1/")).map(|m| m.bits).sum(),
        transcript.messages.iter().filter(|m| m.label.contains("/step2/")).map(|m| m.bits).sum(),
        transcript.messages.iter().filter(|m| m.label.contains("/step3/")).map(|m| m.bits).sum(),
        transcript.messages.iter().filter(|m| m.label.contains("/step4/")).map(|m| m.bits).sum(),
    ];
    let width = tf.stats().width as u64;
    let headline_bound = 3 * width * (p as u64 + log2n as u64) * heads as u64;
    let total_bits = transcript.total_bits();
    let report = TfProtocolReport {
        heads,
        p_bits: p,
        log2n,
        step_bits,
        total_bits,
        headline_bound,
        within_headline: total_bits <= headline_bound,
    };
    Ok((out, transcript, report))
}

/// All balanced two-type bracket strings of even length `n` with nesting
/// depth at most two, in lexicographic token order. There are exactly
/// `2^(n-1)` of them.
pub fn enumerate_dyck_fooling_set(n: usize) -> Result<Vec<String>, ProtocolError> {
    if n == 0 || n % 2 != 0 {
        return Err(params(format!("length must be even and positive, got {n}")));
    }
    if n > 20 {
        return Err(params(format!("length {n} exceeds the enumeration guard of 20")));
    }
    let mut out = Vec::new();
    let mut stack: Vec<u8> = Vec::new();
    let mut cur: Vec<u8> = Vec::new();
    fn dfs(n: usize, cur: &mut Vec<u8>, stack: &mut Vec<u8>, out: &mut Vec<String>) {
        if cur.len() == n {
            if stack.is_empty() {
                out.push(cur.iter().map(|t| bracket_char(*t)).collect());
            }
            return;
        }
        // Tokens in id order: '(' 0, ')' 1, '[' 2, ']' 3.
        for tok in 0u8..4 {
            if tok % 2 == 0 {
                // Opening bracket: depth cap of two, and enough room to close.
                if stack.len() < 2 && n - cur.len() > stack.len() {
                    stack.push(tok);
                    cur.push(tok);
                    dfs(n, cur, stack, out);
                    cur.pop();
                    stack.pop();
                }
            } else if stack.last() == Some(&(tok - 1)) {
                let open = stack.pop().expect("nonempty");
                cur.push(tok);
                dfs(n, cur, stack, out);
                cur.pop();
                stack.push(open);
            }
        }
    }
    dfs(n, &mut cur, &mut stack, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct FoolingReport {
    pub n: usize,
    pub size: u64,
    pub expected_size: u64,
    pub size_ok: bool,
    pub pairs_checked: u64,
    pub pairs_ok: bool,
    pub uniqueness_ok: bool,
    pub first_violation: Option<String>,
}

/// Splits a token string into the odd-position half (0-based even
/// indices) and the even-position half.
fn halves(tokens: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let x = tokens.iter().copied().step_by(2).collect();
    let y = tokens.iter().copied().skip(1).step_by(2).collect();
    (x, y)
}

fn interleave(x: &[u8], y: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(x.len() + y.len());
    for (a, b) in x.iter().zip(y) {
        out.push(*a);
        out.push(*b);
    }
    out
}

/// The unique even-position complement of an odd-position half within
/// the depth-two balanced set: a closing token is forced whenever the
/// next given token opens (or the string ends), and an opening token's
/// type is forced by the next given closer.
fn reconstruct_even_half(x: &[u8]) -> Option<Vec<u8>> {
    let n = 2 * x.len();
    let mut stack: Vec<u8> = Vec::new();
    let mut y = Vec::with_capacity(x.len());
    for i in 0..n {
        if i % 2 == 0 {
            let tok = x[i / 2];
            if tok % 2 == 0 {
                if stack.len() >= 2 {
                    return None;
                }
                stack.push(tok);
            } else {
                if stack.last() != Some(&(tok - 1)) {
                    return None;
                }
                stack.pop();
            }
        } else {
            let tok = if i == n - 1 {
                stack.last().map(|o| o + 1)?
            } else {
                let next = x[(i + 1) / 2];
                if next % 2 == 0 {
                    // Next token opens, so the depth must drop now.
                    stack.last().map(|o| o + 1)?
                } else {
                    // Next token closes type next-1, so it must be opened now.
                    next - 1
                }
            };
            if tok % 2 == 0 {
                if stack.len() >= 2 {
                    return None;
                }
                stack.push(tok);
            } else {
                if stack.last() != Some(&(tok - 1)) {
                    return None;
                }
                stack.pop();
            }
            y.push(tok);
        }
    }
    stack.is_empty().then_some(y)
}

/// Checks the crossing property (for distinct members, at least one of
/// the swapped interleavings falls outside the language) and the
/// uniqueness of each member's even-position half.
pub fn verify_fooling_property(set: &[String], n: usize) -> Result<FoolingReport, ProtocolError> {
    fooling_report(set, n, true)
}

/// As [`verify_fooling_property`], with the quadratic pair sweep made
/// optional; size and uniqueness checks always run.
pub fn fooling_report(
    set: &[String],
    n: usize,
    check_pairs: bool,
) -> Result<FoolingReport, ProtocolError> {
    let expected_size = 1u64 << (n - 1);
    let size = set.len() as u64;
    let tokens: Vec<Vec<u8>> = set
        .iter()
        .map(|s| parse_brackets(s))
        .collect::<Result<_, _>>()?;
    let mut uniqueness_ok = true;
    let mut first_violation = None;
    for (s, toks) in set.iter().zip(&tokens) {
        let (x, y) = halves(toks);
        match reconstruct_even_half(&x) {
            Some(rec) if rec == y => {}
            _ => {
                uniqueness_ok = false;
                first_violation.get_or_insert_with(|| format!("reconstruction failed for {s}"));
            }
        }
    }
    let mut pairs_checked = 0u64;
    let mut pairs_ok = true;
    if check_pairs {
        for i in 0..tokens.len() {
            let (x1, y1) = halves(&tokens[i]);
            for j in (i + 1)..tokens.len() {
                let (x2, y2) = halves(&tokens[j]);
                pairs_checked += 1;
                let cross_a = oracle_dyck(&interleave(&x1, &y2), 2, 2)?;
                let cross_b = oracle_dyck(&interleave(&x2, &y1), 2, 2)?;
                if cross_a && cross_b {
                    pairs_ok = false;
                    first_violation
                        .get_or_insert_with(|| format!("pair ({}, {})", set[i], set[j]));
                }
            }
        }
    }
    Ok(FoolingReport {
        n,
        size,
        expected_size,
        size_ok: size == expected_size,
        pairs_checked,
        pairs_ok,
        uniqueness_ok,
        first_violation,
    })
}

/// One closed-form width floor.
#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub task: &'static str,
    pub architecture: &'static str,
    pub quantity: &'static str,
    pub floor: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsTable {
    pub n: u64,
    pub p: u64,
    pub log2n: u64,
    pub rows: Vec<BoundRow>,
}

/// Closed-form lower bounds on recurrent state width and attention width
/// for the benchmark tasks at sequence length `n` and precision `p`.
pub fn lower_bound_table(n: u64, p: u64) -> Result<BoundsTable, ProtocolError> {
    if n < 2 || p == 0 {
        return Err(params(format!("need n >= 2 and p >= 1, got n = {n} p = {p}")));
    }
    let log2n = ceil_log2(n as usize) as u64;
    let rows = vec![
        BoundRow {
            task: "index-lookup",
            architecture: "recurrent",
            quantity: "state width m",
            floor: n.div_ceil(p),
        },
        BoundRow {
            task: "equality",
            architecture: "recurrent",
            quantity: "state bits m*p",
            floor: n.div_ceil(2),
        },
        BoundRow {
            task: "nearest-neighbor",
            architecture: "recurrent",
            quantity: "state width m",
            floor: n.div_ceil(2 * p),
        },
        BoundRow {
            task: "associative-recall",
            architecture: "recurrent",
            quantity: "state width m",
            floor: n.div_ceil(p),
        },
        BoundRow {
            task: "dyck-depth-2",
            architecture: "one-layer-transformer",
            quantity: "width*heads m*H",
            floor: (n - 1).div_ceil(3 * (p + log2n)),
        },
    ];
    Ok(BoundsTable { n, p, log2n, rows })
}
