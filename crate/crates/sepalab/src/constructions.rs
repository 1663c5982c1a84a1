//! Explicit fixed-precision transformer models for the benchmark tasks.
//!
//! Every builder returns a [`TransformerModel`] whose weights are chosen so
//! that, on the stated input family, the exact grid evaluation reproduces
//! the task oracle. No training happens anywhere: correctness comes from
//! attention logit gaps wide enough that the floored softmax either
//! concentrates provably (index lookup, nearest neighbor) or is exactly
//! one-hot (pairwise retrieval, feature lookup, address fetch).

use serde::Serialize;
use thiserror::Error;

use crate::fixed::{FixedError, FixedNum, PrecisionConfig};
use crate::jl::{verify_profile, JlError, JlFamily, ToleranceProfile};
use crate::rnn::ceil_log2;
use crate::tasks::{Feature, TaskError};
use crate::transformer::{
    AttentionHead, Embedder, FeedForward, FfnLayer, Matrix, Readout, ReadoutRule, TfError,
    TransformerLayer, TransformerModel,
};

#[derive(Debug, Error)]
pub enum ConstructError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("sign family unsuitable: {0}")]
    Family(String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Tf(#[from] TfError),
    #[error(transparent)]
    Jl(#[from] JlError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn params(msg: impl Into<String>) -> ConstructError {
    ConstructError::Params(msg.into())
}

/// `rows x d` matrix whose row `r` has a single entry `coeff` at column
/// `src + r`: reads a contiguous block of the input.
fn block_selector(
    cfg: &PrecisionConfig,
    rows: usize,
    d: usize,
    src: usize,
    coeff: FixedNum,
) -> Result<Matrix, TfError> {
    let mut m = Matrix::zeros(cfg, rows, d);
    for r in 0..rows {
        m.set(r, src + r, coeff)?;
    }
    Ok(m)
}

/// `d x m` output map placing head output coordinate `r` at `dst + r`.
fn block_router(cfg: &PrecisionConfig, d: usize, dst: usize, m: usize) -> Result<Matrix, TfError> {
    let mut w = Matrix::zeros(cfg, d, m);
    for r in 0..m {
        w.set(dst + r, r, cfg.one())?;
    }
    Ok(w)
}

fn check_cfg(cfg: &PrecisionConfig, n: usize) -> Result<(), ConstructError> {
    if cfg.n() as usize != n {
        return Err(params(format!("precision config sized for {} but n = {n}", cfg.n())));
    }
    Ok(())
}

fn check_family(
    family: &JlFamily,
    need: usize,
    profile: ToleranceProfile,
) -> Result<(), ConstructError> {
    if family.count < need {
        return Err(ConstructError::Family(format!(
            "family has {} vectors, need {need}",
            family.count
        )));
    }
    let check = verify_profile(family, profile);
    if !check.pass {
        return Err(ConstructError::Family(format!(
            "pairwise check failed: max off-diagonal {:?} at {:?}",
            check.max_off_diag, check.worst_pair
        )));
    }
    Ok(())
}

/// Logit scale for exact one-hot retrieval over n keys: ln n for the
/// stray count plus kc*ln(2n) so even the largest allowed stray
/// exponential floors to zero ticks.
fn one_hot_eta(cfg: &PrecisionConfig, n: usize) -> FixedNum {
    let nf = n as f64;
    cfg.quantize(nf.ln() + cfg.kc() as f64 * (2.0 * nf).ln())
}

/// Two-ReLU unit step on coordinate 0 of a d-vector: output coordinate 0
/// is 1 exactly when the input exceeds `lo + 1` grid values of `lo`, i.e.
/// `relu(x - lo) - relu(x - lo - 1)`, and all other coordinates are 0.
fn ffn_ramp_at(cfg: &PrecisionConfig, d: usize, lo: FixedNum) -> Result<FeedForward, TfError> {
    let one = cfg.one();
    let neg_one = cfg.from_int(-1);
    let mut w1 = Matrix::zeros(cfg, 2, d);
    w1.set(0, 0, one)?;
    w1.set(1, 0, one)?;
    let b1 = vec![
        cfg.from_ticks(-lo.ticks()),
        cfg.from_ticks(-(lo.ticks().saturating_add(cfg.scale()))),
    ];
    let mut w2 = Matrix::zeros(cfg, d, 2);
    w2.set(0, 0, one)?;
    w2.set(0, 1, neg_one)?;
    let b2 = vec![cfg.zero(); d];
    Ok(FeedForward { layers: vec![FfnLayer::new(w1, b1)?, FfnLayer::new(w2, b2)?] })
}

/// Static shape summary of a built model plus the logit scales in use.
#[derive(Debug, Clone, Serialize)]
pub struct ConstructionReport {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub attn_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub p_bits: u32,
    pub size_bits: u64,
    /// Quantized per-head query scales, layer by layer.
    pub query_scales: Vec<f64>,
}

pub fn report(name: &str, n: usize, model: &TransformerModel) -> ConstructionReport {
    let stats = model.stats();
    let query_scales = model
        .layers
        .iter()
        .flat_map(|l| l.heads.iter().map(|h| h.query_scale.to_f64()))
        .collect();
    ConstructionReport {
        name: name.to_string(),
        n,
        d: stats.d,
        attn_dim: stats.attn_dim,
        width: stats.width,
        layers: stats.layers,
        heads: stats.heads,
        p_bits: stats.p_bits,
        size_bits: stats.size_bits,
        query_scales,
    }
}

/// One-layer lookup model: position `p` of a symbol sequence is retrieved
/// by a trailing token whose query block carries the target's sign vector.
/// The attended value is the symbol's bit pattern; the readout thresholds
/// each bit at 1/2. The target's attention weight is >= 3/4 by the choice
/// of query scale `2*ln(3n) + 1`.
pub fn build_index_lookup_tf(
    cfg: &PrecisionConfig,
    n: usize,
    sigma: u32,
    family: JlFamily,
) -> Result<TransformerModel, ConstructError> {
    check_cfg(cfg, n)?;
    if sigma < 1 {
        return Err(params("alphabet must be nonempty"));
    }
    check_family(&family, n, ToleranceProfile::Coarse)?;
    let k = family.k;
    let sb = ceil_log2(sigma as usize).max(1);
    let d = sb + 2 * k;
    let one = cfg.one();

    let w_q = block_selector(cfg, k, d, sb, one)?;
    let w_k = block_selector(cfg, k, d, sb + k, one)?;
    let w_v = block_selector(cfg, sb, d, 0, one)?;
    let w_o = block_router(cfg, d, 0, sb)?;
    let eta = cfg.quantize(2.0 * (3.0 * n as f64).ln() + 1.0);

    // Readout: per-bit two-ReLU step, relu(2x - 1/2) - relu(2x - 3/2).
    // With target weight >= 3/4 a one-bit lands at >= 3/4, a zero-bit at
    // <= 1/4, so the step is exact.
    let two = cfg.from_int(2);
    let mut w1 = Matrix::zeros(cfg, 2 * sb, d);
    let mut b1 = Vec::with_capacity(2 * sb);
    for j in 0..sb {
        w1.set(2 * j, j, two)?;
        w1.set(2 * j + 1, j, two)?;
        b1.push(cfg.quantize_ratio(-1, 2)?);
        b1.push(cfg.quantize_ratio(-3, 2)?);
    }
    let mut w2 = Matrix::zeros(cfg, sb, 2 * sb);
    for j in 0..sb {
        w2.set(j, 2 * j, one)?;
        w2.set(j, 2 * j + 1, cfg.from_int(-1))?;
    }
    let readout = Readout {
        ffn: FeedForward {
            layers: vec![FfnLayer::new(w1, b1)?, FfnLayer::new(w2, vec![cfg.zero(); sb])?],
        },
        rule: ReadoutRule::SymbolFromBits { n_bits: sb },
    };

    let layer = TransformerLayer {
        heads: vec![AttentionHead { w_q, w_k, w_v, query_scale: eta }],
        w_o,
        ffn: FeedForward::identity(),
        residual: false,
    };
    let embedder = Embedder::SymbolRetrieval { n, sigma, sigma_bits: sb, family };
    Ok(TransformerModel::new(*cfg, embedder, vec![layer], readout, false)?)
}

/// Shared two-layer skeleton for the pairwise-XOR counters: layer 1
/// fetches each position's partner bit with an exactly one-hot head and
/// XORs it against the own bit; layer 2 averages the XOR column uniformly
/// and thresholds the mismatch count at one, yielding the "some pair
/// differs" indicator on coordinate 0.
fn paired_mismatch_model(
    cfg: &PrecisionConfig,
    n: usize,
    partner: Vec<u32>,
    family: JlFamily,
    readout: Readout,
) -> Result<TransformerModel, ConstructError> {
    let k = family.k;
    let d = 3 + 2 * k;
    let one = cfg.one();
    let neg_one = cfg.from_int(-1);
    let half = cfg.quantize_ratio(1, 2)?;

    // Layer 1: query = eta * [T(partner), 1], key = [T(own), -1/2]. Row k
    // of both maps reads the constant coordinate alone; the selector loops
    // stop at k so neither map spills into the adjacent sign block (a
    // spilled key row would tilt the constant by a per-row T entry and
    // break the uniform -eta/2 shift that the softmax cancels).
    let mut w_q = Matrix::zeros(cfg, k + 1, d);
    let mut w_k = Matrix::zeros(cfg, k + 1, d);
    for r in 0..k {
        w_q.set(r, 2 + k + r, one)?;
        w_k.set(r, 2 + r, one)?;
    }
    w_q.set(k, 2 + 2 * k, one)?;
    w_k.set(k, 2 + 2 * k, cfg.quantize_ratio(-1, 2)?)?;
    let mut w_v = Matrix::zeros(cfg, 1, d);
    w_v.set(0, 0, one)?;
    let w_o = block_router(cfg, d, 1, 1)?;
    let eta = one_hot_eta(cfg, n);

    // XOR of the own bit (coord 0) and the fetched bit (coord 1), both
    // exactly +/-1 since the head weight is exactly one:
    // (relu(a-b) + relu(b-a)) / 2.
    let mut x1 = Matrix::zeros(cfg, 2, d);
    x1.set(0, 0, one)?;
    x1.set(0, 1, neg_one)?;
    x1.set(1, 0, neg_one)?;
    x1.set(1, 1, one)?;
    let mut x2 = Matrix::zeros(cfg, d, 2);
    x2.set(0, 0, half)?;
    x2.set(0, 1, half)?;
    let xor_ffn = FeedForward {
        layers: vec![
            FfnLayer::new(x1, vec![cfg.zero(); 2])?,
            FfnLayer::new(x2, vec![cfg.zero(); d])?,
        ],
    };
    let layer1 = TransformerLayer {
        heads: vec![AttentionHead { w_q, w_k, w_v, query_scale: eta }],
        w_o,
        ffn: xor_ffn,
        residual: true,
    };

    // Layer 2: zero queries make the softmax exactly uniform (1/n is on
    // the grid since scale = n^kc), so coordinate 0 becomes c/n with c
    // the mismatch count; relu(n*x) - relu(n*x - 1) = min(c, 1).
    let w_q2 = Matrix::zeros(cfg, 1, d);
    let w_k2 = Matrix::zeros(cfg, 1, d);
    let mut w_v2 = Matrix::zeros(cfg, 1, d);
    w_v2.set(0, 0, one)?;
    let w_o2 = block_router(cfg, d, 0, 1)?;
    let mut c1 = Matrix::zeros(cfg, 2, d);
    let n_fx = cfg.from_int(n as i64);
    c1.set(0, 0, n_fx)?;
    c1.set(1, 0, n_fx)?;
    let mut c2 = Matrix::zeros(cfg, d, 2);
    c2.set(0, 0, one)?;
    c2.set(0, 1, neg_one)?;
    let count_ffn = FeedForward {
        layers: vec![
            FfnLayer::new(c1, vec![cfg.zero(), neg_one])?,
            FfnLayer::new(c2, vec![cfg.zero(); d])?,
        ],
    };
    let layer2 = TransformerLayer {
        heads: vec![AttentionHead { w_q: w_q2, w_k: w_k2, w_v: w_v2, query_scale: one }],
        w_o: w_o2,
        ffn: count_ffn,
        residual: false,
    };

    let embedder = Embedder::PairedBits { n, family, partner };
    Ok(TransformerModel::new(*cfg, embedder, vec![layer1, layer2], readout, false)?)
}

/// Equality of the two halves of a +/-1 string: positions in the second
/// half pair with their mirror in the first half; the model outputs 1 iff
/// no pair mismatches (readout flips the mismatch indicator).
pub fn build_equality_tf(
    cfg: &PrecisionConfig,
    n: usize,
    family: JlFamily,
) -> Result<TransformerModel, ConstructError> {
    check_cfg(cfg, n)?;
    if n < 2 || n % 2 != 0 {
        return Err(params(format!("n must be even and >= 2, got {n}")));
    }
    check_family(&family, n, ToleranceProfile::Coarse)?;
    let half = n / 2;
    let partner: Vec<u32> =
        (0..n).map(|i| if i < half { i as u32 } else { (i - half) as u32 }).collect();

    // EQ = 1 - mismatch indicator.
    let mut f = Matrix::zeros(cfg, 1, 3 + 2 * family.k);
    f.set(0, 0, cfg.from_int(-1))?;
    let readout = Readout {
        ffn: FeedForward { layers: vec![FfnLayer::new(f, vec![cfg.one()])?] },
        rule: ReadoutRule::BitAt { coord: 0 },
    };
    paired_mismatch_model(cfg, n, partner, family, readout)
}

/// Two-party variant: `s_a` lists the first party's positions (strictly
/// increasing, exactly half of them). The t-th smallest position outside
/// `s_a` pairs with the t-th element of `s_a`. Outputs 1 iff the two
/// induced substrings differ somewhere (mismatch convention, no flip).
pub fn build_partition_equality_tf(
    cfg: &PrecisionConfig,
    n: usize,
    s_a: &[usize],
    family: JlFamily,
) -> Result<TransformerModel, ConstructError> {
    check_cfg(cfg, n)?;
    if n < 2 || n % 2 != 0 {
        return Err(params(format!("n must be even and >= 2, got {n}")));
    }
    if s_a.len() != n / 2 {
        return Err(params(format!("s_a has {} positions, need {}", s_a.len(), n / 2)));
    }
    for w in s_a.windows(2) {
        if w[0] >= w[1] {
            return Err(params("s_a must be strictly increasing"));
        }
    }
    if let Some(&last) = s_a.last() {
        if last >= n {
            return Err(params(format!("s_a position {last} outside 0..{n}")));
        }
    }
    check_family(&family, n, ToleranceProfile::Coarse)?;
    let mut in_a = vec![false; n];
    for &i in s_a {
        in_a[i] = true;
    }
    let s_b: Vec<usize> = (0..n).filter(|i| !in_a[*i]).collect();
    let mut partner = vec![0u32; n];
    for (t, &a) in s_a.iter().enumerate() {
        partner[a] = a as u32;
        partner[s_b[t]] = a as u32;
    }
    let readout = Readout { ffn: FeedForward::identity(), rule: ReadoutRule::BitAt { coord: 0 } };
    paired_mismatch_model(cfg, n, partner, family, readout)
}

/// Pads every feature to a common arity. Appended argument slots are pads
/// (position 0); appended table entries are zero off the canonical
/// all-ones pad assignment, preserving the evaluation.
fn normalize_features(
    features: &[Feature],
    arity: usize,
) -> Result<(Vec<Vec<u32>>, Vec<Vec<u8>>), ConstructError> {
    let mut args_out = Vec::with_capacity(features.len());
    let mut tables_out = Vec::with_capacity(features.len());
    for f in features {
        let k0 = f.args.len();
        let mut args = f.args.clone();
        args.resize(arity, 0);
        let mut table = vec![0u8; 1 << arity];
        let pad_mask = ((1usize << arity) - 1) ^ ((1usize << k0) - 1);
        for (a, slot) in table.iter_mut().enumerate() {
            if a & pad_mask == pad_mask {
                *slot = f.table[a & ((1 << k0) - 1)];
            }
        }
        args_out.push(args);
        tables_out.push(table);
    }
    Ok((args_out, tables_out))
}

/// Two-layer counting model for sparse boolean features: one head per
/// argument slot fetches the referenced bit (pads fetch the zero marker),
/// a table-lookup feed-forward evaluates each position's feature, and a
/// uniform second layer thresholds the number of true features at `b`.
pub fn build_threshold_ksparse_tf(
    cfg: &PrecisionConfig,
    n: usize,
    features: &[Feature],
    b: i64,
    family: JlFamily,
) -> Result<TransformerModel, ConstructError> {
    check_cfg(cfg, n)?;
    if features.len() != n {
        return Err(params(format!("{} features for {n} positions", features.len())));
    }
    for f in features {
        f.validate(n)?;
    }
    if b < -1 || b > n as i64 {
        return Err(params(format!("threshold b = {b} outside -1..={n}")));
    }
    check_family(&family, n + 1, ToleranceProfile::Coarse)?;
    let arity = features.iter().map(|f| f.args.len()).max().unwrap_or(1).max(1);
    let (arg_positions, tables) = normalize_features(features, arity)?;

    let k = family.k;
    let table_len = 1usize << arity;
    let v_base = 2 + table_len;
    let t_base = v_base + arity;
    let d = t_base + (arity + 1) * k;
    let one = cfg.one();
    let neg_one = cfg.from_int(-1);
    let eta = one_hot_eta(cfg, n + 1);

    let mut heads = Vec::with_capacity(arity);
    for h in 0..arity {
        let w_q = block_selector(cfg, k, d, t_base + (1 + h) * k, one)?;
        let w_k = block_selector(cfg, k, d, t_base, one)?;
        let mut w_v = Matrix::zeros(cfg, 1, d);
        w_v.set(0, 0, one)?;
        heads.push(AttentionHead { w_q, w_k, w_v, query_scale: eta });
    }
    let mut w_o = Matrix::zeros(cfg, d, arity);
    for h in 0..arity {
        w_o.set(v_base + h, h, one)?;
    }

    // Feature evaluation: for every sign assignment `a` of the argument
    // slots, ind_a = relu(sum_h a_h*v_h + pads - (arity-1)) is 1 exactly
    // when the live arguments match `a` (pads contribute 0 but are
    // counted), then and_a = relu(t_a + ind_a - 1) picks up the table
    // bit and coordinate 0 collects the sum. Non-canonical pad
    // assignments also fire ind_a, which is why tables must vanish there.
    let mut f1 = Matrix::zeros(cfg, 2 * table_len, d);
    let mut b1 = Vec::with_capacity(2 * table_len);
    for a in 0..table_len {
        for h in 0..arity {
            let sign = if (a >> h) & 1 == 1 { one } else { neg_one };
            f1.set(a, v_base + h, sign)?;
        }
        f1.set(a, 1, one)?;
        b1.push(cfg.from_int(1 - arity as i64));
    }
    for a in 0..table_len {
        f1.set(table_len + a, 2 + a, one)?;
        b1.push(cfg.zero());
    }
    let mut f2 = Matrix::zeros(cfg, table_len, 2 * table_len);
    let mut b2 = Vec::with_capacity(table_len);
    for a in 0..table_len {
        f2.set(a, a, one)?;
        f2.set(a, table_len + a, one)?;
        b2.push(neg_one);
    }
    let mut f3 = Matrix::zeros(cfg, d, table_len);
    for a in 0..table_len {
        f3.set(0, a, one)?;
    }
    let feature_ffn = FeedForward {
        layers: vec![
            FfnLayer::new(f1, b1)?,
            FfnLayer::new(f2, b2)?,
            FfnLayer::new(f3, vec![cfg.zero(); d])?,
        ],
    };
    let layer1 = TransformerLayer { heads, w_o, ffn: feature_ffn, residual: true };

    // Layer 2: uniform over the n+1 rows gives count*w ticks on coord 0
    // with w = floor(scale/(n+1)). Blowing that up by the full scale and
    // stepping at b*w + 1 ticks decides count > b exactly; both sides
    // clear the step by at least w - 1 >= 1 tick.
    let w_ticks = cfg.scale() / (n as i64 + 1);
    if w_ticks < 2 {
        return Err(params(format!("uniform weight {w_ticks} ticks too coarse for n = {n}")));
    }
    let w_q2 = Matrix::zeros(cfg, 1, d);
    let w_k2 = Matrix::zeros(cfg, 1, d);
    let mut w_v2 = Matrix::zeros(cfg, 1, d);
    w_v2.set(0, 0, one)?;
    let w_o2 = block_router(cfg, d, 0, 1)?;
    let blow = cfg.from_int(cfg.scale());
    let step = b * w_ticks + 1;
    let mut t1 = Matrix::zeros(cfg, 2, d);
    t1.set(0, 0, blow)?;
    t1.set(1, 0, blow)?;
    let tb = vec![cfg.from_int(-step), cfg.from_int(-step - 1)];
    let mut t2 = Matrix::zeros(cfg, d, 2);
    t2.set(0, 0, one)?;
    t2.set(0, 1, neg_one)?;
    let threshold_ffn = FeedForward {
        layers: vec![FfnLayer::new(t1, tb)?, FfnLayer::new(t2, vec![cfg.zero(); d])?],
    };
    let layer2 = TransformerLayer {
        heads: vec![AttentionHead { w_q: w_q2, w_k: w_k2, w_v: w_v2, query_scale: one }],
        w_o: w_o2,
        ffn: threshold_ffn,
        residual: false,
    };

    let embedder = Embedder::FeatureSets { n, arity, family, arg_positions, tables };
    let readout = Readout { ffn: FeedForward::identity(), rule: ReadoutRule::BitAt { coord: 0 } };
    Ok(TransformerModel::new(*cfg, embedder, vec![layer1, layer2], readout, false)?)
}

/// Causal two-layer nearest-neighbor head over an alternating point/label
/// stream. Layer 1 concentrates weight >= 9/10 on the best-matching
/// earlier point (margin `gamma` assumed) and copies that point's label
/// *address* sign pattern; a hard clamp snaps it to exact signs. Layer 2
/// dereferences the address with an exactly one-hot lookup and a final
/// step maps the fetched label to a bit.
pub fn build_nearest_neighbor_tf(
    cfg: &PrecisionConfig,
    n: usize,
    d_in: usize,
    gamma: f64,
    family: JlFamily,
) -> Result<TransformerModel, ConstructError> {
    check_cfg(cfg, n)?;
    if d_in < 1 {
        return Err(params("point dimension must be >= 1"));
    }
    if !(gamma > 0.0 && gamma <= 2.0) {
        return Err(params(format!("margin gamma = {gamma} outside (0, 2]")));
    }
    check_family(&family, 2 * n, ToleranceProfile::Fine { gamma })?;
    let k = family.k;
    let own = d_in + 2;
    let pair_base = own + k;
    let sig_base = own + 2 * k;
    let d = sig_base + k;
    let one = cfg.one();
    let neg_one = cfg.from_int(-1);

    let eta_val = 5.0 / (4.0 * gamma) * (18.0 * n as f64).ln();
    // Query-row logits top out at eta*(x.x + 1*3) = 4*eta; saturating
    // them would tie distinct matches at the bound.
    if 4.0 * eta_val + 1.0 > cfg.bound() {
        return Err(params(format!(
            "query scale {eta_val:.1} needs logits up to {:.1} but the grid saturates at {}",
            4.0 * eta_val,
            cfg.bound()
        )));
    }
    let eta = cfg.quantize(eta_val);

    // Layer 1. Query [x, type, -10*T(own)], key [x, 3*type, T(own)]:
    // point rows score eta*(x.x + 3) against other points, the querying
    // row itself lands at eta*(1 + 3 - 10) and label rows at -6*eta, so
    // only genuine candidates survive. Values expose twice the stored
    // point's label address.
    let m_q = d_in + 1 + k;
    let mut w_q = Matrix::zeros(cfg, m_q, d);
    let mut w_k = Matrix::zeros(cfg, m_q, d);
    for c in 0..d_in {
        w_q.set(c, c, one)?;
        w_k.set(c, c, one)?;
    }
    w_q.set(d_in, d_in + 1, one)?;
    w_k.set(d_in, d_in + 1, cfg.from_int(3))?;
    for r in 0..k {
        w_q.set(d_in + 1 + r, own + r, cfg.from_int(-10))?;
        w_k.set(d_in + 1 + r, own + r, one)?;
    }
    let scale_2rk = cfg.quantize(2.0 * (k as f64).sqrt());
    let mut w_v = Matrix::zeros(cfg, k, d);
    for r in 0..k {
        w_v.set(r, pair_base + r, scale_2rk)?;
    }
    let w_o = block_router(cfg, d, sig_base, k)?;

    // Identity on everything before the address block, hard unit clamp
    // sigma(x) = relu(x+1) - relu(x-1) - 1 on the block itself: with
    // target weight >= 9/10 each fetched entry is past +/-1.58, so the
    // clamp returns the exact sign.
    let mut i1 = Matrix::zeros(cfg, 2 * d, d);
    let mut ib = Vec::with_capacity(2 * d);
    for c in 0..d {
        if c < sig_base {
            i1.set(2 * c, c, one)?;
            i1.set(2 * c + 1, c, neg_one)?;
            ib.push(cfg.zero());
            ib.push(cfg.zero());
        } else {
            i1.set(2 * c, c, one)?;
            i1.set(2 * c + 1, c, one)?;
            ib.push(one);
            ib.push(neg_one);
        }
    }
    let mut i2 = Matrix::zeros(cfg, d, 2 * d);
    let mut ib2 = Vec::with_capacity(d);
    for c in 0..d {
        i2.set(c, 2 * c, one)?;
        i2.set(c, 2 * c + 1, neg_one)?;
        ib2.push(if c < sig_base { cfg.zero() } else { neg_one });
    }
    let clamp_ffn =
        FeedForward { layers: vec![FfnLayer::new(i1, ib)?, FfnLayer::new(i2, ib2)?] };
    let layer1 = TransformerLayer {
        heads: vec![AttentionHead { w_q, w_k, w_v, query_scale: eta }],
        w_o,
        ffn: clamp_ffn,
        residual: true,
    };

    // Layer 2: query = lambda * sign pattern, keys = own addresses. The
    // sign family is exactly orthogonal under the fine profile check, so
    // off-target logits floor to <= 0 while the target sits at
    // lambda*sqrt(k); every stray exponential floors to zero ticks and
    // the fetch weight is exactly 1.
    let lambda_val = 1.25 * (18.0 * n as f64).ln();
    if lambda_val * (k as f64).sqrt() + 1.0 > cfg.bound() {
        return Err(params(format!(
            "address scale {lambda_val:.1} overflows the grid bound {}",
            cfg.bound()
        )));
    }
    let lambda = cfg.quantize(lambda_val);
    let w_q2 = block_selector(cfg, k, d, sig_base, one)?;
    let w_k2 = block_selector(cfg, k, d, own, one)?;
    let mut w_v2 = Matrix::zeros(cfg, 1, d);
    w_v2.set(0, d_in, cfg.from_int(2))?;
    let mut w_o2 = Matrix::zeros(cfg, d, 1);
    w_o2.set(0, 0, one)?;
    let label_ffn = ffn_ramp_at(cfg, d, cfg.quantize_ratio(1, 2)?)?;
    let layer2 = TransformerLayer {
        heads: vec![AttentionHead { w_q: w_q2, w_k: w_k2, w_v: w_v2, query_scale: lambda }],
        w_o: w_o2,
        ffn: label_ffn,
        residual: false,
    };

    let embedder = Embedder::PointLabel { n, d_in, family };
    let readout =
        Readout { ffn: FeedForward::identity(), rule: ReadoutRule::LabelPerQuery { coord: 0 } };
    Ok(TransformerModel::new(*cfg, embedder, vec![layer1, layer2], readout, true)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jl::{generate_family, orthogonal_family};
    use crate::tasks::{
        disj_features, gen_equality, gen_index_lookup, gen_nn_instance, ineq_features,
        oracle_boolean, oracle_nearest_neighbor, BoolKind, EqVariant, LengthMode,
    };
    use crate::transformer::{Decision, ModelInput, PointItem};

    fn cfg_for(n: usize) -> PrecisionConfig {
        PrecisionConfig::new(n as u32, 2).expect("cfg")
    }

    fn coarse_family(n: usize, count: usize) -> JlFamily {
        let k = 32 * ceil_log2(n).max(1);
        generate_family(count, k, ToleranceProfile::Coarse, 7).expect("family")
    }

    fn bits_from_u32(v: u32, n: usize) -> Vec<i8> {
        (0..n).map(|i| if (v >> i) & 1 == 1 { 1 } else { -1 }).collect()
    }

    #[test]
    fn index_lookup_retrieves_known_string() {
        let n = 8;
        let model =
            build_index_lookup_tf(&cfg_for(n), n, 64, coarse_family(n, n)).expect("build");
        // "abcabcab", retrieval at the fifth symbol.
        let seq: Vec<u32> = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let out = model
            .forward(&ModelInput::SymbolQuery { seq: seq.clone(), pos: 5 })
            .expect("forward");
        assert_eq!(out.decision, Decision::Symbol(1));
        for pos in 1..=n {
            let out = model
                .forward(&ModelInput::SymbolQuery { seq: seq.clone(), pos })
                .expect("forward");
            assert_eq!(out.decision, Decision::Symbol(seq[pos - 1]), "pos {pos}");
        }
    }

    #[test]
    fn index_lookup_handles_constant_and_short_sequences() {
        let n = 12;
        let model =
            build_index_lookup_tf(&cfg_for(n), n, 64, coarse_family(n, n)).expect("build");
        let seq = vec![5u32; 12];
        let out = model.forward(&ModelInput::SymbolQuery { seq, pos: 7 }).expect("forward");
        assert_eq!(out.decision, Decision::Symbol(5));
        // Shorter sequence than the build size.
        let seq = vec![9u32, 3, 63, 0];
        for pos in 1..=4 {
            let out = model
                .forward(&ModelInput::SymbolQuery { seq: seq.clone(), pos })
                .expect("forward");
            assert_eq!(out.decision, Decision::Symbol(seq[pos - 1]));
        }
    }

    #[test]
    fn index_lookup_matches_oracle_on_random_instances() {
        let n = 8;
        let model =
            build_index_lookup_tf(&cfg_for(n), n, 64, coarse_family(n, n)).expect("build");
        for trial in 0..200 {
            let inst = gen_index_lookup(n, 64, LengthMode::Fixed, 1000 + trial).expect("gen");
            let out = model
                .forward(&ModelInput::SymbolQuery { seq: inst.seq.clone(), pos: inst.pos })
                .expect("forward");
            assert_eq!(out.decision, Decision::Symbol(inst.label), "trial {trial}");
        }
    }

    #[test]
    fn index_lookup_target_weight_is_at_least_three_quarters() {
        let n = 8;
        let model =
            build_index_lookup_tf(&cfg_for(n), n, 64, coarse_family(n, n)).expect("build");
        let seq: Vec<u32> = (0..8).map(|i| (i * 7 % 64) as u32).collect();
        for pos in 1..=n {
            let input = ModelInput::SymbolQuery { seq: seq.clone(), pos };
            let w = model.attention_weights(&input, 0, n).expect("weights");
            let target = w[0][pos - 1];
            assert!(
                4 * target.ticks() >= 3 * target.scale(),
                "pos {pos}: target weight {}",
                target.to_f64()
            );
        }
    }

    #[test]
    fn equality_matches_oracle_exhaustively() {
        let n = 8;
        let model = build_equality_tf(&cfg_for(n), n, coarse_family(n, n)).expect("build");
        for v in 0u32..1 << n {
            let bits = bits_from_u32(v, n);
            let expect = oracle_boolean(BoolKind::Eq, &bits).expect("oracle");
            let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
            assert_eq!(out.decision, Decision::Bit(expect), "v = {v:#x}");
        }
    }

    #[test]
    fn equality_first_layer_weights_are_exactly_zero_or_one() {
        let n = 8;
        let model = build_equality_tf(&cfg_for(n), n, coarse_family(n, n)).expect("build");
        let bits = bits_from_u32(0b1011_0010, n);
        let input = ModelInput::Bits(bits);
        let scale = model.cfg.scale();
        for row in 0..n {
            let w = model.attention_weights(&input, 0, row).expect("weights");
            let partner = if row < n / 2 { row } else { row - n / 2 };
            for (j, wj) in w[0].iter().enumerate() {
                let expect = if j == partner { scale } else { 0 };
                assert_eq!(wj.ticks(), expect, "row {row} weight {j}");
            }
        }
    }

    #[test]
    fn equality_agrees_with_generated_instances() {
        // Random even lengths from the generator; build one model per length.
        let mut models = std::collections::HashMap::new();
        for seed in 0..60u64 {
            let inst = gen_equality(EqVariant::Random, 16, 2, seed).expect("gen");
            let len = inst.first.len() * 2;
            let model = models.entry(len).or_insert_with(|| {
                build_equality_tf(&cfg_for(len), len, coarse_family(len, len)).expect("build")
            });
            let bits: Vec<i8> = inst
                .first
                .iter()
                .chain(inst.second.iter())
                .map(|s| if *s == 1 { 1 } else { -1 })
                .collect();
            let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
            assert_eq!(out.decision, Decision::Bit(inst.label), "seed {seed}");
        }
    }

    #[test]
    fn partition_equality_with_prefix_partition_is_flipped_equality() {
        let n = 8;
        let s_a: Vec<usize> = (0..4).collect();
        let model =
            build_partition_equality_tf(&cfg_for(n), n, &s_a, coarse_family(n, n)).expect("build");
        for v in 0u32..1 << n {
            let bits = bits_from_u32(v, n);
            let expect = 1 - oracle_boolean(BoolKind::Eq, &bits).expect("oracle");
            let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
            assert_eq!(out.decision, Decision::Bit(expect), "v = {v:#x}");
        }
    }

    #[test]
    fn partition_equality_matches_reordered_oracle() {
        let n = 8;
        let s_a = vec![0usize, 2, 5, 7];
        let s_b = vec![1usize, 3, 4, 6];
        let model =
            build_partition_equality_tf(&cfg_for(n), n, &s_a, coarse_family(n, n)).expect("build");
        for v in 0u32..1 << n {
            let bits = bits_from_u32(v, n);
            let mismatch =
                s_a.iter().zip(&s_b).any(|(a, b)| bits[*a] != bits[*b]) as u8;
            let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
            assert_eq!(out.decision, Decision::Bit(mismatch), "v = {v:#x}");
        }
    }

    #[test]
    fn partition_equality_rejects_bad_partitions() {
        let n = 8;
        let fam = coarse_family(n, n);
        assert!(build_partition_equality_tf(&cfg_for(n), n, &[0, 1, 2], fam.clone()).is_err());
        assert!(build_partition_equality_tf(&cfg_for(n), n, &[0, 1, 2, 2], fam.clone()).is_err());
        assert!(build_partition_equality_tf(&cfg_for(n), n, &[0, 1, 2, 9], fam).is_err());
    }

    #[test]
    fn threshold_ineq_matches_oracle_exhaustively() {
        let n = 8;
        let features = ineq_features(n);
        let model =
            build_threshold_ksparse_tf(&cfg_for(n), n, &features, 0, coarse_family(n, n + 1))
                .expect("build");
        for v in 0u32..1 << n {
            let bits = bits_from_u32(v, n);
            let expect = oracle_boolean(BoolKind::Ineq, &bits).expect("oracle");
            let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
            assert_eq!(out.decision, Decision::Bit(expect), "v = {v:#x}");
        }
    }

    #[test]
    fn threshold_disj_matches_oracle_exhaustively() {
        let n = 8;
        let features = disj_features(n);
        let model =
            build_threshold_ksparse_tf(&cfg_for(n), n, &features, 0, coarse_family(n, n + 1))
                .expect("build");
        for v in 0u32..1 << n {
            let bits = bits_from_u32(v, n);
            let expect = oracle_boolean(BoolKind::Disj, &bits).expect("oracle");
            let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
            assert_eq!(out.decision, Decision::Bit(expect), "v = {v:#x}");
        }
    }

    #[test]
    fn threshold_degenerate_bounds_are_constant() {
        let n = 8;
        let null_features: Vec<Feature> =
            (0..n).map(|_| Feature { args: vec![0, 0], table: vec![0; 4] }).collect();
        let always = build_threshold_ksparse_tf(
            &cfg_for(n),
            n,
            &null_features,
            -1,
            coarse_family(n, n + 1),
        )
        .expect("build");
        let never = build_threshold_ksparse_tf(
            &cfg_for(n),
            n,
            &null_features,
            0,
            coarse_family(n, n + 1),
        )
        .expect("build");
        for v in [0u32, 1, 77, 200, 255] {
            let bits = bits_from_u32(v, n);
            assert_eq!(
                always.forward(&ModelInput::Bits(bits.clone())).expect("fw").decision,
                Decision::Bit(1)
            );
            assert_eq!(
                never.forward(&ModelInput::Bits(bits)).expect("fw").decision,
                Decision::Bit(0)
            );
        }
    }

    #[test]
    fn threshold_counts_against_midrange_bounds() {
        // f_i fires iff x_i = +1 (arity-1 identity features); count > b
        // becomes a popcount threshold.
        let n = 8;
        let features: Vec<Feature> =
            (1..=n).map(|i| Feature { args: vec![i as u32], table: vec![0, 1] }).collect();
        for b in [2i64, 4, 7] {
            let model = build_threshold_ksparse_tf(
                &cfg_for(n),
                n,
                &features,
                b,
                coarse_family(n, n + 1),
            )
            .expect("build");
            for v in 0u32..1 << n {
                let bits = bits_from_u32(v, n);
                let expect = (v.count_ones() as i64 > b) as u8;
                let out = model.forward(&ModelInput::Bits(bits)).expect("forward");
                assert_eq!(out.decision, Decision::Bit(expect), "v = {v:#x} b = {b}");
            }
        }
    }

    fn nn_stream(points: &[Vec<i8>], labels: &[u8], d: usize) -> ModelInput {
        let unit = 1.0 / (d as f64).sqrt();
        let mut items = Vec::new();
        for (p, y) in points.iter().zip(labels) {
            items.push(PointItem::Point(p.iter().map(|s| *s as f64 * unit).collect()));
            items.push(PointItem::Label(*y));
        }
        ModelInput::PointStream(items)
    }

    fn check_nn_instances(n: usize, sigma: u32, mqar: bool, trials: u64) {
        let d_in = ceil_log2(sigma as usize).max(1);
        let gamma = 2.0 / d_in as f64;
        let family = orthogonal_family(2 * n, ToleranceProfile::Fine { gamma }).expect("family");
        let model =
            build_nearest_neighbor_tf(&cfg_for(n), n, d_in, gamma, family).expect("build");
        for trial in 0..trials {
            let inst = gen_nn_instance(n, sigma, 5000 + trial, mqar).expect("gen");
            let input = nn_stream(&inst.points, &inst.labels, inst.d);
            let rows: Vec<usize> = (inst.stored..inst.points.len()).map(|q| 2 * q).collect();
            let outs = model.forward_at(&input, &rows).expect("forward");
            for (out, q) in outs.iter().zip(inst.stored..inst.points.len()) {
                let expect = oracle_nearest_neighbor(&inst, q + 1).expect("oracle");
                assert_eq!(
                    out.decision,
                    Decision::Bit(expect),
                    "trial {trial} query {q} (mqar = {mqar})"
                );
            }
        }
    }

    #[test]
    fn nearest_neighbor_matches_oracle_on_mqar_instances() {
        check_nn_instances(8, 8, true, 25);
    }

    #[test]
    fn nearest_neighbor_matches_oracle_on_fresh_instances() {
        check_nn_instances(16, 1024, false, 25);
    }

    #[test]
    fn nearest_neighbor_layer_weights_behave() {
        let n = 8;
        let sigma = 8;
        let d_in = 3;
        let gamma = 2.0 / d_in as f64;
        let family = orthogonal_family(2 * n, ToleranceProfile::Fine { gamma }).expect("family");
        let model =
            build_nearest_neighbor_tf(&cfg_for(n), n, d_in, gamma, family).expect("build");
        let inst = gen_nn_instance(n, sigma, 42, true).expect("gen");
        let input = nn_stream(&inst.points, &inst.labels, inst.d);
        let scale = model.cfg.scale();
        let q = inst.points.len() - 1;
        let row = 2 * q;
        // Layer 1: weight >= 9/10 on the best stored point's row.
        let mut best = 0usize;
        let mut best_dot = i64::MIN;
        for i in 0..q {
            let dot = crate::tasks::sign_dot(&inst.points[i], &inst.points[q]);
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        let w1 = model.attention_weights(&input, 0, row).expect("w1");
        let target = w1[0][2 * best];
        assert!(10 * target.ticks() >= 9 * scale, "layer-1 weight {}", target.to_f64());
        // Layer 2: exactly one tick of weight, all of it on the label row.
        let w2 = model.attention_weights(&input, 1, row).expect("w2");
        for (j, wj) in w2[0].iter().enumerate() {
            let expect = if j == 2 * best + 1 { scale } else { 0 };
            assert_eq!(wj.ticks(), expect, "layer-2 weight {j}");
        }
    }

    #[test]
    fn nearest_neighbor_handles_short_streams() {
        let n = 8;
        let d_in = 3;
        let gamma = 2.0 / d_in as f64;
        let family = orthogonal_family(2 * n, ToleranceProfile::Fine { gamma }).expect("family");
        let model =
            build_nearest_neighbor_tf(&cfg_for(n), n, d_in, gamma, family).expect("build");
        // Two stored points, one query equal to the second point.
        let points: Vec<Vec<i8>> = vec![vec![1, 1, 1], vec![-1, 1, -1], vec![-1, 1, -1]];
        let labels = vec![0u8, 1, 1];
        let input = nn_stream(&points, &labels, 3);
        let out = model.forward_at(&input, &[4]).expect("forward");
        assert_eq!(out[0].decision, Decision::Bit(1));
    }

    #[test]
    fn nearest_neighbor_rejects_saturating_scales() {
        // n = 8 with d_in = 10 wants logits past the n^2 bound.
        let family = orthogonal_family(16, ToleranceProfile::Fine { gamma: 0.2 }).expect("family");
        let err = build_nearest_neighbor_tf(&cfg_for(8), 8, 10, 0.2, family);
        assert!(err.is_err());
    }

    #[test]
    fn report_summarizes_shapes() {
        let n = 8;
        let model = build_equality_tf(&cfg_for(n), n, coarse_family(n, n)).expect("build");
        let rep = report("equality", n, &model);
        let stats = model.stats();
        assert_eq!(rep.d, stats.d);
        assert_eq!(rep.width, stats.width);
        assert_eq!(rep.layers, 2);
        assert_eq!(rep.query_scales.len(), 2);
        assert!(rep.query_scales[0] > 0.0);
    }

    #[test]
    fn built_model_survives_serialization() {
        let n = 8;
        let model = build_equality_tf(&cfg_for(n), n, coarse_family(n, n)).expect("build");
        let json = model.to_json().expect("json");
        let back = TransformerModel::from_json(&json).expect("load");
        for v in [0u32, 5, 170, 255] {
            let bits = bits_from_u32(v, n);
            let a = model.forward(&ModelInput::Bits(bits.clone())).expect("fw");
            let b = back.forward(&ModelInput::Bits(bits)).expect("fw");
            assert_eq!(a.decision, b.decision);
        }
    }
}
