//! Grid-exact transformer evaluator.
//!
//! Models are explicit weight matrices over one fixed-point grid. Every
//! intermediate value of a forward pass lives on the grid: matrix-vector
//! products quantize each scalar product and accumulate by exact grid
//! addition, attention rows go through the stable grid softmax, and
//! feed-forward blocks are ReLU networks whose activations are grid
//! values. Attention logits are plain scaled query-key dot products with
//! no dimension normalizer; a per-head query scale plays that role.
//!
//! Zero weight entries are skipped during evaluation. This is exact: a
//! quantized product with a zero factor is exactly zero and adding zero
//! is the identity, so sparse evaluation returns bit-identical results
//! to the dense loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{stable_softmax, FixedError, FixedNum, PrecisionConfig};
use crate::jl::{JlError, JlFamily};

#[derive(Debug, Error)]
pub enum TfError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Jl(#[from] JlError),
    #[error("serialization: {0}")]
    Serde(String),
}

/// Sparse row-major matrix of grid values, stored as ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    scale: i64,
    entries: Vec<Vec<(u32, i64)>>,
}

impl Matrix {
    pub fn zeros(cfg: &PrecisionConfig, rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, scale: cfg.scale(), entries: vec![Vec::new(); rows] }
    }

    pub fn identity(cfg: &PrecisionConfig, n: usize) -> Self {
        let mut m = Self::zeros(cfg, n, n);
        for i in 0..n {
            m.entries[i].push((i as u32, cfg.scale()));
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> i64 {
        self.scale
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().map(|r| r.len()).sum()
    }

    pub fn set(&mut self, r: usize, c: usize, v: FixedNum) -> Result<(), TfError> {
        if r >= self.rows || c >= self.cols {
            return Err(TfError::Dim(format!("set ({r},{c}) outside {}x{}", self.rows, self.cols)));
        }
        if v.scale() != self.scale {
            return Err(TfError::Fixed(FixedError::ScaleMismatch(self.scale, v.scale())));
        }
        let row = &mut self.entries[r];
        if let Some(slot) = row.iter_mut().find(|(col, _)| *col as usize == c) {
            slot.1 = v.ticks();
        } else if v.ticks() != 0 {
            row.push((c as u32, v.ticks()));
            row.sort_unstable_by_key(|(col, _)| *col);
        }
        Ok(())
    }

    pub fn get(&self, r: usize, c: usize) -> FixedNum {
        let ticks = self.entries[r]
            .iter()
            .find(|(col, _)| *col as usize == c)
            .map(|(_, t)| *t)
            .unwrap_or(0);
        raw_fixed(ticks, self.scale)
    }

    fn matvec_ticks(&self, x: &[i64], ops: &TickOps) -> Vec<i64> {
        debug_assert_eq!(x.len(), self.cols);
        self.entries
            .iter()
            .map(|row| {
                let mut acc = 0i64;
                for (c, w) in row {
                    let xv = x[*c as usize];
                    if xv != 0 {
                        acc = ops.add(acc, ops.mul(*w, xv));
                    }
                }
                acc
            })
            .collect()
    }

    pub fn matvec(&self, x: &[FixedNum]) -> Result<Vec<FixedNum>, TfError> {
        if x.len() != self.cols {
            return Err(TfError::Dim(format!("matvec: {} cols vs input {}", self.cols, x.len())));
        }
        for v in x {
            if v.scale() != self.scale {
                return Err(TfError::Fixed(FixedError::ScaleMismatch(self.scale, v.scale())));
            }
        }
        let ops = TickOps::from_scale(self.scale);
        let ticks: Vec<i64> = x.iter().map(|v| v.ticks()).collect();
        Ok(self.matvec_ticks(&ticks, &ops).into_iter().map(|t| raw_fixed(t, self.scale)).collect())
    }
}

fn raw_fixed(ticks: i64, scale: i64) -> FixedNum {
    FixedNum::from_raw(ticks, scale)
}

/// Sign-symmetric quantization for coordinates that come in antipodal
/// pairs: quantize the magnitude, then apply the sign, so that +c and -c
/// land on ticks of equal magnitude.
fn quantize_sym_ticks(cfg: &PrecisionConfig, x: f64) -> i64 {
    if x < 0.0 {
        -cfg.quantize(-x).ticks()
    } else {
        cfg.quantize(x).ticks()
    }
}

/// Tick-level arithmetic mirror of the FixedNum operations, for hot loops.
#[derive(Clone, Copy)]
struct TickOps {
    scale: i64,
    bound: i64,
    shift: Option<u32>,
}

impl TickOps {
    fn from_scale(scale: i64) -> Self {
        let shift =
            if (scale as u64).is_power_of_two() { Some(scale.trailing_zeros()) } else { None };
        TickOps { scale, bound: scale * scale, shift }
    }

    #[inline]
    fn clamp(&self, t: i128) -> i64 {
        if t > self.bound as i128 {
            self.bound
        } else if t < -(self.bound as i128) {
            -self.bound
        } else {
            t as i64
        }
    }

    #[inline]
    fn add(&self, a: i64, b: i64) -> i64 {
        self.clamp(a as i128 + b as i128)
    }

    #[inline]
    fn mul(&self, a: i64, b: i64) -> i64 {
        let p = a as i128 * b as i128;
        let q = match self.shift {
            // Arithmetic right shift floors toward minus infinity.
            Some(s) => p >> s,
            None => p.div_euclid(self.scale as i128),
        };
        self.clamp(q)
    }

    #[inline]
    fn relu(&self, a: i64) -> i64 {
        a.max(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnLayer {
    pub weight: Matrix,
    bias: Vec<i64>,
}

impl FfnLayer {
    pub fn new(weight: Matrix, bias: Vec<FixedNum>) -> Result<Self, TfError> {
        if bias.len() != weight.rows() {
            return Err(TfError::Dim(format!("bias len {} vs {} rows", bias.len(), weight.rows())));
        }
        for b in &bias {
            if b.scale() != weight.scale() {
                return Err(TfError::Fixed(FixedError::ScaleMismatch(weight.scale(), b.scale())));
            }
        }
        Ok(FfnLayer { bias: bias.iter().map(|b| b.ticks()).collect(), weight })
    }
}

/// ReLU network: affine layers with ReLU between them and none after the
/// last. An empty layer list is the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FeedForward {
    pub layers: Vec<FfnLayer>,
}

impl FeedForward {
    pub fn identity() -> Self {
        FeedForward { layers: Vec::new() }
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.weight.cols())
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.weight.rows())
    }

    fn eval_ticks(&self, x: &[i64], ops: &TickOps) -> Vec<i64> {
        let mut cur = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weight.matvec_ticks(&cur, ops);
            for (v, b) in next.iter_mut().zip(&layer.bias) {
                *v = ops.add(*v, *b);
            }
            if idx != last {
                for v in next.iter_mut() {
                    *v = ops.relu(*v);
                }
            }
            cur = next;
        }
        cur
    }

    pub fn eval(&self, x: &[FixedNum]) -> Result<Vec<FixedNum>, TfError> {
        let scale = match self.layers.first() {
            None => return Ok(x.to_vec()),
            Some(l) => l.weight.scale(),
        };
        for v in x {
            if v.scale() != scale {
                return Err(TfError::Fixed(FixedError::ScaleMismatch(scale, v.scale())));
            }
        }
        if let Some(d) = self.in_dim() {
            if d != x.len() {
                return Err(TfError::Dim(format!("ffn input {} vs expected {d}", x.len())));
            }
        }
        let ops = TickOps::from_scale(scale);
        let ticks: Vec<i64> = x.iter().map(|v| v.ticks()).collect();
        Ok(self.eval_ticks(&ticks, &ops).into_iter().map(|t| raw_fixed(t, scale)).collect())
    }
}

/// Hard unit clamp `sigma(x) = relu(x+1) - relu(x-1) - 1`, evaluated
/// through the feed-forward path so tests exercise the same machinery the
/// models use.
pub fn clamp_sigma(cfg: &PrecisionConfig, x: FixedNum) -> Result<FixedNum, TfError> {
    let one = cfg.one();
    let neg_one = cfg.from_int(-1);
    let mut w1 = Matrix::zeros(cfg, 2, 1);
    w1.set(0, 0, one)?;
    w1.set(1, 0, one)?;
    let mut w2 = Matrix::zeros(cfg, 1, 2);
    w2.set(0, 0, one)?;
    w2.set(0, 1, neg_one)?;
    let ffn = FeedForward {
        layers: vec![FfnLayer::new(w1, vec![one, neg_one])?, FfnLayer::new(w2, vec![neg_one])?],
    };
    Ok(ffn.eval(&[x])?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Per-head query scale, applied entrywise to W_Q x.
    pub query_scale: FixedNum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub heads: Vec<AttentionHead>,
    /// Maps the concatenated head outputs back to model dimension.
    pub w_o: Matrix,
    pub ffn: FeedForward,
    pub residual: bool,
}

/// Per-position input layouts. Each embedder owns whatever positional
/// sign-vector family it needs and fully determines vector dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Embedder {
    /// Quantizes caller-provided real vectors as-is.
    Raw { dim: usize },
    /// Symbol sequence plus one trailing retrieval token: symbol rows are
    /// `[bits(symbol), 0_k, T(pos)]`, the retrieval token is
    /// `[0, T(target), 0_k]`.
    SymbolRetrieval { n: usize, sigma: u32, sigma_bits: usize, family: JlFamily },
    /// Sign string of fixed length n: `[x_i, 0, T(i), T(partner(i)), 1]`,
    /// where the partner defaults to `i mod n/2`.
    PairedBits { n: usize, family: JlFamily, partner: Vec<u32> },
    /// Sign string with a leading marker token; carries per-position
    /// feature metadata: `[x_i, pad_i, table_i, v-slots, T(i), T(set)]`.
    FeatureSets {
        n: usize,
        arity: usize,
        family: JlFamily,
        /// Per position 1..=n: indices (1-based, 0 = marker) of the
        /// feature's argument positions, padded with 0.
        arg_positions: Vec<Vec<u32>>,
        /// Per position: truth table over sign assignments of live
        /// arguments (+1-padded ordering), length 2^arity.
        tables: Vec<Vec<u8>>,
    },
    /// Alternating point/label stream:
    /// `[x, y, type, T(i), T(pair), 0_k]`.
    PointLabel { n: usize, d_in: usize, family: JlFamily },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Vectors(Vec<Vec<f64>>),
    /// Symbol sequence and a 1-based position to retrieve.
    SymbolQuery { seq: Vec<u32>, pos: usize },
    /// +/-1 entries.
    Bits(Vec<i8>),
    /// Alternating points (even 0-based indices) and labels.
    PointStream(Vec<PointItem>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointItem {
    Point(Vec<f64>),
    Label(u8),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Raw { dim } => *dim,
            Embedder::SymbolRetrieval { sigma_bits, family, .. } => sigma_bits + 2 * family.k,
            Embedder::PairedBits { family, .. } => 3 + 2 * family.k,
            Embedder::FeatureSets { arity, family, .. } => {
                2 + (1 << arity) + arity + (arity + 1) * family.k
            }
            Embedder::PointLabel { d_in, family, .. } => d_in + 2 + 3 * family.k,
        }
    }

    fn embed(&self, cfg: &PrecisionConfig, input: &ModelInput) -> Result<Vec<Vec<i64>>, TfError> {
        let d = self.dim();
        let mag = |family: &JlFamily| family.unit_magnitude(cfg).ticks();
        let mut out: Vec<Vec<i64>> = Vec::new();
        match (self, input) {
            (Embedder::Raw { dim }, ModelInput::Vectors(vs)) => {
                for v in vs {
                    if v.len() != *dim {
                        return Err(TfError::Input(format!("raw vector len {} vs dim {dim}", v.len())));
                    }
                    out.push(v.iter().map(|x| cfg.quantize(*x).ticks()).collect());
                }
            }
            (Embedder::SymbolRetrieval { n, sigma, sigma_bits, family }, ModelInput::SymbolQuery { seq, pos }) => {
                if seq.is_empty() || seq.len() > *n {
                    return Err(TfError::Input(format!("sequence length {} outside 1..={n}", seq.len())));
                }
                if *pos < 1 || *pos > seq.len() {
                    return Err(TfError::Input(format!("retrieval position {pos} outside 1..={}", seq.len())));
                }
                let m = mag(family);
                for (i, s) in seq.iter().enumerate() {
                    if s >= sigma {
                        return Err(TfError::Input(format!("symbol {s} outside alphabet of {sigma}")));
                    }
                    let mut v = vec![0i64; d];
                    for b in 0..*sigma_bits {
                        if (s >> b) & 1 == 1 {
                            v[b] = cfg.scale();
                        }
                    }
                    let t = family.signs(i)?;
                    for (j, sg) in t.iter().enumerate() {
                        v[sigma_bits + family.k + j] = *sg as i64 * m;
                    }
                    out.push(v);
                }
                let mut v = vec![0i64; d];
                let t = family.signs(pos - 1)?;
                for (j, sg) in t.iter().enumerate() {
                    v[sigma_bits + j] = *sg as i64 * m;
                }
                out.push(v);
            }
            (Embedder::PairedBits { n, family, partner }, ModelInput::Bits(bits)) => {
                if bits.len() != *n {
                    return Err(TfError::Input(format!("bit string length {} != {n}", bits.len())));
                }
                let m = mag(family);
                let k = family.k;
                for (i, x) in bits.iter().enumerate() {
                    if *x != 1 && *x != -1 {
                        return Err(TfError::Input(format!("bits must be +/-1, got {x}")));
                    }
                    let mut v = vec![0i64; d];
                    v[0] = *x as i64 * cfg.scale();
                    let own = family.signs(i)?;
                    for (j, sg) in own.iter().enumerate() {
                        v[2 + j] = *sg as i64 * m;
                    }
                    let p = partner[i] as usize;
                    let pair = family.signs(p)?;
                    for (j, sg) in pair.iter().enumerate() {
                        v[2 + k + j] = *sg as i64 * m;
                    }
                    v[2 + 2 * k] = cfg.scale();
                    out.push(v);
                }
            }
            (Embedder::FeatureSets { n, arity, family, arg_positions, tables }, ModelInput::Bits(bits)) => {
                if bits.len() != *n {
                    return Err(TfError::Input(format!("bit string length {} != {n}", bits.len())));
                }
                let m = mag(family);
                let k = family.k;
                let table_len = 1usize << arity;
                let t_base = 2 + table_len + arity;
                // Marker token at position 0: all scalar slots zero.
                let mut marker = vec![0i64; d];
                let t0 = family.signs(0)?;
                for (j, sg) in t0.iter().enumerate() {
                    marker[t_base + j] = *sg as i64 * m;
                }
                for h in 0..*arity {
                    for (j, sg) in t0.iter().enumerate() {
                        marker[t_base + (1 + h) * k + j] = *sg as i64 * m;
                    }
                }
                out.push(marker);
                for (i, x) in bits.iter().enumerate() {
                    if *x != 1 && *x != -1 {
                        return Err(TfError::Input(format!("bits must be +/-1, got {x}")));
                    }
                    let mut v = vec![0i64; d];
                    v[0] = *x as i64 * cfg.scale();
                    let args = &arg_positions[i];
                    let pads = args.iter().filter(|a| **a == 0).count();
                    v[1] = cfg.from_int(pads as i64).ticks();
                    for (a, bit) in tables[i].iter().enumerate() {
                        if *bit != 0 {
                            v[2 + a] = cfg.scale();
                        }
                    }
                    let own = family.signs(i + 1)?;
                    for (j, sg) in own.iter().enumerate() {
                        v[t_base + j] = *sg as i64 * m;
                    }
                    for (h, a) in args.iter().enumerate() {
                        let t = family.signs(*a as usize)?;
                        for (j, sg) in t.iter().enumerate() {
                            v[t_base + (1 + h) * k + j] = *sg as i64 * m;
                        }
                    }
                    out.push(v);
                }
            }
            (Embedder::PointLabel { n, d_in, family }, ModelInput::PointStream(items)) => {
                if items.is_empty() || items.len() > 2 * n {
                    return Err(TfError::Input(format!("stream length {} outside 1..={}", items.len(), 2 * n)));
                }
                let m = mag(family);
                let k = family.k;
                for (i, item) in items.iter().enumerate() {
                    let mut v = vec![0i64; d];
                    match item {
                        PointItem::Point(x) => {
                            if i % 2 != 0 {
                                return Err(TfError::Input(format!("point at odd stream index {i}")));
                            }
                            if x.len() != *d_in {
                                return Err(TfError::Input(format!("point dim {} vs {d_in}", x.len())));
                            }
                            for (j, c) in x.iter().enumerate() {
                                v[j] = quantize_sym_ticks(cfg, *c);
                            }
                            v[d_in + 1] = cfg.scale();
                        }
                        PointItem::Label(y) => {
                            if i % 2 != 1 {
                                return Err(TfError::Input(format!("label at even stream index {i}")));
                            }
                            if *y > 1 {
                                return Err(TfError::Input(format!("label must be 0/1, got {y}")));
                            }
                            v[*d_in] = *y as i64 * cfg.scale();
                            v[d_in + 1] = cfg.from_int(-2).ticks();
                        }
                    }
                    let own = family.signs(i)?;
                    for (j, sg) in own.iter().enumerate() {
                        v[d_in + 2 + j] = *sg as i64 * m;
                    }
                    let pair = if i % 2 == 0 { i + 1 } else { i };
                    let pv = family.signs(pair)?;
                    for (j, sg) in pv.iter().enumerate() {
                        v[d_in + 2 + k + j] = *sg as i64 * m;
                    }
                    out.push(v);
                }
            }
            _ => return Err(TfError::Input("input kind does not match embedder".into())),
        }
        Ok(out)
    }
}

/// How the final-layer output turns into a task answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReadoutRule {
    /// Threshold coords `0..n_bits` at 1/2 and read them as a little-endian
    /// binary symbol. Read at the last position.
    SymbolFromBits { n_bits: usize },
    /// Threshold one coordinate at 1/2. Read at the last position.
    BitAt { coord: usize },
    /// Threshold one coordinate at 1/2 at each queried position.
    LabelPerQuery { coord: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub ffn: FeedForward,
    pub rule: ReadoutRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Decision {
    Symbol(u32),
    Bit(u8),
}

#[derive(Debug, Clone)]
pub struct ReadOut {
    pub position: usize,
    pub vector: Vec<FixedNum>,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelStats {
    pub d: usize,
    pub attn_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub p_bits: u32,
    pub size_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub cfg: PrecisionConfig,
    pub embedder: Embedder,
    pub layers: Vec<TransformerLayer>,
    pub readout: Readout,
    pub causal: bool,
}

impl TransformerModel {
    pub fn new(
        cfg: PrecisionConfig,
        embedder: Embedder,
        layers: Vec<TransformerLayer>,
        readout: Readout,
        causal: bool,
    ) -> Result<Self, TfError> {
        let d = embedder.dim();
        for (li, layer) in layers.iter().enumerate() {
            if layer.heads.is_empty() {
                return Err(TfError::Dim(format!("layer {li} has no heads")));
            }
            let mut concat = 0;
            for (hi, head) in layer.heads.iter().enumerate() {
                if head.w_q.cols() != d || head.w_k.cols() != d || head.w_v.cols() != d {
                    return Err(TfError::Dim(format!("layer {li} head {hi}: projection cols != d={d}")));
                }
                if head.w_q.rows() != head.w_k.rows() {
                    return Err(TfError::Dim(format!("layer {li} head {hi}: W_Q rows != W_K rows")));
                }
                concat += head.w_v.rows();
            }
            if layer.w_o.cols() != concat || layer.w_o.rows() != d {
                return Err(TfError::Dim(format!(
                    "layer {li}: W_O is {}x{}, expected {d}x{concat}",
                    layer.w_o.rows(),
                    layer.w_o.cols()
                )));
            }
            if let Some(fin) = layer.ffn.in_dim() {
                if fin != d {
                    return Err(TfError::Dim(format!("layer {li}: ffn input {fin} != d={d}")));
                }
            }
            if let Some(fout) = layer.ffn.out_dim() {
                if fout != d {
                    return Err(TfError::Dim(format!("layer {li}: ffn output {fout} != d={d}")));
                }
            }
        }
        Ok(TransformerModel { cfg, embedder, layers, readout, causal })
    }

    pub fn stats(&self) -> ModelStats {
        let d = self.embedder.dim();
        let attn_dim =
            self.layers.iter().flat_map(|l| l.heads.iter().map(|h| h.w_q.rows())).max().unwrap_or(0);
        let p = self.cfg.p_bits() as u64;
        let size_bits: u64 = self
            .layers
            .iter()
            .map(|l| {
                l.heads
                    .iter()
                    .map(|h| h.w_q.rows().max(h.w_v.rows()) as u64 * d as u64 * p)
                    .sum::<u64>()
            })
            .sum();
        ModelStats {
            d,
            attn_dim,
            width: d.max(attn_dim),
            layers: self.layers.len(),
            heads: self.layers.iter().map(|l| l.heads.len()).sum(),
            p_bits: self.cfg.p_bits(),
            size_bits,
        }
    }

    fn ops(&self) -> TickOps {
        TickOps::from_scale(self.cfg.scale())
    }

    /// Attention for one row of one layer, given precomputed K/V ticks.
    fn attend_row(
        &self,
        layer: &TransformerLayer,
        x_row: &[i64],
        keys: &[Vec<Vec<i64>>],
        values: &[Vec<Vec<i64>>],
        row: usize,
        ops: &TickOps,
    ) -> Result<(Vec<i64>, Vec<Vec<FixedNum>>), TfError> {
        let limit = if self.causal { row + 1 } else { keys[0].len() };
        let mut concat: Vec<i64> = Vec::new();
        let mut weights_all = Vec::with_capacity(layer.heads.len());
        for (h, head) in layer.heads.iter().enumerate() {
            let q_raw = head.w_q.matvec_ticks(x_row, ops);
            let eta = head.query_scale.ticks();
            let q: Vec<i64> = q_raw.iter().map(|t| ops.mul(*t, eta)).collect();
            let mut logits = Vec::with_capacity(limit);
            for key in keys[h].iter().take(limit) {
                let mut acc = 0i64;
                for (qt, kt) in q.iter().zip(key) {
                    if *qt != 0 && *kt != 0 {
                        acc = ops.add(acc, ops.mul(*qt, *kt));
                    }
                }
                logits.push(raw_fixed(acc, self.cfg.scale()));
            }
            let weights = stable_softmax(&logits).map_err(TfError::Fixed)?;
            let mv = head.w_v.rows();
            let mut out = vec![0i64; mv];
            for (j, w) in weights.iter().enumerate() {
                let wt = w.ticks();
                if wt == 0 {
                    continue;
                }
                for (t, v) in out.iter_mut().zip(&values[h][j]) {
                    if *v != 0 {
                        *t = ops.add(*t, ops.mul(wt, *v));
                    }
                }
            }
            concat.extend(out);
            weights_all.push(weights);
        }
        Ok((concat, weights_all))
    }

    fn layer_apply(
        &self,
        layer: &TransformerLayer,
        x: &[Vec<i64>],
        rows: &[usize],
        ops: &TickOps,
    ) -> Result<Vec<Vec<i64>>, TfError> {
        let keys: Vec<Vec<Vec<i64>>> = layer
            .heads
            .iter()
            .map(|h| x.iter().map(|row| h.w_k.matvec_ticks(row, ops)).collect())
            .collect();
        let values: Vec<Vec<Vec<i64>>> = layer
            .heads
            .iter()
            .map(|h| x.iter().map(|row| h.w_v.matvec_ticks(row, ops)).collect())
            .collect();
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            let (concat, _) = self.attend_row(layer, &x[r], &keys, &values, r, ops)?;
            let mut v = layer.w_o.matvec_ticks(&concat, ops);
            if layer.residual {
                for (t, xr) in v.iter_mut().zip(&x[r]) {
                    *t = ops.add(*t, *xr);
                }
            }
            out.push(layer.ffn.eval_ticks(&v, ops));
        }
        Ok(out)
    }

    fn run_layers(&self, input: &ModelInput, read_rows: &[usize]) -> Result<Vec<Vec<i64>>, TfError> {
        let ops = self.ops();
        let mut x = self.embedder.embed(&self.cfg, input)?;
        let n_rows = x.len();
        for r in read_rows {
            if *r >= n_rows {
                return Err(TfError::Input(format!("read position {r} outside sequence of {n_rows}")));
            }
        }
        let all: Vec<usize> = (0..n_rows).collect();
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            let rows: &[usize] = if last && !read_rows.is_empty() { read_rows } else { &all };
            let next = self.layer_apply(layer, &x, rows, &ops)?;
            if last && !read_rows.is_empty() {
                return Ok(next);
            }
            x = next;
        }
        // No layers: read the embeddings themselves.
        Ok(read_rows.iter().map(|r| x[*r].clone()).collect())
    }

    fn decide(&self, v: &[FixedNum]) -> Result<Decision, TfError> {
        // Threshold at one half: 2*ticks >= scale avoids rounding the half.
        let above = |x: &FixedNum| (2 * x.ticks() >= self.cfg.scale()) as u32;
        match &self.readout.rule {
            ReadoutRule::SymbolFromBits { n_bits } => {
                if v.len() < *n_bits {
                    return Err(TfError::Dim(format!("readout wants {n_bits} bits, got {}", v.len())));
                }
                let mut sym = 0u32;
                for b in 0..*n_bits {
                    sym |= above(&v[b]) << b;
                }
                Ok(Decision::Symbol(sym))
            }
            ReadoutRule::BitAt { coord } | ReadoutRule::LabelPerQuery { coord } => {
                let x = v.get(*coord).ok_or_else(|| {
                    TfError::Dim(format!("readout coord {coord} outside vector of {}", v.len()))
                })?;
                Ok(Decision::Bit(above(x) as u8))
            }
        }
    }

    /// Embedded input rows as grid numbers, for diagnostics and for
    /// consumers that re-derive attention from the same embeddings.
    pub fn embed_rows(&self, input: &ModelInput) -> Result<Vec<Vec<FixedNum>>, TfError> {
        let scale = self.cfg.scale();
        let rows = self.embedder.embed(&self.cfg, input)?;
        Ok(rows
            .into_iter()
            .map(|row| row.into_iter().map(|t| raw_fixed(t, scale)).collect())
            .collect())
    }

    /// Readout applied to a final-layer row computed elsewhere.
    pub fn apply_readout(&self, position: usize, row: &[FixedNum]) -> Result<ReadOut, TfError> {
        let out = self.readout.ffn.eval(row)?;
        let decision = self.decide(&out)?;
        Ok(ReadOut { position, vector: out, decision })
    }

    /// Evaluate and read out at explicit 0-based positions.
    pub fn forward_at(&self, input: &ModelInput, positions: &[usize]) -> Result<Vec<ReadOut>, TfError> {
        if positions.is_empty() {
            return Err(TfError::Input("no read positions".into()));
        }
        let rows = self.run_layers(input, positions)?;
        let scale = self.cfg.scale();
        positions
            .iter()
            .zip(rows)
            .map(|(pos, ticks)| {
                let vec: Vec<FixedNum> = ticks.iter().map(|t| raw_fixed(*t, scale)).collect();
                let out = self.readout.ffn.eval(&vec)?;
                let decision = self.decide(&out)?;
                Ok(ReadOut { position: *pos, vector: out, decision })
            })
            .collect()
    }

    /// Evaluate and read out at the rule's default position (the last).
    pub fn forward(&self, input: &ModelInput) -> Result<ReadOut, TfError> {
        let n = self.embedder.embed(&self.cfg, input)?.len();
        let mut outs = self.forward_at(input, &[n - 1])?;
        Ok(outs.pop().expect("one read position"))
    }

    /// Post-softmax attention weights of every head for one query row of
    /// one layer. Diagnostics only; reuses the exact forward machinery.
    pub fn attention_weights(
        &self,
        input: &ModelInput,
        layer_idx: usize,
        row: usize,
    ) -> Result<Vec<Vec<FixedNum>>, TfError> {
        if layer_idx >= self.layers.len() {
            return Err(TfError::Dim(format!("layer {layer_idx} outside {}", self.layers.len())));
        }
        let ops = self.ops();
        let mut x = self.embedder.embed(&self.cfg, input)?;
        if row >= x.len() {
            return Err(TfError::Input(format!("row {row} outside sequence of {}", x.len())));
        }
        let all: Vec<usize> = (0..x.len()).collect();
        for layer in &self.layers[..layer_idx] {
            x = self.layer_apply(layer, &x, &all, &ops)?;
        }
        let layer = &self.layers[layer_idx];
        let keys: Vec<Vec<Vec<i64>>> = layer
            .heads
            .iter()
            .map(|h| x.iter().map(|r| h.w_k.matvec_ticks(r, &ops)).collect())
            .collect();
        let values: Vec<Vec<Vec<i64>>> = layer
            .heads
            .iter()
            .map(|h| x.iter().map(|r| h.w_v.matvec_ticks(r, &ops)).collect())
            .collect();
        let (_, weights) = self.attend_row(layer, &x[row], &keys, &values, row, &ops)?;
        Ok(weights)
    }

    pub fn to_json(&self) -> Result<String, TfError> {
        serde_json::to_string(self).map_err(|e| TfError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, TfError> {
        let model: TransformerModel =
            serde_json::from_str(s).map_err(|e| TfError::Serde(e.to_string()))?;
        // Re-validate dimensions on load.
        TransformerModel::new(
            model.cfg,
            model.embedder.clone(),
            model.layers.clone(),
            model.readout.clone(),
            model.causal,
        )
    }
}

/// Report-friendly wrapper keyed by stable field order.
pub fn stats_map(stats: &ModelStats) -> BTreeMap<&'static str, u64> {
    let mut m = BTreeMap::new();
    m.insert("d", stats.d as u64);
    m.insert("attn_dim", stats.attn_dim as u64);
    m.insert("width", stats.width as u64);
    m.insert("layers", stats.layers as u64);
    m.insert("heads", stats.heads as u64);
    m.insert("p_bits", stats.p_bits as u64);
    m.insert("size_bits", stats.size_bits);
    m
}
