//! Saturating fixed-point grid arithmetic.
//!
//! All model evaluation in this crate runs on the grid
//! `{-B, -B+delta, ..., -delta, 0, delta, ..., B}` where `B = N^Kc` and
//! `delta = N^-Kc`. Values are stored as integer tick counts (`value =
//! ticks * delta`), so addition and subtraction of in-range values are
//! exact; multiplication, exponentiation and division round the exact
//! result down (toward minus infinity) to the grid, and every operation
//! saturates at +/-B.
//!
//! Two facts downstream code leans on:
//! * sums that never leave `[-B, B]` are exact and therefore independent
//!   of summation order, which is what makes split-computation protocols
//!   reproduce a direct evaluation bit for bit;
//! * `exp` of a sufficiently negative logit lands strictly below `delta`
//!   and rounds to exactly zero, which is what turns a scaled softmax
//!   into hard one-hot attention on the grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixedError {
    #[error("grid mismatch: left scale {0}, right scale {1}")]
    ScaleMismatch(i64, i64),
    #[error("softmax of an empty slice")]
    EmptySoftmax,
    #[error("division by a non-positive grid value")]
    NonPositiveDivisor,
    #[error("invalid precision config: {0}")]
    BadConfig(String),
}

/// Grid parameters. `n` is the sequence-length scale the grid is sized
/// for, `kc` the precision exponent; `scale = n^kc` ticks per unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    n: u32,
    kc: u32,
    scale: i64,
    p_bits: u32,
}

impl PrecisionConfig {
    pub fn new(n: u32, kc: u32) -> Result<Self, FixedError> {
        if n < 2 {
            return Err(FixedError::BadConfig(format!("n must be >= 2, got {n}")));
        }
        if kc < 1 {
            return Err(FixedError::BadConfig("kc must be >= 1".into()));
        }
        let scale = (n as i64)
            .checked_pow(kc)
            .filter(|s| *s <= 1 << 30)
            .ok_or_else(|| FixedError::BadConfig(format!("n^kc overflows tick range: n={n} kc={kc}")))?;
        // Bits to index the one-sided grid resolution: p = ceil(2*kc*log2 n),
        // i.e. the bit length of scale^2 = n^(2kc).
        let m = (scale as u128) * (scale as u128);
        let p_bits = if m.is_power_of_two() {
            m.trailing_zeros()
        } else {
            128 - m.leading_zeros()
        };
        Ok(Self { n, kc, scale, p_bits })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn kc(&self) -> u32 {
        self.kc
    }

    /// Ticks per unit, `n^kc`.
    pub fn scale(&self) -> i64 {
        self.scale
    }

    /// Mantissa bit count `ceil(2*kc*log2 n)`.
    pub fn p_bits(&self) -> u32 {
        self.p_bits
    }

    /// Grid step `delta = n^-kc`.
    pub fn delta(&self) -> f64 {
        1.0 / self.scale as f64
    }

    /// Saturation bound `B = n^kc`.
    pub fn bound(&self) -> f64 {
        self.scale as f64
    }

    /// Saturation bound in ticks, `scale^2 = n^(2kc)`.
    pub fn bound_ticks(&self) -> i64 {
        self.scale * self.scale
    }

    /// Round a real down to the grid, saturating at +/-B.
    pub fn quantize(&self, x: f64) -> FixedNum {
        debug_assert!(x.is_finite(), "quantize expects a finite input");
        let scaled = x * self.scale as f64;
        let b = self.bound_ticks();
        let ticks = if scaled >= b as f64 {
            b
        } else if scaled <= -b as f64 {
            // Floor of anything at or below -B clamps to -B.
            -b
        } else {
            scaled.floor() as i64
        };
        FixedNum { ticks, scale: self.scale }
    }

    /// Exact quantization of the rational `num/den`, `den > 0`.
    pub fn quantize_ratio(&self, num: i64, den: i64) -> Result<FixedNum, FixedError> {
        if den <= 0 {
            return Err(FixedError::NonPositiveDivisor);
        }
        let t = (num as i128 * self.scale as i128).div_euclid(den as i128);
        Ok(FixedNum { ticks: clamp_ticks(t, self.bound_ticks()), scale: self.scale })
    }

    /// Grid value from an integer (saturating).
    pub fn from_int(&self, v: i64) -> FixedNum {
        let t = v as i128 * self.scale as i128;
        FixedNum { ticks: clamp_ticks(t, self.bound_ticks()), scale: self.scale }
    }

    pub fn zero(&self) -> FixedNum {
        FixedNum { ticks: 0, scale: self.scale }
    }

    pub fn one(&self) -> FixedNum {
        FixedNum { ticks: self.scale, scale: self.scale }
    }

    /// Rebuild a value from raw ticks (saturating). Used by deserializers.
    pub fn from_ticks(&self, ticks: i64) -> FixedNum {
        FixedNum { ticks: clamp_ticks(ticks as i128, self.bound_ticks()), scale: self.scale }
    }
}

/// One grid value: `ticks * n^-kc`. Carries its scale so mixed-grid
/// arithmetic is rejected instead of silently misinterpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedNum {
    ticks: i64,
    scale: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

#[inline]
fn clamp_ticks(t: i128, bound: i64) -> i64 {
    if t > bound as i128 {
        bound
    } else if t < -(bound as i128) {
        -bound
    } else {
        t as i64
    }
}

impl FixedNum {
    /// Crate-internal constructor from raw ticks already known to lie on
    /// the grid. Callers are responsible for range discipline.
    pub(crate) fn from_raw(ticks: i64, scale: i64) -> Self {
        FixedNum { ticks, scale }
    }

    pub fn ticks(&self) -> i64 {
        self.ticks
    }

    pub fn scale(&self) -> i64 {
        self.scale
    }

    pub fn to_f64(&self) -> f64 {
        self.ticks as f64 / self.scale as f64
    }

    pub fn is_zero(&self) -> bool {
        self.ticks == 0
    }

    fn bound_ticks(&self) -> i64 {
        self.scale * self.scale
    }

    fn check_scale(&self, other: &FixedNum) -> Result<(), FixedError> {
        if self.scale == other.scale {
            Ok(())
        } else {
            Err(FixedError::ScaleMismatch(self.scale, other.scale))
        }
    }

    /// Exact while the sum stays in range; saturates otherwise.
    pub fn add(&self, other: &FixedNum) -> Result<FixedNum, FixedError> {
        self.check_scale(other)?;
        let t = self.ticks as i128 + other.ticks as i128;
        Ok(FixedNum { ticks: clamp_ticks(t, self.bound_ticks()), scale: self.scale })
    }

    pub fn sub(&self, other: &FixedNum) -> Result<FixedNum, FixedError> {
        self.check_scale(other)?;
        let t = self.ticks as i128 - other.ticks as i128;
        Ok(FixedNum { ticks: clamp_ticks(t, self.bound_ticks()), scale: self.scale })
    }

    /// Exact product rounded down to the grid, then saturated.
    pub fn mul(&self, other: &FixedNum) -> Result<FixedNum, FixedError> {
        self.check_scale(other)?;
        let prod = self.ticks as i128 * other.ticks as i128;
        // Floor division by the scale; div_euclid floors for a positive divisor.
        let t = prod.div_euclid(self.scale as i128);
        Ok(FixedNum { ticks: clamp_ticks(t, self.bound_ticks()), scale: self.scale })
    }

    /// Exact rational quotient rounded down to the grid. Divisor must be
    /// strictly positive (the only use is a softmax normalizer >= delta).
    pub fn div(&self, other: &FixedNum) -> Result<FixedNum, FixedError> {
        self.check_scale(other)?;
        if other.ticks <= 0 {
            return Err(FixedError::NonPositiveDivisor);
        }
        let t = (self.ticks as i128 * self.scale as i128).div_euclid(other.ticks as i128);
        Ok(FixedNum { ticks: clamp_ticks(t, self.bound_ticks()), scale: self.scale })
    }

    /// `exp(self)` computed in double precision, rounded down to the grid.
    pub fn exp(&self) -> FixedNum {
        let x = self.ticks as f64 / self.scale as f64;
        let e = x.exp();
        let scaled = e * self.scale as f64;
        let b = self.bound_ticks();
        let ticks = if scaled >= b as f64 {
            b
        } else {
            // exp is nonnegative, so no lower clamp can trigger.
            scaled.floor() as i64
        };
        FixedNum { ticks, scale: self.scale }
    }

    /// Compare on the same grid. Values on different grids are unordered.
    pub fn cmp_same_scale(&self, other: &FixedNum) -> Option<std::cmp::Ordering> {
        if self.scale == other.scale {
            Some(self.ticks.cmp(&other.ticks))
        } else {
            None
        }
    }
}

/// Dispatching wrapper over the binary grid operations.
pub fn fp_arith(op: ArithOp, a: &FixedNum, b: &FixedNum) -> Result<FixedNum, FixedError> {
    match op {
        ArithOp::Add => a.add(b),
        ArithOp::Sub => a.sub(b),
        ArithOp::Mul => a.mul(b),
    }
}

/// Numerically stable softmax on the grid.
///
/// Subtracts the row maximum (exact), exponentiates each shifted logit
/// (rounded down), accumulates the normalizer by exact grid addition, and
/// divides each exponential by it (rounded down). The row maximum maps to
/// `exp(0) = 1` exactly, so the normalizer is at least 1 and the division
/// is always defined.
pub fn stable_softmax(logits: &[FixedNum]) -> Result<Vec<FixedNum>, FixedError> {
    let first = logits.first().ok_or(FixedError::EmptySoftmax)?;
    let scale = first.scale;
    for l in logits {
        if l.scale != scale {
            return Err(FixedError::ScaleMismatch(scale, l.scale));
        }
    }
    let max = logits.iter().max_by_key(|l| l.ticks).copied().expect("non-empty");
    let mut exps = Vec::with_capacity(logits.len());
    let mut z = FixedNum { ticks: 0, scale };
    for l in logits {
        let e = l.sub(&max)?.exp();
        z = z.add(&e)?;
        exps.push(e);
    }
    exps.iter().map(|e| e.div(&z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: u32, kc: u32) -> PrecisionConfig {
        PrecisionConfig::new(n, kc).unwrap()
    }

    #[test]
    fn quantize_rounds_down_to_grid() {
        let c = cfg(4, 1); // delta = 0.25, B = 4
        assert_eq!(c.quantize(0.3).to_f64(), 0.25);
        assert_eq!(c.quantize(0.25).to_f64(), 0.25);
        assert_eq!(c.quantize(-0.3).to_f64(), -0.5);
        assert_eq!(c.quantize(0.0).ticks(), 0);
    }

    #[test]
    fn quantize_saturates_at_bound() {
        let c = cfg(4, 1);
        assert_eq!(c.quantize(5.0).to_f64(), 4.0);
        assert_eq!(c.quantize(-5.0).to_f64(), -4.0);
        assert_eq!(c.quantize(4.0).to_f64(), 4.0);
    }

    #[test]
    fn p_bits_matches_grid_cardinality() {
        assert_eq!(cfg(4, 1).p_bits(), 4); // 4^2 = 2^4
        assert_eq!(cfg(16, 2).p_bits(), 16); // 16^4 = 2^16
        assert_eq!(cfg(12, 2).p_bits(), 15); // ceil(log2 12^4) = 15
        assert_eq!(cfg(1024, 2).p_bits(), 40);
    }

    #[test]
    fn mul_quantizes_the_exact_product() {
        let c = cfg(4, 1);
        let q = c.quantize(0.25);
        // 0.25 * 0.25 = 0.0625 rounds down to 0 on a 0.25 grid.
        assert_eq!(q.mul(&q).unwrap().ticks(), 0);
        let h = cfg(4, 2); // delta = 1/16
        let q = h.quantize(0.25);
        assert_eq!(q.mul(&q).unwrap().to_f64(), 0.0625);
    }

    #[test]
    fn mul_floor_is_toward_minus_infinity() {
        let c = cfg(4, 2); // delta = 1/16
        let a = c.quantize(0.3125); // 5 ticks
        let b = c.quantize(-0.1875); // -3 ticks
        // Exact product -15/256 = -0.9375 ticks, floor -> -1 tick.
        assert_eq!(a.mul(&b).unwrap().ticks(), -1);
        let b_pos = c.quantize(0.1875);
        assert_eq!(a.mul(&b_pos).unwrap().ticks(), 0);
    }

    #[test]
    fn add_saturates() {
        let c = cfg(4, 1);
        let four = c.from_int(4);
        let one = c.one();
        assert_eq!(four.add(&one).unwrap().to_f64(), 4.0);
        let neg = c.from_int(-4);
        assert_eq!(neg.sub(&one).unwrap().to_f64(), -4.0);
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let a = cfg(4, 1).one();
        let b = cfg(8, 1).one();
        assert!(matches!(a.add(&b), Err(FixedError::ScaleMismatch(4, 8))));
    }

    #[test]
    fn exp_of_zero_is_one() {
        let c = cfg(16, 2);
        assert_eq!(c.zero().exp(), c.one());
    }

    #[test]
    fn exp_of_minus_bound_rounds_to_zero() {
        for (n, kc) in [(4u32, 1u32), (8, 2), (16, 2), (64, 2)] {
            let c = cfg(n, kc);
            let x = c.quantize(-c.bound());
            assert_eq!(x.exp().ticks(), 0, "n={n} kc={kc}");
        }
    }

    #[test]
    fn exp_matches_float_oracle() {
        let c = cfg(16, 2); // delta = 2^-8
        for v in [-3.0f64, -1.0, -0.5, 0.25, 1.0] {
            let x = c.quantize(v);
            let expect = ((x.to_f64().exp()) * c.scale() as f64).floor() / c.scale() as f64;
            let expect = expect.min(c.bound());
            assert_eq!(x.exp().to_f64(), expect, "exp({v})");
        }
    }

    #[test]
    fn div_is_exact_floor() {
        let c = cfg(4, 2);
        let one = c.one();
        let three = c.from_int(3);
        // 1/3 = 5.33 ticks -> 5 ticks.
        assert_eq!(one.div(&three).unwrap().ticks(), 5);
        assert!(matches!(one.div(&c.zero()), Err(FixedError::NonPositiveDivisor)));
    }

    #[test]
    fn softmax_of_empty_slice_errors() {
        assert!(matches!(stable_softmax(&[]), Err(FixedError::EmptySoftmax)));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let c = cfg(8, 2);
        let row = vec![c.quantize(1.5); 4];
        let w = stable_softmax(&row).unwrap();
        // exp(0) = 1 each, Z = 4, weight = 1/4 exactly (64 | scale).
        for x in &w {
            assert_eq!(x.to_f64(), 0.25);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_bitwise() {
        let c = cfg(8, 2);
        let row: Vec<_> = [0.5, -1.25, 2.0, 0.0].iter().map(|v| c.quantize(*v)).collect();
        let shift = c.quantize(1.75);
        let shifted: Vec<_> = row.iter().map(|x| x.add(&shift).unwrap()).collect();
        assert_eq!(stable_softmax(&row).unwrap(), stable_softmax(&shifted).unwrap());
    }

    #[test]
    fn softmax_concentrates_under_scaled_margin() {
        // Row [eta*3/4, eta*1/4 repeated] with eta > 2 ln(3N) puts weight
        // >= 3/4 on the first entry.
        let n = 32u32;
        let c = cfg(n, 2);
        let eta = 2.0 * (3.0 * n as f64).ln() + 0.01;
        let mut row = vec![c.quantize(eta * 0.75)];
        row.extend(std::iter::repeat(c.quantize(eta * 0.25)).take(n as usize - 1));
        let w = stable_softmax(&row).unwrap();
        assert!(w[0].to_f64() >= 0.75, "lead weight {}", w[0].to_f64());
    }

    #[test]
    fn softmax_mass_is_one_up_to_len_delta() {
        let c = cfg(16, 2);
        let row: Vec<_> = [-2.0, 0.3, 0.9, -0.4, 1.1].iter().map(|v| c.quantize(*v)).collect();
        let w = stable_softmax(&row).unwrap();
        let total: f64 = w.iter().map(|x| x.to_f64()).sum();
        assert!(total <= 1.0 + 1e-12);
        assert!(total >= 1.0 - row.len() as f64 * c.delta());
    }

    proptest! {
        #[test]
        fn prop_quantize_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let c = cfg(8, 2);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(c.quantize(lo).ticks() <= c.quantize(hi).ticks());
        }

        #[test]
        fn prop_quantize_rounds_down_within_delta(x in -60.0f64..60.0) {
            let c = cfg(8, 2);
            let q = c.quantize(x);
            let clamped = x.clamp(-c.bound(), c.bound());
            prop_assert!(q.to_f64() <= clamped + 1e-12);
            prop_assert!(clamped - q.to_f64() < c.delta() + 1e-12);
        }

        #[test]
        fn prop_quantize_idempotent(x in -70.0f64..70.0) {
            let c = cfg(8, 2);
            let q = c.quantize(x);
            prop_assert_eq!(c.quantize(q.to_f64()), q);
        }

        #[test]
        fn prop_sum_order_independent_without_saturation(
            mut ticks in proptest::collection::vec(0i64..100, 1..40),
        ) {
            // In-range sums are exact, hence permutation invariant.
            let c = cfg(8, 2);
            let total: i64 = ticks.iter().sum();
            prop_assert!(total <= c.bound_ticks());
            let sum_fwd = ticks.iter().fold(c.zero(), |acc, t| acc.add(&c.from_ticks(*t)).unwrap());
            ticks.reverse();
            let sum_rev = ticks.iter().fold(c.zero(), |acc, t| acc.add(&c.from_ticks(*t)).unwrap());
            prop_assert_eq!(sum_fwd, sum_rev);
            prop_assert_eq!(sum_fwd.ticks(), total);
        }

        #[test]
        fn prop_mul_rounds_down(a in -450i64..450, b in -450i64..450) {
            // Range keeps |a*b| below the saturation threshold so the
            // floor law holds without clamping.
            let c = cfg(8, 2);
            let x = c.from_ticks(a);
            let y = c.from_ticks(b);
            let exact = a as i128 * b as i128; // in ticks^2
            let got = x.mul(&y).unwrap().ticks() as i128 * c.scale() as i128;
            prop_assert!(got <= exact);
            prop_assert!(exact - got < c.scale() as i128 * c.scale() as i128);
        }

        #[test]
        fn prop_mul_saturates_outside_range(a in 3000i64..4000, b in 3000i64..4000) {
            let c = cfg(8, 2);
            let up = c.from_ticks(a).mul(&c.from_ticks(b)).unwrap();
            prop_assert_eq!(up.ticks(), c.bound_ticks());
            let down = c.from_ticks(-a).mul(&c.from_ticks(b)).unwrap();
            prop_assert_eq!(down.ticks(), -c.bound_ticks());
        }

        #[test]
        fn prop_softmax_weights_in_unit_range(
            ticks in proptest::collection::vec(-3000i64..3000, 1..20),
        ) {
            let c = cfg(8, 2);
            let row: Vec<_> = ticks.iter().map(|t| c.from_ticks(*t)).collect();
            let w = stable_softmax(&row).unwrap();
            let argmax = ticks.iter().enumerate().max_by_key(|(_, t)| **t).unwrap().0;
            for x in &w {
                prop_assert!(x.ticks() >= 0);
                prop_assert!(x.ticks() <= c.scale());
            }
            prop_assert!(w.iter().all(|x| x.ticks() <= w[argmax].ticks()));
        }
    }
}
