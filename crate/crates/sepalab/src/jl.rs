//! Near-orthogonal sign-vector families for positional keys.
//!
//! A family is `count` vectors in `{-1/sqrt(k), +1/sqrt(k)}^k`, stored as
//! raw sign rows so that every pairwise dot product is the exact rational
//! `s/k` with `s = <signs_i, signs_j>` an integer. Self dot products are
//! exactly 1. Families come in two tolerance profiles:
//!
//! * `Coarse`: every off-diagonal dot is at most 1/4 (one-sided);
//! * `Fine(gamma)`: every off-diagonal dot has magnitude at most gamma/100.
//!
//! Random generation draws sign rows from a seeded stream and re-verifies
//! until a family passes, bumping the seed between attempts. The fine
//! profile at practically useful `gamma` demands near-exact orthogonality,
//! which random sampling cannot reach in low dimension, so an explicit
//! orthogonal construction (rows of a Sylvester matrix) is also provided;
//! it passes either profile verification with off-diagonal dots exactly 0.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{FixedNum, PrecisionConfig};

pub const DEFAULT_MAX_ATTEMPTS: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JlError {
    #[error("family of {count} vectors failed verification after {attempts} attempts (k={k}); worst pair ({i},{j}) dot {dot}")]
    Exhausted { count: usize, k: usize, attempts: u64, i: usize, j: usize, dot: f64 },
    #[error("invalid family parameters: {0}")]
    BadParams(String),
    #[error("vector index {0} out of range for family of {1}")]
    IndexOutOfRange(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ToleranceProfile {
    /// Off-diagonal dot products at most 1/4.
    Coarse,
    /// Off-diagonal dot magnitudes at most gamma/100.
    Fine { gamma: f64 },
}

impl ToleranceProfile {
    /// Largest allowed off-diagonal dot, as a fraction of 1.
    pub fn off_diag_cap(&self) -> f64 {
        match self {
            ToleranceProfile::Coarse => 0.25,
            ToleranceProfile::Fine { gamma } => gamma / 100.0,
        }
    }

    fn pair_ok(&self, s: i64, k: usize) -> bool {
        match self {
            // 4s <= k is the exact rational form of s/k <= 1/4.
            ToleranceProfile::Coarse => 4 * s <= k as i64,
            ToleranceProfile::Fine { gamma } => 100.0 * s.abs() as f64 <= gamma * k as f64,
        }
    }
}

/// A verified family of sign vectors. `signs[i]` holds the +/-1 pattern of
/// vector `i`; the represented vector is `signs[i] / sqrt(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlFamily {
    pub count: usize,
    pub k: usize,
    pub profile: ToleranceProfile,
    pub seed: u64,
    pub attempts: u64,
    signs: Vec<Vec<i8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FamilyCheck {
    pub pass: bool,
    pub min_diag: f64,
    /// Largest off-diagonal dot in coarse mode, largest magnitude in fine
    /// mode. None for a single-vector family.
    pub max_off_diag: Option<f64>,
    pub worst_pair: Option<(usize, usize)>,
}

impl JlFamily {
    pub fn signs(&self, i: usize) -> Result<&[i8], JlError> {
        self.signs.get(i).map(|v| v.as_slice()).ok_or(JlError::IndexOutOfRange(i, self.count))
    }

    /// Integer sign dot product; the vector dot product is this over k.
    pub fn sign_dot(&self, i: usize, j: usize) -> Result<i64, JlError> {
        let a = self.signs(i)?;
        let b = self.signs(j)?;
        Ok(sign_dot(a, b))
    }

    pub fn dot(&self, i: usize, j: usize) -> Result<f64, JlError> {
        Ok(self.sign_dot(i, j)? as f64 / self.k as f64)
    }

    /// Entry magnitude 1/sqrt(k) rounded down to the grid. Builders use
    /// `sign * unit_magnitude` so the two signs quantize symmetrically.
    pub fn unit_magnitude(&self, cfg: &PrecisionConfig) -> FixedNum {
        cfg.quantize(1.0 / (self.k as f64).sqrt())
    }

    /// Vector `i` on the grid, scaled by `factor / sqrt(k)` entrywise.
    pub fn quantized_row(&self, i: usize, cfg: &PrecisionConfig, factor: f64) -> Result<Vec<FixedNum>, JlError> {
        let mag = cfg.quantize(factor / (self.k as f64).sqrt());
        Ok(self
            .signs(i)?
            .iter()
            .map(|s| if *s > 0 { mag } else { cfg.from_ticks(-mag.ticks()) })
            .collect())
    }

    /// CSV dump: a parameter header line, then one sign row per vector.
    pub fn to_csv(&self) -> String {
        let profile = match self.profile {
            ToleranceProfile::Coarse => "coarse".to_string(),
            ToleranceProfile::Fine { gamma } => format!("fine:{gamma}"),
        };
        let mut out = format!("k={},count={},profile={},seed={}\n", self.k, self.count, profile, self.seed);
        for row in &self.signs {
            let line: Vec<String> = row.iter().map(|s| s.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn sign_dot(a: &[i8], b: &[i8]) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as i64) * (*y as i64)).sum()
}

/// Exhaustive pairwise re-verification in exact integer arithmetic.
pub fn verify_family(family: &JlFamily) -> FamilyCheck {
    verify_profile(family, family.profile)
}

/// Same pairwise check, but against an arbitrary profile. Lets a consumer
/// that needs a particular tolerance accept any family that happens to
/// satisfy it, whatever profile the family was generated under.
pub fn verify_profile(family: &JlFamily, profile: ToleranceProfile) -> FamilyCheck {
    let k = family.k;
    let mut worst: Option<(i64, usize, usize)> = None;
    for i in 0..family.count {
        for j in (i + 1)..family.count {
            let s = sign_dot(&family.signs[i], &family.signs[j]);
            let keyed = match profile {
                ToleranceProfile::Coarse => s,
                ToleranceProfile::Fine { .. } => s.abs(),
            };
            if worst.map_or(true, |(w, _, _)| keyed > w) {
                worst = Some((keyed, i, j));
            }
        }
    }
    match worst {
        None => FamilyCheck { pass: true, min_diag: 1.0, max_off_diag: None, worst_pair: None },
        Some((s, i, j)) => FamilyCheck {
            pass: profile.pair_ok(s, k),
            min_diag: 1.0,
            max_off_diag: Some(s as f64 / k as f64),
            worst_pair: Some((i, j)),
        },
    }
}

/// Suggested dimension `ceil(8 * ln(2*count) / gamma^2)` for a target
/// off-diagonal bound gamma via random sampling.
pub fn suggest_k(count: usize, gamma: f64) -> usize {
    (8.0 * (2.0 * count as f64).ln() / (gamma * gamma)).ceil() as usize
}

pub fn generate_family(
    count: usize,
    k: usize,
    profile: ToleranceProfile,
    seed: u64,
) -> Result<JlFamily, JlError> {
    generate_family_with_attempts(count, k, profile, seed, DEFAULT_MAX_ATTEMPTS)
}

/// Sample-and-verify generation. Attempt `a` draws from a stream seeded
/// with `seed + a`, so results are reproducible and independent of the
/// attempt budget.
pub fn generate_family_with_attempts(
    count: usize,
    k: usize,
    profile: ToleranceProfile,
    seed: u64,
    max_attempts: u64,
) -> Result<JlFamily, JlError> {
    if count == 0 || k == 0 {
        return Err(JlError::BadParams(format!("count={count}, k={k} must be positive")));
    }
    if let ToleranceProfile::Fine { gamma } = profile {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(JlError::BadParams(format!("fine profile needs gamma > 0, got {gamma}")));
        }
    }
    let mut worst_seen: Option<(i64, usize, usize)> = None;
    for attempt in 0..max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let signs: Vec<Vec<i8>> = (0..count)
            .map(|_| (0..k).map(|_| if rng.gen::<bool>() { 1i8 } else { -1i8 }).collect())
            .collect();
        let candidate = JlFamily { count, k, profile, seed, attempts: attempt + 1, signs };
        let check = verify_family(&candidate);
        if check.pass {
            return Ok(candidate);
        }
        if let (Some(d), Some((i, j))) = (check.max_off_diag, check.worst_pair) {
            let s = (d * k as f64).round() as i64;
            if worst_seen.map_or(true, |(w, _, _)| s < w) {
                worst_seen = Some((s, i, j));
            }
        }
    }
    let (s, i, j) = worst_seen.unwrap_or((0, 0, 0));
    Err(JlError::Exhausted { count, k, attempts: max_attempts, i, j, dot: s as f64 / k as f64 })
}

/// Exactly orthogonal sign family: the first `count` rows of the Sylvester
/// matrix of order `next_power_of_two(max(count, 2))`. Off-diagonal dots
/// are exactly zero, so the family passes either profile; the price is
/// `k >= count` instead of logarithmic dimension.
pub fn orthogonal_family(count: usize, profile: ToleranceProfile) -> Result<JlFamily, JlError> {
    if count == 0 {
        return Err(JlError::BadParams("count must be positive".into()));
    }
    let k = count.max(2).next_power_of_two();
    let signs: Vec<Vec<i8>> = (0..count)
        .map(|i| (0..k).map(|j| if (i & j).count_ones() % 2 == 0 { 1i8 } else { -1i8 }).collect())
        .collect();
    Ok(JlFamily { count, k, profile, seed: 0, attempts: 0, signs })
}
