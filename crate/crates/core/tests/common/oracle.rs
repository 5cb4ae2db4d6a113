//! Exact reference for `floor((d_i / mean(d)) * r)` and a seeded instance
//! generator. Uses only big-integer arithmetic on the raw bit patterns.

#![allow(dead_code)]

use adarank::numerics::RngStream;
use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

/// `(m, e)` with `v == m * 2^e` exactly, for finite `v >= 0`.
fn decompose(v: f64) -> (u64, i64) {
    assert!(v.is_finite() && v >= 0.0);
    let bits = v.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    }
}

/// Exact `floor(d_i * r * n / sum(d))` for every `i`.
pub fn exact_ranks(d: &[f64], r: f64) -> Vec<usize> {
    let parts: Vec<(u64, i64)> = d.iter().map(|&v| decompose(v)).collect();
    let emin = parts.iter().map(|&(_, e)| e).min().unwrap();
    let denom: BigUint = parts
        .iter()
        .map(|&(m, e)| BigUint::from(m) << ((e - emin) as usize))
        .sum();
    assert!(!denom.is_zero());
    let (mr, er) = decompose(r);
    parts
        .iter()
        .map(|&(m, e)| {
            let num = BigUint::from(m) * BigUint::from(mr) * BigUint::from(d.len());
            let shift = e + er - emin;
            let q = if shift >= 0 {
                (num << (shift as usize)) / &denom
            } else {
                num / (&denom << ((-shift) as usize))
            };
            q.to_usize().unwrap()
        })
        .collect()
}

/// One random `(d, r)` instance. Mixes uniform, log-uniform, small-integer,
/// constant and decimal-grid vectors so exact ties and integer ratios occur.
pub fn instance(rng: &mut RngStream) -> (Vec<f64>, f64) {
    let n = 1 + rng.below(48);
    let style = rng.below(5);
    let constant = 10f64.powf(rng.uniform() * 8.0 - 4.0);
    let mut d: Vec<f64> = (0..n)
        .map(|_| match style {
            0 => rng.uniform(),
            1 => 10f64.powf(rng.uniform() * 12.0 - 6.0),
            2 => rng.below(6) as f64,
            3 => constant,
            _ => rng.below(30) as f64 * 0.1,
        })
        .collect();
    if d.iter().all(|&v| v == 0.0) {
        d[0] = 1.0;
    }
    let r = match rng.below(3) {
        0 => (1 + rng.below(32)) as f64,
        1 => 0.5 + rng.uniform() * 31.5,
        _ => (1 + rng.below(160)) as f64 * 0.1,
    };
    (d, r)
}

/// Whether some `(d_i / mean) * r` lies within `tol` of an integer.
pub fn near_boundary(d: &[f64], r: f64, tol: f64) -> bool {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().any(|&v| {
        let x = v / mean * r;
        (x - x.round()).abs() < tol
    })
}
