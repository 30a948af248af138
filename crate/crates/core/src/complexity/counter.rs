//! Scalar-operation counting around a reference attention implementation.

use std::cell::Cell;
use std::ops::{Add, Div, Mul, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tally of scalar operations.
#[derive(Debug, Default)]
pub struct OpCounter {
    ops: Cell<u64>,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.ops.get()
    }

    fn tick(&self) {
        self.ops.set(self.ops.get() + 1);
    }

    pub fn num(&self, v: f64) -> Counted<'_> {
        Counted { v, c: self }
    }
}

/// A real number whose arithmetic is tallied by an [`OpCounter`].
#[derive(Clone, Copy, Debug)]
pub struct Counted<'a> {
    pub v: f64,
    c: &'a OpCounter,
}

impl<'a> Counted<'a> {
    pub fn exp(self) -> Self {
        self.c.tick();
        Self { v: self.v.exp(), c: self.c }
    }

    pub fn max(self, other: Self) -> Self {
        self.c.tick();
        if other.v > self.v { other } else { self }
    }
}

macro_rules! counted_op {
    ($tr:ident, $f:ident, $op:tt) => {
        impl<'a> $tr for Counted<'a> {
            type Output = Self;
            fn $f(self, rhs: Self) -> Self {
                self.c.tick();
                Self { v: self.v $op rhs.v, c: self.c }
            }
        }
    };
}

counted_op!(Add, add, +);
counted_op!(Sub, sub, -);
counted_op!(Mul, mul, *);
counted_op!(Div, div, /);

/// Single-head attention `softmax(q kᵀ) v` over `s` rows of width `d`,
/// written with counted scalars. The score scale is folded into `q` and not
/// counted.
pub fn reference_attention<'a>(q: &[Vec<Counted<'a>>], k: &[Vec<Counted<'a>>], v: &[Vec<Counted<'a>>], c: &'a OpCounter) -> Vec<Vec<Counted<'a>>> {
    let d = v[0].len();
    let mut out = Vec::with_capacity(q.len());
    for qi in q {
        let scores: Vec<Counted> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).fold(c.num(0.0), |acc, (&a, &b)| acc + a * b))
            .collect();
        let max = scores.iter().fold(c.num(f64::NEG_INFINITY), |m, &x| m.max(x));
        let exps: Vec<Counted> = scores.iter().map(|&x| (x - max).exp()).collect();
        let total = exps.iter().fold(c.num(0.0), |acc, &e| acc + e);
        let probs: Vec<Counted> = exps.iter().map(|&e| e / total).collect();
        let row = (0..d)
            .map(|j| probs.iter().zip(v).fold(c.num(0.0), |acc, (&p, vr)| acc + p * vr[j]))
            .collect();
        out.push(row);
    }
    out
}

fn random_rows<'a>(c: &'a OpCounter, rng: &mut ChaCha8Rng, s: usize, d: usize) -> Vec<Vec<Counted<'a>>> {
    (0..s).map(|_| (0..d).map(|_| c.num(rng.random_range(-1.0..1.0))).collect()).collect()
}

fn count_sequences(seqs: usize, s: usize, d: usize, rng: &mut ChaCha8Rng) -> u64 {
    let c = OpCounter::default();
    for _ in 0..seqs {
        let (q, k, v) = (random_rows(&c, rng, s, d), random_rows(&c, rng, s, d), random_rows(&c, rng, s, d));
        reference_attention(&q, &k, &v, &c);
    }
    c.total()
}

/// Counted operations of joint attention over `C·N` tokens in `L` layers.
pub fn counted_msa(c: usize, n: usize, d: usize, l: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..l).map(|_| count_sequences(1, c * n, d, &mut rng)).sum()
}

/// Counted operations of decoupled attention: `C` spatial sequences per layer,
/// plus `N` channel sequences in each of the first `m` layers.
pub fn counted_dsa(c: usize, n: usize, d: usize, l: usize, m: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..l)
        .map(|layer| {
            let spatial = count_sequences(c, n, d, &mut rng);
            let channel = if layer < m { count_sequences(n, c, d, &mut rng) } else { 0 };
            spatial + channel
        })
        .sum()
}
