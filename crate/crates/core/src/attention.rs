//! Scaled dot-product attention and its three arrangements over a
//! channel-major token grid:
//!
//! * joint attention over all `C·N` tokens (the MC-ViT baseline),
//! * spatial attention within each channel's `N` tokens,
//! * channel attention across the `C` channels at each spatial position,
//!
//! plus decoupled self-attention, which mixes the last two with a learnable
//! scalar before the output projection.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::numerics::{self, RowGroups, Tape, Tensor, Var};
use crate::params::Linear;

/// Query/key/value/output projections, all `D×D` with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T> AttentionParams<T> {
    pub fn map<'a, U>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> AttentionParams<U> {
        AttentionParams {
            q: self.q.map(&format!("{name}.q"), f),
            k: self.k.map(&format!("{name}.k"), f),
            v: self.v.map(&format!("{name}.v"), f),
            o: self.o.map(&format!("{name}.o"), f),
            heads: self.heads,
        }
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        self.q.visit_mut(&format!("{name}.q"), f);
        self.k.visit_mut(&format!("{name}.k"), f);
        self.v.visit_mut(&format!("{name}.v"), f);
        self.o.visit_mut(&format!("{name}.o"), f);
    }
}

impl AttentionParams<Tensor> {
    /// Truncated-normal (std `std`) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut lin = || Linear {
            weight: Tensor::trunc_normal([dim, dim], std, rng),
            bias: Tensor::zeros([dim]),
        };
        Ok(Self {
            q: lin(),
            k: lin(),
            v: lin(),
            o: lin(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_heads(d, self.heads)?;
        for lin in [&self.q, &self.k, &self.v, &self.o] {
            if lin.weight.shape() != [d, d] || lin.bias.shape() != [d] {
                return Err(Error::shape("attention params", lin.weight.shape(), &[d, d]));
            }
        }
        Ok(())
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid(
            "attention",
            format!("embedding width {dim} is not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

/// Attention weights of one encoder layer. `alpha` is present exactly when the
/// layer takes part in channel attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DsaLayerParams<T = Tensor> {
    pub attn: AttentionParams<T>,
    pub alpha: Option<T>,
}

impl<T> DsaLayerParams<T> {
    pub fn in_channel_set(&self) -> bool {
        self.alpha.is_some()
    }
}

impl DsaLayerParams<Tensor> {
    pub fn spatial_only(attn: AttentionParams) -> Self {
        Self { attn, alpha: None }
    }

    pub fn with_alpha(attn: AttentionParams, alpha: f64) -> Self {
        Self {
            attn,
            alpha: Some(Tensor::scalar(alpha)),
        }
    }
}

/// Query, key and value handles of one projected sequence.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project(tape: &mut Tape, x: Var, p: &AttentionParams<Var>) -> Result<Projected> {
    Ok(Projected {
        q: tape.linear(x, p.q.weight, Some(p.q.bias))?,
        k: tape.linear(x, p.k.weight, Some(p.k.bias))?,
        v: tape.linear(x, p.v.weight, Some(p.v.bias))?,
    })
}

/// Multi-head attention within each row group, before the output projection.
/// Scores are divided by `sqrt(D/heads)`.
pub fn attend(tape: &mut Tape, qkv: Projected, groups: RowGroups, heads: usize) -> Result<Var> {
    let d = tape.value(qkv.q).cols();
    check_heads(d, heads)?;
    let scale = ((d / heads) as f64).sqrt();
    tape.attention(qkv.q, qkv.k, qkv.v, groups, heads, scale)
}

/// `α·channel + (1 − α)·spatial`.
pub fn mix_paths(tape: &mut Tape, channel: Var, spatial: Var, alpha: Var) -> Result<Var> {
    let ch = tape.scale_by(channel, alpha)?;
    let sp = tape.scale_by_complement(spatial, alpha)?;
    tape.add(ch, sp)
}

/// Decoupled self-attention on the tape, residual-free.
pub fn dsa_on_tape(tape: &mut Tape, x: Var, p: &DsaLayerParams<Var>, layout: &TokenLayout) -> Result<Var> {
    let qkv = project(tape, x, &p.attn)?;
    let spatial = attend(tape, qkv, layout.spatial_groups(), p.attn.heads)?;
    let mixed = match p.alpha {
        Some(alpha) => {
            let channel = attend(tape, qkv, layout.channel_groups(), p.attn.heads)?;
            mix_paths(tape, channel, spatial, alpha)?
        }
        None => spatial,
    };
    tape.linear(mixed, p.attn.o.weight, Some(p.attn.o.bias))
}

/// Joint multi-head self-attention over every present token of a sample.
pub fn msa_on_tape(tape: &mut Tape, x: Var, p: &AttentionParams<Var>, layout: &TokenLayout) -> Result<Var> {
    let qkv = project(tape, x, p)?;
    let a = attend(tape, qkv, layout.joint_groups(), p.heads)?;
    tape.linear(a, p.o.weight, Some(p.o.bias))
}

// ---------------------------------------------------------------------------
// Tensor-level entry points. Each runs on a throwaway inference tape.

fn constants(tape: &mut Tape, p: &AttentionParams) -> AttentionParams<Var> {
    p.map("", &mut |_, t| tape.constant(t.clone()))
}

/// `softmax(q kᵀ / scale) v` for one head, composed from primitive kernels.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape("scaled_dot_attention", q.shape(), k.shape()));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid("scaled_dot_attention", "scale must be positive"));
    }
    let scores = numerics::matmul(q, &k.transpose()?)?.scale(1.0 / scale);
    numerics::matmul(&numerics::softmax_rows(&scores)?, v)
}

fn check_seq(op: &'static str, x: &Tensor, p: &AttentionParams) -> Result<()> {
    p.validate()?;
    if x.shape().len() != 2 || x.cols() != p.dim() {
        return Err(Error::shape(op, x.shape(), &[p.dim(), p.dim()]));
    }
    Ok(())
}

/// Multi-head attention over a whole `S×D` sequence, without `W_O`.
pub fn multi_head_attend(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    check_seq("multi_head_attend", x, p)?;
    let mut tape = Tape::inference();
    let params = constants(&mut tape, p);
    let xv = tape.constant(x.clone());
    let qkv = project(&mut tape, xv, &params)?;
    let out = attend(&mut tape, qkv, Arc::new(vec![(0..x.rows()).collect()]), p.heads)?;
    Ok(tape.value(out).clone())
}

/// Baseline joint attention over a flattened `(C·N)×D` sequence.
pub fn msa_joint(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    check_seq("msa_joint", x, p)?;
    let mut tape = Tape::inference();
    let params = constants(&mut tape, p);
    let xv = tape.constant(x.clone());
    let layout = TokenLayout::all_present(1, 1, x.rows())?;
    let out = msa_on_tape(&mut tape, xv, &params, &layout)?;
    Ok(tape.value(out).clone())
}

fn grid_layout(op: &'static str, x: &Tensor, p: &AttentionParams, present: Option<&[bool]>) -> Result<TokenLayout> {
    p.validate()?;
    let [c, n, d] = *x.shape() else {
        return Err(Error::invalid(op, format!("expected C×N×D, got {:?}", x.shape())));
    };
    if d != p.dim() {
        return Err(Error::shape(op, x.shape(), p.q.weight.shape()));
    }
    match present {
        Some(mask) if mask.len() != c => Err(Error::invalid(op, format!("mask length {} for {c} channels", mask.len()))),
        Some(mask) if !mask.iter().any(|&m| m) => Err(Error::invalid(op, "no channel is present")),
        Some(mask) => TokenLayout::new(1, c, n, mask.to_vec()),
        None => TokenLayout::all_present(1, c, n),
    }
}

fn run_grid(
    x: &Tensor,
    p: &AttentionParams,
    layout: &TokenLayout,
    body: impl FnOnce(&mut Tape, Var, &AttentionParams<Var>) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let params = constants(&mut tape, p);
    let rows = tape.constant(x.clone().reshape([layout.rows(), p.dim()])?);
    let out = body(&mut tape, rows, &params)?;
    tape.value(out).clone().reshape(x.shape().to_vec())
}

/// Attention within each channel's `N` tokens (no `W_O`).
pub fn spatial_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let layout = grid_layout("spatial_attention", x, p, None)?;
    run_grid(x, p, &layout, |tape, rows, params| {
        let qkv = project(tape, rows, params)?;
        attend(tape, qkv, layout.spatial_groups(), params.heads)
    })
}

/// Attention across present channels at each spatial position (no `W_O`).
/// Absent channels are left out of the softmax and produce zeros.
pub fn channel_attention(x: &Tensor, p: &AttentionParams, present: &[bool]) -> Result<Tensor> {
    let layout = grid_layout("channel_attention", x, p, Some(present))?;
    run_grid(x, p, &layout, |tape, rows, params| {
        let qkv = project(tape, rows, params)?;
        attend(tape, qkv, layout.channel_groups(), params.heads)
    })
}

/// Decoupled self-attention of one layer on a `C×N×D` grid.
pub fn dsa(x: &Tensor, p: &DsaLayerParams, present: &[bool]) -> Result<Tensor> {
    let layout = grid_layout("dsa", x, &p.attn, Some(present))?;
    let mut tape = Tape::inference();
    let params = DsaLayerParams {
        attn: constants(&mut tape, &p.attn),
        alpha: p.alpha.as_ref().map(|a| tape.constant(a.clone())),
    };
    let rows = tape.constant(x.clone().reshape([layout.rows(), p.attn.dim()])?);
    let out = dsa_on_tape(&mut tape, rows, &params, &layout)?;
    tape.value(out).clone().reshape(x.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Biased random parameters so that bias paths are exercised too.
    fn params(d: usize, heads: usize, seed: u64) -> AttentionParams {
        let mut r = rng(seed);
        let mut p = AttentionParams::init(d, heads, 0.5, &mut r).unwrap();
        p.visit_mut("", &mut |_, t| {
            if t.shape().len() == 1 {
                *t = Tensor::randn([d], 0.3, &mut r);
            }
        });
        p
    }

    // Scalar-loop oracle for one head of attention over the listed rows.
    fn oracle_head(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
        let s = q.len();
        let mut out = vec![vec![0.0; v[0].len()]; s];
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for (o, vv) in out[i].iter_mut().zip(&v[j]) {
                    *o += e[j] / z * vv;
                }
            }
        }
        out
    }

    fn affine(x: &[f64], lin: &Linear) -> Vec<f64> {
        let (d_in, d_out) = (lin.weight.shape()[0], lin.weight.shape()[1]);
        (0..d_out)
            .map(|j| lin.bias.data()[j] + (0..d_in).map(|i| x[i] * lin.weight.data()[i * d_out + j]).sum::<f64>())
            .collect()
    }

    /// Multi-head oracle over a list of token vectors, before `W_O`.
    fn oracle_mha(tokens: &[Vec<f64>], p: &AttentionParams) -> Vec<Vec<f64>> {
        let d = p.dim();
        let dh = d / p.heads;
        let q: Vec<_> = tokens.iter().map(|t| affine(t, &p.q)).collect();
        let k: Vec<_> = tokens.iter().map(|t| affine(t, &p.k)).collect();
        let v: Vec<_> = tokens.iter().map(|t| affine(t, &p.v)).collect();
        let mut out = vec![vec![0.0; d]; tokens.len()];
        for h in 0..p.heads {
            let sl = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect::<Vec<_>>();
            let o = oracle_head(&sl(&q), &sl(&k), &sl(&v), (dh as f64).sqrt());
            for (row, oh) in out.iter_mut().zip(o) {
                row[h * dh..(h + 1) * dh].copy_from_slice(&oh);
            }
        }
        out
    }

    fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
        a.iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().map(move |(j, v)| (r, j, *v)))
            .map(|(r, j, v)| (v - b.row(r)[j]).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn sdpa_single_token_returns_value() {
        let mut r = rng(1);
        let q = Tensor::randn([1, 3], 1.0, &mut r);
        let k = Tensor::randn([1, 3], 1.0, &mut r);
        let v = Tensor::randn([1, 3], 1.0, &mut r);
        assert_eq!(scaled_dot_attention(&q, &k, &v, 2.0).unwrap(), v);
    }

    #[test]
    fn sdpa_constant_values_are_invariant() {
        let mut r = rng(2);
        let q = Tensor::randn([4, 3], 2.0, &mut r);
        let k = Tensor::randn([4, 3], 2.0, &mut r);
        let u = [0.25, -1.0, 3.0];
        let v = Tensor::from_rows(&[&u, &u, &u, &u]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, 1.5).unwrap();
        for row in 0..4 {
            for (a, b) in out.row(row).iter().zip(&u) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sdpa_matches_scalar_oracle() {
        let mut r = rng(3);
        let q = Tensor::randn([3, 2], 1.0, &mut r);
        let k = Tensor::randn([3, 2], 1.0, &mut r);
        let v = Tensor::randn([3, 2], 1.0, &mut r);
        let scale = 2f64.sqrt();
        let out = scaled_dot_attention(&q, &k, &v, scale).unwrap();
        let expect = oracle_head(&rows_of(&q), &rows_of(&k), &rows_of(&v), scale);
        assert!(max_diff(&expect, &out) < 1e-12);
    }

    #[test]
    fn sdpa_rejects_mismatch() {
        let q = Tensor::zeros([3, 2]);
        assert!(scaled_dot_attention(&q, &Tensor::zeros([2, 2]), &q, 1.0).is_err());
    }

    #[test]
    fn mha_single_token_is_value_projection() {
        let p = params(4, 1, 4);
        let x = Tensor::randn([1, 4], 1.0, &mut rng(5));
        let out = multi_head_attend(&x, &p).unwrap();
        let expect = numerics::linear(&x, &p.v.weight, &p.v.bias).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn mha_zero_queries_average_values_for_any_heads() {
        let mut p1 = params(4, 1, 6);
        for lin in [&mut p1.q, &mut p1.k] {
            *lin = Linear::zeros(4, 4);
        }
        let mut p2 = p1.clone();
        p2.heads = 2;
        let x = Tensor::randn([5, 4], 1.0, &mut rng(7));
        let a = multi_head_attend(&x, &p1).unwrap();
        let b = multi_head_attend(&x, &p2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
        let v = numerics::linear(&x, &p1.v.weight, &p1.v.bias).unwrap();
        for j in 0..4 {
            let mean = (0..5).map(|r| v.row(r)[j]).sum::<f64>() / 5.0;
            assert!((a.row(0)[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn mha_matches_scalar_oracle() {
        let p = params(6, 3, 8);
        let x = Tensor::randn([5, 6], 1.0, &mut rng(9));
        let out = multi_head_attend(&x, &p).unwrap();
        assert!(max_diff(&oracle_mha(&rows_of(&x), &p), &out) < 1e-10);
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut p = params(6, 3, 10);
        p.heads = 4;
        assert!(multi_head_attend(&Tensor::zeros([2, 6]), &p).is_err());
    }

    #[test]
    fn msa_single_token() {
        let p = params(4, 2, 11);
        let x = Tensor::randn([1, 4], 1.0, &mut rng(12));
        let vx = numerics::linear(&x, &p.v.weight, &p.v.bias).unwrap();
        let expect = numerics::linear(&vx, &p.o.weight, &p.o.bias).unwrap();
        assert!(msa_joint(&x, &p).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn msa_matches_scalar_oracle() {
        let p = params(4, 2, 13);
        let x = Tensor::randn([4, 4], 1.0, &mut rng(14)); // C=2, N=2 flattened
        let pre = oracle_mha(&rows_of(&x), &p);
        let expect: Vec<Vec<f64>> = pre.iter().map(|r| affine(r, &p.o)).collect();
        assert!(max_diff(&expect, &msa_joint(&x, &p).unwrap()) < 1e-10);
    }

    #[test]
    fn msa_single_channel_equals_spatial_then_output() {
        let p = params(4, 2, 15);
        let x = Tensor::randn([1, 3, 4], 1.0, &mut rng(16));
        let sp = spatial_attention(&x, &p).unwrap().reshape([3, 4]).unwrap();
        let expect = numerics::linear(&sp, &p.o.weight, &p.o.bias).unwrap();
        let got = msa_joint(&x.clone().reshape([3, 4]).unwrap(), &p).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn spatial_attention_is_per_channel() {
        let p = params(4, 2, 17);
        let mut r = rng(18);
        let ch = Tensor::randn([3, 4], 1.0, &mut r);
        let single = spatial_attention(&ch.clone().reshape([1, 3, 4]).unwrap(), &p).unwrap();
        assert_eq!(single.clone().reshape([3, 4]).unwrap(), multi_head_attend(&ch, &p).unwrap());

        let other = Tensor::randn([3, 4], 1.0, &mut r);
        let mut data = ch.data().to_vec();
        data.extend_from_slice(ch.data());
        data.extend_from_slice(other.data());
        let x = Tensor::new([3, 3, 4], data).unwrap();
        let out = spatial_attention(&x, &p).unwrap();
        assert_eq!(&out.data()[..12], &out.data()[12..24]);
        assert_eq!(&out.data()[..12], single.data());

        // reorder channels (2, 0, 1)
        let perm = [2, 0, 1];
        let permuted = permute_channels(&x, &perm);
        let out_p = spatial_attention(&permuted, &p).unwrap();
        assert_eq!(out_p, permute_channels(&out, &perm));
    }

    fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
        let [c, n, d] = *x.shape() else { panic!() };
        let block = n * d;
        let mut data = Vec::with_capacity(x.len());
        for &src in perm {
            data.extend_from_slice(&x.data()[src * block..(src + 1) * block]);
        }
        Tensor::new([c, n, d], data).unwrap()
    }

    #[test]
    fn channel_attention_single_channel_is_value_projection() {
        let p = params(4, 2, 19);
        let x = Tensor::randn([1, 3, 4], 1.0, &mut rng(20));
        let out = channel_attention(&x, &p, &[true]).unwrap();
        let expect = numerics::linear(&x, &p.v.weight, &p.v.bias).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn channel_attention_matches_oracle_and_masking() {
        let p = params(4, 2, 21);
        let x = Tensor::randn([3, 1, 4], 1.0, &mut rng(22));
        let out = channel_attention(&x, &p, &[true, true, true]).unwrap();
        let expect = oracle_mha(&rows_of(&x), &p);
        assert!(max_diff(&expect, &out.clone().reshape([3, 4]).unwrap()) < 1e-10);

        let masked = channel_attention(&x, &p, &[true, true, false]).unwrap();
        let sub = Tensor::new([2, 1, 4], x.data()[..8].to_vec()).unwrap();
        let sub_out = channel_attention(&sub, &p, &[true, true]).unwrap();
        assert!(Tensor::new([2, 1, 4], masked.data()[..8].to_vec()).unwrap().max_abs_diff(&sub_out) < 1e-12);
        assert!(masked.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_permutation_equivariant() {
        let p = params(4, 2, 23);
        let x = Tensor::randn([3, 2, 4], 1.0, &mut rng(24));
        let perm = [1, 2, 0];
        let a = channel_attention(&permute_channels(&x, &perm), &p, &[true; 3]).unwrap();
        let b = permute_channels(&channel_attention(&x, &p, &[true; 3]).unwrap(), &perm);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn channel_attention_rejects_empty_mask() {
        let p = params(4, 2, 25);
        assert!(channel_attention(&Tensor::zeros([2, 1, 4]), &p, &[false, false]).is_err());
    }

    #[test]
    fn dsa_alpha_collapse() {
        let attn = params(4, 2, 26);
        let x = Tensor::randn([3, 2, 4], 1.0, &mut rng(27));
        let mask = [true; 3];
        let spatial_only = dsa(&x, &DsaLayerParams::spatial_only(attn.clone()), &mask).unwrap();
        let zero = dsa(&x, &DsaLayerParams::with_alpha(attn.clone(), 0.0), &mask).unwrap();
        assert_eq!(zero, spatial_only);

        let one = dsa(&x, &DsaLayerParams::with_alpha(attn.clone(), 1.0), &mask).unwrap();
        let ch = channel_attention(&x, &attn, &mask).unwrap();
        let expect = numerics::linear(&ch, &attn.o.weight, &attn.o.bias).unwrap();
        assert_eq!(one, expect);
    }

    #[test]
    fn mix_is_affine_in_alpha() {
        let mut tape = Tape::inference();
        let ones = tape.constant(Tensor::ones([3, 4]));
        let zeros = tape.constant(Tensor::zeros([3, 4]));
        let alpha = tape.constant(Tensor::scalar(0.1));
        let mixed = mix_paths(&mut tape, ones, zeros, alpha).unwrap();
        assert!(tape.value(mixed).data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn dsa_single_channel_spatial_equals_msa() {
        let attn = params(4, 2, 28);
        let x = Tensor::randn([1, 5, 4], 1.0, &mut rng(29));
        let a = dsa(&x, &DsaLayerParams::spatial_only(attn.clone()), &[true]).unwrap();
        let b = msa_joint(&x.clone().reshape([5, 4]).unwrap(), &attn).unwrap();
        assert!(a.reshape([5, 4]).unwrap().max_abs_diff(&b) < 1e-10);
    }
}
