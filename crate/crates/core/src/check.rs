//! Seeded self-test of the structural identities the model must satisfy.
//!
//! Each check builds small random inputs from the shared seed, evaluates two
//! routes that must agree, and reports the worst discrepancy.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{abmil_weights, dag, pool_joint, AbmilParams, AggregationConfig, PoolMode, PoolParams};
use crate::attention::{channel_attention, dsa, msa_joint, spatial_attention, AttentionParams, DsaLayerParams};
use crate::complexity::counter::{counted_dsa, counted_msa};
use crate::complexity::{flops_dsa, flops_msa};
use crate::encoder::{dcvit_block, encode, forward_logits, mcvit_block, ChannelBatch, DcVitModel, ModelConfig};
use crate::error::Result;
use crate::numerics::{linear, matmul, softmax_rows, Tensor};
use crate::training::{gradcheck, GradcheckOptions};

/// Outcome of one identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("softmax_rows_sum_to_one", softmax_sums),
    ("matmul_associative", matmul_assoc),
    ("dsa_alpha_zero_is_spatial", alpha_zero),
    ("dsa_alpha_one_is_channel", alpha_one),
    ("dsa_single_channel_is_msa", single_channel_attention),
    ("dsa_channel_permutation_equivariant", dsa_permutation),
    ("channel_attention_ignores_absent", absent_channels),
    ("block_single_channel_mcvit_eq_dcvit", single_channel_block),
    ("encoder_isolates_channels_without_channel_layers", channel_isolation),
    ("logits_channel_permutation_invariant", logits_permutation),
    ("dag_mean_mean_eq_joint_mean", dag_mean_joint),
    ("dag_max_max_eq_joint_max", dag_max_joint),
    ("dag_channel_permutation_invariant", dag_permutation),
    ("abmil_weights_on_simplex", abmil_simplex),
    ("flops_counter_matches_formulas", flops_counter),
    ("flops_single_channel_msa_eq_dsa", flops_single_channel),
    ("tape_gradients_match_finite_differences", tape_gradients),
];

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check once. Check `i` draws from its own stream derived from
/// `seed`, so results do not depend on which other checks ran.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (passed, detail) = match f(&mut rng) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn within(diff: f64, tol: f64) -> (bool, String) {
    (diff <= tol, format!("max diff {diff:.3e} (tol {tol:.0e})"))
}

fn attn(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<AttentionParams> {
    let mut p = AttentionParams::init(d, heads, 0.4, rng)?;
    for lin in [&mut p.q, &mut p.k, &mut p.v, &mut p.o] {
        lin.bias = Tensor::randn([d], 0.1, rng);
    }
    Ok(p)
}

/// Channels `perm` of a `C×N×D` grid, in that order.
fn permute_grid(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let [_, n, d] = *x.shape() else { unreachable!("grid") };
    let data = perm
        .iter()
        .flat_map(|&p| x.data()[p * n * d..(p + 1) * n * d].iter().copied())
        .collect();
    Tensor::new([perm.len(), n, d], data)
}

fn shuffled(c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..c).collect();
    while c > 1 && perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.shuffle(rng);
    }
    perm
}

fn softmax_sums(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for scale in [1.0, 1e2, 1e4] {
        let s = softmax_rows(&Tensor::randn([8, 16], scale, rng))?;
        if s.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Ok((false, format!("entry outside [0, 1] at scale {scale}")));
        }
        for i in 0..8 {
            worst = worst.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(within(worst, 1e-12))
}

fn matmul_assoc(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let a = Tensor::randn([5, 7], 1.0, rng);
    let b = Tensor::randn([7, 3], 1.0, rng);
    let c = Tensor::randn([3, 6], 1.0, rng);
    let left = matmul(&matmul(&a, &b)?, &c)?;
    let right = matmul(&a, &matmul(&b, &c)?)?;
    Ok(within(left.max_abs_diff(&right), 1e-10))
}

fn alpha_zero(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = attn(8, 2, rng)?;
    let x = Tensor::randn([3, 5, 8], 1.0, rng);
    let present = [true; 3];
    let mixed = dsa(&x, &DsaLayerParams::with_alpha(p.clone(), 0.0), &present)?;
    let spatial = dsa(&x, &DsaLayerParams::spatial_only(p), &present)?;
    Ok(within(mixed.max_abs_diff(&spatial), 1e-12))
}

fn alpha_one(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = attn(8, 2, rng)?;
    let x = Tensor::randn([3, 5, 8], 1.0, rng);
    let present = [true; 3];
    let mixed = dsa(&x, &DsaLayerParams::with_alpha(p.clone(), 1.0), &present)?;
    let ch = channel_attention(&x, &p, &present)?.reshape([15, 8])?;
    let expected = linear(&ch, &p.o.weight, &p.o.bias)?.reshape([3, 5, 8])?;
    Ok(within(mixed.max_abs_diff(&expected), 1e-12))
}

fn single_channel_attention(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = attn(8, 2, rng)?;
    let x = Tensor::randn([1, 6, 8], 1.0, rng);
    let decoupled = dsa(&x, &DsaLayerParams::spatial_only(p.clone()), &[true])?;
    let joint = msa_joint(&x.clone().reshape([6, 8])?, &p)?.reshape([1, 6, 8])?;
    let spatial = spatial_attention(&x, &p)?.reshape([6, 8])?;
    let projected = linear(&spatial, &p.o.weight, &p.o.bias)?.reshape([1, 6, 8])?;
    Ok(within(decoupled.max_abs_diff(&joint).max(decoupled.max_abs_diff(&projected)), 1e-12))
}

fn dsa_permutation(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = DsaLayerParams::with_alpha(attn(8, 2, rng)?, rng.random_range(0.1..0.9));
    let x = Tensor::randn([4, 5, 8], 1.0, rng);
    let perm = shuffled(4, rng);
    let present = [true; 4];
    let a = permute_grid(&dsa(&x, &p, &present)?, &perm)?;
    let b = dsa(&permute_grid(&x, &perm)?, &p, &present)?;
    Ok(within(a.max_abs_diff(&b), 1e-12))
}

fn absent_channels(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = attn(8, 2, rng)?;
    let x = Tensor::randn([4, 3, 8], 1.0, rng);
    let present = [true, false, true, true];
    let full = channel_attention(&x, &p, &present)?;
    let sub = channel_attention(&permute_grid(&x, &[0, 2, 3])?, &p, &[true; 3])?;
    let kept = permute_grid(&full, &[0, 2, 3, 1])?;
    let (kept, dropped) = kept.data().split_at(3 * 3 * 8);
    let diff = Tensor::new([3, 3, 8], kept.to_vec())?.max_abs_diff(&sub);
    let leak = dropped.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(within(diff.max(leak), 1e-12))
}

fn small_config(m: &[usize]) -> ModelConfig {
    ModelConfig {
        c_max: 4,
        image_size: 8,
        patch_size: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        channel_layers: m.iter().copied().collect::<BTreeSet<_>>(),
        mlp_ratio: 2.0,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

fn single_channel_block(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let model = DcVitModel::new(small_config(&[]), rng.random())?;
    let x = Tensor::randn([1, 6, 8], 1.0, rng);
    let mut worst = 0.0f64;
    for layer in 0..model.config.depth {
        let a = dcvit_block(&model, layer, &x, &[true])?.reshape([6, 8])?;
        let b = mcvit_block(&model, layer, &x.clone().reshape([6, 8])?)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(within(worst, 1e-12))
}

fn channel_isolation(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let model = DcVitModel::new(small_config(&[]), rng.random())?;
    let images = Tensor::randn([1, 3, 8, 8], 1.0, rng);
    let mut changed = images.clone();
    for v in &mut changed.data_mut()[64..] {
        *v += rng.random_range(-1.0..1.0);
    }
    let a = encode(&ChannelBatch::all_present(images, None)?, &model)?;
    let b = encode(&ChannelBatch::all_present(changed, None)?, &model)?;
    let per_channel = a.len() / 3;
    let diff = a.data()[..per_channel]
        .iter()
        .zip(&b.data()[..per_channel])
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(within(diff, 1e-12))
}

fn logits_permutation(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = ModelConfig {
        use_channel_embed: false,
        g_ch: PoolMode::Mean,
        ..small_config(&[1, 2])
    };
    let model = DcVitModel::new(cfg, rng.random())?;
    let batch = ChannelBatch::all_present(Tensor::randn([2, 3, 8, 8], 1.0, rng), None)?;
    let perm = shuffled(3, rng);
    let a = forward_logits(&batch, &model)?;
    let b = forward_logits(&batch.permute_channels(&perm)?, &model)?;
    Ok(within(a.max_abs_diff(&b), 1e-10))
}

fn dag_vs_joint(mode: PoolMode, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = Tensor::randn([3, 5, 6], 1.0, rng);
    let p = PoolParams::simple(mode);
    let present = [true, false, true];
    let cfg = AggregationConfig { g_sp: p.clone(), g_ch: p.clone(), joint: false };
    let a = dag(&x, &cfg, &present)?;
    let b = pool_joint(&x, &p, &present)?;
    Ok(within(a.max_abs_diff(&b), 1e-12))
}

fn dag_mean_joint(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    dag_vs_joint(PoolMode::Mean, rng)
}

fn dag_max_joint(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    dag_vs_joint(PoolMode::Max, rng)
}

fn dag_permutation(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = Tensor::randn([4, 5, 6], 1.0, rng);
    let cfg = AggregationConfig {
        g_sp: PoolParams::abmil(AbmilParams::init(6, 3, 0.5, rng)),
        g_ch: PoolParams::abmil(AbmilParams::init(6, 3, 0.5, rng)),
        joint: false,
    };
    let perm = shuffled(4, rng);
    let a = dag(&x, &cfg, &[true; 4])?;
    let b = dag(&permute_grid(&x, &perm)?, &cfg, &[true; 4])?;
    Ok(within(a.max_abs_diff(&b), 1e-12))
}

fn abmil_simplex(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = AbmilParams::init(6, 3, 2.0, rng);
    let w = abmil_weights(&Tensor::randn([9, 6], 3.0, rng), &p)?;
    if w.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Ok((false, "weight outside [0, 1]".into()));
    }
    Ok(within((w.sum() - 1.0).abs(), 1e-12))
}

fn flops_counter(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut cases = 0;
    for c in 1..=3u64 {
        for n in 1..=4u64 {
            for d in [2, 4u64] {
                let l = 2u64;
                let u = |v: u64| v as usize;
                if counted_msa(u(c), u(n), u(d), u(l)) != flops_msa(c, n, d, l) {
                    return Ok((false, format!("msa mismatch at C={c} N={n} D={d}")));
                }
                for m in 0..=l {
                    if counted_dsa(u(c), u(n), u(d), u(l), u(m)) != flops_dsa(c, n, d, l, m)? {
                        return Ok((false, format!("dsa mismatch at C={c} N={n} D={d} m={m}")));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok((true, format!("{cases} configurations agree exactly")))
}

fn flops_single_channel(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let n: u64 = rng.random_range(1..200);
    let d: u64 = rng.random_range(1..512);
    let l: u64 = rng.random_range(1..16);
    let (a, b) = (flops_msa(1, n, d, l), flops_dsa(1, n, d, l, 0)?);
    Ok((a == b, format!("N={n} D={d} L={l}: {a} vs {b}")))
}

fn tape_gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = ModelConfig { c_max: 3, image_size: 4, patch_size: 2, ..small_config(&[2]) };
    let report = gradcheck(&cfg, rng.random(), &GradcheckOptions::default())?;
    let worst = report.max_rel_error();
    Ok((report.passed(1e-3), format!("max relative error {worst:.3e} (tol 1e-3)")))
}
