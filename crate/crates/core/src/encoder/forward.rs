//! Forward pass. The `*_on_tape` functions build the computation on a
//! [`Tape`] so it can be differentiated; the plain functions evaluate it on
//! an inference tape.

use std::sync::Arc;

use super::batch::ChannelBatch;
use super::config::{BlockKind, ModelConfig, Residual};
use super::model::{DcVitModel, LayerParams, ModelParams};
use crate::aggregation::{self, AggregationConfig};
use crate::attention;
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::numerics::{Tape, Tensor, Var, LN_EPS};
use crate::params::{Linear, Norm};

/// Parameters as tape handles.
pub type ParamVars = ModelParams<Var>;

/// Places every parameter on `tape`, as gradient-requiring inputs when
/// `trainable` and as constants otherwise.
pub fn params_on_tape(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamVars {
    params.map(&mut |_, t| {
        if trainable {
            tape.input(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

/// Cuts `B×C×H×W` images into `P×P` patches; one row per `(b, c, n)` with
/// patches in row-major order, each flattened row-major.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, c, h, w] = *images.shape() else {
        return Err(Error::invalid("patchify", format!("expected B×C×H×W, got {:?}", images.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("image {h}×{w} is not divisible into {patch}×{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for plane in src.chunks(h * w).take(b * c) {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let start = (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&plane[start..start + patch]);
                }
            }
        }
    }
    Tensor::new([b * c * gh * gw, patch * patch], out)
}

fn mask_rows(tape: &mut Tape, x: Var, layout: &TokenLayout) -> Result<Var> {
    match layout.mask_factors() {
        Some(f) => tape.scale_rows(x, f),
        None => Ok(x),
    }
}

fn norm_on_tape(tape: &mut Tape, x: Var, n: &Option<Norm<Var>>) -> Result<Var> {
    match n {
        Some(n) => tape.layer_norm(x, n.gamma, n.beta, LN_EPS),
        None => Ok(x),
    }
}

fn linear_on_tape(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    tape.linear(x, l.weight, Some(l.bias))
}

/// Adds positional (and channel) embeddings to patch tokens laid out as
/// `(b, c, n)` rows, prepends the cls token per channel when configured, and
/// zeroes absent channels.
pub fn embeddings_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    tokens: Var,
    layout: &TokenLayout,
    channel_ids: &[usize],
) -> Result<(Var, TokenLayout)> {
    let (b, c, n) = (layout.batch(), layout.channels(), layout.tokens());
    if n != cfg.patches_per_channel() {
        return Err(Error::invalid(
            "add_embeddings",
            format!("{n} tokens per channel, expected {}", cfg.patches_per_channel()),
        ));
    }
    if channel_ids.len() != c {
        return Err(Error::invalid("add_embeddings", format!("{} channel ids for {c} channels", channel_ids.len())));
    }
    if let Some(&bad) = channel_ids.iter().find(|&&id| id >= cfg.c_max) {
        return Err(Error::invalid("add_embeddings", format!("channel id {bad} out of range for c_max {}", cfg.c_max)));
    }
    let rows = b * c * n;
    let pos_idx = Arc::new((0..rows).map(|r| r % n).collect());
    let pos = tape.gather_rows(p.pos_embed, pos_idx)?;
    let mut x = tape.add(tokens, pos)?;
    if let Some(table) = p.channel_embed {
        let ids = Arc::new((0..rows).map(|r| channel_ids[(r / n) % c]).collect());
        let ch = tape.gather_rows(table, ids)?;
        x = tape.add(x, ch)?;
    }
    let mut layout = layout.clone();
    if let Some(cls) = &p.cls {
        let cls_row = tape.add(cls.token, cls.pos)?;
        let all = tape.concat_rows(&[x, cls_row])?;
        let n1 = n + 1;
        let order = (0..b * c * n1)
            .map(|r| {
                let (bc, k) = (r / n1, r % n1);
                if k == 0 { rows } else { bc * n + k - 1 }
            })
            .collect();
        x = tape.gather_rows(all, Arc::new(order))?;
        layout = layout.with_tokens(n1);
    }
    let x = mask_rows(tape, x, &layout)?;
    Ok((x, layout))
}

/// Patch embedding plus embeddings for a whole batch; rows follow `layout`.
pub fn embed_on_tape(tape: &mut Tape, cfg: &ModelConfig, p: &ParamVars, batch: &ChannelBatch) -> Result<(Var, TokenLayout)> {
    if batch.channels() > cfg.c_max {
        return Err(Error::invalid(
            "encode",
            format!("{} channels exceed c_max {}", batch.channels(), cfg.c_max),
        ));
    }
    if batch.image_size() != cfg.image_size {
        return Err(Error::invalid(
            "encode",
            format!("image side {} does not match configured {}", batch.image_size(), cfg.image_size),
        ));
    }
    let patches = tape.constant(patchify(batch.images(), cfg.patch_size)?);
    let tokens = linear_on_tape(tape, patches, &p.patch)?;
    let layout = batch.layout(cfg.patches_per_channel())?;
    embeddings_on_tape(tape, cfg, p, tokens, &layout, batch.channel_ids())
}

/// One encoder block over token rows laid out per `layout`.
pub fn block_on_tape(tape: &mut Tape, cfg: &ModelConfig, lp: &LayerParams<Var>, x: Var, layout: &TokenLayout) -> Result<Var> {
    let h = norm_on_tape(tape, x, &lp.norm1)?;
    let a = match cfg.block_kind {
        BlockKind::Dcvit => attention::dsa_on_tape(tape, h, &lp.attn, layout)?,
        BlockKind::Mcvit => attention::msa_on_tape(tape, h, &lp.attn.attn, layout)?,
    };
    let u = tape.add(x, a)?;
    let v = norm_on_tape(tape, u, &lp.norm2)?;
    let hidden = linear_on_tape(tape, v, &lp.mlp.fc1)?;
    let hidden = tape.gelu(hidden)?;
    let m = linear_on_tape(tape, hidden, &lp.mlp.fc2)?;
    let out = match cfg.residual {
        Residual::Literal => tape.add(x, m)?,
        Residual::Canonical => tape.add(u, m)?,
    };
    mask_rows(tape, out, layout)
}

/// Embedding, every block, and the final norm.
pub fn encode_on_tape(tape: &mut Tape, cfg: &ModelConfig, p: &ParamVars, batch: &ChannelBatch) -> Result<(Var, TokenLayout)> {
    let (mut x, layout) = embed_on_tape(tape, cfg, p, batch)?;
    for lp in &p.layers {
        x = block_on_tape(tape, cfg, lp, x, &layout)?;
    }
    if p.norm.is_some() {
        x = norm_on_tape(tape, x, &p.norm)?;
        x = mask_rows(tape, x, &layout)?;
    }
    Ok((x, layout))
}

/// Pooled representation `B×D` of encoded tokens.
pub fn pool_on_tape(tape: &mut Tape, p: &ParamVars, x: Var, layout: &TokenLayout) -> Result<Var> {
    match &p.pool_ch {
        Some(g_ch) => {
            let cfg = AggregationConfig {
                g_sp: p.pool_sp.clone(),
                g_ch: g_ch.clone(),
                joint: false,
            };
            aggregation::dag_on_tape(tape, x, &cfg, layout)
        }
        None => aggregation::joint_on_tape(tape, x, &p.pool_sp, layout),
    }
}

/// Class logits `B×K`.
pub fn logits_on_tape(tape: &mut Tape, cfg: &ModelConfig, p: &ParamVars, batch: &ChannelBatch) -> Result<Var> {
    let (x, layout) = encode_on_tape(tape, cfg, p, batch)?;
    let z = pool_on_tape(tape, p, x, &layout)?;
    linear_on_tape(tape, z, &p.head)
}

// ---------------------------------------------------------------------------

fn inference(model: &DcVitModel) -> (Tape, ParamVars) {
    let mut tape = Tape::inference();
    let p = params_on_tape(&mut tape, &model.params, false);
    (tape, p)
}

/// Tokens `C×N×D` of one `C×H×W` image.
pub fn patch_embed(image: &Tensor, model: &DcVitModel) -> Result<Tensor> {
    let cfg = &model.config;
    let [c, h, w] = *image.shape() else {
        return Err(Error::invalid("patch_embed", format!("expected C×H×W, got {:?}", image.shape())));
    };
    let patches = patchify(&image.clone().reshape([1, c, h, w])?, cfg.patch_size)?;
    let n = patches.rows() / c;
    let mut tape = Tape::inference();
    let weight = tape.constant(model.params.patch.weight.clone());
    let bias = tape.constant(model.params.patch.bias.clone());
    let patches = tape.constant(patches);
    let out = tape.linear(patches, weight, Some(bias))?;
    tape.value(out).clone().reshape([c, n, cfg.dim])
}

/// Adds embeddings to `C×N×D` tokens of one sample; `C×N'×D` with
/// `N' = N + 1` when the cls token is enabled.
pub fn add_embeddings(tokens: &Tensor, model: &DcVitModel, channel_ids: &[usize]) -> Result<Tensor> {
    let [c, n, d] = *tokens.shape() else {
        return Err(Error::invalid("add_embeddings", format!("expected C×N×D, got {:?}", tokens.shape())));
    };
    let (mut tape, p) = inference(model);
    let x = tape.constant(tokens.clone().reshape([c * n, d])?);
    let layout = TokenLayout::all_present(1, c, n)?;
    let (out, layout) = embeddings_on_tape(&mut tape, &model.config, &p, x, &layout, channel_ids)?;
    tape.value(out).clone().reshape([c, layout.tokens(), d])
}

/// Block `layer` (0-based) of a decoupled model on `C×N×D` tokens.
pub fn dcvit_block(model: &DcVitModel, layer: usize, x: &Tensor, present: &[bool]) -> Result<Tensor> {
    let [c, n, d] = *x.shape() else {
        return Err(Error::invalid("dcvit_block", format!("expected C×N×D, got {:?}", x.shape())));
    };
    let cfg = ModelConfig { block_kind: BlockKind::Dcvit, ..model.config.clone() };
    run_block(model, &cfg, layer, x, TokenLayout::new(1, c, n, present.to_vec())?, [c, n, d])
}

/// Block `layer` (0-based) with joint attention on a flattened `(C·N)×D`
/// sequence.
pub fn mcvit_block(model: &DcVitModel, layer: usize, x: &Tensor) -> Result<Tensor> {
    let [s, d] = *x.shape() else {
        return Err(Error::invalid("mcvit_block", format!("expected (C·N)×D, got {:?}", x.shape())));
    };
    let cfg = ModelConfig { block_kind: BlockKind::Mcvit, ..model.config.clone() };
    run_block(model, &cfg, layer, x, TokenLayout::all_present(1, 1, s)?, [s, d])
}

fn run_block<const K: usize>(
    model: &DcVitModel,
    cfg: &ModelConfig,
    layer: usize,
    x: &Tensor,
    layout: TokenLayout,
    shape: [usize; K],
) -> Result<Tensor> {
    let lp = model
        .params
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid("block", format!("layer {layer} out of range")))?;
    let mut tape = Tape::inference();
    let lp = LayerParams {
        norm1: lp.norm1.as_ref().map(|n| n.map("", &mut |_, t| tape.constant(t.clone()))),
        attn: attention::DsaLayerParams {
            attn: lp.attn.attn.map("", &mut |_, t| tape.constant(t.clone())),
            alpha: lp.attn.alpha.as_ref().map(|a| tape.constant(a.clone())),
        },
        norm2: lp.norm2.as_ref().map(|n| n.map("", &mut |_, t| tape.constant(t.clone()))),
        mlp: super::model::Mlp {
            fc1: lp.mlp.fc1.map("", &mut |_, t| tape.constant(t.clone())),
            fc2: lp.mlp.fc2.map("", &mut |_, t| tape.constant(t.clone())),
        },
    };
    let xv = tape.constant(x.clone().reshape([layout.rows(), x.cols()])?);
    let out = block_on_tape(&mut tape, cfg, &lp, xv, &layout)?;
    tape.value(out).clone().reshape(shape)
}

/// Encoded tokens `B×C×N'×D`.
pub fn encode(batch: &ChannelBatch, model: &DcVitModel) -> Result<Tensor> {
    let (mut tape, p) = inference(model);
    let (x, layout) = encode_on_tape(&mut tape, &model.config, &p, batch)?;
    tape.value(x)
        .clone()
        .reshape([layout.batch(), layout.channels(), layout.tokens(), model.config.dim])
}

/// Class logits `B×K`.
pub fn forward_logits(batch: &ChannelBatch, model: &DcVitModel) -> Result<Tensor> {
    let (mut tape, p) = inference(model);
    let out = logits_on_tape(&mut tape, &model.config, &p, batch)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::PoolMode;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn tiny() -> ModelConfig {
        ModelConfig {
            c_max: 4,
            image_size: 4,
            patch_size: 2,
            dim: 8,
            depth: 2,
            heads: 2,
            channel_layers: BTreeSet::from([2]),
            mlp_ratio: 2.0,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    fn randomized(cfg: ModelConfig, seed: u64) -> DcVitModel {
        let mut m = DcVitModel::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.params.visit_mut(&mut |name, t| {
            if !name.ends_with("alpha") {
                *t = Tensor::randn(t.shape(), 0.4, &mut rng);
            }
        });
        m
    }

    fn images(b: usize, c: usize, side: usize, seed: u64) -> Tensor {
        Tensor::randn([b, c, side, side], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn patchify_row_major() {
        let img = Tensor::new([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patch_embed_cases() {
        let cfg = ModelConfig { image_size: 2, ..tiny() };
        let mut m = randomized(cfg, 1);
        let img = Tensor::randn([1, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let out = patch_embed(&img, &m).unwrap();
        let manual = img.clone().reshape([1, 4]).unwrap();
        let expect = crate::numerics::linear(&manual, &m.params.patch.weight, &m.params.patch.bias).unwrap();
        assert!(out.reshape([1, 8]).unwrap().max_abs_diff(&expect) < 1e-14);

        m.params.patch.bias = Tensor::zeros([8]);
        let zero = patch_embed(&Tensor::zeros([3, 2, 2]), &m).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let m = randomized(tiny(), 3);
        let plane = Tensor::randn([1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let dup = Tensor::new([2, 4, 4], [plane.data(), plane.data()].concat()).unwrap();
        let out = patch_embed(&dup, &m).unwrap();
        assert_eq!(out.data()[..32], out.data()[32..]);
    }

    #[test]
    fn add_embeddings_cases() {
        let cfg = ModelConfig { use_channel_embed: false, ..tiny() };
        let m = randomized(cfg.clone(), 5);
        let tok = Tensor::randn([2, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(add_embeddings(&tok, &m, &[0, 1]).unwrap(), add_embeddings(&tok, &m, &[3, 2]).unwrap());

        let mut zeroed = randomized(tiny(), 7);
        zeroed.params.pos_embed = Tensor::zeros([4, 8]);
        zeroed.params.channel_embed = Some(Tensor::zeros([4, 8]));
        assert_eq!(add_embeddings(&tok, &zeroed, &[0, 1]).unwrap(), tok);
        assert!(add_embeddings(&tok, &zeroed, &[0, 4]).is_err());

        let m = randomized(ModelConfig { use_cls_per_channel: true, ..tiny() }, 8);
        let out = add_embeddings(&tok, &m, &[0, 1]).unwrap();
        assert_eq!(out.shape(), &[2, 5, 8]);
        assert_eq!(out.data()[..8], out.data()[40..48]);
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        let mut m = randomized(tiny(), 9);
        m.params.layers[1].attn.alpha = Some(Tensor::scalar(0.0));
        m.params.visit_mut(&mut |name, t| {
            if name.starts_with("layers.") && !name.contains("norm") {
                *t = Tensor::zeros(t.shape());
            }
        });
        let x = Tensor::randn([3, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        for l in 0..2 {
            assert_eq!(dcvit_block(&m, l, &x, &[true; 3]).unwrap(), x);
            let flat = x.clone().reshape([12, 8]).unwrap();
            assert_eq!(mcvit_block(&m, l, &flat).unwrap(), flat);
        }
    }

    #[test]
    fn single_channel_mcvit_block_matches_dcvit_block() {
        let m = randomized(ModelConfig { channel_layers: BTreeSet::new(), ..tiny() }, 11);
        let x = Tensor::randn([1, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let a = dcvit_block(&m, 0, &x, &[true]).unwrap();
        let b = mcvit_block(&m, 0, &x.clone().reshape([4, 8]).unwrap()).unwrap();
        assert!(a.reshape([4, 8]).unwrap().max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn depth_zero_returns_embedded_tokens() {
        let cfg = ModelConfig { depth: 0, channel_layers: BTreeSet::new(), use_norm: false, ..tiny() };
        let m = randomized(cfg, 13);
        let batch = ChannelBatch::all_present(images(1, 2, 4, 14), None).unwrap();
        let tokens = patch_embed(&batch.image(0), &m).unwrap();
        let embedded = add_embeddings(&tokens, &m, &[0, 1]).unwrap();
        let enc = encode(&batch, &m).unwrap();
        assert!(enc.reshape([2, 4, 8]).unwrap().max_abs_diff(&embedded) < 1e-14);
    }

    #[test]
    fn identical_samples_give_identical_logits_and_encode_is_deterministic() {
        let m = randomized(tiny(), 15);
        let one = images(1, 3, 4, 16);
        let two = Tensor::new([2, 3, 4, 4], [one.data(), one.data()].concat()).unwrap();
        let batch = ChannelBatch::all_present(two, None).unwrap();
        let logits = forward_logits(&batch, &m).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(encode(&batch, &m).unwrap(), encode(&batch, &m).unwrap());
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut m = randomized(tiny(), 17);
        m.params.head.weight = Tensor::zeros([8, 3]);
        m.params.head.bias = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let batch = ChannelBatch::all_present(images(2, 3, 4, 18), None).unwrap();
        let logits = forward_logits(&batch, &m).unwrap();
        assert_eq!(logits.row(0), &[0.5, -1.0, 2.0]);
        assert_eq!(logits.row(1), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn absent_channels_are_zero_and_irrelevant() {
        let m = randomized(tiny(), 19);
        let imgs = images(1, 3, 4, 20);
        let present = vec![true, false, true];
        let a = ChannelBatch::new(imgs.clone(), present.clone(), None).unwrap();
        let mut other = imgs.clone();
        other.data_mut()[16..32].iter_mut().for_each(|v| *v = 7.0);
        let b = ChannelBatch::new(other, present, None).unwrap();
        let ea = encode(&a, &m).unwrap();
        assert_eq!(ea.data()[32..64].iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert_eq!(forward_logits(&a, &m).unwrap(), forward_logits(&b, &m).unwrap());
    }

    #[test]
    fn cls_pooling_and_joint_pooling_run() {
        for cfg in [
            ModelConfig { use_cls_per_channel: true, g_sp: PoolMode::Cls, ..tiny() },
            ModelConfig { joint_pooling: true, g_sp: PoolMode::Max, ..tiny() },
            ModelConfig { residual: Residual::Canonical, use_norm: false, ..tiny() },
        ] {
            let m = randomized(cfg, 21);
            let batch = ChannelBatch::all_present(images(2, 3, 4, 22), None).unwrap();
            assert_eq!(forward_logits(&batch, &m).unwrap().shape(), &[2, 3]);
        }
    }

    #[test]
    fn too_many_channels_rejected() {
        let m = randomized(tiny(), 23);
        let batch = ChannelBatch::all_present(images(1, 5, 4, 24), None).unwrap();
        assert!(forward_logits(&batch, &m).is_err());
    }
}
