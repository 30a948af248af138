use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::aggregation::{AbmilParams, PoolMode, PoolParams};
use crate::attention::{AttentionParams, DsaLayerParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{Linear, Norm};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = Tensor> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Shared per-channel cls token and its learned position.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsParams<T = Tensor> {
    pub token: T,
    pub pos: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub norm1: Option<Norm<T>>,
    pub attn: DsaLayerParams<T>,
    pub norm2: Option<Norm<T>>,
    pub mlp: Mlp<T>,
}

/// Every learnable tensor of the model, generic over the leaf type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `P² × D`, shared by all channels.
    pub patch: Linear<T>,
    pub pos_embed: T,
    pub channel_embed: Option<T>,
    pub cls: Option<ClsParams<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub norm: Option<Norm<T>>,
    pub pool_sp: PoolParams<T>,
    /// Absent under joint pooling.
    pub pool_ch: Option<PoolParams<T>>,
    pub head: Linear<T>,
}

fn map_opt<'a, T, U>(x: &'a Option<T>, g: impl FnOnce(&'a T) -> U) -> Option<U> {
    x.as_ref().map(g)
}

impl<T> ModelParams<T> {
    /// Applies `f` to every leaf with its dotted name, in a fixed order.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            patch: self.patch.map("patch", f),
            pos_embed: f("pos_embed", &self.pos_embed),
            channel_embed: map_opt(&self.channel_embed, |t| f("channel_embed", t)),
            cls: map_opt(&self.cls, |c| ClsParams {
                token: f("cls.token", &c.token),
                pos: f("cls.pos", &c.pos),
            }),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = format!("layers.{i}");
                    LayerParams {
                        norm1: map_opt(&l.norm1, |n| n.map(&format!("{p}.norm1"), f)),
                        attn: DsaLayerParams {
                            attn: l.attn.attn.map(&format!("{p}.attn"), f),
                            alpha: map_opt(&l.attn.alpha, |a| f(&format!("{p}.alpha"), a)),
                        },
                        norm2: map_opt(&l.norm2, |n| n.map(&format!("{p}.norm2"), f)),
                        mlp: Mlp {
                            fc1: l.mlp.fc1.map(&format!("{p}.mlp.fc1"), f),
                            fc2: l.mlp.fc2.map(&format!("{p}.mlp.fc2"), f),
                        },
                    }
                })
                .collect(),
            norm: map_opt(&self.norm, |n| n.map("norm", f)),
            pool_sp: self.pool_sp.map("pool_sp", f),
            pool_ch: map_opt(&self.pool_ch, |p| p.map("pool_ch", f)),
            head: self.head.map("head", f),
        }
    }

    /// Same order as [`map`](Self::map).
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut T)) {
        self.patch.visit_mut("patch", f);
        f("pos_embed", &mut self.pos_embed);
        if let Some(t) = &mut self.channel_embed {
            f("channel_embed", t);
        }
        if let Some(c) = &mut self.cls {
            f("cls.token", &mut c.token);
            f("cls.pos", &mut c.pos);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            if let Some(n) = &mut l.norm1 {
                n.visit_mut(&format!("{p}.norm1"), f);
            }
            l.attn.attn.visit_mut(&format!("{p}.attn"), f);
            if let Some(a) = &mut l.attn.alpha {
                f(&format!("{p}.alpha"), a);
            }
            if let Some(n) = &mut l.norm2 {
                n.visit_mut(&format!("{p}.norm2"), f);
            }
            l.mlp.fc1.visit_mut(&format!("{p}.mlp.fc1"), f);
            l.mlp.fc2.visit_mut(&format!("{p}.mlp.fc2"), f);
        }
        if let Some(n) = &mut self.norm {
            n.visit_mut("norm", f);
        }
        self.pool_sp.visit_mut("pool_sp", f);
        if let Some(p) = &mut self.pool_ch {
            p.visit_mut("pool_ch", f);
        }
        self.head.visit_mut("head", f);
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&str, &'a T)) {
        self.map(&mut |n, t| f(n, t));
    }

    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.for_each(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    /// Leaves combined pairwise with those of `other` (same structure).
    pub fn zip_map<U, V>(&self, other: &ModelParams<U>, f: &mut impl FnMut(&str, &T, &U) -> V) -> ModelParams<V> {
        let mut rhs = other.leaves().into_iter().map(|(_, u)| u);
        self.map(&mut |name, t| f(name, t, rhs.next().expect("same structure")))
    }

    /// α of every layer that has one, keyed by 1-based layer index.
    pub fn alphas(&self) -> BTreeMap<usize, &T> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.attn.alpha.as_ref().map(|a| (i + 1, a)))
            .collect()
    }
}

/// Report bucket for a parameter name: `patch`, `pos_embed`, `channel_embed`,
/// `cls`, `attn`, `alpha`, `norm`, `mlp`, `pool_sp`, `pool_ch` or `head`.
pub fn param_group(name: &str) -> &str {
    let rest = match name.strip_prefix("layers.") {
        Some(r) => r.split_once('.').map_or(r, |(_, tail)| tail),
        None => name,
    };
    let head = rest.split('.').next().unwrap_or(rest);
    match head {
        "norm1" | "norm2" => "norm",
        other => other,
    }
}

fn pool_init(mode: PoolMode, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> PoolParams {
    match mode {
        PoolMode::Abmil => PoolParams::abmil(AbmilParams::init(dim, hidden, INIT_STD, rng)),
        m => PoolParams::simple(m),
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DcVitModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl DcVitModel {
    /// Truncated-normal (std 0.02) weights and embeddings, zero biases,
    /// identity norms, α = `alpha_init`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let tn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::trunc_normal(shape, INIT_STD, rng);
        let lin = |d_in: usize, d_out: usize, rng: &mut ChaCha8Rng| Linear {
            weight: tn(&[d_in, d_out], rng),
            bias: Tensor::zeros([d_out]),
        };
        let norm = || config.use_norm.then(|| Norm::identity(d));
        let p2 = config.patch_size * config.patch_size;
        let patch = lin(p2, d, &mut rng);
        let pos_embed = tn(&[config.patches_per_channel(), d], &mut rng);
        let channel_embed = config.use_channel_embed.then(|| tn(&[config.c_max, d], &mut rng));
        let cls = config.use_cls_per_channel.then(|| ClsParams {
            token: tn(&[1, d], &mut rng),
            pos: tn(&[1, d], &mut rng),
        });
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let attn = AttentionParams::init(d, config.heads, INIT_STD, &mut rng)?;
            let attn = if config.has_channel_attention(l) {
                DsaLayerParams::with_alpha(attn, config.alpha_init)
            } else {
                DsaLayerParams::spatial_only(attn)
            };
            let hidden = config.mlp_hidden();
            layers.push(LayerParams {
                norm1: norm(),
                attn,
                norm2: norm(),
                mlp: Mlp {
                    fc1: lin(d, hidden, &mut rng),
                    fc2: lin(hidden, d, &mut rng),
                },
            });
        }
        let pool_sp = pool_init(config.g_sp, d, config.abmil_hidden(), &mut rng);
        let pool_ch = (!config.joint_pooling).then(|| pool_init(config.g_ch, d, config.abmil_hidden(), &mut rng));
        let head = lin(d, config.num_classes, &mut rng);
        Ok(Self {
            params: ModelParams {
                patch,
                pos_embed,
                channel_embed,
                cls,
                layers,
                norm: norm(),
                pool_sp,
                pool_ch,
                head,
            },
            config,
        })
    }

    /// Replaces every parameter with the tensor of the same name from
    /// `tensors`, which must match the configuration exactly.
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut err = None;
        model.params.visit_mut(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            match tensors.remove(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    err = Some(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.params.leaves()
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.params.for_each(&mut |_, t| n += t.len());
        n
    }

    pub fn alphas(&self) -> BTreeMap<usize, f64> {
        self.params.alphas().into_iter().map(|(l, a)| (l, a.item())).collect()
    }

    /// Rounds every parameter to `f32` precision.
    pub fn snap_to_f32(&mut self) {
        self.params.visit_mut(&mut |_, t| *t = t.to_f32_precision());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::config::BlockKind;
    use std::collections::BTreeSet;

    fn tiny() -> ModelConfig {
        ModelConfig {
            c_max: 3,
            image_size: 4,
            patch_size: 2,
            dim: 8,
            depth: 2,
            heads: 2,
            channel_layers: BTreeSet::from([2]),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn alpha_count_follows_block_kind() {
        let m = DcVitModel::new(tiny(), 0).unwrap();
        assert_eq!(m.alphas(), BTreeMap::from([(2, 0.1)]));
        let m = DcVitModel::new(ModelConfig { block_kind: BlockKind::Mcvit, ..tiny() }, 0).unwrap();
        assert!(m.alphas().is_empty());
    }

    #[test]
    fn names_are_unique_and_grouped() {
        let m = DcVitModel::new(tiny(), 0).unwrap();
        let names: Vec<_> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        let unique: BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"layers.1.alpha".to_string()));
        assert_eq!(param_group("layers.1.alpha"), "alpha");
        assert_eq!(param_group("layers.0.attn.q.weight"), "attn");
        assert_eq!(param_group("layers.0.norm2.beta"), "norm");
        assert_eq!(param_group("pool_sp.v"), "pool_sp");
        assert_eq!(param_group("head.bias"), "head");
    }

    #[test]
    fn from_named_round_trip_and_errors() {
        let m = DcVitModel::new(tiny(), 3).unwrap();
        let named: BTreeMap<_, _> = m.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(DcVitModel::from_named(tiny(), named.clone()).unwrap(), m);

        let mut missing = named.clone();
        missing.remove("head.bias");
        assert!(matches!(DcVitModel::from_named(tiny(), missing), Err(Error::Format(_))));
        let mut extra = named.clone();
        extra.insert("bogus".into(), Tensor::scalar(1.0));
        assert!(DcVitModel::from_named(tiny(), extra).is_err());
        let mut wrong = named;
        wrong.insert("head.bias".into(), Tensor::zeros([7]));
        assert!(DcVitModel::from_named(tiny(), wrong).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(DcVitModel::new(tiny(), 5).unwrap(), DcVitModel::new(tiny(), 5).unwrap());
        assert_ne!(DcVitModel::new(tiny(), 5).unwrap(), DcVitModel::new(tiny(), 6).unwrap());
    }

    #[test]
    fn zip_map_pairs_matching_leaves() {
        let a = DcVitModel::new(tiny(), 1).unwrap();
        let b = DcVitModel::new(tiny(), 2).unwrap();
        let diff = a.params.zip_map(&b.params, &mut |_, x, y| x.sub(y).unwrap());
        let mut ok = true;
        diff.for_each(&mut |n, d| {
            let (_, x) = a.named_tensors().into_iter().find(|(m, _)| m == n).unwrap();
            let (_, y) = b.named_tensors().into_iter().find(|(m, _)| m == n).unwrap();
            ok &= d.max_abs_diff(&x.sub(y).unwrap()) == 0.0;
        });
        assert!(ok);
    }
}
