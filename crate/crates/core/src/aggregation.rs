//! Pooling functions and decoupled aggregation.
//!
//! Decoupled aggregation pools each channel's tokens to one vector with
//! `g_sp`, then pools those per-channel vectors with `g_ch`. Joint pooling
//! applies a single pooling function to every token at once.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::numerics::{RowGroups, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
    /// First row of the set.
    Cls,
    /// Attention-based multiple-instance pooling.
    Abmil,
}

impl PoolMode {
    pub const ALL: [PoolMode; 4] = [PoolMode::Mean, PoolMode::Max, PoolMode::Cls, PoolMode::Abmil];

    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Mean => "mean",
            PoolMode::Max => "max",
            PoolMode::Cls => "cls",
            PoolMode::Abmil => "abmil",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling mode {s:?} (expected mean|max|cls|abmil)")))
    }
}

/// ABMIL scoring weights: `score_i = uᵀ tanh(Vᵀ h_i)` with `v: D×D_a`,
/// `u: D_a×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AbmilParams<T = Tensor> {
    pub v: T,
    pub u: T,
}

impl<T> AbmilParams<T> {
    pub fn map<'a, U>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> AbmilParams<U> {
        AbmilParams {
            v: f(&format!("{name}.v"), &self.v),
            u: f(&format!("{name}.u"), &self.u),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{name}.v"), &mut self.v);
        f(&format!("{name}.u"), &mut self.u);
    }
}

impl AbmilParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            v: Tensor::trunc_normal([dim, hidden], std, rng),
            u: Tensor::trunc_normal([hidden, 1], std, rng),
        }
    }
}

/// A pooling function; `abmil` is `Some` exactly when `mode` is `Abmil`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams<T = Tensor> {
    pub mode: PoolMode,
    pub abmil: Option<AbmilParams<T>>,
}

impl<T> PoolParams<T> {
    pub fn map<'a, U>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> PoolParams<U> {
        PoolParams {
            mode: self.mode,
            abmil: self.abmil.as_ref().map(|a| a.map(name, f)),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        if let Some(a) = &mut self.abmil {
            a.visit_mut(name, f);
        }
    }
}

impl PoolParams<Tensor> {
    /// A parameter-free mode. Panics for `Abmil`; use [`PoolParams::abmil`].
    pub fn simple(mode: PoolMode) -> Self {
        assert!(mode != PoolMode::Abmil, "abmil pooling needs parameters");
        Self { mode, abmil: None }
    }

    pub fn abmil(params: AbmilParams) -> Self {
        Self {
            mode: PoolMode::Abmil,
            abmil: Some(params),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match (self.mode, &self.abmil) {
            (PoolMode::Abmil, Some(a)) => {
                let hidden = a.v.cols();
                if a.v.shape() != [dim, hidden] || a.u.shape() != [hidden, 1] {
                    return Err(Error::shape("abmil", a.v.shape(), a.u.shape()));
                }
                Ok(())
            }
            (PoolMode::Abmil, None) => Err(Error::invalid("pool", "abmil mode without parameters")),
            (_, Some(_)) => Err(Error::invalid("pool", "parameters given for a parameter-free mode")),
            (_, None) => Ok(()),
        }
    }
}

/// Both pooling stages of decoupled aggregation, or the joint-pooling
/// ablation when `joint` is set (then only `g_sp` is used).
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig<T = Tensor> {
    pub g_sp: PoolParams<T>,
    pub g_ch: PoolParams<T>,
    pub joint: bool,
}

// ---------------------------------------------------------------------------
// Tape-level pooling

/// ABMIL weights over each segment, as a column aligned with the rows of `x`.
pub fn abmil_weights_on_tape(tape: &mut Tape, x: Var, p: &AbmilParams<Var>, segs: RowGroups) -> Result<Var> {
    let hidden = tape.matmul(x, p.v)?;
    let act = tape.tanh(hidden)?;
    let scores = tape.matmul(act, p.u)?;
    tape.segment_softmax(scores, segs)
}

/// Pools every segment of rows of `x`; the result has one row per segment.
pub fn pool_on_tape(tape: &mut Tape, x: Var, p: &PoolParams<Var>, segs: RowGroups) -> Result<Var> {
    match p.mode {
        PoolMode::Mean => tape.segment_mean(x, segs),
        PoolMode::Max => tape.segment_max(x, segs),
        PoolMode::Cls => {
            if segs.iter().any(|s| s.is_empty()) {
                return Err(Error::invalid("pool", "empty segment"));
            }
            let first = Arc::new(segs.iter().map(|s| s[0]).collect());
            tape.gather_rows(x, first)
        }
        PoolMode::Abmil => {
            let a = p
                .abmil
                .as_ref()
                .ok_or_else(|| Error::invalid("pool", "abmil mode without parameters"))?;
            let w = abmil_weights_on_tape(tape, x, a, segs.clone())?;
            tape.segment_weighted_sum(x, w, segs)
        }
    }
}

/// Decoupled aggregation of token rows laid out per `layout`; `B×D`.
pub fn dag_on_tape(tape: &mut Tape, x: Var, cfg: &AggregationConfig<Var>, layout: &TokenLayout) -> Result<Var> {
    let per_channel = pool_on_tape(tape, x, &cfg.g_sp, layout.spatial_groups())?;
    pool_on_tape(tape, per_channel, &cfg.g_ch, layout.summary_groups())
}

/// Pools every present token of each sample as one set; `B×D`.
pub fn joint_on_tape(tape: &mut Tape, x: Var, p: &PoolParams<Var>, layout: &TokenLayout) -> Result<Var> {
    pool_on_tape(tape, x, p, layout.joint_groups())
}

/// Whichever of [`dag_on_tape`] / [`joint_on_tape`] `cfg.joint` selects.
pub fn aggregate_on_tape(tape: &mut Tape, x: Var, cfg: &AggregationConfig<Var>, layout: &TokenLayout) -> Result<Var> {
    if cfg.joint {
        joint_on_tape(tape, x, &cfg.g_sp, layout)
    } else {
        dag_on_tape(tape, x, cfg, layout)
    }
}

// ---------------------------------------------------------------------------
// Tensor-level entry points

fn pool_constants(tape: &mut Tape, p: &PoolParams) -> PoolParams<Var> {
    p.map("", &mut |_, t| tape.constant(t.clone()))
}

fn into_vector(t: &Tensor) -> Tensor {
    Tensor::new([t.len()], t.data().to_vec()).expect("non-empty")
}

/// Pools the rows of an `n×D` matrix to a `D` vector.
pub fn pool(x: &Tensor, p: &PoolParams) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::invalid("pool", format!("expected n×D, got {:?}", x.shape())));
    }
    p.validate(x.cols())?;
    let mut tape = Tape::inference();
    let params = pool_constants(&mut tape, p);
    let xv = tape.constant(x.clone());
    let out = pool_on_tape(&mut tape, xv, &params, Arc::new(vec![(0..x.rows()).collect()]))?;
    Ok(into_vector(tape.value(out)))
}

/// ABMIL weights of the rows of an `n×D` matrix.
pub fn abmil_weights(x: &Tensor, p: &AbmilParams) -> Result<Tensor> {
    PoolParams::abmil(p.clone()).validate(x.cols())?;
    let mut tape = Tape::inference();
    let params = p.map("", &mut |_, t| tape.constant(t.clone()));
    let xv = tape.constant(x.clone());
    let w = abmil_weights_on_tape(&mut tape, xv, &params, Arc::new(vec![(0..x.rows()).collect()]))?;
    Ok(into_vector(tape.value(w)))
}

fn grid_layout(op: &'static str, x: &Tensor, present: &[bool]) -> Result<TokenLayout> {
    let [c, n, _] = *x.shape() else {
        return Err(Error::invalid(op, format!("expected C×N×D, got {:?}", x.shape())));
    };
    if present.len() != c {
        return Err(Error::invalid(op, format!("mask length {} for {c} channels", present.len())));
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::invalid(op, "no channel is present"));
    }
    TokenLayout::new(1, c, n, present.to_vec())
}

fn run_grid(
    x: &Tensor,
    layout: &TokenLayout,
    body: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let rows = tape.constant(x.clone().reshape([layout.rows(), x.cols()])?);
    let out = body(&mut tape, rows)?;
    Ok(into_vector(tape.value(out)))
}

/// Spatial-then-channel pooling of a `C×N×D` grid over present channels.
pub fn dag(x: &Tensor, cfg: &AggregationConfig, present: &[bool]) -> Result<Tensor> {
    let layout = grid_layout("dag", x, present)?;
    cfg.g_sp.validate(x.cols())?;
    cfg.g_ch.validate(x.cols())?;
    run_grid(x, &layout, |tape, rows| {
        let params = AggregationConfig {
            g_sp: pool_constants(tape, &cfg.g_sp),
            g_ch: pool_constants(tape, &cfg.g_ch),
            joint: false,
        };
        dag_on_tape(tape, rows, &params, &layout)
    })
}

/// One pooling function over all present tokens of a `C×N×D` grid.
pub fn pool_joint(x: &Tensor, p: &PoolParams, present: &[bool]) -> Result<Tensor> {
    let layout = grid_layout("pool_joint", x, present)?;
    p.validate(x.cols())?;
    run_grid(x, &layout, |tape, rows| {
        let params = pool_constants(tape, p);
        joint_on_tape(tape, rows, &params, &layout)
    })
}
