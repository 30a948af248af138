use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flops::{flops_dsa, flops_msa};
use crate::encoder::{forward_logits, BlockKind, ChannelBatch, DcVitModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Dsa,
    Msa,
}

impl From<BlockKind> for BenchMode {
    fn from(k: BlockKind) -> Self {
        match k {
            BlockKind::Dcvit => BenchMode::Dsa,
            BlockKind::Mcvit => BenchMode::Msa,
        }
    }
}

/// One timed configuration. Serializes to the CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub mode: BenchMode,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub m: usize,
    pub analytic_flops: u64,
    /// Median forward time over `repeats` runs.
    pub wall_time_s: f64,
    pub repeats: usize,
    /// Whether matrix products could use several threads.
    #[serde(skip)]
    pub parallel: bool,
}

pub const CSV_HEADER: &str = "mode,C,N,D,L,m,analytic_flops,wall_time_s,repeats";

/// Analytic attention FLOPs of `cfg` with `c_max` channels present.
pub fn analytic_flops(cfg: &ModelConfig) -> Result<u64> {
    let (c, n, d, l) = (
        cfg.c_max as u64,
        cfg.tokens_per_channel() as u64,
        cfg.dim as u64,
        cfg.depth as u64,
    );
    match cfg.block_kind {
        BlockKind::Dcvit => flops_dsa(c, n, d, l, cfg.alpha_count() as u64),
        BlockKind::Mcvit => Ok(flops_msa(c, n, d, l)),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 { xs[k / 2] } else { 0.5 * (xs[k / 2 - 1] + xs[k / 2]) }
}

/// Median wall time of a single-sample forward pass through a random model
/// with all `c_max` channels present. One warm-up run is discarded. Runs on
/// one thread unless `parallel`.
pub fn bench_forward(cfg: &ModelConfig, repeats: usize, seed: u64, parallel: bool) -> Result<BenchRecord> {
    if repeats < 3 {
        return Err(Error::Config(format!("repeats must be at least 3, got {repeats}")));
    }
    let model = DcVitModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let images = Tensor::randn([1, cfg.c_max, cfg.image_size, cfg.image_size], 1.0, &mut rng);
    let batch = ChannelBatch::all_present(images, None)?;
    let run = || -> Result<Vec<f64>> {
        forward_logits(&batch, &model)?;
        (0..repeats)
            .map(|_| {
                let t = Instant::now();
                forward_logits(&batch, &model)?;
                Ok(t.elapsed().as_secs_f64())
            })
            .collect()
    };
    let times = if parallel {
        run()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::invalid("bench", e.to_string()))?;
        pool.install(run)?
    };
    Ok(BenchRecord {
        mode: cfg.block_kind.into(),
        c: cfg.c_max,
        n: cfg.tokens_per_channel(),
        d: cfg.dim,
        l: cfg.depth,
        m: cfg.alpha_count(),
        analytic_flops: analytic_flops(cfg)?,
        wall_time_s: median(times),
        repeats,
        parallel,
    })
}

/// Channel sweep over both modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSweep {
    #[serde(rename = "C_list", alias = "c_list")]
    pub c_list: Vec<usize>,
    /// Tokens per channel; must be a perfect square.
    #[serde(rename = "N", alias = "n")]
    pub n: usize,
    #[serde(rename = "D", alias = "d")]
    pub d: usize,
    #[serde(rename = "L", alias = "l")]
    pub l: usize,
    /// 1-based channel-attention layers.
    #[serde(rename = "M", alias = "m")]
    pub m: BTreeSet<usize>,
    pub heads: usize,
    pub patch_size: usize,
    pub repeats: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for BenchSweep {
    fn default() -> Self {
        Self {
            c_list: vec![2, 4, 8, 16],
            n: 64,
            d: 64,
            l: 4,
            m: BTreeSet::from([1]),
            heads: 4,
            patch_size: 4,
            repeats: 5,
            seed: 0,
            parallel: false,
        }
    }
}

impl BenchSweep {
    /// Model configuration for one point of the sweep.
    pub fn model_config(&self, c: usize, mode: BenchMode) -> Result<ModelConfig> {
        let side = (self.n as f64).sqrt().round() as usize;
        if side * side != self.n || self.n == 0 {
            return Err(Error::Config(format!("N = {} is not a perfect square", self.n)));
        }
        if c == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let cfg = ModelConfig {
            c_max: c,
            image_size: side * self.patch_size,
            patch_size: self.patch_size,
            dim: self.d,
            depth: self.l,
            heads: self.heads,
            channel_layers: self.m.clone(),
            block_kind: match mode {
                BenchMode::Dsa => BlockKind::Dcvit,
                BenchMode::Msa => BlockKind::Mcvit,
            },
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Records for every `C` in both modes, DSA first.
    pub fn run(&self) -> Result<Vec<BenchRecord>> {
        if self.c_list.is_empty() {
            return Err(Error::Config("C_list is empty".into()));
        }
        let mut out = Vec::new();
        for mode in [BenchMode::Dsa, BenchMode::Msa] {
            for &c in &self.c_list {
                out.push(bench_forward(&self.model_config(c, mode)?, self.repeats, self.seed, self.parallel)?);
            }
        }
        Ok(out)
    }
}

pub fn write_bench_csv<W: Write>(w: W, records: &[BenchRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    if records.is_empty() {
        csv.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
