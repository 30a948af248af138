use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::train::loss_and_grads_with;
use crate::encoder::{forward_logits, param_group, ChannelBatch, DcVitModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Fault, Tensor};
use crate::training::cross_entropy;

/// Largest model [`gradcheck`] accepts.
pub const MAX_GRADCHECK_PARAMS: usize = 50_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Standard deviation of the re-randomized weights.
    pub weight_std: f64,
    pub batch_size: usize,
    /// Channels in the random batch (capped at `c_max`).
    pub channels: usize,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            weight_std: 0.5,
            batch_size: 2,
            channels: 3,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub elements: usize,
    /// `None` when the group is empty.
    pub max_rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().filter_map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// A model built from `config` with weights drawn at `opts.weight_std` (norm
/// scales around 1, α uniform in [0.2, 0.8]), plus a random labelled batch.
pub fn gradcheck_setup(config: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<(DcVitModel, ChannelBatch)> {
    let mut model = DcVitModel::new(config.clone(), seed)?;
    let n = model.num_params();
    if n > MAX_GRADCHECK_PARAMS {
        return Err(Error::Config(format!(
            "model has {n} parameters; gradcheck is limited to {MAX_GRADCHECK_PARAMS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    model.params.visit_mut(&mut |name, t| {
        *t = if name.ends_with("alpha") {
            Tensor::scalar(rng.random_range(0.2..0.8))
        } else if name.ends_with("gamma") {
            Tensor::randn(t.shape(), 0.2, &mut rng).map(|v| v + 1.0)
        } else {
            Tensor::randn(t.shape(), opts.weight_std, &mut rng)
        };
    });
    let c = opts.channels.clamp(1, config.c_max);
    let b = opts.batch_size.max(1);
    let images = Tensor::randn([b, c, config.image_size, config.image_size], 1.0, &mut rng);
    let labels = (0..b).map(|_| rng.random_range(0..config.num_classes)).collect();
    let batch = ChannelBatch::all_present(images, Some(labels))?;
    Ok((model, batch))
}

fn loss(model: &DcVitModel, batch: &ChannelBatch) -> Result<f64> {
    cross_entropy(&forward_logits(batch, model)?, batch.labels().expect("labelled batch"))
}

/// Compares the tape gradient of the cross-entropy loss with central
/// differences for every parameter element, grouped by
/// [`param_group`]. The `alpha` group is always reported.
pub fn gradcheck(config: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (mut model, batch) = gradcheck_setup(config, seed, opts)?;
    let (_, grads) = loss_and_grads_with(&model, &batch, opts.fault)?;
    let analytic: Vec<Tensor> = grads.leaves().into_iter().map(|(_, g)| g.clone()).collect();
    let names: Vec<String> = model.params.leaves().into_iter().map(|(n, _)| n).collect();

    let mut groups: BTreeMap<String, (usize, Option<f64>)> = BTreeMap::new();
    groups.insert("alpha".into(), (0, None));
    for (i, name) in names.iter().enumerate() {
        let len = analytic[i].len();
        let mut worst: Option<f64> = None;
        for j in 0..len {
            let orig = model.params.leaves_mut()[i].data()[j];
            model.params.leaves_mut()[i].data_mut()[j] = orig + opts.h;
            let up = loss(&model, &batch)?;
            model.params.leaves_mut()[i].data_mut()[j] = orig - opts.h;
            let down = loss(&model, &batch)?;
            model.params.leaves_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = Some(worst.map_or(rel, |w| w.max(rel)));
        }
        let entry = groups.entry(param_group(name).to_string()).or_insert((0, None));
        entry.0 += len;
        entry.1 = match (entry.1, worst) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
    Ok(GradcheckReport {
        groups: groups
            .into_iter()
            .map(|(group, (elements, max_rel_error))| GroupReport { group, elements, max_rel_error })
            .collect(),
    })
}
