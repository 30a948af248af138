//! Seeded synthetic multi-channel classification tasks.
//!
//! Informative channels hold a 2-pixel-wide bar (horizontal, vertical,
//! diagonal or anti-diagonal) at a random offset plus Gaussian noise; every
//! other channel is pure noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::container::{save_container, Dtype};
use crate::encoder::ChannelBatch;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MOTIF_AMPLITUDE: f64 = 1.0;
const MAX_MOTIFS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the motif of the single informative channel.
    SingleChannel,
    /// Label is the XOR of the motifs (horizontal = 0, vertical = 1) of two
    /// informative channels.
    XorChannels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub informative_channels: Vec<usize>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::SingleChannel,
            channels: 3,
            image_size: 16,
            num_classes: 4,
            informative_channels: vec![0],
            noise_std: 0.25,
            seed: 0,
        }
    }
}

impl SynthTask {
    pub fn xor(channels: usize, informative: [usize; 2], seed: u64) -> Self {
        Self {
            kind: TaskKind::XorChannels,
            channels,
            num_classes: 2,
            informative_channels: informative.to_vec(),
            seed,
            ..Self::default()
        }
    }

    /// Distinct motifs per informative channel.
    pub fn motifs(&self) -> usize {
        match self.kind {
            TaskKind::SingleChannel => self.num_classes,
            TaskKind::XorChannels => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("task needs at least one channel".into());
        }
        if self.image_size < 4 {
            return bad(format!("image_size {} is too small (minimum 4)", self.image_size));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be finite and nonnegative", self.noise_std));
        }
        let want = match self.kind {
            TaskKind::SingleChannel => 1,
            TaskKind::XorChannels => 2,
        };
        let inf = &self.informative_channels;
        if inf.len() != want {
            return bad(format!("{:?} needs {want} informative channels, got {}", self.kind, inf.len()));
        }
        if inf.iter().any(|&c| c >= self.channels) || (want == 2 && inf[0] == inf[1]) {
            return bad(format!("informative channels {inf:?} must be distinct and below {}", self.channels));
        }
        match self.kind {
            TaskKind::SingleChannel if !(2..=MAX_MOTIFS).contains(&self.num_classes) => {
                bad(format!("single_channel supports 2..={MAX_MOTIFS} classes, got {}", self.num_classes))
            }
            TaskKind::XorChannels if self.num_classes != 2 => {
                bad(format!("xor_channels has exactly 2 classes, got {}", self.num_classes))
            }
            _ => Ok(()),
        }
    }

    /// Label from the motif ids of the informative channels.
    pub fn label(&self, motifs: &[usize]) -> usize {
        match self.kind {
            TaskKind::SingleChannel => motifs[0],
            TaskKind::XorChannels => motifs[0] ^ motifs[1],
        }
    }
}

/// Pixels covered by `motif` at `offset` on a `side × side` grid.
fn motif_covers(motif: usize, offset: i64, side: usize, y: usize, x: usize) -> bool {
    let (y, x, s) = (y as i64, x as i64, side as i64);
    let band = |v: i64| v == offset || v == offset + 1;
    match motif {
        0 => band(y),
        1 => band(x),
        2 => band(x - y),
        3 => band(x + y - (s - 1)),
        _ => unreachable!("motif id out of range"),
    }
}

/// Valid offsets of a motif.
fn offsets(motif: usize, side: usize) -> std::ops::RangeInclusive<i64> {
    let s = side as i64;
    match motif {
        0 | 1 => 0..=s - 2,
        _ => -(s / 4)..=s / 4 - 1,
    }
}

fn motif_plane(motif: usize, offset: i64, side: usize) -> Vec<f64> {
    let mut plane = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            if motif_covers(motif, offset, side, y, x) {
                plane[y * side + x] = MOTIF_AMPLITUDE;
            }
        }
    }
    plane
}

/// Nearest-motif classification of one plane by best cosine similarity over
/// all motifs and offsets.
pub fn nearest_motif(plane: &[f64], side: usize, motifs: usize) -> usize {
    let norm = plane.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut best = (f64::NEG_INFINITY, 0);
    for m in 0..motifs {
        for o in offsets(m, side) {
            let t = motif_plane(m, o, side);
            let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let score = t.iter().zip(plane).map(|(a, b)| a * b).sum::<f64>() / (tn * norm);
            if score > best.0 {
                best = (score, m);
            }
        }
    }
    best.1
}

/// Dataset plus the motif id of every informative channel of every sample.
pub(crate) fn generate(task: &SynthTask, n_samples: usize) -> Result<(ChannelBatch, Vec<Vec<usize>>)> {
    task.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let (c, side) = (task.channels, task.image_size);
    let plane = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let noise = Normal::new(0.0, task.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0.0; n_samples * c * plane];
    let mut labels = Vec::with_capacity(n_samples);
    let mut all_motifs = Vec::with_capacity(n_samples);
    for chunk in data.chunks_mut(c * plane) {
        let mut motifs = Vec::with_capacity(task.informative_channels.len());
        for &ch in &task.informative_channels {
            let m = rng.random_range(0..task.motifs());
            let o = rng.random_range(offsets(m, side));
            chunk[ch * plane..(ch + 1) * plane].copy_from_slice(&motif_plane(m, o, side));
            motifs.push(m);
        }
        for v in chunk.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        labels.push(task.label(&motifs));
        all_motifs.push(motifs);
    }
    let images = Tensor::new([n_samples, c, side, side], data)?;
    Ok((ChannelBatch::all_present(images, Some(labels))?, all_motifs))
}

/// `n_samples` labelled samples, fully determined by `task.seed`.
pub fn gen_dataset(task: &SynthTask, n_samples: usize) -> Result<ChannelBatch> {
    generate(task, n_samples).map(|(b, _)| b)
}

/// Train/validation/test partition. Empty partitions (zero fraction) are
/// `None`.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: ChannelBatch,
    pub val: Option<ChannelBatch>,
    pub test: Option<ChannelBatch>,
}

/// Seeded shuffle, then contiguous train/val/test blocks of
/// `⌊fraction·n⌋` samples with the remainder going to train.
pub fn split(batch: &ChannelBatch, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let n = batch.batch_size();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n_val = (fractions[1] * n as f64).floor() as usize;
    let n_test = (fractions[2] * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    for (name, size, f) in [("train", n_train, fractions[0]), ("val", n_val, fractions[1]), ("test", n_test, fractions[2])] {
        if size == 0 && (f > 0.0 || name == "train") {
            return Err(Error::Config(format!("{name} split is empty for {n} samples")));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |range: &[usize]| -> Result<Option<ChannelBatch>> {
        if range.is_empty() {
            Ok(None)
        } else {
            batch.select(range).map(Some)
        }
    };
    Ok(Split {
        train: batch.select(&idx[..n_train])?,
        val: part(&idx[n_train..n_train + n_val])?,
        test: part(&idx[n_train + n_val..])?,
    })
}

/// Writes images, presence mask and labels to a `DCVT` container with the
/// task as metadata.
pub fn dump_dataset(path: impl AsRef<Path>, task: &SynthTask, batch: &ChannelBatch) -> Result<()> {
    let present = Tensor::new(
        [batch.batch_size(), batch.channels()],
        batch.present().iter().map(|&p| f64::from(u8::from(p))).collect(),
    )?;
    let labels = batch
        .labels()
        .map(|l| Tensor::new([l.len()], l.iter().map(|&v| v as f64).collect()))
        .transpose()?;
    let mut tensors = vec![("images", batch.images()), ("present", &present)];
    if let Some(l) = &labels {
        tensors.push(("labels", l));
    }
    save_container(path, &tensors, &serde_json::json!({ "task": task }), Dtype::F32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn single(noise: f64) -> SynthTask {
        SynthTask { noise_std: noise, seed: 3, ..SynthTask::default() }
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let t = SynthTask::xor(3, [0, 2], 11);
        assert_eq!(gen_dataset(&t, 20).unwrap(), gen_dataset(&t, 20).unwrap());
        let other = SynthTask { seed: 12, ..t.clone() };
        assert_ne!(gen_dataset(&t, 20).unwrap(), gen_dataset(&other, 20).unwrap());
    }

    #[test]
    fn noiseless_single_channel_is_separable_by_nearest_motif() {
        let t = single(0.0);
        let b = gen_dataset(&t, 200).unwrap();
        let plane = 16 * 16;
        for i in 0..200 {
            let img = b.image(i);
            let ch = &img.data()[..plane];
            assert_eq!(nearest_motif(ch, 16, 4), b.labels().unwrap()[i]);
        }
    }

    #[test]
    fn motifs_are_distinguishable_under_default_noise() {
        let t = SynthTask::xor(3, [0, 1], 5);
        let (b, motifs) = generate(&t, 100).unwrap();
        let plane = 16 * 16;
        let hits = (0..100)
            .filter(|&i| nearest_motif(&b.image(i).data()[..plane], 16, 2) == motifs[i][0])
            .count();
        assert!(hits >= 97, "{hits}");
    }

    #[test]
    fn xor_labels_balanced_and_not_marginally_determined() {
        let t = SynthTask::xor(3, [0, 1], 7);
        let (b, motifs) = generate(&t, 1000).unwrap();
        let ones = b.labels().unwrap().iter().filter(|&&l| l == 1).count();
        assert!((ones as f64 / 1000.0 - 0.5).abs() <= 0.05, "{ones}");

        for which in 0..2 {
            let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
            for (m, &l) in motifs.iter().zip(b.labels().unwrap()) {
                *counts.entry((m[which], l)).or_default() += 1.0;
            }
            let mut h = 0.0;
            for m in 0..2 {
                let tot = counts.get(&(m, 0)).unwrap_or(&0.0) + counts.get(&(m, 1)).unwrap_or(&0.0);
                for l in 0..2 {
                    let c = counts.get(&(m, l)).copied().unwrap_or(0.0);
                    if c > 0.0 {
                        h -= c / 1000.0 * (c / tot).log2();
                    }
                }
            }
            assert!((h - 1.0).abs() < 0.1, "H = {h}");
        }
    }

    #[test]
    fn label_survives_fresh_noise_on_other_channels() {
        let t = SynthTask { noise_std: 0.0, ..SynthTask::xor(3, [0, 2], 9) };
        let b = gen_dataset(&t, 50).unwrap();
        let plane = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..50 {
            let mut img = b.image(i);
            img.data_mut()[plane..2 * plane].iter_mut().for_each(|v| *v = rng.random::<f64>());
            let m: Vec<usize> = [0, 2].iter().map(|&c| nearest_motif(&img.data()[c * plane..(c + 1) * plane], 16, 2)).collect();
            assert_eq!(t.label(&m), b.labels().unwrap()[i]);
        }
    }

    #[test]
    fn split_rules() {
        let b = gen_dataset(&single(0.25), 10).unwrap();
        let s = split(&b, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.train.batch_size(), 10);
        assert!(s.val.is_none() && s.test.is_none());

        let s = split(&b, [0.5, 0.25, 0.25], 4).unwrap();
        assert_eq!(s.train.batch_size(), 6);
        assert_eq!(s.val.as_ref().unwrap().batch_size(), 2);
        assert_eq!(s.test.as_ref().unwrap().batch_size(), 2);
        let again = split(&b, [0.5, 0.25, 0.25], 4).unwrap();
        assert_eq!(s.train, again.train);

        assert!(split(&b, [0.5, 0.6, 0.0], 0).is_err());
        assert!(split(&b, [0.95, 0.05, 0.0], 0).is_err());
    }

    #[test]
    fn config_validation() {
        for t in [
            SynthTask { num_classes: 3, ..SynthTask::xor(3, [0, 1], 0) },
            SynthTask::xor(3, [0, 0], 0),
            SynthTask::xor(2, [0, 2], 0),
            SynthTask { num_classes: 5, ..SynthTask::default() },
            SynthTask { informative_channels: vec![0, 1], ..SynthTask::default() },
        ] {
            assert!(matches!(t.validate(), Err(Error::Config(_))), "{t:?}");
        }
        assert!(gen_dataset(&SynthTask::default(), 0).is_err());
    }
}
