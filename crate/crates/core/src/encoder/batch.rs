use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::numerics::Tensor;

/// Multi-channel images `B×C×H×W` with a per-sample channel-presence mask.
///
/// `channel_ids[c]` names the channel-embedding row used by channel slot `c`;
/// it defaults to `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBatch {
    images: Tensor,
    present: Vec<bool>,
    labels: Option<Vec<usize>>,
    channel_ids: Vec<usize>,
}

impl ChannelBatch {
    pub fn new(images: Tensor, present: Vec<bool>, labels: Option<Vec<usize>>) -> Result<Self> {
        let [b, c, h, w] = *images.shape() else {
            return Err(Error::invalid("batch", format!("expected B×C×H×W, got {:?}", images.shape())));
        };
        if h != w {
            return Err(Error::invalid("batch", format!("images must be square, got {h}×{w}")));
        }
        // Validates mask length and that every sample keeps a channel.
        TokenLayout::new(b, c, 1, present.clone())?;
        if let Some(l) = &labels {
            if l.len() != b {
                return Err(Error::invalid("batch", format!("{} labels for {b} samples", l.len())));
            }
        }
        Ok(Self {
            images,
            present,
            labels,
            channel_ids: (0..c).collect(),
        })
    }

    pub fn all_present(images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0) * images.shape().get(1).copied().unwrap_or(0);
        Self::new(images, vec![true; n], labels)
    }

    pub fn with_channel_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.channels() {
            return Err(Error::invalid(
                "batch",
                format!("{} channel ids for {} channels", ids.len(), self.channels()),
            ));
        }
        self.channel_ids = ids;
        Ok(self)
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn channel_ids(&self) -> &[usize] {
        &self.channel_ids
    }

    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn layout(&self, tokens: usize) -> Result<TokenLayout> {
        TokenLayout::new(self.batch_size(), self.channels(), tokens, self.present.clone())
    }

    /// Sample `i` as a `C×H×W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let s = &self.images.shape()[1..];
        let per: usize = s.iter().product();
        Tensor::new(s.to_vec(), self.images.data()[i * per..(i + 1) * per].to_vec()).expect("slice of valid batch")
    }

    /// The samples at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::invalid("batch", "empty selection"));
        }
        let shape = self.images.shape();
        let (c, per) = (shape[1], shape[1..].iter().product::<usize>());
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut present = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.batch_size() {
                return Err(Error::invalid("batch", format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            present.extend_from_slice(&self.present[i * c..(i + 1) * c]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok(Self {
            images: Tensor::new(out_shape, data)?,
            present,
            labels,
            channel_ids: self.channel_ids.clone(),
        })
    }

    /// Same samples with a different presence mask.
    pub fn with_present(&self, present: Vec<bool>) -> Result<Self> {
        let mut out = Self::new(self.images.clone(), present, self.labels.clone())?;
        out.channel_ids = self.channel_ids.clone();
        Ok(out)
    }

    /// Channels reordered so that slot `c` holds old channel `perm[c]`,
    /// together with its mask entry and id.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        let c = self.channels();
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("batch", "not a permutation of the channels"));
        }
        let shape = self.images.shape();
        let plane = shape[2] * shape[3];
        let mut data = Vec::with_capacity(self.images.len());
        let mut present = Vec::with_capacity(self.present.len());
        for b in 0..self.batch_size() {
            for &p in perm {
                let start = (b * c + p) * plane;
                data.extend_from_slice(&self.images.data()[start..start + plane]);
                present.push(self.present[b * c + p]);
            }
        }
        Ok(Self {
            images: Tensor::new(shape.to_vec(), data)?,
            present,
            labels: self.labels.clone(),
            channel_ids: perm.iter().map(|&p| self.channel_ids[p]).collect(),
        })
    }
}
