use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};

use super::TrainConfig;

/// Indices into a dataset plus their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `batch_size / min_per_class` classes, `min_per_class` samples from
/// each, then tops the batch up with further samples from the same classes.
/// Classes smaller than `min_per_class` are never drawn.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let k = cfg.min_per_class;
    let eligible: Vec<(&Label, &Vec<usize>)> = ds
        .classes()
        .iter()
        .filter(|(_, idx)| idx.len() >= k)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!("no class has at least {k} samples")));
    }
    let n_classes = (cfg.batch_size / k).max(1).min(eligible.len());
    let chosen: Vec<&(&Label, &Vec<usize>)> = eligible.choose_multiple(rng, n_classes).collect();

    let mut indices = Vec::with_capacity(cfg.batch_size);
    let mut pool = Vec::new();
    for (_, members) in &chosen {
        let mut shuffled = (*members).clone();
        shuffled.shuffle(rng);
        indices.extend_from_slice(&shuffled[..k]);
        pool.extend_from_slice(&shuffled[k..]);
    }
    let remainder = cfg.batch_size.saturating_sub(indices.len()).min(pool.len());
    if remainder > 0 {
        let (extra, _) = pool.partial_shuffle(rng, remainder);
        indices.extend_from_slice(extra);
    }
    let labels = indices.iter().map(|&i| ds.sample(i).label).collect();
    Ok(Batch { indices, labels })
}
