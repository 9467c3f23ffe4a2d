//! Shared fixtures for the criterion benchmarks in `benches/`.

use pddm_core::data::{synth_heterogeneous, SynthConfig};
use pddm_core::{Dataset, Label, Model, TrainConfig};

/// A 16-class dataset and a freshly initialized model sized for benchmarking.
pub fn fixture(batch_size: usize) -> (Dataset, TrainConfig, Model) {
    let ds = synth_heterogeneous(&SynthConfig {
        n_classes: 16,
        samples_per_class: 32,
        dim: 16,
        ..Default::default()
    })
    .expect("benchmark dataset");
    let cfg = TrainConfig {
        batch_size,
        lr: 0.01,
        ..Default::default()
    };
    let model = Model::init(ds.dim(), &cfg).expect("benchmark model");
    (ds, cfg, model)
}

/// Embeddings and labels of the first `m` samples.
pub fn embedded_batch(ds: &Dataset, model: &Model, m: usize) -> (Vec<Vec<f64>>, Vec<Label>) {
    let idx: Vec<usize> = (0..m).map(|i| (i * 7) % ds.len()).collect();
    let x: Vec<&[f64]> = idx
        .iter()
        .map(|&i| ds.sample(i).features.as_slice())
        .collect();
    let f = model.embed_all(&x).expect("embedding");
    let y = idx.iter().map(|&i| ds.sample(i).label).collect();
    (f, y)
}
