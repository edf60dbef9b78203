use gcnfabric::gcn::{normalize_adjacency, DenseMatrix, ExecOrder, GcnModel, SampledBatch};
use gcnfabric::graphprep::{CooEntry, CooMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two 10-node communities joined by one bridge; features are noisy class indicators.
fn twenty_node_task(seed: u64) -> (SampledBatch<f64>, GcnModel<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..20u32 {
        for j in 0..20u32 {
            if i != j && i / 10 == j / 10 && rng.gen_bool(0.4) {
                entries.push(CooEntry::new(i, j, 1.0));
            }
        }
    }
    entries.push(CooEntry::new(0, 10, 1.0));
    let a = normalize_adjacency(&CooMatrix::new(20, 20, entries).unwrap().symmetrize()).unwrap();
    let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
    let features = DenseMatrix::from_fn(20, 6, |i, j| {
        let signal = if j == labels[i] { 1.0 } else { 0.0 };
        signal + rng.gen_range(-0.3..0.3)
    });
    let batch = SampledBatch {
        adjacency: vec![a.clone(), a],
        features,
        labels,
    };
    let mut init = |r, c| DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(-0.5..0.5));
    let model = GcnModel::new(vec![init(6, 8), init(8, 2)]);
    (batch, model)
}

#[test]
fn sgd_decreases_loss() {
    for order in ExecOrder::ALL {
        let (batch, mut model) = twenty_node_task(17);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(model.train_step(&batch, &[order; 2], 0.01).unwrap().loss);
        }
        for w in losses[..11].windows(2) {
            assert!(w[1] < w[0], "{order}: {:?}", &losses[..11]);
        }
        assert!(losses[199] < losses[0], "{order}");
    }
}

#[test]
fn all_orders_train_identically() {
    let (batch, base) = twenty_node_task(3);
    let mut finals = Vec::new();
    for order in ExecOrder::ALL {
        let mut model = base.clone();
        for _ in 0..20 {
            model.train_step(&batch, &[order; 2], 0.05).unwrap();
        }
        finals.push(model.weights);
    }
    for w in &finals[1..] {
        for (a, b) in w.iter().zip(&finals[0]) {
            assert!(a.relative_diff(b) < 1e-9);
        }
    }
}

#[test]
fn mixed_orders_chain_through_a_transpose() {
    let (batch, model) = twenty_node_task(5);
    let reference = model.gradients(&batch, &[ExecOrder::CoAg; 2]).unwrap();
    let mixed = model.gradients(&batch, &[ExecOrder::AgCo, ExecOrder::OursCoAg]).unwrap();
    for (a, b) in reference.gradients.iter().zip(&mixed.gradients) {
        assert!(a.standard().relative_diff(&b.standard()) < 1e-10);
    }
    // transposed layers must sit above standard ones
    assert!(model.gradients(&batch, &[ExecOrder::OursAgCo, ExecOrder::CoAg]).is_err());
}

#[test]
fn single_precision_tracks_double() {
    let (batch, model) = twenty_node_task(9);
    let batch32 = SampledBatch {
        adjacency: batch.adjacency.clone(),
        features: batch.features.convert::<f32>(),
        labels: batch.labels.clone(),
    };
    let model32 = GcnModel::new(model.weights.iter().map(|w| w.convert::<f32>()).collect());
    let g64 = model.gradients(&batch, &[ExecOrder::OursAgCo; 2]).unwrap();
    let g32 = model32.gradients(&batch32, &[ExecOrder::OursAgCo; 2]).unwrap();
    for (a, b) in g64.gradients.iter().zip(&g32.gradients) {
        assert!(a.standard().relative_diff(&b.standard().convert::<f64>()) < 1e-4);
    }
}
