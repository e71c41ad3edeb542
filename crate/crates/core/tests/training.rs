use std::collections::BTreeMap;
use std::time::Instant;

use sloth_core::embq::QueryInit;
use sloth_core::model::ParamGroup;
use sloth_core::trainer::{evaluate, loss_and_grads, train_stage, FreezeMask, ToyDataset};
use sloth_core::{Model, ModelConfig, Tensor};

fn snapshot(m: &Model) -> BTreeMap<String, Vec<u64>> {
    m.params()
        .iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                t.data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

fn overfit_model() -> Model {
    Model::new(ModelConfig {
        d_model: 16,
        d_ff: 32,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

#[test]
fn stage_one_moves_only_compressor_and_projector() {
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    let data = ToyDataset::generate(&m, 4, 1).unwrap();
    let before = snapshot(&m);
    train_stage(&mut m, &data, &FreezeMask::stage1(), 10, 1e-2).unwrap();
    let after = snapshot(&m);
    for (name, bits) in &before {
        let group = ParamGroup::of(name).unwrap();
        let moved = after[name] != *bits;
        match group {
            ParamGroup::Compressor | ParamGroup::Projector => {}
            _ => assert!(!moved, "{name} changed during stage 1"),
        }
    }
    assert!(after["proj.w"] != before["proj.w"]);
}

#[test]
fn stage_two_moves_every_group() {
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    let data = ToyDataset::generate(&m, 4, 2).unwrap();
    let before = snapshot(&m);
    train_stage(&mut m, &data, &FreezeMask::stage2(QueryInit::Dot), 3, 1e-2).unwrap();
    let after = snapshot(&m);
    for g in ParamGroup::ALL {
        let moved = before
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(g))
            .any(|(n, bits)| after[n] != *bits);
        assert!(moved, "{g:?} did not move");
    }
}

#[test]
fn fixed_dot_queries_stay_frozen() {
    let mut m = Model::new(ModelConfig {
        query_init: QueryInit::FixedDot,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let data = ToyDataset::generate(&m, 2, 3).unwrap();
    let before = m.params().get("queries").unwrap().clone();
    train_stage(
        &mut m,
        &data,
        &FreezeMask::stage2(QueryInit::FixedDot),
        3,
        1e-2,
    )
    .unwrap();
    assert_eq!(m.params().get("queries").unwrap(), &before);
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    let data = ToyDataset::generate(&m, 3, 4).unwrap();
    let losses = train_stage(&mut m, &data, &FreezeMask::stage2(QueryInit::Dot), 4, 0.0).unwrap();
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn query_embeddings_receive_gradient() {
    let m = Model::new(ModelConfig::tiny()).unwrap();
    let data = ToyDataset::generate(&m, 2, 5).unwrap();
    let (_, grads) =
        loss_and_grads(&m, &data.examples, &FreezeMask::stage2(QueryInit::Dot)).unwrap();
    let g: &Tensor = &grads["queries"];
    assert!(g.data().iter().any(|&x| x.abs() > 1e-12));
}

#[test]
fn eight_examples_overfit_within_500_steps() {
    let start = Instant::now();
    let mut m = overfit_model();
    let data = ToyDataset::generate(&m, 8, 7).unwrap();
    let losses = train_stage(
        &mut m,
        &data,
        &FreezeMask::stage2(QueryInit::Dot),
        500,
        1e-2,
    )
    .unwrap();
    let (final_loss, _) =
        loss_and_grads(&m, &data.examples, &FreezeMask::stage2(QueryInit::Dot)).unwrap();
    assert!(final_loss < 0.1, "final loss {final_loss}");

    let means: Vec<f64> = losses
        .chunks(50)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "50-step means rose: {means:?}");
    }
    assert_eq!(evaluate(&m, &data).unwrap(), 1.0);
    assert!(start.elapsed().as_secs() < 120);
}
