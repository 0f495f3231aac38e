use sehm_core::data::{generate_synthetic, Dataset, Motif, SyntheticSpec};
use sehm_core::explainer::ExplainerConfig;
use sehm_core::model::{ModelConfig, SehmModel};
use sehm_core::recurrent::CellKind;
use sehm_core::train::{train, ExplainerMode, TrainConfig};

fn tiny_data(samples: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        samples,
        length: 120,
        vars: 4,
        seed,
        region: [10, 60],
        gap_length: [5, 30],
        motifs: vec![Motif::plateau("plateau", [0, 1], 8, 5.0), Motif::ramp("ramp", [2, 3], 8, 5.0)],
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_model(cell: CellKind) -> SehmModel {
    SehmModel::new(ModelConfig {
        vars: 4,
        neighbor: 10,
        hidden: 16,
        cell,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn config(epochs: usize, mode: ExplainerMode) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        explainer_mode: mode,
        explainer_centers: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_tiny_dataset() {
    let data = tiny_data(32, 1);
    for cell in [CellKind::Gru, CellKind::Lstm] {
        let mut model = tiny_model(cell);
        let out = train(&mut model, &data, &config(150, ExplainerMode::Off), &ExplainerConfig::default()).unwrap();
        let last = out.history.epochs.last().unwrap().train_loss;
        assert!(last < 0.05, "{cell:?}: final training loss {last}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = tiny_data(48, 2);
    let expl = ExplainerConfig {
        steps: 20,
        perturbations: 4,
        ..ExplainerConfig::default()
    };
    let run = || {
        let mut model = tiny_model(CellKind::Gru);
        let out = train(&mut model, &data, &config(3, ExplainerMode::Joint), &expl).unwrap();
        (model, out)
    };
    let (ma, a) = run();
    let (mb, b) = run();
    assert_eq!(ma.params(), mb.params());
    assert_eq!(a.history, b.history);
    assert_eq!(a.explainer, b.explainer);
    assert_eq!(a.split, b.split);
    assert!(a.history.epochs.iter().all(|e| e.explainer_objective.is_some()));
}

#[test]
fn separate_mode_fits_the_explainer_afterwards() {
    let data = tiny_data(48, 3);
    let expl = ExplainerConfig {
        steps: 30,
        perturbations: 4,
        ..ExplainerConfig::default()
    };
    let mut model = tiny_model(CellKind::Lstm);
    let out = train(&mut model, &data, &config(2, ExplainerMode::Separate), &expl).unwrap();
    assert!(out.explainer.is_some());
    assert_eq!(out.history.explainer_objective.len(), 30);
    assert!(out.history.epochs.iter().all(|e| e.explainer_objective.is_none()));
}

#[test]
fn rejects_mismatched_or_invalid_configs() {
    let data = tiny_data(32, 4);
    let mut model = SehmModel::new(ModelConfig {
        vars: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(train(&mut model, &data, &config(1, ExplainerMode::Off), &ExplainerConfig::default()).is_err());
    let mut model = tiny_model(CellKind::Gru);
    let bad = TrainConfig {
        batch_size: 10,
        ..config(1, ExplainerMode::Off)
    };
    assert!(train(&mut model, &data, &bad, &ExplainerConfig::default()).is_err());
}
