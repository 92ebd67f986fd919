use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simvae::data::{split_dataset, CorpusSpec, Dataset};
use simvae::model::ModelConfig;
use simvae::sweep::*;
use simvae::training::HyperParams;

fn two_pass(mus: &[Vec<f64>]) -> f64 {
    let n = mus.len() as f64;
    let d = mus[0].len();
    let c: Vec<f64> = (0..d).map(|k| mus.iter().map(|m| m[k]).sum::<f64>() / n).collect();
    mus.iter()
        .map(|m| m.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

#[test]
fn dispersion_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mus: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    assert!((dispersion(&mus).unwrap().d_mu - two_pass(&mus)).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn dispersion_invariances(
        mus in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..30),
        shift in prop::collection::vec(-100.0f64..100.0, 4),
        a in -4.0f64..4.0,
    ) {
        let base = dispersion(&mus).unwrap().d_mu;
        prop_assert!(base >= 0.0);
        let moved: Vec<Vec<f64>> = mus.iter().map(|m| m.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        prop_assert!((dispersion(&moved).unwrap().d_mu - base).abs() <= 1e-12 * (1.0 + 100.0 * base.max(1.0)));
        let scaled: Vec<Vec<f64>> = mus.iter().map(|m| m.iter().map(|x| a * x).collect()).collect();
        prop_assert!((dispersion(&scaled).unwrap().d_mu - a.abs() * base).abs() <= 1e-12 * (1.0 + base));
        let mut rev = mus.clone();
        rev.reverse();
        prop_assert!((dispersion(&rev).unwrap().d_mu - base).abs() <= 1e-12 * (1.0 + base));
    }
}

fn base_inputs() -> (Dataset, simvae::data::Split) {
    let spec = CorpusSpec {
        subjects: 20,
        shape: [16, 16, 16],
        ..CorpusSpec::default()
    };
    (Dataset::synthesize(&spec, 1.0).unwrap(), split_dataset(20, Default::default(), 0).unwrap())
}

fn smoke_spec() -> SweepSpec {
    SweepSpec {
        d_values: vec![2, 4],
        beta_values: vec![0.0, 1.0],
        alpha_values: vec![0.0, 1.0],
        fixed_d: 3,
        ..SweepSpec::default()
    }
}

#[test]
fn smoke_grids_emit_labelled_cells() {
    let (data, split) = base_inputs();
    let hyper = HyperParams {
        epochs: 2,
        learning_rate: 1e-3,
        batch_size: 4,
        alpha: 0.0,
        ..HyperParams::default()
    };
    let base = SweepBase {
        model: ModelConfig::tiny(2),
        hyper,
        data: &data,
        split: &split,
    };
    let g = sweep_dim_beta(&smoke_spec(), &base).unwrap();
    assert_eq!(g.cells.len(), 4);
    assert!(g.cells.iter().all(|c| c.regime.is_some() && c.outcome.is_ok()));
    let again = sweep_dim_beta(&smoke_spec(), &base).unwrap();
    assert_eq!(g, again);
    let csv = g.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("d,beta,"));

    let g = sweep_beta_alpha(&smoke_spec(), &base).unwrap();
    assert_eq!(g.cells.len(), 4);
    assert!(g.cells.iter().all(|c| c.regime.is_some()));
    let img = g.heat_map(4);
    assert_eq!((img.width, img.height), (8, 8));
}

#[test]
fn dim_beta_requires_zero_alpha() {
    let (data, split) = base_inputs();
    let base = SweepBase {
        model: ModelConfig::tiny(2),
        hyper: HyperParams {
            alpha: 0.5,
            ..HyperParams::default()
        },
        data: &data,
        split: &split,
    };
    assert!(sweep_dim_beta(&smoke_spec(), &base).is_err());
}

#[test]
fn failed_cells_are_recorded() {
    let (data, split) = base_inputs();
    let spec = SweepSpec {
        alpha_values: vec![0.0, 1.0],
        beta_values: vec![0.0],
        fixed_d: 2,
        ..smoke_spec()
    };
    // batch of 2 is fine without similarity but rejected when alpha > 0
    let base = SweepBase {
        model: ModelConfig::tiny(2),
        hyper: HyperParams {
            epochs: 1,
            batch_size: 2,
            alpha: 0.0,
            learning_rate: 1e-3,
            ..HyperParams::default()
        },
        data: &data,
        split: &split,
    };
    let g = sweep_beta_alpha(&spec, &base).unwrap();
    assert!(g.cell(0, 0).outcome.is_ok());
    assert!(g.cell(0, 1).outcome.is_err());
    assert_eq!(g.cell(0, 1).regime, Some(Regime::Failed));
}

#[test]
fn axes_must_increase() {
    let spec = SweepSpec {
        beta_values: vec![1.0, 0.1],
        ..SweepSpec::default()
    };
    assert!(spec.validate().is_err());
}
