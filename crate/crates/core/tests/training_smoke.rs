use fibrae::data_io::{make_synthetic, SyntheticSpec};
use fibrae::nn::{init_model, FaeArchitecture};
use fibrae::training::{train, Objective, TrainConfig};

#[test]
fn two_condition_run_learns_to_reconstruct() {
    let data = make_synthetic(&SyntheticSpec::new(2, 60, 6, 1)).unwrap();
    let mut model = init_model(&FaeArchitecture::new(6, 2, 1, 2), 1).unwrap();
    let config = TrainConfig {
        epochs: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &config).unwrap();

    for objective in [
        Objective::Reconstruction,
        Objective::CondAdv,
        Objective::CondFitting,
        Objective::Gan,
    ] {
        let records: Vec<_> = report.records.iter().filter(|r| r.objective == objective).collect();
        assert!(!records.is_empty(), "{} was never logged", objective.name());
        assert!(records.iter().all(|r| r.value.is_finite()), "{} has non-finite values", objective.name());
    }
    let mse = report.epoch_means(Objective::Reconstruction);
    let (first, last) = (mse[0].1, mse[mse.len() - 1].1);
    assert!(last < 0.1 * first, "reconstruction went from {first} to {last}");
}
