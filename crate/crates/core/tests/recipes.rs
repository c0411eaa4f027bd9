use std::path::Path;

use fibrae::data_io::{DataSource, RunConfig};

#[test]
fn mnist_recipe_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes/mnist.json");
    let config = RunConfig::load(&path).unwrap();
    assert!(matches!(config.data, DataSource::Idx { .. }));
    assert_eq!((config.architecture.fiber_dim, config.architecture.base_dim), (2, 2));
    assert_eq!(config.solver.lambda_reg, 0.02);
}
