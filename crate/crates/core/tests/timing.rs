//! Kept in its own binary: wall-clock checks must not share the core with
//! other tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prunenet::analyzer::measure_speedup;
use prunenet::model::{build_main_network, InputShape, NetworkSpec, ParameterSet};

#[test]
fn identical_networks_time_alike() {
    let spec = NetworkSpec::vgg_mini(InputShape::MNIST, 10);
    let params = ParameterSet::init_main(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = build_main_network(spec.clone(), params.clone()).unwrap();
    let b = build_main_network(spec, params).unwrap();
    let table = measure_speedup(&a, &b, &[8], 7).unwrap();
    assert_eq!(table.threads, 1);
    let ratio = table.rows[0].speedup;
    assert!((ratio - 1.0).abs() <= 0.1, "{ratio}");
}
