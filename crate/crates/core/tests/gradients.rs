use geoflow::net::{gradient_check, HeadKind, ModelParams, NetConfig, NetInput};
use geoflow::sphere::Vec3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(cond_dim: usize, n: usize, rng: &mut ChaCha8Rng) -> NetInput {
    let mut inp = NetInput::new(cond_dim);
    for i in 0..n {
        let x = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let c: Vec<f64> = (0..cond_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(0.0..1.0);
        if i % 3 == 2 {
            inp.push(x, k, None).unwrap();
        } else {
            inp.push(x, k, Some(&c)).unwrap();
        }
    }
    inp
}

#[test]
fn field_network_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ModelParams::init(NetConfig::new(8, 2, 4), &mut rng).unwrap();
    p.randomize(0.5, &mut rng);
    let inp = batch(4, 6, &mut rng);
    let targets = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
    let err = gradient_check(&p, &inp, &targets, 1e-5, 1e-6).unwrap();
    assert!(err < 1e-4, "worst relative gradient error {err:.3e}");
}

#[test]
fn mixture_head_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = NetConfig::new(8, 1, 3).with_head(HeadKind::VmfMixture { components: 2 });
    let mut p = ModelParams::init(cfg, &mut rng).unwrap();
    p.randomize(0.5, &mut rng);
    let inp = batch(3, 5, &mut rng);
    let targets = Array2::from_shape_fn((5, cfg.out_dim()), |_| rng.random_range(-1.0..1.0));
    let err = gradient_check(&p, &inp, &targets, 1e-5, 1e-6).unwrap();
    assert!(err < 1e-4, "worst relative gradient error {err:.3e}");
}
