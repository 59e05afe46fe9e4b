#![allow(dead_code)]

use anonygan::generator::{Generator, GeneratorConfig, GeneratorInputs};
use anonygan::nn::{Init, ParamStore, DEVICE};
use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &DEVICE).unwrap()
}

pub fn small_generator(feature_dim: usize, iterations: usize, channels: usize) -> Generator {
    let cfg = GeneratorConfig {
        feature_dim,
        iterations,
        ..GeneratorConfig::default()
    };
    Generator::new(cfg, channels, true).unwrap()
}

pub fn init_generator(g: &Generator, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut store, &mut rng);
    init.scoped("generator", |i| g.init(i)).unwrap();
    store
}

pub fn random_inputs(rng: &mut ChaCha8Rng, b: usize, c: usize, res: usize) -> GeneratorInputs {
    GeneratorInputs {
        condition: rand_tensor(rng, &[b, 3, res, res], -1.0, 1.0),
        context: rand_tensor(rng, &[b, 3, res, res], -1.0, 1.0),
        context_mask: rand_tensor(rng, &[b, 1, res, res], 0.0, 1.0).round().unwrap(),
        lm_source: rand_tensor(rng, &[b, c, res, res], 0.0, 1.0),
        lm_condition: rand_tensor(rng, &[b, c, res, res], 0.0, 1.0),
    }
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
