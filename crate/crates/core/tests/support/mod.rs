//! Shared fixtures and reference implementations for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use fedchain::cas::ContentStore;
use fedchain::data::{generate_synthetic, partition, train_test_split, ClientPartition, Dataset};
use fedchain::federation::*;
use fedchain::ledger::{derive_client_key, Ledger, LedgerConfig};
use fedchain::model::{Batch, LayerLayout, Mlp, MlpShape, ParameterVector};
use fedchain::personalization::PersonalizationMask;
use fedchain::privacy::PrivacySpec;
use fedchain::rng::{self, stream, uniform, Normal, Purpose};

/// Orders written out independently of `default_alpha_grid`.
pub fn oracle_alphas() -> Vec<f64> {
    let mut a = vec![1.25, 1.5, 1.75];
    let mut x = 2.0;
    while x <= 64.0 {
        a.push(x);
        x += 1.0;
    }
    a.push(128.0);
    a.push(256.0);
    a
}

/// Brute-force conversion for `releases` Gaussian releases at multiplier `z`.
pub fn oracle_epsilon(z: f64, releases: u64, delta: f64) -> f64 {
    oracle_alphas()
        .into_iter()
        .map(|a| releases as f64 * a / (2.0 * z * z) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

pub const H: f64 = 1e-5;
/// Denominator floor for relative errors, so near-zero partials are compared
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Random model and batch with at most 500 parameters.
pub fn instance(seed: u64) -> (Mlp, ParameterVector, Batch) {
    let mut rng = stream(seed, Purpose::Test, 0, 0);
    let input_dim = 1 + (uniform(&mut rng) * 8.0) as usize;
    let hidden = 1 + (uniform(&mut rng) * 12.0) as usize;
    let num_classes = 2 + (uniform(&mut rng) * 8.0) as usize;
    let n = 1 + (uniform(&mut rng) * 16.0) as usize;
    let mlp = Mlp::new(MlpShape {
        input_dim,
        hidden,
        num_classes,
    })
    .unwrap();
    assert!(mlp.num_params() <= 500);
    let mut normal = Normal::new(rng);
    let params: Vec<f64> = (0..mlp.num_params()).map(|_| 0.7 * normal.sample()).collect();
    let inputs: Vec<f64> = (0..n * input_dim).map(|_| normal.sample()).collect();
    let mut rng = normal.into_inner();
    let labels = (0..n)
        .map(|_| (uniform(&mut rng) * num_classes as f64) as usize)
        .collect();
    let params = ParameterVector::new(params, mlp.layout().clone()).unwrap();
    (mlp, params, Batch::new(inputs, input_dim, labels).unwrap())
}

/// Largest relative error between the analytic gradient and central
/// differences over every coordinate.
pub fn max_gradient_error(seed: u64) -> f64 {
    let (mlp, params, batch) = instance(seed);
    let grad = mlp.gradient(&params, &batch).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[j] += H;
        let mut minus = params.clone();
        minus.values_mut()[j] -= H;
        let fd = (mlp.loss(&plus, &batch).unwrap() - mlp.loss(&minus, &batch).unwrap()) / (2.0 * H);
        worst = worst.max(rel_err(grad.values()[j], fd));
    }
    worst
}

pub struct Setup {
    pub model: Mlp,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: ClientPartition,
}

impl Setup {
    pub fn new(clients: usize, seed: u64) -> Self {
        let ds = generate_synthetic(600, 4, 5, 3.0, seed).unwrap();
        let (train, test) = train_test_split(&ds, 0.8, seed).unwrap();
        let partition = partition(&train, clients, 0.5, seed).unwrap();
        let model = Mlp::new(MlpShape {
            input_dim: 5,
            hidden: 6,
            num_classes: 4,
        })
        .unwrap();
        Self {
            model,
            train,
            test,
            partition,
        }
    }

    pub fn data(&self) -> TrainingData<'_> {
        TrainingData {
            model: &self.model,
            train: &self.train,
            test: &self.test,
            partition: &self.partition,
        }
    }

    pub fn run(&self, spec: &PrivacySpec, config: &TrainingConfig) -> (TrainingRun, Ledger, ContentStore) {
        let mut ledger = Ledger::new(LedgerConfig {
            seed: config.seed,
            ..LedgerConfig::default()
        })
        .unwrap();
        let store = ContentStore::in_memory();
        let run = run_training(self.data(), spec, config, &mut ledger, &store).unwrap();
        (run, ledger, store)
    }
}

pub fn spec(epsilon: f64, clip: f64) -> PrivacySpec {
    PrivacySpec {
        epsilon_target: epsilon,
        delta: 1e-3,
        clip_c: clip,
        noise_split_rho: 2.0,
        rounds: 1,
    }
}

pub fn config(rounds: u32, seed: u64) -> TrainingConfig {
    TrainingConfig {
        global_rounds: rounds,
        local_epochs: 2,
        learning_rate: 0.1,
        batch_size: 8,
        seed,
        ..TrainingConfig::default()
    }
}

pub fn client(setup: &Setup, k: usize, seed: u64) -> ClientState {
    let init = setup.model.init(seed);
    ClientState {
        id: k as u32,
        shard: setup.partition.shard(k).to_vec(),
        mask: PersonalizationMask::all_shared(init.layout().clone()),
        prev_local: init,
        key: derive_client_key(seed, k as u32),
    }
}

/// Plain FedAvg written from scratch: every client runs mini-batch SGD from
/// the global model with the same batch order the simulator uses, and the
/// global model moves by the weighted mean of the client deltas.
pub fn reference_fedavg(setup: &Setup, config: &TrainingConfig, weights: &[f64]) -> Vec<f64> {
    let layout = setup.model.layout().clone();
    let mut global: Vec<f64> = setup.model.init(config.seed).into_values();
    for round in 1..=config.global_rounds {
        let mut deltas = Vec::new();
        for (k, shard) in setup.partition.shards().iter().enumerate() {
            let mut w = global.clone();
            let mut order = shard.clone();
            let mut rng = stream(config.seed, Purpose::BatchShuffle, k as u32, round);
            for _ in 0..config.local_epochs {
                rng::shuffle(&mut order, &mut rng);
                for chunk in order.chunks(config.batch_size) {
                    let batch = setup.train.batch(chunk).unwrap();
                    let params = ParameterVector::new(w.clone(), layout.clone()).unwrap();
                    let g = setup.model.gradient(&params, &batch).unwrap();
                    for (wj, gj) in w.iter_mut().zip(g.values()) {
                        *wj -= config.learning_rate * gj;
                    }
                }
            }
            deltas.push(w.iter().zip(&global).map(|(a, b)| a - b).collect::<Vec<f64>>());
        }
        for j in 0..global.len() {
            let mut step = 0.0;
            for (d, wk) in deltas.iter().zip(weights) {
                step += wk * d[j];
            }
            global[j] += step;
        }
    }
    global
}

pub fn plain_config(rounds: u32, seed: u64) -> TrainingConfig {
    TrainingConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        noise: NoiseMode::Disabled,
        masks: MaskMode::AllShared,
        ..config(rounds, seed)
    }
}

/// `k` random updates of dimension `d` and normalized positive weights.
pub fn random_vectors(seed: u64, k: usize, d: usize) -> (Vec<ParameterVector>, Vec<f64>) {
    let layout = Arc::new(LayerLayout::from_sizes([("all", d)]).unwrap());
    let mut rng = stream(seed, Purpose::Test, 3, 0);
    let updates = (0..k)
        .map(|_| ParameterVector::new((0..d).map(|_| uniform(&mut rng) * 2.0 - 1.0).collect(), layout.clone()).unwrap())
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| uniform(&mut rng) + 0.01).collect();
    let total: f64 = raw.iter().sum();
    (updates, raw.iter().map(|w| w / total).collect())
}
