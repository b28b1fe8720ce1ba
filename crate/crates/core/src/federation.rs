//! Round orchestration: personalization, local training, clipping and noise,
//! ledger-mediated aggregation.
//!
//! Each round every client
//!
//! 1. receives the current global model,
//! 2. scores its layers by Fisher share and builds a mask (the first round
//!    uses a fully shared mask, since no local model exists yet),
//! 3. starts from its previous local model on masked layers and the global
//!    model elsewhere,
//! 4. runs `local_epochs` of mini-batch SGD with proximal pulls toward that
//!    starting point (`lambda1` on personalized, `lambda2` on shared
//!    coordinates),
//! 5. clips the update and adds two-tier Gaussian noise.
//!
//! Noisy updates are stored in the content store, their addresses are
//! submitted to the ledger, and the aggregator fetches them back by address
//! before averaging. The new global model is stored and recorded on-chain,
//! and the round's block is sealed and audited.

use rayon::prelude::*;

use crate::cas::{self, ContentStore, GLOBAL_MODEL_CLIENT};
use crate::data::{ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::ledger::{derive_client_key, Ledger, Receipt, UpdateTransaction};
use crate::model::{Mlp, ParameterVector};
use crate::personalization::{build_mask, fisher_diagonal, layer_importance, merge_models, PersonalizationMask};
use crate::privacy::{
    adaptive_noise, calibrate_noise, clip_update, rdp_to_dp, AccountantState, NoiseCalibration, PrivacySpec,
};
use crate::rng::{self, Purpose};

/// How client updates are weighted when averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// `1/K` per client.
    Uniform,
    /// `n_k / n` per client.
    Weighted,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Noise switch. `Disabled` exists for reduction tests and ablations; it
/// releases updates without any privacy protection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Calibrated,
    Disabled,
}

/// Mask policy. `AllShared` turns personalization off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Fisher,
    AllShared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub global_rounds: u32,
    pub local_epochs: u32,
    pub learning_rate: f64,
    /// Proximal weight on personalized coordinates.
    pub lambda1: f64,
    /// Proximal weight on shared coordinates.
    pub lambda2: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    /// Cap on samples used for each Fisher estimate.
    pub fisher_samples: usize,
    pub seed: u64,
    pub noise: NoiseMode,
    pub masks: MaskMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            global_rounds: 15,
            local_epochs: 3,
            learning_rate: 1e-3,
            lambda1: 0.1,
            lambda2: 0.1,
            tau: 0.3,
            batch_size: 16,
            aggregation: Aggregation::Uniform,
            fisher_samples: 256,
            seed: 0,
            noise: NoiseMode::Calibrated,
            masks: MaskMode::Fisher,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(Error::Config("proximal weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} must be in (0, 1)", self.tau)));
        }
        if self.batch_size == 0 || self.fisher_samples == 0 {
            return Err(Error::Config(
                "batch size and Fisher sample cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-client state carried across rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: u32,
    pub shard: Vec<usize>,
    /// Local model at the end of the client's last round.
    pub prev_local: ParameterVector,
    /// Mask used in the client's last round.
    pub mask: PersonalizationMask,
    pub key: Vec<u8>,
}

/// Per-round metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: u32,
    pub epsilon_target: f64,
    pub seed: u64,
    /// Mean over clients of their personalized model's test accuracy.
    pub mean_accuracy: f64,
    pub mean_loss: f64,
    pub epsilon_spent: f64,
    /// Cumulative gas of client update transactions.
    pub gas_total: u64,
    /// Mean latency of this round's client update transactions.
    pub mean_latency_s: f64,
    pub store_total_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct RoundResult {
    pub round: u32,
    pub global_params: ParameterVector,
    pub global_address: cas::ContentAddress,
    pub metrics: MetricsRecord,
    /// Client update receipts in client order.
    pub receipts: Vec<Receipt>,
    pub global_receipt: Receipt,
    /// Accuracy of the bare global model on the test split.
    pub global_accuracy: f64,
    pub personalized_layers: Vec<usize>,
}

#[derive(Debug)]
pub struct TrainingRun {
    pub initial_global: ParameterVector,
    pub final_global: ParameterVector,
    pub rounds: Vec<RoundResult>,
    pub calibration: Option<NoiseCalibration>,
    pub accountant: AccountantState,
    pub clients: Vec<ClientState>,
}

/// Borrowed inputs of a training run.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    pub model: &'a Mlp,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub partition: &'a ClientPartition,
}

/// Raw (un-noised) result of a client's local epochs.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub trained: ParameterVector,
    /// `trained - init`.
    pub update: ParameterVector,
}

/// Runs `local_epochs` of mini-batch SGD from `init` on the client's shard.
///
/// The step direction is the batch loss gradient plus
/// `lambda * (w - init)` per coordinate, with `lambda1` on masked and
/// `lambda2` on unmasked coordinates. Batch order comes from the
/// `(client, round)` shuffle stream.
pub fn local_train(
    model: &Mlp,
    train: &Dataset,
    client: &ClientState,
    init: &ParameterVector,
    mask: &PersonalizationMask,
    config: &TrainingConfig,
    round: u32,
) -> Result<LocalOutcome> {
    if mask.len() != init.len() {
        return Err(Error::Config("mask does not match model".into()));
    }
    if client.shard.is_empty() {
        return Err(Error::Argument(format!("client {} has an empty shard", client.id)));
    }
    let mut w = init.clone();
    let lambdas: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&m| if m { config.lambda1 } else { config.lambda2 })
        .collect();
    let proximal = lambdas.iter().any(|&l| l != 0.0);
    let mut order = client.shard.clone();
    let mut shuffle_rng = rng::stream(config.seed, Purpose::BatchShuffle, client.id, round);
    let diverged = || Error::Divergence {
        round,
        client: client.id,
    };

    for _ in 0..config.local_epochs {
        rng::shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = train.batch(chunk)?;
            let grad = model.gradient(&w, &batch)?;
            if !grad.is_finite() {
                return Err(diverged());
            }
            let lr = config.learning_rate;
            let anchor = init.values();
            for (j, (wj, gj)) in w.values_mut().iter_mut().zip(grad.values()).enumerate() {
                let step = if proximal {
                    gj + lambdas[j] * (*wj - anchor[j])
                } else {
                    *gj
                };
                *wj -= lr * step;
            }
        }
        if !w.is_finite() {
            return Err(diverged());
        }
    }
    let update = w.sub(init)?;
    Ok(LocalOutcome { trained: w, update })
}

/// Weighted coordinate-wise mean, accumulated in the given order.
pub fn aggregate(updates: &[ParameterVector], weights: &[f64]) -> Result<ParameterVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Argument("nothing to aggregate".into()))?;
    if updates.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Argument(format!(
            "weights must be non-negative and sum to 1, got {total}"
        )));
    }
    let mut out = vec![0.0; first.len()];
    for (u, &w) in updates.iter().zip(weights) {
        first.check_layout(u)?;
        for (o, v) in out.iter_mut().zip(u.values()) {
            *o += w * v;
        }
    }
    Ok(first.with_values(out))
}

/// Aggregation weights for the given shard sizes.
pub fn aggregation_weights(mode: Aggregation, sizes: &[usize]) -> Vec<f64> {
    match mode {
        Aggregation::Uniform => vec![1.0 / sizes.len() as f64; sizes.len()],
        Aggregation::Weighted => {
            let n: usize = sizes.iter().sum();
            sizes.iter().map(|&s| s as f64 / n as f64).collect()
        }
    }
}

fn fisher_indices(shard: &[usize], cap: usize, seed: u64, client: u32, round: u32) -> Vec<usize> {
    if shard.len() <= cap {
        return shard.to_vec();
    }
    let mut picked = shard.to_vec();
    let mut rng = rng::stream(seed, Purpose::FisherSubsample, client, round);
    rng::shuffle(&mut picked, &mut rng);
    picked.truncate(cap);
    picked.sort_unstable();
    picked
}

struct ClientRound {
    mask: PersonalizationMask,
    trained: ParameterVector,
    noisy_update: ParameterVector,
}

fn client_round(
    data: &TrainingData<'_>,
    client: &ClientState,
    global: &ParameterVector,
    noise: Option<&NoiseCalibration>,
    priv_spec: &PrivacySpec,
    config: &TrainingConfig,
    round: u32,
) -> Result<ClientRound> {
    let layout = global.layout().clone();
    let mask = if round == 1 || config.masks == MaskMode::AllShared {
        PersonalizationMask::all_shared(layout.clone())
    } else {
        let idx = fisher_indices(&client.shard, config.fisher_samples, config.seed, client.id, round);
        let batch = data.train.batch(&idx)?;
        let fisher = fisher_diagonal(data.model, global, &batch)?;
        let profile = layer_importance(&fisher, &layout)?;
        build_mask(&profile, layout.clone(), config.tau)?
    };
    let init = merge_models(&client.prev_local, global, &mask)?;
    let local = local_train(data.model, data.train, client, &init, &mask, config, round)?;
    let clipped = clip_update(&local.update, priv_spec.clip_c)?;
    let noisy_update = match noise {
        Some(cal) => adaptive_noise(
            &clipped,
            &mask,
            cal.sigma_u,
            cal.sigma_v,
            rng::stream(config.seed, Purpose::UpdateNoise, client.id, round),
        )?,
        None => clipped,
    };
    Ok(ClientRound {
        mask,
        trained: local.trained,
        noisy_update,
    })
}

/// Runs all global rounds.
///
/// Clients of a round execute on the ambient rayon pool; results are
/// consumed in client-id order, so the outcome does not depend on the pool
/// size. Missing client registrations (ids `0..K` and the aggregator id
/// [`GLOBAL_MODEL_CLIENT`]) are added to the ledger with keys derived from
/// the seed.
pub fn run_training(
    data: TrainingData<'_>,
    priv_spec: &PrivacySpec,
    config: &TrainingConfig,
    ledger: &mut Ledger,
    store: &ContentStore,
) -> Result<TrainingRun> {
    config.validate()?;
    priv_spec.validate()?;
    let model = data.model;
    let shape = model.shape();
    if data.train.input_dim() != shape.input_dim || data.test.input_dim() != shape.input_dim {
        return Err(Error::Config("dataset input dimension does not match the model".into()));
    }
    if data.train.num_classes() > shape.num_classes {
        return Err(Error::Config("dataset has more classes than the model".into()));
    }
    let k = data.partition.num_clients();
    if data.partition.shards().iter().flatten().any(|&i| i >= data.train.len()) {
        return Err(Error::Config("partition indexes past the training split".into()));
    }

    let calibration = calibrate_noise(&PrivacySpec {
        rounds: config.global_rounds,
        ..priv_spec.clone()
    })?;
    let noise = match config.noise {
        NoiseMode::Calibrated => Some(calibration),
        NoiseMode::Disabled => None,
    };

    let initial_global = model.init(config.seed);
    let mut clients: Vec<ClientState> = data
        .partition
        .shards()
        .iter()
        .enumerate()
        .map(|(i, shard)| ClientState {
            id: i as u32,
            shard: shard.clone(),
            prev_local: initial_global.clone(),
            mask: PersonalizationMask::all_shared(initial_global.layout().clone()),
            key: derive_client_key(config.seed, i as u32),
        })
        .collect();
    for c in &clients {
        if !ledger.is_registered(c.id) {
            ledger.register_client(c.id, c.key.clone())?;
        }
    }
    let aggregator_key = derive_client_key(config.seed, GLOBAL_MODEL_CLIENT);
    if !ledger.is_registered(GLOBAL_MODEL_CLIENT) {
        ledger.register_client(GLOBAL_MODEL_CLIENT, aggregator_key.clone())?;
    }

    let weights = aggregation_weights(config.aggregation, &data.partition.sizes());
    let test_batch = data.test.as_batch();
    let mut accountant = AccountantState::default();
    let mut global = initial_global.clone();
    let mut rounds = Vec::with_capacity(config.global_rounds as usize);
    let mut gas_total = 0u64;

    for round in 1..=config.global_rounds {
        if ledger.open_round() != round {
            return Err(Error::Config(format!(
                "ledger expects round {} but training is at round {round}",
                ledger.open_round()
            )));
        }
        let outputs: Vec<ClientRound> = clients
            .par_iter()
            .map(|c| client_round(&data, c, &global, noise.as_ref(), priv_spec, config, round))
            .collect::<Result<_>>()?;

        let mut receipts = Vec::with_capacity(k);
        let mut addresses = Vec::with_capacity(k);
        for (client, out) in clients.iter().zip(&outputs) {
            let blob = cas::encode_update(round, client.id, out.noisy_update.values());
            let address = store.put(&blob)?;
            let tx = UpdateTransaction::signed(round, client.id, address, blob.len() as u64, &client.key);
            receipts.push(ledger.submit_update(tx)?);
            addresses.push(address);
        }

        let mut fetched = Vec::with_capacity(k);
        for (client, address) in clients.iter().zip(&addresses) {
            let blob = cas::decode_update(&store.get(address)?)?;
            if blob.round != round || blob.client_id != client.id {
                return Err(Error::Blob(format!(
                    "blob {address} is labelled round {} client {}",
                    blob.round, blob.client_id
                )));
            }
            fetched.push(blob.into_parameters(global.layout().clone())?);
        }
        let step = aggregate(&fetched, &weights)?;
        global = global.add(&step)?;
        if !global.is_finite() {
            return Err(Error::Divergence {
                round,
                client: GLOBAL_MODEL_CLIENT,
            });
        }

        let global_blob = cas::encode_update(round, GLOBAL_MODEL_CLIENT, global.values());
        let global_address = store.put(&global_blob)?;
        let global_receipt = ledger.submit_update(UpdateTransaction::signed(
            round,
            GLOBAL_MODEL_CLIENT,
            global_address,
            global_blob.len() as u64,
            &aggregator_key,
        ))?;
        ledger.seal_block()?;
        ledger.verify_chain().into_result()?;

        let epsilon_spent = if noise.is_some() {
            accountant.compose_gaussian(calibration.z, 1)?;
            rdp_to_dp(&accountant, priv_spec.delta)?.0
        } else {
            f64::INFINITY
        };

        let personalized_layers = outputs
            .iter()
            .map(|o| o.mask.layer_flags().iter().filter(|&&b| b).count())
            .collect();
        for (client, out) in clients.iter_mut().zip(outputs) {
            client.prev_local = out.trained;
            client.mask = out.mask;
        }

        let evals = clients
            .par_iter()
            .map(|c| {
                let personal = merge_models(&c.prev_local, &global, &c.mask)?;
                model.evaluate(&personal, &test_batch)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_accuracy = evals.iter().map(|e| e.accuracy).sum::<f64>() / k as f64;
        let mean_loss = evals.iter().map(|e| e.loss).sum::<f64>() / k as f64;
        let global_accuracy = model.evaluate(&global, &test_batch)?.accuracy;

        gas_total += receipts.iter().map(|r| r.gas_used).sum::<u64>();
        let mean_latency_s = receipts.iter().map(|r| r.latency_s).sum::<f64>() / k as f64;

        rounds.push(RoundResult {
            round,
            global_params: global.clone(),
            global_address,
            metrics: MetricsRecord {
                round,
                epsilon_target: priv_spec.epsilon_target,
                seed: config.seed,
                mean_accuracy,
                mean_loss,
                epsilon_spent,
                gas_total,
                mean_latency_s,
                store_total_bytes: store.total_size(),
            },
            receipts,
            global_receipt,
            global_accuracy,
            personalized_layers,
        });
    }

    Ok(TrainingRun {
        initial_global,
        final_global: global,
        rounds,
        calibration: noise,
        accountant,
        clients,
    })
}
