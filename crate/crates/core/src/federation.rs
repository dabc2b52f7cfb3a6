//! Synchronous federated protocol: broadcast the global weights, run
//! local training on every client, aggregate with (sample-weighted)
//! FedAvg, repeat. The one-client centralized baseline reuses the same
//! loop, so the two paths are bit-identical when they coincide.
//!
//! Determinism contract: each client derives its round stream from
//! `client/{id}/round/{r}` and sorts its shard before shuffling, and the
//! server accumulates updates in ascending client id. Running clients
//! sequentially or on any number of workers yields identical weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::degrade::{degrade, DegradationSpec, DegradationType, TrainRanges};
use crate::error::{Error, Result};
use crate::model::{init_weights, loss_and_grads, LossKind, ModelConfig};
use crate::partition::PartitionPlan;
use crate::rng::derive_stream;
use crate::tensor::Tensor;
use crate::weights::{adam_step, AdamState, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Weighted,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub patch_size: usize,
    pub scale: usize,
    pub loss: LossKind,
    pub model: ModelConfig,
    pub seed: u64,
    pub aggregate: AggregateMode,
    pub ranges: TrainRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 200,
            local_epochs: 1,
            batch_size: 16,
            lr: 2e-4,
            patch_size: 128,
            scale: 4,
            loss: LossKind::L1,
            model: ModelConfig::default(),
            seed: 0,
            aggregate: AggregateMode::Weighted,
            ranges: TrainRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // rounds = 0 is allowed: the run returns the initial weights
        if self.local_epochs == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::invalid_argument(
                "train config: epochs, batch size and patch size must be positive",
            ));
        }
        self.model.validate()?;
        if self.model.scale != self.scale {
            return Err(Error::invalid_argument(format!(
                "train config: model scale {} differs from data scale {}",
                self.model.scale, self.scale
            )));
        }
        Ok(())
    }
}

/// How a client degrades its HR patches: a single fixed type, or (for
/// the centralized baseline) a fresh uniform draw per image per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientDegradation {
    Fixed(DegradationType),
    Mixed,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub degradation: ClientDegradation,
    pub shard: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub client_id: usize,
    pub sample_count: u64,
    pub mean_loss: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundStat>,
    /// Sample-weighted mean of the client losses after aggregation.
    pub global_loss: f32,
}

pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ModelWeights,
    pub sample_count: u64,
    pub mean_loss: f32,
}

fn lookup<'a>(dataset: &'a [ImageRecord], id: &str) -> Result<&'a ImageRecord> {
    dataset
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::InvalidState(format!("shard references unknown image '{id}'")))
}

fn join_batch(images: &[&Tensor]) -> Tensor {
    let (c, h, w) = (images[0].shape()[0], images[0].shape()[1], images[0].shape()[2]);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), c, h, w], data).unwrap()
}

/// One round of local training: copy the global weights, run
/// `local_epochs` stream-shuffled passes over the shard in mini-batches
/// (last partial batch kept), one Adam step per batch. Adam state is
/// client-local and reset each round; only weights travel.
pub fn local_train(
    global: &ModelWeights,
    client: &ClientState,
    config: &TrainConfig,
    dataset: &[ImageRecord],
    round: usize,
) -> Result<ClientUpdate> {
    if client.shard.is_empty() {
        return Err(Error::InvalidState(format!(
            "client {} has an empty shard",
            client.client_id
        )));
    }
    let mut rng = derive_stream(
        config.seed,
        &format!("client/{}/round/{round}", client.client_id),
    );
    let mut weights = global.clone();
    let mut adam = AdamState::new(&weights, config.lr);
    let mut loss_sum = 0.0f64;
    let mut sample_total = 0u64;

    // canonical shard order, so the same shard set trains identically
    // regardless of how the ids arrived
    let mut shard = client.shard.clone();
    shard.sort_unstable();

    for _epoch in 0..config.local_epochs {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut hr_refs = Vec::with_capacity(chunk.len());
            let mut lr_imgs = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let record = lookup(dataset, &shard[idx])?;
                let ty = match client.degradation {
                    ClientDegradation::Fixed(ty) => ty,
                    ClientDegradation::Mixed => {
                        DegradationType::ALL[rng.uniform_int(0, 3) as usize]
                    }
                };
                let spec = DegradationSpec::for_type(ty, config.scale, &config.ranges);
                lr_imgs.push(degrade(&record.hr, &spec, &mut rng)?);
                hr_refs.push(&record.hr);
            }
            let lr_batch = join_batch(&lr_imgs.iter().collect::<Vec<_>>());
            let hr_batch = join_batch(&hr_refs);
            let (loss, grads) = loss_and_grads(&weights, &lr_batch, &hr_batch, config.loss)?;
            adam_step(&mut weights, &grads, &mut adam)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            sample_total += chunk.len() as u64;
        }
    }
    Ok(ClientUpdate {
        client_id: client.client_id,
        weights,
        sample_count: client.shard.len() as u64,
        mean_loss: (loss_sum / sample_total as f64) as f32,
    })
}

/// Per-tensor weighted mean over client updates, accumulated in f64 in
/// ascending client id order.
pub fn fedavg_aggregate(updates: &[ClientUpdate], mode: AggregateMode) -> Result<ModelWeights> {
    if updates.is_empty() {
        return Err(Error::invalid_argument("aggregate: no updates"));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let first = &updates[order[0]].weights;
    for &i in &order[1..] {
        first.check_aligned(&updates[i].weights, "fedavg_aggregate")?;
    }
    let total: f64 = order
        .iter()
        .map(|&i| match mode {
            AggregateMode::Weighted => updates[i].sample_count as f64,
            AggregateMode::Uniform => 1.0,
        })
        .sum();
    if total <= 0.0 {
        return Err(Error::invalid_argument("aggregate: total sample count is zero"));
    }
    let mut out = first.zeros_like();
    let mut acc = vec![Vec::new(); first.len()];
    for (t, slot) in acc.iter_mut().enumerate() {
        *slot = vec![0.0f64; first.tensor(t).len()];
    }
    for &i in &order {
        let update = &updates[i];
        let n = match mode {
            AggregateMode::Weighted => update.sample_count as f64,
            AggregateMode::Uniform => 1.0,
        };
        for t in 0..out.len() {
            let src = update.weights.tensor(t).data();
            for (a, &v) in acc[t].iter_mut().zip(src) {
                *a += n * v as f64;
            }
        }
    }
    for t in 0..out.len() {
        let dst = out.tensor_mut(t).data_mut();
        for (d, a) in dst.iter_mut().zip(&acc[t]) {
            *d = (a / total) as f32;
        }
    }
    Ok(out)
}

fn clients_from_plan(plan: &PartitionPlan) -> Vec<ClientState> {
    plan.clients
        .iter()
        .map(|c| ClientState {
            client_id: c.id,
            degradation: ClientDegradation::Fixed(c.degradation_type),
            shard: c.image_ids.clone(),
        })
        .collect()
}

fn run_rounds(
    clients: &[ClientState],
    config: &TrainConfig,
    dataset: &[ImageRecord],
    workers: usize,
    mut on_round: impl FnMut(usize, &ModelWeights, &RoundReport) -> Result<()>,
) -> Result<(ModelWeights, Vec<RoundReport>)> {
    config.validate()?;
    let mut global = init_weights(&config.model, config.seed)?;
    let mut reports = Vec::with_capacity(config.rounds);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;

    for round in 1..=config.rounds {
        let global_ref = &global;
        let updates: Vec<Result<ClientUpdate>> = pool.install(|| {
            clients
                .par_iter()
                .map(|client| local_train(global_ref, client, config, dataset, round))
                .collect()
        });
        let updates: Vec<ClientUpdate> = updates.into_iter().collect::<Result<Vec<_>>>()?;
        global = fedavg_aggregate(&updates, config.aggregate)?;
        let total: u64 = updates.iter().map(|u| u.sample_count).sum();
        let global_loss = (updates
            .iter()
            .map(|u| u.mean_loss as f64 * u.sample_count as f64)
            .sum::<f64>()
            / total as f64) as f32;
        let report = RoundReport {
            round,
            clients: updates
                .iter()
                .map(|u| ClientRoundStat {
                    client_id: u.client_id,
                    sample_count: u.sample_count,
                    mean_loss: u.mean_loss,
                })
                .collect(),
            global_loss,
        };
        on_round(round, &global, &report)?;
        reports.push(report);
    }
    Ok((global, reports))
}

/// Federated training over a partition plan. `on_round` sees every
/// post-aggregation global model (checkpointing hook).
pub fn run_federated(
    plan: &PartitionPlan,
    config: &TrainConfig,
    dataset: &[ImageRecord],
    workers: usize,
    on_round: impl FnMut(usize, &ModelWeights, &RoundReport) -> Result<()>,
) -> Result<(ModelWeights, Vec<RoundReport>)> {
    let clients = clients_from_plan(plan);
    if clients.is_empty() {
        return Err(Error::invalid_argument("run_federated: empty partition"));
    }
    run_rounds(&clients, config, dataset, workers, on_round)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralDegradation {
    Single(DegradationType),
    Mixed,
}

/// Centralized baseline: one client (id 0) holding every image, same
/// training loop. `Mixed` redraws the degradation type uniformly per
/// image per epoch.
pub fn run_centralized(
    config: &TrainConfig,
    dataset: &[ImageRecord],
    degradation: CentralDegradation,
    workers: usize,
    on_round: impl FnMut(usize, &ModelWeights, &RoundReport) -> Result<()>,
) -> Result<(ModelWeights, Vec<RoundReport>)> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("run_centralized: empty dataset"));
    }
    let client = ClientState {
        client_id: 0,
        degradation: match degradation {
            CentralDegradation::Single(ty) => ClientDegradation::Fixed(ty),
            CentralDegradation::Mixed => ClientDegradation::Mixed,
        },
        shard: dataset.iter().map(|r| r.id.clone()).collect(),
    };
    run_rounds(&[client], config, dataset, workers, on_round)
}
