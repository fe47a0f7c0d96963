//! FedAvg simulation: client sampling, local training with optional
//! quantization-aware updates, compression of every model exchange, and
//! example-weighted aggregation, with byte-exact traffic accounting.
//!
//! The protocol is round-synchronous. Each round the server samples clients,
//! broadcasts the (compressed) global model, waits for every sampled client's
//! (compressed) update, aggregates, and evaluates. Clients whose connection
//! or local step fails drop out of the federation; the round proceeds with
//! whoever replied.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    decode_message, encode_message, payload_raw_len, Direction, Payload, HEADER_LEN,
};
use crate::compress::{
    bias_exclusion_mask, binarize_model, binary_from_signs, clip_to_unit_interval,
    dequantize_model, global_magnitude_prune, qat_forward_state, qat_mask_gradients,
    quantize_model,
};
use crate::data::{
    gen_blobs, lda_partition, load_idx_dataset, split_per_class, Dataset, Partition,
    PartitionSpec,
};
use crate::error::{Error, Result};
use crate::nn::{
    flatten, init_model, loss_and_grad, sgd_step, unflatten, ModelSpec, ModelState,
    OptimizerState, ParamVector,
};
use crate::transport::{connect, Counters, Endpoint, Listener};

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    /// Synthetic Gaussian blobs, split per class into train and test.
    Blobs {
        num_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: std::path::PathBuf,
        train_labels: std::path::PathBuf,
        test_images: std::path::PathBuf,
        test_labels: std::path::PathBuf,
        num_classes: usize,
    },
}

impl DatasetConfig {
    fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Blobs {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                let full = gen_blobs(
                    *num_classes,
                    *dim,
                    train_per_class + test_per_class,
                    *spread,
                    seed,
                )?;
                split_per_class(&full, *train_per_class)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => Ok((
                load_idx_dataset(train_images, train_labels, *num_classes)?,
                load_idx_dataset(test_images, test_labels, *num_classes)?,
            )),
        }
    }
}

/// Which transport carries the messages of a simulated federation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Tcp,
}

/// Everything one experiment needs. Build it, [`ExperimentConfig::validate`]
/// it, hand it to [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub layer_sizes: Vec<usize>,
    pub dataset: DatasetConfig,
    /// Total clients K.
    pub num_clients: usize,
    /// Participation fraction C in (0, 1]; each round samples
    /// `ceil(C * K)` clients.
    pub participation: f64,
    pub rounds: u32,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Dirichlet concentration for the client partition.
    pub alpha: f64,
    /// Magnitude-pruning fraction applied to every transmitted model; 0
    /// disables pruning.
    pub prune_rate: f64,
    /// Direction-specific overrides of `prune_rate`.
    pub server_prune_rate: Option<f64>,
    pub client_prune_rate: Option<f64>,
    /// Whether biases are prunable too (they are by default).
    pub prune_biases: bool,
    /// Quantization-aware training width: 1, 4, or 8 bits.
    pub quant_bits: Option<u8>,
    /// Allow pruning and quantization together (experimental).
    pub combined: bool,
    /// Wrap payloads in the DEFLATE envelope on the wire.
    pub deflate: bool,
    pub learning_rate: f32,
    pub momentum: f32,
    pub transport: TransportKind,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be nonzero".into()));
        }
        if !self.participation.is_finite()
            || self.participation <= 0.0
            || self.participation > 1.0
        {
            return Err(Error::Config(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be nonzero".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be nonzero".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        for (name, rate) in [
            ("prune_rate", Some(self.prune_rate)),
            ("server_prune_rate", self.server_prune_rate),
            ("client_prune_rate", self.client_prune_rate),
        ] {
            if let Some(r) = rate {
                if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                    return Err(Error::Config(format!(
                        "{name} must be in [0, 1], got {r}"
                    )));
                }
            }
        }
        if let Some(bits) = self.quant_bits {
            if !matches!(bits, 1 | 4 | 8) {
                return Err(Error::Config(format!(
                    "quant_bits must be 1, 4, or 8, got {bits}"
                )));
            }
            let prunes = self.prune_rate > 0.0
                || self.server_prune_rate.is_some_and(|r| r > 0.0)
                || self.client_prune_rate.is_some_and(|r| r > 0.0);
            if prunes && !self.combined {
                return Err(Error::Config(
                    "pruning and quantization are separate arms; set combined = true to stack them"
                        .into(),
                ));
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// The model shape; weights are seeded separately from the data.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            layer_sizes: self.layer_sizes.clone(),
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.num_clients,
            alpha: self.alpha,
            seed: self.seed.wrapping_add(1),
        }
    }

    /// Clients sampled per round: `ceil(C * K)`, snapping products that are
    /// within rounding noise of an integer so 0.4 * 10 is 4, not 5.
    pub fn clients_per_round(&self) -> usize {
        let x = self.participation * self.num_clients as f64;
        let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
        (snapped as usize).max(1)
    }

    fn prune_rate_for(&self, direction: Direction) -> f64 {
        match direction {
            Direction::ServerToClient => self.server_prune_rate.unwrap_or(self.prune_rate),
            Direction::ClientToServer => self.client_prune_rate.unwrap_or(self.prune_rate),
        }
    }
}

/// Builds the wire payload for a model moving in `direction` under this
/// configuration: quantized codes when a bit width is set, otherwise the
/// (possibly pruned) dense parameters.
pub fn compress_for_wire(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    state: &ModelState,
    direction: Direction,
) -> Result<Payload> {
    let rate = cfg.prune_rate_for(direction);
    let state = if rate > 0.0 && (cfg.quant_bits.is_none() || cfg.combined) {
        let mask = if cfg.prune_biases {
            None
        } else {
            Some(bias_exclusion_mask(spec))
        };
        let (pruned, _) = global_magnitude_prune(&flatten(state), rate, mask.as_deref())?;
        unflatten(spec, &pruned)?
    } else {
        state.clone()
    };
    match cfg.quant_bits {
        Some(1) => {
            let q = binarize_model(&state);
            let signs = q.layers.into_iter().flat_map(|l| l.codes).collect();
            Ok(Payload::Binary { signs })
        }
        Some(bits) => Ok(Payload::Quant(quantize_model(&state, bits)?)),
        None => Ok(Payload::Dense(flatten(&state))),
    }
}

/// Reconstructs model parameters from any payload kind.
pub fn model_from_payload(spec: &ModelSpec, payload: &Payload) -> Result<ModelState> {
    match payload {
        Payload::Dense(values) => unflatten(spec, values),
        Payload::Sparse {
            len,
            indices,
            values,
            ..
        } => {
            if *len as usize != spec.param_count() {
                return Err(Error::Shape(format!(
                    "sparse vector of length {len} for a {}-parameter model",
                    spec.param_count()
                )));
            }
            let mut dense = vec![0.0f32; *len as usize];
            for (&i, &v) in indices.iter().zip(values) {
                dense[i as usize] = v;
            }
            unflatten(spec, &dense)
        }
        Payload::Quant(q) => dequantize_model(q, spec),
        Payload::Binary { signs } => dequantize_model(&binary_from_signs(spec, signs)?, spec),
    }
}

/// Local training options shared by every client.
#[derive(Debug, Clone, Copy)]
pub struct LocalTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub quant_bits: Option<u8>,
}

/// Runs `epochs` of seeded-shuffle minibatch SGD from `global` on one
/// client's shard. Returns the trained model, the mean training loss across
/// all batches (NaN when no batch ran), and the shard size. Momentum starts
/// from zero every call.
pub fn local_train(
    global: &ModelState,
    shard: &[usize],
    ds: &Dataset,
    opts: &LocalTrainOpts,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelState, f64, u64)> {
    if shard.is_empty() {
        return Err(Error::Data("client shard is empty".into()));
    }
    let mut model = global.clone();
    let mut opt = OptimizerState::new(opts.learning_rate, opts.momentum, model.param_count())?;
    let mut loss_sum = 0.0f64;
    let mut loss_examples = 0u64;
    let mut order = shard.to_vec();
    for _ in 0..opts.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch = ds.features.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let (loss, mut grads) = match opts.quant_bits {
                Some(bits) => {
                    let q = qat_forward_state(&model, bits)?;
                    let (loss, grads) = loss_and_grad(&q, &batch, &labels)?;
                    (loss, grads)
                }
                None => loss_and_grad(&model, &batch, &labels)?,
            };
            if let Some(bits) = opts.quant_bits {
                qat_mask_gradients(&mut grads, &model, bits);
            }
            sgd_step(&mut model, &mut opt, &grads)?;
            if opts.quant_bits == Some(1) {
                clip_to_unit_interval(&mut model);
            }
            loss_sum += loss * chunk.len() as f64;
            loss_examples += chunk.len() as u64;
        }
    }
    let mean_loss = if loss_examples == 0 {
        f64::NAN
    } else {
        loss_sum / loss_examples as f64
    };
    Ok((model, mean_loss, shard.len() as u64))
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub n_examples: u64,
    pub params: ParamVector,
}

/// Example-weighted FedAvg. Updates are summed in ascending client id with
/// f64 accumulation, so the result is independent of input order and
/// reproducible across platforms.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Experiment("no updates to aggregate".into()))?;
    let n = first.params.len();
    if updates.iter().any(|u| u.params.len() != n) {
        return Err(Error::Shape("updates disagree on parameter count".into()));
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Internal("duplicate client id in updates".into()));
    }
    let total: u64 = order.iter().map(|u| u.n_examples).sum();
    if total == 0 {
        return Err(Error::Experiment(
            "all updates report zero examples".into(),
        ));
    }
    let mut acc = vec![0.0f64; n];
    for update in &order {
        let weight = update.n_examples as f64 / total as f64;
        for (a, &p) in acc.iter_mut().zip(&update.params) {
            *a += weight * p as f64;
        }
    }
    let out: ParamVector = acc.iter().map(|&v| v as f32).collect();
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "aggregate produced non-finite value {bad}"
        )));
    }
    Ok(out)
}

/// Samples `count` distinct ids uniformly without replacement, returned in
/// ascending order. Asking for more ids than exist yields them all.
pub fn sample_clients(rng: &mut ChaCha8Rng, eligible: &[u32], count: usize) -> Vec<u32> {
    let mut pool = eligible.to_vec();
    let take = count.min(pool.len());
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen = pool[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Accuracy of the model on a dataset; argmax ties resolve to the lowest
/// class index.
pub fn evaluate(state: &ModelState, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(256) {
        let batch = ds.features.gather_rows(chunk)?;
        let logits = crate::nn::forward(state, &batch)?;
        for (row, &i) in chunk.iter().enumerate() {
            let z = logits.row(row);
            let mut best = 0usize;
            for (c, &v) in z.iter().enumerate().skip(1) {
                if v > z[best] {
                    best = c;
                }
            }
            if best == ds.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Everything measured about one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    pub accuracy: f64,
    /// Mean of participating clients' training losses (NaN when no client
    /// loss reached the server).
    pub train_loss: f64,
    pub uplink_raw: u64,
    pub uplink_deflated: u64,
    pub downlink_raw: u64,
    pub downlink_deflated: u64,
    /// Mean zero fraction of the payloads exchanged this round.
    pub sparsity: f64,
    pub participants: Vec<u32>,
}

/// Shared board clients post (round, client, loss) rows to when the whole
/// federation lives in one process.
pub type LossBoard = Arc<Mutex<Vec<(u32, u32, f64)>>>;

/// Server-side handle to one client.
pub struct ServerPeer {
    pub id: u32,
    pub endpoint: Endpoint,
    pub n_examples: u64,
    pub alive: bool,
}

/// Drives all rounds from the server side. `model` holds the final global
/// model afterwards. Clients that error out are dropped from the federation;
/// a round with no surviving updates leaves the model unchanged and is
/// logged as an error.
pub fn run_server_rounds(
    model: &mut ModelState,
    peers: &mut [ServerPeer],
    cfg: &ExperimentConfig,
    test: &Dataset,
    losses: Option<&LossBoard>,
) -> Result<Vec<RoundMetrics>> {
    let spec = cfg.model_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let per_round = cfg.clients_per_round();
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let eligible: Vec<u32> = peers
            .iter()
            .filter(|p| p.alive && p.n_examples > 0)
            .map(|p| p.id)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Experiment(format!(
                "round {round}: no clients left with data"
            )));
        }
        let selected = sample_clients(&mut rng, &eligible, per_round);

        let down_payload = compress_for_wire(cfg, &spec, model, Direction::ServerToClient)?;
        let down_bytes = encode_message(
            Direction::ServerToClient,
            round,
            0,
            &down_payload,
            cfg.deflate,
        )?;
        let down_raw_one = HEADER_LEN as u64 + payload_raw_len(&down_payload);
        let down_sparsity = down_payload.sparsity();

        let mut downlink_raw = 0u64;
        let mut downlink_deflated = 0u64;
        let mut sparsity_sum = 0.0f64;
        let mut message_count = 0u64;
        let mut recipients = Vec::with_capacity(selected.len());
        for &id in &selected {
            let peer = &mut peers[id as usize];
            match peer.endpoint.send_message(&down_bytes) {
                Ok(()) => {
                    downlink_raw += down_raw_one;
                    downlink_deflated += down_bytes.len() as u64;
                    sparsity_sum += down_sparsity;
                    message_count += 1;
                    recipients.push(id);
                }
                Err(e) => {
                    log::warn!("round {round}: client {id} unreachable, dropping: {e}");
                    peer.alive = false;
                }
            }
        }

        let mut uplink_raw = 0u64;
        let mut uplink_deflated = 0u64;
        let mut updates = Vec::with_capacity(recipients.len());
        for &id in &recipients {
            let peer = &mut peers[id as usize];
            let reply = match peer.endpoint.recv_message() {
                Ok(Some(bytes)) => bytes,
                Ok(None) => {
                    log::warn!("round {round}: client {id} closed mid-round, dropping");
                    peer.alive = false;
                    continue;
                }
                Err(e) => {
                    log::warn!("round {round}: client {id} receive failed, dropping: {e}");
                    peer.alive = false;
                    continue;
                }
            };
            let (header, payload) = match decode_message(&reply) {
                Ok(parsed) => parsed,
                Err(e) => {
                    log::warn!("round {round}: client {id} sent a bad message, dropping: {e}");
                    peer.alive = false;
                    continue;
                }
            };
            if header.direction != Direction::ClientToServer
                || header.round != round
                || header.sender_id != id
                || header.param_count != spec.param_count() as u64
            {
                log::warn!("round {round}: client {id} reply header mismatch, dropping");
                peer.alive = false;
                continue;
            }
            let params = match model_from_payload(&spec, &payload) {
                Ok(state) => flatten(&state),
                Err(e) => {
                    log::warn!("round {round}: client {id} payload invalid, dropping: {e}");
                    peer.alive = false;
                    continue;
                }
            };
            uplink_raw += HEADER_LEN as u64 + payload_raw_len(&payload);
            uplink_deflated += reply.len() as u64;
            sparsity_sum += payload.sparsity();
            message_count += 1;
            updates.push(ClientUpdate {
                client_id: id,
                n_examples: peer.n_examples,
                params,
            });
        }

        if updates.is_empty() {
            log::error!("round {round}: every sampled client was lost; model unchanged");
        } else {
            let aggregated = fedavg_aggregate(&updates)?;
            *model = unflatten(&spec, &aggregated)?;
        }

        let accuracy = evaluate(model, test)?;
        let train_loss = losses
            .map(|board| {
                let board = board.lock().expect("loss board poisoned");
                // Clients post in completion order; sum in id order so the
                // mean is reproducible.
                let mut round_losses: Vec<(u32, f64)> = board
                    .iter()
                    .filter(|(r, _, l)| *r == round && l.is_finite())
                    .map(|(_, c, l)| (*c, *l))
                    .collect();
                round_losses.sort_by_key(|(c, _)| *c);
                if round_losses.is_empty() {
                    f64::NAN
                } else {
                    round_losses.iter().map(|(_, l)| l).sum::<f64>() / round_losses.len() as f64
                }
            })
            .unwrap_or(f64::NAN);
        let sparsity = if message_count == 0 {
            0.0
        } else {
            sparsity_sum / message_count as f64
        };

        log::info!(
            "round {round}: accuracy {accuracy:.4}, loss {train_loss:.4}, up {uplink_deflated} B, down {downlink_deflated} B"
        );
        metrics.push(RoundMetrics {
            round,
            accuracy,
            train_loss,
            uplink_raw,
            uplink_deflated,
            downlink_raw,
            downlink_deflated,
            sparsity,
            participants: updates.iter().map(|u| u.client_id).collect(),
        });
    }
    Ok(metrics)
}

/// What a client needs to participate: the immutable experiment setup plus
/// an optional loss board when server and clients share a process.
pub struct ClientContext {
    pub cfg: ExperimentConfig,
    pub train: Arc<Dataset>,
    pub partition: Arc<Partition>,
    pub losses: Option<LossBoard>,
}

/// Runs the client side of the protocol until the server hangs up: receive a
/// welcome frame carrying this client's id, then for every broadcast train
/// locally and reply with the compressed update. Returns the id and the
/// endpoint's final counters.
pub fn run_client(mut endpoint: Endpoint, ctx: &ClientContext) -> Result<(u32, Counters)> {
    let spec = ctx.cfg.model_spec();
    let hello = endpoint
        .recv_message()?
        .ok_or_else(|| Error::Transport("server closed before the welcome frame".into()))?;
    let id_bytes: [u8; 4] = hello
        .as_slice()
        .try_into()
        .map_err(|_| Error::Transport(format!("welcome frame of {} bytes", hello.len())))?;
    let id = u32::from_le_bytes(id_bytes);
    let shard = ctx
        .partition
        .assignment
        .get(id as usize)
        .ok_or_else(|| Error::Internal(format!("no shard for client {id}")))?;
    let opts = LocalTrainOpts {
        epochs: ctx.cfg.local_epochs,
        batch_size: ctx.cfg.batch_size,
        learning_rate: ctx.cfg.learning_rate,
        momentum: ctx.cfg.momentum,
        quant_bits: ctx.cfg.quant_bits,
    };

    while let Some(bytes) = endpoint.recv_message()? {
        let (header, payload) = decode_message(&bytes)?;
        if header.direction != Direction::ServerToClient {
            return Err(Error::Corrupt("client received a client message".into()));
        }
        let global = model_from_payload(&spec, &payload)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ id as u64 ^ header.round as u64);
        let (trained, loss, _) = local_train(&global, shard, &ctx.train, &opts, &mut rng)?;
        if let Some(board) = &ctx.losses {
            board
                .lock()
                .expect("loss board poisoned")
                .push((header.round, id, loss));
        }
        let up_payload = compress_for_wire(&ctx.cfg, &spec, &trained, Direction::ClientToServer)?;
        let reply = encode_message(
            Direction::ClientToServer,
            header.round,
            id,
            &up_payload,
            ctx.cfg.deflate,
        )?;
        endpoint.send_message(&reply)?;
    }
    Ok((id, endpoint.counters()))
}

/// Result of a full experiment.
pub struct ExperimentOutput {
    pub metrics: Vec<RoundMetrics>,
    pub final_model: ModelState,
    pub final_accuracy: f64,
    /// Summed traffic counters across all server-side endpoints.
    pub server_counters: Counters,
    /// Per-client counters, ascending id, for clients that exited cleanly.
    pub client_counters: Vec<(u32, Counters)>,
}

fn sum_counters(peers: &[ServerPeer]) -> Counters {
    let mut total = Counters::default();
    for p in peers {
        let c = p.endpoint.counters();
        total.messages_sent += c.messages_sent;
        total.bytes_sent += c.bytes_sent;
        total.messages_received += c.messages_received;
        total.bytes_received += c.bytes_received;
    }
    total
}

fn finish_experiment(
    model: ModelState,
    mut peers: Vec<ServerPeer>,
    handles: Vec<std::thread::JoinHandle<Result<(u32, Counters)>>>,
    metrics: Vec<RoundMetrics>,
    test: &Dataset,
) -> Result<ExperimentOutput> {
    let server_counters = sum_counters(&peers);
    peers.clear();
    let mut client_counters = Vec::new();
    for handle in handles {
        match handle.join() {
            Ok(Ok(pair)) => client_counters.push(pair),
            Ok(Err(e)) => log::warn!("client exited with error: {e}"),
            Err(_) => log::warn!("client thread panicked"),
        }
    }
    client_counters.sort_by_key(|(id, _)| *id);
    let final_accuracy = evaluate(&model, test)?;
    Ok(ExperimentOutput {
        metrics,
        final_model: model,
        final_accuracy,
        server_counters,
        client_counters,
    })
}

/// Runs a whole federation in one process over the configured transport.
/// Identical configuration and seed give identical results and traffic
/// counters on both transports, bit for bit.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.build(cfg.seed)?;
    if train.dim() != cfg.layer_sizes[0] {
        return Err(Error::Config(format!(
            "model takes {} features, dataset has {}",
            cfg.layer_sizes[0],
            train.dim()
        )));
    }
    if *cfg.layer_sizes.last().unwrap() != train.num_classes {
        return Err(Error::Config(format!(
            "model emits {} classes, dataset has {}",
            cfg.layer_sizes.last().unwrap(),
            train.num_classes
        )));
    }
    let partition = Arc::new(lda_partition(&train, &cfg.partition_spec())?);
    let train = Arc::new(train);
    let losses: LossBoard = Arc::new(Mutex::new(Vec::new()));
    let ctx = Arc::new(ClientContext {
        cfg: cfg.clone(),
        train: Arc::clone(&train),
        partition: Arc::clone(&partition),
        losses: Some(Arc::clone(&losses)),
    });
    let counts = partition.client_counts();

    let mut peers = Vec::with_capacity(cfg.num_clients);
    let mut handles = Vec::with_capacity(cfg.num_clients);
    match cfg.transport {
        TransportKind::InProc => {
            for id in 0..cfg.num_clients as u32 {
                let (server_end, client_end) = Endpoint::in_proc_pair();
                let ctx = Arc::clone(&ctx);
                handles.push(std::thread::spawn(move || run_client(client_end, &ctx)));
                peers.push(ServerPeer {
                    id,
                    endpoint: server_end,
                    n_examples: counts[id as usize] as u64,
                    alive: true,
                });
            }
        }
        TransportKind::Tcp => {
            let listener = Listener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            for _ in 0..cfg.num_clients {
                let ctx = Arc::clone(&ctx);
                handles.push(std::thread::spawn(move || {
                    let endpoint = connect(addr)?;
                    run_client(endpoint, &ctx)
                }));
            }
            for id in 0..cfg.num_clients as u32 {
                peers.push(ServerPeer {
                    id,
                    endpoint: listener.accept()?,
                    n_examples: counts[id as usize] as u64,
                    alive: true,
                });
            }
        }
    }
    for peer in &mut peers {
        peer.endpoint.send_message(&peer.id.to_le_bytes())?;
    }

    let mut model = init_model(&cfg.model_spec())?;
    let metrics = run_server_rounds(&mut model, &mut peers, cfg, &test, Some(&losses))?;
    finish_experiment(model, peers, handles, metrics, &test)
}

/// Server half of a distributed run: waits for `cfg.num_clients` remote
/// clients on `listen_addr`, assigns ids in accept order, runs every round,
/// then hangs up. Training losses are not observable from here, so metrics
/// carry NaN for them.
pub fn serve_experiment(cfg: &ExperimentConfig, listen_addr: &str) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.build(cfg.seed)?;
    let partition = lda_partition(&train, &cfg.partition_spec())?;
    let counts = partition.client_counts();
    let listener = Listener::bind(listen_addr)?;
    log::info!(
        "serving on {}, waiting for {} clients",
        listener.local_addr()?,
        cfg.num_clients
    );
    let mut peers = Vec::with_capacity(cfg.num_clients);
    for id in 0..cfg.num_clients as u32 {
        peers.push(ServerPeer {
            id,
            endpoint: listener.accept()?,
            n_examples: counts[id as usize] as u64,
            alive: true,
        });
    }
    for peer in &mut peers {
        peer.endpoint.send_message(&peer.id.to_le_bytes())?;
    }
    let mut model = init_model(&cfg.model_spec())?;
    let metrics = run_server_rounds(&mut model, &mut peers, cfg, &test, None)?;
    finish_experiment(model, peers, Vec::new(), metrics, &test)
}

/// Client half of a distributed run: starts `clients` connections to a
/// serving peer and participates until it hangs up. Dataset and partition
/// are rebuilt locally from the shared configuration, so both halves must
/// run the same config file.
pub fn join_experiment(cfg: &ExperimentConfig, addr: &str, clients: usize) -> Result<Vec<(u32, Counters)>> {
    cfg.validate()?;
    let (train, _) = cfg.dataset.build(cfg.seed)?;
    let partition = Arc::new(lda_partition(&train, &cfg.partition_spec())?);
    let ctx = Arc::new(ClientContext {
        cfg: cfg.clone(),
        train: Arc::new(train),
        partition,
        losses: None,
    });
    let mut handles = Vec::with_capacity(clients);
    for _ in 0..clients {
        let ctx = Arc::clone(&ctx);
        let addr = addr.to_string();
        handles.push(std::thread::spawn(move || {
            let endpoint = connect(addr.as_str())?;
            run_client(endpoint, &ctx)
        }));
    }
    let mut out = Vec::new();
    for handle in handles {
        match handle.join() {
            Ok(Ok(pair)) => out.push(pair),
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(Error::Internal("client thread panicked".into())),
        }
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}
