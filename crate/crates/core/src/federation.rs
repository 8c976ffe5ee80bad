//! Round-based federated training.
//!
//! Each round the server samples clients and broadcasts the global model.
//! Every selected client computes one full-batch gradient, scores its layers'
//! sensitivity to its private regions, splits its privacy budget accordingly,
//! then clips and perturbs each layer before uploading. The server combines
//! the uploads either by plain size-weighted averaging or by PDA-PAM, which
//! re-scores each client's implied local model on a public set and divides
//! each gradient by its softmax weight.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, split_public, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::metrics::{SegCounts, SegMetrics};
use crate::nn::{Architecture, GradientSet, Model, DEFAULT_FD_STEP};
use crate::privacy::{
    allocate_budget, allocate_uniform, clip_block, compose_check, perturb_block, Allocation,
    LayerBudget, PrivacySpec,
};
use crate::rng::{client_stream, derive_seed, NoiseStream};
use crate::sensitivity::{psi_scores_for_model, PsiScores, DEFAULT_MAX_SAMPLES};

pub const DEFAULT_LR: f64 = 5.0;
/// Shared per-layer clipping threshold.
pub const DEFAULT_CLIP: f64 = 0.02;
pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    FedAvg,
    Pda,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fedavg" => Ok(Aggregation::FedAvg),
            "pda" => Ok(Aggregation::Pda),
            other => Err(format!(
                "unknown aggregation {other:?}, expected fedavg or pda"
            )),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::Pda => "pda",
        })
    }
}

/// Where the server's per-client layer scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerScoring {
    /// PSI scores of each implied local model on the public set.
    Public,
    /// Every client scores identically, so all weights are `1/K`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiSettings {
    pub max_samples: usize,
    pub fd_step: f64,
}

impl Default for PsiSettings {
    fn default() -> Self {
        PsiSettings {
            max_samples: DEFAULT_MAX_SAMPLES,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub data: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Clipped and perturbed gradient as uploaded.
    pub gradients: GradientSet,
    pub layer_budget: LayerBudget,
    /// Per-layer L2 norms after clipping, before noise.
    pub pre_noise_norms: Vec<f64>,
    pub n_samples: usize,
    /// Local PSI scores; `None` when no noise is added and scoring was skipped.
    pub psi_scores: Option<PsiScores>,
    /// Loss of the broadcast model on this client's data.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub budgets: Vec<LayerBudget>,
    /// `weights[k][l]`: aggregation weight of the k-th selected client in layer `l`.
    pub weights: Vec<Vec<f64>>,
    /// Number of divisors raised to the PDA-PAM floor this round.
    pub alpha_floor_hits: usize,
    pub train_loss: f64,
    pub metrics: SegMetrics,
}

/// `ceil(fraction * total)` distinct ids, returned in increasing order.
pub fn sample_clients(total: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "client fraction {fraction} outside (0, 1]"
        )));
    }
    let n = (fraction * total as f64).ceil() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument("no clients to select".into()));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    ids.sort_unstable();
    Ok(ids)
}

/// One client's protected upload for `round`.
pub fn client_update(
    global: &Model,
    client: &ClientState,
    spec: &PrivacySpec,
    allocation: Allocation,
    psi: &PsiSettings,
    round: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    if client.data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "client {} has no data",
            client.id
        )));
    }
    if round >= spec.rounds {
        return Err(Error::InvalidArgument(format!(
            "round {round} outside the {}-round budget",
            spec.rounds
        )));
    }
    let layers = global.layer_count();
    spec.validate(layers)?;
    let grad = global.mean_backward(client.data.iter().map(|s| (&s.image, &s.tamper_mask)))?;
    let train_loss = client
        .data
        .iter()
        .map(|s| global.loss(&s.image, &s.tamper_mask))
        .sum::<Result<f64>>()?
        / client.data.len() as f64;

    let stream = client_stream(client.id, round);
    let (psi_scores, layer_budget) = if spec.is_noiseless() {
        (None, allocate_uniform(layers, spec)?)
    } else {
        match allocation {
            Allocation::Psi => {
                let scores = psi_scores_for_model(
                    global,
                    &client.data,
                    psi.max_samples,
                    psi.fd_step,
                    derive_seed(seed, stream),
                )?;
                let budget = allocate_budget(&scores, spec)?;
                (Some(scores), budget)
            }
            Allocation::Uniform => (None, allocate_uniform(layers, spec)?),
        }
    };
    debug_assert!(compose_check(&layer_budget, spec));

    let mut noise = NoiseStream::new(seed, stream);
    let mut per_layer = Vec::with_capacity(layers);
    let mut pre_noise_norms = Vec::with_capacity(layers);
    for (l, block) in grad.per_layer.iter().enumerate() {
        let (clipped, norm) = clip_block(block, spec.clip[l]);
        pre_noise_norms.push(norm);
        per_layer.push(perturb_block(
            &clipped,
            spec.clip[l],
            layer_budget.per_layer_sigma[l],
            &mut noise,
        ));
    }
    Ok(ClientUpdate {
        client_id: client.id,
        gradients: GradientSet {
            per_layer,
            sample_count: grad.sample_count,
        },
        layer_budget,
        pre_noise_norms,
        n_samples: client.data.len(),
        psi_scores,
        train_loss,
    })
}

/// The protected upload of a single sample, as client 0 would send it in round 0.
pub fn simulate_upload(
    model: &Model,
    sample: &Sample,
    spec: &PrivacySpec,
    allocation: Allocation,
    psi: &PsiSettings,
    seed: u64,
) -> Result<ClientUpdate> {
    let client = ClientState {
        id: 0,
        data: vec![sample.clone()],
    };
    client_update(model, &client, spec, allocation, psi, 0, seed)
}

/// The local model a client's upload implies: `prev - lr * g`.
pub fn implied_local_model(prev: &Model, update: &ClientUpdate, lr: f64) -> Result<Model> {
    let mut m = prev.clone();
    m.apply(-lr, &update.gradients)?;
    Ok(m)
}

/// Per-layer softmax across clients of `scores[k][l]`.
pub fn softmax_weights(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = scores.first() else {
        return Err(Error::InvalidArgument("no client scores".into()));
    };
    let layers = first.len();
    if scores.iter().any(|s| s.len() != layers) {
        return Err(Error::InvalidArgument("ragged client score matrix".into()));
    }
    let mut weights = vec![vec![0.0; layers]; scores.len()];
    for l in 0..layers {
        let max = scores
            .iter()
            .map(|s| s[l])
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric(format!("non-finite score in layer {l}")));
        }
        let exps: Vec<f64> = scores.iter().map(|s| (s[l] - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (w, e) in weights.iter_mut().zip(exps) {
            w[l] = e / total;
        }
    }
    Ok(weights)
}

/// PDA-PAM weights `alpha[k][l]` from each received model's public PSI scores.
pub fn server_weights(
    received: &[Model],
    public: &[Sample],
    psi: &PsiSettings,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if public.is_empty() {
        return Err(Error::InvalidArgument("public set is empty".into()));
    }
    let scores: Vec<Vec<f64>> = received
        .par_iter()
        .map(|m| {
            psi_scores_for_model(m, public, psi.max_samples, psi.fd_step, seed).map(|s| s.per_layer)
        })
        .collect::<Result<_>>()?;
    softmax_weights(&scores)
}

/// `w_l = prev_l - (lr / K) * sum_k g_l^k / max(alpha_l^k, alpha_floor)`.
///
/// Returns the new model and how many divisors were raised to the floor.
pub fn aggregate_pda(
    prev: &Model,
    updates: &[ClientUpdate],
    weights: &[Vec<f64>],
    lr: f64,
    alpha_floor: f64,
) -> Result<(Model, usize)> {
    if updates.is_empty() || updates.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} updates with {} weight rows",
            updates.len(),
            weights.len()
        )));
    }
    if !(alpha_floor > 0.0) {
        return Err(Error::InvalidArgument(
            "alpha_floor must be positive".into(),
        ));
    }
    let k = updates.len() as f64;
    let mut model = prev.clone();
    let mut hits = 0;
    for (u, w) in updates.iter().zip(weights) {
        u.gradients.check_matches(prev)?;
        if w.len() != prev.layer_count() {
            return Err(Error::InvalidArgument(
                "weight row length differs from layer count".into(),
            ));
        }
        for (l, block) in u.gradients.per_layer.iter().enumerate() {
            let alpha = if w[l] < alpha_floor {
                hits += 1;
                alpha_floor
            } else {
                w[l]
            };
            model.params_mut()[l].axpy(-lr / (k * alpha), block)?;
        }
    }
    if hits > 0 {
        log::debug!("PDA-PAM weight floor applied to {hits} client-layer divisors");
    }
    Ok((model, hits))
}

/// `w = prev - lr * sum_k (|D_k| / |D|) g^k`.
pub fn aggregate_fedavg(
    prev: &Model,
    updates: &[ClientUpdate],
    sizes: &[usize],
    lr: f64,
) -> Result<Model> {
    if updates.is_empty() || updates.len() != sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} updates with {} sizes",
            updates.len(),
            sizes.len()
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(
            "client sizes must be positive".into(),
        ));
    }
    let total: usize = sizes.iter().sum();
    let mut model = prev.clone();
    for (u, &n) in updates.iter().zip(sizes) {
        model.apply(-lr * n as f64 / total as f64, &u.gradients)?;
    }
    Ok(model)
}

/// Pooled pixel metrics of `model` on `samples`.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<SegMetrics> {
    let mut counts = SegCounts::default();
    for s in samples {
        let pred = model.forward(&s.image)?.reshape(s.tamper_mask.shape())?;
        counts.add(SegCounts::from_masks(&pred, &s.tamper_mask)?);
    }
    Ok(counts.metrics())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: Architecture,
    pub clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: Vec<f64>,
    pub s_floor: f64,
    pub allocation: Allocation,
    pub aggregation: Aggregation,
    pub server_scoring: ServerScoring,
    pub psi: PsiSettings,
    pub public_per_format: usize,
    /// Share of the private pool held out for evaluation.
    pub test_fraction: f64,
    pub alpha_floor: f64,
}

impl TrainConfig {
    pub fn privacy(&self) -> PrivacySpec {
        PrivacySpec {
            epsilon: self.epsilon,
            delta: self.delta,
            rounds: self.rounds.max(1),
            clip: self.clip.clone(),
            s_floor: self.s_floor,
        }
    }
}

/// Data split of one training run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub public: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// The corpus `cfg` trains on when no dataset file is supplied.
pub fn generate_corpus(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    generate(&cfg.dataset, derive_seed(cfg.seed, 1))
}

/// Generates the corpus and splits it; see [`build_federation_from`].
pub fn build_federation(cfg: &TrainConfig) -> Result<Federation> {
    build_federation_from(cfg, generate_corpus(cfg)?)
}

/// Carves the public and test sets out of `samples` and deals the rest into
/// equally sized client shards.
pub fn build_federation_from(cfg: &TrainConfig, samples: Vec<Sample>) -> Result<Federation> {
    if cfg.clients == 0 {
        return Err(Error::InvalidArgument(
            "at least one client is required".into(),
        ));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {} outside (0, 1)",
            cfg.test_fraction
        )));
    }
    let (mut private, public) = split_public(samples, cfg.public_per_format, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    private.shuffle(&mut rng);
    let n_test = ((cfg.test_fraction * private.len() as f64).round() as usize).max(1);
    if n_test >= private.len() {
        return Err(Error::InvalidArgument(
            "no private samples left after the test split".into(),
        ));
    }
    let test = private.split_off(private.len() - n_test);
    let shard = private.len() / cfg.clients;
    if shard == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} private samples cannot be shared by {} clients",
            private.len(),
            cfg.clients
        )));
    }
    let clients = (0..cfg.clients)
        .map(|id| ClientState {
            id,
            data: private[id * shard..(id + 1) * shard].to_vec(),
        })
        .collect();
    Ok(Federation {
        clients,
        public,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<RoundRecord>,
    pub model: Model,
    pub federation: Federation,
    /// Uploads of the final round, in selection order.
    pub last_updates: Vec<ClientUpdate>,
}

/// Runs `cfg.rounds` rounds on the generated corpus; a pure function of `cfg`.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_on(cfg, generate_corpus(cfg)?)
}

/// Runs `cfg.rounds` rounds on `samples`.
pub fn run_training_on(cfg: &TrainConfig, samples: Vec<Sample>) -> Result<TrainOutcome> {
    let (height, width) = match samples.first() {
        Some(s) => (s.height(), s.width()),
        None => return Err(Error::InvalidArgument("dataset is empty".into())),
    };
    let fed = build_federation_from(cfg, samples)?;
    let mut model = cfg.model.build(height, width, derive_seed(cfg.seed, 2))?;
    let spec = cfg.privacy();
    if cfg.rounds > 0 {
        spec.validate(model.layer_count())?;
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} is not positive",
            cfg.lr
        )));
    }
    let mut select_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut last_updates = Vec::new();
    for round in 0..cfg.rounds {
        let wrap = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let selected =
            sample_clients(cfg.clients, cfg.client_fraction, &mut select_rng).map_err(wrap)?;
        let updates: Vec<ClientUpdate> = selected
            .par_iter()
            .map(|&id| {
                client_update(
                    &model,
                    &fed.clients[id],
                    &spec,
                    cfg.allocation,
                    &cfg.psi,
                    round,
                    cfg.seed,
                )
            })
            .collect::<Result<_>>()
            .map_err(wrap)?;

        let sizes: Vec<usize> = updates.iter().map(|u| u.n_samples).collect();
        let total: usize = sizes.iter().sum();
        let train_loss = updates
            .iter()
            .map(|u| u.train_loss * u.n_samples as f64)
            .sum::<f64>()
            / total as f64;

        let (next, weights, hits) = match cfg.aggregation {
            Aggregation::FedAvg => {
                let w: Vec<Vec<f64>> = sizes
                    .iter()
                    .map(|&n| vec![n as f64 / total as f64; model.layer_count()])
                    .collect();
                (
                    aggregate_fedavg(&model, &updates, &sizes, cfg.lr).map_err(wrap)?,
                    w,
                    0,
                )
            }
            Aggregation::Pda => {
                let weights = match cfg.server_scoring {
                    ServerScoring::Uniform => {
                        vec![vec![1.0 / updates.len() as f64; model.layer_count()]; updates.len()]
                    }
                    ServerScoring::Public => {
                        let received: Vec<Model> = updates
                            .iter()
                            .map(|u| implied_local_model(&model, u, cfg.lr))
                            .collect::<Result<_>>()
                            .map_err(wrap)?;
                        server_weights(
                            &received,
                            &fed.public,
                            &cfg.psi,
                            derive_seed(cfg.seed, 0x5E4E_0000 + round as u64),
                        )
                        .map_err(wrap)?
                    }
                };
                let (m, hits) = aggregate_pda(&model, &updates, &weights, cfg.lr, cfg.alpha_floor)
                    .map_err(wrap)?;
                (m, weights, hits)
            }
        };
        if !next.all_finite() {
            return Err(wrap(Error::Numeric(
                "aggregated model is not finite".into(),
            )));
        }
        model = next;
        let metrics = evaluate(&model, &fed.test).map_err(wrap)?;
        history.push(RoundRecord {
            round,
            selected,
            budgets: updates.iter().map(|u| u.layer_budget.clone()).collect(),
            weights,
            alpha_floor_hits: hits,
            train_loss,
            metrics,
        });
        last_updates = updates;
    }
    Ok(TrainOutcome {
        history,
        model,
        federation: fed,
        last_updates,
    })
}
