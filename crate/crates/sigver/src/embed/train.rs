//! Triplet training loop: SGD with momentum over uniformly sampled valid
//! triplets, genuine signatures only, deterministic under a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Network;
use crate::raster::GrayImage;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Training hyperparameters. The flat key=value config file maps directly
/// onto these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Triplet margin.
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Genuine images per user used for training (taken first).
    pub train_per_user: usize,
    /// Genuine images per user held out for validation (taken next).
    pub val_per_user: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            margin: 1.0,
            epochs: 50,
            batch_size: 16,
            seed: 42,
            train_per_user: 16,
            val_per_user: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(TrainError::InvalidConfig("margin must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.train_per_user < 2 {
            return Err(TrainError::InvalidConfig("train_per_user must be >= 2".into()));
        }
        Ok(())
    }

    /// Parse the flat `key = value` config format.
    pub fn from_key_value(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_key_value(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }
}

/// Genuine signature images of one user, in stable dataset order.
#[derive(Debug, Clone)]
pub struct UserImages {
    pub user: String,
    pub images: Vec<GrayImage>,
}

/// Indices `(user, image)` of a sampled triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: (usize, usize),
    pub positive: (usize, usize),
    pub negative: (usize, usize),
}

/// Per-epoch record of a training run. Validation losses are indexed so
/// that entry 0 is the untrained network and entry `e + 1` follows epoch
/// `e`; the returned model carries the parameters of the best entry.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub val_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub best_epoch: usize,
    /// Triplets of the first mini-batch of the first epoch, with the mean
    /// loss the trainer computed for it (see tests for the recomputation
    /// oracle this enables).
    pub first_batch: Vec<Triplet>,
    pub first_batch_loss: f64,
}

struct Split {
    /// prepared tensors, indexed `[user][image]`
    train: Vec<Vec<Vec<f64>>>,
    val: Vec<Vec<Vec<f64>>>,
}

/// Check the per-user train/validation split is usable: at least two
/// users, two train images per user and enough validation images to form
/// one valid triplet.
pub fn validate_split(data: &[UserImages], config: &TrainConfig) -> Result<(), TrainError> {
    if data.len() < 2 {
        return Err(TrainError::InsufficientData(format!(
            "need at least 2 users, got {}",
            data.len()
        )));
    }
    for user in data {
        let train_len = user.images.len().min(config.train_per_user);
        if train_len < 2 {
            return Err(TrainError::InsufficientData(format!(
                "user {} has {} train images, need at least 2",
                user.user, train_len
            )));
        }
    }
    let val_sizes: Vec<usize> = data
        .iter()
        .map(|u| {
            u.images
                .len()
                .saturating_sub(config.train_per_user)
                .min(config.val_per_user)
        })
        .collect();
    let anchor_ok = val_sizes.iter().any(|&n| n >= 2);
    let negative_ok = val_sizes.iter().filter(|&&n| n >= 1).count() >= 2;
    if !(anchor_ok && negative_ok) {
        return Err(TrainError::InsufficientData(
            "validation split cannot form a triplet; lower train_per_user or add images".into(),
        ));
    }
    Ok(())
}

fn prepare_split(data: &[UserImages], net: &Network, config: &TrainConfig) -> Split {
    let (h, w) = net.input_size();
    let prep = |img: &GrayImage| super::prepare_input(img, h, w);
    let mut train = Vec::with_capacity(data.len());
    let mut val = Vec::with_capacity(data.len());
    for user in data {
        let t_end = user.images.len().min(config.train_per_user);
        let v_end = user.images.len().min(config.train_per_user + config.val_per_user);
        train.push(user.images[..t_end].iter().map(prep).collect());
        val.push(user.images[t_end..v_end].iter().map(prep).collect());
    }
    Split { train, val }
}

/// Sample one uniform valid triplet from a per-user image pool.
fn sample_triplet(pool: &[Vec<Vec<f64>>], rng: &mut ChaCha20Rng) -> Triplet {
    let eligible: Vec<usize> = (0..pool.len()).filter(|&u| pool[u].len() >= 2).collect();
    loop {
        let u = eligible[rng.gen_range(0..eligible.len())];
        let a = rng.gen_range(0..pool[u].len());
        let mut p = rng.gen_range(0..pool[u].len() - 1);
        if p >= a {
            p += 1;
        }
        let v = rng.gen_range(0..pool.len());
        if v == u || pool[v].is_empty() {
            continue;
        }
        let n = rng.gen_range(0..pool[v].len());
        return Triplet {
            anchor: (u, a),
            positive: (u, p),
            negative: (v, n),
        };
    }
}

fn triplet_views<'a>(
    pool: &'a [Vec<Vec<f64>>],
    triplets: &[Triplet],
) -> Vec<(&'a [f64], &'a [f64], &'a [f64])> {
    triplets
        .iter()
        .map(|t| {
            (
                pool[t.anchor.0][t.anchor.1].as_slice(),
                pool[t.positive.0][t.positive.1].as_slice(),
                pool[t.negative.0][t.negative.1].as_slice(),
            )
        })
        .collect()
}

/// Train the default architecture on genuine images. See [`train_network`].
pub fn train(data: &[UserImages], config: &TrainConfig) -> Result<(Network, TrainReport), TrainError> {
    let mut network = Network::default_architecture();
    network.init_params(config.seed);
    train_network(network, data, config)
}

/// Train a pre-initialized network with SGD plus momentum on uniformly
/// resampled triplets (4 per train image per epoch). The returned model
/// carries the parameters of the epoch with the lowest validation loss.
/// Fully deterministic given the seed.
pub fn train_network(
    mut network: Network,
    data: &[UserImages],
    config: &TrainConfig,
) -> Result<(Network, TrainReport), TrainError> {
    config.validate()?;
    validate_split(data, config)?;
    let split = prepare_split(data, &network, config);

    let n_train: usize = split.train.iter().map(|u| u.len()).sum();
    let n_val: usize = split.val.iter().map(|u| u.len()).sum();
    let triplets_per_epoch = 4 * n_train;

    // fixed validation triplets so epoch losses are comparable
    let mut val_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let val_triplets: Vec<Triplet> = (0..4 * n_val.max(1))
        .map(|_| sample_triplet(&split.val, &mut val_rng))
        .collect();
    let val_views = triplet_views(&split.val, &val_triplets);

    let mut train_rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut velocity = vec![0.0; network.param_count()];

    let mut val_losses = vec![network.batch_loss(&val_views, config.margin)];
    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0usize;
    let mut best_params = network.params().to_vec();
    let mut first_batch: Vec<Triplet> = Vec::new();
    let mut first_batch_loss = 0.0;

    for epoch in 0..config.epochs {
        let epoch_triplets: Vec<Triplet> = (0..triplets_per_epoch)
            .map(|_| sample_triplet(&split.train, &mut train_rng))
            .collect();

        let mut loss_sum = 0.0;
        for (batch_index, batch) in epoch_triplets.chunks(config.batch_size).enumerate() {
            let views = triplet_views(&split.train, batch);
            let (loss, grad) = network.batch_loss_and_grad(&views, config.margin);
            if epoch == 0 && batch_index == 0 {
                first_batch = batch.to_vec();
                first_batch_loss = loss;
            }
            loss_sum += loss * batch.len() as f64;

            let params = network.params_mut();
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(params) {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
        }
        train_losses.push(loss_sum / triplets_per_epoch as f64);

        let val_loss = network.batch_loss(&val_views, config.margin);
        val_losses.push(val_loss);
        if val_loss < val_losses[best_epoch] {
            best_epoch = val_losses.len() - 1;
            best_params = network.params().to_vec();
        }
    }

    network.set_params(best_params);
    Ok((
        network,
        TrainReport {
            val_losses,
            train_losses,
            best_epoch,
            first_batch,
            first_batch_loss,
        },
    ))
}
