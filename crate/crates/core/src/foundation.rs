//! The platform's foundation CTR model.
//!
//! User and item embeddings plus static profile features feed a two-layer
//! head. It is trained only on warm items; any item it has not seen falls
//! back to the zero embedding, which is what makes it weak on cold items.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventRecord;
use crate::ids::{ItemId, UserId};
use crate::metrics::auc;
use crate::nn::{Activation, Mlp, MlpGrads};
use crate::rng::{stream_rng, Stream};
use crate::scalar::{clamp_probability, sigmoid, Real};
use crate::world::{random_slate, simulate_session, CtrScorer, ItemProfile, UserProfile, WorldState};

pub const FOUNDATION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Step size of the embedding rows. A row only sees the few samples of
    /// its user or item in a batch, so it needs a larger step than the head.
    pub embedding_learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden: 16,
            epochs: 10,
            learning_rate: 0.1,
            embedding_learning_rate: 10.0,
            l2: 3e-4,
            batch_size: 32,
            holdout_fraction: 0.2,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("foundation: embedding_dim, hidden and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("foundation.holdout_fraction must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0
            && self.embedding_learning_rate >= 0.0
            && self.l2 >= 0.0
            && self.init_scale >= 0.0)
        {
            return Err(Error::config("foundation: learning rates, l2 and init_scale must be >= 0"));
        }
        Ok(())
    }
}

/// One labelled (user, item) exposure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoundationSample {
    pub user: UserId,
    pub item: ItemId,
    pub clicked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FoundationModel<T: Real> {
    pub format_version: u32,
    pub embedding_dim: usize,
    pub num_categories: usize,
    pub user_embeddings: Vec<Vec<T>>,
    pub item_embeddings: BTreeMap<ItemId, Vec<T>>,
    pub head: Mlp<T>,
    /// Items uploaded at or after this slot never get a trained embedding.
    pub trained_on_slot: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoundationGrads<T> {
    pub head: MlpGrads<T>,
    pub users: BTreeMap<UserId, Vec<T>>,
    pub items: BTreeMap<ItemId, Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub final_train_loss: f64,
    pub holdout_auc: Option<f64>,
}

/// Static user profile features.
pub fn user_features<T: Real>(user: &UserProfile) -> Vec<T> {
    vec![T::lit(user.activity_grade as f64 / 10.0)]
}

pub const USER_FEATURE_DIM: usize = 1;

/// Static item profile features: category one-hot and the observed quality.
pub fn item_features<T: Real>(item: &ItemProfile, num_categories: usize) -> Vec<T> {
    let mut f = vec![T::zero(); num_categories + 1];
    f[item.category_id.index()] = T::one();
    f[num_categories] = T::lit(item.quality_signal);
    f
}

impl<T: Real> FoundationModel<T> {
    pub fn new(world: &WorldState, cfg: &TrainConfig, trained_on_slot: i64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Training, 0);
        let m = cfg.embedding_dim;
        let c = world.config.num_categories;
        let init = Normal::new(0.0, cfg.init_scale.max(1e-12)).map_err(|e| Error::config(e.to_string()))?;
        let user_embeddings =
            (0..world.users.len()).map(|_| (0..m).map(|_| T::lit(init.sample(&mut rng))).collect()).collect();
        let item_embeddings = world
            .items
            .iter()
            .filter(|i| (i.upload_slot as i64) < trained_on_slot)
            .map(|i| (i.item_id, (0..m).map(|_| T::lit(init.sample(&mut rng))).collect()))
            .collect();
        let input = 3 * m + USER_FEATURE_DIM + c + 1;
        let head = Mlp::random(&[input, cfg.hidden, 1], Activation::Tanh, &mut rng)?;
        Ok(Self {
            format_version: FOUNDATION_FORMAT_VERSION,
            embedding_dim: m,
            num_categories: c,
            user_embeddings,
            item_embeddings,
            head,
            trained_on_slot,
        })
    }

    /// Model with every parameter set to zero; predicts 0.5 everywhere.
    pub fn zeros(world: &WorldState, embedding_dim: usize, hidden: usize) -> Result<Self> {
        let m = embedding_dim;
        let c = world.config.num_categories;
        Ok(Self {
            format_version: FOUNDATION_FORMAT_VERSION,
            embedding_dim: m,
            num_categories: c,
            user_embeddings: vec![vec![T::zero(); m]; world.users.len()],
            item_embeddings: BTreeMap::new(),
            head: Mlp::zeros(&[3 * m + USER_FEATURE_DIM + c + 1, hidden, 1], Activation::Tanh)?,
            trained_on_slot: 0,
        })
    }

    pub fn user_embedding(&self, user: UserId) -> Result<&[T]> {
        self.user_embeddings.get(user.index()).map(|v| v.as_slice()).ok_or(Error::Lookup { kind: "user", id: user.0 })
    }

    /// Trained embedding, or `None` for items the model never saw.
    pub fn item_embedding(&self, item: ItemId) -> Option<&[T]> {
        self.item_embeddings.get(&item).map(|v| v.as_slice())
    }

    fn input(&self, world: &WorldState, user: UserId, item: ItemId) -> Result<Vec<T>> {
        self.input_with(world, user, item, self.item_embedding(item))
    }

    fn input_with(&self, world: &WorldState, user: UserId, item: ItemId, ei: Option<&[T]>) -> Result<Vec<T>> {
        let m = self.embedding_dim;
        let eu = self.user_embedding(user)?;
        let u = world.user(user)?;
        let it = world.item(item)?;
        let mut x = Vec::with_capacity(self.head.input_dim());
        x.extend_from_slice(eu);
        match ei {
            Some(ei) => {
                x.extend_from_slice(ei);
                x.extend(eu.iter().zip(ei).map(|(a, b)| *a * *b));
            }
            None => x.extend(std::iter::repeat_n(T::zero(), 2 * m)),
        }
        x.extend(user_features::<T>(u));
        x.extend(item_features::<T>(it, self.num_categories));
        Ok(x)
    }

    /// `ŷ_foun` for a (user, item) pair. Pure.
    pub fn predict(&self, world: &WorldState, user: UserId, item: ItemId) -> Result<T> {
        let x = self.input(world, user, item)?;
        Ok(sigmoid(self.head.logit(&x)))
    }

    /// Score the model gives `item` as if it had never been seen, i.e. with
    /// the zero item embedding.
    pub fn predict_as_cold(&self, world: &WorldState, user: UserId, item: ItemId) -> Result<T> {
        let x = self.input_with(world, user, item, None)?;
        Ok(sigmoid(self.head.logit(&x)))
    }

    pub fn num_params(&self) -> usize {
        self.head.num_params()
            + self.user_embeddings.len() * self.embedding_dim
            + self.item_embeddings.len() * self.embedding_dim
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if m.format_version != FOUNDATION_FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "foundation checkpoint version {} (expected {FOUNDATION_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Free-function form of [`FoundationModel::predict`].
pub fn foundation_predict<T: Real>(
    model: &FoundationModel<T>,
    world: &WorldState,
    user: UserId,
    item: ItemId,
    _slot: u32,
) -> Result<T> {
    model.predict(world, user, item)
}

impl<T: Real> CtrScorer for FoundationModel<T> {
    fn ctr(&self, world: &WorldState, user: UserId, item: ItemId) -> f64 {
        self.predict(world, user, item).map(|p| p.to_f64_lossy()).unwrap_or(0.5)
    }
}

/// Mean binary cross-entropy of a batch plus `l2 * ||θ||²` over the head and
/// the embedding rows the batch touches, with its analytic gradient.
pub fn foundation_loss<T: Real>(
    model: &FoundationModel<T>,
    world: &WorldState,
    batch: &[FoundationSample],
    l2: T,
) -> Result<(T, FoundationGrads<T>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let m = model.embedding_dim;
    let n = T::from_count(batch.len());
    let mut grads =
        FoundationGrads { head: MlpGrads::zeros_like(&model.head), users: BTreeMap::new(), items: BTreeMap::new() };
    let mut loss = T::zero();
    for s in batch {
        let x = model.input(world, s.user, s.item)?;
        let tape = model.head.forward(&x);
        let p = clamp_probability(sigmoid(tape.logit()));
        let y = if s.clicked { T::one() } else { T::zero() };
        loss += -(y * p.ln() + (T::one() - y) * (T::one() - p).ln());
        let dx = model.head.backward(&tape, (p - y) / n, &mut grads.head);
        let eu = model.user_embedding(s.user)?;
        let gu = grads.users.entry(s.user).or_insert_with(|| vec![T::zero(); m]);
        for k in 0..m {
            gu[k] += dx[k];
        }
        if let Some(ei) = model.item_embedding(s.item) {
            for k in 0..m {
                gu[k] += dx[2 * m + k] * ei[k];
            }
            let gi = grads.items.entry(s.item).or_insert_with(|| vec![T::zero(); m]);
            for k in 0..m {
                gi[k] += dx[m + k] + dx[2 * m + k] * eu[k];
            }
        }
    }
    loss /= n;
    if l2 > T::zero() {
        let two = T::lit(2.0);
        loss += l2 * model.head.sq_norm();
        model.head.add_l2_grad(l2, &mut grads.head);
        for (u, g) in grads.users.iter_mut() {
            let e = model.user_embedding(*u)?;
            for k in 0..m {
                loss += l2 * e[k] * e[k];
                g[k] += two * l2 * e[k];
            }
        }
        for (i, g) in grads.items.iter_mut() {
            let e = model.item_embedding(*i).expect("touched item has embedding");
            for k in 0..m {
                loss += l2 * e[k] * e[k];
                g[k] += two * l2 * e[k];
            }
        }
    }
    Ok((loss, grads))
}

fn apply_grads<T: Real>(model: &mut FoundationModel<T>, grads: &FoundationGrads<T>, head_lr: T, lr: T) {
    model.head.apply(&grads.head, head_lr);
    for (u, g) in &grads.users {
        for (e, d) in model.user_embeddings[u.index()].iter_mut().zip(g) {
            *e -= lr * *d;
        }
    }
    for (i, g) in &grads.items {
        if let Some(e) = model.item_embeddings.get_mut(i) {
            for (e, d) in e.iter_mut().zip(g) {
                *e -= lr * *d;
            }
        }
    }
}

/// Fits the foundation model on warm exposures by minibatch SGD.
///
/// Every event must concern an item uploaded before `cutoff_slot`.
pub fn train_foundation<T: Real>(
    events: &[EventRecord],
    world: &WorldState,
    cfg: &TrainConfig,
    cutoff_slot: i64,
    seed: u64,
) -> Result<(FoundationModel<T>, TrainReport)> {
    cfg.validate()?;
    if events.is_empty() {
        return Err(Error::Training("empty event stream".into()));
    }
    let mut samples = Vec::with_capacity(events.len());
    for e in events {
        let item = world.item(e.item_id)?;
        if item.upload_slot as i64 >= cutoff_slot {
            return Err(Error::Training(format!(
                "{} uploaded at slot {} is not before the training cutoff {cutoff_slot}",
                e.item_id, item.upload_slot
            )));
        }
        world.user(e.user_id)?;
        samples.push(FoundationSample { user: e.user_id, item: e.item_id, clicked: e.clicked });
    }
    let mut rng = stream_rng(seed, Stream::Training, 1);
    samples.shuffle(&mut rng);
    let n_hold = ((samples.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(samples.len().saturating_sub(1));
    let (holdout, train) = samples.split_at(n_hold);
    let mut train = train.to_vec();

    let mut model = FoundationModel::<T>::new(world, cfg, cutoff_slot, seed)?;
    let lr = T::lit(cfg.learning_rate);
    let emb_lr = T::lit(cfg.embedding_learning_rate);
    let l2 = T::lit(cfg.l2);
    let mut last_loss = T::zero();
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = T::zero();
        let mut batches = 0usize;
        for batch in train.chunks(cfg.batch_size) {
            let (loss, grads) = foundation_loss(&model, world, batch, l2)?;
            apply_grads(&mut model, &grads, lr, emb_lr);
            total += loss;
            batches += 1;
        }
        last_loss = total / T::from_count(batches.max(1));
        if !last_loss.is_finite() {
            return Err(Error::Training("loss diverged".into()));
        }
    }
    let holdout_auc = if holdout.is_empty() {
        None
    } else {
        let scores: Vec<f64> = holdout
            .iter()
            .map(|s| model.predict(world, s.user, s.item).map(|p| p.to_f64_lossy()))
            .collect::<Result<_>>()?;
        let labels: Vec<bool> = holdout.iter().map(|s| s.clicked).collect();
        auc(&scores, &labels)
    };
    let report = TrainReport {
        train_samples: train.len(),
        holdout_samples: holdout.len(),
        final_train_loss: last_loss.to_f64_lossy(),
        holdout_auc,
    };
    Ok((model, report))
}

/// Exposure log produced by showing uniformly random warm items; used to
/// collect unbiased pre-history before the foundation model exists.
/// Events are stamped slot 0 and update the world's counters.
pub fn random_exposure_log(world: &mut WorldState, rounds: u32, cutoff_slot: i64) -> Result<Vec<EventRecord>> {
    let warm: Vec<ItemId> =
        world.items.iter().filter(|i| (i.upload_slot as i64) < cutoff_slot).map(|i| i.item_id).collect();
    let k = world.config.session_length;
    let mut events = Vec::new();
    for r in 0..rounds {
        // Arrivals use the warmup stream so they never coincide with run slots.
        let mut rng = stream_rng(world.seed, Stream::Warmup, r as u64);
        for user in world.arrivals_from(Stream::Warmup, (1u64 << 32) + r as u64) {
            let slate = random_slate(&warm, k, &mut rng);
            events.extend(simulate_session(world, user, 0, &slate, &[], &mut rng)?);
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};
    use rand::Rng;

    fn world() -> WorldState {
        generate_world(
            &WorldConfig { num_users: 300, num_warm_items: 60, mean_arrival_rate: 0.5, ..Default::default() },
            5,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let w = world();
        let m = FoundationModel::<f64>::zeros(&w, 4, 3).unwrap();
        assert_eq!(m.predict(&w, UserId(0), ItemId(0)).unwrap(), 0.5);
        assert_eq!(foundation_predict(&m, &w, UserId(3), ItemId(9), 0).unwrap(), 0.5);
    }

    #[test]
    fn unknown_user_is_lookup_error() {
        let w = world();
        let m = FoundationModel::<f64>::zeros(&w, 4, 3).unwrap();
        assert!(matches!(m.predict(&w, UserId(9999), ItemId(0)), Err(Error::Lookup { kind: "user", .. })));
    }

    #[test]
    fn empty_stream_is_training_error() {
        let w = world();
        let r = train_foundation::<f64>(&[], &w, &TrainConfig::default(), 0, 1);
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn cold_events_are_rejected() {
        let mut w = world();
        let cold = w.spawn_cold_items(0).unwrap();
        let e = EventRecord {
            slot: 0,
            user_id: UserId(0),
            item_id: cold[0],
            channel: crate::events::Channel::Natural,
            clicked: false,
            paid: false,
            gmv_value: 0.0,
            bid: None,
            price: None,
            stage_at_event: None,
        };
        assert!(matches!(train_foundation::<f64>(&[e], &w, &TrainConfig::default(), 0, 1), Err(Error::Training(_))));
    }

    #[test]
    fn cold_items_have_no_trained_embedding() {
        let mut w = world();
        let mut log_world = w.clone();
        let events = random_exposure_log(&mut log_world, 2, 0).unwrap();
        let (m, _) =
            train_foundation::<f64>(&events, &w, &TrainConfig { epochs: 1, ..Default::default() }, 0, 1).unwrap();
        let cold = w.spawn_cold_items(0).unwrap();
        assert!(m.item_embedding(cold[0]).is_none());
        assert!(m.item_embedding(ItemId(0)).is_some());
        // Cold prediction still works through the zero-embedding path.
        let p = m.predict(&w, UserId(0), cold[0]).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn predict_is_pure() {
        let w = world();
        let m = FoundationModel::<f64>::new(&w, &TrainConfig::default(), 0, 3).unwrap();
        let a = m.predict(&w, UserId(1), ItemId(2)).unwrap();
        let b = m.predict(&w, UserId(1), ItemId(2)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn loss_gradient_matches_finite_differences() {
        let w = world();
        let mut m =
            FoundationModel::<f64>::new(&w, &TrainConfig { init_scale: 0.5, ..Default::default() }, 0, 9).unwrap();
        let mut rng = stream_rng(9, Stream::Training, 5);
        for l in &mut m.head.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        let batch: Vec<FoundationSample> = (0..10)
            .map(|k| FoundationSample { user: UserId(k * 7), item: ItemId(k * 3 % 60), clicked: k % 3 == 0 })
            .collect();
        let l2 = 1e-3;
        let (_, g) = foundation_loss(&m, &w, &batch, l2).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!((fd - analytic).abs() / denom < 1e-4, "fd {fd} vs analytic {analytic}");
        };
        let flat = g.head.flatten();
        for p in (0..m.head.num_params()).step_by(7) {
            let mut a = m.clone();
            *a.head.param_mut(p) += h;
            let mut b = m.clone();
            *b.head.param_mut(p) -= h;
            check(
                flat[p],
                foundation_loss(&a, &w, &batch, l2).unwrap().0,
                foundation_loss(&b, &w, &batch, l2).unwrap().0,
            );
        }
        for (u, gu) in &g.users {
            for k in 0..m.embedding_dim {
                let mut a = m.clone();
                a.user_embeddings[u.index()][k] += h;
                let mut b = m.clone();
                b.user_embeddings[u.index()][k] -= h;
                check(
                    gu[k],
                    foundation_loss(&a, &w, &batch, l2).unwrap().0,
                    foundation_loss(&b, &w, &batch, l2).unwrap().0,
                );
            }
        }
        for (i, gi) in &g.items {
            for k in 0..m.embedding_dim {
                let mut a = m.clone();
                a.item_embeddings.get_mut(i).unwrap()[k] += h;
                let mut b = m.clone();
                b.item_embeddings.get_mut(i).unwrap()[k] -= h;
                check(
                    gi[k],
                    foundation_loss(&a, &w, &batch, l2).unwrap().0,
                    foundation_loss(&b, &w, &batch, l2).unwrap().0,
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let w = world();
        let m = FoundationModel::<f64>::new(&w, &TrainConfig::default(), 0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("foundation.json");
        m.save_json(&path).unwrap();
        let back = FoundationModel::<f64>::load_json(&path).unwrap();
        assert_eq!(back, m);
    }
}
