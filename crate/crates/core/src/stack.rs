//! Stacked cold-item CTR predictor.
//!
//! The frozen foundation score is concatenated with the foundation's user
//! representation, a trainable per-item cold embedding and real-time boost
//! and natural statistics, and an MLP head is fine-tuned online on the
//! exposures cold items collect.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{user_features, FoundationModel, USER_FEATURE_DIM};
use crate::ids::{ItemId, UserId};
use crate::nn::{Activation, Mlp, MlpGrads};
use crate::rng::{mix64, stream_rng, Stream};
use crate::scalar::{clamp_probability, logit, sigmoid, Real};
use crate::world::WorldState;

/// Bumped whenever the feature order below changes.
pub const STACK_LAYOUT_VERSION: u32 = 2;

/// Where a training sample came from; each source has a loss weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Natural,
    Boost,
    Products,
    Ads,
    ShortVideo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub hidden: Vec<usize>,
    pub cold_embedding_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Coefficient of the squared-norm penalty.
    pub regularization: f64,
    /// Half-width of the uniform cold-embedding initialisation.
    pub cold_init_scale: f64,
    pub source_weights: BTreeMap<Source, f64>,
    /// Sliding window (slots) of the natural-channel statistics.
    pub natural_window_slots: u32,
    /// Users sampled to build each item's CTR distribution.
    pub user_sample_size: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            cold_embedding_dim: 8,
            learning_rate: 0.05,
            batch_size: 32,
            regularization: 1e-5,
            cold_init_scale: 0.05,
            source_weights: [(Source::Natural, 1.0), (Source::Boost, 1.0)].into_iter().collect(),
            natural_window_slots: 3,
            user_sample_size: 1000,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cold_embedding_dim == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::config("stack: dimensions and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.regularization >= 0.0 && self.cold_init_scale >= 0.0) {
            return Err(Error::config("stack: learning_rate, regularization and cold_init_scale must be >= 0"));
        }
        if self.source_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("stack: source weights must be finite and >= 0"));
        }
        if self.natural_window_slots == 0 {
            return Err(Error::config("stack.natural_window_slots must be >= 1"));
        }
        if self.user_sample_size == 0 {
            return Err(Error::config("stack.user_sample_size must be >= 1"));
        }
        Ok(())
    }
}

/// Dimensions of each block of the stacked vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackLayout {
    pub version: u32,
    pub user_embedding: usize,
    pub user_features: usize,
    pub cold_embedding: usize,
    pub boost_features: usize,
    pub natural_features: usize,
}

pub const NATURAL_FEATURE_DIM: usize = 3;

impl StackLayout {
    pub fn new(user_embedding: usize, cold_embedding: usize, num_categories: usize) -> Self {
        Self {
            version: STACK_LAYOUT_VERSION,
            user_embedding,
            user_features: USER_FEATURE_DIM,
            cold_embedding,
            // category one-hot, observed quality, recency, stage, boost pv, boost ctr
            boost_features: num_categories + 5,
            natural_features: NATURAL_FEATURE_DIM,
        }
    }

    pub fn total(&self) -> usize {
        1 + self.user_embedding + self.user_features + self.cold_embedding + self.boost_features + self.natural_features
    }

    /// Offset of the cold embedding inside the concatenated vector.
    pub fn cold_offset(&self) -> usize {
        1 + self.user_embedding + self.user_features
    }
}

/// Item-level real-time statistics at scoring time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealtimeStats {
    /// Current boost stage, 0 when not boosting.
    pub stage: u8,
    pub boost_pv: u64,
    pub boost_clicks: u64,
    /// Natural-channel exposures inside the sliding window.
    pub natural_pv: u64,
    pub natural_clicks: u64,
}

impl RealtimeStats {
    pub fn has_history(&self) -> bool {
        self.boost_pv > 0 || self.natural_pv > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StackFeatureVector<T: Real> {
    pub foundation_score: T,
    pub user_embedding: Vec<T>,
    pub user_features: Vec<T>,
    pub cold_embedding: Vec<T>,
    pub boost_features: Vec<T>,
    pub natural_features: Vec<T>,
}

impl<T: Real> StackFeatureVector<T> {
    /// `[foundation score, user embedding, user features, cold embedding, boost, natural]`.
    /// The score enters as its logit so the head starts on the scale it
    /// has to produce.
    pub fn concat(&self) -> Vec<T> {
        let mut x = Vec::with_capacity(
            1 + self.user_embedding.len()
                + self.user_features.len()
                + self.cold_embedding.len()
                + self.boost_features.len()
                + self.natural_features.len(),
        );
        x.push(logit(clamp_probability(self.foundation_score)));
        x.extend_from_slice(&self.user_embedding);
        x.extend_from_slice(&self.user_features);
        x.extend_from_slice(&self.cold_embedding);
        x.extend_from_slice(&self.boost_features);
        x.extend_from_slice(&self.natural_features);
        x
    }

    pub fn check(&self, layout: &StackLayout) -> Result<()> {
        let blocks = [
            (self.user_embedding.len(), layout.user_embedding),
            (self.user_features.len(), layout.user_features),
            (self.cold_embedding.len(), layout.cold_embedding),
            (self.boost_features.len(), layout.boost_features),
            (self.natural_features.len(), layout.natural_features),
        ];
        for (got, expected) in blocks {
            if got != expected {
                return Err(Error::Feature { expected, got });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StackModel<T: Real> {
    pub layout: StackLayout,
    pub mlp: Mlp<T>,
    /// Cold embeddings that have been trained; others are derived on demand.
    pub cold_embedding_table: BTreeMap<ItemId, Vec<T>>,
    pub regularization_coeff: T,
    pub source_weights: BTreeMap<Source, T>,
    pub stage_count: u8,
    pub cold_window: u32,
    pub num_categories: usize,
    cold_seed: u64,
    cold_init_scale: f64,
}

/// One labelled exposure with its provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedSample {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub label: bool,
    pub source: Source,
    pub slot: u32,
}

/// A sample together with the features observed when it was served. The
/// cold-embedding block is refreshed from the model at training time.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStack<T: Real> {
    pub sample: EnrichedSample,
    pub features: StackFeatureVector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads<T> {
    pub mlp: MlpGrads<T>,
    pub cold: BTreeMap<ItemId, Vec<T>>,
}

impl<T: Real> StackModel<T> {
    pub fn new(
        foundation: &FoundationModel<T>,
        cfg: &StackConfig,
        stage_count: u8,
        cold_window: u32,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let layout = StackLayout::new(foundation.embedding_dim, cfg.cold_embedding_dim, foundation.num_categories);
        let mut dims = vec![layout.total()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(1);
        let mut rng = stream_rng(seed, Stream::Training, 100);
        let mlp = Mlp::random(&dims, Activation::Tanh, &mut rng)?;
        Ok(Self {
            layout,
            mlp,
            cold_embedding_table: BTreeMap::new(),
            regularization_coeff: T::lit(cfg.regularization),
            source_weights: cfg.source_weights.iter().map(|(s, w)| (*s, T::lit(*w))).collect(),
            stage_count: stage_count.max(1),
            cold_window: cold_window.max(1),
            num_categories: foundation.num_categories,
            cold_seed: seed,
            cold_init_scale: cfg.cold_init_scale,
        })
    }

    /// Current cold embedding of `item`; untouched items get a seeded small
    /// uniform vector that depends only on `(seed, item)`.
    pub fn cold_embedding(&self, item: ItemId) -> Vec<T> {
        if let Some(e) = self.cold_embedding_table.get(&item) {
            return e.clone();
        }
        let mut rng = stream_rng(mix64(self.cold_seed), Stream::ColdInit, item.0 as u64);
        let a = self.cold_init_scale;
        (0..self.layout.cold_embedding)
            .map(|_| if a > 0.0 { T::lit(rng.random_range(-a..=a)) } else { T::zero() })
            .collect()
    }

    pub fn source_weight(&self, s: Source) -> Result<T> {
        self.source_weights
            .get(&s)
            .copied()
            .ok_or_else(|| Error::config(format!("source {s:?} has no configured weight")))
    }
}

/// Builds `x_stack` for one (user, item) pair.
pub fn build_stack_features<T: Real>(
    foundation: &FoundationModel<T>,
    model: &StackModel<T>,
    world: &WorldState,
    user: UserId,
    item: ItemId,
    realtime: &RealtimeStats,
    slot: u32,
) -> Result<StackFeatureVector<T>> {
    let score = foundation.predict(world, user, item)?;
    build_stack_features_with_score(foundation, model, world, user, item, realtime, slot, score)
}

/// As [`build_stack_features`] with a foundation score computed elsewhere.
#[allow(clippy::too_many_arguments)]
pub fn build_stack_features_with_score<T: Real>(
    foundation: &FoundationModel<T>,
    model: &StackModel<T>,
    world: &WorldState,
    user: UserId,
    item: ItemId,
    realtime: &RealtimeStats,
    slot: u32,
    foundation_score: T,
) -> Result<StackFeatureVector<T>> {
    let u = world.user(user)?;
    let it = world.item(item)?;
    let c = model.num_categories;
    let mut boost = vec![T::zero(); model.layout.boost_features];
    boost[it.category_id.index()] = T::one();
    let age = it.age(slot as i64).max(0) as f64;
    boost[c] = T::lit(it.quality_signal);
    boost[c + 1] = T::lit((age / model.cold_window as f64).min(1.0));
    boost[c + 2] = T::lit(realtime.stage as f64 / model.stage_count as f64);
    boost[c + 3] = T::lit((realtime.boost_pv as f64).ln_1p());
    if realtime.boost_pv > 0 {
        boost[c + 4] = T::lit(realtime.boost_clicks as f64 / realtime.boost_pv as f64);
    }
    let natural = if realtime.natural_pv > 0 {
        vec![
            T::lit((realtime.natural_pv as f64).ln_1p()),
            T::lit((realtime.natural_clicks as f64).ln_1p()),
            T::lit(realtime.natural_clicks as f64 / realtime.natural_pv as f64),
        ]
    } else {
        vec![T::zero(); NATURAL_FEATURE_DIM]
    };
    let x = StackFeatureVector {
        foundation_score,
        user_embedding: foundation.user_embedding(user)?.to_vec(),
        user_features: user_features(u),
        cold_embedding: model.cold_embedding(item),
        boost_features: boost,
        natural_features: natural,
    };
    x.check(&model.layout)?;
    Ok(x)
}

/// `σ(MLP(x))`. Pure.
pub fn stack_predict<T: Real>(model: &StackModel<T>, x: &StackFeatureVector<T>) -> Result<T> {
    x.check(&model.layout)?;
    Ok(sigmoid(model.mlp.logit(&x.concat())))
}

/// `Σ ω·BCE(y, ŷ)` with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce<T: Real>(labels: &[bool], predictions: &[T], weights: &[T]) -> Result<T> {
    if labels.is_empty() || labels.len() != predictions.len() || labels.len() != weights.len() {
        return Err(Error::Training("loss needs equally long, non-empty inputs".into()));
    }
    let mut loss = T::zero();
    for ((&y, &p), &w) in labels.iter().zip(predictions).zip(weights) {
        if !p.is_finite() {
            return Err(Error::Numeric(format!("non-finite prediction {p}")));
        }
        let p = clamp_probability(p);
        loss += w * if y { -p.ln() } else { -(T::one() - p).ln() };
    }
    Ok(loss)
}

/// Loss and gradients of a batch: source-weighted cross-entropy plus the
/// squared norm of the MLP and of the cold embeddings the batch touches.
/// Each sample is scored with the model's current cold embedding.
pub fn stack_loss<T: Real>(model: &StackModel<T>, batch: &[LabeledStack<T>]) -> Result<(T, StackGrads<T>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let off = model.layout.cold_offset();
    let m = model.layout.cold_embedding;
    let mut grads = StackGrads { mlp: MlpGrads::zeros_like(&model.mlp), cold: BTreeMap::new() };
    let mut loss = T::zero();
    for s in batch {
        s.features.check(&model.layout)?;
        let mut x = s.features.concat();
        let e = model.cold_embedding(s.sample.item_id);
        x[off..off + m].copy_from_slice(&e);
        let w = model.source_weight(s.sample.source)?;
        let tape = model.mlp.forward(&x);
        let raw = sigmoid(tape.logit());
        let p = clamp_probability(raw);
        let y = if s.sample.label { T::one() } else { T::zero() };
        loss += w * -(y * p.ln() + (T::one() - y) * (T::one() - p).ln());
        // d BCE / d logit is p - y; the clamp is flat, so zero gradient there.
        let dlogit = if p == raw { w * (p - y) } else { T::zero() };
        let dx = model.mlp.backward(&tape, dlogit, &mut grads.mlp);
        let g = grads.cold.entry(s.sample.item_id).or_insert_with(|| vec![T::zero(); m]);
        for k in 0..m {
            g[k] += dx[off + k];
        }
    }
    let alpha = model.regularization_coeff;
    if alpha > T::zero() {
        let two = T::lit(2.0);
        loss += alpha * model.mlp.sq_norm();
        model.mlp.add_l2_grad(alpha, &mut grads.mlp);
        for (item, g) in grads.cold.iter_mut() {
            let e = model.cold_embedding(*item);
            for k in 0..m {
                loss += alpha * e[k] * e[k];
                g[k] += two * alpha * e[k];
            }
        }
    }
    Ok((loss, grads))
}

/// Incremental SGD over one slot's samples, in order, in minibatches.
/// Each step uses the batch-mean gradient. Empty input or a zero learning
/// rate leaves the model untouched.
pub fn fine_tune<T: Real>(model: &mut StackModel<T>, samples: &[LabeledStack<T>], cfg: &StackConfig) -> Result<()> {
    if samples.is_empty() || cfg.learning_rate == 0.0 {
        return Ok(());
    }
    for batch in samples.chunks(cfg.batch_size.max(1)) {
        let (loss, grads) = stack_loss(model, batch)?;
        if !loss.is_finite() {
            return Err(Error::Training("stack loss diverged".into()));
        }
        let step = T::lit(cfg.learning_rate) / T::from_count(batch.len());
        model.mlp.apply(&grads.mlp, step);
        for (item, g) in grads.cold {
            let mut e = model.cold_embedding(item);
            for (v, d) in e.iter_mut().zip(&g) {
                *v -= step * *d;
            }
            model.cold_embedding_table.insert(item, e);
        }
    }
    Ok(())
}

/// Predicted CTRs of `item` for every user of the sample, in sample order.
#[allow(clippy::too_many_arguments)]
pub fn potential_distribution<T: Real>(
    model: &StackModel<T>,
    foundation: &FoundationModel<T>,
    world: &WorldState,
    item: ItemId,
    user_sample: &[UserId],
    realtime: &RealtimeStats,
    slot: u32,
) -> Result<Vec<T>> {
    if user_sample.is_empty() {
        return Err(Error::config("potential distribution needs a non-empty user sample"));
    }
    user_sample
        .iter()
        .map(|&u| {
            let x = build_stack_features(foundation, model, world, u, item, realtime, slot)?;
            stack_predict(model, &x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::TrainConfig;
    use crate::world::{generate_world, WorldConfig};

    fn setup() -> (WorldState, FoundationModel<f64>, StackModel<f64>) {
        let mut w =
            generate_world(&WorldConfig { num_users: 50, num_warm_items: 20, ..Default::default() }, 3).unwrap();
        w.spawn_cold_items(0).unwrap();
        let f = FoundationModel::<f64>::new(&w, &TrainConfig::default(), 0, 3).unwrap();
        let s = StackModel::new(&f, &StackConfig::default(), 3, 30, 3).unwrap();
        (w, f, s)
    }

    fn cold_item(w: &WorldState) -> ItemId {
        w.items.iter().find(|i| i.upload_slot == 0).unwrap().item_id
    }

    #[test]
    fn empty_history_zeroes_dynamic_features() {
        let (w, f, s) = setup();
        let item = cold_item(&w);
        let x = build_stack_features(&f, &s, &w, UserId(1), item, &RealtimeStats::default(), 0).unwrap();
        assert!(x.natural_features.iter().all(|v| *v == 0.0));
        let c = s.num_categories;
        assert_eq!(x.boost_features[c], w.item(item).unwrap().quality_signal);
        assert!(x.boost_features[c + 1..].iter().all(|v| *v == 0.0));
        assert!(x.foundation_score > 0.0 && x.foundation_score < 1.0);
        assert_eq!(x.concat().len(), s.layout.total());
        let again = build_stack_features(&f, &s, &w, UserId(1), item, &RealtimeStats::default(), 0).unwrap();
        assert_eq!(x, again);
    }

    #[test]
    fn natural_ctr_feature() {
        let (w, f, s) = setup();
        let rt = RealtimeStats { natural_pv: 10, natural_clicks: 2, ..Default::default() };
        let x = build_stack_features(&f, &s, &w, UserId(1), cold_item(&w), &rt, 0).unwrap();
        assert_eq!(x.natural_features[2], 0.2);
    }

    #[test]
    fn dimension_mismatch_is_feature_error() {
        let (w, f, s) = setup();
        let mut x = build_stack_features(&f, &s, &w, UserId(1), cold_item(&w), &RealtimeStats::default(), 0).unwrap();
        x.natural_features.push(0.0);
        assert!(matches!(stack_predict(&s, &x), Err(Error::Feature { .. })));
    }

    #[test]
    fn zero_model_predicts_half_and_single_layer_logit_one() {
        let (w, f, mut s) = setup();
        let x = build_stack_features(&f, &s, &w, UserId(1), cold_item(&w), &RealtimeStats::default(), 0).unwrap();
        s.mlp = Mlp::zeros(&[s.layout.total(), 1], Activation::Tanh).unwrap();
        assert_eq!(stack_predict(&s, &x).unwrap(), 0.5);
        // Weight 1 on the category one-hot entry of this item gives logit 1.
        let cat = w.item(cold_item(&w)).unwrap().category_id.index();
        let idx = s.layout.cold_offset() + s.layout.cold_embedding + cat;
        s.mlp.layers[0].weights[idx] = 1.0;
        assert!((stack_predict(&s, &x).unwrap() - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn bce_values() {
        let l = weighted_bce(&[true], &[0.5f64], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l2 = weighted_bce(&[true], &[0.5f64], &[2.0]).unwrap();
        assert!((l2 - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!(weighted_bce(&[true], &[1.0f64], &[1.0]).unwrap().is_finite());
        assert!(weighted_bce::<f64>(&[], &[], &[]).is_err());
    }

    #[test]
    fn fine_tune_noops() {
        let (w, f, mut s) = setup();
        let before = s.clone();
        fine_tune(&mut s, &[], &StackConfig::default()).unwrap();
        assert_eq!(s, before);
        let x = build_stack_features(&f, &s, &w, UserId(1), cold_item(&w), &RealtimeStats::default(), 0).unwrap();
        let sample =
            EnrichedSample { user_id: UserId(1), item_id: cold_item(&w), label: true, source: Source::Boost, slot: 0 };
        let batch = vec![LabeledStack { sample, features: x }];
        fine_tune(&mut s, &batch, &StackConfig { learning_rate: 0.0, ..Default::default() }).unwrap();
        assert_eq!(s, before);
        fine_tune(&mut s, &batch, &StackConfig::default()).unwrap();
        assert_ne!(s, before);
    }

    #[test]
    fn potential_distribution_singleton_and_empty() {
        let (w, f, s) = setup();
        let item = cold_item(&w);
        let rt = RealtimeStats::default();
        let d = potential_distribution(&s, &f, &w, item, &[UserId(4)], &rt, 0).unwrap();
        let x = build_stack_features(&f, &s, &w, UserId(4), item, &rt, 0).unwrap();
        assert_eq!(d, vec![stack_predict(&s, &x).unwrap()]);
        assert!(matches!(potential_distribution(&s, &f, &w, item, &[], &rt, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cold_embedding_init_is_pure_and_small() {
        let (w, _, s) = setup();
        let item = cold_item(&w);
        assert_eq!(s.cold_embedding(item), s.cold_embedding(item));
        assert!(s.cold_embedding(item).iter().all(|v| v.abs() <= 0.05));
    }
}
