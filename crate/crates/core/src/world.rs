//! Seeded synthetic marketplace.
//!
//! Users and items live in a shared latent space. Click probability grows
//! with the item's accumulated page views and the natural ranker favours
//! items that recently collected clicks, so exposure concentrates on
//! whatever is already being shown unless something intervenes.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Channel, EventRecord};
use crate::ids::{CategoryId, ItemId, UserId};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::scalar::sigmoid;

/// Parameters of the ground-truth click/pay model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthModel {
    pub weight_pref: f64,
    pub weight_pop: f64,
    pub weight_quality: f64,
    pub bias: f64,
    /// Conditional pay probability is `pay_scale * intrinsic_quality`.
    pub pay_scale: f64,
    pub seed: u64,
}

impl Default for GroundTruthModel {
    fn default() -> Self {
        Self { weight_pref: 1.6, weight_pop: 0.08, weight_quality: 2.0, bias: -3.9, pay_scale: 0.3, seed: 0 }
    }
}

impl GroundTruthModel {
    #[inline]
    pub fn logit(&self, affinity: f64, pv_so_far: u64, quality: f64) -> f64 {
        self.weight_pref * affinity
            + self.weight_pop * (1.0 + pv_so_far as f64).ln()
            + self.weight_quality * quality
            + self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_warm_items: usize,
    pub latent_dim: usize,
    pub num_categories: usize,
    pub new_items_per_slot: usize,
    /// Items uploaded within this many slots count as cold.
    pub cold_window: u32,
    pub mean_arrival_rate: f64,
    /// Gamma shape of the per-user arrival rate; lower is more skewed.
    pub arrival_shape: f64,
    pub user_scale: f64,
    pub category_spread: f64,
    pub item_noise: f64,
    /// Std-dev of the noise on the observable quality signal.
    pub quality_signal_noise: f64,
    /// Log-normal parameters of the page views warm items bring along.
    pub legacy_pv_log_mean: f64,
    pub legacy_pv_log_sd: f64,
    pub session_length: usize,
    /// Fraction of each session reserved for the boost channel.
    pub boost_share: f64,
    pub natural_pool_popular: usize,
    pub natural_pool_random: usize,
    pub natural_pop_weight: f64,
    /// Scale of the Gumbel noise added to natural scores, i.e. the
    /// temperature of Plackett-Luce sampling; 0 ranks greedily.
    pub natural_temperature: f64,
    /// Per-slot decay of the recent counters behind popularity.
    pub popularity_decay: f64,
    pub popularity_prior_pv: f64,
    pub popularity_prior_ctr: f64,
    pub gmv_median_min: f64,
    pub gmv_median_max: f64,
    pub gmv_log_sd: f64,
    pub ground_truth: GroundTruthModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_warm_items: 300,
            latent_dim: 8,
            num_categories: 8,
            new_items_per_slot: 2,
            cold_window: 30,
            mean_arrival_rate: 0.4,
            arrival_shape: 2.0,
            user_scale: 0.5,
            category_spread: 0.6,
            item_noise: 0.4,
            quality_signal_noise: 0.15,
            legacy_pv_log_mean: 200f64.ln(),
            legacy_pv_log_sd: 1.2,
            session_length: 20,
            boost_share: 0.5,
            natural_pool_popular: 40,
            natural_pool_random: 20,
            natural_pop_weight: 0.2,
            natural_temperature: 1.0,
            popularity_decay: 0.8,
            popularity_prior_pv: 20.0,
            popularity_prior_ctr: 0.05,
            gmv_median_min: 10.0,
            gmv_median_max: 100.0,
            gmv_log_sd: 0.5,
            ground_truth: GroundTruthModel::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_users", self.num_users),
            ("num_warm_items", self.num_warm_items),
            ("latent_dim", self.latent_dim),
            ("num_categories", self.num_categories),
            ("session_length", self.session_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("world.{name} must be positive")));
            }
        }
        if self.num_categories > u16::MAX as usize {
            return Err(Error::config("world.num_categories too large"));
        }
        if self.cold_window == 0 {
            return Err(Error::config("world.cold_window must be positive"));
        }
        if !(0.0..=1.0).contains(&self.boost_share) {
            return Err(Error::config("world.boost_share must lie in [0, 1]"));
        }
        let gt = &self.ground_truth;
        if !(gt.pay_scale > 0.0 && gt.pay_scale <= 1.0) {
            return Err(Error::config("ground_truth.pay_scale must lie in (0, 1]"));
        }
        let finite_nonneg = [
            ("mean_arrival_rate", self.mean_arrival_rate),
            ("user_scale", self.user_scale),
            ("category_spread", self.category_spread),
            ("item_noise", self.item_noise),
            ("quality_signal_noise", self.quality_signal_noise),
            ("legacy_pv_log_sd", self.legacy_pv_log_sd),
            ("gmv_log_sd", self.gmv_log_sd),
            ("popularity_prior_pv", self.popularity_prior_pv),
            ("natural_temperature", self.natural_temperature),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("world.{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.popularity_decay) {
            return Err(Error::config("world.popularity_decay must lie in [0, 1)"));
        }
        if !(self.arrival_shape > 0.0) {
            return Err(Error::config("world.arrival_shape must be positive"));
        }
        if !(self.gmv_median_min > 0.0 && self.gmv_median_max >= self.gmv_median_min) {
            return Err(Error::config("world.gmv_median range invalid"));
        }
        Ok(())
    }

    /// Number of boost positions in one session.
    pub fn boost_slots(&self) -> usize {
        (self.session_length as f64 * self.boost_share).round() as usize
    }

    pub fn natural_slots(&self) -> usize {
        self.session_length - self.boost_slots().min(self.session_length)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub latent_pref: Vec<f64>,
    /// 1 (least active) ..= 10 (most active), the decile of `arrival_rate`.
    pub activity_grade: u8,
    /// Consecutive cold-item exposures without a click.
    pub fatigue_counter: u32,
    pub arrival_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemProfile {
    pub item_id: ItemId,
    pub category_id: CategoryId,
    pub latent_attr: Vec<f64>,
    /// Raw attributes: category one-hot, upload slot, observed quality.
    pub content_features: Vec<f64>,
    pub upload_slot: i32,
    pub intrinsic_quality: f64,
    pub quality_signal: f64,
}

impl ItemProfile {
    #[inline]
    pub fn is_cold(&self, slot: i64, cold_window: u32) -> bool {
        let age = slot - self.upload_slot as i64;
        age >= 0 && age < cold_window as i64
    }

    #[inline]
    pub fn age(&self, slot: i64) -> i64 {
        slot - self.upload_slot as i64
    }
}

/// Running exposure counters of one item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemCounters {
    /// All page views including pre-history.
    pub pv: u64,
    pub clicks: u64,
    pub natural_pv: u64,
    pub natural_clicks: u64,
    pub boost_pv: u64,
    pub boost_clicks: u64,
    /// Exponentially decayed PV and clicks, all channels.
    pub recent_pv: f64,
    pub recent_clicks: f64,
}

/// One item offered to the boost channel in a session.
#[derive(Clone, Debug, PartialEq)]
pub struct BoostExposure {
    pub item_id: ItemId,
    pub bid: Option<f64>,
    pub price: Option<f64>,
    pub stage: u8,
}

/// Anything that can score (user, item) affinity as a click probability.
pub trait CtrScorer {
    fn ctr(&self, world: &WorldState, user: UserId, item: ItemId) -> f64;
}

/// Constant scorer; makes the natural ranker purely popularity driven.
pub struct ConstantScorer(pub f64);

impl CtrScorer for ConstantScorer {
    fn ctr(&self, _: &WorldState, _: UserId, _: ItemId) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: WorldConfig,
    pub seed: u64,
    pub truth: GroundTruthModel,
    pub users: Vec<UserProfile>,
    pub items: Vec<ItemProfile>,
    pub counters: Vec<ItemCounters>,
    pub category_centroids: Vec<Vec<f64>>,
    pub category_gmv_median: Vec<f64>,
    /// Items with the highest popularity score, refreshed once per slot.
    pub popular_pool: Vec<ItemId>,
}

/// Builds the initial world: users and warm items uploaded before slot 0.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let mut rng = stream_rng(seed, Stream::World, 0);
    let d = config.latent_dim;

    let centroid_dist = normal(config.category_spread)?;
    let category_centroids: Vec<Vec<f64>> =
        (0..config.num_categories).map(|_| (0..d).map(|_| centroid_dist.sample(&mut rng)).collect()).collect();
    let category_gmv_median: Vec<f64> =
        (0..config.num_categories).map(|_| rng.random_range(config.gmv_median_min..=config.gmv_median_max)).collect();

    let pref_dist = normal(config.user_scale)?;
    let rate_dist = Gamma::new(config.arrival_shape, config.mean_arrival_rate / config.arrival_shape)
        .map_err(|e| Error::config(format!("arrival distribution: {e}")))?;
    let mut users: Vec<UserProfile> = (0..config.num_users)
        .map(|u| UserProfile {
            user_id: UserId(u as u32),
            latent_pref: (0..d).map(|_| pref_dist.sample(&mut rng)).collect(),
            activity_grade: 1,
            fatigue_counter: 0,
            arrival_rate: if config.mean_arrival_rate > 0.0 { rate_dist.sample(&mut rng) } else { 0.0 },
        })
        .collect();
    assign_activity_grades(&mut users);

    let mut truth = config.ground_truth.clone();
    truth.seed = seed;
    let mut world = WorldState {
        config: config.clone(),
        seed,
        truth,
        users,
        items: Vec::new(),
        counters: Vec::new(),
        category_centroids,
        category_gmv_median,
        popular_pool: Vec::new(),
    };

    let legacy = LogNormal::new(config.legacy_pv_log_mean, config.legacy_pv_log_sd)
        .map_err(|e| Error::config(format!("legacy pv distribution: {e}")))?;
    let span = 100i32;
    for _ in 0..config.num_warm_items {
        let upload = -(config.cold_window as i32) - rng.random_range(0..span);
        let id = world.push_item(upload, &mut rng)?;
        let item = &world.items[id.index()];
        let pv = legacy.sample(&mut rng).round() as u64;
        // Pre-history clicks at the item's population-average click rate.
        let p = sigmoid(world.truth.logit(0.0, pv, item.intrinsic_quality));
        let clicks = (pv as f64 * p).round() as u64;
        let c = &mut world.counters[id.index()];
        c.pv = pv;
        c.clicks = clicks;
        let keep = 1.0 - config.popularity_decay;
        c.recent_pv = pv as f64 * keep;
        c.recent_clicks = clicks as f64 * keep;
    }
    world.refresh_popular_pool();
    Ok(world)
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::config(format!("normal({sd}): {e}")))
}

/// Activity grade is the decile of the arrival rate (ties broken by id).
fn assign_activity_grades(users: &mut [UserProfile]) {
    let n = users.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| users[a].arrival_rate.total_cmp(&users[b].arrival_rate).then(a.cmp(&b)));
    for (rank, &u) in order.iter().enumerate() {
        users[u].activity_grade = (1 + rank * 10 / n) as u8;
    }
}

impl WorldState {
    fn push_item(&mut self, upload_slot: i32, rng: &mut SimRng) -> Result<ItemId> {
        let cfg = &self.config;
        let id = ItemId(self.items.len() as u32);
        let category = rng.random_range(0..cfg.num_categories);
        let noise = normal(cfg.item_noise)?;
        let latent_attr: Vec<f64> = self.category_centroids[category].iter().map(|c| c + noise.sample(rng)).collect();
        let quality: f64 = rng.random();
        let signal_noise = normal(cfg.quality_signal_noise)?;
        let quality_signal = (quality + signal_noise.sample(rng)).clamp(0.0, 1.0);
        let mut content_features = vec![0.0; cfg.num_categories];
        content_features[category] = 1.0;
        content_features.push(upload_slot as f64);
        content_features.push(quality_signal);
        self.items.push(ItemProfile {
            item_id: id,
            category_id: CategoryId(category as u16),
            latent_attr,
            content_features,
            upload_slot,
            intrinsic_quality: quality,
            quality_signal,
        });
        self.counters.push(ItemCounters::default());
        Ok(id)
    }

    /// Uploads this slot's new items. Depends only on `(seed, slot)`.
    pub fn spawn_cold_items(&mut self, slot: u32) -> Result<Vec<ItemId>> {
        let mut rng = stream_rng(self.seed, Stream::Items, slot as u64);
        (0..self.config.new_items_per_slot).map(|_| self.push_item(slot as i32, &mut rng)).collect()
    }

    pub fn user(&self, id: UserId) -> Result<&UserProfile> {
        self.users.get(id.index()).ok_or(Error::Lookup { kind: "user", id: id.0 })
    }

    pub fn item(&self, id: ItemId) -> Result<&ItemProfile> {
        self.items.get(id.index()).ok_or(Error::Lookup { kind: "item", id: id.0 })
    }

    pub fn counters(&self, id: ItemId) -> &ItemCounters {
        &self.counters[id.index()]
    }

    pub fn is_cold(&self, id: ItemId, slot: i64) -> bool {
        self.items[id.index()].is_cold(slot, self.config.cold_window)
    }

    /// Sessions opened in `slot`, in arrival order. Depends only on `(seed, slot)`.
    pub fn arrivals(&self, slot: u32) -> Vec<UserId> {
        self.arrivals_from(Stream::Arrivals, slot as u64)
    }

    /// Poisson arrivals drawn from an arbitrary random stream.
    pub fn arrivals_from(&self, stream: Stream, index: u64) -> Vec<UserId> {
        let mut rng = stream_rng(self.seed, stream, index);
        let mut out = Vec::new();
        for u in &self.users {
            if u.arrival_rate <= 0.0 {
                continue;
            }
            let n = Poisson::new(u.arrival_rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
            out.extend(std::iter::repeat_n(u.user_id, n));
        }
        out.shuffle(&mut rng);
        out
    }

    #[inline]
    pub fn affinity(&self, user: &UserProfile, item: &ItemProfile) -> f64 {
        user.latent_pref.iter().zip(&item.latent_attr).map(|(a, b)| a * b).sum()
    }

    #[inline]
    fn click_prob_unchecked(&self, user: &UserProfile, item: &ItemProfile) -> f64 {
        let pv = self.counters[item.item_id.index()].pv;
        sigmoid(self.truth.logit(self.affinity(user, item), pv, item.intrinsic_quality))
    }

    /// Engagement-weighted popularity used by the natural ranker:
    /// `ln(1 + recent_pv * smoothed_ctr)` over the decayed counters.
    pub fn popularity(&self, item: ItemId) -> f64 {
        let c = &self.counters[item.index()];
        let b = self.config.popularity_prior_pv;
        let a = b * self.config.popularity_prior_ctr;
        let ctr = (c.recent_clicks + a) / (c.recent_pv + b);
        (1.0 + c.recent_pv * ctr).ln()
    }

    /// Ages the recent counters by one slot.
    pub fn decay_popularity(&mut self) {
        let d = self.config.popularity_decay;
        for c in &mut self.counters {
            c.recent_pv *= d;
            c.recent_clicks *= d;
        }
    }

    /// Recomputes the popular candidate pool from current counters.
    pub fn refresh_popular_pool(&mut self) {
        let mut scored: Vec<(f64, ItemId)> =
            self.items.iter().map(|i| (self.popularity(i.item_id), i.item_id)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        self.popular_pool = scored.into_iter().take(self.config.natural_pool_popular).map(|(_, id)| id).collect();
    }
}

/// Ground-truth click probability of `user` on `item`.
pub fn true_click_prob(world: &WorldState, user: UserId, item: ItemId, _slot: u32) -> Result<f64> {
    let u = world.user(user)?;
    let i = world.item(item)?;
    Ok(world.click_prob_unchecked(u, i))
}

/// The natural (user-oriented) channel.
///
/// Candidates are the popular pool plus a few random catalog items; they
/// are ranked by `logit(scorer) + natural_pop_weight * popularity` plus
/// Gumbel noise of scale `natural_temperature`. Cold items get no special
/// treatment. When the catalog is not larger than the pool the whole
/// catalog is ranked.
pub fn natural_recommend<S: CtrScorer, R: Rng>(
    world: &WorldState,
    scorer: &S,
    user: UserId,
    slot: u32,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    world.user(user)?;
    if k == 0 {
        return Err(Error::config("natural_recommend: k must be >= 1"));
    }
    let cfg = &world.config;
    let catalog = world.items.len();
    let pool_size = cfg.natural_pool_popular + cfg.natural_pool_random;
    let candidates: Vec<ItemId> = if catalog <= pool_size.max(k) {
        (0..catalog as u32).map(ItemId).collect()
    } else {
        let mut set: BTreeSet<ItemId> = world.popular_pool.iter().copied().collect();
        let mut draws = 0;
        while set.len() < world.popular_pool.len() + cfg.natural_pool_random && draws < 4 * pool_size {
            set.insert(ItemId(rng.random_range(0..catalog as u32)));
            draws += 1;
        }
        set.into_iter().collect()
    };
    let _ = slot;
    let temperature = cfg.natural_temperature;
    let mut scored: Vec<(f64, ItemId)> = candidates
        .into_iter()
        .map(|i| {
            let p = crate::scalar::clamp_probability(scorer.ctr(world, user, i));
            let mut s = crate::scalar::logit(p) + cfg.natural_pop_weight * world.popularity(i);
            if temperature > 0.0 {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                s -= temperature * (-u.ln()).ln();
            }
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// `k` distinct uniformly random items drawn from `pool`.
pub fn random_slate<R: Rng>(pool: &[ItemId], k: usize, rng: &mut R) -> Vec<ItemId> {
    pool.choose_multiple(rng, k.min(pool.len())).copied().collect()
}

/// Plays one session: samples clicks and payments for every exposed item,
/// updates item counters and the user's fatigue, and returns the events.
///
/// Items appearing in both lists are credited to the boost channel.
pub fn simulate_session<R: Rng>(
    world: &mut WorldState,
    user: UserId,
    slot: u32,
    natural_items: &[ItemId],
    boost_items: &[BoostExposure],
    rng: &mut R,
) -> Result<Vec<EventRecord>> {
    world.user(user)?;
    let boosted: BTreeSet<ItemId> = boost_items.iter().map(|b| b.item_id).collect();
    let mut seen = BTreeSet::new();
    let mut plan: Vec<(ItemId, Option<&BoostExposure>)> = Vec::new();
    for b in boost_items {
        if seen.insert(b.item_id) {
            plan.push((b.item_id, Some(b)));
        }
    }
    for &i in natural_items {
        if !boosted.contains(&i) && seen.insert(i) {
            plan.push((i, None));
        }
    }

    let mut events = Vec::with_capacity(plan.len());
    for (item_id, boost) in plan {
        let item = world.item(item_id)?;
        let u = &world.users[user.index()];
        let p_click = world.click_prob_unchecked(u, item);
        let clicked = rng.random::<f64>() < p_click;
        let p_pay = world.truth.pay_scale * item.intrinsic_quality;
        let paid = clicked && rng.random::<f64>() < p_pay;
        let gmv_value = if paid {
            let median = world.category_gmv_median[item.category_id.index()];
            let v = LogNormal::new(median.ln(), world.config.gmv_log_sd).map(|d| d.sample(rng)).unwrap_or(median);
            v.max(f64::MIN_POSITIVE)
        } else {
            0.0
        };
        let cold = item.is_cold(slot as i64, world.config.cold_window);

        let c = &mut world.counters[item_id.index()];
        c.pv += 1;
        c.clicks += clicked as u64;
        c.recent_pv += 1.0;
        c.recent_clicks += clicked as u64 as f64;
        let channel = if boost.is_some() { Channel::Boost } else { Channel::Natural };
        match channel {
            Channel::Natural => {
                c.natural_pv += 1;
                c.natural_clicks += clicked as u64;
            }
            Channel::Boost => {
                c.boost_pv += 1;
                c.boost_clicks += clicked as u64;
            }
        }
        if cold {
            let u = &mut world.users[user.index()];
            u.fatigue_counter = if clicked { 0 } else { u.fatigue_counter.saturating_add(1) };
        }
        events.push(EventRecord {
            slot,
            user_id: user,
            item_id,
            channel,
            clicked,
            paid,
            gmv_value,
            bid: boost.and_then(|b| b.bid),
            price: boost.and_then(|b| b.price),
            stage_at_event: boost.map(|b| b.stage),
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig { num_users: 100, num_warm_items: 50, latent_dim: 8, ..Default::default() }
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate_world(&small(), 7).unwrap();
        let b = generate_world(&small(), 7).unwrap();
        assert_eq!(a.users.len(), 100);
        assert_eq!(a.items.len(), 50);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn seeds_change_latents() {
        let a = generate_world(&small(), 7).unwrap();
        let b = generate_world(&small(), 8).unwrap();
        assert_ne!(a.users[0].latent_pref, b.users[0].latent_pref);
        assert_ne!(a.items[0].latent_attr, b.items[0].latent_attr);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero_users = WorldConfig { num_users: 0, ..small() };
        assert!(matches!(generate_world(&zero_users, 7), Err(Error::Config(_))));
        let zero_d = WorldConfig { latent_dim: 0, ..small() };
        assert!(matches!(generate_world(&zero_d, 7), Err(Error::Config(_))));
    }

    #[test]
    fn activity_grades_are_deciles() {
        let w = generate_world(&WorldConfig { num_users: 1000, ..small() }, 3).unwrap();
        let mut counts = [0usize; 10];
        for u in &w.users {
            assert!((1..=10).contains(&u.activity_grade));
            counts[u.activity_grade as usize - 1] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
        let max_rate = w.users.iter().max_by(|a, b| a.arrival_rate.total_cmp(&b.arrival_rate)).unwrap();
        assert_eq!(max_rate.activity_grade, 10);
    }

    #[test]
    fn warm_items_are_not_cold_at_slot_zero() {
        let w = generate_world(&small(), 1).unwrap();
        assert!(w.items.iter().all(|i| !i.is_cold(0, w.config.cold_window)));
    }

    #[test]
    fn cold_items_follow_the_window() {
        let mut w = generate_world(&small(), 1).unwrap();
        let ids = w.spawn_cold_items(5).unwrap();
        assert_eq!(ids.len(), w.config.new_items_per_slot);
        let item = w.item(ids[0]).unwrap().clone();
        assert!(!item.is_cold(4, 30));
        assert!(item.is_cold(5, 30));
        assert!(item.is_cold(34, 30));
        assert!(!item.is_cold(35, 30));
    }

    fn zero_logit_world() -> WorldState {
        let mut w = generate_world(&small(), 2).unwrap();
        w.truth = GroundTruthModel {
            weight_pref: 1.0,
            weight_pop: 0.5,
            weight_quality: 1.0,
            bias: 0.0,
            pay_scale: 0.3,
            seed: 2,
        };
        let d = w.config.latent_dim;
        let mut a = vec![0.0; d];
        a[0] = 1.0;
        let mut b = vec![0.0; d];
        b[1] = 1.0;
        w.users[0].latent_pref = a;
        w.items[0].latent_attr = b;
        w.items[0].intrinsic_quality = 0.0;
        w.counters[0] = ItemCounters::default();
        w
    }

    #[test]
    fn orthogonal_latents_give_one_half() {
        let w = zero_logit_world();
        let p = true_click_prob(&w, UserId(0), ItemId(0), 0).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn click_prob_grows_with_page_views() {
        let mut w = zero_logit_world();
        let p0 = true_click_prob(&w, UserId(0), ItemId(0), 0).unwrap();
        w.counters[0].pv = 100;
        let p100 = true_click_prob(&w, UserId(0), ItemId(0), 0).unwrap();
        assert!(p100 > p0);
    }

    #[test]
    fn hand_set_logit_one() {
        let mut w = zero_logit_world();
        w.truth.weight_pop = 0.0;
        w.items[0].intrinsic_quality = 1.0;
        let p = true_click_prob(&w, UserId(0), ItemId(0), 0).unwrap();
        assert!((p - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let w = zero_logit_world();
        assert!(matches!(true_click_prob(&w, UserId(10_000), ItemId(0), 0), Err(Error::Lookup { kind: "user", .. })));
        assert!(matches!(true_click_prob(&w, UserId(0), ItemId(10_000), 0), Err(Error::Lookup { kind: "item", .. })));
    }

    #[test]
    fn popularity_dominates_equal_latents() {
        let cfg = WorldConfig { num_users: 10, num_warm_items: 20, natural_temperature: 0.0, ..small() };
        let mut w = generate_world(&cfg, 4).unwrap();
        let attr = w.items[0].latent_attr.clone();
        for (i, item) in w.items.iter_mut().enumerate() {
            item.latent_attr = attr.clone();
            w.counters[i] = ItemCounters { pv: 50, recent_pv: 50.0, ..Default::default() };
        }
        w.counters[7].recent_pv = 500.0;
        w.refresh_popular_pool();
        let mut rng = stream_rng(1, Stream::Sessions, 0);
        let ranked = natural_recommend(&w, &ConstantScorer(0.05), UserId(0), 0, 5, &mut rng).unwrap();
        assert_eq!(ranked[0], ItemId(7));
    }

    #[test]
    fn k_larger_than_catalog_returns_everything() {
        let cfg = WorldConfig { num_users: 10, num_warm_items: 12, ..small() };
        let w = generate_world(&cfg, 4).unwrap();
        let mut rng = stream_rng(1, Stream::Sessions, 0);
        let ranked = natural_recommend(&w, &ConstantScorer(0.05), UserId(1), 0, 100, &mut rng).unwrap();
        assert_eq!(ranked.len(), 12);
        let distinct: BTreeSet<_> = ranked.iter().collect();
        assert_eq!(distinct.len(), 12);
    }

    #[test]
    fn natural_ranking_is_deterministic() {
        let w = generate_world(&WorldConfig { num_warm_items: 200, ..small() }, 9).unwrap();
        let run = || {
            let mut rng = stream_rng(9, Stream::Sessions, 3);
            natural_recommend(&w, &ConstantScorer(0.05), UserId(3), 3, 9, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_session_has_no_events() {
        let mut w = generate_world(&small(), 2).unwrap();
        let mut rng = stream_rng(2, Stream::Sessions, 0);
        let ev = simulate_session(&mut w, UserId(0), 0, &[], &[], &mut rng).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn forced_click_without_pay() {
        let mut w = generate_world(&small(), 2).unwrap();
        w.truth.bias = 1e6;
        w.truth.pay_scale = 1e-300;
        let mut rng = stream_rng(2, Stream::Sessions, 0);
        let items: Vec<ItemId> = (0..5).map(ItemId).collect();
        let ev = simulate_session(&mut w, UserId(0), 0, &items, &[], &mut rng).unwrap();
        assert_eq!(ev.len(), 5);
        assert!(ev.iter().all(|e| e.clicked && !e.paid && e.gmv_value == 0.0));
    }

    #[test]
    fn boost_wins_overlap_and_tags_channels() {
        let mut w = generate_world(&small(), 2).unwrap();
        let mut rng = stream_rng(2, Stream::Sessions, 0);
        let boost = vec![BoostExposure { item_id: ItemId(3), bid: Some(0.2), price: Some(0.1), stage: 1 }];
        let natural = vec![ItemId(1), ItemId(3), ItemId(4)];
        let ev = simulate_session(&mut w, UserId(0), 0, &natural, &boost, &mut rng).unwrap();
        assert_eq!(ev.len(), 3);
        let three: Vec<_> = ev.iter().filter(|e| e.item_id == ItemId(3)).collect();
        assert_eq!(three.len(), 1);
        assert_eq!(three[0].channel, Channel::Boost);
        assert_eq!(three[0].stage_at_event, Some(1));
        for e in &ev {
            e.validate().unwrap();
        }
        assert_eq!(w.counters(ItemId(3)).boost_pv, 1);
    }

    #[test]
    fn fatigue_resets_on_cold_click() {
        let mut w = generate_world(&small(), 2).unwrap();
        let cold = w.spawn_cold_items(0).unwrap();
        w.users[0].fatigue_counter = 5;
        w.truth.bias = -1e6;
        let mut rng = stream_rng(2, Stream::Sessions, 0);
        simulate_session(&mut w, UserId(0), 0, &[cold[0]], &[], &mut rng).unwrap();
        assert_eq!(w.users[0].fatigue_counter, 6);
        // Warm items leave the counter alone.
        simulate_session(&mut w, UserId(0), 0, &[ItemId(0)], &[], &mut rng).unwrap();
        assert_eq!(w.users[0].fatigue_counter, 6);
        w.truth.bias = 1e6;
        simulate_session(&mut w, UserId(0), 0, &[cold[0]], &[], &mut rng).unwrap();
        assert_eq!(w.users[0].fatigue_counter, 0);
    }

    #[test]
    fn clicks_concentrate_around_expected_count() {
        // Binomial concentration: sum of Bernoulli(p_j) within 3 sigma.
        let cfg = WorldConfig { num_users: 300, num_warm_items: 100, ..Default::default() };
        let mut w = generate_world(&cfg, 11).unwrap();
        w.truth.weight_pop = 0.0;
        let mut rng = stream_rng(11, Stream::Sessions, 0);
        let mut expected = 0.0;
        let mut variance = 0.0;
        let mut clicks = 0u64;
        for s in 0..1000u32 {
            let user = UserId(s % 300);
            let items: Vec<ItemId> = (0..5).map(|k| ItemId((s * 7 + k * 13) % 100)).collect();
            for &i in &items {
                let p = true_click_prob(&w, user, i, 0).unwrap();
                expected += p;
                variance += p * (1.0 - p);
            }
            let ev = simulate_session(&mut w, user, 0, &items, &[], &mut rng).unwrap();
            clicks += ev.iter().filter(|e| e.clicked).count() as u64;
        }
        let z = (clicks as f64 - expected) / variance.sqrt();
        assert!(z.abs() < 3.0, "z = {z}");
    }

    #[test]
    fn arrivals_depend_only_on_seed_and_slot() {
        let w = generate_world(&small(), 5).unwrap();
        assert_eq!(w.arrivals(3), w.arrivals(3));
        let total: usize = (0..50).map(|s| w.arrivals(s).len()).sum();
        let expected: f64 = w.users.iter().map(|u| u.arrival_rate).sum::<f64>() * 50.0;
        assert!((total as f64 - expected).abs() < 4.0 * expected.sqrt() + 1.0);
    }
}
