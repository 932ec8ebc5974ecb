//! Synthetic marketplace and logging cascade.
//!
//! A catalog holds users, queries and items with latent factors; ground-truth
//! preference is a logistic function of those factors plus a category-match
//! bonus. The cascade (matching → pre-ranking → ranking → exposure → events)
//! only ever lets the best-looking items reach the user, so the resulting logs
//! carry the usual sample-selection bias. Purchases in other scenarios are
//! drawn from the user's preferences without looking at what search exposed.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::dot;

pub const CATALOG_FORMAT_VERSION: u32 = 1;
pub const SEARCH_SCENARIO: u8 = 0;
pub const N_SCENARIOS: u8 = 4;
pub const MAX_EXPOSURES: usize = 10;
pub const DAY: i64 = 86_400;

const CASCADE_SALT: u64 = 0x6361_7363_6164_6531;

pub type UserId = u32;
pub type QueryId = u32;
pub type ItemId = u32;

/// Coefficients of the ground-truth preference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelevanceModel {
    pub query_affinity: f64,
    pub user_affinity: f64,
    pub category_match: f64,
    pub quality: f64,
    pub price_mismatch: f64,
    pub bias: f64,
    pub click_max: f64,
    pub cvr_user_affinity: f64,
    pub cvr_quality: f64,
    pub cvr_price_mismatch: f64,
    pub cvr_bias: f64,
    pub cvr_max: f64,
    /// Query-item relevance (user independent), compared against the borderline.
    pub qp_affinity: f64,
    pub qp_match: f64,
    pub qp_bias: f64,
}

impl Default for RelevanceModel {
    fn default() -> Self {
        RelevanceModel {
            query_affinity: 2.0,
            user_affinity: 1.5,
            category_match: 3.0,
            quality: 0.6,
            price_mismatch: 0.4,
            bias: -5.0,
            click_max: 0.8,
            cvr_user_affinity: 2.0,
            cvr_quality: 0.5,
            cvr_price_mismatch: 0.6,
            cvr_bias: -1.0,
            cvr_max: 0.6,
            qp_affinity: 4.0,
            qp_match: 3.0,
            qp_bias: -5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub latent_dim: usize,
    pub n_categories: usize,
    pub terms_per_category: usize,
    pub n_generic_terms: usize,
    pub brands_per_category: usize,
    pub n_price_buckets: usize,
    pub n_age_buckets: usize,
    pub n_freq_buckets: usize,
    pub related_category_prob: f64,
    pub favorite_categories: usize,
    pub item_noise: f64,
    pub query_noise: f64,
    pub user_noise: f64,
    pub history_min: usize,
    pub history_max: usize,
    pub history_in_favorites: f64,
    /// Softmax sharpness used when users pick items (history, other scenarios).
    pub preference_sharpness: f64,
    pub relevance: RelevanceModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            latent_dim: 8,
            n_categories: 20,
            terms_per_category: 6,
            n_generic_terms: 10,
            brands_per_category: 2,
            n_price_buckets: 5,
            n_age_buckets: 5,
            n_freq_buckets: 4,
            related_category_prob: 0.3,
            favorite_categories: 3,
            item_noise: 0.6,
            query_noise: 0.4,
            user_noise: 0.5,
            history_min: 20,
            history_max: 40,
            history_in_favorites: 0.9,
            preference_sharpness: 3.0,
            relevance: RelevanceModel::default(),
        }
    }
}

impl SimConfig {
    pub fn vocabulary_size(&self) -> usize {
        self.n_categories * self.terms_per_category + self.n_generic_terms
    }

    pub fn n_brands(&self) -> usize {
        self.n_categories * self.brands_per_category
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("n_categories", self.n_categories),
            ("terms_per_category", self.terms_per_category),
            ("brands_per_category", self.brands_per_category),
            ("n_price_buckets", self.n_price_buckets),
            ("n_age_buckets", self.n_age_buckets),
            ("n_freq_buckets", self.n_freq_buckets),
            ("favorite_categories", self.favorite_categories),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.favorite_categories > self.n_categories {
            return Err(Error::config("favorite_categories exceeds n_categories"));
        }
        if self.terms_per_category < 3 {
            return Err(Error::config("terms_per_category must be >= 3"));
        }
        if self.history_min > self.history_max {
            return Err(Error::config("history_min > history_max"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Click,
    Collect,
    Purchase,
    Cart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub item_id: ItemId,
    pub category: u32,
    pub kind: BehaviorKind,
    pub scenario_id: u8,
    /// Seconds relative to the start of the logging window (negative = before).
    pub timestamp: i64,
}

/// Behaviors partitioned by recency relative to the start of the logging window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorHistory {
    /// Within the last day.
    pub recent: Vec<Behavior>,
    /// Days 2 to 10.
    pub short_term: Vec<Behavior>,
    /// Days 11 to 30.
    pub long_term: Vec<Behavior>,
}

impl BehaviorHistory {
    pub fn partitions(&self) -> [&[Behavior]; 3] {
        [&self.recent, &self.short_term, &self.long_term]
    }

    pub fn len(&self) -> usize {
        self.recent.len() + self.short_term.len() + self.long_term.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Behavior> {
        self.recent.iter().chain(&self.short_term).chain(&self.long_term)
    }

    /// Splits a timestamped behavior list by age (in days before `now`).
    pub fn partition(mut behaviors: Vec<Behavior>, now: i64) -> Self {
        behaviors.sort_by_key(|b| (b.timestamp, b.item_id));
        let mut out = BehaviorHistory::default();
        for b in behaviors {
            let age = now - b.timestamp;
            if age <= DAY {
                out.recent.push(b);
            } else if age <= 10 * DAY {
                out.short_term.push(b);
            } else if age <= 30 * DAY {
                out.long_term.push(b);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    /// Segment id: the user's strongest category interest.
    pub segment: u32,
    pub age_bucket: u32,
    pub favorite_categories: Vec<u32>,
    pub latent: Vec<f64>,
    pub history: BehaviorHistory,
}

impl UserProfile {
    pub fn preferred_price(&self, config: &SimConfig) -> f64 {
        if config.n_age_buckets <= 1 {
            return 0.0;
        }
        self.age_bucket as f64 * (config.n_price_buckets - 1) as f64 / (config.n_age_buckets - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDef {
    pub query_id: QueryId,
    pub terms: Vec<u32>,
    pub category: u32,
    /// Always contains `category` first.
    pub relevant_categories: Vec<u32>,
    pub freq_bucket: u32,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDef {
    pub item_id: ItemId,
    pub category: u32,
    pub brand: u32,
    pub price_bucket: u32,
    pub title: Vec<u32>,
    pub quality: f64,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub format_version: u32,
    pub seed: u64,
    pub config: SimConfig,
    pub category_centers: Vec<Vec<f64>>,
    pub users: Vec<UserProfile>,
    pub queries: Vec<QueryDef>,
    pub items: Vec<ItemDef>,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn perturbed<R: Rng + ?Sized>(center: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = center.iter().map(|c| c + noise * rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn sample_distinct<R: Rng + ?Sized>(rng: &mut R, range: std::ops::Range<u32>, count: usize) -> Vec<u32> {
    let pool: Vec<u32> = range.collect();
    rand::seq::index::sample(rng, pool.len(), count.min(pool.len())).into_iter().map(|i| pool[i]).collect()
}

/// Builds a deterministic catalog from `seed`.
pub fn gen_catalog(seed: u64, n_users: usize, n_queries: usize, n_items: usize, config: &SimConfig) -> Result<Catalog> {
    if n_users == 0 || n_queries == 0 || n_items == 0 {
        return Err(Error::config(format!(
            "catalog counts must be >= 1 (users={n_users}, queries={n_queries}, items={n_items})"
        )));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.n_categories;
    let tpc = config.terms_per_category as u32;
    let generic_base = (c as u32) * tpc;

    let category_centers: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut v = normal_vec(&mut rng, config.latent_dim);
            normalize(&mut v);
            v
        })
        .collect();

    let items: Vec<ItemDef> = (0..n_items)
        .map(|i| {
            let category = rng.random_range(0..c) as u32;
            let brand = category * config.brands_per_category as u32 + rng.random_range(0..config.brands_per_category) as u32;
            let mut title = sample_distinct(&mut rng, category * tpc..(category + 1) * tpc, 2);
            if config.n_generic_terms > 0 {
                title.push(generic_base + rng.random_range(0..config.n_generic_terms) as u32);
            }
            ItemDef {
                item_id: i as ItemId,
                category,
                brand,
                price_bucket: rng.random_range(0..config.n_price_buckets) as u32,
                title,
                quality: rng.sample(StandardNormal),
                latent: perturbed(&category_centers[category as usize], config.item_noise, &mut rng),
            }
        })
        .collect();

    let queries: Vec<QueryDef> = (0..n_queries)
        .map(|q| {
            let category = (q % c) as u32;
            let mut relevant_categories = vec![category];
            if c > 1 && rng.random_bool(config.related_category_prob) {
                let mut other = rng.random_range(0..c - 1) as u32;
                if other >= category {
                    other += 1;
                }
                relevant_categories.push(other);
            }
            let n_terms = rng.random_range(1..=3usize);
            QueryDef {
                query_id: q as QueryId,
                terms: sample_distinct(&mut rng, category * tpc..(category + 1) * tpc, n_terms),
                category,
                relevant_categories,
                freq_bucket: rng.random_range(0..config.n_freq_buckets) as u32,
                latent: perturbed(&category_centers[category as usize], config.query_noise, &mut rng),
            }
        })
        .collect();

    let mut by_category: Vec<Vec<ItemId>> = vec![Vec::new(); c];
    for it in &items {
        by_category[it.category as usize].push(it.item_id);
    }

    let users: Vec<UserProfile> = (0..n_users)
        .map(|u| {
            let favorite_categories = sample_distinct(&mut rng, 0..c as u32, config.favorite_categories);
            let mut center = vec![0.0; config.latent_dim];
            for &f in &favorite_categories {
                for (acc, x) in center.iter_mut().zip(&category_centers[f as usize]) {
                    *acc += x;
                }
            }
            let latent = perturbed(&center, config.user_noise, &mut rng);
            let n_hist = rng.random_range(config.history_min..=config.history_max);
            let mut behaviors = Vec::with_capacity(n_hist);
            for _ in 0..n_hist {
                let cat = if rng.random_bool(config.history_in_favorites) {
                    favorite_categories[rng.random_range(0..favorite_categories.len())]
                } else {
                    rng.random_range(0..c) as u32
                };
                let pool = &by_category[cat as usize];
                if pool.is_empty() {
                    continue;
                }
                let weights: Vec<f64> = pool
                    .iter()
                    .map(|&p| (config.preference_sharpness * dot(&latent, &items[p as usize].latent)).exp())
                    .collect();
                let pick = WeightedIndex::new(&weights).expect("positive weights");
                let item_id = pool[pick.sample(&mut rng)];
                let kind = match rng.random_range(0..20) {
                    0..=11 => BehaviorKind::Click,
                    12..=14 => BehaviorKind::Collect,
                    15..=17 => BehaviorKind::Cart,
                    _ => BehaviorKind::Purchase,
                };
                behaviors.push(Behavior {
                    item_id,
                    category: cat,
                    kind,
                    scenario_id: rng.random_range(0..N_SCENARIOS),
                    timestamp: -rng.random_range(60..30 * DAY),
                });
            }
            UserProfile {
                user_id: u as UserId,
                segment: favorite_categories[0],
                age_bucket: rng.random_range(0..config.n_age_buckets) as u32,
                favorite_categories,
                latent,
                history: BehaviorHistory::partition(behaviors, 0),
            }
        })
        .collect();

    Ok(Catalog {
        format_version: CATALOG_FORMAT_VERSION,
        seed,
        config: config.clone(),
        category_centers,
        users,
        queries,
        items,
    })
}

impl Catalog {
    pub fn user(&self, u: UserId) -> Result<&UserProfile> {
        self.users.get(u as usize).ok_or(Error::Lookup { kind: "user", id: u as u64 })
    }

    pub fn query(&self, q: QueryId) -> Result<&QueryDef> {
        self.queries.get(q as usize).ok_or(Error::Lookup { kind: "query", id: q as u64 })
    }

    pub fn item(&self, p: ItemId) -> Result<&ItemDef> {
        self.items.get(p as usize).ok_or(Error::Lookup { kind: "item", id: p as u64 })
    }

    pub fn category_match(query: &QueryDef, item: &ItemDef) -> bool {
        query.relevant_categories.contains(&item.category)
    }

    fn price_gap(&self, user: &UserProfile, item: &ItemDef) -> f64 {
        (item.price_bucket as f64 - user.preferred_price(&self.config)).abs()
    }

    /// User-independent query-item relevance in `[0, 1]`.
    pub fn qp_relevance_of(&self, query: &QueryDef, item: &ItemDef) -> f64 {
        let m = &self.config.relevance;
        let matched = if Self::category_match(query, item) { 1.0 } else { 0.0 };
        logistic(m.qp_affinity * dot(&query.latent, &item.latent) + m.qp_match * matched + m.qp_bias)
    }

    pub fn qp_relevance(&self, q: QueryId, p: ItemId) -> Result<f64> {
        Ok(self.qp_relevance_of(self.query(q)?, self.item(p)?))
    }

    fn relevance_of(&self, user: &UserProfile, query: &QueryDef, item: &ItemDef) -> f64 {
        let m = &self.config.relevance;
        let matched = if Self::category_match(query, item) { 1.0 } else { 0.0 };
        logistic(
            m.query_affinity * dot(&query.latent, &item.latent)
                + m.user_affinity * dot(&user.latent, &item.latent)
                + m.category_match * matched
                + m.quality * item.quality
                - m.price_mismatch * self.price_gap(user, item)
                + m.bias,
        )
    }

    /// Ground-truth relevance of `(u, q, p)` in `[0, 1]`.
    pub fn relevance(&self, u: UserId, q: QueryId, p: ItemId) -> Result<f64> {
        Ok(self.relevance_of(self.user(u)?, self.query(q)?, self.item(p)?))
    }

    fn probabilities_of(&self, user: &UserProfile, query: &QueryDef, item: &ItemDef) -> (f64, f64) {
        let m = &self.config.relevance;
        let p_click = m.click_max * self.relevance_of(user, query, item);
        let p_cvr = m.cvr_max
            * logistic(
                m.cvr_user_affinity * dot(&user.latent, &item.latent) + m.cvr_quality * item.quality
                    - m.cvr_price_mismatch * self.price_gap(user, item)
                    + m.cvr_bias,
            );
        (p_click, p_cvr)
    }

    /// `(pClick, pPurchase | click)` from the ground truth.
    pub fn true_probabilities(&self, u: UserId, q: QueryId, p: ItemId) -> Result<(f64, f64)> {
        Ok(self.probabilities_of(self.user(u)?, self.query(q)?, self.item(p)?))
    }

    /// Preference used when the user shops outside search.
    fn other_scenario_preference(&self, user: &UserProfile, item: &ItemDef) -> f64 {
        dot(&user.latent, &item.latent) + 0.3 * item.quality
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let catalog: Catalog = serde_json::from_str(s)?;
        if catalog.format_version != CATALOG_FORMAT_VERSION {
            return Err(Error::config(format!(
                "catalog format version {} (expected {CATALOG_FORMAT_VERSION})",
                catalog.format_version
            )));
        }
        Ok(catalog)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    /// Digest over relevance values on a fixed strided probe set of triples.
    pub fn relevance_digest(&self) -> String {
        let mut h = Sha256::new();
        let (nu, nq, np) = (self.users.len(), self.queries.len(), self.items.len());
        for k in 0..4096usize {
            let u = (k * 7919) % nu;
            let q = (k * 104_729) % nq;
            let p = (k * 1_299_709) % np;
            let r = self.relevance_of(&self.users[u], &self.queries[q], &self.items[p]);
            h.update(r.to_bits().to_le_bytes());
        }
        hex_digest(h)
    }
}

pub fn logistic(x: f64) -> f64 {
    crate::losses::sigmoid(x)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadePolicy {
    pub matching_pool: usize,
    pub prerank_size: usize,
    pub exposures: usize,
    /// Bonus for items in one of the query's categories in the matching score.
    pub matching_category_bonus: f64,
    pub matching_noise: f64,
    /// Noise on true relevance used by the logged pre-ranking policy.
    pub prerank_noise: f64,
    /// Log-normal noise on true pCTR·pCVR used by the ranking stage.
    pub ranking_noise: f64,
    pub window_days: f64,
    /// Poisson mean of other-scenario purchases per user per day.
    pub other_purchase_rate: f64,
    /// Poisson mean of other-scenario non-purchase clicks per user per day.
    pub other_click_rate: f64,
    /// Probability that an other-scenario event follows the intent of the user's last search.
    pub intent_follow_prob: f64,
    /// Probability that a user searches within one of their favorite categories.
    pub query_in_favorites_prob: f64,
}

impl Default for CascadePolicy {
    fn default() -> Self {
        CascadePolicy {
            matching_pool: 500,
            prerank_size: 50,
            exposures: 10,
            matching_category_bonus: 1.5,
            matching_noise: 0.7,
            prerank_noise: 0.15,
            ranking_noise: 0.3,
            window_days: 14.0,
            other_purchase_rate: 0.5,
            other_click_rate: 1.0,
            intent_follow_prob: 0.7,
            query_in_favorites_prob: 0.8,
        }
    }
}

impl CascadePolicy {
    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.prerank_size > self.matching_pool {
            return Err(Error::config(format!(
                "pre-ranking output size {} exceeds matching pool {}",
                self.prerank_size, self.matching_pool
            )));
        }
        if self.matching_pool > n_items {
            return Err(Error::config(format!("matching pool {} exceeds catalog size {n_items}", self.matching_pool)));
        }
        if self.exposures > MAX_EXPOSURES {
            return Err(Error::config(format!("at most {MAX_EXPOSURES} exposures per request")));
        }
        if self.exposures > self.prerank_size {
            return Err(Error::config("exposure count exceeds pre-ranking output size"));
        }
        if self.prerank_size == 0 {
            return Err(Error::config("pre-ranking output size must be >= 1"));
        }
        for (name, p) in [("intent_follow_prob", self.intent_follow_prob), ("query_in_favorites_prob", self.query_in_favorites_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be a probability")));
            }
        }
        if self.other_purchase_rate < 0.0 || self.other_click_rate < 0.0 || self.window_days <= 0.0 {
            return Err(Error::config("rates must be >= 0 and the window positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub item_id: ItemId,
    pub scenario_id: u8,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub request_id: u64,
    pub user_id: UserId,
    pub query_id: QueryId,
    pub timestamp: i64,
    /// Matching output in matching-score order.
    pub matching_out: Vec<ItemId>,
    /// Logged pre-ranking output in policy order.
    pub prerank_out: Vec<ItemId>,
    pub exposures: Vec<ItemId>,
    pub clicks: Vec<ItemId>,
    pub purchases: Vec<ItemId>,
    pub other_scenario_purchases: Vec<ScenarioEvent>,
    #[serde(default)]
    pub other_scenario_clicks: Vec<ScenarioEvent>,
}

impl RequestLog {
    /// Checks the stage containment chain and the exposure cap.
    pub fn check_invariants(&self, n_items: usize) -> Result<()> {
        let fail = |what: &str| Err(Error::Invariant(format!("request {}: {what}", self.request_id)));
        let matching: BTreeSet<_> = self.matching_out.iter().collect();
        if matching.len() != self.matching_out.len() {
            return fail("duplicate matching output");
        }
        let prerank: BTreeSet<_> = self.prerank_out.iter().collect();
        let exposed: BTreeSet<_> = self.exposures.iter().collect();
        let clicked: BTreeSet<_> = self.clicks.iter().collect();
        if !prerank.is_subset(&matching) {
            return fail("prerank_out not within matching_out");
        }
        if !exposed.is_subset(&prerank) {
            return fail("exposures not within prerank_out");
        }
        if !clicked.is_subset(&exposed) {
            return fail("clicks not within exposures");
        }
        if !self.purchases.iter().all(|p| clicked.contains(p)) {
            return fail("purchases not within clicks");
        }
        if self.exposures.len() > MAX_EXPOSURES {
            return fail("more than 10 exposures");
        }
        for e in self.other_scenario_purchases.iter().chain(&self.other_scenario_clicks) {
            if e.scenario_id == SEARCH_SCENARIO || e.scenario_id >= N_SCENARIOS {
                return fail("other-scenario event with invalid scenario id");
            }
            if e.item_id as usize >= n_items {
                return fail("other-scenario event with unknown item");
            }
        }
        Ok(())
    }
}

/// Per-request random stream: a pure function of `(seed, request index)`.
pub fn request_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CASCADE_SALT);
    rng.set_stream(index);
    rng
}

fn top_by_score(candidates: &[ItemId], scores: &[f64], k: usize) -> Vec<ItemId> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
    order.truncate(k);
    order.into_iter().map(|i| candidates[i]).collect()
}

/// Runs the logging cascade for `n_requests` requests, in request-index order.
pub fn run_cascade_logging(catalog: &Catalog, policy: &CascadePolicy, n_requests: usize, seed: u64) -> Result<Vec<RequestLog>> {
    policy.validate(catalog.items.len())?;
    let mut by_category: Vec<Vec<ItemId>> = vec![Vec::new(); catalog.config.n_categories];
    for it in &catalog.items {
        by_category[it.category as usize].push(it.item_id);
    }
    let mut queries_by_category: Vec<Vec<QueryId>> = vec![Vec::new(); catalog.config.n_categories];
    for q in &catalog.queries {
        queries_by_category[q.category as usize].push(q.query_id);
    }
    let ctx = CascadeContext { catalog, policy, by_category, queries_by_category, n_requests };
    (0..n_requests as u64).map(|i| ctx.request(seed, i)).collect()
}

struct CascadeContext<'a> {
    catalog: &'a Catalog,
    policy: &'a CascadePolicy,
    by_category: Vec<Vec<ItemId>>,
    queries_by_category: Vec<Vec<QueryId>>,
    n_requests: usize,
}

impl CascadeContext<'_> {
    fn request(&self, seed: u64, index: u64) -> Result<RequestLog> {
        let catalog = self.catalog;
        let policy = self.policy;
        let mut rng = request_rng(seed, index);
        let slot = policy.window_days * DAY as f64 / self.n_requests as f64;
        let timestamp = ((index as f64 + rng.random::<f64>()) * slot) as i64;

        let user = &catalog.users[rng.random_range(0..catalog.users.len())];
        let query = self.pick_query(user, &mut rng);

        // matching
        let all: Vec<ItemId> = (0..catalog.items.len() as ItemId).collect();
        let matching_scores: Vec<f64> = catalog
            .items
            .iter()
            .map(|it| {
                let bonus = if Catalog::category_match(query, it) { policy.matching_category_bonus } else { 0.0 };
                dot(&query.latent, &it.latent) + bonus + policy.matching_noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let matching_out = top_by_score(&all, &matching_scores, policy.matching_pool);

        // logged pre-ranking: noisy true relevance
        let prerank_scores: Vec<f64> = matching_out
            .iter()
            .map(|&p| {
                catalog.relevance_of(user, query, &catalog.items[p as usize])
                    + policy.prerank_noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let prerank_out = top_by_score(&matching_out, &prerank_scores, policy.prerank_size);

        // ranking: noisy true pCTR * pCVR
        let probs: Vec<(f64, f64)> =
            prerank_out.iter().map(|&p| catalog.probabilities_of(user, query, &catalog.items[p as usize])).collect();
        let ranking_scores: Vec<f64> = probs
            .iter()
            .map(|(c, v)| c * v * (policy.ranking_noise * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let exposures = top_by_score(&prerank_out, &ranking_scores, policy.exposures);

        let mut clicks = Vec::new();
        let mut purchases = Vec::new();
        for &p in &exposures {
            let idx = prerank_out.iter().position(|&x| x == p).expect("exposure within prerank_out");
            let (p_click, p_cvr) = probs[idx];
            let (clicked, purchased) = sample_events(p_click, p_cvr, &mut rng);
            if clicked {
                clicks.push(p);
            }
            if purchased {
                purchases.push(p);
            }
        }

        let other_scenario_purchases = self.other_events(user, query, timestamp, policy.other_purchase_rate, &mut rng);
        let other_scenario_clicks = self.other_events(user, query, timestamp, policy.other_click_rate, &mut rng);

        let log = RequestLog {
            request_id: index,
            user_id: user.user_id,
            query_id: query.query_id,
            timestamp,
            matching_out,
            prerank_out,
            exposures,
            clicks,
            purchases,
            other_scenario_purchases,
            other_scenario_clicks,
        };
        log.check_invariants(catalog.items.len())?;
        Ok(log)
    }

    fn pick_query<R: Rng>(&self, user: &UserProfile, rng: &mut R) -> &QueryDef {
        let catalog = self.catalog;
        if rng.random_bool(self.policy.query_in_favorites_prob) {
            let fav = user.favorite_categories[rng.random_range(0..user.favorite_categories.len())];
            let pool = &self.queries_by_category[fav as usize];
            if !pool.is_empty() {
                return &catalog.queries[pool[rng.random_range(0..pool.len())] as usize];
            }
        }
        &catalog.queries[rng.random_range(0..catalog.queries.len())]
    }

    /// Events within a day after the request, drawn from user preference only.
    fn other_events<R: Rng>(&self, user: &UserProfile, query: &QueryDef, t0: i64, rate: f64, rng: &mut R) -> Vec<ScenarioEvent> {
        let n = if rate > 0.0 { Poisson::new(rate).expect("positive rate").sample(rng) as usize } else { 0 };
        let catalog = self.catalog;
        let mut events = Vec::with_capacity(n);
        for _ in 0..n {
            let categories: &[u32] = if rng.random_bool(self.policy.intent_follow_prob) {
                &query.relevant_categories
            } else {
                &user.favorite_categories
            };
            let pool: Vec<ItemId> = categories.iter().flat_map(|&c| self.by_category[c as usize].iter().copied()).collect();
            if pool.is_empty() {
                continue;
            }
            let weights: Vec<f64> = pool
                .iter()
                .map(|&p| {
                    (catalog.config.preference_sharpness * catalog.other_scenario_preference(user, &catalog.items[p as usize])).exp()
                })
                .collect();
            let pick = WeightedIndex::new(&weights).expect("positive weights");
            events.push(ScenarioEvent {
                item_id: pool[pick.sample(rng)],
                scenario_id: rng.random_range(1..N_SCENARIOS),
                timestamp: t0 + rng.random_range(60..DAY),
            });
        }
        events.sort_by_key(|e| (e.timestamp, e.item_id));
        events
    }
}

/// One draw of the user event model: click, then purchase given click.
pub fn sample_events<R: Rng + ?Sized>(p_click: f64, p_cvr: f64, rng: &mut R) -> (bool, bool) {
    let clicked = rng.random::<f64>() < p_click;
    let purchased = clicked && rng.random::<f64>() < p_cvr;
    (clicked, purchased)
}

pub fn write_logs<W: Write>(logs: &[RequestLog], mut out: W) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut out, log)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_logs<R: BufRead>(input: R) -> Result<Vec<RequestLog>> {
    let mut logs = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        logs.push(serde_json::from_str(&line)?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Catalog {
        gen_catalog(7, 100, 50, 2000, &SimConfig::default()).unwrap()
    }

    #[test]
    fn cardinalities_and_categories() {
        let c = small();
        assert_eq!((c.users.len(), c.queries.len(), c.items.len()), (100, 50, 2000));
        for q in &c.queries {
            assert!(!q.relevant_categories.is_empty());
            assert_eq!(q.relevant_categories[0], q.category);
        }
        for it in &c.items {
            assert!((it.category as usize) < c.config.n_categories);
        }
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(matches!(gen_catalog(1, 0, 5, 5, &SimConfig::default()), Err(Error::Config(_))));
        assert!(matches!(gen_catalog(1, 5, 0, 5, &SimConfig::default()), Err(Error::Config(_))));
        assert!(matches!(gen_catalog(1, 5, 5, 0, &SimConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn catalog_is_deterministic_and_round_trips() {
        let a = small().to_json().unwrap();
        let b = small().to_json().unwrap();
        assert_eq!(a, b);
        let back = Catalog::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
    }

    #[test]
    fn distinct_seeds_give_distinct_relevance() {
        let digests: BTreeSet<String> = (0..10)
            .map(|s| gen_catalog(s, 30, 20, 200, &SimConfig::default()).unwrap().relevance_digest())
            .collect();
        assert_eq!(digests.len(), 10);
    }

    #[test]
    fn history_partitions_are_ordered_and_disjoint() {
        let c = small();
        for u in &c.users {
            for part in u.history.partitions() {
                assert!(part.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            }
            assert!(u.history.recent.iter().all(|b| b.timestamp >= -DAY));
            assert!(u.history.short_term.iter().all(|b| b.timestamp < -DAY && b.timestamp >= -10 * DAY));
            assert!(u.history.long_term.iter().all(|b| b.timestamp < -10 * DAY));
        }
    }

    #[test]
    fn probabilities_in_range_and_deterministic() {
        let c = small();
        for (u, q, p) in [(0, 0, 0), (99, 49, 1999), (13, 7, 512)] {
            let a = c.true_probabilities(u, q, p).unwrap();
            let b = c.true_probabilities(u, q, p).unwrap();
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a.0) && (0.0..=1.0).contains(&a.1));
        }
        assert!(matches!(c.true_probabilities(100, 0, 0), Err(Error::Lookup { kind: "user", .. })));
        assert!(matches!(c.true_probabilities(0, 0, 2000), Err(Error::Lookup { kind: "item", .. })));
    }

    #[test]
    fn click_replays_match_probability() {
        let c = small();
        let (p_click, p_cvr) = c.true_probabilities(3, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_events(p_click, p_cvr, &mut rng).0).count();
        let mean = hits as f64 / n as f64;
        let se = (p_click * (1.0 - p_click) / n as f64).sqrt().max(1e-12);
        assert!((mean - p_click).abs() <= 3.0 * se, "{mean} vs {p_click}");
    }

    #[test]
    fn prerank_larger_than_pool_is_rejected() {
        let c = small();
        let policy = CascadePolicy { matching_pool: 40, prerank_size: 50, ..CascadePolicy::default() };
        assert!(matches!(run_cascade_logging(&c, &policy, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn logs_respect_containment_and_selection_bias() {
        let c = small();
        let logs = run_cascade_logging(&c, &CascadePolicy::default(), 1000, 11).unwrap();
        let (mut exp_sum, mut exp_n, mut prc_sum, mut prc_n) = (0.0, 0usize, 0.0, 0usize);
        for log in &logs {
            log.check_invariants(c.items.len()).unwrap();
            assert!(log.exposures.len() <= 10);
            for &p in &log.exposures {
                exp_sum += c.relevance(log.user_id, log.query_id, p).unwrap();
                exp_n += 1;
            }
            let pre: BTreeSet<_> = log.prerank_out.iter().collect();
            for p in log.matching_out.iter().filter(|p| !pre.contains(p)) {
                prc_sum += c.relevance(log.user_id, log.query_id, *p).unwrap();
                prc_n += 1;
            }
        }
        let (exp_mean, prc_mean) = (exp_sum / exp_n as f64, prc_sum / prc_n as f64);
        assert!(exp_mean > prc_mean, "{exp_mean} <= {prc_mean}");
    }

    #[test]
    fn requests_are_pure_in_index() {
        let c = small();
        let a = run_cascade_logging(&c, &CascadePolicy::default(), 20, 5).unwrap();
        let b = run_cascade_logging(&c, &CascadePolicy::default(), 20, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let mut buf = Vec::new();
        write_logs(&a, &mut buf).unwrap();
        assert_eq!(read_logs(&buf[..]).unwrap(), a);
    }
}
