//! Two-tower pre-ranking model.
//!
//! User-query tower: term embeddings go through a query semantic unit (mean,
//! max-pooled self-attention, user-conditioned attention), behavior history is
//! category filtered and pooled by per-partition attention, and everything is
//! concatenated into an MLP whose output is L2 normalized. Item tower: id and
//! side embeddings plus mean-pooled title terms into a second MLP. The score
//! is the cosine of the two unit vectors divided by a temperature.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attend, attend_backward, l2_normalize, l2_normalize_backward, Dense, Mlp, MlpCache, MlpShape, ParamSet};
use crate::losses::{pointwise_logloss, total_loss, LossConfig, LossGrad};
use crate::samples::{Origin, QuerySample};
use crate::sim::{Catalog, ItemId, QueryId, UserId};
use crate::tensor::{axpy, dot, Matrix};

pub const N_PARTITIONS: usize = 3;
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of every id/side-feature embedding.
    pub field_width: usize,
    /// Query term embedding width.
    pub term_width: usize,
    /// Output width of the user projection used by personalized query attention.
    pub proj_width: usize,
    pub title_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    pub temperature: f64,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            field_width: 8,
            term_width: 16,
            proj_width: 16,
            title_width: 16,
            hidden: vec![128, 64, 32],
            output_width: 32,
            temperature: 0.05,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn user_width(&self) -> usize {
        3 * self.field_width
    }
    pub fn side_width(&self) -> usize {
        2 * self.field_width
    }
    /// Width of one embedded behavior item.
    pub fn behavior_width(&self) -> usize {
        3 * self.field_width
    }
    pub fn query_repr_width(&self) -> usize {
        3 * self.term_width
    }
    pub fn attention_input_width(&self) -> usize {
        self.query_repr_width() + self.side_width() + self.user_width()
    }
    pub fn user_query_width(&self) -> usize {
        self.user_width() + self.side_width() + self.query_repr_width() + N_PARTITIONS * self.behavior_width()
    }
    pub fn item_width(&self) -> usize {
        4 * self.field_width + self.title_width
    }
    fn shape(&self) -> MlpShape {
        MlpShape { slope: self.leaky_slope, eps: self.ln_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_width == 0 || self.term_width == 0 || self.title_width == 0 || self.output_width == 0 {
            return Err(Error::config("model widths must be >= 1"));
        }
        if self.proj_width != self.term_width {
            return Err(Error::config(format!(
                "user projection width {} must equal the term width {} (it is dotted with term embeddings)",
                self.proj_width, self.term_width
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        Ok(())
    }
}

/// Table sizes of every embedded feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_users: usize,
    pub n_items: usize,
    pub n_terms: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub n_prices: usize,
    pub n_ages: usize,
    pub n_freqs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub item_id: ItemId,
    pub category: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserFeatures {
    pub segment: u32,
    pub age: u32,
    /// Recent, short-term and long-term behaviors, each in time order.
    pub partitions: [Vec<Behavior>; N_PARTITIONS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub terms: Vec<u32>,
    pub categories: Vec<u32>,
    pub freq: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub category: u32,
    pub brand: u32,
    pub price: u32,
    pub title: Vec<u32>,
}

/// Model-facing view of the catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub vocab: Vocab,
    pub users: Vec<UserFeatures>,
    pub queries: Vec<QueryFeatures>,
    pub items: Vec<ItemFeatures>,
}

impl FeatureStore {
    pub fn from_catalog(catalog: &Catalog) -> Self {
        let cfg = &catalog.config;
        let convert = |bs: &[crate::sim::Behavior]| bs.iter().map(|b| Behavior { item_id: b.item_id, category: b.category }).collect();
        FeatureStore {
            vocab: Vocab {
                n_users: catalog.users.len(),
                n_items: catalog.items.len(),
                n_terms: cfg.vocabulary_size(),
                n_categories: cfg.n_categories,
                n_brands: cfg.n_brands(),
                n_prices: cfg.n_price_buckets,
                n_ages: cfg.n_age_buckets,
                n_freqs: cfg.n_freq_buckets,
            },
            users: catalog
                .users
                .iter()
                .map(|u| UserFeatures {
                    segment: u.segment,
                    age: u.age_bucket,
                    partitions: [convert(&u.history.recent), convert(&u.history.short_term), convert(&u.history.long_term)],
                })
                .collect(),
            queries: catalog
                .queries
                .iter()
                .map(|q| QueryFeatures { terms: q.terms.clone(), categories: q.relevant_categories.clone(), freq: q.freq_bucket })
                .collect(),
            items: catalog
                .items
                .iter()
                .map(|p| ItemFeatures { category: p.category, brand: p.brand, price: p.price_bucket, title: p.title.clone() })
                .collect(),
        }
    }

    pub fn user(&self, u: UserId) -> Result<&UserFeatures> {
        self.users.get(u as usize).ok_or(Error::Lookup { kind: "user", id: u as u64 })
    }
    pub fn query(&self, q: QueryId) -> Result<&QueryFeatures> {
        self.queries.get(q as usize).ok_or(Error::Lookup { kind: "query", id: q as u64 })
    }
    pub fn item(&self, p: ItemId) -> Result<&ItemFeatures> {
        self.items.get(p as usize).ok_or(Error::Lookup { kind: "item", id: p as u64 })
    }
}

/// Keeps behaviors whose category is in `categories`, in order.
pub fn category_filter(behaviors: &[Behavior], categories: &[u32]) -> Vec<Behavior> {
    behaviors.iter().filter(|b| categories.contains(&b.category)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrerankParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub query_terms: Matrix,
    pub title_terms: Matrix,
    pub user_ids: Matrix,
    pub segments: Matrix,
    pub ages: Matrix,
    pub query_freqs: Matrix,
    pub query_categories: Matrix,
    pub item_ids: Matrix,
    pub item_categories: Matrix,
    pub brands: Matrix,
    pub prices: Matrix,
    /// User projection for personalized query attention.
    pub user_proj: Dense,
    /// Attention-query projections for the recent/short/long partitions.
    pub behavior_proj: Vec<Dense>,
    pub mlp_uq: Mlp,
    pub mlp_p: Mlp,
}

impl PrerankParams {
    pub fn init(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.field_width;
        let emb = 0.1;
        let mut table = |rows: usize, cols: usize| Matrix::uniform(rows.max(1), cols, emb, &mut rng);
        let query_terms = table(vocab.n_terms, config.term_width);
        let title_terms = table(vocab.n_terms, config.title_width);
        let user_ids = table(vocab.n_users, f);
        let segments = table(vocab.n_categories, f);
        let ages = table(vocab.n_ages, f);
        let query_freqs = table(vocab.n_freqs, f);
        let query_categories = table(vocab.n_categories, f);
        let item_ids = table(vocab.n_items, f);
        let item_categories = table(vocab.n_categories, f);
        let brands = table(vocab.n_brands, f);
        let prices = table(vocab.n_prices, f);
        let user_proj = Dense::init(config.user_width(), config.proj_width, &mut rng);
        let behavior_proj =
            (0..N_PARTITIONS).map(|_| Dense::init(config.attention_input_width(), config.behavior_width(), &mut rng)).collect();
        let mlp_uq = Mlp::init(config.user_query_width(), &config.hidden, config.output_width, &mut rng);
        let mlp_p = Mlp::init(config.item_width(), &config.hidden, config.output_width, &mut rng);
        Ok(PrerankParams {
            config: config.clone(),
            vocab,
            query_terms,
            title_terms,
            user_ids,
            segments,
            ages,
            query_freqs,
            query_categories,
            item_ids,
            item_categories,
            brands,
            prices,
            user_proj,
            behavior_proj,
            mlp_uq,
            mlp_p,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn check(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        if self.mlp_uq.out_dim() != self.mlp_p.out_dim() {
            return Err(Error::Contract("tower output widths differ".into()));
        }
        Ok(())
    }
}

impl ParamSet for PrerankParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("query_terms".into(), &self.query_terms),
            ("title_terms".into(), &self.title_terms),
            ("user_ids".into(), &self.user_ids),
            ("segments".into(), &self.segments),
            ("ages".into(), &self.ages),
            ("query_freqs".into(), &self.query_freqs),
            ("query_categories".into(), &self.query_categories),
            ("item_ids".into(), &self.item_ids),
            ("item_categories".into(), &self.item_categories),
            ("brands".into(), &self.brands),
            ("prices".into(), &self.prices),
            ("user_proj.w".into(), &self.user_proj.w),
            ("user_proj.b".into(), &self.user_proj.b),
        ];
        for (k, d) in self.behavior_proj.iter().enumerate() {
            out.push((format!("behavior_proj{k}.w"), &d.w));
            out.push((format!("behavior_proj{k}.b"), &d.b));
        }
        self.mlp_uq.push_tensors("mlp_uq", &mut out);
        self.mlp_p.push_tensors("mlp_p", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("query_terms".into(), &mut self.query_terms),
            ("title_terms".into(), &mut self.title_terms),
            ("user_ids".into(), &mut self.user_ids),
            ("segments".into(), &mut self.segments),
            ("ages".into(), &mut self.ages),
            ("query_freqs".into(), &mut self.query_freqs),
            ("query_categories".into(), &mut self.query_categories),
            ("item_ids".into(), &mut self.item_ids),
            ("item_categories".into(), &mut self.item_categories),
            ("brands".into(), &mut self.brands),
            ("prices".into(), &mut self.prices),
            ("user_proj.w".into(), &mut self.user_proj.w),
            ("user_proj.b".into(), &mut self.user_proj.b),
        ];
        for (k, d) in self.behavior_proj.iter_mut().enumerate() {
            out.push((format!("behavior_proj{k}.w"), &mut d.w));
            out.push((format!("behavior_proj{k}.b"), &mut d.b));
        }
        self.mlp_uq.push_tensors_mut("mlp_uq", &mut out);
        self.mlp_p.push_tensors_mut("mlp_p", &mut out);
        out
    }
}

fn row<'a>(table: &'a Matrix, id: u32, kind: &'static str) -> Result<&'a [f64]> {
    if (id as usize) < table.rows {
        Ok(table.row(id as usize))
    } else {
        Err(Error::Lookup { kind, id: id as u64 })
    }
}

fn add_row(table: &mut Matrix, id: u32, d: &[f64]) {
    axpy(1.0, d, table.row_mut(id as usize));
}

// ---------------------------------------------------------------------------
// query semantic unit

#[derive(Clone, Debug, Default)]
pub struct QueryUnit {
    pub q_m: Vec<f64>,
    pub q_s: Vec<f64>,
    pub q_p: Vec<f64>,
    pub q_o: Vec<f64>,
    /// Row-wise self-attention weights.
    pub self_weights: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    user_query: Vec<f64>,
    /// User-conditioned attention weights over terms.
    pub personal_weights: Vec<f64>,
}

/// Mean, max-pooled self-attention and user-conditioned attention over the
/// query term embeddings, concatenated.
pub fn query_semantic_unit(terms: &[Vec<f64>], user_vec: &[f64], proj: &Dense) -> Result<QueryUnit> {
    if terms.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let d = terms[0].len();
    let n = terms.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut q_m = vec![0.0; d];
    for t in terms {
        axpy(1.0 / n as f64, t, &mut q_m);
    }
    let mut self_weights = Vec::with_capacity(n);
    let mut self_out = Vec::with_capacity(n);
    for t in terms {
        let (y, w) = attend(t, terms, d, scale);
        self_weights.push(w);
        self_out.push(y);
    }
    let mut q_s = vec![f64::NEG_INFINITY; d];
    let mut argmax = vec![0; d];
    for (r, y) in self_out.iter().enumerate() {
        for c in 0..d {
            if y[c] > q_s[c] {
                q_s[c] = y[c];
                argmax[c] = r;
            }
        }
    }
    let user_query = proj.forward(user_vec);
    let (q_p, personal_weights) = attend(&user_query, terms, d, scale);
    let mut q_o = Vec::with_capacity(3 * d);
    q_o.extend_from_slice(&q_m);
    q_o.extend_from_slice(&q_s);
    q_o.extend_from_slice(&q_p);
    Ok(QueryUnit { q_m, q_s, q_p, q_o, self_weights, argmax, user_query, personal_weights })
}

/// Returns `(dterms, duser_vec)`; projection gradients go to `grad_proj`.
pub fn query_semantic_unit_backward(
    terms: &[Vec<f64>],
    user_vec: &[f64],
    proj: &Dense,
    unit: &QueryUnit,
    dq_o: &[f64],
    grad_proj: &mut Dense,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = terms[0].len();
    let n = terms.len();
    let scale = 1.0 / (d as f64).sqrt();
    let (dq_m, rest) = dq_o.split_at(d);
    let (dq_s, dq_p) = rest.split_at(d);
    let mut dterms = vec![vec![0.0; d]; n];
    for dt in dterms.iter_mut() {
        axpy(1.0 / n as f64, dq_m, dt);
    }
    let mut dy = vec![vec![0.0; d]; n];
    for c in 0..d {
        dy[unit.argmax[c]][c] += dq_s[c];
    }
    for (r, t) in terms.iter().enumerate() {
        if dy[r].iter().all(|&v| v == 0.0) {
            continue;
        }
        // query row and key rows are the same matrix
        let mut dkeys = vec![vec![0.0; d]; n];
        let dq = attend_backward(t, terms, &unit.self_weights[r], &dy[r], scale, &mut dkeys);
        axpy(1.0, &dq, &mut dterms[r]);
        for (acc, dk) in dterms.iter_mut().zip(&dkeys) {
            axpy(1.0, dk, acc);
        }
    }
    let mut dkeys = vec![vec![0.0; d]; n];
    let du = attend_backward(&unit.user_query, terms, &unit.personal_weights, dq_p, scale, &mut dkeys);
    for (acc, dk) in dterms.iter_mut().zip(&dkeys) {
        axpy(1.0, dk, acc);
    }
    let duser = proj.backward(user_vec, &du, grad_proj);
    (dterms, duser)
}

// ---------------------------------------------------------------------------
// behavior attention

#[derive(Clone, Debug, Default)]
pub struct BehaviorUnit {
    pub input: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// `concat(H_r, H_s, H_l)`
    pub h_b: Vec<f64>,
}

/// Per-partition attention with query `concat(q_o, side, user) · W_k + b_k`.
pub fn behavior_attention(
    q_o: &[f64],
    side: &[f64],
    user_vec: &[f64],
    partitions: &[Vec<Vec<f64>>],
    projs: &[Dense],
    width: usize,
) -> BehaviorUnit {
    let mut input = Vec::with_capacity(q_o.len() + side.len() + user_vec.len());
    input.extend_from_slice(q_o);
    input.extend_from_slice(side);
    input.extend_from_slice(user_vec);
    let scale = 1.0 / (width as f64).sqrt();
    let mut unit = BehaviorUnit { h_b: Vec::with_capacity(partitions.len() * width), ..BehaviorUnit::default() };
    for (keys, proj) in partitions.iter().zip(projs) {
        let q = proj.forward(&input);
        let (h, w) = attend(&q, keys, width, scale);
        unit.h_b.extend_from_slice(&h);
        unit.queries.push(q);
        unit.weights.push(w);
    }
    unit.input = input;
    unit
}

/// Returns `(dinput, dkeys per partition)`; projection gradients go to `grads`.
pub fn behavior_attention_backward(
    partitions: &[Vec<Vec<f64>>],
    projs: &[Dense],
    unit: &BehaviorUnit,
    dh_b: &[f64],
    width: usize,
    grads: &mut [Dense],
) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let scale = 1.0 / (width as f64).sqrt();
    let mut dinput = vec![0.0; unit.input.len()];
    let mut dkeys_all = Vec::with_capacity(partitions.len());
    for (k, keys) in partitions.iter().enumerate() {
        let mut dkeys = vec![vec![0.0; width]; keys.len()];
        if !keys.is_empty() {
            let dh = &dh_b[k * width..(k + 1) * width];
            let dq = attend_backward(&unit.queries[k], keys, &unit.weights[k], dh, scale, &mut dkeys);
            let dx = projs[k].backward(&unit.input, &dq, &mut grads[k]);
            axpy(1.0, &dx, &mut dinput);
        }
        dkeys_all.push(dkeys);
    }
    (dinput, dkeys_all)
}

// ---------------------------------------------------------------------------
// towers

/// Cached activations of one user-query forward pass.
#[derive(Clone, Debug, Default)]
pub struct UserQueryActivations {
    user_id: UserId,
    segment: u32,
    age: u32,
    terms: Vec<u32>,
    freq: u32,
    categories: Vec<u32>,
    behaviors: Vec<Vec<Behavior>>,
    pub e_u: Vec<f64>,
    pub side: Vec<f64>,
    term_rows: Vec<Vec<f64>>,
    pub query: QueryUnit,
    keys: Vec<Vec<Vec<f64>>>,
    pub behavior: BehaviorUnit,
    pub e_uq: Vec<f64>,
    mlp: MlpCache,
    norm: f64,
    pub h_uq: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ItemActivations {
    item_id: ItemId,
    features: Option<ItemFeatures>,
    pub e_p: Vec<f64>,
    mlp: MlpCache,
    norm: f64,
    pub h_p: Vec<f64>,
}

impl PrerankParams {
    fn behavior_row(&self, feats: &FeatureStore, b: &Behavior) -> Result<Vec<f64>> {
        let it = feats.item(b.item_id)?;
        let mut v = Vec::with_capacity(self.config.behavior_width());
        v.extend_from_slice(row(&self.item_ids, b.item_id, "item")?);
        v.extend_from_slice(row(&self.item_categories, it.category, "category")?);
        v.extend_from_slice(row(&self.brands, it.brand, "brand")?);
        Ok(v)
    }

    pub fn user_query_forward(&self, feats: &FeatureStore, u: UserId, q: QueryId) -> Result<UserQueryActivations> {
        let cfg = &self.config;
        let user = feats.user(u)?;
        let query = feats.query(q)?;
        if query.terms.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let mut e_u = Vec::with_capacity(cfg.user_width());
        e_u.extend_from_slice(row(&self.user_ids, u, "user")?);
        e_u.extend_from_slice(row(&self.segments, user.segment, "segment")?);
        e_u.extend_from_slice(row(&self.ages, user.age, "age")?);

        let mut side = Vec::with_capacity(cfg.side_width());
        side.extend_from_slice(row(&self.query_freqs, query.freq, "frequency")?);
        let mut cat = vec![0.0; cfg.field_width];
        for &c in &query.categories {
            axpy(1.0 / query.categories.len() as f64, row(&self.query_categories, c, "category")?, &mut cat);
        }
        side.extend_from_slice(&cat);

        let term_rows: Vec<Vec<f64>> =
            query.terms.iter().map(|&t| row(&self.query_terms, t, "term").map(<[f64]>::to_vec)).collect::<Result<_>>()?;
        let unit = query_semantic_unit(&term_rows, &e_u, &self.user_proj)?;

        let behaviors: Vec<Vec<Behavior>> =
            user.partitions.iter().map(|p| category_filter(p, &query.categories)).collect();
        let keys: Vec<Vec<Vec<f64>>> = behaviors
            .iter()
            .map(|bs| bs.iter().map(|b| self.behavior_row(feats, b)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let behavior = behavior_attention(&unit.q_o, &side, &e_u, &keys, &self.behavior_proj, cfg.behavior_width());

        let mut e_uq = Vec::with_capacity(cfg.user_query_width());
        e_uq.extend_from_slice(&e_u);
        e_uq.extend_from_slice(&side);
        e_uq.extend_from_slice(&unit.q_o);
        e_uq.extend_from_slice(&behavior.h_b);
        let mut mlp = MlpCache::default();
        let raw = self.mlp_uq.forward(&e_uq, cfg.shape(), Some(&mut mlp));
        let (h_uq, norm) = l2_normalize(&raw, "user-query")?;
        Ok(UserQueryActivations {
            user_id: u,
            segment: user.segment,
            age: user.age,
            terms: query.terms.clone(),
            freq: query.freq,
            categories: query.categories.clone(),
            behaviors,
            e_u,
            side,
            term_rows,
            query: unit,
            keys,
            behavior,
            e_uq,
            mlp,
            norm,
            h_uq,
        })
    }

    pub fn user_query_backward(&self, feats: &FeatureStore, act: &UserQueryActivations, dh: &[f64], grad: &mut PrerankParams) {
        let cfg = &self.config;
        let dm = l2_normalize_backward(&act.h_uq, act.norm, dh);
        let de_uq = self.mlp_uq.backward(&act.mlp, &dm, cfg.shape(), &mut grad.mlp_uq);
        let (uw, sw, qw) = (cfg.user_width(), cfg.side_width(), cfg.query_repr_width());
        let mut de_u = de_uq[..uw].to_vec();
        let mut dside = de_uq[uw..uw + sw].to_vec();
        let mut dq_o = de_uq[uw + sw..uw + sw + qw].to_vec();
        let dh_b = &de_uq[uw + sw + qw..];

        let (dinput, dkeys) =
            behavior_attention_backward(&act.keys, &self.behavior_proj, &act.behavior, dh_b, cfg.behavior_width(), &mut grad.behavior_proj);
        axpy(1.0, &dinput[..qw], &mut dq_o);
        axpy(1.0, &dinput[qw..qw + sw], &mut dside);
        axpy(1.0, &dinput[qw + sw..], &mut de_u);
        let f = cfg.field_width;
        for (bs, dk) in act.behaviors.iter().zip(&dkeys) {
            for (b, d) in bs.iter().zip(dk) {
                let it = &feats.items[b.item_id as usize];
                add_row(&mut grad.item_ids, b.item_id, &d[..f]);
                add_row(&mut grad.item_categories, it.category, &d[f..2 * f]);
                add_row(&mut grad.brands, it.brand, &d[2 * f..]);
            }
        }

        let (dterms, duser) =
            query_semantic_unit_backward(&act.term_rows, &act.e_u, &self.user_proj, &act.query, &dq_o, &mut grad.user_proj);
        axpy(1.0, &duser, &mut de_u);
        for (&t, d) in act.terms.iter().zip(&dterms) {
            add_row(&mut grad.query_terms, t, d);
        }
        add_row(&mut grad.query_freqs, act.freq, &dside[..f]);
        let share = 1.0 / act.categories.len() as f64;
        for &c in &act.categories {
            axpy(share, &dside[f..], grad.query_categories.row_mut(c as usize));
        }
        add_row(&mut grad.user_ids, act.user_id, &de_u[..f]);
        add_row(&mut grad.segments, act.segment, &de_u[f..2 * f]);
        add_row(&mut grad.ages, act.age, &de_u[2 * f..]);
    }

    pub fn item_forward(&self, feats: &FeatureStore, p: ItemId) -> Result<ItemActivations> {
        let cfg = &self.config;
        let it = feats.item(p)?;
        let mut e_p = Vec::with_capacity(cfg.item_width());
        e_p.extend_from_slice(row(&self.item_ids, p, "item")?);
        e_p.extend_from_slice(row(&self.item_categories, it.category, "category")?);
        e_p.extend_from_slice(row(&self.brands, it.brand, "brand")?);
        e_p.extend_from_slice(row(&self.prices, it.price, "price")?);
        let mut title = vec![0.0; cfg.title_width];
        for &t in &it.title {
            axpy(1.0 / it.title.len() as f64, row(&self.title_terms, t, "term")?, &mut title);
        }
        e_p.extend_from_slice(&title);
        let mut mlp = MlpCache::default();
        let raw = self.mlp_p.forward(&e_p, cfg.shape(), Some(&mut mlp));
        let (h_p, norm) = l2_normalize(&raw, "item")?;
        Ok(ItemActivations { item_id: p, features: Some(it.clone()), e_p, mlp, norm, h_p })
    }

    pub fn item_backward(&self, act: &ItemActivations, dh: &[f64], grad: &mut PrerankParams) {
        let cfg = &self.config;
        let f = cfg.field_width;
        let it = act.features.as_ref().expect("item activations carry features");
        let dm = l2_normalize_backward(&act.h_p, act.norm, dh);
        let de = self.mlp_p.backward(&act.mlp, &dm, cfg.shape(), &mut grad.mlp_p);
        add_row(&mut grad.item_ids, act.item_id, &de[..f]);
        add_row(&mut grad.item_categories, it.category, &de[f..2 * f]);
        add_row(&mut grad.brands, it.brand, &de[2 * f..3 * f]);
        add_row(&mut grad.prices, it.price, &de[3 * f..4 * f]);
        let share = 1.0 / it.title.len() as f64;
        for &t in &it.title {
            axpy(share, &de[4 * f..], grad.title_terms.row_mut(t as usize));
        }
    }

    pub fn embed_user_query(&self, feats: &FeatureStore, u: UserId, q: QueryId) -> Result<Vec<f64>> {
        Ok(self.user_query_forward(feats, u, q)?.h_uq)
    }

    pub fn embed_item(&self, feats: &FeatureStore, p: ItemId) -> Result<Vec<f64>> {
        Ok(self.item_forward(feats, p)?.h_p)
    }

    /// Unit embeddings for every catalog item, indexed by item id.
    pub fn embed_all_items(&self, feats: &FeatureStore) -> Result<Vec<Vec<f64>>> {
        (0..feats.items.len() as ItemId).map(|p| self.embed_item(feats, p)).collect()
    }
}

/// `cos(h_uq, h_p) / temperature` for unit inputs.
pub fn score(h_uq: &[f64], h_p: &[f64], temperature: f64) -> Result<f64> {
    for (v, name) in [(h_uq, "user-query"), (h_p, "item")] {
        let n = dot(v, v).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("{name} embedding has norm {n}, expected 1")));
        }
    }
    Ok(dot(h_uq, h_p) / temperature)
}

// ---------------------------------------------------------------------------
// training objective

/// Pointwise tasks for separately trained baseline models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseTask {
    /// In-search click on exposures.
    Ctr,
    /// In-search purchase on clicked exposures.
    Cvr,
    /// Exposure vs. unexposed candidates.
    Er,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Listwise(LossConfig),
    Pointwise(PointwiseTask),
}

impl Objective {
    /// Per-sample loss and logit gradients; `None` if the sample carries no signal.
    pub fn evaluate(&self, sample: &QuerySample, logits: &[f64]) -> Result<Option<LossGrad>> {
        match self {
            Objective::Listwise(cfg) => {
                let t = total_loss(sample, logits, cfg)?;
                if t.tasks_used.is_empty() && t.distill.value == 0.0 && t.distill.grad.iter().all(|&g| g == 0.0) {
                    return Ok(None);
                }
                Ok(Some(t.loss))
            }
            Objective::Pointwise(task) => {
                let members: Vec<(usize, f64)> = sample
                    .items
                    .iter()
                    .enumerate()
                    .filter_map(|(i, it)| match task {
                        PointwiseTask::Ctr => (it.origin == Origin::Ex).then_some((i, it.iscl as u8 as f64)),
                        PointwiseTask::Cvr => (it.origin == Origin::Ex && it.iscl).then_some((i, it.ispl as u8 as f64)),
                        PointwiseTask::Er => Some((i, (it.origin == Origin::Ex) as u8 as f64)),
                    })
                    .collect();
                if members.is_empty() {
                    return Ok(None);
                }
                let mut out = LossGrad { value: 0.0, grad: vec![0.0; logits.len()] };
                let w = 1.0 / members.len() as f64;
                for (i, y) in members {
                    let (l, dz) = pointwise_logloss(logits[i], y);
                    out.value += w * l;
                    out.grad[i] += w * dz;
                }
                Ok(Some(out))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: PrerankParams,
    /// Samples that contributed nothing (every task dropped, no distillation).
    pub empty_samples: usize,
}

/// Mean per-sample loss over `batch` and its gradient with respect to every
/// parameter. Each distinct item runs through the item tower once.
pub fn forward_backward(
    params: &PrerankParams,
    feats: &FeatureStore,
    batch: &[QuerySample],
    objective: &Objective,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let tau = params.config.temperature;
    let mut index: BTreeMap<ItemId, usize> = BTreeMap::new();
    for s in batch {
        for it in &s.items {
            let next = index.len();
            index.entry(it.item_id).or_insert(next);
        }
    }
    let mut item_acts: Vec<ItemActivations> = vec![ItemActivations::default(); index.len()];
    for (&p, &k) in &index {
        item_acts[k] = params.item_forward(feats, p)?;
    }
    let width = params.config.output_width;
    let mut dh_items = vec![vec![0.0; width]; index.len()];
    let mut grads = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut empty = 0;
    for s in batch {
        let uq = params.user_query_forward(feats, s.user_id, s.query_id)?;
        let slots: Vec<usize> = s.items.iter().map(|it| index[&it.item_id]).collect();
        let logits: Vec<f64> = slots.iter().map(|&k| dot(&uq.h_uq, &item_acts[k].h_p) / tau).collect();
        let Some(lg) = objective.evaluate(s, &logits)? else {
            empty += 1;
            continue;
        };
        loss += scale * lg.value;
        let mut dh_uq = vec![0.0; width];
        for (&k, &dz) in slots.iter().zip(&lg.grad) {
            if dz == 0.0 {
                continue;
            }
            let g = scale * dz / tau;
            axpy(g, &item_acts[k].h_p, &mut dh_uq);
            axpy(g, &uq.h_uq, &mut dh_items[k]);
        }
        params.user_query_backward(feats, &uq, &dh_uq, &mut grads);
    }
    for (act, dh) in item_acts.iter().zip(&dh_items) {
        if dh.iter().any(|&v| v != 0.0) {
            params.item_backward(act, dh, &mut grads);
        }
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss or gradient (loss = {loss})")));
    }
    Ok(BatchResult { loss, grads, empty_samples: empty })
}

/// Mean loss only.
pub fn batch_loss(params: &PrerankParams, feats: &FeatureStore, batch: &[QuerySample], objective: &Objective) -> Result<f64> {
    let tau = params.config.temperature;
    let mut loss = 0.0;
    for s in batch {
        let h_uq = params.embed_user_query(feats, s.user_id, s.query_id)?;
        let logits: Vec<f64> =
            s.items.iter().map(|it| Ok(dot(&h_uq, &params.embed_item(feats, it.item_id)?) / tau)).collect::<Result<_>>()?;
        if let Some(lg) = objective.evaluate(s, &logits)? {
            loss += lg.value / batch.len() as f64;
        }
    }
    Ok(loss)
}

/// Signs of every LeakyReLU input and every max-pool winner touched by the
/// batch; finite-difference checks skip coordinates where this changes.
pub fn activation_pattern(params: &PrerankParams, feats: &FeatureStore, batch: &[QuerySample]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let push_mlp = |cache: &MlpCache, out: &mut Vec<u32>| {
        for layer in &cache.normed {
            out.extend(layer.iter().map(|&v| (v > 0.0) as u32));
        }
    };
    for s in batch {
        let uq = params.user_query_forward(feats, s.user_id, s.query_id)?;
        push_mlp(&uq.mlp, &mut out);
        out.extend(uq.query.argmax.iter().map(|&a| a as u32));
        for it in &s.items {
            let a = params.item_forward(feats, it.item_id)?;
            push_mlp(&a.mlp, &mut out);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Dense;
    use crate::samples::LabeledItem;
    use crate::teacher::TeacherScores;
    use rand::Rng;

    pub(crate) fn tiny_world(seed: u64) -> (ModelConfig, FeatureStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab { n_users: 4, n_items: 9, n_terms: 7, n_categories: 3, n_brands: 4, n_prices: 3, n_ages: 2, n_freqs: 2 };
        let config = ModelConfig {
            field_width: 2,
            term_width: 3,
            proj_width: 3,
            title_width: 2,
            hidden: vec![5, 4],
            output_width: 3,
            temperature: rng.random_range(0.2..1.0),
            ..ModelConfig::default()
        };
        let items = (0..vocab.n_items)
            .map(|_| ItemFeatures {
                category: rng.random_range(0..3),
                brand: rng.random_range(0..4),
                price: rng.random_range(0..3),
                title: (0..rng.random_range(1..4)).map(|_| rng.random_range(0..7)).collect(),
            })
            .collect::<Vec<_>>();
        let users = (0..vocab.n_users)
            .map(|_| {
                let part = |rng: &mut ChaCha8Rng| {
                    (0..rng.random_range(0..4))
                        .map(|_| {
                            let p = rng.random_range(0..9u32);
                            Behavior { item_id: p, category: items[p as usize].category }
                        })
                        .collect::<Vec<_>>()
                };
                let partitions = [part(&mut rng), part(&mut rng), part(&mut rng)];
                UserFeatures { segment: rng.random_range(0..3), age: rng.random_range(0..2), partitions }
            })
            .collect();
        let queries = (0..3)
            .map(|c| QueryFeatures {
                terms: (0..rng.random_range(1..4)).map(|_| rng.random_range(0..7)).collect(),
                categories: if rng.random_bool(0.5) { vec![c] } else { vec![c, (c + 1) % 3] },
                freq: rng.random_range(0..2),
            })
            .collect();
        (config, FeatureStore { vocab, users, queries, items })
    }

    pub(crate) fn tiny_batch(seed: u64) -> Vec<QuerySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        (0..2)
            .map(|r| {
                let mut ids: Vec<u32> = (0..9).collect();
                for i in (1..ids.len()).rev() {
                    ids.swap(i, rng.random_range(0..=i));
                }
                let items = ids[..6]
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let origin = match k {
                            0..=2 => Origin::Ex,
                            3 | 4 => Origin::Rc,
                            _ => Origin::Prc,
                        };
                        let aspl = k == 0 || (k == 4 && rng.random_bool(0.5));
                        let ascl = aspl || k == 1;
                        LabeledItem {
                            item_id: p,
                            origin,
                            aspl,
                            ascl,
                            ael: origin == Origin::Ex || ascl,
                            ispl: k == 0,
                            iscl: k <= 1,
                            teacher: Some(TeacherScores::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))),
                        }
                    })
                    .collect();
                QuerySample {
                    request_id: r,
                    user_id: rng.random_range(0..4),
                    query_id: rng.random_range(0..3),
                    timestamp: 0,
                    items,
                    rc_truncated: false,
                    prc_truncated: false,
                }
            })
            .collect()
    }

    #[test]
    fn single_term_query_repeats_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = Dense::init(4, 3, &mut rng);
        let t = vec![0.3, -0.2, 0.9];
        let u = query_semantic_unit(&[t.clone()], &[0.1, 0.2, 0.3, 0.4], &proj).unwrap();
        assert_eq!(u.q_o, [t.clone(), t.clone(), t].concat());
        assert!(matches!(query_semantic_unit(&[], &[0.0; 4], &proj), Err(Error::EmptyQuery)));
    }

    #[test]
    fn mean_pool_hand_value_and_weight_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = Dense::init(2, 2, &mut rng);
        let u = query_semantic_unit(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, -0.5], &proj).unwrap();
        assert_eq!(u.q_m, vec![0.5, 0.5]);
        for w in u.self_weights.iter().chain(std::iter::once(&u.personal_weights)) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn category_filter_keeps_order() {
        let bs: Vec<Behavior> = [(1, 0), (2, 1), (3, 2), (4, 1), (5, 0)]
            .iter()
            .map(|&(item_id, category)| Behavior { item_id, category })
            .collect();
        let kept = category_filter(&bs, &[1]);
        assert_eq!(kept.iter().map(|b| b.item_id).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(category_filter(&bs, &[0, 1, 2]), bs);
        assert!(category_filter(&bs, &[7]).is_empty());
    }

    #[test]
    fn behavior_attention_shapes_and_degenerate_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let width = 4;
        let projs: Vec<Dense> = (0..3).map(|_| Dense::init(6, width, &mut rng)).collect();
        let one = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let parts = vec![one.clone(), vec![], vec![vec![1.0; 4], vec![-1.0; 4]]];
        let unit = behavior_attention(&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6], &parts, &projs, width);
        assert_eq!(unit.h_b.len(), 3 * width);
        assert_eq!(&unit.h_b[..4], &one[0][..]);
        assert_eq!(&unit.h_b[4..8], &[0.0; 4]);
    }

    #[test]
    fn towers_are_unit_norm_and_separable() {
        let (cfg, feats) = tiny_world(5);
        let params = PrerankParams::init(&cfg, feats.vocab, 5).unwrap();
        for u in 0..4 {
            for q in 0..3 {
                let h = params.embed_user_query(&feats, u, q).unwrap();
                assert!((dot(&h, &h).sqrt() - 1.0).abs() <= 1e-6);
            }
        }
        let a = params.embed_item(&feats, 4).unwrap();
        assert!((dot(&a, &a).sqrt() - 1.0).abs() <= 1e-6);
        assert_eq!(a, params.embed_item(&feats, 4).unwrap());
        let h = params.embed_user_query(&feats, 1, 1).unwrap();
        assert!((score(&h, &h, 0.05).unwrap() - 20.0).abs() < 1e-9);
        let neg: Vec<f64> = h.iter().map(|x| -x).collect();
        assert!((score(&h, &neg, 1.0).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(score(&[1.0, 1.0], &h[..2], 1.0), Err(Error::Contract(_))));
        assert!(matches!(params.embed_item(&feats, 99), Err(Error::Lookup { kind: "item", .. })));
    }

    #[test]
    fn zero_signal_gives_zero_gradients() {
        let (cfg, feats) = tiny_world(6);
        let params = PrerankParams::init(&cfg, feats.vocab, 6).unwrap();
        let mut loss_cfg = LossConfig::default();
        loss_cfg.weights.exposure = 0.0;
        loss_cfg.weights.click = 0.0;
        loss_cfg.weights.purchase = 0.0;
        loss_cfg.distill = crate::losses::DistillSet::None;
        let r = forward_backward(&params, &feats, &tiny_batch(6), &Objective::Listwise(loss_cfg)).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grads.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let (cfg, feats) = tiny_world(7);
        let params = PrerankParams::init(&cfg, feats.vocab, 7).unwrap();
        let obj = Objective::Listwise(LossConfig::default());
        let batch = tiny_batch(7);
        let doubled: Vec<QuerySample> = batch.iter().chain(batch.iter()).cloned().collect();
        let a = forward_backward(&params, &feats, &batch, &obj).unwrap().loss;
        let b = forward_backward(&params, &feats, &doubled, &obj).unwrap().loss;
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        assert!((a - batch_loss(&params, &feats, &batch, &obj).unwrap()).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
