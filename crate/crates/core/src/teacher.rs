//! Teacher scores for distillation: the simulator's ground truth, or a
//! ranking-style network trained pointwise on logged exposures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Adam, AdamConfig, Mlp, MlpCache, MlpShape, ParamSet};
use crate::losses::{pointwise_logloss, sigmoid};
use crate::sim::{Catalog, ItemId, QueryId, RequestLog, UserId};
use crate::tensor::{axpy, Matrix};
use crate::two_tower::{FeatureStore, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherScores {
    pub p_ctr: f64,
    pub p_cvr: f64,
}

impl TeacherScores {
    pub fn new(p_ctr: f64, p_cvr: f64) -> Self {
        TeacherScores { p_ctr, p_cvr }
    }

    pub fn checked(p_ctr: f64, p_cvr: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_ctr) || !(0.0..=1.0).contains(&p_cvr) {
            return Err(Error::Contract(format!("teacher probabilities out of range: ({p_ctr}, {p_cvr})")));
        }
        Ok(TeacherScores { p_ctr, p_cvr })
    }

    pub fn p_ctcvr(&self) -> f64 {
        self.p_ctr * self.p_cvr
    }
}

pub trait Teacher {
    fn scores(&self, catalog: &Catalog, u: UserId, q: QueryId, p: ItemId) -> Result<TeacherScores>;
}

/// Reads the simulator's true click and conversion probabilities.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleTeacher;

impl Teacher for OracleTeacher {
    fn scores(&self, catalog: &Catalog, u: UserId, q: QueryId, p: ItemId) -> Result<TeacherScores> {
        let (c, v) = catalog.true_probabilities(u, q, p)?;
        TeacherScores::checked(c, v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub field_width: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// L2 penalty on the id embedding tables (`*_ids`); other tensors are exempt.
    pub l2: f64,
    /// Appends hand-built query/item and user/item match features to the input.
    pub cross_features: bool,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { field_width: 8, hidden: vec![64, 32], epochs: 5, batch_size: 256, optimizer: AdamConfig::default(), l2: 0.01, cross_features: true, seed: 0 }
    }
}

const N_DENSE: usize = 5;

impl TeacherConfig {
    fn input_width(&self) -> usize {
        N_FIELDS * self.field_width + if self.cross_features { N_DENSE } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub config: TeacherConfig,
    pub vocab: Vocab,
    pub user_ids: Matrix,
    pub segments: Matrix,
    pub ages: Matrix,
    pub query_freqs: Matrix,
    pub query_categories: Matrix,
    pub query_terms: Matrix,
    pub item_ids: Matrix,
    pub item_categories: Matrix,
    pub brands: Matrix,
    pub prices: Matrix,
    pub title_terms: Matrix,
    /// Shared trunk; its two outputs are the CTR and CVR logits.
    pub net: Mlp,
}

/// Embedded fields plus the pooled history and its product with the item.
const N_FIELDS: usize = 13;

impl TeacherParams {
    pub fn init(config: &TeacherConfig, vocab: Vocab) -> Result<Self> {
        if config.field_width == 0 || config.batch_size == 0 {
            return Err(Error::config("teacher widths and batch size must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = config.field_width;
        let mut table = |rows: usize| Matrix::uniform(rows.max(1), f, 0.1, &mut rng);
        let user_ids = table(vocab.n_users);
        let segments = table(vocab.n_categories);
        let ages = table(vocab.n_ages);
        let query_freqs = table(vocab.n_freqs);
        let query_categories = table(vocab.n_categories);
        let query_terms = table(vocab.n_terms);
        let item_ids = table(vocab.n_items);
        let item_categories = table(vocab.n_categories);
        let brands = table(vocab.n_brands);
        let prices = table(vocab.n_prices);
        let title_terms = table(vocab.n_terms);
        let net = Mlp::init(config.input_width(), &config.hidden, 2, &mut rng);
        Ok(TeacherParams {
            config: config.clone(),
            vocab,
            user_ids,
            segments,
            ages,
            query_freqs,
            query_categories,
            query_terms,
            item_ids,
            item_categories,
            brands,
            prices,
            title_terms,
            net,
        })
    }
}

impl ParamSet for TeacherParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("user_ids".into(), &self.user_ids),
            ("segments".into(), &self.segments),
            ("ages".into(), &self.ages),
            ("query_freqs".into(), &self.query_freqs),
            ("query_categories".into(), &self.query_categories),
            ("query_terms".into(), &self.query_terms),
            ("item_ids".into(), &self.item_ids),
            ("item_categories".into(), &self.item_categories),
            ("brands".into(), &self.brands),
            ("prices".into(), &self.prices),
            ("title_terms".into(), &self.title_terms),
        ];
        self.net.push_tensors("net", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("user_ids".into(), &mut self.user_ids),
            ("segments".into(), &mut self.segments),
            ("ages".into(), &mut self.ages),
            ("query_freqs".into(), &mut self.query_freqs),
            ("query_categories".into(), &mut self.query_categories),
            ("query_terms".into(), &mut self.query_terms),
            ("item_ids".into(), &mut self.item_ids),
            ("item_categories".into(), &mut self.item_categories),
            ("brands".into(), &mut self.brands),
            ("prices".into(), &mut self.prices),
            ("title_terms".into(), &mut self.title_terms),
        ];
        self.net.push_tensors_mut("net", &mut out);
        out
    }
}

/// One logged exposure with its in-search outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub item_id: ItemId,
    pub clicked: bool,
    pub purchased: bool,
}

pub fn exposure_records(logs: &[RequestLog]) -> Vec<ExposureRecord> {
    let mut out = Vec::new();
    for l in logs {
        for &p in &l.exposures {
            out.push(ExposureRecord {
                user_id: l.user_id,
                query_id: l.query_id,
                item_id: p,
                clicked: l.clicks.contains(&p),
                purchased: l.purchases.contains(&p),
            });
        }
    }
    out
}

/// Slot indices of one example's embedding lookups, used to scatter gradients.
struct Lookup {
    rows: [u32; 8],
    query_categories: Vec<u32>,
    query_terms: Vec<u32>,
    title_terms: Vec<u32>,
    history: Vec<u32>,
    /// Pooled history embedding and the item embedding, kept for the product field.
    pooled: Vec<f64>,
    item: Vec<f64>,
}

/// A trained teacher bundled with the features it reads.
#[derive(Clone, Debug)]
pub struct LearnedTeacher {
    pub params: TeacherParams,
    store: FeatureStore,
    /// Per user: share of history behaviors in each category.
    affinity: Vec<Vec<f64>>,
    /// Per user: share of history behaviors on each brand.
    brand_affinity: Vec<Vec<f64>>,
}

impl LearnedTeacher {
    pub fn new(params: TeacherParams, catalog: &Catalog) -> Result<Self> {
        let store = FeatureStore::from_catalog(catalog);
        if store.vocab != params.vocab {
            return Err(Error::Checkpoint("teacher vocabulary does not match the catalog".into()));
        }
        let c = store.vocab.n_categories;
        let b = store.vocab.n_brands;
        let mut affinity = Vec::with_capacity(store.users.len());
        let mut brand_affinity = Vec::with_capacity(store.users.len());
        for u in &store.users {
            let mut cat = vec![0.0; c];
            let mut br = vec![0.0; b];
            let all: Vec<_> = u.partitions.iter().flatten().collect();
            for beh in &all {
                cat[beh.category as usize] += 1.0 / all.len() as f64;
                br[store.items[beh.item_id as usize].brand as usize] += 1.0 / all.len() as f64;
            }
            affinity.push(cat);
            brand_affinity.push(br);
        }
        Ok(LearnedTeacher { params, store, affinity, brand_affinity })
    }

    fn input(&self, u: UserId, q: QueryId, p: ItemId) -> Result<(Vec<f64>, Lookup)> {
        let s = &self.store;
        let pr = &self.params;
        let user = s.user(u)?;
        let query = s.query(q)?;
        let item = s.item(p)?;
        if query.terms.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let f = pr.config.field_width;
        let mut x = Vec::with_capacity(pr.config.input_width());
        let rows = [u, user.segment, user.age, query.freq, p, item.category, item.brand, item.price];
        let tables = [&pr.user_ids, &pr.segments, &pr.ages, &pr.query_freqs];
        for (t, &r) in tables.iter().zip(&rows[..4]) {
            x.extend_from_slice(t.row(r as usize));
        }
        let mean = |table: &Matrix, ids: &[u32]| {
            let mut v = vec![0.0; f];
            for &i in ids {
                axpy(1.0 / ids.len() as f64, table.row(i as usize), &mut v);
            }
            v
        };
        x.extend(mean(&pr.query_categories, &query.categories));
        x.extend(mean(&pr.query_terms, &query.terms));
        let tables = [&pr.item_ids, &pr.item_categories, &pr.brands, &pr.prices];
        for (t, &r) in tables.iter().zip(&rows[4..]) {
            x.extend_from_slice(t.row(r as usize));
        }
        x.extend(mean(&pr.title_terms, &item.title));
        let history: Vec<u32> = user.partitions.iter().flatten().map(|b| b.item_id).collect();
        let pooled = mean(&pr.item_ids, &history);
        let item_vec = pr.item_ids.row(p as usize).to_vec();
        x.extend_from_slice(&pooled);
        x.extend(pooled.iter().zip(&item_vec).map(|(a, b)| a * b));
        if pr.config.cross_features {
            let overlap = query.terms.iter().filter(|t| item.title.contains(t)).count() as f64 / query.terms.len() as f64;
            let seen = history.iter().filter(|&&h| h == p).count() as f64;
            x.push(query.categories.contains(&item.category) as u8 as f64);
            x.push(overlap);
            x.push(self.affinity[u as usize][item.category as usize]);
            x.push(self.brand_affinity[u as usize][item.brand as usize]);
            x.push(seen.min(3.0) / 3.0);
        }
        let lookup = Lookup {
            rows,
            query_categories: query.categories.clone(),
            query_terms: query.terms.clone(),
            title_terms: item.title.clone(),
            history,
            pooled,
            item: item_vec,
        };
        Ok((x, lookup))
    }

    fn logits(&self, u: UserId, q: QueryId, p: ItemId) -> Result<Vec<f64>> {
        let (x, _) = self.input(u, q, p)?;
        Ok(self.params.net.forward(&x, MlpShape::default(), None))
    }

    fn scatter(&self, lookup: &Lookup, dx: &[f64], grad: &mut TeacherParams) {
        let f = self.params.config.field_width;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            s..at
        };
        let r = &lookup.rows;
        let single = [(0usize, 0usize), (1, 1), (2, 2), (3, 3)];
        for &(slot, ri) in &single {
            let range = take(f);
            let t = match slot {
                0 => &mut grad.user_ids,
                1 => &mut grad.segments,
                2 => &mut grad.ages,
                _ => &mut grad.query_freqs,
            };
            axpy(1.0, &dx[range], t.row_mut(r[ri] as usize));
        }
        let range = take(f);
        for &c in &lookup.query_categories {
            axpy(1.0 / lookup.query_categories.len() as f64, &dx[range.clone()], grad.query_categories.row_mut(c as usize));
        }
        let range = take(f);
        for &t in &lookup.query_terms {
            axpy(1.0 / lookup.query_terms.len() as f64, &dx[range.clone()], grad.query_terms.row_mut(t as usize));
        }
        for slot in 0..4 {
            let range = take(f);
            let t = match slot {
                0 => &mut grad.item_ids,
                1 => &mut grad.item_categories,
                2 => &mut grad.brands,
                _ => &mut grad.prices,
            };
            axpy(1.0, &dx[range], t.row_mut(r[4 + slot] as usize));
        }
        let range = take(f);
        for &t in &lookup.title_terms {
            axpy(1.0 / lookup.title_terms.len() as f64, &dx[range.clone()], grad.title_terms.row_mut(t as usize));
        }
        let d_pool = take(f);
        let d_prod = take(f);
        if lookup.history.is_empty() {
            return;
        }
        // product field: d item = dprod * pooled; d pooled = dprod * item
        let item_grad: Vec<f64> = dx[d_prod.clone()].iter().zip(&lookup.pooled).map(|(g, h)| g * h).collect();
        axpy(1.0, &item_grad, grad.item_ids.row_mut(r[4] as usize));
        let pooled_grad: Vec<f64> = dx[d_pool].iter().zip(&dx[d_prod]).zip(&lookup.item).map(|((a, g), e)| a + g * e).collect();
        let w = 1.0 / lookup.history.len() as f64;
        for &h in &lookup.history {
            axpy(w, &pooled_grad, grad.item_ids.row_mut(h as usize));
        }
    }

    /// Training objective on one batch: mean CTR log-loss over all records plus
    /// mean CVR log-loss over clicked records, with its gradient.
    pub fn batch_gradient(&self, batch: &[ExposureRecord]) -> Result<(f64, TeacherParams)> {
        let shape = MlpShape::default();
        let mut grad = self.params.clone();
        grad.zero();
        let n_clicked = batch.iter().filter(|r| r.clicked).count();
        let mut loss = 0.0;
        for r in batch {
            let (x, lookup) = self.input(r.user_id, r.query_id, r.item_id)?;
            let mut cache = MlpCache::default();
            let z = self.params.net.forward(&x, shape, Some(&mut cache));
            let (l_ctr, d_ctr) = pointwise_logloss(z[0], r.clicked as u8 as f64);
            let mut dz = [d_ctr / batch.len() as f64, 0.0];
            loss += l_ctr / batch.len() as f64;
            if r.clicked {
                let (l_cvr, d_cvr) = pointwise_logloss(z[1], r.purchased as u8 as f64);
                dz[1] = d_cvr / n_clicked as f64;
                loss += l_cvr / n_clicked as f64;
            }
            let dx = self.params.net.backward(&cache, &dz, shape, &mut grad.net);
            self.scatter(&lookup, &dx, &mut grad);
        }
        Ok((loss, grad))
    }

    /// Mean log-loss of both heads over `records` (CVR over clicked records only).
    pub fn log_loss(&self, records: &[ExposureRecord]) -> Result<(f64, f64)> {
        let (mut ctr, mut cvr, mut n_clicked) = (0.0, 0.0, 0usize);
        for r in records {
            let z = self.logits(r.user_id, r.query_id, r.item_id)?;
            ctr += pointwise_logloss(z[0], r.clicked as u8 as f64).0;
            if r.clicked {
                cvr += pointwise_logloss(z[1], r.purchased as u8 as f64).0;
                n_clicked += 1;
            }
        }
        Ok((ctr / records.len().max(1) as f64, cvr / n_clicked.max(1) as f64))
    }
}

impl Teacher for LearnedTeacher {
    fn scores(&self, _catalog: &Catalog, u: UserId, q: QueryId, p: ItemId) -> Result<TeacherScores> {
        let z = self.logits(u, q, p)?;
        Ok(TeacherScores::new(sigmoid(z[0]), sigmoid(z[1])))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_predicted: f64,
    pub mean_observed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ctr_deciles: Vec<CalibrationBin>,
    pub cvr_deciles: Vec<CalibrationBin>,
    pub mean_ctr_predicted: f64,
    pub mean_ctr_observed: f64,
    pub mean_cvr_predicted: f64,
    pub mean_cvr_observed: f64,
}

fn deciles(mut pairs: Vec<(f64, f64)>) -> Vec<CalibrationBin> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    (0..10)
        .filter_map(|k| {
            let chunk = &pairs[k * n / 10..(k + 1) * n / 10];
            (!chunk.is_empty()).then(|| CalibrationBin {
                count: chunk.len(),
                mean_predicted: chunk.iter().map(|p| p.0).sum::<f64>() / chunk.len() as f64,
                mean_observed: chunk.iter().map(|p| p.1).sum::<f64>() / chunk.len() as f64,
            })
        })
        .collect()
}

pub fn calibration_report(teacher: &LearnedTeacher, records: &[ExposureRecord]) -> Result<CalibrationReport> {
    let mut ctr = Vec::with_capacity(records.len());
    let mut cvr = Vec::new();
    for r in records {
        let z = teacher.logits(r.user_id, r.query_id, r.item_id)?;
        ctr.push((sigmoid(z[0]), r.clicked as u8 as f64));
        if r.clicked {
            cvr.push((sigmoid(z[1]), r.purchased as u8 as f64));
        }
    }
    let mean = |v: &[(f64, f64)], pick: fn(&(f64, f64)) -> f64| v.iter().map(pick).sum::<f64>() / v.len().max(1) as f64;
    Ok(CalibrationReport {
        mean_ctr_predicted: mean(&ctr, |p| p.0),
        mean_ctr_observed: mean(&ctr, |p| p.1),
        mean_cvr_predicted: mean(&cvr, |p| p.0),
        mean_cvr_observed: mean(&cvr, |p| p.1),
        ctr_deciles: deciles(ctr),
        cvr_deciles: deciles(cvr),
    })
}

#[derive(Clone, Debug)]
pub struct TeacherTraining {
    pub teacher: LearnedTeacher,
    pub calibration: CalibrationReport,
    /// Mean combined training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Pointwise training: CTR head on every exposure, CVR head on clicked ones.
pub fn train_learned_teacher(catalog: &Catalog, records: &[ExposureRecord], config: &TeacherConfig) -> Result<TeacherTraining> {
    if records.is_empty() {
        return Err(Error::Untrainable("no exposure records".into()));
    }
    if !records.iter().any(|r| r.clicked) {
        return Err(Error::Untrainable("no clicked exposures for the CVR head".into()));
    }
    let store = FeatureStore::from_catalog(catalog);
    let params = TeacherParams::init(config, store.vocab)?;
    let mut teacher = LearnedTeacher::new(params, catalog)?;
    let mut adam = Adam::new(config.optimizer.clone(), &teacher.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7465_6163_6865_72);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ExposureRecord> = chunk.iter().map(|&i| records[i]).collect();
            let (loss, mut grad) = teacher.batch_gradient(&batch)?;
            if config.l2 > 0.0 {
                for ((name, g), (_, w)) in grad.tensors_mut().into_iter().zip(teacher.params.tensors()) {
                    if !name.ends_with("_ids") {
                        continue;
                    }
                    axpy(config.l2, &w.data, &mut g.data);
                }
            }
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Numerical("teacher training diverged".into()));
            }
            adam.step(&mut teacher.params, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    let calibration = calibration_report(&teacher, records)?;
    Ok(TeacherTraining { teacher, calibration, loss_history: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_catalog, run_cascade_logging, CascadePolicy, SimConfig};

    #[test]
    fn product_identity() {
        let t = TeacherScores::new(0.4, 0.1);
        assert!((t.p_ctcvr() - 0.04).abs() < 1e-15);
        assert_eq!(TeacherScores::new(0.0, 0.7).p_ctcvr(), 0.0);
        assert!(TeacherScores::checked(1.2, 0.1).is_err());
    }

    #[test]
    fn oracle_matches_ground_truth_bitwise() {
        let c = gen_catalog(1, 50, 30, 400, &SimConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        use rand::Rng;
        for _ in 0..1000 {
            let (u, q, p) = (rng.random_range(0..50), rng.random_range(0..30), rng.random_range(0..400));
            let t = OracleTeacher.scores(&c, u, q, p).unwrap();
            let (a, b) = c.true_probabilities(u, q, p).unwrap();
            assert_eq!((t.p_ctr.to_bits(), t.p_cvr.to_bits()), (a.to_bits(), b.to_bits()));
            assert_eq!(t.p_ctcvr(), a * b);
        }
        assert!(matches!(OracleTeacher.scores(&c, 50, 0, 0), Err(Error::Lookup { .. })));
    }

    #[test]
    fn untrainable_without_clicks() {
        let c = gen_catalog(1, 5, 5, 50, &SimConfig::default()).unwrap();
        let recs = vec![ExposureRecord { user_id: 0, query_id: 0, item_id: 0, clicked: false, purchased: false }];
        assert!(matches!(train_learned_teacher(&c, &recs, &TeacherConfig::default()), Err(Error::Untrainable(_))));
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let c = gen_catalog(3, 20, 10, 60, &SimConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let batch: Vec<ExposureRecord> = (0..12)
            .map(|i| ExposureRecord {
                user_id: rng.random_range(0..20),
                query_id: rng.random_range(0..10),
                item_id: rng.random_range(0..60),
                clicked: i % 3 != 0,
                purchased: i % 2 == 0,
            })
            .collect();
        for cross_features in [true, false] {
            let cfg = TeacherConfig { field_width: 3, hidden: vec![6, 4], cross_features, seed: 2, ..TeacherConfig::default() };
            let store = FeatureStore::from_catalog(&c);
            let mut teacher = LearnedTeacher::new(TeacherParams::init(&cfg, store.vocab).unwrap(), &c).unwrap();
            let (_, grad) = teacher.batch_gradient(&batch).unwrap();
            let analytic: Vec<f64> = grad.tensors().iter().flat_map(|(_, m)| m.data.clone()).collect();
            let h = 1e-5;
            let mut checked = 0;
            let n = analytic.len();
            for idx in (0..n).step_by(7) {
                let nudge = |t: &mut LearnedTeacher, d: f64| {
                    let mut left = idx;
                    for (_, m) in t.params.tensors_mut() {
                        if left < m.data.len() {
                            m.data[left] += d;
                            return;
                        }
                        left -= m.data.len();
                    }
                };
                nudge(&mut teacher, h);
                let up = teacher.batch_gradient(&batch).unwrap().0;
                nudge(&mut teacher, -2.0 * h);
                let down = teacher.batch_gradient(&batch).unwrap().0;
                nudge(&mut teacher, h);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
                assert!(err <= 1e-4, "coordinate {idx}: fd {fd} vs {}", analytic[idx]);
                checked += 1;
            }
            assert!(checked > 100);
        }
    }

    #[test]
    fn learned_teacher_is_calibrated_on_average_and_learns() {
        let c = gen_catalog(2, 1000, 200, 2000, &SimConfig::default()).unwrap();
        let logs = run_cascade_logging(&c, &CascadePolicy::default(), 5000, 2).unwrap();
        let (train, held) = logs.split_at(4000);
        let recs = exposure_records(train);
        let out = train_learned_teacher(&c, &recs, &TeacherConfig::default()).unwrap();
        let rel = (out.calibration.mean_ctr_predicted - out.calibration.mean_ctr_observed).abs() / out.calibration.mean_ctr_observed;
        assert!(rel <= 0.10, "mean pCTR off by {rel}");
        assert!(out.loss_history.windows(2).all(|w| w[1] < w[0]), "{:?}", out.loss_history);
        // beats a constant-rate predictor on held-out exposures
        let held = exposure_records(held);
        let rate = recs.iter().filter(|r| r.clicked).count() as f64 / recs.len() as f64;
        let constant = held.iter().map(|r| pointwise_logloss(rate.ln() - (1.0 - rate).ln(), r.clicked as u8 as f64).0).sum::<f64>()
            / held.len() as f64;
        let (learned, _) = out.teacher.log_loss(&held).unwrap();
        assert!(learned < constant, "{learned} vs {constant}");
        let s = out.teacher.scores(&c, 0, 0, 0).unwrap();
        assert!(s.p_ctr > 0.0 && s.p_ctr < 1.0 && s.p_cvr > 0.0 && s.p_cvr < 1.0);
        assert!((s.p_ctcvr() - s.p_ctr * s.p_cvr).abs() <= 1e-12);
    }

    #[test]
    fn cvr_calibration_is_worse_on_never_clicked_items() {
        let c = gen_catalog(4, 1000, 200, 2000, &SimConfig::default()).unwrap();
        let logs = run_cascade_logging(&c, &CascadePolicy::default(), 5000, 4).unwrap();
        let (train, held) = logs.split_at(4000);
        let recs = exposure_records(train);
        let out = train_learned_teacher(&c, &recs, &TeacherConfig::default()).unwrap();
        let clicked: std::collections::HashSet<ItemId> = recs.iter().filter(|r| r.clicked).map(|r| r.item_id).collect();
        // [predicted, true, count] of pCVR over held-out pre-ranking candidates,
        // split by whether the item was ever clicked in training
        let mut sums = [[0.0f64; 3]; 2];
        for log in held {
            for &p in &log.prerank_out {
                let s = out.teacher.scores(&c, log.user_id, log.query_id, p).unwrap();
                let (_, cvr) = c.true_probabilities(log.user_id, log.query_id, p).unwrap();
                let g = &mut sums[!clicked.contains(&p) as usize];
                g[0] += s.p_cvr;
                g[1] += cvr;
                g[2] += 1.0;
            }
        }
        assert!(sums[0][2] > 1000.0 && sums[1][2] > 1000.0);
        let err = |g: [f64; 3]| (g[0] - g[1]).abs() / g[1];
        assert!(err(sums[1]) > err(sums[0]), "never clicked {} vs clicked {}", err(sums[1]), err(sums[0]));
    }
}
