//! Offline evaluation: hitrate@k against in-search or all-scenario purchase
//! targets over the pre-ranking candidate pool, per-request purchase AUC on
//! exposures, and hitrate curves.
//!
//! Per-triple values are exact rationals and are summed exactly, so
//! aggregates do not depend on evaluation order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samples::{group_by_request, AttachedPurchase};
use crate::sim::{sha256_hex, ItemId, QueryId, RequestLog, UserId};

pub type Exact = Ratio<i128>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Purchases made in this search request.
    InScenario,
    /// In-search purchases plus outside purchases attached to this request.
    AllScenario,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTriple {
    pub request_id: u64,
    pub user_id: UserId,
    pub query_id: QueryId,
    pub pool: Vec<ItemId>,
    /// Sorted, duplicate free, nonempty.
    pub targets: Vec<ItemId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleStats {
    pub requests: usize,
    pub emitted: usize,
    pub dropped_no_target: usize,
    pub injected_targets: usize,
}

pub fn build_eval_triples(
    logs: &[RequestLog],
    attached: &[AttachedPurchase],
    mode: TargetMode,
    inject_targets: bool,
) -> (Vec<EvalTriple>, TripleStats) {
    let by_request = group_by_request(attached);
    let mut stats = TripleStats { requests: logs.len(), ..TripleStats::default() };
    let mut out = Vec::new();
    for log in logs {
        let mut targets: BTreeSet<ItemId> = log.purchases.iter().copied().collect();
        if mode == TargetMode::AllScenario {
            if let Some(extra) = by_request.get(&log.request_id) {
                targets.extend(extra);
            }
        }
        if targets.is_empty() || log.matching_out.is_empty() {
            stats.dropped_no_target += 1;
            continue;
        }
        let mut pool = log.matching_out.clone();
        if inject_targets {
            let present: BTreeSet<ItemId> = pool.iter().copied().collect();
            for &t in &targets {
                if !present.contains(&t) {
                    pool.push(t);
                    stats.injected_targets += 1;
                }
            }
        }
        out.push(EvalTriple {
            request_id: log.request_id,
            user_id: log.user_id,
            query_id: log.query_id,
            pool,
            targets: targets.into_iter().collect(),
        });
    }
    stats.emitted = out.len();
    (out, stats)
}

pub fn dataset_digest(triples: &[EvalTriple]) -> String {
    sha256_hex(&serde_json::to_vec(triples).expect("triples serialize"))
}

/// Items ordered by descending score, ties by ascending item id.
pub fn rank_items(pool: &[ItemId], scores: &[f64]) -> Vec<ItemId> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(pool[a].cmp(&pool[b])));
    order.into_iter().map(|i| pool[i]).collect()
}

/// `|top-k ∩ targets| / |targets|`, exactly.
pub fn hitrate_exact(ranked: &[ItemId], targets: &BTreeSet<ItemId>, k: usize) -> Result<Exact> {
    if targets.is_empty() {
        return Err(Error::UndefinedMetric("hitrate with an empty target set".into()));
    }
    let hits = ranked.iter().take(k).filter(|p| targets.contains(p)).count();
    Ok(Ratio::new(hits as i128, targets.len() as i128))
}

pub fn hitrate_at_k(ranked: &[ItemId], targets: &BTreeSet<ItemId>, k: usize) -> Result<f64> {
    Ok(to_f64(hitrate_exact(ranked, targets, k)?))
}

pub fn to_f64(r: Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Scores a triple's candidate pool, aligned with `triple.pool`.
pub trait PoolScorer {
    fn name(&self) -> String;
    fn score_pool(&self, triple: &EvalTriple) -> Result<Vec<f64>>;
}

/// Ranks by position in the logged pre-ranking output; everything else after.
pub struct LoggingPolicyScorer {
    positions: BTreeMap<u64, BTreeMap<ItemId, usize>>,
}

impl LoggingPolicyScorer {
    pub fn new(logs: &[RequestLog]) -> Self {
        let positions =
            logs.iter().map(|l| (l.request_id, l.prerank_out.iter().enumerate().map(|(i, &p)| (p, i)).collect())).collect();
        LoggingPolicyScorer { positions }
    }
}

impl PoolScorer for LoggingPolicyScorer {
    fn name(&self) -> String {
        "logging_policy".into()
    }

    fn score_pool(&self, triple: &EvalTriple) -> Result<Vec<f64>> {
        let pos = self
            .positions
            .get(&triple.request_id)
            .ok_or(Error::Lookup { kind: "request", id: triple.request_id })?;
        Ok(triple.pool.iter().map(|p| pos.get(p).map_or(f64::NEG_INFINITY, |&i| -(i as f64))).collect())
    }
}

/// Uniformly random scores, seeded per request.
pub struct RandomScorer {
    pub seed: u64,
}

impl PoolScorer for RandomScorer {
    fn name(&self) -> String {
        "random".into()
    }

    fn score_pool(&self, triple: &EvalTriple) -> Result<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(triple.request_id);
        Ok(triple.pool.iter().map(|_| rng.random::<f64>()).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub clamped: usize,
}

/// Macro-averaged hitrate for each k in `k_grid`, ranking each pool once.
pub fn hitrates(scorer: &dyn PoolScorer, triples: &[EvalTriple], k_grid: &[usize]) -> Result<(Vec<Exact>, Aggregate)> {
    if triples.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation triples".into()));
    }
    let mut sums = vec![Exact::from_integer(0); k_grid.len()];
    let mut agg = Aggregate { count: triples.len(), clamped: 0 };
    for t in triples {
        let scores = scorer.score_pool(t)?;
        if scores.len() != t.pool.len() {
            return Err(Error::Contract("scorer returned a misaligned score vector".into()));
        }
        let ranked = rank_items(&t.pool, &scores);
        let targets: BTreeSet<ItemId> = t.targets.iter().copied().collect();
        for (s, &k) in sums.iter_mut().zip(k_grid) {
            if k > ranked.len() {
                agg.clamped += 1;
            }
            *s += hitrate_exact(&ranked, &targets, k.min(ranked.len()))?;
        }
    }
    let n = Exact::from_integer(triples.len() as i128);
    Ok((sums.into_iter().map(|s| s / n).collect(), agg))
}

/// Mean all-scenario hitrate at `k`. Pass all-scenario triples.
pub fn asph_at_k(scorer: &dyn PoolScorer, triples: &[EvalTriple], k: usize) -> Result<f64> {
    Ok(to_f64(hitrates(scorer, triples, &[k])?.0[0]))
}

/// Mean in-search hitrate at `k`. Pass in-scenario triples.
pub fn isph_at_k(scorer: &dyn PoolScorer, triples: &[EvalTriple], k: usize) -> Result<f64> {
    asph_at_k(scorer, triples, k)
}

/// Pairwise AUC with ties counted as one half, exactly. `None` when the
/// request has no positive or no negative.
pub fn request_auc(scores: &[f64], labels: &[bool]) -> Option<Exact> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice = 0i128;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Some(Ratio::new(twice, 2 * (pos.len() * neg.len()) as i128))
}

/// Mean per-request exposure AUC over requests with both classes.
pub fn pauc_at_10(requests: &[(Vec<f64>, Vec<bool>)]) -> Result<(f64, usize)> {
    let mut sum = Exact::from_integer(0);
    let mut n = 0usize;
    for (scores, labels) in requests {
        if scores.len() != labels.len() || scores.len() > 10 {
            return Err(Error::Contract("PAUC@10 expects at most 10 aligned scores and labels".into()));
        }
        if let Some(auc) = request_auc(scores, labels) {
            sum += auc;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no request has both a purchased and an unpurchased exposure".into()));
    }
    Ok((to_f64(sum / Exact::from_integer(n as i128)), n))
}

/// Scores each request's exposures with `scorer` and pairs them with in-search purchase labels.
pub fn exposure_score_sets(scorer: &dyn PoolScorer, logs: &[RequestLog]) -> Result<Vec<(Vec<f64>, Vec<bool>)>> {
    logs.iter()
        .filter(|l| !l.exposures.is_empty())
        .map(|l| {
            let t = EvalTriple {
                request_id: l.request_id,
                user_id: l.user_id,
                query_id: l.query_id,
                pool: l.exposures.clone(),
                targets: Vec::new(),
            };
            let scores = scorer.score_pool(&t)?;
            Ok((scores, l.exposures.iter().map(|p| l.purchases.contains(p)).collect()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub metric: String,
    pub k_grid: Vec<usize>,
    pub values: Vec<f64>,
    /// Exact per-k values as `numerator/denominator`.
    pub exact: Vec<String>,
    pub count: usize,
    pub dataset_digest: String,
    #[serde(default)]
    pub config_digest: String,
}

impl MetricReport {
    pub fn check(&self) -> Result<()> {
        if self.k_grid.len() != self.values.len() {
            return Err(Error::Invariant(format!("{}: grid and values differ in length", self.metric)));
        }
        if !self.k_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invariant(format!("{}: k grid not strictly increasing", self.metric)));
        }
        if !self.values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Invariant(format!("{}: value outside [0, 1]", self.metric)));
        }
        Ok(())
    }

    pub fn value_at(&self, k: usize) -> Option<f64> {
        self.k_grid.iter().position(|&x| x == k).map(|i| self.values[i])
    }
}

pub const DEFAULT_K_GRID: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 200, 500];

/// Hitrate curve of one scorer over `triples`; nondecreasing in k.
pub fn hitrate_curve(scorer: &dyn PoolScorer, triples: &[EvalTriple], k_grid: &[usize], metric: &str) -> Result<MetricReport> {
    if !k_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config("k grid must be strictly increasing"));
    }
    let (exact, agg) = hitrates(scorer, triples, k_grid)?;
    let report = MetricReport {
        model: scorer.name(),
        metric: metric.into(),
        k_grid: k_grid.to_vec(),
        values: exact.iter().map(|r| to_f64(*r)).collect(),
        exact: exact.iter().map(|r| format!("{}/{}", r.numer(), r.denom())).collect(),
        count: agg.count,
        dataset_digest: dataset_digest(triples),
        config_digest: String::new(),
    };
    report.check()?;
    Ok(report)
}

pub fn pauc_report(scorer: &dyn PoolScorer, logs: &[RequestLog]) -> Result<MetricReport> {
    let sets = exposure_score_sets(scorer, logs)?;
    let (value, count) = pauc_at_10(&sets)?;
    Ok(MetricReport {
        model: scorer.name(),
        metric: "pauc".into(),
        k_grid: vec![10],
        values: vec![value],
        exact: Vec::new(),
        count,
        dataset_digest: sha256_hex(&serde_json::to_vec(&logs.iter().map(|l| l.request_id).collect::<Vec<_>>())?),
        config_digest: String::new(),
    })
}

/// One JSON report per line.
pub fn write_reports<W: Write>(reports: &[MetricReport], mut out: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports<R: BufRead>(input: R) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let r: MetricReport = serde_json::from_str(&line)?;
            r.check()?;
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);
    impl PoolScorer for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn score_pool(&self, t: &EvalTriple) -> Result<Vec<f64>> {
            Ok(self.0[..t.pool.len()].to_vec())
        }
    }

    fn set(v: &[ItemId]) -> BTreeSet<ItemId> {
        v.iter().copied().collect()
    }

    #[test]
    fn hitrate_hand_values() {
        let ranked = [1, 2, 3, 4];
        assert_eq!(hitrate_at_k(&ranked, &set(&[2, 4]), 3).unwrap(), 0.5);
        assert_eq!(hitrate_at_k(&ranked, &set(&[1, 2]), 3).unwrap(), 1.0);
        assert_eq!(hitrate_at_k(&ranked, &set(&[2]), 0).unwrap(), 0.0);
        assert!(hitrate_at_k(&ranked, &set(&[]), 2).is_err());
    }

    #[test]
    fn single_target_rank_placement() {
        let t = EvalTriple { request_id: 0, user_id: 0, query_id: 0, pool: vec![10, 11, 12, 13, 14], targets: vec![13] };
        let s = Fixed(vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(asph_at_k(&s, std::slice::from_ref(&t), 3).unwrap(), 0.0);
        assert_eq!(asph_at_k(&s, std::slice::from_ref(&t), 5).unwrap(), 1.0);
        // k beyond the pool clamps
        assert_eq!(asph_at_k(&s, &[t], 50).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_by_item_id() {
        assert_eq!(rank_items(&[9, 3, 5], &[1.0, 1.0, 2.0]), vec![5, 3, 9]);
    }

    #[test]
    fn pauc_hand_values() {
        let (v, _) = pauc_at_10(&[(vec![0.9, 0.1, 0.5], vec![false, true, false])]).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = pauc_at_10(&[(vec![0.9, 0.1, 0.5], vec![true, false, false])]).unwrap();
        assert_eq!(v, 1.0);
        let (v, _) = pauc_at_10(&[(vec![0.3; 3], vec![false, true, false])]).unwrap();
        assert_eq!(v, 0.5);
        assert!(matches!(pauc_at_10(&[(vec![0.3; 2], vec![false, false])]), Err(Error::UndefinedMetric(_))));
    }

    fn log(id: u64, purchases: Vec<ItemId>, others: Vec<ItemId>) -> (RequestLog, Vec<AttachedPurchase>) {
        let l = RequestLog {
            request_id: id,
            user_id: 1,
            query_id: 2,
            timestamp: 10,
            matching_out: (0..20).collect(),
            prerank_out: (0..8).collect(),
            exposures: (0..4).collect(),
            clicks: purchases.clone(),
            purchases,
            other_scenario_purchases: vec![],
            other_scenario_clicks: vec![],
        };
        let att = others
            .into_iter()
            .map(|p| AttachedPurchase {
                user_id: 1,
                query_id: 2,
                item_id: p,
                purchase_timestamp: 20,
                query_timestamp: 10,
                scenario_id: 1,
                request_id: id,
            })
            .collect();
        (l, att)
    }

    #[test]
    fn triple_modes() {
        let (l, att) = log(0, vec![1], vec![]);
        let (a, _) = build_eval_triples(std::slice::from_ref(&l), &att, TargetMode::InScenario, true);
        let (b, _) = build_eval_triples(&[l], &att, TargetMode::AllScenario, true);
        assert_eq!(a, b);
        let (l, att) = log(0, vec![], vec![15, 15, 40]);
        let (a, sa) = build_eval_triples(std::slice::from_ref(&l), &att, TargetMode::InScenario, true);
        assert!(a.is_empty());
        assert_eq!(sa.dropped_no_target, 1);
        let (b, sb) = build_eval_triples(&[l], &att, TargetMode::AllScenario, true);
        assert_eq!(b[0].targets, vec![15, 40]);
        assert_eq!(sb.injected_targets, 1);
        assert!(b[0].pool.contains(&40));
    }

    #[test]
    fn logging_policy_hits_everything_at_prerank_size() {
        let (l, _) = log(0, vec![2, 3], vec![]);
        let (t, _) = build_eval_triples(std::slice::from_ref(&l), &[], TargetMode::InScenario, false);
        let scorer = LoggingPolicyScorer::new(&[l]);
        assert_eq!(isph_at_k(&scorer, &t, 8).unwrap(), 1.0);
    }

    #[test]
    fn curve_is_monotone_and_round_trips() {
        let t = EvalTriple { request_id: 0, user_id: 0, query_id: 0, pool: (0..12).collect(), targets: vec![3, 7, 11] };
        let s = RandomScorer { seed: 3 };
        let r = hitrate_curve(&s, &[t], &[1, 2, 5, 10, 12], "asph").unwrap();
        assert!(r.values.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*r.values.last().unwrap(), 1.0);
        let mut buf = Vec::new();
        write_reports(std::slice::from_ref(&r), &mut buf).unwrap();
        assert_eq!(read_reports(&buf[..]).unwrap(), vec![r]);
    }
}
