//! Query-level entire-space training samples.
//!
//! Each logged request becomes one [`QuerySample`] holding its exposures (Ex),
//! a uniform draw of unexposed ranking candidates (RC) and a uniform draw of
//! pre-ranking candidates the logged policy dropped (PRC). Purchases and clicks
//! made outside search are attached to the latest relevant earlier query of
//! the same user and promoted into that request's labels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Catalog, ItemId, QueryId, RequestLog, UserId};
use crate::teacher::{Teacher, TeacherScores};

const SAMPLING_SALT: u64 = 0x7361_6d70_6c65_7273;

/// Default relevance threshold for attaching an outside purchase to a query.
pub const DEFAULT_BORDERLINE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    Ex,
    Rc,
    Prc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub item_id: ItemId,
    pub origin: Origin,
    /// All-scenario purchase label.
    pub aspl: bool,
    /// All-scenario click label.
    pub ascl: bool,
    /// Adaptive exposure label.
    pub ael: bool,
    /// In-search purchase in this request.
    pub ispl: bool,
    /// In-search click in this request.
    pub iscl: bool,
    pub teacher: Option<TeacherScores>,
}

impl LabeledItem {
    pub fn check_cascade(&self) -> Result<()> {
        if (self.aspl && !self.ascl) || (self.ascl && !self.ael) || (self.ispl && !self.iscl) {
            return Err(Error::Labeling(format!("label cascade broken for item {}", self.item_id)));
        }
        if self.origin != Origin::Ex && self.ael && !self.ascl {
            return Err(Error::Labeling(format!("unexposed item {} has exposure label without click", self.item_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub request_id: u64,
    pub user_id: UserId,
    pub query_id: QueryId,
    pub timestamp: i64,
    pub items: Vec<LabeledItem>,
    #[serde(default)]
    pub rc_truncated: bool,
    #[serde(default)]
    pub prc_truncated: bool,
}

impl QuerySample {
    pub fn for_tests(items: Vec<LabeledItem>) -> Self {
        QuerySample { request_id: 0, user_id: 0, query_id: 0, timestamp: 0, items, rc_truncated: false, prc_truncated: false }
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.items.iter().filter(|it| it.origin == origin).count()
    }

    /// Keeps only items whose origin is listed, preserving order.
    pub fn restricted(&self, origins: &[Origin]) -> QuerySample {
        QuerySample { items: self.items.iter().filter(|it| origins.contains(&it.origin)).cloned().collect(), ..self.clone() }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for it in &self.items {
            if !seen.insert(it.item_id) {
                return Err(Error::Invariant(format!("request {}: item {} appears twice", self.request_id, it.item_id)));
            }
            it.check_cascade()?;
        }
        if !self.items.iter().any(|it| it.ael) {
            return Err(Error::Invariant(format!("request {}: no item with exposure label", self.request_id)));
        }
        Ok(())
    }
}

/// An outside-search event attached to the search request it is credited to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachedPurchase {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub item_id: ItemId,
    pub purchase_timestamp: i64,
    pub query_timestamp: i64,
    pub scenario_id: u8,
    pub request_id: u64,
}

/// A purchase or click made outside search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioAction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub scenario_id: u8,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionEntry {
    pub request_id: u64,
    pub query_id: QueryId,
    pub timestamp: i64,
}

/// Per-user search history, ordered by timestamp.
#[derive(Clone, Debug, Default)]
pub struct Sessions {
    by_user: BTreeMap<UserId, Vec<SessionEntry>>,
}

impl Sessions {
    pub fn from_logs(logs: &[RequestLog]) -> Self {
        let mut by_user: BTreeMap<UserId, Vec<SessionEntry>> = BTreeMap::new();
        for log in logs {
            by_user.entry(log.user_id).or_default().push(SessionEntry {
                request_id: log.request_id,
                query_id: log.query_id,
                timestamp: log.timestamp,
            });
        }
        for v in by_user.values_mut() {
            v.sort_by_key(|e| (e.timestamp, e.request_id));
        }
        Sessions { by_user }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (UserId, SessionEntry)>) -> Self {
        let mut by_user: BTreeMap<UserId, Vec<SessionEntry>> = BTreeMap::new();
        for (u, e) in entries {
            by_user.entry(u).or_default().push(e);
        }
        for v in by_user.values_mut() {
            v.sort_by_key(|e| (e.timestamp, e.request_id));
        }
        Sessions { by_user }
    }

    pub fn user(&self, u: UserId) -> &[SessionEntry] {
        self.by_user.get(&u).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn other_scenario_purchases(logs: &[RequestLog]) -> Vec<ScenarioAction> {
    collect_actions(logs, |l| &l.other_scenario_purchases)
}

pub fn other_scenario_clicks(logs: &[RequestLog]) -> Vec<ScenarioAction> {
    collect_actions(logs, |l| &l.other_scenario_clicks)
}

fn collect_actions(logs: &[RequestLog], pick: impl Fn(&RequestLog) -> &Vec<crate::sim::ScenarioEvent>) -> Vec<ScenarioAction> {
    logs.iter()
        .flat_map(|l| {
            pick(l).iter().map(move |e| ScenarioAction {
                user_id: l.user_id,
                item_id: e.item_id,
                scenario_id: e.scenario_id,
                timestamp: e.timestamp,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachStats {
    pub events: usize,
    pub attached: usize,
    /// No relevant query before the event.
    pub dropped_unrelated: usize,
    /// Collapsed into an earlier-kept triple for the same (user, item).
    pub deduplicated: usize,
}

/// Attaches each event to the user's latest strictly earlier query whose
/// relevance to the item reaches `borderline`; one triple per (user, item),
/// keeping the latest query.
pub fn attach_related_queries(
    events: &[ScenarioAction],
    sessions: &Sessions,
    relevance: impl Fn(QueryId, ItemId) -> f64,
    borderline: f64,
) -> (Vec<AttachedPurchase>, AttachStats) {
    let mut stats = AttachStats { events: events.len(), ..AttachStats::default() };
    let mut best: BTreeMap<(UserId, ItemId), AttachedPurchase> = BTreeMap::new();
    for ev in events {
        let history = sessions.user(ev.user_id);
        let before = history.partition_point(|s| s.timestamp < ev.timestamp);
        let found = history[..before].iter().rev().find(|s| relevance(s.query_id, ev.item_id) >= borderline);
        let Some(s) = found else {
            stats.dropped_unrelated += 1;
            continue;
        };
        let candidate = AttachedPurchase {
            user_id: ev.user_id,
            query_id: s.query_id,
            item_id: ev.item_id,
            purchase_timestamp: ev.timestamp,
            query_timestamp: s.timestamp,
            scenario_id: ev.scenario_id,
            request_id: s.request_id,
        };
        match best.get_mut(&(ev.user_id, ev.item_id)) {
            None => {
                best.insert((ev.user_id, ev.item_id), candidate);
            }
            Some(cur) => {
                stats.deduplicated += 1;
                let newer = (candidate.query_timestamp, candidate.purchase_timestamp)
                    > (cur.query_timestamp, cur.purchase_timestamp);
                if newer {
                    *cur = candidate;
                }
            }
        }
    }
    let mut out: Vec<AttachedPurchase> = best.into_values().collect();
    out.sort_by_key(|a| (a.request_id, a.item_id));
    stats.attached = out.len();
    (out, stats)
}

/// Attached events grouped by the request they are credited to.
pub fn group_by_request(attached: &[AttachedPurchase]) -> BTreeMap<u64, BTreeSet<ItemId>> {
    let mut out: BTreeMap<u64, BTreeSet<ItemId>> = BTreeMap::new();
    for a in attached {
        out.entry(a.request_id).or_default().insert(a.item_id);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CandidateDraw {
    pub rc: Vec<ItemId>,
    pub prc: Vec<ItemId>,
    pub rc_truncated: bool,
    pub prc_truncated: bool,
}

fn sampling_rng(seed: u64, request_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLING_SALT);
    rng.set_stream(request_id);
    rng
}

fn draw(pool: &[ItemId], count: usize, rng: &mut ChaCha8Rng) -> (Vec<ItemId>, bool) {
    if pool.len() <= count {
        return (pool.to_vec(), pool.len() < count);
    }
    let mut idx = sample_indices(rng, pool.len(), count).into_vec();
    idx.sort_unstable();
    (idx.into_iter().map(|i| pool[i]).collect(), false)
}

fn rc_pool(log: &RequestLog) -> Vec<ItemId> {
    let exposed: BTreeSet<_> = log.exposures.iter().copied().collect();
    log.prerank_out.iter().copied().filter(|p| !exposed.contains(p)).collect()
}

fn prc_pool(log: &RequestLog) -> Vec<ItemId> {
    let pre: BTreeSet<_> = log.prerank_out.iter().copied().collect();
    log.matching_out.iter().copied().filter(|p| !pre.contains(p)).collect()
}

/// Uniform draws without replacement: `m` from the unexposed ranking
/// candidates and `l` from the matching items the logged pre-ranker dropped.
pub fn sample_candidates(log: &RequestLog, m: usize, l: usize, seed: u64) -> CandidateDraw {
    let mut rng = sampling_rng(seed, log.request_id);
    let (rc, rc_truncated) = draw(&rc_pool(log), m, &mut rng);
    let (prc, prc_truncated) = draw(&prc_pool(log), l, &mut rng);
    CandidateDraw { rc, prc, rc_truncated, prc_truncated }
}

/// Like [`sample_candidates`] but places the given items first (when they
/// belong to a pool) before filling the rest uniformly.
fn sample_candidates_with(log: &RequestLog, m: usize, l: usize, seed: u64, forced: &BTreeSet<ItemId>) -> CandidateDraw {
    let mut rng = sampling_rng(seed, log.request_id);
    let mut fill = |pool: Vec<ItemId>, count: usize| {
        let (mut head, rest): (Vec<ItemId>, Vec<ItemId>) = pool.into_iter().partition(|p| forced.contains(p));
        head.truncate(count);
        let (tail, truncated) = draw(&rest, count - head.len(), &mut rng);
        head.extend(tail);
        (head, truncated)
    };
    let (rc, rc_truncated) = fill(rc_pool(log), m);
    let (prc, prc_truncated) = fill(prc_pool(log), l);
    CandidateDraw { rc, prc, rc_truncated, prc_truncated }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub aspl: bool,
    pub ascl: bool,
    pub ael: bool,
    pub ispl: bool,
    pub iscl: bool,
}

/// Labels for `items` of one request. `purchases` and `clicks` are the
/// outside-search events attached to this request.
pub fn assign_labels(
    log: &RequestLog,
    purchases: &BTreeSet<ItemId>,
    clicks: &BTreeSet<ItemId>,
    items: &[ItemId],
) -> Result<Vec<Labels>> {
    let universe: BTreeSet<_> = log.matching_out.iter().collect();
    let exposed: BTreeSet<_> = log.exposures.iter().collect();
    let clicked: BTreeSet<_> = log.clicks.iter().collect();
    let bought: BTreeSet<_> = log.purchases.iter().collect();
    items
        .iter()
        .map(|p| {
            if !universe.contains(p) {
                return Err(Error::Labeling(format!("item {p} is not a candidate of request {}", log.request_id)));
            }
            let ispl = bought.contains(p);
            let iscl = clicked.contains(p);
            let aspl = ispl || purchases.contains(p);
            let ascl = iscl || clicks.contains(p) || aspl;
            let ael = exposed.contains(p) || ascl;
            Ok(Labels { aspl, ascl, ael, ispl, iscl })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Ranking candidates per request.
    pub rc_count: usize,
    /// Pre-ranking candidates per request.
    pub prc_count: usize,
    pub seed: u64,
    pub borderline: f64,
    /// Put attached positives found in the candidate pools into RC/PRC first.
    pub keep_attached: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { rc_count: 10, prc_count: 40, seed: 0, borderline: DEFAULT_BORDERLINE, keep_attached: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub requests: usize,
    pub emitted: usize,
    pub skipped_no_exposure: usize,
    pub rc_truncated: usize,
    pub prc_truncated: usize,
    /// Attached purchases whose item never reached the request's candidate pool.
    pub attached_outside_pool: usize,
}

/// Attached outside-search purchases and clicks for a set of logs.
#[derive(Clone, Debug, Default)]
pub struct Attachments {
    pub purchases: Vec<AttachedPurchase>,
    pub clicks: Vec<AttachedPurchase>,
    pub purchase_stats: AttachStats,
    pub click_stats: AttachStats,
}

impl Attachments {
    pub fn from_logs(catalog: &Catalog, logs: &[RequestLog], borderline: f64) -> Self {
        let sessions = Sessions::from_logs(logs);
        let rel = |q: QueryId, p: ItemId| catalog.qp_relevance(q, p).unwrap_or(0.0);
        let (purchases, purchase_stats) = attach_related_queries(&other_scenario_purchases(logs), &sessions, rel, borderline);
        let (clicks, click_stats) = attach_related_queries(&other_scenario_clicks(logs), &sessions, rel, borderline);
        Attachments { purchases, clicks, purchase_stats, click_stats }
    }
}

/// One sample per request with at least one exposure, in request order.
pub fn build_query_samples(
    catalog: &Catalog,
    logs: &[RequestLog],
    attached: &Attachments,
    config: &SampleConfig,
    teacher: Option<&dyn Teacher>,
) -> Result<(Vec<QuerySample>, BuildStats)> {
    let purchases = group_by_request(&attached.purchases);
    let clicks = group_by_request(&attached.clicks);
    let empty = BTreeSet::new();
    let mut stats = BuildStats { requests: logs.len(), ..BuildStats::default() };
    let mut out = Vec::with_capacity(logs.len());
    for log in logs {
        if log.exposures.is_empty() {
            stats.skipped_no_exposure += 1;
            continue;
        }
        let bought = purchases.get(&log.request_id).unwrap_or(&empty);
        let clicked = clicks.get(&log.request_id).unwrap_or(&empty);
        let draw = if config.keep_attached {
            let forced: BTreeSet<ItemId> = bought.union(clicked).copied().collect();
            sample_candidates_with(log, config.rc_count, config.prc_count, config.seed, &forced)
        } else {
            sample_candidates(log, config.rc_count, config.prc_count, config.seed)
        };
        stats.rc_truncated += draw.rc_truncated as usize;
        stats.prc_truncated += draw.prc_truncated as usize;
        let pool: BTreeSet<_> = log.matching_out.iter().collect();
        stats.attached_outside_pool += bought.iter().filter(|p| !pool.contains(p)).count();

        let ids: Vec<(ItemId, Origin)> = log
            .exposures
            .iter()
            .map(|&p| (p, Origin::Ex))
            .chain(draw.rc.iter().map(|&p| (p, Origin::Rc)))
            .chain(draw.prc.iter().map(|&p| (p, Origin::Prc)))
            .collect();
        let just_ids: Vec<ItemId> = ids.iter().map(|x| x.0).collect();
        let labels = assign_labels(log, bought, clicked, &just_ids)?;
        let items = ids
            .iter()
            .zip(labels)
            .map(|(&(item_id, origin), l)| {
                let teacher = match teacher {
                    Some(t) => Some(t.scores(catalog, log.user_id, log.query_id, item_id)?),
                    None => None,
                };
                Ok(LabeledItem { item_id, origin, aspl: l.aspl, ascl: l.ascl, ael: l.ael, ispl: l.ispl, iscl: l.iscl, teacher })
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = QuerySample {
            request_id: log.request_id,
            user_id: log.user_id,
            query_id: log.query_id,
            timestamp: log.timestamp,
            items,
            rc_truncated: draw.rc_truncated,
            prc_truncated: draw.prc_truncated,
        };
        sample.check_invariants()?;
        out.push(sample);
    }
    stats.emitted = out.len();
    Ok((out, stats))
}

pub fn write_samples<W: Write>(samples: &[QuerySample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R) -> Result<Vec<QuerySample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_catalog, run_cascade_logging, CascadePolicy, SimConfig};
    use crate::teacher::OracleTeacher;

    fn entry(request_id: u64, query_id: QueryId, timestamp: i64) -> (UserId, SessionEntry) {
        (1, SessionEntry { request_id, query_id, timestamp })
    }

    fn buy(item_id: ItemId, timestamp: i64) -> ScenarioAction {
        ScenarioAction { user_id: 1, item_id, scenario_id: 2, timestamp }
    }

    #[test]
    fn attaches_to_latest_relevant_query() {
        let sessions = Sessions::from_entries([entry(0, 1, 1), entry(1, 2, 5)]);
        let (out, stats) = attach_related_queries(&[buy(9, 7)], &sessions, |_, _| 0.9, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].query_id, out[0].request_id, out[0].query_timestamp), (2, 1, 5));
        assert_eq!(stats.attached, 1);
    }

    #[test]
    fn skips_irrelevant_and_later_queries() {
        let sessions = Sessions::from_entries([entry(0, 1, 1), entry(1, 2, 5), entry(2, 3, 8)]);
        let rel = |q: QueryId, _| if q == 2 { 0.1 } else { 0.8 };
        let (out, _) = attach_related_queries(&[buy(9, 7)], &sessions, rel, 0.5);
        assert_eq!(out[0].query_id, 1);
        // equal timestamps do not count as "before"
        let (out, stats) = attach_related_queries(&[buy(9, 1)], &sessions, rel, 0.5);
        assert!(out.is_empty());
        assert_eq!(stats.dropped_unrelated, 1);
    }

    #[test]
    fn no_relevant_prior_query_drops_event() {
        let sessions = Sessions::from_entries([entry(0, 1, 1)]);
        let (out, stats) = attach_related_queries(&[buy(9, 7)], &sessions, |_, _| 0.2, 0.5);
        assert!(out.is_empty());
        assert_eq!(stats.dropped_unrelated, 1);
    }

    #[test]
    fn repeated_purchase_yields_one_triple() {
        let sessions = Sessions::from_entries([entry(0, 1, 1), entry(1, 2, 8)]);
        let (out, stats) = attach_related_queries(&[buy(9, 7), buy(9, 9)], &sessions, |_, _| 0.9, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].query_id, 2);
        assert_eq!(stats.deduplicated, 1);
    }

    fn log_fixture() -> RequestLog {
        RequestLog {
            request_id: 3,
            user_id: 0,
            query_id: 0,
            timestamp: 100,
            matching_out: (0..30).collect(),
            prerank_out: (0..12).collect(),
            exposures: vec![0, 1, 2, 3, 4],
            clicks: vec![1, 2],
            purchases: vec![2],
            other_scenario_purchases: vec![],
            other_scenario_clicks: vec![],
        }
    }

    #[test]
    fn candidate_draws_are_disjoint_and_truncate() {
        let log = log_fixture();
        let d = sample_candidates(&log, 10, 40, 1);
        assert_eq!(d.rc.len(), 7);
        assert!(d.rc_truncated);
        assert_eq!(d.prc.len(), 18);
        assert!(d.prc_truncated);
        let d = sample_candidates(&log, 3, 5, 1);
        assert!(!d.rc_truncated && !d.prc_truncated);
        let ex: BTreeSet<_> = log.exposures.iter().collect();
        let rc: BTreeSet<_> = d.rc.iter().collect();
        let prc: BTreeSet<_> = d.prc.iter().collect();
        assert!(ex.is_disjoint(&rc) && ex.is_disjoint(&prc) && rc.is_disjoint(&prc));
        assert_eq!(d, sample_candidates(&log, 3, 5, 1));
    }

    #[test]
    fn defaults_are_ten_and_forty() {
        let c = SampleConfig::default();
        assert_eq!((c.rc_count, c.prc_count), (10, 40));
    }

    #[test]
    fn label_rules() {
        let log = log_fixture();
        let bought: BTreeSet<ItemId> = [20].into();
        let clicked: BTreeSet<ItemId> = [8].into();
        let l = assign_labels(&log, &bought, &clicked, &[20, 1, 25, 8, 3]).unwrap();
        let t = |l: Labels| (l.aspl, l.ascl, l.ael);
        assert_eq!(t(l[0]), (true, true, true));
        assert_eq!(t(l[1]), (false, true, true));
        assert_eq!(t(l[2]), (false, false, false));
        assert_eq!(t(l[3]), (false, true, true));
        assert_eq!(t(l[4]), (false, false, true));
        assert!(matches!(assign_labels(&log, &bought, &clicked, &[99]), Err(Error::Labeling(_))));
    }

    #[test]
    fn built_samples_hold_invariants() {
        let catalog = gen_catalog(3, 60, 40, 800, &SimConfig::default()).unwrap();
        let policy = CascadePolicy { matching_pool: 200, ..CascadePolicy::default() };
        let logs = run_cascade_logging(&catalog, &policy, 400, 3).unwrap();
        let att = Attachments::from_logs(&catalog, &logs, 0.5);
        assert!(att.purchases.iter().all(|a| a.query_timestamp < a.purchase_timestamp));
        let cfg = SampleConfig::default();
        let (samples, stats) = build_query_samples(&catalog, &logs, &att, &cfg, Some(&OracleTeacher)).unwrap();
        assert_eq!(stats.emitted + stats.skipped_no_exposure, logs.len());
        let in_search: usize = logs.iter().map(|l| l.purchases.len()).sum();
        let ispl: usize = samples.iter().flat_map(|s| &s.items).filter(|it| it.ispl).count();
        assert_eq!(in_search, ispl);
        for (s, log) in samples.iter().zip(logs.iter().filter(|l| !l.exposures.is_empty())) {
            s.check_invariants().unwrap();
            assert_eq!(s.count(Origin::Ex), log.exposures.len());
            assert!(s.count(Origin::Rc) <= 10 && s.count(Origin::Prc) <= 40);
            assert!(s.items.iter().all(|it| it.teacher.is_some()));
        }
        let (again, _) = build_query_samples(&catalog, &logs, &att, &cfg, Some(&OracleTeacher)).unwrap();
        assert_eq!(samples, again);
        let mut buf = Vec::new();
        write_samples(&samples, &mut buf).unwrap();
        assert_eq!(read_samples(&buf[..]).unwrap(), samples);
    }
}
