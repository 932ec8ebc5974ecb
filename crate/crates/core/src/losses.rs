//! Training objectives over the logits of one query-level sample.
//!
//! Every loss returns its value together with the gradient with respect to
//! each logit, so the tower backward pass only has to chain through
//! `z = cos / tau`.
//!
//! ```text
//! listwise (single softmax):  sum_{i in D} -log( e^{z_i} / sum_{j in S} e^{z_j} )
//! multi-positive:             sum_{i in E} -log( e^{z_i} / sum_{j in (S\E) + i} e^{z_j} )
//! soft-label distillation:    sum_{i in D} -p_i log( e^{z_i} / sum_{j in D} e^{z_j} )
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samples::{Origin, QuerySample};

/// A scalar loss with its gradient with respect to every logit of the list.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    pub fn zero(n: usize) -> Self {
        LossGrad { value: 0.0, grad: vec![0.0; n] }
    }

    fn accumulate(&mut self, weight: f64, other: &LossGrad) {
        self.value += weight * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += weight * o;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub exposure: f64,
    pub click: f64,
    pub purchase: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { exposure: 1.0, click: 2.0, purchase: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self, training: bool) -> Result<()> {
        let all = [self.exposure, self.click, self.purchase];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        if training && all.iter().all(|w| *w == 0.0) {
            return Err(Error::config("all loss weights are zero"));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossWeights {
            exposure: self.exposure * factor,
            click: self.click * factor,
            purchase: self.purchase * factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Exposure,
    Click,
    Purchase,
}

/// Whether a click/purchase task reads all-scenario or in-scenario labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScope {
    #[default]
    AllScenario,
    InScenario,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// One softmax over the whole list per positive.
    Vanilla,
    /// Each positive competes only against the negatives.
    #[default]
    MultiPositive,
}

/// Which sample origins are distilled from the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillSet {
    None,
    #[default]
    Ex,
    ExRc,
    ExRcPrc,
}

impl DistillSet {
    pub fn contains(self, origin: Origin) -> bool {
        match self {
            DistillSet::None => false,
            DistillSet::Ex => origin == Origin::Ex,
            DistillSet::ExRc => matches!(origin, Origin::Ex | Origin::Rc),
            DistillSet::ExRcPrc => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub variant: LossVariant,
    pub distill: DistillSet,
    pub click_label: LabelScope,
    pub purchase_label: LabelScope,
    /// Turns the rank term off entirely (distillation-only runs).
    pub rank_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            variant: LossVariant::MultiPositive,
            distill: DistillSet::Ex,
            click_label: LabelScope::AllScenario,
            purchase_label: LabelScope::AllScenario,
            rank_enabled: true,
        }
    }
}

/// Positive-set rule for one task over a sample's items; negatives are the rest.
pub fn task_positives(task: Task, sample: &QuerySample, click: LabelScope, purchase: LabelScope) -> Vec<usize> {
    sample
        .items
        .iter()
        .enumerate()
        .filter(|(_, it)| match task {
            Task::Exposure => it.ael,
            Task::Click => match click {
                LabelScope::AllScenario => it.ascl,
                LabelScope::InScenario => it.iscl,
            },
            Task::Purchase => match purchase {
                LabelScope::AllScenario => it.aspl,
                LabelScope::InScenario => it.ispl,
            },
        })
        .map(|(i, _)| i)
        .collect()
}

fn positive_mask(n: usize, positives: &[usize]) -> Result<Vec<bool>> {
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let mut mask = vec![false; n];
    for &i in positives {
        if i >= n {
            return Err(Error::Contract(format!("positive index {i} out of range for list of {n}")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.iter().all(|z| z.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite logit".into()))
    }
}

/// Single-softmax list-wise loss; every positive shares the full-list denominator.
pub fn listwise_softmax_loss(logits: &[f64], positives: &[usize]) -> Result<LossGrad> {
    check_finite(logits)?;
    let mask = positive_mask(logits.len(), positives)?;
    let n_pos = mask.iter().filter(|m| **m).count() as f64;

    let lse = logsumexp(logits, 1.0)?;
    let value = mask.iter().zip(logits).filter(|(m, _)| **m).map(|(_, z)| lse - z).sum();
    let grad = logits
        .iter()
        .zip(&mask)
        .map(|(z, &pos)| n_pos * (z - lse).exp() - if pos { 1.0 } else { 0.0 })
        .collect();
    Ok(LossGrad { value, grad })
}

/// Multi-positive list-wise loss: positive `i`'s denominator is the negatives plus `i` only.
pub fn multi_positive_listwise_loss(logits: &[f64], positives: &[usize]) -> Result<LossGrad> {
    check_finite(logits)?;
    let mask = positive_mask(logits.len(), positives)?;
    let negatives: Vec<f64> = logits.iter().zip(&mask).filter(|(_, m)| !**m).map(|(z, _)| *z).collect();

    let mut out = LossGrad::zero(logits.len());
    if negatives.is_empty() {
        // every term is the softmax of a single element
        return Ok(out);
    }
    let lse_neg = logsumexp(&negatives, 1.0)?;

    let mut neg_weight = 0.0;
    for (i, z) in logits.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let margin = lse_neg - z;
        out.value += softplus(margin);
        let s = sigmoid(margin);
        out.grad[i] -= s;
        neg_weight += s;
    }
    for (i, z) in logits.iter().enumerate() {
        if !mask[i] {
            out.grad[i] += neg_weight * (z - lse_neg).exp();
        }
    }
    Ok(out)
}

/// Per-positive terms of the multi-positive loss, aligned with `positives`.
/// Term `i` reads only `z_i` and the negatives.
pub fn multi_positive_terms(logits: &[f64], positives: &[usize]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let mask = positive_mask(logits.len(), positives)?;
    let negatives: Vec<f64> = logits.iter().zip(&mask).filter(|(_, m)| !**m).map(|(z, _)| *z).collect();
    if negatives.is_empty() {
        return Ok(vec![0.0; positives.len()]);
    }
    let lse_neg = logsumexp(&negatives, 1.0)?;
    Ok(positives.iter().map(|&i| softplus(lse_neg - logits[i])).collect())
}

/// Outcome of the multi-objective rank loss for one sample.
#[derive(Clone, Debug)]
pub struct RankLoss {
    pub loss: LossGrad,
    pub tasks_used: Vec<Task>,
}

pub fn rank_loss(sample: &QuerySample, logits: &[f64], config: &LossConfig) -> Result<RankLoss> {
    if logits.len() != sample.items.len() {
        return Err(Error::Contract(format!(
            "{} logits for {} items",
            logits.len(),
            sample.items.len()
        )));
    }
    let n = logits.len();
    let mut out = LossGrad::zero(n);
    let mut tasks_used = Vec::new();
    if !config.rank_enabled {
        return Ok(RankLoss { loss: out, tasks_used });
    }
    for (task, weight) in [
        (Task::Exposure, config.weights.exposure),
        (Task::Click, config.weights.click),
        (Task::Purchase, config.weights.purchase),
    ] {
        let positives = task_positives(task, sample, config.click_label, config.purchase_label);
        // undefined without both a positive and a negative
        if positives.is_empty() || positives.len() == n {
            continue;
        }
        tasks_used.push(task);
        if weight == 0.0 {
            continue;
        }
        let term = match config.variant {
            LossVariant::Vanilla => listwise_softmax_loss(logits, &positives)?,
            LossVariant::MultiPositive => multi_positive_listwise_loss(logits, &positives)?,
        };
        out.accumulate(weight, &term);
    }
    Ok(RankLoss { loss: out, tasks_used })
}

/// Soft-label distillation over a set `D`: `sum_i -p_i log softmax_D(z)_i`.
pub fn distill_ctr_loss(logits: &[f64], teacher: &[f64]) -> Result<LossGrad> {
    if logits.len() != teacher.len() {
        return Err(Error::Contract("teacher/logit length mismatch".into()));
    }
    if logits.is_empty() {
        return Ok(LossGrad::zero(0));
    }
    check_finite(logits)?;
    if teacher.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract("teacher probability outside [0, 1]".into()));
    }
    let lse = logsumexp(logits, 1.0)?;
    let value = teacher.iter().zip(logits).map(|(p, z)| p * (lse - z)).sum();
    let soft: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    // sum_j (p_j s_i - p_i s_j): vanishes exactly at symmetric points
    let grad = (0..logits.len())
        .map(|i| teacher.iter().zip(&soft).map(|(pj, sj)| pj * soft[i] - teacher[i] * sj).sum())
        .collect();
    Ok(LossGrad { value, grad })
}

/// `alpha_cl * L_CTR + alpha_pur * L_CTCVR` over the configured distillation set.
pub fn distill_loss(sample: &QuerySample, logits: &[f64], config: &LossConfig) -> Result<LossGrad> {
    let n = logits.len();
    let mut out = LossGrad::zero(n);
    if config.distill == DistillSet::None || (config.weights.click == 0.0 && config.weights.purchase == 0.0) {
        return Ok(out);
    }
    let members: Vec<usize> = (0..n).filter(|&i| config.distill.contains(sample.items[i].origin)).collect();
    if members.is_empty() {
        return Ok(out);
    }
    let mut ctr = Vec::with_capacity(members.len());
    let mut ctcvr = Vec::with_capacity(members.len());
    for &i in &members {
        let t = sample.items[i].teacher.ok_or_else(|| {
            Error::MissingInput(format!("teacher scores for item {} in request {}", sample.items[i].item_id, sample.request_id))
        })?;
        ctr.push(t.p_ctr);
        ctcvr.push(t.p_ctcvr());
    }
    let sub: Vec<f64> = members.iter().map(|&i| logits[i]).collect();
    for (weight, soft) in [(config.weights.click, &ctr), (config.weights.purchase, &ctcvr)] {
        if weight == 0.0 {
            continue;
        }
        let term = distill_ctr_loss(&sub, soft)?;
        out.value += weight * term.value;
        for (k, &i) in members.iter().enumerate() {
            out.grad[i] += weight * term.grad[k];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub loss: LossGrad,
    pub rank: LossGrad,
    pub distill: LossGrad,
    pub tasks_used: Vec<Task>,
}

/// Rank loss plus distillation loss, with gradients summed.
pub fn total_loss(sample: &QuerySample, logits: &[f64], config: &LossConfig) -> Result<TotalLoss> {
    let rank = rank_loss(sample, logits, config)?;
    let distill = distill_loss(sample, logits, config)?;
    let mut loss = rank.loss.clone();
    loss.accumulate(1.0, &distill);
    if !loss.value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss in request {}", sample.request_id)));
    }
    Ok(TotalLoss { loss, rank: rank.loss, distill, tasks_used: rank.tasks_used })
}

/// Pointwise binary log-loss on `sigmoid(z)` against a (possibly soft) label.
pub fn pointwise_logloss(logit: f64, label: f64) -> (f64, f64) {
    // -y log s(z) - (1-y) log(1 - s(z)) = softplus(z) - y z
    (softplus(logit) - label * logit, sigmoid(logit) - label)
}

/// `(1/gamma) log sum exp(gamma x_i)`, shifted by the maximum.
pub fn logsumexp(x: &[f64], gamma: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("logsumexp of an empty list".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!("logsumexp needs gamma > 0, got {gamma}")));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (gamma * (v - max)).exp()).sum();
    Ok(max + sum.ln() / gamma)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::LabeledItem;
    use crate::teacher::TeacherScores;

    // Reference values from mpmath at 40 digits:
    //   ln(1 + e^-1 + e^-2) = 0.4076059644443803044829...
    //   ln(2 + e^-1)        = 0.8619948040582510816349...
    //   ln(1 + e^-20)       = 2.061153620314380703238...e-9
    const LN_1_EM1_EM2: f64 = 0.407_605_964_444_380_3;
    const LN_2_EM1: f64 = 0.861_994_804_058_251_1;
    const SOFTPLUS_M20: f64 = 2.061_153_620_314_380_7e-9;

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    // Direct transcription of the definitions, no shifting, used as an oracle.
    fn naive_listwise(z: &[f64], pos: &[usize]) -> f64 {
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        pos.iter().map(|&i| -(z[i].exp() / denom).ln()).sum()
    }

    fn naive_multi_positive(z: &[f64], pos: &[usize]) -> f64 {
        pos.iter()
            .map(|&i| {
                let denom: f64 = z
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j == i || !pos.contains(j))
                    .map(|(_, v)| v.exp())
                    .sum();
                -(z[i].exp() / denom).ln()
            })
            .sum()
    }

    #[test]
    fn listwise_hand_value() {
        let out = listwise_softmax_loss(&[2.0, 1.0, 0.0], &[0]).unwrap();
        assert!((out.value - LN_1_EM1_EM2).abs() < 1e-12);
    }

    #[test]
    fn listwise_single_item_is_zero() {
        let out = listwise_softmax_loss(&[3.7], &[0]).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn listwise_shift_invariance() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let a = listwise_softmax_loss(&z, &[1, 2]).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.25).collect();
        let b = listwise_softmax_loss(&shifted, &[1, 2]).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn empty_positives_error() {
        assert!(matches!(listwise_softmax_loss(&[1.0], &[]), Err(Error::EmptyPositives)));
        assert!(matches!(multi_positive_listwise_loss(&[1.0], &[]), Err(Error::EmptyPositives)));
    }

    #[test]
    fn multi_positive_hand_value() {
        // a:1, b:0 positive; c:0, d:-1 negative
        let out = multi_positive_listwise_loss(&[1.0, 0.0, 0.0, -1.0], &[0, 1]).unwrap();
        assert!((out.value - (LN_1_EM1_EM2 + LN_2_EM1)).abs() < 1e-12);
        assert!((out.value - 1.2696).abs() < 1e-4);
    }

    #[test]
    fn multi_positive_single_positive_matches_listwise() {
        let z = [0.4, -0.3, 1.9, 0.05, -2.0];
        for i in 0..z.len() {
            let a = multi_positive_listwise_loss(&z, &[i]).unwrap();
            let b = listwise_softmax_loss(&z, &[i]).unwrap();
            assert!((a.value - b.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn multi_positive_term_ignores_other_positive() {
        let base = [1.0, 0.0, 0.0, -1.0];
        let term_a = |zb: f64| {
            let z = [base[0], zb, base[2], base[3]];
            // a's term alone: its restricted list is {a} + negatives
            multi_positive_listwise_loss(&[z[0], z[2], z[3]], &[0]).unwrap().value
        };
        assert_eq!(term_a(0.0), term_a(1.0));
        assert_eq!(term_a(0.0), term_a(-1.0));
        // and through the full loss: only b's own term moves
        let full = |zb: f64| multi_positive_listwise_loss(&[1.0, zb, 0.0, -1.0], &[0, 1]).unwrap().value;
        let b_term = |zb: f64| multi_positive_listwise_loss(&[zb, 0.0, -1.0], &[0]).unwrap().value;
        for zb in [-1.0, 1.0] {
            assert!(((full(zb) - b_term(zb)) - (full(0.0) - b_term(0.0))).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_forms_match_naive_definitions() {
        let z = [0.3, -0.7, 1.1, 0.2, -1.5, 0.9];
        let pos = [0, 2, 5];
        let a = listwise_softmax_loss(&z, &pos).unwrap().value;
        let b = multi_positive_listwise_loss(&z, &pos).unwrap().value;
        assert!((a - naive_listwise(&z, &pos)).abs() < 1e-12);
        assert!((b - naive_multi_positive(&z, &pos)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let z = [0.3, -0.7, 1.1, 0.2, -1.5, 0.9];
        let pos = [0, 2, 5];
        for (analytic, f) in [
            (
                listwise_softmax_loss(&z, &pos).unwrap().grad,
                Box::new(|x: &[f64]| naive_listwise(x, &pos)) as Box<dyn Fn(&[f64]) -> f64>,
            ),
            (multi_positive_listwise_loss(&z, &pos).unwrap().grad, Box::new(|x: &[f64]| naive_multi_positive(x, &pos))),
        ] {
            let numeric = finite_diff(f, &z, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
        let p = [0.8, 0.2, 0.5];
        let zd = [0.1, -0.4, 0.7];
        let g = distill_ctr_loss(&zd, &p).unwrap().grad;
        let numeric = finite_diff(|x| distill_ctr_loss(x, &p).unwrap().value, &zd, 1e-5);
        for (a, n) in g.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4);
        }
    }

    #[test]
    fn distill_hand_value_and_stationarity() {
        let out = distill_ctr_loss(&[0.0, 0.0], &[0.8, 0.2]).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);

        let eq = distill_ctr_loss(&[0.5, 0.5, 0.5], &[0.3, 0.3, 0.3]).unwrap();
        assert!(eq.grad.iter().all(|g| *g == 0.0));

        // softmax(z) proportional to p is the optimum
        let p = [0.6, 0.3, 0.1];
        let z: Vec<f64> = p.iter().map(|v: &f64| v.ln() + 2.0).collect();
        let opt = distill_ctr_loss(&z, &p).unwrap();
        let gnorm = opt.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(gnorm <= 1e-9);
    }

    #[test]
    fn logsumexp_and_softplus_values() {
        assert_eq!(logsumexp(&[4.25], 3.0).unwrap(), 4.25);
        assert!((logsumexp(&[1.0, 2.0, 3.0], 1.0).unwrap() - (3.0 + LN_1_EM1_EM2)).abs() < 1e-12);
        assert!(logsumexp(&[], 1.0).is_err());
        assert!(logsumexp(&[1.0], 0.0).is_err());
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(20.0) - 20.0).abs() < 1e-8);
        assert!((softplus(-20.0) - SOFTPLUS_M20).abs() < 1e-20);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn pointwise_logloss_gradient() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (1.5, 0.25)] {
            let (_, g) = pointwise_logloss(z, y);
            let h = 1e-6;
            let n = (pointwise_logloss(z + h, y).0 - pointwise_logloss(z - h, y).0) / (2.0 * h);
            assert!((g - n).abs() < 1e-8);
        }
    }

    fn item(id: u32, origin: Origin, labels: (bool, bool, bool)) -> LabeledItem {
        LabeledItem {
            item_id: id,
            origin,
            aspl: labels.0,
            ascl: labels.1,
            ael: labels.2,
            ispl: labels.0,
            iscl: labels.1,
            teacher: Some(TeacherScores::new(0.3, 0.2)),
        }
    }

    fn sample() -> QuerySample {
        QuerySample::for_tests(vec![
            item(1, Origin::Ex, (true, true, true)),
            item(2, Origin::Ex, (false, true, true)),
            item(3, Origin::Ex, (false, false, true)),
            item(4, Origin::Rc, (false, false, false)),
            item(5, Origin::Prc, (false, false, false)),
        ])
    }

    #[test]
    fn rank_loss_linearity_and_drop_rule() {
        let s = sample();
        let z = [0.5, 0.1, -0.2, 0.3, -0.9];
        let only_purchase = LossConfig {
            weights: LossWeights { exposure: 0.0, click: 0.0, purchase: 1.0 },
            ..LossConfig::default()
        };
        let r = rank_loss(&s, &z, &only_purchase).unwrap();
        let direct = multi_positive_listwise_loss(&z, &[0]).unwrap();
        assert!((r.loss.value - direct.value).abs() < 1e-15);

        let base = LossConfig::default();
        let a = rank_loss(&s, &z, &base).unwrap();
        let doubled = LossConfig { weights: base.weights.scaled(2.0), ..base };
        let b = rank_loss(&s, &z, &doubled).unwrap();
        assert_eq!(b.loss.value, 2.0 * a.loss.value);

        let mut no_purchase = sample();
        no_purchase.items[0].aspl = false;
        no_purchase.items[0].ispl = false;
        let c = rank_loss(&no_purchase, &z, &base).unwrap();
        assert!(!c.tasks_used.contains(&Task::Purchase));
        let expected = base.weights.exposure * multi_positive_listwise_loss(&z, &[0, 1, 2]).unwrap().value
            + base.weights.click * multi_positive_listwise_loss(&z, &[0, 1]).unwrap().value;
        assert!((c.loss.value - expected).abs() < 1e-12);
    }

    #[test]
    fn distill_set_selection_and_zero_weights() {
        let s = sample();
        let z = [0.5, 0.1, -0.2, 0.3, -0.9];
        let cfg = LossConfig::default();
        let ex = distill_loss(&s, &z, &cfg).unwrap();
        assert_eq!(ex.grad[3], 0.0);
        assert_eq!(ex.grad[4], 0.0);
        let exrc = distill_loss(&s, &z, &LossConfig { distill: DistillSet::ExRc, ..cfg }).unwrap();
        assert_ne!(exrc.grad[3], 0.0);
        assert_eq!(exrc.grad[4], 0.0);
        let zero = LossConfig { weights: LossWeights { exposure: 3.0, click: 0.0, purchase: 0.0 }, ..cfg };
        assert_eq!(distill_loss(&s, &z, &zero).unwrap().value, 0.0);

        let mut missing = sample();
        missing.items[0].teacher = None;
        assert!(matches!(distill_loss(&missing, &z, &cfg), Err(Error::MissingInput(_))));
    }

    #[test]
    fn total_loss_is_sum_of_parts() {
        let s = sample();
        let z = [0.5, 0.1, -0.2, 0.3, -0.9];
        let cfg = LossConfig::default();
        let t = total_loss(&s, &z, &cfg).unwrap();
        let r = rank_loss(&s, &z, &cfg).unwrap().loss;
        let d = distill_loss(&s, &z, &cfg).unwrap();
        for i in 0..z.len() {
            assert!((t.loss.grad[i] - (r.grad[i] + d.grad[i])).abs() <= 1e-12);
        }
        let off = LossConfig { distill: DistillSet::None, ..cfg };
        assert_eq!(total_loss(&s, &z, &off).unwrap().loss.value, r.value);
        let rank_off = LossConfig { rank_enabled: false, ..cfg };
        let t2 = total_loss(&s, &z, &rank_off).unwrap();
        assert_eq!(t2.loss.value, d.value);
        assert_eq!(t2.loss.grad, d.grad);
    }
}
