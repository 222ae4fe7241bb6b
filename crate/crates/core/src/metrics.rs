//! Ranking metrics, the L&L score and the field-test chi-squared analysis.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("scored set is empty".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::Shape("one label per score".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("scores must be finite".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Mann–Whitney AUC with ties counted one half. `None` if either class is missing.
pub fn auc(s: &ScoredSet) -> Option<f64> {
    let pos = s.num_positives();
    let neg = s.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| s.labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrMetrics {
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: f64,
    /// Step-wise average precision.
    pub prc_area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion(s: &ScoredSet, threshold: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&score, &y) in s.scores.iter().zip(&s.labels) {
        match (score >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Average precision: `Σ_k (R_k - R_{k-1}) P_k` over distinct score thresholds.
pub fn average_precision(s: &ScoredSet) -> Option<f64> {
    let pos = s.num_positives();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let score = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == score {
            if s.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn pr_metrics(s: &ScoredSet, threshold: f64) -> Result<PrMetrics> {
    let pos = s.num_positives();
    if pos == 0 || pos == s.len() {
        return Err(Error::InvalidInput("precision/recall needs both classes".into()));
    }
    let c = confusion(s, threshold);
    let recall = c.tp as f64 / pos as f64;
    let precision = (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64);
    let f1 = match precision {
        Some(p) if p + recall > 0.0 => 2.0 * p * recall / (p + recall),
        _ => 0.0,
    };
    Ok(PrMetrics {
        precision,
        recall,
        f1,
        prc_area: average_precision(s).unwrap_or(0.0),
    })
}

/// `(L&L, L&L%)` with `L&L = r²/Pr[pred = 1]` and the percentage taken
/// relative to the best attainable value `1/Pr[y = 1]`.
pub fn ll_score(s: &ScoredSet, threshold: f64) -> Result<(f64, f64)> {
    let pos = s.num_positives();
    if pos == 0 {
        return Err(Error::InvalidInput("L&L needs at least one positive label".into()));
    }
    let c = confusion(s, threshold);
    let predicted = c.tp + c.fp;
    if predicted == 0 {
        return Ok((0.0, 0.0));
    }
    let n = s.len() as f64;
    let r = c.tp as f64 / pos as f64;
    let ll = r * r / (predicted as f64 / n);
    let max = n / pos as f64;
    Ok((ll, 100.0 * ll / max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTestRow {
    pub group: String,
    pub obs_cells: u64,
    pub patrolled_cells: u64,
    pub effort_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTestTable {
    pub rows: Vec<FieldTestRow>,
}

impl FieldTestTable {
    pub fn new(rows: Vec<FieldTestRow>) -> Result<Self> {
        for r in &rows {
            if r.obs_cells > r.patrolled_cells {
                return Err(Error::InvalidInput(format!(
                    "group {}: {} observations exceed {} patrolled cells",
                    r.group, r.obs_cells, r.patrolled_cells
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Sums groups with the same name, keeping first-seen order.
    pub fn combine_by_group(&self) -> Self {
        let mut rows: Vec<FieldTestRow> = Vec::new();
        for r in &self.rows {
            match rows.iter_mut().find(|x| x.group == r.group) {
                Some(x) => {
                    x.obs_cells += r.obs_cells;
                    x.patrolled_cells += r.patrolled_cells;
                    x.effort_km += r.effort_km;
                }
                None => rows.push(r.clone()),
            }
        }
        Self { rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson test of independence on the 2×g table (observed, not observed) × group.
pub fn chi_squared_field_test(t: &FieldTestTable) -> Result<ChiSquaredResult> {
    let g = t.rows.len();
    if g < 2 {
        return Err(Error::InvalidInput("chi-squared test needs at least two groups".into()));
    }
    if t.rows.iter().any(|r| r.patrolled_cells == 0) {
        return Err(Error::InvalidInput("every group needs patrolled cells".into()));
    }
    let total: f64 = t.rows.iter().map(|r| r.patrolled_cells as f64).sum();
    let hits: f64 = t.rows.iter().map(|r| r.obs_cells as f64).sum();
    let misses = total - hits;
    if hits == 0.0 || misses == 0.0 {
        return Err(Error::InvalidInput("an expected count is zero".into()));
    }
    let mut stat = 0.0;
    for r in &t.rows {
        let n = r.patrolled_cells as f64;
        let o = r.obs_cells as f64;
        let e_hit = n * hits / total;
        let e_miss = n * misses / total;
        stat += (o - e_hit).powi(2) / e_hit + ((n - o) - e_miss).powi(2) / e_miss;
    }
    let df = g - 1;
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(ChiSquaredResult {
        statistic: stat,
        df,
        p_value: dist.sf(stat),
    })
}

/// `# Obs. / # Cells` per group.
pub fn obs_per_cell(t: &FieldTestTable) -> Vec<(String, f64)> {
    t.rows
        .iter()
        .map(|r| (r.group.clone(), r.obs_cells as f64 / r.patrolled_cells as f64))
        .collect()
}

/// Pearson correlation; `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Evaluation summary for one model on one test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub prc_area: Option<f64>,
    pub ll: Option<f64>,
    pub ll_percent: Option<f64>,
}

pub fn report(s: &ScoredSet, threshold: f64) -> MetricReport {
    let pr = pr_metrics(s, threshold).ok();
    let ll = ll_score(s, threshold).ok();
    MetricReport {
        n: s.len(),
        positives: s.num_positives(),
        auc: auc(s),
        precision: pr.and_then(|p| p.precision),
        recall: pr.map(|p| p.recall),
        f1: pr.map(|p| p.f1),
        prc_area: pr.map(|p| p.prc_area),
        ll: ll.map(|l| l.0),
        ll_percent: ll.map(|l| l.1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    fn row(group: &str, obs: u64, cells: u64) -> FieldTestRow {
        FieldTestRow {
            group: group.into(),
            obs_cells: obs,
            patrolled_cells: cells,
            effort_km: 0.0,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])), Some(1.0));
        assert_eq!(auc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])), Some(0.75));
        assert_eq!(auc(&set(&[0.3; 5], &[0, 1, 0, 1, 1])), Some(0.5));
        assert_eq!(auc(&set(&[0.3, 0.4], &[1, 1])), None);
    }

    #[test]
    fn pr_examples() {
        let perfect = pr_metrics(&set(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]), 0.5).unwrap();
        assert_eq!(perfect.precision, Some(1.0));
        assert_eq!((perfect.recall, perfect.f1, perfect.prc_area), (1.0, 1.0, 1.0));
        // TP=1 FP=1 FN=1
        let m = pr_metrics(&set(&[0.9, 0.7, 0.2, 0.1], &[1, 0, 1, 0]), 0.5).unwrap();
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        let none = pr_metrics(&set(&[0.1, 0.2], &[1, 0]), 0.5).unwrap();
        assert_eq!(none.precision, None);
        assert_eq!(none.f1, 0.0);
    }

    #[test]
    fn ll_examples() {
        // 8 rows, 2 positives, 2 predicted positive of which one is right.
        let s = set(&[0.9, 0.8, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], &[1, 0, 1, 0, 0, 0, 0, 0]);
        assert_relative_eq!(ll_score(&s, 0.5).unwrap().0, 1.0);
        let scores: Vec<f64> = (0..10).map(|i| if i == 0 { 0.9 } else { 0.1 }).collect();
        let labels: Vec<u8> = (0..10).map(|i| (i == 0) as u8).collect();
        let (ll, pct) = ll_score(&set(&scores, &labels), 0.5).unwrap();
        assert_relative_eq!(ll, 10.0);
        assert_relative_eq!(pct, 100.0);
        assert_eq!(ll_score(&set(&[0.1, 0.2], &[1, 0]), 0.5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn chi_squared_identical_rates() {
        let t = FieldTestTable::new(vec![row("a", 5, 20), row("b", 10, 40), row("c", 1, 4)]).unwrap();
        let r = chi_squared_field_test(&t).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert_relative_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn chi_squared_two_by_two() {
        let t = FieldTestTable::new(vec![row("a", 10, 10), row("b", 0, 10)]).unwrap();
        let r = chi_squared_field_test(&t).unwrap();
        // N(ad - bc)² / (row and column totals) = 20·100² / (10·10·10·10)
        assert_relative_eq!(r.statistic, 20.0, epsilon = 1e-12);
        assert_eq!(r.df, 1);
    }

    #[test]
    fn chi_squared_rejects_degenerate_tables() {
        assert!(chi_squared_field_test(&FieldTestTable::new(vec![row("a", 1, 3)]).unwrap()).is_err());
        let none = FieldTestTable::new(vec![row("a", 0, 3), row("b", 0, 4)]).unwrap();
        assert!(chi_squared_field_test(&none).is_err());
        assert!(FieldTestTable::new(vec![row("a", 4, 3)]).is_err());
    }

    #[test]
    fn obs_ratios() {
        let t = FieldTestTable::new(vec![row("High", 17, 36), row("Low", 0, 36), row("x", 5, 5)]).unwrap();
        let r = obs_per_cell(&t);
        assert_eq!(format!("{:.2}", r[0].1), "0.47");
        assert_eq!(r[1].1, 0.0);
        assert_eq!(r[2].1, 1.0);
    }

    #[test]
    fn combine_sums_groups() {
        let t = FieldTestTable::new(vec![row("H", 1, 2), row("L", 0, 3), row("H", 2, 5)]).unwrap();
        let c = t.combine_by_group();
        assert_eq!(c.rows.len(), 2);
        assert_eq!((c.rows[0].obs_cells, c.rows[0].patrolled_cells), (3, 7));
    }
}
