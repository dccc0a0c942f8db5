//! Evaluation metrics: binary counts, the four standard scores, row-normalized
//! confusion matrices, and the acceptance-threshold sweep report.
//!
//! Undefined scores (zero denominators) are reported as absent rather than
//! coerced to 0 so sweeps and tables never silently skew.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {truth} truths vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} outside {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_binary(truth: &[bool], pred: &[bool]) -> Result<ConfusionCounts, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
        }
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// `(TP+TN) / (TP+TN+FP+FN)`; errors on all-zero counts.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::Invalid("accuracy undefined on all-zero counts".into()));
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// `TP / (TP+FP)`; absent when nothing was predicted positive.
pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fp;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// `TP / (TP+FN)`; absent when there are no positives.
pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fn_;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// `TP / (TP + (FP+FN)/2)`; absent in the degenerate case.
pub fn f1(c: &ConfusionCounts) -> Option<f64> {
    let den = 2 * c.tp + c.fp + c.fn_;
    (den > 0).then(|| 2.0 * c.tp as f64 / den as f64)
}

/// One-vs-rest counts for every class of a multiclass problem.
pub fn per_class_counts(
    truth: &[usize],
    pred: &[usize],
    k: usize,
) -> Result<Vec<ConfusionCounts>, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    for &v in truth.iter().chain(pred) {
        if v >= k {
            return Err(MetricsError::LabelOutOfRange { label: v, k });
        }
    }
    let mut out = vec![ConfusionCounts::default(); k];
    for (&t, &p) in truth.iter().zip(pred) {
        for (c, counts) in out.iter_mut().enumerate() {
            match (t == c, p == c) {
                (true, true) => counts.tp += 1,
                (false, false) => counts.tn += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
            }
        }
    }
    Ok(out)
}

/// Macro-averaged F1 over the classes where it is defined.
pub fn macro_f1(truth: &[usize], pred: &[usize], k: usize) -> Result<Option<f64>, MetricsError> {
    let scores: Vec<f64> =
        per_class_counts(truth, pred, k)?.iter().filter_map(f1).collect();
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Row-normalized K x K confusion matrix; row i is the prediction
/// distribution of true class i, all-zero for classes without support.
pub fn confusion_matrix(
    truth: &[usize],
    pred: &[usize],
    k: usize,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k {
            return Err(MetricsError::LabelOutOfRange { label: t, k });
        }
        if p >= k {
            return Err(MetricsError::LabelOutOfRange { label: p, k });
        }
        counts[t][p] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let support: usize = row.iter().sum();
            if support == 0 {
                vec![0.0; k]
            } else {
                row.into_iter().map(|v| v as f64 / support as f64).collect()
            }
        })
        .collect())
}

pub fn confusion_to_csv(matrix: &[Vec<f64>], class_names: &[&str]) -> String {
    let mut out = String::from("true\\pred");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(class_names[i]);
        for v in row {
            out.push_str(&format!(",{:.4}", v));
        }
        out.push('\n');
    }
    out
}

pub fn confusion_to_text(matrix: &[Vec<f64>], class_names: &[&str]) -> String {
    let width = class_names.iter().map(|n| n.len()).max().unwrap_or(4).max(6);
    let mut out = format!("{:>width$}", "", width = width + 1);
    for name in class_names {
        out.push_str(&format!(" {:>width$}", name, width = width));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&format!("{:>width$}:", class_names[i], width = width));
        for v in row {
            out.push_str(&format!(" {:>width$.3}", v, width = width));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// threshold sweep
// ---------------------------------------------------------------------------

/// Ground-truth group of one sweep sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepGroup {
    /// True event class index.
    Event(usize),
    OtherSoccer,
    NonSoccer,
}

/// One classified sample entering the sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepSample {
    pub group: SweepGroup,
    pub predicted_class: usize,
    pub top_prob: f64,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub threshold: f64,
    /// F1 of correctly classified accepted events; absent when degenerate.
    pub f1_event: Option<f64>,
    /// Rejection recall over the non-soccer group only.
    pub recall_nonsoccer: f64,
    /// Rejection recall over both no-highlight groups combined.
    pub recall_no_highlight: f64,
    pub accepted_count: usize,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Rows in strictly decreasing threshold order.
    pub rows: Vec<SweepRow>,
    /// Index of the row maximizing `F1 + recall_nonsoccer`.
    pub best_index: usize,
}

impl SweepReport {
    pub fn best(&self) -> &SweepRow {
        &self.rows[self.best_index]
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("threshold,f1_event,recall_nonsoccer,recall_no_highlight,accepted_count\n");
        for r in &self.rows {
            let f1s = r.f1_event.map_or(String::from(""), |v| format!("{:.6}", v));
            out.push_str(&format!(
                "{:.4},{},{:.6},{:.6},{}\n",
                r.threshold, f1s, r.recall_nonsoccer, r.recall_no_highlight, r.accepted_count
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>9} {:>9} {:>14} {:>17} {:>9}\n",
            "threshold", "f1_event", "recall_nonsocc", "recall_no_highl", "accepted"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let marker = if i == self.best_index { " *" } else { "" };
            let f1s = r.f1_event.map_or(String::from("-"), |v| format!("{:.4}", v));
            out.push_str(&format!(
                "{:>9.4} {:>9} {:>14.4} {:>17.4} {:>9}{}\n",
                r.threshold, f1s, r.recall_nonsoccer, r.recall_no_highlight, r.accepted_count, marker
            ));
        }
        out
    }
}

/// Evaluate acceptance thresholds over a classified sample set. A sample is
/// accepted when its top probability strictly exceeds the threshold. Event F1
/// treats "accepted with the correct event class" as the positive outcome;
/// the two recall columns measure rejection of the two no-highlight groups.
pub fn threshold_sweep(samples: &[SweepSample], thresholds: &[f64]) -> Result<SweepReport, MetricsError> {
    let has = |f: &dyn Fn(&SweepGroup) -> bool| samples.iter().any(|s| f(&s.group));
    if !has(&|g| matches!(g, SweepGroup::Event(_)))
        || !has(&|g| matches!(g, SweepGroup::OtherSoccer))
        || !has(&|g| matches!(g, SweepGroup::NonSoccer))
    {
        return Err(MetricsError::Invalid(
            "sweep needs samples from all three groups (event, other soccer, non soccer)".into(),
        ));
    }
    if thresholds.is_empty() {
        return Err(MetricsError::Invalid("no thresholds given".into()));
    }
    for pair in thresholds.windows(2) {
        if pair[1] >= pair[0] {
            return Err(MetricsError::Invalid("thresholds must be strictly decreasing".into()));
        }
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut c = ConfusionCounts::default();
        let mut accepted_count = 0usize;
        let (mut non_total, mut non_rejected) = (0usize, 0usize);
        let (mut nh_total, mut nh_rejected) = (0usize, 0usize);
        for s in samples {
            let accepted = s.top_prob > t;
            if accepted {
                accepted_count += 1;
            }
            match s.group {
                SweepGroup::Event(true_class) => {
                    if accepted && s.predicted_class == true_class {
                        c.tp += 1;
                    } else if accepted {
                        c.fp += 1;
                    } else {
                        c.fn_ += 1;
                    }
                }
                SweepGroup::OtherSoccer | SweepGroup::NonSoccer => {
                    nh_total += 1;
                    if !accepted {
                        nh_rejected += 1;
                    }
                    if s.group == SweepGroup::NonSoccer {
                        non_total += 1;
                        if !accepted {
                            non_rejected += 1;
                        }
                    }
                    if accepted {
                        c.fp += 1;
                    } else {
                        c.tn += 1;
                    }
                }
            }
        }
        rows.push(SweepRow {
            threshold: t,
            f1_event: f1(&c),
            recall_nonsoccer: non_rejected as f64 / non_total as f64,
            recall_no_highlight: nh_rejected as f64 / nh_total as f64,
            accepted_count,
        });
    }
    let mut best_index = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, r) in rows.iter().enumerate() {
        if let Some(f) = r.f1_event {
            let score = f + r.recall_nonsoccer;
            if score > best_score + 1e-12 {
                best_score = score;
                best_index = i;
            }
        }
    }
    Ok(SweepReport { rows, best_index })
}

/// Plot-ready CSV for per-epoch curves; one column per named series.
pub fn curves_to_csv(series: &[(&str, &[f64])]) -> String {
    let mut out = String::from("epoch");
    for (name, _) in series {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let rows = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for e in 0..rows {
        out.push_str(&(e + 1).to_string());
        for (_, v) in series {
            out.push(',');
            if let Some(x) = v.get(e) {
                out.push_str(&format!("{:.6}", x));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::rng_for;
    use rand::Rng;

    #[test]
    fn worked_examples() {
        let c = ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 };
        assert_eq!(accuracy(&c).unwrap(), 1.0);
        let c = ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 };
        assert!((accuracy(&c).unwrap() - 0.8).abs() < 1e-12);
        let c = ConfusionCounts { tp: 3, fp: 1, ..Default::default() };
        assert_eq!(precision(&c).unwrap(), 0.75);
        let c = ConfusionCounts { tp: 2, fn_: 2, ..Default::default() };
        assert_eq!(recall(&c).unwrap(), 0.5);
        let c = ConfusionCounts { tp: 2, fp: 1, fn_: 1, ..Default::default() };
        assert!((f1(&c).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases_are_absent_not_zero() {
        let zero = ConfusionCounts::default();
        assert!(accuracy(&zero).is_err());
        assert_eq!(precision(&zero), None);
        assert_eq!(recall(&zero), None);
        assert_eq!(f1(&zero), None);
        let only_tn = ConfusionCounts { tn: 5, ..Default::default() };
        assert_eq!(precision(&only_tn), None);
        assert_eq!(accuracy(&only_tn).unwrap(), 1.0);
    }

    #[test]
    fn counts_match_direct_counting_oracle() {
        let mut rng = rng_for(17, &[0]);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let c = ConfusionCounts::from_binary(&truth, &pred).unwrap();
            let tp = truth.iter().zip(&pred).filter(|(&t, &p)| t && p).count();
            let tn = truth.iter().zip(&pred).filter(|(&t, &p)| !t && !p).count();
            assert_eq!((c.tp, c.tn), (tp, tn));
            assert_eq!(c.total(), n);
            let acc = accuracy(&c).unwrap();
            let direct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / n as f64;
            assert!((acc - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_equals_harmonic_mean_and_lies_between() {
        let mut rng = rng_for(17, &[1]);
        for _ in 0..500 {
            let c = ConfusionCounts {
                tp: rng.gen_range(1..20),
                tn: rng.gen_range(0..20),
                fp: rng.gen_range(0..20),
                fn_: rng.gen_range(0..20),
            };
            let (p, r, f) = (precision(&c).unwrap(), recall(&c).unwrap(), f1(&c).unwrap());
            let harmonic = 2.0 * p * r / (p + r);
            assert!((f - harmonic).abs() < 1e-12);
            assert!(f <= p.max(r) + 1e-12 && f >= p.min(r) - 1e-12);
            assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn confusion_matrix_identity_and_single_error() {
        let truth = vec![0, 1, 2, 0, 1, 2];
        let m = confusion_matrix(&truth, &truth, 3).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
        let mut pred = truth.clone();
        pred[3] = 2; // one true-0 sample misread as 2
        let m = confusion_matrix(&truth, &pred, 3).unwrap();
        assert_eq!(m[0][0], 0.5);
        assert_eq!(m[0][2], 0.5);
        assert_eq!(m[1][1], 1.0);
    }

    #[test]
    fn confusion_rows_sum_to_one_with_support() {
        let mut rng = rng_for(17, &[2]);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let k = rng.gen_range(2..6);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let m = confusion_matrix(&truth, &pred, k).unwrap();
            for (i, row) in m.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if truth.contains(&i) {
                    assert!((sum - 1.0).abs() < 1e-9);
                } else {
                    assert_eq!(sum, 0.0);
                }
            }
        }
        assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
        assert!(confusion_matrix(&[0, 5], &[0, 1], 2).is_err());
    }

    fn sweep_samples(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<SweepSample> {
        let mut out = vec![
            SweepSample { group: SweepGroup::Event(0), predicted_class: 0, top_prob: 0.95 },
            SweepSample { group: SweepGroup::OtherSoccer, predicted_class: 1, top_prob: 0.4 },
            SweepSample { group: SweepGroup::NonSoccer, predicted_class: 2, top_prob: 0.3 },
        ];
        for _ in 0..n {
            let group = match rng.gen_range(0..3) {
                0 => SweepGroup::Event(rng.gen_range(0..4)),
                1 => SweepGroup::OtherSoccer,
                _ => SweepGroup::NonSoccer,
            };
            out.push(SweepSample {
                group,
                predicted_class: rng.gen_range(0..4),
                top_prob: rng.gen_range(0.0..1.0),
            });
        }
        out
    }

    #[test]
    fn sweep_accept_count_is_antitone_in_threshold() {
        let mut rng = rng_for(17, &[3]);
        let samples = sweep_samples(&mut rng, 200);
        let thresholds = [0.99, 0.9, 0.5, 0.1];
        let report = threshold_sweep(&samples, &thresholds).unwrap();
        for pair in report.rows.windows(2) {
            assert!(pair[1].accepted_count >= pair[0].accepted_count);
        }
    }

    #[test]
    fn sweep_argmax_matches_exhaustive_recomputation() {
        let mut rng = rng_for(17, &[4]);
        for _ in 0..20 {
            let samples = sweep_samples(&mut rng, 100);
            let thresholds = [0.95, 0.9, 0.8, 0.6, 0.4, 0.2];
            let report = threshold_sweep(&samples, &thresholds).unwrap();
            let mut best = None;
            for (i, r) in report.rows.iter().enumerate() {
                if let Some(f) = r.f1_event {
                    let s = f + r.recall_nonsoccer;
                    if best.map_or(true, |(_, bs)| s > bs + 1e-12) {
                        best = Some((i, s));
                    }
                }
            }
            assert_eq!(report.best_index, best.unwrap().0);
        }
    }

    #[test]
    fn sweep_validates_groups_and_ordering() {
        let only_events =
            vec![SweepSample { group: SweepGroup::Event(0), predicted_class: 0, top_prob: 0.9 }];
        assert!(threshold_sweep(&only_events, &[0.9]).is_err());
        let mut rng = rng_for(17, &[5]);
        let samples = sweep_samples(&mut rng, 10);
        assert!(threshold_sweep(&samples, &[0.5, 0.9]).is_err());
        assert!(threshold_sweep(&samples, &[]).is_err());
        assert!(threshold_sweep(&samples, &[0.9, 0.5]).is_ok());
    }

    #[test]
    fn report_rendering_contains_all_rows() {
        let mut rng = rng_for(17, &[6]);
        let samples = sweep_samples(&mut rng, 50);
        let report = threshold_sweep(&samples, &[0.9, 0.5]).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        let text = report.to_text();
        assert!(text.contains('*'));
        let m = confusion_matrix(&[0, 1], &[0, 1], 2).unwrap();
        let names = ["a", "b"];
        assert!(confusion_to_csv(&m, &names).starts_with("true\\pred,a,b"));
        assert!(confusion_to_text(&m, &names).contains("a:"));
    }

    #[test]
    fn curves_csv_shape() {
        let a = [1.0, 0.5, 0.25];
        let b = [0.1, 0.2];
        let csv = curves_to_csv(&[("loss", &a), ("acc", &b)]);
        assert!(csv.starts_with("epoch,loss,acc\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().starts_with("3,0.250000,"));
    }

    #[test]
    fn macro_f1_averages_defined_classes() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 0, 1, 1];
        assert_eq!(macro_f1(&truth, &pred, 3).unwrap().unwrap(), 1.0);
    }
}
