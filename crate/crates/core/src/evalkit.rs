//! Scoring and accuracy-over-time reporting.
//!
//! Per-class balanced accuracies roll up into two means: OS over all K+1
//! classes (open included) and OS* over the K known classes. A domain's
//! accuracy sequence across timestamps condenses into an average A and a
//! forgetting value F, the mean stepwise change; negative F means the model
//! lost ground on that domain as later ones arrived.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::datahub::ClassLabel;
use crate::error::{Error, Result};

/// Per-class and rolled-up accuracies of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct OsScores {
    /// Mean accuracy over every class slot with at least one truth sample
    /// (open slot included).
    pub os: f64,
    /// Mean over the known slots only.
    pub os_star: f64,
    /// Slot-indexed accuracies, `None` where the truth had no samples.
    pub per_class: Vec<Option<f64>>,
    /// Slots excluded from the means for lack of truth samples.
    pub missing_classes: Vec<usize>,
}

/// Balanced open-set scoring: accuracy within each truth class (slot K is
/// the collapsed open class), then means over slots. Truth classes with no
/// samples are excluded from the means and listed in `missing_classes`.
pub fn os_scores(
    truth: &[ClassLabel],
    predicted: &[ClassLabel],
    known_classes: usize,
) -> Result<OsScores> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(Error::contract("os_scores", "empty or mismatched truth/prediction lists"));
    }
    let slots = known_classes + 1;
    let mut total = vec![0usize; slots];
    let mut correct = vec![0usize; slots];
    for (t, p) in truth.iter().zip(predicted) {
        let ts = t.slot(known_classes)?;
        let ps = p.slot(known_classes)?;
        total[ts] += 1;
        if ts == ps {
            correct[ts] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = total
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| if n > 0 { Some(c as f64 / n as f64) } else { None })
        .collect();
    let missing: Vec<usize> =
        per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect();

    let mean_over = |range: std::ops::Range<usize>| -> Option<f64> {
        let present: Vec<f64> = range.filter_map(|i| per_class[i]).collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    };
    let os = mean_over(0..slots)
        .ok_or_else(|| Error::contract("os_scores", "no class has any truth sample"))?;
    let os_star = mean_over(0..known_classes)
        .ok_or_else(|| Error::contract("os_scores", "no known class has any truth sample"))?;
    Ok(OsScores { os, os_star, per_class, missing_classes: missing })
}

/// Mean stepwise accuracy change over a domain's timestamp sequence:
/// (1/T)·Σ (A_{k+1} − A_k) for T = len − 1 steps. Positive means the domain
/// improved after its first evaluation.
pub fn forgetting(acc_sequence: &[f64]) -> Result<f64> {
    if acc_sequence.len() < 2 {
        return Err(Error::contract("forgetting", "need at least two evaluations"));
    }
    let t = (acc_sequence.len() - 1) as f64;
    let sum: f64 = acc_sequence.windows(2).map(|w| w[1] - w[0]).sum();
    Ok(sum / t)
}

/// One evaluation of one domain at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub timestamp: usize,
    pub domain_id: u16,
    pub os: f64,
    pub os_star: f64,
    /// Slot-indexed per-class accuracies; `None` marks a slot absent from
    /// the evaluation set.
    pub per_class: Vec<Option<f64>>,
}

/// Per-domain accuracy-over-time summary. `f_*` is `None` for domains seen
/// at fewer than two evaluation timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSummary {
    pub domain_id: u16,
    pub evaluations: usize,
    pub a_os: f64,
    pub f_os: Option<f64>,
    pub a_os_star: f64,
    pub f_os_star: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingReport {
    /// Sorted by domain id.
    pub domains: Vec<DomainSummary>,
    pub mean_a_os: f64,
    pub mean_a_os_star: f64,
    /// Means over the domains where F is defined; `None` when no domain
    /// qualifies.
    pub mean_f_os: Option<f64>,
    pub mean_f_os_star: Option<f64>,
}

/// Collapses a record log into per-domain A and F values plus their means.
/// A averages every evaluation of the domain, first exposure included.
pub fn summarize(records: &[MetricRecord]) -> Result<ForgettingReport> {
    if records.is_empty() {
        return Err(Error::contract("summarize", "empty record log"));
    }
    let mut by_domain: BTreeMap<u16, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain_id).or_default().push(r);
    }
    let mut domains = Vec::with_capacity(by_domain.len());
    for (domain_id, mut rs) in by_domain {
        rs.sort_by_key(|r| r.timestamp);
        for w in rs.windows(2) {
            if w[0].timestamp == w[1].timestamp {
                return Err(Error::contract(
                    "summarize",
                    format!("domain {domain_id} evaluated twice at timestamp {}", w[0].timestamp),
                ));
            }
        }
        let os: Vec<f64> = rs.iter().map(|r| r.os).collect();
        let os_star: Vec<f64> = rs.iter().map(|r| r.os_star).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        domains.push(DomainSummary {
            domain_id,
            evaluations: rs.len(),
            a_os: mean(&os),
            f_os: if os.len() >= 2 { Some(forgetting(&os)?) } else { None },
            a_os_star: mean(&os_star),
            f_os_star: if os_star.len() >= 2 { Some(forgetting(&os_star)?) } else { None },
        });
    }
    let n = domains.len() as f64;
    let mean_a_os = domains.iter().map(|d| d.a_os).sum::<f64>() / n;
    let mean_a_os_star = domains.iter().map(|d| d.a_os_star).sum::<f64>() / n;
    let with_f: Vec<&DomainSummary> = domains.iter().filter(|d| d.f_os.is_some()).collect();
    let (mean_f_os, mean_f_os_star) = if with_f.is_empty() {
        (None, None)
    } else {
        let k = with_f.len() as f64;
        (
            Some(with_f.iter().map(|d| d.f_os.unwrap()).sum::<f64>() / k),
            Some(with_f.iter().map(|d| d.f_os_star.unwrap()).sum::<f64>() / k),
        )
    };
    Ok(ForgettingReport { domains, mean_a_os, mean_a_os_star, mean_f_os, mean_f_os_star })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `timestamp,domain,OS,OS_star,acc_c0..acc_cK`; absent classes leave their
/// field empty. All records must agree on the class count.
pub fn metrics_to_csv(records: &[MetricRecord]) -> Result<String> {
    let slots = records
        .first()
        .map(|r| r.per_class.len())
        .ok_or_else(|| Error::contract("metrics_to_csv", "empty record log"))?;
    let mut out = String::from("timestamp,domain,OS,OS_star");
    for c in 0..slots {
        write!(out, ",acc_c{c}").unwrap();
    }
    out.push('\n');
    for r in records {
        if r.per_class.len() != slots {
            return Err(Error::contract(
                "metrics_to_csv",
                format!("record has {} class slots, expected {slots}", r.per_class.len()),
            ));
        }
        write!(out, "{},{},{},{}", r.timestamp, r.domain_id, r.os, r.os_star).unwrap();
        for c in &r.per_class {
            out.push(',');
            out.push_str(&fmt_opt(*c));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(records)?).map_err(|e| Error::io(path, e))
}

/// Reads a file produced by `write_metrics`.
pub fn load_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty metrics file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..4] != ["timestamp", "domain", "OS", "OS_star"] {
        return Err(Error::Format(format!("{}: unrecognized metrics header", path.display())));
    }
    let slots = cols.len() - 4;
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                i + 1,
                fields.len(),
                cols.len()
            )));
        }
        let num = |f: &str, what: &str| -> Result<f64> {
            f.parse::<f64>().map_err(|_| {
                Error::Format(format!("{} line {}: bad {what} value {f:?}", path.display(), i + 1))
            })
        };
        let mut per_class = Vec::with_capacity(slots);
        for f in &fields[4..] {
            per_class.push(if f.is_empty() { None } else { Some(num(f, "accuracy")?) });
        }
        records.push(MetricRecord {
            timestamp: num(fields[0], "timestamp")? as usize,
            domain_id: num(fields[1], "domain")? as u16,
            os: num(fields[2], "OS")?,
            os_star: num(fields[3], "OS_star")?,
            per_class,
        });
    }
    if records.is_empty() {
        return Err(Error::Format(format!("{}: no metric rows", path.display())));
    }
    Ok(records)
}

/// `domain,A_OS,F_OS,A_OSstar,F_OSstar` with a trailing `avg` row; undefined
/// F fields stay empty.
pub fn forgetting_to_csv(report: &ForgettingReport) -> String {
    let mut out = String::from("domain,A_OS,F_OS,A_OSstar,F_OSstar\n");
    for d in &report.domains {
        writeln!(
            out,
            "{},{},{},{},{}",
            d.domain_id,
            d.a_os,
            fmt_opt(d.f_os),
            d.a_os_star,
            fmt_opt(d.f_os_star)
        )
        .unwrap();
    }
    writeln!(
        out,
        "avg,{},{},{},{}",
        report.mean_a_os,
        fmt_opt(report.mean_f_os),
        report.mean_a_os_star,
        fmt_opt(report.mean_f_os_star)
    )
    .unwrap();
    out
}

pub fn write_forgetting(path: &Path, report: &ForgettingReport) -> Result<()> {
    std::fs::write(path, forgetting_to_csv(report)).map_err(|e| Error::io(path, e))
}

/// Fixed-width table of the same numbers for terminal reading; `-` marks an
/// undefined F.
pub fn forgetting_table(report: &ForgettingReport) -> String {
    let cell = |v: Option<f64>| match v {
        Some(x) => format!("{x:>8.4}"),
        None => format!("{:>8}", "-"),
    };
    let mut out = format!(
        "{:>6}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "domain", "A_OS", "F_OS", "A_OS*", "F_OS*"
    );
    for d in &report.domains {
        writeln!(
            out,
            "{:>6}  {}  {}  {}  {}",
            d.domain_id,
            cell(Some(d.a_os)),
            cell(d.f_os),
            cell(Some(d.a_os_star)),
            cell(d.f_os_star)
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:>6}  {}  {}  {}  {}",
        "avg",
        cell(Some(report.mean_a_os)),
        cell(report.mean_f_os),
        cell(Some(report.mean_a_os_star)),
        cell(report.mean_f_os_star)
    )
    .unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(slots: &[i64], k: usize) -> Vec<ClassLabel> {
        slots
            .iter()
            .map(|&s| if s as usize == k { ClassLabel::Open } else { ClassLabel::Known(s as usize) })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = labels(&[0, 1, 2, 0, 1, 2], 2);
        let s = os_scores(&truth, &truth, 2).unwrap();
        assert_eq!(s.os, 1.0);
        assert_eq!(s.os_star, 1.0);
        assert_eq!(s.per_class, vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert!(s.missing_classes.is_empty());
    }

    #[test]
    fn two_known_classes_with_open_fixture() {
        // Class 0: 2/2, class 1: 1/2, open: 4/5.
        let truth = labels(&[0, 0, 1, 1, 2, 2, 2, 2, 2], 2);
        let pred = labels(&[0, 0, 1, 0, 2, 2, 2, 2, 0], 2);
        let s = os_scores(&truth, &pred, 2).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), Some(0.5), Some(0.8)]);
        assert_eq!(s.os_star, 0.75);
        assert!((s.os - 2.3 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_excluded_and_flagged() {
        let truth = labels(&[0, 0, 1, 1], 2);
        let pred = labels(&[0, 0, 1, 0], 2);
        let s = os_scores(&truth, &pred, 2).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), Some(0.5), None]);
        assert_eq!(s.missing_classes, vec![2]);
        assert_eq!(s.os, 0.75);
        assert_eq!(s.os_star, 0.75);
    }

    #[test]
    fn scoring_rejects_degenerate_inputs() {
        let t = labels(&[0], 2);
        assert!(os_scores(&[], &[], 2).is_err());
        assert!(os_scores(&t, &labels(&[0, 1], 2), 2).is_err());
        assert!(os_scores(&[ClassLabel::Hidden], &t, 2).is_err());
        // Only open samples: OS is defined, OS* is not.
        let open = labels(&[2, 2], 2);
        assert!(os_scores(&open, &open, 2).is_err());
    }

    #[test]
    fn scores_ignore_decision_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<ClassLabel> = (0..60).map(|i| labels(&[i % 4], 3)[0]).collect();
        let pred: Vec<ClassLabel> =
            (0..60).map(|_| labels(&[rng.random_range(0..4i64)], 3)[0]).collect();
        let base = os_scores(&truth, &pred, 3).unwrap();
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..60).collect();
        for _ in 0..5 {
            idx.shuffle(&mut rng);
            let t: Vec<ClassLabel> = idx.iter().map(|&i| truth[i]).collect();
            let p: Vec<ClassLabel> = idx.iter().map(|&i| pred[i]).collect();
            assert_eq!(os_scores(&t, &p, 3).unwrap(), base);
        }
    }

    /// OS = (K·OS* + acc_open)/(K+1) whenever every class is present.
    #[test]
    fn os_identity_on_random_confusion_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let k = rng.random_range(2..6usize);
            let mut truth = Vec::new();
            let mut pred = Vec::new();
            for slot in 0..=k {
                let n = rng.random_range(1..8usize);
                for _ in 0..n {
                    truth.push(slot as i64);
                    pred.push(rng.random_range(0..=k) as i64);
                }
            }
            let s = os_scores(&labels(&truth, k), &labels(&pred, k), k).unwrap();
            let open_acc = s.per_class[k].unwrap();
            let identity = (k as f64 * s.os_star + open_acc) / (k + 1) as f64;
            assert!((s.os - identity).abs() < 1e-12);
        }
    }

    #[test]
    fn forgetting_fixtures() {
        assert_eq!(forgetting(&[0.8, 0.8]).unwrap(), 0.0);
        assert!((forgetting(&[0.8, 0.7]).unwrap() - (-0.1)).abs() < 1e-12);
        assert!((forgetting(&[0.9, 0.8, 0.85]).unwrap() - (-0.025)).abs() < 1e-12);
        assert!(forgetting(&[0.5]).is_err());
        assert!(forgetting(&[]).is_err());
    }

    #[test]
    fn forgetting_telescopes_and_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..12usize);
            let seq: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let f = forgetting(&seq).unwrap();
            let telescoped = (seq[n - 1] - seq[0]) / (n - 1) as f64;
            assert!((f - telescoped).abs() < 1e-12);
            if seq[n - 1] > seq[0] {
                assert!(f > 0.0);
            } else if seq[n - 1] < seq[0] {
                assert!(f < 0.0);
            }
        }
    }

    fn record(timestamp: usize, domain_id: u16, os: f64, os_star: f64) -> MetricRecord {
        MetricRecord {
            timestamp,
            domain_id,
            os,
            os_star,
            per_class: vec![Some(os_star), Some(os_star), Some(3.0 * os - 2.0 * os_star)],
        }
    }

    #[test]
    fn summarize_aggregates_per_domain() {
        let records = vec![
            record(2, 2, 0.9, 0.95),
            record(3, 2, 0.8, 0.85),
            record(4, 2, 0.85, 0.9),
            record(3, 3, 0.7, 0.75),
            record(4, 3, 0.75, 0.8),
            record(4, 4, 0.6, 0.65),
        ];
        let rep = summarize(&records).unwrap();
        assert_eq!(rep.domains.len(), 3);

        let d2 = &rep.domains[0];
        assert_eq!(d2.domain_id, 2);
        assert_eq!(d2.evaluations, 3);
        assert!((d2.a_os - (0.9 + 0.8 + 0.85) / 3.0).abs() < 1e-12);
        assert!((d2.f_os.unwrap() - (-0.025)).abs() < 1e-12);

        let d4 = &rep.domains[2];
        assert_eq!(d4.evaluations, 1);
        assert_eq!(d4.f_os, None);
        assert_eq!(d4.a_os, 0.6);

        // Means: A over all domains, F over the two domains where it exists.
        assert!((rep.mean_a_os - (d2.a_os + rep.domains[1].a_os + 0.6) / 3.0).abs() < 1e-12);
        let f3 = rep.domains[1].f_os.unwrap();
        assert!((rep.mean_f_os.unwrap() - (d2.f_os.unwrap() + f3) / 2.0).abs() < 1e-12);

        assert!(summarize(&[]).is_err());
        assert!(summarize(&[record(2, 2, 0.9, 0.9), record(2, 2, 0.8, 0.8)]).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let mut records = vec![
            record(2, 2, 0.9, 0.95),
            record(3, 2, 0.8, 0.85),
            record(3, 3, 0.7, 0.75),
        ];
        records[2].per_class[1] = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&path, &records).unwrap();
        assert_eq!(load_metrics(&path).unwrap(), records);
    }

    #[test]
    fn metrics_reader_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, "").unwrap();
        assert!(load_metrics(&path).is_err());
        std::fs::write(&path, "time,domain,OS,OS_star,acc_c0\n").unwrap();
        assert!(load_metrics(&path).is_err());
        std::fs::write(&path, "timestamp,domain,OS,OS_star,acc_c0\n2,2,0.9\n").unwrap();
        assert!(load_metrics(&path).is_err());
        std::fs::write(&path, "timestamp,domain,OS,OS_star,acc_c0\n2,2,x,0.9,0.9\n").unwrap();
        assert!(load_metrics(&path).is_err());
    }

    /// Frozen end-to-end report shapes; guards the exact emitted bytes.
    #[test]
    fn report_rendering_matches_golden_text() {
        let records = vec![
            record(2, 2, 0.9, 0.95),
            record(3, 2, 0.8, 0.85),
            record(3, 3, 0.75, 0.8),
        ];
        let rep = summarize(&records).unwrap();
        let csv = forgetting_to_csv(&rep);
        let want_csv = "domain,A_OS,F_OS,A_OSstar,F_OSstar\n\
                        2,0.8500000000000001,-0.09999999999999998,0.8999999999999999,-0.09999999999999998\n\
                        3,0.75,,0.8,\n\
                        avg,0.8,-0.09999999999999998,0.85,-0.09999999999999998\n";
        assert_eq!(csv, want_csv);

        let table = forgetting_table(&rep);
        let want_table = "domain      A_OS      F_OS     A_OS*     F_OS*\n\
                          \x20    2    0.8500   -0.1000    0.9000   -0.1000\n\
                          \x20    3    0.7500         -    0.8000         -\n\
                          \x20  avg    0.8000   -0.1000    0.8500   -0.1000\n";
        assert_eq!(table, want_table);

        let metrics_csv = metrics_to_csv(&records).unwrap();
        assert!(metrics_csv.starts_with("timestamp,domain,OS,OS_star,acc_c0,acc_c1,acc_c2\n"));
        assert!(metrics_csv.contains("2,2,0.9,0.95,"));
    }
}
