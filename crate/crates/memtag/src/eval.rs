//! Trigger-level scoring, multi-run aggregation, and report rendering.
//!
//! A predicted trigger span counts as correct only when its start, end, and
//! event type all match a gold span. Zero denominators score 0. Averaging
//! across simulation groups happens on precision and recall, with F1
//! recomputed from the averaged pair.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::TriggerTag;
use crate::util::percent_1dp;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TriggerSpan {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub event_type: String,
}

/// Maximal B/I runs of one type become spans. Input must be BIO-valid.
pub fn extract_spans(tags: &[TriggerTag]) -> Vec<TriggerSpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            TriggerTag::B(ty) => {
                if let Some((start, t)) = open.take() {
                    spans.push(TriggerSpan {
                        start,
                        end: i,
                        event_type: t.to_string(),
                    });
                }
                open = Some((i, ty));
            }
            TriggerTag::I(_) => {
                debug_assert!(open.is_some(), "extract_spans needs BIO-valid input");
            }
            TriggerTag::O => {
                if let Some((start, t)) = open.take() {
                    spans.push(TriggerSpan {
                        start,
                        end: i,
                        event_type: t.to_string(),
                    });
                }
            }
        }
    }
    if let Some((start, t)) = open {
        spans.push(TriggerSpan {
            start,
            end: tags.len(),
            event_type: t.to_string(),
        });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Running correct/predicted/gold counts over a sentence set.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn add_sentence(&mut self, pred: &[TriggerSpan], gold: &[TriggerSpan]) {
        let gold_set: BTreeSet<&TriggerSpan> = gold.iter().collect();
        self.correct += pred.iter().filter(|s| gold_set.contains(s)).count();
        self.predicted += pred.len();
        self.gold += gold.len();
    }

    pub fn prf(&self) -> Prf {
        let p = if self.predicted > 0 {
            self.correct as f64 / self.predicted as f64
        } else {
            0.0
        };
        let r = if self.gold > 0 {
            self.correct as f64 / self.gold as f64
        } else {
            0.0
        };
        Prf::from_pr(p, r)
    }
}

/// Micro P/R/F1 over per-sentence (predicted, gold) span pairs.
pub fn trigger_prf(pairs: &[(Vec<TriggerSpan>, Vec<TriggerSpan>)]) -> Prf {
    let mut counts = SpanCounts::default();
    for (pred, gold) in pairs {
        counts.add_sentence(pred, gold);
    }
    counts.prf()
}

/// Mean precision and recall over runs, F1 from the means — not the mean of
/// per-run F1 values.
pub fn aggregate_runs(runs: &[(f64, f64)]) -> Prf {
    assert!(!runs.is_empty(), "aggregate_runs needs at least one run");
    let n = runs.len() as f64;
    let p = runs.iter().map(|(p, _)| p).sum::<f64>() / n;
    let r = runs.iter().map(|(_, r)| r).sum::<f64>() / n;
    Prf::from_pr(p, r)
}

/// One aggregated metrics cell: a (noise setting, strategy, batch) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub noise: String,
    pub strategy: String,
    pub batch: String,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    pub groups: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub strategy: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    /// Mean wall-clock training seconds per strategy, summed over batches.
    /// Kept out of the metrics JSON file so reruns are byte-identical.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub timings: Vec<TimingRecord>,
}

impl RunMetrics {
    /// Deterministic metrics payload: records only, stable order.
    pub fn metrics_json(&self) -> String {
        #[derive(Serialize)]
        struct Payload<'a> {
            records: &'a [MetricRecord],
        }
        let mut records = self.records.clone();
        records.sort_by(|a, b| {
            (&a.noise, &a.strategy, &a.batch).cmp(&(&b.noise, &b.strategy, &b.batch))
        });
        serde_json::to_string_pretty(&Payload { records: &records }).expect("serializable")
            + "\n"
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("noise,strategy,batch,P,R,F1,groups\n");
        for rec in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                rec.noise,
                rec.strategy,
                rec.batch,
                percent_1dp(rec.p),
                percent_1dp(rec.r),
                percent_1dp(rec.f1),
                rec.groups
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("strategy,seconds\n");
        for t in &self.timings {
            out.push_str(&format!("{},{:.1}\n", t.strategy, t.seconds));
        }
        out
    }

    /// Text table: one row per (noise, strategy), P/R/F1 columns per batch,
    /// percentages with one decimal.
    pub fn text_table(&self) -> String {
        let mut batches: Vec<&str> = Vec::new();
        let mut rows: Vec<(&str, &str)> = Vec::new();
        for rec in &self.records {
            if !batches.contains(&rec.batch.as_str()) {
                batches.push(&rec.batch);
            }
            let key = (rec.noise.as_str(), rec.strategy.as_str());
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        let mut out = String::new();
        out.push_str(&format!("{:<8}{:<12}", "Noise", "Strategy"));
        for b in &batches {
            out.push_str(&format!("{:>10}{:>8}{:>8}", format!("{b}/P"), "R", "F1"));
        }
        out.push('\n');
        for (noise, strategy) in rows {
            out.push_str(&format!("{noise:<8}{strategy:<12}"));
            for b in &batches {
                let cell = self
                    .records
                    .iter()
                    .find(|r| r.noise == noise && r.strategy == strategy && &r.batch == b);
                match cell {
                    Some(r) => out.push_str(&format!(
                        "{:>10}{:>8}{:>8}",
                        percent_1dp(r.p),
                        percent_1dp(r.r),
                        percent_1dp(r.f1)
                    )),
                    None => out.push_str(&format!("{:>10}{:>8}{:>8}", "-", "-", "-")),
                }
            }
            out.push('\n');
        }
        if !self.timings.is_empty() {
            out.push('\n');
            out.push_str("Strategy    Training Time (Seconds)\n");
            for t in &self.timings {
                out.push_str(&format!("{:<12}{:.1}\n", t.strategy, t.seconds));
            }
        }
        out
    }
}
