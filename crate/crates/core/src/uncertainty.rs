//! Entropy-based uncertainty scores over prediction ensembles, MI-threshold
//! rejection, ROC analysis and the per-sample MI/SE scatter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;

/// `N` softmax vectors over `C` classes, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEnsemble {
    n: usize,
    c: usize,
    probs: Vec<f64>,
}

impl PredictionEnsemble {
    pub fn new(n: usize, c: usize, probs: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        if probs.len() != n * c {
            return Err(Error::shape(
                "ensemble",
                format!("{n}x{c} ensemble given {} probabilities", probs.len()),
            ));
        }
        for (i, row) in probs.chunks(c).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        Ok(Self { n, c, probs })
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.c)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.c];
        for row in self.rows() {
            for (a, &p) in m.iter_mut().zip(row) {
                *a += p;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        m
    }

    /// Argmax of the mean probabilities, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `−Σ p ln p`, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&q| {
            if q > 0.0 {
                q * q.max(LOG_FLOOR).ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Entropy of the ensemble-mean distribution (total uncertainty), nats.
pub fn shannon_entropy(e: &PredictionEnsemble) -> f64 {
    entropy(&e.mean())
}

/// Mean per-sample entropy (aleatoric part), nats.
pub fn softmax_entropy(e: &PredictionEnsemble) -> f64 {
    e.rows().map(entropy).sum::<f64>() / e.samples() as f64
}

/// `H − SE` (epistemic part), nats.
pub fn mutual_information(e: &PredictionEnsemble) -> f64 {
    scores(e).mi
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScores {
    pub h: f64,
    pub se: f64,
    pub mi: f64,
}

pub fn scores(e: &PredictionEnsemble) -> UncertaintyScores {
    let h = shannon_entropy(e);
    let se = softmax_entropy(e);
    UncertaintyScores { h, se, mi: h - se }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// ROC of the detector "positive if score ≥ t" swept over every distinct
/// score. The area is accumulated in integer counts, so it equals the
/// Mann–Whitney statistic `(#{p > n} + ½·#{p = n}) / (n_pos·n_neg)` exactly.
pub fn roc_auroc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<RocCurve> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs positive and negative scores".into(),
        ));
    }
    if pos_scores.iter().chain(neg_scores).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("ROC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos_scores.len() as u128, neg_scores.len() as u128);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn as f64,
            tpr: tp as f64 / np as f64,
        });
    }
    Ok(RocCurve {
        points,
        auroc: twice_area as f64 / (2 * np * nn) as f64,
    })
}

/// Counts indexed by (true, predicted); index `classes` stands for an
/// out-of-domain true label or a rejected prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; (classes + 1) * (classes + 1)],
        }
    }

    pub fn record(&mut self, truth: Option<usize>, predicted: Option<usize>) {
        let t = truth.unwrap_or(self.classes).min(self.classes);
        let p = predicted.unwrap_or(self.classes).min(self.classes);
        self.counts[t * (self.classes + 1) + p] += 1;
    }

    pub fn get(&self, truth: Option<usize>, predicted: Option<usize>) -> u64 {
        let t = truth.unwrap_or(self.classes);
        let p = predicted.unwrap_or(self.classes);
        self.counts[t * (self.classes + 1) + p]
    }

    /// Rows `true,predicted,count`, with `x` for out-of-domain / rejected.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["true", "predicted", "count"])?;
        let label = |i: usize| {
            if i == self.classes {
                "x".to_string()
            } else {
                i.to_string()
            }
        };
        for t in 0..=self.classes {
            let row = &self.counts[t * (self.classes + 1)..(t + 1) * (self.classes + 1)];
            if t == self.classes && row.iter().all(|&c| c == 0) {
                continue;
            }
            for (p, &c) in row.iter().enumerate() {
                w.write_record([label(t), label(p), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionOutcome {
    pub threshold: f64,
    pub base_accuracy: f64,
    /// Absent when every sample is rejected.
    pub retained_accuracy: Option<f64>,
    pub rejection_rate: f64,
    pub confusion: ConfusionMatrix,
}

/// Rejects samples whose MI exceeds `mi_threshold` and scores the rest.
pub fn reject_and_score(
    ensembles: &[PredictionEnsemble],
    labels: &[usize],
    mi_threshold: f64,
) -> Result<RejectionOutcome> {
    if ensembles.len() != labels.len() || ensembles.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} ensembles but {} labels",
            ensembles.len(),
            labels.len()
        )));
    }
    let classes = ensembles[0].classes();
    let mut confusion = ConfusionMatrix::new(classes);
    let (mut correct, mut kept, mut kept_correct) = (0usize, 0usize, 0usize);
    for (e, &y) in ensembles.iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let pred = e.predicted_class();
        correct += (pred == y) as usize;
        if mutual_information(e) > mi_threshold {
            confusion.record(Some(y), None);
        } else {
            kept += 1;
            kept_correct += (pred == y) as usize;
            confusion.record(Some(y), Some(pred));
        }
    }
    let n = labels.len();
    Ok(RejectionOutcome {
        threshold: mi_threshold,
        base_accuracy: correct as f64 / n as f64,
        retained_accuracy: (kept > 0).then(|| kept_correct as f64 / kept as f64),
        rejection_rate: (n - kept) as f64 / n as f64,
        confusion,
    })
}

/// Threshold maximizing retained accuracy over the quantile grid of the
/// observed MI values (levels `(i+1)/G`, lower empirical quantile). Ties go
/// to the larger threshold.
pub fn optimal_threshold(
    id_ensembles: &[PredictionEnsemble],
    id_labels: &[usize],
    grid_size: usize,
) -> Result<f64> {
    if id_ensembles.len() != id_labels.len() || id_ensembles.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} ensembles but {} labels",
            id_ensembles.len(),
            id_labels.len()
        )));
    }
    let mi: Vec<f64> = id_ensembles.iter().map(mutual_information).collect();
    let correct: Vec<bool> = id_ensembles
        .iter()
        .zip(id_labels)
        .map(|(e, &y)| e.predicted_class() == y)
        .collect();
    threshold_search(&mi, &correct, grid_size, 0.0)
}

/// Grid search on raw scores; candidates retaining less than
/// `min_retained` of the samples are skipped.
pub fn threshold_search(
    mi: &[f64],
    correct: &[bool],
    grid_size: usize,
    min_retained: f64,
) -> Result<f64> {
    if mi.is_empty() || mi.len() != correct.len() || grid_size == 0 {
        return Err(Error::InvalidArgument(
            "threshold search needs matching non-empty inputs and grid_size ≥ 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..mi.len()).collect();
    order.sort_by(|&a, &b| mi[a].total_cmp(&mi[b]));
    // prefix counts over the sorted scores
    let mut correct_prefix = vec![0usize; mi.len() + 1];
    for (i, &j) in order.iter().enumerate() {
        correct_prefix[i + 1] = correct_prefix[i] + correct[j] as usize;
    }
    let n = mi.len();
    let mut best: Option<(f64, f64)> = None;
    for g in 0..grid_size {
        let q = (g + 1) as f64 / grid_size as f64;
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        let t = mi[order[idx]];
        let kept = order.partition_point(|&j| mi[j] <= t);
        if (kept as f64) < min_retained * n as f64 {
            continue;
        }
        let acc = correct_prefix[kept] as f64 / kept as f64;
        match best {
            Some((a, bt)) if acc < a || (acc == a && t <= bt) => {}
            _ => best = Some((acc, t)),
        }
    }
    Ok(best.map_or(mi[order[n - 1]], |(_, t)| t))
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    dataset: &'a str,
    sample_id: usize,
    mi: f64,
    se: f64,
}

/// One `dataset,sample_id,mi,se` row per sample of every named set.
pub fn disentangle_scatter(sets: &[(&str, &[PredictionEnsemble])], path: &Path) -> Result<usize> {
    let mut w = csv::Writer::from_path(path)?;
    let mut rows = 0;
    for (name, ens) in sets {
        for (i, e) in ens.iter().enumerate() {
            let s = scores(e);
            w.serialize(ScatterRow {
                dataset: name,
                sample_id: i,
                mi: s.mi,
                se: s.se,
            })?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}
