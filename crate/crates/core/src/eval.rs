//! Pixel metrics, ROC AUC, inference with optional test-time augmentation,
//! fold and leave-one-dataset-out splits, and reports.

use std::hash::Hasher;

use fnv::FnvHasher;
use hmsv_tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::augment::{tta_expand, tta_fold};
use crate::error::{Error, Result};
use crate::io::Manifest;
use crate::model::Model;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts over binary (`0`/`1`) masks.
pub fn confusion(pred: &[u8], g: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != g.len() {
        return Err(Error::invalid(format!(
            "confusion: {} predicted vs {} reference pixels",
            pred.len(),
            g.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(g) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::invalid("confusion: masks must be binary")),
        }
    }
    Ok(c)
}

/// `num / den`, or 1 when the class is absent and the prediction agrees,
/// else 0.
fn ratio(num: u64, den: u64, agrees: bool) -> f64 {
    if den == 0 {
        if agrees {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn dice_score(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true)
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_, c.fp == 0)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp, c.fn_ == 0)
}

/// Score-descending groups of tied scores as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = f64::NAN;
    for i in idx {
        if groups.is_empty() || scores[i] != last {
            groups.push((0, 0));
            last = scores[i];
        }
        let g = groups.last_mut().expect("just pushed");
        if labels[i] != 0 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// ROC curve vertices `(FPR, TPR)`, one per distinct threshold, starting at
/// the origin. `None` if either class is missing.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Option<Vec<(f64, f64)>> {
    let pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 || scores.len() != labels.len() {
        return None;
    }
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg, tp as f64 / pos));
    }
    Some(pts)
}

/// Trapezoidal area under the ROC curve; tied scores form one step.
/// `None` if either class is missing.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pts = roc_points(scores, labels)?;
    Some(
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum(),
    )
}

/// Anything that maps a `[1, 4, R, R]` input to `[1, 1, R, R]` logits.
pub trait Segmenter {
    fn logits(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Real> Segmenter for Model<T> {
    fn logits(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict_logits(&x.cast())?.cast())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Vessel probability per pixel.
    pub prob: Vec<f64>,
    /// `prob >= 0.5`.
    pub mask: Vec<u8>,
    pub size: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn threshold(prob: &[f64]) -> Vec<u8> {
    prob.iter().map(|&p| (p >= 0.5) as u8).collect()
}

/// Probability map and binary mask for one `[4, R, R]` input.
pub fn predict_image<S: Segmenter>(
    seg: &mut S,
    x: &Tensor<f32>,
    use_tta: bool,
) -> Result<Prediction> {
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::invalid(format!(
            "expected a square [C, R, R] input, got {s:?}"
        )));
    }
    let size = s[1];
    let batched = x.reshape(&[1, s[0], s[1], s[2]])?;
    let prob_of = |seg: &mut S, inp: &Tensor<f32>| -> Result<Tensor<f64>> {
        let l = seg.logits(inp)?;
        Ok(Tensor::from_f64(
            l.shape(),
            &l.to_f64_vec().into_iter().map(sigmoid).collect::<Vec<_>>(),
        )?)
    };
    let prob = if use_tta {
        let preds = tta_expand(&batched)?
            .iter()
            .map(|v| prob_of(seg, v))
            .collect::<Result<Vec<_>>>()?;
        tta_fold(&preds)?
    } else {
        prob_of(seg, &batched)?
    };
    let prob = prob.into_data();
    Ok(Prediction {
        mask: threshold(&prob),
        prob,
        size,
    })
}

/// Per-dataset stream seed: `seed ^ FNV-1a-64(name)`.
pub fn dataset_seed(seed: u64, name: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    seed ^ h.finish()
}

fn shuffled(mut idx: Vec<usize>, seed: u64, name: &str) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(dataset_seed(seed, name));
    idx.shuffle(&mut rng);
    idx
}

fn indices_of(manifest: &Manifest, dataset: &str) -> Vec<usize> {
    (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].dataset == dataset)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    /// Manifest row indices.
    pub held_out: Vec<usize>,
    pub train: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Dataset-stratified `k`-fold split: each dataset is shuffled with its own
/// stream and dealt round-robin.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config("protocol.folds", "need at least 2 folds"));
    }
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); k];
    for name in manifest.datasets() {
        let idx = indices_of(manifest, &name);
        if idx.len() < k {
            return Err(Error::config(
                "protocol.folds",
                format!("{k} folds but dataset `{name}` has {} images", idx.len()),
            ));
        }
        for (i, row) in shuffled(idx, seed, &name).into_iter().enumerate() {
            held[i % k].push(row);
        }
    }
    let n = manifest.entries.len();
    let folds = held
        .into_iter()
        .map(|mut h| {
            h.sort_unstable();
            let train = (0..n).filter(|i| h.binary_search(i).is_err()).collect();
            Fold { held_out: h, train }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LodoPlan {
    pub held_out_dataset: String,
    pub test: Vec<usize>,
    /// Training images proper.
    pub train: Vec<usize>,
    /// Early-stopping slice of the training pool.
    pub validation: Vec<usize>,
}

impl LodoPlan {
    /// Training plus validation rows.
    pub fn train_pool(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.validation).copied().collect();
        v.sort_unstable();
        v
    }
}

pub const LODO_VALIDATION_FRACTION: f64 = 0.2;

/// One plan per dataset, holding it out entirely. A 20% slice of each
/// remaining dataset validates training.
pub fn make_lodo(manifest: &Manifest, seed: u64) -> Result<Vec<LodoPlan>> {
    let names = manifest.datasets();
    if names.len() != 3 {
        return Err(Error::invalid(format!(
            "leave-one-dataset-out needs exactly 3 datasets, found {}",
            names.len()
        )));
    }
    let mut plans = Vec::with_capacity(3);
    for held in &names {
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for other in names.iter().filter(|n| *n != held) {
            let idx = shuffled(indices_of(manifest, other), seed, other);
            let nv = ((idx.len() as f64 * LODO_VALIDATION_FRACTION).round() as usize).max(1);
            validation.extend_from_slice(&idx[..nv]);
            train.extend_from_slice(&idx[nv..]);
        }
        train.sort_unstable();
        validation.sort_unstable();
        plans.push(LodoPlan {
            held_out_dataset: held.clone(),
            test: indices_of(manifest, held),
            train,
            validation,
        });
    }
    Ok(plans)
}

impl FoldPlan {
    pub fn render(&self, manifest: &Manifest) -> String {
        let mut out = String::from("fold\trole\tdataset\tid\n");
        for (f, fold) in self.folds.iter().enumerate() {
            for (role, rows) in [("test", &fold.held_out), ("train", &fold.train)] {
                for &i in rows.iter() {
                    let e = &manifest.entries[i];
                    out.push_str(&format!("{f}\t{role}\t{}\t{}\n", e.dataset, e.id()));
                }
            }
        }
        out
    }
}

pub fn render_lodo(plans: &[LodoPlan], manifest: &Manifest) -> String {
    let mut out = String::from("held_out\trole\tdataset\tid\n");
    for p in plans {
        for (role, rows) in [
            ("test", &p.test),
            ("train", &p.train),
            ("validation", &p.validation),
        ] {
            for &i in rows.iter() {
                let e = &manifest.entries[i];
                out.push_str(&format!(
                    "{}\t{role}\t{}\t{}\n",
                    p.held_out_dataset,
                    e.dataset,
                    e.id()
                ));
            }
        }
    }
    out
}

/// Metrics of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub dataset: String,
    pub id: String,
    pub fold: Option<usize>,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// NaN when the reference has a single class.
    pub auc: f64,
    pub breaks: Option<usize>,
}

impl ImageMetrics {
    pub fn from_prediction(
        dataset: &str,
        id: &str,
        fold: Option<usize>,
        pred: &Prediction,
        g: &[u8],
    ) -> Result<Self> {
        let c = confusion(&pred.mask, g)?;
        Ok(ImageMetrics {
            dataset: dataset.to_string(),
            id: id.to_string(),
            fold,
            dice: dice_score(&c),
            sensitivity: sensitivity(&c),
            specificity: specificity(&c),
            auc: roc_auc(&pred.prob, g).unwrap_or(f64::NAN),
            breaks: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub sd: f64,
    pub degenerate: bool,
}

/// Mean and sample standard deviation of the finite values.
pub fn mean_sd(values: &[f64]) -> Stat {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let n = v.len();
    if n == 0 {
        return Stat {
            n,
            mean: f64::NAN,
            sd: f64::NAN,
            degenerate: true,
        };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Stat {
            n,
            mean,
            sd: 0.0,
            degenerate: true,
        };
    }
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    Stat {
        n,
        mean,
        sd: (ss / (n - 1) as f64).sqrt(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub label: String,
    pub dice: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
    pub auc: Stat,
}

fn summarise(label: String, rows: &[&ImageMetrics]) -> Summary {
    let col = |f: fn(&ImageMetrics) -> f64| mean_sd(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    Summary {
        label,
        dice: col(|r| r.dice),
        sensitivity: col(|r| r.sensitivity),
        specificity: col(|r| r.specificity),
        auc: col(|r| r.auc),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Sorted by `(dataset, id)`.
    pub rows: Vec<ImageMetrics>,
    pub per_dataset: Vec<Summary>,
    pub per_fold: Vec<Summary>,
    /// Mean and SD of the per-fold means when folds are present, otherwise
    /// over images.
    pub overall: Summary,
    /// `dataset/id` of expected images without a row.
    pub missing: Vec<String>,
}

/// Aggregates per-image rows. `expected` lists `dataset/id` labels that
/// should be present.
pub fn report(mut rows: Vec<ImageMetrics>, expected: &[String]) -> MetricsReport {
    rows.sort_by(|a, b| (&a.dataset, &a.id).cmp(&(&b.dataset, &b.id)));
    let have: std::collections::BTreeSet<String> = rows
        .iter()
        .map(|r| format!("{}/{}", r.dataset, r.id))
        .collect();
    let missing = expected
        .iter()
        .filter(|e| !have.contains(*e))
        .cloned()
        .collect();

    let mut datasets: Vec<String> = rows.iter().map(|r| r.dataset.clone()).collect();
    datasets.dedup();
    let per_dataset = datasets
        .iter()
        .map(|d| {
            summarise(
                d.clone(),
                &rows.iter().filter(|r| &r.dataset == d).collect::<Vec<_>>(),
            )
        })
        .collect();

    let mut folds: Vec<usize> = rows.iter().filter_map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let per_fold: Vec<Summary> = folds
        .iter()
        .map(|&f| {
            summarise(
                format!("fold{f}"),
                &rows
                    .iter()
                    .filter(|r| r.fold == Some(f))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let overall = if per_fold.len() > 1 {
        let col = |f: fn(&Summary) -> f64| mean_sd(&per_fold.iter().map(f).collect::<Vec<_>>());
        Summary {
            label: "overall".into(),
            dice: col(|s| s.dice.mean),
            sensitivity: col(|s| s.sensitivity.mean),
            specificity: col(|s| s.specificity.mean),
            auc: col(|s| s.auc.mean),
        }
    } else {
        summarise("overall".into(), &rows.iter().collect::<Vec<_>>())
    };
    MetricsReport {
        rows,
        per_dataset,
        per_fold,
        overall,
        missing,
    }
}

impl MetricsReport {
    /// Machine-readable rows followed by summary rows.
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("kind\tdataset\tid\tfold\tdice\tsensitivity\tspecificity\tauc\tbreaks\n");
        for r in &self.rows {
            out.push_str(&format!(
                "image\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                r.dataset,
                r.id,
                r.fold.map_or("-".into(), |f| f.to_string()),
                r.dice,
                r.sensitivity,
                r.specificity,
                r.auc,
                r.breaks.map_or("-".into(), |b| b.to_string()),
            ));
        }
        let summaries = self
            .per_dataset
            .iter()
            .map(|s| ("dataset", s))
            .chain(self.per_fold.iter().map(|s| ("fold", s)))
            .chain(std::iter::once(("overall", &self.overall)));
        for (kind, s) in summaries {
            for (stat, f) in [("mean", 0), ("sd", 1)] {
                let pick = |st: &Stat| if f == 0 { st.mean } else { st.sd };
                out.push_str(&format!(
                    "{kind}_{stat}\t{}\t-\t-\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t-\n",
                    s.label,
                    pick(&s.dice),
                    pick(&s.sensitivity),
                    pick(&s.specificity),
                    pick(&s.auc),
                ));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let pct = |s: &Stat| {
            let flag = if s.degenerate { " (single sample)" } else { "" };
            format!("{:.2}±{:.2}{flag}", 100.0 * s.mean, 100.0 * s.sd)
        };
        let line = |s: &Summary| {
            format!(
                "{:<12} Dice {:<16} Sens {:<16} Spec {:<16} AUC {}\n",
                s.label,
                pct(&s.dice),
                pct(&s.sensitivity),
                pct(&s.specificity),
                pct(&s.auc)
            )
        };
        let mut out = format!("{} images\n", self.rows.len());
        for s in self.per_dataset.iter().chain(&self.per_fold) {
            out.push_str(&line(s));
        }
        out.push_str(&line(&self.overall));
        if !self.missing.is_empty() {
            out.push_str(&format!("missing: {}\n", self.missing.join(", ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_denominator_rules() {
        let c = confusion(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(
            (dice_score(&c), sensitivity(&c), specificity(&c)),
            (1.0, 1.0, 1.0)
        );
        let c = confusion(&[1, 0], &[0, 0]).unwrap();
        assert_eq!(sensitivity(&c), 0.0);
        let c = confusion(&[1, 0], &[1, 1]).unwrap();
        assert_eq!(specificity(&c), 0.0);
        let c = confusion(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(specificity(&c), 1.0);
    }

    #[test]
    fn non_binary_rejected() {
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn dataset_seed_uses_fnv1a() {
        // FNV-1a 64 offset basis for the empty string
        assert_eq!(dataset_seed(0, ""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(dataset_seed(0, "a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn single_value_stat_flagged() {
        let s = mean_sd(&[0.7]);
        assert_eq!((s.mean, s.sd, s.degenerate), (0.7, 0.0, true));
    }
}
