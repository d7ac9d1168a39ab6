//! Overlap metrics from exact voxel counts, and the leave-one-out harness.

mod loo;

pub use loo::{
    leave_one_out, load_dataset, FoldResult, LooConfig, LooResult, Method, MethodSummary, Stat,
    IMAGE_SUFFIX, LABEL_SUFFIX,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// True positives, false positives and false negatives for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn gt_empty(&self) -> bool {
        self.tp + self.fn_ == 0
    }

    pub fn pred_empty(&self) -> bool {
        self.tp + self.fp == 0
    }

    pub fn both_empty(&self) -> bool {
        self.gt_empty() && self.pred_empty()
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Counts over the whole volume plus one entry per axial (z) slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub class: u16,
    pub total: Counts,
    pub slices: Vec<Counts>,
}

pub fn confusion(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    if class as usize >= gt.n_classes() {
        return Err(Error::UnknownLabel(class as i64));
    }
    Ok(confusion_unchecked(pred, gt, class))
}

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    pred.grid()
        .ensure_matches(gt.grid(), "prediction vs ground truth")?;
    if pred.class_map() != gt.class_map() {
        return Err(Error::InvalidInput(
            "prediction and ground truth use different class maps".into(),
        ));
    }
    Ok(())
}

fn confusion_unchecked(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> ConfusionCounts {
    let [nx, ny, nz] = gt.dims();
    let plane = nx * ny;
    let mut slices = vec![Counts::default(); nz];
    for (z, s) in slices.iter_mut().enumerate() {
        let range = z * plane..(z + 1) * plane;
        for (&p, &g) in pred.data()[range.clone()].iter().zip(&gt.data()[range]) {
            match (p == class, g == class) {
                (true, true) => s.tp += 1,
                (true, false) => s.fp += 1,
                (false, true) => s.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let mut total = Counts::default();
    slices.iter().for_each(|&s| total.add(s));
    ConfusionCounts {
        class,
        total,
        slices,
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dsc(c: &Counts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
}

/// `TP / (TP + FP + FN)`; 1 when both masks are empty.
pub fn iou(c: &Counts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    c.tp as f64 / (c.tp + c.fp + c.fn_) as f64
}

/// `1 - IoU`.
pub fn voe(c: &Counts) -> f64 {
    if c.both_empty() {
        return 0.0;
    }
    (c.fp + c.fn_) as f64 / (c.tp + c.fp + c.fn_) as f64
}

/// `TP / (TP + FN)`; 1 when both masks are empty, 0 when only the truth is.
pub fn sn(c: &Counts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    if c.gt_empty() {
        return 0.0;
    }
    c.tp as f64 / (c.tp + c.fn_) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dsc,
    Voe,
    Sn,
    Iou,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dsc, Metric::Voe, Metric::Sn, Metric::Iou];

    pub fn eval(self, c: &Counts) -> f64 {
        match self {
            Metric::Dsc => dsc(c),
            Metric::Voe => voe(c),
            Metric::Sn => sn(c),
            Metric::Iou => iou(c),
        }
    }
}

/// Mean of `metric` over axial slices in which the class occurs in either
/// volume. Returns the volume value and `true` when no slice qualifies.
pub fn slice_mean_metric(
    pred: &LabelVolume,
    gt: &LabelVolume,
    metric: Metric,
    class: u16,
) -> Result<(f64, bool)> {
    let c = confusion(pred, gt, class)?;
    Ok(slice_mean_of(&c, metric))
}

fn slice_mean_of(c: &ConfusionCounts, metric: Metric) -> (f64, bool) {
    let present: Vec<&Counts> = c.slices.iter().filter(|s| !s.both_empty()).collect();
    if present.is_empty() {
        return (metric.eval(&c.total), true);
    }
    (
        present.iter().map(|s| metric.eval(s)).sum::<f64>() / present.len() as f64,
        false,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dsc: f64,
    pub voe: f64,
    pub sn: f64,
    pub iou: f64,
}

impl MetricSet {
    fn from_fn(mut f: impl FnMut(Metric) -> f64) -> Self {
        MetricSet {
            dsc: f(Metric::Dsc),
            voe: f(Metric::Voe),
            sn: f(Metric::Sn),
            iou: f(Metric::Iou),
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Dsc => self.dsc,
            Metric::Voe => self.voe,
            Metric::Sn => self.sn,
            Metric::Iou => self.iou,
        }
    }

    fn mean<'a>(sets: impl Iterator<Item = &'a MetricSet>) -> MetricSet {
        let all: Vec<&MetricSet> = sets.collect();
        let n = all.len().max(1) as f64;
        MetricSet::from_fn(|m| all.iter().map(|s| s.get(m)).sum::<f64>() / n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub id: u16,
    pub code: i64,
    pub counts: Counts,
    pub volume: MetricSet,
    /// Present only when slice averaging was requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slice_mean: Option<MetricSet>,
    /// Both masks empty: metrics follow the empty-mask convention.
    pub both_empty: bool,
    /// No slice contained the class; the slice mean fell back to the volume value.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub slice_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub target: String,
    pub classes: Vec<ClassReport>,
    /// Means over foreground classes.
    pub mean: MetricSet,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slice_mean: Option<MetricSet>,
    pub seconds: f64,
}

/// Per-class and foreground-mean metrics. Background is reported but not averaged.
pub fn evaluate(
    pred: &LabelVolume,
    gt: &LabelVolume,
    slice_mean: bool,
    method: &str,
    target: &str,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    check_pair(pred, gt)?;
    let cm = gt.class_map();
    let classes: Vec<ClassReport> = (0..cm.len() as u16)
        .map(|k| {
            let c = confusion_unchecked(pred, gt, k);
            let mut fallback = false;
            let sm = slice_mean.then(|| {
                MetricSet::from_fn(|m| {
                    let (v, f) = slice_mean_of(&c, m);
                    fallback |= f;
                    v
                })
            });
            ClassReport {
                id: k,
                code: cm.code_of(k),
                counts: c.total,
                volume: MetricSet::from_fn(|m| m.eval(&c.total)),
                slice_mean: sm,
                both_empty: c.total.both_empty(),
                slice_fallback: fallback,
            }
        })
        .collect();
    let fg = || classes.iter().skip(1);
    let mean = MetricSet::mean(fg().map(|c| &c.volume));
    let slice = slice_mean.then(|| MetricSet::mean(fg().filter_map(|c| c.slice_mean.as_ref())));
    Ok(EvalReport {
        method: method.to_string(),
        target: target.to_string(),
        classes,
        mean,
        slice_mean: slice,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{ClassMap, Grid};

    fn lv(data: Vec<u16>, dims: [usize; 3]) -> LabelVolume {
        LabelVolume::new(Grid::unit(dims), data, ClassMap::identity(3)).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let gt = lv(vec![1, 1, 1, 1, 1, 0, 0, 0, 0], [3, 3, 1]);
        let pred = lv(vec![1, 1, 1, 0, 0, 1, 0, 0, 0], [3, 3, 1]);
        let c = confusion(&pred, &gt, 1).unwrap().total;
        assert_eq!(
            c,
            Counts {
                tp: 3,
                fp: 1,
                fn_: 2
            }
        );
        assert!((dsc(&c) - 6.0 / 9.0).abs() < 1e-12);
        assert_eq!(voe(&c), 0.5);
        assert_eq!(sn(&c), 0.6);
        assert_eq!(iou(&c), 0.5);
    }

    #[test]
    fn conventions() {
        let both = Counts::default();
        assert_eq!(
            (dsc(&both), voe(&both), sn(&both), iou(&both)),
            (1.0, 0.0, 1.0, 1.0)
        );
        let only_pred = Counts {
            tp: 0,
            fp: 3,
            fn_: 0,
        };
        assert_eq!(
            (
                dsc(&only_pred),
                voe(&only_pred),
                sn(&only_pred),
                iou(&only_pred)
            ),
            (0.0, 1.0, 0.0, 0.0)
        );
        let only_gt = Counts {
            tp: 0,
            fp: 0,
            fn_: 2,
        };
        assert_eq!(
            (dsc(&only_gt), voe(&only_gt), sn(&only_gt), iou(&only_gt)),
            (0.0, 1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn slice_mean_cases() {
        let gt = lv(vec![0, 0, 0, 0, 2, 2, 0, 0], [2, 2, 2]);
        let pred = lv(vec![0, 0, 0, 0, 2, 0, 0, 0], [2, 2, 2]);
        let (v, fb) = slice_mean_metric(&pred, &gt, Metric::Dsc, 2).unwrap();
        assert!(!fb);
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let (v, fb) = slice_mean_metric(&pred, &gt, Metric::Dsc, 1).unwrap();
        assert!(fb);
        assert_eq!(v, 1.0);
        assert_eq!(
            slice_mean_metric(&gt, &gt, Metric::Dsc, 2).unwrap(),
            (1.0, false)
        );
    }

    #[test]
    fn identical_volumes_score_perfectly() {
        let gt = lv(vec![0, 1, 2, 1, 2, 0, 1, 1], [2, 2, 2]);
        let r = evaluate(&gt, &gt, true, "self", "t").unwrap();
        assert_eq!(r.mean.dsc, 1.0);
        assert_eq!(r.slice_mean.unwrap().dsc, 1.0);
        assert_eq!(r.classes.len(), 3);
    }

    #[test]
    fn mismatched_inputs_fail() {
        let a = lv(vec![0; 8], [2, 2, 2]);
        let b = lv(vec![0; 4], [2, 2, 1]);
        assert!(confusion(&a, &b, 1).is_err());
        let c = LabelVolume::new(Grid::unit([2, 2, 2]), vec![0; 8], ClassMap::identity(2)).unwrap();
        assert!(confusion(&a, &c, 1).is_err());
        assert!(confusion(&a, &a, 5).is_err());
    }
}
