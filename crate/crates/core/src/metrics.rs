//! Overlap and surface-distance metrics on binary masks.
//!
//! Distances are measured in voxel units. Nearest-neighbour distances come
//! from an exact separable Euclidean distance transform, so a whole volume is
//! handled in time linear in its voxel count.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A strictly binary mask of rank 2 (`H×W`) or 3 (`S×H×W`), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) {
            return Err(Error::Shape(format!("mask must be 2-D or 3-D, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{} values for mask shape {shape:?}", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_bools(shape: &[usize], data: impl IntoIterator<Item = bool>) -> Result<Self> {
        Self::new(shape, data.into_iter().map(u8::from).collect())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0; shape.iter().product()])
    }

    /// Stacks equally sized 2-D slices into a volume.
    pub fn stack(slices: &[BinaryMask]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero slices".into()))?;
        if first.shape.len() != 2 {
            return Err(Error::Shape("only 2-D masks can be stacked".into()));
        }
        let mut data = Vec::with_capacity(first.data.len() * slices.len());
        for s in slices {
            if s.shape != first.shape {
                return Err(Error::Shape(format!("slice {:?} vs {:?}", s.shape, first.shape)));
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(&[slices.len(), first.shape[0], first.shape[1]], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

fn check_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!("pred {:?} vs gt {:?}", pred.shape, gt.shape)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    check_pair(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// `2TP / (FP + 2TP + FN)`; 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        let denom = self.fp + 2 * self.tp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// `TP / (TP + FN)`; 1 when the ground truth is empty.
    pub fn sensitivity(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`; 1 when the ground truth covers everything.
    pub fn specificity(&self) -> f64 {
        ratio_or_one(self.tn, self.tn + self.fp)
    }

    pub fn volume_similarity(&self, form: VsForm) -> f64 {
        let m = (self.tp + self.fn_) as f64;
        let w = (self.tp + self.fp) as f64;
        if m + w == 0.0 {
            return 0.0;
        }
        match form {
            VsForm::AsPrinted => (2.0 * m - w) / (m + w),
            VsForm::Symmetric => 2.0 * (m - w) / (m + w),
        }
    }
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.dsc())
}

pub fn sensitivity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.sensitivity())
}

pub fn specificity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.specificity())
}

/// Which volume-similarity formula to use, with `M` the ground-truth count
/// and `W` the predicted count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VsForm {
    /// `(2|M| − |W|) / (|M| + |W|)`, range `[−1, 2]`.
    #[default]
    AsPrinted,
    /// `2(|M| − |W|) / (|M| + |W|)`, range `[−2, 2]`, zero when the sizes agree.
    Symmetric,
}

pub fn volume_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    volume_similarity_with(pred, gt, VsForm::AsPrinted)
}

pub fn volume_similarity_with(pred: &BinaryMask, gt: &BinaryMask, form: VsForm) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.volume_similarity(form))
}

/// Squared Euclidean distance from every voxel to the nearest foreground
/// voxel of `mask`, exact in integer arithmetic held in `f64`.
fn squared_edt(mask: &BinaryMask) -> Vec<f64> {
    let shape = &mask.shape;
    let mut f: Vec<f64> = mask
        .data
        .iter()
        .map(|&v| if v == 1 { 0.0 } else { f64::INFINITY })
        .collect();
    let n_max = *shape.iter().max().unwrap();
    let (mut line, mut out) = (vec![0.0; n_max], vec![0.0; n_max]);
    let mut env = Envelope::with_capacity(n_max);
    for axis in 0..shape.len() {
        let n = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * n * stride + inner;
                for i in 0..n {
                    line[i] = f[base + i * stride];
                }
                env.transform(&line[..n], &mut out[..n]);
                for i in 0..n {
                    f[base + i * stride] = out[i];
                }
            }
        }
    }
    f
}

/// Lower envelope of parabolas for the 1-D squared distance transform.
/// Sites with infinite cost are left out, so an all-infinite line stays
/// infinite.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let meet = |q: usize, v: usize| {
            let (qf, vf) = (q as f64, v as f64);
            ((f[q] + qf * qf) - (f[v] + vf * vf)) / (2.0 * (qf - vf))
        };
        for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&v) => {
                        let s = meet(q, v);
                        if s <= *self.bounds.last().unwrap() {
                            self.sites.pop();
                            self.bounds.pop();
                        } else {
                            self.sites.push(q);
                            self.bounds.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, slot) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < p as f64 {
                k += 1;
            }
            let v = self.sites[k];
            let d = p as f64 - v as f64;
            *slot = d * d + f[v];
        }
    }
}

/// Directed nearest-neighbour distances from every foreground voxel of `from`
/// to the foreground of `to`.
fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let dt = squared_edt(to);
    from.data
        .iter()
        .zip(dt)
        .filter(|(&v, _)| v == 1)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn both_non_empty(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    check_pair(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if gt.is_empty() {
        return Err(Error::EmptyMask("ground truth"));
    }
    Ok(())
}

/// Symmetric Hausdorff distance between the two foreground sets.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    both_non_empty(pred, gt)?;
    let a = directed_distances(pred, gt);
    let b = directed_distances(gt, pred);
    Ok(a.into_iter().chain(b).fold(0.0, f64::max))
}

/// 95th percentile, linearly interpolated, of the pooled directed
/// nearest-neighbour distances in both directions.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    both_non_empty(pred, gt)?;
    let mut d = directed_distances(pred, gt);
    d.extend(directed_distances(gt, pred));
    d.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&d, 0.95))
}

/// Linear interpolation at fractional index `q·(n − 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-volume (or aggregate) evaluation. Distance fields are `None` when a
/// mask was empty and the distance undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub dsc: f64,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub volume_similarity: f64,
}

pub const CSV_HEADER: &str = "dsc,hd,hd95,sensitivity,specificity,volume_similarity";

impl MetricsReport {
    /// Whether a distance could not be computed.
    pub fn missing_distance(&self) -> bool {
        self.hd.is_none()
    }

    /// One CSV row matching [`CSV_HEADER`]; undefined distances are written as `NA`.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.dsc,
            opt(self.hd),
            opt(self.hd95),
            self.sensitivity,
            self.specificity,
            self.volume_similarity
        )
    }

    /// Arithmetic mean of each field. Distances average over the rows that
    /// have them.
    pub fn mean(rows: &[MetricsReport]) -> Option<MetricsReport> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let present: Vec<f64> = rows.iter().filter_map(f).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        };
        Some(MetricsReport {
            dsc: avg(|r| r.dsc),
            hd: avg_opt(|r| r.hd),
            hd95: avg_opt(|r| r.hd95),
            sensitivity: avg(|r| r.sensitivity),
            specificity: avg(|r| r.specificity),
            volume_similarity: avg(|r| r.volume_similarity),
        })
    }
}

/// CSV text with a header and one row per report.
pub fn reports_to_csv(rows: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

fn volume_of(pred_slices: &[BinaryMask], gt_slices: &[BinaryMask]) -> Result<(BinaryMask, BinaryMask)> {
    if pred_slices.len() != gt_slices.len() {
        return Err(Error::Shape(format!(
            "{} predicted slices vs {} ground-truth slices",
            pred_slices.len(),
            gt_slices.len()
        )));
    }
    let (p, g) = (BinaryMask::stack(pred_slices)?, BinaryMask::stack(gt_slices)?);
    check_pair(&p, &g)?;
    Ok((p, g))
}

/// Counts pooled over all slices; distances in 3-D voxel space. Empty masks
/// are an error.
pub fn evaluate_volume(pred_slices: &[BinaryMask], gt_slices: &[BinaryMask]) -> Result<MetricsReport> {
    let (p, g) = volume_of(pred_slices, gt_slices)?;
    let c = confusion_counts(&p, &g)?;
    Ok(MetricsReport {
        dsc: c.dsc(),
        hd: Some(hausdorff(&p, &g)?),
        hd95: Some(hd95(&p, &g)?),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        volume_similarity: c.volume_similarity(VsForm::AsPrinted),
    })
}

/// Like [`evaluate_volume`], but an empty mask leaves the distances missing
/// instead of failing.
pub fn evaluate_volume_lenient(
    pred_slices: &[BinaryMask],
    gt_slices: &[BinaryMask],
) -> Result<MetricsReport> {
    match evaluate_volume(pred_slices, gt_slices) {
        Err(Error::EmptyMask(_)) => {
            let (p, g) = volume_of(pred_slices, gt_slices)?;
            let c = confusion_counts(&p, &g)?;
            Ok(MetricsReport {
                dsc: c.dsc(),
                hd: None,
                hd95: None,
                sensitivity: c.sensitivity(),
                specificity: c.specificity(),
                volume_similarity: c.volume_similarity(VsForm::AsPrinted),
            })
        }
        other => other,
    }
}
