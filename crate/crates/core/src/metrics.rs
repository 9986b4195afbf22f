//! Hard-segmentation metrics over the nested tumor regions.
//!
//! Regions: ET = {4}, TC = {1, 4}, WT = {1, 2, 4}. Hausdorff distances are
//! measured between 6-connected boundary voxels in millimetres, using an
//! exact separable Euclidean distance transform.

use std::fmt::Write;

use crate::data::LabelVolume;
use crate::error::{Error, Result};

pub const DEFAULT_PERCENTILE: f64 = 95.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Et,
    Wt,
    Tc,
}

impl Region {
    /// Table order.
    pub const ALL: [Region; 3] = [Region::Et, Region::Wt, Region::Tc];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Wt => "WT",
            Region::Tc => "TC",
        }
    }

    pub fn contains(self, code: u8) -> bool {
        match self {
            Region::Et => code == 4,
            Region::Tc => code == 1 || code == 4,
            Region::Wt => code == 1 || code == 2 || code == 4,
        }
    }
}

/// Binary voxel mask in `[nx, ny, nz]` index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != bits.len() {
            return Err(Error::shape(format!(
                "mask dims {dims:?} with {} voxels",
                bits.len()
            )));
        }
        Ok(Self { dims, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Foreground voxels with at least one 6-connected background
    /// neighbour; the volume border counts as background.
    pub fn boundary(&self) -> Mask {
        let [nx, ny, nz] = self.dims;
        let at = |x: usize, y: usize, z: usize| self.bits[x + nx * (y + ny * z)];
        let mut bits = vec![false; self.bits.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !at(x, y, z) {
                        continue;
                    }
                    let edge = x == 0
                        || y == 0
                        || z == 0
                        || x + 1 == nx
                        || y + 1 == ny
                        || z + 1 == nz
                        || !at(x - 1, y, z)
                        || !at(x + 1, y, z)
                        || !at(x, y - 1, z)
                        || !at(x, y + 1, z)
                        || !at(x, y, z - 1)
                        || !at(x, y, z + 1);
                    bits[x + nx * (y + ny * z)] = edge;
                }
            }
        }
        Mask {
            dims: self.dims,
            bits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Regions {
    pub et: Mask,
    pub wt: Mask,
    pub tc: Mask,
}

impl Regions {
    pub fn get(&self, r: Region) -> &Mask {
        match r {
            Region::Et => &self.et,
            Region::Wt => &self.wt,
            Region::Tc => &self.tc,
        }
    }
}

pub fn compose_regions(labels: &LabelVolume) -> Regions {
    let mask = |r: Region| Mask {
        dims: labels.dims,
        bits: labels.codes.iter().map(|&c| r.contains(c)).collect(),
    };
    Regions {
        et: mask(Region::Et),
        wt: mask(Region::Wt),
        tc: mask(Region::Tc),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.dims != truth.dims {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(dice, sensitivity, specificity)`; a zero denominator yields 1.
pub fn dice_sens_spec(c: ConfusionCounts) -> (f64, f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    (
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        ratio(c.tp, c.tp + c.fn_),
        ratio(c.tn, c.tn + c.fp),
    )
}

/// Squared distance transform along one line: `d[q] = min_p w·(q−p)² + f[p]`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let key = |p: usize| f[p] + w * (p * p) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    break;
                }
                Some(&v) => {
                    let s = (key(q) - key(v)) / (2.0 * w * (q - v) as f64);
                    if sites.len() > 1 && s <= *bounds.last().expect("one bound per extra site") {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k < bounds.len() && bounds[k] < q as f64 {
            k += 1;
        }
        let p = sites[k];
        let d = q as f64 - p as f64;
        *o = w * d * d + f[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest set
/// voxel of `mask`; infinite when the mask is empty.
pub fn squared_distance_transform(mask: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = mask.dims;
    let mut grid: Vec<f64> = mask
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, nx, nx * ny];
    let extents = [nx, ny, nz];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut sites, mut bounds) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let w = spacing[axis] * spacing[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for start in 0..grid.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = grid[start + k * stride];
            }
            edt_1d(&line, w, &mut out, &mut sites, &mut bounds);
            for (k, v) in out.iter().enumerate() {
                grid[start + k * stride] = *v;
            }
        }
    }
    grid
}

/// Linear-interpolated percentile of unsorted values; `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

fn directed(from: &Mask, to_sq_dist: &[f64], q: f64) -> f64 {
    let mut d: Vec<f64> = from
        .bits
        .iter()
        .zip(to_sq_dist)
        .filter(|(&b, _)| b)
        .map(|(_, &s)| s.sqrt())
        .collect();
    percentile(&mut d, q).expect("nonempty boundary")
}

/// Max of the `q`-th percentiles of the two directed boundary distance
/// sets, in mm. `None` when either mask is empty. `q = 100` gives the
/// classical Hausdorff distance.
pub fn hausdorff_percentile(pred: &Mask, truth: &Mask, spacing: [f64; 3], q: f64) -> Result<Option<f64>> {
    if pred.dims != truth.dims {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("percentile {q} outside [0, 100]")));
    }
    if pred.is_empty() || truth.is_empty() {
        return Ok(None);
    }
    let bp = pred.boundary();
    let bt = truth.boundary();
    let to_pred = squared_distance_transform(&bp, spacing);
    let to_truth = squared_distance_transform(&bt, spacing);
    Ok(Some(directed(&bt, &to_pred, q).max(directed(&bp, &to_truth, q))))
}

pub fn hausdorff95(pred: &Mask, truth: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    hausdorff_percentile(pred, truth, spacing, DEFAULT_PERCENTILE)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when either mask is empty.
    pub hausdorff95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub case_id: String,
    /// ET, WT, TC.
    pub regions: [RegionMetrics; 3],
}

impl MetricsReport {
    pub fn region(&self, r: Region) -> &RegionMetrics {
        &self.regions[Region::ALL.iter().position(|&x| x == r).expect("known region")]
    }
}

pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
    spacing: [f64; 3],
) -> Result<MetricsReport> {
    if pred.dims != truth.dims {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    let p = compose_regions(pred);
    let t = compose_regions(truth);
    let mut regions = [RegionMetrics {
        dice: 0.0,
        sensitivity: 0.0,
        specificity: 0.0,
        hausdorff95: None,
    }; 3];
    for (slot, r) in regions.iter_mut().zip(Region::ALL) {
        let (dice, sensitivity, specificity) = dice_sens_spec(confusion(p.get(r), t.get(r))?);
        *slot = RegionMetrics {
            dice,
            sensitivity,
            specificity,
            hausdorff95: hausdorff95(p.get(r), t.get(r), spacing)?,
        };
    }
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        regions,
    })
}

/// Per-region means; Hausdorff means skip empty-mask cases.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub cases: usize,
    /// ET, WT, TC; `hausdorff95` is `None` when every case was excluded.
    pub means: [RegionMetrics; 3],
    /// Cases excluded from each Hausdorff mean.
    pub hausdorff_excluded: [usize; 3],
}

pub fn summarize(reports: &[MetricsReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = reports.len() as f64;
    let mut means = [RegionMetrics {
        dice: 0.0,
        sensitivity: 0.0,
        specificity: 0.0,
        hausdorff95: None,
    }; 3];
    let mut excluded = [0; 3];
    for k in 0..3 {
        let col = || reports.iter().map(|r| r.regions[k]);
        let hd: Vec<f64> = col().filter_map(|m| m.hausdorff95).collect();
        excluded[k] = reports.len() - hd.len();
        means[k] = RegionMetrics {
            dice: col().map(|m| m.dice).sum::<f64>() / n,
            sensitivity: col().map(|m| m.sensitivity).sum::<f64>() / n,
            specificity: col().map(|m| m.specificity).sum::<f64>() / n,
            hausdorff95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
        };
    }
    Ok(Summary {
        cases: reports.len(),
        means,
        hausdorff_excluded: excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

fn fmt_hd(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

/// Mean metrics per region in ET, WT, TC order.
pub fn report_table(reports: &[MetricsReport], format: TableFormat) -> Result<String> {
    let s = summarize(reports)?;
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("region,dice,sensitivity,specificity,hausdorff95\n");
            for (r, m) in Region::ALL.iter().zip(&s.means) {
                writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6},{}",
                    r.name(),
                    m.dice,
                    m.sensitivity,
                    m.specificity,
                    fmt_hd(m.hausdorff95)
                )
                .expect("write to string");
            }
        }
        TableFormat::Text => {
            writeln!(out, "{} case(s)", s.cases).expect("write to string");
            writeln!(
                out,
                "{:<6} {:>8} {:>11} {:>11} {:>11} {:>8}",
                "region", "dice", "sensitivity", "specificity", "hausdorff95", "hd_excl"
            )
            .expect("write to string");
            for ((r, m), ex) in Region::ALL.iter().zip(&s.means).zip(s.hausdorff_excluded) {
                writeln!(
                    out,
                    "{:<6} {:>8.4} {:>11.4} {:>11.4} {:>11} {:>8}",
                    r.name(),
                    m.dice,
                    m.sensitivity,
                    m.specificity,
                    fmt_hd(m.hausdorff95),
                    ex
                )
                .expect("write to string");
            }
        }
    }
    Ok(out)
}
