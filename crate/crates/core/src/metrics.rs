//! Label volumes, tumor region algebra and the evaluation metrics.

use std::fmt::Write as _;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Integer label volume with remapped classes {0, 1, 2, 3}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    extents: [usize; 3],
    voxels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], voxels: Vec<u8>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n == 0 || voxels.len() != n {
            return Err(Error::Data(format!(
                "label volume {extents:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(bad) = voxels.iter().find(|&&v| v > 3) {
            return Err(Error::Data(format!("illegal label value {bad}")));
        }
        Ok(LabelVolume { extents, voxels })
    }

    /// Maps raw BraTS labels {0, 1, 2, 4} to {0, 1, 2, 3}.
    pub fn from_raw(extents: [usize; 3], raw: &[u8]) -> Result<Self> {
        let voxels = raw
            .iter()
            .map(|&v| match v {
                0..=2 => Ok(v),
                4 => Ok(3),
                other => Err(Error::Data(format!("illegal raw label value {other}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(extents, voxels)
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        LabelVolume {
            extents,
            voxels: vec![0; extents.iter().product()],
        }
    }

    pub fn extents(&self) -> &[usize; 3] {
        &self.extents
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        let [_, ew, ed] = self.extents;
        self.voxels[(h * ew + w) * ed + d]
    }

    /// Per-class voxel counts.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &v in &self.voxels {
            h[v as usize] += 1;
        }
        h
    }
}

/// Boolean volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(extents: [usize; 3], data: Vec<bool>) -> Self {
        assert_eq!(data.len(), extents.iter().product::<usize>(), "mask size");
        Mask { extents, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        assert_eq!(self.extents, other.extents, "mask extents differ");
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    /// Coordinates of voxels with a 6-neighbor outside the mask or the volume.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [eh, ew, ed] = self.extents;
        let at = |h: usize, w: usize, d: usize| self.data[(h * ew + w) * ed + d];
        let mut out = Vec::new();
        for h in 0..eh {
            for w in 0..ew {
                for d in 0..ed {
                    if !at(h, w, d) {
                        continue;
                    }
                    let border = h == 0 || w == 0 || d == 0 || h + 1 == eh || w + 1 == ew || d + 1 == ed;
                    if border
                        || !at(h - 1, w, d)
                        || !at(h + 1, w, d)
                        || !at(h, w - 1, d)
                        || !at(h, w + 1, d)
                        || !at(h, w, d - 1)
                        || !at(h, w, d + 1)
                    {
                        out.push([h, w, d]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Wt,
    Tc,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Wt => label != 0,
            Region::Tc => label == 1 || label == 3,
            Region::Et => label == 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Mask,
    pub tc: Mask,
    pub et: Mask,
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &Mask {
        match r {
            Region::Wt => &self.wt,
            Region::Tc => &self.tc,
            Region::Et => &self.et,
        }
    }
}

pub fn region_mask(labels: &LabelVolume, r: Region) -> Mask {
    Mask::new(
        labels.extents,
        labels.voxels.iter().map(|&v| r.contains(v)).collect(),
    )
}

/// ET = {3}, TC = {1, 3}, WT = {1, 2, 3}.
pub fn region_masks(labels: &LabelVolume) -> RegionMasks {
    RegionMasks {
        wt: region_mask(labels, Region::Wt),
        tc: region_mask(labels, Region::Tc),
        et: region_mask(labels, Region::Et),
    }
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> f64 {
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return 1.0;
    }
    2.0 * pred.intersection_count(gt) as f64 / (p + g) as f64
}

fn ratio(inter: usize, denom: usize, other: usize) -> f64 {
    match (denom, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => inter as f64 / denom as f64,
    }
}

/// `|P∩G| / |G|`.
pub fn sensitivity(pred: &Mask, gt: &Mask) -> f64 {
    ratio(pred.intersection_count(gt), gt.count(), pred.count())
}

/// `|P∩G| / |P|`.
pub fn ppv(pred: &Mask, gt: &Mask) -> f64 {
    ratio(pred.intersection_count(gt), pred.count(), gt.count())
}

/// Squared Euclidean distance transform to the `true` voxels of `seeds`
/// (exact, separable lower-envelope algorithm). Infinite where there are no
/// seeds at all.
pub fn squared_edt(extents: [usize; 3], seeds: &[bool]) -> Vec<f64> {
    let mut f: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [extents[1] * extents[2], extents[2], 1];
    let longest = *extents.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..extents[others[0]] {
            for j in 0..extents[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for q in 0..n {
                    line[q] = f[base + q * stride];
                }
                lower_envelope(&line[..n], &mut out[..n], &mut v, &mut z);
                for q in 0..n {
                    f[base + q * stride] = out[q];
                }
            }
        }
    }
    f
}

/// 1D pass: `out[q] = min_p (q - p)² + f[p]` over the finite `f[p]`.
fn lower_envelope(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let sq = |x: usize| (x * x) as f64;
    let mut top: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let Some(mut k) = top else {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            top = Some(0);
            continue;
        };
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                // z[0] is -inf, so this never pops the last parabola
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
        top = Some(k);
    }
    let Some(_) = top else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Nearest-rank percentile: the value at rank ⌈pct/100 · n⌉.
pub fn nearest_rank(sorted: &[f64], pct: usize) -> f64 {
    let n = sorted.len();
    let rank = (pct * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

fn directed_surface_distances(from: &[[usize; 3]], to_edt: &[f64], extents: [usize; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&[h, w, z]| to_edt[(h * extents[1] + w) * extents[2] + z].sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// 95th-percentile symmetric surface distance in voxels; `None` if either
/// mask is empty.
pub fn hd95(pred: &Mask, gt: &Mask) -> Option<f64> {
    assert_eq!(pred.extents, gt.extents, "mask extents differ");
    if pred.is_empty() || gt.is_empty() {
        return None;
    }
    let (sp, sg) = (pred.surface(), gt.surface());
    let seeds = |surf: &[[usize; 3]]| {
        let mut s = vec![false; pred.data.len()];
        for &[h, w, d] in surf {
            s[(h * pred.extents[1] + w) * pred.extents[2] + d] = true;
        }
        s
    };
    let edt_g = squared_edt(gt.extents, &seeds(&sg));
    let edt_p = squared_edt(pred.extents, &seeds(&sp));
    let p_to_g = directed_surface_distances(&sp, &edt_g, pred.extents);
    let g_to_p = directed_surface_distances(&sg, &edt_p, pred.extents);
    Some(nearest_rank(&p_to_g, 95).max(nearest_rank(&g_to_p, 95)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub ppv: f64,
    pub hd95: Option<f64>,
}

/// Metrics for WT, TC and ET.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub regions: [RegionMetrics; 3],
}

impl MetricReport {
    pub fn region(&self, r: Region) -> &RegionMetrics {
        &self.regions[r as usize]
    }

    /// `"WT.dice"`-style keys; undefined HD95 is `null`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for r in Region::ALL {
            let x = self.region(r);
            let name = r.name();
            m.insert(format!("{name}.dice"), x.dice.into());
            m.insert(format!("{name}.sensitivity"), x.sensitivity.into());
            m.insert(format!("{name}.ppv"), x.ppv.into());
            m.insert(
                format!("{name}.hd95"),
                x.hd95.map(Value::from).unwrap_or(Value::Null),
            );
        }
        Value::Object(m)
    }

    /// One line per region.
    pub fn to_table(&self) -> String {
        let mut s = String::from("region   dice    sens    ppv     hd95\n");
        for r in Region::ALL {
            let x = self.region(r);
            let hd = x.hd95.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{:<8} {:.4}  {:.4}  {:.4}  {hd}",
                r.name(),
                x.dice,
                x.sensitivity,
                x.ppv
            );
        }
        s
    }
}

pub fn evaluate_labels(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricReport> {
    if pred.extents != gt.extents {
        return Err(Error::Data(format!(
            "prediction extents {:?} differ from ground truth {:?}",
            pred.extents, gt.extents
        )));
    }
    let (pm, gm) = (region_masks(pred), region_masks(gt));
    let regions = Region::ALL.map(|r| {
        let (p, g) = (pm.get(r), gm.get(r));
        RegionMetrics {
            dice: dice(p, g),
            sensitivity: sensitivity(p, g),
            ppv: ppv(p, g),
            hd95: hd95(p, g),
        }
    });
    Ok(MetricReport { regions })
}

/// Arithmetic mean over subjects; HD95 averages the defined values only.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let regions = [0, 1, 2].map(|i| {
        let mean = |f: fn(&RegionMetrics) -> f64| reports.iter().map(|r| f(&r.regions[i])).sum::<f64>() / n;
        let defined: Vec<f64> = reports.iter().filter_map(|r| r.regions[i].hd95).collect();
        RegionMetrics {
            dice: mean(|m| m.dice),
            sensitivity: mean(|m| m.sensitivity),
            ppv: mean(|m| m.ppv),
            hd95: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        }
    });
    Some(MetricReport { regions })
}
