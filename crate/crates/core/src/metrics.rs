//! Segmentation metrics: Dice, average symmetric surface distance and
//! Hausdorff distance.
//!
//! Surfaces are the 6-connected boundary voxels of each mask, taken at voxel
//! centres. Point-to-surface distances come from an exact separable
//! Euclidean distance transform that honours the per-axis spacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Dims3, Spacing};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: Dims3,
    data: Vec<bool>,
    spacing: Spacing,
}

impl BinaryMask {
    pub fn new(dims: Dims3, data: Vec<bool>, spacing: Spacing) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "mask data of length {} for extents {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            spacing,
        })
    }

    pub fn empty(dims: Dims3, spacing: Spacing) -> Self {
        Self {
            dims,
            data: vec![false; dims.iter().product()],
            spacing,
        }
    }

    pub fn from_fn(dims: Dims3, spacing: Spacing, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::empty(dims, spacing);
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    m.data[(d * dims[1] + h) * dims[2] + w] = f(d, h, w);
                }
            }
        }
        m
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: bool) {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Units of the reported distances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnits {
    #[default]
    Mm,
    Voxel,
}

impl DistanceUnits {
    fn scales(self, spacing: &Spacing) -> [f64; 3] {
        match self {
            DistanceUnits::Mm => spacing.axis_scales(),
            DistanceUnits::Voxel => [1.0; 3],
        }
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Dimension(format!(
            "mask extents {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if a.spacing != b.spacing {
        return Err(Error::Dimension(format!(
            "mask spacings {} vs {}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, and 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    check_pair(pred, reference)?;
    let inter = pred
        .data
        .iter()
        .zip(&reference.data)
        .filter(|(a, b)| **a && **b)
        .count();
    let total = pred.count() + reference.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Indices of set voxels with at least one 6-neighbour unset or outside.
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<Dims3> {
    let [nd, nh, nw] = mask.dims;
    let mut out = Vec::new();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                if !mask.get(d, h, w) {
                    continue;
                }
                let interior = d > 0
                    && d + 1 < nd
                    && h > 0
                    && h + 1 < nh
                    && w > 0
                    && w + 1 < nw
                    && mask.get(d - 1, h, w)
                    && mask.get(d + 1, h, w)
                    && mask.get(d, h - 1, w)
                    && mask.get(d, h + 1, w)
                    && mask.get(d, h, w - 1)
                    && mask.get(d, h, w + 1);
                if !interior {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

/// Boundary voxel centres in millimetres.
pub fn boundary(mask: &BinaryMask) -> Vec<[f64; 3]> {
    let s = mask.spacing.axis_scales();
    boundary_voxels(mask)
        .into_iter()
        .map(|[d, h, w]| [d as f64 * s[0], h as f64 * s[1], w as f64 * s[2]])
        .collect()
}

/// Lower-envelope squared distance transform of one line with sample
/// spacing `step`; `f` is `INFINITY` away from the sites.
fn dt1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let x = |q: usize| q as f64 * step;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(q) {
            k += 1;
        }
        let dx = x(q) - x(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Squared distance from every voxel centre to the nearest site.
fn squared_edt(dims: Dims3, sites: &[Dims3], scales: [f64; 3]) -> Vec<f64> {
    let [nd, nh, nw] = dims;
    let mut field = vec![f64::INFINITY; nd * nh * nw];
    for &[d, h, w] in sites {
        field[(d * nh + h) * nw + w] = 0.0;
    }
    let strides = [nh * nw, nw, 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..field.len() {
            // Visit each line once, from its first element.
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = field[start + i * strides[axis]];
            }
            dt1d(&line, scales[axis], &mut out, &mut v, &mut z);
            for i in 0..n {
                field[start + i * strides[axis]] = out[i];
            }
        }
    }
    field
}

/// Directed distances `d(s, ∂B)` for every `s ∈ ∂A`.
fn directed(a: &BinaryMask, b: &BinaryMask, units: DistanceUnits) -> Result<Vec<f64>> {
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedMetric(
            "surface distance of an empty mask".into(),
        ));
    }
    let edt = squared_edt(b.dims, &bb, units.scales(&b.spacing));
    let [_, nh, nw] = a.dims;
    Ok(ba
        .iter()
        .map(|&[d, h, w]| edt[(d * nh + h) * nw + w].sqrt())
        .collect())
}

/// Average symmetric surface distance.
pub fn assd(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    assd_in(pred, reference, DistanceUnits::Mm)
}

pub fn assd_in(pred: &BinaryMask, reference: &BinaryMask, units: DistanceUnits) -> Result<f64> {
    check_pair(pred, reference)?;
    let ab = directed(pred, reference, units)?;
    let ba = directed(reference, pred, units)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64)
}

/// Symmetric Hausdorff distance between the two surfaces.
pub fn hausdorff(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    hausdorff_in(pred, reference, DistanceUnits::Mm)
}

pub fn hausdorff_in(
    pred: &BinaryMask,
    reference: &BinaryMask,
    units: DistanceUnits,
) -> Result<f64> {
    let (ab, ba) = directed_hausdorff_in(pred, reference, units)?;
    Ok(ab.max(ba))
}

/// Both directed terms `(max_{s∈∂A} d(s,∂B), max_{s∈∂B} d(s,∂A))`.
pub fn directed_hausdorff_in(
    a: &BinaryMask,
    b: &BinaryMask,
    units: DistanceUnits,
) -> Result<(f64, f64)> {
    check_pair(a, b)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok((max(directed(a, b, units)?), max(directed(b, a, units)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub assd_mm: f64,
    pub hd_mm: f64,
}

pub fn evaluate(pred: &BinaryMask, reference: &BinaryMask) -> Result<MetricReport> {
    Ok(MetricReport {
        dice: dice(pred, reference)?,
        assd_mm: assd(pred, reference)?,
        hd_mm: hausdorff(pred, reference)?,
    })
}
