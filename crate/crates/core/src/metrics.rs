//! Evaluation metrics: Dice overlap, 95th-percentile Hausdorff distance,
//! non-diffeomorphic volume fraction and landmark target registration error.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    displaced_point, linear_index, same_dims, voxel_count, voxels, Dims, DisplacementField,
    Stencil,
};

/// Integer label image, 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<u32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::LengthMismatch(data.len(), voxel_count(dims)));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn from_fn(dims: Dims, f: impl FnMut([usize; 3]) -> u32) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: voxels(dims).map(f).collect(),
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    /// Distinct nonzero labels.
    pub fn labels(&self) -> BTreeSet<u32> {
        self.data.iter().copied().filter(|&l| l != 0).collect()
    }
}

/// Landmark positions in voxel coordinates with parallel integer ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub ids: Vec<u32>,
    pub points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(ids: Vec<u32>, points: Vec<[f64; 3]>) -> Result<Self> {
        if ids.len() != points.len() {
            return Err(Error::LengthMismatch(ids.len(), points.len()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates".into()));
        }
        Ok(Self { ids, points })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<u32, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreStats {
    pub mean_mm: f64,
    pub std_mm: f64,
    pub per_point_mm: Vec<f64>,
}

/// Metric summary for one registration. Missing inputs leave fields `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_label: Option<BTreeMap<u32, f64>>,
    pub dice_mean: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub ndv_fraction: Option<f64>,
    pub tre_mean_mm: Option<f64>,
    pub tre_std_mm: Option<f64>,
}

/// Nearest-neighbour label lookup at `x + u(x)`, clamped to the border.
pub fn warp_labels(labels: &LabelMap, u: &DisplacementField) -> Result<LabelMap> {
    same_dims(labels.dims, u.dims())?;
    let dims = labels.dims;
    let data = voxels(dims)
        .enumerate()
        .map(|(idx, x)| {
            let p = displaced_point(x, u.at(idx));
            let q: [usize; 3] =
                [0, 1, 2].map(|a| p[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize);
            labels.data[linear_index(dims, q[0], q[1], q[2])]
        })
        .collect();
    Ok(LabelMap {
        dims,
        spacing: labels.spacing,
        data,
    })
}

/// Per-label Dice over the union of foreground labels. A label present in
/// only one map scores 0.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceScores> {
    same_dims(a.dims, b.dims)?;
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for (&la, &lb) in a.data.iter().zip(&b.data) {
        if la != 0 {
            counts.entry(la).or_default()[0] += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default()[1] += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default()[2] += 1;
        }
    }
    let per_label: BTreeMap<u32, f64> = counts
        .into_iter()
        .map(|(l, [na, nb, both])| (l, 2.0 * both as f64 / (na + nb) as f64))
        .collect();
    let mean = if per_label.is_empty() {
        f64::NAN
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceScores { per_label, mean })
}

/// Mask voxels with a 6-neighbour outside the mask or on the volume border.
pub fn boundary_voxels(map: &LabelMap, label: u32) -> Vec<[usize; 3]> {
    let dims = map.dims;
    voxels(dims)
        .filter(|&[i, j, k]| {
            if map.get(i, j, k) != label {
                return false;
            }
            let x = [i, j, k];
            for a in 0..3 {
                if x[a] == 0 || x[a] + 1 == dims[a] {
                    return true;
                }
                for delta in [-1isize, 1] {
                    let mut y = x;
                    y[a] = (x[a] as isize + delta) as usize;
                    if map.get(y[0], y[1], y[2]) != label {
                        return true;
                    }
                }
            }
            false
        })
        .collect()
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas) with sample spacing `h`. `f` holds `INFINITY` where there is
/// no seed.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let h2 = h * h;
    let mut k = 0usize;
    let Some(start) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + h2 * (q * q) as f64) - (f[p] + h2 * (p * p) as f64))
                / (2.0 * h2 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * h;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest seed.
fn squared_distance_transform(dims: Dims, spacing: [f64; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let n = voxel_count(dims);
    let mut dist = vec![f64::INFINITY; n];
    for s in seeds {
        dist[linear_index(dims, s[0], s[1], s[2])] = 0.0;
    }
    let maxd = *dims.iter().max().unwrap();
    let mut line = vec![0.0; maxd];
    let mut out = vec![0.0; maxd];
    let mut v = vec![0usize; maxd];
    let mut z = vec![0.0; maxd + 1];
    // process the fastest axis first
    for axis in (0..3).rev() {
        let len = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let mut others = dims;
        others[axis] = 1;
        for [i, j, k] in voxels(others) {
            let base = linear_index(dims, i, j, k);
            for q in 0..len {
                line[q] = dist[base + q * stride];
            }
            edt_1d(&line[..len], spacing[axis], &mut out[..len], &mut v, &mut z);
            for q in 0..len {
                dist[base + q * stride] = out[q];
            }
        }
    }
    dist
}

/// Nearest-rank percentile of an unsorted sample.
pub fn nearest_rank_percentile(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((pct / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

fn directed_hd95(from: &[[usize; 3]], to_dist: &[f64], dims: Dims) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|p| to_dist[linear_index(dims, p[0], p[1], p[2])].sqrt())
        .collect();
    nearest_rank_percentile(&mut d, 95.0)
}

/// Symmetric 95th-percentile Hausdorff distance in mm between the boundaries
/// of `label` in both maps.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u32, spacing: [f64; 3]) -> Result<f64> {
    same_dims(a.dims, b.dims)?;
    let ba = boundary_voxels(a, label);
    let bb = boundary_voxels(b, label);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::invalid(format!("label {label} is missing from a map")));
    }
    let da = squared_distance_transform(a.dims, spacing, &ba);
    let db = squared_distance_transform(b.dims, spacing, &bb);
    Ok(directed_hd95(&ba, &db, a.dims).max(directed_hd95(&bb, &da, a.dims)))
}

/// Mean HD95 over labels present in both maps; `None` when there are none.
pub fn mean_hd95(a: &LabelMap, b: &LabelMap, spacing: [f64; 3]) -> Result<Option<f64>> {
    same_dims(a.dims, b.dims)?;
    let common: Vec<u32> = a.labels().intersection(&b.labels()).copied().collect();
    if common.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for &l in &common {
        total += hd95(a, b, l, spacing)?;
    }
    Ok(Some(total / common.len() as f64))
}

pub(crate) fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Fraction of voxels whose forward-difference Jacobian determinant of
/// `x + u` is non-positive. Only voxels with all three forward neighbours
/// are evaluated.
pub fn ndv(u: &DisplacementField) -> Result<f64> {
    let dims = u.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!("ndv needs at least 2 voxels per axis, got {dims:?}")));
    }
    let strides = [dims[1] * dims[2], dims[2], 1];
    let comps = [u.component(0), u.component(1), u.component(2)];
    let inner = [dims[0] - 1, dims[1] - 1, dims[2] - 1];
    let mut folded = 0usize;
    for [i, j, k] in voxels(inner) {
        let idx = linear_index(dims, i, j, k);
        let mut m = crate::grid::IDENTITY3;
        for r in 0..3 {
            for c in 0..3 {
                m[3 * r + c] += comps[r][idx + strides[c]] - comps[r][idx];
            }
        }
        if det3(&m) <= 0.0 {
            folded += 1;
        }
    }
    Ok(folded as f64 / voxel_count(inner) as f64)
}

/// Landmark error: each fixed landmark `p` maps to `p + u(p)` and is
/// compared with the moving landmark of the same id.
pub fn tre(
    fixed: &LandmarkSet,
    moving: &LandmarkSet,
    u: &DisplacementField,
    spacing: [f64; 3],
) -> Result<TreStats> {
    if fixed.ids != moving.ids {
        return Err(Error::invalid("landmark ids do not match"));
    }
    if fixed.is_empty() {
        return Err(Error::invalid("no landmarks"));
    }
    let dims = u.dims();
    let comps = [u.component(0), u.component(1), u.component(2)];
    let mut errs = Vec::with_capacity(fixed.len());
    for (p, q) in fixed.points.iter().zip(&moving.points) {
        if (0..3).any(|a| p[a] < 0.0 || p[a] > (dims[a] - 1) as f64) {
            return Err(Error::invalid(format!("landmark {p:?} outside the volume")));
        }
        let st = Stencil::new(dims, *p);
        let mut sq = 0.0;
        for a in 0..3 {
            let mapped = p[a] + st.value(comps[a]);
            let d = (mapped - q[a]) * spacing[a];
            sq += d * d;
        }
        errs.push(sq.sqrt());
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(TreStats {
        mean_mm: mean,
        std_mm: var.sqrt(),
        per_point_mm: errs,
    })
}
