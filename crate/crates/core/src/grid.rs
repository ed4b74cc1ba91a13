//! Dense-grid primitives: scalar volumes, displacement fields, trilinear
//! sampling, warping, composition, Jacobians, Gaussian filtering and
//! resolution changes.
//!
//! Out-of-bounds lookups are clamped to the border everywhere. Displacements
//! are stored in voxel units of their own grid.

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

/// Iterates voxel coordinates in memory order.
pub fn voxels(dims: Dims) -> impl Iterator<Item = [usize; 3]> {
    let [d0, d1, d2] = dims;
    (0..d0).flat_map(move |i| (0..d1).flat_map(move |j| (0..d2).map(move |k| [i, j, k])))
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains NaN or Inf")));
    }
    Ok(())
}

pub(crate) fn same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch { left: a, right: b });
    }
    Ok(())
}

/// 3-D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::LengthMismatch(data.len(), voxel_count(dims)));
        }
        check_finite(&data, "volume")?;
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; voxel_count(dims)],
        }
    }

    /// Builds a volume by evaluating `f` at every voxel coordinate.
    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = voxels(dims).map(&mut f).collect();
        Self {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn from_parts(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(dims));
        Self { dims, spacing, data }
    }
}

/// Per-voxel displacement `u(x)`, defining the map `phi(x) = x + u(x)`.
/// Storage is component-major: all of component 0, then 1, then 2.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::LengthMismatch(data.len(), 3 * voxel_count(dims)));
        }
        check_finite(&data, "displacement field")?;
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; 3 * voxel_count(dims)],
        }
    }

    pub fn constant(dims: Dims, value: [f64; 3]) -> Self {
        Self::from_fn(dims, |_| value)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let n = voxel_count(dims);
        let mut data = vec![0.0; 3 * n];
        for (idx, x) in voxels(dims).enumerate() {
            let v = f(x);
            for c in 0..3 {
                data[c * n + idx] = v[c];
            }
        }
        Self {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, idx: usize) -> [f64; 3] {
        let n = self.voxel_count();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    /// Largest displacement magnitude in voxels.
    pub fn max_magnitude(&self) -> f64 {
        (0..self.voxel_count())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub(crate) fn from_parts(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * voxel_count(dims));
        Self { dims, spacing, data }
    }
}

/// Per-voxel 3x3 Jacobian of `phi = x + u`, row-major
/// (`m[3 * r + c] = d phi_r / d x_c`).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    dims: Dims,
    data: Vec<[f64; 9]>,
}

pub const IDENTITY3: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl JacobianField {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn matrices(&self) -> &[[f64; 9]] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> &[f64; 9] {
        &self.data[linear_index(self.dims, i, j, k)]
    }
}

// ---------------------------------------------------------------------------
// Trilinear sampling

#[derive(Clone, Copy, Debug)]
struct AxisSample {
    lo: usize,
    hi: usize,
    t: f64,
    // false when the coordinate was clamped; the derivative is zero there
    active: bool,
}

#[inline]
fn axis_sample(p: f64, n: usize) -> AxisSample {
    if n == 1 {
        return AxisSample {
            lo: 0,
            hi: 0,
            t: 0.0,
            active: false,
        };
    }
    let max = (n - 1) as f64;
    let (pc, active) = if p < 0.0 {
        (0.0, false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let lo = (pc.floor() as usize).min(n - 2);
    AxisSample {
        lo,
        hi: lo + 1,
        t: pc - lo as f64,
        active,
    }
}

/// The eight corner indices of a trilinear lookup with their weights and
/// weight derivatives with respect to the sample point.
#[derive(Clone, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 8]; 3],
}

impl Stencil {
    #[inline]
    pub fn new(dims: Dims, p: [f64; 3]) -> Self {
        let a = [
            axis_sample(p[0], dims[0]),
            axis_sample(p[1], dims[1]),
            axis_sample(p[2], dims[2]),
        ];
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        let mut dw = [[0.0; 8]; 3];
        for corner in 0..8 {
            let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let mut f = [0.0; 3];
            let mut df = [0.0; 3];
            let mut pos = [0usize; 3];
            for ax in 0..3 {
                if bits[ax] == 1 {
                    pos[ax] = a[ax].hi;
                    f[ax] = a[ax].t;
                    df[ax] = 1.0;
                } else {
                    pos[ax] = a[ax].lo;
                    f[ax] = 1.0 - a[ax].t;
                    df[ax] = -1.0;
                }
                if !a[ax].active {
                    df[ax] = 0.0;
                }
            }
            idx[corner] = linear_index(dims, pos[0], pos[1], pos[2]);
            w[corner] = f[0] * f[1] * f[2];
            dw[0][corner] = df[0] * f[1] * f[2];
            dw[1][corner] = f[0] * df[1] * f[2];
            dw[2][corner] = f[0] * f[1] * df[2];
        }
        Self { idx, w, dw }
    }

    #[inline]
    pub fn value(&self, data: &[f64]) -> f64 {
        let mut s = 0.0;
        for c in 0..8 {
            s += self.w[c] * data[self.idx[c]];
        }
        s
    }

    #[inline]
    pub fn gradient(&self, data: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for c in 0..8 {
            let v = data[self.idx[c]];
            g[0] += self.dw[0][c] * v;
            g[1] += self.dw[1][c] * v;
            g[2] += self.dw[2][c] * v;
        }
        g
    }

    /// Adjoint of [`Stencil::value`]: spreads `g` onto the corners.
    #[inline]
    pub fn scatter(&self, data: &mut [f64], g: f64) {
        for c in 0..8 {
            data[self.idx[c]] += self.w[c] * g;
        }
    }
}

/// Trilinear interpolation at a continuous voxel coordinate, clamping to
/// the border first.
pub fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> Result<f64> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample point {p:?}")));
    }
    Ok(Stencil::new(vol.dims, p).value(&vol.data))
}

#[inline]
pub(crate) fn displaced_point(x: [usize; 3], d: [f64; 3]) -> [f64; 3] {
    [x[0] as f64 + d[0], x[1] as f64 + d[1], x[2] as f64 + d[2]]
}

/// `out(x) = vol(x + u(x))`.
pub fn warp_volume(vol: &Volume, u: &DisplacementField) -> Result<Volume> {
    same_dims(vol.dims, u.dims)?;
    let data = voxels(vol.dims)
        .enumerate()
        .map(|(idx, x)| Stencil::new(vol.dims, displaced_point(x, u.at(idx))).value(&vol.data))
        .collect();
    Ok(Volume::from_parts(vol.dims, vol.spacing, data))
}

/// Returns `u_c` with `x + u_c(x) = phi_a(phi_b(x))`.
pub fn compose_fields(u_a: &DisplacementField, u_b: &DisplacementField) -> Result<DisplacementField> {
    same_dims(u_a.dims, u_b.dims)?;
    let dims = u_a.dims;
    let n = voxel_count(dims);
    let mut out = vec![0.0; 3 * n];
    for (idx, x) in voxels(dims).enumerate() {
        let ub = u_b.at(idx);
        let st = Stencil::new(dims, displaced_point(x, ub));
        for c in 0..3 {
            out[c * n + idx] = ub[c] + st.value(u_a.component(c));
        }
    }
    Ok(DisplacementField::from_parts(dims, u_b.spacing, out))
}

/// Fixed-point inverse `v(y) = -u(y + v(y))`, so that `phi_u(phi_v(y)) ~ y`.
/// Converges for smooth fields whose Jacobian stays well away from folding.
pub fn invert_field(u: &DisplacementField, iterations: usize) -> DisplacementField {
    let dims = u.dims;
    let n = voxel_count(dims);
    let mut v: Vec<f64> = u.data.iter().map(|x| -x).collect();
    for _ in 0..iterations {
        let mut next = vec![0.0; 3 * n];
        for (idx, x) in voxels(dims).enumerate() {
            let cur = [v[idx], v[n + idx], v[2 * n + idx]];
            let st = Stencil::new(dims, displaced_point(x, cur));
            for c in 0..3 {
                next[c * n + idx] = -st.value(u.component(c));
            }
        }
        v = next;
    }
    DisplacementField::from_parts(dims, u.spacing, v)
}

// ---------------------------------------------------------------------------
// Finite differences

/// Splits `dims` around `axis` into (outer, n, inner) for slab-wise loops.
#[inline]
fn axis_layout(dims: Dims, axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Central differences inside, one-sided at both ends, in voxel units.
pub(crate) fn diff_axis(src: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_layout(dims, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let (a, b, scale) = if i == 0 {
                (1, 0, 1.0)
            } else if i == n - 1 {
                (n - 1, n - 2, 1.0)
            } else {
                (i + 1, i - 1, 0.5)
            };
            let row = base + i * inner;
            let ra = base + a * inner;
            let rb = base + b * inner;
            for q in 0..inner {
                out[row + q] = scale * (src[ra + q] - src[rb + q]);
            }
        }
    }
    out
}

/// Adds the adjoint of [`diff_axis`] applied to `g` into `acc`.
pub(crate) fn diff_axis_adjoint_add(g: &[f64], dims: Dims, axis: usize, acc: &mut [f64]) {
    let (outer, n, inner) = axis_layout(dims, axis);
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let (a, b, scale) = if i == 0 {
                (1, 0, 1.0)
            } else if i == n - 1 {
                (n - 1, n - 2, 1.0)
            } else {
                (i + 1, i - 1, 0.5)
            };
            let row = base + i * inner;
            let ra = base + a * inner;
            let rb = base + b * inner;
            for q in 0..inner {
                let v = scale * g[row + q];
                acc[ra + q] += v;
                acc[rb + q] -= v;
            }
        }
    }
}

/// Jacobian of `phi = x + u` by central differences (one-sided on the border).
pub fn jacobian_field(u: &DisplacementField) -> Result<JacobianField> {
    let dims = u.dims;
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::invalid(format!(
            "jacobian needs at least 3 voxels per axis, got {dims:?}"
        )));
    }
    let n = voxel_count(dims);
    let mut data = vec![IDENTITY3; n];
    for r in 0..3 {
        for c in 0..3 {
            let d = diff_axis(u.component(r), dims, c);
            for (m, v) in data.iter_mut().zip(d) {
                m[3 * r + c] += v;
            }
        }
    }
    Ok(JacobianField { dims, data })
}

// ---------------------------------------------------------------------------
// Gaussian filtering

/// Normalized 1-D Gaussian truncated at `ceil(3 sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let mut weights: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { radius, weights })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Weights for offsets `-radius..=radius`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn convolve_axis(src: &[f64], dst: &mut [f64], dims: Dims, axis: usize, kernel: &GaussianKernel) {
    let (outer, n, inner) = axis_layout(dims, axis);
    let r = kernel.radius as isize;
    let w = &kernel.weights;
    if inner == 1 {
        let mut pad = vec![0.0; n + 2 * kernel.radius];
        for o in 0..outer {
            let line = &src[o * n..(o + 1) * n];
            for (m, p) in pad.iter_mut().enumerate() {
                let j = (m as isize - r).clamp(0, n as isize - 1) as usize;
                *p = line[j];
            }
            let out = &mut dst[o * n..(o + 1) * n];
            for (i, v) in out.iter_mut().enumerate() {
                let window = &pad[i..i + w.len()];
                *v = window.iter().zip(w).map(|(a, b)| a * b).sum();
            }
        }
        return;
    }
    dst.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let row = base + i * inner;
            for (kk, &wk) in w.iter().enumerate() {
                let j = (i as isize + kk as isize - r).clamp(0, n as isize - 1) as usize;
                let srow = base + j * inner;
                let (d, s) = (&mut dst[row..row + inner], &src[srow..srow + inner]);
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += wk * sv;
                }
            }
        }
    }
}

fn convolve_axis_adjoint(src: &[f64], dst: &mut [f64], dims: Dims, axis: usize, kernel: &GaussianKernel) {
    let (outer, n, inner) = axis_layout(dims, axis);
    let r = kernel.radius as isize;
    let w = &kernel.weights;
    dst.iter_mut().for_each(|v| *v = 0.0);
    if inner == 1 {
        let mut pad = vec![0.0; n + 2 * kernel.radius];
        for o in 0..outer {
            pad.iter_mut().for_each(|v| *v = 0.0);
            let g = &src[o * n..(o + 1) * n];
            for (i, &gi) in g.iter().enumerate() {
                for (p, wk) in pad[i..i + w.len()].iter_mut().zip(w) {
                    *p += wk * gi;
                }
            }
            let out = &mut dst[o * n..(o + 1) * n];
            for (m, &p) in pad.iter().enumerate() {
                let j = (m as isize - r).clamp(0, n as isize - 1) as usize;
                out[j] += p;
            }
        }
        return;
    }
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let row = base + i * inner;
            for (kk, &wk) in w.iter().enumerate() {
                let j = (i as isize + kk as isize - r).clamp(0, n as isize - 1) as usize;
                let drow = base + j * inner;
                for q in 0..inner {
                    dst[drow + q] += wk * src[row + q];
                }
            }
        }
    }
}

/// Separable blur of a raw grid.
pub(crate) fn blur_data(data: &[f64], dims: Dims, kernel: &GaussianKernel) -> Vec<f64> {
    let mut a = data.to_vec();
    let mut b = vec![0.0; data.len()];
    for axis in 0..3 {
        convolve_axis(&a, &mut b, dims, axis, kernel);
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Transpose of [`blur_data`] (differs from it only at the clamped border).
pub(crate) fn blur_adjoint_data(data: &[f64], dims: Dims, kernel: &GaussianKernel) -> Vec<f64> {
    let mut a = data.to_vec();
    let mut b = vec![0.0; data.len()];
    for axis in (0..3).rev() {
        convolve_axis_adjoint(&a, &mut b, dims, axis, kernel);
        std::mem::swap(&mut a, &mut b);
    }
    a
}

pub fn gaussian_blur(vol: &Volume, sigma: f64) -> Result<Volume> {
    let kernel = GaussianKernel::new(sigma)?;
    Ok(Volume::from_parts(
        vol.dims,
        vol.spacing,
        blur_data(&vol.data, vol.dims, &kernel),
    ))
}

// ---------------------------------------------------------------------------
// Resolution changes

fn half_dims(dims: Dims) -> Result<Dims> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!(
            "downsampling needs at least 2 voxels per axis, got {dims:?}"
        )));
    }
    Ok(dims.map(|d| d.div_ceil(2)))
}

fn subsample2(data: &[f64], dims: Dims, out_dims: Dims) -> Vec<f64> {
    voxels(out_dims)
        .map(|[i, j, k]| data[linear_index(dims, 2 * i, 2 * j, 2 * k)])
        .collect()
}

/// Blur with sigma 1, then keep every second sample per axis.
pub fn downsample2(vol: &Volume) -> Result<Volume> {
    let out_dims = half_dims(vol.dims)?;
    let kernel = GaussianKernel::new(1.0)?;
    let blurred = blur_data(&vol.data, vol.dims, &kernel);
    Ok(Volume::from_parts(
        out_dims,
        vol.spacing.map(|s| 2.0 * s),
        subsample2(&blurred, vol.dims, out_dims),
    ))
}

/// Field version of [`downsample2`]; components are rescaled to the coarse
/// grid's voxel units.
pub fn downsample2_field(u: &DisplacementField) -> Result<DisplacementField> {
    let dims = u.dims;
    let out_dims = half_dims(dims)?;
    let kernel = GaussianKernel::new(1.0)?;
    let mut data = Vec::with_capacity(3 * voxel_count(out_dims));
    for c in 0..3 {
        let scale = out_dims[c] as f64 / dims[c] as f64;
        let blurred = blur_data(u.component(c), dims, &kernel);
        data.extend(subsample2(&blurred, dims, out_dims).into_iter().map(|v| v * scale));
    }
    Ok(DisplacementField::from_parts(
        out_dims,
        u.spacing.map(|s| 2.0 * s),
        data,
    ))
}

/// Trilinear resampling to `dims`; target voxel `j` reads source coordinate
/// `j * src / dst` per axis and components scale by `dst / src`.
pub fn upsample_to(u: &DisplacementField, dims: Dims) -> Result<DisplacementField> {
    check_dims(dims)?;
    let src = u.dims;
    let ratio = [0, 1, 2].map(|a| src[a] as f64 / dims[a] as f64);
    let n = voxel_count(dims);
    let mut data = vec![0.0; 3 * n];
    for (idx, x) in voxels(dims).enumerate() {
        let p = [0, 1, 2].map(|a| x[a] as f64 * ratio[a]);
        let st = Stencil::new(src, p);
        for c in 0..3 {
            data[c * n + idx] = st.value(u.component(c)) / ratio[c];
        }
    }
    let spacing = [0, 1, 2].map(|a| u.spacing[a] * ratio[a]);
    Ok(DisplacementField::from_parts(dims, spacing, data))
}
