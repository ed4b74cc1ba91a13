//! Synthetic image pairs with a known smooth deformation.
//!
//! The fixed image is a sum of Gaussian blobs plus a little noise. A smooth
//! random field `gt_field` is drawn, and the moving image is produced so that
//! pulling it back through `gt_field` reproduces the fixed image:
//! `moving(x + gt(x)) ~ fixed(x)`. `gt_field` is therefore the displacement a
//! perfect `u_mov` would recover.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{
    blur_data, invert_field, linear_index, voxel_count, voxels, warp_volume, Dims,
    DisplacementField, GaussianKernel, Stencil, Volume,
};
use crate::metrics::{det3, warp_labels, LabelMap, LandmarkSet};

const NOISE_STD: f64 = 0.01;
const MIN_JACOBIAN_DET: f64 = 0.1;
const MAX_HALVINGS: usize = 20;
const INVERSE_ITERATIONS: usize = 50;
/// Voxels owned by a blob must reach this fraction of its peak.
const OWNERSHIP_LEVEL: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelMap,
    pub moving_labels: LabelMap,
    pub fixed_landmarks: LandmarkSet,
    pub moving_landmarks: LandmarkSet,
    pub gt_field: DisplacementField,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

impl Blob {
    fn profile(&self, x: [usize; 3]) -> f64 {
        let r2: f64 = (0..3)
            .map(|a| {
                let d = x[a] as f64 - self.center[a];
                d * d
            })
            .sum();
        (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Smallest forward-difference Jacobian determinant of `x + u`.
pub fn min_forward_det(u: &DisplacementField) -> f64 {
    let dims = u.dims();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let inner = dims.map(|d| d.saturating_sub(1));
    let mut min = f64::INFINITY;
    for [i, j, k] in voxels(inner) {
        let idx = linear_index(dims, i, j, k);
        let mut m = crate::grid::IDENTITY3;
        for r in 0..3 {
            let comp = u.component(r);
            for c in 0..3 {
                m[3 * r + c] += comp[idx + strides[c]] - comp[idx];
            }
        }
        min = min.min(det3(&m));
    }
    min
}

fn random_smooth_field(rng: &mut ChaCha8Rng, dims: Dims) -> Result<DisplacementField> {
    let sigma = *dims.iter().min().unwrap() as f64 / 8.0;
    let kernel = GaussianKernel::new(sigma)?;
    // blur on a padded grid so the clamped border does not inflate the edges
    let pad = kernel.radius();
    let padded = dims.map(|d| d + 2 * pad);
    let np = voxel_count(padded);
    let mut data = Vec::with_capacity(3 * voxel_count(dims));
    for _ in 0..3 {
        let noise: Vec<f64> = (0..np).map(|_| StandardNormal.sample(rng)).collect();
        let smooth = blur_data(&noise, padded, &kernel);
        data.extend(voxels(dims).map(|[i, j, k]| smooth[linear_index(padded, i + pad, j + pad, k + pad)]));
    }
    DisplacementField::new(dims, [1.0; 3], data)
}

/// Generates a reproducible phantom pair.
pub fn make_phantom(seed: u64, dims: Dims, n_blobs: usize, max_disp_voxels: f64) -> Result<PhantomPair> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::invalid(format!("phantom dims must be >= 16 per axis, got {dims:?}")));
    }
    let min_dim = *dims.iter().min().unwrap() as f64;
    if !(max_disp_voxels >= 0.0) || max_disp_voxels >= min_dim / 8.0 {
        return Err(Error::invalid(format!(
            "max displacement must lie in [0, {}), got {max_disp_voxels}",
            min_dim / 8.0
        )));
    }
    if n_blobs == 0 {
        return Err(Error::invalid("need at least one blob"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: dims.map(|d| rng.random_range(0.25 * d as f64..0.75 * d as f64)),
            sigma: rng.random_range(min_dim / 12.0..min_dim / 7.0),
            amplitude: rng.random_range(0.6..1.0),
        })
        .collect();

    let mut intensity = Vec::with_capacity(voxel_count(dims));
    let mut owner = Vec::with_capacity(voxel_count(dims));
    for x in voxels(dims) {
        let mut sum = 0.0;
        let mut best = (0u32, 0.0);
        for (b, blob) in blobs.iter().enumerate() {
            let g = blob.profile(x);
            let v = blob.amplitude * g;
            sum += v;
            if g >= OWNERSHIP_LEVEL && v > best.1 {
                best = (b as u32 + 1, v);
            }
        }
        intensity.push(sum);
        owner.push(best.0);
    }
    for v in intensity.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += NOISE_STD * e;
    }
    let fixed = Volume::new(dims, [1.0; 3], intensity)?;
    let fixed_labels = LabelMap::new(dims, [1.0; 3], owner)?;
    let fixed_landmarks = LandmarkSet::new(
        (1..=n_blobs as u32).collect(),
        blobs.iter().map(|b| b.center).collect(),
    )?;

    let raw = random_smooth_field(&mut rng, dims)?;
    let gt_field = if max_disp_voxels == 0.0 {
        DisplacementField::zeros(dims)
    } else {
        let peak = raw.max_magnitude();
        let mut scale = if peak > 0.0 { max_disp_voxels / peak } else { 0.0 };
        let mut halvings = 0;
        loop {
            let candidate = DisplacementField::new(dims, [1.0; 3], raw.data().iter().map(|v| v * scale).collect())?;
            if min_forward_det(&candidate) > MIN_JACOBIAN_DET {
                break candidate;
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::invalid("could not find a fold-free ground-truth field"));
            }
            scale *= 0.5;
        }
    };

    let inverse = invert_field(&gt_field, INVERSE_ITERATIONS);
    let moving = warp_volume(&fixed, &inverse)?;
    let moving_labels = warp_labels(&fixed_labels, &inverse)?;
    let moving_points = fixed_landmarks
        .points
        .iter()
        .map(|&p| {
            let st = Stencil::new(dims, p);
            [0, 1, 2].map(|a| p[a] + st.value(gt_field.component(a)))
        })
        .collect();
    let moving_landmarks = LandmarkSet::new(fixed_landmarks.ids.clone(), moving_points)?;

    Ok(PhantomPair {
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        fixed_landmarks,
        moving_landmarks,
        gt_field,
    })
}
