//! Symmetric LNCC similarity and the gradient inverse-consistency
//! regularizer, with exact gradients with respect to both displacement
//! fields.
//!
//! The similarity loss is `1 - mean(LNCC)`. The regularizer is the mean over
//! voxels of `|| J(phi_mov o phi_fix) - I ||_F^2`, where `J` uses the central
//! difference scheme of [`crate::grid::jacobian_field`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    blur_adjoint_data, blur_data, compose_fields, diff_axis, diff_axis_adjoint_add, displaced_point,
    jacobian_field, same_dims, voxel_count, voxels, DisplacementField, GaussianKernel, Stencil,
    Volume, IDENTITY3,
};

pub const DEFAULT_SIGMA: f64 = 5.0;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Window settings for LNCC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LnccParams {
    pub sigma: f64,
    pub eps: f64,
}

impl Default for LnccParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim_fwd: f64,
    pub sim_bwd: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(sim_fwd: f64, sim_bwd: f64, reg: f64, lambda: f64) -> Self {
        Self {
            sim_fwd,
            sim_bwd,
            reg,
            total: sim_fwd + sim_bwd + lambda * reg,
            lambda,
        }
    }
}

/// Gradients of the similarity and (unweighted) regularity terms over the
/// concatenated parameter vector `[u_mov, u_fix]`, each component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub g_sim: Vec<f64>,
    pub g_reg: Vec<f64>,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Windowed moments of an image pair, kept for the backward pass.
struct LnccForward {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

impl LnccForward {
    fn compute(a: &[f64], b: &[f64], dims: [usize; 3], kernel: &GaussianKernel) -> Self {
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let mu_a = blur_data(a, dims, kernel);
        let mu_b = blur_data(b, dims, kernel);
        let s_aa = blur_data(&aa, dims, kernel);
        let s_bb = blur_data(&bb, dims, kernel);
        let s_ab = blur_data(&ab, dims, kernel);
        let n = a.len();
        let mut var_a = vec![0.0; n];
        let mut var_b = vec![0.0; n];
        let mut cov = vec![0.0; n];
        for i in 0..n {
            var_a[i] = s_aa[i] - mu_a[i] * mu_a[i];
            var_b[i] = s_bb[i] - mu_b[i] * mu_b[i];
            cov[i] = s_ab[i] - mu_a[i] * mu_b[i];
        }
        Self {
            mu_a,
            mu_b,
            var_a,
            var_b,
            cov,
        }
    }

    #[inline]
    fn denom(&self, i: usize, eps: f64) -> f64 {
        ((self.var_a[i] + eps) * (self.var_b[i] + eps)).sqrt()
    }

    fn map(&self, eps: f64) -> Vec<f64> {
        (0..self.cov.len())
            .map(|i| (self.cov[i] / self.denom(i, eps)).clamp(-1.0, 1.0))
            .collect()
    }

    /// Gradient of `1 - mean(lncc)` with respect to the first image.
    /// Clipping is treated as the identity.
    fn loss_grad_a(&self, a: &[f64], b: &[f64], dims: [usize; 3], kernel: &GaussianKernel, eps: f64) -> Vec<f64> {
        let n = a.len();
        let dl = -1.0 / n as f64;
        let mut g_mu = vec![0.0; n];
        let mut g_saa = vec![0.0; n];
        let mut g_sab = vec![0.0; n];
        for i in 0..n {
            let den = self.denom(i, eps);
            let gs = dl / den;
            let gv = -dl * self.cov[i] / (2.0 * (self.var_a[i] + eps) * den);
            g_sab[i] = gs;
            g_saa[i] = gv;
            g_mu[i] = -self.mu_b[i] * gs - 2.0 * self.mu_a[i] * gv;
        }
        let t_mu = blur_adjoint_data(&g_mu, dims, kernel);
        let t_saa = blur_adjoint_data(&g_saa, dims, kernel);
        let t_sab = blur_adjoint_data(&g_sab, dims, kernel);
        (0..n)
            .map(|i| t_mu[i] + 2.0 * a[i] * t_saa[i] + b[i] * t_sab[i])
            .collect()
    }
}

/// Per-voxel LNCC from Gaussian-windowed moments, clipped to `[-1, 1]`.
pub fn lncc_map(a: &Volume, b: &Volume, sigma: f64, eps: f64) -> Result<Volume> {
    same_dims(a.dims(), b.dims())?;
    check_eps(eps)?;
    let kernel = GaussianKernel::new(sigma)?;
    let fwd = LnccForward::compute(a.data(), b.data(), a.dims(), &kernel);
    Ok(Volume::from_parts(a.dims(), a.spacing(), fwd.map(eps)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `1 - mean(lncc_map(a, b))`, in `[0, 2]`.
pub fn sim_loss(a: &Volume, b: &Volume, sigma: f64, eps: f64) -> Result<f64> {
    Ok(1.0 - mean(lncc_map(a, b, sigma, eps)?.data()))
}

/// Mean squared Frobenius distance of `J(phi_mov o phi_fix)` from identity.
pub fn gradicon_reg(u_mov: &DisplacementField, u_fix: &DisplacementField) -> Result<f64> {
    let comp = compose_fields(u_mov, u_fix)?;
    let jac = jacobian_field(&comp)?;
    let total: f64 = jac
        .matrices()
        .iter()
        .map(|m| m.iter().zip(IDENTITY3).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / jac.matrices().len() as f64)
}

fn check_pair(
    image_a: &Volume,
    image_b: &Volume,
    u_mov: &DisplacementField,
    u_fix: &DisplacementField,
) -> Result<()> {
    same_dims(image_a.dims(), image_b.dims())?;
    same_dims(image_a.dims(), u_mov.dims())?;
    same_dims(image_a.dims(), u_fix.dims())?;
    Ok(())
}

/// All three loss terms, each evaluated through the public single-term
/// functions.
pub fn total_loss(
    image_a: &Volume,
    image_b: &Volume,
    u_mov: &DisplacementField,
    u_fix: &DisplacementField,
    lambda: f64,
    lncc: LnccParams,
) -> Result<LossBreakdown> {
    check_pair(image_a, image_b, u_mov, u_fix)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let warped_a = crate::grid::warp_volume(image_a, u_mov)?;
    let warped_b = crate::grid::warp_volume(image_b, u_fix)?;
    let sim_fwd = sim_loss(&warped_a, image_b, lncc.sigma, lncc.eps)?;
    let sim_bwd = sim_loss(&warped_b, image_a, lncc.sigma, lncc.eps)?;
    let reg = gradicon_reg(u_mov, u_fix)?;
    Ok(LossBreakdown::new(sim_fwd, sim_bwd, reg, lambda))
}

pub fn loss_gradients(
    image_a: &Volume,
    image_b: &Volume,
    u_mov: &DisplacementField,
    u_fix: &DisplacementField,
    lncc: LnccParams,
) -> Result<GradientPair> {
    Ok(Objective::new(image_a, image_b, lncc)?.evaluate(u_mov, u_fix, 0.0)?.1)
}

/// A fixed image pair with a prepared LNCC window; evaluates losses and
/// gradients in one pass for the optimizer.
pub struct Objective<'a> {
    image_a: &'a Volume,
    image_b: &'a Volume,
    kernel: GaussianKernel,
    eps: f64,
}

impl<'a> Objective<'a> {
    pub fn new(image_a: &'a Volume, image_b: &'a Volume, lncc: LnccParams) -> Result<Self> {
        same_dims(image_a.dims(), image_b.dims())?;
        check_eps(lncc.eps)?;
        if image_a.dims().iter().any(|&d| d < 3) {
            return Err(Error::invalid(format!(
                "images need at least 3 voxels per axis, got {:?}",
                image_a.dims()
            )));
        }
        Ok(Self {
            image_a,
            image_b,
            kernel: GaussianKernel::new(lncc.sigma)?,
            eps: lncc.eps,
        })
    }

    /// Similarity term `1 - mean lncc(moving o phi, target)` and its gradient
    /// with respect to `u`, written into `grad`.
    fn sim_term(&self, moving: &Volume, target: &Volume, u: &DisplacementField, grad: &mut [f64]) -> f64 {
        let dims = moving.dims();
        let n = voxel_count(dims);
        let stencils: Vec<Stencil> = voxels(dims)
            .enumerate()
            .map(|(idx, x)| Stencil::new(dims, displaced_point(x, u.at(idx))))
            .collect();
        let warped: Vec<f64> = stencils.iter().map(|s| s.value(moving.data())).collect();
        let fwd = LnccForward::compute(&warped, target.data(), dims, &self.kernel);
        let loss = 1.0 - mean(&fwd.map(self.eps));
        let g_img = fwd.loss_grad_a(&warped, target.data(), dims, &self.kernel, self.eps);
        for (idx, st) in stencils.iter().enumerate() {
            let dp = st.gradient(moving.data());
            for c in 0..3 {
                grad[c * n + idx] = g_img[idx] * dp[c];
            }
        }
        loss
    }

    /// Regularizer value and its gradient with respect to `u_mov` and `u_fix`.
    fn reg_term(&self, u_mov: &DisplacementField, u_fix: &DisplacementField, g_mov: &mut [f64], g_fix: &mut [f64]) -> f64 {
        let dims = u_mov.dims();
        let n = voxel_count(dims);
        let stencils: Vec<Stencil> = voxels(dims)
            .enumerate()
            .map(|(idx, x)| Stencil::new(dims, displaced_point(x, u_fix.at(idx))))
            .collect();
        // composed displacement and its gradient
        let mut comp = vec![0.0; 3 * n];
        for (idx, st) in stencils.iter().enumerate() {
            for c in 0..3 {
                comp[c * n + idx] = u_fix.data()[c * n + idx] + st.value(u_mov.component(c));
            }
        }
        let mut sum_sq = 0.0;
        let mut g_comp = vec![0.0; 3 * n];
        let scale = 2.0 / n as f64;
        for r in 0..3 {
            let comp_r = &comp[r * n..(r + 1) * n];
            let g_r = &mut g_comp[r * n..(r + 1) * n];
            for axis in 0..3 {
                let mut d = diff_axis(comp_r, dims, axis);
                sum_sq += d.iter().map(|v| v * v).sum::<f64>();
                d.iter_mut().for_each(|v| *v *= scale);
                diff_axis_adjoint_add(&d, dims, axis, g_r);
            }
        }
        g_mov.iter_mut().for_each(|v| *v = 0.0);
        for (idx, st) in stencils.iter().enumerate() {
            let mut g_pt = [0.0; 3];
            for c in 0..3 {
                let gc = g_comp[c * n + idx];
                st.scatter(&mut g_mov[c * n..(c + 1) * n], gc);
                let dp = st.gradient(u_mov.component(c));
                for k in 0..3 {
                    g_pt[k] += gc * dp[k];
                }
            }
            for k in 0..3 {
                g_fix[k * n + idx] = g_comp[k * n + idx] + g_pt[k];
            }
        }
        sum_sq / n as f64
    }

    /// Loss breakdown (with `lambda` applied to `total`) and both gradients.
    pub fn evaluate(
        &self,
        u_mov: &DisplacementField,
        u_fix: &DisplacementField,
        lambda: f64,
    ) -> Result<(LossBreakdown, GradientPair)> {
        same_dims(self.image_a.dims(), u_mov.dims())?;
        same_dims(self.image_a.dims(), u_fix.dims())?;
        let m = 3 * u_mov.voxel_count();
        let mut g_sim = vec![0.0; 2 * m];
        let mut g_reg = vec![0.0; 2 * m];
        let (sim_mov, sim_fix) = g_sim.split_at_mut(m);
        let sim_fwd = self.sim_term(self.image_a, self.image_b, u_mov, sim_mov);
        let sim_bwd = self.sim_term(self.image_b, self.image_a, u_fix, sim_fix);
        let (reg_mov, reg_fix) = g_reg.split_at_mut(m);
        let reg = self.reg_term(u_mov, u_fix, reg_mov, reg_fix);
        Ok((LossBreakdown::new(sim_fwd, sim_bwd, reg, lambda), GradientPair { g_sim, g_reg }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pattern(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, |[i, j, k]| {
            let (x, y, z) = (i as f64, j as f64, k as f64);
            // large amplitude so local variance dwarfs eps
            50.0 * ((0.7 * x).sin() + (0.5 * y + 0.3 * z).cos() + 0.1 * x * z)
        })
    }

    fn interior(dims: [usize; 3], margin: usize) -> impl Iterator<Item = usize> {
        voxels(dims).enumerate().filter_map(move |(idx, x)| {
            (0..3)
                .all(|a| x[a] >= margin && x[a] + margin < dims[a])
                .then_some(idx)
        })
    }

    #[test]
    fn self_correlation_is_one() {
        let a = pattern([12, 12, 12]);
        let m = lncc_map(&a, &a, 1.5, 1e-5).unwrap();
        for i in interior([12, 12, 12], 2) {
            assert!(m.data()[i] >= 1.0 - 1e-6);
        }
        assert!(sim_loss(&a, &a, 1.5, 1e-5).unwrap() <= 1e-3);
    }

    #[test]
    fn anti_correlation_is_minus_one() {
        let a = pattern([12, 12, 12]);
        let neg = Volume::from_fn([12, 12, 12], |[i, j, k]| -a.get(i, j, k));
        let m = lncc_map(&a, &neg, 1.5, 1e-5).unwrap();
        for i in interior([12, 12, 12], 2) {
            assert!(m.data()[i] <= -1.0 + 1e-6);
        }
        assert!(sim_loss(&a, &neg, 1.5, 1e-5).unwrap() >= 2.0 - 1e-3);
    }

    #[test]
    fn lncc_rejects_bad_inputs() {
        let a = pattern([6, 6, 6]);
        assert!(lncc_map(&a, &pattern([6, 6, 7]), 1.0, 1e-5).is_err());
        assert!(lncc_map(&a, &a, 0.0, 1e-5).is_err());
        assert!(lncc_map(&a, &a, 1.0, 0.0).is_err());
    }

    #[test]
    fn reg_of_identity_and_inverse_translation() {
        let dims = [8, 8, 8];
        let z = DisplacementField::zeros(dims);
        assert_eq!(gradicon_reg(&z, &z).unwrap(), 0.0);
        let c = 0.25;
        let a = DisplacementField::constant(dims, [c, 0.0, 0.0]);
        let b = DisplacementField::constant(dims, [-c, 0.0, 0.0]);
        assert!(gradicon_reg(&a, &b).unwrap() <= 1e-12);
    }

    #[test]
    fn reg_of_linear_field_matches_frobenius_norm() {
        let a = [[0.02, -0.01, 0.03], [0.0, 0.01, -0.02], [0.04, 0.0, 0.01]];
        let fro: f64 = a.iter().flatten().map(|v| v * v).sum();
        let dims = [7, 7, 7];
        let u = DisplacementField::from_fn(dims, |x| {
            let p = x.map(|v| v as f64);
            [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2])
        });
        let z = DisplacementField::zeros(dims);
        // exact linear field differences exactly everywhere, including borders
        let r = gradicon_reg(&u, &z).unwrap();
        assert!((r - fro).abs() < 1e-12, "{r} vs {fro}");
    }

    #[test]
    fn lambda_zero_and_termwise_total() {
        let dims = [8, 8, 8];
        let a = pattern(dims);
        let b = Volume::from_fn(dims, |[i, j, k]| a.get(i, j, k) * 0.5 + ((i + k) % 3) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DisplacementField::from_fn(dims, |_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5)));
        let v = DisplacementField::from_fn(dims, |_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5)));
        let p = LnccParams { sigma: 1.5, eps: 1e-5 };
        let lb = total_loss(&a, &b, &u, &v, 0.0, p).unwrap();
        assert_eq!(lb.total, lb.sim_fwd + lb.sim_bwd);
        let lb = total_loss(&a, &b, &u, &v, 1.5, p).unwrap();
        assert!((lb.total - (lb.sim_fwd + lb.sim_bwd + 1.5 * lb.reg)).abs() <= 1e-12);
        // the one-pass evaluator agrees with the term-wise path
        let (fast, _) = Objective::new(&a, &b, p).unwrap().evaluate(&u, &v, 1.5).unwrap();
        assert!((fast.sim_fwd - lb.sim_fwd).abs() < 1e-13);
        assert!((fast.sim_bwd - lb.sim_bwd).abs() < 1e-13);
        assert!((fast.reg - lb.reg).abs() < 1e-13);
        assert!(total_loss(&a, &b, &u, &v, -1.0, p).is_err());
    }

    #[test]
    fn aligned_identity_has_tiny_loss_and_zero_reg_gradient() {
        let dims = [10, 10, 10];
        let a = pattern(dims);
        let z = DisplacementField::zeros(dims);
        let p = LnccParams { sigma: 2.0, eps: 1e-5 };
        let lb = total_loss(&a, &a, &z, &z, 1.5, p).unwrap();
        assert!(lb.total <= 2e-3);
        let g = loss_gradients(&a, &a, &z, &z, p).unwrap();
        assert!(g.g_reg.iter().all(|&v| v == 0.0));
        assert_eq!(g.g_sim.len(), 2 * 3 * 1000);
    }
}
