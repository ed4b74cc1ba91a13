//! Two-objective gradient combination and the instance-optimization loop.
//!
//! In scalarization mode the update direction is `g_sim + lambda * g_reg`.
//! In gradient-projection mode the same sum is used unless the two terms
//! have a negative inner product; then one of them, chosen by a fair coin,
//! is replaced by its projection onto the normal space of the other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{voxel_count, DisplacementField, Volume};
use crate::objectives::{LnccParams, LossBreakdown, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Scalarization,
    GradientProjection,
}

/// Denominator used by [`project`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionVariant {
    /// Divide by the squared norm of the vector projected onto; the result
    /// is orthogonal to it.
    #[default]
    ProjectedOnto,
    /// Divide by the squared norm of the victim itself.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Victim {
    None,
    Sim,
    Reg,
}

impl Victim {
    pub fn as_str(self) -> &'static str {
        match self {
            Victim::None => "none",
            Victim::Sim => "sim",
            Victim::Reg => "reg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub mode: Mode,
    pub denominator_variant: ProjectionVariant,
    pub seed: u64,
    pub lncc: LnccParams,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            lambda: 1.5,
            steps: 100,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 1e-3,
            mode: Mode::GradientProjection,
            denominator_variant: ProjectionVariant::ProjectedOnto,
            seed: 0,
            lncc: LnccParams::default(),
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps < 1 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps_opt > 0.0) {
            return Err(Error::invalid("eps_opt must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// One optimization step, recorded before the parameter update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub sim_fwd: f64,
    pub sim_bwd: f64,
    pub reg: f64,
    pub total: f64,
    pub g_sim_norm: f64,
    pub g_reg_norm: f64,
    /// `<g_sim, lambda * g_reg>`
    pub inner_product: f64,
    pub cosine: f64,
    pub conflict: bool,
    pub victim: Victim,
    /// Norm of the parameter change applied in this step.
    pub update_norm: f64,
}

/// Diagnostics produced by [`combine_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combination {
    pub g_sim_norm: f64,
    /// Norm of the unweighted regularity gradient.
    pub g_reg_norm: f64,
    pub inner_product: f64,
    pub cosine: f64,
    pub conflict: bool,
    pub victim: Victim,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// True iff `<g1, g2> < 0`. A zero vector conflicts with nothing.
pub fn detect_conflict(g1: &[f64], g2: &[f64]) -> Result<bool> {
    check_len(g1, g2)?;
    if g1.iter().all(|&v| v == 0.0) || g2.iter().all(|&v| v == 0.0) {
        return Ok(false);
    }
    Ok(dot(g1, g2) < 0.0)
}

/// `victim - <victim, other> / d * other` with `d = |other|^2` for
/// [`ProjectionVariant::ProjectedOnto`] and `d = |victim|^2` for
/// [`ProjectionVariant::AsPrinted`].
pub fn project(victim: &[f64], other: &[f64], variant: ProjectionVariant) -> Result<Vec<f64>> {
    check_len(victim, other)?;
    let denom = match variant {
        ProjectionVariant::ProjectedOnto => dot(other, other),
        ProjectionVariant::AsPrinted => {
            if dot(other, other) == 0.0 {
                return Err(Error::ZeroDenominator);
            }
            dot(victim, victim)
        }
    };
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let coef = dot(victim, other) / denom;
    Ok(victim.iter().zip(other).map(|(v, o)| v - coef * o).collect())
}

/// Combines the two objective gradients with an explicit victim choice for
/// the conflicting case. `victim` is ignored when there is no conflict or in
/// scalarization mode.
pub fn combine_with_victim(
    g_sim: &[f64],
    g_reg: &[f64],
    lambda: f64,
    mode: Mode,
    variant: ProjectionVariant,
    victim: Victim,
) -> Result<(Vec<f64>, Combination)> {
    check_len(g_sim, g_reg)?;
    let gr: Vec<f64> = g_reg.iter().map(|v| lambda * v).collect();
    let inner = dot(g_sim, &gr);
    let (ns, nr) = (norm(g_sim), norm(g_reg));
    let nr_scaled = norm(&gr);
    let cosine = if ns > 0.0 && nr_scaled > 0.0 {
        inner / (ns * nr_scaled)
    } else {
        0.0
    };
    let conflict = detect_conflict(g_sim, &gr)?;
    let mut info = Combination {
        g_sim_norm: ns,
        g_reg_norm: nr,
        inner_product: inner,
        cosine,
        conflict,
        victim: Victim::None,
    };
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    if mode == Mode::Scalarization || !conflict {
        return Ok((sum(g_sim, &gr), info));
    }
    let combined = match victim {
        Victim::Sim => sum(&project(g_sim, &gr, variant)?, &gr),
        Victim::Reg => sum(g_sim, &project(&gr, g_sim, variant)?),
        Victim::None => return Err(Error::invalid("a conflicting pair needs a victim")),
    };
    info.victim = victim;
    Ok((combined, info))
}

/// Combines the gradients, drawing the projection victim from `rng` with
/// probability one half each. The rng is only advanced on conflicts in
/// gradient-projection mode.
pub fn combine_gradients<R: Rng + ?Sized>(
    g_sim: &[f64],
    g_reg: &[f64],
    lambda: f64,
    mode: Mode,
    variant: ProjectionVariant,
    rng: &mut R,
) -> Result<(Vec<f64>, Combination)> {
    check_len(g_sim, g_reg)?;
    let victim = if mode == Mode::GradientProjection {
        let gr: Vec<f64> = g_reg.iter().map(|v| lambda * v).collect();
        if detect_conflict(g_sim, &gr)? {
            draw_victim(rng)
        } else {
            Victim::None
        }
    } else {
        Victim::None
    };
    combine_with_victim(g_sim, g_reg, lambda, mode, variant, victim)
}

pub fn draw_victim<R: Rng + ?Sized>(rng: &mut R) -> Victim {
    if rng.random_bool(0.5) {
        Victim::Sim
    } else {
        Victim::Reg
    }
}

/// AMSGrad moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AmsGradState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub t: u64,
}

impl AmsGradState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            v_hat: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &GpConfig) -> Result<()> {
        check_len(params, grad)?;
        check_len(params, &self.m)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at optimizer step {}", self.t + 1)));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let keep = 1.0 - cfg.lr * cfg.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            self.v_hat[i] = self.v_hat[i].max(self.v[i]);
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v_hat[i] / bc2;
            let stepped = params[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_opt);
            // decoupled decay, applied after the adaptive step
            params[i] = stepped * keep;
        }
        Ok(())
    }
}

/// Free-function form of [`AmsGradState::step`].
pub fn amsgrad_step(state: &mut AmsGradState, params: &mut [f64], grad: &[f64], cfg: &GpConfig) -> Result<()> {
    state.step(params, grad, cfg)
}

/// Result of an instance-optimization run.
#[derive(Debug, Clone)]
pub struct IoOutcome {
    pub u_mov: DisplacementField,
    pub u_fix: DisplacementField,
    pub logs: Vec<StepLog>,
    /// Loss at the returned fields.
    pub final_loss: LossBreakdown,
}

/// A run that stopped because a loss or gradient became non-finite.
#[derive(Debug, Clone)]
pub struct IoAbort {
    pub step: usize,
    pub reason: String,
    pub logs: Vec<StepLog>,
}

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("numerical abort at step {}: {}", .0.step, .0.reason)]
    NonFinite(IoAbort),
}

/// Optimizes `(u_mov, u_fix)` for the pair `(image_a, image_b)` where
/// `image_a o phi_mov` should match `image_b` and `image_b o phi_fix` should
/// match `image_a`.
pub fn instance_optimize(
    image_a: &Volume,
    image_b: &Volume,
    init_mov: &DisplacementField,
    init_fix: &DisplacementField,
    cfg: &GpConfig,
) -> std::result::Result<IoOutcome, IoError> {
    cfg.validate()?;
    let objective = Objective::new(image_a, image_b, cfg.lncc)?;
    crate::grid::same_dims(image_a.dims(), init_mov.dims())?;
    crate::grid::same_dims(image_a.dims(), init_fix.dims())?;
    let dims = image_a.dims();
    let m = 3 * voxel_count(dims);
    let (spacing_mov, spacing_fix) = (init_mov.spacing(), init_fix.spacing());

    let mut params = Vec::with_capacity(2 * m);
    params.extend_from_slice(init_mov.data());
    params.extend_from_slice(init_fix.data());
    let split = |p: &[f64]| {
        (
            DisplacementField::from_parts(dims, spacing_mov, p[..m].to_vec()),
            DisplacementField::from_parts(dims, spacing_fix, p[m..].to_vec()),
        )
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AmsGradState::new(2 * m);
    let mut logs = Vec::with_capacity(cfg.steps);
    let abort = |step: usize, reason: String, logs: Vec<StepLog>| {
        IoError::NonFinite(IoAbort { step, reason, logs })
    };

    for step in 0..cfg.steps {
        let (u_mov, u_fix) = split(&params);
        let (loss, grads) = objective.evaluate(&u_mov, &u_fix, cfg.lambda)?;
        if !loss.total.is_finite() {
            return Err(abort(step, format!("loss is {}", loss.total), logs));
        }
        let (combined, info) = combine_gradients(
            &grads.g_sim,
            &grads.g_reg,
            cfg.lambda,
            cfg.mode,
            cfg.denominator_variant,
            &mut rng,
        )?;
        let before = params.clone();
        if let Err(e) = state.step(&mut params, &combined, cfg) {
            return Err(abort(step, e.to_string(), logs));
        }
        let update_norm = before
            .iter()
            .zip(&params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        logs.push(StepLog {
            step,
            sim_fwd: loss.sim_fwd,
            sim_bwd: loss.sim_bwd,
            reg: loss.reg,
            total: loss.total,
            g_sim_norm: info.g_sim_norm,
            g_reg_norm: info.g_reg_norm,
            inner_product: info.inner_product,
            cosine: info.cosine,
            conflict: info.conflict,
            victim: info.victim,
            update_norm,
        });
    }

    let (u_mov, u_fix) = split(&params);
    let (final_loss, _) = objective.evaluate(&u_mov, &u_fix, cfg.lambda)?;
    if !final_loss.total.is_finite() {
        return Err(abort(cfg.steps, format!("loss is {}", final_loss.total), logs));
    }
    Ok(IoOutcome {
        u_mov,
        u_fix,
        logs,
        final_loss,
    })
}

/// Fraction of logged steps with a gradient conflict.
pub fn conflict_rate(logs: &[StepLog]) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::invalid("conflict rate of an empty log"));
    }
    Ok(logs.iter().filter(|l| l.conflict).count() as f64 / logs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflict_examples() {
        assert!(!detect_conflict(&[1.0, 0.0], &[0.0, 1.0]).unwrap());
        assert!(detect_conflict(&[1.0, 0.0], &[-1.0, 0.0]).unwrap());
        assert!(!detect_conflict(&[0.0, 0.0], &[-1.0, 3.0]).unwrap());
        assert!(!detect_conflict(&[-1.0, 3.0], &[0.0, 0.0]).unwrap());
        assert!(detect_conflict(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let v = [1.0, 0.0];
        assert_eq!(project(&v, &[0.0, 2.0], ProjectionVariant::ProjectedOnto).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            project(&[-1.0, 2.0], &[1.0, -2.0], ProjectionVariant::ProjectedOnto).unwrap(),
            vec![0.0, 0.0]
        );
        let p = project(&v, &[-1.0, 1.0], ProjectionVariant::ProjectedOnto).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(dot(&p, &[-1.0, 1.0]), 0.0);
        assert!(matches!(
            project(&v, &[0.0, 0.0], ProjectionVariant::ProjectedOnto),
            Err(Error::ZeroDenominator)
        ));
        assert!(matches!(
            project(&[0.0, 0.0], &v, ProjectionVariant::AsPrinted),
            Err(Error::ZeroDenominator)
        ));
    }

    #[test]
    fn as_printed_divides_by_victim_norm() {
        // <v, o> = -2, |v|^2 = 4 -> v + 0.5 o
        let p = project(&[2.0, 0.0], &[-1.0, 1.0], ProjectionVariant::AsPrinted).unwrap();
        assert_eq!(p, vec![1.5, 0.5]);
    }

    #[test]
    fn combine_examples() {
        let (g, info) = combine_with_victim(
            &[1.0, 0.0],
            &[0.0, 1.0],
            1.0,
            Mode::GradientProjection,
            ProjectionVariant::ProjectedOnto,
            Victim::Sim,
        )
        .unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
        assert!(!info.conflict);
        assert_eq!(info.victim, Victim::None);

        let (g, info) = combine_with_victim(
            &[1.0, 0.0],
            &[-1.0, 1.0],
            1.0,
            Mode::GradientProjection,
            ProjectionVariant::ProjectedOnto,
            Victim::Sim,
        )
        .unwrap();
        assert_eq!(g, vec![-0.5, 1.5]);
        assert!(info.conflict);
        assert_eq!(info.inner_product, -1.0);

        let (g, _) = combine_with_victim(
            &[1.0, 0.0],
            &[-1.0, 1.0],
            1.0,
            Mode::GradientProjection,
            ProjectionVariant::ProjectedOnto,
            Victim::Reg,
        )
        .unwrap();
        assert_eq!(g, vec![1.0, 1.0]);

        let (g, info) = combine_with_victim(
            &[1.0, 0.0],
            &[-1.0, 1.0],
            1.0,
            Mode::Scalarization,
            ProjectionVariant::ProjectedOnto,
            Victim::Reg,
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 1.0]);
        assert!(info.conflict);
        assert_eq!(info.victim, Victim::None);
    }

    #[test]
    fn lambda_scales_regularizer_before_projection() {
        // lambda = 2: lambda * g_reg = (-1, 1)
        let (g, info) = combine_with_victim(
            &[1.0, 0.0],
            &[-0.5, 0.5],
            2.0,
            Mode::GradientProjection,
            ProjectionVariant::ProjectedOnto,
            Victim::Sim,
        )
        .unwrap();
        assert_eq!(g, vec![-0.5, 1.5]);
        assert_eq!(info.inner_product, -1.0);
    }

    #[test]
    fn victim_draws_are_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let sims = (0..n).filter(|_| draw_victim(&mut rng) == Victim::Sim).count();
        let f = sims as f64 / n as f64;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }

    #[test]
    fn amsgrad_zero_gradient_without_decay_is_a_no_op() {
        let cfg = GpConfig {
            weight_decay: 0.0,
            ..GpConfig::default()
        };
        let mut st = AmsGradState::new(3);
        let mut p = vec![0.5, -1.0, 2.0];
        st.step(&mut p, &[0.0; 3], &cfg).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(st.t, 1);
        assert!(st.step(&mut p, &[f64::NAN, 0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn conflict_rate_examples() {
        let mk = |c: bool| StepLog {
            step: 0,
            sim_fwd: 0.0,
            sim_bwd: 0.0,
            reg: 0.0,
            total: 0.0,
            g_sim_norm: 0.0,
            g_reg_norm: 0.0,
            inner_product: 0.0,
            cosine: 0.0,
            conflict: c,
            victim: if c { Victim::Sim } else { Victim::None },
            update_norm: 0.0,
        };
        assert_eq!(conflict_rate(&vec![mk(true); 4]).unwrap(), 1.0);
        assert_eq!(conflict_rate(&vec![mk(false); 4]).unwrap(), 0.0);
        let mixed: Vec<_> = (0..10).map(|i| mk(i < 3)).collect();
        assert_eq!(conflict_rate(&mixed).unwrap(), 0.3);
        assert!(conflict_rate(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GpConfig::default().validate().is_ok());
        assert!(GpConfig { steps: 0, ..GpConfig::default() }.validate().is_err());
        assert!(GpConfig { lr: 0.0, ..GpConfig::default() }.validate().is_err());
        assert!(GpConfig { lambda: -1.0, ..GpConfig::default() }.validate().is_err());
        assert!(GpConfig { beta2: 1.0, ..GpConfig::default() }.validate().is_err());
    }
}
