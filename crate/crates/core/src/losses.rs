//! Adversarial and reconstruction objectives.

use radfield_autodiff::{Graph, Real, Var};

use crate::error::{Error, Result};

/// `f(u) = max(0, 1 + u)`.
pub fn hinge(u: f32) -> f32 {
    (1.0 + u).max(0.0)
}

/// `mean f(fake) + mean f(−real)`.
pub fn hinge_d(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let f = g.add_scalar(fake, 1.0)?;
    let f = g.relu(f)?;
    let f = g.mean(f)?;
    let r = g.neg(real)?;
    let r = g.add_scalar(r, 1.0)?;
    let r = g.relu(r)?;
    let r = g.mean(r)?;
    Ok(g.add(f, r)?)
}

/// `−mean(fake)`.
pub fn hinge_g(g: &mut Graph, fake: Var) -> Result<Var> {
    let m = g.mean(fake)?;
    Ok(g.neg(m)?)
}

fn check_heads(count: usize, n: usize) -> Result<()> {
    if n == 0 || count != n {
        return Err(Error::Invalid(format!("expected {n} per-head losses, got {count}")));
    }
    Ok(())
}

/// `L₀ + λ/(n−1)·Σ_{k≥1} L_k`; a single head reduces to `L₀`.
pub fn total_loss(g: &mut Graph, losses: &[Var], lambda: f32, n: usize) -> Result<Var> {
    check_heads(losses.len(), n)?;
    if n == 1 {
        return Ok(losses[0]);
    }
    let mut aug = losses[1];
    for l in &losses[2..] {
        aug = g.add(aug, *l)?;
    }
    let aug = g.scale(aug, lambda as Real / (n - 1) as Real)?;
    Ok(g.add(losses[0], aug)?)
}

pub fn total_loss_values(losses: &[f32], lambda: f32, n: usize) -> Result<f32> {
    check_heads(losses.len(), n)?;
    if n == 1 {
        return Ok(losses[0]);
    }
    Ok(losses[0] + lambda / (n - 1) as f32 * losses[1..].iter().sum::<f32>())
}

pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Invalid(format!("mse shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    Ok(g.mean(d)?)
}

/// Gaussian negative log-likelihood without constants: `mean(½z²)`.
pub fn latent_nll(g: &mut Graph, z: Var) -> Result<Var> {
    let s = g.square(z)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, 0.5)?)
}
