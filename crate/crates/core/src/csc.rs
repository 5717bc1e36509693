//! Convolutional sparse coding baseline: the l1-regularised least-squares
//! objective over an EPI dictionary, minimised by convolutional ISTA.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::conv::{
    dict_adjoint, dict_forward, estimate_lipschitz, global_max_pool, shrink, ChannelStack, Matrix2,
};
use crate::error::{Error, Result};
use crate::format::{write_f32s, Header};

/// Step size for the gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `0.99 / L` with `L` from power iteration.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub lambda: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub step: StepSize,
    pub power_tol: f64,
    pub power_max_iters: usize,
    pub power_seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            max_iters: 200,
            rel_tol: 1e-6,
            step: StepSize::Auto,
            power_tol: 1e-6,
            power_max_iters: 100,
            power_seed: 0,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if let StepSize::Fixed(g) = self.step {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("step size must be > 0, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    /// Objective at `z0 = 0` followed by the objective after every step.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gamma: f64,
    /// `None` when a fixed step was supplied.
    pub lipschitz: Option<f64>,
}

fn check_shapes(x: &Matrix2, z: &ChannelStack, d: &ChannelStack) -> Result<()> {
    if z.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "codes {:?} vs EPI {:?}",
            z.shape(),
            x.shape()
        )));
    }
    if z.len() != d.len() {
        return Err(Error::Dimension(format!(
            "{} code channels vs {} atoms",
            z.len(),
            d.len()
        )));
    }
    Ok(())
}

fn objective_from_synthesis(x: &Matrix2, synth: &Matrix2, z: &ChannelStack, lambda: f64) -> f64 {
    let fit: f64 = x
        .data()
        .iter()
        .zip(synth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    0.5 * fit + lambda * z.l1_norm()
}

/// `0.5 * ||x - sum_m d_m * z_m||^2 + lambda * sum_m ||z_m||_1`
pub fn objective(x: &Matrix2, d: &ChannelStack, z: &ChannelStack, lambda: f64) -> Result<f64> {
    check_shapes(x, z, d)?;
    let synth = dict_forward(z, d)?;
    Ok(objective_from_synthesis(x, &synth, z, lambda))
}

fn step_from_synthesis(
    z: &ChannelStack,
    synth: &Matrix2,
    x: &Matrix2,
    d: &ChannelStack,
    gamma: f64,
    lambda: f64,
) -> Result<ChannelStack> {
    let mut residual = synth.clone();
    residual.axpy(-1.0, x);
    let grad = dict_adjoint(&residual, d)?;
    let mut next = z.clone();
    next.axpy(-gamma, &grad);
    let t = gamma * lambda;
    for c in next.iter_mut() {
        c.data_mut().iter_mut().for_each(|v| *v = shrink(*v, t));
    }
    Ok(next)
}

/// One proximal-gradient step `T_{gamma*lambda}(z - gamma * D^T(Dz - x))`.
pub fn ista_step(
    z: &ChannelStack,
    x: &Matrix2,
    d: &ChannelStack,
    gamma: f64,
    lambda: f64,
) -> Result<ChannelStack> {
    check_shapes(x, z, d)?;
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("step size must be > 0, got {gamma}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidThreshold(lambda));
    }
    let synth = dict_forward(z, d)?;
    step_from_synthesis(z, &synth, x, d, gamma, lambda)
}

/// Runs ISTA from zero until the relative objective decrease drops below
/// `rel_tol` or `max_iters` steps have been taken.
pub fn solve(
    x: &Matrix2,
    d: &ChannelStack,
    opts: &SolverOptions,
) -> Result<(ChannelStack, SolveTrace)> {
    opts.validate()?;
    let (gamma, lipschitz) = match opts.step {
        StepSize::Fixed(g) => (g, None),
        StepSize::Auto => {
            let est = estimate_lipschitz(
                d,
                x.shape(),
                opts.power_tol,
                opts.power_max_iters,
                opts.power_seed,
            )?;
            if est.degenerate || est.value <= 0.0 {
                return Err(Error::Degenerate(
                    "dictionary Gram operator is zero; no step size exists".into(),
                ));
            }
            (0.99 / est.value, Some(est.value))
        }
    };
    let mut z = ChannelStack::zeros(d.len(), x.rows(), x.cols());
    check_shapes(x, &z, d)?;
    let mut synth = dict_forward(&z, d)?;
    let mut prev = objective_from_synthesis(x, &synth, &z, opts.lambda);
    let mut trace = SolveTrace {
        objectives: vec![prev],
        iterations: 0,
        converged: false,
        gamma,
        lipschitz,
    };
    for it in 1..=opts.max_iters {
        z = step_from_synthesis(&z, &synth, x, d, gamma, opts.lambda)?;
        synth = dict_forward(&z, d)?;
        let cur = objective_from_synthesis(x, &synth, &z, opts.lambda);
        if !cur.is_finite() {
            return Err(Error::Degenerate(format!("objective diverged at iteration {it}")));
        }
        trace.objectives.push(cur);
        trace.iterations = it;
        let decrease = prev - cur;
        let scale = prev.abs();
        let rel = if scale > 0.0 { decrease / scale } else { 0.0 };
        prev = cur;
        if rel < opts.rel_tol {
            trace.converged = true;
            break;
        }
    }
    Ok((z, trace))
}

/// Per-atom maximum of the codes: the depth evidence vector.
pub fn code_evidence(z: &ChannelStack) -> Vec<f64> {
    global_max_pool(z).values
}

const CODES_MAGIC: &str = "EPICZ1\n";

/// Writes codes as `M` binary32 row-major channels after a key=value header.
pub fn save_codes(path: &Path, z: &ChannelStack, lambda: f64, trace: &SolveTrace) -> Result<()> {
    let (rows, cols) = z.shape();
    let mut w = BufWriter::new(File::create(path)?);
    let mut h = Header::new();
    h.push("version", 1)
        .push("m", z.len())
        .push("theta", rows)
        .push("n", cols)
        .push("lambda", lambda)
        .push("gamma", trace.gamma)
        .push("iterations", trace.iterations)
        .push("converged", trace.converged);
    h.write_to(&mut w, CODES_MAGIC)?;
    for c in z.iter() {
        write_f32s(&mut w, c.data())?;
    }
    w.flush()?;
    Ok(())
}
