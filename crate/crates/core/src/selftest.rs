//! Built-in numerical checks: operator adjointness, network gradients
//! against finite differences, and ISTA monotone descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{dict_adjoint, dict_forward, shrink, ChannelStack, Matrix2};
use crate::csc::{solve, SolverOptions, StepSize};
use crate::error::Result;
use crate::net::{backward, bce_loss, forward, init_params, Architecture, CistaNetParams};
use crate::synth::SoftLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error for the suite's own metric.
    pub worst: f64,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} cases, worst {:.3e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", self.detail)
            }
        )
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix2 {
    Matrix2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_stack(rng: &mut ChaCha8Rng, m: usize, r: usize, c: usize) -> ChannelStack {
    ChannelStack::new((0..m).map(|_| rand_matrix(rng, r, c)).collect()).expect("m >= 1")
}

fn odd_upto(rng: &mut ChaCha8Rng, max: usize) -> usize {
    2 * rng.random_range(0..=(max - 1) / 2) + 1
}

/// A random problem: EPI-shaped `x`, dictionary `d`.
pub(crate) fn random_problem(rng: &mut ChaCha8Rng, max_rows: usize, max_cols: usize, max_m: usize) -> (Matrix2, ChannelStack) {
    let rows = rng.random_range(1..=max_rows);
    let cols = rng.random_range(1..=max_cols);
    let m = rng.random_range(1..=max_m);
    let kr = odd_upto(rng, rows);
    let kc = odd_upto(rng, cols);
    (rand_matrix(rng, rows, cols), rand_stack(rng, m, kr, kc))
}

/// `<D z, y>` against `<z, D^T y>` on random triples.
pub fn adjoint_suite(cases: usize, seed: u64, tol: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (y, d) = random_problem(&mut rng, 12, 24, 6);
        let z = rand_stack(&mut rng, d.len(), y.rows(), y.cols());
        let lhs = dict_forward(&z, &d)?.dot(&y);
        let rhs = z.dot(&dict_adjoint(&y, &d)?);
        let scale = lhs.abs().max(rhs.abs());
        let err = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
        worst = worst.max(err);
    }
    Ok(SuiteResult {
        name: "adjoint",
        passed: worst <= tol,
        cases,
        worst,
        detail: format!("tolerance {tol:e}"),
    })
}

fn loss_of(x: &Matrix2, p: &CistaNetParams, label: &SoftLabel) -> Result<f64> {
    let (out, _) = forward(x, p)?;
    bce_loss(&out.logits, label)
}

/// Per-tensor comparison of the analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub len: usize,
    pub rel_error: f64,
}

/// Gradient check on the small `(M=4, Theta=5, N=9, kernels 3,5)` net.
/// Returns per-tensor relative errors `||a - fd|| / max(||a||, ||fd||, 1e-8)`
/// and whether the head-bias gradient equals `(p - y) / M` exactly.
pub fn gradient_check(seed: u64, h: f64) -> Result<(Vec<TensorCheck>, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::new(4, 5, 9, vec![3, 5]);
    let mut p = init_params(&arch, (-1.5, 1.5), rng.random(), None)?;
    for l in &mut p.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(0.0..0.1));
    }
    p.head.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let x = Matrix2::from_fn(5, 9, |_, _| rng.random_range(0.0..1.0));
    let label = SoftLabel {
        values: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
    };

    let (out, cache) = forward(&x, &p)?;
    let g = backward(&p, &cache, &label)?;
    let m = arch.m as f64;
    let head_exact = g
        .head
        .bias
        .iter()
        .zip(out.probs.iter().zip(&label.values))
        .all(|(gb, (pj, yj))| *gb == (pj - yj) / m);

    let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
    let mut checks = Vec::with_capacity(analytic.len());
    for (t, a) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; a.len()];
        for (i, f) in fd.iter_mut().enumerate() {
            let mut plus = p.clone();
            plus.slices_mut()[t][i] += h;
            let mut minus = p.clone();
            minus.slices_mut()[t][i] -= h;
            *f = (loss_of(&x, &plus, &label)? - loss_of(&x, &minus, &label)?) / (2.0 * h);
        }
        let diff: f64 = a.iter().zip(&fd).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        checks.push(TensorCheck {
            index: t,
            len: a.len(),
            rel_error: diff / na.max(nf).max(1e-8),
        });
    }
    Ok((checks, head_exact))
}

pub fn gradient_suite(seeds: usize, tol: f64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut head_ok = true;
    let mut tensors = 0;
    for seed in 0..seeds as u64 {
        let (checks, exact) = gradient_check(seed, 1e-5)?;
        head_ok &= exact;
        tensors += checks.len();
        for c in checks {
            worst = worst.max(c.rel_error);
        }
    }
    Ok(SuiteResult {
        name: "gradient",
        passed: worst <= tol && head_ok,
        cases: tensors,
        worst,
        detail: format!(
            "tolerance {tol:e}; head bias closed form {}",
            if head_ok { "exact" } else { "MISMATCH" }
        ),
    })
}

/// Largest per-iteration objective increase over random ISTA runs, relative
/// to `max(1, |F_k|)`.
pub fn ista_worst_increase(cases: usize, seed: u64, iters: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cases {
        let (x, d) = random_problem(&mut rng, 9, 20, 5);
        let opts = SolverOptions {
            lambda: rng.random_range(0.0..0.5),
            max_iters: iters,
            rel_tol: f64::MIN_POSITIVE,
            power_seed: rng.random(),
            ..Default::default()
        };
        let (_, trace) = solve(&x, &d, &opts)?;
        for w in trace.objectives.windows(2) {
            worst = worst.max((w[1] - w[0]) / w[0].abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Solves against a single 1x1 unit atom with the exact step `1/L = 1`; the
/// answer must be the soft-thresholded input, bit for bit.
pub fn delta_atom_exact(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_matrix(&mut rng, 7, 15);
    let lambda = 0.3;
    let d = ChannelStack::new(vec![Matrix2::from_rows(&[[1.0]])])?;
    let opts = SolverOptions {
        lambda,
        step: StepSize::Fixed(1.0),
        ..Default::default()
    };
    let (z, _) = solve(&x, &d, &opts)?;
    Ok(z
        .channel(0)
        .data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| *a == shrink(*b, lambda)))
}

pub fn ista_descent_suite(cases: usize, seed: u64, slack: f64) -> Result<SuiteResult> {
    let worst = ista_worst_increase(cases, seed, 60)?;
    let exact = delta_atom_exact(seed)?;
    Ok(SuiteResult {
        name: "ista-descent",
        passed: worst <= slack && exact,
        cases,
        worst: worst.max(0.0),
        detail: format!(
            "slack {slack:e}; delta atom {}",
            if exact { "exact" } else { "MISMATCH" }
        ),
    })
}

/// Every suite with its default size and tolerance.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        adjoint_suite(1000, seed, 1e-10)?,
        gradient_suite(3, 1e-4)?,
        ista_descent_suite(100, seed, 1e-10)?,
    ])
}
