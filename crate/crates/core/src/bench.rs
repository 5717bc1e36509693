//! Per-EPI wall-clock comparison of the CSC solver and network inference.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use crate::conv::Matrix2;
use crate::csc::{solve, SolverOptions, StepSize};
use crate::error::{Error, Result};
use crate::eval::DepthEstimator;
use crate::net::{infer, CistaNetParams};
use crate::synth::EpiDictionary;

pub const BENCH_CSV_HEADER: &str = "method,n_epis,median_s,mad_s,speedup_vs_csc";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub n_epis: usize,
    pub median_s: f64,
    pub mad_s: f64,
    pub speedup_vs_csc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{}",
                r.method, r.n_epis, r.median_s, r.mad_s, r.speedup_vs_csc
            );
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and median absolute deviation.
pub fn median_mad(samples: &[f64]) -> (f64, f64) {
    let mut v = samples.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = samples.iter().map(|x| (x - med).abs()).collect();
    (med, median(&mut dev))
}

/// Times `f` over all EPIs: one warm-up pass, then `repeats` timed passes.
/// Returns per-EPI seconds for each timed pass.
fn time_passes(
    epis: &[Matrix2],
    repeats: usize,
    mut f: impl FnMut(&Matrix2) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    for x in epis {
        black_box(f(x)?);
    }
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        for x in epis {
            black_box(f(x)?);
        }
        out.push(t0.elapsed().as_secs_f64() / epis.len() as f64);
    }
    Ok(out)
}

/// Solver settings used for timing: the step is fixed in advance and the
/// run is held to `iterations` steps (it stops early only if the objective
/// stops decreasing altogether).
pub fn bench_solver_options(base: &SolverOptions, iterations: usize) -> SolverOptions {
    SolverOptions {
        max_iters: iterations,
        rel_tol: f64::MIN_POSITIVE,
        ..base.clone()
    }
}

/// Runs both methods on the calling thread. Model and dictionary loading,
/// and the step-size estimate, are outside the timed region.
pub fn bench(
    params: &CistaNetParams,
    dict: &EpiDictionary,
    epis: &[Matrix2],
    repeats: usize,
    csc: &SolverOptions,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Config(format!("bench needs repeats >= 3, got {repeats}")));
    }
    if epis.is_empty() {
        return Err(Error::Config("bench needs at least one EPI".into()));
    }
    let shape = epis[0].shape();
    let csc_opts = match DepthEstimator::csc_with_fixed_step(dict, shape, csc.clone())? {
        DepthEstimator::Csc { opts, .. } => opts,
        DepthEstimator::Network(_) => unreachable!(),
    };
    debug_assert!(matches!(csc_opts.step, StepSize::Fixed(_)));

    let csc_times = time_passes(epis, repeats, |x| {
        let (z, _) = solve(x, &dict.atoms, &csc_opts)?;
        Ok(crate::csc::code_evidence(&z))
    })?;
    let net_times = time_passes(epis, repeats, |x| infer(x, params))?;

    let (csc_med, csc_mad) = median_mad(&csc_times);
    let (net_med, net_mad) = median_mad(&net_times);
    Ok(BenchReport {
        rows: vec![
            BenchRow {
                method: "csc-solve".into(),
                n_epis: epis.len(),
                median_s: csc_med,
                mad_s: csc_mad,
                speedup_vs_csc: 1.0,
            },
            BenchRow {
                method: "cista-infer".into(),
                n_epis: epis.len(),
                median_s: net_med,
                mad_s: net_mad,
                speedup_vs_csc: if net_med > 0.0 { csc_med / net_med } else { f64::INFINITY },
            },
        ],
    })
}
