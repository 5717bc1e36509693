//! Depth readout from per-depth evidence, prediction/truth matching, and the
//! end-to-end light-field localization pipeline.

use std::fmt::Write as _;
use std::time::Instant;

use crate::conv::{estimate_lipschitz, Matrix2};
use crate::csc::{code_evidence, solve, SolverOptions, StepSize};
use crate::dataset::{draw_sample, GenerateOptions};
use crate::error::{Error, Result};
use crate::lightfield::{central_view, detect_lateral, extract_epi};
use crate::net::{infer, CistaNetParams};
use crate::synth::{render_lightfield, EpiDictionary, OpticsConfig};

/// Peak acceptance level for depth evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeakThreshold {
    Absolute(f64),
    /// Fraction of the evidence maximum.
    Relative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthReadoutOptions {
    pub threshold: PeakThreshold,
    /// In grid steps.
    pub min_separation: usize,
    pub centroid_radius: usize,
}

impl DepthReadoutOptions {
    /// Sigmoid midpoint for network probabilities.
    pub fn network_default() -> Self {
        Self {
            threshold: PeakThreshold::Absolute(0.5),
            min_separation: 3,
            centroid_radius: 1,
        }
    }

    /// One tenth of the strongest code for CSC evidence.
    pub fn csc_default() -> Self {
        Self {
            threshold: PeakThreshold::Relative(0.1),
            min_separation: 3,
            centroid_radius: 1,
        }
    }
}

/// Returns depths (in grid units mapped through the affine `grid`) of the
/// accepted evidence peaks, strongest first.
pub fn detect_depths(evidence: &[f64], grid: &[f64], opts: &DepthReadoutOptions) -> Vec<f64> {
    assert_eq!(evidence.len(), grid.len(), "evidence and grid lengths differ");
    let n = evidence.len();
    if n == 0 {
        return Vec::new();
    }
    let tau = match opts.threshold {
        PeakThreshold::Absolute(t) => t,
        PeakThreshold::Relative(f) => {
            let max = evidence.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(max > 0.0) {
                return Vec::new();
            }
            f * max
        }
    };
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let v = evidence[i];
            v > tau && (i == 0 || evidence[i - 1] <= v) && (i + 1 == n || evidence[i + 1] <= v)
        })
        .collect();
    peaks.sort_by(|&a, &b| evidence[b].total_cmp(&evidence[a]));
    let min_sep = opts.min_separation.max(1);
    let mut accepted: Vec<usize> = Vec::new();
    for p in peaks {
        if accepted.iter().all(|&a| a.abs_diff(p) >= min_sep) {
            accepted.push(p);
        }
    }

    let step = if n > 1 { grid[1] - grid[0] } else { 0.0 };
    accepted
        .into_iter()
        .map(|p| {
            let lo = p.saturating_sub(opts.centroid_radius);
            let hi = (p + opts.centroid_radius).min(n - 1);
            let (mut wsum, mut isum) = (0.0, 0.0);
            for i in lo..=hi {
                let w = evidence[i].max(0.0);
                wsum += w;
                isum += w * i as f64;
            }
            let idx = if wsum > 0.0 { isum / wsum } else { p as f64 };
            grid[0] + idx * step
        })
        .collect()
}

/// A located source in (pixel, pixel, micrometre) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSummary {
    /// `(prediction index, truth index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
    pub sq_err: [f64; 3],
}

impl MatchSummary {
    pub fn matched(&self) -> usize {
        self.pairs.len()
    }

    pub fn missed(&self) -> usize {
        self.unmatched_truth.len()
    }

    pub fn spurious(&self) -> usize {
        self.unmatched_pred.len()
    }

    /// Per-axis RMSE over matched pairs; zeros when nothing matched.
    pub fn rmse(&self) -> [f64; 3] {
        let n = self.pairs.len();
        if n == 0 {
            return [0.0; 3];
        }
        self.sq_err.map(|s| (s / n as f64).sqrt())
    }
}

/// Greedy nearest-neighbour matching on depth within `gate_um`.
pub fn match_and_rmse(pred: &[Point3], truth: &[Point3], gate_um: f64) -> MatchSummary {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (p.z - t.z).abs();
            if d <= gate_um {
                cands.push((d, j, i));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut out = MatchSummary::default();
    for (_, j, i) in cands {
        if pred_used[i] || truth_used[j] {
            continue;
        }
        pred_used[i] = true;
        truth_used[j] = true;
        out.pairs.push((i, j));
        let (p, t) = (pred[i], truth[j]);
        out.sq_err[0] += (p.x - t.x).powi(2);
        out.sq_err[1] += (p.y - t.y).powi(2);
        out.sq_err[2] += (p.z - t.z).powi(2);
    }
    out.unmatched_pred = (0..pred.len()).filter(|&i| !pred_used[i]).collect();
    out.unmatched_truth = (0..truth.len()).filter(|&j| !truth_used[j]).collect();
    out
}

/// Turns an EPI into per-depth evidence.
pub enum DepthEstimator<'a> {
    Network(&'a CistaNetParams),
    Csc {
        dict: &'a EpiDictionary,
        opts: SolverOptions,
    },
}

impl<'a> DepthEstimator<'a> {
    pub fn name(&self) -> &'static str {
        match self {
            DepthEstimator::Network(_) => "cista-infer",
            DepthEstimator::Csc { .. } => "csc-solve",
        }
    }

    /// CSC estimator with the step size fixed up front from the dictionary,
    /// so repeated solves skip the power iteration.
    pub fn csc_with_fixed_step(
        dict: &'a EpiDictionary,
        epi_shape: (usize, usize),
        mut opts: SolverOptions,
    ) -> Result<Self> {
        if opts.step == StepSize::Auto {
            let est = estimate_lipschitz(
                &dict.atoms,
                epi_shape,
                opts.power_tol,
                opts.power_max_iters,
                opts.power_seed,
            )?;
            if est.degenerate || est.value <= 0.0 {
                return Err(Error::Degenerate("zero dictionary".into()));
            }
            opts.step = StepSize::Fixed(0.99 / est.value);
        }
        Ok(DepthEstimator::Csc { dict, opts })
    }

    pub fn evidence(&self, epi: &Matrix2) -> Result<Vec<f64>> {
        match self {
            DepthEstimator::Network(p) => infer(epi, p),
            DepthEstimator::Csc { dict, opts } => {
                let (z, _) = solve(epi, &dict.atoms, opts)?;
                Ok(code_evidence(&z))
            }
        }
    }

    pub fn depth_grid(&self) -> Vec<f64> {
        match self {
            DepthEstimator::Network(p) => p.depth_grid(),
            DepthEstimator::Csc { dict, .. } => dict.depths.clone(),
        }
    }

    pub fn default_readout(&self) -> DepthReadoutOptions {
        match self {
            DepthEstimator::Network(_) => DepthReadoutOptions::network_default(),
            DepthEstimator::Csc { .. } => DepthReadoutOptions::csc_default(),
        }
    }
}

/// Settings for [`evaluate_lightfields`].
#[derive(Debug, Clone, PartialEq)]
pub struct LightFieldEvalOptions {
    pub optics: OpticsConfig,
    /// Source draws, noise level and seed of the held-out set.
    pub samples: GenerateOptions,
    /// Lateral threshold as a fraction of the central-view maximum.
    pub lateral_threshold: f64,
    pub lateral_min_separation: usize,
    pub readout: DepthReadoutOptions,
    pub gate_um: f64,
}

impl LightFieldEvalOptions {
    pub fn new(optics: OpticsConfig, samples: GenerateOptions, readout: DepthReadoutOptions) -> Self {
        Self {
            optics,
            samples,
            lateral_threshold: 0.5,
            lateral_min_separation: 3,
            readout,
            gate_um: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowStatus {
    Matched,
    Missed,
    Spurious,
}

impl RowStatus {
    fn as_str(self) -> &'static str {
        match self {
            RowStatus::Matched => "matched",
            RowStatus::Missed => "missed",
            RowStatus::Spurious => "spurious",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample: usize,
    pub status: RowStatus,
    pub pred: Option<Point3>,
    pub truth: Option<Point3>,
}

pub const EVAL_CSV_HEADER: &str = "method,sample,status,pred_x,pred_y,pred_z,true_x,true_y,true_z";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    pub rmse: [f64; 3],
    pub matched: usize,
    pub missed: usize,
    pub spurious: usize,
    /// Mean wall time of the depth estimator per EPI, seconds.
    pub mean_estimator_s: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!("{EVAL_CSV_HEADER}\n{}", self.csv_rows())
    }

    /// Data rows without the header, for concatenating several methods.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        let fmt = |p: Option<Point3>| match p {
            Some(p) => format!("{},{},{}", p.x, p.y, p.z),
            None => ",,".to_string(),
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.method,
                r.sample,
                r.status.as_str(),
                fmt(r.pred),
                fmt(r.truth)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "method={} rmse_x={:.4} rmse_y={:.4} rmse_z={:.4} matched={} missed={} spurious={} mean_time_s={:.3e}",
            self.method,
            self.rmse[0],
            self.rmse[1],
            self.rmse[2],
            self.matched,
            self.missed,
            self.spurious,
            self.mean_estimator_s
        )
    }

    /// (missed + spurious) relative to the number of true sources.
    pub fn error_rate(&self) -> f64 {
        let truths = self.matched + self.missed;
        if truths == 0 {
            return 0.0;
        }
        (self.missed + self.spurious) as f64 / truths as f64
    }
}

/// Renders held-out light fields, detects sources laterally on the central
/// view, reads each detection's EPI row through `estimator`, and scores the
/// resulting 3D positions.
pub fn evaluate_lightfields(
    estimator: &DepthEstimator<'_>,
    opts: &LightFieldEvalOptions,
) -> Result<EvalReport> {
    let cfg = &opts.optics;
    cfg.validate()?;
    opts.samples.validate(cfg)?;
    if !(opts.gate_um > 0.0) {
        return Err(Error::Config("matching gate must be > 0".into()));
    }
    let grid = estimator.depth_grid();
    if grid.len() != cfg.depth_count {
        return Err(Error::Config(format!(
            "estimator covers {} depths, optics {}",
            grid.len(),
            cfg.depth_count
        )));
    }
    let vc = (cfg.theta_v - 1) / 2;

    let mut rows = Vec::new();
    let mut sq = [0.0; 3];
    let (mut matched, mut missed, mut spurious) = (0, 0, 0);
    let mut est_time = 0.0;
    let mut est_calls = 0usize;

    for i in 0..opts.samples.count {
        let draw = draw_sample(cfg, &opts.samples, i as u64);
        let lf = render_lightfield(&draw.sources, cfg, opts.samples.noise_sigma, draw.noise_seed)?;
        let view = central_view(&lf)?;
        let thr = opts.lateral_threshold * view.max().max(0.0);
        let detections = detect_lateral(&view, thr, opts.lateral_min_separation);

        let mut preds = Vec::new();
        for det in &detections {
            let epi = extract_epi(&lf, det.y, vc)?;
            let t0 = Instant::now();
            let evidence = estimator.evidence(&epi)?;
            est_time += t0.elapsed().as_secs_f64();
            est_calls += 1;
            for z in detect_depths(&evidence, &grid, &opts.readout) {
                preds.push(Point3 {
                    x: det.x as f64,
                    y: det.y as f64,
                    z,
                });
            }
        }
        let truth: Vec<Point3> = draw
            .sources
            .iter()
            .map(|s| Point3 {
                x: s.x0,
                y: s.y0,
                z: s.z,
            })
            .collect();
        let m = match_and_rmse(&preds, &truth, opts.gate_um);
        for k in 0..3 {
            sq[k] += m.sq_err[k];
        }
        matched += m.matched();
        missed += m.missed();
        spurious += m.spurious();
        for &(p, t) in &m.pairs {
            rows.push(EvalRow {
                sample: i,
                status: RowStatus::Matched,
                pred: Some(preds[p]),
                truth: Some(truth[t]),
            });
        }
        for &t in &m.unmatched_truth {
            rows.push(EvalRow {
                sample: i,
                status: RowStatus::Missed,
                pred: None,
                truth: Some(truth[t]),
            });
        }
        for &p in &m.unmatched_pred {
            rows.push(EvalRow {
                sample: i,
                status: RowStatus::Spurious,
                pred: Some(preds[p]),
                truth: None,
            });
        }
    }
    let rmse = if matched > 0 {
        sq.map(|s| (s / matched as f64).sqrt())
    } else {
        [0.0; 3]
    };
    Ok(EvalReport {
        method: estimator.name().to_string(),
        rows,
        rmse,
        matched,
        missed,
        spurious,
        mean_estimator_s: if est_calls > 0 {
            est_time / est_calls as f64
        } else {
            0.0
        },
    })
}
