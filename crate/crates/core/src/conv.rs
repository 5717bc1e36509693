//! Zero-padded "same" correlation/convolution primitives and the dictionary
//! operators built from them.
//!
//! Every operator here maps a `rows x cols` signal to a signal of the same
//! shape. Kernels have odd dimensions and are centred, so index `(i, j)` of
//! the output lines up with index `(i, j)` of the input. `conv2_same` is the
//! flipped form of `corr2_same`, which makes the two mutually adjoint; the
//! dictionary synthesis operator (`dict_forward`) uses convolution and its
//! adjoint (`dict_adjoint`) uses correlation.

use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds from nested rows; panics on ragged input. Handy in tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn dot(&self, other: &Matrix2) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Matrix2 {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Reverses both axes.
    pub fn flip180(&self) -> Matrix2 {
        let mut data = self.data.clone();
        data.reverse();
        Matrix2 {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Copies `self` into the centre of a larger zero matrix.
    pub fn embed_centered(&self, rows: usize, cols: usize) -> Result<Matrix2> {
        if rows < self.rows || cols < self.cols {
            return Err(Error::Dimension(format!(
                "cannot embed {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        if (rows - self.rows) % 2 != 0 || (cols - self.cols) % 2 != 0 {
            return Err(Error::Dimension(format!(
                "embedding {}x{} into {rows}x{cols} has no unique centre",
                self.rows, self.cols
            )));
        }
        let (r0, c0) = ((rows - self.rows) / 2, (cols - self.cols) / 2);
        let mut out = Matrix2::zeros(rows, cols);
        for i in 0..self.rows {
            let dst = (r0 + i) * cols + c0;
            out.data[dst..dst + self.cols].copy_from_slice(self.row(i));
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Matrix2 {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix2 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `M` matrices of identical shape: sparse codes, filter banks, dictionaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<Matrix2>,
}

impl ChannelStack {
    pub fn new(channels: Vec<Matrix2>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Dimension("channel stack needs at least one channel".into()))?;
        let shape = first.shape();
        if let Some(bad) = channels.iter().find(|c| c.shape() != shape) {
            return Err(Error::Dimension(format!(
                "channel shapes differ: {:?} vs {:?}",
                shape,
                bad.shape()
            )));
        }
        Ok(Self { channels })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        assert!(channels > 0, "channel stack needs at least one channel");
        Self {
            channels: vec![Matrix2::zeros(rows, cols); channels],
        }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Shape shared by every channel.
    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn channel(&self, m: usize) -> &Matrix2 {
        &self.channels[m]
    }

    pub fn channel_mut(&mut self, m: usize) -> &mut Matrix2 {
        &mut self.channels[m]
    }

    pub fn channels(&self) -> &[Matrix2] {
        &self.channels
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Matrix2> {
        self.channels.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Matrix2> {
        self.channels.iter_mut()
    }

    pub fn dot(&self, other: &ChannelStack) -> f64 {
        self.channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.channels.iter().map(Matrix2::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.data())
            .map(|v| v.abs())
            .sum()
    }

    pub fn scaled(&self, s: f64) -> ChannelStack {
        ChannelStack {
            channels: self.channels.iter().map(|c| c.scaled(s)).collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ChannelStack) {
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.axpy(alpha, b);
        }
    }

    pub fn into_channels(self) -> Vec<Matrix2> {
        self.channels
    }
}

fn check_kernel(x: &Matrix2, k: &Matrix2) -> Result<()> {
    if k.rows() % 2 == 0 || k.cols() % 2 == 0 {
        return Err(Error::InvalidKernel(format!(
            "kernel dimensions must be odd, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    if k.rows() > x.rows() || k.cols() > x.cols() {
        return Err(Error::InvalidKernel(format!(
            "{}x{} kernel larger than {}x{} input",
            k.rows(),
            k.cols(),
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// `out[i,j] += scale * sum_{a,b} x[i+a-cr, j+b-cc] * k[a,b]`, zero outside `x`.
///
/// Iterates kernel taps in the outer loops so the inner loop is a contiguous
/// row axpy.
pub(crate) fn corr_accumulate(x: &Matrix2, k: &Matrix2, scale: f64, out: &mut Matrix2) {
    let (rows, cols) = x.shape();
    let cr = (k.rows() / 2) as isize;
    let cc = (k.cols() / 2) as isize;
    for a in 0..k.rows() {
        let di = a as isize - cr;
        let i_lo = (-di).max(0) as usize;
        let i_hi = (rows as isize - di).min(rows as isize).max(0) as usize;
        for b in 0..k.cols() {
            let w = scale * k[(a, b)];
            let dj = b as isize - cc;
            let j_lo = (-dj).max(0) as usize;
            let j_hi = (cols as isize - dj).min(cols as isize).max(0) as usize;
            if j_lo >= j_hi {
                continue;
            }
            for i in i_lo..i_hi {
                let src_row = (i as isize + di) as usize;
                let src = &x.data[src_row * cols + (j_lo as isize + dj) as usize..][..j_hi - j_lo];
                let dst = &mut out.data[i * cols + j_lo..i * cols + j_hi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// `out[i,j] += scale * sum_{a,b} x[i-a+cr, j-b+cc] * k[a,b]`: the adjoint of
/// [`corr_accumulate`] in its signal argument.
pub(crate) fn conv_accumulate(x: &Matrix2, k: &Matrix2, scale: f64, out: &mut Matrix2) {
    let (rows, cols) = x.shape();
    let cr = (k.rows() / 2) as isize;
    let cc = (k.cols() / 2) as isize;
    for a in 0..k.rows() {
        let di = cr - a as isize;
        let i_lo = (-di).max(0) as usize;
        let i_hi = (rows as isize - di).min(rows as isize).max(0) as usize;
        for b in 0..k.cols() {
            let w = scale * k[(a, b)];
            let dj = cc - b as isize;
            let j_lo = (-dj).max(0) as usize;
            let j_hi = (cols as isize - dj).min(cols as isize).max(0) as usize;
            if j_lo >= j_hi {
                continue;
            }
            for i in i_lo..i_hi {
                let src_row = (i as isize + di) as usize;
                let src = &x.data[src_row * cols + (j_lo as isize + dj) as usize..][..j_hi - j_lo];
                let dst = &mut out.data[i * cols + j_lo..i * cols + j_hi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Gradient of `sum(dy ⊙ corr2_same(x, k))` with respect to a `kr x kc` kernel `k`:
/// `g[a,b] = sum_{i,j} dy[i,j] * x[i+a-cr, j+b-cc]`.
pub(crate) fn corr_kernel_gradient(x: &Matrix2, dy: &Matrix2, kr: usize, kc: usize) -> Matrix2 {
    let (rows, cols) = x.shape();
    let cr = (kr / 2) as isize;
    let cc = (kc / 2) as isize;
    let mut g = Matrix2::zeros(kr, kc);
    for a in 0..kr {
        let di = a as isize - cr;
        let i_lo = (-di).max(0) as usize;
        let i_hi = (rows as isize - di).min(rows as isize).max(0) as usize;
        for b in 0..kc {
            let dj = b as isize - cc;
            let j_lo = (-dj).max(0) as usize;
            let j_hi = (cols as isize - dj).min(cols as isize).max(0) as usize;
            if j_lo >= j_hi {
                continue;
            }
            let mut acc = 0.0;
            for i in i_lo..i_hi {
                let src_row = (i as isize + di) as usize;
                let src = &x.data[src_row * cols + (j_lo as isize + dj) as usize..][..j_hi - j_lo];
                let d = &dy.data[i * cols + j_lo..i * cols + j_hi];
                acc += d.iter().zip(src).map(|(p, q)| p * q).sum::<f64>();
            }
            g[(a, b)] = acc;
        }
    }
    g
}

/// Zero-padded "same" cross-correlation.
pub fn corr2_same(x: &Matrix2, k: &Matrix2) -> Result<Matrix2> {
    check_kernel(x, k)?;
    let mut out = Matrix2::zeros(x.rows(), x.cols());
    corr_accumulate(x, k, 1.0, &mut out);
    Ok(out)
}

/// Zero-padded "same" convolution; equals `corr2_same(x, k.flip180())`.
pub fn conv2_same(x: &Matrix2, k: &Matrix2) -> Result<Matrix2> {
    check_kernel(x, k)?;
    let mut out = Matrix2::zeros(x.rows(), x.cols());
    conv_accumulate(x, k, 1.0, &mut out);
    Ok(out)
}

fn check_pair(z: &ChannelStack, d: &ChannelStack) -> Result<()> {
    if z.len() != d.len() {
        return Err(Error::Dimension(format!(
            "{} code channels vs {} filters",
            z.len(),
            d.len()
        )));
    }
    check_kernel(z.channel(0), d.channel(0))
}

/// Synthesis `sum_m conv2_same(z_m, d_m)`.
pub fn dict_forward(z: &ChannelStack, d: &ChannelStack) -> Result<Matrix2> {
    check_pair(z, d)?;
    let (rows, cols) = z.shape();
    let mut out = Matrix2::zeros(rows, cols);
    for (zm, dm) in z.iter().zip(d.iter()) {
        conv_accumulate(zm, dm, 1.0, &mut out);
    }
    Ok(out)
}

/// Analysis: channel `m` is `corr2_same(y, d_m)`. Adjoint of [`dict_forward`].
pub fn dict_adjoint(y: &Matrix2, d: &ChannelStack) -> Result<ChannelStack> {
    check_kernel(y, d.channel(0))?;
    let channels = d
        .iter()
        .map(|dm| {
            let mut out = Matrix2::zeros(y.rows(), y.cols());
            corr_accumulate(y, dm, 1.0, &mut out);
            out
        })
        .collect();
    Ok(ChannelStack { channels })
}

/// Channel-wise correlation; channel `m` sees only filter `m`.
pub fn depthwise_corr(z: &ChannelStack, s: &ChannelStack) -> Result<ChannelStack> {
    check_pair(z, s)?;
    let channels = z
        .iter()
        .zip(s.iter())
        .map(|(zm, sm)| {
            let mut out = Matrix2::zeros(zm.rows(), zm.cols());
            corr_accumulate(zm, sm, 1.0, &mut out);
            out
        })
        .collect();
    Ok(ChannelStack { channels })
}

/// Result of power iteration on the dictionary Gram operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub iterations: usize,
    /// Set when the operator annihilated the iterate (zero dictionary).
    pub degenerate: bool,
}

/// Largest eigenvalue of `z -> dict_adjoint(dict_forward(z, d), d)` on codes
/// of shape `shape`, by power iteration from a seeded Gaussian start.
pub fn estimate_lipschitz(
    d: &ChannelStack,
    shape: (usize, usize),
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("power iteration tol must be > 0, got {tol}")));
    }
    if max_iters == 0 {
        return Err(Error::Config("power iteration needs max_iters >= 1".into()));
    }
    let (rows, cols) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = ChannelStack::new(
        (0..d.len())
            .map(|_| Matrix2::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)))
            .collect(),
    )?;
    let n = v.norm();
    v = v.scaled(1.0 / n);

    let mut estimate = 0.0;
    for it in 1..=max_iters {
        let gv = dict_adjoint(&dict_forward(&v, d)?, d)?;
        let rayleigh = v.dot(&gv);
        let gnorm = gv.norm();
        if gnorm == 0.0 || !gnorm.is_finite() {
            return Ok(LipschitzEstimate {
                value: 0.0,
                iterations: it,
                degenerate: true,
            });
        }
        let change = (rayleigh - estimate).abs();
        estimate = rayleigh;
        v = gv.scaled(1.0 / gnorm);
        if it > 1 && change < tol * estimate.abs() {
            return Ok(LipschitzEstimate {
                value: estimate,
                iterations: it,
                degenerate: false,
            });
        }
    }
    Ok(LipschitzEstimate {
        value: estimate,
        iterations: max_iters,
        degenerate: false,
    })
}

/// `sign(x) * max(|x| - t, 0)`
pub fn soft_threshold(x: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidThreshold(t));
    }
    Ok(shrink(x, t))
}

#[inline]
pub(crate) fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Per-channel maxima and the first row-major position attaining each.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub values: Vec<f64>,
    pub positions: Vec<(usize, usize)>,
}

pub fn global_max_pool(z: &ChannelStack) -> MaxPool {
    let cols = z.shape().1;
    let (values, positions) = z
        .iter()
        .map(|c| {
            let (mut best, mut arg) = (c.data()[0], 0);
            for (idx, &v) in c.data().iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg = idx;
                }
            }
            (best, (arg / cols, arg % cols))
        })
        .unzip();
    MaxPool { values, positions }
}
