//! 4D light fields, EPI slicing and lateral source detection.

use crate::conv::Matrix2;
use crate::error::{Error, Result};

/// Intensities indexed `[u, v, x, y]`, stored row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct LightField4D {
    theta_u: usize,
    theta_v: usize,
    n_x: usize,
    n_y: usize,
    data: Vec<f64>,
}

impl LightField4D {
    pub fn zeros(theta_u: usize, theta_v: usize, n_x: usize, n_y: usize) -> Result<Self> {
        Self::check_dims(theta_u, theta_v, n_x, n_y)?;
        Ok(Self {
            theta_u,
            theta_v,
            n_x,
            n_y,
            data: vec![0.0; theta_u * theta_v * n_x * n_y],
        })
    }

    pub fn from_data(
        theta_u: usize,
        theta_v: usize,
        n_x: usize,
        n_y: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::check_dims(theta_u, theta_v, n_x, n_y)?;
        if data.len() != theta_u * theta_v * n_x * n_y {
            return Err(Error::Dimension(format!(
                "light field {theta_u}x{theta_v}x{n_x}x{n_y} needs {} values, got {}",
                theta_u * theta_v * n_x * n_y,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Range(
                "light-field intensities must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            theta_u,
            theta_v,
            n_x,
            n_y,
            data,
        })
    }

    fn check_dims(theta_u: usize, theta_v: usize, n_x: usize, n_y: usize) -> Result<()> {
        if theta_u == 0 || theta_v == 0 || n_x == 0 || n_y == 0 {
            return Err(Error::Dimension(format!(
                "light-field dimensions must be >= 1, got {theta_u}x{theta_v}x{n_x}x{n_y}"
            )));
        }
        if theta_u % 2 == 0 || theta_v % 2 == 0 {
            return Err(Error::NoCentralView { theta_u, theta_v });
        }
        Ok(())
    }

    /// `(theta_u, theta_v, n_x, n_y)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.theta_u, self.theta_v, self.n_x, self.n_y)
    }

    #[inline]
    fn offset(&self, u: usize, v: usize, x: usize, y: usize) -> usize {
        ((u * self.theta_v + v) * self.n_x + x) * self.n_y + y
    }

    pub fn get(&self, u: usize, v: usize, x: usize, y: usize) -> f64 {
        self.data[self.offset(u, v, x, y)]
    }

    pub fn set(&mut self, u: usize, v: usize, x: usize, y: usize, value: f64) {
        let o = self.offset(u, v, x, y);
        self.data[o] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Writes an EPI back into the `(y_row, v)` slice; inverse of [`extract_epi`].
    pub fn embed_epi(&mut self, epi: &Matrix2, y_row: usize, v: usize) -> Result<()> {
        if epi.shape() != (self.theta_u, self.n_x) {
            return Err(Error::Dimension(format!(
                "EPI {:?} does not fit a {}x{} slice",
                epi.shape(),
                self.theta_u,
                self.n_x
            )));
        }
        if y_row >= self.n_y || v >= self.theta_v {
            return Err(Error::Bounds(format!("slice (y={y_row}, v={v})")));
        }
        for u in 0..self.theta_u {
            for x in 0..self.n_x {
                self.set(u, v, x, y_row, epi[(u, x)]);
            }
        }
        Ok(())
    }
}

/// The `n_x x n_y` sub-aperture image at the central angular sample.
pub fn central_view(lf: &LightField4D) -> Result<Matrix2> {
    let (tu, tv, nx, ny) = lf.dims();
    if tu % 2 == 0 || tv % 2 == 0 {
        return Err(Error::NoCentralView {
            theta_u: tu,
            theta_v: tv,
        });
    }
    let (uc, vc) = ((tu - 1) / 2, (tv - 1) / 2);
    Ok(Matrix2::from_fn(nx, ny, |x, y| lf.get(uc, vc, x, y)))
}

/// `out[u, x] = lf[u, v, x, y_row]`
pub fn extract_epi(lf: &LightField4D, y_row: usize, v: usize) -> Result<Matrix2> {
    let (tu, tv, nx, ny) = lf.dims();
    if y_row >= ny {
        return Err(Error::Bounds(format!("EPI row {y_row} outside 0..{ny}")));
    }
    if v >= tv {
        return Err(Error::Bounds(format!("angular index v={v} outside 0..{tv}")));
    }
    Ok(Matrix2::from_fn(tu, nx, |u, x| lf.get(u, v, x, y_row)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LateralDetection {
    pub x: usize,
    pub y: usize,
    pub intensity: f64,
}

/// Local maxima (8-neighbourhood, ties allowed) brighter than `threshold`,
/// accepted greedily by descending intensity with Chebyshev-distance
/// suppression.
pub fn detect_lateral(
    view: &Matrix2,
    threshold: f64,
    min_separation: usize,
) -> Vec<LateralDetection> {
    let (rows, cols) = view.shape();
    let mut candidates = Vec::new();
    for x in 0..rows {
        for y in 0..cols {
            let value = view[(x, y)];
            if !(value > threshold) {
                continue;
            }
            let mut is_peak = true;
            'nbhd: for nx in x.saturating_sub(1)..=(x + 1).min(rows - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(cols - 1) {
                    if (nx, ny) != (x, y) && view[(nx, ny)] > value {
                        is_peak = false;
                        break 'nbhd;
                    }
                }
            }
            if is_peak {
                candidates.push(LateralDetection {
                    x,
                    y,
                    intensity: value,
                });
            }
        }
    }
    // Stable sort keeps row-major order among equal intensities.
    candidates.sort_by(|a, b| b.intensity.total_cmp(&a.intensity));

    let mut accepted: Vec<LateralDetection> = Vec::new();
    for c in candidates {
        let clear = accepted
            .iter()
            .all(|a| a.x.abs_diff(c.x).max(a.y.abs_diff(c.y)) >= min_separation);
        if clear {
            accepted.push(c);
        }
    }
    accepted
}
