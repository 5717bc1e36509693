//! Parametric forward model: point sources rendered as EPIs and 4D light
//! fields, the depth dictionary built from the same renderer, and Gaussian
//! soft labels over the depth grid.
//!
//! Depth enters only through the EPI slope `s = kappa * z`, in pixels of
//! lateral shift per angular step. Angular rows are indexed by the centred
//! offset `u = row - (theta - 1) / 2`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{ChannelStack, Matrix2};
use crate::error::{Error, Result};
use crate::format::{read_f32s, write_f32s, Header};
use crate::lightfield::LightField4D;

/// Imaging geometry and depth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticsConfig {
    pub theta_u: usize,
    pub theta_v: usize,
    pub n_x: usize,
    pub n_y: usize,
    /// Pixels of lateral shift per angular step per micrometre of depth.
    pub kappa: f64,
    /// Gaussian PSF width in pixels.
    pub psf_sigma: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_count: usize,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            theta_u: 19,
            theta_v: 19,
            n_x: 63,
            n_y: 63,
            kappa: 0.025,
            psf_sigma: 1.0,
            depth_min: -18.0,
            depth_max: 36.0,
            depth_count: 55,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.theta_u % 2 == 0 || self.theta_v % 2 == 0 {
            return fail(format!(
                "angular sample counts must be odd, got {}x{}",
                self.theta_u, self.theta_v
            ));
        }
        if self.n_x == 0 || self.n_y == 0 {
            return fail("spatial sample counts must be >= 1".into());
        }
        if !self.kappa.is_finite() {
            return fail("kappa must be finite".into());
        }
        if !(self.psf_sigma > 0.0 && self.psf_sigma.is_finite()) {
            return fail(format!("psf_sigma must be > 0, got {}", self.psf_sigma));
        }
        if !(self.depth_min < self.depth_max) {
            return fail(format!(
                "depth range [{}, {}] is empty",
                self.depth_min, self.depth_max
            ));
        }
        if self.depth_count < 2 {
            return fail("depth grid needs at least 2 points".into());
        }
        let half_u = self.max_shift(self.theta_u) + 3.0 * self.psf_sigma;
        if !(half_u < self.n_x as f64 / 2.0) {
            return fail(format!(
                "EPI lines leave the frame: extent {half_u:.3} >= n_x/2 = {}",
                self.n_x as f64 / 2.0
            ));
        }
        let half_v = self.max_shift(self.theta_v) + 3.0 * self.psf_sigma;
        if !(half_v < self.n_y as f64 / 2.0) {
            return fail(format!(
                "EPI lines leave the frame: extent {half_v:.3} >= n_y/2 = {}",
                self.n_y as f64 / 2.0
            ));
        }
        Ok(())
    }

    fn max_shift(&self, theta: usize) -> f64 {
        self.kappa.abs() * self.depth_min.abs().max(self.depth_max.abs()) * (theta - 1) as f64 / 2.0
    }

    pub fn depth_step(&self) -> f64 {
        (self.depth_max - self.depth_min) / (self.depth_count - 1) as f64
    }

    pub fn depth_at(&self, m: usize) -> f64 {
        self.depth_min + m as f64 * self.depth_step()
    }

    pub fn depth_grid(&self) -> Vec<f64> {
        (0..self.depth_count).map(|m| self.depth_at(m)).collect()
    }

    /// Nearest grid index for a depth in micrometres.
    pub fn depth_index(&self, z: f64) -> usize {
        let m = ((z - self.depth_min) / self.depth_step()).round();
        m.clamp(0.0, (self.depth_count - 1) as f64) as usize
    }

    /// Half-open lateral band `[lo, hi]` where a source's EPI line stays a
    /// full three PSF widths inside the frame at every depth.
    pub fn valid_x_band(&self) -> (f64, f64) {
        let margin = self.max_shift(self.theta_u) + 3.0 * self.psf_sigma;
        (margin, self.n_x as f64 - 1.0 - margin)
    }

    pub fn valid_y_band(&self) -> (f64, f64) {
        let margin = self.max_shift(self.theta_v) + 3.0 * self.psf_sigma;
        (margin, self.n_y as f64 - 1.0 - margin)
    }

    fn contains_depth(&self, z: f64) -> bool {
        let slack = 1e-9 * (self.depth_max - self.depth_min);
        z >= self.depth_min - slack && z <= self.depth_max + slack
    }
}

/// A point emitter. `x0`/`y0` are in pixels, `z` in micrometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub x0: f64,
    pub y0: f64,
    pub z: f64,
    pub amplitude: f64,
}

impl Source {
    pub fn validate(&self, cfg: &OpticsConfig) -> Result<()> {
        if !cfg.contains_depth(self.z) {
            return Err(Error::Range(format!(
                "source depth {} outside [{}, {}]",
                self.z, cfg.depth_min, cfg.depth_max
            )));
        }
        if !(self.x0 >= 0.0 && self.x0 < cfg.n_x as f64) {
            return Err(Error::Range(format!("source x0={} outside frame", self.x0)));
        }
        if !(self.y0 >= 0.0 && self.y0 < cfg.n_y as f64) {
            return Err(Error::Range(format!("source y0={} outside frame", self.y0)));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Range(format!(
                "source amplitude must be > 0, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// Lateral shift per angular step for a source at depth `z_um`.
pub fn epi_slope(z_um: f64, cfg: &OpticsConfig) -> Result<f64> {
    if !cfg.contains_depth(z_um) {
        return Err(Error::Range(format!(
            "depth {z_um} outside [{}, {}]",
            cfg.depth_min, cfg.depth_max
        )));
    }
    Ok(cfg.kappa * z_um)
}

#[inline]
fn gaussian(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

fn add_clipped_noise(values: &mut [f64], noise_sigma: f64, seed: u64) -> Result<()> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        for v in values.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    Ok(())
}

/// Renders a `theta_u x n_x` EPI of the given sources, then adds clipped
/// Gaussian noise drawn from `seed`.
pub fn render_epi(
    sources: &[Source],
    cfg: &OpticsConfig,
    noise_sigma: f64,
    seed: u64,
) -> Result<Matrix2> {
    cfg.validate()?;
    let mut epi = Matrix2::zeros(cfg.theta_u, cfg.n_x);
    let centre = (cfg.theta_u - 1) as f64 / 2.0;
    for src in sources {
        src.validate(cfg)?;
        let s = epi_slope(src.z, cfg)?;
        for row in 0..cfg.theta_u {
            let line_x = src.x0 + s * (row as f64 - centre);
            for x in 0..cfg.n_x {
                epi[(row, x)] += src.amplitude * gaussian(x as f64 - line_x, cfg.psf_sigma);
            }
        }
    }
    add_clipped_noise(epi.data_mut(), noise_sigma, seed)?;
    Ok(epi)
}

/// Separable 4D render: `a * G(x - (x0 + s*u)) * G(y - (y0 + s*v))` per source.
pub fn render_lightfield(
    sources: &[Source],
    cfg: &OpticsConfig,
    noise_sigma: f64,
    seed: u64,
) -> Result<LightField4D> {
    cfg.validate()?;
    let mut lf = LightField4D::zeros(cfg.theta_u, cfg.theta_v, cfg.n_x, cfg.n_y)?;
    let (cu, cv) = ((cfg.theta_u - 1) as f64 / 2.0, (cfg.theta_v - 1) as f64 / 2.0);
    for src in sources {
        src.validate(cfg)?;
        let s = epi_slope(src.z, cfg)?;
        let gx: Vec<Vec<f64>> = (0..cfg.theta_u)
            .map(|u| {
                let c = src.x0 + s * (u as f64 - cu);
                (0..cfg.n_x)
                    .map(|x| gaussian(x as f64 - c, cfg.psf_sigma))
                    .collect()
            })
            .collect();
        let gy: Vec<Vec<f64>> = (0..cfg.theta_v)
            .map(|v| {
                let c = src.y0 + s * (v as f64 - cv);
                (0..cfg.n_y)
                    .map(|y| gaussian(y as f64 - c, cfg.psf_sigma))
                    .collect()
            })
            .collect();
        for u in 0..cfg.theta_u {
            for v in 0..cfg.theta_v {
                for x in 0..cfg.n_x {
                    let ax = src.amplitude * gx[u][x];
                    for y in 0..cfg.n_y {
                        let cur = lf.get(u, v, x, y);
                        lf.set(u, v, x, y, cur + ax * gy[v][y]);
                    }
                }
            }
        }
    }
    add_clipped_noise(lf.data_mut(), noise_sigma, seed)?;
    Ok(lf)
}

const DICTIONARY_MAGIC: &str = "EPIDC1\n";
const DICTIONARY_VERSION: u32 = 1;

/// One unit-norm atom per grid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiDictionary {
    pub atoms: ChannelStack,
    pub depths: Vec<f64>,
    pub kappa: f64,
    pub psf_sigma: f64,
}

impl EpiDictionary {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom_shape(&self) -> (usize, usize) {
        self.atoms.shape()
    }

    pub fn depth_min(&self) -> f64 {
        self.depths[0]
    }

    pub fn depth_max(&self) -> f64 {
        *self.depths.last().expect("non-empty dictionary")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (at, an) = self.atom_shape();
        let mut w = BufWriter::new(File::create(path)?);
        let mut h = Header::new();
        h.push("version", DICTIONARY_VERSION)
            .push("m", self.len())
            .push("atom_theta", at)
            .push("atom_n", an)
            .push("depth_min", self.depth_min())
            .push("depth_max", self.depth_max())
            .push("kappa", self.kappa)
            .push("psf_sigma", self.psf_sigma);
        h.write_to(&mut w, DICTIONARY_MAGIC)?;
        for atom in self.atoms.iter() {
            write_f32s(&mut w, atom.data())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let h = Header::read_from(&mut r, DICTIONARY_MAGIC)?;
        h.check_version(DICTIONARY_VERSION)?;
        let m: usize = h.get("m")?;
        let at: usize = h.get("atom_theta")?;
        let an: usize = h.get("atom_n")?;
        let depth_min: f64 = h.get("depth_min")?;
        let depth_max: f64 = h.get("depth_max")?;
        if m < 2 || at == 0 || an == 0 {
            return Err(Error::Header(format!("bad dictionary shape m={m} {at}x{an}")));
        }
        let mut atoms = Vec::with_capacity(m);
        for i in 0..m {
            let data = read_f32s(&mut r, at * an, &format!("atom {i}"))?;
            atoms.push(Matrix2::new(at, an, data)?);
        }
        let step = (depth_max - depth_min) / (m - 1) as f64;
        Ok(Self {
            atoms: ChannelStack::new(atoms)?,
            depths: (0..m).map(|i| depth_min + i as f64 * step).collect(),
            kappa: h.get("kappa")?,
            psf_sigma: h.get("psf_sigma")?,
        })
    }
}

/// Renders a noiseless unit source at every grid depth, centred in an
/// `atom_theta x atom_n` window, and normalises each atom to unit norm.
pub fn build_dictionary(
    cfg: &OpticsConfig,
    atom_theta: usize,
    atom_n: usize,
) -> Result<EpiDictionary> {
    cfg.validate()?;
    if atom_theta % 2 == 0 || atom_n % 2 == 0 {
        return Err(Error::Config(format!(
            "atom dimensions must be odd, got {atom_theta}x{atom_n}"
        )));
    }
    if atom_theta > cfg.theta_u || atom_n > cfg.n_x {
        return Err(Error::Config(format!(
            "{atom_theta}x{atom_n} atoms exceed the {}x{} EPI",
            cfg.theta_u, cfg.n_x
        )));
    }
    let centre_u = (atom_theta - 1) as f64 / 2.0;
    let centre_x = (atom_n - 1) as f64 / 2.0;
    let depths = cfg.depth_grid();
    let atoms = depths
        .iter()
        .map(|&z| {
            let s = cfg.kappa * z;
            let atom = Matrix2::from_fn(atom_theta, atom_n, |r, x| {
                gaussian(x as f64 - (centre_x + s * (r as f64 - centre_u)), cfg.psf_sigma)
            });
            let norm = atom.norm();
            atom.scaled(1.0 / norm)
        })
        .collect();
    Ok(EpiDictionary {
        atoms: ChannelStack::new(atoms)?,
        depths,
        kappa: cfg.kappa,
        psf_sigma: cfg.psf_sigma,
    })
}

/// Per-depth target in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub values: Vec<f64>,
}

/// Gaussian bumps of width `sigma_label` (grid steps) at each index, combined
/// by elementwise max; `sigma_label == 0` gives a hard one-hot label.
pub fn make_soft_label(depth_indices: &[usize], sigma_label: f64, m: usize) -> Result<SoftLabel> {
    if !(sigma_label >= 0.0) {
        return Err(Error::Config(format!("label sigma must be >= 0, got {sigma_label}")));
    }
    let mut values = vec![0.0f64; m];
    for &idx in depth_indices {
        if idx >= m {
            return Err(Error::Range(format!("depth index {idx} >= {m}")));
        }
        for (j, v) in values.iter_mut().enumerate() {
            let g = if j == idx {
                1.0
            } else if sigma_label == 0.0 {
                0.0
            } else {
                let d = j as f64 - idx as f64;
                (-d * d / (2.0 * sigma_label * sigma_label)).exp()
            };
            *v = v.max(g);
        }
    }
    Ok(SoftLabel { values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> OpticsConfig {
        OpticsConfig {
            theta_u: 9,
            theta_v: 9,
            n_x: 31,
            n_y: 25,
            kappa: 0.1,
            psf_sigma: 1.0,
            depth_min: -10.0,
            depth_max: 10.0,
            depth_count: 21,
        }
    }

    #[test]
    fn default_grid_spans_minus18_to_36() {
        let cfg = OpticsConfig::default();
        cfg.validate().unwrap();
        let grid = cfg.depth_grid();
        assert_eq!(grid.len(), 55);
        for (m, z) in grid.iter().enumerate() {
            assert!((z - (-18.0 + m as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let mut cfg = small_cfg();
        cfg.kappa = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.theta_u = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.depth_count = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn slope_values() {
        let cfg = OpticsConfig::default();
        assert_eq!(epi_slope(0.0, &cfg).unwrap(), 0.0);
        assert_eq!(epi_slope(12.0, &cfg).unwrap(), -epi_slope(-12.0, &cfg).unwrap());
        assert!((epi_slope(36.0, &cfg).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(epi_slope(40.0, &cfg), Err(Error::Range(_))));
    }

    #[test]
    fn render_without_sources_is_zero() {
        let cfg = small_cfg();
        let epi = render_epi(&[], &cfg, 0.0, 0).unwrap();
        assert!(epi.data().iter().all(|&v| v == 0.0));
        let lf = render_lightfield(&[], &cfg, 0.0, 0).unwrap();
        assert!(lf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn in_focus_source_is_vertical() {
        let cfg = small_cfg();
        let src = Source {
            x0: 14.3,
            y0: 3.0,
            z: 0.0,
            amplitude: 1.0,
        };
        let epi = render_epi(&[src], &cfg, 0.0, 0).unwrap();
        for r in 0..cfg.theta_u {
            assert_eq!(argmax(epi.row(r)), 14);
        }
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn tilted_line_top_row_position() {
        // Oracle: the peak of row u sits at x0 + kappa*z*u = 30.2 + 0.025*20*9 = 34.7.
        let cfg = OpticsConfig::default();
        let src = Source {
            x0: 30.2,
            y0: 30.0,
            z: 20.0,
            amplitude: 1.0,
        };
        let epi = render_epi(&[src], &cfg, 0.0, 0).unwrap();
        assert_eq!(argmax(epi.row(18)), 35);
        assert_eq!(argmax(epi.row(0)), 26); // 30.2 - 4.5 = 25.7
    }

    #[test]
    fn render_is_linear_in_amplitude_and_noise_is_seeded() {
        let cfg = small_cfg();
        let mut src = Source {
            x0: 15.0,
            y0: 12.0,
            z: 3.0,
            amplitude: 1.0,
        };
        let a = render_epi(&[src], &cfg, 0.0, 0).unwrap();
        src.amplitude = 2.0;
        let b = render_epi(&[src], &cfg, 0.0, 0).unwrap();
        assert_eq!(a.scaled(2.0), b);

        let n1 = render_epi(&[src], &cfg, 0.05, 7).unwrap();
        let n2 = render_epi(&[src], &cfg, 0.05, 7).unwrap();
        let n3 = render_epi(&[src], &cfg, 0.05, 8).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(n1, n3);
        assert!(n1.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn invalid_sources_rejected() {
        let cfg = small_cfg();
        let bad = Source {
            x0: 40.0,
            y0: 1.0,
            z: 0.0,
            amplitude: 1.0,
        };
        assert!(render_epi(&[bad], &cfg, 0.0, 0).is_err());
        let bad = Source {
            x0: 10.0,
            y0: 1.0,
            z: 11.0,
            amplitude: 1.0,
        };
        assert!(render_epi(&[bad], &cfg, 0.0, 0).is_err());
        let src = Source {
            x0: 10.0,
            y0: 1.0,
            z: 0.0,
            amplitude: 1.0,
        };
        assert!(render_epi(&[src], &cfg, -1.0, 0).is_err());
    }

    #[test]
    fn dictionary_atoms_are_unit_norm() {
        let cfg = small_cfg();
        let dict = build_dictionary(&cfg, 9, 15).unwrap();
        assert_eq!(dict.len(), 21);
        for atom in dict.atoms.iter() {
            assert!((atom.norm() - 1.0).abs() <= 1e-12);
        }
        // z = 0 sits at index 10 and is symmetric under angular flip.
        let a0 = dict.atoms.channel(10);
        for r in 0..9 {
            assert_eq!(a0.row(r), a0.row(8 - r));
        }
        assert!(matches!(build_dictionary(&cfg, 11, 15), Err(Error::Config(_))));
        assert!(matches!(build_dictionary(&cfg, 9, 14), Err(Error::Config(_))));
    }

    #[test]
    fn dictionary_coherence_decays_with_depth_distance() {
        let cfg = small_cfg();
        let dict = build_dictionary(&cfg, 9, 15).unwrap();
        for m in 0..dict.len() - 10 {
            let near = dict.atoms.channel(m).dot(dict.atoms.channel(m + 1));
            let far = dict.atoms.channel(m).dot(dict.atoms.channel(m + 10));
            assert!(near > far, "m={m}: near {near} far {far}");
        }
    }

    #[test]
    fn soft_label_values() {
        let hard = make_soft_label(&[2], 0.0, 5).unwrap();
        assert_eq!(hard.values, vec![0.0, 0.0, 1.0, 0.0, 0.0]);

        let soft = make_soft_label(&[2], 1.0, 5).unwrap();
        let expected = [(-2.0f64).exp(), (-0.5f64).exp(), 1.0, (-0.5f64).exp(), (-2.0f64).exp()];
        for (a, b) in soft.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let both = make_soft_label(&[1, 3], 1.0, 5).unwrap();
        let l1 = make_soft_label(&[1], 1.0, 5).unwrap();
        let l3 = make_soft_label(&[3], 1.0, 5).unwrap();
        for j in 0..5 {
            assert_eq!(both.values[j], l1.values[j].max(l3.values[j]));
        }

        assert_eq!(make_soft_label(&[], 1.5, 4).unwrap().values, vec![0.0; 4]);
        assert!(make_soft_label(&[5], 1.0, 5).is_err());
    }

    #[test]
    fn dictionary_file_round_trip() {
        let cfg = small_cfg();
        let dict = build_dictionary(&cfg, 5, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        dict.save(&path).unwrap();
        let back = EpiDictionary::load(&path).unwrap();
        assert_eq!(back.depths.len(), dict.depths.len());
        for (a, b) in back.depths.iter().zip(&dict.depths) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in back.atoms.iter().zip(dict.atoms.iter()) {
            for (p, q) in a.data().iter().zip(b.data()) {
                assert_eq!(*p, *q as f32 as f64);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"EPIDC1\n"));
    }
}
