//! Labeled EPI datasets: deterministic per-index generation and the
//! `EPIDS1` binary file format.
//!
//! Sample `i` is drawn from ChaCha8 stream `i` of the dataset seed, so any
//! sample can be regenerated without producing the ones before it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Matrix2;
use crate::error::{Error, Result};
use crate::format::{read_f32s, read_u32, write_f32s, Header};
use crate::synth::{make_soft_label, render_epi, OpticsConfig, SoftLabel, Source};

const MAGIC: &str = "EPIDS1\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub epi: Matrix2,
    pub label: SoftLabel,
    pub sources: Vec<Source>,
}

/// Random-draw parameters for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub count: usize,
    pub sources_min: usize,
    pub sources_max: usize,
    pub noise_sigma: f64,
    pub sigma_label: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            count: 1000,
            sources_min: 1,
            sources_max: 2,
            noise_sigma: 0.05,
            sigma_label: 1.5,
            amplitude_min: 0.8,
            amplitude_max: 1.2,
            seed: 0,
        }
    }
}

impl GenerateOptions {
    pub(crate) fn validate(&self, cfg: &OpticsConfig) -> Result<()> {
        if self.sources_min > self.sources_max {
            return Err(Error::Config(format!(
                "sources_min {} > sources_max {}",
                self.sources_min, self.sources_max
            )));
        }
        if self.sources_max > cfg.depth_count {
            return Err(Error::Config(format!(
                "{} distinct depths requested from a grid of {}",
                self.sources_max, cfg.depth_count
            )));
        }
        if !(self.amplitude_min > 0.0 && self.amplitude_min <= self.amplitude_max) {
            return Err(Error::Config(format!(
                "amplitude range [{}, {}] invalid",
                self.amplitude_min, self.amplitude_max
            )));
        }
        let (xlo, xhi) = cfg.valid_x_band();
        let (ylo, yhi) = cfg.valid_y_band();
        if xlo > xhi || ylo > yhi {
            return Err(Error::Config("no valid lateral band for sources".into()));
        }
        Ok(())
    }
}

/// Metadata stored ahead of the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: usize,
    pub m: usize,
    pub theta: usize,
    pub n: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub sigma_label: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub kappa: f64,
    pub psf_sigma: f64,
}

impl DatasetHeader {
    pub fn new(cfg: &OpticsConfig, opts: &GenerateOptions, count: usize) -> Self {
        Self {
            version: VERSION,
            count,
            m: cfg.depth_count,
            theta: cfg.theta_u,
            n: cfg.n_x,
            seed: opts.seed,
            noise_sigma: opts.noise_sigma,
            sigma_label: opts.sigma_label,
            depth_min: cfg.depth_min,
            depth_max: cfg.depth_max,
            kappa: cfg.kappa,
            psf_sigma: cfg.psf_sigma,
        }
    }

    pub fn depth_grid(&self) -> Vec<f64> {
        let step = (self.depth_max - self.depth_min) / (self.m - 1) as f64;
        (0..self.m).map(|i| self.depth_min + i as f64 * step).collect()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut h = Header::new();
        h.push("version", self.version)
            .push("count", self.count)
            .push("m", self.m)
            .push("theta", self.theta)
            .push("n", self.n)
            .push("seed", self.seed)
            .push("noise_sigma", self.noise_sigma)
            .push("sigma_label", self.sigma_label)
            .push("depth_min", self.depth_min)
            .push("depth_max", self.depth_max)
            .push("kappa", self.kappa)
            .push("psf_sigma", self.psf_sigma);
        h.write_to(w, MAGIC)
    }
}

/// Sources, their grid indices and a noise seed for sample `i`.
pub(crate) struct SampleDraw {
    pub sources: Vec<Source>,
    pub indices: Vec<usize>,
    pub noise_seed: u64,
}

pub(crate) fn draw_sample(cfg: &OpticsConfig, opts: &GenerateOptions, i: u64) -> SampleDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(i);

    let k = rng.random_range(opts.sources_min..=opts.sources_max);
    let mut indices = index::sample(&mut rng, cfg.depth_count, k).into_vec();
    indices.sort_unstable();
    let (xlo, xhi) = cfg.valid_x_band();
    let (ylo, yhi) = cfg.valid_y_band();
    let sources: Vec<Source> = indices
        .iter()
        .map(|&m| Source {
            x0: rng.random_range(xlo..=xhi),
            y0: rng.random_range(ylo..=yhi),
            z: cfg.depth_at(m),
            amplitude: rng.random_range(opts.amplitude_min..=opts.amplitude_max),
        })
        .collect();
    let noise_seed = rng.next_u64();
    SampleDraw {
        sources,
        indices,
        noise_seed,
    }
}

/// Draws sample `i` of the dataset described by `(cfg, opts)`.
pub fn generate_sample(cfg: &OpticsConfig, opts: &GenerateOptions, i: u64) -> Result<LabeledSample> {
    let SampleDraw {
        sources,
        indices,
        noise_seed,
    } = draw_sample(cfg, opts, i);
    let epi = render_epi(&sources, cfg, opts.noise_sigma, noise_seed)?;
    let label = make_soft_label(&indices, opts.sigma_label, cfg.depth_count)?;
    Ok(LabeledSample {
        epi,
        label,
        sources,
    })
}

/// Generates `opts.count` samples in memory.
pub fn generate_samples(cfg: &OpticsConfig, opts: &GenerateOptions) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    opts.validate(cfg)?;
    (0..opts.count as u64)
        .map(|i| generate_sample(cfg, opts, i))
        .collect()
}

/// Generates and writes a dataset file, returning its header.
pub fn generate_dataset(
    cfg: &OpticsConfig,
    opts: &GenerateOptions,
    out_path: &Path,
) -> Result<DatasetHeader> {
    if opts.count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    cfg.validate()?;
    opts.validate(cfg)?;
    let header = DatasetHeader::new(cfg, opts, opts.count);
    let mut w = BufWriter::new(File::create(out_path)?);
    header.write_to(&mut w)?;
    for i in 0..opts.count as u64 {
        write_sample(&mut w, &generate_sample(cfg, opts, i)?)?;
    }
    w.flush()?;
    Ok(header)
}

fn write_sample<W: Write>(w: &mut W, s: &LabeledSample) -> Result<()> {
    write_f32s(w, s.epi.data())?;
    write_f32s(w, &s.label.values)?;
    w.write_all(&(s.sources.len() as u32).to_le_bytes())?;
    for src in &s.sources {
        write_f32s(w, &[src.x0, src.y0, src.z, src.amplitude])?;
    }
    Ok(())
}

/// Writes an already materialised sample list.
pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[LabeledSample]) -> Result<()> {
    if header.count != samples.len() {
        return Err(Error::Config(format!(
            "header count {} but {} samples",
            header.count,
            samples.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    header.write_to(&mut w)?;
    for s in samples {
        if s.epi.shape() != (header.theta, header.n) || s.label.values.len() != header.m {
            return Err(Error::Dimension("sample shape disagrees with header".into()));
        }
        write_sample(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<LabeledSample>)> {
    let mut r = BufReader::new(File::open(path)?);
    let h = Header::read_from(&mut r, MAGIC)?;
    h.check_version(VERSION)?;
    let header = DatasetHeader {
        version: VERSION,
        count: h.get("count")?,
        m: h.get("m")?,
        theta: h.get("theta")?,
        n: h.get("n")?,
        seed: h.get("seed")?,
        noise_sigma: h.get("noise_sigma")?,
        sigma_label: h.get("sigma_label")?,
        depth_min: h.get("depth_min")?,
        depth_max: h.get("depth_max")?,
        kappa: h.get("kappa")?,
        psf_sigma: h.get("psf_sigma")?,
    };
    if header.m < 2 || header.theta == 0 || header.n == 0 {
        return Err(Error::Header(format!(
            "bad dataset shape m={} theta={} n={}",
            header.m, header.theta, header.n
        )));
    }
    let mut samples = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let epi = read_f32s(&mut r, header.theta * header.n, &format!("sample {i} EPI"))?;
        let label = read_f32s(&mut r, header.m, &format!("sample {i} label"))?;
        let k = read_u32(&mut r, &format!("sample {i} source count"))? as usize;
        if k > header.m {
            return Err(Error::Header(format!("sample {i} claims {k} sources")));
        }
        let raw = read_f32s(&mut r, 4 * k, &format!("sample {i} sources"))?;
        let sources = raw
            .chunks_exact(4)
            .map(|c| Source {
                x0: c[0],
                y0: c[1],
                z: c[2],
                amplitude: c[3],
            })
            .collect();
        samples.push(LabeledSample {
            epi: Matrix2::new(header.theta, header.n, epi)?,
            label: SoftLabel { values: label },
            sources,
        });
    }
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OpticsConfig {
        OpticsConfig {
            theta_u: 9,
            theta_v: 9,
            n_x: 31,
            n_y: 31,
            kappa: 0.1,
            psf_sigma: 1.0,
            depth_min: -10.0,
            depth_max: 10.0,
            depth_count: 21,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let opts = GenerateOptions {
            count: 1,
            seed: 42,
            ..Default::default()
        };
        generate_dataset(&cfg(), &opts, &a).unwrap();
        generate_dataset(&cfg(), &opts, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn sample_depends_only_on_seed_and_index() {
        let opts = GenerateOptions {
            count: 10,
            seed: 3,
            ..Default::default()
        };
        let all = generate_samples(&cfg(), &opts).unwrap();
        assert_eq!(generate_sample(&cfg(), &opts, 7).unwrap(), all[7]);
    }

    #[test]
    fn zero_sources_give_zero_labels() {
        let opts = GenerateOptions {
            count: 20,
            sources_min: 0,
            sources_max: 0,
            ..Default::default()
        };
        for s in generate_samples(&cfg(), &opts).unwrap() {
            assert!(s.sources.is_empty());
            assert!(s.label.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sources_distinct_and_labelled() {
        let c = cfg();
        let opts = GenerateOptions {
            count: 50,
            sources_min: 2,
            sources_max: 3,
            ..Default::default()
        };
        let (lo, hi) = c.valid_x_band();
        for s in generate_samples(&c, &opts).unwrap() {
            let mut idx: Vec<_> = s.sources.iter().map(|src| c.depth_index(src.z)).collect();
            for &m in &idx {
                assert_eq!(s.label.values[m], 1.0);
            }
            idx.dedup();
            assert_eq!(idx.len(), s.sources.len());
            assert!(s.sources.iter().all(|src| src.x0 >= lo && src.x0 <= hi));
        }
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let opts = GenerateOptions {
            count: 4,
            seed: 1,
            ..Default::default()
        };
        let header = generate_dataset(&cfg(), &opts, &path).unwrap();
        let (h2, samples) = read_dataset(&path).unwrap();
        assert_eq!(header, h2);
        let fresh = generate_samples(&cfg(), &opts).unwrap();
        for (a, b) in samples.iter().zip(&fresh) {
            for (p, q) in a.epi.data().iter().zip(b.epi.data()) {
                assert_eq!(*p, *q as f32 as f64);
            }
            assert_eq!(a.sources.len(), b.sources.len());
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn invalid_options() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let bad = GenerateOptions {
            count: 0,
            ..Default::default()
        };
        assert!(generate_dataset(&cfg(), &bad, &path).is_err());
        let bad = GenerateOptions {
            sources_min: 3,
            sources_max: 2,
            ..Default::default()
        };
        assert!(generate_dataset(&cfg(), &bad, &path).is_err());
        let bad_path = dir.path().join("missing").join("d.bin");
        assert!(matches!(
            generate_dataset(&cfg(), &GenerateOptions::default(), &bad_path),
            Err(Error::Io(_))
        ));
    }
}
