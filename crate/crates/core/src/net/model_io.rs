//! `CISTA1` model files: key=value header, then named binary32 tensors in
//! fixed order (per layer `s_filters`, `w_filters`, `bias`; then the head).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::conv::{ChannelStack, Matrix2};
use crate::error::{Error, Result};
use crate::format::{read_exact_named, read_f32s, write_f32s, Header};

use super::{Architecture, BiasSign, CistaNetParams, HeadParams, LayerParams};

const MAGIC: &str = "CISTA1\n";
const VERSION: u32 = 1;

fn write_tensor<W: Write>(w: &mut W, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_f32s(w, values)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, expected_name: &str, expected_dims: &[usize]) -> Result<Vec<f64>> {
    let mut b2 = [0u8; 2];
    read_exact_named(r, &mut b2, expected_name)?;
    let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
    read_exact_named(r, &mut name, expected_name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Shape {
        name: expected_name.into(),
        detail: "tensor name is not UTF-8".into(),
    })?;
    if name != expected_name {
        return Err(Error::Shape {
            name: expected_name.into(),
            detail: format!("found tensor {name:?} in its place"),
        });
    }
    let mut rank = [0u8; 1];
    read_exact_named(r, &mut rank, expected_name)?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut b4 = [0u8; 4];
        read_exact_named(r, &mut b4, expected_name)?;
        dims.push(u32::from_le_bytes(b4) as usize);
    }
    if dims != expected_dims {
        return Err(Error::Shape {
            name: expected_name.into(),
            detail: format!("dims {dims:?}, header implies {expected_dims:?}"),
        });
    }
    read_f32s(r, dims.iter().product(), expected_name)
}

fn stack_values(s: &ChannelStack) -> Vec<f64> {
    s.iter().flat_map(|c| c.data().iter().copied()).collect()
}

fn stack_from(values: Vec<f64>, m: usize, k: usize) -> Result<ChannelStack> {
    ChannelStack::new(
        values
            .chunks_exact(k * k)
            .take(m)
            .map(|c| Matrix2::new(k, k, c.to_vec()))
            .collect::<Result<_>>()?,
    )
}

pub fn save_model(params: &CistaNetParams, path: &Path) -> Result<()> {
    let arch = &params.arch;
    let m = arch.m;
    let kernels: Vec<String> = arch.kernel_sizes.iter().map(|k| k.to_string()).collect();
    let mut w = BufWriter::new(File::create(path)?);
    let mut h = Header::new();
    h.push("version", VERSION)
        .push("m", m)
        .push("theta", arch.theta)
        .push("n", arch.n)
        .push("layers", arch.layers())
        .push("kernel_sizes", kernels.join(","))
        .push("depth_min", params.depth_min)
        .push("depth_max", params.depth_max)
        .push("bias_sign", arch.bias_sign.as_str());
    h.write_to(&mut w, MAGIC)?;
    for (i, l) in params.layers.iter().enumerate() {
        let k = l.kernel_size();
        write_tensor(&mut w, &format!("layer{i}.s_filters"), &[m, k, k], &stack_values(&l.s_filters))?;
        write_tensor(&mut w, &format!("layer{i}.w_filters"), &[m, k, k], &stack_values(&l.w_filters))?;
        write_tensor(&mut w, &format!("layer{i}.bias"), &[m], &l.bias)?;
    }
    write_tensor(&mut w, "head.weights", &[m, m], params.head.weights.data())?;
    write_tensor(&mut w, "head.bias", &[m], &params.head.bias)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CistaNetParams> {
    let mut r = BufReader::new(File::open(path)?);
    let h = Header::read_from(&mut r, MAGIC)?;
    h.check_version(VERSION)?;
    let m: usize = h.get("m")?;
    let layers: usize = h.get("layers")?;
    let kernel_sizes = h
        .get_str("kernel_sizes")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Header(format!("bad kernel size {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if kernel_sizes.len() != layers {
        return Err(Error::Header(format!(
            "layers={layers} but {} kernel sizes",
            kernel_sizes.len()
        )));
    }
    let arch = Architecture {
        m,
        theta: h.get("theta")?,
        n: h.get("n")?,
        kernel_sizes,
        bias_sign: BiasSign::parse(h.get_or("bias_sign", "-".to_string())?.as_str())
            .map_err(|e| Error::Header(e.to_string()))?,
    };
    arch.validate().map_err(|e| Error::Header(e.to_string()))?;

    let mut out_layers = Vec::with_capacity(layers);
    for (i, &k) in arch.kernel_sizes.iter().enumerate() {
        let s = read_tensor(&mut r, &format!("layer{i}.s_filters"), &[m, k, k])?;
        let w = read_tensor(&mut r, &format!("layer{i}.w_filters"), &[m, k, k])?;
        let bias = read_tensor(&mut r, &format!("layer{i}.bias"), &[m])?;
        out_layers.push(LayerParams {
            s_filters: stack_from(s, m, k)?,
            w_filters: stack_from(w, m, k)?,
            bias,
        });
    }
    let weights = read_tensor(&mut r, "head.weights", &[m, m])?;
    let bias = read_tensor(&mut r, "head.bias", &[m])?;
    Ok(CistaNetParams {
        arch,
        layers: out_layers,
        head: HeadParams {
            weights: Matrix2::new(m, m, weights)?,
            bias,
        },
        depth_min: h.get("depth_min")?,
        depth_max: h.get("depth_max")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn params() -> CistaNetParams {
        init_params(&Architecture::new(4, 5, 9, vec![3, 5]), (-1.5, 1.5), 9, None).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let p = params();
        save_model(&p, &a).unwrap();
        let loaded = load_model(&a).unwrap();
        save_model(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.arch, p.arch);
        for (x, y) in loaded.slices().iter().zip(p.slices()) {
            for (u, v) in x.iter().zip(y) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
        // A second round trip is exact.
        assert_eq!(load_model(&b).unwrap(), loaded);
    }

    #[test]
    fn corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&params(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadMagic { .. })));

        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        match load_model(&path) {
            Err(Error::Truncated(name)) => assert_eq!(name, "head.bias"),
            other => panic!("expected truncation, got {other:?}"),
        }

        let pos = bytes.windows(9).position(|w| w == b"version=1").unwrap();
        let mut bad = bytes.clone();
        bad[pos + 8] = b'7';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Version { found: 7, .. })));

        // Header claims more channels than the tensors carry.
        let pos = bytes.windows(4).position(|w| w == b"m=4\n").unwrap();
        let mut bad = bytes.clone();
        bad[pos + 2] = b'5';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Shape { .. })));
    }
}
