//! CISTA-net: convolutional ISTA unrolled into a feed-forward network.
//!
//! Each layer computes
//!
//! ```text
//! Z <- ReLU(Z - S ⊛ Z + W ⊛ X - b)
//! ```
//!
//! with a depthwise filter bank `S`, a per-channel input filter bank `W`
//! applied to the single-channel EPI `X`, and a non-negative per-channel
//! bias `b`. The final codes are global-max-pooled to one value per depth
//! and passed through an `M x M` fully connected layer and a sigmoid.

mod adam;
mod model_io;
mod network;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model_io::{load_model, save_model};
pub use network::{backward, bce_loss, forward, infer, ForwardCache, NetOutput};
pub use train::{train, train_from_file, EpochStats, TrainHyper, TrainingReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{estimate_lipschitz, ChannelStack, Matrix2};
use crate::error::{Error, Result};
use crate::synth::EpiDictionary;

/// Whether the layer bias is subtracted (soft-threshold reading, default) or
/// added as literally printed in the unrolled update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasSign {
    Minus,
    Plus,
}

impl BiasSign {
    pub(crate) fn factor(self) -> f64 {
        match self {
            BiasSign::Minus => -1.0,
            BiasSign::Plus => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasSign::Minus => "-",
            BiasSign::Plus => "+",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "-" | "minus" => Ok(BiasSign::Minus),
            "+" | "plus" => Ok(BiasSign::Plus),
            other => Err(Error::Config(format!("bias sign must be '-' or '+', got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Number of depth channels.
    pub m: usize,
    /// EPI angular size.
    pub theta: usize,
    /// EPI spatial size.
    pub n: usize,
    /// Square kernel size per layer; odd and non-decreasing.
    pub kernel_sizes: Vec<usize>,
    pub bias_sign: BiasSign,
}

impl Architecture {
    pub fn new(m: usize, theta: usize, n: usize, kernel_sizes: Vec<usize>) -> Self {
        Self {
            m,
            theta,
            n,
            kernel_sizes,
            bias_sign: BiasSign::Minus,
        }
    }

    pub fn layers(&self) -> usize {
        self.kernel_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.theta == 0 || self.n == 0 {
            return Err(Error::Config(format!(
                "architecture sizes must be >= 1 (m={}, theta={}, n={})",
                self.m, self.theta, self.n
            )));
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for &k in &self.kernel_sizes {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} is even")));
            }
            if k > self.theta || k > self.n {
                return Err(Error::Config(format!(
                    "kernel size {k} exceeds the {}x{} EPI",
                    self.theta, self.n
                )));
            }
        }
        if self.kernel_sizes.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "kernel schedule {:?} must be non-decreasing",
                self.kernel_sizes
            )));
        }
        Ok(())
    }

    /// Trainable scalars: per layer two depthwise banks plus a bias, then the head.
    pub fn param_count(&self) -> usize {
        let m = self.m;
        self.kernel_sizes
            .iter()
            .map(|k| 2 * m * k * k + m)
            .sum::<usize>()
            + m * m
            + m
    }

    /// Count for the same network with a full `M -> M` convolution for `S`.
    pub fn dense_param_count(&self) -> usize {
        let m = self.m;
        self.kernel_sizes
            .iter()
            .map(|k| m * m * k * k + m * k * k + m)
            .sum::<usize>()
            + m * m
            + m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub s_filters: ChannelStack,
    pub w_filters: ChannelStack,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros(m: usize, k: usize) -> Self {
        Self {
            s_filters: ChannelStack::zeros(m, k, k),
            w_filters: ChannelStack::zeros(m, k, k),
            bias: vec![0.0; m],
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.s_filters.shape().0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `M x M`, row `j` produces logit `j`.
    pub weights: Matrix2,
    pub bias: Vec<f64>,
}

/// Full parameter set plus the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct CistaNetParams {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
    pub depth_min: f64,
    pub depth_max: f64,
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

fn collect_slices<'a>(layers: &'a [LayerParams], head: &'a HeadParams) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.s_filters.iter().map(Matrix2::data));
        out.extend(l.w_filters.iter().map(Matrix2::data));
        out.push(l.bias.as_slice());
    }
    out.push(head.weights.data());
    out.push(head.bias.as_slice());
    out
}

fn collect_slices_mut<'a>(
    layers: &'a mut [LayerParams],
    head: &'a mut HeadParams,
) -> Vec<&'a mut [f64]> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.s_filters.iter_mut().map(Matrix2::data_mut));
        out.extend(l.w_filters.iter_mut().map(Matrix2::data_mut));
        out.push(l.bias.as_mut_slice());
    }
    out.push(head.weights.data_mut());
    out.push(head.bias.as_mut_slice());
    out
}

impl Gradients {
    pub fn zeros_like(p: &CistaNetParams) -> Self {
        let m = p.arch.m;
        Self {
            layers: p
                .arch
                .kernel_sizes
                .iter()
                .map(|&k| LayerParams::zeros(m, k))
                .collect(),
            head: HeadParams {
                weights: Matrix2::zeros(m, m),
                bias: vec![0.0; m],
            },
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        collect_slices(&self.layers, &self.head)
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        collect_slices_mut(&mut self.layers, &mut self.head)
    }

    /// `self += alpha * other`
    pub fn accumulate(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }
}

impl CistaNetParams {
    pub fn slices(&self) -> Vec<&[f64]> {
        collect_slices(&self.layers, &self.head)
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        collect_slices_mut(&mut self.layers, &mut self.head)
    }

    pub fn depth_grid(&self) -> Vec<f64> {
        let m = self.arch.m;
        if m == 1 {
            return vec![self.depth_min];
        }
        let step = (self.depth_max - self.depth_min) / (m - 1) as f64;
        (0..m).map(|i| self.depth_min + i as f64 * step).collect()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for s in self.slices() {
            for v in s {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Euclidean norm per layer tensor group, then head weights and bias.
    pub fn tensor_norms(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.s_filters.norm());
            out.push(l.w_filters.norm());
            out.push(l.bias.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        out.push(self.head.weights.norm());
        out.push(self.head.bias.iter().map(|v| v * v).sum::<f64>().sqrt());
        out
    }

    pub(crate) fn clamp_biases(&mut self) {
        for l in &mut self.layers {
            l.bias.iter_mut().for_each(|b| *b = b.max(0.0));
        }
    }
}

const INIT_BIAS: f64 = 0.01;

/// Seeded initialisation. Filters and head weights are uniform on
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases 0.01. With a dictionary, every
/// layer's `W` channel `m` is instead `gamma * d_m` centred in the kernel, so
/// the input injection starts as the scaled analysis operator.
pub fn init_params(
    arch: &Architecture,
    depth_range: (f64, f64),
    seed: u64,
    init_dictionary: Option<&EpiDictionary>,
) -> Result<CistaNetParams> {
    arch.validate()?;
    let m = arch.m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform_stack = |k: usize, rng: &mut ChaCha8Rng| {
        let bound = 1.0 / k as f64;
        ChannelStack::new(
            (0..m)
                .map(|_| Matrix2::from_fn(k, k, |_, _| rng.random_range(-bound..=bound)))
                .collect(),
        )
        .expect("non-empty stack")
    };
    let mut layers: Vec<LayerParams> = arch
        .kernel_sizes
        .iter()
        .map(|&k| LayerParams {
            s_filters: uniform_stack(k, &mut rng),
            w_filters: uniform_stack(k, &mut rng),
            bias: vec![INIT_BIAS; m],
        })
        .collect();
    let head_bound = 1.0 / (m as f64).sqrt();
    let head = HeadParams {
        weights: Matrix2::from_fn(m, m, |_, _| rng.random_range(-head_bound..=head_bound)),
        bias: vec![INIT_BIAS; m],
    };

    if let Some(dict) = init_dictionary {
        if dict.len() != m {
            return Err(Error::Config(format!(
                "dictionary has {} atoms, architecture has {m} channels",
                dict.len()
            )));
        }
        let (at, an) = dict.atom_shape();
        let k0 = arch.kernel_sizes[0];
        if at > k0 || an > k0 {
            return Err(Error::Config(format!(
                "{at}x{an} atoms do not fit the first {k0}x{k0} kernel"
            )));
        }
        let est = estimate_lipschitz(&dict.atoms, (arch.theta, arch.n), 1e-6, 100, seed)?;
        if est.degenerate || est.value <= 0.0 {
            return Err(Error::Config("dictionary Gram operator is zero".into()));
        }
        let gamma = 0.99 / est.value;
        for layer in &mut layers {
            let k = layer.kernel_size();
            for (w, atom) in layer.w_filters.iter_mut().zip(dict.atoms.iter()) {
                *w = atom.scaled(gamma).embed_centered(k, k)?;
            }
        }
    }

    Ok(CistaNetParams {
        arch: arch.clone(),
        layers,
        head,
        depth_min: depth_range.0,
        depth_max: depth_range.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::corr2_same;
    use crate::synth::{build_dictionary, OpticsConfig};

    fn arch() -> Architecture {
        Architecture::new(4, 5, 9, vec![3, 5])
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&arch(), (-2.0, 2.0), 11, None).unwrap();
        let b = init_params(&arch(), (-2.0, 2.0), 11, None).unwrap();
        let c = init_params(&arch(), (-2.0, 2.0), 12, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        for l in &a.layers {
            assert!(l.bias.iter().all(|&b| b == 0.01));
        }
    }

    #[test]
    fn param_counts() {
        let a = Architecture::new(21, 9, 31, vec![3, 5, 7]);
        let expected = (2 * 21 * 9 + 21) + (2 * 21 * 25 + 21) + (2 * 21 * 49 + 21) + 21 * 21 + 21;
        assert_eq!(a.param_count(), expected);
        assert!(a.param_count() < a.dense_param_count());
        let p = init_params(&a, (-10.0, 10.0), 0, None).unwrap();
        let total: usize = p.slices().iter().map(|s| s.len()).sum();
        assert_eq!(total, a.param_count());
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(4, 5, 9, vec![5, 3]).validate().is_err());
        assert!(Architecture::new(4, 5, 9, vec![4]).validate().is_err());
        assert!(Architecture::new(4, 5, 9, vec![7]).validate().is_err());
        assert!(Architecture::new(4, 5, 9, vec![]).validate().is_err());
        assert!(arch().validate().is_ok());
    }

    #[test]
    fn dictionary_init_matches_scaled_atoms() {
        let cfg = OpticsConfig {
            theta_u: 9,
            theta_v: 9,
            n_x: 31,
            n_y: 31,
            kappa: 0.1,
            psf_sigma: 1.0,
            depth_min: -2.0,
            depth_max: 2.0,
            depth_count: 5,
        };
        let dict = build_dictionary(&cfg, 5, 5).unwrap();
        let a = Architecture::new(5, 9, 31, vec![5, 7]);
        let p = init_params(&a, (-2.0, 2.0), 3, Some(&dict)).unwrap();
        let est = estimate_lipschitz(&dict.atoms, (9, 31), 1e-6, 100, 3).unwrap();
        let gamma = 0.99 / est.value;
        for layer in &p.layers {
            let k = layer.kernel_size();
            for (m, atom) in dict.atoms.iter().enumerate() {
                let embedded = atom.embed_centered(k, k).unwrap();
                let resp = corr2_same(&embedded, layer.w_filters.channel(m)).unwrap();
                let c = k / 2;
                assert!((resp[(c, c)] - gamma).abs() <= 1e-12);
                assert!(resp.data().iter().all(|&v| v <= resp[(c, c)] + 1e-15));
            }
        }
        let small = Architecture::new(5, 9, 31, vec![3, 5]);
        assert!(matches!(
            init_params(&small, (-2.0, 2.0), 3, Some(&dict)),
            Err(Error::Config(_))
        ));
    }
}
