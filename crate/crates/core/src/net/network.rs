//! Forward pass, fused sigmoid/BCE loss and hand-written reverse pass.

use crate::conv::{
    conv_accumulate, corr_accumulate, corr_kernel_gradient, global_max_pool, ChannelStack, Matrix2,
    MaxPool,
};
use crate::error::{Error, Result};
use crate::synth::SoftLabel;

use super::{CistaNetParams, Gradients};

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Everything the reverse pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Matrix2,
    /// Input codes of every layer (`inputs[0]` is all zeros).
    inputs: Vec<ChannelStack>,
    /// Pre-activations of every layer.
    pre: Vec<ChannelStack>,
    pooled: MaxPool,
    logits: Vec<f64>,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn pooled(&self) -> &MaxPool {
        &self.pooled
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_input(x: &Matrix2, p: &CistaNetParams) -> Result<()> {
    if x.shape() != (p.arch.theta, p.arch.n) {
        return Err(Error::Dimension(format!(
            "EPI {:?} but network expects {}x{}",
            x.shape(),
            p.arch.theta,
            p.arch.n
        )));
    }
    Ok(())
}

/// Runs all layers, returning the pre-activation of each.
fn run_layers(x: &Matrix2, p: &CistaNetParams, mut keep: Option<&mut Vec<ChannelStack>>) -> ChannelStack {
    let (rows, cols) = x.shape();
    let m = p.arch.m;
    let sign = p.arch.bias_sign.factor();
    let mut z = ChannelStack::zeros(m, rows, cols);
    let mut z_is_zero = true;
    for layer in &p.layers {
        let mut pre = z.clone();
        for ch in 0..m {
            let out = pre.channel_mut(ch);
            if !z_is_zero {
                corr_accumulate(z.channel(ch), layer.s_filters.channel(ch), -1.0, out);
            }
            corr_accumulate(x, layer.w_filters.channel(ch), 1.0, out);
            let b = sign * layer.bias[ch];
            out.data_mut().iter_mut().for_each(|v| *v += b);
        }
        if let Some(store) = keep.as_deref_mut() {
            store.push(pre.clone());
        }
        for ch in pre.iter_mut() {
            ch.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        z = pre;
        z_is_zero = false;
    }
    z
}

fn head(p: &CistaNetParams, v: &[f64]) -> NetOutput {
    let m = p.arch.m;
    let logits: Vec<f64> = (0..m)
        .map(|j| {
            p.head.bias[j]
                + p.head.weights.row(j).iter().zip(v).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect();
    let probs = logits.iter().map(|&t| sigmoid(t)).collect();
    NetOutput { logits, probs }
}

/// Forward pass retaining intermediate state for [`backward`].
pub fn forward(x: &Matrix2, p: &CistaNetParams) -> Result<(NetOutput, ForwardCache)> {
    check_input(x, p)?;
    let mut pre = Vec::with_capacity(p.layers.len());
    let z = run_layers(x, p, Some(&mut pre));
    let (rows, cols) = x.shape();
    let mut inputs = Vec::with_capacity(p.layers.len());
    inputs.push(ChannelStack::zeros(p.arch.m, rows, cols));
    for pa in pre.iter().take(pre.len() - 1) {
        let mut act = pa.clone();
        for ch in act.iter_mut() {
            ch.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(act);
    }
    let pooled = global_max_pool(&z);
    let out = head(p, &pooled.values);
    let cache = ForwardCache {
        x: x.clone(),
        inputs,
        pre,
        pooled,
        logits: out.logits.clone(),
        fingerprint: p.fingerprint(),
    };
    Ok((out, cache))
}

/// Forward pass without a cache; returns per-depth probabilities.
pub fn infer(x: &Matrix2, p: &CistaNetParams) -> Result<Vec<f64>> {
    Ok(infer_full(x, p)?.probs)
}

pub(crate) fn infer_full(x: &Matrix2, p: &CistaNetParams) -> Result<NetOutput> {
    check_input(x, p)?;
    let z = run_layers(x, p, None);
    Ok(head(p, &global_max_pool(&z).values))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `label`, evaluated
/// as `max(t,0) - t*y + ln(1 + exp(-|t|))`.
pub fn bce_loss(logits: &[f64], label: &SoftLabel) -> Result<f64> {
    if logits.len() != label.values.len() {
        return Err(Error::Dimension(format!(
            "{} logits vs {} label entries",
            logits.len(),
            label.values.len()
        )));
    }
    if label.values.iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::Range("label values must lie in [0, 1]".into()));
    }
    let total: f64 = logits
        .iter()
        .zip(&label.values)
        .map(|(&t, &y)| t.max(0.0) - t * y + (-t.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

/// Exact gradients of `bce_loss(forward(x).logits, label)` for every parameter.
pub fn backward(p: &CistaNetParams, cache: &ForwardCache, label: &SoftLabel) -> Result<Gradients> {
    if cache.fingerprint != p.fingerprint() || cache.pre.len() != p.layers.len() {
        return Err(Error::StaleCache);
    }
    let m = p.arch.m;
    if label.values.len() != m {
        return Err(Error::Dimension(format!(
            "label length {} vs {m} outputs",
            label.values.len()
        )));
    }
    let sign = p.arch.bias_sign.factor();
    let mut g = Gradients::zeros_like(p);

    let delta: Vec<f64> = cache
        .logits
        .iter()
        .zip(&label.values)
        .map(|(&t, &y)| (sigmoid(t) - y) / m as f64)
        .collect();
    let v = &cache.pooled.values;
    for j in 0..m {
        g.head.bias[j] = delta[j];
        for k in 0..m {
            g.head.weights[(j, k)] = delta[j] * v[k];
        }
    }
    let (rows, cols) = cache.x.shape();
    let mut dz = ChannelStack::zeros(m, rows, cols);
    for k in 0..m {
        let dv: f64 = (0..m).map(|j| p.head.weights[(j, k)] * delta[j]).sum();
        dz.channel_mut(k)[cache.pooled.positions[k]] = dv;
    }

    for (i, layer) in p.layers.iter().enumerate().rev() {
        let ks = layer.kernel_size();
        let pre = &cache.pre[i];
        // ReLU: subgradient 0 at exactly 0.
        for (d, a) in dz.iter_mut().zip(pre.iter()) {
            for (dv, &av) in d.data_mut().iter_mut().zip(a.data()) {
                if av <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let dp = dz;
        let input_is_zero = i == 0;
        let gl = &mut g.layers[i];
        for ch in 0..m {
            let dpc = dp.channel(ch);
            if !input_is_zero {
                *gl.s_filters.channel_mut(ch) =
                    corr_kernel_gradient(cache.inputs[i].channel(ch), dpc, ks, ks).scaled(-1.0);
            }
            *gl.w_filters.channel_mut(ch) = corr_kernel_gradient(&cache.x, dpc, ks, ks);
            gl.bias[ch] = sign * dpc.data().iter().sum::<f64>();
        }
        if input_is_zero {
            break;
        }
        // dZ_in = dP - S^T dP, where the adjoint of correlation is convolution.
        let mut next = dp.clone();
        for ch in 0..m {
            conv_accumulate(dp.channel(ch), layer.s_filters.channel(ch), -1.0, next.channel_mut(ch));
        }
        dz = next;
    }
    Ok(g)
}
