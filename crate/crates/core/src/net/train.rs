//! Mini-batch ADAM training against soft labels.

use std::fmt::Write as _;
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{read_dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::synth::EpiDictionary;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model_io::save_model;
use super::network::{backward, bce_loss, forward, infer_full};
use super::{init_params, Architecture, CistaNetParams, Gradients};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_fraction: f64,
    /// Compute per-sample gradients on the calling thread only. Results are
    /// identical either way; batch gradients are always reduced in index order.
    pub single_thread: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            single_thread: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub train_count: usize,
    pub val_count: usize,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|b| self.epochs[b - 1].val_loss)
    }
}

fn sample_gradient(p: &CistaNetParams, s: &LabeledSample) -> Result<(f64, Gradients)> {
    let (out, cache) = forward(&s.epi, p)?;
    let loss = bce_loss(&out.logits, &s.label)?;
    let g = backward(p, &cache, &s.label)?;
    Ok((loss, g))
}

/// Per-sample losses and gradients, returned in input order.
fn batch_gradients(
    p: &CistaNetParams,
    batch: &[&LabeledSample],
    single_thread: bool,
) -> Result<Vec<(f64, Gradients)>> {
    let workers = if single_thread {
        1
    } else {
        thread::available_parallelism().map_or(1, |n| n.get()).min(batch.len().max(1))
    };
    if workers <= 1 {
        return batch.iter().map(|s| sample_gradient(p, s)).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(|s| sample_gradient(p, s)).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("gradient worker panicked")?);
        }
        Ok(out)
    })
}

fn mean_loss(p: &CistaNetParams, samples: &[&LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        total += bce_loss(&infer_full(&s.epi, p)?.logits, &s.label)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains from `init`, returning the parameters with the best validation loss
/// (training loss when there is no validation split).
pub fn train(
    samples: &[LabeledSample],
    init: CistaNetParams,
    hyper: &TrainHyper,
) -> Result<(CistaNetParams, TrainingReport)> {
    hyper.adam.validate()?;
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&hyper.val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {}",
            hyper.val_fraction
        )));
    }
    let m = init.arch.m;
    if let Some(bad) = samples
        .iter()
        .find(|s| s.epi.shape() != (init.arch.theta, init.arch.n) || s.label.values.len() != m)
    {
        return Err(Error::Config(format!(
            "sample EPI {:?} / label {} incompatible with architecture {}x{} / {m}",
            bad.epi.shape(),
            bad.label.values.len(),
            init.arch.theta,
            init.arch.n
        )));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    order.shuffle(&mut split_rng);
    let mut val_count = (samples.len() as f64 * hyper.val_fraction).round() as usize;
    if hyper.val_fraction > 0.0 && val_count == 0 && samples.len() >= 2 {
        val_count = 1;
    }
    let (val_idx, train_idx) = order.split_at(val_count);
    let val: Vec<&LabeledSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() && hyper.epochs > 0 {
        return Err(Error::Config("no training samples after the validation split".into()));
    }

    let mut params = init;
    let mut best = params.clone();
    let mut report = TrainingReport {
        epochs: Vec::with_capacity(hyper.epochs),
        best_epoch: None,
        train_count: train_idx.len(),
        val_count,
    };
    let mut best_score = f64::INFINITY;
    let mut state = AdamState::new(&params);

    for epoch in 1..=hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(epoch as u64);
        train_idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, chunk) in train_idx.chunks(hyper.batch).enumerate() {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let results = batch_gradients(&params, &batch, hyper.single_thread)?;
            let mut grad = Gradients::zeros_like(&params);
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for (loss, g) in &results {
                batch_loss += loss;
                grad.accumulate(scale, g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    param_norms: params.tensor_norms(),
                });
            }
            loss_sum += batch_loss;
            adam_step(&mut params, &grad, &mut state, &hyper.adam)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = mean_loss(&params, &val)?;
        if !val.is_empty() && !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: usize::MAX,
                param_norms: params.tensor_norms(),
            });
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let score = if val.is_empty() { train_loss } else { val_loss };
        if score < best_score {
            best_score = score;
            best = params.clone();
            report.best_epoch = Some(epoch);
        }
    }
    Ok((best, report))
}

/// Loads a dataset, initialises a network for it, trains, and saves the
/// best parameters to `out_model_path`.
pub fn train_from_file(
    dataset_path: &Path,
    arch: &Architecture,
    init_dictionary: Option<&EpiDictionary>,
    hyper: &TrainHyper,
    out_model_path: &Path,
) -> Result<TrainingReport> {
    let (header, samples) = read_dataset(dataset_path)?;
    if header.m != arch.m || header.theta != arch.theta || header.n != arch.n {
        return Err(Error::Config(format!(
            "dataset is m={} theta={} n={} but architecture is m={} theta={} n={}",
            header.m, header.theta, header.n, arch.m, arch.theta, arch.n
        )));
    }
    let init = init_params(
        arch,
        (header.depth_min, header.depth_max),
        hyper.seed,
        init_dictionary,
    )?;
    let (best, report) = train(&samples, init, hyper)?;
    save_model(&best, out_model_path)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_samples, GenerateOptions};
    use crate::synth::OpticsConfig;

    fn tiny() -> (OpticsConfig, Vec<LabeledSample>) {
        let cfg = OpticsConfig {
            theta_u: 5,
            theta_v: 5,
            n_x: 17,
            n_y: 17,
            kappa: 0.2,
            psf_sigma: 1.0,
            depth_min: -3.0,
            depth_max: 3.0,
            depth_count: 7,
        };
        let opts = GenerateOptions {
            count: 40,
            sources_min: 1,
            sources_max: 1,
            seed: 5,
            ..Default::default()
        };
        let samples = generate_samples(&cfg, &opts).unwrap();
        (cfg, samples)
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let (_, samples) = tiny();
        let init = init_params(&Architecture::new(7, 5, 17, vec![3]), (-3.0, 3.0), 1, None).unwrap();
        let hyper = TrainHyper {
            epochs: 0,
            ..Default::default()
        };
        let (best, report) = train(&samples, init.clone(), &hyper).unwrap();
        assert_eq!(best, init);
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, None);
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let (_, samples) = tiny();
        let arch = Architecture::new(7, 5, 17, vec![3, 5]);
        let init = init_params(&arch, (-3.0, 3.0), 1, None).unwrap();
        let hyper = TrainHyper {
            epochs: 3,
            batch: 8,
            seed: 2,
            ..Default::default()
        };
        let (a, ra) = train(&samples, init.clone(), &hyper).unwrap();
        let (b, rb) = train(&samples, init.clone(), &hyper).unwrap();
        let multi = TrainHyper {
            single_thread: false,
            ..hyper.clone()
        };
        let (c, rc) = train(&samples, init, &multi).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a, c);
        assert_eq!(ra, rc);
        assert_eq!(ra.epochs.len(), 3);
        assert_eq!(ra.val_count, 4);
        for l in &a.layers {
            assert!(l.bias.iter().all(|&b| b >= 0.0));
        }
        assert!(ra.to_csv().starts_with("epoch,train_loss,val_loss\n"));
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let (_, samples) = tiny();
        let arch = Architecture::new(7, 5, 17, vec![3, 5]);
        let init = init_params(&arch, (-3.0, 3.0), 3, None).unwrap();
        let hyper = TrainHyper {
            epochs: 15,
            batch: 4,
            adam: AdamConfig {
                lr: 5e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, r) = train(&samples, init, &hyper).unwrap();
        assert!(r.epochs.last().unwrap().train_loss < r.epochs[0].train_loss);
    }

    #[test]
    fn arch_mismatch_is_config_error() {
        let (_, samples) = tiny();
        let init = init_params(&Architecture::new(6, 5, 17, vec![3]), (-3.0, 3.0), 1, None).unwrap();
        assert!(matches!(
            train(&samples, init, &TrainHyper::default()),
            Err(Error::Config(_))
        ));
    }
}
