//! MLE training, optimizers and checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Serialize};

use super::vocab::TokenSequence;
use super::Trainable;
use crate::error::{Error, Result};

/// A loss value with its gradient w.r.t. the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// First-order optimizers over a flat parameter vector (minimization).
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                if m.len() != params.len() {
                    *m = vec![0.0; params.len()];
                    *v = vec![0.0; params.len()];
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    params[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}

/// Mean over examples of the per-token mean negative log-likelihood of
/// `target` (end-of-sequence appended), with its gradient.
pub fn mle_loss<M: Trainable>(model: &M, batch: &[(TokenSequence, TokenSequence)]) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let vocab = model.vocab();
    let n = batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|(input, target)| {
            input.validate(vocab)?;
            target.validate(vocab)?;
            let out = target.with_eos(vocab);
            let mut grad = vec![0.0; model.params().len()];
            let len = out.len() as f64;
            let lps = model.backward(input.trimmed(vocab), &out, &mut |lps| vec![-1.0 / (len * n); lps.len()], &mut grad)?;
            Ok((-lps.iter().sum::<f64>() / len, grad))
        })
        .collect();
    let mut total = LossGrad {
        loss: 0.0,
        grad: vec![0.0; model.params().len()],
    };
    for part in parts {
        let (loss, grad) = part?;
        total.loss += loss / n;
        total.grad.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
    }
    if !total.loss.is_finite() {
        return Err(Error::Numerical {
            pair_id: "mle-batch".into(),
            detail: format!("loss {}", total.loss),
        });
    }
    Ok(total)
}

/// One optimizer step on the MLE loss; returns the pre-step loss.
pub fn train_step_mle<M: Trainable>(
    model: &mut M,
    optimizer: &mut Optimizer,
    batch: &[(TokenSequence, TokenSequence)],
) -> Result<f64> {
    let lg = mle_loss(model, batch)?;
    optimizer.step(model.params_mut(), &lg.grad);
    Ok(lg.loss)
}

/// Shuffled minibatch MLE for `epochs` passes; returns the mean loss of
/// each epoch.
pub fn mle_fit<M: Trainable>(
    model: &mut M,
    optimizer: &mut Optimizer,
    data: &[(TokenSequence, TokenSequence)],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::InvalidInput("MLE needs data and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            total += train_step_mle(model, optimizer, &batch)? * batch.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Backend state serialized as an opaque JSON blob.
pub trait Checkpoint: Serialize + DeserializeOwned {}
impl<T: Serialize + DeserializeOwned> Checkpoint for T {}

/// Writes `<run>/<step>.ckpt` and returns its path.
pub fn save_checkpoint<C: Checkpoint>(run_dir: &Path, step: u64, state: &C) -> Result<PathBuf> {
    fs::create_dir_all(run_dir)?;
    let path = run_dir.join(format!("{step}.ckpt"));
    fs::write(&path, serde_json::to_vec(state)?)?;
    Ok(path)
}

pub fn load_checkpoint<C: Checkpoint>(path: &Path) -> Result<C> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
