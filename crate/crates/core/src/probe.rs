//! Linear probe: a softmax-regression classifier on frozen features.

use crate::config::ProbeConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops;
use crate::optim::{AdamW, OptimConfig};
use crate::tensor::{Scalar, Tensor};
use crate::train::encoder_features;
use crate::vit::ViTEncoder;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub class_count: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Features are extracted in chunks to bound tape memory.
const FEATURE_CHUNK: usize = 64;

/// Class-token features `[len, D]` of `enc` over every image in `data`.
pub fn extract_features<T: Scalar>(enc: &ViTEncoder<T>, data: &Dataset) -> Result<Tensor<f64>> {
    let d = enc.embed_dim();
    let mut out = Vec::with_capacity(data.len() * d);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(FEATURE_CHUNK) {
        let f = encoder_features(enc, &data.batch::<T>(chunk))?;
        out.extend(f.data().iter().map(|v| v.as_f64()));
    }
    Tensor::from_vec(&[data.len(), d], out)
}

/// Train on the leading part of `data`, report top-1 on the held-out tail.
pub fn linear_probe<T: Scalar>(enc: &ViTEncoder<T>, data: &Dataset, s: &ProbeConfig) -> Result<ProbeReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::config("linear probe needs a labeled dataset"))?;
    let k = data.class_count();
    if k < 2 {
        return Err(Error::config(format!("linear probe needs at least 2 classes, got {k}")));
    }
    let feats = extract_features(enc, data)?;
    let n_test = ((data.len() as f64) * s.holdout).round() as usize;
    if n_test == 0 || n_test >= data.len() {
        return Err(Error::config(format!("holdout {} leaves an empty split", s.holdout)));
    }
    let n_train = data.len() - n_test;
    fit_and_score(&feats, labels, k, n_train, s)
}

/// Softmax regression on precomputed features. Rows `[0, n_train)` train,
/// the rest test.
pub fn fit_and_score(feats: &Tensor<f64>, labels: &[u32], k: usize, n_train: usize, s: &ProbeConfig) -> Result<ProbeReport> {
    let &[n, d] = feats.shape() else {
        return Err(Error::dim("probe features", feats.shape(), &[0, 0]));
    };
    // standardize with training statistics
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in feats.data()[..n_train * d].chunks(d) {
        row.iter().zip(&mut mean).for_each(|(x, m)| *m += x / n_train as f64);
    }
    for row in feats.data()[..n_train * d].chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / n_train as f64;
        }
    }
    let x = Tensor::from_fn(&[n, d], |i| {
        let j = i % d;
        (feats.data()[i] - mean[j]) / (var[j].sqrt() + 1e-6)
    });
    let x_train = ops::slice(&x, 0, 0, n_train)?;

    let mut w = Tensor::<f64>::zeros(&[k, d]);
    let mut b = Tensor::<f64>::zeros(&[k]);
    let mut opt = AdamW::new(OptimConfig {
        lr_peak: s.lr,
        weight_decay: s.weight_decay,
        ..Default::default()
    });
    for _ in 0..s.epochs {
        let logits = ops::linear(&x_train, &w, Some(&b))?;
        let mut delta = ops::softmax(&logits, 1.0)?;
        for (i, row) in delta.data_mut().chunks_mut(k).enumerate() {
            row[labels[i] as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n_train as f64);
        }
        let gw = ops::matmul(&ops::permute(&delta, &[1, 0])?, &x_train)?;
        let gb = Tensor::from_fn(&[k], |c| delta.data().iter().skip(c).step_by(k).sum());
        opt.update("w", &mut w, &gw, s.lr, 1.0)?;
        opt.update("b", &mut b, &gb, s.lr, 1.0)?;
        opt.finish_step();
    }

    let logits = ops::linear(&x, &w, Some(&b))?;
    let mut correct = [0usize; 2];
    for (i, row) in logits.data().chunks(k).enumerate() {
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc })
            .0;
        if pred == labels[i] as usize {
            correct[(i >= n_train) as usize] += 1;
        }
    }
    Ok(ProbeReport {
        train_accuracy: correct[0] as f64 / n_train as f64,
        test_accuracy: correct[1] as f64 / (n - n_train) as f64,
        class_count: k,
        train_size: n_train,
        test_size: n - n_train,
    })
}
