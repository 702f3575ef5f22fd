//! Teacher construction: random initialization, a short masked-reconstruction
//! warm-up, and teacher checkpoint files.

use std::path::{Path, PathBuf};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, TeacherInit};
use crate::data::{self, Dataset};
use crate::error::Result;
use crate::masking::{sample_mask_set, Mask, MaskSpec};
use crate::nn::{Linear, Parameterized, Scope};
use crate::optim::{lr_at, AdamW, OptimConfig};
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{patchify, ViTEncoder};

pub fn teacher_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("teacher_{id}.ckpt"))
}

/// Randomly initialized teacher `id`.
pub fn random_teacher<T: Scalar>(cfg: &Config, id: usize) -> Result<ViTEncoder<T>> {
    ViTEncoder::new(
        cfg.teacher.clone(),
        &mut rng::stream(cfg.train.seed, &[streams::INIT_TEACHER, id as u64]),
    )
}

/// Outcome of a reconstruction warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    /// Loss on a fixed held batch before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl PretrainReport {
    /// Fractional reduction of the held-batch loss.
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }
}

/// Mean squared pixel error over masked patches, with a linear decoder
/// from tokens back to patches.
fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &ViTEncoder<T>,
    decoder: &Linear<T>,
    patches: &Tensor<T>,
    mask: &Mask,
) -> Result<crate::autograd::Var> {
    let scope = Scope::new("enc", true);
    let n = enc.config.num_patches();
    // Hidden patches are blanked in pixel space so their tokens keep a
    // positional embedding and the encoder knows where to fill in.
    let x = tape.constant(patches.clone());
    let keep = Tensor::from_fn(&[mask.batch(), n, 1], |i| {
        if mask.is_kept(i / n, i % n + 1) {
            T::one()
        } else {
            T::zero()
        }
    });
    let keep = tape.constant(keep);
    let x = tape.mul(x, keep)?;
    let z = enc.embed(tape, &scope, x)?;
    let z = enc.forward(tape, &scope, z)?;
    let z = tape.slice(z, 1, 1, n + 1)?;
    let pred = decoder.forward(tape, &Scope::new("dec", true), z)?;
    let target = tape.constant(patches.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let b = patches.shape()[0];
    let width = patches.shape()[2];
    let mut weights = Vec::with_capacity(b * n);
    let mut hidden = 0usize;
    for bi in 0..b {
        for i in 0..n {
            let h = !mask.is_kept(bi, i + 1);
            hidden += h as usize;
            weights.push(if h { T::one() } else { T::zero() });
        }
    }
    let w = tape.constant(Tensor::from_vec(&[b, n, 1], weights)?);
    let masked = tape.mul(sq, w)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / (hidden.max(1) * width) as f64)
}

/// Train teacher `enc` for `cfg.teachers.pretrain_steps` steps of masked
/// patch reconstruction on `dataset`.
pub fn toy_pretrain<T: Scalar>(enc: &mut ViTEncoder<T>, cfg: &Config, id: usize, dataset: &Dataset) -> Result<PretrainReport> {
    let seed = rng::derive_seed(cfg.train.seed, &[streams::PRETRAIN, id as u64]);
    let steps = cfg.teachers.pretrain_steps;
    let b = cfg.train.batch_size;
    let p = cfg.teacher.patch_size;
    let n = cfg.teacher.num_patches();
    let spec = MaskSpec {
        student: cfg.teachers.pretrain_mask,
        teachers: vec![],
    };
    let mut decoder = Linear::new(cfg.teacher.embed_dim, cfg.teacher.patch_dim(), &mut rng::stream(seed, &[0]));
    let optim = OptimConfig {
        lr_peak: cfg.teachers.pretrain_lr,
        ..cfg.optim.clone()
    };
    let mut opt = AdamW::<T>::new(optim.clone());

    let held_idx: Vec<usize> = (0..b.min(dataset.len())).collect();
    let held = patchify(&dataset.batch::<T>(&held_idx), p)?;
    let held_mask = sample_mask_set(held_idx.len(), n, &spec, rng::derive_seed(seed, &[1]))?.student;
    let eval = |enc: &ViTEncoder<T>, dec: &Linear<T>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let l = reconstruction_loss(&mut tape, enc, dec, &held, &held_mask)?;
        Ok(tape.value(l).item().as_f64())
    };
    let initial_loss = eval(enc, &decoder)?;

    enc.frozen = false;
    for step in 0..steps {
        let idx = data::step_indices(dataset.len(), b, seed, step as u64)?;
        let patches = patchify(&dataset.batch::<T>(&idx), p)?;
        let mask = sample_mask_set(idx.len(), n, &spec, rng::derive_seed(seed, &[2, step as u64]))?.student;
        let mut tape = Tape::new();
        let loss = reconstruction_loss(&mut tape, enc, &decoder, &patches, &mask).map_err(|e| e.in_stage("teacher pretraining"))?;
        let grads = tape.backward(loss)?.named(&tape);
        let lr = lr_at(step, steps, &optim);
        let mut result = Ok(());
        let mut apply = |name: String, t: &mut Tensor<T>| {
            if result.is_ok() {
                if let Some(g) = grads.get(&name) {
                    result = opt.update(&name, t, g, lr, 1.0);
                }
            }
        };
        enc.visit_mut("enc", &mut apply);
        decoder.visit_mut("dec", &mut apply);
        result?;
        opt.finish_step();
    }
    enc.frozen = true;
    Ok(PretrainReport {
        steps,
        initial_loss,
        final_loss: eval(enc, &decoder)?,
    })
}

/// Teacher `id` as a checkpoint.
pub fn teacher_checkpoint<T: Scalar>(enc: &ViTEncoder<T>, cfg: &Config, steps: u64) -> Checkpoint<T> {
    Checkpoint {
        digest: cfg.teacher_digest(),
        tensors: enc.named_params("teacher"),
        rng_seed: cfg.train.seed,
        rng_position: steps,
        step: steps,
    }
}

/// Rebuild a teacher from a checkpoint, validating shapes against `cfg`.
pub fn teacher_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, cfg: &Config) -> Result<ViTEncoder<T>> {
    ckpt.check_digest(&cfg.teacher_digest())?;
    let mut enc = ViTEncoder::new(cfg.teacher.clone(), &mut rng::stream(0, &[]))?;
    let mut result = Ok(());
    enc.visit_mut("teacher", &mut |n, t| {
        if result.is_ok() {
            result = ckpt.restore_into([(n, t)]);
        }
    });
    result?;
    Ok(enc.frozen())
}

pub fn load_teacher<T: Scalar>(dir: &Path, id: usize, cfg: &Config) -> Result<ViTEncoder<T>> {
    teacher_from_checkpoint(&Checkpoint::load(&teacher_path(dir, id))?, cfg)
}

/// All `teachers.count` teachers: loaded from `teachers.dir` when set,
/// otherwise built in process per `teachers.init`.
pub fn build_teachers<T: Scalar>(cfg: &Config, dataset: &Dataset) -> Result<Vec<ViTEncoder<T>>> {
    (0..cfg.teachers.count)
        .map(|id| match &cfg.teachers.dir {
            Some(dir) => load_teacher(dir, id, cfg),
            None => {
                let mut t = random_teacher(cfg, id)?;
                if cfg.teachers.init == TeacherInit::ToyPretrain {
                    toy_pretrain(&mut t, cfg, id, dataset)?;
                }
                Ok(t.frozen())
            }
        })
        .collect()
}
