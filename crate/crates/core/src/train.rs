//! The distillation loop.
//!
//! One step: draw the batch; sample masks; run the frozen teachers on their
//! masked views without recording gradients; run the student on its masked
//! view; adapt; gate; fuse; compute the losses; backpropagate; AdamW update.
//! Every random draw is addressed by `(seed, step, ...)`.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::gating::{consensus_gating, GatingVars};
use crate::loss::{fuse, total_loss, HeadPair, LossReport, LossVars, ProjectionHead};
use crate::masking::{apply_mask_var, sample_mask_set, MaskSet, MaskSpec};
use crate::nn::{Parameterized, Scope};
use crate::optim::{lr_at, AdamW, Moments};
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{patchify, ViTEncoder};

/// Everything one step consumes besides the trainable state.
#[derive(Debug, Clone)]
pub struct StepBatch<T> {
    pub step: u64,
    /// `[B, N, P²·C]`, after the optional student jitter.
    pub student_patches: Tensor<T>,
    pub masks: MaskSet,
    /// Outputs of the active teachers on their masked views, `[B, N + 1, D_T]`.
    pub teacher_tokens: Vec<Tensor<T>>,
}

/// Values that replace parts of the graph with constants. Used by the
/// gradient check to evaluate exactly the function whose gradient the
/// stop-gradient graph computes.
#[derive(Debug, Clone, Default)]
pub struct Overrides<T> {
    pub alpha: Option<Tensor<T>>,
    pub phi_target: Option<ProjectionHead<T>>,
    pub psi_target: Option<ProjectionHead<T>>,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub student: Var,
    pub adapted: Vec<Var>,
    pub gating: Option<GatingVars>,
    pub alpha: Var,
    pub fused: Var,
    pub loss: LossVars,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub l_token: f64,
    pub l_spatial: f64,
    pub total: f64,
    pub alpha_mean: Vec<f64>,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub struct Distiller<T> {
    pub config: Config,
    pub student: ViTEncoder<T>,
    /// Active teachers, frozen; parallel to `teacher_ids`.
    pub teachers: Vec<ViTEncoder<T>>,
    pub teacher_ids: Vec<usize>,
    pub noise: Vec<bool>,
    pub adapters: Vec<Adapter<T>>,
    pub phi: ProjectionHead<T>,
    pub psi: ProjectionHead<T>,
    pub optimizer: AdamW<T>,
    /// Completed steps.
    pub step: u64,
    mask_spec: MaskSpec,
}

impl<T: Scalar> Distiller<T> {
    /// Build from a validated config and the full teacher list
    /// (`teachers.count` encoders; the active subset is picked here).
    pub fn new(config: Config, all_teachers: Vec<ViTEncoder<T>>) -> Result<Self> {
        config.validate()?;
        if all_teachers.len() != config.teachers.count {
            return Err(Error::config(format!(
                "{} teacher encoders supplied for teachers.count = {}",
                all_teachers.len(),
                config.teachers.count
            )));
        }
        for t in &all_teachers {
            if t.config != config.teacher {
                return Err(Error::config("teacher encoder does not match the teacher architecture"));
            }
        }
        let seed = config.train.seed;
        let ids = config.active_teachers();
        let ds = config.student.embed_dim;
        let dt = config.teacher.embed_dim;
        let student = ViTEncoder::new(config.student.clone(), &mut rng::stream(seed, &[streams::INIT_STUDENT]))?;
        let adapters = ids
            .iter()
            .map(|&id| Adapter::new(dt, ds, &mut rng::stream(seed, &[streams::INIT_ADAPTER, id as u64])))
            .collect();
        let k = config.loss.projection_dim;
        let phi = ProjectionHead::new(ds, k, &mut rng::stream(seed, &[streams::INIT_HEADS, 0]));
        let psi = ProjectionHead::new(ds, k, &mut rng::stream(seed, &[streams::INIT_HEADS, 1]));
        let mut teachers: Vec<Option<ViTEncoder<T>>> = all_teachers.into_iter().map(Some).collect();
        let active: Vec<ViTEncoder<T>> = ids
            .iter()
            .map(|&id| teachers[id].take().expect("subset ids are distinct").frozen())
            .collect();
        Ok(Self {
            noise: ids.iter().map(|id| config.teachers.noise.contains(id)).collect(),
            mask_spec: config.active_mask()?,
            optimizer: AdamW::new(config.optim.clone()),
            teacher_ids: ids,
            teachers: active,
            student,
            adapters,
            phi,
            psi,
            step: 0,
            config,
        })
    }

    pub fn num_teachers(&self) -> usize {
        self.teachers.len()
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps()
    }

    /// Visit every trainable tensor under its tape name.
    pub fn visit_trainable(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.student.visit("student", f);
        for (i, a) in self.adapters.iter().enumerate() {
            a.visit(&format!("adapters.{i}"), f);
        }
        self.phi.visit("phi", f);
        self.psi.visit("psi", f);
    }

    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.student.visit_mut("student", f);
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.visit_mut(&format!("adapters.{i}"), f);
        }
        self.phi.visit_mut("phi", f);
        self.psi.visit_mut("psi", f);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_trainable(&mut |n, _| out.push(n));
        out
    }

    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_trainable(&mut |n, t| out.push((n, t.clone())));
        out
    }

    /// Teacher parameters, active teachers only.
    pub fn teacher_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (t, id) in self.teachers.iter().zip(&self.teacher_ids) {
            out.extend(t.named_params(&format!("teachers.{id}")));
        }
        out
    }

    /// Masks for `step` over a batch of `batch` samples.
    pub fn masks_at(&self, batch: usize, step: u64) -> Result<MaskSet> {
        let seed = rng::derive_seed(self.config.train.seed, &[streams::MASKS, step]);
        sample_mask_set(batch, self.config.student.num_patches(), &self.mask_spec, seed)
    }

    /// Assemble the inputs of step `step` from `dataset`.
    pub fn prepare(&self, dataset: &Dataset, step: u64) -> Result<StepBatch<T>> {
        let b = self.config.train.batch_size;
        let idx = data::step_indices(dataset.len(), b, self.config.train.seed, step)?;
        self.prepare_images(&dataset.batch(&idx), step)
    }

    /// Assemble step inputs from explicit `[B, C, H, W]` images.
    pub fn prepare_images(&self, images: &Tensor<T>, step: u64) -> Result<StepBatch<T>> {
        let seed = self.config.train.seed;
        let b = images.shape()[0];
        let p = self.config.student.patch_size;
        let patches = patchify(images, p)?;
        let student_patches = if self.config.augment.student_jitter {
            let jittered = data::color_jitter(images, &mut rng::stream(seed, &[streams::JITTER, step]));
            patchify(&jittered, p)?
        } else {
            patches.clone()
        };
        let masks = self.masks_at(b, step)?;
        let teacher_tokens = self.teacher_forward(&patches, &masks, step)?;
        Ok(StepBatch {
            step,
            student_patches,
            masks,
            teacher_tokens,
        })
    }

    /// Frozen teacher outputs on their masked views. Noise teachers emit
    /// fresh standard-normal tokens.
    pub fn teacher_forward(&self, patches: &Tensor<T>, masks: &MaskSet, step: u64) -> Result<Vec<Tensor<T>>> {
        let b = patches.shape()[0];
        let shape = [b, self.config.teacher.num_tokens(), self.config.teacher.embed_dim];
        let mut out = Vec::with_capacity(self.teachers.len());
        for (m, teacher) in self.teachers.iter().enumerate() {
            if self.noise[m] {
                let mut r = rng::stream(self.config.train.seed, &[streams::NOISE_TEACHER, step, self.teacher_ids[m] as u64]);
                out.push(Tensor::from_fn(&shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    T::from_f64(z)
                }));
                continue;
            }
            let stage = format!("teacher {} forward", self.teacher_ids[m]);
            let mut tape = Tape::no_grad();
            let scope = Scope::new("", false);
            let x = tape.constant(patches.clone());
            let z = teacher.embed(&mut tape, &scope, x).map_err(|e| e.in_stage(&stage))?;
            let z = apply_mask_var(&mut tape, z, &masks.teachers[m])?;
            let z = teacher.forward(&mut tape, &scope, z).map_err(|e| e.in_stage(&stage))?;
            out.push(tape.value(z).clone());
        }
        Ok(out)
    }

    /// Record the trainable part of a step on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &StepBatch<T>, ov: &Overrides<T>) -> Result<ForwardVars> {
        let scope = Scope::new("student", true);
        let x = tape.constant(batch.student_patches.clone());
        let z = self.student.embed(tape, &scope, x).map_err(|e| e.in_stage("student embed"))?;
        let z = apply_mask_var(tape, z, &batch.masks.student)?;
        let student = self.student.forward(tape, &scope, z).map_err(|e| e.in_stage("student forward"))?;

        let mut adapted = Vec::with_capacity(self.adapters.len());
        for (m, (a, t)) in self.adapters.iter().zip(&batch.teacher_tokens).enumerate() {
            let tv = tape.constant(t.clone());
            let scope = Scope::new(format!("adapters.{m}"), true);
            adapted.push(a.forward(tape, &scope, tv).map_err(|e| e.in_stage(&format!("adapter {m}")))?);
        }

        let (gating, alpha) = match &ov.alpha {
            Some(a) => (None, tape.constant(a.clone())),
            None => {
                let g = consensus_gating(tape, student, &adapted, &self.config.gating).map_err(|e| e.in_stage("gating"))?;
                (Some(g), g.alpha)
            }
        };
        let fused = fuse(tape, alpha, &adapted).map_err(|e| e.in_stage("fusion"))?;
        let phi = HeadPair {
            student: &self.phi,
            target: ov.phi_target.as_ref().unwrap_or(&self.phi),
            scope: "phi",
        };
        let psi = HeadPair {
            student: &self.psi,
            target: ov.psi_target.as_ref().unwrap_or(&self.psi),
            scope: "psi",
        };
        let loss = total_loss(tape, student, fused, &batch.masks.student, phi, psi, &self.config.loss)
            .map_err(|e| e.in_stage("loss"))?;
        Ok(ForwardVars {
            student,
            adapted,
            gating,
            alpha,
            fused,
            loss,
        })
    }

    /// Loss value without recording gradients.
    pub fn loss_value(&self, batch: &StepBatch<T>, ov: &Overrides<T>) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let fv = self.forward(&mut tape, batch, ov)?;
        Ok(tape.value(fv.loss.total).item().as_f64())
    }

    /// Forward and backward; returns the report, the gradients by name
    /// and the tape for inspection.
    pub fn gradients(&self, batch: &StepBatch<T>, ov: &Overrides<T>) -> Result<(LossReport, ForwardVars, Tape<T>, Gradients<T>)> {
        let mut tape = Tape::new();
        let fv = self.forward(&mut tape, batch, ov)?;
        let report = LossReport::from_tape(&tape, &fv.loss, &batch.masks.student, tape.value(fv.alpha));
        if self.adapters.len() == 1 && !tape.value(fv.fused).bit_eq(tape.value(fv.adapted[0])) {
            return Err(Error::Contract("single-teacher fused target differs from the adapted teacher".into()));
        }
        let grads = tape.backward(fv.loss.total).map_err(|e| e.in_stage("backward"))?;
        Ok((report, fv, tape, grads))
    }

    /// One optimization step on prepared inputs.
    pub fn step_on(&mut self, batch: &StepBatch<T>) -> Result<StepMetrics> {
        if batch.step != self.step {
            return Err(Error::Contract(format!(
                "batch prepared for step {} but the run is at step {}",
                batch.step, self.step
            )));
        }
        let (report, _, tape, grads) = self.gradients(batch, &Overrides::default())?;
        let named = grads.named(&tape);
        let lr = lr_at(self.step as usize, self.total_steps(), &self.config.optim);

        let mut grad_list = Vec::new();
        let mut missing = Vec::new();
        self.visit_trainable(&mut |n, t| match named.get(&n) {
            Some(g) => grad_list.push((n, g)),
            None => missing.push((n, Tensor::zeros(t.shape()))),
        });
        if let Some((name, _)) = grad_list.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric {
                stage: format!("gradient of {name}"),
            });
        }
        let scale = self.optimizer.clip_scale(grad_list.iter().map(|(_, g)| *g));
        let zeros: std::collections::HashMap<String, Tensor<T>> = missing.into_iter().collect();

        let mut opt = std::mem::replace(&mut self.optimizer, AdamW::new(self.config.optim.clone()));
        let mut result = Ok(());
        self.visit_trainable_mut(&mut |n, p| {
            if result.is_err() {
                return;
            }
            let g = named.get(&n).or_else(|| zeros.get(&n)).expect("every trainable tensor has a gradient");
            result = opt.update(&n, p, g, lr, scale);
        });
        opt.finish_step();
        self.optimizer = opt;
        result?;

        let metrics = StepMetrics {
            step: self.step,
            lr,
            l_token: report.l_token,
            l_spatial: report.l_spatial,
            total: report.total,
            alpha_mean: report.alpha_mean,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let batch = self.prepare(dataset, self.step)?;
        self.step_on(&batch)
    }

    /// Train until `until` completed steps, streaming metrics lines.
    pub fn run(&mut self, dataset: &Dataset, until: u64, mut metrics: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.step < until {
            let m = self.train_step(dataset)?;
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", m.to_json_line())?;
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Student, adapters, heads, optimizer moments and position.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut tensors = self.trainable_params();
        for (name, st) in &self.optimizer.state {
            tensors.push((format!("optim.m.{name}"), st.m.clone()));
            tensors.push((format!("optim.v.{name}"), st.v.clone()));
        }
        Checkpoint {
            digest: self.config.student_digest(),
            tensors,
            rng_seed: self.config.train.seed,
            rng_position: self.step,
            step: self.step,
        }
    }

    /// Restore everything [`Distiller::to_checkpoint`] wrote.
    pub fn restore(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        ckpt.check_digest(&self.config.student_digest())?;
        if ckpt.rng_seed != self.config.train.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with seed {} but the run uses seed {}",
                ckpt.rng_seed, self.config.train.seed
            )));
        }
        let names = self.trainable_names();
        let adapters_in_ckpt = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("adapters.") && n.ends_with(".proj.weight"))
            .count();
        if adapters_in_ckpt != self.adapters.len() {
            return Err(Error::config(format!(
                "checkpoint holds {adapters_in_ckpt} adapters but {} teachers are configured",
                self.adapters.len()
            )));
        }
        let mut result = Ok(());
        self.visit_trainable_mut(&mut |n, t| {
            if result.is_ok() {
                result = ckpt.restore_into([(n, t)]);
            }
        });
        result?;
        self.optimizer = AdamW::new(self.config.optim.clone());
        for n in names {
            if let (Some(m), Some(v)) = (ckpt.get(&format!("optim.m.{n}")), ckpt.get(&format!("optim.v.{n}"))) {
                self.optimizer.state.insert(
                    n,
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        self.optimizer.t = ckpt.step;
        self.step = ckpt.step;
        Ok(())
    }

    /// Student-mask-free class-token features `[B, D_S]` for probing.
    pub fn student_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        encoder_features(&self.student, images)
    }
}

/// The student encoder alone from a distillation checkpoint.
pub fn student_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, config: &Config) -> Result<ViTEncoder<T>> {
    ckpt.check_digest(&config.student_digest())?;
    let mut enc = ViTEncoder::new(config.student.clone(), &mut rng::stream(0, &[]))?;
    let mut result = Ok(());
    enc.visit_mut("student", &mut |n, t| {
        if result.is_ok() {
            result = ckpt.restore_into([(n, t)]);
        }
    });
    result?;
    Ok(enc.frozen())
}

/// Class-token output of an encoder on unmasked images, `[B, D]`.
pub fn encoder_features<T: Scalar>(enc: &ViTEncoder<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let tokens = enc.infer(images)?;
    let &[b, _, d] = tokens.shape() else { unreachable!() };
    let mut out = Vec::with_capacity(b * d);
    for row in tokens.data().chunks(tokens.numel() / b) {
        out.extend_from_slice(&row[..d]);
    }
    Tensor::from_vec(&[b, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::vit::ViTConfig;

    fn small_config() -> Config {
        let student = ViTConfig {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
        };
        let mut cfg = Config {
            teacher: ViTConfig {
                embed_dim: 12,
                num_heads: 2,
                ..student.clone()
            },
            student,
            ..Default::default()
        };
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.data.count = 16;
        cfg.loss.projection_dim = 6;
        cfg
    }

    fn teachers(cfg: &Config) -> Vec<ViTEncoder<f64>> {
        (0..cfg.teachers.count)
            .map(|m| ViTEncoder::new(cfg.teacher.clone(), &mut rng::stream(99, &[m as u64])).unwrap())
            .collect()
    }

    fn dataset(cfg: &Config) -> Dataset {
        synthetic(&SyntheticSpec {
            image_size: 16,
            channels: 3,
            count: cfg.data.count,
            class_count: 3,
            noise: 0.2,
            seed: 1,
            first_index: 0,
        })
        .unwrap()
    }

    #[test]
    fn step_updates_trainables_only() {
        let cfg = small_config();
        let ds = dataset(&cfg);
        let mut d = Distiller::new(cfg, teachers(&small_config())).unwrap();
        let t_before = d.teacher_params();
        let s_before = d.trainable_params();
        d.run(&ds, 3, None).unwrap();
        assert_eq!(d.step, 3);
        for ((n, a), (_, b)) in t_before.iter().zip(d.teacher_params()) {
            assert!(a.bit_eq(&b), "{n}");
        }
        let changed = s_before
            .iter()
            .zip(d.trainable_params())
            .filter(|((_, a), (_, b))| !a.bit_eq(b))
            .count();
        assert!(changed > s_before.len() / 2);
        let keys: Vec<_> = d.optimizer.state.keys().cloned().collect();
        let mut names = d.trainable_names();
        names.sort();
        assert_eq!(keys, names);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let cfg = small_config();
        let ds = dataset(&cfg);
        let mut a = Distiller::new(cfg.clone(), teachers(&cfg)).unwrap();
        let ma = a.run(&ds, 6, None).unwrap();

        let mut b = Distiller::new(cfg.clone(), teachers(&cfg)).unwrap();
        let mb1 = b.run(&ds, 3, None).unwrap();
        let mut bytes = Vec::new();
        b.to_checkpoint().write_to(&mut bytes).unwrap();
        let ckpt = Checkpoint::read_from(bytes.as_slice()).unwrap();
        let mut c = Distiller::new(cfg.clone(), teachers(&cfg)).unwrap();
        c.restore(&ckpt).unwrap();
        let mc = c.run(&ds, 6, None).unwrap();
        let joined: Vec<_> = mb1.into_iter().chain(mc).collect();
        assert_eq!(ma, joined);
        for ((_, x), (_, y)) in a.trainable_params().iter().zip(c.trainable_params()) {
            assert!(x.bit_eq(&y));
        }
    }

    #[test]
    fn single_teacher_subset_and_noise() {
        let mut cfg = small_config();
        cfg.train.teacher_subset = Some(vec![1]);
        cfg.gating.variant = crate::gating::GatingVariant::Uniform;
        let ds = dataset(&cfg);
        let mut d = Distiller::new(cfg.clone(), teachers(&cfg)).unwrap();
        let m = d.run(&ds, 2, None).unwrap();
        assert_eq!(m[0].alpha_mean, vec![1.0]);

        let mut cfg = small_config();
        cfg.teachers.noise = vec![2];
        let d = Distiller::new(cfg.clone(), teachers(&cfg)).unwrap();
        let batch = d.prepare(&ds, 0).unwrap();
        let noise = &batch.teacher_tokens[2];
        let mean = noise.sum() / noise.numel() as f64;
        assert!(mean.abs() < 0.1);
    }

    #[test]
    fn restore_rejects_other_architectures() {
        let cfg = small_config();
        let d = Distiller::new(cfg.clone(), teachers(&cfg)).unwrap();
        let ckpt = d.to_checkpoint();
        let mut other_cfg = cfg.clone();
        other_cfg.loss.projection_dim = 7;
        let mut other = Distiller::new(other_cfg, teachers(&cfg)).unwrap();
        assert!(matches!(other.restore(&ckpt), Err(Error::Checkpoint(_))));
    }
}
