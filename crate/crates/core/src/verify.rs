//! The `f64` verification suite: per-module property checks plus a
//! finite-difference check of the composed distillation loss.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::Adapter;
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gating::{compute_gating, GatingConfig};
use crate::gradcheck::{self, grad_check, GradCheckReport};
use crate::loss::{total_loss, HeadPair, KlDirection, LossConfig, ProjectionHead};
use crate::masking::{kept_count, sample_mask_set, MaskSpec};
use crate::nn::{Linear, Parameterized, Scope};
use crate::ops::{self, COSINE_EPS, LAYER_NORM_EPS};
use crate::optim::lr_at;
use crate::rng::{self, streams};
use crate::teachers::random_teacher;
use crate::tensor::Tensor;
use crate::train::{Distiller, Overrides, StepBatch};
use crate::vit::ViTEncoder;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

/// Deliberate defects for exercising the suite itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate KL values before they are checked.
    FlipKlSign,
}

impl FromStr for Fault {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "flip-kl-sign" => Ok(Fault::FlipKlSign),
            other => Err(Error::config(format!("unknown fault mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_grad_rel_err(&self) -> Option<f64> {
        self.checks
            .iter()
            .filter_map(|c| c.detail.strip_prefix("max rel err ")?.split_whitespace().next()?.parse().ok())
            .reduce(f64::max)
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn gradient_suite(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let check = |f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>| grad_check(f, x, GRAD_EPS, GRAD_TOL);
    let w = uniform(&[3, 5], rng);
    let g = uniform(&[5], rng);
    let other = uniform(&[2, 4, 5], rng);
    let x = uniform(&[2, 4, 5], rng);
    let mut out = Vec::new();
    out.push((
        "matmul",
        check(
            &|t, v| {
                let w = t.constant(w.clone());
                let w = t.permute(w, &[1, 0])?;
                let y = t.matmul(v, w)?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &x,
        )?,
    ));
    out.push((
        "layer_norm",
        check(
            &|t, v| {
                let gamma = t.constant(g.clone());
                let beta = t.constant(Tensor::zeros(&[5]));
                let y = t.layer_norm(v, gamma, beta, LAYER_NORM_EPS)?;
                let c = t.constant(other.clone());
                let y = t.mul(y, c)?;
                t.sum(y)
            },
            &x,
        )?,
    ));
    out.push((
        "softmax",
        check(
            &|t, v| {
                let y = t.softmax(v, 0.1)?;
                let c = t.constant(other.clone());
                let y = t.mul(y, c)?;
                t.sum(y)
            },
            &x,
        )?,
    ));
    out.push((
        "gelu",
        check(
            &|t, v| {
                let y = t.gelu(v)?;
                t.mean(y)
            },
            &x,
        )?,
    ));
    out.push((
        "cosine",
        check(
            &|t, v| {
                let c = t.constant(other.clone());
                let y = t.cosine_similarity(v, c, COSINE_EPS)?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &x,
        )?,
    ));
    out.push((
        "kl_logits",
        check(
            &|t, v| {
                let c = t.constant(other.clone());
                let a = t.kl_div_logits(v, c)?;
                let b = t.kl_div_logits(c, v)?;
                let y = t.add(a, b)?;
                t.sum(y)
            },
            &x,
        )?,
    ));
    out.push((
        "slice_concat_stack",
        check(
            &|t, v| {
                let a = t.slice(v, 1, 0, 2)?;
                let b = t.slice(v, 1, 2, 4)?;
                let c = t.concat(&[b, a], 1)?;
                let s = t.stack_last(&[c, v])?;
                let s = t.square(s)?;
                let s = t.reshape(s, &[4, 20])?;
                t.mean(s)
            },
            &x,
        )?,
    ));
    Ok(out)
}

fn grad_result(name: &str, r: &GradCheckReport) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: r.passed,
        detail: format!("max rel err {:.3e} over {} entries (worst {})", r.max_rel_err, r.checked, r.worst),
    }
}

fn check_finite_forward(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut bad = 0;
    for _ in 0..50 {
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let x = uniform(&[3, 7], rng).map(|v| v * scale);
        let y = uniform(&[3, 7], rng).map(|v| v * scale);
        let outs = [
            ops::softmax(&x, 0.1)?,
            ops::log_softmax(&x, 1.0)?,
            ops::layer_norm(&x, &Tensor::ones(&[7]), &Tensor::zeros(&[7]), LAYER_NORM_EPS)?,
            ops::cosine_similarity(&x, &y, COSINE_EPS)?,
            ops::kl_div_logits(&x, &y)?.0,
            ops::gelu(&x),
        ];
        bad += outs.iter().filter(|t| !t.is_finite()).count();
    }
    Ok(CheckResult {
        name: "autograd.finite_forward".into(),
        passed: bad == 0,
        detail: format!("{bad} non-finite outputs over 300 evaluations"),
    })
}

fn check_vit(cfg: &Config) -> Result<CheckResult> {
    let enc = ViTEncoder::<f64>::new(cfg.student.clone(), &mut rng::stream(cfg.train.seed, &[streams::VERIFY, 1]))?;
    let images = uniform(&[2, cfg.student.in_channels, cfg.student.image_size, cfg.student.image_size], &mut rng::stream(cfg.train.seed, &[streams::VERIFY, 2]));
    let mut tape = Tape::new();
    let scope = Scope::new("student", true);
    let x = tape.constant(crate::vit::patchify(&images, cfg.student.patch_size)?);
    let z = enc.embed(&mut tape, &scope, x)?;
    let z = enc.forward(&mut tape, &scope, z)?;
    let shape_ok = tape.shape(z) == [2, cfg.student.num_tokens(), cfg.student.embed_dim];
    let w = tape.constant(uniform(tape.shape(z), &mut rng::stream(cfg.train.seed, &[streams::VERIFY, 3])));
    let y = tape.mul(z, w)?;
    let loss = tape.sum(y)?;
    let grads = tape.backward(loss)?.named(&tape);
    let mut dead = Vec::new();
    enc.visit("student", &mut |n, _| {
        if !grads.get(&n).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
            dead.push(n);
        }
    });
    Ok(CheckResult {
        name: "vit.shape_and_gradient_flow".into(),
        passed: shape_ok && dead.is_empty(),
        detail: format!("output {:?}, parameters without gradient: {dead:?}", tape.shape(z)),
    })
}

fn check_masking(cfg: &Config) -> Result<CheckResult> {
    let n = cfg.student.num_patches();
    let spec = &cfg.mask;
    let mut failures = Vec::new();
    for draw in 0..20u64 {
        let set = sample_mask_set(4, n, spec, draw)?;
        let again = sample_mask_set(4, n, spec, draw)?;
        if set != again {
            failures.push(format!("draw {draw} not reproducible"));
        }
        let masks = std::iter::once((spec.student, &set.student)).chain(spec.teachers.iter().copied().zip(&set.teachers));
        for (ratio, m) in masks {
            for b in 0..m.batch() {
                if !m.is_kept(b, 0) {
                    failures.push(format!("draw {draw}: class token hidden"));
                }
                if m.kept_patches(b) != kept_count(ratio, n) {
                    failures.push(format!("draw {draw}: kept {} at ratio {ratio}", m.kept_patches(b)));
                }
            }
        }
    }
    failures.truncate(3);
    Ok(CheckResult {
        name: "masking.contract".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() { "kept counts, class token, determinism".into() } else { failures.join("; ") },
    })
}

fn check_adapter(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let d = 6;
    let mut a = Adapter::<f64>::new(d, d, rng);
    a.proj = Linear {
        weight: Tensor::eye(d),
        bias: Tensor::zeros(&[d]),
    };
    let x = uniform(&[2, 3, d], rng);
    let got = a.adapt(&x)?;
    let want = ops::layer_norm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), LAYER_NORM_EPS)?;
    let diff = got.max_abs_diff(&want);
    Ok(CheckResult {
        name: "adapter.identity_projection".into(),
        passed: diff <= 1e-12,
        detail: format!("max abs diff {diff:.2e}"),
    })
}

fn check_gating_algebra(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = GatingConfig::default();
    let mut worst = [0.0f64; 3];
    for _ in 0..200 {
        let (b, n, m, d) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(2..6));
        let student = uniform(&[b, n, d], rng);
        let adapted: Vec<_> = (0..m).map(|_| uniform(&[b, n, d], rng)).collect();
        let alpha = compute_gating(&student, &adapted, &cfg)?.alpha;
        for row in alpha.data().chunks(m) {
            worst[0] = worst[0].max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let perm = sample(rng, m, m).into_vec();
        let permuted: Vec<_> = perm.iter().map(|&i| adapted[i].clone()).collect();
        let alpha_p = compute_gating(&student, &permuted, &cfg)?.alpha;
        let scaled: Vec<_> = adapted
            .iter()
            .map(|t| {
                let c = rng.gen_range(0.1..10.0);
                t.map(|v| v * c)
            })
            .collect();
        let alpha_s = compute_gating(&student, &scaled, &cfg)?.alpha;
        for (row, (row_p, row_s)) in alpha.data().chunks(m).zip(alpha_p.data().chunks(m).zip(alpha_s.data().chunks(m))) {
            for (j, &i) in perm.iter().enumerate() {
                worst[1] = worst[1].max((row_p[j] - row[i]).abs());
            }
            for j in 0..m {
                worst[2] = worst[2].max((row_s[j] - row[j]).abs());
            }
        }
    }
    Ok(CheckResult {
        name: "gating.algebra".into(),
        passed: worst.iter().all(|&w| w <= 1e-6),
        detail: format!(
            "sum-to-one {:.1e}, permutation {:.1e}, rescaling {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    })
}

/// Two teachers close to a shared base, a student further from it, and one
/// independent teacher.
pub fn outlier_instance(rng: &mut impl Rng, tokens: usize, dim: usize) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let base = Tensor::from_fn(&[1, tokens, dim], |_| rng.gen_range(-1.0..1.0));
    let mut near = |spread: f64| Tensor::from_fn(base.shape(), |i| base.data()[i] + spread * rng.gen_range(-1.0..1.0));
    let student = near(0.3);
    let a = near(0.05);
    let b = near(0.05);
    let outlier = Tensor::from_fn(&[1, tokens, dim], |_| rng.gen_range(-1.0..1.0));
    (student, vec![a, b, outlier])
}

/// Per-teacher mean α of an outlier instance, outlier last.
pub fn outlier_trial(rng: &mut impl Rng, cfg: &GatingConfig) -> Result<Vec<f64>> {
    let (student, adapted) = outlier_instance(rng, 8, 32);
    Ok(crate::loss::alpha_means(&compute_gating(&student, &adapted, cfg)?.alpha))
}

fn check_outlier(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = GatingConfig::default();
    let mut failures = 0;
    let trials = 100;
    for _ in 0..trials {
        let a = outlier_trial(rng, &cfg)?;
        failures += !(a[2] < 1.0 / 3.0 && a[0] > 1.0 / 3.0 && a[1] > 1.0 / 3.0) as usize;
    }
    Ok(CheckResult {
        name: "gating.outlier_suppression".into(),
        passed: failures == 0,
        detail: format!("{failures} of {trials} trials violate outlier < 1/3 < agreeing"),
    })
}

fn check_losses(rng: &mut ChaCha8Rng, fault: Fault) -> Result<Vec<CheckResult>> {
    let sign = if fault == Fault::FlipKlSign { -1.0 } else { 1.0 };
    let (b, side, d, k) = (2, 3, 8, 16);
    let t = side * side + 1;
    let mut min_kl = f64::INFINITY;
    let mut max_same = 0.0f64;
    let mut max_sum_gap = 0.0f64;
    for trial in 0..50 {
        let phi = ProjectionHead::new(d, k, rng);
        let psi = ProjectionHead::new(d, k, rng);
        let s = uniform(&[b, t, d], rng).map(|v| v * 2.0);
        let f = uniform(&[b, t, d], rng).map(|v| v * 2.0);
        let mask = sample_mask_set(b, t - 1, &MaskSpec { student: 0.5, teachers: vec![] }, trial)?.student;
        for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
            let cfg = LossConfig {
                kl_direction: dir,
                ..LossConfig::default()
            };
            let eval = |student: &Tensor<f64>, fused: &Tensor<f64>| -> Result<(f64, f64, f64)> {
                let mut tape = Tape::no_grad();
                let (sv, fv) = (tape.constant(student.clone()), tape.constant(fused.clone()));
                let l = total_loss(&mut tape, sv, fv, &mask, HeadPair::shared(&phi, "phi"), HeadPair::shared(&psi, "psi"), &cfg)?;
                let read = |v: Option<Var>| tape.value(v.expect("dual loss")).item();
                Ok((read(l.l_token), read(l.l_spatial), tape.value(l.total).item()))
            };
            let (tok, spa, total) = eval(&s, &f)?;
            min_kl = min_kl.min(sign * tok).min(sign * spa);
            max_sum_gap = max_sum_gap.max((total - (tok + spa)).abs());
            let (tok0, spa0, _) = eval(&s, &s)?;
            max_same = max_same.max(tok0.abs()).max(spa0.abs());
        }
    }
    Ok(vec![
        CheckResult {
            name: "loss.kl_nonnegative".into(),
            passed: min_kl >= 0.0,
            detail: format!("min KL {min_kl:.3e} over 200 evaluations"),
        },
        CheckResult {
            name: "loss.identical_pair_zero".into(),
            passed: max_same <= 1e-12,
            detail: format!("max |KL| {max_same:.2e}"),
        },
        CheckResult {
            name: "loss.total_is_sum".into(),
            passed: max_sum_gap == 0.0,
            detail: format!("max gap {max_sum_gap:.2e}"),
        },
    ])
}

fn check_schedule(cfg: &Config) -> CheckResult {
    let total = cfg.total_steps();
    let o = &cfg.optim;
    let w = o.warmup_steps(total);
    let ok = (w == 0 || lr_at(0, total, o) == 0.0)
        && (lr_at(w, total, o) - o.lr_peak).abs() <= 1e-15 * o.lr_peak.max(1.0)
        && lr_at(total, total, o).abs() <= 1e-12 * o.lr_peak.max(1e-300)
        && (1..=total).all(|s| s <= w || lr_at(s, total, o) <= lr_at(s - 1, total, o));
    CheckResult {
        name: "optim.schedule".into(),
        passed: ok,
        detail: format!("{total} steps, warmup {w}, peak {}", o.lr_peak),
    }
}

/// A small-batch `f64` distiller at the architecture of `cfg`, with random
/// teachers.
pub fn verification_distiller(cfg: &Config, batch: usize) -> Result<Distiller<f64>> {
    let mut c = cfg.clone();
    c.train.batch_size = batch;
    c.data.count = c.data.count.max(batch);
    c.teachers.dir = None;
    let teachers = (0..c.teachers.count)
        .map(|id| random_teacher::<f64>(&c, id))
        .collect::<Result<Vec<_>>>()?;
    Distiller::new(c, teachers)
}

/// Random images through `d`'s step-0 pipeline.
pub fn verification_batch(d: &Distiller<f64>, batch: usize) -> Result<StepBatch<f64>> {
    let s = &d.config.student;
    let mut rng = rng::stream(d.config.train.seed, &[streams::VERIFY, 5]);
    let images = uniform(&[batch, s.in_channels, s.image_size, s.image_size], &mut rng);
    d.prepare_images(&images, d.step)
}

/// Central differences of the total loss against tape gradients at
/// `samples` random trainable entries. The gating weights and the
/// teacher-side head weights are held at their current values in the
/// numeric evaluation, matching the constants the tape sees.
pub fn composed_grad_check(d: &mut Distiller<f64>, batch: &StepBatch<f64>, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let (_, fv, tape, grads) = d.gradients(batch, &Overrides::default())?;
    let named = grads.named(&tape);
    let overrides = Overrides {
        alpha: Some(tape.value(fv.alpha).clone()),
        phi_target: Some(d.phi.clone()),
        psi_target: Some(d.psi.clone()),
    };

    let mut sizes = Vec::new();
    d.visit_trainable(&mut |n, t| sizes.push((n, t.numel())));
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    let mut rng = rng::stream(seed, &[streams::VERIFY, 6]);
    let mut picks: Vec<usize> = sample(&mut rng, total, samples.min(total)).into_vec();
    picks.sort_unstable();

    let mut pairs = Vec::with_capacity(picks.len());
    for flat in picks {
        let mut offset = flat;
        let (name, idx) = sizes
            .iter()
            .find_map(|(n, s)| {
                if offset < *s {
                    Some((n.clone(), offset))
                } else {
                    offset -= s;
                    None
                }
            })
            .expect("index within trainable entries");
        let analytic = named.get(&name).map_or(0.0, |g| g.data()[idx]);
        let mut orig = 0.0;
        d.visit_trainable_mut(&mut |n, t| {
            if n == name {
                orig = t.data()[idx];
            }
        });
        let mut eval_at = |v: f64| -> Result<f64> {
            d.visit_trainable_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[idx] = v;
                }
            });
            d.loss_value(batch, &overrides)
        };
        let numeric = gradcheck::central_difference(&mut eval_at, orig, GRAD_EPS)?;
        eval_at(orig)?;
        pairs.push((format!("{name}[{idx}]"), analytic, numeric));
    }
    Ok(GradCheckReport::from_pairs(&pairs, GRAD_TOL))
}

fn check_checkpoint(d: &Distiller<f64>) -> Result<CheckResult> {
    let mut bytes = Vec::new();
    d.to_checkpoint().write_to(&mut bytes)?;
    let back = Checkpoint::<f64>::read_from(bytes.as_slice())?;
    let mut fresh = verification_distiller(&d.config, d.config.train.batch_size)?;
    // scramble the trainables so a no-op restore cannot pass
    fresh.visit_trainable_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 1.0));
    fresh.restore(&back)?;
    let (a, b) = (d.trainable_params(), fresh.trainable_params());
    let equal = a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb));
    Ok(CheckResult {
        name: "checkpoint.round_trip".into(),
        passed: equal,
        detail: format!("{} tensors, {} bytes", a.len(), bytes.len()),
    })
}

/// Run every check. Numeric failures inside a check are reported as a
/// failed check rather than aborting the suite.
pub fn run_verification(cfg: &Config, fault: Fault) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.train.seed, &[streams::VERIFY, 0]);
    let mut checks = Vec::new();
    let mut record = |name: &str, r: Result<Vec<CheckResult>>| match r {
        Ok(v) => checks.extend(v),
        Err(e) => checks.push(CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        }),
    };

    record(
        "autograd.gradients",
        gradient_suite(&mut rng).map(|v| v.iter().map(|(n, r)| grad_result(&format!("autograd.grad.{n}"), r)).collect()),
    );
    record("autograd.finite_forward", check_finite_forward(&mut rng).map(|c| vec![c]));
    record("vit.shape_and_gradient_flow", check_vit(cfg).map(|c| vec![c]));
    record("masking.contract", check_masking(cfg).map(|c| vec![c]));
    record("adapter.identity_projection", check_adapter(&mut rng).map(|c| vec![c]));
    record("gating.algebra", check_gating_algebra(&mut rng).map(|c| vec![c]));
    record("gating.outlier_suppression", check_outlier(&mut rng).map(|c| vec![c]));
    record("loss", check_losses(&mut rng, fault));
    record("optim.schedule", Ok(vec![check_schedule(cfg)]));
    let composed = (|| {
        let mut d = verification_distiller(cfg, 2)?;
        let batch = verification_batch(&d, 2)?;
        let r = composed_grad_check(&mut d, &batch, 32, cfg.train.seed)?;
        Ok(vec![grad_result("train.composed_gradients", &r), check_checkpoint(&d)?])
    })();
    record("train.composed_gradients", composed);
    Ok(VerifyReport { checks })
}
