//! Asymmetric token masking.
//!
//! The student gets a heavy mask, each teacher an independent lighter one.
//! Masks cover the full `N + 1` token sequence and always keep the class
//! token at index 0. Masked tokens are zeroed in place, so sequence length
//! never changes.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Mask ratios: fraction of patch tokens hidden from each view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub student: f64,
    pub teachers: Vec<f64>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            student: 0.75,
            teachers: vec![0.50, 0.40, 0.30],
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        for &r in std::iter::once(&self.student).chain(&self.teachers) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("mask ratio {r} outside [0, 1)")));
            }
        }
        let max_teacher = self.teachers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !self.teachers.is_empty() && self.student <= max_teacher {
            return Err(Error::config(format!(
                "student mask ratio {} must exceed every teacher ratio (max {})",
                self.student, max_teacher
            )));
        }
        Ok(())
    }

    /// Restrict to a subset of teachers, by index.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let teachers = ids
            .iter()
            .map(|&i| {
                self.teachers
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::config(format!("no mask ratio for teacher {i}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            student: self.student,
            teachers,
        })
    }
}

/// Patch tokens kept at mask ratio `ratio`: `round((1 - ratio) N)`, at least 1.
pub fn kept_count(ratio: f64, num_patches: usize) -> usize {
    (((1.0 - ratio) * num_patches as f64).round() as usize).clamp(1, num_patches.max(1))
}

/// Binary keep-mask over `[B, N + 1]` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    tokens: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn all(batch: usize, tokens: usize) -> Self {
        Self {
            batch,
            tokens,
            keep: vec![true; batch * tokens],
        }
    }

    /// Build from 0/1 values; anything else is a contract error.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [batch, tokens] = *t.shape() else {
            return Err(Error::dim("mask", t.shape(), &[0, 0]));
        };
        let keep = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::contract(format!("mask value {v} is not 0 or 1")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { batch, tokens, keep })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn is_kept(&self, b: usize, n: usize) -> bool {
        self.keep[b * self.tokens + n]
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.tokens..(b + 1) * self.tokens]
    }

    /// Number of kept entries, class token included.
    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Kept patch tokens (class token excluded) in sample `b`.
    pub fn kept_patches(&self, b: usize) -> usize {
        self.row(b)[1..].iter().filter(|&&k| k).count()
    }

    /// `[B, N + 1]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.batch, self.tokens], |i| if self.keep[i] { T::one() } else { T::zero() })
    }
}

/// Student mask plus one mask per teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub student: Mask,
    pub teachers: Vec<Mask>,
    pub seed: u64,
}

fn sample_mask(batch: usize, num_patches: usize, ratio: f64, seed: u64, stream_id: u64) -> Mask {
    let tokens = num_patches + 1;
    let kept = kept_count(ratio, num_patches);
    let mut rng = rng::stream(seed, &[stream_id]);
    let mut keep = vec![false; batch * tokens];
    for b in 0..batch {
        keep[b * tokens] = true;
        for i in index::sample(&mut rng, num_patches, kept).iter() {
            keep[b * tokens + 1 + i] = true;
        }
    }
    Mask { batch, tokens, keep }
}

/// Sample the student and teacher masks for one batch. Stream 0 is the
/// student; teacher `m` uses stream `m + 1`.
pub fn sample_mask_set(batch: usize, num_patches: usize, spec: &MaskSpec, seed: u64) -> Result<MaskSet> {
    if num_patches == 0 {
        return Err(Error::config("cannot mask zero patches"));
    }
    spec.validate()?;
    Ok(MaskSet {
        student: sample_mask(batch, num_patches, spec.student, seed, 0),
        teachers: spec
            .teachers
            .iter()
            .enumerate()
            .map(|(m, &r)| sample_mask(batch, num_patches, r, seed, m as u64 + 1))
            .collect(),
        seed,
    })
}

/// `M ⊙ Z` over `[B, N + 1, D]` tokens.
pub fn apply_mask<T: Scalar>(tokens: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(tokens.clone());
    let out = apply_mask_var(&mut tape, z, &Mask::from_tensor(mask)?)?;
    Ok(tape.value(out).clone())
}

/// Tape version of [`apply_mask`].
pub fn apply_mask_var<T: Scalar>(tape: &mut Tape<T>, tokens: Var, mask: &Mask) -> Result<Var> {
    let shape = tape.shape(tokens);
    if shape.len() != 3 || shape[0] != mask.batch || shape[1] != mask.tokens {
        return Err(Error::dim("apply_mask", shape, &[mask.batch, mask.tokens]));
    }
    let m = mask.to_tensor::<T>().reshape(&[mask.batch, mask.tokens, 1])?;
    let m = tape.constant(m);
    tape.mul(tokens, m)
}
