//! Fusion of adapted teacher tokens and the dual-level distillation loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::nn::{join, Linear, Parameterized, Scope};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    DualKl,
    TokenOnly,
    SpatialOnly,
    DualMse,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_kl" => Ok(Self::DualKl),
            "token_only" => Ok(Self::TokenOnly),
            "spatial_only" => Ok(Self::SpatialOnly),
            "dual_mse" => Ok(Self::DualMse),
            other => Err(Error::config(format!("unknown loss variant `{other}`"))),
        }
    }
}

/// Argument order of the KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`
    StudentFirst,
    /// `KL(teacher ‖ student)`
    TeacherFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_variant")]
    pub variant: LossVariant,
    #[serde(default = "default_direction")]
    pub kl_direction: KlDirection,
    /// Output categories `K` of the projection heads.
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
}

fn default_variant() -> LossVariant {
    LossVariant::DualKl
}

fn default_direction() -> KlDirection {
    KlDirection::StudentFirst
}

fn default_projection_dim() -> usize {
    64
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            kl_direction: default_direction(),
            projection_dim: default_projection_dim(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_dim < 2 {
            return Err(Error::config(format!(
                "loss.projection_dim must be at least 2, got {}",
                self.projection_dim
            )));
        }
        Ok(())
    }
}

/// `Linear(D → D)`, GELU, `Linear(D → K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    /// Weights uniform with variance `1 / fan_in`, so logits start at unit
    /// scale; biases zero.
    pub fn new(dim: usize, categories: usize, rng: &mut impl Rng) -> Self {
        let mut layer = |i: usize, o: usize| {
            let a = (3.0 / i as f64).sqrt();
            Linear {
                weight: Tensor::from_fn(&[o, i], |_| T::from_f64(rng.gen_range(-a..a))),
                bias: Tensor::zeros(&[o]),
            }
        };
        Self {
            fc1: layer(dim, dim),
            fc2: layer(dim, categories),
        }
    }

    pub fn categories(&self) -> usize {
        self.fc2.out_dim()
    }

    /// Logits `[..., K]`.
    pub fn forward(&self, tape: &mut Tape<T>, scope: &Scope, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, &scope.child("fc1"), x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, &scope.child("fc2"), h)
    }
}

impl<T: Scalar> Parameterized<T> for ProjectionHead<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc1.visit(&join(p, "fc1"), f);
        self.fc2.visit(&join(p, "fc2"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_mut(&join(p, "fc1"), f);
        self.fc2.visit_mut(&join(p, "fc2"), f);
    }
}

/// Head evaluated on the student side (trainable) and on the target side.
/// The target side reads `target` weights as constants, so no gradient
/// reaches the head from the fused branch; gradient still flows through
/// the fused tokens themselves into the adapters.
#[derive(Clone, Copy, Debug)]
pub struct HeadPair<'a, T> {
    pub student: &'a ProjectionHead<T>,
    pub target: &'a ProjectionHead<T>,
    pub scope: &'a str,
}

impl<'a, T: Scalar> HeadPair<'a, T> {
    pub fn shared(head: &'a ProjectionHead<T>, scope: &'a str) -> Self {
        Self {
            student: head,
            target: head,
            scope,
        }
    }

    fn logits(&self, tape: &mut Tape<T>, student: Var, fused: Var) -> Result<(Var, Var)> {
        let s = self.student.forward(tape, &Scope::new(self.scope, true), student)?;
        let t = self.target.forward(tape, &Scope::new(self.scope, false), fused)?;
        Ok((s, t))
    }
}

/// `z^T = Σ_m α_m ẑ_m` per token. `alpha` is `[B, N + 1, M]`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, alpha: Var, adapted: &[Var]) -> Result<Var> {
    let a_shape = tape.shape(alpha).to_vec();
    if a_shape.last() != Some(&adapted.len()) || adapted.is_empty() {
        return Err(Error::dim("fuse", &a_shape, &[adapted.len()]));
    }
    let mut acc: Option<Var> = None;
    for (m, &z) in adapted.iter().enumerate() {
        let z_shape = tape.shape(z);
        if z_shape.len() != a_shape.len() || z_shape[..z_shape.len() - 1] != a_shape[..a_shape.len() - 1] {
            return Err(Error::dim("fuse", &a_shape, z_shape));
        }
        let w = tape.slice(alpha, a_shape.len() - 1, m, m + 1)?;
        let term = tape.mul(w, z)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

fn directed_kl<T: Scalar>(tape: &mut Tape<T>, student: Var, target: Var, dir: KlDirection) -> Result<Var> {
    match dir {
        KlDirection::StudentFirst => tape.kl_div_logits(student, target),
        KlDirection::TeacherFirst => tape.kl_div_logits(target, student),
    }
}

/// Weighted mean of per-position values `[B, T]` under a 0/1 mask.
fn masked_mean<T: Scalar>(tape: &mut Tape<T>, values: Var, mask: &Mask) -> Result<Var> {
    let count = mask.count();
    if count == 0 {
        return Err(Error::contract("token loss over an all-zero mask"));
    }
    let m = tape.constant(mask.to_tensor());
    let masked = tape.mul(values, m)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / count as f64)
}

/// Per-position mean squared difference over channels, `[..., D] → [...]`.
fn channel_mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = *tape.shape(a).last().ok_or_else(|| Error::contract("mse on a scalar"))?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let ones = tape.constant(Tensor::full(&[d, 1], T::from_f64(1.0 / d as f64)));
    let per = tape.matmul(sq, ones)?;
    let shape = tape.shape(per).to_vec();
    tape.reshape(per, &shape[..shape.len() - 1])
}

/// Mean over student-visible positions of `KL(φ(z^S) ‖ φ(z^T))`.
pub fn token_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    fused: Var,
    student_mask: &Mask,
    phi: HeadPair<'_, T>,
    dir: KlDirection,
) -> Result<Var> {
    check_pair(tape, student, fused)?;
    let (s, t) = phi.logits(tape, student, fused)?;
    let kl = directed_kl(tape, s, t, dir)?;
    masked_mean(tape, kl, student_mask)
}

/// Side of the spatial map, `sqrt(N)`; errors unless `N` is a perfect square.
pub fn spatial_side(num_patches: usize) -> Result<usize> {
    let side = (num_patches as f64).sqrt().round() as usize;
    if side * side != num_patches || side == 0 {
        return Err(Error::config(format!("{num_patches} patch tokens do not form a square map")));
    }
    Ok(side)
}

/// Patch tokens `[B, N + 1, D]` as a channel-first map `[B, D, H', W']`.
pub fn feature_map<T: Scalar>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, t, d] = tokens.shape() else {
        return Err(Error::dim("feature_map", tokens.shape(), &[0, 0, 0]));
    };
    let side = spatial_side(t.saturating_sub(1))?;
    let patches = crate::ops::slice(tokens, 1, 1, t)?;
    crate::ops::permute(&patches, &[0, 2, 1])?.reshape(&[b, d, side, side])
}

/// Channel-wise KL over the `H' × W'` map built from patch tokens, averaged
/// over positions and batch. Each map position is the channel vector of one
/// patch token, so the map is consumed directly in token layout.
pub fn spatial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    fused: Var,
    psi: HeadPair<'_, T>,
    dir: KlDirection,
) -> Result<Var> {
    check_pair(tape, student, fused)?;
    let tokens = tape.shape(student)[1];
    spatial_side(tokens - 1)?;
    let fs = tape.slice(student, 1, 1, tokens)?;
    let ft = tape.slice(fused, 1, 1, tokens)?;
    let (s, t) = psi.logits(tape, fs, ft)?;
    let kl = directed_kl(tape, s, t, dir)?;
    tape.mean(kl)
}

fn check_pair<T: Scalar>(tape: &Tape<T>, student: Var, fused: Var) -> Result<()> {
    let (a, b) = (tape.shape(student), tape.shape(fused));
    if a != b || a.len() != 3 {
        return Err(Error::dim("distillation pair", a, b));
    }
    Ok(())
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_token: Option<Var>,
    pub l_spatial: Option<Var>,
    pub total: Var,
}

/// Combine the terms selected by `cfg.variant`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    fused: Var,
    student_mask: &Mask,
    phi: HeadPair<'_, T>,
    psi: HeadPair<'_, T>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let dir = cfg.kl_direction;
    let (l_token, l_spatial) = match cfg.variant {
        LossVariant::DualKl => (
            Some(token_loss(tape, student, fused, student_mask, phi, dir)?),
            Some(spatial_loss(tape, student, fused, psi, dir)?),
        ),
        LossVariant::TokenOnly => (Some(token_loss(tape, student, fused, student_mask, phi, dir)?), None),
        LossVariant::SpatialOnly => (None, Some(spatial_loss(tape, student, fused, psi, dir)?)),
        LossVariant::DualMse => {
            check_pair(tape, student, fused)?;
            let per_token = channel_mse(tape, student, fused)?;
            let tok = masked_mean(tape, per_token, student_mask)?;
            let tokens = tape.shape(student)[1];
            spatial_side(tokens - 1)?;
            let patches = tape.slice(per_token, 1, 1, tokens)?;
            let spa = tape.mean(patches)?;
            (Some(tok), Some(spa))
        }
    };
    let total = match (l_token, l_spatial) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!(),
    };
    Ok(LossVars {
        l_token,
        l_spatial,
        total,
    })
}

/// Scalar summary of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_token: f64,
    pub l_spatial: f64,
    pub total: f64,
    pub visible_count: usize,
    pub alpha_mean: Vec<f64>,
}

impl LossReport {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, vars: &LossVars, student_mask: &Mask, alpha: &Tensor<T>) -> Self {
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        Self {
            l_token: read(vars.l_token),
            l_spatial: read(vars.l_spatial),
            total: tape.value(vars.total).item().as_f64(),
            visible_count: student_mask.count(),
            alpha_mean: alpha_means(alpha),
        }
    }
}

/// Mean of `α[..., m]` for each teacher.
pub fn alpha_means<T: Scalar>(alpha: &Tensor<T>) -> Vec<f64> {
    let m = alpha.last_dim();
    if m == 0 {
        return Vec::new();
    }
    let rows = alpha.numel() / m;
    let mut out = vec![0.0; m];
    for row in alpha.data().chunks(m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}
