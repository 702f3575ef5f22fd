//! Parameter-free joint consensus gating.
//!
//! For every token position the weight of teacher `m` combines
//!
//! * affinity `s = cos(z_S, ẑ_m)`, agreement with the student's own token;
//! * consensus `c = mean_{k != m} cos(ẑ_m, ẑ_k)`, agreement with the peers;
//!
//! into `e = s + c`, normalized across teachers as `α = softmax(e / τ)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::COSINE_EPS;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingVariant {
    /// `e = s + c`
    Full,
    /// `e = s`
    AffinityOnly,
    /// `e = c`
    ConsensusOnly,
    /// `α = 1 / M`
    Uniform,
}

impl std::str::FromStr for GatingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "affinity_only" => Ok(Self::AffinityOnly),
            "consensus_only" => Ok(Self::ConsensusOnly),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::config(format!("unknown gating variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_variant")]
    pub variant: GatingVariant,
    /// Let gradients flow through α. Off by default: α is a constant weight.
    #[serde(default)]
    pub differentiable: bool,
}

fn default_temperature() -> f64 {
    0.1
}

fn default_variant() -> GatingVariant {
    GatingVariant::Full
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            variant: default_variant(),
            differentiable: false,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("gating temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Gating terms recorded on a tape; each is `[B, N + 1, M]`.
#[derive(Debug, Clone, Copy)]
pub struct GatingVars {
    pub s: Var,
    pub c: Var,
    pub e: Var,
    pub alpha: Var,
}

/// Evaluated gating terms, each `[B, N + 1, M]`.
#[derive(Debug, Clone)]
pub struct GatingResult<T> {
    pub s: Tensor<T>,
    pub c: Tensor<T>,
    pub e: Tensor<T>,
    pub alpha: Tensor<T>,
}

fn check_shapes<T: Scalar>(tape: &Tape<T>, reference: &[usize], vars: &[Var]) -> Result<()> {
    for &v in vars {
        if tape.shape(v) != reference {
            return Err(Error::dim("gating", reference, tape.shape(v)));
        }
    }
    Ok(())
}

/// `s[b, n, m] = cos(student[b, n], adapted[m][b, n])`.
pub fn affinity<T: Scalar>(tape: &mut Tape<T>, student: Var, adapted: &[Var]) -> Result<Var> {
    if adapted.is_empty() {
        return Err(Error::config("gating needs at least one teacher"));
    }
    let shape = tape.shape(student).to_vec();
    check_shapes(tape, &shape, adapted)?;
    let cols = adapted
        .iter()
        .map(|&t| tape.cosine_similarity(student, t, COSINE_EPS))
        .collect::<Result<Vec<_>>>()?;
    tape.stack_last(&cols)
}

/// `c[b, n, m]`: mean cosine of teacher `m` against every other teacher.
/// Zero when there is a single teacher.
pub fn consensus<T: Scalar>(tape: &mut Tape<T>, adapted: &[Var]) -> Result<Var> {
    let m = adapted.len();
    let first = *adapted.first().ok_or_else(|| Error::config("gating needs at least one teacher"))?;
    let shape = tape.shape(first).to_vec();
    check_shapes(tape, &shape, adapted)?;
    let token_shape = &shape[..shape.len() - 1];
    if m == 1 {
        let mut out_shape = token_shape.to_vec();
        out_shape.push(1);
        return Ok(tape.constant(Tensor::zeros(&out_shape)));
    }
    let mut pair = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let c = tape.cosine_similarity(adapted[i], adapted[j], COSINE_EPS)?;
            pair[i][j] = Some(c);
            pair[j][i] = Some(c);
        }
    }
    let mut cols = Vec::with_capacity(m);
    for (i, row) in pair.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for (j, c) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            let c = c.expect("pair filled");
            acc = Some(match acc {
                None => c,
                Some(a) => tape.add(a, c)?,
            });
        }
        cols.push(tape.scale(acc.expect("m >= 2"), 1.0 / (m - 1) as f64)?);
    }
    tape.stack_last(&cols)
}

/// Combine `s` and `c` per the variant and normalize over teachers.
/// Returns `(e, α)`.
pub fn gate<T: Scalar>(tape: &mut Tape<T>, s: Var, c: Var, cfg: &GatingConfig) -> Result<(Var, Var)> {
    cfg.validate()?;
    if tape.shape(s) != tape.shape(c) {
        return Err(Error::dim("gate", tape.shape(s), tape.shape(c)));
    }
    let e = match cfg.variant {
        GatingVariant::Full | GatingVariant::Uniform => tape.add(s, c)?,
        GatingVariant::AffinityOnly => s,
        GatingVariant::ConsensusOnly => c,
    };
    let alpha = match cfg.variant {
        GatingVariant::Uniform => {
            let shape = tape.shape(s).to_vec();
            let m = *shape.last().expect("rank 3");
            tape.constant(Tensor::full(&shape, T::from_f64(1.0 / m as f64)))
        }
        _ => tape.softmax(e, cfg.temperature)?,
    };
    Ok((e, alpha))
}

/// Full gating pass. Unless `cfg.differentiable`, the returned α carries
/// no gradient path.
pub fn consensus_gating<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    adapted: &[Var],
    cfg: &GatingConfig,
) -> Result<GatingVars> {
    let s = affinity(tape, student, adapted)?;
    let c = consensus(tape, adapted)?;
    let (e, alpha) = gate(tape, s, c, cfg)?;
    let alpha = if cfg.differentiable { alpha } else { tape.detach(alpha) };
    Ok(GatingVars { s, c, e, alpha })
}

/// Eager gating over evaluated tensors.
pub fn compute_gating<T: Scalar>(student: &Tensor<T>, adapted: &[Tensor<T>], cfg: &GatingConfig) -> Result<GatingResult<T>> {
    let mut tape = Tape::no_grad();
    let s_var = tape.constant(student.clone());
    let a_vars: Vec<Var> = adapted.iter().map(|t| tape.constant(t.clone())).collect();
    let g = consensus_gating(&mut tape, s_var, &a_vars, cfg)?;
    Ok(GatingResult {
        s: tape.value(g.s).clone(),
        c: tape.value(g.c).clone(),
        e: tape.value(g.e).clone(),
        alpha: tape.value(g.alpha).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn affinity_identity_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = rand_tokens(&mut rng, &[2, 3, 4]);
        let neg = z.map(|v| -v);
        let r = compute_gating(&z, &[z.clone(), neg], &GatingConfig::default()).unwrap();
        for row in r.s.data().chunks(2) {
            assert!((row[0] - 1.0).abs() < 1e-12);
            assert!((row[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_tokens(&mut rng, &[1, 1, 3]);
        let t = rand_tokens(&mut rng, &[1, 1, 3]);
        let r = compute_gating(&z, &[t.clone()], &GatingConfig::default()).unwrap();
        assert!((r.s.item() - cos(z.data(), t.data())).abs() < 1e-14);
    }

    #[test]
    fn consensus_brute_force_three_teachers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_tokens(&mut rng, &[2, 2, 5]);
        let ts: Vec<_> = (0..3).map(|_| rand_tokens(&mut rng, &[2, 2, 5])).collect();
        let r = compute_gating(&z, &ts, &GatingConfig::default()).unwrap();
        for pos in 0..4 {
            for m in 0..3 {
                let tm = &ts[m].data()[pos * 5..pos * 5 + 5];
                let mut acc = 0.0;
                for (k, tk) in ts.iter().enumerate() {
                    if k != m {
                        acc += cos(tm, &tk.data()[pos * 5..pos * 5 + 5]);
                    }
                }
                assert!((r.c.data()[pos * 3 + m] - acc / 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn consensus_pair_is_symmetric_and_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tokens(&mut rng, &[1, 4, 3]);
        let a = rand_tokens(&mut rng, &[1, 4, 3]);
        let b = rand_tokens(&mut rng, &[1, 4, 3]);
        let r = compute_gating(&z, &[a.clone(), b], &GatingConfig::default()).unwrap();
        for row in r.c.data().chunks(2) {
            assert_eq!(row[0], row[1]);
        }
        let same = compute_gating(&z, &[a.clone(), a.clone(), a], &GatingConfig::default()).unwrap();
        assert!(same.c.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(same.alpha.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_teacher_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_tokens(&mut rng, &[2, 3, 4]);
        let t = rand_tokens(&mut rng, &[2, 3, 4]);
        let r = compute_gating(&z, &[t], &GatingConfig::default()).unwrap();
        assert!(r.c.data().iter().all(|&v| v == 0.0));
        assert!(r.alpha.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_teacher_softmax_value() {
        let mut tape = Tape::<f64>::no_grad();
        let s = tape.constant(Tensor::from_f64s(&[1, 1, 2], &[1.0, 0.0]).unwrap());
        let c = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let (_, a) = gate(&mut tape, s, c, &GatingConfig::default()).unwrap();
        let a = tape.value(a);
        assert!((a.data()[0] - 0.999_954_602_131_297_6).abs() < 1e-12);
        assert!((a.data()[1] - 4.539_786_870_243_442e-5).abs() < 1e-12);
    }

    #[test]
    fn variants_select_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_tokens(&mut rng, &[1, 2, 4]);
        let ts: Vec<_> = (0..3).map(|_| rand_tokens(&mut rng, &[1, 2, 4])).collect();
        let mut cfg = GatingConfig::default();
        let full = compute_gating(&z, &ts, &cfg).unwrap();
        cfg.variant = GatingVariant::AffinityOnly;
        assert!(compute_gating(&z, &ts, &cfg).unwrap().e.bit_eq(&full.s));
        cfg.variant = GatingVariant::ConsensusOnly;
        assert!(compute_gating(&z, &ts, &cfg).unwrap().e.bit_eq(&full.c));
        cfg.variant = GatingVariant::Uniform;
        let u = compute_gating(&z, &ts, &cfg).unwrap();
        assert!(u.alpha.data().iter().all(|&v| v == 1.0 / 3.0));
        assert!("bogus".parse::<GatingVariant>().is_err());
        assert_eq!("affinity_only".parse::<GatingVariant>().unwrap(), GatingVariant::AffinityOnly);
    }

    #[test]
    fn bad_temperature_and_no_teachers() {
        let z = Tensor::<f64>::ones(&[1, 1, 2]);
        let cfg = GatingConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(matches!(compute_gating(&z, &[z.clone()], &cfg), Err(Error::Config(_))));
        assert!(matches!(compute_gating(&z, &[], &GatingConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn detached_alpha_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_tokens(&mut rng, &[1, 2, 3]);
        let ts: Vec<_> = (0..2).map(|_| rand_tokens(&mut rng, &[1, 2, 3])).collect();
        for differentiable in [false, true] {
            let mut tape = Tape::new();
            let zs = tape.param("z", &z);
            let tv: Vec<_> = ts.iter().map(|t| tape.constant(t.clone())).collect();
            let cfg = GatingConfig {
                differentiable,
                ..Default::default()
            };
            let g = consensus_gating(&mut tape, zs, &tv, &cfg).unwrap();
            let sq = tape.square(g.alpha).unwrap();
            let l = tape.sum(sq).unwrap();
            let grads = tape.backward(l).unwrap();
            let norm: f64 = grads.get_or_zeros(&tape, zs).data().iter().map(|v| v.abs()).sum();
            assert_eq!(norm > 0.0, differentiable);
        }
    }
}
