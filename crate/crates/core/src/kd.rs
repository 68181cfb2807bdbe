//! Attention-guided distillation weights and losses.
//!
//! Token weights come from the frozen [CLS]-bearing teacher's final-block
//! query/key projections; teacher weights from the mean [CLS] response to
//! each teacher's adapted tokens. Both are plain tensors, never tape
//! nodes, so no gradient reaches them.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA_KD: f64 = 0.5;
pub const DEFAULT_CLIP_WEIGHT: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdConfig {
    pub lambda_kd: f64,
    pub clip_fixed_weight: f64,
    /// Teacher receiving the fixed weight; `None` softmaxes over all.
    pub clip_index: Option<usize>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda_kd: DEFAULT_LAMBDA_KD,
            clip_fixed_weight: DEFAULT_CLIP_WEIGHT,
            clip_index: Some(0),
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_fixed_weight > 0.0 && self.clip_fixed_weight < 1.0) {
            return Err(Error::invalid(format!(
                "clip_fixed_weight must lie in (0, 1), got {}",
                self.clip_fixed_weight
            )));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) {
            return Err(Error::invalid(format!("lambda_kd must be >= 0, got {}", self.lambda_kd)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdWeights<T: Scalar = f32> {
    /// `[n]`
    pub token_w: Tensor<T>,
    /// `[m]`
    pub teacher_w: Tensor<T>,
}

impl<T: Scalar> KdWeights<T> {
    /// Effective per-token coefficients `token_w[j] + 1/n`.
    pub fn token_coefficients(&self) -> Tensor<T> {
        token_coefficients(&self.token_w)
    }
}

/// `token_w[j] + 1/n`; never below `1/n`, summing to 2.
pub fn token_coefficients<T: Scalar>(token_w: &Tensor<T>) -> Tensor<T> {
    let inv_n = T::one() / T::from_usize(token_w.numel());
    token_w.map(|w| w + inv_n)
}

fn vector<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<usize> {
    match t.shape() {
        [d] => Ok(*d),
        [1, d] => Ok(*d),
        s => Err(Error::Contract(format!("{op}: expected a vector, got {s:?}"))),
    }
}

/// `softmax_j(((cls·Wq)·(res_j·Wk)) / √d)`.
pub fn token_weights<T: Scalar>(cls: &Tensor<T>, res: &Tensor<T>, wq: &Tensor<T>, wk: &Tensor<T>) -> Result<Tensor<T>> {
    let d = vector(cls, "token_weights")?;
    let q = cls.reshape(&[1, d])?.matmul(wq)?;
    let k = res.matmul(wk)?;
    let scores = q.matmul(&k.transpose()?)?;
    let n = scores.numel();
    let scores = scores.reshape(&[n])?.scale(T::one() / T::from_usize(d).sqrt());
    Ok(scores.softmax(0)?)
}

/// `score_i = mean_j(cls·V_i,j) / √d` for each adapted teacher.
pub fn teacher_scores<T: Scalar>(cls: &Tensor<T>, teachers: &[Tensor<T>]) -> Result<Vec<T>> {
    let d = vector(cls, "teacher_scores")?;
    let c = cls.reshape(&[d, 1])?;
    let inv = T::one() / T::from_usize(d).sqrt();
    teachers
        .iter()
        .map(|t| {
            let (n, _) = t.dims2("teacher_scores")?;
            Ok(t.matmul(&c)?.sum_all() / T::from_usize(n) * inv)
        })
        .collect()
}

/// Turns raw teacher scores into weights: the fixed teacher gets exactly
/// `clip_fixed_weight`, the rest share the remainder by softmax.
pub fn compose_teacher_weights<T: Scalar>(scores: &[T], cfg: &KdConfig) -> Result<Tensor<T>> {
    let m = scores.len();
    if m == 0 {
        return Err(Error::Contract("no teachers to weight".into()));
    }
    let Some(clip) = cfg.clip_index else {
        if m == 1 {
            return Ok(Tensor::vector(vec![T::one()]));
        }
        return Ok(Tensor::vector(scores.to_vec()).softmax(0)?);
    };
    if m < 2 {
        return Err(Error::invalid(
            "a fixed-weight teacher needs at least one other teacher; use single-teacher mode",
        ));
    }
    if clip >= m {
        return Err(Error::invalid(format!("clip index {clip} out of range for {m} teachers")));
    }
    let others: Vec<T> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != clip)
        .map(|(_, &s)| s)
        .collect();
    let rest = T::from_f64(1.0 - cfg.clip_fixed_weight);
    let soft = Tensor::vector(others).softmax(0)?;
    let mut it = soft.data().iter();
    let w = (0..m)
        .map(|i| {
            if i == clip {
                T::from_f64(cfg.clip_fixed_weight)
            } else {
                rest * *it.next().expect("one softmax entry per other teacher")
            }
        })
        .collect();
    Ok(Tensor::vector(w))
}

pub fn teacher_weights<T: Scalar>(cls: &Tensor<T>, teachers: &[Tensor<T>], cfg: &KdConfig) -> Result<Tensor<T>> {
    compose_teacher_weights(&teacher_scores(cls, teachers)?, cfg)
}

/// `Σ_i teacher_w[i] · Σ_j coef[j] · mean_c (t_ij - s_j)²` for arbitrary
/// per-token coefficients.
pub fn weighted_kd_loss<T: Scalar>(
    student: &Tensor<T>,
    teachers: &[Tensor<T>],
    token_coef: &Tensor<T>,
    teacher_w: &Tensor<T>,
) -> Result<T> {
    check_counts(teachers.len(), teacher_w.numel())?;
    let mut total = T::zero();
    for (t, &w) in teachers.iter().zip(teacher_w.data()) {
        let diff = t.sub(student)?;
        let per_token = diff.mul(&diff)?.mean_axis(1)?;
        total = total + w * per_token.mul(token_coef)?.sum_all();
    }
    Ok(total)
}

pub fn kd_loss<T: Scalar>(student: &Tensor<T>, teachers: &[Tensor<T>], w: &KdWeights<T>) -> Result<T> {
    weighted_kd_loss(student, teachers, &w.token_coefficients(), &w.teacher_w)
}

fn check_counts(teachers: usize, weights: usize) -> Result<()> {
    if teachers != weights {
        return Err(Error::Contract(format!("{teachers} teachers but {weights} teacher weights")));
    }
    Ok(())
}

/// Tape form of [`weighted_kd_loss`]; coefficients and weights enter as
/// constants.
pub fn weighted_kd_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    teachers: &[Var],
    token_coef: &Tensor<T>,
    teacher_w: &Tensor<T>,
) -> Result<Var> {
    check_counts(teachers.len(), teacher_w.numel())?;
    let coef = tape.constant(token_coef.clone());
    let mut total: Option<Var> = None;
    for (&t, &w) in teachers.iter().zip(teacher_w.data()) {
        let diff = tape.sub(t, student)?;
        let sq = tape.mul(diff, diff)?;
        let per_token = tape.mean_axis(sq, 1)?;
        let weighted = tape.mul(per_token, coef)?;
        let s = tape.sum(weighted);
        let s = tape.scale(s, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Contract("no teachers to distill from".into()))
}

pub fn kd_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, student: Var, teachers: &[Var], w: &KdWeights<T>) -> Result<Var> {
    weighted_kd_loss_on_tape(tape, student, teachers, &w.token_coefficients(), &w.teacher_w)
}

/// `L_text + λ·L_kd`.
pub fn total_loss<T: Scalar>(text: T, kd: T, cfg: &KdConfig) -> T {
    text + T::from_f64(cfg.lambda_kd) * kd
}

pub fn total_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, text: Var, kd: Var, cfg: &KdConfig) -> Result<Var> {
    let scaled = tape.scale(kd, T::from_f64(cfg.lambda_kd));
    Ok(tape.add(text, scaled)?)
}
