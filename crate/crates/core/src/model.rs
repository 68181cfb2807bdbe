//! Student, MoLE, adapters, proxy head and frozen teachers, plus the
//! batch objective tying them together.

use std::collections::BTreeSet;

use crate::adapters::{self, AdapterParams, AdapterWeights};
use crate::config::{Stage, TeacherConfig, TrainConfig};
#[cfg(test)]
use crate::config::KdVariant;
use crate::error::{Error, Result};
use crate::kd;
use crate::mole::MoleLayer;
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{hash_tensors, Init, LeafFn, LeafFnMut, NamedTensors};
use crate::vit::{self, EncoderParams, EncoderWeights};

const STREAM_MOLE: u64 = 1;
const STREAM_ADAPTERS: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_TEACHERS: u64 = 100;

/// Linear classifier over mean-pooled student tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<P> {
    /// `[d × K]`
    pub weight: P,
    pub bias: P,
}

/// Every parameter that can ever be trained. Teachers live elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P> {
    pub student: EncoderWeights<P>,
    /// One layer per student block; empty for variants without MoLE.
    pub mole: Vec<MoleLayer<P>>,
    /// One per teacher; empty for the interpolation baseline.
    pub adapters: Vec<AdapterWeights<P>>,
    pub head: HeadWeights<P>,
}

pub type ModelParams<T = f32> = ModelWeights<Tensor<T>>;

impl<P> ModelWeights<P> {
    pub fn map<U>(&self, f: &mut LeafFn<'_, P, U>) -> ModelWeights<U> {
        ModelWeights {
            student: self.student.map("student", f),
            mole: self
                .mole
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("mole.{i}"), f))
                .collect(),
            adapters: self
                .adapters
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&format!("adapter.{i}"), f))
                .collect(),
            head: HeadWeights {
                weight: f("head.weight", &self.head.weight),
                bias: f("head.bias", &self.head.bias),
            },
        }
    }

    pub fn for_each_mut(&mut self, f: &mut LeafFnMut<'_, P>) {
        self.student.for_each_mut("student", f);
        for (i, l) in self.mole.iter_mut().enumerate() {
            l.for_each_mut(&format!("mole.{i}"), f);
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.for_each_mut(&format!("adapter.{i}"), f);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |n, _| out.push(n.to_string()));
        out
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn named(&self) -> NamedTensors<T> {
        let mut out = NamedTensors::new();
        self.map(&mut |n, t| out.insert(n.to_string(), t.clone()));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(&mut |_, t| t.cast())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.numel());
        n
    }

    /// Group sizes: student base, MoLE, adapters, head.
    pub fn group_counts(&self) -> [(ParamGroup, usize); 4] {
        let mut c = [0usize; 4];
        self.map(&mut |n, t| c[ParamGroup::of(n) as usize] += t.numel());
        ParamGroup::ALL.map(|g| (g, c[g as usize]))
    }
}

impl ModelParams {
    /// Overwrites every parameter from `entries`; names and shapes must
    /// match exactly.
    pub fn load_named(&mut self, entries: &NamedTensors) -> Result<()> {
        let mut err = None;
        self.for_each_mut(&mut |n, t| {
            if err.is_some() {
                return;
            }
            match entries.get(n) {
                Some(v) if v.shape() == t.shape() => *t = v.clone(),
                Some(v) => {
                    err = Some(Error::Contract(format!(
                        "checkpoint entry {n} has shape {:?}, model expects {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(crate::checkpoint::CheckpointError::Missing(n.to_string()).into()),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Student = 0,
    Mole = 1,
    Adapter = 2,
    Head = 3,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Student, ParamGroup::Mole, ParamGroup::Adapter, ParamGroup::Head];

    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("mole") => ParamGroup::Mole,
            Some("adapter") => ParamGroup::Adapter,
            Some("head") => ParamGroup::Head,
            _ => ParamGroup::Student,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Student => "student",
            ParamGroup::Mole => "mole",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Head => "head",
        }
    }
}

/// Whether `name` is optimised in `stage`: pretrain touches MoLE,
/// adapters and head only; finetune everything except teachers.
pub fn is_trainable(stage: Stage, name: &str) -> bool {
    if name.starts_with("teacher.") {
        return false;
    }
    match stage {
        Stage::Pretrain => ParamGroup::of(name) != ParamGroup::Student,
        Stage::Finetune => true,
    }
}

pub fn trainable_set(stage: Stage, model: &Model) -> BTreeSet<String> {
    model
        .params
        .names()
        .into_iter()
        .filter(|n| is_trainable(stage, n))
        .collect()
}

/// Frozen teacher encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Teachers<T: Scalar = f32> {
    pub configs: Vec<TeacherConfig>,
    pub params: Vec<EncoderParams<T>>,
    pub clip_index: usize,
}

impl<T: Scalar> Teachers<T> {
    pub fn cast<U: Scalar>(&self) -> Teachers<U> {
        Teachers {
            configs: self.configs.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            clip_index: self.clip_index,
        }
    }

    pub fn named(&self) -> NamedTensors<T> {
        let mut out = NamedTensors::new();
        for (i, p) in self.params.iter().enumerate() {
            p.map(&format!("teacher.{i}"), &mut |n, t| out.insert(n.to_string(), t.clone()));
        }
        out
    }
}

impl Teachers {
    /// SHA-256 over every teacher tensor.
    pub fn hash(&self) -> String {
        let named = self.named();
        hash_tensors(named.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub teachers: Teachers,
}

impl Model {
    /// Seeded initialisation. The student starts as a copy of the [CLS]
    /// teacher; MoLE starts at identity.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher_params: Vec<EncoderParams> = cfg
            .teachers
            .iter()
            .enumerate()
            .map(|(i, t)| EncoderParams::init(&t.encoder, &mut Init::new(cfg.seed, STREAM_TEACHERS + i as u64)))
            .collect();
        let clip_index = cfg.clip_index();
        let student = teacher_params[clip_index].clone();
        let d = cfg.student.embed_dim;
        let mole = if cfg.variant.has_mole() {
            let mut init = Init::new(cfg.seed, STREAM_MOLE);
            (0..cfg.student.depth).map(|_| MoleLayer::init(d, &cfg.mole, &mut init)).collect()
        } else {
            Vec::new()
        };
        let adapters = if cfg.variant.has_adapters() {
            let mut init = Init::new(cfg.seed, STREAM_ADAPTERS);
            cfg.adapter_shapes().iter().map(|s| AdapterParams::init(s, &mut init)).collect()
        } else {
            Vec::new()
        };
        let mut head_init = Init::new(cfg.seed, STREAM_HEAD);
        let head = HeadWeights {
            weight: head_init.matrix(d, cfg.num_classes),
            bias: Tensor::zeros(&[cfg.num_classes]),
        };
        Ok(Self {
            params: ModelWeights {
                student,
                mole,
                adapters,
                head,
            },
            teachers: Teachers {
                configs: cfg.teachers.clone(),
                params: teacher_params,
                clip_index,
            },
        })
    }
}

/// Everything the frozen teachers contribute for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherView<T: Scalar = f32> {
    /// Raw, un-adapted tokens per teacher.
    pub tokens: Vec<Tensor<T>>,
    /// Final [CLS] state of the [CLS] teacher, `[d]`.
    pub clip_cls: Tensor<T>,
    /// Attention-derived token weights `[n]`.
    pub token_w: Tensor<T>,
    /// The [CLS] teacher's full encoder output.
    pub clip: vit::EncoderOutput<T>,
}

pub fn teacher_view<T: Scalar>(teachers: &Teachers<T>, image: &Tensor<T>) -> Result<TeacherView<T>> {
    let mut tokens = Vec::with_capacity(teachers.params.len());
    let mut clip = None;
    for (i, (c, p)) in teachers.configs.iter().zip(&teachers.params).enumerate() {
        let out = vit::encode(&c.encoder, p, None, image)?;
        tokens.push(out.tokens.clone());
        if i == teachers.clip_index {
            clip = Some(out);
        }
    }
    let clip = clip.ok_or_else(|| Error::Contract("no [CLS] teacher".into()))?;
    let clip_params = &teachers.params[teachers.clip_index];
    let last = clip_params
        .blocks
        .last()
        .ok_or_else(|| Error::Contract("[CLS] teacher has no blocks".into()))?;
    let x = &clip.final_attn_input;
    let seq = x.shape()[0];
    let cls_in = x.slice(0, 0, 1)?;
    let res_in = x.slice(0, 1, seq - 1)?;
    let token_w = kd::token_weights(&cls_in, &res_in, &last.wq, &last.wk)?;
    let clip_cls = clip
        .cls_token
        .clone()
        .ok_or_else(|| Error::Contract("[CLS] teacher produced no [CLS] state".into()))?;
    Ok(TeacherView {
        tokens,
        clip_cls,
        token_w,
        clip,
    })
}

/// Per-image distillation weighting actually applied.
#[derive(Clone, Debug, PartialEq)]
pub struct KdPlan<T: Scalar = f32> {
    /// Effective per-token coefficients, `[n]`.
    pub token_coef: Tensor<T>,
    /// `[m]`
    pub teacher_w: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BatchOutput<T: Scalar> {
    pub loss: Var,
    pub l_text: Var,
    pub l_kd: Var,
    /// `[B × K]`
    pub logits: Var,
    pub plans: Vec<KdPlan<T>>,
    /// Every token's expert, over all images and blocks.
    pub routes: Vec<usize>,
}

/// Interpolation-only targets: bilinear over the grid, linear over channels.
pub fn baseline_target<T: Scalar>(tokens: &Tensor<T>, g_t: usize, g_s: usize, d_s: usize) -> Result<Tensor<T>> {
    let (_, d_t) = tokens.dims2("baseline_target")?;
    let aligned = adapters::align_grid(tokens, g_t, g_s)?;
    if d_t == d_s {
        return Ok(aligned);
    }
    Ok(aligned.matmul(&adapters::channel_resample_matrix(d_t, d_s))?)
}

/// Records `L_text + λ·L_kd` for a batch. When `fixed` is given those
/// weights are used verbatim instead of being derived from the teachers.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &TrainConfig,
    w: &ModelWeights<Var>,
    views: &[TeacherView<T>],
    images: &[Tensor<T>],
    labels: &[usize],
    fixed: Option<&[KdPlan<T>]>,
) -> Result<BatchOutput<T>> {
    let b = images.len();
    if b == 0 || views.len() != b || labels.len() != b || fixed.is_some_and(|f| f.len() != b) {
        return Err(Error::Contract(format!(
            "batch of {b} images with {} views, {} labels",
            views.len(),
            labels.len()
        )));
    }
    let variant = cfg.variant;
    let kd_cfg = cfg.kd();
    let g_s = cfg.student.grid();
    let n = cfg.student.num_tokens();
    let d_s = cfg.student.embed_dim;
    let m = cfg.teachers.len();
    let mole = (!w.mole.is_empty()).then_some(w.mole.as_slice());

    let mut pooled = Vec::with_capacity(b);
    let mut kd_terms = Vec::with_capacity(b);
    let mut plans = Vec::with_capacity(b);
    let mut routes = Vec::new();
    for (i, (img, view)) in images.iter().zip(views).enumerate() {
        let x = tape.constant(img.clone());
        let enc = vit::encode_on_tape(tape, &cfg.student, &w.student, mole, x)?;
        routes.extend(enc.routes.iter().flatten().copied());
        let p = tape.mean_axis(enc.tokens, 0)?;
        pooled.push(tape.reshape(p, &[1, d_s])?);

        let mut targets = Vec::with_capacity(m);
        for (t, tok) in view.tokens.iter().enumerate() {
            let g_t = cfg.teachers[t].encoder.grid();
            let target = if variant.has_adapters() {
                let tv = tape.constant(tok.clone());
                adapters::adapt_on_tape(tape, &w.adapters[t], tv, g_t, g_s)?
            } else {
                tape.constant(baseline_target(tok, g_t, g_s, d_s)?)
            };
            targets.push(target);
        }
        let plan = match fixed {
            Some(f) => f[i].clone(),
            None => {
                let token_coef = if variant.token_weighted() {
                    kd::token_coefficients(&view.token_w)
                } else {
                    Tensor::full(&[n], T::one() / T::from_usize(n))
                };
                let teacher_w = if variant.teacher_weighted() {
                    let values: Vec<Tensor<T>> = targets.iter().map(|&v| tape.value(v).clone()).collect();
                    kd::teacher_weights(&view.clip_cls, &values, &kd_cfg)?
                } else {
                    Tensor::full(&[m], T::one() / T::from_usize(m))
                };
                KdPlan { token_coef, teacher_w }
            }
        };
        kd_terms.push(kd::weighted_kd_loss_on_tape(
            tape,
            enc.tokens,
            &targets,
            &plan.token_coef,
            &plan.teacher_w,
        )?);
        plans.push(plan);
    }
    let feats = if b == 1 { pooled[0] } else { tape.concat(&pooled, 0)? };
    let logits = tape.matmul(feats, w.head.weight)?;
    let logits = tape.add_bias(logits, w.head.bias)?;
    let l_text = tape.cross_entropy(logits, labels)?;
    let mut kd_sum = kd_terms[0];
    for &k in &kd_terms[1..] {
        kd_sum = tape.add(kd_sum, k)?;
    }
    let l_kd = tape.scale(kd_sum, T::one() / T::from_usize(b));
    let loss = kd::total_loss_on_tape(tape, l_text, l_kd, &kd_cfg)?;
    Ok(BatchOutput {
        loss,
        l_text,
        l_kd,
        logits,
        plans,
        routes,
    })
}

/// Binds parameters onto `tape`; returns the handles plus the
/// `(name, var)` list of everything bound.
pub fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: &dyn Fn(&str) -> bool,
) -> (ModelWeights<Var>, Vec<(String, Var)>) {
    let mut binder = crate::params::Binder::new(tape, trainable);
    let vars = params.map(&mut |n, t| binder.bind(n, t));
    (vars, binder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::parse(
            "image_size = 16\nstudent.patch_size = 8\nstudent.embed_dim = 8\nstudent.num_heads = 2\nstudent.depth = 1\nmole.rank = 2\n\
             teacher.0.clip = true\nteacher.1.patch_size = 4\nteacher.1.embed_dim = 6\nteacher.1.num_heads = 2\n",
        )
        .unwrap();
        cfg.batch_size = 2;
        cfg
    }

    #[test]
    fn student_copies_clip_teacher() {
        let m = Model::init(&small()).unwrap();
        assert_eq!(m.params.student, m.teachers.params[0]);
    }

    #[test]
    fn stage_sets() {
        let m = Model::init(&small()).unwrap();
        let pre = trainable_set(Stage::Pretrain, &m);
        let fine = trainable_set(Stage::Finetune, &m);
        assert!(pre.iter().all(|n| !n.starts_with("student.")));
        assert!(pre.contains("head.weight") && pre.contains("mole.0.expert.0.up") && pre.contains("adapter.1.w1"));
        assert!(pre.is_subset(&fine) && pre.len() < fine.len());
        assert!(fine.contains("student.blocks.0.attn.wq"));
        assert!(!is_trainable(Stage::Finetune, "teacher.0.pos"));
    }

    #[test]
    fn variants_shape_the_parameter_set() {
        let mut cfg = small();
        cfg.variant = KdVariant::MseBaseline;
        let m = Model::init(&cfg).unwrap();
        assert!(m.params.mole.is_empty() && m.params.adapters.is_empty());
        cfg.variant = KdVariant::Adapter;
        let m = Model::init(&cfg).unwrap();
        assert!(m.params.mole.is_empty() && m.params.adapters.len() == 2);
    }

    #[test]
    fn group_counts_sum_to_total() {
        let m = Model::init(&small()).unwrap();
        let total: usize = m.params.group_counts().iter().map(|(_, c)| c).sum();
        assert_eq!(total, m.params.param_count());
    }

    #[test]
    fn load_named_round_trip_and_missing() {
        let m = Model::init(&small()).unwrap();
        let mut other = m.clone();
        other.params.head.bias = Tensor::full(&[4], 3.0);
        other.params.load_named(&m.params.named()).unwrap();
        assert_eq!(other, m);
        let mut partial = m.params.named();
        partial.remove("head.bias");
        assert!(other.params.load_named(&partial).is_err());
    }
}
