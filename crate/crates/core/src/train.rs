//! Training loop, evaluation, loss trace and resumable runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, read_u64_entry, u64_entry, CheckpointError};
use crate::config::{Stage, TrainConfig};
use crate::data::{Sample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{self, is_trainable, KdPlan, Model, ParamGroup, TeacherView};
use crate::mole::expert_usage;
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::optim::Optimizer;
use crate::params::NamedTensors;

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub l_text: f32,
    pub l_kd: f32,
    pub l_total: f32,
    /// Tokens per expert, summed over blocks and images.
    pub expert_usage: Vec<usize>,
    /// L2 norm of the gradient per parameter group that received one.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    /// Mean over images of `Σ_j` effective token coefficient.
    pub token_weight_sum: f64,
    /// Mean teacher weights over the batch.
    pub teacher_weights: Vec<f64>,
}

impl StepReport {
    pub fn expert_fractions(&self) -> Vec<f32> {
        let total: usize = self.expert_usage.iter().sum();
        self.expert_usage
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f32 / total as f32 })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub l_text: f64,
    pub l_kd: f64,
    pub l_total: f64,
    /// Fraction of held-out images classified correctly.
    pub accuracy: f64,
    /// Mean over images of `Σ_j` effective token coefficient.
    pub token_weight_sum: f64,
}

/// Loss values and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub l_text: f32,
    pub l_kd: f32,
    pub l_total: f32,
    pub grads: BTreeMap<String, Tensor>,
    pub routes: Vec<usize>,
    pub plans: Vec<KdPlan>,
}

pub fn teacher_views(model: &Model, samples: &[Sample]) -> Result<Vec<TeacherView>> {
    samples
        .iter()
        .map(|s| model::teacher_view(&model.teachers, &s.image))
        .collect()
}

/// Forward and backward on one batch. Only names accepted by `trainable`
/// are tracked, so every other parameter gets no gradient at all.
pub fn batch_gradients(
    cfg: &TrainConfig,
    model: &Model,
    samples: &[Sample],
    views: &[TeacherView],
    trainable: &dyn Fn(&str) -> bool,
    step: usize,
) -> Result<BatchGradients> {
    let mut tape = Tape::<f32>::new();
    let (vars, bound) = model::bind(&mut tape, &model.params, trainable);
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let name_first_non_finite = |tape: &Tape<f32>| match tape.first_non_finite() {
        Some(v) => bound
            .iter()
            .find(|(_, b)| *b == v)
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| format!("node {} ({})", v.index(), tape.op_name(v))),
        None => "loss".to_string(),
    };
    let out = match model::forward_batch(&mut tape, cfg, &vars, views, &images, &labels, None) {
        Ok(out) => out,
        Err(Error::Numerics(NumericsError::NonFinite { .. })) => {
            return Err(Error::NonFinite {
                step,
                tensor: name_first_non_finite(&tape),
            })
        }
        Err(e) => return Err(e),
    };
    let loss = tape.value(out.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            tensor: name_first_non_finite(&tape),
        });
    }
    tape.backward(out.loss)?;
    let grads = bound
        .iter()
        .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g.clone())))
        .collect();
    Ok(BatchGradients {
        l_text: tape.value(out.l_text).item(),
        l_kd: tape.value(out.l_kd).item(),
        l_total: loss,
        grads,
        routes: out.routes,
        plans: out.plans,
    })
}

/// Mean losses and accuracy over `samples`, without tracking gradients.
pub fn evaluate(cfg: &TrainConfig, model: &Model, samples: &[Sample], views: &[TeacherView]) -> Result<EvalReport> {
    if samples.is_empty() || samples.len() != views.len() {
        return Err(Error::Contract("evaluation needs one view per sample".into()));
    }
    let mut text = 0.0f64;
    let mut kd = 0.0f64;
    let mut correct = 0usize;
    let mut coef_sum = 0.0f64;
    for (chunk, vchunk) in samples.chunks(EVAL_CHUNK).zip(views.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::<f32>::new();
        let (vars, _) = model::bind(&mut tape, &model.params, &|_| false);
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let out = model::forward_batch(&mut tape, cfg, &vars, vchunk, &images, &labels, None)?;
        let k = chunk.len() as f64;
        text += f64::from(tape.value(out.l_text).item()) * k;
        kd += f64::from(tape.value(out.l_kd).item()) * k;
        let pred = tape.value(out.logits).argmax(1)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        coef_sum += out.plans.iter().map(|p| f64::from(p.token_coef.sum_all())).sum::<f64>();
    }
    let n = samples.len() as f64;
    let (l_text, l_kd) = (text / n, kd / n);
    Ok(EvalReport {
        l_text,
        l_kd,
        l_total: l_text + cfg.lambda_kd * l_kd,
        accuracy: correct as f64 / n,
        token_weight_sum: coef_sum / n,
    })
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Updates completed in the current stage.
    pub step: usize,
    pub dataset: SyntheticDataset,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let model = Model::init(&cfg)?;
        let dataset = SyntheticDataset::new(cfg.seed, cfg.image_size, cfg.num_classes);
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer),
            cfg,
            model,
            step: 0,
            dataset,
        })
    }

    /// Restores from checkpoint entries. Within a stage, step count and
    /// optimizer state continue; across stages only parameters carry over.
    pub fn resume(cfg: TrainConfig, entries: &NamedTensors) -> Result<Self> {
        let expected = cfg.fingerprint();
        let found = read_u64_entry(entries, "meta.fingerprint")?;
        if found != expected {
            return Err(CheckpointError::FingerprintMismatch { expected, found }.into());
        }
        let mut t = Self::new(cfg)?;
        t.model.params.load_named(entries)?;
        let stage_code = read_u64_entry(entries, "meta.stage")?;
        let stage = u32::try_from(stage_code)
            .ok()
            .and_then(Stage::from_code)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown stage code {stage_code}")))?;
        if stage == t.cfg.stage {
            t.step = read_u64_entry(entries, "meta.step")? as usize;
            t.optimizer = Optimizer::from_state(t.cfg.optimizer, entries)?;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> NamedTensors {
        let mut out = self.model.params.named();
        out.extend(self.optimizer.state());
        out.insert("meta.step".into(), u64_entry(self.step as u64));
        out.insert("meta.stage".into(), u64_entry(u64::from(self.cfg.stage.code())));
        out.insert("meta.fingerprint".into(), u64_entry(self.cfg.fingerprint()));
        out
    }

    pub fn learning_rate(&self, name: &str) -> f64 {
        if self.cfg.stage == Stage::Finetune && ParamGroup::of(name) == ParamGroup::Student {
            self.cfg.encoder_learning_rate
        } else {
            self.cfg.learning_rate
        }
    }

    /// One update on training batch `self.step`; reported losses are the
    /// pre-update values.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let samples = self.dataset.batch(self.step, self.cfg.batch_size);
        let views = teacher_views(&self.model, &samples)?;
        self.train_step_on(&samples, &views)
    }

    /// [`Trainer::train_step`] with the batch and its teacher views supplied
    /// by the caller.
    pub fn train_step_on(&mut self, samples: &[Sample], views: &[TeacherView]) -> Result<StepReport> {
        let stage = self.cfg.stage;
        let bg = batch_gradients(
            &self.cfg,
            &self.model,
            samples,
            views,
            &|n| is_trainable(stage, n),
            self.step,
        )?;
        let mut sq: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        for (n, g) in &bg.grads {
            let s: f64 = g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            *sq.entry(ParamGroup::of(n)).or_default() += s;
        }
        let rates: BTreeMap<&str, f64> = bg.grads.keys().map(|n| (n.as_str(), self.learning_rate(n))).collect();
        let opt = &mut self.optimizer;
        opt.begin_step();
        self.model.params.for_each_mut(&mut |n, t| {
            if let Some(g) = bg.grads.get(n) {
                opt.update(n, t, g, rates[n]);
            }
        });

        let b = bg.plans.len() as f64;
        let m = self.cfg.teachers.len();
        let token_weight_sum = bg.plans.iter().map(|p| f64::from(p.token_coef.sum_all())).sum::<f64>() / b;
        let teacher_weights = (0..m)
            .map(|i| bg.plans.iter().map(|p| f64::from(p.teacher_w.data()[i])).sum::<f64>() / b)
            .collect();
        let experts = if self.model.params.mole.is_empty() { 0 } else { self.cfg.mole.experts };
        let report = StepReport {
            step: self.step,
            l_text: bg.l_text,
            l_kd: bg.l_kd,
            l_total: bg.l_total,
            expert_usage: expert_usage(&bg.routes, experts),
            grad_norms: sq.into_iter().map(|(g, s)| (g, s.sqrt())).collect(),
            token_weight_sum,
            teacher_weights,
        };
        self.step += 1;
        Ok(report)
    }
}

pub fn trace_header(experts: usize) -> String {
    let mut h = String::from("step,l_text,l_kd,l_total");
    for e in 0..experts {
        let _ = write!(h, ",expert{e}_frac");
    }
    h
}

pub fn trace_row(r: &StepReport) -> String {
    let mut s = format!("{},{},{},{}", r.step, r.l_text, r.l_kd, r.l_total);
    for f in r.expert_fractions() {
        let _ = write!(s, ",{f}");
    }
    s
}

/// Existing trace rows for steps before `step`, used when resuming.
fn kept_trace_rows(path: &Path, step: usize) -> Result<Vec<String>> {
    if step == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s < step)
        })
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub initial: EvalReport,
    pub final_eval: EvalReport,
    pub steps_run: usize,
    pub final_step: usize,
    pub last_report: Option<StepReport>,
    pub trace_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub teacher_hash: String,
    pub model: Model,
}

/// Runs training from scratch or from a checkpoint up to `cfg.steps`
/// updates, writing the trace and final checkpoint where configured.
pub fn run(cfg: &TrainConfig, resume: Option<&Path>) -> Result<RunSummary> {
    run_with(cfg, resume, |_| {})
}

/// [`run`] with a per-step callback.
pub fn run_with(cfg: &TrainConfig, resume: Option<&Path>, mut on_step: impl FnMut(&StepReport)) -> Result<RunSummary> {
    cfg.validate()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let eval_samples = trainer.dataset.eval_set(cfg.eval_images);
    let eval_views = teacher_views(&trainer.model, &eval_samples)?;
    let initial = evaluate(cfg, &trainer.model, &eval_samples, &eval_views)?;

    let experts = if trainer.model.params.mole.is_empty() { 0 } else { cfg.mole.experts };
    let mut trace = match &cfg.trace_path {
        Some(p) => {
            let kept = kept_trace_rows(p, trainer.step)?;
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "{}", trace_header(experts)).map_err(|e| Error::io(p, e))?;
            for row in kept {
                writeln!(w, "{row}").map_err(|e| Error::io(p, e))?;
            }
            Some((p.clone(), w))
        }
        None => None,
    };

    let start = trainer.step;
    let mut last_report = None;
    while trainer.step < cfg.steps {
        let r = trainer.train_step()?;
        if let Some((p, w)) = trace.as_mut() {
            writeln!(w, "{}", trace_row(&r)).map_err(|e| Error::io(p.as_path(), e))?;
        }
        on_step(&r);
        last_report = Some(r);
    }
    if let Some((p, mut w)) = trace {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let final_eval = evaluate(cfg, &trainer.model, &eval_samples, &eval_views)?;
    if let Some(p) = &cfg.checkpoint_path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::save(p, &trainer.checkpoint())?;
    }
    Ok(RunSummary {
        initial,
        final_eval,
        steps_run: trainer.step.saturating_sub(start),
        final_step: trainer.step,
        last_report,
        trace_path: cfg.trace_path.clone(),
        checkpoint_path: cfg.checkpoint_path.clone(),
        teacher_hash: trainer.model.teachers.hash(),
        model: trainer.model,
    })
}
