//! Cumulative variant ladder run on identical seeds and data.

use std::fmt::Write as _;

use crate::config::{KdVariant, TrainConfig};
use crate::error::{Error, Result};
use crate::train::{evaluate, teacher_views, EvalReport, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: KdVariant,
    pub steps: usize,
    pub initial: EvalReport,
    pub final_eval: EvalReport,
}

/// Trains every variant in lockstep. All variants share teachers, data and
/// initial student, so each step's teacher views are computed once.
pub fn run_ladder(cfg: &TrainConfig, variants: &[KdVariant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant"));
    }
    let mut trainers = variants
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.variant = v;
            c.trace_path = None;
            c.checkpoint_path = None;
            Trainer::new(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let lead = &trainers[0];
    let eval_samples = lead.dataset.eval_set(cfg.eval_images);
    let eval_views = teacher_views(&lead.model, &eval_samples)?;
    let initial = trainers
        .iter()
        .map(|t| evaluate(&t.cfg, &t.model, &eval_samples, &eval_views))
        .collect::<Result<Vec<_>>>()?;
    for step in 0..cfg.steps {
        let samples = trainers[0].dataset.batch(step, cfg.batch_size);
        let views = teacher_views(&trainers[0].model, &samples)?;
        for t in &mut trainers {
            t.train_step_on(&samples, &views)?;
        }
    }
    trainers
        .iter()
        .zip(initial)
        .map(|(t, initial)| {
            Ok(AblationRow {
                variant: t.cfg.variant,
                steps: t.step,
                initial,
                final_eval: evaluate(&t.cfg, &t.model, &eval_samples, &eval_views)?,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "variant,steps,initial_l_kd,final_l_kd,initial_l_text,final_l_text,initial_accuracy,final_accuracy,token_weight_sum";

pub fn ladder_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.steps,
            r.initial.l_kd,
            r.final_eval.l_kd,
            r.initial.l_text,
            r.final_eval.l_text,
            r.initial.accuracy,
            r.final_eval.accuracy,
            r.final_eval.token_weight_sum
        );
    }
    s
}
