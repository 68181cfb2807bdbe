//! Finite-difference checks of the composite objectives, run in `f64`
//! through the same generic code paths that train in `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{self, AdapterWeights};
use crate::config::TrainConfig;
use crate::data::SyntheticDataset;
use crate::error::Result;
use crate::kd::{self, KdConfig};
use crate::model::{self, KdPlan, Model, ModelParams, TeacherView};
use crate::mole::{self, LoraExpert, MoleLayer, Router};
use crate::numerics::gradcheck::{check_gradients, sample_coords, GradCheckReport, DEFAULT_STEP};
use crate::numerics::{Tape, Tensor, Var};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Fixed pseudo-random projection weights for reducing a tensor to a
/// scalar; avoids zeros so no coordinate is trivially flat.
fn projection(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 7 % 11) as f64 - 5.5) / 3.0)
}

fn project(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let w = tape.constant(projection(tape.value(x).shape()));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn routes_signature(routes: &[usize]) -> u64 {
    routes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &r| (h ^ r as u64).wrapping_mul(0x100_0000_01b3))
}

/// Runs `build` once with tracked leaves for the analytic gradient, then
/// compares it to central differences on `samples` random coordinates.
fn run_check<F>(inputs: Vec<Tensor<f64>>, samples: usize, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<(Var, u64)>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let (loss, _) = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coords(&inputs, samples, &mut rng);
    let mut failure = None;
    let report = check_gradients(&inputs, &analytic, &coords, DEFAULT_STEP, |xs| {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        match build(&mut t, &v) {
            Ok((l, sig)) => (t.value(l).item(), sig),
            Err(e) => {
                failure.get_or_insert(e);
                (f64::NAN, u64::MAX)
            }
        }
    });
    failure.map_or(Ok(report), Err)
}

/// Weighted KD loss with respect to student and teacher tokens.
pub fn kd_loss(m: usize, n: usize, c: usize, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![randn(&mut rng, &[n, c], 1.0)];
    for _ in 0..m {
        inputs.push(randn(&mut rng, &[n, c], 1.0));
    }
    let token_w = randn(&mut rng, &[n], 1.0).softmax(0)?;
    let teacher_w = randn(&mut rng, &[m], 1.0).softmax(0)?;
    let w = kd::KdWeights { token_w, teacher_w };
    run_check(inputs, samples, seed ^ 1, |tape, v| {
        Ok((kd::kd_loss_on_tape(tape, v[0], &v[1..], &w)?, 0))
    })
}

/// `L_text + λ·L_kd` over student tokens, a linear head and teacher tokens.
pub fn total_loss(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let (n, c, k, m) = (6, 8, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![randn(&mut rng, &[n, c], 1.0), randn(&mut rng, &[c, k], 0.5)];
    for _ in 0..m {
        inputs.push(randn(&mut rng, &[n, c], 1.0));
    }
    let w = kd::KdWeights {
        token_w: randn(&mut rng, &[n], 1.0).softmax(0)?,
        teacher_w: Tensor::vector(vec![0.8, 0.2]),
    };
    let label = rng.random_range(0..k);
    let cfg = KdConfig::default();
    run_check(inputs, samples, seed ^ 2, |tape, v| {
        let pooled = tape.mean_axis(v[0], 0)?;
        let pooled = tape.reshape(pooled, &[1, c])?;
        let logits = tape.matmul(pooled, v[1])?;
        let text = tape.cross_entropy(logits, &[label])?;
        let kdl = kd::kd_loss_on_tape(tape, v[0], &v[2..], &w)?;
        Ok((kd::total_loss_on_tape(tape, text, kdl, &cfg)?, 0))
    })
}

/// MoLE layer with non-zero experts; coordinates whose perturbation flips
/// a route are skipped.
pub fn mole_forward(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let (n, d, e, r) = (8, 6, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![
        randn(&mut rng, &[n, d], 1.0),
        randn(&mut rng, &[n, d], 1.0),
        randn(&mut rng, &[d, e], 1.0),
        randn(&mut rng, &[e], 0.1),
    ];
    for _ in 0..e {
        inputs.push(randn(&mut rng, &[d, r], 0.5));
        inputs.push(randn(&mut rng, &[r, d], 0.5));
    }
    run_check(inputs, samples, seed ^ 3, |tape, v| {
        let layer = MoleLayer {
            router: Router { weight: v[2], bias: v[3] },
            experts: (0..e)
                .map(|i| LoraExpert {
                    down: v[4 + 2 * i],
                    up: v[5 + 2 * i],
                })
                .collect(),
        };
        let (out, routes) = mole::forward_on_tape(tape, &layer, v[1], v[0])?;
        Ok((project(tape, out)?, routes_signature(&routes)))
    })
}

/// Grid alignment plus MLP, with differing source and target grids.
pub fn adapt(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let (g_t, g_s, d_t, h, d_s) = (4, 3, 5, 7, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        randn(&mut rng, &[g_t * g_t, d_t], 1.0),
        randn(&mut rng, &[d_t, h], 0.5),
        randn(&mut rng, &[h], 0.1),
        randn(&mut rng, &[h, d_s], 0.5),
        randn(&mut rng, &[d_s], 0.1),
    ];
    run_check(inputs, samples, seed ^ 4, |tape, v| {
        let w = AdapterWeights {
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        };
        let out = adapters::adapt_on_tape(tape, &w, v[0], g_t, g_s)?;
        Ok((project(tape, out)?, 0))
    })
}

fn flatten(p: &ModelParams<f64>) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    p.map(&mut |_, t| v.push(t.clone()));
    v
}

/// Full objective of the configured model on `batch` images, with every
/// trainable parameter checked. Token and teacher weights are taken at
/// the base point and held fixed, since they are detached by design.
/// Experts start non-zero so the MoLE path is exercised.
pub fn full_model(cfg: &TrainConfig, batch: usize, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.params.mole {
        for e in &mut layer.experts {
            e.up = randn(&mut rng, e.up.shape(), 0.05).cast();
        }
    }
    let params = model.params.cast::<f64>();
    let teachers = model.teachers.cast::<f64>();
    let data = SyntheticDataset::new(cfg.seed, cfg.image_size, cfg.num_classes);
    let batch_samples = data.batch(0, batch);
    let images: Vec<Tensor<f64>> = batch_samples.iter().map(|s| s.image.cast()).collect();
    let labels: Vec<usize> = batch_samples.iter().map(|s| s.label).collect();
    let views: Vec<TeacherView<f64>> = images
        .iter()
        .map(|img| model::teacher_view(&teachers, img))
        .collect::<Result<_>>()?;

    let plans: Vec<KdPlan<f64>> = {
        let mut tape = Tape::new();
        let (vars, _) = model::bind(&mut tape, &params, &|_| false);
        model::forward_batch(&mut tape, cfg, &vars, &views, &images, &labels, None)?.plans
    };
    let inputs = flatten(&params);
    run_check(inputs, samples, seed ^ 5, |tape, v| {
        let mut it = v.iter();
        let vars = params.map(&mut |_, _| *it.next().expect("one var per parameter"));
        let out = model::forward_batch(tape, cfg, &vars, &views, &images, &labels, Some(&plans))?;
        Ok((out.loss, routes_signature(&out.routes)))
    })
}
