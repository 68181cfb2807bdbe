//! Built-in self-check suite: loop oracles, gradient checks, identity at
//! initialisation and serialisation round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{self, AdapterParams};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::SyntheticDataset;
use crate::error::Result;
use crate::gradsuite;
use crate::kd::{self, KdConfig, KdWeights};
use crate::model::Model;
use crate::mole;
use crate::numerics::gradcheck::{GradCheckReport, DEFAULT_REL_TOL};
use crate::numerics::Tensor;
use crate::train::Trainer;
use crate::vit;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Minimum checked coordinates for every gradient check.
pub const MIN_GRAD_SAMPLES: usize = 50;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn tolerance_check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("max err {worst:.3e} (tol {tol:.0e})"),
    }
}

fn grad_check(name: &'static str, r: Result<GradCheckReport>) -> Check {
    match r {
        Ok(r) => Check {
            name,
            passed: r.passed(DEFAULT_REL_TOL, MIN_GRAD_SAMPLES),
            detail: format!(
                "{} coords, {} skipped, max rel err {:.3e}",
                r.samples.len(),
                r.skipped,
                r.max_rel_err()
            ),
        },
        Err(e) => failed(name, e),
    }
}

fn failed(name: &'static str, e: impl std::fmt::Display) -> Check {
    Check {
        name,
        passed: false,
        detail: format!("error: {e}"),
    }
}

fn guarded(name: &'static str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| failed(name, e))
}

fn matmul_oracle() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (13, 8, 6)] {
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        let c = a.matmul(&b)?;
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                worst = worst.max((s - c.data()[i * n + j]).abs());
            }
        }
    }
    Ok(tolerance_check("matmul vs triple loop", worst, 1e-12))
}

fn softmax_oracle() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[6, 5]).scale(10.0);
    let s = x.softmax(1)?;
    let mut worst = 0.0f64;
    for i in 0..6 {
        let row = x.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v.exp() / z - s.data()[i * 5 + j]).abs());
        }
    }
    Ok(tolerance_check("softmax vs exp/sum", worst, 1e-12))
}

fn kd_loop_oracle() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=3);
        let n = [1, 4, 16][rng.random_range(0..3)];
        let c = [1, 8][rng.random_range(0..2)];
        let s = randn(&mut rng, &[n, c]);
        let ts: Vec<Tensor<f64>> = (0..m).map(|_| randn(&mut rng, &[n, c])).collect();
        let w = KdWeights {
            token_w: randn(&mut rng, &[n]).softmax(0)?,
            teacher_w: randn(&mut rng, &[m]).softmax(0)?,
        };
        let got = kd::kd_loss(&s, &ts, &w)?;
        let mut want = 0.0;
        for (i, t) in ts.iter().enumerate() {
            for j in 0..n {
                let mut sq = 0.0;
                for k in 0..c {
                    let d = t.data()[j * c + k] - s.data()[j * c + k];
                    sq += d * d;
                }
                want += w.teacher_w.data()[i] * (w.token_w.data()[j] + 1.0 / n as f64) * sq / c as f64;
            }
        }
        worst = worst.max((got - want).abs());
    }
    Ok(tolerance_check("kd loss vs nested loops", worst, 1e-6))
}

fn teacher_weight_cases() -> Result<Check> {
    let cfg = KdConfig::default();
    let w = kd::compose_teacher_weights(&[0.0, 1.0, 1.0 + 4f64.ln()], &cfg)?;
    let want = [0.8, 0.04, 0.16];
    let worst = w
        .data()
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let exact = w.data()[0] == 0.8;
    let mut c = tolerance_check("teacher weights hand case", worst, 1e-12);
    c.passed &= exact;
    Ok(c)
}

fn routing_invariants() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut bad = 0;
    for _ in 0..10_000 {
        let z = randn(&mut rng, &[1, 4]);
        let a = z.argmax(1)?;
        let scaled = z.scale(rng.random_range(0.01..100.0));
        if z.softmax(1)?.argmax(1)? != a || scaled.argmax(1)? != a {
            bad += 1;
        }
    }
    let tie = Tensor::from_rows(&[vec![1.0f64, 3.0, 3.0, -1.0]]).argmax(1)?;
    Ok(Check {
        name: "routing argmax invariants",
        passed: bad == 0 && tie == [1],
        detail: format!("{bad} violations in 10000, tie -> {}", tie[0]),
    })
}

fn mole_identity(cfg: &TrainConfig) -> Result<Check> {
    let model = Model::init(cfg)?;
    let data = SyntheticDataset::new(cfg.seed, cfg.image_size, cfg.num_classes);
    let mut mismatched = 0;
    for i in 0..20 {
        let img = data.sample(i).image;
        let base = vit::encode(&cfg.student, &model.params.student, None, &img)?;
        let with = vit::encode(&cfg.student, &model.params.student, Some(&model.params.mole), &img)?;
        let same = base
            .tokens
            .data()
            .iter()
            .zip(with.tokens.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatched += 1;
        }
    }
    Ok(Check {
        name: "mole identity at init",
        passed: mismatched == 0 && !model.params.mole.is_empty(),
        detail: format!("{mismatched} of 20 images differ"),
    })
}

fn bilinear_oracle() -> Result<Check> {
    // A field linear in (row, col) is reproduced exactly by bilinear
    // resampling away from the clamped border.
    let (g_t, g_s) = (3, 6);
    let coord = |i: usize, g: usize| (i as f64 + 0.5) * g_t as f64 / g as f64 - 0.5;
    let src = Tensor::from_fn(&[g_t * g_t, 1], |i| 2.0 * (i / g_t) as f64 - (i % g_t) as f64);
    let out = adapters::align_grid(&src, g_t, g_s)?;
    let mut worst = 0.0f64;
    for r in 0..g_s {
        for c in 0..g_s {
            let (y, x) = (coord(r, g_s), coord(c, g_s));
            if !(0.0..=(g_t - 1) as f64).contains(&y) || !(0.0..=(g_t - 1) as f64).contains(&x) {
                continue;
            }
            worst = worst.max((out.data()[r * g_s + c] - (2.0 * y - x)).abs());
        }
    }
    let same = adapters::align_grid(&src, g_t, g_t)? == src;
    let mut ch = tolerance_check("bilinear grid alignment", worst, 1e-12);
    ch.passed &= same;
    Ok(ch)
}

fn adapter_identity() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tokens = randn(&mut rng, &[16, 5]);
    let out = adapters::adapt(&AdapterParams::identity(5), &tokens, 4, 4)?;
    let worst = out
        .data()
        .iter()
        .zip(tokens.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(tolerance_check("identity adapter", worst, 1e-12))
}

fn checkpoint_round_trip(cfg: &TrainConfig) -> Result<Check> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.train_step()?;
    let first = checkpoint::encode(&trainer.checkpoint())?;
    let reloaded = Trainer::resume(cfg.clone(), &checkpoint::decode(&first)?)?;
    let second = checkpoint::encode(&reloaded.checkpoint())?;
    Ok(Check {
        name: "checkpoint save/load/save",
        passed: first == second,
        detail: format!("{} bytes", first.len()),
    })
}

fn config_round_trip(cfg: &TrainConfig) -> Result<Check> {
    let back = TrainConfig::parse(&cfg.render())?;
    Ok(Check {
        name: "config render/parse",
        passed: &back == cfg,
        detail: String::new(),
    })
}

fn param_accounting(cfg: &TrainConfig) -> Result<Check> {
    let model = Model::init(cfg)?;
    let closed = mole::mole_param_count(&cfg.student, &cfg.mole);
    let counts = model.params.group_counts();
    let enumerated_mole = counts[1].1;
    let enumerated_student = counts[0].1;
    Ok(Check {
        name: "mole parameter accounting",
        passed: closed.mole_params == enumerated_mole
            && closed.total_student_params == enumerated_student + enumerated_mole,
        detail: format!("{} mole of {} student", closed.mole_params, closed.total_student_params),
    })
}

/// Runs every check against `cfg` (normally the default configuration).
/// Gradient checks use a batch of 2 images.
pub fn run_all(cfg: &TrainConfig) -> Vec<Check> {
    let mut quick = cfg.clone();
    quick.batch_size = 2;
    quick.eval_images = 2;
    vec![
        guarded("matmul vs triple loop", matmul_oracle),
        guarded("softmax vs exp/sum", softmax_oracle),
        guarded("kd loss vs nested loops", kd_loop_oracle),
        guarded("teacher weights hand case", teacher_weight_cases),
        guarded("routing argmax invariants", routing_invariants),
        grad_check("grad: kd loss", gradsuite::kd_loss(3, 16, 8, 60, 21)),
        grad_check("grad: total loss", gradsuite::total_loss(60, 22)),
        grad_check("grad: mole forward", gradsuite::mole_forward(60, 23)),
        grad_check("grad: adapter", gradsuite::adapt(60, 24)),
        grad_check("grad: full model", gradsuite::full_model(cfg, 2, 60, 0)),
        guarded("mole identity at init", || mole_identity(cfg)),
        guarded("bilinear grid alignment", bilinear_oracle),
        guarded("identity adapter", adapter_identity),
        guarded("checkpoint save/load/save", || checkpoint_round_trip(&quick)),
        guarded("config render/parse", || config_round_trip(cfg)),
        guarded("mole parameter accounting", || param_accounting(cfg)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_oracles_pass() {
        for c in [
            matmul_oracle(),
            softmax_oracle(),
            teacher_weight_cases(),
            bilinear_oracle(),
            adapter_identity(),
        ] {
            let c = c.unwrap();
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
