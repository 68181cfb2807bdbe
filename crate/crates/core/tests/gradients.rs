use mtkd::config::TrainConfig;
use mtkd::gradsuite;
use mtkd::numerics::gradcheck::{GradCheckReport, DEFAULT_REL_TOL};

fn assert_ok(name: &str, r: &GradCheckReport, min: usize) {
    let worst = r.worst();
    assert!(
        r.passed(DEFAULT_REL_TOL, min),
        "{name}: {} samples, {} skipped, worst {worst:?}",
        r.samples.len(),
        r.skipped
    );
}

#[test]
fn kd_loss_gradients() {
    assert_ok("kd", &gradsuite::kd_loss(3, 16, 8, 60, 0).unwrap(), 60);
}

#[test]
fn total_loss_gradients() {
    assert_ok("total", &gradsuite::total_loss(60, 1).unwrap(), 60);
}

#[test]
fn mole_gradients_skip_only_route_flips() {
    let r = gradsuite::mole_forward(60, 2).unwrap();
    assert_ok("mole", &r, 50);
}

#[test]
fn adapter_gradients() {
    assert_ok("adapter", &gradsuite::adapt(60, 3).unwrap(), 60);
}

#[test]
fn small_model_gradients() {
    let cfg = TrainConfig::parse(
        "image_size = 16\nstudent.patch_size = 8\nstudent.embed_dim = 16\nstudent.num_heads = 2\nmole.rank = 4\n",
    )
    .unwrap();
    assert_ok("model", &gradsuite::full_model(&cfg, 2, 60, 4).unwrap(), 50);
}

