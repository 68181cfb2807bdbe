use mtkd::adapters::{self, AdapterParams, AdapterShape};
use mtkd::numerics::Tensor;
use mtkd::params::Init;
use proptest::prelude::*;

#[test]
fn two_by_two_to_four_by_four_by_hand() {
    // Half-pixel centres put outputs at -0.25, 0.25, 0.75, 1.25 (clamped
    // to [0, 1]) in source coordinates.
    let src = Tensor::from_fn(&[4, 1], |i| [0.0, 4.0, 8.0, 12.0][i]);
    let out = adapters::align_grid(&src, 2, 4).unwrap();
    #[rustfmt::skip]
    let want = [
        0.0, 1.0, 3.0, 4.0,
        2.0, 3.0, 5.0, 6.0,
        6.0, 7.0, 9.0, 10.0,
        8.0, 9.0, 11.0, 12.0,
    ];
    assert_eq!(out.data(), &want);
}

#[test]
fn downsampling_averages_neighbours() {
    let src = Tensor::from_fn(&[16, 1], |i| i as f64);
    let out = adapters::align_grid(&src, 4, 2).unwrap();
    // Each 2×2 output sits at the centre of a 2×2 source block.
    assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn adapt_matches_token_loops() {
    let shape = AdapterShape::new(3, 2, 4, 5, None);
    let p = AdapterParams::<f64>::init(&shape, &mut Init::new(1, 2));
    let tokens = Init::new(2, 2).normal(&[9, 4], 1.0);
    let got = adapters::adapt(&p, &tokens, 3, 2).unwrap();
    let aligned = adapters::align_grid(&tokens, 3, 2).unwrap();
    let (dt, h, ds) = (4, p.w1.shape()[1], 5);
    for j in 0..4 {
        let x = aligned.row(j);
        let hid: Vec<f64> = (0..h)
            .map(|k| gelu((0..dt).map(|i| x[i] * p.w1.data()[i * h + k]).sum::<f64>() + p.b1.data()[k]))
            .collect();
        for c in 0..ds {
            let want = (0..h).map(|k| hid[k] * p.w2.data()[k * ds + c]).sum::<f64>() + p.b2.data()[c];
            assert!((got.data()[j * ds + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_adapter_passes_tokens_through() {
    let tokens = Init::new(3, 0).normal(&[16, 6], 2.0);
    let out = adapters::adapt(&AdapterParams::<f64>::identity(6), &tokens, 4, 4).unwrap();
    assert!(out.data().iter().zip(tokens.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn shape_errors() {
    assert!(adapters::align_grid(&Tensor::<f64>::zeros(&[5, 2]), 2, 3).is_err());
    let p = AdapterParams::<f64>::identity(3);
    assert!(adapters::adapt(&p, &Tensor::zeros(&[4, 2]), 2, 2).is_err());
    assert!(AdapterShape::new(2, 2, 8, 8, Some(3)).validate().is_err());
}

proptest! {
    #[test]
    fn alignment_is_linear(g_t in 1usize..6, g_s in 1usize..6, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
        let n = g_t * g_t;
        let x = Init::new(seed, 0).normal(&[n, 3], 1.0);
        let y = Init::new(seed, 1).normal(&[n, 3], 1.0);
        let lhs = adapters::align_grid(&x.scale(a).add(&y.scale(b)).unwrap(), g_t, g_s).unwrap();
        let rhs = adapters::align_grid(&x, g_t, g_s).unwrap().scale(a)
            .add(&adapters::align_grid(&y, g_t, g_s).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.data().iter().zip(rhs.data()).all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn resampling_preserves_constants(g_t in 1usize..7, g_s in 1usize..7, v in -5.0f64..5.0) {
        let out = adapters::align_grid(&Tensor::full(&[g_t * g_t, 2], v), g_t, g_s).unwrap();
        prop_assert_eq!(out.shape(), &[g_s * g_s, 2]);
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-12));
    }
}
