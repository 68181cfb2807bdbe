//! Teacher-to-student token adapters: bilinear grid alignment followed by a
//! two-layer GELU MLP.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{join, Init, LeafFn, LeafFnMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterShape {
    pub source_grid: usize,
    pub target_grid: usize,
    pub source_dim: usize,
    pub target_dim: usize,
    pub hidden: usize,
}

impl AdapterShape {
    /// Hidden width defaults to `max(d_t, d_s)`.
    pub fn new(source_grid: usize, target_grid: usize, source_dim: usize, target_dim: usize, hidden: Option<usize>) -> Self {
        Self {
            source_grid,
            target_grid,
            source_dim,
            target_dim,
            hidden: hidden.unwrap_or(source_dim.max(target_dim)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_grid == 0 || self.target_grid == 0 || self.source_dim == 0 || self.target_dim == 0 {
            return Err(Error::invalid("adapter grids and dims must be positive"));
        }
        if 2 * self.hidden < self.source_dim.max(self.target_dim) {
            return Err(Error::invalid(format!(
                "adapter hidden width {} is below max(d_t, d_s)/2",
                self.hidden
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.source_dim * self.hidden + self.hidden + self.hidden * self.target_dim + self.target_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<P> {
    /// `[d_t × h]`
    pub w1: P,
    pub b1: P,
    /// `[h × d_s]`
    pub w2: P,
    pub b2: P,
}

pub type AdapterParams<T = f32> = AdapterWeights<Tensor<T>>;

impl<P> AdapterWeights<P> {
    pub fn map<U>(&self, prefix: &str, f: &mut LeafFn<'_, P, U>) -> AdapterWeights<U> {
        AdapterWeights {
            w1: f(&join(prefix, "w1"), &self.w1),
            b1: f(&join(prefix, "b1"), &self.b1),
            w2: f(&join(prefix, "w2"), &self.w2),
            b2: f(&join(prefix, "b2"), &self.b2),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut LeafFnMut<'_, P>) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

impl<T: Scalar> AdapterParams<T> {
    pub fn init(shape: &AdapterShape, init: &mut Init) -> Self {
        Self {
            w1: init.matrix(shape.source_dim, shape.hidden),
            b1: Tensor::zeros(&[shape.hidden]),
            w2: init.matrix(shape.hidden, shape.target_dim),
            b2: Tensor::zeros(&[shape.target_dim]),
        }
    }

    /// Weights whose MLP is the exact identity on `d`-dim tokens, using
    /// `gelu(z) - gelu(-z) = z`: `w1 = [I, -I]`, `w2 = [I; -I]`, `h = 2d`.
    pub fn identity(dim: usize) -> Self {
        let w1 = Tensor::from_fn(&[dim, 2 * dim], |k| {
            let (i, j) = (k / (2 * dim), k % (2 * dim));
            if j == i {
                T::one()
            } else if j == i + dim {
                -T::one()
            } else {
                T::zero()
            }
        });
        let w2 = Tensor::from_fn(&[2 * dim, dim], |k| {
            let (i, j) = (k / dim, k % dim);
            if i == j {
                T::one()
            } else if i == j + dim {
                -T::one()
            } else {
                T::zero()
            }
        });
        Self {
            w1,
            b1: Tensor::zeros(&[2 * dim]),
            w2,
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn check(&self, d_t: usize) -> Result<()> {
        let (a, h) = self.w1.dims2("adapter")?;
        let (h2, d_s) = self.w2.dims2("adapter")?;
        if a != d_t || h2 != h || self.b1.shape() != [h] || self.b2.shape() != [d_s] {
            return Err(Error::invalid(format!(
                "adapter weights w1 {:?} b1 {:?} w2 {:?} b2 {:?} do not fit {d_t}-dim tokens",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }
}

/// 1-D linear interpolation weights `[dst × src]` with half-pixel centres
/// and edge clamping. Rows sum to 1; the identity when `src == dst`.
pub fn interp_matrix(src: usize, dst: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; src]; dst];
    for (i, row) in m.iter_mut().enumerate() {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        row[lo] += 1.0 - frac;
        row[hi] += frac;
    }
    m
}

/// `[g_s² × g_t²]` bilinear resampling matrix over row-major grids.
pub fn resample_matrix<T: Scalar>(g_t: usize, g_s: usize) -> Tensor<T> {
    let m = interp_matrix(g_t, g_s);
    let nt = g_t * g_t;
    Tensor::from_fn(&[g_s * g_s, nt], |k| {
        let (o, s) = (k / nt, k % nt);
        let (oy, ox) = (o / g_s, o % g_s);
        let (sy, sx) = (s / g_t, s % g_t);
        T::from_f64(m[oy][sy] * m[ox][sx])
    })
}

/// `[d_t × d_s]` linear interpolation along the channel axis; used by the
/// plain-interpolation baseline in place of a learned adapter.
pub fn channel_resample_matrix<T: Scalar>(d_t: usize, d_s: usize) -> Tensor<T> {
    let m = interp_matrix(d_t, d_s);
    Tensor::from_fn(&[d_t, d_s], |k| T::from_f64(m[k % d_s][k / d_s]))
}

fn grid_of(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::Contract(format!("{n} tokens do not form a square grid")));
    }
    Ok(g)
}

/// Bilinearly resamples a `g_t×g_t` token grid to `g_s×g_s`, channelwise.
pub fn align_grid<T: Scalar>(tokens: &Tensor<T>, g_t: usize, g_s: usize) -> Result<Tensor<T>> {
    let (n, _) = tokens.dims2("align_grid")?;
    if grid_of(n)? != g_t {
        return Err(Error::Contract(format!("{n} tokens do not form a {g_t}×{g_t} grid")));
    }
    if g_t == g_s {
        return Ok(tokens.clone());
    }
    Ok(resample_matrix(g_t, g_s).matmul(tokens)?)
}

pub fn align_grid_on_tape<T: Scalar>(tape: &mut Tape<T>, tokens: Var, g_t: usize, g_s: usize) -> Result<Var> {
    let (n, _) = tape.value(tokens).dims2("align_grid")?;
    if grid_of(n)? != g_t {
        return Err(Error::Contract(format!("{n} tokens do not form a {g_t}×{g_t} grid")));
    }
    if g_t == g_s {
        return Ok(tokens);
    }
    let r = tape.constant(resample_matrix(g_t, g_s));
    Ok(tape.matmul(r, tokens)?)
}

/// `gelu(x·w1 + b1)·w2 + b2` on aligned tokens.
pub fn adapt_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    w: &AdapterWeights<Var>,
    tokens: Var,
    g_t: usize,
    g_s: usize,
) -> Result<Var> {
    let (_, d_t) = tape.value(tokens).dims2("adapt")?;
    let shapes_ok = tape.value(w.w1).shape().first() == Some(&d_t)
        && tape.value(w.w1).ndim() == 2
        && tape.value(w.w2).ndim() == 2
        && tape.value(w.w1).shape()[1] == tape.value(w.w2).shape()[0];
    if !shapes_ok {
        return Err(Error::invalid(format!(
            "adapter w1 {:?} / w2 {:?} do not fit {d_t}-dim tokens",
            tape.value(w.w1).shape(),
            tape.value(w.w2).shape()
        )));
    }
    let x = align_grid_on_tape(tape, tokens, g_t, g_s)?;
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_bias(h, w.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, w.w2)?;
    Ok(tape.add_bias(o, w.b2)?)
}

pub fn adapt<T: Scalar>(params: &AdapterParams<T>, tokens: &Tensor<T>, g_t: usize, g_s: usize) -> Result<Tensor<T>> {
    let (_, d_t) = tokens.dims2("adapt")?;
    params.check(d_t)?;
    let x = align_grid(tokens, g_t, g_s)?;
    let h = x.matmul(&params.w1)?.add_row_bias(&params.b1)?.gelu();
    Ok(h.matmul(&params.w2)?.add_row_bias(&params.b2)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_grids_are_bit_identical() {
        let x = Tensor::from_fn(&[9, 3], |i| (i as f32).sin());
        assert_eq!(align_grid(&x, 3, 3).unwrap(), x);
    }

    #[test]
    fn constants_are_preserved() {
        for (gt, gs) in [(2, 4), (8, 4), (3, 5), (4, 2)] {
            let x = Tensor::full(&[gt * gt, 2], 1.75f64);
            let y = align_grid(&x, gt, gs).unwrap();
            assert_eq!(y.shape(), &[gs * gs, 2]);
            assert!(y.data().iter().all(|v| (v - 1.75).abs() < 1e-12));
        }
    }

    #[test]
    fn non_square_is_contract_error() {
        let x = Tensor::<f32>::zeros(&[5, 2]);
        assert!(matches!(align_grid(&x, 2, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let shape = AdapterShape::new(2, 4, 3, 5, None);
        let mut p = AdapterParams::<f32>::init(&shape, &mut Init::new(0, 0));
        p.w1 = Tensor::zeros(&[3, 5]);
        p.w2 = Tensor::zeros(&[5, 5]);
        let out = adapt(&p, &Tensor::from_fn(&[4, 3], |i| i as f32), 2, 4).unwrap();
        assert_eq!(out, Tensor::zeros(&[16, 5]));
    }

    #[test]
    fn identity_construction() {
        let p = AdapterParams::<f64>::identity(4);
        let x = Tensor::from_fn(&[9, 4], |i| (i as f64 * 0.7).cos() * 3.0);
        let y = adapt(&p, &x, 3, 3).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dims_are_config_error() {
        let p = AdapterParams::<f32>::identity(4);
        let x = Tensor::zeros(&[4, 3]);
        assert!(matches!(adapt(&p, &x, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn channel_matrix_identity_and_constants() {
        let m = channel_resample_matrix::<f64>(4, 4);
        assert_eq!(m, Tensor::from_fn(&[4, 4], |k| if k % 5 == 0 { 1.0 } else { 0.0 }));
        let c = channel_resample_matrix::<f64>(6, 4);
        let y = Tensor::full(&[2, 6], 2.0).matmul(&c).unwrap();
        assert!(y.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
