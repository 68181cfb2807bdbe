//! Mixture of LoRA experts attached to an FFN block.
//!
//! For FFN input `x` and base output `F(x)`, each token `j` is routed to
//! expert `i = argmax(softmax(f(x_j)))` by a linear router `f`, and the
//! block emits `F(x_j) + E_i(x_j)` where `E_i(x) = (x·down_i)·up_i`.
//! Routing is a hard, non-differentiable selection: gradients reach the
//! selected experts only, and the router receives none.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{join, Init, LeafFn, LeafFnMut};
use crate::vit::EncoderConfig;

pub const DEFAULT_EXPERTS: usize = 3;
pub const DEFAULT_RANK: usize = 32;
const LORA_DOWN_STD: f64 = 0.02;
const ROUTER_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoleConfig {
    pub experts: usize,
    pub rank: usize,
}

impl Default for MoleConfig {
    fn default() -> Self {
        Self {
            experts: DEFAULT_EXPERTS,
            rank: DEFAULT_RANK,
        }
    }
}

impl MoleConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::invalid("mole.experts must be at least 1"));
        }
        if self.rank == 0 || self.rank >= dim {
            return Err(Error::invalid(format!(
                "mole.rank must satisfy 1 <= r < d (r = {}, d = {dim})",
                self.rank
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert<P> {
    /// `[d × r]`
    pub down: P,
    /// `[r × d]`
    pub up: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router<P> {
    /// `[d × E]`
    pub weight: P,
    /// `[E]`
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoleLayer<P> {
    pub router: Router<P>,
    pub experts: Vec<LoraExpert<P>>,
}

impl<P> MoleLayer<P> {
    pub fn map<U>(&self, prefix: &str, f: &mut LeafFn<'_, P, U>) -> MoleLayer<U> {
        MoleLayer {
            router: Router {
                weight: f(&join(prefix, "router.weight"), &self.router.weight),
                bias: f(&join(prefix, "router.bias"), &self.router.bias),
            },
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(i, e)| LoraExpert {
                    down: f(&join(prefix, &format!("expert.{i}.down")), &e.down),
                    up: f(&join(prefix, &format!("expert.{i}.up")), &e.up),
                })
                .collect(),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut LeafFnMut<'_, P>) {
        f(&join(prefix, "router.weight"), &mut self.router.weight);
        f(&join(prefix, "router.bias"), &mut self.router.bias);
        for (i, e) in self.experts.iter_mut().enumerate() {
            f(&join(prefix, &format!("expert.{i}.down")), &mut e.down);
            f(&join(prefix, &format!("expert.{i}.up")), &mut e.up);
        }
    }
}

impl<T: Scalar> MoleLayer<Tensor<T>> {
    /// Router and down-projections are small Gaussians; up-projections are
    /// zero so the layer starts as the identity on the base FFN.
    pub fn init(dim: usize, cfg: &MoleConfig, init: &mut Init) -> Self {
        let router = Router {
            weight: init.normal(&[dim, cfg.experts], ROUTER_STD),
            bias: Tensor::zeros(&[cfg.experts]),
        };
        let experts = (0..cfg.experts)
            .map(|_| LoraExpert {
                down: init.normal(&[dim, cfg.rank], LORA_DOWN_STD),
                up: Tensor::zeros(&[cfg.rank, dim]),
            })
            .collect();
        Self { router, experts }
    }

    pub fn dim(&self) -> usize {
        self.router.weight.shape()[0]
    }
}

/// Per-token top-1 expert ids. Softmax is monotone, so the argmax of the
/// raw router logits equals the argmax of their softmax; ties go to the
/// lowest expert id.
pub fn route<T: Scalar>(router: &Router<Tensor<T>>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = x.matmul(&router.weight)?.add_row_bias(&router.bias)?;
    Ok(logits.argmax(1)?)
}

/// Records `F*(x) = F(x) + E_route(x)(x)` on the tape, returning the output
/// and the route taken by each token.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &MoleLayer<Var>,
    ffn_out: Var,
    ffn_in: Var,
) -> Result<(Var, Vec<usize>)> {
    let (n, d) = tape.value(ffn_in).dims2("mole")?;
    if tape.value(ffn_out).shape() != [n, d] {
        return Err(Error::invalid(format!(
            "mole: ffn output {:?} does not match input {:?}",
            tape.value(ffn_out).shape(),
            [n, d]
        )));
    }
    let router = Router {
        weight: tape.value(layer.router.weight).clone(),
        bias: tape.value(layer.router.bias).clone(),
    };
    if router.weight.shape() != [d, layer.experts.len()] {
        return Err(Error::invalid(format!(
            "mole: router weight {:?} incompatible with d = {d} and {} experts",
            router.weight.shape(),
            layer.experts.len()
        )));
    }
    let routes = route(&router, tape.value(ffn_in))?;
    let mut out = ffn_out;
    for (e, expert) in layer.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&j| routes[j] == e).collect();
        if rows.is_empty() {
            continue;
        }
        let (dd, r) = tape.value(expert.down).dims2("mole")?;
        if dd != d || tape.value(expert.up).shape() != [r, d] {
            return Err(Error::invalid(format!(
                "mole: expert {e} has down {:?} / up {:?} for d = {d}",
                tape.value(expert.down).shape(),
                tape.value(expert.up).shape()
            )));
        }
        let xs = tape.select_rows(ffn_in, rows.clone())?;
        let h = tape.matmul(xs, expert.down)?;
        let delta = tape.matmul(h, expert.up)?;
        let placed = tape.scatter_rows(delta, rows, n)?;
        out = tape.add(out, placed)?;
    }
    Ok((out, routes))
}

/// Value-level [`forward_on_tape`].
pub fn mole_forward<T: Scalar>(
    layer: &MoleLayer<Tensor<T>>,
    ffn_out: &Tensor<T>,
    ffn_in: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut tape = Tape::new();
    let vars = layer.map("", &mut |_, t| tape.constant(t.clone()));
    let fo = tape.constant(ffn_out.clone());
    let fi = tape.constant(ffn_in.clone());
    let (out, routes) = forward_on_tape(&mut tape, &vars, fo, fi)?;
    Ok((tape.value(out).clone(), routes))
}

/// Per-expert token counts.
pub fn expert_usage(routes: &[usize], experts: usize) -> Vec<usize> {
    let mut counts = vec![0; experts];
    for &r in routes {
        counts[r] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub mole_params: usize,
    pub total_student_params: usize,
    pub ratio: f64,
}

/// Closed-form MoLE overhead: `depth × (E·2rd + d·E + E)` over the student
/// encoder plus MoLE.
pub fn mole_param_count(encoder: &EncoderConfig, mole: &MoleConfig) -> ParamCount {
    let d = encoder.embed_dim;
    let e = mole.experts;
    let r = mole.rank;
    let mole_params = encoder.depth * (e * 2 * r * d + d * e + e);
    let total_student_params = encoder.param_count() + mole_params;
    ParamCount {
        mole_params,
        total_student_params,
        ratio: mole_params as f64 / total_student_params as f64,
    }
}
