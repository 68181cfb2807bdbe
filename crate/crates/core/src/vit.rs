//! Pre-norm vision transformer used for the student and every teacher.

use crate::error::{Error, Result};
use crate::mole::{self, MoleLayer};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{join, Init, LeafFn, LeafFnMut};

pub const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden_dim: usize,
    pub has_cls_token: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("encoder {k} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patch grid side `g`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Visual token count `n = g²`, excluding [CLS].
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_tokens() + usize::from(self.has_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Closed-form element count of [`EncoderParams`].
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.ffn_hidden_dim;
        let embed = self.patch_dim() * d + d + self.seq_len() * d + usize::from(self.has_cls_token) * d;
        let attn = 4 * d * d + d;
        let ffn = d * h + h + h * d + d;
        let block = 4 * d + attn + ffn;
        embed + self.depth * block + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub bo: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<P> {
    /// `[p²·C × d]`
    pub patch_w: P,
    pub patch_b: P,
    /// `[1 × d]`, present iff the config has a [CLS] token.
    pub cls: Option<P>,
    /// `[seq_len × d]`
    pub pos: P,
    pub blocks: Vec<BlockWeights<P>>,
    pub final_gamma: P,
    pub final_beta: P,
}

pub type EncoderParams<T = f32> = EncoderWeights<Tensor<T>>;

impl<P> BlockWeights<P> {
    fn leaves(&self) -> [(&'static str, &P); 13] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn map<U>(&self, prefix: &str, f: &mut LeafFn<'_, P, U>) -> BlockWeights<U> {
        let [a, b, c, d, e, g, h, i, j, k, l, m, n] = self.leaves().map(|(name, p)| f(&join(prefix, name), p));
        BlockWeights {
            ln1_gamma: a,
            ln1_beta: b,
            wq: c,
            wk: d,
            wv: e,
            wo: g,
            bo: h,
            ln2_gamma: i,
            ln2_beta: j,
            w1: k,
            b1: l,
            w2: m,
            b2: n,
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut LeafFnMut<'_, P>) {
        let names = ["ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo"];
        let slots = [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
        ];
        for (n, p) in names.iter().zip(slots) {
            f(&join(prefix, n), p);
        }
        let names = ["ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"];
        let slots = [
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ];
        for (n, p) in names.iter().zip(slots) {
            f(&join(prefix, n), p);
        }
    }
}

impl<P> EncoderWeights<P> {
    pub fn map<U>(&self, prefix: &str, f: &mut LeafFn<'_, P, U>) -> EncoderWeights<U> {
        EncoderWeights {
            patch_w: f(&join(prefix, "patch.w"), &self.patch_w),
            patch_b: f(&join(prefix, "patch.b"), &self.patch_b),
            cls: self.cls.as_ref().map(|c| f(&join(prefix, "cls"), c)),
            pos: f(&join(prefix, "pos"), &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("blocks.{i}")), f))
                .collect(),
            final_gamma: f(&join(prefix, "final_ln.gamma"), &self.final_gamma),
            final_beta: f(&join(prefix, "final_ln.beta"), &self.final_beta),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut LeafFnMut<'_, P>) {
        f(&join(prefix, "patch.w"), &mut self.patch_w);
        f(&join(prefix, "patch.b"), &mut self.patch_b);
        if let Some(c) = self.cls.as_mut() {
            f(&join(prefix, "cls"), c);
        }
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        f(&join(prefix, "final_ln.gamma"), &mut self.final_gamma);
        f(&join(prefix, "final_ln.beta"), &mut self.final_beta);
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, init: &mut Init) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.ffn_hidden_dim;
        let ones = || Tensor::full(&[d], T::one());
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights {
                ln1_gamma: ones(),
                ln1_beta: zeros(d),
                wq: init.matrix(d, d),
                wk: init.matrix(d, d),
                wv: init.matrix(d, d),
                wo: init.matrix(d, d),
                bo: zeros(d),
                ln2_gamma: ones(),
                ln2_beta: zeros(d),
                w1: init.matrix(d, h),
                b1: zeros(h),
                w2: init.matrix(h, d),
                b2: zeros(d),
            })
            .collect();
        Self {
            patch_w: init.matrix(cfg.patch_dim(), d),
            patch_b: zeros(d),
            cls: cfg.has_cls_token.then(|| init.normal(&[1, d], EMBED_STD)),
            pos: init.normal(&[cfg.seq_len(), d], EMBED_STD),
            blocks,
            final_gamma: ones(),
            final_beta: zeros(d),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map("", &mut |_, t| n += t.numel());
        n
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        self.map("", &mut |_, t| t.cast())
    }
}

/// Flat gather indices turning an `H×W×C` image into `[g² × p²C]` patch
/// rows, patches in row-major grid order, each patch laid out (y, x, c).
pub fn patchify_index(image_size: usize, channels: usize, patch: usize) -> Vec<usize> {
    let g = image_size / patch;
    let mut idx = Vec::with_capacity(image_size * image_size * channels);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                for px in 0..patch {
                    let y = gy * patch + py;
                    let x = gx * patch + px;
                    for c in 0..channels {
                        idx.push((y * image_size + x) * channels + c);
                    }
                }
            }
        }
    }
    idx
}

pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (h, c) = image_dims(image)?;
    if h % patch != 0 {
        return Err(Error::invalid(format!("image side {h} not divisible by patch {patch}")));
    }
    let g = h / patch;
    Ok(image.gather(&patchify_index(h, c, patch), &[g * g, patch * patch * c])?)
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, c] if h == w => Ok((h, c)),
        s => Err(Error::invalid(format!("expected a square H×W×C image, got {s:?}"))),
    }
}

/// Tape handles produced by [`encode_on_tape`].
#[derive(Clone, Debug)]
pub struct EncodedVars<T: Scalar> {
    /// `[n × d]` output tokens without [CLS].
    pub tokens: Var,
    /// `[1 × d]` final [CLS] state.
    pub cls: Option<Var>,
    /// `[seq × d]` normalised input of the final block's attention; row 0
    /// is the [CLS] query input when present.
    pub final_attn_input: Var,
    /// `[n]` final-block [CLS]→token scaled dot products, head-averaged.
    pub cls_scores: Option<Tensor<T>>,
    /// `[seq × seq]` final-block attention probabilities, head-averaged.
    pub final_attention: Tensor<T>,
    /// Expert id per token, per block (empty without MoLE).
    pub routes: Vec<Vec<usize>>,
}

/// Records a full encoder forward pass on `tape`.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    w: &EncoderWeights<Var>,
    mole: Option<&[MoleLayer<Var>]>,
    image: Var,
) -> Result<EncodedVars<T>> {
    let (h, c) = image_dims(tape.value(image))?;
    if h != cfg.image_size || c != cfg.channels {
        return Err(Error::invalid(format!(
            "image {:?} does not match encoder config {}×{}×{}",
            tape.value(image).shape(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        )));
    }
    if let Some(m) = mole {
        if m.len() != cfg.depth {
            return Err(Error::invalid(format!(
                "{} MoLE layers for an encoder of depth {}",
                m.len(),
                cfg.depth
            )));
        }
    }
    let n = cfg.num_tokens();
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let patches = tape.gather(image, patchify_index(h, c, cfg.patch_size), &[n, cfg.patch_dim()])?;
    let emb = tape.matmul(patches, w.patch_w)?;
    let emb = tape.add_bias(emb, w.patch_b)?;
    let seq = match w.cls {
        Some(cls) => tape.concat(&[cls, emb], 0)?,
        None => emb,
    };
    let mut x = tape.add(seq, w.pos)?;
    let seq_len = cfg.seq_len();
    let eps = T::from_f64(LN_EPS);
    let scale = T::one() / T::from_usize(dh).sqrt();
    let heads_t = T::from_usize(heads);

    let mut routes = Vec::new();
    let mut final_attn_input = x;
    let mut final_attention = Tensor::zeros(&[seq_len, seq_len]);
    let mut cls_scores = None;
    for (bi, b) in w.blocks.iter().enumerate() {
        let last = bi + 1 == w.blocks.len();
        let hn = tape.layer_norm(x, b.ln1_gamma, b.ln1_beta, eps)?;
        let q = tape.matmul(hn, b.wq)?;
        let k = tape.matmul(hn, b.wk)?;
        let v = tape.matmul(hn, b.wv)?;
        let mut head_outs = Vec::with_capacity(heads);
        let mut prob_sum = Tensor::<T>::zeros(&[seq_len, seq_len]);
        let mut score_sum = Tensor::<T>::zeros(&[seq_len, seq_len]);
        for hd in 0..heads {
            let qh = tape.slice(q, 1, hd * dh, dh)?;
            let kh = tape.slice(k, 1, hd * dh, dh)?;
            let vh = tape.slice(v, 1, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s, 1)?;
            if last {
                prob_sum.add_assign(tape.value(a));
                score_sum.add_assign(tape.value(s));
            }
            head_outs.push(tape.matmul(a, vh)?);
        }
        let o = if heads == 1 { head_outs[0] } else { tape.concat(&head_outs, 1)? };
        let o = tape.matmul(o, b.wo)?;
        let o = tape.add_bias(o, b.bo)?;
        x = tape.add(x, o)?;

        let hn2 = tape.layer_norm(x, b.ln2_gamma, b.ln2_beta, eps)?;
        let f = tape.matmul(hn2, b.w1)?;
        let f = tape.add_bias(f, b.b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, b.w2)?;
        let mut f = tape.add_bias(f, b.b2)?;
        if let Some(layers) = mole {
            let (out, r) = mole::forward_on_tape(tape, &layers[bi], f, hn2)?;
            f = out;
            routes.push(r);
        }
        x = tape.add(x, f)?;

        if last {
            final_attn_input = hn;
            final_attention = prob_sum.scale(T::one() / heads_t);
            if cfg.has_cls_token {
                let row = score_sum.row(0)[1..].to_vec();
                cls_scores = Some(Tensor::vector(row).scale(T::one() / heads_t));
            }
        }
    }
    let x = tape.layer_norm(x, w.final_gamma, w.final_beta, eps)?;
    let (tokens, cls) = if cfg.has_cls_token {
        (tape.slice(x, 0, 1, n)?, Some(tape.slice(x, 0, 0, 1)?))
    } else {
        (x, None)
    };
    Ok(EncodedVars {
        tokens,
        cls,
        final_attn_input,
        cls_scores,
        final_attention,
        routes,
    })
}

/// Value-level encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T: Scalar = f32> {
    pub tokens: Tensor<T>,
    pub cls_token: Option<Tensor<T>>,
    pub cls_attention_scores: Option<Tensor<T>>,
    pub final_attention: Tensor<T>,
    pub final_attn_input: Tensor<T>,
    pub routes: Vec<Vec<usize>>,
}

/// Inference-only forward pass; nothing requires a gradient.
pub fn encode<T: Scalar>(
    cfg: &EncoderConfig,
    params: &EncoderParams<T>,
    mole: Option<&[MoleLayer<Tensor<T>>]>,
    image: &Tensor<T>,
) -> Result<EncoderOutput<T>> {
    let mut tape = Tape::new();
    let w = params.map("", &mut |_, t| tape.constant(t.clone()));
    let mole_vars: Option<Vec<MoleLayer<Var>>> =
        mole.map(|ls| ls.iter().map(|l| l.map("", &mut |_, t| tape.constant(t.clone()))).collect());
    let img = tape.constant(image.clone());
    let out = encode_on_tape(&mut tape, cfg, &w, mole_vars.as_deref(), img)?;
    Ok(EncoderOutput {
        tokens: tape.value(out.tokens).clone(),
        cls_token: out.cls.map(|c| tape.value(c).reshape(&[cfg.embed_dim]).expect("cls shape")),
        cls_attention_scores: out.cls_scores,
        final_attention: out.final_attention,
        final_attn_input: tape.value(out.final_attn_input).clone(),
        routes: out.routes,
    })
}

/// Softmax of the [CLS] attention scores laid out on the `g×g` patch grid.
pub fn cls_attention_map<T: Scalar>(out: &EncoderOutput<T>) -> Result<Tensor<T>> {
    let scores = out
        .cls_attention_scores
        .as_ref()
        .ok_or_else(|| Error::Contract("encoder has no [CLS] token to take attention from".into()))?;
    let n = scores.numel();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::Contract(format!("{n} tokens do not form a square grid")));
    }
    Ok(scores.softmax(0)?.reshape(&[g, g])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(depth: usize, d: usize, heads: usize, cls: bool) -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            depth,
            embed_dim: d,
            num_heads: heads,
            ffn_hidden_dim: 2 * d,
            has_cls_token: cls,
        }
    }

    #[test]
    fn token_shape_arithmetic() {
        let cfg = tiny(1, 4, 1, true);
        let p = EncoderParams::<f32>::init(&cfg, &mut Init::new(0, 0));
        let img = Tensor::from_fn(&[16, 16, 3], |i| (i % 7) as f32 / 7.0);
        let out = encode(&cfg, &p, None, &img).unwrap();
        assert_eq!(out.tokens.shape(), &[4, 4]);
        assert_eq!(out.cls_attention_scores.as_ref().unwrap().shape(), &[4]);
        assert_eq!(out.cls_token.as_ref().unwrap().shape(), &[4]);
    }

    #[test]
    fn closed_form_param_count_matches_enumeration() {
        for cls in [false, true] {
            let cfg = tiny(3, 8, 2, cls);
            let p = EncoderParams::<f32>::init(&cfg, &mut Init::new(1, 0));
            assert_eq!(p.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn map_and_for_each_mut_agree_on_names() {
        let cfg = tiny(2, 4, 2, true);
        let mut p = EncoderParams::<f32>::init(&cfg, &mut Init::new(1, 0));
        let mut a = Vec::new();
        p.map("enc", &mut |n, _| a.push(n.to_string()));
        let mut b = Vec::new();
        p.for_each_mut("enc", &mut |n, _| b.push(n.to_string()));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(1, 6, 4, true);
        assert!(c.validate().is_err());
        c.num_heads = 3;
        assert!(c.validate().is_ok());
        c.patch_size = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn wrong_image_is_config_error() {
        let cfg = tiny(1, 4, 1, false);
        let p = EncoderParams::<f32>::init(&cfg, &mut Init::new(0, 0));
        let img = Tensor::zeros(&[8, 8, 3]);
        assert!(matches!(encode(&cfg, &p, None, &img), Err(Error::Config(_))));
    }

    #[test]
    fn map_requires_cls() {
        let cfg = tiny(1, 4, 1, false);
        let p = EncoderParams::<f32>::init(&cfg, &mut Init::new(0, 0));
        let out = encode(&cfg, &p, None, &Tensor::zeros(&[16, 16, 3])).unwrap();
        assert!(matches!(cls_attention_map(&out), Err(Error::Contract(_))));
    }
}
