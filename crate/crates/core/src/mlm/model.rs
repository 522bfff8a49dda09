use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::{self, LnCache};
use super::MlmError;
use crate::bpe::TokenId;
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Full,
    AttentionOnly,
    FfnOnly,
}

impl BlockKind {
    fn has_attention(self) -> bool {
        matches!(self, BlockKind::Full | BlockKind::AttentionOnly)
    }

    fn has_ffn(self) -> bool {
        matches!(self, BlockKind::Full | BlockKind::FfnOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Reuse the token embedding as the output projection.
    pub tie_head: bool,
    pub blocks: BlockKind,
    /// Checksum of the tokenizer the model was built for, if any.
    pub vocab_checksum: Option<u64>,
}

impl EncoderConfig {
    pub fn new(n_layers: usize, hidden: usize, n_heads: usize, vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers,
            hidden,
            n_heads,
            ffn_mult: 4,
            max_positions: 2048,
            vocab_size,
            seed: 0,
            tie_head: false,
            blocks: BlockKind::Full,
            vocab_checksum: None,
        }
    }

    pub fn validate(&self) -> Result<(), MlmError> {
        let bad = |m: &str| Err(MlmError::Config(m.to_string()));
        if self.hidden == 0 || self.n_heads == 0 {
            return bad("hidden and n_heads must be positive");
        }
        if self.hidden % self.n_heads != 0 {
            return Err(MlmError::HeadsDivisibility {
                hidden: self.hidden,
                n_heads: self.n_heads,
            });
        }
        if self.max_positions == 0 {
            return bad("max_positions must be at least 1");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive");
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn normal(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut t = Self::zeros(name, shape);
        for x in t.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * std);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct FfnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerIdx {
    pub attn: Option<AttnIdx>,
    pub ffn: Option<FfnIdx>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: Option<usize>,
    pub head_b: Option<usize>,
}

/// Pre-norm transformer encoder with an MLM output projection.
///
/// Parameters live in a flat, ordered tensor list; the order is the
/// checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    tensors: Vec<Tensor<T>>,
    layout: Layout,
}

/// One gradient buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(tensors: &[Tensor<T>]) -> Self {
        Grads {
            tensors: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.tensors {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }
}

struct AttnCache<T> {
    ln: LnCache<T>,
    a_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

struct FfnCache<T> {
    ln: LnCache<T>,
    f_in: Vec<T>,
    h1: Vec<T>,
    g: Vec<T>,
}

struct LayerCache<T> {
    attn: Option<AttnCache<T>>,
    ffn: Option<FfnCache<T>>,
}

/// Activations of one sequence, kept for the backward pass.
pub struct SeqCache<T> {
    ids: Vec<TokenId>,
    attend: Vec<bool>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    /// Final-normed hidden states `[T×d]`.
    pub hidden: Vec<T>,
}

impl<T> SeqCache<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds a freshly initialized encoder from `config.seed`.
pub fn build_encoder<T: Scalar>(config: &EncoderConfig) -> Result<EncoderModel<T>, MlmError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.hidden;
    let v = config.vocab_size;
    let f = config.ffn_hidden();
    let mut tensors: Vec<Tensor<T>> = Vec::new();
    let mut push = |t: Tensor<T>| {
        tensors.push(t);
        tensors.len() - 1
    };
    let tok_emb = push(Tensor::normal("tok_emb", &[v, d], INIT_STD, &mut rng));
    let pos_emb = push(Tensor::normal(
        "pos_emb",
        &[config.max_positions, d],
        INIT_STD,
        &mut rng,
    ));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let attn = config.blocks.has_attention().then(|| AttnIdx {
            ln_g: push(Tensor::filled(
                format!("layer{l}.attn_norm.gain"),
                &[d],
                T::one(),
            )),
            ln_b: push(Tensor::zeros(format!("layer{l}.attn_norm.bias"), &[d])),
            wq: push(Tensor::normal(
                format!("layer{l}.attn.wq"),
                &[d, d],
                INIT_STD,
                &mut rng,
            )),
            bq: push(Tensor::zeros(format!("layer{l}.attn.bq"), &[d])),
            wk: push(Tensor::normal(
                format!("layer{l}.attn.wk"),
                &[d, d],
                INIT_STD,
                &mut rng,
            )),
            bk: push(Tensor::zeros(format!("layer{l}.attn.bk"), &[d])),
            wv: push(Tensor::normal(
                format!("layer{l}.attn.wv"),
                &[d, d],
                INIT_STD,
                &mut rng,
            )),
            bv: push(Tensor::zeros(format!("layer{l}.attn.bv"), &[d])),
            wo: push(Tensor::normal(
                format!("layer{l}.attn.wo"),
                &[d, d],
                INIT_STD,
                &mut rng,
            )),
            bo: push(Tensor::zeros(format!("layer{l}.attn.bo"), &[d])),
        });
        let ffn = config.blocks.has_ffn().then(|| FfnIdx {
            ln_g: push(Tensor::filled(
                format!("layer{l}.ffn_norm.gain"),
                &[d],
                T::one(),
            )),
            ln_b: push(Tensor::zeros(format!("layer{l}.ffn_norm.bias"), &[d])),
            w1: push(Tensor::normal(
                format!("layer{l}.ffn.w1"),
                &[d, f],
                INIT_STD,
                &mut rng,
            )),
            b1: push(Tensor::zeros(format!("layer{l}.ffn.b1"), &[f])),
            w2: push(Tensor::normal(
                format!("layer{l}.ffn.w2"),
                &[f, d],
                INIT_STD,
                &mut rng,
            )),
            b2: push(Tensor::zeros(format!("layer{l}.ffn.b2"), &[d])),
        });
        layers.push(LayerIdx { attn, ffn });
    }
    let lnf_g = push(Tensor::filled("final_norm.gain", &[d], T::one()));
    let lnf_b = push(Tensor::zeros("final_norm.bias", &[d]));
    let (head_w, head_b) = if config.tie_head {
        (None, None)
    } else {
        (
            Some(push(Tensor::normal(
                "mlm_head.w",
                &[d, v],
                INIT_STD,
                &mut rng,
            ))),
            Some(push(Tensor::zeros("mlm_head.b", &[v]))),
        )
    };
    let layout = Layout {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
    };
    Ok(EncoderModel {
        config: config.clone(),
        tensors,
        layout,
    })
}

impl<T: Scalar> EncoderModel<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads::zeros_like(&self.tensors)
    }

    /// Zeroes the output projections and biases of every residual branch.
    pub fn zero_residual_branches(&mut self) {
        let mut idx = Vec::new();
        for layer in &self.layout.layers {
            if let Some(a) = &layer.attn {
                idx.extend([a.wo, a.bo]);
            }
            if let Some(f) = &layer.ffn {
                idx.extend([f.w2, f.b2]);
            }
        }
        for i in idx {
            self.tensors[i].data.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Replaces the parameters with `tensors`, which must match in names
    /// and shapes.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<(), MlmError> {
        if tensors.len() != self.tensors.len() {
            return Err(MlmError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (have, got) in self.tensors.iter().zip(&tensors) {
            if have.name != got.name || have.shape != got.shape {
                return Err(MlmError::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    got.name, got.shape, have.name, have.shape
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    fn t(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    pub(crate) fn check_ids(&self, ids: &[TokenId]) -> Result<(), MlmError> {
        if ids.len() > self.config.max_positions {
            return Err(MlmError::TooLong {
                len: ids.len(),
                max_positions: self.config.max_positions,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(MlmError::IdOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Embedding sum `[T×d]`.
    fn embed(&self, ids: &[TokenId]) -> Vec<T> {
        let d = self.config.hidden;
        let tok = self.t(self.layout.tok_emb);
        let pos = self.t(self.layout.pos_emb);
        let mut x = vec![T::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for c in 0..d {
                x[t * d + c] = tok[id * d + c] + pos[t * d + c];
            }
        }
        x
    }

    /// Runs the encoder over one sequence. Positions with `attend[j] ==
    /// false` are never attended to as keys.
    pub fn forward_seq(&self, ids: &[TokenId], attend: &[bool]) -> Result<SeqCache<T>, MlmError> {
        self.check_ids(ids)?;
        debug_assert_eq!(ids.len(), attend.len());
        let d = self.config.hidden;
        let n = ids.len();
        let mut x = self.embed(ids);
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for layer in &self.layout.layers {
            let attn = layer.attn.as_ref().map(|a| {
                let (out, cache) = self.attn_forward(a, &x, attend, n);
                ops::add_assign(&mut x, &out);
                cache
            });
            let ffn = layer.ffn.as_ref().map(|f| {
                let (out, cache) = self.ffn_forward(f, &x, n);
                ops::add_assign(&mut x, &out);
                cache
            });
            layers.push(LayerCache { attn, ffn });
        }
        let (hidden, lnf) =
            ops::layer_norm(&x, self.t(self.layout.lnf_g), self.t(self.layout.lnf_b));
        debug_assert_eq!(hidden.len(), n * d);
        Ok(SeqCache {
            ids: ids.to_vec(),
            attend: attend.to_vec(),
            layers,
            lnf,
            hidden,
        })
    }

    fn attn_forward(
        &self,
        a: &AttnIdx,
        x: &[T],
        attend: &[bool],
        n: usize,
    ) -> (Vec<T>, AttnCache<T>) {
        let d = self.config.hidden;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (a_in, ln) = ops::layer_norm(x, self.t(a.ln_g), self.t(a.ln_b));
        let proj = |w: usize, b: usize| {
            let mut y = ops::matmul(&a_in, self.t(w), n, d, d);
            ops::add_bias(&mut y, self.t(b));
            y
        };
        let q = proj(a.wq, a.bq);
        let k = proj(a.wk, a.bk);
        let v = proj(a.wv, a.bv);
        let mut probs = vec![T::zero(); heads * n * n];
        let mut ctx = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p_row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if attend[j] {
                        let s = ops::dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                        p_row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                for j in 0..n {
                    if attend[j] {
                        let e = (p_row[j] - max).exp();
                        p_row[j] = e;
                        z += e;
                    }
                }
                for j in 0..n {
                    if attend[j] {
                        p_row[j] /= z;
                        let p = p_row[j];
                        for c in 0..dh {
                            ctx[i * d + off + c] += p * v[j * d + off + c];
                        }
                    }
                }
            }
        }
        let mut out = ops::matmul(&ctx, self.t(a.wo), n, d, d);
        ops::add_bias(&mut out, self.t(a.bo));
        (
            out,
            AttnCache {
                ln,
                a_in,
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    fn ffn_forward(&self, f: &FfnIdx, x: &[T], n: usize) -> (Vec<T>, FfnCache<T>) {
        let d = self.config.hidden;
        let fd = self.config.ffn_hidden();
        let (f_in, ln) = ops::layer_norm(x, self.t(f.ln_g), self.t(f.ln_b));
        let mut h1 = ops::matmul(&f_in, self.t(f.w1), n, d, fd);
        ops::add_bias(&mut h1, self.t(f.b1));
        let g: Vec<T> = h1.iter().map(|&z| ops::gelu(z)).collect();
        let mut out = ops::matmul(&g, self.t(f.w2), n, fd, d);
        ops::add_bias(&mut out, self.t(f.b2));
        (out, FfnCache { ln, f_in, h1, g })
    }

    /// Backpropagates `d_hidden` (gradient w.r.t. the final-normed hidden
    /// states) into `grads`.
    pub fn backward_seq(&self, cache: &SeqCache<T>, d_hidden: &[T], grads: &mut Grads<T>) {
        let d = self.config.hidden;
        let n = cache.ids.len();
        let lo = &self.layout;
        let mut dx = {
            let (dg, db) = two_mut(&mut grads.tensors, lo.lnf_g, lo.lnf_b);
            ops::layer_norm_backward(d_hidden, &cache.lnf, self.t(lo.lnf_g), dg, db)
        };
        for (layer, lc) in lo.layers.iter().zip(&cache.layers).rev() {
            if let (Some(f), Some(fc)) = (&layer.ffn, &lc.ffn) {
                let d_in = self.ffn_backward(f, fc, &dx, n, grads);
                ops::add_assign(&mut dx, &d_in);
            }
            if let (Some(a), Some(ac)) = (&layer.attn, &lc.attn) {
                let d_in = self.attn_backward(a, ac, &dx, &cache.attend, n, grads);
                ops::add_assign(&mut dx, &d_in);
            }
        }
        for (t, &id) in cache.ids.iter().enumerate() {
            let id = id as usize;
            let row = &dx[t * d..(t + 1) * d];
            ops::add_assign(&mut grads.tensors[lo.tok_emb][id * d..(id + 1) * d], row);
            ops::add_assign(&mut grads.tensors[lo.pos_emb][t * d..(t + 1) * d], row);
        }
    }

    /// Gradient of the residual branch w.r.t. its input `x`.
    fn ffn_backward(
        &self,
        f: &FfnIdx,
        c: &FfnCache<T>,
        d_out: &[T],
        n: usize,
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let d = self.config.hidden;
        let fd = self.config.ffn_hidden();
        ops::matmul_tn_acc(&c.g, d_out, n, fd, d, &mut grads.tensors[f.w2]);
        ops::col_sum_acc(d_out, &mut grads.tensors[f.b2]);
        let mut dh1 = ops::matmul_nt(d_out, self.t(f.w2), n, d, fd);
        for (g, &z) in dh1.iter_mut().zip(&c.h1) {
            *g *= ops::gelu_grad(z);
        }
        ops::matmul_tn_acc(&c.f_in, &dh1, n, d, fd, &mut grads.tensors[f.w1]);
        ops::col_sum_acc(&dh1, &mut grads.tensors[f.b1]);
        let d_fin = ops::matmul_nt(&dh1, self.t(f.w1), n, fd, d);
        let (dg, db) = two_mut(&mut grads.tensors, f.ln_g, f.ln_b);
        ops::layer_norm_backward(&d_fin, &c.ln, self.t(f.ln_g), dg, db)
    }

    fn attn_backward(
        &self,
        a: &AttnIdx,
        c: &AttnCache<T>,
        d_out: &[T],
        attend: &[bool],
        n: usize,
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let d = self.config.hidden;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        ops::matmul_tn_acc(&c.ctx, d_out, n, d, d, &mut grads.tensors[a.wo]);
        ops::col_sum_acc(d_out, &mut grads.tensors[a.bo]);
        let d_ctx = ops::matmul_nt(d_out, self.t(a.wo), n, d, d);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p_row = &c.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &d_ctx[i * d + off..i * d + off + dh];
                let mut inner = T::zero();
                for j in 0..n {
                    if !attend[j] {
                        dp[j] = T::zero();
                        continue;
                    }
                    let p = p_row[j];
                    dp[j] = ops::dot(dci, &c.v[j * d + off..j * d + off + dh]);
                    inner += p * dp[j];
                    for cc in 0..dh {
                        dv[j * d + off + cc] += p * dci[cc];
                    }
                }
                for j in 0..n {
                    if !attend[j] {
                        continue;
                    }
                    let ds = p_row[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for cc in 0..dh {
                        dq[i * d + off + cc] += ds * c.k[j * d + off + cc];
                        dk[j * d + off + cc] += ds * c.q[i * d + off + cc];
                    }
                }
            }
        }
        let mut d_ain = vec![T::zero(); n * d];
        for (dy, w, b) in [(&dq, a.wq, a.bq), (&dk, a.wk, a.bk), (&dv, a.wv, a.bv)] {
            ops::matmul_tn_acc(&c.a_in, dy, n, d, d, &mut grads.tensors[w]);
            ops::col_sum_acc(dy, &mut grads.tensors[b]);
            ops::add_assign(&mut d_ain, &ops::matmul_nt(dy, self.t(w), n, d, d));
        }
        let (dg, db) = two_mut(&mut grads.tensors, a.ln_g, a.ln_b);
        ops::layer_norm_backward(&d_ain, &c.ln, self.t(a.ln_g), dg, db)
    }

    /// MLM logits for one final hidden row.
    pub fn mlm_logits(&self, h: &[T]) -> Vec<T> {
        let d = self.config.hidden;
        let v = self.config.vocab_size;
        match (self.layout.head_w, self.layout.head_b) {
            (Some(w), Some(b)) => {
                let mut y = ops::matmul(h, self.t(w), 1, d, v);
                ops::add_assign(&mut y, self.t(b));
                y
            }
            _ => ops::matmul_nt(h, self.t(self.layout.tok_emb), 1, d, v),
        }
    }

    /// Accumulates head gradients for `dlogits` and returns `dh`.
    pub fn mlm_head_backward(&self, h: &[T], dlogits: &[T], grads: &mut Grads<T>) -> Vec<T> {
        let d = self.config.hidden;
        let v = self.config.vocab_size;
        match (self.layout.head_w, self.layout.head_b) {
            (Some(w), Some(b)) => {
                ops::matmul_tn_acc(h, dlogits, 1, d, v, &mut grads.tensors[w]);
                ops::add_assign(&mut grads.tensors[b], dlogits);
                ops::matmul_nt(dlogits, self.t(w), 1, v, d)
            }
            _ => {
                let e = self.layout.tok_emb;
                ops::matmul_tn_acc(dlogits, h, 1, v, d, &mut grads.tensors[e]);
                ops::matmul(dlogits, self.t(e), 1, v, d)
            }
        }
    }
}

fn two_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(l: usize, d: usize, heads: usize, v: usize, p: usize) -> EncoderConfig {
        EncoderConfig {
            max_positions: p,
            ..EncoderConfig::new(l, d, heads, v)
        }
    }

    // Independent shape enumeration.
    fn hand_count(l: usize, d: usize, v: usize, p: usize, ffn: usize, tied: bool) -> usize {
        let emb = v * d + p * d;
        let attn = 4 * (d * d + d);
        let ffn_p = d * ffn * d + ffn * d + ffn * d * d + d;
        let norms = 2 * (2 * d);
        let head = if tied { 0 } else { d * v + v };
        emb + l * (attn + ffn_p + norms) + 2 * d + head
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let m: EncoderModel<f32> = build_encoder(&cfg(2, 32, 4, 100, 64)).unwrap();
        assert_eq!(m.parameter_count(), hand_count(2, 32, 100, 64, 4, false));
        assert_eq!(m.parameter_count(), 34_020);
        let tied = EncoderConfig {
            tie_head: true,
            ..cfg(2, 32, 4, 100, 64)
        };
        let m: EncoderModel<f32> = build_encoder(&tied).unwrap();
        assert_eq!(m.parameter_count(), hand_count(2, 32, 100, 64, 4, true));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: EncoderModel<f32> = build_encoder(&cfg(2, 16, 2, 50, 16)).unwrap();
        let b: EncoderModel<f32> = build_encoder(&cfg(2, 16, 2, 50, 16)).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let c: EncoderModel<f32> = build_encoder(&EncoderConfig {
            seed: 1,
            ..cfg(2, 16, 2, 50, 16)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let r = build_encoder::<f32>(&cfg(1, 32, 5, 100, 64));
        assert!(matches!(
            r,
            Err(MlmError::HeadsDivisibility {
                hidden: 32,
                n_heads: 5
            })
        ));
    }

    #[test]
    fn init_values() {
        let m: EncoderModel<f64> = build_encoder(&cfg(1, 32, 4, 200, 64)).unwrap();
        let g = m.tensor("layer0.attn_norm.gain").unwrap();
        assert!(g.data.iter().all(|&x| x == 1.0));
        assert!(m
            .tensor("layer0.ffn.b1")
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));
        let e = &m.tensor("tok_emb").unwrap().data;
        let var = e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64;
        assert!((var.sqrt() - INIT_STD).abs() < 0.002);
    }

    #[test]
    fn zeroed_branches_reduce_to_normed_embedding() {
        let mut m: EncoderModel<f64> = build_encoder(&cfg(3, 16, 4, 40, 32)).unwrap();
        m.zero_residual_branches();
        let ids = [3, 7, 11, 2, 39];
        let out = m.forward_seq(&ids, &[true; 5]).unwrap();
        let x = m.embed(&ids);
        let (expected, _) = ops::layer_norm(&x, m.t(m.layout.lnf_g), m.t(m.layout.lnf_b));
        for (a, b) in out.hidden.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_keys_do_not_affect_real_positions() {
        let m: EncoderModel<f64> = build_encoder(&cfg(2, 16, 2, 40, 32)).unwrap();
        let a = m
            .forward_seq(&[1, 2, 3, 0, 0], &[true, true, true, false, false])
            .unwrap();
        let b = m
            .forward_seq(&[1, 2, 3, 9, 17], &[true, true, true, false, false])
            .unwrap();
        for (x, y) in a.hidden[..3 * 16].iter().zip(&b.hidden[..3 * 16]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_input() {
        let m: EncoderModel<f32> = build_encoder(&cfg(1, 8, 2, 10, 4)).unwrap();
        assert!(matches!(
            m.forward_seq(&[10], &[true]),
            Err(MlmError::IdOutOfRange { id: 10, .. })
        ));
        assert!(matches!(
            m.forward_seq(&[1; 5], &[true; 5]),
            Err(MlmError::TooLong { len: 5, .. })
        ));
    }
}
