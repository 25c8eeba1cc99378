use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Dimension, Ix1, Ix2, Slice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::{
    gelu_with_grad, layer_norm, layer_norm_backward, softmax_rows_backward,
    softmax_rows_inplace, LayerNormCache,
};
use super::EncodingVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Number of distinct segment labels the input may carry.
    pub segments: usize,
    /// Output encoding dimension.
    pub d_enc: usize,
    pub seed: u64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("segments", self.segments),
            ("d_enc", self.d_enc),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
}

/// Post-layer-norm transformer tower with CLS pooling and a linear projection
/// to the encoding dimension.
///
/// The same struct holds gradients (see [`Encoder::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: TransformerConfig,
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub seg_emb: Array2<T>,
    pub emb_ln_gamma: Array1<T>,
    pub emb_ln_beta: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    pub proj: Array2<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::of(z * std)
        })
    }
}

macro_rules! layer_tensors {
    ($layer:expr, $prefix:expr, $view:ident, $out:expr) => {{
        let l = $layer;
        let p = $prefix;
        $out.push((format!("{p}.wq"), l.wq.$view().into_dyn()));
        $out.push((format!("{p}.bq"), l.bq.$view().into_dyn()));
        $out.push((format!("{p}.wk"), l.wk.$view().into_dyn()));
        $out.push((format!("{p}.bk"), l.bk.$view().into_dyn()));
        $out.push((format!("{p}.wv"), l.wv.$view().into_dyn()));
        $out.push((format!("{p}.bv"), l.bv.$view().into_dyn()));
        $out.push((format!("{p}.wo"), l.wo.$view().into_dyn()));
        $out.push((format!("{p}.bo"), l.bo.$view().into_dyn()));
        $out.push((format!("{p}.ln1.gamma"), l.ln1_gamma.$view().into_dyn()));
        $out.push((format!("{p}.ln1.beta"), l.ln1_beta.$view().into_dyn()));
        $out.push((format!("{p}.w1"), l.w1.$view().into_dyn()));
        $out.push((format!("{p}.b1"), l.b1.$view().into_dyn()));
        $out.push((format!("{p}.w2"), l.w2.$view().into_dyn()));
        $out.push((format!("{p}.b2"), l.b2.$view().into_dyn()));
        $out.push((format!("{p}.ln2.gamma"), l.ln2_gamma.$view().into_dyn()));
        $out.push((format!("{p}.ln2.beta"), l.ln2_beta.$view().into_dyn()));
    }};
}

impl<T: Scalar> Encoder<T> {
    /// Seeded scaled-normal initialization: weight matrices ~ N(0, 1/fan_in),
    /// embeddings ~ N(0, 1), biases 0, layer-norm gains 1.
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d_model;
        let f = config.d_ffn;
        let w = 1.0 / (d as f64).sqrt();
        let tok_emb = init.matrix(config.vocab_size, d, 1.0);
        let pos_emb = init.matrix(config.max_len, d, 1.0);
        let seg_emb = init.matrix(config.segments, d, 1.0);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: init.matrix(d, d, w),
                bq: Array1::zeros(d),
                wk: init.matrix(d, d, w),
                bk: Array1::zeros(d),
                wv: init.matrix(d, d, w),
                bv: Array1::zeros(d),
                wo: init.matrix(d, d, w),
                bo: Array1::zeros(d),
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                w1: init.matrix(d, f, w),
                b1: Array1::zeros(f),
                w2: init.matrix(f, d, 1.0 / (f as f64).sqrt()),
                b2: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
            })
            .collect();
        let proj = init.matrix(d, config.d_enc, w);
        Ok(Encoder {
            tok_emb,
            pos_emb,
            seg_emb,
            emb_ln_gamma: Array1::ones(d),
            emb_ln_beta: Array1::zeros(d),
            layers,
            proj,
            config,
        })
    }

    /// Sets the query and key projections of the first `layers` layers to
    /// `scale · I` with zero bias, so attention starts out favouring
    /// positions whose inputs are alike, identical tokens above all.
    pub fn identity_query_key(&mut self, layers: usize, scale: T) {
        let d = self.config.d_model;
        for l in self.layers.iter_mut().take(layers) {
            l.wq = Array2::eye(d) * scale;
            l.wk = Array2::eye(d) * scale;
            l.bq.fill(T::zero());
            l.bk.fill(T::zero());
        }
    }

    /// Copies `other`'s weights into every tensor of matching shape. Tables
    /// that differ only in row count (positions, segments) take the shared
    /// leading rows; anything else keeps its current values.
    pub fn copy_compatible_from(&mut self, other: &Encoder<T>) {
        let src = other.tensors();
        for ((_, mut dst), (_, from)) in self.tensors_mut().into_iter().zip(src) {
            if dst.shape() == from.shape() {
                dst.assign(&from);
            } else if dst.ndim() == 2 && from.ndim() == 2 && dst.shape()[1] == from.shape()[1] {
                let rows = dst.shape()[0].min(from.shape()[0]);
                dst.slice_axis_mut(Axis(0), Slice::from(0..rows))
                    .assign(&from.slice_axis(Axis(0), Slice::from(0..rows)));
            }
        }
    }

    /// All-zero tensors of the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
            ("seg_emb".to_string(), self.seg_emb.view().into_dyn()),
            ("emb_ln.gamma".to_string(), self.emb_ln_gamma.view().into_dyn()),
            ("emb_ln.beta".to_string(), self.emb_ln_beta.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            layer_tensors!(l, format!("layer{i}"), view, out);
        }
        out.push(("proj".to_string(), self.proj.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
            ("seg_emb".to_string(), self.seg_emb.view_mut().into_dyn()),
            ("emb_ln.gamma".to_string(), self.emb_ln_gamma.view_mut().into_dyn()),
            ("emb_ln.beta".to_string(), self.emb_ln_beta.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            layer_tensors!(l, format!("layer{i}"), view_mut, out);
        }
        out.push(("proj".to_string(), self.proj.view_mut().into_dyn()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds an encoder from named tensors (as written by [`Encoder::tensors`]),
    /// taking them out of `store`.
    pub fn from_tensors(
        config: TransformerConfig,
        store: &mut BTreeMap<String, ArrayD<T>>,
        prefix: &str,
    ) -> Result<Self> {
        let mut enc = Encoder::new(config)?;
        for (name, mut slot) in enc.tensors_mut() {
            let key = format!("{prefix}{name}");
            let t = store
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.assign(&t);
        }
        Ok(enc)
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: T, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    fn check_input(&self, input: &TokenSequence) -> Result<()> {
        let c = &self.config;
        if input.ids.len() != c.max_len || input.segments.len() != c.max_len {
            return Err(Error::Shape(format!(
                "input length {} does not match max_len {}",
                input.ids.len(),
                c.max_len
            )));
        }
        if input.true_len == 0 || input.true_len > c.max_len {
            return Err(Error::Shape(format!("true_len {} out of range", input.true_len)));
        }
        let (ids, segs) = input.active();
        if let Some(id) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::Shape(format!("token id {id} >= vocab size {}", c.vocab_size)));
        }
        if let Some(s) = segs.iter().find(|&&s| s as usize >= c.segments) {
            return Err(Error::Shape(format!("segment {s} >= {}", c.segments)));
        }
        Ok(())
    }

    pub fn encode(&self, input: &TokenSequence) -> Result<EncodingVector<T>> {
        let out = self.encode_batch(std::slice::from_ref(input))?;
        Ok(EncodingVector(out.row(0).to_owned()))
    }

    /// Encodes each input; row `i` of the result belongs to `inputs[i]`.
    pub fn encode_batch(&self, inputs: &[TokenSequence]) -> Result<Array2<T>> {
        Ok(self.forward(inputs)?.0)
    }

    /// Forward pass keeping the activations needed by [`Encoder::backward`].
    ///
    /// Padding never enters the computation: each sequence attends over its
    /// first `true_len` positions only, which is exactly key masking as far
    /// as the CLS output is concerned.
    pub fn forward(&self, inputs: &[TokenSequence]) -> Result<(Array2<T>, ForwardCache<T>)> {
        for input in inputs {
            self.check_input(input)?;
        }
        let d = self.config.d_model;
        let mut spans = Vec::with_capacity(inputs.len());
        let mut tokens = Vec::new();
        for input in inputs {
            spans.push((tokens.len(), input.true_len));
            let (ids, segs) = input.active();
            tokens.extend(ids.iter().zip(segs).enumerate().map(|(p, (&i, &s))| (i, s, p)));
        }
        let mut x0 = Array2::zeros((tokens.len(), d));
        for (mut row, &(id, seg, pos)) in x0.rows_mut().into_iter().zip(&tokens) {
            row.assign(&self.tok_emb.row(id as usize));
            row += &self.pos_emb.row(pos);
            row += &self.seg_emb.row(seg as usize);
        }
        let (mut x, emb_ln) = layer_norm(&x0, &self.emb_ln_gamma, &self.emb_ln_beta);
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let (y, cache) = self.layer_forward(p, x, &spans);
            layers.push(cache);
            x = y;
        }
        let mut cls = Array2::zeros((inputs.len(), d));
        for (mut row, &(offset, _)) in cls.rows_mut().into_iter().zip(&spans) {
            row.assign(&x.row(offset));
        }
        let out = cls.dot(&self.proj);
        Ok((
            out,
            ForwardCache {
                spans,
                tokens,
                emb_ln,
                layers,
                cls,
            },
        ))
    }

    fn layer_forward(
        &self,
        p: &LayerParams<T>,
        x: Array2<T>,
        spans: &[(usize, usize)],
    ) -> (Array2<T>, LayerCache<T>) {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = x.dot(&p.wq) + &p.bq;
        let k = x.dot(&p.wk) + &p.bk;
        let v = x.dot(&p.wv) + &p.bv;
        let mut attn = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(spans.len() * heads);
        for &(o, n) in spans {
            for h in 0..heads {
                let cols = s![o..o + n, h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows_inplace(&mut scores);
                attn.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
        }
        let r1 = &x + &(attn.dot(&p.wo) + &p.bo);
        let (h1, ln1) = layer_norm(&r1, &p.ln1_gamma, &p.ln1_beta);
        let f1 = h1.dot(&p.w1) + &p.b1;
        let mut g = f1;
        let mut dgelu = Array2::zeros(g.raw_dim());
        ndarray::Zip::from(&mut g).and(&mut dgelu).for_each(|v, d| {
            let (value, grad) = gelu_with_grad(*v);
            *v = value;
            *d = grad;
        });
        let r2 = &h1 + &(g.dot(&p.w2) + &p.b2);
        let (y, ln2) = layer_norm(&r2, &p.ln2_gamma, &p.ln2_beta);
        (
            y,
            LayerCache {
                x,
                q,
                k,
                v,
                probs,
                attn,
                ln1,
                h1,
                dgelu,
                g,
                ln2,
            },
        )
    }

    /// Exact gradients of `Σ upstream ∘ output` with respect to every
    /// parameter, for the batch recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &Array2<T>) -> Self {
        let mut grads = self.zeros_like();
        self.backward_into(cache, upstream, &mut grads);
        grads
    }

    /// As [`Encoder::backward`], accumulating into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache<T>, upstream: &Array2<T>, grads: &mut Self) {
        grads.proj += &cache.cls.t().dot(upstream);
        let d_cls = upstream.dot(&self.proj.t());
        let mut dx = Array2::zeros((cache.tokens.len(), self.config.d_model));
        for (row, &(offset, _)) in d_cls.rows().into_iter().zip(&cache.spans) {
            let mut target = dx.row_mut(offset);
            target += &row;
        }
        for ((p, g), lc) in self
            .layers
            .iter()
            .zip(grads.layers.iter_mut())
            .zip(&cache.layers)
            .rev()
        {
            dx = self.layer_backward(p, g, lc, &cache.spans, &dx);
        }
        let dx0 = layer_norm_backward(
            &dx,
            &cache.emb_ln,
            &self.emb_ln_gamma,
            &mut grads.emb_ln_gamma,
            &mut grads.emb_ln_beta,
        );
        for (row, &(id, seg, pos)) in dx0.rows().into_iter().zip(&cache.tokens) {
            let mut t = grads.tok_emb.row_mut(id as usize);
            t += &row;
            let mut t = grads.pos_emb.row_mut(pos);
            t += &row;
            let mut t = grads.seg_emb.row_mut(seg as usize);
            t += &row;
        }
    }

    fn layer_backward(
        &self,
        p: &LayerParams<T>,
        g: &mut LayerParams<T>,
        c: &LayerCache<T>,
        spans: &[(usize, usize)],
        dy: &Array2<T>,
    ) -> Array2<T> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();

        let dr2 = layer_norm_backward(dy, &c.ln2, &p.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
        g.b2 += &dr2.sum_axis(Axis(0));
        g.w2 += &c.g.t().dot(&dr2);
        let df1 = dr2.dot(&p.w2.t()) * &c.dgelu;
        g.b1 += &df1.sum_axis(Axis(0));
        g.w1 += &c.h1.t().dot(&df1);
        let dh1 = dr2 + df1.dot(&p.w1.t());

        let dr1 = layer_norm_backward(&dh1, &c.ln1, &p.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
        g.bo += &dr1.sum_axis(Axis(0));
        g.wo += &c.attn.t().dot(&dr1);
        let dattn = dr1.dot(&p.wo.t());

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        let mut probs = c.probs.iter();
        for &(o, n) in spans {
            for h in 0..heads {
                let cols = s![o..o + n, h * dh..(h + 1) * dh];
                let prob = probs.next().expect("one cache entry per sequence head");
                let d_out = dattn.slice(cols);
                let mut t = dv.slice_mut(cols);
                t += &prob.t().dot(&d_out);
                let d_prob = d_out.dot(&c.v.slice(cols).t());
                let d_scores = softmax_rows_backward(prob.view(), &d_prob) * scale;
                let mut t = dq.slice_mut(cols);
                t += &d_scores.dot(&c.k.slice(cols));
                let mut t = dk.slice_mut(cols);
                t += &d_scores.t().dot(&c.q.slice(cols));
            }
        }
        g.wq += &c.x.t().dot(&dq);
        g.bq += &dq.sum_axis(Axis(0));
        g.wk += &c.x.t().dot(&dk);
        g.bk += &dk.sum_axis(Axis(0));
        g.wv += &c.x.t().dot(&dv);
        g.bv += &dv.sum_axis(Axis(0));
        dr1 + dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
    }
}

/// Activations of one forward pass.
pub struct ForwardCache<T> {
    spans: Vec<(usize, usize)>,
    /// `(token id, segment, position)` for every unpadded token.
    tokens: Vec<(u32, u8, usize)>,
    emb_ln: LayerNormCache<T>,
    layers: Vec<LayerCache<T>>,
    cls: Array2<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Final-layer CLS activations, one row per input.
    pub fn cls(&self) -> &Array2<T> {
        &self.cls
    }
}

struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln1: LayerNormCache<T>,
    h1: Array2<T>,
    /// GELU derivative at the first feed-forward pre-activation.
    dgelu: Array2<T>,
    g: Array2<T>,
    ln2: LayerNormCache<T>,
}

/// Converts a dynamic-rank tensor to a fixed rank.
pub(crate) fn fixed<T: Clone, D: Dimension>(t: ArrayD<T>, name: &str) -> Result<ndarray::Array<T, D>> {
    t.into_dimensionality::<D>()
        .map_err(|_| Error::Checkpoint(format!("tensor {name} has the wrong rank")))
}

pub(crate) fn take_matrix<T: Clone>(
    store: &mut BTreeMap<String, ArrayD<T>>,
    name: &str,
) -> Result<Array2<T>> {
    let t = store
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    fixed::<T, Ix2>(t, name)
}

pub(crate) fn take_vector<T: Clone>(
    store: &mut BTreeMap<String, ArrayD<T>>,
    name: &str,
) -> Result<Array1<T>> {
    let t = store
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    fixed::<T, Ix1>(t, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenSequence;
    use rand::Rng;

    pub(crate) fn tiny_config(seed: u64) -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ffn: 16,
            max_len: 7,
            vocab_size: 12,
            segments: 4,
            d_enc: 4,
            seed,
        }
    }

    fn random_inputs(n: usize, cfg: &TransformerConfig, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(1..=cfg.max_len);
                let mut ids: Vec<u32> = (0..len).map(|_| rng.gen_range(1..cfg.vocab_size as u32)).collect();
                let mut segs: Vec<u8> = (0..len).map(|_| rng.gen_range(0..cfg.segments as u8)).collect();
                ids.resize(cfg.max_len, 0);
                segs.resize(cfg.max_len, 0);
                TokenSequence {
                    ids,
                    segments: segs,
                    true_len: len,
                }
            })
            .collect()
    }

    fn weighted_sum(enc: &Encoder<f64>, inputs: &[TokenSequence], w: &Array2<f64>) -> f64 {
        (enc.encode_batch(inputs).unwrap() * w).sum()
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = tiny_config(1);
        let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        let inputs = random_inputs(3, &cfg, 2);
        let a = enc.encode(&inputs[0]).unwrap();
        assert_eq!(a, enc.encode(&inputs[0]).unwrap());
        assert_eq!(a.len(), cfg.d_enc);
        assert_eq!(Encoder::<f64>::new(cfg).unwrap(), enc);
        // batching does not change a sequence's encoding
        let batch = enc.encode_batch(&inputs).unwrap();
        assert!((&batch.row(0) - &a.0).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn padding_content_is_ignored() {
        let cfg = tiny_config(4);
        let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        let mut input = random_inputs(1, &cfg, 9).remove(0);
        input.true_len = 3;
        let base = enc.encode(&input).unwrap();
        input.ids[5] = 7;
        input.segments[6] = 3;
        assert_eq!(enc.encode(&input).unwrap(), base);
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = tiny_config(4);
        let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        let mut input = random_inputs(1, &cfg, 9).remove(0);
        input.ids.push(0);
        assert!(matches!(enc.encode(&input), Err(Error::Shape(_))));
        let mut input = random_inputs(1, &cfg, 9).remove(0);
        input.ids[0] = 99;
        assert!(matches!(enc.encode(&input), Err(Error::Shape(_))));
        let bad = TransformerConfig { heads: 3, ..cfg };
        assert!(Encoder::<f64>::new(bad).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_config(5);
        let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        let inputs = random_inputs(2, &cfg, 1);
        let (out, cache) = enc.forward(&inputs).unwrap();
        let grads = enc.backward(&cache, &Array2::zeros(out.raw_dim()));
        assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn projection_gradient_is_outer_product() {
        let cfg = TransformerConfig {
            layers: 1,
            heads: 1,
            d_model: 2,
            d_ffn: 2,
            max_len: 3,
            vocab_size: 5,
            segments: 1,
            d_enc: 2,
            seed: 0,
        };
        let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        let inputs = vec![TokenSequence {
            ids: vec![2, 3, 0],
            segments: vec![0; 3],
            true_len: 2,
        }];
        let (_, cache) = enc.forward(&inputs).unwrap();
        let up = ndarray::array![[0.5, -2.0]];
        let grads = enc.backward(&cache, &up);
        let h = cache.cls().row(0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((grads.proj[[i, j]] - h[i] * up[[0, j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let cfg = tiny_config(11);
        let mut enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        // Non-trivial affine parameters so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, mut t) in enc.tensors_mut() {
            t.mapv_inplace(|v| v + 0.1 * rng.gen_range(-1.0..1.0));
        }
        let inputs = random_inputs(4, &cfg, 12);
        let w = Array2::from_shape_fn((4, cfg.d_enc), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = enc.forward(&inputs).unwrap();
        let grads = enc.backward(&cache, &w);
        let eps = 1e-5;
        let names: Vec<String> = enc.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = enc.tensors()[ti].1.len();
            let mut numeric = Vec::with_capacity(len);
            for j in 0..len {
                let orig = enc.tensors()[ti].1.iter().nth(j).copied().unwrap();
                let set = |enc: &mut Encoder<f64>, v: f64| {
                    *enc.tensors_mut()[ti].1.iter_mut().nth(j).unwrap() = v;
                };
                set(&mut enc, orig + eps);
                let up = weighted_sum(&enc, &inputs, &w);
                set(&mut enc, orig - eps);
                let down = weighted_sum(&enc, &inputs, &w);
                set(&mut enc, orig);
                numeric.push((up - down) / (2.0 * eps));
            }
            let analytic: Vec<f64> = grads.tensors()[ti].1.iter().copied().collect();
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            // Key biases shift every score in a row equally, so their true
            // gradient is zero and only an absolute bound applies.
            if scale > 1e-6 {
                assert!(diff / scale < 1e-5, "{name}: relative error {}", diff / scale);
            } else {
                assert!(diff < 1e-9, "{name}: absolute error {diff}");
            }
        }
    }
}
