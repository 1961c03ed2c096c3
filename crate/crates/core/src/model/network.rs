//! Full-sequence forward pass with activation cache, and its reverse pass.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    dense_backward, dense_forward, gelu, gelu_grad, gemm, layer_norm_backward, layer_norm_forward,
    positions, softmax_prefix, Real, View, ViewMut,
};
use super::{Attention, DecoderLayer, Dense, EncoderLayer, Model, Norm};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, VOCAB_SIZE};

/// Next-token scores, one row of `VOCAB_SIZE` entries per target position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub data: Vec<T>,
}

impl<T> Logits<T> {
    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE]
    }
}

/// Inverted dropout on residual branches, seeded per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

struct NormCache<T> {
    out: Vec<T>,
    mean: Vec<T>,
    rstd: Vec<T>,
}

struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    nq: usize,
    nk: usize,
}

struct FfnCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

struct EncLayerCache<T> {
    x: Vec<T>,
    ln_attn: NormCache<T>,
    attn: AttnCache<T>,
    mask_attn: Option<Vec<T>>,
    mid: Vec<T>,
    ln_ffn: NormCache<T>,
    ffn: FfnCache<T>,
    mask_ffn: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    x: Vec<T>,
    ln_self: NormCache<T>,
    self_attn: AttnCache<T>,
    mask_self: Option<Vec<T>>,
    after_self: Vec<T>,
    ln_cross: NormCache<T>,
    cross: AttnCache<T>,
    mask_cross: Option<Vec<T>>,
    after_cross: Vec<T>,
    ln_ffn: NormCache<T>,
    ffn: FfnCache<T>,
    mask_ffn: Option<Vec<T>>,
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct ForwardCache<T> {
    src: Vec<TokenId>,
    tgt: Vec<TokenId>,
    enc: Vec<EncLayerCache<T>>,
    enc_last: Vec<T>,
    enc_norm: NormCache<T>,
    dec: Vec<DecLayerCache<T>>,
    dec_last: Vec<T>,
    dec_norm: NormCache<T>,
    pub logits: Logits<T>,
}

fn pair_mut<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

fn norm_forward<T: Real>(p: &[T], norm: &Norm, x: &[T], d: usize) -> NormCache<T> {
    let n = x.len() / d;
    let mut cache = NormCache {
        out: vec![T::zero(); x.len()],
        mean: vec![T::zero(); n],
        rstd: vec![T::zero(); n],
    };
    layer_norm_forward(
        x,
        d,
        &p[norm.g.clone()],
        &p[norm.b.clone()],
        &mut cache.out,
        &mut cache.mean,
        &mut cache.rstd,
    );
    cache
}

#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    norm: &Norm,
    x: &[T],
    d: usize,
    cache: &NormCache<T>,
    dout: &[T],
    dx: &mut [T],
) {
    let (dg, db) = pair_mut(g, &norm.g, &norm.b);
    layer_norm_backward(x, d, &p[norm.g.clone()], &cache.mean, &cache.rstd, dout, dg, db, dx);
}

fn dense<T: Real>(p: &[T], layer: &Dense, x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * layer.fan_out];
    dense_forward(x, n, &p[layer.w.clone()], &p[layer.b.clone()], &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_back<T: Real>(
    p: &[T],
    g: &mut [T],
    layer: &Dense,
    x: &[T],
    n: usize,
    dout: &[T],
    dx: &mut [T],
    accumulate: bool,
) {
    let (dw, db) = pair_mut(g, &layer.w, &layer.b);
    dense_backward(x, n, &p[layer.w.clone()], dout, dw, db, dx, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Real>(
    p: &[T],
    layer: &Attention,
    heads: usize,
    xq: &[T],
    nq: usize,
    xkv: &[T],
    nk: usize,
    causal: bool,
) -> (AttnCache<T>, Vec<T>) {
    let d = layer.q.fan_out;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let q = dense(p, &layer.q, xq, nq);
    let k = dense(p, &layer.k, xkv, nk);
    let v = dense(p, &layer.v, xkv, nk);
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut ctx = vec![T::zero(); nq * d];
    for h in (0..heads).filter(|_| nq > 0 && nk > 0) {
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            scale,
            View::cols_of(&q, nq, d, h * dh, dh),
            View::cols_of(&k, nk, d, h * dh, dh).t(),
            T::zero(),
            ViewMut::new(ph, nq, nk),
        );
        for (i, row) in ph.chunks_exact_mut(nk).enumerate() {
            let valid = if causal { i + 1 } else { nk };
            softmax_prefix(row, valid);
        }
        gemm(
            T::one(),
            View::new(ph, nq, nk),
            View::cols_of(&v, nk, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut ctx, nq, d, h * dh, dh),
        );
    }
    let out = dense(p, &layer.o, &ctx, nq);
    (
        AttnCache {
            q,
            k,
            v,
            probs,
            ctx,
            nq,
            nk,
        },
        out,
    )
}

/// Returns `(dxq, dxkv)`.
#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    layer: &Attention,
    heads: usize,
    cache: &AttnCache<T>,
    xq: &[T],
    xkv: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let d = layer.q.fan_out;
    let dh = d / heads;
    let (nq, nk) = (cache.nq, cache.nk);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut dctx = vec![T::zero(); nq * d];
    dense_back(p, g, &layer.o, &cache.ctx, nq, dout, &mut dctx, false);

    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut ds = vec![T::zero(); nq * nk];
    for h in (0..heads).filter(|_| nq > 0 && nk > 0) {
        let ph = &cache.probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            T::one(),
            View::cols_of(&dctx, nq, d, h * dh, dh),
            View::cols_of(&cache.v, nk, d, h * dh, dh).t(),
            T::zero(),
            ViewMut::new(&mut ds, nq, nk),
        );
        gemm(
            T::one(),
            View::new(ph, nq, nk).t(),
            View::cols_of(&dctx, nq, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut dv, nk, d, h * dh, dh),
        );
        for (dsr, pr) in ds.chunks_exact_mut(nk).zip(ph.chunks_exact(nk)) {
            let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dsr.iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
        }
        gemm(
            scale,
            View::new(&ds, nq, nk),
            View::cols_of(&cache.k, nk, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut dq, nq, d, h * dh, dh),
        );
        gemm(
            scale,
            View::new(&ds, nq, nk).t(),
            View::cols_of(&cache.q, nq, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut dk, nk, d, h * dh, dh),
        );
    }
    let mut dxq = vec![T::zero(); nq * d];
    let mut dxkv = vec![T::zero(); nk * d];
    dense_back(p, g, &layer.q, xq, nq, &dq, &mut dxq, false);
    dense_back(p, g, &layer.k, xkv, nk, &dk, &mut dxkv, false);
    dense_back(p, g, &layer.v, xkv, nk, &dv, &mut dxkv, true);
    (dxq, dxkv)
}

fn ffn_forward<T: Real>(p: &[T], ff_in: &Dense, ff_out: &Dense, x: &[T], n: usize) -> (FfnCache<T>, Vec<T>) {
    let pre = dense(p, ff_in, x, n);
    let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let out = dense(p, ff_out, &act, n);
    (FfnCache { pre, act }, out)
}

#[allow(clippy::too_many_arguments)]
fn ffn_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    ff_in: &Dense,
    ff_out: &Dense,
    cache: &FfnCache<T>,
    x: &[T],
    n: usize,
    dout: &[T],
) -> Vec<T> {
    let mut dact = vec![T::zero(); cache.act.len()];
    dense_back(p, g, ff_out, &cache.act, n, dout, &mut dact, false);
    for (da, &pre) in dact.iter_mut().zip(&cache.pre) {
        *da *= gelu_grad(pre);
    }
    let mut dx = vec![T::zero(); x.len()];
    dense_back(p, g, ff_in, x, n, &dact, &mut dx, false);
    dx
}

struct MaskSource {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl MaskSource {
    fn mask<T: Real>(&mut self, len: usize) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        let keep = T::lit(1.0 / (1.0 - self.rate));
        Some(
            (0..len)
                .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn masked<T: Real>(x: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    let mut out = x.to_vec();
    apply_mask(&mut out, mask);
    out
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

impl<T: Real> Model<T> {
    pub(crate) fn embed_tokens(&self, tokens: &[TokenId], offset: usize) -> Vec<T> {
        let d = self.config.embed_dim;
        let scale = T::from_usize(d).unwrap().sqrt();
        let pe = positions::<T>(offset + tokens.len(), d);
        let table = &self.params[self.layout.embed.clone()];
        let mut x = vec![T::zero(); tokens.len() * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let e = &table[tok as usize * d..(tok as usize + 1) * d];
            let pos = &pe[(offset + i) * d..(offset + i + 1) * d];
            for j in 0..d {
                x[i * d + j] = e[j] * scale + pos[j];
            }
        }
        x
    }

    fn encoder_layer(&self, layer: &EncoderLayer, x: Vec<T>, n: usize, masks: &mut MaskSource) -> (EncLayerCache<T>, Vec<T>) {
        let (p, d, heads) = (&self.params[..], self.config.embed_dim, self.config.heads);
        let ln_attn = norm_forward(p, &layer.ln_attn, &x, d);
        let (attn, mut ao) = attention_forward(p, &layer.attn, heads, &ln_attn.out, n, &ln_attn.out, n, false);
        let mask_attn = masks.mask(ao.len());
        apply_mask(&mut ao, &mask_attn);
        let mid = add(&x, &ao);
        let ln_ffn = norm_forward(p, &layer.ln_ffn, &mid, d);
        let (ffn, fo) = ffn_forward(p, &layer.ff_in, &layer.ff_out, &ln_ffn.out, n);
        let mask_ffn = masks.mask(fo.len());
        let out = add(&mid, &masked(&fo, &mask_ffn));
        let cache = EncLayerCache {
            x,
            ln_attn,
            attn,
            mask_attn,
            mid,
            ln_ffn,
            ffn,
            mask_ffn,
        };
        (cache, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        layer: &DecoderLayer,
        x: Vec<T>,
        n: usize,
        enc_out: &[T],
        ns: usize,
        masks: &mut MaskSource,
    ) -> (DecLayerCache<T>, Vec<T>) {
        let (p, d, heads) = (&self.params[..], self.config.embed_dim, self.config.heads);
        let ln_self = norm_forward(p, &layer.ln_self, &x, d);
        let (self_attn, mut so) =
            attention_forward(p, &layer.self_attn, heads, &ln_self.out, n, &ln_self.out, n, true);
        let mask_self = masks.mask(so.len());
        apply_mask(&mut so, &mask_self);
        let after_self = add(&x, &so);
        let ln_cross = norm_forward(p, &layer.ln_cross, &after_self, d);
        let (cross, mut co) = attention_forward(p, &layer.cross_attn, heads, &ln_cross.out, n, enc_out, ns, false);
        let mask_cross = masks.mask(co.len());
        apply_mask(&mut co, &mask_cross);
        let after_cross = add(&after_self, &co);
        let ln_ffn = norm_forward(p, &layer.ln_ffn, &after_cross, d);
        let (ffn, fo) = ffn_forward(p, &layer.ff_in, &layer.ff_out, &ln_ffn.out, n);
        let mask_ffn = masks.mask(fo.len());
        let out = add(&after_cross, &masked(&fo, &mask_ffn));
        let cache = DecLayerCache {
            x,
            ln_self,
            self_attn,
            mask_self,
            after_self,
            ln_cross,
            cross,
            mask_cross,
            after_cross,
            ln_ffn,
            ffn,
            mask_ffn,
        };
        (cache, out)
    }

    /// Runs encoder and decoder over `input` and `target_prefix`, keeping every
    /// activation needed by [`Model::backward`].
    pub fn forward(&self, input: &[TokenId], target_prefix: &[TokenId], dropout: Option<Dropout>) -> Result<ForwardCache<T>> {
        self.check_lengths(input.len(), target_prefix.len())?;
        if input.iter().chain(target_prefix).any(|&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Shape("token id outside the vocabulary".into()));
        }
        let d = self.config.embed_dim;
        let (ns, nt) = (input.len(), target_prefix.len());
        let mut masks = MaskSource {
            rng: dropout
                .filter(|dr| dr.rate > 0.0)
                .map(|dr| ChaCha8Rng::seed_from_u64(dr.seed)),
            rate: dropout.map_or(0.0, |dr| dr.rate),
        };
        let p = &self.params[..];

        let mut x = self.embed_tokens(input, 0);
        let mut enc = Vec::with_capacity(self.layout.encoder.len());
        for layer in &self.layout.encoder {
            let (cache, out) = self.encoder_layer(layer, x, ns, &mut masks);
            x = out;
            enc.push(cache);
        }
        let enc_norm = norm_forward(p, &self.layout.enc_norm, &x, d);
        let enc_last = x;

        let mut y = self.embed_tokens(target_prefix, 0);
        let mut dec = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let (cache, out) = self.decoder_layer(layer, y, nt, &enc_norm.out, ns, &mut masks);
            y = out;
            dec.push(cache);
        }
        let dec_norm = norm_forward(p, &self.layout.dec_norm, &y, d);
        let logits = dense(p, &self.layout.out, &dec_norm.out, nt);
        Ok(ForwardCache {
            src: input.to_vec(),
            tgt: target_prefix.to_vec(),
            enc,
            enc_last,
            enc_norm,
            dec,
            dec_last: y,
            dec_norm,
            logits: Logits { rows: nt, data: logits },
        })
    }

    /// Encoder output (after the final norm) for `input`, without dropout.
    pub(super) fn encode_input(&self, input: &[TokenId]) -> Result<Vec<T>> {
        self.check_lengths(input.len(), 0)?;
        let mut masks = MaskSource { rng: None, rate: 0.0 };
        let mut x = self.embed_tokens(input, 0);
        for layer in &self.layout.encoder {
            x = self.encoder_layer(layer, x, input.len(), &mut masks).1;
        }
        Ok(norm_forward(&self.params, &self.layout.enc_norm, &x, self.config.embed_dim).out)
    }

    /// Row `t` scores the token following `target_prefix[..=t]`.
    pub fn forward_logits(&self, input: &[TokenId], target_prefix: &[TokenId]) -> Result<Logits<T>> {
        Ok(self.forward(input, target_prefix, None)?.logits)
    }

    /// Accumulates the parameter gradient for `dlogits` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], grads: &mut [T]) -> Result<()> {
        if dlogits.len() != cache.logits.data.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, logits have {}",
                dlogits.len(),
                cache.logits.data.len()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match the parameter layout".into()));
        }
        let (p, d, heads) = (&self.params[..], self.config.embed_dim, self.config.heads);
        let (ns, nt) = (cache.src.len(), cache.tgt.len());
        let g = grads;

        let mut dh = vec![T::zero(); nt * d];
        dense_back(p, g, &self.layout.out, &cache.dec_norm.out, nt, dlogits, &mut dh, false);
        let mut dy = vec![T::zero(); nt * d];
        norm_backward(p, g, &self.layout.dec_norm, &cache.dec_last, d, &cache.dec_norm, &dh, &mut dy);

        let enc_out = &cache.enc_norm.out;
        let mut denc = vec![T::zero(); ns * d];
        for (layer, lc) in self.layout.decoder.iter().zip(&cache.dec).rev() {
            // y = after_cross + drop(ffn(ln_ffn(after_cross)))
            let mut d_after_cross = dy.clone();
            let dfo = masked(&dy, &lc.mask_ffn);
            let dln = ffn_backward(p, g, &layer.ff_in, &layer.ff_out, &lc.ffn, &lc.ln_ffn.out, nt, &dfo);
            norm_backward(p, g, &layer.ln_ffn, &lc.after_cross, d, &lc.ln_ffn, &dln, &mut d_after_cross);

            // after_cross = after_self + drop(cross(ln_cross(after_self), enc_out))
            let mut d_after_self = d_after_cross.clone();
            let dco = masked(&d_after_cross, &lc.mask_cross);
            let (dq, dkv) =
                attention_backward(p, g, &layer.cross_attn, heads, &lc.cross, &lc.ln_cross.out, enc_out, &dco);
            for (a, b) in denc.iter_mut().zip(&dkv) {
                *a += *b;
            }
            norm_backward(p, g, &layer.ln_cross, &lc.after_self, d, &lc.ln_cross, &dq, &mut d_after_self);

            // after_self = x + drop(self_attn(ln_self(x)))
            let mut dx = d_after_self.clone();
            let dso = masked(&d_after_self, &lc.mask_self);
            let (dq, dkv) =
                attention_backward(p, g, &layer.self_attn, heads, &lc.self_attn, &lc.ln_self.out, &lc.ln_self.out, &dso);
            let dln = add(&dq, &dkv);
            norm_backward(p, g, &layer.ln_self, &lc.x, d, &lc.ln_self, &dln, &mut dx);
            dy = dx;
        }
        self.embed_backward(g, &cache.tgt, &dy);

        let mut dx = vec![T::zero(); ns * d];
        norm_backward(p, g, &self.layout.enc_norm, &cache.enc_last, d, &cache.enc_norm, &denc, &mut dx);
        for (layer, lc) in self.layout.encoder.iter().zip(&cache.enc).rev() {
            let mut dmid = dx.clone();
            let dfo = masked(&dx, &lc.mask_ffn);
            let dln = ffn_backward(p, g, &layer.ff_in, &layer.ff_out, &lc.ffn, &lc.ln_ffn.out, ns, &dfo);
            norm_backward(p, g, &layer.ln_ffn, &lc.mid, d, &lc.ln_ffn, &dln, &mut dmid);

            let mut dprev = dmid.clone();
            let dao = masked(&dmid, &lc.mask_attn);
            let (dq, dkv) = attention_backward(p, g, &layer.attn, heads, &lc.attn, &lc.ln_attn.out, &lc.ln_attn.out, &dao);
            let dln = add(&dq, &dkv);
            norm_backward(p, g, &layer.ln_attn, &lc.x, d, &lc.ln_attn, &dln, &mut dprev);
            dx = dprev;
        }
        self.embed_backward(g, &cache.src, &dx);
        Ok(())
    }

    fn embed_backward(&self, grads: &mut [T], tokens: &[TokenId], dx: &[T]) {
        let d = self.config.embed_dim;
        let scale = T::from_usize(d).unwrap().sqrt();
        let table = &mut grads[self.layout.embed.clone()];
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &mut table[tok as usize * d..(tok as usize + 1) * d];
            for j in 0..d {
                row[j] += dx[i * d + j] * scale;
            }
        }
    }
}
