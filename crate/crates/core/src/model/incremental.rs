//! Token-at-a-time decoding with cached keys and values.

use super::kernels::{dense_forward, gelu, layer_norm_forward, Real};
use super::{Attention, Dense, Model, Norm};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, VOCAB_SIZE};

/// Encoded input plus the per-layer cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

/// Self-attention keys and values of the tokens decoded so far.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    len: usize,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
}

impl<T> DecoderCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn dense_row<T: Real>(p: &[T], layer: &Dense, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); layer.fan_out];
    dense_forward(x, x.len() / layer.fan_in, &p[layer.w.clone()], &p[layer.b.clone()], &mut out);
    out
}

fn norm_row<T: Real>(p: &[T], norm: &Norm, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let (mut mean, mut rstd) = ([T::zero()], [T::zero()]);
    layer_norm_forward(x, x.len(), &p[norm.g.clone()], &p[norm.b.clone()], &mut out, &mut mean, &mut rstd);
    out
}

/// Attention of one query row over `n` cached key/value rows.
fn attend<T: Real>(q: &[T], keys: &[T], values: &[T], heads: usize) -> Vec<T> {
    let d = q.len();
    let dh = d / heads;
    let n = keys.len() / d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ctx = vec![T::zero(); d];
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for s in &mut scores {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, &s) in scores.iter().enumerate() {
            let w = s / sum;
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (c, &v) in ctx[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                *c += w * v;
            }
        }
    }
    ctx
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl<T: Real> Model<T> {
    pub fn encode(&self, input: &[TokenId]) -> Result<EncoderState<T>> {
        let enc_out = self.encode_input(input)?;
        let n = input.len();
        let mut cross_k = Vec::with_capacity(self.layout.decoder.len());
        let mut cross_v = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let attn: &Attention = &layer.cross_attn;
            let mut k = vec![T::zero(); n * attn.k.fan_out];
            let mut v = vec![T::zero(); n * attn.v.fan_out];
            dense_forward(&enc_out, n, &self.params[attn.k.w.clone()], &self.params[attn.k.b.clone()], &mut k);
            dense_forward(&enc_out, n, &self.params[attn.v.w.clone()], &self.params[attn.v.b.clone()], &mut v);
            cross_k.push(k);
            cross_v.push(v);
        }
        Ok(EncoderState { len: n, cross_k, cross_v })
    }

    pub fn new_decoder_cache(&self) -> DecoderCache<T> {
        let layers = self.layout.decoder.len();
        DecoderCache {
            len: 0,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
        }
    }

    /// Feeds one more decoder input token and returns the next-token logits.
    /// Equivalent to the last row of `forward_logits` over the whole prefix.
    pub fn decode_step(&self, enc: &EncoderState<T>, cache: &mut DecoderCache<T>, token: TokenId) -> Result<Vec<T>> {
        if cache.len >= self.config.max_output_len {
            return Err(Error::Overlength {
                len: cache.len + 1,
                max: self.config.max_output_len,
            });
        }
        if token as usize >= VOCAB_SIZE {
            return Err(Error::Shape("token id outside the vocabulary".into()));
        }
        debug_assert!(enc.len > 0);
        let p = &self.params[..];
        let heads = self.config.heads;
        let embedded = self.embed_tokens(&[token], cache.len);
        let mut y = embedded;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let ln = norm_row(p, &layer.ln_self, &y);
            let q = dense_row(p, &layer.self_attn.q, &ln);
            cache.self_k[l].extend(dense_row(p, &layer.self_attn.k, &ln));
            cache.self_v[l].extend(dense_row(p, &layer.self_attn.v, &ln));
            let ctx = attend(&q, &cache.self_k[l], &cache.self_v[l], heads);
            add_into(&mut y, &dense_row(p, &layer.self_attn.o, &ctx));

            let ln = norm_row(p, &layer.ln_cross, &y);
            let q = dense_row(p, &layer.cross_attn.q, &ln);
            let ctx = attend(&q, &enc.cross_k[l], &enc.cross_v[l], heads);
            add_into(&mut y, &dense_row(p, &layer.cross_attn.o, &ctx));

            let ln = norm_row(p, &layer.ln_ffn, &y);
            let act: Vec<T> = dense_row(p, &layer.ff_in, &ln).into_iter().map(gelu).collect();
            add_into(&mut y, &dense_row(p, &layer.ff_out, &act));
        }
        cache.len += 1;
        let h = norm_row(p, &self.layout.dec_norm, &y);
        Ok(dense_row(p, &self.layout.out, &h))
    }
}

#[cfg(test)]
mod tests {
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn incremental_matches_full_forward() {
        let m = init_model(ModelConfig { layers: 2, ..ModelConfig::micro() }, 17).unwrap().cast::<f64>();
        let input = [257, 5, 6, 7, 8, 9];
        let prefix = [257, 97, 259, 98, 99, 258];
        let full = m.forward_logits(&input, &prefix).unwrap();
        let enc = m.encode(&input).unwrap();
        let mut cache = m.new_decoder_cache();
        for (t, &tok) in prefix.iter().enumerate() {
            let row = m.decode_step(&enc, &mut cache, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12, "row {t}: {a} vs {b}");
            }
        }
        assert_eq!(cache.len(), prefix.len());
    }
}
