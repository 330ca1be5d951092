//! MLP encoder `d → h → h → z` with ReLU activations and an L2-normalized
//! output, plus a linear shift-classification head on the pre-normalization
//! feature.
//!
//! Parameters live in one flat buffer so optimizers, checkpoints and gradient
//! checks can treat them as a single vector. Layout, in order:
//! `W1 (h×d), b1, W2 (h×h), b2, W3 (z×h), b3, Wh (K×z), bh`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::mathcore::{ensure_finite, gemm, normalize_backward, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub shifts: usize,
}

impl EncoderDims {
    fn layers(&self) -> [(usize, usize); 4] {
        [
            (self.hidden, self.input),
            (self.hidden, self.hidden),
            (self.embed, self.hidden),
            (self.shifts, self.embed),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(o, i)| o * i + o).sum()
    }

    fn offsets(&self) -> [usize; 4] {
        let mut off = [0; 4];
        let mut acc = 0;
        for (k, (o, i)) in self.layers().iter().enumerate() {
            off[k] = acc;
            acc += o * i + o;
        }
        off
    }
}

/// Borrowed view of one linear layer, `y = W x + b` with `W` stored `out×in`.
struct Layer<'a> {
    w: &'a [f64],
    b: &'a [f64],
    out: usize,
    inp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    data: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor2,
    h1: Tensor2,
    h2: Tensor2,
    /// Pre-normalization feature.
    pub feature: Tensor2,
    pub norms: Vec<f64>,
    /// Unit embeddings, one per row.
    pub embedding: Tensor2,
    /// Shift-head logits, one row per input.
    pub logits: Tensor2,
}

impl EncoderParams {
    /// Kaiming-style Gaussian init (`std = √(2 / fan_in)`), zero biases.
    pub fn init(seed: u64, dims: EncoderDims) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.embed == 0 || dims.shifts == 0 {
            return Err(ElsaError::invalid("encoder dims must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(dims.num_params());
        for (out, inp) in dims.layers() {
            let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
            data.extend((0..out * inp).map(|_| normal.sample(&mut rng)));
            data.extend(std::iter::repeat_n(0.0, out));
        }
        Ok(Self { dims, data })
    }

    pub fn from_flat(dims: EncoderDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.num_params() {
            return Err(ElsaError::DimensionMismatch {
                expected: dims.num_params(),
                got: data.len(),
            });
        }
        ensure_finite(&data, "encoder parameters")?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.num_params()],
        }
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    fn layer(&self, k: usize) -> Layer<'_> {
        let (out, inp) = self.dims.layers()[k];
        let off = self.dims.offsets()[k];
        Layer {
            w: &self.data[off..off + out * inp],
            b: &self.data[off + out * inp..off + out * inp + out],
            out,
            inp,
        }
    }

    /// Mutable access to the shift head as `(weights K×z, bias K)`.
    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (out, inp) = self.dims.layers()[3];
        let off = self.dims.offsets()[3];
        let (w, b) = self.data[off..off + out * inp + out].split_at_mut(out * inp);
        (w, b)
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: &Tensor2) -> Result<ForwardCache> {
        if x.cols() != self.dims.input {
            return Err(ElsaError::DimensionMismatch {
                expected: self.dims.input,
                got: x.cols(),
            });
        }
        let h1 = dense(&self.layer(0), x, true);
        let h2 = dense(&self.layer(1), &h1, true);
        let feature = dense(&self.layer(2), &h2, false);
        let logits = dense(&self.layer(3), &feature, false);
        let mut embedding = feature.clone();
        let norms = embedding.normalize_rows()?;
        Ok(ForwardCache {
            input: x.clone(),
            h1,
            h2,
            feature,
            norms,
            embedding,
            logits,
        })
    }

    /// Unit embeddings of the rows of `x`.
    pub fn embed_rows(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward(x)?.embedding)
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given the loss's
    /// gradients w.r.t. the unit embeddings and/or the shift logits.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_embedding: Option<&Tensor2>,
        grad_logits: Option<&Tensor2>,
    ) -> Vec<f64> {
        let n = cache.input.rows();
        let d = self.dims;
        let mut grads = vec![0.0; self.data.len()];
        let off = d.offsets();

        let mut dv = Tensor2::zeros(n, d.embed);
        if let Some(gu) = grad_embedding {
            for i in 0..n {
                normalize_backward(cache.embedding.row(i), cache.norms[i], gu.row(i), dv.row_mut(i));
            }
        }
        if let Some(gl) = grad_logits {
            let head = self.layer(3);
            // dV += dLogits · Wh ; dWh = dLogitsᵀ · V ; dbh = Σ dLogits
            gemm(
                false,
                false,
                n,
                d.embed,
                d.shifts,
                1.0,
                gl.data(),
                head.w,
                1.0,
                dv.data_mut(),
            );
            let (gw, gb) = grads[off[3]..off[3] + head.out * head.inp + head.out].split_at_mut(head.out * head.inp);
            gemm(
                true,
                false,
                d.shifts,
                d.embed,
                n,
                1.0,
                gl.data(),
                cache.feature.data(),
                0.0,
                gw,
            );
            col_sums(gl, gb);
        }

        let dh2 = linear_backward(&self.layer(2), &dv, &cache.h2, &mut grads[off[2]..]);
        let dh2 = relu_mask(dh2, &cache.h2);
        let dh1 = linear_backward(&self.layer(1), &dh2, &cache.h1, &mut grads[off[1]..]);
        let dh1 = relu_mask(dh1, &cache.h1);
        linear_backward(&self.layer(0), &dh1, &cache.input, &mut grads[off[0]..]);
        grads
    }
}

/// Unit embedding of a single input.
pub fn embed(params: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    let xt = Tensor2::new(1, x.len(), x.to_vec())?;
    Ok(params.forward(&xt)?.embedding.into_data())
}

/// Shift-head logits of a single input.
pub fn shift_logits(params: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    let xt = Tensor2::new(1, x.len(), x.to_vec())?;
    Ok(params.forward(&xt)?.logits.into_data())
}

fn dense(layer: &Layer<'_>, x: &Tensor2, relu: bool) -> Tensor2 {
    let n = x.rows();
    let mut out = Tensor2::zeros(n, layer.out);
    gemm(
        false,
        true,
        n,
        layer.out,
        layer.inp,
        1.0,
        x.data(),
        layer.w,
        0.0,
        out.data_mut(),
    );
    for row in out.data_mut().chunks_exact_mut(layer.out) {
        for (v, b) in row.iter_mut().zip(layer.b) {
            *v += b;
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Accumulates `dW = dYᵀ X`, `db = Σ dY` into `grads` (which starts at the
/// layer's offset) and returns `dX = dY W`.
fn linear_backward(layer: &Layer<'_>, dy: &Tensor2, x: &Tensor2, grads: &mut [f64]) -> Tensor2 {
    let n = dy.rows();
    let (gw, rest) = grads.split_at_mut(layer.out * layer.inp);
    gemm(true, false, layer.out, layer.inp, n, 1.0, dy.data(), x.data(), 0.0, gw);
    col_sums(dy, &mut rest[..layer.out]);
    let mut dx = Tensor2::zeros(n, layer.inp);
    gemm(
        false,
        false,
        n,
        layer.inp,
        layer.out,
        1.0,
        dy.data(),
        layer.w,
        0.0,
        dx.data_mut(),
    );
    dx
}

fn relu_mask(mut grad: Tensor2, post: &Tensor2) -> Tensor2 {
    for (g, a) in grad.data_mut().iter_mut().zip(post.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

fn col_sums(t: &Tensor2, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in t.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::mathcore::{grad_check, logsumexp, norm, softmax};

    fn small_dims() -> EncoderDims {
        EncoderDims {
            input: 5,
            hidden: 7,
            embed: 4,
            shifts: 3,
        }
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> Tensor2 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * d).map(|_| r.sample(StandardNormal)).collect();
        Tensor2::new(n, d, v).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_stable() {
        let p = EncoderParams::init(3, small_dims()).unwrap();
        let x = random_batch(1, 6, 5);
        let a = p.embed_rows(&x).unwrap();
        for row in a.iter_rows() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
        let b = p.embed_rows(&x).unwrap();
        assert_eq!(a, b);
        let single = embed(&p, x.row(2)).unwrap();
        for (s, t) in single.iter().zip(a.row(2)) {
            assert!((s - t).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_is_degenerate() {
        let p = EncoderParams::zeros(small_dims());
        let err = embed(&p, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap_err();
        assert!(err.to_string().starts_with("degenerate vector"));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = EncoderParams::init(0, small_dims()).unwrap();
        assert!(matches!(
            embed(&p, &[1.0, 2.0]),
            Err(ElsaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_head_gives_uniform_shift_posterior() {
        let mut p = EncoderParams::init(1, small_dims()).unwrap();
        let (w, b) = p.head_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        b.iter_mut().for_each(|v| *v = 0.0);
        let logits = shift_logits(&p, &[0.1, 0.2, -0.3, 0.4, 0.5]).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        for q in softmax(&logits).unwrap() {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_seeded_and_kaiming_scaled() {
        let dims = EncoderDims {
            input: 200,
            hidden: 64,
            embed: 16,
            shifts: 4,
        };
        let a = EncoderParams::init(5, dims).unwrap();
        let b = EncoderParams::init(5, dims).unwrap();
        let c = EncoderParams::init(6, dims).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // First layer: 64×200 = 12,800 entries, fan_in 200.
        let w = a.layer(0).w;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0 / 200.0f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    }

    /// Scalar test loss mixing both outputs:
    /// `Σ c ⊙ U + Σ_i logsumexp(logits_i)`.
    fn probe_loss(p: &EncoderParams, x: &Tensor2, c: &Tensor2) -> Result<(f64, Vec<f64>)> {
        let cache = p.forward(x)?;
        let mut value = 0.0;
        for (u, w) in cache.embedding.data().iter().zip(c.data()) {
            value += u * w;
        }
        let mut gl = Tensor2::zeros(x.rows(), p.dims().shifts);
        for i in 0..x.rows() {
            value += logsumexp(cache.logits.row(i))?;
            gl.row_mut(i).copy_from_slice(&softmax(cache.logits.row(i))?);
        }
        Ok((value, p.backward(&cache, Some(c), Some(&gl))))
    }

    #[test]
    fn backward_passes_grad_check() {
        let dims = small_dims();
        let p0 = EncoderParams::init(8, dims).unwrap();
        let x = random_batch(2, 4, dims.input);
        let c = random_batch(3, 4, dims.embed);
        let f = |theta: &[f64]| {
            let p = EncoderParams::from_flat(dims, theta.to_vec())?;
            probe_loss(&p, &x, &c)
        };
        let r = grad_check(f, p0.as_slice(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn shift_head_cross_entropy_gradient_checks() {
        use crate::objective::loss_shift;
        let dims = small_dims();
        let p0 = EncoderParams::init(4, dims).unwrap();
        let x = random_batch(6, 6, dims.input);
        let ids = vec![0usize, 1, 2, 0, 1, 2];
        let f = |theta: &[f64]| {
            let p = EncoderParams::from_flat(dims, theta.to_vec())?;
            let cache = p.forward(&x)?;
            let (loss, gl) = loss_shift(&cache.logits, &ids)?;
            Ok((loss, p.backward(&cache, None, Some(&gl))))
        };
        let r = grad_check(f, p0.as_slice(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn perfect_separation_head_has_tiny_loss() {
        use crate::objective::loss_shift;
        let dims = small_dims();
        let mut p = EncoderParams::init(12, dims).unwrap();
        // Build a head whose logits implement a nearest-mean rule over the
        // pre-normalization features of each shift label's inputs.
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let protos: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..dims.input).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for (k, proto) in protos.iter().enumerate() {
            for _ in 0..5 {
                rows.push(
                    proto
                        .iter()
                        .map(|v| v + 0.001 * r.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<_>>(),
                );
                ids.push(k);
            }
        }
        let x = Tensor2::from_rows(&rows).unwrap();
        let feats = p.forward(&x).unwrap().feature;
        let mut means = vec![vec![0.0; dims.embed]; 3];
        for (i, &k) in ids.iter().enumerate() {
            for (m, v) in means[k].iter_mut().zip(feats.row(i)) {
                *m += v / 5.0;
            }
        }
        // Nearest-mean linear classifier: logit_k(v) = α (m_k·v − ‖m_k‖²/2).
        let mut min_sq = f64::INFINITY;
        for a in 0..3 {
            for b in 0..a {
                let d2: f64 = means[a].iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                min_sq = min_sq.min(d2);
            }
        }
        let alpha = 40.0 / min_sq;
        let (w, b) = p.head_mut();
        for k in 0..3 {
            for j in 0..dims.embed {
                w[k * dims.embed + j] = alpha * means[k][j];
            }
            b[k] = -alpha * means[k].iter().map(|v| v * v).sum::<f64>() / 2.0;
        }
        let logits = p.forward(&x).unwrap().logits;
        let (loss, _) = loss_shift(&logits, &ids).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }
}
