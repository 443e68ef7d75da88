//! Forward pass with full activation capture, and its reverse-mode backward.

#![allow(clippy::needless_range_loop)]

use super::intervention::ActivationHook;
use super::model::{rms_norm, TransformerModel, Weights};
use super::tensor::{axpy, dot, matmul, matmul_backward, sigmoid, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hidden states `h_0..=h_L` (position × d_model) and post-intervention FFN
/// activations of each block (position × d_ff).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<T> {
    pub hidden: Vec<Matrix<T>>,
    pub ffn_acts: Vec<Matrix<T>>,
}

impl<T: Scalar> HiddenTrace<T> {
    pub fn all_finite(&self) -> bool {
        self.hidden.iter().all(Matrix::all_finite) && self.ffn_acts.iter().all(Matrix::all_finite)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Row `p` holds next-token logits after position `p`.
    pub logits: Matrix<T>,
    pub trace: HiddenTrace<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    inv1: Vec<T>,
    a: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per head, row `p` holds attention probabilities over `0..=p`.
    probs: Vec<Matrix<T>>,
    o: Matrix<T>,
    inv2: Vec<T>,
    m: Matrix<T>,
    pre: Matrix<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache<T>>,
    /// Residual stream after attention, before the FFN of each block.
    pub mid: Vec<Matrix<T>>,
    pub inv_f: Vec<T>,
    pub normed_f: Matrix<T>,
    pub trace: HiddenTrace<T>,
    /// First position that has a logits row.
    pub logits_from: usize,
    pub logits: Matrix<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Full forward pass under an activation hook (an `InterventionSpec` or
    /// any other [`ActivationHook`]).
    pub fn forward<H: ActivationHook<T> + ?Sized>(
        &self,
        tokens: &[u32],
        hook: &H,
    ) -> Result<ForwardOutput<T>> {
        let cache = self.forward_cached(tokens, hook, 0)?;
        Ok(ForwardOutput {
            logits: cache.logits,
            trace: cache.trace,
        })
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > cfg.context_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                context: cfg.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward keeping everything the backward pass needs. Logits are only
    /// produced for positions `logits_from..`.
    pub(crate) fn forward_cached<H: ActivationHook<T> + ?Sized>(
        &self,
        tokens: &[u32],
        hook: &H,
        logits_from: usize,
    ) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens)?;
        let cfg = *self.config();
        let w = &self.weights;
        let n = tokens.len();
        let d = cfg.d_model;
        let logits_from = logits_from.min(n - 1);

        let mut h = Matrix::zeros(n, d);
        for (p, &t) in tokens.iter().enumerate() {
            let row = h.row_mut(p);
            row.copy_from_slice(w.tok_emb.row(t as usize));
            axpy(T::one(), w.pos_emb.row(p), row);
        }

        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        let mut ffn_acts = Vec::with_capacity(cfg.n_layers);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut mids = Vec::with_capacity(cfg.n_layers);
        hidden.push(h.clone());

        for (li, lw) in w.layers.iter().enumerate() {
            let (a, inv1) = norm_rows(&h, &lw.attn_norm);
            let q = matmul(&a, &lw.wq);
            let k = matmul(&a, &lw.wk);
            let v = matmul(&a, &lw.wv);
            let (o, probs) = attention(&q, &k, &v, cfg.n_heads);
            let attn_out = matmul(&o, &lw.wo);
            let mut mid = h;
            add_into(&mut mid, &attn_out);

            let (m, inv2) = norm_rows(&mid, &lw.ffn_norm);
            let mut pre = matmul(&m, &lw.w_in);
            for p in 0..n {
                axpy(T::one(), &lw.b_in, pre.row_mut(p));
            }
            let mut act = pre.clone();
            for x in act.as_mut_slice() {
                *x = *x * sigmoid(*x);
            }
            hook.forward(li, &mut act);
            let ffn_out = matmul(&act, &lw.w_out);
            let mut out = mid.clone();
            add_into(&mut out, &ffn_out);

            layers.push(LayerCache {
                inv1,
                a,
                q,
                k,
                v,
                probs,
                o,
                inv2,
                m,
                pre,
            });
            mids.push(mid);
            ffn_acts.push(act);
            hidden.push(out.clone());
            h = out;
        }

        let rows = n - logits_from;
        let mut normed_f = Matrix::zeros(n, d);
        let mut inv_f = vec![T::zero(); n];
        let mut logits = Matrix::zeros(rows, cfg.vocab_size);
        for p in logits_from..n {
            let (nr, inv) = rms_norm(h.row(p), &w.final_norm);
            let z = self.unembed_row(&nr);
            logits.row_mut(p - logits_from).copy_from_slice(&z);
            normed_f.row_mut(p).copy_from_slice(&nr);
            inv_f[p] = inv;
        }

        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            mid: mids,
            inv_f,
            normed_f,
            trace: HiddenTrace { hidden, ffn_acts },
            logits_from,
            logits,
        })
    }

    /// Reverse pass from `dlogits` (rows aligned with `cache.logits`).
    ///
    /// Returns the gradient with respect to each block's hooked FFN
    /// activation. Parameter gradients are accumulated into `grads` when
    /// given; otherwise the pass stops once block 0's activations are done.
    pub(crate) fn backward<H: ActivationHook<T> + ?Sized>(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Matrix<T>,
        hook: &H,
        mut grads: Option<&mut Weights<T>>,
    ) -> Vec<Matrix<T>> {
        let cfg = *self.config();
        let w = &self.weights;
        let n = cache.tokens.len();
        let d = cfg.d_model;
        let h_last = &cache.trace.hidden[cfg.n_layers];

        let mut dh = Matrix::zeros(n, d);
        for p in cache.logits_from..n {
            let dz = dlogits.row(p - cache.logits_from);
            let mut dnormed = vec![T::zero(); d];
            for (v, &g) in dz.iter().enumerate() {
                if g != T::zero() {
                    axpy(g, w.readout().row(v), &mut dnormed);
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                let nr = cache.normed_f.row(p);
                for (v, &g) in dz.iter().enumerate() {
                    if g != T::zero() {
                        axpy(g, nr, gr.readout_mut().row_mut(v));
                        gr.unembed_bias[v] += g;
                    }
                }
            }
            let dg = grads.as_deref_mut().map(|g| g.final_norm.as_mut_slice());
            rms_backward(
                h_last.row(p),
                cache.inv_f[p],
                &w.final_norm,
                &dnormed,
                dh.row_mut(p),
                dg,
            );
        }

        let mut act_grads = vec![Matrix::zeros(0, 0); cfg.n_layers];
        for li in (0..cfg.n_layers).rev() {
            let lw = &w.layers[li];
            let lc = &cache.layers[li];
            let act = &cache.trace.ffn_acts[li];
            let x = &cache.trace.hidden[li];
            let mid = &cache.mid[li];

            let dact = matmul_backward(
                act,
                &lw.w_out,
                &dh,
                grads.as_deref_mut().map(|g| &mut g.layers[li].w_out),
            );
            act_grads[li] = dact.clone();
            if li == 0 && grads.is_none() {
                break;
            }
            let mut dpre = dact;
            hook.backward(li, &mut dpre);
            for (g, &z) in dpre.as_mut_slice().iter_mut().zip(lc.pre.as_slice()) {
                let s = sigmoid(z);
                *g *= s * (T::one() + z * (T::one() - s));
            }
            if let Some(gr) = grads.as_deref_mut() {
                for p in 0..n {
                    axpy(T::one(), dpre.row(p), &mut gr.layers[li].b_in);
                }
            }
            let dm = matmul_backward(
                &lc.m,
                &lw.w_in,
                &dpre,
                grads.as_deref_mut().map(|g| &mut g.layers[li].w_in),
            );
            let mut dmid = dh;
            for p in 0..n {
                let dg = grads
                    .as_deref_mut()
                    .map(|g| g.layers[li].ffn_norm.as_mut_slice());
                rms_backward(mid.row(p), lc.inv2[p], &lw.ffn_norm, dm.row(p), dmid.row_mut(p), dg);
            }

            let d_o = matmul_backward(
                &lc.o,
                &lw.wo,
                &dmid,
                grads.as_deref_mut().map(|g| &mut g.layers[li].wo),
            );
            let (dq, dk, dv) = attention_backward(lc, &d_o, cfg.n_heads);
            let mut da = matmul_backward(
                &lc.a,
                &lw.wq,
                &dq,
                grads.as_deref_mut().map(|g| &mut g.layers[li].wq),
            );
            add_into(
                &mut da,
                &matmul_backward(
                    &lc.a,
                    &lw.wk,
                    &dk,
                    grads.as_deref_mut().map(|g| &mut g.layers[li].wk),
                ),
            );
            add_into(
                &mut da,
                &matmul_backward(
                    &lc.a,
                    &lw.wv,
                    &dv,
                    grads.as_deref_mut().map(|g| &mut g.layers[li].wv),
                ),
            );
            let mut dx = dmid;
            for p in 0..n {
                let dg = grads
                    .as_deref_mut()
                    .map(|g| g.layers[li].attn_norm.as_mut_slice());
                rms_backward(x.row(p), lc.inv1[p], &lw.attn_norm, da.row(p), dx.row_mut(p), dg);
            }
            dh = dx;
        }

        if let Some(gr) = grads {
            for (p, &t) in cache.tokens.iter().enumerate() {
                axpy(T::one(), dh.row(p), gr.tok_emb.row_mut(t as usize));
                axpy(T::one(), dh.row(p), gr.pos_emb.row_mut(p));
            }
        }
        act_grads
    }
}

fn add_into<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    for (a, &b) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *a += b;
    }
}

fn norm_rows<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> (Matrix<T>, Vec<T>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for p in 0..x.rows() {
        let (r, inv) = rms_norm(x.row(p), gain);
        out.row_mut(p).copy_from_slice(&r);
        invs.push(inv);
    }
    (out, invs)
}

/// Adds the input gradient of `y = gain ⊙ x / rms(x)` to `dx`.
fn rms_backward<T: Scalar>(
    x: &[T],
    inv: T,
    gain: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: Option<&mut [T]>,
) {
    let n = T::of(x.len() as f64);
    let mut mean = T::zero();
    for i in 0..x.len() {
        mean += dy[i] * gain[i] * x[i] * inv;
    }
    mean /= n;
    for i in 0..x.len() {
        let xhat = x[i] * inv;
        dx[i] += inv * (dy[i] * gain[i] - xhat * mean);
    }
    if let Some(dg) = dgain {
        for i in 0..x.len() {
            dg[i] += dy[i] * x[i] * inv;
        }
    }
}

fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (n, d) = q.shape();
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut o = Matrix::zeros(n, d);
    let mut all_probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut probs = Matrix::zeros(n, n);
        for p in 0..n {
            let qp = &q.row(p)[cols.clone()];
            let row = probs.row_mut(p);
            let mut max = T::neg_infinity();
            for j in 0..=p {
                let s = dot(qp, &k.row(j)[cols.clone()]) * scale;
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for r in row.iter_mut().take(p + 1) {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut().take(p + 1) {
                *r /= sum;
            }
            let op = &mut o.row_mut(p)[cols.clone()];
            for j in 0..=p {
                axpy(probs.get(p, j), &v.row(j)[cols.clone()], op);
            }
        }
        all_probs.push(probs);
    }
    (o, all_probs)
}

fn attention_backward<T: Scalar>(
    lc: &LayerCache<T>,
    d_o: &Matrix<T>,
    n_heads: usize,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (n, d) = lc.q.shape();
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dprob = vec![T::zero(); n];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let probs = &lc.probs[h];
        for p in 0..n {
            let dop = &d_o.row(p)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..=p {
                let pr = probs.get(p, j);
                dprob[j] = dot(dop, &lc.v.row(j)[cols.clone()]);
                weighted += pr * dprob[j];
                axpy(pr, dop, &mut dv.row_mut(j)[cols.clone()]);
            }
            for j in 0..=p {
                let ds = probs.get(p, j) * (dprob[j] - weighted) * scale;
                if ds != T::zero() {
                    axpy(ds, &lc.k.row(j)[cols.clone()], &mut dq.row_mut(p)[cols.clone()]);
                    axpy(ds, &lc.q.row(p)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}
