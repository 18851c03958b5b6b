//! Single-sequence forward/backward passes with cached activations.
//!
//! Base weights are frozen, so the backward pass produces gradients only
//! for attached adapter pairs; everything else is just chain-rule plumbing
//! back to the adapter insertion points.

use crate::error::{Error, Result};
use crate::lora::{AdapterPair, AdapterSet, TargetModule};
use crate::model::TransformerWeights;
use crate::numerics::{matmul, Matrix, RngState};

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10000.0;

fn target_slot(t: TargetModule) -> usize {
    match t {
        TargetModule::Q => 0,
        TargetModule::K => 1,
        TargetModule::V => 2,
        TargetModule::O => 3,
    }
}

struct AdapterTrace {
    /// Input after dropout; None when no dropout was applied.
    dropped_in: Option<Matrix>,
    /// Dropout factors (0 or 1/(1-p)); None when no dropout was applied.
    mask: Option<Matrix>,
    /// (effective input) x A, cached for the B gradient.
    xa: Matrix,
}

struct LayerTrace {
    x_in: Matrix,
    attn_normed: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    x_mid: Matrix,
    ffn_pre: Matrix,
    adapters: [Option<AdapterTrace>; 4],
}

pub(super) struct SeqCache {
    layers: Vec<LayerTrace>,
    final_in: Matrix,
    logits: Matrix,
}

impl SeqCache {
    pub(super) fn into_logits(self) -> Matrix {
        self.logits
    }

    pub(super) fn logits(&self) -> &Matrix {
        &self.logits
    }
}

type DropoutCtx<'a> = (&'a mut RngState, f64);

fn embed(weights: &TransformerWeights, tokens: &[u32]) -> Result<Matrix> {
    let geo = weights.geometry();
    let mut x = Matrix::zeros(tokens.len(), geo.d_model);
    for (row, &tok) in tokens.iter().enumerate() {
        if tok as usize >= geo.vocab_size {
            return Err(Error::Input(format!(
                "token id {tok} out of vocabulary (size {})",
                geo.vocab_size
            )));
        }
        x.row_mut(row).copy_from_slice(weights.tok_emb.row(tok as usize));
    }
    Ok(x)
}

fn rmsnorm_rows(x: &Matrix, gain: &[f64]) -> Matrix {
    let n = x.cols();
    let mut out = Matrix::zeros(x.rows(), n);
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        let orow = out.row_mut(r);
        for i in 0..n {
            orow[i] = gain[i] * row[i] * inv;
        }
    }
    out
}

fn rmsnorm_backward(x: &Matrix, gain: &[f64], dy: &Matrix) -> Matrix {
    let n = x.cols();
    let mut dx = Matrix::zeros(x.rows(), n);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ms: f64 = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let rms = (ms + RMS_EPS).sqrt();
        let s: f64 = (0..n).map(|i| gain[i] * dyr[i] * xr[i]).sum();
        let coef = s / (n as f64 * rms * rms * rms);
        let dxr = dx.row_mut(r);
        for i in 0..n {
            dxr[i] = gain[i] * dyr[i] / rms - xr[i] * coef;
        }
    }
    dx
}

fn silu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        let s = 1.0 / (1.0 + (-*v).exp());
        *v *= s;
    }
    out
}

fn silu_backward(pre: &Matrix, dact: &Matrix) -> Matrix {
    let mut out = dact.clone();
    for (d, &u) in out.data_mut().iter_mut().zip(pre.data().iter()) {
        let s = 1.0 / (1.0 + (-u).exp());
        *d *= s * (1.0 + u * (1.0 - s));
    }
    out
}

fn rope_freqs(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| ROPE_BASE.powf(-((2 * j) as f64) / head_dim as f64))
        .collect()
}

fn rope_inplace(m: &mut Matrix, head_dim: usize, inverse: bool) {
    let freqs = rope_freqs(head_dim);
    let n_blocks = m.cols() / head_dim;
    for pos in 0..m.rows() {
        let row = m.row_mut(pos);
        for b in 0..n_blocks {
            let base = b * head_dim;
            for (j, &f) in freqs.iter().enumerate() {
                let theta = pos as f64 * f;
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let (x, y) = (row[base + 2 * j], row[base + 2 * j + 1]);
                row[base + 2 * j] = x * cos - y * sin;
                row[base + 2 * j + 1] = x * sin + y * cos;
            }
        }
    }
}

/// Causal multi-head attention; query heads share k/v heads in groups.
fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    head_dim: usize,
) -> (Matrix, Vec<Matrix>) {
    let seq = q.rows();
    let n_kv = k.cols() / head_dim;
    let group = n_heads / n_kv;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut ctx = Matrix::zeros(seq, n_heads * head_dim);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qo = h * head_dim;
        let ko = (h / group) * head_dim;
        let mut p = Matrix::zeros(seq, seq);
        for t in 0..seq {
            let qrow = &q.row(t)[qo..qo + head_dim];
            let mut max = f64::NEG_INFINITY;
            let mut scores = vec![0.0; t + 1];
            for (u, sc) in scores.iter_mut().enumerate() {
                let krow = &k.row(u)[ko..ko + head_dim];
                let dot: f64 = qrow.iter().zip(krow.iter()).map(|(a, b)| a * b).sum();
                *sc = dot * inv_sqrt;
                if *sc > max {
                    max = *sc;
                }
            }
            let mut denom = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                denom += *sc;
            }
            let prow = p.row_mut(t);
            for (u, sc) in scores.iter().enumerate() {
                prow[u] = sc / denom;
            }
            let crow = &mut ctx.row_mut(t)[qo..qo + head_dim];
            for (u, &w) in prow[..=t].iter().enumerate() {
                let vrow = &v.row(u)[ko..ko + head_dim];
                for (c, &vv) in crow.iter_mut().zip(vrow.iter()) {
                    *c += w * vv;
                }
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

fn attention_backward(
    dctx: &Matrix,
    probs: &[Matrix],
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    head_dim: usize,
) -> (Matrix, Matrix, Matrix) {
    let seq = q.rows();
    let n_kv = k.cols() / head_dim;
    let group = n_heads / n_kv;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Matrix::zeros(seq, q.cols());
    let mut dk = Matrix::zeros(seq, k.cols());
    let mut dv = Matrix::zeros(seq, v.cols());
    for h in 0..n_heads {
        let qo = h * head_dim;
        let ko = (h / group) * head_dim;
        let p = &probs[h];
        for t in 0..seq {
            let dcrow = &dctx.row(t)[qo..qo + head_dim];
            let prow = p.row(t);
            // dP and dV
            let mut dp = vec![0.0; t + 1];
            for u in 0..=t {
                let vrow = &v.row(u)[ko..ko + head_dim];
                dp[u] = dcrow.iter().zip(vrow.iter()).map(|(a, b)| a * b).sum();
                let dvrow = &mut dv.row_mut(u)[ko..ko + head_dim];
                for (dvv, &dc) in dvrow.iter_mut().zip(dcrow.iter()) {
                    *dvv += prow[u] * dc;
                }
            }
            // softmax backward
            let dot: f64 = dp.iter().enumerate().map(|(u, d)| d * prow[u]).sum();
            for (u, d) in dp.iter_mut().enumerate() {
                *d = prow[u] * (*d - dot);
            }
            // dq, dk
            let qrow: Vec<f64> = q.row(t)[qo..qo + head_dim].to_vec();
            let dqrow = &mut dq.row_mut(t)[qo..qo + head_dim];
            for (u, &ds) in dp.iter().enumerate() {
                let krow = &k.row(u)[ko..ko + head_dim];
                for i in 0..head_dim {
                    dqrow[i] += ds * krow[i] * inv_sqrt;
                }
                let dkrow = &mut dk.row_mut(u)[ko..ko + head_dim];
                for i in 0..head_dim {
                    dkrow[i] += ds * qrow[i] * inv_sqrt;
                }
            }
        }
    }
    (dq, dk, dv)
}

struct Projected {
    out: Matrix,
    trace: Option<AdapterTrace>,
}

fn project(
    input: &Matrix,
    w: &Matrix,
    adapter: Option<(&AdapterPair, f64)>,
    dropout: Option<DropoutCtx<'_>>,
) -> Result<Projected> {
    let mut out = matmul(input, w)?;
    let trace = if let Some((pair, scaling)) = adapter {
        let (dropped_in, mask) = match dropout {
            Some((rng, p)) => {
                let keep = 1.0 / (1.0 - p);
                let mut mask = Matrix::zeros(input.rows(), input.cols());
                for f in mask.data_mut() {
                    *f = if rng.next_f64() < p { 0.0 } else { keep };
                }
                let mut dropped = input.clone();
                for (d, &f) in dropped.data_mut().iter_mut().zip(mask.data()) {
                    *d *= f;
                }
                (Some(dropped), Some(mask))
            }
            None => (None, None),
        };
        let eff = dropped_in.as_ref().unwrap_or(input);
        let xa = matmul(eff, &pair.a)?;
        let delta = matmul(&xa, &pair.b)?;
        out.add_scaled(&delta, scaling)?;
        Some(AdapterTrace { dropped_in, mask, xa })
    } else {
        None
    };
    Ok(Projected { out, trace })
}

/// Backward through a projection. Accumulates adapter gradients (when an
/// adapter is attached) into `grads[slot]` (A) and `grads[slot + 1]` (B),
/// and returns the gradient w.r.t. the projection input.
#[allow(clippy::too_many_arguments)]
fn project_backward(
    input: &Matrix,
    w: &Matrix,
    adapter: Option<(&AdapterPair, f64, &AdapterTrace, usize)>,
    dout: &Matrix,
    grads: &mut [Matrix],
) -> Result<Matrix> {
    let mut din = matmul(dout, &w.transpose())?;
    if let Some((pair, scaling, trace, slot)) = adapter {
        let mut db = matmul(&trace.xa.transpose(), dout)?;
        db.scale(scaling);
        grads[slot + 1].add_assign(&db)?;
        let mut dxa = matmul(dout, &pair.b.transpose())?;
        dxa.scale(scaling);
        let eff = trace.dropped_in.as_ref().unwrap_or(input);
        let da = matmul(&eff.transpose(), &dxa)?;
        grads[slot].add_assign(&da)?;
        let mut din_eff = matmul(&dxa, &pair.a.transpose())?;
        if let Some(mask) = &trace.mask {
            for (d, &f) in din_eff.data_mut().iter_mut().zip(mask.data()) {
                *d *= f;
            }
        }
        din.add_assign(&din_eff)?;
    }
    Ok(din)
}

pub(super) fn run_sequence(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    tokens: &[u32],
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<SeqCache> {
    let geo = weights.geometry();
    if tokens.is_empty() {
        return Err(Error::Input("sequence is empty".into()));
    }
    if tokens.len() > geo.max_seq {
        return Err(Error::Range {
            what: "sequence length".into(),
            detail: format!("{} exceeds max_seq {}", tokens.len(), geo.max_seq),
        });
    }
    let head_dim = geo.head_dim();
    let scaling = adapters.map(|a| a.config().scaling()).unwrap_or(0.0);
    let pair_for = |layer: usize, t: TargetModule| -> Option<(&AdapterPair, f64)> {
        adapters.and_then(|set| set.pair(layer, t)).map(|p| (p, scaling))
    };

    let mut x = embed(weights, tokens)?;
    let mut layers = Vec::with_capacity(geo.n_layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let x_in = x;
        let attn_normed = rmsnorm_rows(&x_in, &lw.attn_norm);
        let mut traces: [Option<AdapterTrace>; 4] = [None, None, None, None];

        let proj = |input: &Matrix,
                        w: &Matrix,
                        t: TargetModule,
                        dropout: &mut Option<DropoutCtx<'_>>|
         -> Result<(Matrix, Option<AdapterTrace>)> {
            let ad = pair_for(l, t);
            let dr = match (&ad, dropout) {
                (Some(_), Some((rng, p))) => Some((&mut **rng, *p)),
                _ => None,
            };
            let p = project(input, w, ad, dr)?;
            Ok((p.out, p.trace))
        };

        let (mut q, tq) = proj(&attn_normed, &lw.wq, TargetModule::Q, &mut dropout)?;
        let (mut k, tk) = proj(&attn_normed, &lw.wk, TargetModule::K, &mut dropout)?;
        let (v, tv) = proj(&attn_normed, &lw.wv, TargetModule::V, &mut dropout)?;
        rope_inplace(&mut q, head_dim, false);
        rope_inplace(&mut k, head_dim, false);
        let (ctx, probs) = attention_forward(&q, &k, &v, geo.n_heads, head_dim);
        let (attn_out, to) = proj(&ctx, &lw.wo, TargetModule::O, &mut dropout)?;
        traces[target_slot(TargetModule::Q)] = tq;
        traces[target_slot(TargetModule::K)] = tk;
        traces[target_slot(TargetModule::V)] = tv;
        traces[target_slot(TargetModule::O)] = to;

        let mut x_mid = x_in.clone();
        x_mid.add_assign(&attn_out)?;
        let ffn_normed = rmsnorm_rows(&x_mid, &lw.ffn_norm);
        let ffn_pre = matmul(&ffn_normed, &lw.ff_in)?;
        let ffn_out = matmul(&silu(&ffn_pre), &lw.ff_out)?;
        let mut x_next = x_mid.clone();
        x_next.add_assign(&ffn_out)?;

        layers.push(LayerTrace {
            x_in,
            attn_normed,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            ffn_pre,
            adapters: traces,
        });
        x = x_next;
    }
    let final_in = x;
    let final_normed = rmsnorm_rows(&final_in, &weights.final_norm);
    let logits = matmul(&final_normed, &weights.output_proj)?;
    Ok(SeqCache {
        layers,
        final_in,
        logits,
    })
}

/// Mean cross-entropy over the masked (completion) positions of one
/// sequence, plus the loss gradient w.r.t. the logits.
pub(super) fn masked_cross_entropy(
    cache: &SeqCache,
    tokens: &[u32],
    mask: &[bool],
) -> Result<(f64, Matrix)> {
    let logits = cache.logits();
    let vocab = logits.cols();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("loss mask is empty".into()));
    }
    let w = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), vocab);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        debug_assert!(i >= 1);
        let row = logits.row(i - 1);
        let target = tokens[i] as usize;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += w * (log_denom - row[target]);
        let drow = dlogits.row_mut(i - 1);
        for v in 0..vocab {
            let p = (row[v] - max).exp() / denom;
            drow[v] += w * (p - if v == target { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, dlogits))
}

/// Backpropagate `scale * dlogits` through the cached pass, accumulating
/// adapter gradients into `grads` (canonical flat order).
pub(super) fn backward_sequence(
    weights: &TransformerWeights,
    adapters: &AdapterSet,
    cache: &SeqCache,
    mut dlogits: Matrix,
    scale: f64,
    grads: &mut [Matrix],
) -> Result<()> {
    let geo = weights.geometry();
    let head_dim = geo.head_dim();
    let scaling = adapters.config().scaling();
    dlogits.scale(scale);

    let entry_slot = |layer: usize, t: TargetModule| -> Option<usize> {
        adapters
            .entries()
            .iter()
            .position(|(l, et, _)| *l == layer && *et == t)
            .map(|i| 2 * i)
    };

    let d_final_normed = matmul(&dlogits, &weights.output_proj.transpose())?;
    let mut dx = rmsnorm_backward(&cache.final_in, &weights.final_norm, &d_final_normed);

    for (l, lw) in weights.layers.iter().enumerate().rev() {
        let trace = &cache.layers[l];
        // feed-forward block
        let da = matmul(&dx, &lw.ff_out.transpose())?;
        let du = silu_backward(&trace.ffn_pre, &da);
        let dh2 = matmul(&du, &lw.ff_in.transpose())?;
        let mut dx_mid = dx.clone();
        dx_mid.add_assign(&rmsnorm_backward(&trace.x_mid, &lw.ffn_norm, &dh2))?;

        // attention block
        let back = |t: TargetModule,
                    input: &Matrix,
                    w: &Matrix,
                    dout: &Matrix,
                    grads: &mut [Matrix]|
         -> Result<Matrix> {
            let ad = adapters.pair(l, t).map(|pair| {
                let slot = entry_slot(l, t).expect("entry exists for attached pair");
                (pair, scaling, trace.adapters[target_slot(t)].as_ref().expect("trace exists"), slot)
            });
            project_backward(input, w, ad, dout, grads)
        };

        let dctx = back(TargetModule::O, &trace.ctx, &lw.wo, &dx_mid, grads)?;
        let (mut dq, mut dk, dv) = attention_backward(
            &dctx,
            &trace.probs,
            &trace.q,
            &trace.k,
            &trace.v,
            geo.n_heads,
            head_dim,
        );
        rope_inplace(&mut dq, head_dim, true);
        rope_inplace(&mut dk, head_dim, true);
        let mut dh1 = back(TargetModule::Q, &trace.attn_normed, &lw.wq, &dq, grads)?;
        dh1.add_assign(&back(TargetModule::K, &trace.attn_normed, &lw.wk, &dk, grads)?)?;
        dh1.add_assign(&back(TargetModule::V, &trace.attn_normed, &lw.wv, &dv, grads)?)?;

        let mut dx_in = dx_mid.clone();
        dx_in.add_assign(&rmsnorm_backward(&trace.x_in, &lw.attn_norm, &dh1))?;
        dx = dx_in;
    }
    Ok(())
}
