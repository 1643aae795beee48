//! Pre-LayerNorm GPT block stack with a hand-written backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::layout::{Layout, TensorSpec};
use super::ModelConfig;
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    f_pre: Array2<f64>,
    f_act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    inputs: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

fn row(p: &[f64], t: TensorSpec) -> ArrayView1<'_, f64> {
    t.view1(p)
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(n);
    for (mut r, rs) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mu = r.sum() / d;
        r.mapv_inplace(|v| v - mu);
        let var = r.iter().map(|v| v * v).sum::<f64>() / d;
        *rs = 1.0 / (var + LN_EPS).sqrt();
        let k = *rs;
        r.mapv_inplace(|v| v * k);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dg and db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    grad: &mut [f64],
    g_spec: TensorSpec,
    b_spec: TensorSpec,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    {
        let mut dg = g_spec.view2_mut(grad);
        let mut dg = dg.row_mut(0);
        dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut db = b_spec.view2_mut(grad);
        let mut db = db.row_mut(0);
        db += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), &rs) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.rstd.iter())
    {
        let mean_dxh = dxh.sum() / d;
        let mean_dxh_xh = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut out).and(&dxh).and(&xh).for_each(|o, &a, &b| {
            *o = rs * (a - mean_dxh - b * mean_dxh_xh);
        });
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn linear(x: &Array2<f64>, p: &[f64], w: TensorSpec, b: TensorSpec) -> Array2<f64> {
    x.dot(&w.view2(p)) + &row(p, b)
}

/// Returns dx; accumulates dW and db.
fn linear_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    p: &[f64],
    grad: &mut [f64],
    w: TensorSpec,
    b: TensorSpec,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut w.view2_mut(grad));
    {
        let mut db = b.view2_mut(grad);
        let mut db = db.row_mut(0);
        db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w.view2(p).t())
}

fn softmax_rows_causal(s: &mut Array2<f64>) {
    for (i, mut r) in s.axis_iter_mut(Axis(0)).enumerate() {
        let max = r.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, v) in r.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        r.mapv_inplace(|v| v / sum);
    }
}

/// Runs the network on `inputs` and returns logits `[n, vocab]`. The cache
/// is only populated when `keep` is set.
pub(crate) fn forward(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    inputs: &[TokenId],
    keep: bool,
) -> (Array2<f64>, Option<ForwardCache>) {
    let n = inputs.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = layout.tok_emb.view2(p);
    let pos = layout.pos_emb.view2(p);
    let mut h = Array2::zeros((n, d));
    for (i, &t) in inputs.iter().enumerate() {
        let mut r = h.row_mut(i);
        r.assign(&tok.row(t as usize));
        r += &pos.row(i);
    }

    let mut layers = Vec::with_capacity(if keep { layout.blocks.len() } else { 0 });
    for bl in &layout.blocks {
        let (a, ln1) = layer_norm(&h, row(p, bl.ln1_g), row(p, bl.ln1_b));
        let qkv = linear(&a, p, bl.w_qkv, bl.b_qkv);
        let mut att = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(nh);
        for hd in 0..nh {
            let q = qkv.slice(s![.., hd * dh..(hd + 1) * dh]);
            let k = qkv.slice(s![.., d + hd * dh..d + (hd + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
            let mut sc = q.dot(&k.t());
            sc.mapv_inplace(|x| x * scale);
            softmax_rows_causal(&mut sc);
            general_mat_mul(1.0, &sc, &v, 0.0, &mut att.slice_mut(s![.., hd * dh..(hd + 1) * dh]));
            if keep {
                probs.push(sc);
            }
        }
        let attn_out = linear(&att, p, bl.w_o, bl.b_o);
        h += &attn_out;

        let (m, ln2) = layer_norm(&h, row(p, bl.ln2_g), row(p, bl.ln2_b));
        let f_pre = linear(&m, p, bl.w_fc, bl.b_fc);
        let f_act = f_pre.mapv(gelu);
        let mlp_out = linear(&f_act, p, bl.w_proj, bl.b_proj);
        h += &mlp_out;

        if keep {
            layers.push(LayerCache { ln1, a, qkv, probs, att, ln2, m, f_pre, f_act });
        }
    }

    let (hf, lnf) = layer_norm(&h, row(p, layout.lnf_g), row(p, layout.lnf_b));
    let logits = hf.dot(&layout.output().view2(p).t());
    let cache = keep.then(|| ForwardCache { inputs: inputs.to_vec(), layers, lnf, hf });
    (logits, cache)
}

/// Backpropagates `dlogits` through a cached forward pass, accumulating into
/// `grad` (same layout as the parameters).
pub(crate) fn backward(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    grad: &mut [f64],
) {
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let out = layout.output();

    // logits = hf · Wout^T
    general_mat_mul(1.0, &dlogits.t(), &cache.hf, 1.0, &mut out.view2_mut(grad));
    let dhf = dlogits.dot(&out.view2(p));
    let mut dh_res = layer_norm_backward(&dhf, &cache.lnf, row(p, layout.lnf_g), grad, layout.lnf_g, layout.lnf_b);

    for (bl, lc) in layout.blocks.iter().zip(cache.layers.iter()).rev() {
        // MLP branch
        let df_act = linear_backward(&lc.f_act, &dh_res, p, grad, bl.w_proj, bl.b_proj);
        let mut df_pre = df_act;
        Zip::from(&mut df_pre).and(&lc.f_pre).for_each(|g, &x| *g *= gelu_grad(x));
        let dm = linear_backward(&lc.m, &df_pre, p, grad, bl.w_fc, bl.b_fc);
        dh_res += &layer_norm_backward(&dm, &lc.ln2, row(p, bl.ln2_g), grad, bl.ln2_g, bl.ln2_b);

        // attention branch
        let datt = linear_backward(&lc.att, &dh_res, p, grad, bl.w_o, bl.b_o);
        let n = datt.nrows();
        let mut dqkv = Array2::zeros((n, 3 * d));
        for (hd, pr) in lc.probs.iter().enumerate() {
            let q = lc.qkv.slice(s![.., hd * dh..(hd + 1) * dh]);
            let k = lc.qkv.slice(s![.., d + hd * dh..d + (hd + 1) * dh]);
            let v = lc.qkv.slice(s![.., 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
            let dout = datt.slice(s![.., hd * dh..(hd + 1) * dh]);
            let mut dp = dout.dot(&v.t());
            general_mat_mul(1.0, &pr.t(), &dout, 0.0, &mut dqkv.slice_mut(s![.., 2 * d + hd * dh..2 * d + (hd + 1) * dh]));
            for (mut dr, pr_row) in dp.axis_iter_mut(Axis(0)).zip(pr.axis_iter(Axis(0))) {
                let dot: f64 = dr.iter().zip(pr_row.iter()).map(|(a, b)| a * b).sum();
                Zip::from(&mut dr).and(&pr_row).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            general_mat_mul(1.0, &dp, &k, 0.0, &mut dqkv.slice_mut(s![.., hd * dh..(hd + 1) * dh]));
            general_mat_mul(1.0, &dp.t(), &q, 0.0, &mut dqkv.slice_mut(s![.., d + hd * dh..d + (hd + 1) * dh]));
        }
        let da = linear_backward(&lc.a, &dqkv, p, grad, bl.w_qkv, bl.b_qkv);
        dh_res += &layer_norm_backward(&da, &lc.ln1, row(p, bl.ln1_g), grad, bl.ln1_g, bl.ln1_b);
    }

    let mut dtok = layout.tok_emb.view2_mut(grad);
    for (i, &t) in cache.inputs.iter().enumerate() {
        let mut r = dtok.row_mut(t as usize);
        r += &dh_res.row(i);
    }
    let mut dpos = layout.pos_emb.view2_mut(grad);
    dpos.slice_mut(s![..cache.inputs.len(), ..]).scaled_add(1.0, &dh_res);
}
