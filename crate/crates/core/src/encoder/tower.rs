//! Forward and reverse passes of one encoder tower over one sequence.
//!
//! Layout per layer (post-norm):
//!
//! ```text
//! H1 = LN(H + Attn(H))
//! H2 = LN(H1 + W2 · gelu(W1 · H1))
//! ```
//!
//! Linear maps store weights as `[out, in]` and compute `y = x Wᵀ + b` on
//! row-major `[positions, features]` matrices.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{FrontIdx, LayerIdx, LinearIdx, NormIdx, Tensor, TowerIdx};
use super::real::Real;
use super::EncoderInput;

pub const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn linear<F: Real>(x: &ArrayView2<F>, params: &[Tensor<F>], idx: LinearIdx) -> Array2<F> {
    let mut y = x.dot(&params[idx.w].mat().t());
    y += &params[idx.b].vec();
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn linear_back<F: Real>(
    dy: &Array2<F>,
    x: &ArrayView2<F>,
    params: &[Tensor<F>],
    grads: &mut [Tensor<F>],
    idx: LinearIdx,
) -> Array2<F> {
    grads[idx.w].mat_mut().scaled_add(F::one(), &dy.t().dot(x));
    grads[idx.b].vec_mut().scaled_add(F::one(), &dy.sum_axis(Axis(0)));
    dy.dot(&params[idx.w].mat())
}

#[derive(Debug, Clone)]
struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, params: &[Tensor<F>], idx: NormIdx) -> (Array2<F>, NormCache<F>) {
    let d = F::lit(x.ncols() as f64);
    let eps = F::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *is = F::one() / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * &params[idx.g].vec();
    y += &params[idx.b].vec();
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_back<F: Real>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    params: &[Tensor<F>],
    grads: &mut [Tensor<F>],
    idx: NormIdx,
) -> Array2<F> {
    let d = F::lit(dy.ncols() as f64);
    grads[idx.g].vec_mut().scaled_add(F::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
    grads[idx.b].vec_mut().scaled_add(F::one(), &dy.sum_axis(Axis(0)));
    let dxhat = dy * &params[idx.g].vec();
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gv, &xv| *o = is * (gv - mean_g - xv * mean_gx));
    }
    dx
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    F::lit(0.5) * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax_rows<F: Real>(s: &mut Array2<F>) {
    for mut row in s.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

#[derive(Debug, Clone)]
struct HighwayCache<F> {
    input: Array2<F>,
    transform: Array2<F>,
    gate: Array2<F>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    /// Unfolded character windows, `[words * windows, width * char_dim]`.
    unfolded: Array2<F>,
    /// Max-pooled pre-activation, `[words, count]`.
    pooled: Array2<F>,
    /// Winning window per word and filter.
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
enum FrontCache<F> {
    Lookup,
    CharCnn {
        convs: Vec<ConvCache<F>>,
        highway: Vec<HighwayCache<F>>,
        features: Array2<F>,
    },
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Vec<Array2<F>>,
    ctx: Array2<F>,
    ln1: NormCache<F>,
    h1: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
    ln2: NormCache<F>,
}

/// Everything the reverse pass needs for one sequence.
#[derive(Debug, Clone)]
pub struct SeqCache<F> {
    front: FrontCache<F>,
    emb_ln: NormCache<F>,
    layers: Vec<LayerCache<F>>,
    seq_len: usize,
}

/// Context-independent word (or token) vectors before position embeddings.
pub fn front_end_forward<F: Real>(
    tower: &TowerIdx,
    params: &[Tensor<F>],
    input: &EncoderInput,
    d_model: usize,
) -> Array2<F> {
    front_end_with_cache(tower, params, input, d_model).0
}

fn front_end_with_cache<F: Real>(
    tower: &TowerIdx,
    params: &[Tensor<F>],
    input: &EncoderInput,
    d_model: usize,
) -> (Array2<F>, FrontCache<F>) {
    match (&tower.front, input) {
        (FrontIdx::Lookup { tokens }, EncoderInput::Tokens(ids)) => {
            let table = params[*tokens].mat();
            let mut x = Array2::zeros((ids.len(), d_model));
            for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
                row.assign(&table.row(id as usize));
            }
            (x, FrontCache::Lookup)
        }
        (
            FrontIdx::CharCnn {
                chars,
                convs,
                highway,
                proj,
            },
            EncoderInput::Chars(words),
        ) => {
            let table = params[*chars].mat();
            let dc = table.ncols();
            let n = words.len();
            let wlen = words.first().map_or(0, |w| w.len());
            let mut conv_caches = Vec::with_capacity(convs.len());
            let nf: usize = convs.iter().map(|c| c.count).sum();
            let mut features = Array2::zeros((n, nf));
            let mut col = 0;
            for conv in convs {
                let windows = wlen + 1 - conv.width;
                let mut unfolded = Array2::zeros((n * windows, conv.width * dc));
                for (wi, word) in words.iter().enumerate() {
                    for r in 0..windows {
                        let mut row = unfolded.row_mut(wi * windows + r);
                        for j in 0..conv.width {
                            row.slice_mut(s![j * dc..(j + 1) * dc])
                                .assign(&table.row(word[r + j] as usize));
                        }
                    }
                }
                let y = linear(&unfolded.view(), params, conv.lin);
                let mut pooled = Array2::zeros((n, conv.count));
                let mut argmax = vec![0; n * conv.count];
                for wi in 0..n {
                    for c in 0..conv.count {
                        let mut best = 0;
                        let mut best_v = y[[wi * windows, c]];
                        for r in 1..windows {
                            let v = y[[wi * windows + r, c]];
                            if v > best_v {
                                best_v = v;
                                best = r;
                            }
                        }
                        pooled[[wi, c]] = best_v;
                        argmax[wi * conv.count + c] = best;
                        features[[wi, col + c]] = best_v.max(F::zero());
                    }
                }
                col += conv.count;
                conv_caches.push(ConvCache {
                    unfolded,
                    pooled,
                    argmax,
                });
            }
            let mut hw_caches = Vec::with_capacity(highway.len());
            for hw in highway {
                let input = features;
                let transform = linear(&input.view(), params, hw.transform).mapv(|v| v.max(F::zero()));
                let gate = linear(&input.view(), params, hw.gate).mapv(sigmoid);
                let mut out = &gate * &transform;
                Zip::from(&mut out)
                    .and(&gate)
                    .and(&input)
                    .for_each(|o, &g, &x| *o += (F::one() - g) * x);
                features = out;
                hw_caches.push(HighwayCache {
                    input,
                    transform,
                    gate,
                });
            }
            let x = linear(&features.view(), params, *proj);
            (
                x,
                FrontCache::CharCnn {
                    convs: conv_caches,
                    highway: hw_caches,
                    features,
                },
            )
        }
        _ => panic!("encoder input does not match the tower's front-end"),
    }
}

fn front_end_back<F: Real>(
    dx: &Array2<F>,
    tower: &TowerIdx,
    input: &EncoderInput,
    cache: &FrontCache<F>,
    params: &[Tensor<F>],
    grads: &mut [Tensor<F>],
) {
    match (&tower.front, input, cache) {
        (FrontIdx::Lookup { tokens }, EncoderInput::Tokens(ids), FrontCache::Lookup) => {
            let mut g = grads[*tokens].mat_mut();
            for (row, &id) in dx.rows().into_iter().zip(ids) {
                g.row_mut(id as usize).scaled_add(F::one(), &row);
            }
        }
        (
            FrontIdx::CharCnn {
                chars,
                convs,
                highway,
                proj,
            },
            EncoderInput::Chars(words),
            FrontCache::CharCnn {
                convs: conv_caches,
                highway: hw_caches,
                features,
            },
        ) => {
            let mut dfeat = linear_back(dx, &features.view(), params, grads, *proj);
            for (hw, hc) in highway.iter().zip(hw_caches).rev() {
                let mut dgate = Array2::zeros(dfeat.raw_dim());
                let mut dtrans = Array2::zeros(dfeat.raw_dim());
                let mut dinput = Array2::zeros(dfeat.raw_dim());
                for (idx, &dy) in dfeat.indexed_iter() {
                    let (g, t, x) = (hc.gate[idx], hc.transform[idx], hc.input[idx]);
                    dgate[idx] = dy * (t - x) * g * (F::one() - g);
                    dtrans[idx] = if t > F::zero() { dy * g } else { F::zero() };
                    dinput[idx] = dy * (F::one() - g);
                }
                dinput += &linear_back(&dgate, &hc.input.view(), params, grads, hw.gate);
                dinput += &linear_back(&dtrans, &hc.input.view(), params, grads, hw.transform);
                dfeat = dinput;
            }
            let dc = params[*chars].shape[1];
            let wlen = words.first().map_or(0, |w| w.len());
            let mut col = 0;
            for (conv, cc) in convs.iter().zip(conv_caches) {
                let windows = wlen + 1 - conv.width;
                let mut dy = Array2::zeros((words.len() * windows, conv.count));
                for wi in 0..words.len() {
                    for c in 0..conv.count {
                        if cc.pooled[[wi, c]] > F::zero() {
                            let r = cc.argmax[wi * conv.count + c];
                            dy[[wi * windows + r, c]] = dfeat[[wi, col + c]];
                        }
                    }
                }
                col += conv.count;
                let du = linear_back(&dy, &cc.unfolded.view(), params, grads, conv.lin);
                let mut gtable = grads[*chars].mat_mut();
                for (wi, word) in words.iter().enumerate() {
                    for r in 0..windows {
                        let row = du.row(wi * windows + r);
                        for j in 0..conv.width {
                            gtable
                                .row_mut(word[r + j] as usize)
                                .scaled_add(F::one(), &row.slice(s![j * dc..(j + 1) * dc]));
                        }
                    }
                }
            }
        }
        _ => panic!("encoder input does not match the tower's front-end"),
    }
}

fn head_cols(h: usize, dh: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * dh..(h + 1) * dh]
}

fn layer_forward<F: Real>(
    h: Array2<F>,
    layer: &LayerIdx,
    params: &[Tensor<F>],
    n_heads: usize,
) -> (Array2<F>, LayerCache<F>) {
    let hv = h.view();
    let q = linear(&hv, params, layer.q);
    let k = linear(&hv, params, layer.k);
    let v = linear(&hv, params, layer.v);
    let d = h.ncols();
    let dh = d / n_heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut ctx = Array2::zeros(h.raw_dim());
    let mut attn = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let cols = head_cols(head, dh);
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attn.push(scores);
    }
    let mut r1 = linear(&ctx.view(), params, layer.o);
    r1 += &h;
    let (h1, ln1) = layer_norm(&r1, params, layer.ln1);
    let ff_pre = linear(&h1.view(), params, layer.ff1);
    let ff_act = ff_pre.mapv(gelu);
    let mut r2 = linear(&ff_act.view(), params, layer.ff2);
    r2 += &h1;
    let (h2, ln2) = layer_norm(&r2, params, layer.ln2);
    (
        h2,
        LayerCache {
            input: h,
            q,
            k,
            v,
            attn,
            ctx,
            ln1,
            h1,
            ff_pre,
            ff_act,
            ln2,
        },
    )
}

fn layer_back<F: Real>(
    dh2: &Array2<F>,
    layer: &LayerIdx,
    c: &LayerCache<F>,
    params: &[Tensor<F>],
    grads: &mut [Tensor<F>],
    n_heads: usize,
) -> Array2<F> {
    let dr2 = layer_norm_back(dh2, &c.ln2, params, grads, layer.ln2);
    let mut dact = linear_back(&dr2, &c.ff_act.view(), params, grads, layer.ff2);
    Zip::from(&mut dact).and(&c.ff_pre).for_each(|g, &x| *g *= gelu_grad(x));
    let mut dh1 = linear_back(&dact, &c.h1.view(), params, grads, layer.ff1);
    dh1 += &dr2;
    let dr1 = layer_norm_back(&dh1, &c.ln1, params, grads, layer.ln1);
    let dctx = linear_back(&dr1, &c.ctx.view(), params, grads, layer.o);

    let d = c.input.ncols();
    let dh = d / n_heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for head in 0..n_heads {
        let cols = head_cols(head, dh);
        let a = &c.attn[head];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let mut ds = Array2::zeros(a.raw_dim());
        for ((mut out, arow), darow) in ds.rows_mut().into_iter().zip(a.rows()).zip(da.rows()) {
            let dot: F = arow.iter().zip(darow.iter()).map(|(&x, &y)| x * y).sum();
            Zip::from(&mut out)
                .and(&arow)
                .and(&darow)
                .for_each(|o, &p, &g| *o = p * (g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let input = c.input.view();
    let mut dinput = dr1;
    dinput += &linear_back(&dq, &input, params, grads, layer.q);
    dinput += &linear_back(&dk, &input, params, grads, layer.k);
    dinput += &linear_back(&dv, &input, params, grads, layer.v);
    dinput
}

/// Front-end rows plus position embeddings.
pub fn embed_with_positions<F: Real>(
    tower: &TowerIdx,
    params: &[Tensor<F>],
    input: &EncoderInput,
    d_model: usize,
) -> Array2<F> {
    let mut x = front_end_forward(tower, params, input, d_model);
    let n = x.nrows();
    x += &params[tower.pos].mat().slice(s![0..n, ..]);
    x
}

/// Full forward pass; returns the output at the first (CLS) position and,
/// when requested, the cache for [`backward`].
pub fn forward<F: Real>(
    tower: &TowerIdx,
    params: &[Tensor<F>],
    input: &EncoderInput,
    d_model: usize,
    n_heads: usize,
    keep_cache: bool,
) -> (Vec<F>, Option<SeqCache<F>>) {
    let (mut x, front) = front_end_with_cache(tower, params, input, d_model);
    let n = x.nrows();
    x += &params[tower.pos].mat().slice(s![0..n, ..]);
    let (mut h, emb_ln) = layer_norm(&x, params, tower.emb_ln);
    let mut layers = Vec::with_capacity(tower.layers.len());
    for layer in &tower.layers {
        let (out, cache) = layer_forward(h, layer, params, n_heads);
        h = out;
        if keep_cache {
            layers.push(cache);
        }
    }
    let cls = h.row(0).to_vec();
    let cache = keep_cache.then_some(SeqCache {
        front,
        emb_ln,
        layers,
        seq_len: n,
    });
    (cls, cache)
}

/// Reverse pass for an upstream gradient on the CLS output.
pub fn backward<F: Real>(
    d_cls: ArrayView1<F>,
    tower: &TowerIdx,
    params: &[Tensor<F>],
    grads: &mut [Tensor<F>],
    input: &EncoderInput,
    cache: &SeqCache<F>,
    n_heads: usize,
) {
    let d = d_cls.len();
    let mut dh = Array2::zeros((cache.seq_len, d));
    dh.row_mut(0).assign(&d_cls);
    for (layer, lc) in tower.layers.iter().zip(&cache.layers).rev() {
        dh = layer_back(&dh, layer, lc, params, grads, n_heads);
    }
    let dx = layer_norm_back(&dh, &cache.emb_ln, params, grads, tower.emb_ln);
    grads[tower.pos]
        .mat_mut()
        .slice_mut(s![0..cache.seq_len, ..])
        .scaled_add(F::one(), &dx);
    front_end_back(&dx, tower, input, &cache.front, params, grads);
}
