use rand::Rng as _;

use super::config::EncoderConfig;
use super::params::Layout;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{add_row_bias, dot, matmul, matmul_nt, matmul_tn_acc, sum_rows_acc, ParameterSet};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which positions get MLM logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogitPositions {
    All,
    Only(Vec<usize>),
    None,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub seed: u64,
    pub logits: LogitPositions,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, seed: 0, logits: LogitPositions::All }
    }

    pub fn train(seed: u64) -> Self {
        ForwardOptions { mode: Mode::Train, seed, logits: LogitPositions::All }
    }

    pub fn logits(mut self, logits: LogitPositions) -> Self {
        self.logits = logits;
        self
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities per head, `[n_heads, T, T]`, before dropout.
    probs: Vec<f64>,
    prob_drop: Option<Vec<f64>>,
    ctx: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    ffn_drop: Option<Vec<f64>>,
}

/// Everything a forward pass produced, including the intermediates needed
/// for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub seq_len: usize,
    /// `n_layers + 1` residual-stream states, each `[T, hidden]`; index 0 is
    /// the embedding output, index `i + 1` the output of block `i`.
    pub hidden: Vec<Vec<f64>>,
    /// Final-layernorm output `[T, hidden]`.
    pub final_hidden: Vec<f64>,
    pub logit_positions: Vec<usize>,
    /// `[logit_positions.len(), vocab]`.
    pub mlm_logits: Vec<f64>,
    pub valid: Vec<bool>,
    ids: Vec<u32>,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

impl ForwardTrace {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn logits_row(&self, row: usize, vocab: usize) -> &[f64] {
        &self.mlm_logits[row * vocab..(row + 1) * vocab]
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let h = gain.len();
    let t = x.len() / h;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    for r in 0..t {
        let row = &x[r * h..(r + 1) * h];
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..h {
            let xh = (row[c] - mean) * rs;
            xhat[r * h + c] = xh;
            out[r * h + c] = xh * gain[c] + bias[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Accumulates gain/bias grads and returns the input gradient.
fn layer_norm_backward(dy: &[f64], cache: &LnCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let h = gain.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; h];
    for (r, rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        for c in 0..h {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
        }
        let m1 = dxhat.iter().sum::<f64>() / h as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / h as f64;
        for c in 0..h {
            dx[r * h + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn dropout_mask(rng: &mut rng::Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    matmul(x, w, rows, inp, out, &mut y);
    add_row_bias(&mut y, b);
    y
}

fn check_finite(x: &[f64], what: &str, layer: Option<usize>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what}"), layer))
    }
}

/// Runs the encoder on one sequence. `attention_mask[j] == false` hides
/// position `j` as an attention key (padding).
pub fn forward(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    ids: &[u32],
    attention_mask: Option<&[bool]>,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let t = ids.len();
    if t == 0 {
        return Err(Error::validation("empty input sequence"));
    }
    if t > cfg.max_len {
        return Err(Error::validation(format!("sequence length {t} exceeds max_len {}", cfg.max_len)));
    }
    let valid: Vec<bool> = match attention_mask {
        Some(m) if m.len() != t => return Err(Error::validation("attention mask length differs from input")),
        Some(m) => m.to_vec(),
        None => vec![true; t],
    };
    if !valid.iter().any(|&v| v) {
        return Err(Error::validation("attention mask hides every position"));
    }
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::validation(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let lay = Layout::new(cfg);
    let (h, a, f, nh, d) = (cfg.hidden, cfg.attn_dim(), cfg.ffn_inner, cfg.n_heads, cfg.head_size);
    let dropping = opts.mode == Mode::Train && cfg.dropout > 0.0;
    let mut rng = rng::derived(opts.seed, &[stream::DROPOUT]);
    let mut maybe_mask = |n: usize| if dropping { Some(dropout_mask(&mut rng, n, cfg.dropout)) } else { None };

    let tok = params.data(lay.tokens);
    let pos = params.data(lay.positions);
    let mut x = vec![0.0; t * h];
    for (i, &id) in ids.iter().enumerate() {
        let e = &tok[id as usize * h..(id as usize + 1) * h];
        let p = &pos[i * h..(i + 1) * h];
        for c in 0..h {
            x[i * h + c] = e[c] + p[c];
        }
    }
    let emb_drop = maybe_mask(t * h);
    apply_mask(&mut x, &emb_drop);
    check_finite(&x, "embedding", None)?;

    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(x.clone());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let scale = 1.0 / (d as f64).sqrt();

    for (li, l) in lay.layers.iter().enumerate() {
        let (ln1_out, ln1) = layer_norm(&x, params.data(l.ln1_g), params.data(l.ln1_b));
        let q = linear(&ln1_out, params.data(l.wq), params.data(l.bq), t, h, a);
        let k = linear(&ln1_out, params.data(l.wk), params.data(l.bk), t, h, a);
        let v = linear(&ln1_out, params.data(l.wv), params.data(l.bv), t, h, a);
        let mut probs = vec![0.0; nh * t * t];
        for hd in 0..nh {
            for i in 0..t {
                let qi = &q[i * a + hd * d..i * a + (hd + 1) * d];
                let row = &mut probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    if valid[j] {
                        let s = dot(qi, &k[j * a + hd * d..j * a + (hd + 1) * d]) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0;
                for j in 0..t {
                    if valid[j] {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
        }
        let prob_drop = maybe_mask(nh * t * t);
        let mut ctx = vec![0.0; t * a];
        for hd in 0..nh {
            for i in 0..t {
                let base = (hd * t + i) * t;
                let out = &mut ctx[i * a + hd * d..i * a + (hd + 1) * d];
                for j in 0..t {
                    let mut p = probs[base + j];
                    if let Some(m) = &prob_drop {
                        p *= m[base + j];
                    }
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[j * a + hd * d..j * a + (hd + 1) * d];
                    for c in 0..d {
                        out[c] += p * vj[c];
                    }
                }
            }
        }
        let mut attn = linear(&ctx, params.data(l.wo), params.data(l.bo), t, a, h);
        let attn_drop = maybe_mask(t * h);
        apply_mask(&mut attn, &attn_drop);
        for (xv, av) in x.iter_mut().zip(&attn) {
            *xv += av;
        }

        let (ln2_out, ln2) = layer_norm(&x, params.data(l.ln2_g), params.data(l.ln2_b));
        let pre_act = linear(&ln2_out, params.data(l.w1), params.data(l.b1), t, h, f);
        let act: Vec<f64> = pre_act.iter().map(|&z| gelu(z)).collect();
        let mut ffn = linear(&act, params.data(l.w2), params.data(l.b2), t, f, h);
        let ffn_drop = maybe_mask(t * h);
        apply_mask(&mut ffn, &ffn_drop);
        for (xv, fv) in x.iter_mut().zip(&ffn) {
            *xv += fv;
        }
        check_finite(&x, "activation", Some(li))?;
        hidden.push(x.clone());
        layers.push(LayerCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            probs,
            prob_drop,
            ctx,
            attn_drop,
            ln2,
            ln2_out,
            pre_act,
            act,
            ffn_drop,
        });
    }

    let (final_hidden, final_ln) = layer_norm(&x, params.data(lay.final_g), params.data(lay.final_b));
    let logit_positions: Vec<usize> = match &opts.logits {
        LogitPositions::All => (0..t).collect(),
        LogitPositions::Only(p) => {
            if let Some(bad) = p.iter().find(|&&i| i >= t) {
                return Err(Error::validation(format!("logit position {bad} outside sequence of {t}")));
            }
            p.clone()
        }
        LogitPositions::None => Vec::new(),
    };
    let vsz = cfg.vocab_size;
    let mut mlm_logits = vec![0.0; logit_positions.len() * vsz];
    if !logit_positions.is_empty() {
        let rows: Vec<f64> = logit_positions.iter().flat_map(|&i| final_hidden[i * h..(i + 1) * h].iter().copied()).collect();
        matmul_nt(&rows, params.data(lay.mlm_weight()), logit_positions.len(), h, vsz, &mut mlm_logits);
        add_row_bias(&mut mlm_logits, params.data(lay.mlm_b));
        check_finite(&mlm_logits, "MLM logits", None)?;
    }

    Ok(ForwardTrace {
        seq_len: t,
        hidden,
        final_hidden,
        logit_positions,
        mlm_logits,
        valid,
        ids: ids.to_vec(),
        emb_drop,
        layers,
        final_ln,
    })
}

/// Gradients flowing into a trace from the losses.
#[derive(Debug, Default, Clone, Copy)]
pub struct Upstream<'a> {
    /// Aligned with `trace.logit_positions`, `[n, vocab]`.
    pub d_logits: Option<&'a [f64]>,
    /// Gradient on the final-layernorm output `[T, hidden]` (from heads).
    pub d_final: Option<&'a [f64]>,
    /// Extra gradients on residual-stream states, keyed by `trace.hidden` index.
    pub d_hidden: &'a [(usize, Vec<f64>)],
}

/// Backpropagates `up` through the encoder, accumulating into `grads`.
pub fn backward_into(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    trace: &ForwardTrace,
    up: &Upstream<'_>,
    grads: &mut ParameterSet,
) -> Result<()> {
    let lay = Layout::new(cfg);
    let t = trace.seq_len;
    let (h, a, f, nh, d, vsz) = (cfg.hidden, cfg.attn_dim(), cfg.ffn_inner, cfg.n_heads, cfg.head_size, cfg.vocab_size);
    let scale = 1.0 / (d as f64).sqrt();

    let mut d_final = match up.d_final {
        Some(g) => g.to_vec(),
        None => vec![0.0; t * h],
    };
    if let Some(dl) = up.d_logits {
        let n = trace.logit_positions.len();
        if dl.len() != n * vsz {
            return Err(Error::validation("logit gradient shape does not match trace"));
        }
        let rows: Vec<f64> = trace
            .logit_positions
            .iter()
            .flat_map(|&i| trace.final_hidden[i * h..(i + 1) * h].iter().copied())
            .collect();
        sum_rows_acc(dl, vsz, grads.data_mut(lay.mlm_b));
        matmul_tn_acc(dl, &rows, n, vsz, h, grads.data_mut(lay.mlm_weight()));
        let mut d_rows = vec![0.0; n * h];
        matmul(dl, params.data(lay.mlm_weight()), n, vsz, h, &mut d_rows);
        for (r, &i) in trace.logit_positions.iter().enumerate() {
            for c in 0..h {
                d_final[i * h + c] += d_rows[r * h + c];
            }
        }
    }

    let mut dx = {
        let (dg, db) = two_mut(grads, lay.final_g, lay.final_b);
        layer_norm_backward(&d_final, &trace.final_ln, params.data(lay.final_g), dg, db)
    };
    let add_extra = |dx: &mut Vec<f64>, idx: usize| {
        for (i, g) in up.d_hidden {
            if *i == idx {
                for (a, b) in dx.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    };
    add_extra(&mut dx, cfg.n_layers);

    for (li, l) in lay.layers.iter().enumerate().rev() {
        let c = &trace.layers[li];
        // x_out = x_mid + drop(W2 · gelu(W1 · LN2(x_mid)))
        let mut d_ffn = dx.clone();
        apply_mask(&mut d_ffn, &c.ffn_drop);
        sum_rows_acc(&d_ffn, h, grads.data_mut(l.b2));
        matmul_tn_acc(&c.act, &d_ffn, t, f, h, grads.data_mut(l.w2));
        let mut d_pre = vec![0.0; t * f];
        matmul_nt(&d_ffn, params.data(l.w2), t, h, f, &mut d_pre);
        for (g, &z) in d_pre.iter_mut().zip(&c.pre_act) {
            *g *= gelu_grad(z);
        }
        sum_rows_acc(&d_pre, f, grads.data_mut(l.b1));
        matmul_tn_acc(&c.ln2_out, &d_pre, t, h, f, grads.data_mut(l.w1));
        let mut d_ln2 = vec![0.0; t * h];
        matmul_nt(&d_pre, params.data(l.w1), t, f, h, &mut d_ln2);
        let d_mid = {
            let (dg, db) = two_mut(grads, l.ln2_g, l.ln2_b);
            layer_norm_backward(&d_ln2, &c.ln2, params.data(l.ln2_g), dg, db)
        };
        for (a, b) in dx.iter_mut().zip(&d_mid) {
            *a += b;
        }

        // x_mid = x_in + drop(Wo · Attn(LN1(x_in)))
        let mut d_attn = dx.clone();
        apply_mask(&mut d_attn, &c.attn_drop);
        sum_rows_acc(&d_attn, h, grads.data_mut(l.bo));
        matmul_tn_acc(&c.ctx, &d_attn, t, a, h, grads.data_mut(l.wo));
        let mut d_ctx = vec![0.0; t * a];
        matmul_nt(&d_attn, params.data(l.wo), t, h, a, &mut d_ctx);

        let mut dq = vec![0.0; t * a];
        let mut dk = vec![0.0; t * a];
        let mut dv = vec![0.0; t * a];
        let mut dp = vec![0.0; t];
        for hd in 0..nh {
            let sl = |i: usize| i * a + hd * d..i * a + (hd + 1) * d;
            for i in 0..t {
                let base = (hd * t + i) * t;
                let dci = &d_ctx[sl(i)];
                for j in 0..t {
                    let p = c.probs[base + j];
                    if p == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let keep = c.prob_drop.as_ref().map_or(1.0, |m| m[base + j]);
                    dp[j] = dot(dci, &c.v[sl(j)]) * keep;
                    let pd = p * keep;
                    if pd != 0.0 {
                        let dvj = &mut dv[sl(j)];
                        for (g, x) in dvj.iter_mut().zip(dci) {
                            *g += pd * x;
                        }
                    }
                }
                let inner: f64 = (0..t).map(|j| c.probs[base + j] * dp[j]).sum();
                for j in 0..t {
                    let p = c.probs[base + j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dp[j] - inner) * scale;
                    for e in 0..d {
                        dq[i * a + hd * d + e] += ds * c.k[j * a + hd * d + e];
                        dk[j * a + hd * d + e] += ds * c.q[i * a + hd * d + e];
                    }
                }
            }
        }
        let mut d_ln1 = vec![0.0; t * h];
        let mut tmp = vec![0.0; t * h];
        for (dm, w, b) in [(&dq, l.wq, l.bq), (&dk, l.wk, l.bk), (&dv, l.wv, l.bv)] {
            sum_rows_acc(dm, a, grads.data_mut(b));
            matmul_tn_acc(&c.ln1_out, dm, t, h, a, grads.data_mut(w));
            matmul_nt(dm, params.data(w), t, a, h, &mut tmp);
            for (x, y) in d_ln1.iter_mut().zip(&tmp) {
                *x += y;
            }
        }
        let d_in = {
            let (dg, db) = two_mut(grads, l.ln1_g, l.ln1_b);
            layer_norm_backward(&d_ln1, &c.ln1, params.data(l.ln1_g), dg, db)
        };
        for (a, b) in dx.iter_mut().zip(&d_in) {
            *a += b;
        }
        add_extra(&mut dx, li);
    }

    apply_mask(&mut dx, &trace.emb_drop);
    {
        let dtok = grads.data_mut(lay.tokens);
        for (i, &id) in trace.ids.iter().enumerate() {
            let row = &mut dtok[id as usize * h..(id as usize + 1) * h];
            for c in 0..h {
                row[c] += dx[i * h + c];
            }
        }
    }
    {
        let dpos = grads.data_mut(lay.positions);
        for i in 0..t {
            for c in 0..h {
                dpos[i * h + c] += dx[i * h + c];
            }
        }
    }
    Ok(())
}

/// Fresh-gradient convenience wrapper around [`backward_into`].
pub fn backward(params: &ParameterSet, cfg: &EncoderConfig, trace: &ForwardTrace, up: &Upstream<'_>) -> Result<ParameterSet> {
    let mut g = params.zeros_like();
    backward_into(params, cfg, trace, up, &mut g)?;
    if !g.all_finite() {
        return Err(Error::numeric("non-finite gradient", None));
    }
    Ok(g)
}

/// Two distinct mutable tensor slices from one parameter set.
pub(crate) fn two_mut(p: &mut ParameterSet, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert!(i < j, "two_mut expects ascending indices");
    let (lo, hi) = p.tensors_mut().split_at_mut(j);
    (&mut lo[i].data, &mut hi[0].data)
}
