use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, HeadConfig, Pooling};
use super::model::{gelu, gelu_grad, ForwardTrace};
use super::params::{HeadIdx, Layout};
use crate::error::{Error, Result};
use crate::tensor::{add_row_bias, matmul, matmul_nt, matmul_tn_acc, sum_rows_acc, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Intent,
    Slots,
}

/// Intermediates of one head applied to `rows` input vectors.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub rows: usize,
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    /// `[rows, n_labels]`.
    pub logits: Vec<f64>,
}

fn head_config(cfg: &EncoderConfig) -> Result<&HeadConfig> {
    cfg.heads.as_ref().ok_or_else(|| Error::config("encoder config has no classification heads"))
}

fn head_idx(cfg: &EncoderConfig, task: Task) -> Result<HeadIdx> {
    let l = Layout::new(cfg);
    let idx = match task {
        Task::Intent => l.intent,
        Task::Slots => l.slot,
    };
    idx.ok_or_else(|| Error::config("encoder config has no classification heads"))
}

pub fn n_labels(cfg: &EncoderConfig, task: Task) -> Result<usize> {
    let hc = head_config(cfg)?;
    Ok(match task {
        Task::Intent => hc.n_intents,
        Task::Slots => hc.n_slot_tags,
    })
}

fn head_forward(p: &ParameterSet, idx: HeadIdx, input: Vec<f64>, rows: usize, h: usize, w: usize, out: usize) -> HeadTrace {
    let mut z1 = vec![0.0; rows * w];
    matmul(&input, p.data(idx.w1), rows, h, w, &mut z1);
    add_row_bias(&mut z1, p.data(idx.b1));
    let a1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
    let mut z2 = vec![0.0; rows * w];
    matmul(&a1, p.data(idx.w2), rows, w, w, &mut z2);
    add_row_bias(&mut z2, p.data(idx.b2));
    let a2: Vec<f64> = z2.iter().map(|&z| gelu(z)).collect();
    let mut logits = vec![0.0; rows * out];
    matmul(&a2, p.data(idx.w3), rows, w, out, &mut logits);
    add_row_bias(&mut logits, p.data(idx.b3));
    HeadTrace { rows, input, z1, a1, z2, a2, logits }
}

fn head_backward(
    p: &ParameterSet,
    idx: HeadIdx,
    tr: &HeadTrace,
    d_logits: &[f64],
    (h, w, out): (usize, usize, usize),
    grads: &mut ParameterSet,
) -> Vec<f64> {
    let r = tr.rows;
    sum_rows_acc(d_logits, out, grads.data_mut(idx.b3));
    matmul_tn_acc(&tr.a2, d_logits, r, w, out, grads.data_mut(idx.w3));
    let mut d = vec![0.0; r * w];
    matmul_nt(d_logits, p.data(idx.w3), r, out, w, &mut d);
    for (g, &z) in d.iter_mut().zip(&tr.z2) {
        *g *= gelu_grad(z);
    }
    sum_rows_acc(&d, w, grads.data_mut(idx.b2));
    matmul_tn_acc(&tr.a1, &d, r, w, w, grads.data_mut(idx.w2));
    let mut d1 = vec![0.0; r * w];
    matmul_nt(&d, p.data(idx.w2), r, w, w, &mut d1);
    for (g, &z) in d1.iter_mut().zip(&tr.z1) {
        *g *= gelu_grad(z);
    }
    sum_rows_acc(&d1, w, grads.data_mut(idx.b1));
    matmul_tn_acc(&tr.input, &d1, r, h, w, grads.data_mut(idx.w1));
    let mut d_in = vec![0.0; r * h];
    matmul_nt(&d1, p.data(idx.w1), r, w, h, &mut d_in);
    d_in
}

fn pool(trace: &ForwardTrace, h: usize, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::First => trace.final_hidden[..h].to_vec(),
        Pooling::Mean => {
            let n = trace.n_valid() as f64;
            let mut out = vec![0.0; h];
            for (i, _) in trace.valid.iter().enumerate().filter(|(_, v)| **v) {
                for c in 0..h {
                    out[c] += trace.final_hidden[i * h + c];
                }
            }
            out.iter_mut().for_each(|v| *v /= n);
            out
        }
    }
}

/// Applies the intent head (one row of pooled final states) or the slot
/// head (one row per position).
pub fn classify_trace(params: &ParameterSet, cfg: &EncoderConfig, trace: &ForwardTrace, task: Task) -> Result<HeadTrace> {
    let hc = head_config(cfg)?;
    let idx = head_idx(cfg, task)?;
    let out = n_labels(cfg, task)?;
    if params.tensor(idx.w3).shape != [hc.width, out] {
        return Err(Error::config("head weights do not match the label-set size"));
    }
    let h = cfg.hidden;
    let (input, rows) = match task {
        Task::Intent => (pool(trace, h, hc.pooling), 1),
        Task::Slots => (trace.final_hidden.clone(), trace.seq_len),
    };
    Ok(head_forward(params, idx, input, rows, h, hc.width, out))
}

/// Head logits: `[n_intents]` for intents, `[T, n_tags]` for slots.
pub fn classify(params: &ParameterSet, cfg: &EncoderConfig, trace: &ForwardTrace, task: Task) -> Result<Vec<f64>> {
    Ok(classify_trace(params, cfg, trace, task)?.logits)
}

/// Backpropagates head-logit gradients, accumulating head parameter grads,
/// and returns the gradient on `trace.final_hidden` (`[T, hidden]`).
pub fn classify_backward(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    trace: &ForwardTrace,
    head: &HeadTrace,
    task: Task,
    d_logits: &[f64],
    grads: &mut ParameterSet,
) -> Result<Vec<f64>> {
    let hc = head_config(cfg)?;
    let idx = head_idx(cfg, task)?;
    let out = n_labels(cfg, task)?;
    let h = cfg.hidden;
    let d_in = head_backward(params, idx, head, d_logits, (h, hc.width, out), grads);
    let t = trace.seq_len;
    Ok(match task {
        Task::Slots => d_in,
        Task::Intent => {
            let mut d = vec![0.0; t * h];
            match hc.pooling {
                Pooling::First => d[..h].copy_from_slice(&d_in),
                Pooling::Mean => {
                    let n = trace.n_valid() as f64;
                    for (i, _) in trace.valid.iter().enumerate().filter(|(_, v)| **v) {
                        for c in 0..h {
                            d[i * h + c] = d_in[c] / n;
                        }
                    }
                }
            }
            d
        }
    })
}
