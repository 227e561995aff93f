use rand::Rng as _;

use super::config::{EncoderConfig, HeadConfig};
use super::heads::{classify_backward, classify_trace, Task};
use super::loss::{cross_entropy_sum, IGNORE};
use super::model::{backward, forward, ForwardOptions, Upstream};
use super::params::init_params;
use crate::error::Result;
use crate::rng;
use crate::tensor::ParameterSet;

/// One composite loss touching every tensor: MLM cross-entropy, intent and
/// slot cross-entropy, and a linear probe on the first block's output.
struct Probe {
    ids: Vec<u32>,
    labels: Vec<i64>,
    intent: i64,
    tags: Vec<i64>,
    hidden_weights: Vec<f64>,
    seed: u64,
}

fn loss_and_grad(p: &ParameterSet, cfg: &EncoderConfig, probe: &Probe, want_grad: bool) -> Result<(f64, Option<ParameterSet>)> {
    let opts = ForwardOptions::train(probe.seed);
    let tr = forward(p, cfg, &probe.ids, None, &opts)?;
    let v = cfg.vocab_size;
    let (mlm, n, mut d_logits) = cross_entropy_sum(&tr.mlm_logits, &probe.labels, v)?;
    let hc = cfg.heads.as_ref().expect("heads");
    let it = classify_trace(p, cfg, &tr, Task::Intent)?;
    let st = classify_trace(p, cfg, &tr, Task::Slots)?;
    let (ic, _, d_ic) = cross_entropy_sum(&it.logits, &[probe.intent], hc.n_intents)?;
    let (sf, ns, mut d_sf) = cross_entropy_sum(&st.logits, &probe.tags, hc.n_slot_tags)?;
    let probe_term: f64 = tr.hidden[1].iter().zip(&probe.hidden_weights).map(|(a, b)| a * b).sum();
    let loss = mlm / n as f64 + ic + sf / ns as f64 + probe_term;
    if !want_grad {
        return Ok((loss, None));
    }
    d_logits.iter_mut().for_each(|g| *g /= n as f64);
    d_sf.iter_mut().for_each(|g| *g /= ns as f64);
    let mut head_grads = p.zeros_like();
    let mut d_final = classify_backward(p, cfg, &tr, &it, Task::Intent, &d_ic, &mut head_grads)?;
    let d2 = classify_backward(p, cfg, &tr, &st, Task::Slots, &d_sf, &mut head_grads)?;
    d_final.iter_mut().zip(&d2).for_each(|(a, b)| *a += b);
    let extra = [(1usize, probe.hidden_weights.clone())];
    let up = Upstream { d_logits: Some(&d_logits), d_final: Some(&d_final), d_hidden: &extra };
    let mut g = backward(p, cfg, &tr, &up)?;
    g.add_assign(&head_grads);
    Ok((loss, Some(g)))
}

/// Per-tensor maximum relative error between analytic gradients and central
/// finite differences with the given step. At most `per_tensor` entries are
/// checked per tensor (the largest-gradient entry plus a seeded sample).
pub fn gradient_check(cfg: &EncoderConfig, seed: u64, step: f64, per_tensor: usize) -> Result<Vec<(String, f64)>> {
    let cfg = if cfg.heads.is_some() { cfg.clone() } else { cfg.clone().with_heads(HeadConfig { width: 8, ..HeadConfig::new(3, 5) }) };
    let params = init_params(&cfg, seed)?;
    let mut r = rng::derived(seed, &[0xC4EC]);
    let t = 7.min(cfg.max_len);
    let v = cfg.vocab_size as u32;
    let hc = cfg.heads.clone().expect("heads");
    let probe = Probe {
        ids: (0..t).map(|_| r.random_range(0..v)).collect(),
        labels: (0..t).map(|i| if i % 2 == 0 { r.random_range(0..v) as i64 } else { IGNORE }).collect(),
        intent: r.random_range(0..hc.n_intents) as i64,
        tags: (0..t).map(|_| r.random_range(0..hc.n_slot_tags) as i64).collect(),
        hidden_weights: (0..t * cfg.hidden).map(|_| r.random_range(-0.1..0.1)).collect(),
        seed: seed ^ 0x5eed,
    };
    let (_, grads) = loss_and_grad(&params, &cfg, &probe, true)?;
    let grads = grads.expect("requested");
    let mut out = Vec::new();
    for ti in 0..params.len() {
        let g = grads.data(ti);
        let mut idxs = vec![(0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0)];
        while idxs.len() < per_tensor.min(g.len()) {
            let k = r.random_range(0..g.len());
            if !idxs.contains(&k) {
                idxs.push(k);
            }
        }
        let mut worst: f64 = 0.0;
        for k in idxs {
            let mut p = params.clone();
            let orig = p.data(ti)[k];
            p.data_mut(ti)[k] = orig + step;
            let (lp, _) = loss_and_grad(&p, &cfg, &probe, false)?;
            p.data_mut(ti)[k] = orig - step;
            let (lm, _) = loss_and_grad(&p, &cfg, &probe, false)?;
            let fd = (lp - lm) / (2.0 * step);
            let an = g[k];
            let denom = an.abs().max(fd.abs());
            // Both effectively zero: compare absolutely.
            let rel = if denom < 1e-7 { (an - fd).abs() } else { (an - fd).abs() / denom };
            worst = worst.max(rel);
        }
        out.push((params.names()[ti].clone(), worst));
    }
    Ok(out)
}
