use rand_distr::{Distribution, Normal};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{ParameterSet, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
}

/// Tensor indices into a [`ParameterSet`] built by [`init_params`]. The
/// layout is a pure function of the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tokens: usize,
    pub positions: usize,
    pub layers: Vec<LayerIdx>,
    pub final_g: usize,
    pub final_b: usize,
    /// `None` when tied to `tokens`.
    pub mlm_w: Option<usize>,
    pub mlm_b: usize,
    pub intent: Option<HeadIdx>,
    pub slot: Option<HeadIdx>,
    /// Number of tensors that belong to the encoder body (everything before
    /// the classification heads).
    pub encoder_len: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn specs(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, h, f, a) = (cfg.vocab_size, cfg.hidden, cfg.ffn_inner, cfg.attn_dim());
    let mut s = vec![
        ("embed.tokens".to_string(), vec![v, h], Init::Normal),
        ("embed.positions".to_string(), vec![cfg.max_len, h], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        s.extend([
            (p("ln1.gain"), vec![h], Init::Ones),
            (p("ln1.bias"), vec![h], Init::Zeros),
            (p("attn.wq"), vec![h, a], Init::Normal),
            (p("attn.bq"), vec![a], Init::Zeros),
            (p("attn.wk"), vec![h, a], Init::Normal),
            (p("attn.bk"), vec![a], Init::Zeros),
            (p("attn.wv"), vec![h, a], Init::Normal),
            (p("attn.bv"), vec![a], Init::Zeros),
            (p("attn.wo"), vec![a, h], Init::Normal),
            (p("attn.bo"), vec![h], Init::Zeros),
            (p("ln2.gain"), vec![h], Init::Ones),
            (p("ln2.bias"), vec![h], Init::Zeros),
            (p("ffn.w1"), vec![h, f], Init::Normal),
            (p("ffn.b1"), vec![f], Init::Zeros),
            (p("ffn.w2"), vec![f, h], Init::Normal),
            (p("ffn.b2"), vec![h], Init::Zeros),
        ]);
    }
    s.push(("final_ln.gain".into(), vec![h], Init::Ones));
    s.push(("final_ln.bias".into(), vec![h], Init::Zeros));
    if !cfg.tie_embeddings {
        s.push(("mlm.weight".into(), vec![v, h], Init::Normal));
    }
    s.push(("mlm.bias".into(), vec![v], Init::Zeros));
    if let Some(hc) = &cfg.heads {
        for (name, out) in [("intent", hc.n_intents), ("slot", hc.n_slot_tags)] {
            s.extend(head_specs(name, h, hc.width, out));
        }
    }
    s
}

fn head_specs(name: &str, h: usize, w: usize, out: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{name}.w1"), vec![h, w], Init::Normal),
        (format!("{name}.b1"), vec![w], Init::Zeros),
        (format!("{name}.w2"), vec![w, w], Init::Normal),
        (format!("{name}.b2"), vec![w], Init::Zeros),
        (format!("{name}.w3"), vec![w, out], Init::Normal),
        (format!("{name}.b3"), vec![out], Init::Zeros),
    ]
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut i = 0usize;
        let mut next = || {
            i += 1;
            i - 1
        };
        let tokens = next();
        let positions = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerIdx {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let final_g = next();
        let final_b = next();
        let mlm_w = if cfg.tie_embeddings { None } else { Some(next()) };
        let mlm_b = next();
        let encoder_len = mlm_b + 1;
        let mut head = || HeadIdx { w1: next(), b1: next(), w2: next(), b2: next(), w3: next(), b3: next() };
        let (intent, slot) = if cfg.heads.is_some() { (Some(head()), Some(head())) } else { (None, None) };
        Layout { tokens, positions, layers, final_g, final_b, mlm_w, mlm_b, intent, slot, encoder_len }
    }

    pub fn mlm_weight(&self) -> usize {
        self.mlm_w.unwrap_or(self.tokens)
    }
}

fn fill(specs: Vec<(String, Vec<usize>, Init)>, rng: &mut rng::Rng) -> Result<ParameterSet> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut p = ParameterSet::new();
    for (name, shape, init) in specs {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::filled(&shape, 1.0),
            Init::Normal => {
                let n = shape.iter().product();
                Tensor::from_vec(&shape, (0..n).map(|_| normal.sample(rng)).collect())?
            }
        };
        p.push(name, t)?;
    }
    Ok(p)
}

/// Weights ~ N(0, 0.02²), layernorm gains 1, all biases 0.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = rng::derived(seed, &[stream::INIT]);
    fill(specs(cfg), &mut rng)
}

/// Replaces (or adds) classification heads on an encoder parameter set.
/// The encoder tensors are carried over untouched.
pub fn attach_heads(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    heads: super::config::HeadConfig,
    seed: u64,
) -> Result<(ParameterSet, EncoderConfig)> {
    let old = Layout::new(cfg);
    if params.len() < old.encoder_len {
        return Err(Error::config("parameter set is smaller than the encoder layout"));
    }
    let new_cfg = cfg.clone().with_heads(heads.clone());
    new_cfg.validate()?;
    let mut body = params.clone();
    body.split_off(old.encoder_len);
    let mut rng = rng::derived(seed, &[stream::HEADS]);
    let h = new_cfg.hidden;
    let mut specs = head_specs("intent", h, heads.width, heads.n_intents);
    specs.extend(head_specs("slot", h, heads.width, heads.n_slot_tags));
    body.extend(fill(specs, &mut rng)?)?;
    check_shapes(&body, &new_cfg)?;
    Ok((body, new_cfg))
}

/// Verifies tensor names and shapes against the config layout.
pub fn check_shapes(params: &ParameterSet, cfg: &EncoderConfig) -> Result<()> {
    let specs = specs(cfg);
    if specs.len() != params.len() {
        return Err(Error::config(format!(
            "parameter set has {} tensors, config expects {}",
            params.len(),
            specs.len()
        )));
    }
    for ((name, shape, _), (pname, t)) in specs.iter().zip(params.iter()) {
        if name != pname || *shape != t.shape {
            return Err(Error::config(format!(
                "tensor {pname} {:?} does not match expected {name} {:?}",
                t.shape, shape
            )));
        }
    }
    Ok(())
}
