//! Pre-layernorm transformer encoder in f64 with hand-written backward
//! passes, an MLM output layer and intent/slot classification heads.

mod checkpoint;
mod config;
mod gradcheck;
mod heads;
mod loss;
mod model;
mod params;

pub use checkpoint::{read_tensors, save_dir, write_tensors, EncoderCheckpoint, CONFIG, FINGERPRINT, MANIFEST, WEIGHTS};
pub use config::{EncoderConfig, HeadConfig, Pooling};
pub use gradcheck::gradient_check;
pub use heads::{classify, classify_backward, classify_trace, n_labels, HeadTrace, Task};
pub use loss::{cross_entropy_sum, mlm_loss, mlm_loss_sum, soft_cross_entropy_sum, IGNORE};
pub use model::{
    backward, backward_into, forward, gelu, gelu_grad, ForwardOptions, ForwardTrace, LogitPositions, Mode, Upstream, LN_EPS,
};
pub use params::{attach_heads, check_shapes, init_params, HeadIdx, LayerIdx, Layout, INIT_STD};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParameterSet;

    fn toy() -> (EncoderConfig, ParameterSet) {
        let cfg = EncoderConfig::toy(2, 16, 40);
        let p = init_params(&cfg, 11).unwrap();
        (cfg, p)
    }

    #[test]
    fn finite_difference_gradients() {
        let cfg = EncoderConfig::toy(2, 16, 40);
        let report = gradient_check(&cfg, 5, 1e-4, 6).unwrap();
        assert_eq!(report.len(), 2 + 2 * 16 + 3 + 12);
        for (name, err) in &report {
            assert!(*err < 1e-3, "{name}: relative error {err}");
        }
    }

    #[test]
    fn untied_output_gradients() {
        let mut cfg = EncoderConfig::toy(1, 8, 30);
        cfg.tie_embeddings = false;
        cfg.heads = Some(HeadConfig { width: 8, pooling: Pooling::First, ..HeadConfig::new(2, 3) });
        for (name, err) in gradient_check(&cfg, 2, 1e-4, 4).unwrap() {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn zeroed_sublayers_leave_layernormed_embeddings() {
        let (cfg, mut p) = toy();
        let lay = Layout::new(&cfg);
        for l in &lay.layers {
            for i in [l.wo, l.bo, l.w2, l.b2] {
                p.data_mut(i).fill(0.0);
            }
        }
        let ids = [5u32, 9, 2, 31];
        let tr = forward(&p, &cfg, &ids, None, &ForwardOptions::eval()).unwrap();
        let h = cfg.hidden;
        for (i, &id) in ids.iter().enumerate() {
            let x: Vec<f64> = (0..h)
                .map(|c| p.data(lay.tokens)[id as usize * h + c] + p.data(lay.positions)[i * h + c])
                .collect();
            let mean = x.iter().sum::<f64>() / h as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..h {
                let expect = (x[c] - mean) * rstd;
                assert_eq!(tr.final_hidden[i * h + c], expect);
            }
        }
    }

    #[test]
    fn eval_mode_is_repeatable_and_train_mode_seeded() {
        let (cfg, p) = toy();
        let ids = [6u32, 7, 8, 9, 10];
        let a = forward(&p, &cfg, &ids, None, &ForwardOptions::eval()).unwrap();
        let b = forward(&p, &cfg, &ids, None, &ForwardOptions::eval()).unwrap();
        assert_eq!(a.mlm_logits, b.mlm_logits);
        let t1 = forward(&p, &cfg, &ids, None, &ForwardOptions::train(3)).unwrap();
        let t2 = forward(&p, &cfg, &ids, None, &ForwardOptions::train(3)).unwrap();
        let t3 = forward(&p, &cfg, &ids, None, &ForwardOptions::train(4)).unwrap();
        assert_eq!(t1.mlm_logits, t2.mlm_logits);
        assert_ne!(t1.mlm_logits, t3.mlm_logits);
        assert_ne!(t1.mlm_logits, a.mlm_logits);
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let (cfg, p) = toy();
        let ids = [6u32, 12, 8, 30];
        let base = forward(&p, &cfg, &ids, None, &ForwardOptions::eval()).unwrap();
        for pad in [1usize, 5] {
            let mut padded = ids.to_vec();
            padded.extend(std::iter::repeat_n(crate::tokenizer::PAD, pad));
            let mask: Vec<bool> = (0..padded.len()).map(|i| i < ids.len()).collect();
            let tr = forward(&p, &cfg, &padded, Some(&mask), &ForwardOptions::eval()).unwrap();
            let v = cfg.vocab_size;
            for (a, b) in base.mlm_logits.iter().zip(&tr.mlm_logits[..ids.len() * v]) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hidden_state_count_and_shapes() {
        let (cfg, p) = toy();
        let tr = forward(&p, &cfg, &[5, 6, 7], None, &ForwardOptions::eval()).unwrap();
        assert_eq!(tr.hidden.len(), cfg.n_layers + 1);
        assert!(tr.hidden.iter().all(|h| h.len() == 3 * cfg.hidden));
        assert_eq!(tr.mlm_logits.len(), 3 * cfg.vocab_size);
    }

    #[test]
    fn invalid_inputs() {
        let (cfg, p) = toy();
        let long = vec![5u32; cfg.max_len + 1];
        assert!(matches!(forward(&p, &cfg, &long, None, &ForwardOptions::eval()), Err(crate::Error::Validation(_))));
        assert!(forward(&p, &cfg, &[], None, &ForwardOptions::eval()).is_err());
        assert!(forward(&p, &cfg, &[400], None, &ForwardOptions::eval()).is_err());
    }

    #[test]
    fn non_finite_weights_report_the_layer() {
        let (cfg, mut p) = toy();
        let lay = Layout::new(&cfg);
        p.data_mut(lay.layers[1].b2)[0] = f64::INFINITY;
        match forward(&p, &cfg, &[5, 6], None, &ForwardOptions::eval()) {
            Err(crate::Error::NumericFault { layer, .. }) => assert_eq!(layer, Some(1)),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_v() {
        let (cfg, mut p) = toy();
        let lay = Layout::new(&cfg);
        p.data_mut(lay.final_g).fill(0.0);
        let tr = forward(&p, &cfg, &[5, 6, 7], None, &ForwardOptions::eval()).unwrap();
        let l = mlm_loss(&tr, &[7, IGNORE, 9], cfg.vocab_size).unwrap();
        assert!((l - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
        assert!(mlm_loss(&tr, &[IGNORE; 3], cfg.vocab_size).is_err());
    }

    #[test]
    fn unused_head_gets_zero_gradient_and_scaling_is_linear() {
        let cfg = EncoderConfig::toy(2, 16, 40).with_heads(HeadConfig { width: 8, ..HeadConfig::new(3, 4) });
        let p = init_params(&cfg, 1).unwrap();
        let tr = forward(&p, &cfg, &[5, 6, 7, 8], None, &ForwardOptions::train(2)).unwrap();
        let (_, _, d) = cross_entropy_sum(&tr.mlm_logits, &[6, -100, 9, -100], cfg.vocab_size).unwrap();
        let g = backward(&p, &cfg, &tr, &Upstream { d_logits: Some(&d), ..Default::default() }).unwrap();
        let lay = Layout::new(&cfg);
        for idx in [lay.slot.unwrap(), lay.intent.unwrap()] {
            for i in [idx.w1, idx.b1, idx.w2, idx.b2, idx.w3, idx.b3] {
                assert!(g.data(i).iter().all(|&v| v == 0.0));
            }
        }
        let d2: Vec<f64> = d.iter().map(|v| v * 2.0).collect();
        let g2 = backward(&p, &cfg, &tr, &Upstream { d_logits: Some(&d2), ..Default::default() }).unwrap();
        for (a, b) in g.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let cfg = EncoderConfig::toy(1, 8, 30).with_heads(HeadConfig::new(4, 6));
        let mut p = init_params(&cfg, 1).unwrap();
        let lay = Layout::new(&cfg);
        for idx in [lay.intent.unwrap(), lay.slot.unwrap()] {
            for i in [idx.w1, idx.b1, idx.w2, idx.b2, idx.w3, idx.b3] {
                p.data_mut(i).fill(0.0);
            }
        }
        let tr = forward(&p, &cfg, &[5, 6, 7], None, &ForwardOptions::eval()).unwrap();
        let il = classify(&p, &cfg, &tr, Task::Intent).unwrap();
        assert_eq!(il.len(), 4);
        let pr = crate::tensor::softmax(&il);
        assert!(pr.iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert_eq!(classify(&p, &cfg, &tr, Task::Slots).unwrap().len(), 3 * 6);
        let nohead = EncoderConfig::toy(1, 8, 30);
        assert!(matches!(classify(&p, &nohead, &tr, Task::Intent), Err(crate::Error::Config(_))));
    }

    #[test]
    fn slot_logits_permute_with_inputs_without_positions() {
        let cfg = EncoderConfig::toy(2, 16, 40).with_heads(HeadConfig { width: 8, ..HeadConfig::new(2, 3) });
        let mut p = init_params(&cfg, 4).unwrap();
        let lay = Layout::new(&cfg);
        p.data_mut(lay.positions).fill(0.0);
        let ids = [5u32, 17, 23, 9];
        let perm = [2usize, 0, 3, 1];
        let pids: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
        let a = forward(&p, &cfg, &ids, None, &ForwardOptions::eval()).unwrap();
        let b = forward(&p, &cfg, &pids, None, &ForwardOptions::eval()).unwrap();
        let la = classify(&p, &cfg, &a, Task::Slots).unwrap();
        let lb = classify(&p, &cfg, &b, Task::Slots).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((lb[new * 3 + c] - la[old * 3 + c]).abs() < 1e-12);
            }
        }
    }
}
