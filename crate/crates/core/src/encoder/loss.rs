use super::model::ForwardTrace;
use crate::error::{Error, Result};
use crate::tensor::log_softmax;

/// Label value for positions that carry no supervision.
pub const IGNORE: i64 = -100;

/// Summed cross-entropy over rows with a label and the gradient of that sum
/// w.r.t. the logits. Rows with `IGNORE` get zero gradient.
pub fn cross_entropy_sum(logits: &[f64], labels: &[i64], n_classes: usize) -> Result<(f64, usize, Vec<f64>)> {
    if logits.len() != labels.len() * n_classes {
        return Err(Error::validation("logit and label shapes disagree"));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; logits.len()];
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y < 0 || y as usize >= n_classes {
            return Err(Error::validation(format!("label {y} outside {n_classes} classes")));
        }
        let row = &logits[r * n_classes..(r + 1) * n_classes];
        let lp = log_softmax(row);
        total -= lp[y as usize];
        count += 1;
        let g = &mut grad[r * n_classes..(r + 1) * n_classes];
        for (gv, l) in g.iter_mut().zip(&lp) {
            *gv = l.exp();
        }
        g[y as usize] -= 1.0;
    }
    Ok((total, count, grad))
}

/// Summed soft cross-entropy `-Σ softmax(t/T)·log_softmax(s/T)` over the
/// given rows, with its gradient w.r.t. the student logits.
pub fn soft_cross_entropy_sum(
    student: &[f64],
    teacher: &[f64],
    n_classes: usize,
    temperature: f64,
    rows: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() || student.len() % n_classes != 0 {
        return Err(Error::validation("student and teacher logits differ in shape"));
    }
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature must be positive"));
    }
    let n_rows = student.len() / n_classes;
    let mut total = 0.0;
    let mut grad = vec![0.0; student.len()];
    for &r in rows {
        if r >= n_rows {
            return Err(Error::validation(format!("row {r} outside {n_rows} logit rows")));
        }
        let s: Vec<f64> = student[r * n_classes..(r + 1) * n_classes].iter().map(|v| v / temperature).collect();
        let t: Vec<f64> = teacher[r * n_classes..(r + 1) * n_classes].iter().map(|v| v / temperature).collect();
        let ls = log_softmax(&s);
        let pt: Vec<f64> = log_softmax(&t).into_iter().map(f64::exp).collect();
        total -= pt.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>();
        let g = &mut grad[r * n_classes..(r + 1) * n_classes];
        for c in 0..n_classes {
            g[c] = (ls[c].exp() - pt[c]) / temperature;
        }
    }
    Ok((total, grad))
}

/// Mean cross-entropy of the trace's MLM logits over labeled positions.
/// `labels` is indexed by sequence position.
pub fn mlm_loss(trace: &ForwardTrace, labels: &[i64], vocab: usize) -> Result<f64> {
    let (sum, count, _) = mlm_loss_sum(trace, labels, vocab)?;
    if count == 0 {
        return Err(Error::validation("MLM loss needs at least one labeled position"));
    }
    Ok(sum / count as f64)
}

/// Summed MLM cross-entropy, label count, and the gradient of the sum
/// aligned with `trace.logit_positions`.
pub fn mlm_loss_sum(trace: &ForwardTrace, labels: &[i64], vocab: usize) -> Result<(f64, usize, Vec<f64>)> {
    if labels.len() != trace.seq_len {
        return Err(Error::validation("label length differs from sequence length"));
    }
    let row_labels: Vec<i64> = trace.logit_positions.iter().map(|&i| labels[i]).collect();
    let labeled = labels.iter().filter(|&&y| y != IGNORE).count();
    let covered = row_labels.iter().filter(|&&y| y != IGNORE).count();
    if covered != labeled {
        return Err(Error::validation("a labeled position has no MLM logits in the trace"));
    }
    cross_entropy_sum(&trace.mlm_logits, &row_labels, vocab)
}
