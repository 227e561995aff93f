use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, Normal};

use crate::encoder::{soft_cross_entropy_sum, ForwardTrace, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, ParameterSet, Tensor};

/// Mean over `positions` of `-Σ softmax(teacher/T) · log_softmax(student/T)`.
pub fn soft_cross_entropy(
    student: &[f64],
    teacher: &[f64],
    n_classes: usize,
    temperature: f64,
    positions: &[usize],
) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::validation("soft cross-entropy needs at least one position"));
    }
    let (sum, _) = soft_cross_entropy_sum(student, teacher, n_classes, temperature, positions)?;
    Ok(sum / positions.len() as f64)
}

fn one() -> f64 {
    1.0
}

/// Student block `s` is matched to teacher block `t` for every `(s, t)`.
/// Indices count transformer blocks from 0; the embedding output is never
/// matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenMatch {
    pub layer_map: Vec<(usize, usize)>,
    #[serde(default = "one")]
    pub weight: f64,
}

impl HiddenMatch {
    pub fn validate(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        if self.layer_map.is_empty() {
            return Err(Error::config("hidden matching needs a nonempty layer map"));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::config("hidden-match weight must be finite and non-negative"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(s, t) in &self.layer_map {
            if s >= student_layers {
                return Err(Error::config(format!("student layer {s} outside a {student_layers}-layer student")));
            }
            if t >= teacher_layers {
                return Err(Error::config(format!("teacher layer {t} outside a {teacher_layers}-layer teacher")));
            }
            if !seen.insert(s) {
                return Err(Error::config(format!("student layer {s} is mapped twice")));
            }
        }
        Ok(())
    }
}

/// Learned student-width → teacher-width maps, one per mapped student
/// layer. Empty when the widths agree.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub student_hidden: usize,
    pub teacher_hidden: usize,
    pub params: ParameterSet,
}

fn proj_name(s: usize) -> String {
    format!("proj.{s}.weight")
}

impl ProjectionSet {
    pub fn new(layer_map: &[(usize, usize)], student_hidden: usize, teacher_hidden: usize, seed: u64) -> Result<Self> {
        let mut params = ParameterSet::new();
        if student_hidden != teacher_hidden {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let mut r = rng::derived(seed, &[stream::PROJECTION]);
            for &(s, _) in layer_map {
                let data = (0..student_hidden * teacher_hidden).map(|_| normal.sample(&mut r)).collect();
                params.push(proj_name(s), Tensor::from_vec(&[student_hidden, teacher_hidden], data)?)?;
            }
        }
        Ok(ProjectionSet { student_hidden, teacher_hidden, params })
    }

    pub fn is_identity(&self) -> bool {
        self.student_hidden == self.teacher_hidden && self.params.is_empty()
    }

}

/// Index of student layer `s`'s projection inside `params`, `None` when the
/// widths agree.
fn proj_slot(params: &ParameterSet, s: usize, hs: usize, ht: usize) -> Result<Option<usize>> {
    if hs == ht {
        return Ok(None);
    }
    params
        .index_of(&proj_name(s))
        .map(Some)
        .ok_or_else(|| Error::config(format!("no projection for student layer {s} ({hs} → {ht})")))
}

/// Hidden-match loss and the gradients it sends to the student's
/// residual-stream states (keyed by `trace.hidden` index) and to the
/// projections (keyed by their index in `params`, which holds them by name).
/// Gradients are scaled by `scale`.
pub(crate) fn hidden_match_grad(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    layer_map: &[(usize, usize)],
    params: &ParameterSet,
    scale: f64,
) -> Result<(f64, Vec<(usize, Vec<f64>)>, Vec<(usize, Vec<f64>)>)> {
    if student.ids() != teacher.ids() || student.valid != teacher.valid {
        return Err(Error::validation("hidden matching needs traces of the same input"));
    }
    if layer_map.is_empty() {
        return Err(Error::config("hidden matching needs a nonempty layer map"));
    }
    let t = student.seq_len;
    let hs = student.hidden[0].len() / t;
    let ht = teacher.hidden[0].len() / t;
    let nv = student.n_valid() as f64;
    let m = layer_map.len() as f64;
    let norm = 1.0 / (m * nv * ht as f64);
    let mut loss = 0.0;
    let mut d_hidden = Vec::with_capacity(layer_map.len());
    let mut d_proj = Vec::new();
    for &(s, tl) in layer_map {
        if s + 1 >= student.hidden.len() || tl + 1 >= teacher.hidden.len() {
            return Err(Error::config(format!("layer pair ({s}, {tl}) outside the traced models")));
        }
        let x = &student.hidden[s + 1];
        let y = &teacher.hidden[tl + 1];
        let slot = proj_slot(params, s, hs, ht)?;
        let z = match slot {
            Some(i) => {
                let mut z = vec![0.0; t * ht];
                matmul(x, params.data(i), t, hs, ht, &mut z);
                z
            }
            None => x.clone(),
        };
        let mut dz = vec![0.0; t * ht];
        for i in (0..t).filter(|&i| student.valid[i]) {
            for c in 0..ht {
                let r = z[i * ht + c] - y[i * ht + c];
                loss += r * r * norm;
                dz[i * ht + c] = 2.0 * r * norm * scale;
            }
        }
        let dx = match slot {
            Some(i) => {
                let mut dx = vec![0.0; t * hs];
                matmul_nt(&dz, params.data(i), t, ht, hs, &mut dx);
                let mut dp = vec![0.0; hs * ht];
                matmul_tn_acc(x, &dz, t, hs, ht, &mut dp);
                d_proj.push((i, dp));
                dx
            }
            None => dz,
        };
        d_hidden.push((s + 1, dx));
    }
    Ok((loss, d_hidden, d_proj))
}

/// Mean squared error between (projected) student block outputs and the
/// mapped teacher block outputs, averaged over mapped layers, unpadded
/// positions and teacher dimensions.
pub fn hidden_match_loss(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    layer_map: &[(usize, usize)],
    projections: &ProjectionSet,
) -> Result<f64> {
    let (hs, ht) = (student.hidden[0].len() / student.seq_len, teacher.hidden[0].len() / teacher.seq_len);
    if (projections.student_hidden, projections.teacher_hidden) != (hs, ht) {
        return Err(Error::config(format!(
            "projections map {} → {} but the traces have widths {hs} → {ht}",
            projections.student_hidden, projections.teacher_hidden
        )));
    }
    Ok(hidden_match_grad(student, teacher, layer_map, &projections.params, 1.0)?.0)
}
