//! Label-sequence decoding: a GRU stepping over hierarchy levels, emitting one
//! distribution per level, in top-down or bottom-up order; plus the
//! independent-heads baseline and prediction utilities.

use crate::config::Scheme;
use crate::encoder::{query_attention, EncoderOutput};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::model::Model;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One decoder's GRU cell parameters as tape nodes.
pub struct GruParams {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

/// One GRU step under the convention `h' = (1 - z) o h + z o h~`, with
/// `z = sigmoid(Wz x + Uz h + bz)`, `r = sigmoid(Wr x + Ur h + br)`, and
/// `h~ = tanh(Wh x + Uh (r o h) + bh)`.
pub fn gru_step(tape: &mut Tape, h: NodeId, x: NodeId, p: &GruParams) -> NodeId {
    let z = gate(tape, p.wz, x, p.uz, h, p.bz);
    let z = tape.sigmoid(z);
    let r = gate(tape, p.wr, x, p.ur, h, p.br);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h);
    let cand = gate(tape, p.wh, x, p.uh, rh, p.bh);
    let cand = tape.tanh(cand);
    let keep = tape.affine(z, -1.0, 1.0);
    let kept = tape.mul(keep, h);
    let new = tape.mul(z, cand);
    tape.add(kept, new)
}

fn gate(tape: &mut Tape, w: NodeId, x: NodeId, u: NodeId, h: NodeId, b: NodeId) -> NodeId {
    let wx = tape.matmul(w, x);
    let uh = tape.matmul(u, h);
    let s = tape.add(wx, uh);
    tape.add(s, b)
}

impl Model {
    /// Run one decoder over the hierarchy levels. `top_down` picks the level
    /// order; the previous level's predicted distribution (or the gold
    /// one-hot, when provided) feeds the next step's summary. Distributions
    /// come back level-ascending regardless of generation order.
    pub fn decode_sequence(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        prefix: &str,
        top_down: bool,
        gold: Option<&[usize]>,
    ) -> Vec<NodeId> {
        let levels = self.num_levels();
        let gru = self.gru_params(tape, prefix);
        let g0 = self.param(tape, &format!("{prefix}.g0"));
        let mut h = self.param(tape, &format!("{prefix}.h0"));
        let mut summary = g0;

        let order: Vec<usize> = if top_down {
            (0..levels).collect()
        } else {
            (0..levels).rev().collect()
        };
        let mut out: Vec<Option<NodeId>> = vec![None; levels];
        for &li in &order {
            let context = if self.flags.no_label_attention {
                let qw = self.param(tape, &format!("{prefix}.query_attn.weight"));
                let (c, _) = query_attention(tape, enc.v_tokens, qw, h);
                c
            } else {
                enc.contexts[li]
            };
            let x = tape.concat_vec(&[enc.v_cls, context, summary]);
            h = gru_step(tape, h, x, &gru);
            let w = self.param(tape, &format!("{prefix}.out.m{li}.weight"));
            let b = self.param(tape, &format!("{prefix}.out.m{li}.bias"));
            let wh = tape.matmul(w, h);
            let logits = tape.add(wh, b);
            let dist = tape.softmax_vec(logits);
            out[li] = Some(dist);

            summary = if self.flags.no_prev_pred {
                g0
            } else {
                let fed = match gold {
                    Some(path) => {
                        let size = self.hierarchy.level_size(li + 1);
                        let mut onehot = Tensor::zeros(vec![size]);
                        onehot.values_mut()[path[li]] = 1.0;
                        tape.constant(onehot)
                    }
                    None => dist,
                };
                let emb_t = tape.transpose(enc.level_embs[li]);
                tape.matmul(emb_t, fed)
            };
        }
        out.into_iter().map(|d| d.expect("level decoded")).collect()
    }

    /// Independent per-level softmax heads over `[v_cls; c_m]`.
    pub fn multitask_distributions(&self, tape: &mut Tape, enc: &EncoderOutput) -> Vec<NodeId> {
        (0..self.num_levels())
            .map(|li| {
                let input = tape.concat_vec(&[enc.v_cls, enc.contexts[li]]);
                let w = self.param(tape, &format!("dec.multitask.m{li}.weight"));
                let b = self.param(tape, &format!("dec.multitask.m{li}.bias"));
                let wx = tape.matmul(w, input);
                let logits = tape.add(wx, b);
                tape.softmax_vec(logits)
            })
            .collect()
    }

    fn gru_params(&self, tape: &mut Tape, prefix: &str) -> GruParams {
        let mut get = |name: &str| self.param(tape, &format!("{prefix}.gru.{name}"));
        GruParams {
            wz: get("wz"),
            uz: get("uz"),
            bz: get("bz"),
            wr: get("wr"),
            ur: get("ur"),
            br: get("br"),
            wh: get("wh"),
            uh: get("uh"),
            bh: get("bh"),
        }
    }
}

/// Per-level probability vectors from one decoding scheme, level-ascending.
#[derive(Debug, Clone)]
pub struct LevelDistributions {
    pub scheme: Scheme,
    pub dists: Vec<Tensor>,
}

/// Argmax per level with first-index tie-break, plus the hierarchy-validity
/// flag of the resulting path (reported, never enforced).
pub fn predict_path(
    dists: &LevelDistributions,
    hierarchy: &LabelHierarchy,
) -> Result<(Vec<usize>, bool)> {
    if dists.dists.len() != hierarchy.num_levels() {
        return Err(Error::Evaluation(format!(
            "{} distributions for {} levels",
            dists.dists.len(),
            hierarchy.num_levels()
        )));
    }
    let path: Vec<usize> = dists.dists.iter().map(|d| argmax(d.values())).collect();
    let valid = hierarchy.is_valid_path(&path)?;
    Ok((path, valid))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-level elementwise mean of two schemes' distributions, renormalized.
pub fn ensemble_predict(
    a: &LevelDistributions,
    b: &LevelDistributions,
) -> Result<LevelDistributions> {
    if a.dists.len() != b.dists.len() {
        return Err(Error::Evaluation(format!(
            "ensemble level count mismatch: {} vs {}",
            a.dists.len(),
            b.dists.len()
        )));
    }
    let mut dists = Vec::with_capacity(a.dists.len());
    for (da, db) in a.dists.iter().zip(&b.dists) {
        if da.shape() != db.shape() {
            return Err(Error::Evaluation(format!(
                "ensemble level shape mismatch: {:?} vs {:?}",
                da.shape(),
                db.shape()
            )));
        }
        let mut mixed: Vec<f64> =
            da.values().iter().zip(db.values()).map(|(x, y)| 0.5 * (x + y)).collect();
        let total: f64 = mixed.iter().sum();
        for v in &mut mixed {
            *v /= total;
        }
        dists.push(Tensor::from_vec(da.shape().to_vec(), mixed)?);
    }
    Ok(LevelDistributions { scheme: Scheme::Ensemble, dists })
}
