//! The label-attentive encoder: a self-attention stack over the concatenated
//! argument pair, a GCN over the label graph for label embeddings, and
//! level-specific label attention extracting one context vector per level.

use rand_chacha::ChaCha8Rng;

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::model::{BatchContext, ForwardOptions, Model};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Everything the decoders consume from one encoded instance.
#[derive(Clone)]
pub struct EncoderOutput {
    /// Global representation: the first special token's vector.
    pub v_cls: NodeId,
    /// Local representations of the argument tokens, one row per token.
    pub v_tokens: NodeId,
    /// Level-specific contexts; empty when label attention is ablated.
    pub contexts: Vec<NodeId>,
    /// Attention weights per level, kept for inspection.
    pub alphas: Vec<NodeId>,
    /// Label embeddings per level (rows = labels).
    pub level_embs: Vec<NodeId>,
}

impl EncoderOutput {
    /// Copy with every field detached, severing encoder gradients.
    pub fn detached(&self, tape: &mut Tape) -> EncoderOutput {
        EncoderOutput {
            v_cls: tape.detach(self.v_cls),
            v_tokens: tape.detach(self.v_tokens),
            contexts: self.contexts.iter().map(|&c| tape.detach(c)).collect(),
            alphas: self.alphas.clone(),
            level_embs: self.level_embs.iter().map(|&e| tape.detach(e)).collect(),
        }
    }
}

/// One graph-convolution layer over node embeddings (rows = nodes):
/// `relu(A . E . W^T + b)`, i.e. each node aggregates its neighborhood, maps
/// it through the layer weight, and shifts by the bias.
pub fn gcn_layer(
    tape: &mut Tape,
    nodes: NodeId,
    adjacency: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> NodeId {
    let aggregated = tape.matmul(adjacency, nodes);
    let wt = tape.transpose(weight);
    let mapped = tape.matmul(aggregated, wt);
    let shifted = tape.add_row_broadcast(mapped, bias);
    tape.relu(shifted)
}

/// Level-specific label attention: scores every token against every label
/// embedding of the level, pools over the label axis, and mixes token vectors
/// by the resulting distribution.
///
/// `tokens` is the token matrix (rows = tokens), `labels` the level's label
/// embeddings (rows = labels), `weight` the bilinear form between them.
/// Returns the context vector and the attention distribution over tokens.
pub fn label_attention(
    tape: &mut Tape,
    tokens: NodeId,
    labels: NodeId,
    weight: NodeId,
) -> (NodeId, NodeId) {
    let projected = tape.matmul(tokens, weight);
    let labels_t = tape.transpose(labels);
    let scores = tape.matmul(projected, labels_t);
    let pooled = tape.row_max(scores);
    let alpha = tape.softmax_vec(pooled);
    let tokens_t = tape.transpose(tokens);
    let context = tape.matmul(tokens_t, alpha);
    (context, alpha)
}

/// Attention over tokens queried by a decoder hidden state (the label-free
/// variant used when label attention is ablated).
pub fn query_attention(
    tape: &mut Tape,
    tokens: NodeId,
    query_weight: NodeId,
    hidden: NodeId,
) -> (NodeId, NodeId) {
    let query = tape.matmul(query_weight, hidden);
    let scores = tape.matmul(tokens, query);
    let alpha = tape.softmax_vec(scores);
    let tokens_t = tape.transpose(tokens);
    let context = tape.matmul(tokens_t, alpha);
    (context, alpha)
}

/// Fixed sinusoidal position encodings for a sequence.
pub fn position_encodings(seq_len: usize, dim: usize) -> Tensor {
    let mut values = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 /10_000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            values[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![seq_len, dim], values).expect("position encodings")
}

impl Model {
    /// Label embeddings per level: the initial node embeddings pushed through
    /// the GCN (or sliced directly when the GCN is ablated).
    pub fn label_embeddings(&self, tape: &mut Tape) -> Vec<NodeId> {
        let e0 = tape.param("enc.node_embedding", self.params.get("enc.node_embedding"));
        let full = if self.flags.no_gcn {
            e0
        } else {
            let adjacency = tape.constant(self.adjacency.clone());
            let mut current = e0;
            for l in 0..self.cfg.gcn_layers {
                let w = self.param(tape, &format!("enc.gcn.l{l}.weight"));
                let b = self.param(tape, &format!("enc.gcn.l{l}.bias"));
                current = gcn_layer(tape, current, adjacency, w, b);
            }
            current
        };
        (0..self.num_levels())
            .map(|m| {
                let offset = self.hierarchy.level_offset(m + 1);
                let size = self.hierarchy.level_size(m + 1);
                let rows: Vec<usize> = (offset..offset + size).collect();
                tape.select_rows(full, &rows)
            })
            .collect()
    }

    /// Token encoding: embedding + position encodings + the self-attention
    /// stack, with dropout over the outputs in training mode. Returns the
    /// global vector and the argument-token matrix.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        instance: &Instance,
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId)> {
        let (ids, word_positions) = self.vocab.encode_pair(&instance.arg1, &instance.arg2);
        if ids.len() > self.cfg.max_seq_len() {
            return Err(Error::numerics(format!(
                "sequence of {} tokens exceeds the configured maximum {}",
                ids.len(),
                self.cfg.max_seq_len()
            )));
        }
        let table = self.param(tape, "enc.token_embedding");
        let embedded = tape.select_rows(table, &ids);
        let positions = tape.constant(position_encodings(ids.len(), self.cfg.token_dim));
        let mut x = tape.add(embedded, positions);
        for k in 0..self.cfg.layers {
            x = self.transformer_layer(tape, x, k);
        }
        let x = tape.dropout(x, opts.dropout, opts.training, rng)?;
        let v_cls = tape.select_row(x, 0);
        let v_tokens = tape.select_rows(x, &word_positions);
        Ok((v_cls, v_tokens))
    }

    /// Full encoder pass for one instance.
    pub fn encode(
        &self,
        tape: &mut Tape,
        ctx: &BatchContext,
        instance: &Instance,
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncoderOutput> {
        let (v_cls, v_tokens) = self.encode_tokens(tape, instance, opts, rng)?;
        let mut contexts = Vec::new();
        let mut alphas = Vec::new();
        if !self.flags.no_label_attention {
            for m in 0..self.num_levels() {
                let w = self.param(tape, &format!("enc.level_attn.m{m}.weight"));
                let (c, alpha) = label_attention(tape, v_tokens, ctx.level_embs[m], w);
                contexts.push(c);
                alphas.push(alpha);
            }
        }
        Ok(EncoderOutput {
            v_cls,
            v_tokens,
            contexts,
            alphas,
            level_embs: ctx.level_embs.clone(),
        })
    }

    fn transformer_layer(&self, tape: &mut Tape, x: NodeId, k: usize) -> NodeId {
        let attn = self.multi_head_attention(tape, x, k);
        let res1 = tape.add(x, attn);
        let g1 = self.param(tape, &format!("enc.layer{k}.ln1.gamma"));
        let b1 = self.param(tape, &format!("enc.layer{k}.ln1.beta"));
        let normed1 = tape.layer_norm_rows(res1, g1, b1, LN_EPS);

        let w1 = self.param(tape, &format!("enc.layer{k}.ff.w1"));
        let fb1 = self.param(tape, &format!("enc.layer{k}.ff.b1"));
        let w2 = self.param(tape, &format!("enc.layer{k}.ff.w2"));
        let fb2 = self.param(tape, &format!("enc.layer{k}.ff.b2"));
        let hidden = linear_rows(tape, normed1, w1, fb1);
        let hidden = tape.relu(hidden);
        let ff = linear_rows(tape, hidden, w2, fb2);

        let res2 = tape.add(normed1, ff);
        let g2 = self.param(tape, &format!("enc.layer{k}.ln2.gamma"));
        let b2 = self.param(tape, &format!("enc.layer{k}.ln2.beta"));
        tape.layer_norm_rows(res2, g2, b2, LN_EPS)
    }

    fn multi_head_attention(&self, tape: &mut Tape, x: NodeId, k: usize) -> NodeId {
        let d = self.cfg.token_dim;
        let heads = self.cfg.heads;
        let dk = d / heads;
        let load = |tape: &mut Tape, model: &Model, name: &str| {
            model.param(tape, &format!("enc.layer{k}.attn.{name}"))
        };
        let wq = load(tape, self, "wq");
        let bq = load(tape, self, "bq");
        let wk = load(tape, self, "wk");
        let bk = load(tape, self, "bk");
        let wv = load(tape, self, "wv");
        let bv = load(tape, self, "bv");
        let wo = load(tape, self, "wo");
        let bo = load(tape, self, "bo");

        let q = linear_rows(tape, x, wq, bq);
        let key = linear_rows(tape, x, wk, bk);
        let v = linear_rows(tape, x, wv, bv);

        let mut head_outputs = Vec::with_capacity(heads);
        let scale = 1.0 / (dk as f64).sqrt();
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dk, dk);
            let kh = tape.slice_cols(key, h * dk, dk);
            let vh = tape.slice_cols(v, h * dk, dk);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled);
            head_outputs.push(tape.matmul(weights, vh));
        }
        let merged = tape.concat_cols(&head_outputs);
        linear_rows(tape, merged, wo, bo)
    }

    pub(crate) fn param(&self, tape: &mut Tape, name: &str) -> NodeId {
        tape.param(name, self.params.get(name))
    }
}

/// `x . W^T + b` applied row-wise (weights stored `[out, in]`).
pub(crate) fn linear_rows(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let wt = tape.transpose(w);
    let y = tape.matmul(x, wt);
    tape.add_row_broadcast(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationFlags, ModelConfig};
    use crate::corpus::{Dataset, Vocab};
    use crate::hierarchy::LabelHierarchy;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            token_dim: 8,
            heads: 2,
            ff_dim: 16,
            label_dim: 4,
            gcn_layers: 1,
            hidden_dim: 8,
            max_arg_len: 16,
            normalize_adjacency: false,
        }
    }

    fn two_level_hierarchy() -> LabelHierarchy {
        LabelHierarchy::parse(
            r#"{"levels": [["r1", "r2"], ["c1", "c2", "c3"]],
                "edges": [["c1", "r1"], ["c2", "r1"], ["c3", "r2"]]}"#,
        )
        .unwrap()
    }

    fn model_with(instances: &[(&str, &str)], flags: AblationFlags) -> Model {
        let h = two_level_hierarchy();
        let ds = Dataset {
            instances: instances
                .iter()
                .map(|(a, b)| crate::corpus::Instance {
                    arg1: crate::corpus::tokenize(a, 16),
                    arg2: crate::corpus::tokenize(b, 16),
                    gold_path: vec![0, 0],
                })
                .collect(),
        };
        let vocab = Vocab::build(&ds, 1).unwrap();
        Model::build(tiny_config(), flags, h, vocab, 11).unwrap()
    }

    #[test]
    fn gcn_identity_weight_relu() {
        // Single node, identity weight, zero bias: output is relu(e0).
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let adj = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let out = gcn_layer(&mut tape, nodes, adj, w, b);
        assert_eq!(tape.value(out).values(), &[0.5, 0.0]);
    }

    #[test]
    fn gcn_disconnected_components_independent() {
        // Block-diagonal adjacency: node 0's output ignores node 1's input.
        let run = |second: f64| {
            let mut tape = Tape::new();
            let nodes =
                tape.constant(Tensor::matrix(2, 2, vec![0.3, 0.7, second, -second]).unwrap());
            let adj =
                tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            let w = tape
                .constant(Tensor::matrix(2, 2, vec![0.2, -0.4, 0.6, 0.1]).unwrap());
            let b = tape.constant(Tensor::vector(vec![0.05, -0.02]).unwrap());
            let out = gcn_layer(&mut tape, nodes, adj, w, b);
            tape.value(out).row(0).to_vec()
        };
        assert_eq!(run(1.0), run(-3.0));
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        // 3-node root/two-children graph evaluated independently with scalar
        // loops over the aggregation-then-map form.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut e0 = Tensor::zeros(vec![3, d]);
        let mut w = Tensor::zeros(vec![d, d]);
        let mut b = Tensor::zeros(vec![d]);
        e0.fill_uniform(-1.0, 1.0, &mut rng);
        w.fill_uniform(-1.0, 1.0, &mut rng);
        b.fill_uniform(-0.5, 0.5, &mut rng);
        let adj =
            Tensor::matrix(3, 3, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();

        let mut expected = vec![0.0; 3 * d];
        for j in 0..3 {
            for c in 0..d {
                let mut sum = b.values()[c];
                for k in 0..3 {
                    if adj.at(j, k) == 0.0 {
                        continue;
                    }
                    for p in 0..d {
                        sum += adj.at(j, k) * w.at(c, p) * e0.at(k, p);
                    }
                }
                expected[j * d + c] = sum.max(0.0);
            }
        }

        let mut tape = Tape::new();
        let nodes = tape.constant(e0);
        let a = tape.constant(adj);
        let wn = tape.constant(w);
        let bn = tape.constant(b);
        let out = gcn_layer(&mut tape, nodes, a, wn, bn);
        for (got, want) in tape.value(out).values().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn label_attention_hand_example() {
        // Two orthogonal token vectors, identity bilinear form, one label at
        // (1,0): scores (1,0), alpha = softmax, context = alpha-weighted mix.
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let labels = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let (c, alpha) = label_attention(&mut tape, tokens, labels, w);
        let a = tape.value(alpha).values().to_vec();
        assert!((a[0] - 0.7311).abs() < 1e-4);
        assert!((a[1] - 0.2689).abs() < 1e-4);
        let cv = tape.value(c).values().to_vec();
        assert!((cv[0] - 0.7311).abs() < 1e-4);
        assert!((cv[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn label_attention_zero_weight_gives_uniform() {
        let mut tape = Tape::new();
        let tokens =
            tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap());
        let labels = tape.constant(Tensor::matrix(2, 2, vec![0.4, 0.1, -0.3, 0.9]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![2, 2]));
        let (c, alpha) = label_attention(&mut tape, tokens, labels, w);
        for &v in tape.value(alpha).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // Context equals the row-mean of the token matrix.
        let cv = tape.value(c).values();
        assert!((cv[0] - 1.0).abs() < 1e-12);
        assert!((cv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_attention_single_token() {
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap());
        let labels = tape.constant(Tensor::matrix(2, 2, vec![0.4, 0.1, -0.3, 0.9]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![0.5, 0.2, 0.1, 0.7]).unwrap());
        let (c, alpha) = label_attention(&mut tape, tokens, labels, w);
        assert_eq!(tape.value(alpha).values(), &[1.0]);
        assert_eq!(tape.value(c).values(), &[0.3, -0.8]);
    }

    #[test]
    fn encode_tokens_output_width_excludes_specials() {
        let model = model_with(&[("a b c", "d e")], AblationFlags::default());
        let mut tape = Tape::new();
        let ctx = model.batch_context(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let inst = crate::corpus::Instance {
            arg1: vec!["a".into(), "b".into(), "c".into()],
            arg2: vec!["d".into(), "e".into()],
            gold_path: vec![0, 0],
        };
        let enc = model
            .encode(&mut tape, &ctx, &inst, &ForwardOptions::eval(), &mut rng)
            .unwrap();
        assert_eq!(tape.value(enc.v_tokens).shape(), &[5, 8]);
        assert_eq!(tape.value(enc.v_cls).shape(), &[8]);
        assert_eq!(enc.contexts.len(), 2);
        assert_eq!(enc.level_embs.len(), 2);
        // Every attention distribution sums to one.
        for &alpha in &enc.alphas {
            let sum: f64 = tape.value(alpha).values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_is_position_aware() {
        let model = model_with(&[("a b c", "d e")], AblationFlags::default());
        let run = |arg2: Vec<&str>| {
            let mut tape = Tape::new();
            let ctx = model.batch_context(&mut tape);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let inst = crate::corpus::Instance {
                arg1: vec!["a".into(), "b".into(), "c".into()],
                arg2: arg2.into_iter().map(String::from).collect(),
                gold_path: vec![0, 0],
            };
            let enc = model
                .encode(&mut tape, &ctx, &inst, &ForwardOptions::eval(), &mut rng)
                .unwrap();
            tape.value(enc.v_tokens).values().to_vec()
        };
        let forward = run(vec!["d", "e"]);
        let swapped = run(vec!["e", "d"]);
        assert_ne!(forward, swapped);
    }

    #[test]
    fn eval_encoding_is_deterministic() {
        let model = model_with(&[("a b", "c d")], AblationFlags::default());
        let run = || {
            let mut tape = Tape::new();
            let ctx = model.batch_context(&mut tape);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let inst = crate::corpus::Instance {
                arg1: vec!["a".into(), "b".into()],
                arg2: vec!["c".into(), "d".into()],
                gold_path: vec![0, 0],
            };
            let enc = model
                .encode(&mut tape, &ctx, &inst, &ForwardOptions::eval(), &mut rng)
                .unwrap();
            (
                tape.value(enc.v_cls).values().to_vec(),
                tape.value(enc.v_tokens).values().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sequence_over_limit_errors() {
        let mut cfg = tiny_config();
        cfg.max_arg_len = 2;
        let h = two_level_hierarchy();
        let ds = Dataset { instances: vec![] };
        let vocab = Vocab::build(&ds, 1).unwrap();
        let model = Model::build(cfg, AblationFlags::default(), h, vocab, 1).unwrap();
        let mut tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let inst = crate::corpus::Instance {
            arg1: vec!["a".into(), "b".into(), "c".into(), "x".into()],
            arg2: vec!["d".into(), "e".into(), "f".into()],
            gold_path: vec![0, 0],
        };
        let err = model
            .encode_tokens(&mut tape, &inst, &ForwardOptions::eval(), &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("exceeds"), "{err}");
    }

    #[test]
    fn no_gcn_uses_raw_node_embeddings() {
        let flags = AblationFlags { no_gcn: true, ..Default::default() };
        let model = model_with(&[("a", "b")], flags);
        assert!(!model.params.contains("enc.gcn.l0.weight"));
        let mut tape = Tape::new();
        let embs = model.label_embeddings(&mut tape);
        let e0 = model.params.get("enc.node_embedding");
        // Level 1 rows are the first rows of the raw table.
        let level1 = tape.value(embs[0]);
        assert_eq!(level1.row(0), e0.row(0));
        assert_eq!(level1.row(1), e0.row(1));
    }

    #[test]
    fn gcn_with_identity_adjacency_is_per_node_map() {
        // With A = I the layer reduces to an independent map of each node.
        let mut tape = Tape::new();
        let nodes = tape.constant(Tensor::matrix(2, 2, vec![0.2, -0.4, 0.9, 0.3]).unwrap());
        let adj = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 2, vec![0.5, -0.1, 0.3, 0.8]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.1, -0.3]).unwrap());
        let out = gcn_layer(&mut tape, nodes, adj, w, b);
        for j in 0..2 {
            let mut tape2 = Tape::new();
            let single = tape2.constant(
                Tensor::matrix(1, 2, tape.value(nodes).row(j).to_vec()).unwrap(),
            );
            let a1 = tape2.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
            let w2 = tape2.constant(Tensor::matrix(2, 2, vec![0.5, -0.1, 0.3, 0.8]).unwrap());
            let b2 = tape2.constant(Tensor::vector(vec![0.1, -0.3]).unwrap());
            let solo = gcn_layer(&mut tape2, single, a1, w2, b2);
            assert_eq!(tape.value(out).row(j), tape2.value(solo).row(0));
        }
    }
}
