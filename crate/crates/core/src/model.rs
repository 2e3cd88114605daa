//! Model assembly: parameter registration across the three partitions and the
//! per-instance forward pass that composes the encoder and decoders according
//! to the active ablation flags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationFlags, ModelConfig};
use crate::corpus::{Instance, Vocab};
use crate::decoder::LevelDistributions;
use crate::encoder::EncoderOutput;
use crate::error::Result;
use crate::hierarchy::{build_adjacency, LabelHierarchy};
use crate::params::{Init, ParamStore, Partition};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const MAIN_DECODER: &str = "dec";
pub const AUX_DECODER: &str = "aux";

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("levels", &self.hierarchy.num_levels())
            .field("nodes", &self.hierarchy.num_nodes())
            .field("vocab", &self.vocab.len())
            .field("params", &self.params.len())
            .field("flags", &self.flags)
            .finish()
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub flags: AblationFlags,
    pub hierarchy: LabelHierarchy,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub adjacency: Tensor,
}

/// Per-tape nodes shared by every instance in a batch: the label embeddings
/// depend only on parameters, so the GCN runs once per tape.
pub struct BatchContext {
    pub level_embs: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub training: bool,
    pub dropout: f64,
    pub run_main: bool,
    pub run_aux: bool,
    /// Sever encoder gradients on the auxiliary decoder's inputs. On by
    /// default so the auxiliary objective trains only its own partition; the
    /// coupled gradient check turns it off.
    pub detach_aux_inputs: bool,
    /// Feed gold one-hots instead of predictions into the summary chain.
    pub teacher_forcing: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            training: false,
            dropout: 0.0,
            run_main: true,
            run_aux: true,
            detach_aux_inputs: true,
            teacher_forcing: false,
        }
    }
}

/// Distribution nodes produced by one instance's forward pass, level-ascending.
pub struct ForwardPass {
    pub enc: EncoderOutput,
    pub main: Option<Vec<NodeId>>,
    pub aux: Option<Vec<NodeId>>,
}

impl Model {
    /// Register all parameters with seed-deterministic initialization.
    pub fn build(
        cfg: ModelConfig,
        flags: AblationFlags,
        hierarchy: LabelHierarchy,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        register_encoder(&mut params, &cfg, &flags, &hierarchy, &vocab, &mut rng);
        if flags.multitask_baseline {
            register_multitask_heads(&mut params, &cfg, &hierarchy, &mut rng);
        } else {
            register_decoder(&mut params, &cfg, &flags, &hierarchy, MAIN_DECODER, &mut rng);
            register_decoder(&mut params, &cfg, &flags, &hierarchy, AUX_DECODER, &mut rng);
        }

        let adjacency = build_adjacency(&hierarchy).to_tensor(cfg.normalize_adjacency);
        Ok(Model { cfg, flags, hierarchy, vocab, params, adjacency })
    }

    pub fn num_levels(&self) -> usize {
        self.hierarchy.num_levels()
    }

    /// Structural copy with replacement parameter values (checkpoint
    /// snapshots, finite-difference probes).
    pub fn with_params(&self, params: ParamStore) -> Model {
        Model {
            cfg: self.cfg.clone(),
            flags: self.flags,
            hierarchy: self.hierarchy.clone(),
            vocab: self.vocab.clone(),
            params,
            adjacency: self.adjacency.clone(),
        }
    }

    pub fn batch_context(&self, tape: &mut Tape) -> BatchContext {
        BatchContext { level_embs: self.label_embeddings(tape) }
    }

    /// Encoder plus the decoders selected by `opts`, honoring ablation flags.
    pub fn forward_instance(
        &self,
        tape: &mut Tape,
        ctx: &BatchContext,
        instance: &Instance,
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let enc = self.encode(tape, ctx, instance, opts, rng)?;
        let gold = if opts.teacher_forcing && opts.training && !instance.gold_path.is_empty()
        {
            Some(instance.gold_path.as_slice())
        } else {
            None
        };

        let main = if opts.run_main {
            if self.flags.multitask_baseline {
                Some(self.multitask_distributions(tape, &enc))
            } else {
                Some(self.decode_sequence(tape, &enc, MAIN_DECODER, true, gold))
            }
        } else {
            None
        };

        let aux = if opts.run_aux && !self.flags.multitask_baseline {
            let aux_enc =
                if opts.detach_aux_inputs { enc.detached(tape) } else { enc.clone() };
            Some(self.decode_sequence(tape, &aux_enc, AUX_DECODER, false, gold))
        } else {
            None
        };

        Ok(ForwardPass { enc, main, aux })
    }

    /// Forward a single instance in eval mode and materialize every decoding
    /// scheme the model supports, plus the attention weights.
    pub fn eval_instance(&self, instance: &Instance) -> Result<EvalOutputs> {
        let mut tape = Tape::new();
        let ctx = self.batch_context(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd =
            self.forward_instance(&mut tape, &ctx, instance, &ForwardOptions::eval(), &mut rng)?;
        Ok(EvalOutputs::materialize(self, &tape, &fwd))
    }
}

/// Materialized (tensor-valued) outputs of an eval-mode forward pass.
pub struct EvalOutputs {
    pub main: Option<LevelDistributions>,
    pub aux: Option<LevelDistributions>,
    pub alphas: Vec<Tensor>,
}

impl EvalOutputs {
    pub fn materialize(model: &Model, tape: &Tape, fwd: &ForwardPass) -> EvalOutputs {
        use crate::config::Scheme;
        let read = |ids: &Vec<NodeId>| -> Vec<Tensor> {
            ids.iter().map(|&id| tape.value(id).clone()).collect()
        };
        let main = fwd.main.as_ref().map(|ids| LevelDistributions {
            scheme: if model.flags.multitask_baseline {
                Scheme::Multitask
            } else {
                Scheme::TopDown
            },
            dists: read(ids),
        });
        let aux = fwd
            .aux
            .as_ref()
            .map(|ids| LevelDistributions { scheme: Scheme::BottomUp, dists: read(ids) });
        let alphas =
            fwd.enc.alphas.iter().map(|&id| tape.value(id).clone()).collect();
        EvalOutputs { main, aux, alphas }
    }
}

fn register_encoder(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    hierarchy: &LabelHierarchy,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.token_dim;
    let p = Partition::Encoder;
    params.register(
        "enc.token_embedding",
        p,
        vec![vocab.len(), d],
        Init::Normal { std: 1.0 },
        rng,
    );
    for k in 0..cfg.layers {
        for gate in ["wq", "wk", "wv", "wo"] {
            params.register(
                &format!("enc.layer{k}.attn.{gate}"),
                p,
                vec![d, d],
                Init::UniformFan { fan_in: d },
                rng,
            );
        }
        for gate in ["bq", "bk", "bv", "bo"] {
            params.register(
                &format!("enc.layer{k}.attn.{gate}"),
                p,
                vec![d],
                Init::UniformFan { fan_in: d },
                rng,
            );
        }
        for ln in ["ln1", "ln2"] {
            params.register(&format!("enc.layer{k}.{ln}.gamma"), p, vec![d], Init::Ones, rng);
            params.register(&format!("enc.layer{k}.{ln}.beta"), p, vec![d], Init::Zeros, rng);
        }
        params.register(
            &format!("enc.layer{k}.ff.w1"),
            p,
            vec![cfg.ff_dim, d],
            Init::UniformFan { fan_in: d },
            rng,
        );
        params.register(
            &format!("enc.layer{k}.ff.b1"),
            p,
            vec![cfg.ff_dim],
            Init::UniformFan { fan_in: d },
            rng,
        );
        params.register(
            &format!("enc.layer{k}.ff.w2"),
            p,
            vec![d, cfg.ff_dim],
            Init::UniformFan { fan_in: cfg.ff_dim },
            rng,
        );
        params.register(
            &format!("enc.layer{k}.ff.b2"),
            p,
            vec![d],
            Init::UniformFan { fan_in: cfg.ff_dim },
            rng,
        );
    }

    params.register(
        "enc.node_embedding",
        p,
        vec![hierarchy.num_nodes(), cfg.label_dim],
        Init::Uniform { lo: -0.01, hi: 0.01 },
        rng,
    );
    if !flags.no_gcn {
        for l in 0..cfg.gcn_layers {
            params.register(
                &format!("enc.gcn.l{l}.weight"),
                p,
                vec![cfg.label_dim, cfg.label_dim],
                Init::UniformFan { fan_in: cfg.label_dim },
                rng,
            );
            params.register(
                &format!("enc.gcn.l{l}.bias"),
                p,
                vec![cfg.label_dim],
                Init::UniformFan { fan_in: cfg.label_dim },
                rng,
            );
        }
    }
    if !flags.no_label_attention {
        for m in 0..hierarchy.num_levels() {
            params.register(
                &format!("enc.level_attn.m{m}.weight"),
                p,
                vec![d, cfg.label_dim],
                Init::UniformFan { fan_in: cfg.label_dim },
                rng,
            );
        }
    }
}

fn register_decoder(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    hierarchy: &LabelHierarchy,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) {
    let partition =
        if prefix == MAIN_DECODER { Partition::MainDecoder } else { Partition::AuxDecoder };
    let d_in = 2 * cfg.token_dim + cfg.label_dim;
    let d_h = cfg.hidden_dim;
    let fan = Init::UniformFan { fan_in: d_h };
    for gate in ["z", "r", "h"] {
        params.register(&format!("{prefix}.gru.w{gate}"), partition, vec![d_h, d_in], fan, rng);
        params.register(&format!("{prefix}.gru.u{gate}"), partition, vec![d_h, d_h], fan, rng);
        params.register(&format!("{prefix}.gru.b{gate}"), partition, vec![d_h], fan, rng);
    }
    params.register(&format!("{prefix}.h0"), partition, vec![d_h], Init::Zeros, rng);
    params.register(&format!("{prefix}.g0"), partition, vec![cfg.label_dim], Init::Zeros, rng);
    for m in 0..hierarchy.num_levels() {
        let size = hierarchy.level_size(m + 1);
        params.register(&format!("{prefix}.out.m{m}.weight"), partition, vec![size, d_h], fan, rng);
        params.register(&format!("{prefix}.out.m{m}.bias"), partition, vec![size], fan, rng);
    }
    if flags.no_label_attention {
        params.register(
            &format!("{prefix}.query_attn.weight"),
            partition,
            vec![cfg.token_dim, d_h],
            fan,
            rng,
        );
    }
}

fn register_multitask_heads(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    hierarchy: &LabelHierarchy,
    rng: &mut ChaCha8Rng,
) {
    let fan_in = 2 * cfg.token_dim;
    for m in 0..hierarchy.num_levels() {
        let size = hierarchy.level_size(m + 1);
        params.register(
            &format!("dec.multitask.m{m}.weight"),
            Partition::MainDecoder,
            vec![size, fan_in],
            Init::UniformFan { fan_in },
            rng,
        );
        params.register(
            &format!("dec.multitask.m{m}.bias"),
            Partition::MainDecoder,
            vec![size],
            Init::UniformFan { fan_in },
            rng,
        );
    }
}
