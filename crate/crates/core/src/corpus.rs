//! Instance schema, JSONL corpus ingestion, vocabulary construction,
//! synthetic corpus generation, and deterministic epoch batching.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyDoc, LabelHierarchy};

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
const RESERVED: [&str; 4] = ["[cls]", "[sep]", "[pad]", "[unk]"];

/// An argument pair with its gold label path (one within-level index per
/// hierarchy level, top level first).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub arg1: Vec<String>,
    pub arg2: Vec<String>,
    pub gold_path: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// One corpus line on disk. `labels` holds one label name per level.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub arg1: String,
    pub arg2: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

/// Lowercasing whitespace tokenizer, truncating to `max_len` tokens.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.split_whitespace().take(max_len).map(|t| t.to_lowercase()).collect()
}

fn instance_from_record(
    record: &InstanceRecord,
    hierarchy: &LabelHierarchy,
    max_arg_len: usize,
    line: usize,
    require_labels: bool,
) -> Result<Instance> {
    let arg1 = tokenize(&record.arg1, max_arg_len);
    let arg2 = tokenize(&record.arg2, max_arg_len);
    if arg1.is_empty() || arg2.is_empty() {
        return Err(Error::corpus(line, "empty argument"));
    }
    let gold_path = match &record.labels {
        Some(names) => hierarchy
            .resolve_path(names)
            .map_err(|e| Error::corpus(line, e.to_string()))?,
        None if require_labels => {
            return Err(Error::corpus(line, "missing labels"));
        }
        None => Vec::new(),
    };
    Ok(Instance { arg1, arg2, gold_path })
}

/// Load a JSONL corpus, validating every gold path against the hierarchy.
/// Instance order is preserved; errors carry the 1-based line number.
pub fn load_jsonl(
    text: &str,
    hierarchy: &LabelHierarchy,
    max_arg_len: usize,
) -> Result<Dataset> {
    load_lines(text, hierarchy, max_arg_len, true)
}

/// Like [`load_jsonl`] but lines may omit `labels` (prediction input).
pub fn load_jsonl_unlabeled(
    text: &str,
    hierarchy: &LabelHierarchy,
    max_arg_len: usize,
) -> Result<Dataset> {
    load_lines(text, hierarchy, max_arg_len, false)
}

fn load_lines(
    text: &str,
    hierarchy: &LabelHierarchy,
    max_arg_len: usize,
    require_labels: bool,
) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstanceRecord = serde_json::from_str(line)
            .map_err(|e| Error::corpus(lineno, e.to_string()))?;
        instances.push(instance_from_record(
            &record,
            hierarchy,
            max_arg_len,
            lineno,
            require_labels,
        )?);
    }
    Ok(Dataset { instances })
}

pub fn dataset_to_jsonl(dataset: &Dataset, hierarchy: &LabelHierarchy) -> String {
    let mut out = String::new();
    for inst in &dataset.instances {
        let labels: Vec<String> = inst
            .gold_path
            .iter()
            .enumerate()
            .map(|(m, &idx)| hierarchy.label_name(m + 1, idx).to_string())
            .collect();
        let record = InstanceRecord {
            arg1: inst.arg1.join(" "),
            arg2: inst.arg2.join(" "),
            labels: Some(labels),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Token-to-id mapping with the four reserved ids fixed at 0..3.
#[derive(Debug, Clone)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Tokens with corpus frequency >= `min_count` get dense ids after the
    /// reserved range, in order of first appearance.
    pub fn build(dataset: &Dataset, min_count: usize) -> Result<Vocab> {
        if min_count == 0 {
            return Err(Error::config("min_count must be >= 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for inst in &dataset.instances {
            for tok in inst.arg1.iter().chain(&inst.arg2) {
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for tok in order {
            if counts[tok] >= min_count && !ids.contains_key(tok) {
                ids.insert(tok.to_string(), tokens.len());
                tokens.push(tok.to_string());
            }
        }
        Ok(Vocab { ids, tokens })
    }

    /// Rebuild from an id-ordered token list (checkpoint restore).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Checkpoint(format!(
                    "vocabulary is missing reserved token '{reserved}' at id {i}"
                )));
            }
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { ids, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS] + arg1 + [SEP] + arg2 + [SEP]` as ids, plus the positions of the
    /// argument tokens within that sequence.
    pub fn encode_pair(&self, arg1: &[String], arg2: &[String]) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::with_capacity(arg1.len() + arg2.len() + 3);
        let mut word_positions = Vec::with_capacity(arg1.len() + arg2.len());
        ids.push(CLS_ID);
        for tok in arg1 {
            word_positions.push(ids.len());
            ids.push(self.id(tok));
        }
        ids.push(SEP_ID);
        for tok in arg2 {
            word_positions.push(ids.len());
            ids.push(self.id(tok));
        }
        ids.push(SEP_ID);
        (ids, word_positions)
    }
}

/// Shape and noise knobs for a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Children per node at each level transition; length = number of levels,
    /// first entry = number of top-level labels.
    pub branching: Vec<usize>,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Probability an instance carries its marker token at all.
    pub marker_rate: f64,
    /// Probability a carried marker identifies a wrong leaf.
    pub noise_rate: f64,
    pub arg_len: (usize, usize),
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            branching: vec![4, 3, 2],
            train: 2000,
            valid: 500,
            test: 500,
            marker_rate: 1.0,
            noise_rate: 0.0,
            arg_len: (3, 10),
            filler_vocab: 50,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(Error::config("synthetic.branching must be nonempty positive counts"));
        }
        for (field, rate) in [("marker_rate", self.marker_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(format!(
                    "synthetic.{field} = {rate} outside [0, 1]"
                )));
            }
        }
        if self.arg_len.0 == 0 || self.arg_len.0 > self.arg_len.1 {
            return Err(Error::config("synthetic.arg_len must satisfy 1 <= lo <= hi"));
        }
        if self.filler_vocab == 0 {
            return Err(Error::config("synthetic.filler_vocab must be >= 1"));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.branching.len()
    }

    pub fn leaves(&self) -> usize {
        self.branching.iter().product()
    }
}

/// Two-letter marker alphabet: leaf j maps to token "mk<a><b>".
const MARKER_CAPACITY: usize = 26 * 26;

pub fn marker_token(leaf: usize) -> String {
    let a = (b'a' + (leaf / 26) as u8) as char;
    let b = (b'a' + (leaf % 26) as u8) as char;
    format!("mk{a}{b}")
}

fn synthetic_hierarchy(spec: &SyntheticSpec) -> LabelHierarchy {
    let mut levels: Vec<Vec<String>> = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut prev = 1;
    for (li, &b) in spec.branching.iter().enumerate() {
        let count = prev * b;
        let level: Vec<String> = (0..count).map(|i| format!("l{}_{}", li + 1, i)).collect();
        if li > 0 {
            for (i, name) in level.iter().enumerate() {
                edges.push((name.clone(), levels[li - 1][i / b].clone()));
            }
        }
        levels.push(level);
        prev = count;
    }
    LabelHierarchy::from_doc(&HierarchyDoc { levels, edges })
        .expect("generated hierarchy is valid")
}

/// Gold path implied by a leaf under the generated single-parent chain.
fn leaf_path(spec: &SyntheticSpec, leaf: usize) -> Vec<usize> {
    let m = spec.num_levels();
    let mut path = vec![0; m];
    let mut idx = leaf;
    for level in (0..m).rev() {
        path[level] = idx;
        idx /= spec.branching[level];
    }
    path
}

/// Generate a hierarchy plus disjoint train/valid/test splits.
///
/// Each instance's gold path is always hierarchy-valid; with probability
/// `marker_rate` the arguments carry a marker token, which identifies the
/// true deepest label except with probability `noise_rate`, when it names a
/// different leaf. Fully determined by the spec's seed.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(LabelHierarchy, Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let leaves = spec.leaves();
    if leaves > MARKER_CAPACITY {
        return Err(Error::config(format!(
            "{leaves} deepest-level labels overflow the {MARKER_CAPACITY}-marker vocabulary"
        )));
    }
    let hierarchy = synthetic_hierarchy(spec);
    let mut seen: HashSet<String> = HashSet::new();
    let mut splits = Vec::new();
    for (stream, count) in [(1u64, spec.train), (2, spec.valid), (3, spec.test)] {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut instances = Vec::with_capacity(count);
        while instances.len() < count {
            let inst = generate_instance(spec, &mut rng);
            let key = format!("{} | {}", inst.arg1.join(" "), inst.arg2.join(" "));
            if seen.insert(key) {
                instances.push(inst);
            }
        }
        splits.push(Dataset { instances });
    }
    let mut it = splits.into_iter();
    Ok((hierarchy, it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

fn generate_instance(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Instance {
    let leaves = spec.leaves();
    let leaf = rng.gen_range(0..leaves);
    let gold_path = leaf_path(spec, leaf);

    let (lo, hi) = spec.arg_len;
    let mut args: Vec<Vec<String>> = (0..2)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            (0..len).map(|_| format!("w{}", rng.gen_range(0..spec.filler_vocab))).collect()
        })
        .collect();

    if rng.gen::<f64>() < spec.marker_rate {
        let observed = if spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
            // A mismatched marker: any leaf but the true one.
            let offset = rng.gen_range(1..leaves);
            (leaf + offset) % leaves
        } else {
            leaf
        };
        let which = rng.gen_range(0..2);
        let pos = rng.gen_range(0..=args[which].len());
        args[which].insert(pos, marker_token(observed));
    }

    let arg2 = args.pop().unwrap();
    let arg1 = args.pop().unwrap();
    Instance { arg1, arg2, gold_path }
}

/// Gold-marker classifier: reads the marker token and returns the path it
/// implies, or None when no marker is present. At zero noise this is a
/// perfect oracle for generated corpora.
pub fn marker_oracle(spec: &SyntheticSpec, instance: &Instance) -> Option<Vec<usize>> {
    let markers: HashMap<String, usize> =
        (0..spec.leaves()).map(|j| (marker_token(j), j)).collect();
    instance
        .arg1
        .iter()
        .chain(&instance.arg2)
        .find_map(|tok| markers.get(tok))
        .map(|&leaf| leaf_path(spec, leaf))
}

/// Index batches for one epoch: a seeded permutation of the dataset, cut into
/// `batch_size` chunks with the final partial batch kept. The permutation
/// depends on both the seed and the epoch index.
pub fn epoch_batches(
    len: usize,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(0x10_0000 + epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
