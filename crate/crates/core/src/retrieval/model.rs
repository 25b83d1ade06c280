//! Joint text/map graph encoder with a match head.
//!
//! Node features start from a hashed label lookup. Each layer runs masked
//! multi-head attention over graph neighbours (relation embeddings added to
//! the keys), then cross-attention to the other graph's nodes. Graph vectors
//! are pooled node features, L2-normalized.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{sigmoid, Tape, Var};
use super::RetrievalError;
use crate::embed_index::{fnv1a, mix64, EmbeddingVector, GraphEmbedder, IndexError};
use crate::scenegraph::SceneGraph;

pub const DEFAULT_VOCAB: usize = 512;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 4;
/// Similarity below which non-matching pairs are not penalized.
pub const SIM_MARGIN: f64 = 0.2;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GPRM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Four relations plus the self loop.
const EDGE_TYPES: usize = 5;
const SELF_EDGE: usize = 4;
const PARAMS_PER_LAYER: usize = 9;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: DEFAULT_VOCAB,
            hidden: DEFAULT_HIDDEN,
            layers: DEFAULT_LAYERS,
            heads: DEFAULT_HEADS,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.vocab == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(RetrievalError::Config("vocab, hidden and heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(RetrievalError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor in declaration order.
    pub fn parameter_layout(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden;
        let mut out = vec![("label_table".to_string(), self.vocab, h)];
        for l in 0..self.layers {
            for name in ["self_query", "self_key", "self_value", "self_output"] {
                out.push((format!("layer{l}.{name}"), h, h));
            }
            out.push((format!("layer{l}.self_relation"), EDGE_TYPES, h));
            for name in ["cross_query", "cross_key", "cross_value", "cross_output"] {
                out.push((format!("layer{l}.{name}"), h, h));
            }
        }
        out.push(("head.hidden_weight".into(), 2 * h, h));
        out.push(("head.hidden_bias".into(), 1, h));
        out.push(("head.out_weight".into(), h, 1));
        out.push(("head.out_bias".into(), 1, 1));
        out
    }
}

/// Tensor-ready view of a scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    buckets: Vec<usize>,
    /// Row-major `n x n`: attend from `i` to `j`.
    mask: Vec<bool>,
    /// Row-major `n x n` edge-type index.
    edge_types: Vec<usize>,
}

impl GraphInput {
    pub fn new(graph: &SceneGraph, vocab: usize) -> Result<Self, RetrievalError> {
        if graph.is_empty() {
            return Err(RetrievalError::EmptyGraph);
        }
        let n = graph.nodes().len();
        let buckets = graph
            .nodes()
            .iter()
            .map(|node| (mix64(fnv1a(node.label_key().as_bytes())) % vocab as u64) as usize)
            .collect();
        let mut mask = vec![false; n * n];
        let mut edge_types = vec![0; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
            edge_types[i * n + i] = SELF_EDGE;
        }
        for (i, row) in graph.relation_matrix().iter().enumerate() {
            for (j, rel) in row.iter().enumerate() {
                if let Some(r) = rel {
                    mask[i * n + j] = true;
                    edge_types[i * n + j] = r.index();
                }
            }
        }
        Ok(Self { buckets, mask, edge_types })
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Same graph with node `i` moved to position `order.iter().position(i)`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.len();
        assert_eq!(order.len(), n, "permutation length");
        let mut out = self.clone();
        for (new_i, &old_i) in order.iter().enumerate() {
            out.buckets[new_i] = self.buckets[old_i];
            for (new_j, &old_j) in order.iter().enumerate() {
                out.mask[new_i * n + new_j] = self.mask[old_i * n + old_j];
                out.edge_types[new_i * n + new_j] = self.edge_types[old_i * n + old_j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub matching: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub text: SceneGraph,
    pub map: SceneGraph,
    pub is_match: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    config: ModelConfig,
    params: Vec<Array2<f64>>,
}

struct Encoded {
    text: Var,
    map: Var,
}

impl JointModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, RetrievalError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, rows, cols)| {
                let bound = if name.ends_with("bias") {
                    0.0
                } else if name == "label_table" {
                    1.0
                } else {
                    (6.0 / (rows + cols) as f64).sqrt()
                };
                Array2::from_shape_simple_fn((rows, cols), || {
                    if bound == 0.0 {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn input(&self, graph: &SceneGraph) -> Result<GraphInput, RetrievalError> {
        GraphInput::new(graph, self.config.vocab)
    }

    fn layer_param(&self, layer: usize, slot: usize) -> usize {
        1 + layer * PARAMS_PER_LAYER + slot
    }

    fn head_param(&self, slot: usize) -> usize {
        1 + self.config.layers * PARAMS_PER_LAYER + slot
    }

    /// Multi-head attention from `queries` onto `keys`, with residual.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        keys: Var,
        first_param: usize,
        relation: Option<(usize, &GraphInput)>,
    ) -> Var {
        let h = self.config.hidden;
        let dh = h / self.config.heads;
        let wq = tape.param(first_param);
        let wk = tape.param(first_param + 1);
        let wv = tape.param(first_param + 2);
        let wo = tape.param(first_param + 3);
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys, wk);
        let v = tape.matmul(keys, wv);
        let rel_table = relation.map(|(p, _)| tape.param(p));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let mut scores = tape.matmul_t(qh, kh);
            let mut mask = None;
            if let (Some(table), Some((_, input))) = (rel_table, relation) {
                let eh = tape.slice_cols(table, head * dh, dh);
                let by_type = tape.matmul_t(qh, eh);
                let picked = tape.pick(by_type, &input.edge_types, input.len());
                scores = tape.add(scores, picked);
                mask = Some(input.mask.as_slice());
            }
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, mask);
            heads.push(tape.matmul(weights, vh));
        }
        let joined = tape.concat_cols(&heads);
        let projected = tape.matmul(joined, wo);
        let update = tape.tanh(projected);
        tape.add(queries, update)
    }

    fn pool(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let pooled = match self.config.pooling {
            Pooling::Mean => tape.mean_rows(x),
            Pooling::Max => tape.max_rows(x),
        };
        tape.normalize(pooled)
    }

    fn encode(&self, tape: &mut Tape<'_>, text: &GraphInput, map: Option<&GraphInput>) -> (Var, Option<Var>) {
        let mut xt = tape.gather(0, &text.buckets);
        let mut xm = map.map(|m| tape.gather(0, &m.buckets));
        for layer in 0..self.config.layers {
            let self_first = self.layer_param(layer, 0);
            let rel = self.layer_param(layer, 4);
            let cross_first = self.layer_param(layer, 5);
            xt = self.attention(tape, xt, xt, self_first, Some((rel, text)));
            if let (Some(x), Some(m)) = (xm, map) {
                let x = self.attention(tape, x, x, self_first, Some((rel, m)));
                let t2 = self.attention(tape, xt, x, cross_first, None);
                let m2 = self.attention(tape, x, xt, cross_first, None);
                xt = t2;
                xm = Some(m2);
            }
        }
        let et = self.pool(tape, xt);
        (et, xm.map(|x| self.pool(tape, x)))
    }

    fn encode_pair(&self, tape: &mut Tape<'_>, text: &GraphInput, map: &GraphInput) -> Encoded {
        let (t, m) = self.encode(tape, text, Some(map));
        Encoded {
            text: t,
            map: m.expect("pair encoding yields both sides"),
        }
    }

    fn logit(&self, tape: &mut Tape<'_>, enc: &Encoded) -> Var {
        let joined = tape.concat_cols(&[enc.text, enc.map]);
        let w1 = tape.param(self.head_param(0));
        let b1 = tape.param(self.head_param(1));
        let w2 = tape.param(self.head_param(2));
        let b2 = tape.param(self.head_param(3));
        let hidden = tape.matmul(joined, w1);
        let hidden = tape.add_row(hidden, b1);
        let hidden = tape.tanh(hidden);
        let out = tape.matmul(hidden, w2);
        tape.add_row(out, b2)
    }

    fn loss_vars(&self, tape: &mut Tape<'_>, text: &GraphInput, map: &GraphInput, is_match: bool) -> (Var, Var, Var) {
        let enc = self.encode_pair(tape, text, map);
        let logit = self.logit(tape, &enc);
        let matching = tape.bce(logit, if is_match { 1.0 } else { 0.0 });
        let sim = tape.dot(enc.text, enc.map);
        let similarity = if is_match {
            tape.affine(sim, -1.0, 1.0)
        } else {
            let shifted = tape.affine(sim, 1.0, -SIM_MARGIN);
            tape.relu(shifted)
        };
        let total = tape.add(matching, similarity);
        (total, matching, similarity)
    }

    fn parts(tape: &Tape<'_>, vars: (Var, Var, Var)) -> LossParts {
        LossParts {
            total: tape.scalar(vars.0),
            matching: tape.scalar(vars.1),
            similarity: tape.scalar(vars.2),
        }
    }

    pub fn joint_embed_inputs(&self, text: &GraphInput, map: &GraphInput) -> Result<(EmbeddingVector, EmbeddingVector), RetrievalError> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_pair(&mut tape, text, map);
        Ok((to_vector(tape.value(enc.text))?, to_vector(tape.value(enc.map))?))
    }

    /// Jointly encoded (text, map) graph vectors.
    pub fn joint_embed(&self, text: &SceneGraph, map: &SceneGraph) -> Result<(EmbeddingVector, EmbeddingVector), RetrievalError> {
        self.joint_embed_inputs(&self.input(text)?, &self.input(map)?)
    }

    /// Match-head probability in (0, 1).
    pub fn match_probability(&self, text: &SceneGraph, map: &SceneGraph) -> Result<f64, RetrievalError> {
        let (t, m) = (self.input(text)?, self.input(map)?);
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_pair(&mut tape, &t, &m);
        let logit = self.logit(&mut tape, &enc);
        Ok(sigmoid(tape.scalar(logit)))
    }

    pub fn loss_inputs(&self, text: &GraphInput, map: &GraphInput, is_match: bool) -> LossParts {
        let mut tape = Tape::new(&self.params);
        let vars = self.loss_vars(&mut tape, text, map, is_match);
        Self::parts(&tape, vars)
    }

    pub fn loss(&self, text: &SceneGraph, map: &SceneGraph, is_match: bool) -> Result<LossParts, RetrievalError> {
        Ok(self.loss_inputs(&self.input(text)?, &self.input(map)?, is_match))
    }

    /// Loss and its gradient for every parameter tensor.
    pub fn loss_and_gradients(
        &self,
        text: &GraphInput,
        map: &GraphInput,
        is_match: bool,
    ) -> (LossParts, Vec<Array2<f64>>) {
        let mut tape = Tape::new(&self.params);
        let vars = self.loss_vars(&mut tape, text, map, is_match);
        let grads = tape.backward(vars.0);
        (Self::parts(&tape, vars), grads)
    }

    fn batch(&self, inputs: &[(GraphInput, GraphInput, bool)]) -> (f64, Vec<Array2<f64>>) {
        let mut total = 0.0;
        let mut sum: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        for (t, m, y) in inputs {
            let (parts, grads) = self.loss_and_gradients(t, m, *y);
            total += parts.total;
            for (s, g) in sum.iter_mut().zip(&grads) {
                *s += g;
            }
        }
        let scale = 1.0 / inputs.len() as f64;
        sum.iter_mut().for_each(|g| *g *= scale);
        (total * scale, sum)
    }

    /// Full-batch gradient descent on the mean loss. A step that would raise
    /// the loss is retried with half the learning rate; accepted steps grow
    /// it slightly. Returns the loss before training followed by the loss
    /// after each epoch.
    pub fn fit(&mut self, pairs: &[TrainingPair], epochs: usize, learning_rate: f64) -> Result<Vec<f64>, RetrievalError> {
        if !pairs.iter().any(|p| p.is_match) || !pairs.iter().any(|p| !p.is_match) {
            return Err(RetrievalError::Config("training needs positive and negative pairs".into()));
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(RetrievalError::Config("learning rate must be positive".into()));
        }
        let inputs = pairs
            .iter()
            .map(|p| Ok((self.input(&p.text)?, self.input(&p.map)?, p.is_match)))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        let (mut loss, mut grads) = self.batch(&inputs);
        let mut trace = vec![loss];
        if epochs == 0 {
            return Ok(trace);
        }
        let mut lr = learning_rate;
        for epoch in 1..=epochs {
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(RetrievalError::Divergence { epoch });
            }
            for _ in 0..MAX_HALVINGS {
                let mut candidate = self.clone();
                for (p, g) in candidate.params.iter_mut().zip(&grads) {
                    p.scaled_add(-lr, g);
                }
                let (next_loss, next_grads) = candidate.batch(&inputs);
                if next_loss.is_finite() && next_loss <= loss {
                    *self = candidate;
                    loss = next_loss;
                    grads = next_grads;
                    lr *= 1.1;
                    break;
                }
                lr *= 0.5;
            }
            trace.push(loss);
        }
        Ok(trace)
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), RetrievalError> {
        let c = &self.config;
        out.write_all(CHECKPOINT_MAGIC)?;
        for v in [CHECKPOINT_VERSION, c.vocab as u32, c.hidden as u32, c.layers as u32, c.heads as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        let pooling: u32 = match c.pooling {
            Pooling::Mean => 0,
            Pooling::Max => 1,
        };
        out.write_all(&pooling.to_le_bytes())?;
        for p in &self.params {
            for v in p.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, RetrievalError> {
        let bad = |m: &str| RetrievalError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut words = [0u32; 6];
        for w in &mut words {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *w = u32::from_le_bytes(b);
        }
        if words[0] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", words[0])));
        }
        let pooling = match words[5] {
            0 => Pooling::Mean,
            1 => Pooling::Max,
            _ => return Err(bad("unknown pooling")),
        };
        let config = ModelConfig {
            vocab: words[1] as usize,
            hidden: words[2] as usize,
            layers: words[3] as usize,
            heads: words[4] as usize,
            pooling,
        };
        config.validate()?;
        let mut params = Vec::new();
        for (_, rows, cols) in config.parameter_layout() {
            let mut raw = vec![0u8; rows * cols * 4];
            input.read_exact(&mut raw).map_err(|_| bad("truncated parameters"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let p = Array2::from_shape_vec((rows, cols), values).expect("layout sized buffer");
            if p.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite parameter"));
            }
            params.push(p);
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, params })
    }
}

fn to_vector(row: &Array2<f64>) -> Result<EmbeddingVector, IndexError> {
    EmbeddingVector::normalized(row.as_slice().expect("contiguous row"))
}

/// Same contract as the index similarity.
pub fn joint_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    crate::embed_index::cosine_similarity(a, b)
}

/// Seeded initialization followed by [`JointModel::fit`].
pub fn train(
    config: ModelConfig,
    pairs: &[TrainingPair],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(JointModel, Vec<f64>), RetrievalError> {
    let mut model = JointModel::new(config, seed)?;
    let trace = model.fit(pairs, epochs, learning_rate)?;
    Ok((model, trace))
}

/// Single-graph encoding (self layers only), usable for indexing.
impl GraphEmbedder for JointModel {
    fn dim(&self) -> usize {
        self.config.hidden
    }

    fn embed(&self, graph: &SceneGraph) -> Result<EmbeddingVector, IndexError> {
        let input = self.input(graph).map_err(|_| IndexError::EmptyGraph)?;
        let mut tape = Tape::new(&self.params);
        let (v, _) = self.encode(&mut tape, &input, None);
        to_vector(tape.value(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ged::tests::random_graph;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 32,
            hidden: 8,
            layers: 2,
            heads: 2,
            pooling: Pooling::Mean,
        }
    }

    fn pair(seed: u64) -> (SceneGraph, SceneGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_graph(&mut rng, 5, 6), random_graph(&mut rng, 7, 6))
    }

    #[test]
    fn layout_matches_params() {
        let m = JointModel::new(ModelConfig::default(), 1).unwrap();
        let layout = m.config().parameter_layout();
        assert_eq!(layout.len(), m.parameters().len());
        for ((_, r, c), p) in layout.iter().zip(m.parameters()) {
            assert_eq!((*r, *c), p.dim());
            assert!(p.iter().all(|v| v.is_finite()));
        }
        assert!(ModelConfig { hidden: 10, heads: 4, ..small() }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let model = JointModel::new(small(), seed).unwrap();
            let (t, m) = pair(seed + 10);
            let (ti, mi) = (model.input(&t).unwrap(), model.input(&m).unwrap());
            for is_match in [true, false] {
                let (_, grads) = model.loss_and_gradients(&ti, &mi, is_match);
                for (p, g) in grads.iter().enumerate() {
                    for idx in 0..g.len().min(12) {
                        let (r, c) = (idx * 7 % g.nrows(), idx * 3 % g.ncols());
                        let mut plus = model.clone();
                        plus.params[p][[r, c]] += 1e-4;
                        let mut minus = model.clone();
                        minus.params[p][[r, c]] -= 1e-4;
                        let numeric = (plus.loss_inputs(&ti, &mi, is_match).total
                            - minus.loss_inputs(&ti, &mi, is_match).total)
                            / 2e-4;
                        let a = g[[r, c]];
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                        assert!(rel < 1e-4, "seed {seed} param {p} [{r},{c}]: {a} vs {numeric}");
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_invariant_and_deterministic() {
        let model = JointModel::new(small(), 3).unwrap();
        let (t, m) = pair(4);
        let (ti, mi) = (model.input(&t).unwrap(), model.input(&m).unwrap());
        let base = model.joint_embed_inputs(&ti, &mi).unwrap();
        assert_eq!(base, model.joint_embed_inputs(&ti, &mi).unwrap());
        let order: Vec<usize> = (0..mi.len()).rev().collect();
        let (a, b) = model.joint_embed_inputs(&ti, &mi.permuted(&order)).unwrap();
        for (x, y) in base.0.values().iter().zip(a.values()).chain(base.1.values().iter().zip(b.values())) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_properties() {
        let model = JointModel::new(small(), 5).unwrap();
        let (t, m) = pair(6);
        let pos = model.loss(&t, &m, true).unwrap();
        let neg = model.loss(&t, &m, false).unwrap();
        assert!((pos.total - pos.matching - pos.similarity).abs() < 1e-12);
        let p = model.match_probability(&t, &m).unwrap();
        assert!(p > 0.0 && p < 1.0);
        // Exactly one of the two labels is the less likely one for the head.
        assert!((pos.matching > neg.matching) == (p < 0.5));
    }

    #[test]
    fn training_is_monotone_and_deterministic() {
        let pairs: Vec<TrainingPair> = (0..6)
            .map(|i| {
                let (t, m) = pair(100 + i);
                TrainingPair { text: t.clone(), map: if i % 2 == 0 { t } else { m }, is_match: i % 2 == 0 }
            })
            .collect();
        let (model, trace) = train(small(), &pairs, 30, 0.1, 9).unwrap();
        assert_eq!(trace.len(), 31);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(trace[30] < trace[0]);
        let (again, trace2) = train(small(), &pairs, 30, 0.1, 9).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(model, again);
        let (untouched, _) = train(small(), &pairs, 0, 0.1, 9).unwrap();
        assert_eq!(untouched, JointModel::new(small(), 9).unwrap());
        assert!(train(small(), &pairs[..1], 5, 0.1, 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = JointModel::new(ModelConfig { pooling: Pooling::Max, ..small() }, 11).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GPRM");
        let loaded = JointModel::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in loaded.parameters().iter().zip(model.parameters()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut again = Vec::new();
        loaded.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(JointModel::read_checkpoint(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(JointModel::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn single_graph_embedding_is_unit() {
        let model = JointModel::new(small(), 2).unwrap();
        let (t, _) = pair(1);
        let v = model.embed(&t).unwrap();
        assert_eq!(v.dim(), 8);
        let norm: f64 = v.values().iter().map(|x| (*x as f64).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
