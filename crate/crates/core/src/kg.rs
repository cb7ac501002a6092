//! Knowledge-graph entity encoding: an attribute autoencoder, a 1-D CNN over
//! each entity's attribute codes, and a relational graph attention stack.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::datamodel::{Config, KgSubset};
use crate::embeddings::Lexicon;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, Conv1d, Linear, Padding};
use crate::optim::{clip_global_norm, Adam};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

const RELU_GAIN: f64 = 2.449_489_742_783_178;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Embedding sequence of the whitespace tokens of `"attribute value"`.
/// An input without tokens becomes a single zero row.
pub fn attribute_sequence(lexicon: &Lexicon, attribute: &str, value: &str) -> Matrix {
    let text = format!("{attribute} {value}");
    let rows: Vec<Vec<f64>> = text.split_whitespace().map(|w| lexicon.lookup(w)).collect();
    if rows.is_empty() {
        return Matrix::zeros(1, lexicon.dim());
    }
    Matrix::from_rows(&rows)
}

/// Sequence autoencoder over attribute-triple token embeddings. The encoder's
/// final forward and backward states are mapped to a code; the decoder reads
/// the code at every step and reconstructs the embedding sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrAutoEncoder {
    pub store: ParamStore,
    encoder: BiLstm,
    to_code: Linear,
    decoder: BiLstm,
    to_embedding: Linear,
    pub d_word: usize,
    pub d_auto: usize,
}

impl AttrAutoEncoder {
    pub fn new<R: Rng>(config: &Config, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let h = config.ae_hidden;
        let encoder = BiLstm::new(&mut store, "ae.encoder", config.d_word, h, rng);
        let to_code = Linear::new(&mut store, "ae.code", 2 * h, config.d_auto, true, rng);
        let decoder = BiLstm::new(&mut store, "ae.decoder", config.d_auto, h, rng);
        let to_embedding = Linear::new(&mut store, "ae.out", 2 * h, config.d_word, true, rng);
        Self { store, encoder, to_code, decoder, to_embedding, d_word: config.d_word, d_auto: config.d_auto }
    }

    /// Untrained encoder initialized from `seed`.
    pub fn seeded(config: &Config, seed: u64) -> Self {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Rebuilds the layer layout around an already trained store.
    pub fn with_store(config: &Config, store: ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = Self::new(config, &mut rng);
        if fresh.store.len() != store.len() {
            return Err(Error::Config("autoencoder parameters do not match the configuration".to_string()));
        }
        for (a, b) in fresh.store.entries().iter().zip(store.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(format!("autoencoder parameter {} has an unexpected shape", b.name)));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }

    /// `1 × d_auto` code of an embedding sequence.
    pub fn code(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let m = tape.shape(x).0;
        let (f, b) = self.encoder.states(tape, x);
        let last_f = tape.row(f, m - 1);
        let first_b = tape.row(b, 0);
        let both = tape.hcat(&[last_f, first_b]);
        let z = self.to_code.forward(tape, both);
        tape.tanh(z)
    }

    pub fn reconstruct(&self, tape: &mut Tape<'_>, code: Var, steps: usize) -> Var {
        let repeated = tape.gather(code, &vec![0; steps]);
        let states = self.decoder.forward(tape, repeated);
        self.to_embedding.forward(tape, states)
    }

    /// Mean squared reconstruction error of one sequence.
    pub fn loss(&self, tape: &mut Tape<'_>, sequence: &Matrix) -> Var {
        let x = tape.constant(sequence.clone());
        let code = self.code(tape, x);
        let y = self.reconstruct(tape, code, sequence.rows());
        tape.mse(y, sequence.clone())
    }

    pub fn encode_sequence(&self, sequence: &Matrix) -> Vec<f64> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(sequence.clone());
        let c = self.code(&mut tape, x);
        tape.value(c).row(0).to_vec()
    }

    /// Code of one attribute triple.
    pub fn encode(&self, lexicon: &Lexicon, attribute: &str, value: &str) -> Vec<f64> {
        self.encode_sequence(&attribute_sequence(lexicon, attribute, value))
    }

    pub fn mean_loss(&self, sequences: &[Matrix]) -> f64 {
        let total: f64 = sequences
            .iter()
            .map(|s| {
                let mut tape = Tape::new(&self.store);
                let l = self.loss(&mut tape, s);
                tape.value(l).scalar()
            })
            .sum();
        total / sequences.len() as f64
    }
}

/// Reconstruction loss before training, then after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainCurve(pub Vec<f64>);

impl PretrainCurve {
    pub fn initial(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        *self.0.last().expect("curve holds the initial loss")
    }
}

/// Trains the autoencoder on the attribute triples of `kg` with Adam.
pub fn pretrain_autoencoder(kg: &KgSubset, lexicon: &Lexicon, config: &Config, epochs: usize, seed: u64) -> Result<(AttrAutoEncoder, PretrainCurve)> {
    let sequences: Vec<Matrix> = kg
        .attribute_triples()
        .iter()
        .map(|t| attribute_sequence(lexicon, &kg.attributes()[t.attribute], &t.value))
        .collect();
    pretrain_on_sequences(&sequences, config, epochs, seed)
}

pub fn pretrain_on_sequences(sequences: &[Matrix], config: &Config, epochs: usize, seed: u64) -> Result<(AttrAutoEncoder, PretrainCurve)> {
    if sequences.is_empty() {
        return Err(Error::Data("no attribute triples to pretrain on".to_string()));
    }
    if let Some(s) = sequences.iter().find(|s| s.cols() != config.d_word) {
        return Err(Error::Shape(format!("attribute embeddings have width {}, expected {}", s.cols(), config.d_word)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ae = AttrAutoEncoder::new(config, &mut rng);
    let mut adam = Adam::new(config.ae_learning_rate);
    let mut curve = vec![ae.mean_loss(sequences)];
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = {
                let mut tape = Tape::new(&ae.store);
                let losses: Vec<Var> = batch.iter().map(|&i| ae.loss(&mut tape, &sequences[i])).collect();
                let stacked = tape.vcat(&losses);
                let total = tape.sum_all(stacked);
                let mean = tape.scale(total, 1.0 / batch.len() as f64);
                tape.backward(mean)
            };
            if !grads.is_finite() {
                return Err(Error::Numerical(format!("autoencoder gradient not finite in epoch {epoch}")));
            }
            clip_global_norm(&mut grads, config.grad_clip);
            adam.update(&mut ae.store, &grads);
        }
        curve.push(ae.mean_loss(sequences));
    }
    Ok((ae, PretrainCurve(curve)))
}

/// Per-entity attribute codes in file order, truncated to `n_max`.
pub fn attribute_codes(kg: &KgSubset, ae: &AttrAutoEncoder, lexicon: &Lexicon, n_max: usize) -> Vec<Vec<Vec<f64>>> {
    let mut codes = vec![Vec::new(); kg.entities().len()];
    for t in kg.attribute_triples() {
        if codes[t.entity].len() < n_max {
            codes[t.entity].push(ae.encode(lexicon, &kg.attributes()[t.attribute], &t.value));
        }
    }
    codes
}

/// `N_kernel` filters of size `d_kernel` sliding over the attribute axis of
/// an `N_max × d_auto` stack, followed by max-pooling over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrCnn {
    pub conv: Conv1d,
    pub n_max: usize,
    pub d_auto: usize,
}

impl AttrCnn {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &Config, rng: &mut R) -> Self {
        let conv = Conv1d::new(store, "kg.attr_cnn", config.d_kernel, config.d_auto, config.n_kernel, Padding::Valid, rng);
        Self { conv, n_max: config.n_max, d_auto: config.d_auto }
    }

    /// Zero-padded or truncated `N_max × d_auto` stack.
    pub fn stack(&self, codes: &[Vec<f64>]) -> Matrix {
        let mut m = Matrix::zeros(self.n_max, self.d_auto);
        for (r, c) in codes.iter().take(self.n_max).enumerate() {
            m.row_mut(r).copy_from_slice(c);
        }
        m
    }

    /// `1 × N_kernel` initial representation of one entity.
    pub fn entity_attr_rep(&self, tape: &mut Tape<'_>, codes: &[Vec<f64>]) -> Var {
        let x = tape.constant(self.stack(codes));
        let y = self.conv.forward(tape, x);
        tape.max_rows(y)
    }

    /// Stacked initial representations for `nodes`.
    pub fn init_reps(&self, tape: &mut Tape<'_>, codes: &[Vec<Vec<f64>>], nodes: &[usize]) -> Var {
        let empty: Vec<Vec<f64>> = Vec::new();
        let rows: Vec<Var> = nodes
            .iter()
            .map(|&n| {
                let c = codes.get(n).unwrap_or(&empty);
                self.entity_attr_rep(tape, c)
            })
            .collect();
        tape.vcat(&rows)
    }
}

/// Directed typed edge: `dst` aggregates from `src`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: usize,
}

/// Entity graph with inverse edges (type `R + r`) and self-loops (type `2R`).
#[derive(Clone, Debug, PartialEq)]
pub struct KgGraph {
    pub nodes: usize,
    pub relation_types: usize,
    pub edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
}

impl KgGraph {
    /// Augments `triples` (`(head, relation, tail)`); relation ids below
    /// `relation_types`.
    pub fn augmented(nodes: usize, relation_types: usize, triples: impl IntoIterator<Item = (usize, usize, usize)>) -> Self {
        let mut set = BTreeSet::new();
        for (h, r, t) in triples {
            set.insert(Edge { src: h, dst: t, kind: r });
            set.insert(Edge { src: t, dst: h, kind: relation_types + r });
        }
        for i in 0..nodes {
            set.insert(Edge { src: i, dst: i, kind: 2 * relation_types });
        }
        Self::from_edges(nodes, relation_types, set.into_iter().collect())
    }

    pub fn from_subset(kg: &KgSubset) -> Self {
        Self::augmented(kg.entities().len(), kg.relations().len(), kg.relation_triples().iter().map(|t| (t.head, t.relation, t.tail)))
    }

    fn from_edges(nodes: usize, relation_types: usize, edges: Vec<Edge>) -> Self {
        let mut incoming = vec![Vec::new(); nodes];
        for (k, e) in edges.iter().enumerate() {
            incoming[e.dst].push(k);
        }
        Self { nodes, relation_types, edges, incoming }
    }

    /// Number of edge types including inverses and the self-loop.
    pub fn edge_types(&self) -> usize {
        2 * self.relation_types + 1
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.incoming[node].iter().map(move |&k| &self.edges[k])
    }

    /// Whether `node` takes part in any relation triple.
    pub fn has_relations(&self, node: usize) -> bool {
        self.neighbors(node).any(|e| e.kind != 2 * self.relation_types)
    }

    /// Nodes within `hops` incoming steps of `centers` (sorted) and the
    /// induced subgraph over them, renumbered in that order. After `hops`
    /// layers the centers' representations equal those on the full graph.
    pub fn ball(&self, centers: &[usize], hops: usize) -> (Vec<usize>, KgGraph) {
        let mut seen: BTreeSet<usize> = centers.iter().copied().collect();
        let mut frontier: Vec<usize> = seen.iter().copied().collect();
        for _ in 0..hops {
            let mut next = Vec::new();
            for &n in &frontier {
                for e in self.neighbors(n) {
                    if seen.insert(e.src) {
                        next.push(e.src);
                    }
                }
            }
            frontier = next;
        }
        let nodes: Vec<usize> = seen.into_iter().collect();
        let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|e| Some(Edge { src: *local.get(&e.src)?, dst: *local.get(&e.dst)?, kind: e.kind }))
            .collect();
        (nodes.clone(), Self::from_edges(nodes.len(), self.relation_types, edges))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgatHead {
    pub w_in: ParamId,
    pub attn_dst: ParamId,
    pub attn_src: ParamId,
    pub attn_rel: ParamId,
}

/// `K` layers of `B`-head relational graph attention with a shared
/// relation-type table.
#[derive(Clone, Debug, PartialEq)]
pub struct RgatStack {
    pub layers: Vec<Vec<RgatHead>>,
    pub relation_table: ParamId,
    pub edge_types: usize,
    pub d_in: usize,
    pub d_rgat: usize,
}

/// Attention weights of the last forward pass, per layer and head, one
/// entry per edge.
pub type AttentionTrace = Vec<Vec<Matrix>>;

impl RgatStack {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &Config, relation_types: usize, rng: &mut R) -> Self {
        let edge_types = 2 * relation_types + 1;
        let relation_table = store.table("kg.rgat.rel_emb", edge_types, config.d_rel, rng);
        let layers = (0..config.n_layer)
            .map(|k| {
                let d_in = if k == 0 { config.d_ent } else { config.d_rgat };
                (0..config.n_head)
                    .map(|b| RgatHead {
                        w_in: store.weight_with_gain(format!("kg.rgat.{k}.{b}.w_in"), d_in, config.d_rgat, RELU_GAIN, rng),
                        attn_dst: store.weight(format!("kg.rgat.{k}.{b}.attn_dst"), config.d_rgat, 1, rng),
                        attn_src: store.weight(format!("kg.rgat.{k}.{b}.attn_src"), config.d_rgat, 1, rng),
                        attn_rel: store.weight(format!("kg.rgat.{k}.{b}.attn_rel"), config.d_rel, 1, rng),
                    })
                    .collect()
            })
            .collect();
        Self { layers, relation_table, edge_types, d_in: config.d_ent, d_rgat: config.d_rgat }
    }

    /// Final-layer representations (`nodes × d_rgat`) for initial reps `h0`.
    pub fn forward(&self, tape: &mut Tape<'_>, graph: &KgGraph, h0: Var) -> Result<Var> {
        self.forward_traced(tape, graph, h0, None)
    }

    pub fn forward_traced(&self, tape: &mut Tape<'_>, graph: &KgGraph, h0: Var, mut trace: Option<&mut AttentionTrace>) -> Result<Var> {
        if graph.edge_types() > self.edge_types {
            return Err(Error::Config(format!("graph has {} edge types, encoder supports {}", graph.edge_types(), self.edge_types)));
        }
        if tape.shape(h0).0 != graph.nodes {
            return Err(Error::Shape(format!("{} initial reps for {} nodes", tape.shape(h0).0, graph.nodes)));
        }
        let src: Vec<usize> = graph.edges.iter().map(|e| e.src).collect();
        let dst: Vec<usize> = graph.edges.iter().map(|e| e.dst).collect();
        let kind: Vec<usize> = graph.edges.iter().map(|e| e.kind).collect();
        let mut h = h0;
        for heads in &self.layers {
            let mut layer_trace = Vec::new();
            let mut sum: Option<Var> = None;
            for head in heads {
                let z = tape.linear(h, head.w_in, None);
                let s_dst = tape.linear(z, head.attn_dst, None);
                let s_src = tape.linear(z, head.attn_src, None);
                let table = tape.param(self.relation_table);
                let s_rel = tape.linear(table, head.attn_rel, None);
                let a = tape.gather(s_dst, &dst);
                let b = tape.gather(s_src, &src);
                let c = tape.gather(s_rel, &kind);
                let ab = tape.add(a, b);
                let e = tape.add(ab, c);
                let e = tape.act(e, Activation::LeakyRelu(LEAKY_SLOPE));
                let alpha = tape.segment_softmax(e, &dst, graph.nodes);
                layer_trace.push(tape.value(alpha).clone());
                let zs = tape.gather(z, &src);
                let msg = tape.mul_col_broadcast(zs, alpha);
                let agg = tape.segment_sum(msg, &dst, graph.nodes);
                let out = tape.act(agg, Activation::Relu);
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, out),
                    None => out,
                });
            }
            let total = sum.expect("at least one head");
            h = tape.scale(total, 1.0 / heads.len() as f64);
            if let Some(t) = trace.as_deref_mut() {
                t.push(layer_trace);
            }
        }
        Ok(h)
    }

    /// Entries of `W_in` matrices.
    pub fn projection_weight_count(&self) -> usize {
        self.layers.iter().enumerate().map(|(k, heads)| heads.len() * if k == 0 { self.d_in } else { self.d_rgat } * self.d_rgat).sum()
    }
}

/// Attribute CNN followed by R-GAT.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEncoder {
    pub cnn: AttrCnn,
    pub rgat: RgatStack,
    pub hops: usize,
}

impl KgEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &Config, relation_types: usize, rng: &mut R) -> Self {
        Self { cnn: AttrCnn::new(store, config, rng), rgat: RgatStack::new(store, config, relation_types, rng), hops: config.n_layer }
    }

    /// Representations of `centers` (`centers.len() × d_rgat`, in the given
    /// order), computed on their receptive field only.
    pub fn encode(&self, tape: &mut Tape<'_>, graph: &KgGraph, codes: &[Vec<Vec<f64>>], centers: &[usize]) -> Result<Var> {
        let (nodes, sub) = graph.ball(centers, self.hops);
        let h0 = self.cnn.init_reps(tape, codes, &nodes);
        let h = self.rgat.forward(tape, &sub, h0)?;
        let pos: Vec<usize> = centers.iter().map(|c| nodes.binary_search(c).expect("center is in its ball")).collect();
        Ok(tape.gather(h, &pos))
    }

    /// One row per candidate. Candidates outside the KG, or without any
    /// triple, keep the attribute representation of their (possibly empty)
    /// attribute stack; the rest go through the graph network.
    pub fn encode_candidates(&self, tape: &mut Tape<'_>, graph: &KgGraph, codes: &[Vec<Vec<f64>>], candidates: &[Option<usize>]) -> Result<Var> {
        let in_graph = |c: &Option<usize>| c.filter(|&n| n < graph.nodes && (graph.has_relations(n) || codes.get(n).is_some_and(|c| !c.is_empty())));
        let centers: Vec<usize> = candidates.iter().filter_map(in_graph).collect::<BTreeSet<_>>().into_iter().collect();
        let encoded = if centers.is_empty() { None } else { Some(self.encode(tape, graph, codes, &centers)?) };
        let empty: Vec<Vec<f64>> = Vec::new();
        let mut rows = Vec::with_capacity(candidates.len());
        for c in candidates {
            let row = match (in_graph(c), encoded) {
                (Some(n), Some(h)) => tape.gather(h, &[centers.binary_search(&n).expect("center listed")]),
                _ => self.cnn.entity_attr_rep(tape, c.and_then(|n| codes.get(n)).unwrap_or(&empty)),
            };
            rows.push(row);
        }
        Ok(tape.vcat(&rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{EmbeddingKind, EmbeddingTable};
    use crate::gradcheck::check_gradients;
    use crate::params::ParamKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn lexicon(dim: usize, words: &[&str], seed: u64) -> Lexicon {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = EmbeddingTable::new(EmbeddingKind::Word);
        for w in words {
            t.insert(*w, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        Lexicon::new(t, EmbeddingTable::new(EmbeddingKind::Char)).unwrap()
    }

    fn small() -> Config {
        Config { d_word: 4, d_char: 4, d_auto: 3, ae_hidden: 4, n_max: 3, n_kernel: 2, d_kernel: 1, d_ent: 2, d_rgat: 2, d_rel: 2, n_layer: 2, n_head: 2, ..Config::desk() }
    }

    #[test]
    fn sequence_tokens() {
        let lex = lexicon(4, &["color", "red"], 1);
        assert_eq!(attribute_sequence(&lex, "color", "red").rows(), 2);
        assert_eq!(attribute_sequence(&lex, "color", "").rows(), 1);
        assert_eq!(attribute_sequence(&lex, "", "").rows(), 1);
    }

    #[test]
    fn codes_have_configured_width_and_are_deterministic() {
        let cfg = Config::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = AttrAutoEncoder::new(&cfg, &mut rng);
        let lex = lexicon(100, &["color", "red", "blue"], 2);
        let a = ae.encode(&lex, "color", "red");
        assert_eq!(a.len(), 50);
        assert_eq!(a, ae.encode(&lex, "color", "red"));
        assert_ne!(a, ae.encode(&lex, "color", "blue"));
    }

    #[test]
    fn autoencoder_gradients() {
        let cfg = Config { d_word: 3, d_auto: 2, ae_hidden: 2, ..Config::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ae = AttrAutoEncoder::new(&cfg, &mut rng);
        let seq = Matrix::from_rows(&[vec![0.2, -0.4, 0.9], vec![0.5, 0.1, -0.3], vec![-0.7, 0.6, 0.0]]);
        let r = check_gradients(&ae.store, 1e-5, |tape| ae.loss(tape, &seq));
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn pretraining_single_triple_memorizes() {
        let cfg = Config { batch_size: 1, ..small() };
        let lex = lexicon(4, &["size", "big"], 4);
        let seq = attribute_sequence(&lex, "size", "big");
        let (_, curve) = pretrain_on_sequences(&[seq], &cfg, 300, 1).unwrap();
        assert!(curve.last() < curve.initial() / 100.0, "{:?}", (curve.initial(), curve.last()));
    }

    #[test]
    fn pretraining_is_deterministic_and_rejects_empty() {
        let cfg = small();
        let lex = lexicon(4, &["a", "b", "c"], 4);
        let seqs = vec![attribute_sequence(&lex, "a", "b"), attribute_sequence(&lex, "a", "c")];
        let (a, ca) = pretrain_on_sequences(&seqs, &cfg, 3, 7).unwrap();
        let (b, cb) = pretrain_on_sequences(&seqs, &cfg, 3, 7).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(ca, cb);
        assert!(matches!(pretrain_on_sequences(&[], &cfg, 3, 7), Err(Error::Data(_))));
    }

    fn cnn(cfg: &Config, seed: u64) -> (ParamStore, AttrCnn) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = AttrCnn::new(&mut store, cfg, &mut rng);
        (store, c)
    }

    #[test]
    fn empty_attributes_give_bias_constant() {
        let (mut store, c) = cnn(&small(), 1);
        *store.get_mut(c.conv.b) = Matrix::from_rows(&[vec![0.3, -0.2]]);
        let mut tape = Tape::new(&store);
        let r = c.entity_attr_rep(&mut tape, &[]);
        assert_eq!(tape.value(r).row(0), [0.3, -0.2]);
    }

    proptest! {
        #[test]
        fn kernel_one_is_order_invariant(seed in 0u64..200, count in 1usize..4) {
            let cfg = small();
            let (store, c) = cnn(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let codes: Vec<Vec<f64>> = (0..count).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut rev = codes.clone();
            rev.reverse();
            let mut tape = Tape::new(&store);
            let a = c.entity_attr_rep(&mut tape, &codes);
            let b = c.entity_attr_rep(&mut tape, &rev);
            prop_assert_eq!(tape.value(a), tape.value(b));
            prop_assert_eq!(tape.shape(a), (1, cfg.d_ent));
        }
    }

    #[test]
    fn wider_kernel_sees_order() {
        let cfg = Config { d_kernel: 2, ..small() };
        let (store, c) = cnn(&cfg, 5);
        let codes = vec![vec![1.0, 0.0, 0.0], vec![0.0, -1.0, 0.5]];
        let rev = vec![codes[1].clone(), codes[0].clone()];
        let mut tape = Tape::new(&store);
        let a = c.entity_attr_rep(&mut tape, &codes);
        let b = c.entity_attr_rep(&mut tape, &rev);
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn truncates_in_file_order() {
        let cfg = small();
        let (_, c) = cnn(&cfg, 5);
        let codes: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 3]).collect();
        let s = c.stack(&codes);
        assert_eq!(s.shape(), (3, 3));
        assert_eq!(s.row(2), [2.0; 3]);
    }

    #[test]
    fn graph_augmentation() {
        let g = KgGraph::augmented(3, 2, [(0, 1, 2), (0, 1, 2)]);
        // one forward, one inverse, three self-loops
        assert_eq!(g.edges.len(), 5);
        assert_eq!(g.edge_types(), 5);
        assert!(g.edges.contains(&Edge { src: 0, dst: 2, kind: 1 }));
        assert!(g.edges.contains(&Edge { src: 2, dst: 0, kind: 3 }));
        assert_eq!(g.neighbors(1).count(), 1);
    }

    /// Node-by-node evaluation of the attention update with plain loops.
    fn dense_oracle(store: &ParamStore, stack: &RgatStack, graph: &KgGraph, h0: &Matrix) -> (Matrix, Vec<Vec<Vec<f64>>>) {
        let n = graph.nodes;
        let mut adj = vec![vec![None; n]; n];
        for e in &graph.edges {
            adj[e.dst][e.src] = Some(e.kind);
        }
        let rel = store.get(stack.relation_table);
        let mut h = h0.clone();
        let mut sums = Vec::new();
        for heads in &stack.layers {
            let mut next = Matrix::zeros(n, stack.d_rgat);
            for head in heads {
                let w = store.get(head.w_in);
                let z = h.matmul(w);
                let a_dst = store.get(head.attn_dst).data().to_vec();
                let a_src = store.get(head.attn_src).data().to_vec();
                let a_rel = store.get(head.attn_rel).data().to_vec();
                let mut per_node = Vec::new();
                for i in 0..n {
                    let mut scores = Vec::new();
                    for j in 0..n {
                        if let Some(r) = adj[i][j] {
                            let mut e = 0.0;
                            for k in 0..stack.d_rgat {
                                e += a_dst[k] * z.get(i, k) + a_src[k] * z.get(j, k);
                            }
                            for k in 0..a_rel.len() {
                                e += a_rel[k] * rel.get(r, k);
                            }
                            let e = if e > 0.0 { e } else { LEAKY_SLOPE * e };
                            scores.push((j, e));
                        }
                    }
                    let mx = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
                    let mut acc = vec![0.0; stack.d_rgat];
                    let mut total = 0.0;
                    for &(j, e) in &scores {
                        let alpha = (e - mx).exp() / denom;
                        total += alpha;
                        for k in 0..stack.d_rgat {
                            acc[k] += alpha * z.get(j, k);
                        }
                    }
                    per_node.push(total);
                    for k in 0..stack.d_rgat {
                        let v = next.get(i, k) + acc[k].max(0.0) / heads.len() as f64;
                        next.set(i, k, v);
                    }
                }
                sums.push(per_node);
            }
            h = next;
        }
        (h, vec![sums])
    }

    fn toy_stack(cfg: &Config, relation_types: usize, seed: u64) -> (ParamStore, RgatStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = RgatStack::new(&mut store, cfg, relation_types, &mut rng);
        (store, s)
    }

    #[test]
    fn rgat_matches_dense_oracle() {
        let cfg = Config { d_ent: 3, d_rgat: 3, n_kernel: 3, d_rel: 2, n_layer: 2, n_head: 2, ..Config::desk() };
        for seed in 0..20u64 {
            let (store, stack) = toy_stack(&cfg, 2, seed);
            let g = KgGraph::augmented(3, 2, [(0, 0, 1), (1, 1, 2), (2, 0, 0)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let h0 = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut tape = Tape::new(&store);
            let x = tape.constant(h0.clone());
            let mut trace = AttentionTrace::new();
            let out = stack.forward_traced(&mut tape, &g, x, Some(&mut trace)).unwrap();
            let (expected, sums) = dense_oracle(&store, &stack, &g, &h0);
            assert!(tape.value(out).max_abs_diff(&expected) < 1e-10);
            for s in sums.iter().flatten().flatten() {
                assert!((s - 1.0).abs() < 1e-12);
            }
            for layer in &trace {
                for alpha in layer {
                    let mut per_dst = vec![0.0; 3];
                    for (k, e) in g.edges.iter().enumerate() {
                        per_dst[e.dst] += alpha.get(k, 0);
                    }
                    assert!(per_dst.iter().all(|s| (s - 1.0).abs() < 1e-6));
                }
            }
        }
    }

    #[test]
    fn singleton_neighborhood_has_unit_attention() {
        let cfg = Config { d_ent: 2, d_rgat: 2, n_kernel: 2, n_layer: 1, n_head: 1, ..Config::desk() };
        let (store, stack) = toy_stack(&cfg, 1, 0);
        let g = KgGraph::augmented(2, 1, []);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]));
        let mut trace = AttentionTrace::new();
        stack.forward_traced(&mut tape, &g, x, Some(&mut trace)).unwrap();
        assert_eq!(trace[0][0].data(), [1.0, 1.0]);
    }

    #[test]
    fn automorphic_nodes_agree() {
        // A 4-cycle with one relation type and identical inputs.
        let cfg = Config { d_ent: 2, d_rgat: 2, n_kernel: 2, n_layer: 2, n_head: 2, ..Config::desk() };
        let (store, stack) = toy_stack(&cfg, 1, 3);
        let g = KgGraph::augmented(4, 1, [(0, 0, 1), (1, 0, 2), (2, 0, 3), (3, 0, 0)]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::filled(4, 2, 0.7));
        let out = stack.forward(&mut tape, &g, x).unwrap();
        let v = tape.value(out);
        for r in 1..4 {
            assert!((v.get(r, 0) - v.get(0, 0)).abs() < 1e-14 && (v.get(r, 1) - v.get(0, 1)).abs() < 1e-14);
        }
    }

    #[test]
    fn rgat_gradients() {
        let cfg = Config { d_ent: 3, d_rgat: 3, n_kernel: 3, d_rel: 2, n_layer: 2, n_head: 2, ..Config::desk() };
        let (mut store, stack) = toy_stack(&cfg, 2, 11);
        let h0 = store.add("h0", ParamKind::Weight, Matrix::from_vec(5, 3, (0..15).map(|i| ((i * 7) as f64 * 0.31).sin()).collect()));
        let g = KgGraph::augmented(5, 2, [(0, 0, 1), (1, 1, 2), (3, 0, 2), (4, 1, 0)]);
        let r = check_gradients(&store, 1e-5, |tape| {
            let x = tape.param(h0);
            let out = stack.forward(tape, &g, x).unwrap();
            let sq = tape.mul(out, out);
            tape.sum_all(sq)
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn ball_gives_exact_center_outputs() {
        let cfg = Config { d_ent: 2, d_rgat: 2, n_kernel: 2, d_kernel: 1, n_max: 2, d_auto: 2, n_layer: 2, n_head: 1, ..Config::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = KgEncoder::new(&mut store, &cfg, 1, &mut rng);
        // Path 0-1-2-3-4-5 plus an isolated node 6.
        let g = KgGraph::augmented(7, 1, (0..5).map(|i| (i, 0, i + 1)));
        let codes: Vec<Vec<Vec<f64>>> = (0..7).map(|i| vec![vec![i as f64 * 0.1, -(i as f64) * 0.2]]).collect();
        let mut tape = Tape::new(&store);
        let all: Vec<usize> = (0..7).collect();
        let full = enc.encode(&mut tape, &g, &codes, &all).unwrap();
        let part = enc.encode(&mut tape, &g, &codes, &[2, 6]).unwrap();
        assert_eq!(tape.value(part).row(0), tape.value(full).row(2));
        assert_eq!(tape.value(part).row(1), tape.value(full).row(6));
        let (nodes, _) = g.ball(&[2], 2);
        assert_eq!(nodes, [0, 1, 2, 3, 4]);
    }
}
