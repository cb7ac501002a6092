//! Baseline document encoders (CNN, LSTM, BiLSTM, context-aware) and the
//! multi-label relation predictor with its loss.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::datamodel::{entity_pairs, Config, Document, EncoderVariant, Entity, Span};
use crate::embeddings::Lexicon;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, Conv1d, Linear, Lstm, Padding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Constant per-token inputs: word vectors plus the entity type and cluster
/// index of the first entity mention covering each token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInputFeatures {
    pub words: Matrix,
    pub types: Vec<Option<usize>>,
    pub clusters: Vec<Option<usize>>,
}

impl EncoderInputFeatures {
    pub fn build(doc: &Document, lexicon: &Lexicon, entity_types: &[String], max_clusters: usize) -> Self {
        let j = doc.num_tokens();
        let mut words = Matrix::zeros(j, lexicon.dim());
        for (t, tok) in doc.tokens.iter().enumerate() {
            words.row_mut(t).copy_from_slice(&lexicon.lookup(tok));
        }
        let mut types = vec![None; j];
        let mut clusters = vec![None; j];
        for (e, ent) in doc.entities.iter().enumerate() {
            let ty = entity_types.iter().position(|t| *t == ent.entity_type);
            for m in &ent.mentions {
                for t in m.span.start..m.span.end.min(j) {
                    if clusters[t].is_none() {
                        clusters[t] = Some(e.min(max_clusters - 1));
                        types[t] = ty;
                    }
                }
            }
        }
        Self { words, types, clusters }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum EncoderBody {
    Cnn(Vec<Conv1d>),
    Lstm(Lstm),
    Bilstm { rnn: BiLstm, proj: Linear },
    ContextAware { rnn: BiLstm, proj: Linear },
}

/// The encoding layer: features → `H` (`J × d_token`).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseEncoder {
    pub variant: EncoderVariant,
    pub type_table: ParamId,
    pub cluster_table: ParamId,
    n_types: usize,
    max_clusters: usize,
    d_token: usize,
    body: EncoderBody,
}

impl BaseEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &Config, n_types: usize, rng: &mut R) -> Self {
        let type_table = store.table("encoder.type_emb", n_types.max(1), config.d_type, rng);
        let cluster_table = store.table("encoder.cluster_emb", config.max_clusters, config.d_cluster, rng);
        let d_in = config.d_word + config.d_type + config.d_cluster;
        let d = config.d_token;
        let body = match config.encoder {
            EncoderVariant::Cnn => EncoderBody::Cnn(
                (0..config.cnn_layers)
                    .map(|l| {
                        let cin = if l == 0 { d_in } else { d };
                        Conv1d::new(store, &format!("encoder.conv{l}"), config.cnn_kernel, cin, d, Padding::Same, rng)
                    })
                    .collect(),
            ),
            EncoderVariant::Lstm => EncoderBody::Lstm(Lstm::new(store, "encoder.lstm", d_in, d, rng)),
            EncoderVariant::Bilstm => EncoderBody::Bilstm {
                rnn: BiLstm::new(store, "encoder.bilstm", d_in, d, rng),
                proj: Linear::new(store, "encoder.proj", 2 * d, d, true, rng),
            },
            EncoderVariant::ContextAware => EncoderBody::ContextAware {
                rnn: BiLstm::new(store, "encoder.bilstm", d_in, d, rng),
                proj: Linear::new(store, "encoder.proj", 2 * d, d, true, rng),
            },
        };
        Self { variant: config.encoder, type_table, cluster_table, n_types: n_types.max(1), max_clusters: config.max_clusters, d_token: d, body }
    }

    pub fn d_token(&self) -> usize {
        self.d_token
    }

    /// Feature matrix `J × (d_word + d_type + d_cluster)`; non-entity tokens
    /// get zero type and cluster rows.
    pub fn features(&self, tape: &mut Tape<'_>, f: &EncoderInputFeatures) -> Var {
        let words = tape.constant(f.words.clone());
        let embed = |tape: &mut Tape<'_>, table: ParamId, n: usize, idx: &[Option<usize>]| {
            let t = tape.param(table);
            let dim = tape.shape(t).1;
            let zero = tape.constant(Matrix::zeros(1, dim));
            let padded = tape.vcat(&[t, zero]);
            let rows: Vec<usize> = idx.iter().map(|i| i.unwrap_or(n)).collect();
            tape.gather(padded, &rows)
        };
        let types = embed(tape, self.type_table, self.n_types, &f.types);
        let clusters = embed(tape, self.cluster_table, self.max_clusters, &f.clusters);
        tape.hcat(&[words, types, clusters])
    }

    pub fn encode(&self, tape: &mut Tape<'_>, f: &EncoderInputFeatures) -> Result<Var> {
        if f.words.rows() == 0 {
            return Err(Error::Data("cannot encode an empty document".to_string()));
        }
        let x = self.features(tape, f);
        Ok(self.encode_features(tape, x))
    }

    pub fn encode_features(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        match &self.body {
            EncoderBody::Cnn(layers) => {
                let mut h = x;
                for conv in layers {
                    h = conv.forward(tape, h);
                    h = tape.tanh(h);
                }
                h
            }
            EncoderBody::Lstm(lstm) => lstm.forward(tape, x, false),
            EncoderBody::Bilstm { rnn, proj } => {
                let both = rnn.forward(tape, x);
                proj.forward(tape, both)
            }
            EncoderBody::ContextAware { rnn, proj } => {
                let both = rnn.forward(tape, x);
                let h = proj.forward(tape, both);
                let ht = tape.transpose(h);
                let scores = tape.matmul(h, ht);
                let scores = tape.scale(scores, 1.0 / libm::sqrt(self.d_token as f64));
                let attn = tape.softmax_rows(scores);
                let ctx = tape.matmul(attn, h);
                tape.add(h, ctx)
            }
        }
    }

    /// Concatenated forward/backward recurrent states before projection.
    pub fn bilstm_states(&self, tape: &mut Tape<'_>, x: Var) -> Option<(Var, Var)> {
        match &self.body {
            EncoderBody::Bilstm { rnn, .. } | EncoderBody::ContextAware { rnn, .. } => Some(rnn.states(tape, x)),
            _ => None,
        }
    }
}

/// Mean of the token rows in `span`.
pub fn span_rep(tape: &mut Tape<'_>, h: Var, span: Span) -> Var {
    let idx: Vec<usize> = (span.start..span.end).collect();
    let rows = tape.gather(h, &idx);
    tape.mean_rows(rows)
}

/// Mean over mentions of the mean token row of each mention.
pub fn entity_representation(tape: &mut Tape<'_>, h: Var, entity: &Entity) -> Var {
    let reps: Vec<Var> = entity.mentions.iter().map(|m| span_rep(tape, h, m.span)).collect();
    if reps.len() == 1 {
        return reps[0];
    }
    let stacked = tape.vcat(&reps);
    tape.mean_rows(stacked)
}

/// Scores every relation for an ordered pair as
/// `headᵀ W_r tail + u_r · [head; tail] + b_r`, then applies the logistic
/// function per relation.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationPredictor {
    pub bilinear: ParamId,
    pub linear: ParamId,
    pub bias: ParamId,
    pub n_relations: usize,
    pub dim: usize,
}

impl RelationPredictor {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, n_relations: usize, rng: &mut R) -> Self {
        let bilinear = store.weight("predictor.bilinear", dim, dim * n_relations, rng);
        let linear = store.weight("predictor.linear", 2 * dim, n_relations, rng);
        let bias = store.bias("predictor.bias", n_relations);
        Self { bilinear, linear, bias, n_relations, dim }
    }

    /// Logits `P × R` for stacked head and tail representations (`P × d`).
    pub fn logits(&self, tape: &mut Tape<'_>, heads: Var, tails: Var) -> Var {
        let w = tape.param(self.bilinear);
        let hw = tape.matmul(heads, w);
        let bil = tape.block_dot(hw, tails, self.n_relations);
        let pair = tape.hcat(&[heads, tails]);
        let lin = tape.linear(pair, self.linear, Some(self.bias));
        tape.add(bil, lin)
    }

    pub fn probabilities(&self, tape: &mut Tape<'_>, heads: Var, tails: Var) -> Var {
        let z = self.logits(tape, heads, tails);
        tape.act(z, Activation::Sigmoid)
    }
}

/// Probability vector over relations for one ordered pair.
pub fn predict_pair(store: &ParamStore, predictor: &RelationPredictor, head: &[f64], tail: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let h = tape.constant(Matrix::row_vector(head.to_vec()));
    let t = tape.constant(Matrix::row_vector(tail.to_vec()));
    let p = predictor.probabilities(&mut tape, h, t);
    tape.value(p).row(0).to_vec()
}

/// Entity representations of every ordered pair, stacked as `(heads, tails)`.
pub fn pair_reps(tape: &mut Tape<'_>, h: Var, doc: &Document) -> Option<(Var, Var, Vec<(usize, usize)>)> {
    let pairs = entity_pairs(doc);
    if pairs.is_empty() {
        return None;
    }
    let reps: Vec<Var> = doc.entities.iter().map(|e| entity_representation(tape, h, e)).collect();
    let stacked = tape.vcat(&reps);
    let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let hs = tape.gather(stacked, &heads);
    let ts = tape.gather(stacked, &tails);
    Some((hs, ts, pairs))
}

/// 0/1 targets `P × R`, one row per ordered pair in `pairs`.
pub fn gold_matrix(doc: &Document, pairs: &[(usize, usize)], relation_index: impl Fn(&str) -> Option<usize>, n_relations: usize) -> Matrix {
    let mut y = Matrix::zeros(pairs.len(), n_relations);
    let n = doc.entities.len();
    for f in &doc.facts {
        if let Some(r) = relation_index(&f.relation) {
            if f.head != f.tail && f.head < n && f.tail < n {
                let row = f.head * (n - 1) + if f.tail > f.head { f.tail - 1 } else { f.tail };
                debug_assert_eq!(pairs[row], (f.head, f.tail));
                y.set(row, r, 1.0);
            }
        }
    }
    y
}

/// Mean binary cross-entropy over (pair, relation) cells.
pub fn re_loss(tape: &mut Tape<'_>, logits: Var, gold: Matrix) -> Var {
    tape.bce_with_logits(logits, gold)
}

/// Entity type labels in first-seen order across `docs`.
pub fn collect_entity_types<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in docs {
        for e in &d.entities {
            if !out.contains(&e.entity_type) {
                out.push(e.entity_type.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Mention, RelationFact};
    use crate::embeddings::{EmbeddingKind, EmbeddingTable};
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lexicon(dim: usize) -> Lexicon {
        let mut words = EmbeddingTable::new(EmbeddingKind::Word);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for w in ["a", "b", "c", "d", "x"] {
            words.insert(w, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        Lexicon::new(words, EmbeddingTable::new(EmbeddingKind::Char)).unwrap()
    }

    fn doc(tokens: &[&str]) -> Document {
        let tokens: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        let n = tokens.len();
        let m = |s: usize, e: usize, toks: &[String]| Mention { sent_idx: 0, span: Span::new(s, e), surface: toks[s..e].join(" ") };
        Document {
            doc_id: "t".into(),
            entities: vec![
                Entity { entity_type: "A".into(), mentions: vec![m(0, 1, &tokens)], kg_link: None },
                Entity { entity_type: "B".into(), mentions: vec![m(2, 4, &tokens), m(n - 1, n, &tokens)], kg_link: None },
                Entity { entity_type: "A".into(), mentions: vec![m(5, 6, &tokens)], kg_link: None },
            ],
            facts: vec![RelationFact { head: 0, tail: 1, relation: "r1".into() }, RelationFact { head: 2, tail: 0, relation: "r0".into() }],
            sentence_bounds: vec![Span::new(0, n)],
            tokens,
            free_mentions: vec![],
        }
    }

    fn small_config(variant: EncoderVariant) -> Config {
        Config { d_word: 4, d_char: 4, d_type: 2, d_cluster: 2, max_clusters: 4, d_token: 4, encoder: variant, ..Config::desk() }
    }

    fn run_encoder(variant: EncoderVariant, d: &Document) -> Matrix {
        let cfg = small_config(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = BaseEncoder::new(&mut store, &cfg, 2, &mut rng);
        let feats = EncoderInputFeatures::build(d, &lexicon(4), &["A".into(), "B".into()], cfg.max_clusters);
        let mut tape = Tape::new(&store);
        let h = enc.encode(&mut tape, &feats).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn every_variant_has_token_rows() {
        let d = doc(&["a", "b", "c", "d", "a", "b", "c", "d", "a", "b", "c", "x"]);
        for v in [EncoderVariant::Cnn, EncoderVariant::Lstm, EncoderVariant::Bilstm, EncoderVariant::ContextAware] {
            let h = run_encoder(v, &d);
            assert_eq!(h.shape(), (12, 4), "{v:?}");
            assert!(h.is_finite());
        }
    }

    #[test]
    fn empty_document_is_rejected() {
        let cfg = small_config(EncoderVariant::Lstm);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = BaseEncoder::new(&mut store, &cfg, 1, &mut rng);
        let feats = EncoderInputFeatures { words: Matrix::zeros(0, 4), types: vec![], clusters: vec![] };
        let mut tape = Tape::new(&store);
        assert!(matches!(enc.encode(&mut tape, &feats), Err(Error::Data(_))));
    }

    #[test]
    fn cnn_constant_input_gives_equal_interior_rows() {
        let cfg = small_config(EncoderVariant::Cnn);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = BaseEncoder::new(&mut store, &cfg, 1, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::filled(12, 4 + 2 + 2, 0.3));
        let h = enc.encode_features(&mut tape, x);
        let h = tape.value(h);
        // Two layers of width-3 kernels: rows 2..10 never see padding.
        for r in 3..10 {
            assert!(Matrix::row_vector(h.row(r).to_vec()).max_abs_diff(&Matrix::row_vector(h.row(2).to_vec())) < 1e-12);
        }
        assert!(Matrix::row_vector(h.row(0).to_vec()).max_abs_diff(&Matrix::row_vector(h.row(5).to_vec())) > 1e-9);
    }

    #[test]
    fn bilstm_reversal_swaps_directions() {
        let cfg = small_config(EncoderVariant::Bilstm);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = BaseEncoder::new(&mut store, &cfg, 1, &mut rng);
        let rnn = match &enc.body {
            EncoderBody::Bilstm { rnn, .. } => rnn.clone(),
            _ => unreachable!(),
        };
        let x: Vec<Vec<f64>> = (0..6).map(|r| (0..8).map(|c| ((r * 8 + c) as f64 * 0.37).sin()).collect()).collect();
        let mut rev = x.clone();
        rev.reverse();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Matrix::from_rows(&x));
        let rv = tape.constant(Matrix::from_rows(&rev));
        let (f, b) = enc.bilstm_states(&mut tape, xv).unwrap();
        // Each direction run over the reversed input reproduces the opposite
        // sweep over the original, with rows in reverse order.
        let f_on_rev = rnn.fwd.forward(&mut tape, rv, true);
        let b_on_rev = rnn.bwd.forward(&mut tape, rv, false);
        for r in 0..6 {
            let row = |v: Var, i: usize, tape: &Tape<'_>| Matrix::row_vector(tape.value(v).row(i).to_vec());
            assert!(row(f, r, &tape).max_abs_diff(&row(f_on_rev, 5 - r, &tape)) < 1e-12);
            assert!(row(b, r, &tape).max_abs_diff(&row(b_on_rev, 5 - r, &tape)) < 1e-12);
        }
    }

    #[test]
    fn entity_representation_means() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let h = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 4.0], vec![0.0, 8.0]]));
        let m = |s, e| Mention { sent_idx: 0, span: Span::new(s, e), surface: String::new() };
        let single = Entity { entity_type: String::new(), mentions: vec![m(1, 2)], kg_link: None };
        let two = Entity { entity_type: String::new(), mentions: vec![m(0, 1), m(3, 4)], kg_link: None };
        let wide = Entity { entity_type: String::new(), mentions: vec![m(1, 3)], kg_link: None };
        let a = entity_representation(&mut tape, h, &single);
        let b = entity_representation(&mut tape, h, &two);
        let c = entity_representation(&mut tape, h, &wide);
        assert_eq!(tape.value(a).row(0), [3.0, 2.0]);
        assert_eq!(tape.value(b).row(0), [0.5, 4.0]);
        assert_eq!(tape.value(c).row(0), [4.0, 3.0]);
    }

    #[test]
    fn predictor_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = RelationPredictor::new(&mut store, 3, 2, &mut rng);
        *store.get_mut(p.bilinear) = Matrix::zeros(3, 6);
        *store.get_mut(p.linear) = Matrix::zeros(6, 2);
        let probs = predict_pair(&store, &p, &[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0]);
        assert_eq!(probs, [0.5, 0.5]);
        store.get_mut(p.bias).set(0, 1, 10.0);
        let probs = predict_pair(&store, &p, &[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0]);
        // sigmoid(10) = 1 / (1 + e^-10)
        assert!((probs[1] - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn predictor_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = RelationPredictor::new(&mut store, 3, 2, &mut rng);
        let a = [1.0, -0.5, 0.25];
        let b = [0.0, 2.0, -1.0];
        let ab = predict_pair(&store, &p, &a, &b);
        let ba = predict_pair(&store, &p, &b, &a);
        assert!(ab.iter().zip(&ba).any(|(x, y)| (x - y).abs() > 1e-6));
        assert!(ab.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn gold_matrix_rows_follow_pair_order() {
        let d = doc(&["a", "b", "c", "d", "a", "b", "c", "x"]);
        let pairs = entity_pairs(&d);
        let y = gold_matrix(&d, &pairs, |r| ["r0", "r1"].iter().position(|x| *x == r), 2);
        assert_eq!(y.get(0, 1), 1.0); // (0,1) r1
        assert_eq!(y.get(4, 0), 1.0); // (2,0) r0
        assert_eq!(y.sum(), 2.0);
    }

    #[test]
    fn re_loss_at_half_is_ln2() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Matrix::zeros(3, 4));
        let mut gold = Matrix::zeros(3, 4);
        gold.set(1, 2, 1.0);
        let l = re_loss(&mut tape, z, gold);
        assert!((tape.value(l).scalar() - core::f64::consts::LN_2).abs() < 1e-12);
        let confident = tape.constant(Matrix::from_rows(&[vec![40.0, -40.0]]));
        let l = re_loss(&mut tape, confident, Matrix::from_rows(&[vec![1.0, 0.0]]));
        assert!(tape.value(l).scalar() < 1e-15);
    }

    #[test]
    fn encode_predict_loss_gradients() {
        let d = doc(&["a", "b", "c", "d", "a", "b", "x"]);
        for v in [EncoderVariant::Cnn, EncoderVariant::Bilstm, EncoderVariant::ContextAware] {
            let cfg = Config { d_word: 3, d_char: 3, d_type: 2, d_cluster: 2, max_clusters: 4, d_token: 2, cnn_layers: 1, encoder: v, ..Config::desk() };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::new();
            let enc = BaseEncoder::new(&mut store, &cfg, 2, &mut rng);
            let pred = RelationPredictor::new(&mut store, 2, 2, &mut rng);
            let feats = EncoderInputFeatures::build(&d, &lexicon(3), &["A".into(), "B".into()], cfg.max_clusters);
            let report = check_gradients(&store, 1e-5, |tape| {
                let h = enc.encode(tape, &feats).unwrap();
                let (hs, ts, pairs) = pair_reps(tape, h, &d).unwrap();
                let z = pred.logits(tape, hs, ts);
                let gold = gold_matrix(&d, &pairs, |r| ["r0", "r1"].iter().position(|x| *x == r), 2);
                re_loss(tape, z, gold)
            });
            assert!(report.max_rel_error < 1e-4, "{v:?} {report:?}");
        }
    }
}
