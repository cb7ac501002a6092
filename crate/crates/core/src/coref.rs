//! Coreference distillation and context exchange.
//!
//! A student scorer is trained to match fixed teacher probabilities on
//! coreference triples. Each source mention is then enriched with the
//! representation of its most probable counterpart, and the enriched mention
//! representations are written back onto their tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::datamodel::{Config, CoreferenceTriple, Document, MentionRef, Span};
use crate::encoders::span_rep;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Probabilities are clamped to `[KL_EPS, 1 − KL_EPS]` inside the KL term.
pub const KL_EPS: f64 = 1e-7;

/// Tokens strictly between the nearer boundaries of two disjoint spans,
/// floored at 1.
pub fn token_distance(a: Span, b: Span) -> Result<usize> {
    if a.overlaps(&b) {
        return Err(Error::Span(format!("overlapping spans [{}, {}) and [{}, {})", a.start, a.end, b.start, b.end)));
    }
    let gap = if a.end <= b.start { b.start - a.end } else { a.start - b.end };
    Ok(gap.max(1))
}

/// `floor(log2 ψ)` clamped to `[0, beta]`.
pub fn distance_bin(psi: usize, beta: usize) -> usize {
    let psi = psi.max(1);
    let log = (usize::BITS - 1 - psi.leading_zeros()) as usize;
    log.min(beta)
}

/// One trainable vector per distance bin.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBinTable {
    pub table: ParamId,
    pub beta: usize,
    pub dim: usize,
}

impl DistanceBinTable {
    pub fn new<R: Rng>(store: &mut ParamStore, beta: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.table("coref.dist_emb", beta + 1, dim, rng);
        Self { table, beta, dim }
    }

    /// Rows of the table for each distance.
    pub fn embed(&self, tape: &mut Tape<'_>, distances: &[usize]) -> Var {
        let t = tape.param(self.table);
        let idx: Vec<usize> = distances.iter().map(|&d| distance_bin(d, self.beta)).collect();
        tape.gather(t, &idx)
    }
}

/// Student coreference scorer.
///
/// `logit = Σ_k tanh(W·[s; t; Δ(ψ)] + b)_k + u·[s; t] + c`: a hidden layer of
/// width `d_MLP` summed to a scalar, plus a linear term on the mention pair.
/// Its weight matrices hold exactly `d_MLP(2·d_token + d_dist) + 2·d_token`
/// entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CorefStudent {
    pub hidden: Linear,
    pub pair: ParamId,
    pub out_bias: ParamId,
    pub bins: DistanceBinTable,
    pub d_token: usize,
    pub d_mlp: usize,
}

impl CorefStudent {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &Config, rng: &mut R) -> Self {
        let bins = DistanceBinTable::new(store, config.beta, config.d_dist, rng);
        let input = 2 * config.d_token + config.d_dist;
        let hidden = Linear::new(store, "coref.hidden", input, config.d_mlp, true, rng);
        let pair = store.weight("coref.pair.w", 2 * config.d_token, 1, rng);
        let out_bias = store.bias("coref.out.b", 1);
        Self { hidden, pair, out_bias, bins, d_token: config.d_token, d_mlp: config.d_mlp }
    }

    /// Entries in the weight matrices (hidden layer and pair term).
    pub fn weight_count(&self) -> usize {
        self.hidden.fan_in * self.hidden.fan_out + 2 * self.d_token
    }

    /// Hidden and output bias entries.
    pub fn bias_count(&self) -> usize {
        self.d_mlp + 1
    }

    /// Student logits (`P × 1`) for stacked source and target reps (`P × d`).
    pub fn logits(&self, tape: &mut Tape<'_>, sources: Var, targets: Var, distances: &[usize]) -> Var {
        let dist = self.bins.embed(tape, distances);
        let pair = tape.hcat(&[sources, targets]);
        let x = tape.hcat(&[pair, dist]);
        let hidden = self.hidden.forward(tape, x);
        let hidden = tape.tanh(hidden);
        let ones = tape.constant(Matrix::filled(self.d_mlp, 1, 1.0));
        let pooled = tape.matmul(hidden, ones);
        let lin = tape.linear(pair, self.pair, Some(self.out_bias));
        tape.add(pooled, lin)
    }
}

/// Student probability for one pair of mention representations.
pub fn student_prob(store: &ParamStore, student: &CorefStudent, m_s: &[f64], m_t: &[f64], psi: usize) -> f64 {
    let mut tape = Tape::new(store);
    let s = tape.constant(Matrix::row_vector(m_s.to_vec()));
    let t = tape.constant(Matrix::row_vector(m_t.to_vec()));
    let z = student.logits(&mut tape, s, t, &[psi]);
    let p = tape.sigmoid(z);
    tape.value(p).scalar()
}

/// Mean of the token rows of a mention.
pub fn mention_rep(tape: &mut Tape<'_>, h: Var, doc: &Document, r: MentionRef) -> Result<Var> {
    let m = doc.mention(r).ok_or_else(|| Error::Reference(format!("{:?} not in document {}", r, doc.doc_id)))?;
    if m.span.is_empty() || m.span.end > tape.shape(h).0 {
        return Err(Error::Span(format!("{:?} span outside the hidden states", r)));
    }
    Ok(span_rep(tape, h, m.span))
}

/// Student logits for every triple, computed on the given token states.
#[derive(Clone, Debug)]
pub struct ScoredTriples {
    pub reps: BTreeMap<MentionRef, Var>,
    /// `|C| × 1`, or `None` when there are no triples.
    pub logits: Option<Var>,
}

pub fn score_triples(tape: &mut Tape<'_>, h: Var, doc: &Document, triples: &[CoreferenceTriple], student: &CorefStudent) -> Result<ScoredTriples> {
    let mut reps = BTreeMap::new();
    let mut distances = Vec::with_capacity(triples.len());
    for tr in triples {
        for r in [tr.m_s, tr.m_t] {
            if !reps.contains_key(&r) {
                let v = mention_rep(tape, h, doc, r)?;
                reps.insert(r, v);
            }
        }
        let a = doc.mention(tr.m_s).expect("resolved above").span;
        let b = doc.mention(tr.m_t).expect("resolved above").span;
        distances.push(token_distance(a, b)?);
    }
    if triples.is_empty() {
        return Ok(ScoredTriples { reps, logits: None });
    }
    let s: Vec<Var> = triples.iter().map(|t| reps[&t.m_s]).collect();
    let t: Vec<Var> = triples.iter().map(|t| reps[&t.m_t]).collect();
    let s = tape.vcat(&s);
    let t = tape.vcat(&t);
    let logits = student.logits(tape, s, t, &distances);
    Ok(ScoredTriples { reps, logits: Some(logits) })
}

/// Sum over triples of `KL(Bernoulli(p_cr) ‖ Bernoulli(P_stu))`.
pub fn coref_loss_from_scores(tape: &mut Tape<'_>, scored: &ScoredTriples, triples: &[CoreferenceTriple]) -> Var {
    match scored.logits {
        Some(z) => tape.bernoulli_kl_sum(z, triples.iter().map(|t| t.p_cr).collect(), KL_EPS),
        None => tape.constant(Matrix::zeros(1, 1)),
    }
}

pub fn coref_loss(tape: &mut Tape<'_>, h: Var, doc: &Document, triples: &[CoreferenceTriple], student: &CorefStudent) -> Result<Var> {
    let scored = score_triples(tape, h, doc, triples, student)?;
    Ok(coref_loss_from_scores(tape, &scored, triples))
}

/// For each source mention picks the target with the largest student score
/// (ties go to the smallest target) and adds its pre-update representation.
pub fn exchange_from_scores(tape: &mut Tape<'_>, scored: &ScoredTriples, triples: &[CoreferenceTriple]) -> BTreeMap<MentionRef, Var> {
    let Some(z) = scored.logits else { return BTreeMap::new() };
    let logits = tape.value(z).clone();
    let mut best: BTreeMap<MentionRef, (f64, MentionRef)> = BTreeMap::new();
    for (i, tr) in triples.iter().enumerate() {
        let s = logits.get(i, 0);
        best.entry(tr.m_s)
            .and_modify(|(bs, bt)| {
                if s > *bs || (s == *bs && tr.m_t < *bt) {
                    *bs = s;
                    *bt = tr.m_t;
                }
            })
            .or_insert((s, tr.m_t));
    }
    best.into_iter()
        .map(|(src, (_, tgt))| {
            let v = tape.add(scored.reps[&src], scored.reps[&tgt]);
            (src, v)
        })
        .collect()
}

pub fn context_exchange(
    tape: &mut Tape<'_>,
    h: Var,
    doc: &Document,
    triples: &[CoreferenceTriple],
    student: &CorefStudent,
) -> Result<BTreeMap<MentionRef, Var>> {
    let scored = score_triples(tape, h, doc, triples, student)?;
    Ok(exchange_from_scores(tape, &scored, triples))
}

/// Overwrites every token of an updated mention with that mention's new
/// representation. A token covered by several updated mentions takes the one
/// with the earliest start, then the longest span.
pub fn write_back(tape: &mut Tape<'_>, h: Var, doc: &Document, updated: &BTreeMap<MentionRef, Var>) -> Var {
    if updated.is_empty() {
        return h;
    }
    let rows = tape.shape(h).0;
    let mut owner: Vec<Option<(usize, usize, usize)>> = alloc::vec![None; rows];
    let mut extra = Vec::with_capacity(updated.len());
    for (k, (r, v)) in updated.iter().enumerate() {
        let span = doc.mention(*r).expect("updated mentions come from the document").span;
        extra.push(*v);
        // Smaller key wins: earlier start, then longer span, then map order.
        let key = (span.start, usize::MAX - span.len(), k);
        for slot in owner.iter_mut().take(span.end.min(rows)).skip(span.start) {
            if slot.map_or(true, |o| key < o) {
                *slot = Some(key);
            }
        }
    }
    let idx: Vec<usize> = owner.iter().enumerate().map(|(j, o)| o.map_or(j, |(_, _, k)| rows + k)).collect();
    let mut parts = alloc::vec![h];
    parts.extend(extra);
    let stacked = tape.vcat(&parts);
    tape.gather(stacked, &idx)
}

/// Result of the coreference step on one document.
#[derive(Clone, Debug)]
pub struct CorefOutput {
    pub hidden: Var,
    pub loss: Var,
    pub updated: BTreeMap<MentionRef, Var>,
}

/// Distillation loss, context exchange and write-back in one pass.
pub fn coref_inject(tape: &mut Tape<'_>, h: Var, doc: &Document, triples: &[CoreferenceTriple], student: &CorefStudent) -> Result<CorefOutput> {
    let scored = score_triples(tape, h, doc, triples, student)?;
    let loss = coref_loss_from_scores(tape, &scored, triples);
    let updated = exchange_from_scores(tape, &scored, triples);
    let hidden = write_back(tape, h, doc, &updated);
    Ok(CorefOutput { hidden, loss, updated })
}
