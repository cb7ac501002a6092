//! Representation reconciliation between token states and KG entity
//! representations: stacked aggregators, the token-entity alignment loss,
//! and simpler fusion variants used for ablations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::datamodel::{Config, FusionStrategy, ReconcileActivation};
use crate::error::{Error, Result};
use crate::layers::{Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Token-to-entity alignment: entry `j` is the candidate index token `j`
/// aligns to, if any.
pub type Alignment = [Option<usize>];

pub fn activation(kind: ReconcileActivation) -> Activation {
    match kind {
        ReconcileActivation::Gelu => Activation::Gelu,
        ReconcileActivation::Identity => Activation::Identity,
    }
}

/// Sinusoidal position offsets, `rows × dim`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for pos in 0..rows {
        for i in 0..dim {
            let rate = libm::pow(10_000.0, (2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            m.set(pos, i, if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    m
}

fn check_alignment(alignment: &Alignment, tokens: usize, entities: usize) -> Result<()> {
    if alignment.len() != tokens {
        return Err(Error::Alignment(format!("alignment covers {} tokens, document has {tokens}", alignment.len())));
    }
    if let Some(e) = alignment.iter().flatten().find(|&&e| e >= entities) {
        return Err(Error::Alignment(format!("token aligned to entity {e}, only {entities} candidates")));
    }
    Ok(())
}

/// Scale of the random part of the pass-through initialization.
const PASS_THROUGH_NOISE: f64 = 0.1;

/// Rectangular identity plus the existing random entries scaled by `noise`,
/// so a fresh block starts close to passing its input through.
fn near_identity(w: &Matrix, noise: f64) -> Matrix {
    let mut m = w.scale(noise);
    for i in 0..m.rows().min(m.cols()) {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    m
}

/// One fusion-and-reconstruction block.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub token_attention: MultiHeadAttention,
    pub entity_attention: MultiHeadAttention,
    pub fuse_token: Linear,
    pub fuse_entity: Linear,
    pub rebuild_token: Linear,
    pub rebuild_entity: Linear,
}

impl Aggregator {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &Config, rng: &mut R) -> Self {
        let agg = Self {
            token_attention: MultiHeadAttention::new(store, &format!("{name}.token_attn"), config.d_token, config.n_head, rng),
            entity_attention: MultiHeadAttention::new(store, &format!("{name}.entity_attn"), config.d_ent, config.n_head, rng),
            fuse_token: Linear::new(store, &format!("{name}.fuse_token"), config.d_token, config.d_out, true, rng),
            fuse_entity: Linear::new(store, &format!("{name}.fuse_entity"), config.d_ent, config.d_out, false, rng),
            rebuild_token: Linear::new(store, &format!("{name}.rebuild_token"), config.d_out, config.d_token, true, rng),
            rebuild_entity: Linear::new(store, &format!("{name}.rebuild_entity"), config.d_out, config.d_ent, true, rng),
        };
        for l in [&agg.fuse_token, &agg.rebuild_token, &agg.fuse_entity, &agg.rebuild_entity] {
            let w = store.get_mut(l.w);
            *w = near_identity(w, PASS_THROUGH_NOISE);
        }
        for mha in [&agg.token_attention, &agg.entity_attention] {
            let w = store.get_mut(mha.o.w);
            *w = w.scale(PASS_THROUGH_NOISE);
        }
        agg
    }

    /// Entries of the query/key/value/output maps of both attentions.
    pub fn attention_weight_count(&self) -> usize {
        self.token_attention.weight_count() + self.entity_attention.weight_count()
    }

    /// Self-attention with a residual connection.
    fn attend(tape: &mut Tape<'_>, mha: &MultiHeadAttention, x: Var) -> Var {
        let a = mha.forward(tape, x);
        tape.add(x, a)
    }

    /// Returns the new token states and entity reps. `entities` may have zero
    /// rows, in which case every token takes the unaligned branch.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: Var, entities: Option<Var>, alignment: &Alignment, sigma: Activation) -> (Var, Option<Var>) {
        let j = tape.shape(tokens).0;
        let hw = Self::attend(tape, &self.token_attention, tokens);
        let mut fused = self.fuse_token.forward(tape, hw);
        let aligned: Vec<(usize, usize)> = alignment.iter().enumerate().filter_map(|(t, e)| e.map(|e| (t, e))).collect();
        let Some(ents) = entities.filter(|_| !aligned.is_empty()) else {
            let fused = tape.act(fused, sigma);
            let out = self.rebuild_token.forward(tape, fused);
            return (tape.act(out, sigma), entities);
        };
        let n_ent = tape.shape(ents).0;
        let he = Self::attend(tape, &self.entity_attention, ents);
        let pe = self.fuse_entity.forward(tape, he);
        let zero = tape.constant(Matrix::zeros(1, tape.shape(pe).1));
        let padded = tape.vcat(&[pe, zero]);
        let idx: Vec<usize> = alignment.iter().map(|e| e.unwrap_or(n_ent)).collect();
        let per_token = tape.gather(padded, &idx);
        fused = tape.add(fused, per_token);
        let fused = tape.act(fused, sigma);
        let out = self.rebuild_token.forward(tape, fused);
        let out = tape.act(out, sigma);
        debug_assert_eq!(tape.shape(out).0, j);

        // Each aligned entity becomes the mean over its aligned tokens.
        let rows: Vec<usize> = aligned.iter().map(|p| p.0).collect();
        let seg: Vec<usize> = aligned.iter().map(|p| p.1).collect();
        let picked = tape.gather(fused, &rows);
        let rebuilt = self.rebuild_entity.forward(tape, picked);
        let rebuilt = tape.act(rebuilt, sigma);
        let mut counts = vec![0usize; n_ent];
        for &e in &seg {
            counts[e] += 1;
        }
        let weights = Matrix::from_vec(seg.len(), 1, seg.iter().map(|&e| 1.0 / counts[e] as f64).collect());
        let w = tape.constant(weights);
        let scaled = tape.mul_col_broadcast(rebuilt, w);
        let means = tape.segment_sum(scaled, &seg, n_ent);
        let both = tape.vcat(&[ents, means]);
        let pick: Vec<usize> = (0..n_ent).map(|e| if counts[e] > 0 { n_ent + e } else { e }).collect();
        (out, Some(tape.gather(both, &pick)))
    }
}

/// Ablation replacements for the aggregator stack.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionVariant {
    RepAvg { project: Linear },
    RepConcat { project: Linear },
    Mlp { first: Linear, second: Linear },
}

impl FusionVariant {
    pub fn new<R: Rng>(store: &mut ParamStore, strategy: FusionStrategy, config: &Config, rng: &mut R) -> Option<Self> {
        let (dt, de) = (config.d_token, config.d_ent);
        Some(match strategy {
            FusionStrategy::Kire => return None,
            FusionStrategy::RepAvg => Self::RepAvg { project: Linear::new(store, "reconcile.rep_avg", de, dt, true, rng) },
            FusionStrategy::RepConcat => Self::RepConcat { project: Linear::new(store, "reconcile.rep_concat", dt + de, dt, true, rng) },
            FusionStrategy::Mlp => Self::Mlp {
                first: Linear::new(store, "reconcile.mlp.0", dt + de, config.d_out, true, rng),
                second: Linear::new(store, "reconcile.mlp.1", config.d_out, dt, true, rng),
            },
        })
    }

    /// Rewrites aligned token rows; unaligned rows pass through unchanged.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: Var, entities: Option<Var>, alignment: &Alignment) -> Var {
        let aligned: Vec<(usize, usize)> = alignment.iter().enumerate().filter_map(|(t, e)| e.map(|e| (t, e))).collect();
        let Some(ents) = entities.filter(|_| !aligned.is_empty()) else { return tokens };
        let j = tape.shape(tokens).0;
        let rows: Vec<usize> = aligned.iter().map(|p| p.0).collect();
        let which: Vec<usize> = aligned.iter().map(|p| p.1).collect();
        let t = tape.gather(tokens, &rows);
        let e = tape.gather(ents, &which);
        let new_rows = match self {
            Self::RepAvg { project } => {
                let pe = project.forward(tape, e);
                let s = tape.add(t, pe);
                tape.scale(s, 0.5)
            }
            Self::RepConcat { project } => {
                let cat = tape.hcat(&[t, e]);
                project.forward(tape, cat)
            }
            Self::Mlp { first, second } => {
                let cat = tape.hcat(&[t, e]);
                let hidden = first.forward(tape, cat);
                let hidden = tape.tanh(hidden);
                second.forward(tape, hidden)
            }
        };
        let stacked = tape.vcat(&[tokens, new_rows]);
        let mut idx: Vec<usize> = (0..j).collect();
        for (k, &(t, _)) in aligned.iter().enumerate() {
            idx[t] = j + k;
        }
        tape.gather(stacked, &idx)
    }
}

/// The reconciliation layer: aggregator stack (or an ablation variant) and
/// the alignment scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconciler {
    pub aggregators: Vec<Aggregator>,
    pub variant: Option<FusionVariant>,
    pub align: Linear,
    pub sigma: Activation,
    pub positions: bool,
}

/// Output of reconciliation on one document.
#[derive(Clone, Copy, Debug)]
pub struct Reconciled {
    pub tokens: Var,
    pub entities: Option<Var>,
}

impl Reconciler {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &Config, rng: &mut R) -> Self {
        let variant = FusionVariant::new(store, config.fusion_strategy, config, rng);
        let aggregators = if variant.is_none() {
            (0..config.n_agg).map(|n| Aggregator::new(store, &format!("reconcile.agg{n}"), config, rng)).collect()
        } else {
            Vec::new()
        };
        let align = Linear::new(store, "reconcile.align", config.d_token, config.d_ent, false, rng);
        Self { aggregators, variant, align, sigma: activation(config.reconcile_activation), positions: true }
    }

    /// Fuses `tokens` (`J × d_token`) with candidate entity reps
    /// (`I × d_ent`, or `None` when the document has no linked entity).
    pub fn aggregate(&self, tape: &mut Tape<'_>, tokens: Var, entities: Option<Var>, alignment: &Alignment) -> Result<Reconciled> {
        let (j, d) = tape.shape(tokens);
        let n_ent = entities.map_or(0, |e| tape.shape(e).0);
        check_alignment(alignment, j, n_ent)?;
        if let Some(v) = &self.variant {
            let t = v.forward(tape, tokens, entities, alignment);
            return Ok(Reconciled { tokens: t, entities });
        }
        let mut h = tokens;
        if self.positions {
            let p = tape.constant(sinusoidal_positions(j, d));
            h = tape.add(h, p);
        }
        let mut e = entities;
        for agg in &self.aggregators {
            let (nh, ne) = agg.forward(tape, h, e, alignment, self.sigma);
            h = nh;
            e = ne;
        }
        Ok(Reconciled { tokens: h, entities: e })
    }

    /// Alignment scores `J × I`: `Linear(h_w) · h_e`.
    pub fn alignment_scores(&self, tape: &mut Tape<'_>, tokens: Var, candidates: Var) -> Var {
        let q = self.align.forward(tape, tokens);
        let ct = tape.transpose(candidates);
        tape.matmul(q, ct)
    }

    /// Negative log-likelihood of the gold entity, summed over aligned
    /// tokens; zero when there are no candidates.
    pub fn alignment_loss(&self, tape: &mut Tape<'_>, tokens: Var, candidates: Option<Var>, gold: &Alignment) -> Result<Var> {
        let j = tape.shape(tokens).0;
        let Some(c) = candidates.filter(|c| tape.shape(*c).0 > 0) else {
            return Ok(tape.constant(Matrix::zeros(1, 1)));
        };
        check_alignment(gold, j, tape.shape(c).0)?;
        let scores = self.alignment_scores(tape, tokens, c);
        Ok(tape.softmax_nll_sum(scores, gold.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_rows;
    use crate::gradcheck::check_gradients;
    use crate::params::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        Config { d_token: 4, d_ent: 4, d_out: 4, n_head: 2, n_agg: 2, reconcile_activation: ReconcileActivation::Identity, ..Config::desk() }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn set(store: &mut ParamStore, l: &Linear, w: Matrix) {
        *store.get_mut(l.w) = w;
        if let Some(b) = l.b {
            let n = store.get(b).cols();
            *store.get_mut(b) = Matrix::zeros(1, n);
        }
    }

    /// Attention output maps zeroed so `x + MHA(x) = x`, fusion and
    /// reconstruction maps set to the identity.
    fn identity_aggregator(store: &mut ParamStore, a: &Aggregator) {
        for mha in [&a.token_attention, &a.entity_attention] {
            set(store, &mha.o, Matrix::zeros(4, 4));
        }
        for l in [&a.fuse_token, &a.fuse_entity, &a.rebuild_token, &a.rebuild_entity] {
            set(store, l, Matrix::identity(4));
        }
    }

    #[test]
    fn identity_configuration_adds_token_and_entity() {
        let c = Config { n_agg: 1, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut rec = Reconciler::new(&mut store, &c, &mut rng);
        rec.positions = false;
        identity_aggregator(&mut store, &rec.aggregators[0]);
        let tokens = random(5, 4, 1);
        let ents = random(2, 4, 2);
        let align = [None, Some(1), None, None, Some(0)];
        let mut tape = Tape::new(&store);
        let t = tape.constant(tokens.clone());
        let e = tape.constant(ents.clone());
        let out = rec.aggregate(&mut tape, t, Some(e), &align).unwrap();
        let h = tape.value(out.tokens);
        for j in 0..5 {
            for k in 0..4 {
                let expected = tokens.get(j, k) + align[j].map_or(0.0, |i| ents.get(i, k));
                assert_eq!(h.get(j, k), expected);
            }
        }
        let ne = tape.value(out.entities.unwrap());
        assert_eq!(ne.get(0, 2), tokens.get(4, 2) + ents.get(0, 2));
    }

    #[test]
    fn no_linked_entities_take_unaligned_branch() {
        let c = Config { n_agg: 1, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut rec = Reconciler::new(&mut store, &c, &mut rng);
        rec.positions = false;
        identity_aggregator(&mut store, &rec.aggregators[0]);
        let tokens = random(3, 4, 1);
        let mut tape = Tape::new(&store);
        let t = tape.constant(tokens.clone());
        let out = rec.aggregate(&mut tape, t, None, &[None, None, None]).unwrap();
        assert_eq!(tape.value(out.tokens), &tokens);
        assert!(out.entities.is_none());
    }

    #[test]
    fn unaligned_entities_are_bitwise_unchanged_and_shape_kept() {
        let c = Config { reconcile_activation: ReconcileActivation::Gelu, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let rec = Reconciler::new(&mut store, &c, &mut rng);
        let ents = random(3, 4, 5);
        let mut tape = Tape::new(&store);
        let t = tape.constant(random(6, 4, 6));
        let e = tape.constant(ents.clone());
        let out = rec.aggregate(&mut tape, t, Some(e), &[Some(0), Some(0), None, Some(2), None, None]).unwrap();
        assert_eq!(tape.shape(out.tokens), (6, 4));
        let ne = tape.value(out.entities.unwrap());
        assert_eq!(ne.row(1), ents.row(1));
        assert_ne!(ne.row(0), ents.row(0));
    }

    #[test]
    fn stacking_is_composition() {
        let c = Config { reconcile_activation: ReconcileActivation::Gelu, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut rec = Reconciler::new(&mut store, &c, &mut rng);
        rec.positions = false;
        let align = [Some(1), None, Some(0), Some(1)];
        let mut tape = Tape::new(&store);
        let t = tape.constant(random(4, 4, 1));
        let e = tape.constant(random(2, 4, 2));
        let whole = rec.aggregate(&mut tape, t, Some(e), &align).unwrap();
        let (t1, e1) = rec.aggregators[0].forward(&mut tape, t, Some(e), &align, rec.sigma);
        let (t2, _) = rec.aggregators[1].forward(&mut tape, t1, e1, &align, rec.sigma);
        assert_eq!(tape.value(whole.tokens), tape.value(t2));
    }

    #[test]
    fn unknown_entity_is_an_alignment_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let rec = Reconciler::new(&mut store, &cfg(), &mut rng);
        let mut tape = Tape::new(&store);
        let t = tape.constant(random(2, 4, 1));
        let e = tape.constant(random(1, 4, 2));
        assert!(matches!(rec.aggregate(&mut tape, t, Some(e), &[Some(1), None]), Err(Error::Alignment(_))));
    }

    #[test]
    fn attention_count_matches_formula() {
        let c = Config { d_token: 100, d_ent: 100, d_out: 100, n_head: 2, ..Config::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = Aggregator::new(&mut store, "agg", &c, &mut rng);
        assert_eq!(a.attention_weight_count(), 80_000);
        let (w, _, _) = store.count_prefix("agg.token_attn");
        let (w2, _, _) = store.count_prefix("agg.entity_attn");
        assert_eq!(w + w2, 80_000);
    }

    #[test]
    fn alignment_loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let rec = Reconciler::new(&mut store, &cfg(), &mut rng);
        let mut tape = Tape::new(&store);
        let t = tape.constant(random(3, 4, 1));
        let one = tape.constant(random(1, 4, 2));
        let l = rec.alignment_loss(&mut tape, t, Some(one), &[Some(0), None, Some(0)]).unwrap();
        assert!(tape.value(l).scalar().abs() < 1e-15);
        let same = tape.constant(Matrix::filled(2, 4, 0.3));
        let l = rec.alignment_loss(&mut tape, t, Some(same), &[Some(0), None, Some(1)]).unwrap();
        assert!((tape.value(l).scalar() - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        let l = rec.alignment_loss(&mut tape, t, None, &[None, None, None]).unwrap();
        assert_eq!(tape.value(l).scalar(), 0.0);
    }

    #[test]
    fn alignment_probabilities_sum_to_one() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let rec = Reconciler::new(&mut store, &cfg(), &mut rng);
            let mut tape = Tape::new(&store);
            let t = tape.constant(random(5, 4, seed + 1));
            let c = tape.constant(random(3, 4, seed + 2));
            let s = rec.alignment_scores(&mut tape, t, c);
            let p = softmax_rows(tape.value(s));
            for r in 0..5 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconciliation_gradients() {
        let c = Config { d_token: 2, d_ent: 2, d_out: 3, n_head: 1, n_agg: 2, reconcile_activation: ReconcileActivation::Gelu, ..Config::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let rec = Reconciler::new(&mut store, &c, &mut rng);
        let ents = store.add("ents", ParamKind::Weight, random(2, 2, 9));
        let tokens = random(4, 2, 8);
        let align = [Some(1), None, Some(0), Some(1)];
        let r = check_gradients(&store, 1e-5, |tape| {
            let t = tape.constant(tokens.clone());
            let e = tape.param(ents);
            let out = rec.aggregate(tape, t, Some(e), &align).unwrap();
            let l = rec.alignment_loss(tape, out.tokens, Some(e), &align).unwrap();
            let sq = tape.mul(out.tokens, out.tokens);
            let s = tape.sum_all(sq);
            tape.add(s, l)
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn fusion_variants() {
        let base = Config { d_token: 3, d_ent: 2, d_out: 4, ..Config::desk() };
        let tokens = random(4, 3, 1);
        let ents = random(2, 2, 2);
        let align = [None, Some(1), None, Some(0)];
        for strategy in [FusionStrategy::RepAvg, FusionStrategy::RepConcat, FusionStrategy::Mlp] {
            let c = Config { fusion_strategy: strategy, ..base.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let rec = Reconciler::new(&mut store, &c, &mut rng);
            assert!(rec.aggregators.is_empty());
            let mut tape = Tape::new(&store);
            let t = tape.constant(tokens.clone());
            let e = tape.constant(ents.clone());
            let out = rec.aggregate(&mut tape, t, Some(e), &align).unwrap();
            let h = tape.value(out.tokens);
            assert_eq!(h.shape(), (4, 3));
            assert_eq!(h.row(0), tokens.row(0));
            assert_eq!(h.row(2), tokens.row(2));
            assert_ne!(h.row(1), tokens.row(1));
        }
    }

    #[test]
    fn rep_avg_of_equal_values_is_unchanged() {
        let c = Config { d_token: 2, d_ent: 2, fusion_strategy: FusionStrategy::RepAvg, ..Config::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let rec = Reconciler::new(&mut store, &c, &mut rng);
        let Some(FusionVariant::RepAvg { project }) = &rec.variant else { unreachable!() };
        set(&mut store, project, Matrix::identity(2));
        let tokens = Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]);
        let mut tape = Tape::new(&store);
        let t = tape.constant(tokens.clone());
        let e = tape.constant(Matrix::from_rows(&[vec![2.0, 0.25]]));
        let out = rec.aggregate(&mut tape, t, Some(e), &[None, Some(0)]).unwrap();
        assert_eq!(tape.value(out.tokens), &tokens);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(50, 6);
        assert_eq!(p.row(0), [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(p.data().iter().all(|x| x.abs() <= 1.0));
    }
}
