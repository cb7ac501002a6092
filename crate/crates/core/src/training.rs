//! Multi-task loss, two-stage training and parameter-count reporting.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::datamodel::Config;
use crate::error::{Error, Result};
use crate::evaluation::{f1, select_threshold};
use crate::model::{InjectionMode, KireModel, KnowledgeContext, PreparedDocument};
use crate::optim::{clip_global_norm, Adam};
use crate::params::ParamStore;

/// `α1·L_re + α2·L_cr + α3·L_kg`.
pub fn total_loss(loss_re: f64, loss_cr: f64, loss_kg: f64, config: &Config) -> f64 {
    config.alpha1 * loss_re + config.alpha2 * loss_cr + config.alpha3 * loss_kg
}

/// The same combination on the tape.
pub fn total_loss_var(tape: &mut Tape<'_>, loss_re: Var, loss_cr: Var, loss_kg: Var, config: &Config) -> Var {
    let a = tape.scale(loss_re, config.alpha1);
    let b = tape.scale(loss_cr, config.alpha2);
    let c = tape.scale(loss_kg, config.alpha3);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Kire,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Kire => "kire",
        }
    }
}

/// Mean component losses over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLosses {
    pub re: f64,
    pub cr: f64,
    pub kg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub losses: RunningLosses,
    pub validation_f1: f64,
    pub validation_theta: f64,
}

/// Optimizer and bookkeeping state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: Adam,
    pub losses: RunningLosses,
    pub history: Vec<EpochRecord>,
}

/// One optimization stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: Stage,
    pub mode: InjectionMode,
    pub epochs: usize,
    /// Freeze encoder and predictor parameters during this stage.
    pub freeze_base: bool,
}

impl StagePlan {
    /// Base stage followed by the injection stage, as configured.
    pub fn two_stage(config: &Config) -> [Self; 2] {
        [
            Self { stage: Stage::Base, mode: InjectionMode::Identity, epochs: config.base_epochs, freeze_base: false },
            Self { stage: Stage::Kire, mode: InjectionMode::Full, epochs: config.kire_epochs, freeze_base: config.freeze_base },
        ]
    }

    /// The no-injection baseline: base training continued for the same total
    /// number of epochs, in two stages so both runs share a schedule.
    pub fn baseline(config: &Config) -> [Self; 2] {
        [
            Self { stage: Stage::Base, mode: InjectionMode::Identity, epochs: config.base_epochs, freeze_base: false },
            Self { stage: Stage::Base, mode: InjectionMode::Identity, epochs: config.kire_epochs, freeze_base: false },
        ]
    }
}

/// Result of [`train`]: the best model of the final stage and the run state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: KireModel,
    pub state: TrainState,
    pub mode: InjectionMode,
    pub best_validation_f1: f64,
    /// Parameters at the end of each stage's checkpoint selection.
    pub stage_checkpoints: Vec<ParamStore>,
    /// Parameters after the last epoch of the final stage, before the best
    /// checkpoint was restored.
    pub last_epoch: ParamStore,
}

/// Validation F1 at the threshold that maximizes it, and that threshold.
pub fn validation_score(model: &KireModel, docs: &[PreparedDocument], ctx: &KnowledgeContext, mode: InjectionMode) -> Result<(f64, f64)> {
    let pred = model.predict(docs, ctx, mode)?;
    let gold: Vec<_> = docs.iter().map(|p| p.doc.clone()).collect();
    let theta = select_threshold(&pred, &gold);
    Ok((f1(&pred, &gold, theta).f1, theta))
}

fn divergence(stage: Stage, epoch: usize, batch: usize) -> Error {
    Error::Numerical(format!("non-finite loss in stage {} epoch {epoch} batch {batch}", stage.as_str()))
}

/// Runs every stage in `plans`. Each stage starts from the best checkpoint
/// of the previous one with a fresh optimizer; the checkpoint with the
/// highest validation F1 (earliest on ties) is kept.
pub fn train_stages(mut model: KireModel, train: &[PreparedDocument], validation: &[PreparedDocument], ctx: &KnowledgeContext, plans: &[StagePlan]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".to_string()));
    }
    let config = model.config.clone();
    let mut state = TrainState {
        stage: plans.first().map_or(Stage::Base, |p| p.stage),
        epoch: 0,
        seed: config.seed,
        optimizer: Adam::new(config.learning_rate),
        losses: RunningLosses::default(),
        history: Vec::new(),
    };
    let mut best_f1 = f64::NEG_INFINITY;
    let mut checkpoints = Vec::new();
    let mut mode = InjectionMode::Identity;
    let mut last_epoch = model.store.clone();
    for (ordinal, plan) in plans.iter().enumerate() {
        if plan.stage < state.stage {
            return Err(Error::Config("stages may only move from base to kire".to_string()));
        }
        mode = plan.mode;
        state.stage = plan.stage;
        state.optimizer = Adam::new(config.learning_rate);
        for id in model.store.ids().collect::<Vec<_>>() {
            let frozen = plan.freeze_base && KireModel::is_base_parameter(&model.store.entry(id).name);
            model.store.set_trainable(id, !frozen);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(100 + ordinal as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best_store = model.store.clone();
        let (mut stage_best, theta) = validation_score(&model, validation, ctx, mode)?;
        if plan.epochs == 0 {
            state.history.push(EpochRecord { stage: plan.stage, epoch: 0, losses: RunningLosses::default(), validation_f1: stage_best, validation_theta: theta });
        }
        for epoch in 1..=plan.epochs {
            order.shuffle(&mut rng);
            let mut sums = RunningLosses::default();
            for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
                let mut grads = Gradients::default();
                for &i in chunk {
                    let mut tape = Tape::new(&model.store);
                    let pass = model.forward(&mut tape, &train[i], ctx, plan.mode)?;
                    let loss = total_loss_var(&mut tape, pass.loss_re, pass.loss_cr, pass.loss_kg, &config);
                    let value = tape.value(loss).get(0, 0);
                    if !value.is_finite() {
                        return Err(divergence(plan.stage, epoch, batch));
                    }
                    sums.re += tape.value(pass.loss_re).get(0, 0);
                    sums.cr += tape.value(pass.loss_cr).get(0, 0);
                    sums.kg += tape.value(pass.loss_kg).get(0, 0);
                    sums.total += value;
                    let scaled = tape.scale(loss, 1.0 / chunk.len() as f64);
                    grads.accumulate(&tape.backward(scaled));
                }
                if !grads.is_finite() {
                    return Err(divergence(plan.stage, epoch, batch));
                }
                clip_global_norm(&mut grads, config.grad_clip);
                state.optimizer.update(&mut model.store, &grads);
            }
            let n = train.len() as f64;
            state.losses = RunningLosses { re: sums.re / n, cr: sums.cr / n, kg: sums.kg / n, total: sums.total / n };
            state.epoch = epoch;
            let (val_f1, theta) = validation_score(&model, validation, ctx, plan.mode)?;
            state.history.push(EpochRecord { stage: plan.stage, epoch, losses: state.losses, validation_f1: val_f1, validation_theta: theta });
            if val_f1 > stage_best {
                stage_best = val_f1;
                best_store = model.store.clone();
            }
        }
        last_epoch = core::mem::replace(&mut model.store, best_store);
        best_f1 = stage_best;
        checkpoints.push(model.store.clone());
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.set_trainable(id, true);
        last_epoch.set_trainable(id, true);
    }
    Ok(TrainOutcome { model, state, mode, best_validation_f1: best_f1, stage_checkpoints: checkpoints, last_epoch })
}

/// Base stage on `L_re` with `H' = H`, then the injection stage on the full
/// multi-task loss.
pub fn train(model: KireModel, train_docs: &[PreparedDocument], validation: &[PreparedDocument], ctx: &KnowledgeContext) -> Result<TrainOutcome> {
    let plans = StagePlan::two_stage(&model.config);
    train_stages(model, train_docs, validation, ctx, &plans)
}

/// Base training continued through both stages without injection.
pub fn train_baseline(model: KireModel, train_docs: &[PreparedDocument], validation: &[PreparedDocument], ctx: &KnowledgeContext) -> Result<TrainOutcome> {
    let plans = StagePlan::baseline(&model.config);
    train_stages(model, train_docs, validation, ctx, &plans)
}

/// Scalar entries of one module, split by kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub module: String,
    pub weights: usize,
    pub biases: usize,
    pub tables: usize,
}

/// A closed-form count evaluated at the current configuration next to the
/// count of the corresponding implementation parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaCheck {
    pub name: String,
    pub formula: String,
    pub formula_value: usize,
    pub implementation_value: usize,
    pub matches: bool,
    /// Why the two values differ, when they do.
    pub discrepancy: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub modules: Vec<ModuleCount>,
    pub formulas: Vec<FormulaCheck>,
    pub n_token: usize,
    pub n_align: usize,
}

impl ParameterReport {
    pub fn formula(&self, name: &str) -> Option<&FormulaCheck> {
        self.formulas.iter().find(|f| f.name == name)
    }
}

pub fn coref_formula(c: &Config) -> usize {
    c.d_mlp * (2 * c.d_token + c.d_dist) + 2 * c.d_token
}

/// Attribute encoder count as stated for the module itself.
pub fn attribute_formula(c: &Config) -> usize {
    c.d_auto * c.n_max * c.n_kernel * (c.d_kernel * c.d_kernel + 1)
}

/// Attribute encoder term as it appears inside the total (without the
/// kernel count).
pub fn attribute_formula_in_total(c: &Config) -> usize {
    c.d_auto * c.n_max * (c.d_kernel * c.d_kernel + 1)
}

pub fn rgat_formula(c: &Config) -> usize {
    2 * (c.n_layer - 1) * c.n_head * c.d_rgat * c.d_rgat + c.d_rgat * c.d_ent
}

pub fn aggregator_attention_formula(c: &Config) -> usize {
    4 * c.d_token * c.d_token + 4 * c.d_ent * c.d_ent
}

/// Fusion and reconstruction terms of one aggregator; they depend on the
/// token count and the number of aligned token-entity pairs.
pub fn aggregator_fusion_formula(c: &Config, n_token: usize, n_align: usize) -> usize {
    c.d_out * (n_token + n_align) + n_token + 2 * n_align * (c.d_out + 1)
}

pub fn reconciliation_formula(c: &Config, n_token: usize, n_align: usize) -> usize {
    c.n_agg * (aggregator_attention_formula(c) + aggregator_fusion_formula(c, n_token, n_align))
}

pub fn total_formula(c: &Config, n_token: usize, n_align: usize) -> usize {
    coref_formula(c) + attribute_formula_in_total(c) + rgat_formula(c) + reconciliation_formula(c, n_token, n_align)
}

const MODULES: [(&str, &str); 6] = [
    ("encoder", "encoder."),
    ("predictor", "predictor."),
    ("coref", "coref."),
    ("attribute_cnn", "kg.attr_cnn"),
    ("rgat", "kg.rgat."),
    ("reconciliation", "reconcile."),
];

fn check(name: &str, formula: &str, formula_value: usize, implementation_value: usize, why: &str) -> FormulaCheck {
    let matches = formula_value == implementation_value;
    FormulaCheck {
        name: name.to_string(),
        formula: formula.to_string(),
        formula_value,
        implementation_value,
        matches,
        discrepancy: (!matches).then(|| why.to_string()),
    }
}

/// Per-module counts plus every closed-form count, compared against the
/// implementation. `n_token` and `n_align` instantiate the data-dependent
/// reconciliation terms (typically the largest training document).
pub fn count_parameters(model: &KireModel, n_token: usize, n_align: usize) -> ParameterReport {
    let c = &model.config;
    let store = &model.store;
    let modules = MODULES
        .iter()
        .map(|(module, prefix)| {
            let (weights, biases, tables) = store.count_prefix(prefix);
            ModuleCount { module: module.to_string(), weights, biases, tables }
        })
        .collect::<Vec<_>>();
    let count = |prefix: &str| {
        let (w, b, t) = store.count_prefix(prefix);
        (w, b, t)
    };
    let mut formulas = Vec::new();
    formulas.push(check(
        "coref_mlp",
        "d_mlp*(2*d_token+d_dist)+2*d_token",
        coref_formula(c),
        model.student.weight_count(),
        "hidden-layer and pair-term weights differ from the closed form",
    ));
    let (cnn_w, cnn_b, _) = count("kg.attr_cnn");
    formulas.push(check(
        "attribute_cnn",
        "d_auto*n_max*n_kernel*(d_kernel^2+1)",
        attribute_formula(c),
        cnn_w + cnn_b,
        "the convolution shares one d_kernel x d_auto filter bank across the n_max attribute positions and has one bias per kernel, so it holds d_kernel*d_auto*n_kernel + n_kernel entries; the closed form multiplies by n_max and squares the kernel size",
    ));
    let attention_vectors = {
        let (w, _, _) = count("kg.rgat.");
        w - model.kg_encoder.rgat.projection_weight_count()
    };
    formulas.push(check(
        "rgat",
        "2*(n_layer-1)*n_head*d_rgat^2+d_rgat*d_ent",
        rgat_formula(c),
        model.kg_encoder.rgat.projection_weight_count(),
        &format!(
            "the implementation keeps one input projection per head in every layer (n_head*d_ent*d_rgat in the first, n_head*d_rgat^2 in each later one); the attention map is a vector of 2*d_rgat+d_rel entries per head and layer ({attention_vectors} in total) rather than a second d_rgat x d_rgat matrix"
        ),
    ));
    let attention = model.reconciler.aggregators.first().map_or(0, |a| a.attention_weight_count());
    formulas.push(check(
        "aggregator_attention",
        "4*d_token^2+4*d_ent^2 (per aggregator)",
        aggregator_attention_formula(c),
        attention,
        "the configured fusion strategy has no aggregator attention",
    ));
    let fusion_impl = model.reconciler.aggregators.first().map_or(0, |a| {
        let lin = |l: &crate::layers::Linear| l.fan_in * l.fan_out + if l.b.is_some() { l.fan_out } else { 0 };
        lin(&a.fuse_token) + lin(&a.fuse_entity) + lin(&a.rebuild_token) + lin(&a.rebuild_entity)
    });
    formulas.push(check(
        "aggregator_fusion",
        "d_out*(n_token+n_align)+n_token+2*n_align*(d_out+1) (per aggregator)",
        aggregator_fusion_formula(c, n_token, n_align),
        fusion_impl,
        "fusion and reconstruction maps act row-wise on token and entity representations, so their size is (d_token+d_ent)*d_out + d_out*(d_token+d_ent) plus biases and does not grow with the token or alignment count",
    ));
    let (rw, rb, _) = count("reconcile.agg");
    formulas.push(check(
        "reconciliation",
        "n_agg*[4*d_token^2+4*d_ent^2+d_out*(n_token+n_align)+n_token+2*n_align*(d_out+1)]",
        reconciliation_formula(c, n_token, n_align),
        rw + rb,
        "follows from the aggregator_attention and aggregator_fusion items; the implementation count includes attention biases",
    ));
    let injection: usize = ["coref.", "kg.", "reconcile."].iter().map(|p| {
        let (w, b, t) = count(p);
        w + b + t
    }).sum();
    formulas.push(check(
        "total",
        "coref_mlp + d_auto*n_max*(d_kernel^2+1) + rgat + reconciliation",
        total_formula(c, n_token, n_align),
        injection,
        "sum of the itemized differences above, plus biases and lookup tables (distance bins, relation types, alignment map) that the closed form omits; the attribute term inside the total also drops the n_kernel factor of the per-module count",
    ));
    ParameterReport { modules, formulas, n_token, n_align }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::RelationVocab;
    use alloc::vec;

    #[test]
    fn loss_combination() {
        let c = Config::default();
        assert!((total_loss(1.0, 1.0, 1.0, &c) - 1.02).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &c), 0.0);
        let c0 = Config { alpha2: 0.0, alpha3: 0.0, ..c };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &c0), 0.7);
    }

    proptest::proptest! {
        #[test]
        fn loss_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, x in 0.0f64..3.0, y in 0.0f64..3.0, z in 0.0f64..3.0) {
            let c = Config::default();
            let l = |p: f64, q: f64, r: f64| total_loss(p, q, r, &c);
            let lhs = l(a * x + b * y, a * y + b * z, a * z + b * x);
            let rhs = a * l(x, y, z) + b * l(y, z, x);
            proptest::prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn formula_examples() {
        let c = Config::default();
        assert_eq!(coref_formula(&c), 56_520);
        assert_eq!(rgat_formula(&c), 90_000);
        assert_eq!(aggregator_attention_formula(&c), 80_000);
    }

    #[test]
    fn report_matches_closed_forms_where_conventions_agree() {
        let c = Config::default();
        let model = KireModel::new(&c, vec!["PER".into()], RelationVocab::new(["r"]).unwrap(), 2).unwrap();
        let report = count_parameters(&model, 10, 3);
        let coref = report.formula("coref_mlp").unwrap();
        assert_eq!((coref.formula_value, coref.implementation_value), (56_520, 56_520));
        let att = report.formula("aggregator_attention").unwrap();
        assert!(att.matches && att.formula_value == 80_000);
        let rgat = report.formula("rgat").unwrap();
        assert_eq!(rgat.formula_value, 90_000);
        assert_eq!(rgat.implementation_value, 2 * (100 * 100) * 3);
        assert!(rgat.discrepancy.is_some());
        for f in &report.formulas {
            assert_eq!(f.matches, f.discrepancy.is_none());
        }
        let cnn = &report.modules[3];
        assert_eq!(cnn.weights, 3 * 50 * 100);
        assert_eq!(cnn.biases, 100);
    }
}
