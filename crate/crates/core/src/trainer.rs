//! Mini-batch training of the noisy-label model: Adam on the combined loss,
//! a held-out validation split for model selection, and per-epoch history.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotator_sim::{AnnotationTable, ConfusionMatrix};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::noisy_model::{
    loss_grads, ClassifierConfig, ClassifierParams, CmParams, NoisyModel,
};
use crate::numkit::{adam_step_refs, AdamState, DenseMatrix, RngState};

/// What validation accuracy is measured against. Simulations can use the
/// withheld ground truth; with real crowd labels only the majority vote is
/// available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationTarget {
    GroundTruth,
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Share one confusion matrix across all annotators.
    pub single_cm: bool,
    pub hidden: Vec<usize>,
    pub validation_target: ValidationTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            epochs: 200,
            batch_size: 50,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            seed: 0,
            single_cm: false,
            hidden: vec![128],
            validation_target: ValidationTarget::GroundTruth,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid(
                "validation_fraction must lie strictly between 0 and 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches of the combined loss.
    pub total_loss: f64,
    pub ce_loss: f64,
    pub trace_term: f64,
    pub val_accuracy: f64,
    /// Estimation error against the true confusion matrices, when known.
    pub cm_error: Option<f64>,
    pub seconds: f64,
}

pub type TrainingHistory = Vec<EpochRecord>;

/// Writes history as CSV: epoch,total_loss,ce_loss,trace_term,val_accuracy,
/// cm_error,seconds. An unknown cm_error is left empty.
pub fn save_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "epoch,total_loss,ce_loss,trace_term,val_accuracy,cm_error,seconds"
    )
    .expect("string write");
    for rec in history {
        let cm = rec.cm_error.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            rec.epoch, rec.total_loss, rec.ce_loss, rec.trace_term, rec.val_accuracy, cm, rec.seconds
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A finished training run: the selected model, its realized confusion
/// matrices, and how it got there.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub classifier: ClassifierParams,
    /// Realized (column-stochastic) CM estimates, one per annotator.
    pub cms: Vec<ConfusionMatrix>,
    /// Raw parameters behind `cms` for methods that have them; EM-style
    /// baselines estimate the matrices directly and carry None.
    pub raw_cms: Option<CmParams>,
    pub history: TrainingHistory,
    /// Epoch whose validation accuracy selected this model; None when no
    /// epoch ran.
    pub selection_epoch: Option<usize>,
    /// Total gradient updates applied during training (for budget parity
    /// across methods).
    pub grad_updates: u64,
}

impl TrainedModel {
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.classifier.predict(x)
    }
}

/// Seeded shuffle-then-split. The validation side gets round(N * fraction)
/// examples; both sides must end up nonempty.
pub fn split_train_val(
    num_examples: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_examples == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie strictly between 0 and 1"));
    }
    let n_val = (num_examples as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= num_examples {
        return Err(Error::invalid(format!(
            "fraction {fraction} leaves an empty side of a {num_examples}-example split"
        )));
    }
    let mut order: Vec<usize> = (0..num_examples).collect();
    RngState::new(seed).substream("split").shuffle(&mut order);
    let train = order[..num_examples - n_val].to_vec();
    let val = order[num_examples - n_val..].to_vec();
    Ok((train, val))
}

fn validation_labels(
    target: ValidationTarget,
    dataset: &LabeledDataset,
    table: &AnnotationTable,
    val_indices: &[usize],
) -> Result<Vec<usize>> {
    val_indices
        .iter()
        .map(|&n| match target {
            ValidationTarget::GroundTruth => Ok(dataset.label(n)),
            ValidationTarget::MajorityVote => {
                metrics::majority_vote(table.row(n), dataset.num_classes())
            }
        })
        .collect()
}

fn val_accuracy(
    classifier: &ClassifierParams,
    dataset: &LabeledDataset,
    val_indices: &[usize],
    targets: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    for (&n, &t) in val_indices.iter().zip(targets) {
        if classifier.predict(dataset.features(n))? == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / val_indices.len() as f64)
}

/// Trains the model with Adam on shuffled mini-batches and returns the
/// highest-validation-accuracy snapshot (ties keep the later epoch).
/// `true_cms`, when available from a simulation, is only used to monitor
/// estimation error in the history.
pub fn train(
    config: &TrainConfig,
    dataset: &LabeledDataset,
    table: &AnnotationTable,
    true_cms: Option<&[ConfusionMatrix]>,
) -> Result<TrainedModel> {
    config.validate()?;
    if dataset.len() != table.num_examples() {
        return Err(Error::shape(format!(
            "dataset has {} examples but table has {}",
            dataset.len(),
            table.num_examples()
        )));
    }
    if let Some(cms) = true_cms {
        if cms.len() != table.num_annotators() {
            return Err(Error::shape(format!(
                "{} true matrices for {} annotators",
                cms.len(),
                table.num_annotators()
            )));
        }
    }
    let root = RngState::new(config.seed);
    let (train_indices, val_indices) =
        split_train_val(dataset.len(), config.validation_fraction, config.seed)?;
    if config.batch_size > train_indices.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds the {}-example training split",
            config.batch_size,
            train_indices.len()
        )));
    }
    let val_targets = validation_labels(
        config.validation_target,
        dataset,
        table,
        &val_indices,
    )?;

    let classifier_config = ClassifierConfig {
        input_dim: dataset.input_dim(),
        hidden: config.hidden.clone(),
        num_classes: dataset.num_classes(),
    };
    let mut classifier =
        ClassifierParams::init(classifier_config, &mut root.substream("weight-init"))?;
    let mut cms = CmParams::identity_init(
        dataset.num_classes(),
        table.num_annotators(),
        config.single_cm,
    )?;

    let snapshot = |classifier: &ClassifierParams,
                    cms: &CmParams,
                    history: &TrainingHistory,
                    selection_epoch: Option<usize>,
                    grad_updates: u64| TrainedModel {
        classifier: classifier.clone(),
        cms: cms.realize(),
        raw_cms: Some(cms.clone()),
        history: history.clone(),
        selection_epoch,
        grad_updates,
    };

    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle_rng = root.substream("epoch-shuffle");
    let mut order = train_indices.clone();
    let mut history: TrainingHistory = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ClassifierParams, CmParams)> = None;
    let mut grad_updates: u64 = 0;
    let mut consecutive_bad = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut batch_sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (breakdown, grads) =
                loss_grads(&classifier, &cms, dataset, table, batch, config.lambda)?;
            if !breakdown.total.is_finite() {
                consecutive_bad += 1;
                if consecutive_bad >= 3 {
                    let state = match &best {
                        Some((_, e, c, m)) => {
                            snapshot(c, m, &history, Some(*e), grad_updates)
                        }
                        None => snapshot(&classifier, &cms, &history, None, grad_updates),
                    };
                    return Err(Error::TrainingDiverged {
                        message: format!(
                            "loss non-finite for {consecutive_bad} consecutive batches at epoch {epoch}"
                        ),
                        last_state: Box::new(state),
                    });
                }
                continue;
            }
            consecutive_bad = 0;
            batch_sums.0 += breakdown.total;
            batch_sums.1 += breakdown.cross_entropy;
            batch_sums.2 += breakdown.trace_term;
            batches += 1;
            let mut params: Vec<&mut DenseMatrix> = classifier
                .blocks_mut()
                .iter_mut()
                .chain(cms.raw_mut().iter_mut())
                .collect();
            let grad_refs: Vec<&DenseMatrix> =
                grads.classifier.iter().chain(grads.raw_cms.iter()).collect();
            adam_step_refs(&mut adam, &mut params, &grad_refs)?;
            grad_updates += 1;
        }
        let accuracy = val_accuracy(&classifier, dataset, &val_indices, &val_targets)?;
        let cm_error = match true_cms {
            Some(truth) => Some(metrics::cm_error(truth, &cms.realize())?),
            None => None,
        };
        let denom = batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            total_loss: batch_sums.0 / denom,
            ce_loss: batch_sums.1 / denom,
            trace_term: batch_sums.2 / denom,
            val_accuracy: accuracy,
            cm_error,
            seconds: started.elapsed().as_secs_f64(),
        });
        // Ties go to the later epoch: validation accuracy saturates long
        // before the confusion-matrix factors converge, so among equally
        // accurate snapshots the most recent one carries the best estimates.
        let improved = match &best {
            Some((best_acc, _, _, _)) => accuracy >= *best_acc,
            None => true,
        };
        if improved {
            best = Some((accuracy, epoch, classifier.clone(), cms.clone()));
        }
    }

    Ok(match best {
        Some((_, epoch, c, m)) => snapshot(&c, &m, &history, Some(epoch), grad_updates),
        None => snapshot(&classifier, &cms, &history, None, grad_updates),
    })
}

/// Test accuracy of the selected classifier against ground truth.
pub fn evaluate(model: &TrainedModel, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut hits = 0usize;
    for n in 0..test.len() {
        if model.predict(test.features(n))? == test.label(n) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Evaluation report for a simulation run, pairing each annotator's true
/// skill with the estimate and checking mean-CM dominance.
pub fn build_report(
    model: &TrainedModel,
    population: &crate::annotator_sim::AnnotatorPopulation,
    test: &LabeledDataset,
    seed: u64,
) -> Result<metrics::EvalReport> {
    let accuracy = evaluate(model, test)?;
    let cm_error = metrics::cm_error(population.annotators(), &model.cms)?;
    let annotator_skills = population
        .annotators()
        .iter()
        .zip(&model.cms)
        .map(|(t, e)| (metrics::skill_level(t), metrics::skill_level(e)))
        .collect();
    Ok(metrics::EvalReport {
        schema_version: metrics::EVAL_REPORT_SCHEMA_VERSION,
        seed,
        accuracy,
        cm_error,
        annotator_skills,
        mean_cm_dominant: population.mean_cm().is_diagonally_dominant(),
    })
}

/// Bundles the selected model for checkpointing. Only methods that keep raw
/// confusion parameters can produce one.
pub fn to_noisy_model(model: &TrainedModel) -> Option<NoisyModel> {
    let raw = model.raw_cms.clone()?;
    NoisyModel::new(model.classifier.clone(), raw).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator_sim::{AnnotatorKind, AnnotatorPopulation};
    use crate::datasets::{gen_blobs, BlobConfig};

    fn tiny_blobs(seed: u64) -> LabeledDataset {
        gen_blobs(&BlobConfig {
            num_classes: 3,
            dim: 3,
            separation: 3.0,
            std: 1.0,
            examples_per_class: 60,
            seed,
        })
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 20,
            hidden: vec![16],
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_a_disjoint_partition() {
        let (train, val) = split_train_val(1000, 0.1, 3).unwrap();
        assert_eq!(train.len(), 900);
        assert_eq!(val.len(), 100);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let (t2, v2) = split_train_val(1000, 0.1, 3).unwrap();
        assert_eq!(train, t2);
        assert_eq!(val, v2);
        let (t3, v3) = split_train_val(10, 0.5, 0).unwrap();
        assert_eq!((t3.len(), v3.len()), (5, 5));
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        assert!(split_train_val(0, 0.1, 0).is_err());
        assert!(split_train_val(3, 0.01, 0).is_err());
        assert!(split_train_val(3, 0.99, 0).is_err());
        assert!(split_train_val(10, 0.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lambda: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(
            TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() }
                .validate()
                .is_err()
        );
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = tiny_blobs(1);
        let mut rng = RngState::new(2);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            0.8,
            2,
            0.0,
            &mut rng,
        )
        .unwrap();
        let table = pop.annotate(data.labels(), 2, &mut rng).unwrap();
        let model = train(&quick_config(0), &data, &table, None).unwrap();
        assert!(model.history.is_empty());
        assert_eq!(model.selection_epoch, None);
        assert_eq!(model.grad_updates, 0);
        // Confusion estimates still sit at the near-identity initialization.
        for cm in &model.cms {
            assert!(metrics::skill_level(cm) > 0.99);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = tiny_blobs(3);
        let mut rng = RngState::new(5);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            0.7,
            3,
            0.1,
            &mut rng,
        )
        .unwrap();
        let table = pop.annotate(data.labels(), 2, &mut rng).unwrap();
        let run = || train(&quick_config(3), &data, &table, Some(pop.annotators())).unwrap();
        let a = run();
        let b = run();
        for (x, y) in a.classifier.blocks().iter().zip(b.classifier.blocks()) {
            assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        let (ra, rb) = (a.raw_cms.unwrap(), b.raw_cms.unwrap());
        for (x, y) in ra.raw().iter().zip(rb.raw()) {
            assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert_eq!(a.selection_epoch, b.selection_epoch);
        assert_eq!(a.grad_updates, b.grad_updates);
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.total_loss.to_bits(), hb.total_loss.to_bits());
            assert_eq!(ha.val_accuracy.to_bits(), hb.val_accuracy.to_bits());
        }
    }

    #[test]
    fn noiseless_population_keeps_cms_near_identity() {
        let data = tiny_blobs(11);
        let id = ConfusionMatrix::identity(3).unwrap();
        let pop = AnnotatorPopulation::from_explicit(vec![id.clone(), id]).unwrap();
        let mut rng = RngState::new(12);
        let table = pop.annotate(data.labels(), 2, &mut rng).unwrap();
        let model = train(&quick_config(30), &data, &table, Some(pop.annotators())).unwrap();
        for cm in &model.cms {
            assert!(
                metrics::skill_level(cm) > 0.95,
                "learned skill {} dropped below 0.95",
                metrics::skill_level(cm)
            );
        }
    }

    #[test]
    fn history_tracks_epochs_and_loss_identity() {
        let data = tiny_blobs(21);
        let mut rng = RngState::new(22);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            0.75,
            3,
            0.0,
            &mut rng,
        )
        .unwrap();
        let table = pop.annotate(data.labels(), 3, &mut rng).unwrap();
        let config = quick_config(5);
        let model = train(&config, &data, &table, Some(pop.annotators())).unwrap();
        assert_eq!(model.history.len(), 5);
        for (e, rec) in model.history.iter().enumerate() {
            assert_eq!(rec.epoch, e);
            let recomposed = rec.ce_loss + config.lambda * rec.trace_term;
            assert!((rec.total_loss - recomposed).abs() < 1e-9);
            assert!(rec.cm_error.is_some());
            assert!((0.0..=1.0).contains(&rec.val_accuracy));
        }
        assert!(model.selection_epoch.is_some());
        let sel = model.selection_epoch.unwrap();
        let best_acc = model.history[sel].val_accuracy;
        assert!(model.history.iter().all(|r| r.val_accuracy <= best_acc));
        // Ties keep the latest epoch, so nothing after the selection matches
        // the best accuracy.
        assert!(model
            .history
            .iter()
            .skip(sel + 1)
            .all(|r| r.val_accuracy < best_acc));
    }

    #[test]
    fn evaluate_counts_matches() {
        let data = tiny_blobs(31);
        let model = TrainedModel {
            classifier: ClassifierParams::zeros(ClassifierConfig {
                input_dim: 3,
                hidden: vec![],
                num_classes: 3,
            })
            .unwrap(),
            cms: vec![ConfusionMatrix::identity(3).unwrap()],
            raw_cms: None,
            history: Vec::new(),
            selection_epoch: None,
            grad_updates: 0,
        };
        // Zero weights predict class 0 everywhere; blobs are exactly
        // balanced, so accuracy is 1/3.
        let acc = evaluate(&model, &data).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn history_csv_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let history = vec![
            EpochRecord {
                epoch: 0,
                total_loss: 1.25,
                ce_loss: 1.2,
                trace_term: 5.0,
                val_accuracy: 0.5,
                cm_error: Some(0.125),
                seconds: 0.01,
            },
            EpochRecord {
                epoch: 1,
                total_loss: 1.0,
                ce_loss: 0.95,
                trace_term: 5.0,
                val_accuracy: 0.625,
                cm_error: None,
                seconds: 0.01,
            },
        ];
        let path = dir.path().join("history.csv");
        save_history_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,total_loss,ce_loss,trace_term,val_accuracy,cm_error,seconds"
        );
        assert!(lines[1].starts_with("0,1.25,1.2,5,0.5,0.125,"));
        assert!(lines[2].starts_with("1,1,0.95,5,0.625,,"));
    }

    #[test]
    fn mismatched_table_is_rejected() {
        let data = tiny_blobs(41);
        let mut rng = RngState::new(42);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            3,
            0.8,
            2,
            0.0,
            &mut rng,
        )
        .unwrap();
        let truths = vec![0, 1, 2];
        let table = pop.annotate(&truths, 2, &mut rng).unwrap();
        assert!(train(&quick_config(1), &data, &table, None).is_err());
    }

    #[test]
    fn batch_size_cannot_exceed_training_split() {
        let data = tiny_blobs(51);
        let mut rng = RngState::new(52);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            3,
            0.8,
            2,
            0.0,
            &mut rng,
        )
        .unwrap();
        let table = pop.annotate(data.labels(), 2, &mut rng).unwrap();
        let config = TrainConfig {
            batch_size: 50_000,
            ..quick_config(1)
        };
        assert!(train(&config, &data, &table, None).is_err());
    }
}
