//! EM-style baselines that alternate between classifier fitting and
//! closed-form confusion-matrix estimation: generalized EM (soft posteriors)
//! and model-bootstrapped EM (hard predictions plus a class prior). A plain
//! majority-vote baseline shares the same soft-target machinery.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotator_sim::{AnnotationTable, ConfusionMatrix};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::noisy_model::{soft_target_loss_grads, ClassifierConfig, ClassifierParams, LOG_CLAMP};
use crate::numkit::{adam_step, AdamState, DenseMatrix, RngState};
use crate::trainer::{split_train_val, EpochRecord, TrainConfig, TrainedModel};

/// Posterior over true classes, one row per example, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    q: DenseMatrix,
}

impl PosteriorTable {
    pub fn new(q: DenseMatrix) -> Result<Self> {
        if q.data().iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("posterior entries must be nonnegative"));
        }
        for n in 0..q.rows() {
            let s: f64 = q.row(n).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "posterior row {n} sums to {s}, expected 1"
                )));
            }
        }
        Ok(PosteriorTable { q })
    }

    pub fn num_examples(&self) -> usize {
        self.q.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.q.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.q.row(n)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.q
    }

    fn set_row(&mut self, n: usize, row: &[f64]) {
        self.q.row_mut(n).copy_from_slice(row);
    }
}

/// Mean-label initialization: each row is the empirical frequency of that
/// example's observed labels. Rows are normalized over the labels actually
/// present, so sparse rows still sum to 1.
pub fn init_posterior(table: &AnnotationTable) -> PosteriorTable {
    let l = table.num_classes();
    let mut q = DenseMatrix::zeros(table.num_examples(), l);
    for n in 0..table.num_examples() {
        let row = q.row_mut(n);
        let mut count = 0usize;
        for &label in table.row(n).iter().flatten() {
            row[label] += 1.0;
            count += 1;
        }
        // The table invariant guarantees count >= 1.
        for v in row.iter_mut() {
            *v /= count as f64;
        }
    }
    PosteriorTable::new(q).expect("frequency rows are stochastic by construction")
}

/// One-hot posterior at each example's majority-vote label.
pub fn majority_vote_posterior(table: &AnnotationTable) -> Result<PosteriorTable> {
    let l = table.num_classes();
    let mut q = DenseMatrix::zeros(table.num_examples(), l);
    for n in 0..table.num_examples() {
        let vote = metrics::majority_vote(table.row(n), l)?;
        q.set(n, vote, 1.0);
    }
    PosteriorTable::new(q)
}

/// One epoch of Adam on the soft-target cross-entropy
/// -sum_n sum_l q_nl log p(l | x_n), over shuffled mini-batches of the given
/// indices. Returns the mean batch loss and the number of updates applied.
/// Three consecutive non-finite batch losses abort with a divergence error
/// carrying the classifier as it stood.
pub fn m_step_classifier(
    classifier: &mut ClassifierParams,
    dataset: &LabeledDataset,
    q: &PosteriorTable,
    indices: &[usize],
    epochs: usize,
    batch_size: usize,
    adam: &mut AdamState,
    shuffle_rng: &mut RngState,
) -> Result<(f64, u64)> {
    if q.num_examples() != dataset.len() || q.num_classes() != dataset.num_classes() {
        return Err(Error::shape(format!(
            "posterior is {}x{}, dataset is {}x{}",
            q.num_examples(),
            q.num_classes(),
            dataset.len(),
            dataset.num_classes()
        )));
    }
    if batch_size == 0 || batch_size > indices.len() {
        return Err(Error::invalid(format!(
            "batch_size {batch_size} invalid for {} examples",
            indices.len()
        )));
    }
    let mut order = indices.to_vec();
    let mut mean_loss = 0.0;
    let mut updates = 0u64;
    let mut consecutive_bad = 0usize;
    for _ in 0..epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(batch_size) {
            let (loss, grads) = soft_target_loss_grads(classifier, dataset, q.matrix(), batch)?;
            if !loss.is_finite() {
                consecutive_bad += 1;
                if consecutive_bad >= 3 {
                    return Err(Error::TrainingDiverged {
                        message: format!(
                            "soft-target loss non-finite for {consecutive_bad} consecutive batches"
                        ),
                        last_state: Box::new(TrainedModel {
                            classifier: classifier.clone(),
                            cms: Vec::new(),
                            raw_cms: None,
                            history: Vec::new(),
                            selection_epoch: None,
                            grad_updates: updates,
                        }),
                    });
                }
                continue;
            }
            consecutive_bad = 0;
            epoch_loss += loss;
            batches += 1;
            adam_step(adam, classifier.blocks_mut(), &grads)?;
            updates += 1;
        }
        mean_loss = epoch_loss / batches.max(1) as f64;
    }
    Ok((mean_loss, updates))
}

fn identity_row(l: usize, j: usize) -> Vec<f64> {
    let mut row = vec![0.0; l];
    row[j] = 1.0;
    row
}

/// Closed-form confusion-matrix update from soft posteriors, per annotator:
///   a_hat[j][i] = sum_n 1(labeled) 1(label = i) q_nj / sum_n 1(labeled) q_nj
/// where j runs over latent classes and i over observed labels. A latent
/// class with no posterior mass among the annotator's examples falls back to
/// the identity row. Returned in standard column-stochastic orientation
/// (reported class, true class), i.e. the transpose of the ratio above.
pub fn m_step_cms_gem(
    q: &PosteriorTable,
    table: &AnnotationTable,
    indices: &[usize],
) -> Result<Vec<ConfusionMatrix>> {
    if q.num_examples() != table.num_examples() || q.num_classes() != table.num_classes() {
        return Err(Error::shape("posterior and table shapes disagree".to_string()));
    }
    let l = table.num_classes();
    let mut cms = Vec::with_capacity(table.num_annotators());
    for r in 0..table.num_annotators() {
        let mut latent_by_observed = DenseMatrix::zeros(l, l);
        for j in 0..l {
            let mut numer = vec![0.0; l];
            let mut denom = 0.0;
            for &n in indices {
                if let Some(label) = table.get(n, r) {
                    let w = q.row(n)[j];
                    numer[label] += w;
                    denom += w;
                }
            }
            let row = if denom < 1e-12 {
                identity_row(l, j)
            } else {
                // Renormalize by the realized float sum so the rows are
                // stochastic to machine precision.
                let s: f64 = numer.iter().sum();
                numer.iter().map(|v| v / s).collect()
            };
            latent_by_observed.row_mut(j).copy_from_slice(&row);
        }
        cms.push(ConfusionMatrix::new(latent_by_observed.transpose())?);
    }
    Ok(cms)
}

/// Hard-count confusion-matrix update from predicted classes, per annotator:
///   a_hat[j][i] = #(prediction = j, label = i) / #(prediction = j, labeled)
/// with the same identity fallback and orientation as `m_step_cms_gem`.
/// `predictions` is aligned with `indices`.
pub fn m_step_cms_mbem(
    predictions: &[usize],
    table: &AnnotationTable,
    indices: &[usize],
) -> Result<Vec<ConfusionMatrix>> {
    if predictions.len() != indices.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} examples",
            predictions.len(),
            indices.len()
        )));
    }
    let l = table.num_classes();
    let mut cms = Vec::with_capacity(table.num_annotators());
    for r in 0..table.num_annotators() {
        let mut latent_by_observed = DenseMatrix::zeros(l, l);
        for j in 0..l {
            let mut numer = vec![0.0; l];
            let mut denom = 0.0;
            for (&n, &c) in indices.iter().zip(predictions) {
                if c != j {
                    continue;
                }
                if let Some(label) = table.get(n, r) {
                    numer[label] += 1.0;
                    denom += 1.0;
                }
            }
            let row = if denom < 1e-12 {
                identity_row(l, j)
            } else {
                numer.iter().map(|v| v / denom).collect()
            };
            latent_by_observed.row_mut(j).copy_from_slice(&row);
        }
        cms.push(ConfusionMatrix::new(latent_by_observed.transpose())?);
    }
    Ok(cms)
}

/// Empirical class frequencies of the predictions. If any class has zero
/// count, every class receives additive mass 1/(N*L) before renormalization
/// so the E-step's product never hits an all-zero prior.
pub fn mbem_prior(predictions: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if predictions.is_empty() {
        return Err(Error::invalid("prior over an empty prediction list"));
    }
    let n = predictions.len() as f64;
    let mut counts = vec![0.0f64; num_classes];
    for &c in predictions {
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "prediction {c} out of range for {num_classes} classes"
            )));
        }
        counts[c] += 1.0;
    }
    if counts.iter().any(|&c| c == 0.0) {
        let l = num_classes as f64;
        let total = n + 1.0;
        Ok(counts.iter().map(|c| (c + 1.0 / l) / total).collect())
    } else {
        Ok(counts.iter().map(|c| c / n).collect())
    }
}

/// Shared E-step body: per-class log weight = log(base_j) plus the log
/// CM entries of the observed labels, then a softmax per row.
///
/// A factor that is exactly zero rules the class out exactly (posterior
/// 0.0); the clamp only guards the logarithm against tiny positive values.
/// Keeping true zeros exact matters: with one label per example the hard
/// posterior / identity-CM pair is a genuine fixed point of the iteration,
/// and letting clamped mass leak back in would slowly walk the estimates
/// away from it.
fn posterior_rows<FBase>(
    q: &mut PosteriorTable,
    base: FBase,
    cms: &[ConfusionMatrix],
    table: &AnnotationTable,
    indices: &[usize],
) -> Result<()>
where
    FBase: Fn(usize, usize) -> f64,
{
    let l = table.num_classes();
    if cms.len() != table.num_annotators() {
        return Err(Error::shape(format!(
            "{} confusion matrices for {} annotators",
            cms.len(),
            table.num_annotators()
        )));
    }
    for &n in indices {
        let mut log_w = vec![0.0f64; l];
        let mut exactly_zero = vec![false; l];
        for j in 0..l {
            let b = base(n, j);
            if b == 0.0 {
                exactly_zero[j] = true;
            }
            let mut w = b.max(LOG_CLAMP).ln();
            for (r, cm) in cms.iter().enumerate() {
                if let Some(label) = table.get(n, r) {
                    let a = cm.get(label, j);
                    if a == 0.0 {
                        exactly_zero[j] = true;
                    }
                    w += a.max(LOG_CLAMP).ln();
                }
            }
            log_w[j] = if exactly_zero[j] { f64::NEG_INFINITY } else { w };
        }
        if exactly_zero.iter().all(|&z| z) {
            return Err(Error::DegeneratePosterior(format!(
                "example {n}: every class has zero likelihood"
            )));
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut row: Vec<f64> = log_w.iter().map(|w| (w - max).exp()).collect();
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
        q.set_row(n, &row);
    }
    Ok(())
}

/// Generalized-EM E-step: q_nj proportional to p(j | x_n) times the product
/// of CM entries at the observed labels, computed in log space.
pub fn e_step_gem(
    q: &mut PosteriorTable,
    classifier: &ClassifierParams,
    dataset: &LabeledDataset,
    cms: &[ConfusionMatrix],
    table: &AnnotationTable,
    indices: &[usize],
) -> Result<()> {
    let probs: Vec<Vec<f64>> = indices
        .iter()
        .map(|&n| classifier.forward(dataset.features(n)))
        .collect::<Result<_>>()?;
    let position: std::collections::HashMap<usize, usize> =
        indices.iter().enumerate().map(|(pos, &n)| (n, pos)).collect();
    posterior_rows(q, |n, j| probs[position[&n]][j], cms, table, indices)
}

/// Model-bootstrapped E-step: the class prior replaces the classifier.
pub fn e_step_mbem(
    q: &mut PosteriorTable,
    prior: &[f64],
    cms: &[ConfusionMatrix],
    table: &AnnotationTable,
    indices: &[usize],
) -> Result<()> {
    if prior.len() != table.num_classes() {
        return Err(Error::shape("prior length must equal the class count".to_string()));
    }
    posterior_rows(q, |_, j| prior[j], cms, table, indices)
}

/// Hard predictions aligned with `indices`.
pub fn hard_predictions(
    classifier: &ClassifierParams,
    dataset: &LabeledDataset,
    indices: &[usize],
) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&n| classifier.predict(dataset.features(n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbemState {
    /// Hard classifier predictions, aligned with the training indices.
    pub predictions: Vec<usize>,
    pub prior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// EM rounds (T).
    pub rounds: usize,
    /// Classifier epochs per round (G); the total gradient budget is
    /// rounds * epochs_per_round epochs.
    pub epochs_per_round: usize,
    /// Optimizer, split, and architecture settings. `epochs`, `lambda`, and
    /// `single_cm` are not consulted here.
    pub base: TrainConfig,
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::invalid("EM needs at least 1 round"));
        }
        if self.epochs_per_round < 1 {
            return Err(Error::invalid("EM needs at least 1 epoch per round"));
        }
        self.base.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmEpochRecord {
    pub em_round: usize,
    #[serde(flatten)]
    pub record: EpochRecord,
}

/// Reattach EM round indices to a run's history. Each round contributes
/// exactly `epochs_per_round` classifier epochs, so the mapping is
/// epoch / epochs_per_round.
pub fn annotate_rounds(history: &[EpochRecord], epochs_per_round: usize) -> Vec<EmEpochRecord> {
    history
        .iter()
        .map(|rec| EmEpochRecord {
            em_round: rec.epoch / epochs_per_round.max(1),
            record: rec.clone(),
        })
        .collect()
}

/// History CSV with the trainer's columns plus em_round.
pub fn save_em_history_csv(history: &[EmEpochRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "epoch,total_loss,ce_loss,trace_term,val_accuracy,cm_error,seconds,em_round"
    )
    .expect("string write");
    for rec in history {
        let cm = rec.record.cm_error.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            rec.record.epoch,
            rec.record.total_loss,
            rec.record.ce_loss,
            rec.record.trace_term,
            rec.record.val_accuracy,
            cm,
            rec.record.seconds,
            rec.em_round
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

enum EmKind {
    Generalized,
    ModelBootstrapped,
}

struct EmRun<'a> {
    config: &'a EmConfig,
    dataset: &'a LabeledDataset,
    table: &'a AnnotationTable,
    true_cms: Option<&'a [ConfusionMatrix]>,
}

/// Shared driver for both EM variants: per round, G classifier epochs on the
/// current posterior, then the variant's CM M-step and E-step. Model
/// selection is per classifier epoch on validation accuracy, pairing the
/// classifier with the newest CM estimates.
fn run_em(kind: EmKind, run: EmRun) -> Result<TrainedModel> {
    let EmRun {
        config,
        dataset,
        table,
        true_cms,
    } = run;
    config.validate()?;
    if dataset.len() != table.num_examples() {
        return Err(Error::shape(format!(
            "dataset has {} examples but table has {}",
            dataset.len(),
            table.num_examples()
        )));
    }
    let l = dataset.num_classes();
    let r = table.num_annotators();
    let base = &config.base;
    let root = RngState::new(base.seed);
    let (train_indices, val_indices) =
        split_train_val(dataset.len(), base.validation_fraction, base.seed)?;
    if base.batch_size > train_indices.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds the {}-example training split",
            base.batch_size,
            train_indices.len()
        )));
    }
    let val_targets: Vec<usize> = val_indices
        .iter()
        .map(|&n| match base.validation_target {
            crate::trainer::ValidationTarget::GroundTruth => Ok(dataset.label(n)),
            crate::trainer::ValidationTarget::MajorityVote => {
                metrics::majority_vote(table.row(n), l)
            }
        })
        .collect::<Result<_>>()?;

    let mut classifier = ClassifierParams::init(
        ClassifierConfig {
            input_dim: dataset.input_dim(),
            hidden: base.hidden.clone(),
            num_classes: l,
        },
        &mut root.substream("weight-init"),
    )?;
    let identity = ConfusionMatrix::identity(l)?;
    let mut cms: Vec<ConfusionMatrix> = vec![identity; r];
    let mut q = init_posterior(table);

    let mut adam = AdamState::new(base.learning_rate);
    let mut shuffle_rng = root.substream("epoch-shuffle");
    let mut history: Vec<EmEpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, ClassifierParams, Vec<ConfusionMatrix>)> = None;
    let mut grad_updates = 0u64;
    let mut epoch = 0usize;

    for round in 0..config.rounds {
        for _ in 0..config.epochs_per_round {
            let started = Instant::now();
            let step = m_step_classifier(
                &mut classifier,
                dataset,
                &q,
                &train_indices,
                1,
                base.batch_size,
                &mut adam,
                &mut shuffle_rng,
            );
            let (mean_loss, updates) = match step {
                Ok(v) => v,
                Err(Error::TrainingDiverged { message, last_state }) => {
                    // Attach the EM run's own best state instead of the bare
                    // classifier the M-step could see.
                    let state = match best {
                        Some((_, e, c, m)) => TrainedModel {
                            classifier: c,
                            cms: m,
                            raw_cms: None,
                            history: Vec::new(),
                            selection_epoch: Some(e),
                            grad_updates: grad_updates + last_state.grad_updates,
                        },
                        None => *last_state,
                    };
                    return Err(Error::TrainingDiverged {
                        message,
                        last_state: Box::new(state),
                    });
                }
                Err(e) => return Err(e),
            };
            grad_updates += updates;
            let mut hits = 0usize;
            for (&n, &t) in val_indices.iter().zip(&val_targets) {
                if classifier.predict(dataset.features(n))? == t {
                    hits += 1;
                }
            }
            let accuracy = hits as f64 / val_indices.len() as f64;
            let cm_error = match true_cms {
                Some(truth) => Some(metrics::cm_error(truth, &cms)?),
                None => None,
            };
            history.push(EmEpochRecord {
                em_round: round,
                record: EpochRecord {
                    epoch,
                    total_loss: mean_loss,
                    ce_loss: mean_loss,
                    trace_term: cms.iter().map(ConfusionMatrix::trace).sum(),
                    val_accuracy: accuracy,
                    cm_error,
                    seconds: started.elapsed().as_secs_f64(),
                },
            });
            // Same tie-break as the joint trainer: equal validation accuracy
            // keeps the later snapshot.
            let improved = match &best {
                Some((best_acc, _, _, _)) => accuracy >= *best_acc,
                None => true,
            };
            if improved {
                best = Some((accuracy, epoch, classifier.clone(), cms.clone()));
            }
            epoch += 1;
        }
        match kind {
            EmKind::Generalized => {
                cms = m_step_cms_gem(&q, table, &train_indices)?;
                e_step_gem(&mut q, &classifier, dataset, &cms, table, &train_indices)?;
            }
            EmKind::ModelBootstrapped => {
                let predictions = hard_predictions(&classifier, dataset, &train_indices)?;
                cms = m_step_cms_mbem(&predictions, table, &train_indices)?;
                let prior = mbem_prior(&predictions, l)?;
                e_step_mbem(&mut q, &prior, &cms, table, &train_indices)?;
            }
        }
    }

    let (acc_epoch, sel_classifier, sel_cms) = match best {
        Some((_, e, c, m)) => (Some(e), c, m),
        None => (None, classifier, cms),
    };
    Ok(TrainedModel {
        classifier: sel_classifier,
        cms: sel_cms,
        raw_cms: None,
        history: history.iter().map(|h| h.record.clone()).collect(),
        selection_epoch: acc_epoch,
        grad_updates,
    })
}

/// Generalized EM: soft posteriors, closed-form CM ratio, classifier-driven
/// E-step.
pub fn run_generalized_em(
    config: &EmConfig,
    dataset: &LabeledDataset,
    table: &AnnotationTable,
    true_cms: Option<&[ConfusionMatrix]>,
) -> Result<TrainedModel> {
    run_em(
        EmKind::Generalized,
        EmRun {
            config,
            dataset,
            table,
            true_cms,
        },
    )
}

/// Model-bootstrapped EM: hard predictions, hard-count CM update, class
/// prior in the E-step.
pub fn run_mbem(
    config: &EmConfig,
    dataset: &LabeledDataset,
    table: &AnnotationTable,
    true_cms: Option<&[ConfusionMatrix]>,
) -> Result<TrainedModel> {
    run_em(
        EmKind::ModelBootstrapped,
        EmRun {
            config,
            dataset,
            table,
            true_cms,
        },
    )
}

/// Baseline that aggregates labels by majority vote and trains the
/// classifier on the votes. No confusion matrices are estimated; identity
/// matrices stand in so downstream reports have a comparable estimate.
pub fn run_majority_vote(
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
    let l = dataset.num_classes();
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
    let val_targets: Vec<usize> = val_indices
        .iter()
        .map(|&n| match config.validation_target {
            crate::trainer::ValidationTarget::GroundTruth => Ok(dataset.label(n)),
            crate::trainer::ValidationTarget::MajorityVote => {
                metrics::majority_vote(table.row(n), l)
            }
        })
        .collect::<Result<_>>()?;
    let mut classifier = ClassifierParams::init(
        ClassifierConfig {
            input_dim: dataset.input_dim(),
            hidden: config.hidden.clone(),
            num_classes: l,
        },
        &mut root.substream("weight-init"),
    )?;
    let q = majority_vote_posterior(table)?;
    let cms: Vec<ConfusionMatrix> = vec![ConfusionMatrix::identity(l)?; table.num_annotators()];
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle_rng = root.substream("epoch-shuffle");
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ClassifierParams)> = None;
    let mut grad_updates = 0u64;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let (mean_loss, updates) = m_step_classifier(
            &mut classifier,
            dataset,
            &q,
            &train_indices,
            1,
            config.batch_size,
            &mut adam,
            &mut shuffle_rng,
        )?;
        grad_updates += updates;
        let mut hits = 0usize;
        for (&n, &t) in val_indices.iter().zip(&val_targets) {
            if classifier.predict(dataset.features(n))? == t {
                hits += 1;
            }
        }
        let accuracy = hits as f64 / val_indices.len() as f64;
        let cm_error = match true_cms {
            Some(truth) => Some(metrics::cm_error(truth, &cms)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            total_loss: mean_loss,
            ce_loss: mean_loss,
            trace_term: cms.iter().map(ConfusionMatrix::trace).sum(),
            val_accuracy: accuracy,
            cm_error,
            seconds: started.elapsed().as_secs_f64(),
        });
        let improved = match &best {
            Some((best_acc, _, _)) => accuracy >= *best_acc,
            None => true,
        };
        if improved {
            best = Some((accuracy, epoch, classifier.clone()));
        }
    }
    let (selection_epoch, sel_classifier) = match best {
        Some((_, e, c)) => (Some(e), c),
        None => (None, classifier),
    };
    Ok(TrainedModel {
        classifier: sel_classifier,
        cms,
        raw_cms: None,
        history,
        selection_epoch,
        grad_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator_sim::{AnnotatorKind, AnnotatorPopulation};
    use crate::datasets::{gen_blobs, BlobConfig};
    use crate::trainer::{train, ValidationTarget};

    fn table_from(rows: Vec<Vec<Option<usize>>>, l: usize) -> AnnotationTable {
        AnnotationTable::new(rows, l).unwrap()
    }

    fn all_indices(table: &AnnotationTable) -> Vec<usize> {
        (0..table.num_examples()).collect()
    }

    #[test]
    fn init_posterior_counts_present_labels() {
        let table = table_from(vec![vec![Some(0), Some(0), Some(1)]], 2);
        let q = init_posterior(&table);
        assert!((q.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.row(0)[1] - 1.0 / 3.0).abs() < 1e-15);

        let unanimous = table_from(vec![vec![Some(1), Some(1)]], 2);
        assert_eq!(init_posterior(&unanimous).row(0), &[0.0, 1.0]);

        let sparse = table_from(
            vec![vec![Some(0), None, None], vec![None, Some(2), None]],
            3,
        );
        let q = init_posterior(&sparse);
        assert_eq!(q.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(q.row(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn posterior_table_validates_rows() {
        let good = DenseMatrix::from_rows(&[vec![0.25, 0.75]]).unwrap();
        assert!(PosteriorTable::new(good).is_ok());
        let bad_sum = DenseMatrix::from_rows(&[vec![0.25, 0.5]]).unwrap();
        assert!(PosteriorTable::new(bad_sum).is_err());
        let negative = DenseMatrix::from_rows(&[vec![-0.25, 1.25]]).unwrap();
        assert!(PosteriorTable::new(negative).is_err());
    }

    #[test]
    fn gem_m_step_one_hot_is_identity() {
        let table = table_from(vec![vec![Some(0)], vec![Some(1)]], 2);
        let q = PosteriorTable::new(
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let cms = m_step_cms_gem(&q, &table, &all_indices(&table)).unwrap();
        assert_eq!(cms[0], ConfusionMatrix::identity(2).unwrap());
    }

    #[test]
    fn gem_m_step_uniform_q_gives_label_marginal_columns() {
        // Labels 0,0,0,1 with uniform q: every column of the estimate equals
        // the empirical label marginal (0.75, 0.25).
        let table = table_from(
            vec![vec![Some(0)], vec![Some(0)], vec![Some(0)], vec![Some(1)]],
            2,
        );
        let q = PosteriorTable::new(DenseMatrix::from_fn(4, 2, |_, _| 0.5)).unwrap();
        let cms = m_step_cms_gem(&q, &table, &all_indices(&table)).unwrap();
        for i in 0..2 {
            assert!((cms[0].get(0, i) - 0.75).abs() < 1e-12);
            assert!((cms[0].get(1, i) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gem_m_step_unlabeled_annotator_falls_back_to_identity() {
        let table = table_from(
            vec![vec![Some(0), None], vec![Some(1), None]],
            2,
        );
        let q = init_posterior(&table);
        let cms = m_step_cms_gem(&q, &table, &all_indices(&table)).unwrap();
        assert_eq!(cms[1], ConfusionMatrix::identity(2).unwrap());
    }

    #[test]
    fn gem_m_step_outputs_are_column_stochastic() {
        let mut rng = RngState::new(64);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            4,
            0.6,
            3,
            0.1,
            &mut rng,
        )
        .unwrap();
        let truths: Vec<usize> = (0..200).map(|n| n % 4).collect();
        let table = pop.annotate(&truths, 2, &mut rng).unwrap();
        let q = init_posterior(&table);
        let cms = m_step_cms_gem(&q, &table, &all_indices(&table)).unwrap();
        for cm in &cms {
            for s in cm.matrix().column_sums() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    /// One full GEM round on the 6-example fixture, checked against exact
    /// rational arithmetic: the M-step yields [[5/6,1/6],[1/6,5/6]] for both
    /// annotators and the E-step posteriors are 25/26-1/26 splits.
    #[test]
    fn gem_round_matches_hand_computation() {
        let table = table_from(
            vec![
                vec![Some(0), Some(0)],
                vec![Some(0), Some(1)],
                vec![Some(1), Some(0)],
                vec![Some(1), Some(1)],
                vec![Some(0), Some(0)],
                vec![Some(1), Some(1)],
            ],
            2,
        );
        let indices = all_indices(&table);
        let mut q = init_posterior(&table);
        assert_eq!(q.row(0), &[1.0, 0.0]);
        assert_eq!(q.row(1), &[0.5, 0.5]);

        let cms = m_step_cms_gem(&q, &table, &indices).unwrap();
        for cm in &cms {
            assert!((cm.get(0, 0) - 5.0 / 6.0).abs() < 1e-9);
            assert!((cm.get(1, 0) - 1.0 / 6.0).abs() < 1e-9);
            assert!((cm.get(0, 1) - 1.0 / 6.0).abs() < 1e-9);
            assert!((cm.get(1, 1) - 5.0 / 6.0).abs() < 1e-9);
        }

        // Zero-weight classifier: uniform probabilities.
        let classifier = ClassifierParams::zeros(ClassifierConfig {
            input_dim: 1,
            hidden: vec![],
            num_classes: 2,
        })
        .unwrap();
        let dataset = LabeledDataset::new(vec![vec![0.0]; 6], vec![0; 6], 2).unwrap();
        e_step_gem(&mut q, &classifier, &dataset, &cms, &table, &indices).unwrap();
        let expect = [
            [25.0 / 26.0, 1.0 / 26.0],
            [0.5, 0.5],
            [0.5, 0.5],
            [1.0 / 26.0, 25.0 / 26.0],
            [25.0 / 26.0, 1.0 / 26.0],
            [1.0 / 26.0, 25.0 / 26.0],
        ];
        for (n, row) in expect.iter().enumerate() {
            assert!((q.row(n)[0] - row[0]).abs() < 1e-9, "row {n}");
            assert!((q.row(n)[1] - row[1]).abs() < 1e-9, "row {n}");
        }
    }

    #[test]
    fn e_step_with_uniform_cms_returns_classifier_probs() {
        let mut rng = RngState::new(9);
        let classifier = ClassifierParams::init(
            ClassifierConfig {
                input_dim: 2,
                hidden: vec![4],
                num_classes: 3,
            },
            &mut rng,
        )
        .unwrap();
        let dataset = LabeledDataset::new(
            vec![vec![0.5, -1.0], vec![2.0, 0.3]],
            vec![0, 1],
            3,
        )
        .unwrap();
        let table = table_from(vec![vec![Some(0)], vec![Some(2)]], 3);
        let uniform = crate::annotator_sim::make_hammer_spammer(3, 0.0).unwrap();
        let mut q = init_posterior(&table);
        e_step_gem(&mut q, &classifier, &dataset, &[uniform], &table, &[0, 1]).unwrap();
        for n in 0..2 {
            let p = classifier.forward(dataset.features(n)).unwrap();
            for j in 0..3 {
                assert!((q.row(n)[j] - p[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn e_step_identity_cms_pin_the_observed_label() {
        let classifier = ClassifierParams::zeros(ClassifierConfig {
            input_dim: 1,
            hidden: vec![],
            num_classes: 3,
        })
        .unwrap();
        let dataset = LabeledDataset::new(vec![vec![0.0]; 3], vec![0, 1, 2], 3).unwrap();
        let table = table_from(
            vec![
                vec![Some(2), Some(2)],
                vec![Some(0), Some(0)],
                vec![Some(1), Some(1)],
            ],
            3,
        );
        let id = ConfusionMatrix::identity(3).unwrap();
        let mut q = init_posterior(&table);
        e_step_gem(
            &mut q,
            &classifier,
            &dataset,
            &[id.clone(), id],
            &table,
            &[0, 1, 2],
        )
        .unwrap();
        // Unanimous labels + identity CMs force exactly one-hot rows: a
        // zero CM entry excludes the class outright instead of leaving it
        // clamped mass.
        assert_eq!(q.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(q.row(1), &[1.0, 0.0, 0.0]);
        assert_eq!(q.row(2), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn e_step_degenerate_row_is_reported() {
        let classifier = ClassifierParams::zeros(ClassifierConfig {
            input_dim: 1,
            hidden: vec![],
            num_classes: 2,
        })
        .unwrap();
        let dataset = LabeledDataset::new(vec![vec![0.0]], vec![0], 2).unwrap();
        // Annotators contradict each other under strictly-zero CMs: the
        // identity says label 0 implies class 0, the flipped identity says
        // label 0 implies class 1; their product has zero mass everywhere.
        let table = table_from(vec![vec![Some(0), Some(0)]], 2);
        let id = ConfusionMatrix::identity(2).unwrap();
        let flipped = ConfusionMatrix::new(
            DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let mut q = init_posterior(&table);
        match e_step_gem(&mut q, &classifier, &dataset, &[id, flipped], &table, &[0]) {
            Err(Error::DegeneratePosterior(msg)) => assert!(msg.contains("example 0")),
            other => panic!("expected degenerate posterior, got {other:?}"),
        }
    }

    #[test]
    fn k1_identity_collapse_mechanism() {
        // With one label per example, the initial posterior is one-hot at
        // the label itself, so the M-step reproduces the identity no matter
        // what the annotators' true matrices are.
        let mut rng = RngState::new(90);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            4,
            0.3,
            5,
            0.0,
            &mut rng,
        )
        .unwrap();
        let truths: Vec<usize> = (0..400).map(|n| n % 4).collect();
        let table = pop.annotate(&truths, 1, &mut rng).unwrap();
        let mut q = init_posterior(&table);
        let indices = all_indices(&table);
        let cms = m_step_cms_gem(&q, &table, &indices).unwrap();
        for cm in &cms {
            for i in 0..4 {
                let col = cm.column(i);
                let argmax = col
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, i);
                assert!((cm.get(i, i) - 1.0).abs() < 1e-9);
            }
        }
        // The pair (hard posterior, identity CMs) is an exact fixed point:
        // the zero off-diagonals exclude every other class in the E-step no
        // matter how confidently a classifier disagrees, so another M-step
        // reproduces the same matrices bit for bit.
        let mut dissent = RngState::new(91);
        let classifier = ClassifierParams::init(
            ClassifierConfig {
                input_dim: 2,
                hidden: vec![8],
                num_classes: 4,
            },
            &mut dissent,
        )
        .unwrap();
        let features: Vec<Vec<f64>> =
            (0..400).map(|_| vec![dissent.uniform(), dissent.uniform()]).collect();
        let dataset = LabeledDataset::new(features, truths, 4).unwrap();
        let before: Vec<Vec<f64>> = (0..400).map(|n| q.row(n).to_vec()).collect();
        e_step_gem(&mut q, &classifier, &dataset, &cms, &table, &indices).unwrap();
        for n in 0..400 {
            assert_eq!(q.row(n), before[n].as_slice());
        }
        let again = m_step_cms_gem(&q, &table, &indices).unwrap();
        assert_eq!(again, cms);
    }

    #[test]
    fn mbem_m_step_with_true_predictions_recovers_empirical_cm() {
        let mut rng = RngState::new(31);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            0.7,
            2,
            0.0,
            &mut rng,
        )
        .unwrap();
        let truths: Vec<usize> = (0..6000).map(|n| n % 3).collect();
        let table = pop.annotate(&truths, 2, &mut rng).unwrap();
        let indices = all_indices(&table);
        let cms = m_step_cms_mbem(&truths, &table, &indices).unwrap();
        for (est, truth) in cms.iter().zip(pop.annotators()) {
            assert!(
                est.matrix().max_abs_diff(truth.matrix()) < 0.05,
                "hard-count estimate strayed from the generating matrix"
            );
        }
    }

    #[test]
    fn mbem_prior_counts_and_smooths() {
        let prior = mbem_prior(&[0, 0, 1, 1], 2).unwrap();
        assert_eq!(prior, vec![0.5, 0.5]);
        let prior = mbem_prior(&[0, 0, 0, 1], 2).unwrap();
        assert_eq!(prior, vec![0.75, 0.25]);
        // Class 2 unseen: additive mass 1/(N*L) then renormalize.
        let prior = mbem_prior(&[0, 0, 1, 1], 3).unwrap();
        let sum: f64 = prior.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(prior[2] > 0.0);
        assert!((prior[2] - (1.0 / 3.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn mbem_e_step_with_uniform_prior_is_cm_likelihood_only() {
        let table = table_from(vec![vec![Some(0)], vec![Some(1)]], 2);
        let cm = ConfusionMatrix::new(
            DenseMatrix::from_rows(&[vec![0.8, 0.3], vec![0.2, 0.7]]).unwrap(),
        )
        .unwrap();
        let mut q = init_posterior(&table);
        e_step_mbem(&mut q, &[0.5, 0.5], &[cm.clone()], &table, &[0, 1]).unwrap();
        // Row n: q_j proportional to cm[label_n][j].
        let expect0 = [0.8 / 1.1, 0.3 / 1.1];
        let expect1 = [0.2 / 0.9, 0.7 / 0.9];
        assert!((q.row(0)[0] - expect0[0]).abs() < 1e-12);
        assert!((q.row(0)[1] - expect0[1]).abs() < 1e-12);
        assert!((q.row(1)[0] - expect1[0]).abs() < 1e-12);
        assert!((q.row(1)[1] - expect1[1]).abs() < 1e-12);
    }

    #[test]
    fn m_step_classifier_one_epoch_matches_manual_trace() {
        let mut rng = RngState::new(17);
        let dataset = gen_blobs(&BlobConfig {
            num_classes: 2,
            dim: 2,
            separation: 2.0,
            std: 1.0,
            examples_per_class: 20,
            seed: 5,
        })
        .unwrap();
        let config = ClassifierConfig {
            input_dim: 2,
            hidden: vec![3],
            num_classes: 2,
        };
        let init = ClassifierParams::init(config, &mut rng).unwrap();
        let table = table_from(
            dataset.labels().iter().map(|&y| vec![Some(y)]).collect(),
            2,
        );
        let q = init_posterior(&table);
        let indices: Vec<usize> = (0..dataset.len()).collect();

        let mut fast = init.clone();
        let mut adam = AdamState::new(1e-3);
        let mut shuffle = RngState::new(123);
        m_step_classifier(&mut fast, &dataset, &q, &indices, 1, 8, &mut adam, &mut shuffle)
            .unwrap();

        // Manual single epoch with the same shuffle stream.
        let mut manual = init.clone();
        let mut adam2 = AdamState::new(1e-3);
        let mut shuffle2 = RngState::new(123);
        let mut order = indices.clone();
        shuffle2.shuffle(&mut order);
        for batch in order.chunks(8) {
            let (_, grads) = soft_target_loss_grads(&manual, &dataset, q.matrix(), batch).unwrap();
            adam_step(&mut adam2, manual.blocks_mut(), &grads).unwrap();
        }
        for (a, b) in fast.blocks().iter().zip(manual.blocks()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn m_step_classifier_fits_one_hot_ground_truth() {
        let dataset = gen_blobs(&BlobConfig {
            num_classes: 3,
            dim: 3,
            separation: 3.0,
            std: 1.0,
            examples_per_class: 60,
            seed: 6,
        })
        .unwrap();
        let table = table_from(
            dataset.labels().iter().map(|&y| vec![Some(y)]).collect(),
            3,
        );
        let q = init_posterior(&table); // one-hot at GT
        let indices: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = RngState::new(77);
        let mut classifier = ClassifierParams::init(
            ClassifierConfig {
                input_dim: 3,
                hidden: vec![16],
                num_classes: 3,
            },
            &mut rng,
        )
        .unwrap();
        let mut adam = AdamState::new(1e-3);
        let mut shuffle = RngState::new(7);
        m_step_classifier(&mut classifier, &dataset, &q, &indices, 60, 20, &mut adam, &mut shuffle)
            .unwrap();
        let mut hits = 0;
        for n in 0..dataset.len() {
            if classifier.predict(dataset.features(n)).unwrap() == dataset.label(n) {
                hits += 1;
            }
        }
        let acc = hits as f64 / dataset.len() as f64;
        assert!(acc > 0.95, "training accuracy {acc}");
    }

    #[test]
    fn m_step_classifier_uniform_targets_flatten_the_output() {
        let dataset = gen_blobs(&BlobConfig {
            num_classes: 2,
            dim: 2,
            separation: 2.0,
            std: 1.0,
            examples_per_class: 30,
            seed: 8,
        })
        .unwrap();
        let q = PosteriorTable::new(DenseMatrix::from_fn(dataset.len(), 2, |_, _| 0.5)).unwrap();
        let indices: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = RngState::new(3);
        let mut classifier = ClassifierParams::init(
            ClassifierConfig {
                input_dim: 2,
                hidden: vec![8],
                num_classes: 2,
            },
            &mut rng,
        )
        .unwrap();
        let mut adam = AdamState::new(1e-2);
        let mut shuffle = RngState::new(9);
        m_step_classifier(&mut classifier, &dataset, &q, &indices, 80, 20, &mut adam, &mut shuffle)
            .unwrap();
        // Mean output entropy approaches ln 2.
        let mut entropy = 0.0;
        for n in 0..dataset.len() {
            let p = classifier.forward(dataset.features(n)).unwrap();
            entropy -= p.iter().map(|v| v * v.max(1e-12).ln()).sum::<f64>();
        }
        entropy /= dataset.len() as f64;
        assert!((entropy - std::f64::consts::LN_2).abs() < 0.05, "entropy {entropy}");
    }

    fn em_test_setup(
        k: usize,
        skill: f64,
        seed: u64,
    ) -> (LabeledDataset, AnnotationTable, AnnotatorPopulation) {
        let dataset = gen_blobs(&BlobConfig {
            num_classes: 3,
            dim: 3,
            separation: 3.0,
            std: 1.0,
            examples_per_class: 100,
            seed,
        })
        .unwrap();
        let mut rng = RngState::new(seed ^ 0xABCD);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            skill,
            5,
            0.0,
            &mut rng,
        )
        .unwrap();
        let table = pop.annotate(dataset.labels(), k, &mut rng).unwrap();
        (dataset, table, pop)
    }

    fn quick_em_config(rounds: usize, epochs_per_round: usize, seed: u64) -> EmConfig {
        EmConfig {
            rounds,
            epochs_per_round,
            base: TrainConfig {
                seed,
                batch_size: 20,
                hidden: vec![16],
                validation_target: ValidationTarget::GroundTruth,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn gem_dense_labels_recover_cms() {
        let (dataset, table, pop) = em_test_setup(5, 0.8, 1);
        let config = quick_em_config(10, 3, 1);
        let model =
            run_generalized_em(&config, &dataset, &table, Some(pop.annotators())).unwrap();
        let err = metrics::cm_error(pop.annotators(), &model.cms).unwrap();
        assert!(err < 0.05, "GEM cm_error {err}");
    }

    #[test]
    fn gem_sparse_labels_collapse_to_identity() {
        // One label per example: the M-step's posterior is dominated by the
        // observed labels, so the estimates stay near identity even though
        // the true mean diagonal is far lower.
        let (dataset, table, pop) = em_test_setup(1, 0.3, 2);
        let config = quick_em_config(8, 2, 2);
        let model =
            run_generalized_em(&config, &dataset, &table, Some(pop.annotators())).unwrap();
        let mean_estimated_skill: f64 = model
            .cms
            .iter()
            .map(metrics::skill_level)
            .sum::<f64>()
            / model.cms.len() as f64;
        assert!(
            mean_estimated_skill > 0.95,
            "estimated mean diagonal {mean_estimated_skill}"
        );
        let true_skill: f64 = pop
            .annotators()
            .iter()
            .map(metrics::skill_level)
            .sum::<f64>()
            / 5.0;
        assert!((true_skill - 0.3).abs() < 1e-9);
    }

    #[test]
    fn minimal_em_run_returns_without_error() {
        let (dataset, table, _) = em_test_setup(3, 0.8, 3);
        let config = quick_em_config(1, 1, 3);
        let model = run_generalized_em(&config, &dataset, &table, None).unwrap();
        assert_eq!(model.history.len(), 1);
        assert!(model.selection_epoch.is_some());
        let model = run_mbem(&config, &dataset, &table, None).unwrap();
        assert_eq!(model.history.len(), 1);
    }

    #[test]
    fn budget_parity_with_trainer() {
        let (dataset, table, pop) = em_test_setup(3, 0.8, 4);
        let train_config = TrainConfig {
            epochs: 12,
            seed: 4,
            batch_size: 20,
            hidden: vec![16],
            ..TrainConfig::default()
        };
        let ours = train(&train_config, &dataset, &table, Some(pop.annotators())).unwrap();
        let em_config = EmConfig {
            rounds: 4,
            epochs_per_round: 3,
            base: train_config.clone(),
        };
        let gem = run_generalized_em(&em_config, &dataset, &table, None).unwrap();
        let mbem = run_mbem(&em_config, &dataset, &table, None).unwrap();
        assert_eq!(ours.grad_updates, gem.grad_updates);
        assert_eq!(ours.grad_updates, mbem.grad_updates);
        let mv = run_majority_vote(&train_config, &dataset, &table, None).unwrap();
        assert_eq!(ours.grad_updates, mv.grad_updates);
    }

    #[test]
    fn mbem_runs_and_tracks_history() {
        let (dataset, table, pop) = em_test_setup(5, 0.8, 5);
        let config = quick_em_config(6, 2, 5);
        let model = run_mbem(&config, &dataset, &table, Some(pop.annotators())).unwrap();
        assert_eq!(model.history.len(), 12);
        for rec in &model.history {
            assert!(rec.cm_error.is_some());
            assert!((0.0..=1.0).contains(&rec.val_accuracy));
        }
        // With dense labels and decent skill the hard-count estimates land
        // well away from identity-collapse territory (which would sit near
        // 0.3 for this population).
        let err = metrics::cm_error(pop.annotators(), &model.cms).unwrap();
        assert!(err < 0.15, "MBEM cm_error {err}");
    }

    #[test]
    fn majority_vote_baseline_learns_separable_data() {
        let (dataset, table, _) = em_test_setup(5, 0.8, 6);
        let config = TrainConfig {
            epochs: 15,
            seed: 6,
            batch_size: 20,
            hidden: vec![16],
            ..TrainConfig::default()
        };
        let model = run_majority_vote(&config, &dataset, &table, None).unwrap();
        let acc = crate::trainer::evaluate(&model, &dataset).unwrap();
        assert!(acc > 0.9, "majority-vote training accuracy {acc}");
        // Stand-in estimates are identity matrices.
        for cm in &model.cms {
            assert_eq!(*cm, ConfusionMatrix::identity(3).unwrap());
        }
    }

    #[test]
    fn em_history_csv_includes_round_column() {
        let dir = tempfile::tempdir().unwrap();
        let history = vec![EmEpochRecord {
            em_round: 2,
            record: EpochRecord {
                epoch: 7,
                total_loss: 0.5,
                ce_loss: 0.5,
                trace_term: 4.0,
                val_accuracy: 0.75,
                cm_error: None,
                seconds: 0.01,
            },
        }];
        let path = dir.path().join("em_history.csv");
        save_em_history_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,total_loss,ce_loss,trace_term,val_accuracy,cm_error,seconds,em_round"
        );
        assert!(lines[1].starts_with("7,0.5,0.5,4,0.75,,"));
        assert!(lines[1].ends_with(",2"));
    }

    #[test]
    fn annotate_rounds_reconstructs_round_indices() {
        let (dataset, table, _) = em_test_setup(3, 0.8, 7);
        let config = quick_em_config(3, 2, 7);
        let model = run_generalized_em(&config, &dataset, &table, None).unwrap();
        let annotated = annotate_rounds(&model.history, config.epochs_per_round);
        let rounds: Vec<usize> = annotated.iter().map(|h| h.em_round).collect();
        assert_eq!(rounds, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn em_config_validation() {
        let mut config = quick_em_config(1, 1, 0);
        assert!(config.validate().is_ok());
        config.rounds = 0;
        assert!(config.validate().is_err());
        let mut config = quick_em_config(1, 1, 0);
        config.epochs_per_round = 0;
        assert!(config.validate().is_err());
    }
}
