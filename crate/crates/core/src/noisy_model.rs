//! The noisy-label observation model: a softmax classifier whose output is
//! passed through one estimated confusion matrix per annotator, trained by
//! minimizing cross-entropy on the observed labels plus a trace penalty on
//! the realized confusion matrices. Gradients are exact and hand-derived.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator_sim::{AnnotationTable, ConfusionMatrix};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::numkit::{sigmoid, softmax, softplus, DenseMatrix, RngState};

/// Probabilities are clamped below at this value inside every logarithm, in
/// all training methods alike.
pub const LOG_CLAMP: f64 = 1e-12;

/// Raw value placed on the diagonal (and negated off the diagonal) so the
/// realized matrices start near the identity while keeping soft-plus
/// gradients alive.
pub const IDENTITY_INIT_RAW: f64 = 4.6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    /// Hidden layer widths; empty means a linear softmax classifier.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("classifier input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer width must be positive"));
        }
        Ok(())
    }

    /// Layer sizes from input to logits.
    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.num_classes);
        d
    }
}

/// Dense rectifier network ending in softmax. Parameter blocks are stored as
/// [W0, b0, W1, b1, ...]; weights are (out x in), biases are (out x 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    config: ClassifierConfig,
    blocks: Vec<DenseMatrix>,
}

impl ClassifierParams {
    /// Weights uniform in +/- sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(config: ClassifierConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let mut blocks = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let weight =
                DenseMatrix::from_fn(n_out, n_in, |_, _| (rng.uniform() * 2.0 - 1.0) * bound);
            blocks.push(weight);
            blocks.push(DenseMatrix::zeros(n_out, 1));
        }
        Ok(ClassifierParams { config, blocks })
    }

    /// All-zero parameters: every forward pass yields the uniform
    /// distribution. Useful as a neutral starting point in tests.
    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let mut blocks = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            blocks.push(DenseMatrix::zeros(w[1], w[0]));
            blocks.push(DenseMatrix::zeros(w[1], 1));
        }
        Ok(ClassifierParams { config, blocks })
    }

    /// Builds from explicit blocks (e.g. a checkpoint or a test fixture).
    pub fn from_blocks(config: ClassifierConfig, blocks: Vec<DenseMatrix>) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        if blocks.len() != 2 * (dims.len() - 1) {
            return Err(Error::shape(format!(
                "classifier expects {} blocks, got {}",
                2 * (dims.len() - 1),
                blocks.len()
            )));
        }
        for (l, w) in dims.windows(2).enumerate() {
            let weight = &blocks[2 * l];
            let bias = &blocks[2 * l + 1];
            if weight.rows() != w[1] || weight.cols() != w[0] || bias.rows() != w[1] || bias.cols() != 1
            {
                return Err(Error::shape(format!("classifier block {l} has wrong shape")));
            }
        }
        if blocks.iter().any(|b| !b.all_finite()) {
            return Err(Error::invalid("classifier parameters must be finite"));
        }
        Ok(ClassifierParams { config, blocks })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[DenseMatrix] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.blocks
    }

    pub fn grad_zeros(&self) -> Vec<DenseMatrix> {
        self.blocks
            .iter()
            .map(|b| DenseMatrix::zeros(b.rows(), b.cols()))
            .collect()
    }

    fn num_layers(&self) -> usize {
        self.blocks.len() / 2
    }

    fn forward_internal(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.config.input_dim {
            return Err(Error::shape(format!(
                "classifier input has {} features, expected {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let layers = self.num_layers();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut current = x.to_vec();
        let mut logits = Vec::new();
        for l in 0..layers {
            let weight = &self.blocks[2 * l];
            let bias = &self.blocks[2 * l + 1];
            let mut z = weight.matvec(&current)?;
            for (zj, bj) in z.iter_mut().zip(bias.data()) {
                *zj += bj;
            }
            if l + 1 == layers {
                logits = z;
            } else {
                for zj in z.iter_mut() {
                    *zj = zj.max(0.0);
                }
                activations.push(current);
                current = z;
            }
        }
        activations.push(current);
        let probs = softmax(&logits)?;
        Ok(ForwardCache {
            activations,
            probs,
        })
    }

    /// p(y | x): softmax over the network's logits.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_internal(x)?.probs)
    }

    /// Most confident class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.forward(x)?;
        let mut best = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Backpropagates d(loss)/d(logits) through the network, accumulating
    /// into `grads` (same block layout as `blocks`).
    fn backprop(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        grads: &mut [DenseMatrix],
    ) -> Result<()> {
        if grads.len() != self.blocks.len() {
            return Err(Error::shape("gradient block count mismatch".to_string()));
        }
        let layers = self.num_layers();
        let mut delta = d_logits.to_vec();
        for l in (0..layers).rev() {
            let input = &cache.activations[l];
            // dW += delta (outer) input; db += delta.
            {
                let gw = &mut grads[2 * l];
                for (j, dj) in delta.iter().enumerate() {
                    let row = gw.row_mut(j);
                    for (i, xi) in input.iter().enumerate() {
                        row[i] += dj * xi;
                    }
                }
            }
            {
                let gb = &mut grads[2 * l + 1];
                for (j, dj) in delta.iter().enumerate() {
                    gb.data_mut()[j] += dj;
                }
            }
            if l > 0 {
                let weight = &self.blocks[2 * l];
                let mut prev = vec![0.0; weight.cols()];
                for (j, dj) in delta.iter().enumerate() {
                    for (i, wji) in weight.row(j).iter().enumerate() {
                        prev[i] += dj * wji;
                    }
                }
                // Rectifier mask: the stored activation is already max(z, 0).
                for (pi, ai) in prev.iter_mut().zip(input) {
                    if *ai <= 0.0 {
                        *pi = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

/// Per-example forward pass state kept for backprop: the input and every
/// post-rectifier activation, plus the softmax output.
struct ForwardCache {
    /// activations[l] is the input to layer l (activations[0] = x).
    activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

/// Unconstrained parameters behind the confusion-matrix estimates. Realized
/// matrices are soft-plus followed by column normalization, so they are
/// strictly positive and column-stochastic for any finite raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmParams {
    raw: Vec<DenseMatrix>,
    shared: bool,
    num_annotators: usize,
}

impl CmParams {
    /// Near-identity initialization: +IDENTITY_INIT_RAW on the diagonal,
    /// -IDENTITY_INIT_RAW elsewhere (realized diagonal ~0.99).
    pub fn identity_init(num_classes: usize, num_annotators: usize, shared: bool) -> Result<Self> {
        if num_classes < 2 || num_annotators < 1 {
            return Err(Error::invalid(
                "confusion parameters need at least 2 classes and 1 annotator",
            ));
        }
        let raw_count = if shared { 1 } else { num_annotators };
        let block = DenseMatrix::from_fn(num_classes, num_classes, |j, i| {
            if j == i {
                IDENTITY_INIT_RAW
            } else {
                -IDENTITY_INIT_RAW
            }
        });
        Ok(CmParams {
            raw: vec![block; raw_count],
            shared,
            num_annotators,
        })
    }

    pub fn from_raw(raw: Vec<DenseMatrix>, shared: bool, num_annotators: usize) -> Result<Self> {
        let expect = if shared { 1 } else { num_annotators };
        if raw.len() != expect {
            return Err(Error::shape(format!(
                "expected {expect} raw blocks, got {}",
                raw.len()
            )));
        }
        let first = raw.first().ok_or_else(|| Error::invalid("no raw blocks"))?;
        let l = first.rows();
        if l < 2 {
            return Err(Error::invalid("confusion parameters need at least 2 classes"));
        }
        if raw.iter().any(|m| m.rows() != l || m.cols() != l) {
            return Err(Error::shape("raw blocks must all be LxL".to_string()));
        }
        if raw.iter().any(|m| !m.all_finite()) {
            return Err(Error::invalid("raw confusion parameters must be finite"));
        }
        Ok(CmParams {
            raw,
            shared,
            num_annotators,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.raw[0].rows()
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn raw(&self) -> &[DenseMatrix] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.raw
    }

    pub fn grad_zeros(&self) -> Vec<DenseMatrix> {
        self.raw
            .iter()
            .map(|b| DenseMatrix::zeros(b.rows(), b.cols()))
            .collect()
    }

    fn realize_block(block: &DenseMatrix) -> DenseMatrix {
        let s = block.map(softplus);
        let sums = s.column_sums();
        DenseMatrix::from_fn(s.rows(), s.cols(), |j, i| s.get(j, i) / sums[i])
    }

    /// One realized matrix per annotator (the shared block is repeated).
    pub fn realize(&self) -> Vec<ConfusionMatrix> {
        let blocks: Vec<ConfusionMatrix> = self
            .raw
            .iter()
            .map(|b| {
                ConfusionMatrix::new(Self::realize_block(b))
                    .expect("soft-plus/normalized matrix is always column-stochastic")
            })
            .collect();
        if self.shared {
            vec![blocks[0].clone(); self.num_annotators]
        } else {
            blocks
        }
    }
}

/// p^(r)(x) = A^(r) p(x): the annotator's predicted label distribution.
pub fn annotator_prediction(cm: &ConfusionMatrix, p: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid(format!(
            "annotator_prediction input sums to {sum}, expected a distribution"
        )));
    }
    cm.matrix().matvec(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// cross_entropy + lambda * trace_term.
    pub total: f64,
    /// Mean over the batch of the per-example sum of annotator CE terms.
    pub cross_entropy: f64,
    /// Sum of the realized matrices' traces (not batch-dependent).
    pub trace_term: f64,
    /// Per-annotator share of `cross_entropy` (sums to it).
    pub per_annotator_ce: Vec<f64>,
}

/// Gradients in the same block layout as the parameters they refer to.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub classifier: Vec<DenseMatrix>,
    pub raw_cms: Vec<DenseMatrix>,
}

/// The full model: classifier plus confusion-matrix estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyModel {
    pub classifier: ClassifierParams,
    pub cms: CmParams,
}

impl NoisyModel {
    pub fn new(classifier: ClassifierParams, cms: CmParams) -> Result<Self> {
        if classifier.config().num_classes != cms.num_classes() {
            return Err(Error::shape(format!(
                "classifier has {} classes but confusion parameters have {}",
                classifier.config().num_classes,
                cms.num_classes()
            )));
        }
        Ok(NoisyModel { classifier, cms })
    }

    pub fn num_classes(&self) -> usize {
        self.cms.num_classes()
    }
}

struct BatchContext<'a> {
    dataset: &'a LabeledDataset,
    table: &'a AnnotationTable,
    indices: &'a [usize],
}

fn check_batch(
    classifier: &ClassifierParams,
    cms: &CmParams,
    ctx: &BatchContext,
    lambda: f64,
) -> Result<()> {
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    if ctx.dataset.len() != ctx.table.num_examples() {
        return Err(Error::shape(format!(
            "dataset has {} examples but table has {}",
            ctx.dataset.len(),
            ctx.table.num_examples()
        )));
    }
    if ctx.table.num_annotators() != cms.num_annotators() {
        return Err(Error::shape(format!(
            "table has {} annotators but model has {}",
            ctx.table.num_annotators(),
            cms.num_annotators()
        )));
    }
    if classifier.config().num_classes != cms.num_classes()
        || ctx.dataset.num_classes() != cms.num_classes()
    {
        return Err(Error::shape("class-count mismatch across model and data".to_string()));
    }
    if ctx.indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = ctx.indices.iter().find(|&&n| n >= ctx.dataset.len()) {
        return Err(Error::invalid(format!("batch index {bad} out of range")));
    }
    let any_label = ctx
        .indices
        .iter()
        .any(|&n| ctx.table.row(n).iter().any(Option::is_some));
    if !any_label {
        return Err(Error::invalid("batch carries no labels at all"));
    }
    Ok(())
}

/// The combined loss over one batch: observed-label cross-entropy through
/// the realized confusion matrices (summed over annotators, averaged over
/// the batch) plus lambda times the sum of their traces.
pub fn loss(
    classifier: &ClassifierParams,
    cms: &CmParams,
    dataset: &LabeledDataset,
    table: &AnnotationTable,
    indices: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    let ctx = BatchContext {
        dataset,
        table,
        indices,
    };
    check_batch(classifier, cms, &ctx, lambda)?;
    let realized = cms.realize();
    let r = cms.num_annotators();
    let batch = indices.len() as f64;
    let mut per_annotator_ce = vec![0.0; r];
    for &n in indices {
        let p = classifier.forward(dataset.features(n))?;
        for (a, cm) in realized.iter().enumerate() {
            if let Some(label) = table.get(n, a) {
                let q = cm.matrix().matvec(&p)?;
                per_annotator_ce[a] -= q[label].max(LOG_CLAMP).ln();
            }
        }
    }
    for v in per_annotator_ce.iter_mut() {
        *v /= batch;
    }
    let cross_entropy: f64 = per_annotator_ce.iter().sum();
    let trace_term: f64 = realized.iter().map(ConfusionMatrix::trace).sum();
    Ok(LossBreakdown {
        total: cross_entropy + lambda * trace_term,
        cross_entropy,
        trace_term,
        per_annotator_ce,
    })
}

/// Loss plus exact gradients for every classifier block and raw confusion
/// block. Missing labels contribute nothing to the cross-entropy path; the
/// trace term always contributes to the raw blocks.
pub fn loss_grads(
    classifier: &ClassifierParams,
    cms: &CmParams,
    dataset: &LabeledDataset,
    table: &AnnotationTable,
    indices: &[usize],
    lambda: f64,
) -> Result<(LossBreakdown, ModelGrads)> {
    let ctx = BatchContext {
        dataset,
        table,
        indices,
    };
    check_batch(classifier, cms, &ctx, lambda)?;
    let l = cms.num_classes();
    let r = cms.num_annotators();
    let batch = indices.len() as f64;
    let inv_batch = 1.0 / batch;

    // Realized matrices and their soft-plus column sums, per raw block.
    let softplus_blocks: Vec<DenseMatrix> = cms.raw().iter().map(|b| b.map(softplus)).collect();
    let col_sums: Vec<Vec<f64>> = softplus_blocks.iter().map(DenseMatrix::column_sums).collect();
    let realized: Vec<DenseMatrix> = softplus_blocks
        .iter()
        .zip(&col_sums)
        .map(|(s, sums)| DenseMatrix::from_fn(l, l, |j, i| s.get(j, i) / sums[i]))
        .collect();
    let block_for = |annotator: usize| if cms.shared() { 0 } else { annotator };

    let mut classifier_grads = classifier.grad_zeros();
    // d(loss)/d(realized A), accumulated per raw block before chaining
    // through the normalization.
    let mut d_realized: Vec<DenseMatrix> = cms
        .raw()
        .iter()
        .map(|b| DenseMatrix::zeros(b.rows(), b.cols()))
        .collect();

    let mut per_annotator_ce = vec![0.0; r];
    for &n in indices {
        let cache = classifier.forward_internal(dataset.features(n))?;
        let p = &cache.probs;
        let mut d_p = vec![0.0; l];
        let mut touched = false;
        for a in 0..r {
            let Some(label) = table.get(n, a) else {
                continue;
            };
            touched = true;
            let block = &realized[block_for(a)];
            let q_label: f64 = block
                .row(label)
                .iter()
                .zip(p)
                .map(|(aji, pj)| aji * pj)
                .sum();
            per_annotator_ce[a] -= q_label.max(LOG_CLAMP).ln();
            if q_label >= LOG_CLAMP {
                // d(-ln q_y)/dq_y = -1/q_y; q_y = sum_k A_{y,k} p_k.
                let coeff = -inv_batch / q_label;
                let d_real = &mut d_realized[block_for(a)];
                let row = block.row(label);
                let d_row = d_real.row_mut(label);
                for k in 0..l {
                    d_p[k] += coeff * row[k];
                    d_row[k] += coeff * p[k];
                }
            }
        }
        if touched {
            // Softmax backward: dz_k = p_k (g_k - sum_j p_j g_j).
            let dot: f64 = p.iter().zip(&d_p).map(|(pj, gj)| pj * gj).sum();
            let d_logits: Vec<f64> = p
                .iter()
                .zip(&d_p)
                .map(|(pk, gk)| pk * (gk - dot))
                .collect();
            classifier.backprop(&cache, &d_logits, &mut classifier_grads)?;
        }
    }
    for v in per_annotator_ce.iter_mut() {
        *v *= inv_batch;
    }
    let cross_entropy: f64 = per_annotator_ce.iter().sum();
    let trace_term: f64 = realized.iter().map(DenseMatrix::trace).sum::<f64>()
        * if cms.shared() { r as f64 } else { 1.0 };

    // Trace gradient: lambda per annotator on each realized diagonal.
    let trace_scale = lambda * if cms.shared() { r as f64 } else { 1.0 };
    if trace_scale != 0.0 {
        for d_real in d_realized.iter_mut() {
            for i in 0..l {
                let v = d_real.get(i, i) + trace_scale;
                d_real.set(i, i, v);
            }
        }
    }

    // Chain through soft-plus + column normalization:
    // dL/dW_{mi} = sigmoid(W_{mi}) / S_i * (dL/dA_{mi} - sum_k dL/dA_{ki} A_{ki}).
    let mut raw_grads: Vec<DenseMatrix> = Vec::with_capacity(cms.raw().len());
    for (b, raw) in cms.raw().iter().enumerate() {
        let block = &realized[b];
        let d_real = &d_realized[b];
        let sums = &col_sums[b];
        let mut col_dot = vec![0.0; l];
        for (i, cd) in col_dot.iter_mut().enumerate() {
            *cd = (0..l).map(|k| d_real.get(k, i) * block.get(k, i)).sum();
        }
        raw_grads.push(DenseMatrix::from_fn(l, l, |m, i| {
            sigmoid(raw.get(m, i)) / sums[i] * (d_real.get(m, i) - col_dot[i])
        }));
    }

    Ok((
        LossBreakdown {
            total: cross_entropy + lambda * trace_term,
            cross_entropy,
            trace_term,
            per_annotator_ce,
        },
        ModelGrads {
            classifier: classifier_grads,
            raw_cms: raw_grads,
        },
    ))
}

/// Cross-entropy against soft targets, with gradients for the classifier
/// only: mean over the batch of -sum_j target_j ln p_j. Used by the EM-style
/// baselines' classifier update, sharing the clamp and reduction conventions
/// of `loss`.
pub fn soft_target_loss_grads(
    classifier: &ClassifierParams,
    dataset: &LabeledDataset,
    targets: &DenseMatrix,
    indices: &[usize],
) -> Result<(f64, Vec<DenseMatrix>)> {
    let l = classifier.config().num_classes;
    if targets.rows() != dataset.len() || targets.cols() != l {
        return Err(Error::shape(format!(
            "targets are {}x{}, expected {}x{l}",
            targets.rows(),
            targets.cols(),
            dataset.len()
        )));
    }
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = indices.iter().find(|&&n| n >= dataset.len()) {
        return Err(Error::invalid(format!("batch index {bad} out of range")));
    }
    let inv_batch = 1.0 / indices.len() as f64;
    let mut grads = classifier.grad_zeros();
    let mut total = 0.0;
    for &n in indices {
        let cache = classifier.forward_internal(dataset.features(n))?;
        let p = &cache.probs;
        let target = targets.row(n);
        total -= target
            .iter()
            .zip(p)
            .map(|(t, pj)| t * pj.max(LOG_CLAMP).ln())
            .sum::<f64>();
        // d(-sum_j t_j ln p_j)/d(logits_k) = p_k * sum_j t_j - t_k.
        let t_sum: f64 = target.iter().sum();
        let d_logits: Vec<f64> = p
            .iter()
            .zip(target)
            .map(|(pk, tk)| inv_batch * (pk * t_sum - tk))
            .collect();
        classifier.backprop(&cache, &d_logits, &mut grads)?;
    }
    Ok((total * inv_batch, grads))
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    seed: u64,
    model: NoisyModel,
}

/// Saves the model and its driving seed as versioned JSON. f64 values are
/// written in shortest round-trip form, so load-after-save is bit-exact.
pub fn save_checkpoint(path: &Path, model: &NoisyModel, seed: u64) -> Result<()> {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        seed,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("checkpoint serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NoisyModel, u64)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint schema {} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})",
            path.display(),
            file.schema_version
        )));
    }
    Ok((file.model, file.seed))
}
