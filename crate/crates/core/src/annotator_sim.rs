//! Simulated annotator populations: ground-truth confusion matrices and the
//! noisy annotation tables they produce over a clean dataset.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, RngState};

/// Sentinel used for missing labels in on-disk formats.
pub const MISSING_LABEL: i64 = -1;

/// A column-stochastic confusion matrix: entry (j, i) is the probability that
/// an annotator reports class j when the true class is i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    matrix: DenseMatrix,
}

impl ConfusionMatrix {
    /// Validates shape, entry range and column sums (tolerance 1e-9).
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() || matrix.rows() < 2 {
            return Err(Error::invalid(format!(
                "confusion matrix must be square with at least 2 classes, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        if matrix.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "confusion matrix entries must lie in [0, 1]",
            ));
        }
        for (i, s) in matrix.column_sums().iter().enumerate() {
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "confusion matrix column {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(ConfusionMatrix { matrix })
    }

    pub fn identity(num_classes: usize) -> Result<Self> {
        ConfusionMatrix::new(DenseMatrix::from_fn(num_classes, num_classes, |i, j| {
            if i == j {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    /// p(reported = j | true = i).
    pub fn get(&self, reported: usize, true_class: usize) -> f64 {
        self.matrix.get(reported, true_class)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Column `true_class` as a distribution over reported classes.
    pub fn column(&self, true_class: usize) -> Vec<f64> {
        (0..self.num_classes())
            .map(|j| self.matrix.get(j, true_class))
            .collect()
    }

    /// Strict row-wise diagonal dominance: a_ii > a_ij for every j != i.
    /// Ties count as not dominant.
    pub fn is_diagonally_dominant(&self) -> bool {
        let n = self.num_classes();
        (0..n).all(|i| {
            let d = self.matrix.get(i, i);
            (0..n).all(|j| j == i || d > self.matrix.get(i, j))
        })
    }

    /// Writes the matrix as plain CSV, one row per line.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.num_classes() {
            let line: Vec<String> = self.matrix.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads an LxL CSV. Column sums must match 1 within 1e-6; smaller
    /// discrepancies (from decimal truncation) are renormalized away.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| {
                        Error::Format(format!(
                            "{}:{}: not a number: {cell:?}",
                            path.display(),
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if n < 2 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Format(format!(
                "{}: expected a square matrix with at least 2 rows",
                path.display()
            )));
        }
        let mut m = DenseMatrix::from_rows(&rows)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (i, s) in m.column_sums().iter().enumerate() {
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!(
                    "{}: column {i} sums to {s}, expected 1 within 1e-6",
                    path.display()
                )));
            }
            for j in 0..n {
                let v = m.get(j, i) / s;
                m.set(j, i, v);
            }
        }
        ConfusionMatrix::new(m)
    }
}

/// Elementwise mean of confusion matrices; stays column-stochastic.
pub fn mean_cm(cms: &[ConfusionMatrix]) -> Result<ConfusionMatrix> {
    let first = cms
        .first()
        .ok_or_else(|| Error::invalid("mean_cm of an empty list"))?;
    let n = first.num_classes();
    if cms.iter().any(|c| c.num_classes() != n) {
        return Err(Error::shape(
            "mean_cm: matrices disagree on class count".to_string(),
        ));
    }
    let scale = 1.0 / cms.len() as f64;
    let mut acc = DenseMatrix::zeros(n, n);
    for cm in cms {
        acc.add_scaled(cm.matrix(), scale)?;
    }
    // Clamp float drift so the constructor's column check passes.
    let mut acc = acc.map(|v| v.clamp(0.0, 1.0));
    for (i, s) in acc.column_sums().iter().enumerate() {
        for j in 0..n {
            let v = acc.get(j, i) / s;
            acc.set(j, i, v);
        }
    }
    ConfusionMatrix::new(acc)
}

/// Correct with probability p; otherwise flips to one fixed wrong class,
/// chosen uniformly at random per true class.
pub fn make_pairwise_flipper(
    num_classes: usize,
    p: f64,
    rng: &mut RngState,
) -> Result<ConfusionMatrix> {
    if num_classes < 2 {
        return Err(Error::invalid("pairwise flipper needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("skill p={p} outside [0, 1]")));
    }
    let mut m = DenseMatrix::zeros(num_classes, num_classes);
    for i in 0..num_classes {
        let mut target = rng.index(num_classes - 1);
        if target >= i {
            target += 1;
        }
        m.set(i, i, p);
        let v = m.get(target, i) + (1.0 - p);
        m.set(target, i, v);
    }
    ConfusionMatrix::new(m)
}

/// Correct with probability p; otherwise picks uniformly among all classes
/// (so a spammer can be right by luck).
pub fn make_hammer_spammer(num_classes: usize, p: f64) -> Result<ConfusionMatrix> {
    if num_classes < 2 {
        return Err(Error::invalid("hammer-spammer needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("skill p={p} outside [0, 1]")));
    }
    let off = (1.0 - p) / num_classes as f64;
    let m = DenseMatrix::from_fn(num_classes, num_classes, |j, i| {
        if j == i {
            p + off
        } else {
            off
        }
    });
    ConfusionMatrix::new(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    PairwiseFlipper,
    HammerSpammer,
    /// Matrices supplied by the caller (e.g. loaded from CSV files).
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatorPopulation {
    kind: AnnotatorKind,
    mean_skill: f64,
    skill_noise_std: f64,
    annotators: Vec<ConfusionMatrix>,
}

impl AnnotatorPopulation {
    /// Builds R annotators of the given kind. Each annotator's skill is
    /// mean_skill plus Gaussian noise (std `skill_noise_std`), clamped to
    /// [0, 1].
    pub fn make_population(
        kind: AnnotatorKind,
        num_classes: usize,
        mean_skill: f64,
        num_annotators: usize,
        skill_noise_std: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if num_annotators < 1 {
            return Err(Error::invalid("population needs at least 1 annotator"));
        }
        if kind == AnnotatorKind::Explicit {
            return Err(Error::invalid(
                "explicit populations are built with from_explicit",
            ));
        }
        let mut annotators = Vec::with_capacity(num_annotators);
        for _ in 0..num_annotators {
            let p = (mean_skill + rng.normal(0.0, skill_noise_std)).clamp(0.0, 1.0);
            let cm = match kind {
                AnnotatorKind::PairwiseFlipper => make_pairwise_flipper(num_classes, p, rng)?,
                AnnotatorKind::HammerSpammer => make_hammer_spammer(num_classes, p)?,
                AnnotatorKind::Explicit => unreachable!(),
            };
            annotators.push(cm);
        }
        Ok(AnnotatorPopulation {
            kind,
            mean_skill,
            skill_noise_std,
            annotators,
        })
    }

    /// One annotator per listed skill, no noise. Handy for populations with
    /// deliberately distinct reliabilities.
    pub fn from_skills(kind: AnnotatorKind, num_classes: usize, skills: &[f64], rng: &mut RngState) -> Result<Self> {
        if skills.is_empty() {
            return Err(Error::invalid("population needs at least 1 annotator"));
        }
        let mean_skill = skills.iter().sum::<f64>() / skills.len() as f64;
        let annotators = skills
            .iter()
            .map(|&p| match kind {
                AnnotatorKind::PairwiseFlipper => make_pairwise_flipper(num_classes, p, rng),
                AnnotatorKind::HammerSpammer => make_hammer_spammer(num_classes, p),
                AnnotatorKind::Explicit => {
                    Err(Error::invalid("explicit populations are built with from_explicit"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotatorPopulation {
            kind,
            mean_skill,
            skill_noise_std: 0.0,
            annotators,
        })
    }

    pub fn from_explicit(annotators: Vec<ConfusionMatrix>) -> Result<Self> {
        let first = annotators
            .first()
            .ok_or_else(|| Error::invalid("population needs at least 1 annotator"))?;
        let n = first.num_classes();
        if annotators.iter().any(|c| c.num_classes() != n) {
            return Err(Error::shape(
                "population matrices disagree on class count".to_string(),
            ));
        }
        let mean_skill = annotators.iter().map(|c| c.trace() / n as f64).sum::<f64>()
            / annotators.len() as f64;
        Ok(AnnotatorPopulation {
            kind: AnnotatorKind::Explicit,
            mean_skill,
            skill_noise_std: 0.0,
            annotators,
        })
    }

    pub fn kind(&self) -> AnnotatorKind {
        self.kind
    }

    pub fn mean_skill(&self) -> f64 {
        self.mean_skill
    }

    pub fn num_annotators(&self) -> usize {
        self.annotators.len()
    }

    pub fn num_classes(&self) -> usize {
        self.annotators[0].num_classes()
    }

    pub fn annotators(&self) -> &[ConfusionMatrix] {
        &self.annotators
    }

    pub fn mean_cm(&self) -> ConfusionMatrix {
        mean_cm(&self.annotators).expect("population is nonempty and shape-checked")
    }

    /// Labels every example with k distinct annotators chosen uniformly at
    /// random; the rest are missing. Each annotator ends up with N*k/R labels
    /// in expectation.
    pub fn annotate(
        &self,
        true_labels: &[usize],
        labels_per_example: usize,
        rng: &mut RngState,
    ) -> Result<AnnotationTable> {
        let r = self.num_annotators();
        let k = labels_per_example;
        if k < 1 || k > r {
            return Err(Error::invalid(format!(
                "labels_per_example={k} outside [1, {r}]"
            )));
        }
        let num_classes = self.num_classes();
        if let Some(&bad) = true_labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "true label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut labels = Vec::with_capacity(true_labels.len());
        let mut pool: Vec<usize> = (0..r).collect();
        for &y in true_labels {
            let mut row = vec![None; r];
            // Partial Fisher-Yates: the first k entries of the pool become
            // the chosen annotators.
            for slot in 0..k {
                let pick = slot + rng.index(r - slot);
                pool.swap(slot, pick);
                let a = pool[slot];
                row[a] = Some(sample_label(&self.annotators[a], y, rng)?);
            }
            labels.push(row);
        }
        AnnotationTable::new(labels, num_classes)
    }
}

/// Draws a reported class for the given true class from the CM's column.
pub fn sample_label(cm: &ConfusionMatrix, true_class: usize, rng: &mut RngState) -> Result<usize> {
    if true_class >= cm.num_classes() {
        return Err(Error::invalid(format!(
            "true class {true_class} out of range for {} classes",
            cm.num_classes()
        )));
    }
    Ok(rng.choose_weighted(&cm.column(true_class)))
}

/// N x R table of observed labels; `None` marks annotators who skipped the
/// example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTable {
    num_classes: usize,
    labels: Vec<Vec<Option<usize>>>,
}

impl AnnotationTable {
    pub fn new(labels: Vec<Vec<Option<usize>>>, num_classes: usize) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| Error::invalid("annotation table has no examples"))?;
        let r = first.len();
        if r == 0 {
            return Err(Error::invalid("annotation table has no annotators"));
        }
        for (n, row) in labels.iter().enumerate() {
            if row.len() != r {
                return Err(Error::shape(format!(
                    "example {n} has {} annotator slots, expected {r}",
                    row.len()
                )));
            }
            let mut any = false;
            for l in row.iter().flatten() {
                if *l >= num_classes {
                    return Err(Error::invalid(format!(
                        "example {n} carries label {l}, out of range for {num_classes} classes"
                    )));
                }
                any = true;
            }
            if !any {
                return Err(Error::invalid(format!("example {n} has no labels at all")));
            }
        }
        Ok(AnnotationTable {
            num_classes,
            labels,
        })
    }

    pub fn num_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_annotators(&self) -> usize {
        self.labels[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Label from annotator r on example n, or None if missing.
    pub fn get(&self, example: usize, annotator: usize) -> Option<usize> {
        self.labels[example][annotator]
    }

    pub fn row(&self, example: usize) -> &[Option<usize>] {
        &self.labels[example]
    }

    /// Total non-missing labels per annotator.
    pub fn labels_per_annotator(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_annotators()];
        for row in &self.labels {
            for (r, l) in row.iter().enumerate() {
                if l.is_some() {
                    counts[r] += 1;
                }
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_stochastic(cm: &ConfusionMatrix) {
        for s in cm.matrix().column_sums() {
            assert!((s - 1.0).abs() < 1e-9, "column sum {s}");
        }
        assert!(cm.matrix().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn flipper_with_p_one_is_identity() {
        let mut rng = RngState::new(7);
        let cm = make_pairwise_flipper(3, 1.0, &mut rng).unwrap();
        assert_eq!(cm, ConfusionMatrix::identity(3).unwrap());
    }

    #[test]
    fn flipper_two_classes_has_forced_target() {
        let mut rng = RngState::new(7);
        let cm = make_pairwise_flipper(2, 0.7, &mut rng).unwrap();
        assert!((cm.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((cm.get(1, 0) - 0.3).abs() < 1e-15);
        assert!((cm.get(0, 1) - 0.3).abs() < 1e-15);
        assert!((cm.get(1, 1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn flipper_columns_have_at_most_two_nonzeros() {
        let mut rng = RngState::new(123);
        let cm = make_pairwise_flipper(4, 0.6, &mut rng).unwrap();
        for i in 0..4 {
            let col = cm.column(i);
            let nonzeros: Vec<f64> = col.into_iter().filter(|v| *v > 0.0).collect();
            assert_eq!(nonzeros.len(), 2);
            assert!((cm.get(i, i) - 0.6).abs() < 1e-15);
            assert!((nonzeros.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_stochastic(&cm);
    }

    #[test]
    fn flip_target_never_equals_true_class() {
        let mut rng = RngState::new(99);
        for l in 2..=8 {
            for _ in 0..50 {
                let cm = make_pairwise_flipper(l, 0.0, &mut rng).unwrap();
                for i in 0..l {
                    assert_eq!(cm.get(i, i), 0.0, "flip target collided with class {i}");
                }
            }
        }
    }

    #[test]
    fn hammer_spammer_known_values() {
        let spam = make_hammer_spammer(4, 0.0).unwrap();
        assert!(spam.matrix().data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
        let hammer = make_hammer_spammer(2, 1.0).unwrap();
        assert_eq!(hammer, ConfusionMatrix::identity(2).unwrap());
        let mid = make_hammer_spammer(5, 0.5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.6 } else { 0.1 };
                assert!((mid.get(j, i) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constructors_always_yield_valid_matrices() {
        let mut rng = RngState::new(2024);
        for trial in 0..100 {
            let l = 2 + (trial % 19);
            let p = (trial as f64) / 99.0;
            assert_stochastic(&make_pairwise_flipper(l, p, &mut rng).unwrap());
            assert_stochastic(&make_hammer_spammer(l, p).unwrap());
        }
    }

    #[test]
    fn dominance_matches_skill_thresholds() {
        let mut rng = RngState::new(5);
        assert!(ConfusionMatrix::identity(4).unwrap().is_diagonally_dominant());
        let uniform = make_hammer_spammer(4, 0.0).unwrap();
        assert!(!uniform.is_diagonally_dominant());
        // Hammer-spammer: dominant for any p > 0.
        assert!(make_hammer_spammer(4, 0.01).unwrap().is_diagonally_dominant());
        // Pairwise flipper: dominant iff p > 0.5.
        assert!(make_pairwise_flipper(4, 0.51, &mut rng).unwrap().is_diagonally_dominant());
        assert!(!make_pairwise_flipper(4, 0.5, &mut rng).unwrap().is_diagonally_dominant());
        assert!(!make_pairwise_flipper(4, 0.3, &mut rng).unwrap().is_diagonally_dominant());
    }

    #[test]
    fn dominance_example_with_asymmetric_rows() {
        let m = DenseMatrix::from_rows(&[vec![0.6, 0.5], vec![0.4, 0.5]]).unwrap();
        let cm = ConfusionMatrix::new(m).unwrap();
        assert!(cm.is_diagonally_dominant());
    }

    #[test]
    fn mean_cm_averages_elementwise() {
        let id = ConfusionMatrix::identity(2).unwrap();
        let uniform = make_hammer_spammer(2, 0.0).unwrap();
        let mean = mean_cm(&[id.clone(), uniform]).unwrap();
        assert!((mean.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((mean.get(1, 0) - 0.25).abs() < 1e-12);
        assert!((mean.get(0, 1) - 0.25).abs() < 1e-12);
        assert!((mean.get(1, 1) - 0.75).abs() < 1e-12);
        let single = mean_cm(&[id.clone()]).unwrap();
        assert_eq!(single, id);
        assert!(mean_cm(&[]).is_err());
    }

    #[test]
    fn population_with_zero_noise_repeats_the_skill() {
        let mut rng = RngState::new(11);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            3,
            0.6,
            5,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(pop.num_annotators(), 5);
        let d0 = pop.annotators()[0].get(0, 0);
        for cm in pop.annotators() {
            assert_eq!(cm.get(0, 0), d0);
        }
    }

    #[test]
    fn population_is_reproducible_and_valid() {
        let build = || {
            let mut rng = RngState::new(31);
            AnnotatorPopulation::make_population(
                AnnotatorKind::PairwiseFlipper,
                4,
                0.7,
                5,
                0.1,
                &mut rng,
            )
            .unwrap()
        };
        let a = build();
        let b = build();
        for (x, y) in a.annotators().iter().zip(b.annotators()) {
            assert_eq!(x, y);
        }
        for cm in a.annotators() {
            assert_stochastic(cm);
        }
    }

    #[test]
    fn population_mean_cm_matches_hand_average() {
        let mut rng = RngState::new(77);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            0.3,
            5,
            0.1,
            &mut rng,
        )
        .unwrap();
        let mean = pop.mean_cm();
        for j in 0..3 {
            for i in 0..3 {
                let hand: f64 =
                    pop.annotators().iter().map(|c| c.get(j, i)).sum::<f64>() / 5.0;
                assert!((mean.get(j, i) - hand).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_label_identity_cm_is_exact() {
        let id = ConfusionMatrix::identity(3).unwrap();
        let mut rng = RngState::new(1);
        for y in 0..3 {
            for _ in 0..100 {
                assert_eq!(sample_label(&id, y, &mut rng).unwrap(), y);
            }
        }
    }

    #[test]
    fn sample_label_frequencies_match_the_column() {
        let m = DenseMatrix::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        let cm = ConfusionMatrix::new(m).unwrap();
        let mut rng = RngState::new(8);
        let n = 100_000;
        let mut zeros = 0usize;
        for _ in 0..n {
            if sample_label(&cm, 0, &mut rng).unwrap() == 0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.01, "empirical frequency {freq}");
    }

    #[test]
    fn sample_label_never_draws_zero_probability_classes() {
        let mut rng = RngState::new(3);
        let cm = make_pairwise_flipper(5, 0.6, &mut rng).unwrap();
        let allowed: Vec<usize> = (0..5).filter(|&j| cm.get(j, 0) > 0.0).collect();
        for _ in 0..10_000 {
            let drawn = sample_label(&cm, 0, &mut rng).unwrap();
            assert!(allowed.contains(&drawn));
        }
    }

    #[test]
    fn empirical_cm_converges_to_generating_cm() {
        let mut rng = RngState::new(17);
        let cm = make_pairwise_flipper(4, 0.6, &mut rng).unwrap();
        let draws_per_class = 100_000;
        let mut counts = DenseMatrix::zeros(4, 4);
        for i in 0..4 {
            for _ in 0..draws_per_class {
                let j = sample_label(&cm, i, &mut rng).unwrap();
                counts.set(j, i, counts.get(j, i) + 1.0);
            }
        }
        let empirical = counts.map(|v| v / draws_per_class as f64);
        assert!(empirical.max_abs_diff(cm.matrix()) < 0.01);
    }

    #[test]
    fn annotate_dense_has_no_missing_entries() {
        let mut rng = RngState::new(100);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            3,
            0.8,
            4,
            0.0,
            &mut rng,
        )
        .unwrap();
        let truths = vec![0, 1, 2, 0, 1, 2];
        let table = pop.annotate(&truths, 4, &mut rng).unwrap();
        for n in 0..table.num_examples() {
            for r in 0..table.num_annotators() {
                assert!(table.get(n, r).is_some());
            }
        }
    }

    #[test]
    fn annotate_sparse_balances_annotator_load() {
        let mut rng = RngState::new(41);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            2,
            0.9,
            5,
            0.0,
            &mut rng,
        )
        .unwrap();
        let truths: Vec<usize> = (0..10_000).map(|n| n % 2).collect();
        let table = pop.annotate(&truths, 1, &mut rng).unwrap();
        let counts = table.labels_per_annotator();
        assert_eq!(counts.iter().sum::<usize>(), 10_000);
        for c in counts {
            assert!(
                (c as i64 - 2000).abs() <= 150,
                "annotator load {c} strays too far from 2000"
            );
        }
    }

    #[test]
    fn annotate_identity_population_reproduces_truth() {
        let id = ConfusionMatrix::identity(3).unwrap();
        let pop = AnnotatorPopulation::from_explicit(vec![id.clone(), id]).unwrap();
        let mut rng = RngState::new(4);
        let truths = vec![2, 0, 1, 1, 2];
        let table = pop.annotate(&truths, 1, &mut rng).unwrap();
        for (n, &y) in truths.iter().enumerate() {
            for r in 0..2 {
                if let Some(l) = table.get(n, r) {
                    assert_eq!(l, y);
                }
            }
        }
    }

    #[test]
    fn annotate_rejects_bad_k() {
        let mut rng = RngState::new(4);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            2,
            0.5,
            3,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert!(pop.annotate(&[0, 1], 0, &mut rng).is_err());
        assert!(pop.annotate(&[0, 1], 4, &mut rng).is_err());
    }

    #[test]
    fn dense_empirical_per_annotator_cm_matches_truth() {
        let mut rng = RngState::new(55);
        let pop = AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            3,
            0.7,
            3,
            0.05,
            &mut rng,
        )
        .unwrap();
        let truths: Vec<usize> = (0..30_000).map(|n| n % 3).collect();
        let table = pop.annotate(&truths, 3, &mut rng).unwrap();
        for (r, cm) in pop.annotators().iter().enumerate() {
            let mut counts = DenseMatrix::zeros(3, 3);
            let mut per_class = [0usize; 3];
            for (n, &y) in truths.iter().enumerate() {
                if let Some(j) = table.get(n, r) {
                    counts.set(j, y, counts.get(j, y) + 1.0);
                    per_class[y] += 1;
                }
            }
            let empirical =
                DenseMatrix::from_fn(3, 3, |j, i| counts.get(j, i) / per_class[i] as f64);
            assert!(
                empirical.max_abs_diff(cm.matrix()) < 0.02,
                "annotator {r} drifted"
            );
        }
    }

    #[test]
    fn table_requires_every_example_labeled() {
        let rows = vec![vec![Some(0), None], vec![None, None]];
        assert!(AnnotationTable::new(rows, 2).is_err());
        let rows = vec![vec![Some(0), None], vec![None, Some(1)]];
        assert!(AnnotationTable::new(rows, 2).is_ok());
        let rows = vec![vec![Some(5), Some(0)]];
        assert!(AnnotationTable::new(rows, 2).is_err());
    }

    #[test]
    fn cm_csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngState::new(21);
        let cm = make_pairwise_flipper(4, 0.62, &mut rng).unwrap();
        let path = dir.path().join("cm.csv");
        cm.save_csv(&path).unwrap();
        let loaded = ConfusionMatrix::load_csv(&path).unwrap();
        assert!(loaded.matrix().max_abs_diff(cm.matrix()) < 1e-12);

        // Mild truncation drift is renormalized.
        let drifted = dir.path().join("drift.csv");
        std::fs::write(&drifted, "0.7000001,0.3\n0.3,0.7\n").unwrap();
        let ok = ConfusionMatrix::load_csv(&drifted).unwrap();
        for s in ok.matrix().column_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }

        // A column off by more than 1e-6 is rejected.
        let broken = dir.path().join("broken.csv");
        std::fs::write(&broken, "0.8,0.3\n0.3,0.7\n").unwrap();
        assert!(ConfusionMatrix::load_csv(&broken).is_err());

        let garbled = dir.path().join("garbled.csv");
        std::fs::write(&garbled, "0.7,abc\n0.3,0.7\n").unwrap();
        match ConfusionMatrix::load_csv(&garbled) {
            Err(Error::Format(msg)) => assert!(msg.contains("abc")),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
