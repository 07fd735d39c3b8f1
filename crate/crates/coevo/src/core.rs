//! Domain types shared by every stage: questions, sampled solutions and
//! verification strategies, the binary evaluation matrix, and the split of
//! solutions into trusted and untrusted sets.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("rollout batch is empty")]
    EmptyBatch,
    #[error("duplicate verdict for solution {i}, strategy {j}")]
    DuplicateVerdict { i: usize, j: usize },
    #[error("incomplete matrix: no verdict for solution {i}, strategy {j}")]
    IncompleteMatrix { i: usize, j: usize },
    #[error("verdict index ({i}, {j}) outside {n}x{m} matrix")]
    IndexOutOfRange { i: usize, j: usize, n: usize, m: usize },
    #[error("verdict for solution {i}, strategy {j} is {value}, expected 0 or 1")]
    InvalidBit { i: usize, j: usize, value: u8 },
    #[error("solution row {i} outside matrix with {n} rows")]
    RowOutOfRange { i: usize, n: usize },
    #[error("difficulty {value} outside [0, 1]")]
    InvalidDifficulty { value: f64 },
    #[error("question {id} is labeled but has no reference answer")]
    MissingReference { id: String },
}

/// A single task instance presented to the solver and verifier pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    id: String,
    payload: QuestionPayload,
    labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuestionPayload {
    Text {
        text: String,
        reference: Option<String>,
    },
    /// Latent parameters consumed only by the synthetic environment.
    Synthetic {
        difficulty: f64,
        answer: String,
        topic: usize,
    },
}

impl Question {
    pub fn synthetic(
        id: impl Into<String>,
        difficulty: f64,
        answer: impl Into<String>,
        topic: usize,
        labeled: bool,
    ) -> Result<Self, CoreError> {
        if !(0.0..=1.0).contains(&difficulty) {
            return Err(CoreError::InvalidDifficulty { value: difficulty });
        }
        Ok(Self {
            id: id.into(),
            payload: QuestionPayload::Synthetic {
                difficulty,
                answer: answer.into(),
                topic,
            },
            labeled,
        })
    }

    pub fn text(
        id: impl Into<String>,
        text: impl Into<String>,
        reference: Option<String>,
        labeled: bool,
    ) -> Result<Self, CoreError> {
        let id = id.into();
        if labeled && reference.is_none() {
            return Err(CoreError::MissingReference { id });
        }
        Ok(Self {
            id,
            payload: QuestionPayload::Text {
                text: text.into(),
                reference,
            },
            labeled,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn payload(&self) -> &QuestionPayload {
        &self.payload
    }

    pub fn labeled(&self) -> bool {
        self.labeled
    }

    /// Hidden reference answer, if one exists for this question.
    pub fn reference_answer(&self) -> Option<&str> {
        match &self.payload {
            QuestionPayload::Text { reference, .. } => reference.as_deref(),
            QuestionPayload::Synthetic { answer, .. } => Some(answer),
        }
    }

    pub fn difficulty(&self) -> Option<f64> {
        match &self.payload {
            QuestionPayload::Synthetic { difficulty, .. } => Some(*difficulty),
            QuestionPayload::Text { .. } => None,
        }
    }

    pub fn topic(&self) -> usize {
        match &self.payload {
            QuestionPayload::Synthetic { topic, .. } => *topic,
            QuestionPayload::Text { .. } => 0,
        }
    }
}

/// One sampled answer, the i-th rollout for its question.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub id: String,
    pub question_id: String,
    pub content: String,
    pub index: usize,
}

impl Solution {
    pub fn new(question_id: &str, index: usize, content: impl Into<String>) -> Self {
        Self {
            id: format!("{question_id}#s{index}"),
            question_id: question_id.to_string(),
            content: content.into(),
            index,
        }
    }
}

/// One sampled verification strategy, the j-th rollout for its question.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub id: String,
    pub question_id: String,
    pub content: StrategyContent,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrategyContent {
    /// Latent descriptor used by the synthetic judge and embedder.
    Synthetic { archetype: usize, noise_seed: u64 },
    Text { strategy_type: String, details: String },
}

impl Strategy {
    pub fn synthetic(question_id: &str, index: usize, archetype: usize, noise_seed: u64) -> Self {
        Self {
            id: format!("{question_id}#v{index}"),
            question_id: question_id.to_string(),
            content: StrategyContent::Synthetic {
                archetype,
                noise_seed,
            },
            index,
        }
    }

    pub fn text(question_id: &str, index: usize, strategy_type: &str, details: &str) -> Self {
        Self {
            id: format!("{question_id}#v{index}"),
            question_id: question_id.to_string(),
            content: StrategyContent::Text {
                strategy_type: strategy_type.to_string(),
                details: details.to_string(),
            },
            index,
        }
    }
}

/// Dense binary matrix of judge verdicts, solutions in rows and strategies
/// in columns. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix {
    n: usize,
    m: usize,
    cells: Vec<u8>,
}

impl EvalMatrix {
    /// Assembles the matrix from one verdict per (solution, strategy) pair.
    ///
    /// Every pair must appear exactly once; order is arbitrary.
    pub fn build(n: usize, m: usize, verdicts: &[(usize, usize, u8)]) -> Result<Self, CoreError> {
        if n == 0 || m == 0 {
            return Err(CoreError::EmptyBatch);
        }
        let mut cells = vec![2u8; n * m];
        for &(i, j, bit) in verdicts {
            if i >= n || j >= m {
                return Err(CoreError::IndexOutOfRange { i, j, n, m });
            }
            if bit > 1 {
                return Err(CoreError::InvalidBit { i, j, value: bit });
            }
            let cell = &mut cells[i * m + j];
            if *cell != 2 {
                return Err(CoreError::DuplicateVerdict { i, j });
            }
            *cell = bit;
        }
        if let Some(pos) = cells.iter().position(|&c| c == 2) {
            return Err(CoreError::IncompleteMatrix {
                i: pos / m,
                j: pos % m,
            });
        }
        Ok(Self { n, m, cells })
    }

    /// Builds from complete rows; rows must be equal length and nonempty.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, CoreError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        let m = rows[0].len();
        let mut verdicts = Vec::with_capacity(rows.len() * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(CoreError::IncompleteMatrix {
                    i,
                    j: row.len().min(m),
                });
            }
            for (j, &bit) in row.iter().enumerate() {
                verdicts.push((i, j, bit));
            }
        }
        Self::build(rows.len(), m, &verdicts)
    }

    pub fn n_solutions(&self) -> usize {
        self.n
    }

    pub fn n_strategies(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        assert!(i < self.n && j < self.m, "cell ({i}, {j}) out of range");
        self.cells[i * self.m + j]
    }

    /// Fraction of strategies that accept solution `i`.
    pub fn pass_rate(&self, i: usize) -> Result<f64, CoreError> {
        if i >= self.n {
            return Err(CoreError::RowOutOfRange { i, n: self.n });
        }
        let row = &self.cells[i * self.m..(i + 1) * self.m];
        let passes: u32 = row.iter().map(|&b| u32::from(b)).sum();
        Ok(f64::from(passes) / self.m as f64)
    }

    pub fn pass_rates(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.pass_rate(i).unwrap()).collect()
    }

    /// Index of the solution with the highest pass rate; ties go to the
    /// lowest index.
    pub fn select_best_of_n(&self) -> Result<usize, CoreError> {
        if self.n == 0 {
            return Err(CoreError::EmptyBatch);
        }
        let mut best = 0usize;
        let mut best_rate = self.pass_rate(0)?;
        for i in 1..self.n {
            let rate = self.pass_rate(i)?;
            if rate > best_rate {
                best = i;
                best_rate = rate;
            }
        }
        Ok(best)
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        assert!(j < self.m, "column {j} out of range");
        (0..self.n).map(|i| self.cells[i * self.m + j]).collect()
    }

    /// Row-major list of (i, j, verdict) triples; inverse of [`EvalMatrix::build`].
    pub fn flatten(&self) -> Vec<(usize, usize, u8)> {
        let mut out = Vec::with_capacity(self.n * self.m);
        for i in 0..self.n {
            for j in 0..self.m {
                out.push((i, j, self.cells[i * self.m + j]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionSource {
    GroundTruth,
    Consensus,
}

/// Split of solution indices into a trusted positive set and its untrusted
/// complement. The two sets are disjoint and cover all indices by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectPartition {
    mask: Vec<bool>,
    source: PartitionSource,
}

impl CorrectPartition {
    pub fn new(mask: Vec<bool>, source: PartitionSource) -> Self {
        Self { mask, source }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn source(&self) -> PartitionSource {
        self.source
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn positive(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
    }

    pub fn negative(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| (!p).then_some(i))
    }

    pub fn n_positive(&self) -> usize {
        self.mask.iter().filter(|&&p| p).count()
    }

    pub fn n_negative(&self) -> usize {
        self.mask.len() - self.n_positive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_identity_matrix() {
        let m = EvalMatrix::build(2, 2, &[(0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)]).unwrap();
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(0, 1), 0);
        assert_eq!(m.get(1, 0), 0);
        assert_eq!(m.get(1, 1), 1);
        assert_eq!(m.pass_rate(0).unwrap(), 0.5);
    }

    #[test]
    fn rejects_duplicate_verdict() {
        let err = EvalMatrix::build(2, 2, &[(0, 0, 1), (0, 0, 0), (0, 1, 0), (1, 0, 0)]);
        assert_eq!(err.unwrap_err(), CoreError::DuplicateVerdict { i: 0, j: 0 });
    }

    #[test]
    fn reports_first_missing_pair() {
        let err = EvalMatrix::build(2, 2, &[(0, 0, 1), (0, 1, 0), (1, 1, 1)]);
        assert_eq!(err.unwrap_err(), CoreError::IncompleteMatrix { i: 1, j: 0 });
    }

    #[test]
    fn rejects_out_of_range_index() {
        let err = EvalMatrix::build(2, 2, &[(2, 0, 1)]);
        assert_eq!(
            err.unwrap_err(),
            CoreError::IndexOutOfRange {
                i: 2,
                j: 0,
                n: 2,
                m: 2
            }
        );
    }

    #[test]
    fn rejects_non_binary_verdict() {
        let err = EvalMatrix::build(1, 1, &[(0, 0, 3)]);
        assert_eq!(err.unwrap_err(), CoreError::InvalidBit { i: 0, j: 0, value: 3 });
    }

    #[test]
    fn rejects_empty_batch() {
        assert_eq!(EvalMatrix::build(0, 4, &[]).unwrap_err(), CoreError::EmptyBatch);
        assert_eq!(EvalMatrix::build(4, 0, &[]).unwrap_err(), CoreError::EmptyBatch);
    }

    #[test]
    fn pass_rate_counts_row() {
        let m = EvalMatrix::from_rows(&[vec![1, 1, 0, 1]]).unwrap();
        assert_eq!(m.pass_rate(0).unwrap(), 0.75);
    }

    #[test]
    fn best_of_n_breaks_ties_low() {
        let m = EvalMatrix::from_rows(&[
            vec![1, 0, 0, 0, 0],
            vec![1, 1, 1, 1, 0],
            vec![0, 1, 1, 1, 1],
        ])
        .unwrap();
        // rows 1 and 2 tie at 0.8
        assert_eq!(m.select_best_of_n().unwrap(), 1);
    }

    #[test]
    fn flatten_round_trips() {
        let m = EvalMatrix::from_rows(&[vec![1, 0], vec![0, 1], vec![1, 1]]).unwrap();
        let rebuilt = EvalMatrix::build(3, 2, &m.flatten()).unwrap();
        assert_eq!(m, rebuilt);
    }

    #[test]
    fn column_extracts_strategy_verdicts() {
        let m = EvalMatrix::from_rows(&[vec![1, 0], vec![0, 1], vec![1, 1]]).unwrap();
        assert_eq!(m.column(0), vec![1, 0, 1]);
        assert_eq!(m.column(1), vec![0, 1, 1]);
    }

    #[test]
    fn partition_sets_are_disjoint_and_cover() {
        let p = CorrectPartition::new(vec![true, false, true, false], PartitionSource::GroundTruth);
        assert_eq!(p.positive().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(p.negative().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(p.n_positive() + p.n_negative(), p.len());
    }

    #[test]
    fn question_validates_difficulty() {
        assert!(Question::synthetic("q1", 1.5, "a", 0, true).is_err());
        let q = Question::synthetic("q1", 0.3, "a", 0, true).unwrap();
        assert_eq!(q.reference_answer(), Some("a"));
    }

    #[test]
    fn labeled_text_question_needs_reference() {
        assert_eq!(
            Question::text("q2", "prove it", None, true).unwrap_err(),
            CoreError::MissingReference { id: "q2".into() }
        );
        assert!(Question::text("q2", "prove it", None, false).is_ok());
    }
}
