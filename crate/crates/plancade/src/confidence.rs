//! Stage verdicts: given a batch of candidates, accept an answer or escalate.
//!
//! Three modes share one verdict type. Consensus voting groups candidates by
//! canonical answer and measures the largest block against a threshold.
//! Pass-based gating accepts any candidate that clears every visible test.
//! Perplexity gating accepts when the most confident candidate is confident
//! enough. All threshold comparisons on vote ratios are exact rational
//! arithmetic; see [`Comparator`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnswerKey, Candidate, Comparator};
use crate::evaluators::PassReport;

/// The result of grouping a candidate batch by equivalent answers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsensusResult {
    /// The answer of the largest block (ties: earliest first occurrence).
    pub mode_answer: AnswerKey,
    /// Size of the largest block.
    pub mode_count: usize,
    /// Batch size; the ratio denominator.
    pub n: usize,
    /// Sample indices of every candidate in the largest block.
    pub supporting_indices: Vec<usize>,
}

impl ConsensusResult {
    /// The consensus ratio `mode_count / n` as a float, for reporting. The
    /// exact value is the integer pair itself.
    pub fn ratio(&self) -> f64 {
        self.mode_count as f64 / self.n as f64
    }
}

/// A stage's decision about its candidate batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Accept {
        answer: AnswerKey,
        /// Which candidate supplied the accepted answer.
        candidate_index: usize,
        /// The confidence value that produced the acceptance.
        confidence: f64,
    },
    Escalate {
        confidence: f64,
    },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept { .. })
    }

    pub fn confidence(&self) -> f64 {
        match self {
            Verdict::Accept { confidence, .. } | Verdict::Escalate { confidence } => *confidence,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfidenceError {
    #[error("cannot decide over an empty candidate batch")]
    EmptyInput,
    #[error("expected {expected} answers, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("candidate {sample_index} carries no usable logprobs")]
    MissingLogprobs { sample_index: usize },
    #[error("{candidates} candidates but {reports} pass reports")]
    MismatchedReports { candidates: usize, reports: usize },
}

/// Groups `answers` by canonical equivalence and finds the largest block.
///
/// Failed keys are equivalent to nothing, so each one is its own singleton
/// block; they widen the denominator without ever forming a majority. When
/// every answer failed, the result reports the first failed key with ratio
/// `1/n`, which no consensus verdict will accept.
pub fn consensus(answers: &[AnswerKey], n: usize) -> Result<ConsensusResult, ConfidenceError> {
    if n == 0 {
        return Err(ConfidenceError::EmptyInput);
    }
    if answers.len() != n {
        return Err(ConfidenceError::LengthMismatch { expected: n, actual: answers.len() });
    }
    // Blocks in first-occurrence order; ties then resolve to the earliest.
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for (i, answer) in answers.iter().enumerate() {
        let existing = blocks
            .iter_mut()
            .find(|block| answers[block[0]].canonical == answer.canonical);
        match existing {
            Some(block) => block.push(i),
            None => blocks.push(vec![i]),
        }
    }
    let best = blocks
        .iter()
        .max_by_key(|block| block.len())
        .expect("nonempty input yields at least one block");
    // max_by_key returns the last maximum; scan again for the first.
    let best = blocks
        .iter()
        .find(|block| block.len() == best.len())
        .expect("a maximal block exists");
    Ok(ConsensusResult {
        mode_answer: answers[best[0]].clone(),
        mode_count: best.len(),
        n,
        supporting_indices: best.clone(),
    })
}

/// Applies a threshold to a consensus result. A failed-key mode never
/// accepts, whatever the threshold.
pub fn decide_consensus(result: &ConsensusResult, threshold: f64, comparator: Comparator) -> Verdict {
    let confidence = result.ratio();
    if !result.mode_answer.parse_failed && comparator.holds(result.mode_count, result.n, threshold)
    {
        Verdict::Accept {
            answer: result.mode_answer.clone(),
            candidate_index: result.supporting_indices[0],
            confidence,
        }
    } else {
        Verdict::Escalate { confidence }
    }
}

/// Accepts a uniformly chosen candidate among those that passed every
/// visible test; escalates when none did. Confidence is the fraction of
/// fully passing candidates.
pub fn decide_pass_based(
    candidates: &[Candidate],
    reports: &[PassReport],
    rng: &mut impl Rng,
) -> Result<Verdict, ConfidenceError> {
    if candidates.is_empty() {
        return Err(ConfidenceError::EmptyInput);
    }
    if candidates.len() != reports.len() {
        return Err(ConfidenceError::MismatchedReports {
            candidates: candidates.len(),
            reports: reports.len(),
        });
    }
    let passers: Vec<usize> = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| r.all_passed)
        .map(|(i, _)| i)
        .collect();
    let confidence = passers.len() as f64 / candidates.len() as f64;
    if passers.is_empty() {
        return Ok(Verdict::Escalate { confidence });
    }
    let pick = passers[rng.random_range(0..passers.len())];
    Ok(Verdict::Accept {
        answer: candidates[pick].answer.clone(),
        candidate_index: pick,
        confidence,
    })
}

/// Per-token perplexity of one candidate: `exp(-logprob_sum / token_count)`,
/// with logprobs in natural log.
pub fn perplexity(logprob_sum: f64, token_count: u64) -> f64 {
    (-logprob_sum / token_count as f64).exp()
}

/// Accepts the lowest-perplexity candidate when its perplexity is at or
/// under `threshold`; ties resolve to the lowest sample index. Confidence is
/// the minimal perplexity itself (lower is more confident).
pub fn decide_perplexity(
    candidates: &[Candidate],
    threshold: f64,
) -> Result<Verdict, ConfidenceError> {
    if candidates.is_empty() {
        return Err(ConfidenceError::EmptyInput);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, candidate) in candidates.iter().enumerate() {
        let missing = ConfidenceError::MissingLogprobs { sample_index: candidate.sample_index };
        let (sum, count) = match (candidate.logprob_sum, candidate.token_count) {
            (Some(sum), Some(count)) if count > 0 && sum.is_finite() => (sum, count),
            _ => return Err(missing),
        };
        let ppl = perplexity(sum, count);
        // Strict comparison keeps the earliest candidate on exact ties.
        if best.map_or(true, |(_, best_ppl)| ppl < best_ppl) {
            best = Some((i, ppl));
        }
    }
    let (index, min_ppl) = best.expect("nonempty batch has a minimum");
    if min_ppl <= threshold {
        Ok(Verdict::Accept {
            answer: candidates[index].answer.clone(),
            candidate_index: index,
            confidence: min_ppl,
        })
    } else {
        Ok(Verdict::Escalate { confidence: min_ppl })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::domain::TokenUsage;
    use crate::extraction::normalize;

    fn keys(raws: &[&str]) -> Vec<AnswerKey> {
        raws.iter().map(|r| normalize(r)).collect()
    }

    fn candidate(index: usize, answer: &str) -> Candidate {
        Candidate {
            text: answer.to_string(),
            answer: normalize(answer),
            logprob_sum: None,
            token_count: None,
            sample_index: index,
            usage: TokenUsage::default(),
        }
    }

    fn candidate_with_ppl(index: usize, ppl: f64, count: u64) -> Candidate {
        let mut c = candidate(index, "x");
        c.logprob_sum = Some(-(ppl.ln()) * count as f64);
        c.token_count = Some(count);
        c
    }

    fn report(all_passed: bool) -> PassReport {
        PassReport { per_test: vec![], all_passed, timed_out: false }
    }

    #[test]
    fn six_of_eight_sits_exactly_on_the_boundary() {
        let answers = keys(&["42", "42", "7", "42", "42", "7", "42", "42"]);
        let result = consensus(&answers, 8).unwrap();
        assert_eq!(result.mode_count, 6);
        assert_eq!(result.n, 8);
        assert!(decide_consensus(&result, 0.75, Comparator::MeetsOrExceeds).is_accept());
        assert!(!decide_consensus(&result, 0.75, Comparator::StrictlyExceeds).is_accept());
    }

    #[test]
    fn ties_go_to_the_earliest_block() {
        let answers = keys(&["a", "b", "a", "b"]);
        let result = consensus(&answers, 4).unwrap();
        assert_eq!(result.mode_count, 2);
        assert_eq!(result.supporting_indices, vec![0, 2]);
        assert_eq!(result.mode_answer.raw, "a");
    }

    #[test]
    fn equivalent_surface_forms_vote_together() {
        let answers = keys(&["1/2", "0.5", "\\frac{1}{2}", "7"]);
        let result = consensus(&answers, 4).unwrap();
        assert_eq!(result.mode_count, 3);
        assert_eq!(result.supporting_indices, vec![0, 1, 2]);
    }

    #[test]
    fn failed_answers_are_singletons_in_the_denominator() {
        let answers = vec![
            normalize("9"),
            AnswerKey::failed(""),
            AnswerKey::failed(""),
            normalize("9"),
        ];
        let result = consensus(&answers, 4).unwrap();
        assert_eq!(result.mode_count, 2);
        assert_eq!(result.n, 4);
    }

    #[test]
    fn all_failed_batches_always_escalate() {
        let answers: Vec<AnswerKey> = (0..4).map(|_| AnswerKey::failed("")).collect();
        let result = consensus(&answers, 4).unwrap();
        assert_eq!(result.mode_count, 1);
        assert_eq!(result.n, 4);
        let verdict = decide_consensus(&result, 0.0, Comparator::MeetsOrExceeds);
        assert!(!verdict.is_accept(), "a failed mode never accepts");
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert_eq!(consensus(&[], 0).unwrap_err(), ConfidenceError::EmptyInput);
        let answers = keys(&["1"]);
        assert_eq!(
            consensus(&answers, 2).unwrap_err(),
            ConfidenceError::LengthMismatch { expected: 2, actual: 1 }
        );
    }

    #[test]
    fn single_passer_is_accepted_with_its_fraction() {
        let candidates = vec![candidate(0, "a"), candidate(1, "b"), candidate(2, "c")];
        let reports = vec![report(false), report(true), report(false)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let verdict = decide_pass_based(&candidates, &reports, &mut rng).unwrap();
        match verdict {
            Verdict::Accept { candidate_index, confidence, .. } => {
                assert_eq!(candidate_index, 1);
                assert!((confidence - 1.0 / 3.0).abs() < 1e-12);
            }
            Verdict::Escalate { .. } => panic!("expected acceptance"),
        }
    }

    #[test]
    fn passer_choice_is_reproducible_under_a_fixed_seed() {
        let candidates = vec![candidate(0, "a"), candidate(1, "b"), candidate(2, "c")];
        let reports = vec![report(true), report(false), report(true)];
        let pick = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match decide_pass_based(&candidates, &reports, &mut rng).unwrap() {
                Verdict::Accept { candidate_index, .. } => candidate_index,
                _ => panic!("expected acceptance"),
            }
        };
        assert_eq!(pick(11), pick(11));
    }

    #[test]
    fn no_passers_escalates_with_zero_confidence() {
        let candidates = vec![candidate(0, "a"), candidate(1, "b")];
        let reports = vec![report(false), report(false)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let verdict = decide_pass_based(&candidates, &reports, &mut rng).unwrap();
        assert!(!verdict.is_accept());
        assert_eq!(verdict.confidence(), 0.0);
    }

    #[test]
    fn mismatched_report_lengths_error() {
        let candidates = vec![candidate(0, "a")];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            decide_pass_based(&candidates, &[], &mut rng).unwrap_err(),
            ConfidenceError::MismatchedReports { candidates: 1, reports: 0 }
        );
    }

    #[test]
    fn lowest_perplexity_wins_when_under_threshold() {
        let candidates = vec![
            candidate_with_ppl(0, 3.2, 10),
            candidate_with_ppl(1, 2.9, 10),
            candidate_with_ppl(2, 3.6, 10),
        ];
        match decide_perplexity(&candidates, 3.0).unwrap() {
            Verdict::Accept { candidate_index, confidence, .. } => {
                assert_eq!(candidate_index, 1);
                assert!((confidence - 2.9).abs() < 1e-9);
            }
            Verdict::Escalate { .. } => panic!("expected acceptance"),
        }
    }

    #[test]
    fn perplexity_over_threshold_escalates() {
        let candidates = vec![candidate_with_ppl(0, 5.0, 4)];
        assert!(!decide_perplexity(&candidates, 3.0).unwrap().is_accept());
    }

    #[test]
    fn perplexity_ties_resolve_to_the_lowest_index() {
        let candidates = vec![
            candidate_with_ppl(0, 2.0, 8),
            candidate_with_ppl(1, 2.0, 8),
        ];
        match decide_perplexity(&candidates, 10.0).unwrap() {
            Verdict::Accept { candidate_index, .. } => assert_eq!(candidate_index, 0),
            _ => panic!("expected acceptance"),
        }
    }

    #[test]
    fn missing_logprobs_error_rather_than_guess() {
        let candidates = vec![candidate(3, "a")];
        assert_eq!(
            decide_perplexity(&candidates, 3.0).unwrap_err(),
            ConfidenceError::MissingLogprobs { sample_index: 3 }
        );
    }

    #[test]
    fn perplexity_is_scale_invariant_in_token_count() {
        let a = perplexity(-10.0, 5);
        let b = perplexity(-20.0, 10);
        assert!((a - b).abs() < 1e-12);
    }
}
