//! One-to-one pairing between candidate regions and reference regions,
//! scored by IoU. The pairing is exact (every admissible assignment is
//! considered) while the smaller side has at most eight rows; past that it
//! falls back to a greedy sweep.

use crate::error::Result;
use crate::inference::{iou, Mask};

/// Largest small-side size for which the exact search runs.
pub const EXACT_LIMIT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Candidate index paired with each reference; None when the candidates
    /// ran out.
    pub of_reference: Vec<Option<usize>>,
    /// Sum of the scores of the chosen pairs.
    pub total: f64,
}

impl Assignment {
    /// Score of reference r under this assignment, 0 when unpaired.
    pub fn score_of(&self, scores: &ScoreMatrix, r: usize) -> f64 {
        self.of_reference[r].map_or(0.0, |c| scores.at(r, c))
    }
}

/// Row-major references x candidates score matrix. Scores must be
/// nonnegative; pairing more references then never lowers the total.
pub struct ScoreMatrix {
    pub n_refs: usize,
    pub n_cands: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_refs: usize, n_cands: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_refs * n_cands, "score matrix size");
        ScoreMatrix { n_refs, n_cands, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n_cands + c]
    }

    fn transposed(&self) -> ScoreMatrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.n_refs {
            for c in 0..self.n_cands {
                data[c * self.n_refs + r] = self.at(r, c);
            }
        }
        ScoreMatrix { n_refs: self.n_cands, n_cands: self.n_refs, data }
    }
}

/// Best one-to-one assignment of candidates to references.
pub fn assign(scores: &ScoreMatrix) -> Assignment {
    let small = scores.n_refs.min(scores.n_cands);
    if small > EXACT_LIMIT {
        return greedy(scores);
    }
    if scores.n_refs <= scores.n_cands {
        exact(scores)
    } else {
        // The exact search runs over the smaller side; transposing swaps the
        // roles and the result maps back by inverting the pairing.
        let t = scores.transposed();
        let by_candidate = exact(&t);
        let mut of_reference = vec![None; scores.n_refs];
        for (c, r) in by_candidate.of_reference.iter().enumerate() {
            if let Some(r) = r {
                of_reference[*r] = Some(c);
            }
        }
        Assignment { of_reference, total: by_candidate.total }
    }
}

/// Subset dynamic programming over the reference side: after each candidate
/// column the table holds the best total for every set of already-paired
/// references, so every one-to-one assignment is accounted for.
fn exact(scores: &ScoreMatrix) -> Assignment {
    let (nr, nc) = (scores.n_refs, scores.n_cands);
    let full = 1usize << nr;
    let mut dp = vec![f64::NEG_INFINITY; full];
    dp[0] = 0.0;
    // choice[c][mask] = r + 1 when the best route to `mask` after candidate
    // c pairs candidate c with reference r; 0 when c is left unused.
    let mut choice = vec![vec![0u8; full]; nc];
    for c in 0..nc {
        let prev = dp.clone();
        for mask in 0..full {
            if prev[mask] == f64::NEG_INFINITY {
                continue;
            }
            for r in 0..nr {
                let bit = 1usize << r;
                if mask & bit != 0 {
                    continue;
                }
                let cand = prev[mask] + scores.at(r, c);
                if cand > dp[mask | bit] {
                    dp[mask | bit] = cand;
                    choice[c][mask | bit] = (r + 1) as u8;
                }
            }
        }
    }
    // Prefer the highest total, then the fullest pairing: with nonnegative
    // scores a maximal pairing always attains the maximum.
    let mut best_mask = 0usize;
    for mask in 1..full {
        let better = dp[mask] > dp[best_mask]
            || (dp[mask] == dp[best_mask]
                && mask.count_ones() > best_mask.count_ones());
        if better {
            best_mask = mask;
        }
    }
    let mut of_reference = vec![None; nr];
    let mut mask = best_mask;
    for c in (0..nc).rev() {
        if mask == 0 {
            break;
        }
        let pick = choice[c][mask];
        if pick != 0 {
            let r = (pick - 1) as usize;
            of_reference[r] = Some(c);
            mask &= !(1usize << r);
        }
    }
    debug_assert_eq!(mask, 0, "dp backtrack must consume the mask");
    let total = if dp[best_mask] == f64::NEG_INFINITY { 0.0 } else { dp[best_mask] };
    Assignment { of_reference, total }
}

/// Highest-score-first sweep; ties fall to the lower reference index, then
/// the lower candidate index.
fn greedy(scores: &ScoreMatrix) -> Assignment {
    let (nr, nc) = (scores.n_refs, scores.n_cands);
    let mut order: Vec<(usize, usize)> = (0..nr)
        .flat_map(|r| (0..nc).map(move |c| (r, c)))
        .collect();
    order.sort_by(|&(r1, c1), &(r2, c2)| {
        scores
            .at(r2, c2)
            .partial_cmp(&scores.at(r1, c1))
            .expect("scores must not be NaN")
            .then(r1.cmp(&r2))
            .then(c1.cmp(&c2))
    });
    let mut of_reference = vec![None; nr];
    let mut cand_used = vec![false; nc];
    let mut total = 0.0;
    let mut paired = 0usize;
    for (r, c) in order {
        if paired == nr.min(nc) {
            break;
        }
        if of_reference[r].is_some() || cand_used[c] {
            continue;
        }
        of_reference[r] = Some(c);
        cand_used[c] = true;
        total += scores.at(r, c);
        paired += 1;
    }
    Assignment { of_reference, total }
}

/// IoU score matrix for mask lists, then the best pairing of candidates to
/// references.
pub fn match_masks(candidates: &[Mask], references: &[Mask]) -> Result<(Assignment, ScoreMatrix)> {
    let mut data = Vec::with_capacity(references.len() * candidates.len());
    for r in references {
        for c in candidates {
            data.push(iou(c, r)?);
        }
    }
    let scores = ScoreMatrix::new(references.len(), candidates.len(), data);
    Ok((assign(&scores), scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    /// Every injective map from references to candidates, by recursion.
    fn brute_best(scores: &ScoreMatrix) -> f64 {
        fn rec(s: &ScoreMatrix, r: usize, used: &mut Vec<bool>) -> f64 {
            if r == s.n_refs {
                return 0.0;
            }
            // Leaving r unpaired is admissible too.
            let mut best = rec(s, r + 1, used);
            for c in 0..s.n_cands {
                if used[c] {
                    continue;
                }
                used[c] = true;
                let v = s.at(r, c) + rec(s, r + 1, used);
                used[c] = false;
                if v > best {
                    best = v;
                }
            }
            best
        }
        rec(scores, 0, &mut vec![false; scores.n_cands])
    }

    fn check_valid(a: &Assignment, s: &ScoreMatrix) {
        let mut seen = vec![false; s.n_cands];
        let mut total = 0.0;
        for (r, c) in a.of_reference.iter().enumerate() {
            if let Some(c) = c {
                assert!(*c < s.n_cands);
                assert!(!seen[*c], "candidate used twice");
                seen[*c] = true;
                total += s.at(r, *c);
            }
        }
        assert!((total - a.total).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_brute_force_enumeration() {
        let mut rng = seeded_rng(50);
        for _ in 0..200 {
            let nr = rng.gen_range(1..=5);
            let nc = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..nr * nc).map(|_| rng.gen::<f64>()).collect();
            let s = ScoreMatrix::new(nr, nc, data);
            let a = assign(&s);
            check_valid(&a, &s);
            assert!(
                (a.total - brute_best(&s)).abs() < 1e-12,
                "{} vs {}",
                a.total,
                brute_best(&s)
            );
        }
    }

    #[test]
    fn more_references_than_candidates_leaves_the_rest_unpaired() {
        let mut rng = seeded_rng(51);
        for _ in 0..100 {
            let nr = rng.gen_range(3..=6);
            let nc = rng.gen_range(1..nr);
            let data: Vec<f64> = (0..nr * nc).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s = ScoreMatrix::new(nr, nc, data);
            let a = assign(&s);
            check_valid(&a, &s);
            assert!((a.total - brute_best(&s)).abs() < 1e-12);
            let paired = a.of_reference.iter().flatten().count();
            assert_eq!(paired, nc);
        }
    }

    #[test]
    fn greedy_kicks_in_past_the_exact_limit() {
        // 9x9 diagonal-dominant matrix: greedy and exact agree here, and the
        // pairing is the identity.
        let n = EXACT_LIMIT + 1;
        let mut data = vec![0.1; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        let s = ScoreMatrix::new(n, n, data);
        let a = assign(&s);
        for (r, c) in a.of_reference.iter().enumerate() {
            assert_eq!(*c, Some(r));
        }
        assert!((a.total - n as f64).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_the_documented_sweep_not_the_optimum() {
        // Top-left 2x2 block rigged so the sweep takes 0.9 then is left with
        // 0.1, total 1.0, while the optimum pairs the two 0.8 cells for 1.6.
        let n = EXACT_LIMIT + 1;
        let mut data = vec![0.0; n * n];
        data[0] = 0.9;
        data[1] = 0.8;
        data[n] = 0.8;
        data[n + 1] = 0.1;
        for i in 2..n {
            data[i * n + i] = 0.5;
        }
        let s = ScoreMatrix::new(n, n, data);
        let a = assign(&s);
        assert_eq!(a.of_reference[0], Some(0));
        assert_eq!(a.of_reference[1], Some(1));
        let expect = 0.9 + 0.1 + 0.5 * (n - 2) as f64;
        assert!((a.total - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_still_pair_fully() {
        let s = ScoreMatrix::new(3, 5, vec![0.0; 15]);
        let a = assign(&s);
        check_valid(&a, &s);
        assert_eq!(a.of_reference.iter().flatten().count(), 3);
        assert_eq!(a.total, 0.0);
    }

    #[test]
    fn mask_pairing_recovers_the_layout() {
        // Three disjoint bars; candidates are the same bars in a rotated
        // order plus one empty extra.
        let bar = |row: usize| {
            let mut bits = vec![0u8; 4 * 6];
            for x in 0..6 {
                bits[row * 6 + x] = 1;
            }
            Mask::new(4, 6, bits).unwrap()
        };
        let empty = Mask::new(4, 6, vec![0; 24]).unwrap();
        let refs = vec![bar(0), bar(1), bar(2)];
        let cands = vec![bar(2), empty, bar(0), bar(1)];
        let (a, s) = match_masks(&cands, &refs).unwrap();
        assert_eq!(a.of_reference, vec![Some(2), Some(3), Some(0)]);
        assert!((a.total - 3.0).abs() < 1e-12);
        assert_eq!(a.score_of(&s, 0), 1.0);
    }

    #[test]
    fn deterministic_under_repetition() {
        let mut rng = seeded_rng(52);
        let data: Vec<f64> = (0..6 * 4).map(|_| rng.gen::<f64>()).collect();
        let s = ScoreMatrix::new(6, 4, data.clone());
        let a1 = assign(&s);
        let a2 = assign(&ScoreMatrix::new(6, 4, data));
        assert_eq!(a1, a2);
    }
}
