//! Training losses.
//!
//! Each loss has a graph form used by training (returning a node on the tape)
//! and a value form over plain matrices. All losses are means over samples
//! and use raw dot products as logits.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Weight of the masked-language-modeling term.
pub const LAMBDA_MLM: f64 = 1.0;

/// Candidates per multiple-choice question.
pub const MC_CANDIDATES: usize = 4;

/// Batch rows for the contrastive objective.
#[derive(Debug, Clone)]
pub struct ContrastiveBatchView<'a, T> {
    /// `B × d` rows of `f(vᵢ, qᵢ)`.
    pub fused: &'a Matrix<T>,
    /// `B × d` rows of `g(aᵢ)`.
    pub answers: &'a Matrix<T>,
    pub answer_strings: &'a [String],
}

/// Scalar loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub contrastive: f64,
    pub mlm: f64,
    pub matching: f64,
    pub total: f64,
    pub lambda_mlm: f64,
}

impl LossBundle {
    pub fn new(contrastive: f64, mlm: f64, matching: f64, lambda_mlm: f64) -> Result<Self> {
        let total = contrastive + lambda_mlm * mlm + matching;
        let b = Self {
            contrastive,
            mlm,
            matching,
            total,
            lambda_mlm,
        };
        if [contrastive, mlm, matching, total]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(b)
        } else {
            Err(Error::NonFinite(format!("loss terms {b:?}")))
        }
    }
}

fn check_finite<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} contain non-finite values"
        )))
    }
}

/// Row-major `B × B` column inclusion mask of the contrastive softmax.
///
/// Row `i` always keeps column `i`. With `dedup`, another column `j` is kept
/// only if its trimmed answer differs from answer `i` and `j` is the first
/// column carrying that answer; without it every column is kept.
pub fn contrastive_include(answer_strings: &[String], dedup: bool) -> Vec<bool> {
    let b = answer_strings.len();
    if !dedup {
        return vec![true; b * b];
    }
    let keys: Vec<&str> = answer_strings.iter().map(|s| s.trim()).collect();
    let first: Vec<bool> = (0..b).map(|j| !keys[..j].contains(&keys[j])).collect();
    let mut inc = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            inc[i * b + j] = j == i || (first[j] && keys[j] != keys[i]);
        }
    }
    inc
}

/// Per-sample contrastive losses as a `B × 1` node.
pub fn contrastive_graph<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    answers: Var,
    answer_strings: &[String],
    dedup: bool,
) -> Result<Var> {
    let (b, _) = g.shape(fused);
    if g.shape(answers).0 != b || answer_strings.len() != b {
        return Err(Error::Shape(format!(
            "contrastive batch with {b} fused rows, {} answers, {} strings",
            g.shape(answers).0,
            answer_strings.len()
        )));
    }
    let scores = g.matmul_t(fused, answers)?;
    check_finite(g.value(scores), "contrastive scores")?;
    let targets: Vec<usize> = (0..b).collect();
    g.softmax_cross_entropy(
        scores,
        &targets,
        Some(contrastive_include(answer_strings, dedup)),
    )
}

fn per_sample<T: Scalar>(g: Graph<T>, losses: Var) -> Vec<T> {
    g.value(losses).data().to_vec()
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of_usize(v.len())
}

pub fn contrastive_per_sample<T: Scalar>(
    view: &ContrastiveBatchView<'_, T>,
    dedup: bool,
) -> Result<Vec<T>> {
    if view.fused.rows() == 0 {
        return Err(Error::Empty("contrastive loss of an empty batch".into()));
    }
    let mut g = Graph::new();
    let f = g.leaf(view.fused.clone());
    let a = g.leaf(view.answers.clone());
    let losses = contrastive_graph(&mut g, f, a, view.answer_strings, dedup)?;
    Ok(per_sample(g, losses))
}

/// Mean contrastive loss with in-batch negatives.
pub fn contrastive_loss<T: Scalar>(view: &ContrastiveBatchView<'_, T>, dedup: bool) -> Result<T> {
    Ok(mean(&contrastive_per_sample(view, dedup)?))
}

/// Per-sample cross-entropy over the full answer vocabulary, `B × 1`.
pub fn finetune_graph<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    vocab_table: Var,
    targets: &[usize],
) -> Result<Var> {
    let scores = g.matmul_t(fused, vocab_table)?;
    check_finite(g.value(scores), "answer scores")?;
    let k = g.shape(scores).1;
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Precondition(format!(
            "target {bad} outside a vocabulary of {k}"
        )));
    }
    g.softmax_cross_entropy(scores, targets, None)
}

pub fn finetune_loss<T: Scalar>(
    fused: &Matrix<T>,
    vocab_table: &Matrix<T>,
    targets: &[usize],
) -> Result<T> {
    if fused.rows() == 0 {
        return Err(Error::Empty("finetune loss of an empty batch".into()));
    }
    let mut g = Graph::new();
    let f = g.leaf(fused.clone());
    let v = g.leaf(vocab_table.clone());
    let losses = finetune_graph(&mut g, f, v, targets)?;
    Ok(mean(&per_sample(g, losses)))
}

/// 4-way cross-entropy for one sample, `1 × 1`.
pub fn multiple_choice_graph<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    candidates: Var,
    correct: usize,
) -> Result<Var> {
    if g.shape(candidates).0 != MC_CANDIDATES {
        return Err(Error::Shape(format!(
            "{} candidates, expected {MC_CANDIDATES}",
            g.shape(candidates).0
        )));
    }
    if correct >= MC_CANDIDATES {
        return Err(Error::Precondition(format!(
            "correct index {correct} outside 0..{MC_CANDIDATES}"
        )));
    }
    let scores = g.matmul_t(fused, candidates)?;
    check_finite(g.value(scores), "candidate scores")?;
    g.softmax_cross_entropy(scores, &[correct], None)
}

/// `candidates[i]` is the `4 × d` table of sample `i`.
pub fn multiple_choice_loss<T: Scalar>(
    fused: &Matrix<T>,
    candidates: &[Matrix<T>],
    correct: &[usize],
) -> Result<T> {
    if fused.rows() == 0 || candidates.len() != fused.rows() || correct.len() != fused.rows() {
        return Err(Error::Shape(format!(
            "{} fused rows, {} candidate tables, {} labels",
            fused.rows(),
            candidates.len(),
            correct.len()
        )));
    }
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(correct.len());
    for (i, (c, &k)) in candidates.iter().zip(correct).enumerate() {
        let f = g.leaf(Matrix::row_vector(fused.row(i).to_vec()));
        let c = g.leaf(c.clone());
        let l = multiple_choice_graph(&mut g, f, c, k)?;
        losses.push(g.scalar(l));
    }
    Ok(mean(&losses))
}

/// Mean cross-entropy over labeled positions, given `P × V` logits of those positions.
pub fn mlm_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    check_finite(g.value(logits), "MLM logits")?;
    let losses = g.softmax_cross_entropy(logits, targets, None)?;
    g.mean(losses)
}

/// MLM loss from contextualized question outputs (`l × d` per sample) and a
/// `d × V` head; labels equal to the ignore marker are skipped.
pub fn mlm_loss<T: Scalar>(
    question_outputs: &[Matrix<T>],
    labels: &[Vec<i64>],
    head_weight: &Matrix<T>,
    head_bias: &Matrix<T>,
) -> Result<T> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (q, lab) in question_outputs.iter().zip(labels) {
        for (p, &l) in lab.iter().enumerate() {
            if l != crate::encode::IGNORE_LABEL {
                rows.push(q.row(p).to_vec());
                targets.push(l as usize);
            }
        }
    }
    if rows.is_empty() {
        return Ok(T::zero());
    }
    let mut g = Graph::new();
    let x = g.leaf(Matrix::from_rows(&rows)?);
    let w = g.leaf(head_weight.clone());
    let b = g.leaf(head_bias.clone());
    let logits = g.affine(x, w, b)?;
    let l = mlm_graph(&mut g, logits, &targets)?;
    Ok(g.scalar(l))
}

/// Targets for `[positives; video negatives; text negatives]` stacked logits.
pub fn matching_targets<T: Scalar>(b: usize) -> Vec<T> {
    (0..3 * b)
        .map(|i| if i < b { T::one() } else { T::zero() })
        .collect()
}

/// Mean BCE over a `3B × 1` column stacking positives, video and text negatives.
pub fn matching_graph<T: Scalar>(g: &mut Graph<T>, stacked_logits: Var) -> Result<Var> {
    let (rows, cols) = g.shape(stacked_logits);
    if rows % 3 != 0 || cols != 1 || rows == 0 {
        return Err(Error::Shape(format!("matching logits ({rows}, {cols})")));
    }
    check_finite(g.value(stacked_logits), "matching logits")?;
    let terms = g.bce_with_logits(stacked_logits, &matching_targets(rows / 3))?;
    g.mean(terms)
}

pub fn matching_loss<T: Scalar>(pos: &[T], video_neg: &[T], text_neg: &[T]) -> Result<T> {
    if pos.is_empty() || pos.len() != video_neg.len() || pos.len() != text_neg.len() {
        return Err(Error::Shape(format!(
            "matching logits {} / {} / {}",
            pos.len(),
            video_neg.len(),
            text_neg.len()
        )));
    }
    let stacked: Vec<T> = pos
        .iter()
        .chain(video_neg)
        .chain(text_neg)
        .copied()
        .collect();
    let mut g = Graph::new();
    let n = stacked.len();
    let x = g.leaf(Matrix::from_vec(n, 1, stacked)?);
    let l = matching_graph(&mut g, x)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    /// `-ln(exp(pos) / (exp(pos) + Σ exp(neg)))` computed directly.
    fn nce(pos: f64, negs: &[f64]) -> f64 {
        let denom = pos.exp() + negs.iter().map(|n| n.exp()).sum::<f64>();
        -(pos.exp() / denom).ln()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Set-based oracle: negatives are the distinct strings other than `aᵢ`.
    fn dedup_oracle(fused: &Matrix<f64>, answers: &Matrix<f64>, s: &[String]) -> Vec<f64> {
        (0..s.len())
            .map(|i| {
                let mut seen: Vec<&str> = Vec::new();
                let mut negs = Vec::new();
                for j in 0..s.len() {
                    let k = s[j].trim();
                    if k != s[i].trim() && !seen.contains(&k) {
                        seen.push(k);
                        negs.push(dot(fused.row(i), answers.row(j)));
                    }
                }
                nce(dot(fused.row(i), answers.row(i)), &negs)
            })
            .collect()
    }

    #[test]
    fn single_sample_has_zero_loss() {
        let f = Matrix::row_vector(vec![0.3, -0.2]);
        let a = Matrix::row_vector(vec![1.0, 4.0]);
        let s = strings(&["x"]);
        let v = ContrastiveBatchView {
            fused: &f,
            answers: &a,
            answer_strings: &s,
        };
        assert_eq!(contrastive_loss(&v, true).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&v, false).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_example() {
        // Scores f1·g1 = 2, f1·g2 = 0, f2·g2 = 1, f2·g1 = 0 need two dimensions to realize.
        let f = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = strings(&["x", "y"]);
        let v = ContrastiveBatchView {
            fused: &f,
            answers: &a,
            answer_strings: &s,
        };
        let expected = 0.5
            * (-(2f64.exp() / (2f64.exp() + 1.0)).ln() - (1f64.exp() / (1f64.exp() + 1.0)).ln());
        let got = contrastive_loss(&v, true).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.2201).abs() < 5e-5);
    }

    #[test]
    fn duplicate_strings_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(3, 4, &mut rng);
        let mut a = random(3, 4, &mut rng);
        for c in 0..4 {
            let v = a.get(1, c);
            a.set(2, c, v);
        }
        let s = strings(&["x", "y", "y"]);
        let v = ContrastiveBatchView {
            fused: &f,
            answers: &a,
            answer_strings: &s,
        };
        let got = contrastive_per_sample(&v, true).unwrap();
        let oracle = dedup_oracle(&f, &a, &s);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-12);
        }
        // Sample 1 sees exactly the two-distinct-answer batch.
        let f2 = Matrix::from_rows(&[f.row(0).to_vec(), f.row(1).to_vec()]).unwrap();
        let a2 = Matrix::from_rows(&[a.row(0).to_vec(), a.row(1).to_vec()]).unwrap();
        let s2 = strings(&["x", "y"]);
        let v2 = ContrastiveBatchView {
            fused: &f2,
            answers: &a2,
            answer_strings: &s2,
        };
        assert!((got[0] - contrastive_per_sample(&v2, true).unwrap()[0]).abs() < 1e-12);
        // Without dedup the duplicate counts twice.
        let off = contrastive_per_sample(&v, false).unwrap();
        let s1 = dot(f.row(0), a.row(1));
        assert!((off[0] - nce(dot(f.row(0), a.row(0)), &[s1, s1])).abs() < 1e-12);
    }

    #[test]
    fn trimmed_comparison_is_case_sensitive() {
        let inc = contrastive_include(&strings(&["Dog", " dog ", "dog"]), true);
        assert_eq!(
            inc,
            vec![true, true, false, true, true, false, true, false, true]
        );
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let f = Matrix::from_rows(&[vec![f64::NAN], vec![1.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let s = strings(&["x", "y"]);
        let v = ContrastiveBatchView {
            fused: &f,
            answers: &a,
            answer_strings: &s,
        };
        assert!(matches!(
            contrastive_loss(&v, true),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn finetune_uniform_is_ln3() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let v = random(3, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let l = finetune_loss(&f, &v, &[0, 2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(finetune_loss(&f, &v, &[0, 3]).is_err());
    }

    #[test]
    fn finetune_matches_oracle_and_full_vocab_contrastive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, k, d) = (4, 6, 3);
        let f = random(b, d, &mut rng);
        let v = random(k, d, &mut rng);
        let targets = [1, 4, 4, 0];
        let got = finetune_loss(&f, &v, &targets).unwrap();
        let oracle = (0..b)
            .map(|i| {
                let logits: Vec<f64> = (0..k).map(|c| dot(f.row(i), v.row(c))).collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                -(logits[targets[i]].exp() / z).ln()
            })
            .sum::<f64>()
            / b as f64;
        assert!((got - oracle).abs() < 1e-9);

        // Per sample: a contrastive batch of [aᵢ, V∖{aᵢ}] with fᵢ as the only query row.
        let words: Vec<String> = (0..k).map(|c| format!("w{c}")).collect();
        let mut total = 0.0;
        for i in 0..b {
            let mut order = vec![targets[i]];
            order.extend((0..k).filter(|&c| c != targets[i]));
            let answers =
                Matrix::from_rows(&order.iter().map(|&c| v.row(c).to_vec()).collect::<Vec<_>>())
                    .unwrap();
            let fused = Matrix::from_fn(k, d, |_, c| f.get(i, c));
            let s: Vec<String> = order.iter().map(|&c| words[c].clone()).collect();
            let view = ContrastiveBatchView {
                fused: &fused,
                answers: &answers,
                answer_strings: &s,
            };
            total += contrastive_per_sample(&view, true).unwrap()[0];
        }
        assert!((got - total / b as f64).abs() < 1e-6);
    }

    #[test]
    fn multiple_choice_cases() {
        let f = Matrix::row_vector(vec![0.0, 0.0]);
        let c = random(4, 2, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(
            (multiple_choice_loss(&f, std::slice::from_ref(&c), &[3]).unwrap() - 4f64.ln()).abs()
                < 1e-12
        );
        assert!(multiple_choice_loss(&f, std::slice::from_ref(&c), &[4]).is_err());

        let f = Matrix::row_vector(vec![1.0]);
        let c = Matrix::from_rows(&[vec![0.0], vec![200.0], vec![0.0], vec![0.0]]).unwrap();
        assert!(multiple_choice_loss(&f, &[c], &[1]).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(3, 2, &mut rng);
        let cands: Vec<Matrix<f64>> = (0..3).map(|_| random(4, 2, &mut rng)).collect();
        let correct = [0, 2, 3];
        let oracle = (0..3)
            .map(|i| {
                let s: Vec<f64> = (0..4).map(|k| dot(f.row(i), cands[i].row(k))).collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                (z.ln()) - s[correct[i]]
            })
            .sum::<f64>()
            / 3.0;
        assert!((multiple_choice_loss(&f, &cands, &correct).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn mlm_cases() {
        let q = vec![Matrix::<f64>::zeros(3, 2)];
        let w = Matrix::zeros(2, 30_522);
        let b = Matrix::zeros(1, 30_522);
        assert_eq!(mlm_loss(&q, &[vec![-1, -1, -1]], &w, &b).unwrap(), 0.0);
        let l = mlm_loss(&q, &[vec![-1, 17, -1]], &w, &b).unwrap();
        assert!((l - 30_522f64.ln()).abs() < 1e-9);
        assert!((l - 10.326).abs() < 1e-3);

        // Toy vocabulary of 5 with hand-set logits given by the bias.
        let w = Matrix::<f64>::zeros(2, 5);
        let b = Matrix::row_vector(vec![0.5f64, -1.0, 2.0, 0.0, 1.0]);
        let q = vec![Matrix::<f64>::zeros(2, 2), Matrix::zeros(2, 2)];
        let labels = vec![vec![2, -1], vec![4, 0]];
        let z: f64 = b.data().iter().map(|x| x.exp()).sum();
        let oracle = [2usize, 4, 0]
            .iter()
            .map(|&t| z.ln() - b.get(0, t))
            .sum::<f64>()
            / 3.0;
        assert!((mlm_loss(&q, &labels, &w, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn matching_cases() {
        let l = matching_loss(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(matching_loss(&[60.0], &[-60.0], &[-60.0]).unwrap() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()
        };
        let (p, v, t) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let oracle = (p.iter().map(|&x| -sig(x).ln()).sum::<f64>()
            + v.iter()
                .chain(&t)
                .map(|&x| -(1.0 - sig(x)).ln())
                .sum::<f64>())
            / 15.0;
        assert!((matching_loss(&p, &v, &t).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn loss_bundle_total() {
        let b = LossBundle::new(1.5, 0.25, 0.0, LAMBDA_MLM).unwrap();
        assert_eq!(b.total, 1.75);
        assert_eq!(LossBundle::new(1.5, 0.25, 0.0, 0.0).unwrap().total, 1.5);
        assert!(LossBundle::new(f64::INFINITY, 0.0, 0.0, 1.0).is_err());
    }

    fn batch() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>, Vec<String>)> {
        (1usize..6, 1usize..4, any::<u64>()).prop_flat_map(|(b, d, seed)| {
            proptest::collection::vec(0u8..4, b).prop_map(move |labels| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = random(b, d, &mut rng);
                let table = random(4, d, &mut rng);
                let a = Matrix::from_fn(b, d, |r, c| table.get(labels[r] as usize, c));
                let s = labels.iter().map(|l| format!("ans{l}")).collect();
                (f, a, s)
            })
        })
    }

    proptest! {
        #[test]
        fn matches_set_oracle_and_is_nonnegative((f, a, s) in batch()) {
            let v = ContrastiveBatchView { fused: &f, answers: &a, answer_strings: &s };
            let got = contrastive_per_sample(&v, true).unwrap();
            for (g, o) in got.iter().zip(dedup_oracle(&f, &a, &s)) {
                prop_assert!((g - o).abs() < 1e-9);
                prop_assert!(*g >= 0.0);
            }
        }

        #[test]
        fn distinct_answers_make_dedup_a_noop(b in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(b, 3, &mut rng);
            let a = random(b, 3, &mut rng);
            let s: Vec<String> = (0..b).map(|i| format!("a{i}")).collect();
            let v = ContrastiveBatchView { fused: &f, answers: &a, answer_strings: &s };
            prop_assert_eq!(contrastive_per_sample(&v, true).unwrap(), contrastive_per_sample(&v, false).unwrap());
        }

        #[test]
        fn extra_duplicate_column_changes_nothing((f, a, s) in batch(), pick in any::<prop::sample::Index>()) {
            let b = s.len();
            let j = pick.index(b);
            let v = ContrastiveBatchView { fused: &f, answers: &a, answer_strings: &s };
            let base = contrastive_per_sample(&v, true).unwrap();
            // Append row j as an extra negative-only sample; check the first b losses.
            let mut frows: Vec<Vec<f64>> = (0..b).map(|i| f.row(i).to_vec()).collect();
            frows.push(f.row(j).to_vec());
            let mut arows: Vec<Vec<f64>> = (0..b).map(|i| a.row(i).to_vec()).collect();
            arows.push(a.row(j).to_vec());
            let mut s2 = s.clone();
            s2.push(s[j].clone());
            let (f2, a2) = (Matrix::from_rows(&frows).unwrap(), Matrix::from_rows(&arows).unwrap());
            let v2 = ContrastiveBatchView { fused: &f2, answers: &a2, answer_strings: &s2 };
            let ext = contrastive_per_sample(&v2, true).unwrap();
            for i in 0..b {
                prop_assert!((ext[i] - base[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_invariance((f, a, s) in batch(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let b = s.len();
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let fp = Matrix::from_rows(&perm.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let ap = Matrix::from_rows(&perm.iter().map(|&i| a.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let sp: Vec<String> = perm.iter().map(|&i| s[i].clone()).collect();
            let base = contrastive_per_sample(&ContrastiveBatchView { fused: &f, answers: &a, answer_strings: &s }, true).unwrap();
            let got = contrastive_per_sample(&ContrastiveBatchView { fused: &fp, answers: &ap, answer_strings: &sp }, true).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((got[k] - base[i]).abs() < 1e-12);
            }
        }
    }
}
