use gdmrg_core::evalkit::{auc, bleu, ce_metrics, complex_subset, extract_findings, lcs_len, rouge_l};
use gdmrg_core::datagen::{render_report, NEG_CLAUSES};
use gdmrg_core::nodes::{ClinicalState, N_CORE, N_NODES};
use numcore::Rng;
use proptest::prelude::*;

mod common;
use common::{auc_brute, bleu_brute, micro_brute, random_labels, random_sentence, rouge_brute, sample_brute, toks};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn classification_metrics_match_brute_force() {
    let mut rng = Rng::new(17);
    for _ in 0..50 {
        let rows = 1 + rng.below(8);
        let truth = random_labels(&mut rng, rows, N_CORE, 0.3);
        let pred = random_labels(&mut rng, rows, N_CORE, 0.3);
        let r = ce_metrics(&pred, &truth).unwrap();
        let (p, rc, f) = micro_brute(&pred, &truth);
        assert!(close(r.micro.precision, p) && close(r.micro.recall, rc) && close(r.micro.f1, f));
        let (p, rc, f) = sample_brute(&pred, &truth);
        assert!(close(r.sample_precision, p) && close(r.sample_recall, rc) && close(r.sample_f1, f));
    }
}

#[test]
fn extra_columns_are_ignored() {
    let mut truth = vec![vec![0u8; N_NODES]];
    let mut pred = truth.clone();
    truth[0][N_CORE] = 1;
    pred[0][N_CORE + 1] = 1;
    let r = ce_metrics(&pred, &truth).unwrap();
    assert_eq!(r.per_class.len(), N_CORE);
    assert_eq!(r.sample_f1, 1.0);
    assert_eq!(r.micro.f1, 0.0);
    assert!(ce_metrics(&pred, &[]).is_err());
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = Rng::new(5);
    assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]), Some(0.75));
    for _ in 0..50 {
        let n = 2 + rng.below(9);
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.below(4) as f64 / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        match (auc(&scores, &labels), auc_brute(&scores, &labels)) {
            (Some(a), Some(b)) => assert!(close(a, b)),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn text_metrics_match_brute_force() {
    let b = bleu(&[toks("a b c")], &[toks("a b d")], 4).unwrap();
    assert!(close(b[0], 2.0 / 3.0));
    assert!(close(rouge_l(&[toks("a b c d")], &[toks("a c d")]), 6.0 / 7.0));
    let mut rng = Rng::new(23);
    for _ in 0..50 {
        let n = 1 + rng.below(3);
        let cands: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 6, 3)).collect();
        let refs: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 6, 3)).collect();
        let got = bleu(&cands, &refs, 4).unwrap();
        let want = bleu_brute(&cands, &refs, 4);
        assert!(got.iter().zip(&want).all(|(a, b)| close(*a, *b)), "{got:?} vs {want:?}");
        assert!(close(rouge_l(&cands, &refs), rouge_brute(&cands, &refs)));
    }
}

#[test]
fn complex_subset_counts_core_positives() {
    let mut a = vec![0u8; N_NODES];
    a[0] = 1;
    a[N_CORE] = 1;
    let mut b = a.clone();
    b[3] = 1;
    assert_eq!(complex_subset(&[a, b]), vec![1]);
}

proptest! {
    #[test]
    fn identical_reports_score_perfectly(words in prop::collection::vec("[a-c]{1,2}", 1..12)) {
        let s: Vec<String> = words;
        let b = bleu(std::slice::from_ref(&s), std::slice::from_ref(&s), 4).unwrap();
        prop_assert!(close(b[0], 1.0));
        if s.len() >= 4 {
            prop_assert!(close(b[3], 1.0));
        }
        prop_assert!(close(rouge_l(std::slice::from_ref(&s), std::slice::from_ref(&s)), 1.0));
        prop_assert_eq!(lcs_len(&s, &s), s.len());
    }

    #[test]
    fn rendered_reports_invert(codes in prop::collection::vec(0u8..4, N_NODES)) {
        let states: Vec<ClinicalState> = codes.iter().map(|&c| ClinicalState::from_code(c).unwrap()).collect();
        let found = extract_findings(&render_report(&states));
        for (d, st) in states.iter().enumerate() {
            let spoken_neg = NEG_CLAUSES.iter().any(|(i, _)| *i == d);
            let want = match st {
                ClinicalState::Pos => Some(ClinicalState::Pos),
                ClinicalState::Neg if spoken_neg => Some(ClinicalState::Neg),
                _ => None,
            };
            prop_assert_eq!(found[d], want);
        }
    }
}
