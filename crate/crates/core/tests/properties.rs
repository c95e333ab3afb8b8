use proptest::prelude::*;
use saetune::data::{format_trigger, parse_trigger, split_disjoint, synth_tasks, QaPair, Task, Vocab, TASK_ALPHABET};
use saetune::sae::SparseAutoencoder;
use saetune::tensor::{precision_scope, Array, Precision, Tensor};

fn alphabet_string(max: usize) -> impl Strategy<Value = String> {
    let chars: Vec<char> = TASK_ALPHABET.chars().collect();
    prop::collection::vec(prop::sample::select(chars), 0..max).prop_map(|v| v.into_iter().collect())
}

/// Answers must be non-empty after trimming and free of template markers.
fn answer_string() -> impl Strategy<Value = String> {
    "[0-9a-z]{1,6}"
}

fn random_sae(d: usize, m: usize, k: usize, seed: u64, jitter: &[f64]) -> SparseAutoencoder {
    let mut sae = SparseAutoencoder::new_random(d, m, k, 1, seed).unwrap();
    sae.b_enc = Array::from_f64(&[m], &jitter[..m]).unwrap();
    sae.b_dec = Array::from_f64(&[d], &jitter[m..m + d]).unwrap();
    sae
}

/// Pre-activations in f64 straight from the parameters.
fn pre_activations(sae: &SparseAutoencoder, x: &[f64]) -> Vec<f64> {
    let (d, m) = (sae.d(), sae.m());
    let w = sae.w_enc.to_f64_vec();
    let (be, bd) = (sae.b_enc.to_f64_vec(), sae.b_dec.to_f64_vec());
    (0..m)
        .map(|j| be[j] + (0..d).map(|i| w[j * d + i] * (x[i] - bd[i])).sum::<f64>())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn top_k_matches_full_sort(
        d in 2usize..8, m in 2usize..24, k in 1usize..30, seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 8),
        jitter in prop::collection::vec(-0.5f64..0.5, 32),
    ) {
        let _g = precision_scope(Precision::F64);
        let k = k.min(m);
        let sae = random_sae(d, m, k, seed, &jitter);
        let z = sae.encode(&Array::from_f64(&[d], &x[..d]).unwrap()).unwrap().to_f64_vec();
        let h = pre_activations(&sae, &x[..d]);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
        let kept: std::collections::BTreeSet<usize> = order[..k].iter().copied().collect();
        prop_assert_eq!(z.iter().filter(|v| **v != 0.0).count(), k);
        for j in 0..m {
            if kept.contains(&j) {
                prop_assert!((z[j] - h[j]).abs() < 1e-12);
            } else {
                prop_assert_eq!(z[j], 0.0);
            }
        }
    }

    #[test]
    fn tokenizer_round_trips(s in alphabet_string(40)) {
        let v = Vocab::task_default();
        let ids = v.tokenize(&s).unwrap();
        prop_assert_eq!(ids.len(), s.chars().count());
        prop_assert_eq!(v.detokenize(&ids).unwrap(), s);
    }

    #[test]
    fn template_parses_back(q in alphabet_string(30), a in answer_string()) {
        let pair = QaPair::new(q, a);
        let text = format_trigger(&pair).unwrap();
        prop_assert_eq!(parse_trigger(&text).unwrap(), pair.clone());
        let v = Vocab::task_default();
        prop_assert_eq!(v.detokenize(&v.tokenize(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        rows in 1usize..5, cols in 2usize..7,
        a in prop::collection::vec(-5.0f64..5.0, 35),
        b in prop::collection::vec(-5.0f64..5.0, 35),
    ) {
        let _g = precision_scope(Precision::F64);
        let n = rows * cols;
        let p = Array::from_f64(&[rows, cols], &a[..n]).unwrap();
        let q = Array::from_f64(&[rows, cols], &b[..n]).unwrap();
        let mask = vec![true; rows];
        let kl = Tensor::constant(p.clone()).kl_div(&q, &mask).unwrap().item();
        prop_assert!(kl >= -1e-12, "kl = {}", kl);
        prop_assert_eq!(Tensor::constant(p.clone()).kl_div(&p, &mask).unwrap().item(), 0.0);
    }

    #[test]
    fn encode_is_k_sparse_per_row(
        m in 4usize..20, k in 1usize..6, seed in 0u64..500,
        x in prop::collection::vec(-1.0f64..1.0, 24),
    ) {
        let d = 4;
        let sae = SparseAutoencoder::new_random(d, m, k.min(m), 1, seed).unwrap();
        let z = sae.encode(&Array::from_f64(&[6, d], &x).unwrap()).unwrap();
        for row in z.to_f64_vec().chunks(m) {
            prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= k.min(m));
        }
    }

    #[test]
    fn splits_never_share_questions(n in 20usize..200, frac in 0.05f64..0.5, seed in 0u64..100) {
        let pairs = synth_tasks(Task::ModAdd, n, 17, seed).unwrap();
        let (train, eval) = split_disjoint(&pairs, frac, seed);
        let tq: std::collections::HashSet<&str> = train.iter().map(|p| p.question.as_str()).collect();
        prop_assert!(eval.iter().all(|p| !tq.contains(p.question.as_str())));
    }
}
