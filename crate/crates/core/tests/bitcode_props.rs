use proptest::prelude::*;
use spotlight::bitcodes::{nxor_scores, pack_bits, top_k_indices, unpack_bits, CodeMatrix, ScoreVector};

fn code_rows() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(words, rows)| {
        let d = words * 32;
        (Just(d), prop::collection::vec(any::<bool>(), d * rows))
    })
}

fn signs(bits: &[bool]) -> Vec<i32> {
    bits.iter().map(|&b| if b { 1 } else { -1 }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pack_then_unpack_is_identity((d, bits) in code_rows()) {
        let packed = pack_bits(&bits, d).unwrap();
        prop_assert_eq!(packed.rows(), bits.len() / d);
        prop_assert_eq!(unpack_bits(&packed), bits);
    }

    #[test]
    fn agreement_count_matches_sign_dot((d, bits) in code_rows(), q in prop::collection::vec(any::<bool>(), 256)) {
        let index = pack_bits(&bits, d).unwrap();
        let q = &q[..d];
        let query = pack_bits(q, d).unwrap().row(0);
        let scores = nxor_scores(&query, &index).unwrap();
        let qs = signs(q);
        for (i, row) in bits.chunks_exact(d).enumerate() {
            let dot: i32 = qs.iter().zip(signs(row)).map(|(a, b)| a * b).sum();
            let agree = q.iter().zip(row).filter(|(a, b)| a == b).count() as i32;
            prop_assert_eq!(scores.as_slice()[i] as i32, agree);
            prop_assert_eq!(2 * agree - d as i32, dot);
        }
    }

    #[test]
    fn scores_follow_column_permutations(
        (d, bits) in code_rows(),
        q in prop::collection::vec(any::<bool>(), 256),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let q = &q[..d];
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let permute = |src: &[bool]| -> Vec<bool> {
            src.chunks_exact(d).flat_map(|r| perm.iter().map(move |&j| r[j])).collect()
        };
        let base = nxor_scores(&pack_bits(q, d).unwrap().row(0), &pack_bits(&bits, d).unwrap()).unwrap();
        let moved = nxor_scores(
            &pack_bits(&permute(q), d).unwrap().row(0),
            &pack_bits(&permute(&bits), d).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(base, moved);
    }
}

fn sorted_reference(scores: &[u32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn top_k_matches_full_sort(
        len_bits in prop::sample::select(vec![32usize, 64, 128]),
        n in 1usize..=10_000,
        k_frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Narrow score ranges force many ties at the cut.
        let hi = rng.random_range(1..=len_bits as u32);
        let raw: Vec<u32> = (0..n).map(|_| rng.random_range(0..=hi)).collect();
        let k = ((k_frac * n as f64) as usize).clamp(1, n);
        let scores = ScoreVector::new(raw.clone(), len_bits).unwrap();
        prop_assert_eq!(top_k_indices(&scores, k).unwrap(), sorted_reference(&raw, k));
    }
}

#[test]
fn top_k_rejects_out_of_range_budgets() {
    let scores = ScoreVector::new(vec![1, 2, 3], 32).unwrap();
    assert!(top_k_indices(&scores, 0).is_err());
    assert!(top_k_indices(&scores, 4).is_err());
    assert_eq!(top_k_indices(&scores, 3).unwrap(), vec![2, 1, 0]);
}

#[test]
fn pack_rejects_unaligned_widths() {
    assert!(pack_bits(&[true; 48], 48).is_err());
    assert!(pack_bits(&[true; 64], 0).is_err());
    assert!(CodeMatrix::from_words(2, 32, vec![0; 3]).is_err());
}
