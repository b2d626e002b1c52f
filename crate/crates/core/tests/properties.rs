use proptest::prelude::*;

use tsa::data::{collate, format_tsv, parse_tsv, tokenize, EmbeddedExample, TsvSchema};
use tsa::embeddings::hash_vector;
use tsa::encoder::relative_index;
use tsa::numerics::{Tape, Tensor};

proptest! {
    #[test]
    fn relative_index_translation_and_clipping(i in 0usize..=64, j in 0usize..=64, s in 0usize..=64, k in prop::sample::select(vec![0usize, 1, 10])) {
        let r = relative_index(i, j, k);
        prop_assert!(r <= 2 * k);
        prop_assert_eq!(relative_index(i + s, j + s, k), r);
        let offset = j as i64 - i as i64;
        prop_assert_eq!(r as i64, offset.clamp(-(k as i64), k as i64) + k as i64);
    }

    #[test]
    fn masked_softmax_rows(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = tsa::numerics::Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 30.0).collect();
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.uniform() < 0.6).collect();
        for r in 0..rows {
            mask[r * cols + rng.below(cols)] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax_masked(x, Some(&mask)).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn tsv_round_trip(rows in prop::collection::vec(("[a-z_]{1,8}", "[^\t\r\n]{0,20}[a-zA-Z][^\t\r\n]{0,20}"), 1..10)) {
        let content: String = rows.iter().map(|(l, t)| format!("{l}\t{t}\n")).collect();
        let ex = parse_tsv(&content, TsvSchema::LabelFirst, false, "p").unwrap();
        prop_assert_eq!(format_tsv(&ex, TsvSchema::LabelFirst), content);
    }

    #[test]
    fn tokenize_is_idempotent(text in "\\PC{0,60}") {
        let once = tokenize(&text, false);
        prop_assert_eq!(tokenize(&once.join(" "), false), once);
    }

    #[test]
    fn hash_vectors_are_unit_and_stable(token in "\\PC{1,12}", dim in 1usize..64, seed in any::<u64>()) {
        let v = hash_vector(&token, dim, seed);
        prop_assert_eq!(v.len(), dim);
        prop_assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        prop_assert_eq!(v, hash_vector(&token, dim, seed));
    }

    #[test]
    fn batches_mask_and_zero_padding(lengths in prop::collection::vec(1usize..10, 1..6)) {
        let items: Vec<EmbeddedExample> = lengths
            .iter()
            .enumerate()
            .map(|(i, &t)| EmbeddedExample {
                input: Tensor::full(&[t, 3], 1.0 + i as f64),
                label: None,
                index: i,
            })
            .collect();
        let batch = collate(&items.iter().collect::<Vec<_>>()).unwrap();
        let t_max = batch.max_len();
        prop_assert_eq!(batch.mask.lengths(), lengths.clone());
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..t_max {
                let row = &batch.inputs.data()[(b * t_max + t) * 3..(b * t_max + t + 1) * 3];
                if t < len {
                    prop_assert!(row.iter().all(|&v| v == 1.0 + b as f64));
                } else {
                    prop_assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
