use hyperformer_core::budget::{formula_adapters, formula_hyperformer_pp};
use hyperformer_core::config::RunConfig;
use hyperformer_core::harness::{exact_match, sampling_probabilities, Cycle};
use hyperformer_core::tensor::{AttentionSpec, Tape, Tensor};
use proptest::prelude::*;

fn rows(max_rows: usize, width: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_rows).prop_flat_map(move |r| (Just(r), prop::collection::vec(-10.0f64..10.0, r * width)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance((r, data) in rows(5, 6)) {
        let spread = data.chunks(6).all(|c| {
            let m = c.iter().sum::<f64>() / 6.0;
            c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0 > 1e-2
        });
        prop_assume!(spread);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![r, 6], data).unwrap());
        let y = tape.normalize(x).unwrap();
        for row in tape.value(y).data().chunks(6) {
            let m = row.iter().sum::<f64>() / 6.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(
        data in prop::collection::vec(-3.0f64..3.0, 3 * 2 * 4 * 4),
        valid in prop::collection::vec(any::<bool>(), 2 * 4),
        causal in any::<bool>(),
    ) {
        // batch 2, length 4, hidden 4, 2 heads.
        let mut valid = valid;
        valid[0] = true;
        valid[4] = true;
        let n = 2 * 4 * 4;
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![8, 4], data[..n].to_vec()).unwrap());
        let k = tape.constant(Tensor::new(vec![8, 4], data[n..2 * n].to_vec()).unwrap());
        let v = tape.constant(Tensor::new(vec![8, 4], data[2 * n..3 * n].to_vec()).unwrap());
        let spec = AttentionSpec { batch: 2, query_len: 4, key_len: 4, heads: 2, key_valid: Some(valid.clone()), causal };
        let out = tape.attention(q, k, v, spec).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        for (i, row) in probs.chunks(4).enumerate() {
            let (b, qi) = (i / 8, i % 4);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, p) in row.iter().enumerate() {
                let visible = valid[b * 4 + j] && (!causal || j <= qi);
                if !visible {
                    prop_assert_eq!(*p, 0.0);
                }
            }
        }
    }

    #[test]
    fn sampling_distribution_is_valid_and_flattens(
        sizes in prop::collection::vec(1usize..5000, 1..6),
        t in 1.0f64..20.0,
    ) {
        let p = sampling_probabilities(&sizes, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = sampling_probabilities(&sizes, 2.0 * t).unwrap();
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        prop_assert!(max(&q) <= max(&p) + 1e-12);
        // Larger tasks are never less likely.
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] > sizes[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn exact_match_is_a_fraction(
        preds in prop::collection::vec(prop::collection::vec(0usize..5, 0..4), 1..8),
        targets in prop::collection::vec(prop::collection::vec(3usize..5, 1..3), 1..8),
    ) {
        let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let em = exact_match(&preds, &t);
        prop_assert!((0.0..=1.0).contains(&em));
    }

    #[test]
    fn cycle_visits_every_index_once_per_pass(n in 1usize..50, seed in any::<u64>()) {
        let mut c = Cycle::new(n, seed, 7);
        for _ in 0..3 {
            let mut idx = c.next_indices(n);
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn adapter_formula_scales_linearly(tasks in 1u64..20, layers in 1u64..12, h in 1u64..64, d in 1u64..16) {
        prop_assert_eq!(formula_adapters(2 * tasks, layers, h, d), 2 * formula_adapters(tasks, layers, h, d));
        prop_assert_eq!(formula_adapters(tasks, layers + 1, h, d) - formula_adapters(tasks, layers, h, d),
            formula_adapters(tasks, 1, h, d));
        // The shared variant grows by t per task.
        let t = 4;
        prop_assert_eq!(formula_hyperformer_pp(tasks + 1, layers, h, d, t, 8) - formula_hyperformer_pp(tasks, layers, h, d, t, 8), t);
    }

    #[test]
    fn config_text_round_trips(
        layers in 1usize..4,
        heads in 1usize..4,
        lr in 1e-5f64..1e-2,
        steps in 1usize..10_000,
        seed in any::<u64>(),
    ) {
        let mut r = RunConfig::default();
        r.model.layers = layers;
        r.model.heads = heads;
        r.model.hidden = 8 * heads;
        r.train.learning_rate = lr;
        r.train.steps = steps;
        r.train.checkpoint_every = steps.min(250);
        r.seed = seed;
        let back = RunConfig::parse(&r.to_text()).unwrap();
        prop_assert_eq!(back.to_pairs(), r.to_pairs());
        prop_assert_eq!(back.train.learning_rate.to_bits(), lr.to_bits());
    }
}
