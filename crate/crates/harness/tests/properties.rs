use proptest::prelude::*;
use sbattn::{Graph, Tensor};
use sbattn_harness::data::{augment_with, balanced_subset, CLASSES, PAD, PIXELS, SIDE};
use sbattn_harness::{lr_at, Schedule};

fn schedule() -> impl Strategy<Value = Schedule> {
    prop_oneof![Just(Schedule::Linear), Just(Schedule::Cosine)]
}

proptest! {
    #[test]
    fn learning_rate_starts_at_lr0_and_never_grows(s in schedule(), total in 1usize..400, lr0 in 1e-4f64..1.0) {
        prop_assert_eq!(lr_at(s, 0, total, lr0).unwrap(), lr0);
        let mut previous = lr0;
        for epoch in 0..total {
            let lr = lr_at(s, epoch, total, lr0).unwrap();
            prop_assert!(lr > 0.0 && lr <= previous);
            previous = lr;
        }
        prop_assert!(lr_at(s, total, total, lr0).is_err());
    }

    #[test]
    fn subsets_are_sorted_distinct_and_balanced(
        labels in proptest::collection::vec(0usize..CLASSES, 50..400), size in 1usize..60, seed in any::<u64>(),
    ) {
        let mut available = [0usize; CLASSES];
        labels.iter().for_each(|&l| available[l] += 1);
        match balanced_subset(&labels, size, seed) {
            Ok(chosen) => {
                prop_assert_eq!(chosen.len(), size);
                prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
                let mut counts = [0usize; CLASSES];
                chosen.iter().for_each(|&i| counts[labels[i]] += 1);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
            Err(_) => prop_assert!((0..CLASSES).any(|c| available[c] < size / CLASSES + usize::from(c < size % CLASSES))),
        }
    }

    #[test]
    fn augmentation_moves_pixels_without_changing_them(dy in 0..=2 * PAD, dx in 0..=2 * PAD, flip in any::<bool>()) {
        let image: Vec<f64> = (0..PIXELS).map(|i| 1.0 + i as f64).collect();
        let out = augment_with(&image, dy, dx, flip);
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        let rows = SIDE - dy.abs_diff(PAD);
        let cols = SIDE - dx.abs_diff(PAD);
        prop_assert_eq!(kept, 3 * rows * cols);
        for (i, &v) in out.iter().enumerate() {
            if v != 0.0 {
                let src = v as usize - 1;
                prop_assert_eq!(src / (SIDE * SIDE), i / (SIDE * SIDE), "pixels stay in their channel");
            }
        }
    }

    #[test]
    fn cross_entropy_of_shifted_logits_is_unchanged(shift in -50.0f64..50.0, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[4, 10], 2.0, &mut rng);
        let labels = [0, 3, 9, 5];
        let loss = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.input(t);
            let l = g.cross_entropy(v, &labels).unwrap();
            g.value(l).data()[0]
        };
        let base = loss(logits.clone());
        prop_assert!(base > 0.0);
        prop_assert!((loss(logits.map(|v| v + shift)) - base).abs() < 1e-9);
    }
}
