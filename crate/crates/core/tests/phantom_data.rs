use jdl_core::phantom::{analytic_labels, build_dataset, generate_phantom, PhantomSpec, NUM_CLASSES, SIDE};
use proptest::prelude::*;

#[test]
fn analytic_rule_recovers_every_label() {
    let ds = build_dataset(4000, 500, [0.3; 3], 0.05, 17).unwrap();
    let mut wrong = 0;
    for s in ds.train.iter().chain(&ds.test) {
        if analytic_labels(&s.image, s.anatomy.as_ref().unwrap()) != s.labels {
            wrong += 1;
        }
    }
    assert_eq!(wrong, 0);

    for k in 0..NUM_CLASSES {
        let prev = ds.train.iter().filter(|s| s.labels[k]).count() as f64 / 4000.0;
        assert!((prev - 0.3).abs() <= 0.02, "class {k}: {prev}");
    }
    assert_eq!(ds.train.iter().filter(|s| s.labeled).count(), 200);
    assert!(ds.test.iter().all(|s| !s.labeled));
    let train_ids: std::collections::HashSet<_> = ds.train.iter().map(|s| s.image.clone().into_iter().map(f64::to_bits).collect::<Vec<_>>()).collect();
    assert!(ds.test.iter().all(|s| !train_ids.contains(&s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
}

#[test]
fn full_fraction_labels_everything() {
    let ds = build_dataset(50, 5, [0.3; 3], 1.0, 2).unwrap();
    assert!(ds.train.iter().all(|s| s.labeled));
}

#[test]
fn dataset_is_a_pure_function_of_its_arguments() {
    let a = build_dataset(40, 10, [0.3, 0.5, 0.2], 0.1, 8).unwrap();
    let b = build_dataset(40, 10, [0.3, 0.5, 0.2], 0.1, 8).unwrap();
    assert_eq!(a, b);
    let c = build_dataset(40, 10, [0.3, 0.5, 0.2], 0.1, 9).unwrap();
    assert_ne!(a.train[0].image, c.train[0].image);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn boxes_are_tight_and_inside(seed in any::<u64>(), flags in prop::array::uniform3(any::<bool>())) {
        let s = generate_phantom(&PhantomSpec::sample(seed, flags).unwrap()).unwrap();
        prop_assert!(s.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        for k in 0..NUM_CLASSES {
            prop_assert_eq!(s.bboxes.iter().filter(|b| b.class == k).count(), flags[k] as usize);
        }
        for (c, px) in &s.lesion_pixels {
            let b = s.bbox(*c).unwrap();
            prop_assert!(b.x0 > 0 && b.y0 > 0 && b.x1 < SIDE - 1 && b.y1 < SIDE - 1);
            prop_assert!(px.iter().all(|p| b.contains(p % SIDE, p / SIDE)));
            for shrink in 0..4 {
                let mut t = *b;
                match shrink {
                    0 => t.x0 += 1,
                    1 => t.y0 += 1,
                    2 => t.x1 -= 1,
                    _ => t.y1 -= 1,
                }
                prop_assert!(px.iter().any(|p| !t.contains(p % SIDE, p / SIDE)));
            }
        }
        prop_assert_eq!(analytic_labels(&s.image, s.anatomy.as_ref().unwrap()), flags);
    }
}
