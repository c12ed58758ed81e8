//! Property-based invariants for the schedule, the combinator, the batch
//! planner, and the IDX codec.

use gradnet_core::data::{load_idx, write_idx, BatchPlan};
use gradnet_core::{Dataset, LinearSchedule, ScheduleMode, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    /// The gate never decreases over epochs, stays in [0,1], and is exactly
    /// 1 from epoch tau onward.
    #[test]
    fn gate_is_monotone_and_saturates(tau in 1.0f64..200.0, epochs in 1u32..300) {
        let s = LinearSchedule::new(tau, ScheduleMode::Epoch).unwrap();
        let mut prev = 0.0;
        for e in 0..epochs {
            let g = s.gate_at(e).value();
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!(g >= prev);
            if f64::from(e) >= tau {
                prop_assert_eq!(g, 1.0);
            }
            prev = g;
        }
    }

    /// Within an epoch, fractional gates are non-decreasing across batches
    /// and bounded by the next epoch's gate.
    #[test]
    fn fractional_gate_is_monotone_within_epoch(
        tau in 1.0f64..50.0,
        epoch in 0u32..60,
        batches in 1usize..40,
    ) {
        let s = LinearSchedule::new(tau, ScheduleMode::Fractional).unwrap();
        let epoch_gate = s.gate_at(epoch).value();
        let next_gate = s.gate_at(epoch + 1).value();
        let mut prev = epoch_gate;
        for b in 0..batches {
            let g = s.gate_for_batch(epoch, b, batches).value();
            prop_assert!(g >= prev - 1e-12);
            prop_assert!(g <= next_gate + 1e-12);
            prev = g;
        }
    }

    /// interp(a, b, g) stays inside the interval spanned by a and b
    /// (elementwise convexity) for any gate.
    #[test]
    fn interp_is_convex(
        a in prop::collection::vec(-50.0f64..50.0, 1..32),
        g in 0.0f64..=1.0,
        offset in -10.0f64..10.0,
    ) {
        let n = a.len();
        let b: Vec<f64> = a.iter().map(|v| v + offset).collect();
        let mut tape = Tape::new();
        let ta = tape.leaf(Tensor::new(vec![n], a.clone()).unwrap());
        let tb = tape.leaf(Tensor::new(vec![n], b.clone()).unwrap());
        let out = tape.interp(ta, tb, g).unwrap();
        for ((&av, &bv), &ov) in a.iter().zip(&b).zip(tape.value(out).data()) {
            let (lo, hi) = if av <= bv { (av, bv) } else { (bv, av) };
            prop_assert!(ov >= lo - 1e-9 && ov <= hi + 1e-9);
        }
    }

    /// Every epoch's batch plan covers each example exactly once (when the
    /// batch size divides n there is no remainder to drop).
    #[test]
    fn batches_partition_the_dataset(
        chunks in 1usize..20,
        batch in 1usize..64,
        seed in any::<u64>(),
        epoch in 0u32..50,
    ) {
        let n = chunks * batch;
        let plan = BatchPlan { batch_size: batch, seed, drop_last: false };
        let ids = gradnet_core::data::batches(n, &plan, epoch);
        let mut seen = vec![false; n];
        for b in &ids {
            prop_assert!(b.len() == batch);
            for &i in b {
                prop_assert!(!seen[i], "example {} repeated", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    /// IDX round-trips byte-quantized pixels and labels exactly.
    #[test]
    fn idx_roundtrip_is_bit_exact(
        n in 1usize..20,
        h in 1usize..12,
        w in 1usize..12,
        seedbytes in prop::collection::vec(0u8..=255, 1..64),
    ) {
        let total = n * h * w;
        let pixels: Vec<f64> = (0..total)
            .map(|i| f64::from(seedbytes[i % seedbytes.len()]) / 255.0)
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let ds = Dataset {
            images: Tensor::new(vec![n, 1, h, w], pixels).unwrap(),
            labels,
            num_classes: 10,
        };
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img-idx3");
        let lp = dir.path().join("lab-idx1");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(back.images.shape(), ds.images.shape());
        prop_assert_eq!(back.images.data(), ds.images.data());
        prop_assert_eq!(back.labels, ds.labels);
    }
}
