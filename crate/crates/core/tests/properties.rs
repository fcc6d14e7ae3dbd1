//! Property tests: accounting identities, quantizer behavior, bandwidth
//! allocation optimality, and partition invariants over random inputs.

use proptest::prelude::*;

use hfcl_core::channel::{aggregate, quantize, LinkSpec};
use hfcl_core::comms::{
    allocate_bandwidth, delay, overhead_cl, overhead_fl, overhead_hfcl, LinkBudget,
};
use hfcl_core::data::{partition, synth_classification, PartitionMode};
use hfcl_core::model::{bits_hash, ModelArch, ParameterVector};
use hfcl_core::schemes::{plan_ledger, sdt_window, ClientSpec, Role, Scheme};

fn roster(k: usize, l: usize, p: u64, d_inactive: &[u64]) -> Vec<ClientSpec> {
    (0..k)
        .map(|id| {
            let role = if id < l { Role::Inactive } else { Role::Active };
            ClientSpec {
                id,
                role,
                data: vec![0],
                link: LinkSpec { snr_db: None, quant_bits: None },
                d_k: match role {
                    Role::Active => p,
                    Role::Inactive => d_inactive[id],
                },
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, .. ProptestConfig::default() })]

    /// The simulated ledger plan equals the closed-form overhead formulas,
    /// as integers, for random (K, L, T, P, d) configurations.
    #[test]
    fn ledger_plan_equals_closed_forms(
        k in 1usize..=12,
        l_frac in 0.0f64..=1.0,
        t in 1u64..=200,
        p in 1u64..=20_000,
        d in 1u64..=1_000_000,
        pool in 1u64..=100_000_000,
    ) {
        let l = ((k as f64) * l_frac).floor() as usize;
        let d_inactive = vec![d; k];
        let clients = roster(k, l, p, &d_inactive);

        let cl = plan_ledger(Scheme::Cl, &[], t as usize, 0, pool).unwrap();
        prop_assert_eq!(cl.total(), overhead_cl(pool));
        prop_assert_eq!(cl.during_training(), 0);

        let fl = plan_ledger(Scheme::Fl, &roster(k, 0, p, &d_inactive), t as usize, 0, 0).unwrap();
        prop_assert_eq!(fl.total(), overhead_fl(t, p, k as u64).unwrap());
        prop_assert_eq!(fl.before_training(), 0);

        let hfcl = plan_ledger(Scheme::Hfcl, &clients, t as usize, 0, 0).unwrap();
        prop_assert_eq!(
            hfcl.total(),
            overhead_hfcl(l as u64, d, t, p, k as u64).unwrap()
        );
        prop_assert_eq!(hfcl.before_training(), l as u64 * d);
        prop_assert_eq!(
            hfcl.during_training(),
            overhead_fl(t, p, (k - l) as u64).unwrap()
        );
    }

    /// Unequal shards follow the generalized sum, and streaming the shards
    /// in blocks moves traffic between phases without changing the total.
    #[test]
    fn ledger_plan_handles_unequal_shards_and_blocks(
        k in 2usize..=10,
        l in 1usize..=5,
        t in 30u64..=120,
        p in 1u64..=5_000,
        shards in prop::collection::vec(1u64..=50_000, 10),
        q in 1u64..=60_000,
    ) {
        let l = l.min(k);
        let clients = roster(k, l, p, &shards[..k.min(shards.len())].to_vec());
        let d_sum: u64 = clients.iter().filter(|c| c.role == Role::Inactive).map(|c| c.d_k).sum();
        let d_max: u64 = clients.iter().filter(|c| c.role == Role::Inactive).map(|c| c.d_k).max().unwrap();
        // Keep the block count feasible for the horizon, as the engine would.
        let q = q.max(d_max.div_ceil(t / 2));

        let hfcl = plan_ledger(Scheme::Hfcl, &clients, t as usize, 0, 0).unwrap();
        prop_assert_eq!(hfcl.total(), d_sum + overhead_fl(t, p, (k - l) as u64).unwrap());

        let icpc = plan_ledger(Scheme::HfclIcpc, &clients, t as usize, q, 0).unwrap();
        prop_assert_eq!(icpc.total(), hfcl.total());
        prop_assert_eq!(icpc.before_training(), hfcl.before_training());

        let sdt = plan_ledger(Scheme::HfclSdt, &clients, t as usize, q, 0).unwrap();
        prop_assert_eq!(sdt.total(), hfcl.total(), "block streaming conserves traffic");
        let first_blocks: u64 = clients
            .iter()
            .filter(|c| c.role == Role::Inactive)
            .map(|c| q.min(c.d_k))
            .sum();
        prop_assert_eq!(sdt.before_training(), first_blocks);
    }

    /// Quantization is idempotent, stays within half a step, and pins the
    /// per-layer extremes.
    #[test]
    fn quantizer_contract(
        values in prop::collection::vec(-1e3f64..1e3, 2..48),
        split_frac in 0.1f64..0.9,
        bits in 1u32..=16,
    ) {
        let n = values.len();
        let split = ((n as f64 * split_frac) as usize).clamp(1, n - 1);
        let spans = vec![(0, split), (split, n - split)];
        let pv = ParameterVector::new(values.clone(), spans).unwrap();
        let q = quantize(&pv, bits).unwrap();

        // Idempotent, bit for bit.
        let qq = quantize(&q, bits).unwrap();
        prop_assert_eq!(bits_hash(q.values()), bits_hash(qq.values()));

        let levels = (1u64 << bits) - 1;
        for (off, len) in [(0, split), (split, n - split)] {
            let chunk = &values[off..off + len];
            let lo = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let qchunk = &q.values()[off..off + len];
            if lo == hi {
                prop_assert_eq!(qchunk, chunk, "constant spans pass through");
                continue;
            }
            let step = (hi - lo) / levels as f64;
            for (orig, quantized) in chunk.iter().zip(qchunk) {
                prop_assert!((orig - quantized).abs() <= step / 2.0 + 1e-9 * (hi - lo));
                prop_assert!(*quantized >= lo - 1e-12 && *quantized <= hi + 1e-12);
            }
            // The extremes are representable exactly.
            let qlo = qchunk.iter().cloned().fold(f64::INFINITY, f64::min);
            let qhi = qchunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(qlo, lo);
            prop_assert_eq!(qhi, hi);
        }
    }

    /// Weighted aggregation stays inside the per-coordinate hull and is
    /// exact on identical inputs.
    #[test]
    fn aggregation_contract(
        a in prop::collection::vec(-1e3f64..1e3, 4),
        b in prop::collection::vec(-1e3f64..1e3, 4),
        wa in 1u64..1000,
        wb in 1u64..1000,
    ) {
        let spans = vec![(0, 4)];
        let pa = ParameterVector::new(a.clone(), spans.clone()).unwrap();
        let pb = ParameterVector::new(b.clone(), spans.clone()).unwrap();
        let agg = aggregate(&[(wa, &pa), (wb, &pb)]).unwrap();
        for i in 0..4 {
            let lo = a[i].min(b[i]);
            let hi = a[i].max(b[i]);
            prop_assert!(agg.values()[i] >= lo - 1e-9 && agg.values()[i] <= hi + 1e-9);
        }
        let same = aggregate(&[(wa, &pa), (wb, &pa)]).unwrap();
        prop_assert_eq!(bits_hash(same.values()), bits_hash(pa.values()));
    }

    /// The min-max allocation equalizes delays, conserves the budget, and
    /// cannot be improved by shifting 1% of anyone's bandwidth.
    #[test]
    fn bandwidth_allocation_is_minmax(
        specs in prop::collection::vec((1u64..=1_000_000, -5.0f64..30.0), 1..=8),
        total in 0.5f64..10_000.0,
    ) {
        let budget = LinkBudget { total_bandwidth: total, clients: specs.clone() };
        let alloc = allocate_bandwidth(&budget).unwrap();
        prop_assert_eq!(alloc.len(), specs.len());

        let delays: Vec<f64> = specs
            .iter()
            .zip(&alloc)
            .map(|(&(d, snr), &b)| delay(d, b, snr).unwrap())
            .collect();
        let max = delays.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = delays.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!((max - min) <= 1e-9 * max, "equalized: spread {} vs {}", max - min, max);

        let sum: f64 = alloc.iter().sum();
        prop_assert!((sum - total).abs() <= 1e-9 * total, "budget conserved: {sum} vs {total}");

        // Moving 1% of client i's bandwidth to client j only raises the
        // bottleneck.
        if specs.len() >= 2 {
            for (i, j) in [(0, specs.len() - 1), (specs.len() - 1, 0)] {
                let mut shifted = alloc.clone();
                let delta = 0.01 * shifted[i];
                shifted[i] -= delta;
                shifted[j] += delta;
                let worst = specs
                    .iter()
                    .zip(&shifted)
                    .map(|(&(d, snr), &b)| delay(d, b, snr).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(worst >= max * (1.0 - 1e-9), "perturbation improved the bottleneck");
            }
        }
    }

    /// IID partitions cover every index exactly once with near-equal parts.
    #[test]
    fn iid_partition_invariants(n in 10usize..=200, k in 1usize..=10, seed in 0u64..1000) {
        prop_assume!(n >= k);
        let data = synth_classification(n, 2, 3, seed).unwrap();
        let part = partition(&data, k, PartitionMode::Iid, seed).unwrap();
        prop_assert_eq!(part.num_clients(), k);
        let mut seen = vec![false; n];
        for shard in &part.clients {
            prop_assert!(!shard.is_empty());
            prop_assert!(shard.windows(2).all(|w| w[0] < w[1]), "sorted, no duplicates");
            for &i in shard {
                prop_assert!(!seen[i], "index {} assigned twice", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s), "every sample assigned");
        let sizes: Vec<usize> = part.clients.iter().map(Vec::len).collect();
        let lo = sizes.iter().min().unwrap();
        let hi = sizes.iter().max().unwrap();
        prop_assert!(hi - lo <= 1, "near-equal shards: {:?}", sizes);
    }

    /// The SDT window never shrinks, starts empty, and saturates.
    #[test]
    fn sdt_window_is_monotone(
        n_blocks in 1usize..=20,
        q_samples in 1usize..=50,
        d in 1usize..=500,
        t in 0usize..=25,
    ) {
        prop_assert_eq!(sdt_window(0, n_blocks, q_samples, d), 0);
        let w = sdt_window(t, n_blocks, q_samples, d);
        let w_next = sdt_window(t + 1, n_blocks, q_samples, d);
        prop_assert!(w_next >= w, "window shrank: {} -> {}", w, w_next);
        prop_assert!(w <= d);
        prop_assert_eq!(sdt_window(n_blocks + 1, n_blocks, q_samples, d), d);
    }
}
