use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use magsr::data::{make_temporal_split, Partition};
use magsr::degrade::{block_average, degrade, DegradeConfig, GaussianKernel};
use magsr::inference::{decompose, SampleSet};
use magsr::loss::{heteroskedastic_nll, heteroskedastic_nll_gradients};
use magsr::model::snapshot::{from_bytes, to_bytes};
use magsr::model::{build_model, random_input, ModelConfig};
use magsr::Grid;

fn grid(h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Grid> {
    prop::collection::vec(lo..hi, h * w).prop_map(move |v| Grid::from_vec(h, w, v).unwrap())
}

fn sample_set() -> impl Strategy<Value = (Vec<Grid>, Vec<Grid>)> {
    (1usize..6, 1usize..6, 1usize..12).prop_flat_map(|(h, w, t)| {
        (
            prop::collection::vec(grid(h, w, -2000.0, 2000.0), t),
            prop::collection::vec(grid(h, w, 1e-3, 1e4), t),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn decomposition_is_nonnegative_and_additive((means, vars) in sample_set()) {
        let t = means.len() as u64;
        let maps = decompose(&SampleSet::new(means, vars, (0..t).collect()).unwrap()).unwrap();
        for i in 0..maps.total.len() {
            let (e, a, tot) = (maps.epistemic.as_slice()[i], maps.aleatoric.as_slice()[i], maps.total.as_slice()[i]);
            prop_assert!(e >= 0.0 && a > 0.0);
            prop_assert_eq!(tot, e + a);
        }
    }

    #[test]
    fn repeated_pass_has_no_spread(g in grid(4, 3, -2000.0, 2000.0), v in grid(4, 3, 0.1, 10.0), t in 1usize..20) {
        let set = SampleSet::new(vec![g.clone(); t], vec![v.clone(); t], (0..t as u64).collect()).unwrap();
        let maps = decompose(&set).unwrap();
        prop_assert_eq!(&maps.predictive_mean, &g);
        prop_assert!(maps.epistemic.as_slice().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn nll_gradient_signs(f in grid(3, 3, -50.0, 50.0), y in grid(3, 3, -50.0, 50.0), v in grid(3, 3, 0.5, 100.0)) {
        let (gm, gv) = heteroskedastic_nll_gradients(&[f.clone()], &[v.clone()], &[y.clone()]).unwrap();
        for i in 0..9 {
            let (fi, yi, vi) = (f.as_slice()[i], y.as_slice()[i], v.as_slice()[i]);
            // Pulling the mean toward the target lowers the loss.
            prop_assert!(gm[0].as_slice()[i] * (fi - yi) >= 0.0);
            // Variance gradient vanishes at the squared residual.
            let r2 = (yi - fi) * (yi - fi);
            prop_assert!(gv[0].as_slice()[i] * (vi - r2) >= 0.0);
        }
    }

    #[test]
    fn nll_invariant_under_shift(f in grid(2, 5, -50.0, 50.0), y in grid(2, 5, -50.0, 50.0), v in grid(2, 5, 0.5, 100.0), c in -1e3..1e3f64) {
        let a = heteroskedastic_nll(&[f.clone()], &[v.clone()], &[y.clone()]).unwrap().total;
        let b = heteroskedastic_nll(&[f.map(|x| x + c)], &[v], &[y.map(|x| x + c)]).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn block_average_of_upsampled_is_identity(g in grid(3, 4, -1500.0, 1500.0), s in 2usize..5) {
        let back = block_average(&g.upsample_nearest(s), s).unwrap();
        for (a, b) in back.as_slice().iter().zip(g.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn degrade_output_shape_and_bounds(g in grid(8, 12, -1500.0, 1500.0), sigma in 0.3..2.5f64) {
        let cfg = DegradeConfig::new(2, GaussianKernel::new(5, sigma).unwrap()).unwrap();
        let lr = degrade(&g, &cfg).unwrap();
        prop_assert_eq!(lr.shape(), (4, 6));
        // A normalized nonnegative kernel followed by averaging is a convex combination.
        let (lo, hi) = g.as_slice().iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(lr.as_slice().iter().all(|&x| x >= lo - 1e-9 && x <= hi + 1e-9));
    }

    #[test]
    fn temporal_split_partitions_each_year(
        years in prop::collection::btree_map(1996i32..2024, prop::collection::btree_set(1u32..=12, 2..=12), 1..6),
        seed in any::<u64>(),
    ) {
        let years: BTreeMap<i32, BTreeSet<u32>> = years;
        let split = make_temporal_split(&years, seed).unwrap();
        prop_assert_eq!(split.entries.len(), years.values().map(|m| m.len()).sum::<usize>());
        for (&year, months) in &years {
            let parts: Vec<Partition> = months
                .iter()
                .map(|&month| split.partition_of(magsr::data::YearMonth { year, month }).unwrap())
                .collect();
            prop_assert_eq!(parts.iter().filter(|p| **p == Partition::Test).count(), 1);
            prop_assert_eq!(parts.iter().filter(|p| **p == Partition::Val).count(), 1);
        }
        prop_assert_eq!(make_temporal_split(&years, seed).unwrap(), split);
    }
}

#[test]
fn snapshot_round_trip_preserves_outputs() {
    let config = ModelConfig {
        base_channels: 4,
        depth: 2,
        heads: magsr::model::Heads::MeanAndLogvar,
        variance_floor: 25.0,
        ..Default::default()
    };
    let model = build_model(config, 7).unwrap();
    let (_, bytes) = to_bytes(&model);
    let restored = from_bytes(&bytes).unwrap();
    let lr = random_input(8, 8, 1000.0, 3);
    for stochastic in [false, true] {
        assert_eq!(model.forward(&lr, stochastic, 11).unwrap(), restored.forward(&lr, stochastic, 11).unwrap());
    }
}
