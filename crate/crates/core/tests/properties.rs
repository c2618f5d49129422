use bsgd::autodiff::{log_softmax_rows, Tape};
use bsgd::bayes_lab::{run_flow, FlowConfig, Likelihood, ScalarModel};
use bsgd::checkpoint::Checkpoint;
use bsgd::data::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels, BatchPlan};
use bsgd::dropout_info::{effective_param_count, mutual_info_bit, reduction_factor, Convention, LayerChannel};
use bsgd::ledger::{LengthReport, WeightLength, WeightTerm};
use bsgd::optim::Bsgd;
use bsgd::prior::{kl_to_reference, GaussianParam, GaussianParamState};
use bsgd::quadrature::log_sum_exp;
use bsgd::tensor::Tensor;
use proptest::prelude::*;

fn state_of(mu: &[f64], s: &[f64], n_epochs: usize) -> GaussianParamState<f64> {
    GaussianParamState::from_params(
        vec![GaussianParam {
            name: "w".into(),
            mu: Tensor::new(vec![mu.len()], mu.to_vec()).unwrap(),
            s: Tensor::new(vec![s.len()], s.to_vec()).unwrap(),
        }],
        1,
        n_epochs,
    )
    .unwrap()
}

fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    h(p) + h(1.0 - p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalize(rows in 1usize..5, k in 1usize..8, seed in any::<u64>()) {
        let logits: Vec<f64> = (0..rows * k)
            .map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 7919)) % 2001) as f64 / 50.0 - 20.0)
            .collect();
        let lp = log_softmax_rows(&logits, k);
        for row in lp.chunks(k) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_nonnegative_and_ln_k_when_uniform(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        k in prop::sample::select(vec![2usize, 3, 4, 6]),
        c in -5.0f64..5.0,
    ) {
        let rows = 12 / k;
        let labels: Vec<usize> = (0..rows).map(|i| i % k).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.param(Tensor::new(vec![rows, k], logits).unwrap()).unwrap();
        let ce = tape.cross_entropy(v, &labels).unwrap();
        prop_assert!(tape.value(ce).item().unwrap() >= 0.0);

        let uniform = tape.param(Tensor::full(&[rows, k], c)).unwrap();
        let ce = tape.cross_entropy(uniform, &labels).unwrap();
        prop_assert!((tape.value(ce).item().unwrap() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_bounds(xs in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(&xs);
        prop_assert!(lse >= max && lse <= max + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn bsgd_s_never_decreases(
        n_epochs in 1usize..20,
        steps in 1usize..30,
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 30),
    ) {
        let opt = Bsgd::<f64>::new(n_epochs).unwrap();
        let mut state = state_of(&[0.1, -0.2, 0.3, 0.0], &[1.0; 4], n_epochs);
        for g in grads.iter().take(steps) {
            let before: Vec<f64> = state.params()[0].s.data().to_vec();
            let step_before: Vec<f64> = before.iter().map(|s| opt.epsilon() / s).collect();
            opt.apply(&mut state, &[Tensor::new(vec![4], g.clone()).unwrap()], None).unwrap();
            for (i, (&b, &a)) in before.iter().zip(state.params()[0].s.data()).enumerate() {
                prop_assert!(a >= b);
                if g[i] != 0.0 {
                    prop_assert!(a > b);
                    prop_assert!(opt.epsilon() / a < step_before[i]);
                }
            }
        }
    }

    #[test]
    fn bsgd_exact_curvature_gives_s0_plus_n_b(n_epochs in 1usize..12, n_b in 1usize..12, s0 in 0.5f64..3.0) {
        let opt = Bsgd::<f64>::new(n_epochs).unwrap();
        let mut state = state_of(&[0.0], &[s0], n_epochs);
        let ones = [Tensor::ones(&[1])];
        for _ in 0..opt.total_steps(n_b) {
            opt.apply(&mut state, &[Tensor::scalar(0.5).reshape(vec![1]).unwrap()], Some(&ones)).unwrap();
        }
        let s = state.params()[0].s.data()[0];
        prop_assert!((s - (s0 + n_b as f64)).abs() < 1e-12 * (s0 + n_b as f64));
    }

    #[test]
    fn reduction_factor_decreasing_and_matches_balanced_channel(a in 0.0f64..0.999, b in 0.0f64..0.999) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(reduction_factor(lo).unwrap() > reduction_factor(hi).unwrap());
        prop_assert!((mutual_info_bit(lo, 0.5).unwrap() - reduction_factor(lo).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mutual_info_bounded_by_source_entropy(r in 0.0f64..0.999, p in 0.0f64..=1.0) {
        let i = mutual_info_bit(r, p).unwrap();
        prop_assert!(i >= 0.0 && i <= binary_entropy(p) + 1e-12);
    }

    #[test]
    fn effective_count_never_exceeds_nominal(
        rates in prop::collection::vec(0.0f64..0.95, 2..6),
        sizes in prop::collection::vec(1usize..50, 6),
    ) {
        let layers: Vec<LayerChannel> = rates
            .windows(2)
            .enumerate()
            .map(|(i, r)| LayerChannel {
                name: format!("l{i}"),
                in_dim: sizes[i],
                out_dim: sizes[i + 1],
                r_in: r[0],
                r_out: r[1],
                weight_count: sizes[i] * sizes[i + 1],
                bias_count: sizes[i + 1],
            })
            .collect();
        for c in Convention::ALL {
            let eff = effective_param_count(&layers, c).unwrap();
            prop_assert!(eff.effective <= eff.nominal as f64 + 1e-9 && eff.effective >= 0.0);
        }
    }

    #[test]
    fn kl_invariant_under_joint_permutation(
        mu in prop::collection::vec(-3.0f64..3.0, 5),
        s in prop::collection::vec(0.1f64..10.0, 5),
        shift in 1usize..5,
    ) {
        let rot = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(shift); v };
        let reference = state_of(&[0.0, 0.5, -0.5, 1.0, 0.2], &[1.0, 2.0, 0.5, 4.0, 1.5], 1);
        let a = kl_to_reference(&state_of(&mu, &s, 1), &reference).unwrap();
        let ref_rot = state_of(&rot(&[0.0, 0.5, -0.5, 1.0, 0.2]), &rot(&[1.0, 2.0, 0.5, 4.0, 1.5]), 1);
        let b = kl_to_reference(&state_of(&rot(&mu), &rot(&s), 1), &ref_rot).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn ledger_total_is_data_plus_weight_term(data in 0.0f64..1e6, kl in 0.0f64..1e4, point in -1e4f64..1e4) {
        let w = WeightLength { point_nats: point, kl_nats: kl };
        prop_assert_eq!(LengthReport::new(1, data, w, WeightTerm::Kl, 0.0).total_nats, data + kl);
        prop_assert_eq!(LengthReport::new(1, data, w, WeightTerm::Point, 0.0).total_nats, data + point);
    }

    #[test]
    fn conjugate_flow_variance_is_exact(
        xs in prop::collection::vec(-3.0f64..3.0, 12),
        factor in prop::sample::select(vec![(1usize, 12usize), (2, 6), (3, 4), (4, 3), (6, 2), (12, 1)]),
        prior_var in 0.2f64..5.0,
    ) {
        let (n_epochs, n_batches) = factor;
        let model = ScalarModel::new(0.0, prior_var, Likelihood::GaussianMean, xs).unwrap();
        let trace = run_flow(&model, &FlowConfig::exact(n_epochs, Some(12 / n_batches))).unwrap();
        let last = trace.last();
        let expected = 1.0 / (1.0 / prior_var + 12.0);
        prop_assert!((last.sigma * last.sigma - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn epoch_streams_are_deterministic_and_disjoint(len in 1usize..200, b in 1usize..20, seed in any::<u64>(), epoch in 0usize..5) {
        prop_assume!(b <= len);
        let plan = BatchPlan::new(len, b, seed).unwrap();
        let first = plan.epoch_indices(len, epoch);
        prop_assert_eq!(&first, &plan.epoch_indices(len, epoch));
        prop_assert_eq!(first.len(), len / b);
        let mut all: Vec<usize> = first.concat();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), (len / b) * b);
        prop_assert!(all.iter().all(|&i| i < len));
    }

    #[test]
    fn idx_round_trip(n in 1usize..6, h in 1usize..6, w in 1usize..6, pixels in prop::collection::vec(0u8..=255, 180)) {
        let dir = tempfile::tempdir().unwrap();
        let images = Tensor::<f64>::from_fn(&[n, 1, h, w], |i| f64::from(pixels[i % pixels.len()]) / 255.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        write_idx_images(dir.path().join("x.idx"), &images).unwrap();
        write_idx_labels(dir.path().join("y.idx"), &labels).unwrap();
        let back = load_idx_images::<f64>(dir.path().join("x.idx")).unwrap();
        prop_assert_eq!(back.shape(), images.shape());
        prop_assert_eq!(back.data(), images.data());
        prop_assert!(back.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(load_idx_labels(dir.path().join("y.idx"), Some(10)).unwrap(), labels);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical(
        mu in prop::collection::vec(-1e3f64..1e3, 1..10),
        seed in any::<u64>(),
    ) {
        let s: Vec<f64> = mu.iter().map(|m| 1.0 + m.abs()).collect();
        let ck = Checkpoint { state: state_of(&mu, &s, 3), seed, meta: serde_json::json!({"k": 1}) };
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, ck);
    }
}
