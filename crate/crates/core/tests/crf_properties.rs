use proptest::prelude::*;

use tumorseg::crf::{
    crf_rnn_forward_with, free_energy, mean_field_iteration, mean_field_iteration_with, potts, BeliefMaps, CrfParameters,
    MessagePassing, PixelFeatures, UnaryMaps, DEFAULT_THETA,
};
use tumorseg::fcnn::{ProbabilityMaps, Tensor};
use tumorseg::{Axis, SliceTensor, NUM_CLASSES};

const L: usize = NUM_CLASSES;

#[derive(Clone, Debug)]
struct Instance {
    h: usize,
    w: usize,
    scores: Vec<f64>,
    intensities: Vec<f32>,
    params: CrfParameters,
}

impl Instance {
    fn maps(&self) -> ProbabilityMaps {
        ProbabilityMaps::from_scores(Tensor::from_vec(L, self.h, self.w, self.scores.clone()).unwrap())
    }

    fn slice(&self) -> SliceTensor {
        SliceTensor {
            axis: Axis::Axial,
            index: 0,
            channels: 3,
            height: self.h,
            width: self.w,
            data: self.intensities.clone(),
        }
    }
}

fn instance(max_side: usize, max_t: usize) -> impl Strategy<Value = Instance> {
    (1..=max_side, 1..=max_side, 1..=max_t).prop_flat_map(|(h, w, t)| {
        let m = h * w;
        (
            prop::collection::vec(-4.0..4.0f64, L * m),
            prop::collection::vec(0.0..12.0f32, 3 * m),
            prop::array::uniform2(0.0..2.0f64),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, L), L),
        )
            .prop_map(move |(scores, intensities, w2, mu)| Instance {
                h,
                w,
                scores,
                intensities,
                params: CrfParameters {
                    w: w2,
                    mu,
                    theta: DEFAULT_THETA,
                    iterations: t,
                },
            })
    })
}

fn assert_normalized(q: &BeliefMaps) {
    for i in 0..q.pixels() {
        let d = q.distribution(i);
        assert!(d.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beliefs_are_distributions(inst in instance(8, 3)) {
        for mode in [MessagePassing::Exact, MessagePassing::Windowed] {
            let q = crf_rnn_forward_with(&inst.maps(), &inst.slice(), &inst.params, mode).unwrap();
            assert_normalized(&q);
        }
    }

    #[test]
    fn windowed_matches_exact_on_small_slices(inst in instance(8, 3)) {
        let exact = crf_rnn_forward_with(&inst.maps(), &inst.slice(), &inst.params, MessagePassing::Exact).unwrap();
        let windowed = crf_rnn_forward_with(&inst.maps(), &inst.slice(), &inst.params, MessagePassing::Windowed).unwrap();
        for (a, b) in exact.q.iter().zip(&windowed.q) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn label_permutation_equivariance(inst in instance(6, 3), perm in Just((0..L).collect::<Vec<_>>()).prop_shuffle()) {
        let m = inst.h * inst.w;
        // Label u of the original becomes label perm[u].
        let mut permuted = inst.clone();
        for u in 0..L {
            for i in 0..m {
                permuted.scores[perm[u] * m + i] = inst.scores[u * m + i];
            }
            for v in 0..L {
                permuted.params.mu[perm[u]][perm[v]] = inst.params.mu[u][v];
            }
        }
        let q = crf_rnn_forward_with(&inst.maps(), &inst.slice(), &inst.params, MessagePassing::Exact).unwrap();
        let qp = crf_rnn_forward_with(&permuted.maps(), &permuted.slice(), &permuted.params, MessagePassing::Exact).unwrap();
        for i in 0..m {
            for u in 0..L {
                prop_assert!((q.at(i, u) - qp.at(i, perm[u])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_softmax(inst in instance(6, 3), zero_mu in any::<bool>()) {
        let mut params = inst.params.clone();
        if zero_mu {
            params.mu = vec![vec![0.0; L]; L];
        } else {
            params.w = [0.0, 0.0];
        }
        let maps = inst.maps();
        let q = crf_rnn_forward_with(&maps, &inst.slice(), &params, MessagePassing::Windowed).unwrap();
        for i in 0..q.pixels() {
            let expect = maps.probability_at(i / inst.w, i % inst.w);
            for u in 0..L {
                prop_assert!((q.at(i, u) - expect[u]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn potts_pulls_identical_pixels_together(
        phi in prop::collection::vec(-3.0..3.0f64, 2 * L),
        e in prop::collection::vec(0.0..50.0f64, 3),
        w in prop::array::uniform2(0.05..0.5f64),
    ) {
        let unary = UnaryMaps::new(1, 2, L, phi.clone()).unwrap();
        let mut intensities = e.clone();
        intensities.extend(&e);
        let feats = PixelFeatures::new(1, 2, 3, intensities).unwrap();
        let params = CrfParameters { w, mu: potts(L), theta: DEFAULT_THETA, iterations: 1 };
        let logits: Vec<f64> = phi.iter().map(|p| -p).collect();
        let before = BeliefMaps::softmax(1, 2, L, &logits).unwrap();
        let after = mean_field_iteration(&before, &unary, &feats, &params).unwrap();
        let tv = |q: &BeliefMaps| 0.5 * q.distribution(0).iter().zip(q.distribution(1)).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let (d0, d1) = (tv(&before), tv(&after));
        if d0 > 1e-9 {
            prop_assert!(d1 < d0, "{d1} >= {d0}");
        } else {
            prop_assert!(d1 <= 1e-9);
        }
    }
}

#[test]
fn fixed_point_reproduces_itself() {
    let (h, w) = (5, 6);
    let m = h * w;
    let phi: Vec<f64> = (0..m * L).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.4).collect();
    let intensities: Vec<f64> = (0..m * 3).map(|k| (k * 13 % 7) as f64).collect();
    let unary = UnaryMaps::new(h, w, L, phi.clone()).unwrap();
    let feats = PixelFeatures::new(h, w, 3, intensities).unwrap();
    let params = CrfParameters {
        w: [0.05, 0.05],
        ..CrfParameters::default()
    };
    let logits: Vec<f64> = phi.iter().map(|p| -p).collect();
    let mut q = BeliefMaps::softmax(h, w, L, &logits).unwrap();
    let mut energies = Vec::new();
    for _ in 0..200 {
        q = mean_field_iteration_with(&q, &unary, &feats, &params, MessagePassing::Exact).unwrap();
        energies.push(free_energy(&q, &unary, &feats, &params).unwrap());
    }
    let again = mean_field_iteration_with(&q, &unary, &feats, &params, MessagePassing::Exact).unwrap();
    let residual = q.q.iter().zip(&again.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(residual <= 1e-6, "residual {residual}");
    let tail = &energies[energies.len() - 10..];
    assert!(tail.iter().all(|e| (e - tail[0]).abs() <= 1e-9));
}
