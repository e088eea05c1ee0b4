use gearlab::analyze::{filter_normalized_direction, spectrum_of, topology_report};
use gearlab::corrupt::{corrupt, standard_suite};
use gearlab::data::{gen_shapes, Dataset, ShapesConfig};
use gearlab::era::{jsd, mix_view, sample_chain, ChainParams, Mixing, TransformSet};
use gearlab::grow::{
    budget_target, commit, m_shot_targets, propose, select_commit, split_epochs, GrowthConfig,
};
use gearlab::nn::{Network, NeuronInit, Topology};
use gearlab::rng::substream;
use gearlab::tensor::{Tape, Tensor};
use gearlab::train::lr_at;
use proptest::prelude::*;
use rand::Rng as _;

fn net(seed: u64, widths: Vec<usize>) -> Network {
    let mut t = Topology::plain(widths.len(), 1, 3, [3, 8, 8]);
    t.widths = widths;
    Network::build(t, seed).unwrap()
}

fn probe_images(seed: u64, n: usize) -> Vec<f64> {
    let mut r = substream(seed, "probe", &[]);
    (0..n * 3 * 64).map(|_| r.gen::<f64>()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn softmaxes(seed: u64, views: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut r = substream(seed, "dists", &[]);
    (0..views)
        .map(|_| {
            let z: Vec<f64> = (0..classes).map(|_| r.gen_range(-4.0..4.0)).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn commit_respects_budget(
        seed in 0u64..1000,
        widths in prop::collection::vec(1usize..6, 2..4),
        gamma in 0.0f64..2.0,
    ) {
        let n = net(seed, widths);
        let cfg = GrowthConfig { new_per_layer: 4, ..Default::default() };
        let mut r = substream(seed, "growth", &[]);
        let mut cands = propose(&n, &cfg, &mut r);
        for c in &mut cands {
            c.score = r.gen::<f64>();
        }
        let target = budget_target(n.complexity(), gamma);
        let out = select_commit(&n, &cands, gamma).unwrap();
        let c = out.net.complexity();
        prop_assert!(c <= target.max(n.complexity()));
        if target - n.complexity() <= cands.len() {
            prop_assert!(c + 1 >= target);
        }
    }

    #[test]
    fn zero_delta_commit_preserves_function(
        seed in 0u64..1000,
        widths in prop::collection::vec(1usize..5, 2..4),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let n = net(seed, widths);
        let cfg = GrowthConfig { new_per_layer: 3, ..Default::default() };
        let cands: Vec<_> = propose(&n, &cfg, &mut substream(seed, "growth", &[]))
            .iter()
            .map(|c| c.with_zero_delta())
            .collect();
        let mut chosen: Vec<usize> = picks.iter().map(|i| i.index(cands.len())).collect();
        chosen.sort_unstable();
        chosen.dedup();
        let (grown, _) = commit(&n, &cands, &chosen, 1).unwrap();
        let x = probe_images(seed, 3);
        prop_assert!(max_abs_diff(&n.logits(&x).unwrap(), &grown.logits(&x).unwrap()) <= 1e-9);
    }

    #[test]
    fn widen_with_zero_outgoing_preserves_function(seed in 0u64..1000, layer in 0usize..2, k in 1usize..4) {
        let mut n = net(seed, vec![3, 4]);
        let before = n.logits(&probe_images(seed, 2)).unwrap();
        let mut r = substream(seed, "widen", &[]);
        let adds: Vec<NeuronInit> = (0..k)
            .map(|_| NeuronInit {
                incoming: (0..n.incoming_len(layer)).map(|_| r.gen_range(-1.0..1.0)).collect(),
                bias: r.gen_range(-1.0..1.0),
                outgoing: vec![0.0; n.outgoing_len(layer)],
            })
            .collect();
        n.widen(layer, &adds).unwrap();
        let after = n.logits(&probe_images(seed, 2)).unwrap();
        prop_assert!(max_abs_diff(&before, &after) == 0.0);
    }

    #[test]
    fn jsd_bounded_and_view_symmetric(seed in 0u64..10_000, views in 1usize..7, classes in 2usize..11) {
        let d = softmaxes(seed, views, classes);
        let v = jsd(&d).unwrap();
        prop_assert!(v >= -1e-15 && v <= (classes as f64).ln() + 1e-12);
        let mut rev = d.clone();
        rev.reverse();
        prop_assert!((jsd(&rev).unwrap() - v).abs() < 1e-12);
        let same = vec![d[0].clone(); views];
        prop_assert!(jsd(&same).unwrap().abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = substream(seed, "lin", &[]);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap().with_grad();
        let grad_of = |ka: f64, kb: f64| {
            let mut t = Tape::new();
            let v = t.leaf(&x);
            let sq = t.sum_squares(v);
            let s = t.sum(v);
            let f = t.scale(sq, ka);
            let g = t.scale(s, kb);
            let out = t.add(f, g).unwrap();
            t.backward(out).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let (fa, gb) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..6 {
            prop_assert!((combined[i] - (a * fa[i] + b * gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_views_stay_in_range(seed in 0u64..1000, w in 1usize..4, d in 1usize..4) {
        let x = probe_images(seed, 1);
        let params = ChainParams::new(w, d, 2);
        let mut r = substream(seed, "era", &[]);
        let (view, p) = mix_view(&x, [3, 8, 8], &mut r, &params, &TransformSet::standard(), Mixing::Beta).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(view.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn corruptions_stay_in_range_and_are_deterministic(seed in 0u64..1000, cell in 0usize..25) {
        let x = probe_images(seed, 1);
        let c = standard_suite()[cell];
        let a = corrupt(&x, [3, 8, 8], &c, &mut substream(seed, "c", &[])).unwrap();
        let b = corrupt(&x, [3, 8, 8], &c, &mut substream(seed, "c", &[])).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn m_shot_targets_climb_to_the_one_shot_budget(c0 in 2usize..400, gamma in 0.0f64..2.0, m in 1usize..6) {
        let t = m_shot_targets(c0, gamma, m);
        prop_assert_eq!(t.len(), m);
        prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*t.last().unwrap(), budget_target(c0, gamma));
    }

    #[test]
    fn split_epochs_partition(total in 0usize..100, stages in 1usize..8) {
        let s = split_epochs(total, stages);
        prop_assert_eq!(s.len(), stages);
        prop_assert_eq!(s.iter().sum::<usize>(), total);
        prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }

    #[test]
    fn lr_schedule_never_increases(total in 1usize..200) {
        let lrs: Vec<f64> = (0..total).map(|e| lr_at(0.1, e, total)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lrs.iter().all(|&l| l == 0.1 || l == 0.1 * 0.1 || l == 0.1 * 0.1 * 0.1));
    }

    #[test]
    fn spectrum_parseval_and_symmetry(seed in 0u64..1000, n in prop::sample::select(vec![16usize, 32])) {
        let mut r = substream(seed, "fft", &[]);
        let imgs: Vec<Vec<f64>> = (0..2).map(|_| (0..3 * n * n).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let s = spectrum_of(&imgs, [3, n, n]).unwrap();
        prop_assert!((s.spectral_energy - s.spatial_energy).abs() <= 1e-6 * s.spatial_energy);
        // |X(k)| = |X(−k)| for real input; with DC at (n/2, n/2) that is
        // a point reflection through the centre on the non-Nyquist block.
        for y in 1..n {
            for x in 1..n {
                let a = s.magnitude[y * n + x];
                let b = s.magnitude[(n - y) * n + (n - x)];
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }
    }

    #[test]
    fn filter_normalization_matches_filter_norms(seed in 0u64..1000) {
        let n = net(seed, vec![3, 5]);
        let dir = filter_normalized_direction(&n, seed);
        for (conv, d) in n.convs().iter().zip(dir.iter().step_by(2)) {
            let per = conv.weight.numel() / conv.weight.shape()[0];
            for (w, dv) in conv.weight.data().chunks(per).zip(d.data().chunks(per)) {
                let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dn = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((dn / wn - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn container_round_trip(seed in 0u64..1000, classes in 2usize..7) {
        let (train, _) = gen_shapes(&ShapesConfig { seed, n_train: classes * 2, n_test: classes, classes, size: 8 }).unwrap();
        let mut buf = Vec::new();
        train.write_container(&mut buf).unwrap();
        let back = Dataset::read_container(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &train);
        prop_assert_eq!(back.digest(), train.digest());
    }
}

#[test]
fn chain_depths_cover_one_to_max() {
    let mut r = substream(3, "depth", &[]);
    let set = TransformSet::standard();
    let mut seen = [0usize; 4];
    for _ in 0..600 {
        seen[sample_chain(&mut r, &set, 3).unwrap().depth()] += 1;
    }
    assert_eq!(seen[0], 0);
    assert!(seen[1..].iter().all(|&c| c > 150));
}

#[test]
fn topology_report_single_and_pair() {
    let mut a = Topology::plain(2, 1, 3, [3, 8, 8]);
    a.widths = vec![50, 40];
    let mut b = a.clone();
    b.widths = vec![60, 40];
    let one = topology_report(std::slice::from_ref(&a)).unwrap();
    assert_eq!(
        one.iter().map(|s| s.mean).collect::<Vec<_>>(),
        vec![50.0, 40.0]
    );
    assert!(one.iter().all(|s| s.std == 0.0));
    let two = topology_report(&[a, b]).unwrap();
    assert_eq!(
        two.iter().map(|s| s.mean).collect::<Vec<_>>(),
        vec![55.0, 40.0]
    );
}
