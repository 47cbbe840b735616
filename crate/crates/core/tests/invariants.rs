use met_core::analysis::hellinger;
use met_core::met::{build_prompt, MetConfig, MetModel};
use met_core::model::{parse_model, ReactionNetwork};
use met_core::rng;
use met_core::ssa::{simulate, TrajectoryEnsemble};
use met_core::statespace::*;
use proptest::prelude::*;

fn dimer(kb: f64, kd: f64, kf: f64, u: u32) -> ReactionNetwork {
    parse_model(&format!(
        "species A B\nbound {u}\n\
         reaction kb : 0 -> A\nreaction kf : 2 A -> B\nreaction kd : B -> 0\nreaction kx : A -> 0\n\
         rate kb {kb}\nrate kf {kf}\nrate kd {kd}\nrate kx 0.2\ntime 0 1\n"
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoding_is_a_bijection(bounds in prop::collection::vec(0u32..5, 1..4)) {
        let space = TruncatedStateSpace::new(&bounds, 1 << 16).unwrap();
        prop_assert_eq!(space.size(), bounds.iter().map(|&u| u as usize + 1).product::<usize>());
        for i in 0..space.size() {
            prop_assert_eq!(space.encode(&space.decode(i)), i);
        }
    }

    #[test]
    fn generator_conserves_mass(kb in 0.01f64..5.0, kd in 0.01f64..5.0, kf in 0.0f64..2.0, u in 1u32..8) {
        let net = dimer(kb, kd, kf, u);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        for s in gen.column_sums() {
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn exact_evolution_stays_a_distribution(kb in 0.01f64..5.0, kd in 0.01f64..5.0, t in 0.0f64..5.0) {
        let net = dimer(kb, kd, 0.3, 6);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let p0 = ProbabilityVector::delta(gen.space(), &[2, 1], 0.0).unwrap();
        let p = evolve_exact(&gen, &p0, t);
        prop_assert!((p.total() - 1.0).abs() < 1e-9);
        prop_assert!(p.probs.iter().all(|&v| v >= -1e-14));
    }

    #[test]
    fn ssa_stays_in_the_box(seed in 0u64..1000, kb in 0.1f64..20.0) {
        let net = dimer(kb, 0.5, 0.5, 5);
        let ens = simulate(&net, &net.default_rates, &[0, 0], &[0.0, 0.5, 2.0], 50, seed).unwrap();
        for k in 0..ens.n_times() {
            for x in ens.states_at(k).unwrap() {
                prop_assert!(x[0] <= 5 && x[1] <= 5);
            }
        }
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        prop_assert_eq!(TrajectoryEnsemble::read_binary(buf.as_slice()).unwrap(), ens);
    }

    #[test]
    fn hellinger_is_a_bounded_symmetric_distance(
        a in prop::collection::vec(0.0f64..1.0, 6),
        b in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / 6.0) / s).collect::<Vec<_>>()
        };
        let (p, q) = (norm(&a), norm(&b));
        let h = hellinger(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
        prop_assert!((h - hellinger(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(hellinger(&p, &p).unwrap() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn met_joint_is_normalized(seed in 0u64..10_000, t in 0.0f64..10.0, kb in 0.01f64..10.0) {
        let net = dimer(kb, 1.0, 0.1, 3);
        let cfg = MetConfig { d_emb: 8, d_ff: 16, d_l: 1, h: 2, d_p: 3 };
        let model = MetModel::new(&cfg, &net, &mut rng::stream(seed, 0)).unwrap();
        let prompt = build_prompt(&net, &net.default_rates, &[1, 0], t).unwrap();
        let space = TruncatedStateSpace::for_network(&net, 1 << 10).unwrap();
        let all: Vec<Vec<u32>> = space.states().collect();
        let total: f64 = model.log_probs(&vec![&prompt; all.len()], &all).iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}
