use neld::potential::ForceField;
use neld::{coarsen, step, DeformingLattice, FlowMatrix, SchemeId, SimParams, StepNoise, SystemState};
use proptest::prelude::*;

fn gaussians(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len)
}

fn desk_lattice() -> DeformingLattice {
    DeformingLattice::cubic(7.5, FlowMatrix::diagonal([0.2, -0.1, -0.1]).unwrap()).unwrap()
}

fn ideal_params(gamma: f64, beta: f64) -> SimParams {
    SimParams::new(gamma, beta, FlowMatrix::diagonal([0.2, -0.1, -0.1]).unwrap(), ForceField::ideal_gas()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Coarsened increments match the Brownian path they summarise, for any step.
    #[test]
    fn coarsening_matches_the_path(h in 1e-5f64..1.0, e in gaussians(4)) {
        let a = StepNoise::new(h, vec![e[0]], vec![e[1]]).unwrap();
        let b = StepNoise::new(h, vec![e[2]], vec![e[3]]).unwrap();
        let c = coarsen(&a, &b).unwrap();
        prop_assert_eq!(c.dt, 2.0 * h);

        let dw = a.increment(0) + b.increment(0);
        prop_assert!((c.increment(0) - dw).abs() <= 1e-12 * (1.0 + dw.abs()));
        // the time integral of W over the pair, with W(0) = 0
        let int = a.integral(0) + h * a.increment(0) + b.integral(0);
        prop_assert!((c.integral(0) - int).abs() <= 1e-12 * (1.0 + int.abs()));

        prop_assert!((c.eta[0] - (e[0] + e[2]) / 2f64.sqrt()).abs() < 1e-12);
        let zeta = (3f64.sqrt() * (e[0] - e[2]) + e[1] + e[3]) / (2.0 * 2f64.sqrt());
        prop_assert!((c.zeta[0] - zeta).abs() < 1e-12, "{} vs {}", c.zeta[0], zeta);
    }

    /// Away from the cell faces, the failed schemes and their twins agree bit for bit.
    #[test]
    fn twins_agree_without_mid_step_wraps(
        q in prop::collection::vec(1.0f64..6.0, 6),
        p in gaussians(6),
        e in gaussians(12),
        t in 0.0f64..0.25,
    ) {
        let params = SimParams::new(1.0, 1.0, *desk_lattice().flow(), ForceField::wca()).unwrap();
        let lattice = desk_lattice();
        let noise = StepNoise::new(1e-3, e[..6].to_vec(), e[6..].to_vec()).unwrap();
        let noise = noise.clone().with_xi(noise.ou_xi(params.gamma()));
        let start = SystemState::new(q, p, t).unwrap();
        prop_assume!(ForceField::wca().forces(&start.q, &lattice, t).is_ok());
        for failed in [SchemeId::SeA, SchemeId::Abapo] {
            let (mut a, mut b) = (start.clone(), start.clone());
            let rec = step(failed, &mut a, &params, &lattice, &noise).unwrap();
            step(failed.corrected_twin().unwrap(), &mut b, &params, &lattice, &noise).unwrap();
            prop_assert!(!rec.crossed_mid_step());
            prop_assert_eq!(a, b);
        }
    }

    /// A mid-step wrap is exactly when the twins part ways.
    #[test]
    fn twins_differ_after_a_mid_step_wrap(x in 7.3f64..7.49, px in 5.0f64..20.0, t in 0.0f64..0.25) {
        let lattice = desk_lattice();
        let params = ideal_params(1.0, f64::INFINITY);
        let start = SystemState::new(vec![x, 1.0, 1.0], vec![px, 0.0, 0.0], t).unwrap();
        let noise = StepNoise::zeros(3, 0.02);
        prop_assume!(x + px * 0.02 > lattice.edges_at(t)[0] + 1e-9);
        let (mut a, mut b) = (start.clone(), start);
        let rec = step(SchemeId::SeA, &mut a, &params, &lattice, &noise).unwrap();
        step(SchemeId::SeAc, &mut b, &params, &lattice, &noise).unwrap();
        prop_assert!(rec.crossed_mid_step());
        prop_assert!(a != b);
    }

    /// The noise amplitude follows the friction and temperature.
    #[test]
    fn fluctuation_dissipation(gamma in 0.01f64..10.0, beta in 0.1f64..10.0) {
        let params = ideal_params(gamma, beta);
        let s = params.sigma();
        prop_assert!((s * s * beta / (2.0 * gamma) - 1.0).abs() < 1e-12);
        prop_assert_eq!(ideal_params(gamma, f64::INFINITY).sigma(), 0.0);
    }

    /// Pair forces cancel and do not see which image of a particle is stored.
    #[test]
    fn forces_are_pairwise_and_image_blind(
        raw in prop::collection::vec(0.0f64..3.0, 12),
        shift in prop::collection::vec(-2i32..=2, 3),
        who in 0usize..4,
        t in 0.0f64..0.25,
    ) {
        let lattice = DeformingLattice::cubic(3.0, FlowMatrix::diagonal([0.2, -0.1, -0.1]).unwrap()).unwrap();
        let edges = lattice.edges_at(t);
        let q: Vec<f64> = raw.chunks(3).flat_map(|c| (0..3).map(move |k| c[k] * edges[k] / 3.0)).collect();
        let ff = ForceField::wca().with_cells(false);
        let Ok((e, f)) = ff.energy_forces(&q, &lattice, t) else { return Ok(()) };
        prop_assume!(e.is_finite() && e < 1e6);
        for k in 0..3 {
            let net: f64 = f.iter().skip(k).step_by(3).sum();
            let scale: f64 = f.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            prop_assert!(net.abs() <= 1e-12 * scale);
        }
        let mut moved = q.clone();
        for k in 0..3 {
            moved[3 * who + k] += shift[k] as f64 * edges[k];
        }
        let (e2, f2) = ff.energy_forces(&moved, &lattice, t).unwrap();
        prop_assert!((e2 - e).abs() <= 1e-9 * e.abs().max(1.0));
        for (a, b) in f.iter().zip(&f2) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
