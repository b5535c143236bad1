mod common;

use gridstate::case::{self, parse_case, render_case, CaseBundle};
use gridstate::network::{build_ybus, Branch, Bus, BusKind, Network};
use gridstate::power_flow::{branch_losses, calc_injections, solve_power_flow, StateVector};
use num_complex::Complex64;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn bus(id: usize, kind: BusKind, p_load: f64, q_load: f64) -> Bus {
    Bus {
        id,
        kind,
        v_setpoint: 1.0,
        p_gen: 0.0,
        q_gen: 0.0,
        p_load,
        q_load,
    }
}

/// Random connected network: a random tree plus a few extra branches.
fn arb_network(with_shunts: bool) -> impl Strategy<Value = Network> {
    (2usize..9).prop_flat_map(move |n| {
        let parents: Vec<_> = (1..n).map(|k| 0..k).collect();
        let extra = proptest::collection::vec((0..n, 0..n), 0..4);
        let params = proptest::collection::vec((0.0..0.2f64, 0.01..0.5f64, 0.0..0.05f64), n + 4);
        let loads = proptest::collection::vec((0.0..50.0f64, -10.0..20.0f64), n);
        (Just(n), parents, extra, params, loads).prop_map(move |(n, parents, extra, params, loads)| {
            let mut pairs: Vec<(usize, usize)> = parents.iter().enumerate().map(|(k, &p)| (p, k + 1)).collect();
            pairs.extend(extra.into_iter().filter(|(a, b)| a != b));
            let branches = pairs
                .iter()
                .zip(&params)
                .map(|(&(f, t), &(r, x, bh))| Branch {
                    from_bus: f + 1,
                    to_bus: t + 1,
                    resistance: r,
                    reactance: x,
                    half_charging: if with_shunts { bh } else { 0.0 },
                })
                .collect();
            let buses = (0..n)
                .map(|k| {
                    let kind = if k == 0 { BusKind::Slack } else { BusKind::PQ };
                    bus(k + 1, kind, loads[k].0, loads[k].1)
                })
                .collect();
            Network::new(buses, branches, 100.0).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn ybus_is_independent_of_branch_order(net in arb_network(true), seed in any::<u64>()) {
        let mut branches = net.branches().to_vec();
        let k = branches.len();
        for i in (1..k).rev() {
            branches.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        let shuffled = Network::new(net.buses().to_vec(), branches, net.base_mva()).unwrap();
        let a = build_ybus(&net).unwrap();
        let b = build_ybus(&shuffled).unwrap();
        for i in 0..a.dim() {
            for j in 0..a.dim() {
                prop_assert!((a.get(i, j) - b.get(i, j)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn ybus_rows_sum_to_zero_without_shunts(net in arb_network(false)) {
        let y = build_ybus(&net).unwrap();
        for i in 0..y.dim() {
            let s: Complex64 = (0..y.dim()).map(|j| y.get(i, j)).sum();
            let scale = y.get(i, i).norm().max(1.0);
            prop_assert!(s.norm() < 1e-12 * scale);
        }
    }

    #[test]
    fn ybus_is_symmetric(net in arb_network(true)) {
        let y = build_ybus(&net).unwrap();
        for i in 0..y.dim() {
            for j in 0..y.dim() {
                prop_assert_eq!(y.get(i, j), y.get(j, i));
            }
        }
    }

    #[test]
    fn case_files_round_trip(net in arb_network(true)) {
        let (buses, lines, meta) = render_case(&net);
        let back = parse_case(&buses, &lines, Some(&meta)).unwrap();
        prop_assert_eq!(back.network, net);
    }

    #[test]
    fn power_balance_equals_series_losses(net in arb_network(false)) {
        let y = build_ybus(&net).unwrap();
        let light = net.with_load_scale(|_| 0.1);
        if let Ok(pf) = solve_power_flow(&light, &y, 1e-10, 30, None) {
            prop_assume!(pf.converged);
            let total: f64 = calc_injections(&pf.state, &y).iter().map(|(p, _)| p).sum();
            let losses = branch_losses(&light, &pf.state);
            prop_assert!((total - losses).abs() < 1e-9, "{total} vs {losses}");
        }
    }
}

#[test]
fn shipped_case_matches_independent_solution() {
    let fx = common::ieee14();
    for k in 0..14 {
        assert!((fx.truth.magnitudes[k] - common::TRUTH_V[k]).abs() < 1e-9, "V at bus {}", k + 1);
        let deg = fx.truth.angles[k].to_degrees();
        assert!((deg - common::TRUTH_ANGLE_DEG[k]).abs() < 1e-7, "angle at bus {}", k + 1);
    }
}

#[test]
fn shipped_case_losses() {
    let fx = common::ieee14();
    let total: f64 = calc_injections(&fx.truth, &fx.ybus).iter().map(|(p, _)| p).sum();
    assert!((total - common::TRUTH_LOSS_PU).abs() < 1e-9);
    // Line charging is reactive only, so series losses carry all real power.
    assert!((branch_losses(&fx.network, &fx.truth) - common::TRUTH_LOSS_PU).abs() < 1e-9);
}

#[test]
fn shipped_case_bus_kinds() {
    let net = CaseBundle::ieee14().network;
    let kinds: Vec<_> = net.buses().iter().map(|b| b.kind).collect();
    for (k, kind) in kinds.iter().enumerate() {
        let expected = match k + 1 {
            1 => BusKind::Slack,
            2 | 3 | 6 | 8 => BusKind::PV,
            _ => BusKind::PQ,
        };
        assert_eq!(*kind, expected, "bus {}", k + 1);
    }
    assert_eq!(net.branches().len(), 20);
    assert_eq!(net.state_dim(), 27);
}

#[test]
fn shipped_bundle_checksums() {
    let digest = |s: &str| {
        Sha256::digest(s.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };
    assert_eq!(
        digest(case::ieee14::BUSES_CSV),
        "40738763599b03a4c5282e3aac3f5803a5355796800af6d3de53d8bfd738fea6"
    );
    assert_eq!(
        digest(case::ieee14::LINES_CSV),
        "de36204737c7ad8a9963e457ede92bbc8746469c297ab2af9ab0ac9333a5b503"
    );
    assert_eq!(
        digest(case::ieee14::CASE_JSON),
        "89997b065bc99385597d3f6bac6a1e5bdcec2d05ade981e068610b78562545c6"
    );
}

#[test]
fn written_case_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let net = CaseBundle::ieee14().network;
    case::write_case(&net, dir.path()).unwrap();
    let back = case::load_case(dir.path()).unwrap();
    assert_eq!(back.network, net);
    assert_eq!(back.source.as_deref(), Some(dir.path()));
}

#[test]
fn flat_start_of_shipped_case() {
    let net = CaseBundle::ieee14().network;
    let flat = StateVector::flat(&net);
    assert_eq!(flat.magnitudes[0], 1.06);
    assert_eq!(flat.magnitudes[7], 1.09);
    assert_eq!(flat.magnitudes[13], 1.0);
    assert!(flat.angles.iter().all(|&a| a == 0.0));
}
