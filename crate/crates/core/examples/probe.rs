use std::time::Instant;

use assoc_game::*;

fn main() {
    let sys = SystemParams::new(1.0, 1.0, 0.25).unwrap();
    let user = UserProfile::new(0.6, 0.5, 1.0).unwrap();
    let engine = UtilityEngine::new(sys, 1e-9);

    let sc = |n: u32| {
        Scenario::new(sys, n, Users::Symmetric(user), 1e-9, 1e-7, default_psi_max(0.6), 7).unwrap()
    };

    let t = Instant::now();
    let thresholds = find_kstar_nstar(&engine, &sc(60), 60).unwrap();
    println!(
        "k* = {} ({:?}), n* = {} ({:?})  [{:?}]",
        thresholds.k_star.count,
        thresholds.k_star.status,
        thresholds.n_star.count,
        thresholds.n_star.status,
        t.elapsed()
    );

    for n in [9u32, 20, 40] {
        let t = Instant::now();
        let certs = multi_user_equilibria(&engine, &sc(n)).unwrap();
        println!("equilibria n={n}: {} certs in {:?}", certs.len(), t.elapsed());
    }

    for n in [9u32, 20, 40, 50] {
        let t = Instant::now();
        let out = stackelberg_multi(&engine, &sc(n)).unwrap();
        println!(
            "stackelberg n={n}: psi={:?} profile={:?} U={:.ercent$} poa={} in {:?}",
            out.psi,
            out.profile,
            out.bs_utility,
            out.poa,
            t.elapsed(),
            ercent = 4
        );
    }
}
