use std::time::Instant;

use assoc_game::*;

fn main() {
    let sys = SystemParams::new(1.0, 1.0, 0.25).unwrap();
    let user = UserProfile::new(0.6, 0.5, 1.0).unwrap();

    for tol in [1e-9f64, 1e-7] {
        let engine = UtilityEngine::new(sys, tol);
        let sc = Scenario::new(sys, 40, Users::Symmetric(user), tol, 1e-6, default_psi_max(0.6), 7).unwrap();
        let t = Instant::now();
        let certs = multi_user_equilibria(&engine, &sc).unwrap();
        println!("tol={tol:.0e} n=40 scan: {} certs in {:?}", certs.len(), t.elapsed());
        // a second psi to see steady-state sweep cost
        let sc2 = override_psi(&sc, 2.5);
        let t = Instant::now();
        let certs = multi_user_equilibria(&engine, &sc2).unwrap();
        println!("tol={tol:.0e} n=40 psi=2.5: {} certs in {:?}", certs.len(), t.elapsed());
    }
}
