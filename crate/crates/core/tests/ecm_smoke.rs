use pvsig::ecm::{fit_ecm, select_alpha, EcmConfig};
use pvsig::tables::{expected_reference, ingest_csv};
use std::path::Path;
use std::time::Instant;

#[test]
fn statin_fit_with_automatic_concentration_is_fast() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let t = ingest_csv(&dir.join("statin46.csv"), "Other Pt", "Other").unwrap();
    let e = expected_reference(&t).unwrap();
    let cfg = EcmConfig { seed: 7, ..EcmConfig::default() };
    let t0 = Instant::now();
    let sel = select_alpha(&t, &e, &cfg).unwrap();
    let sel_time = t0.elapsed();
    let t1 = Instant::now();
    let fit = fit_ecm(&t, &e, &EcmConfig { dirichlet_alpha: Some(sel.alpha), ..cfg }).unwrap();
    let fit_time = t1.elapsed();
    eprintln!("selected alpha {} scores {:?}", sel.alpha, sel.scores);
    eprintln!("select {:?} fit {:?} iters {} active {} converged {} loglik {}",
        sel_time, fit_time, fit.iterations(), fit.prior.k(), fit.trace.converged, fit.loglik);
}
