//! Acceptance table: one PASS/FAIL line per criterion.
//!
//! Always exits 0 so that the table is reported in full; the lines carry
//! the verdict. Set `CVS_ACCEPTANCE_STRICT=1` to exit 1 on any failure.

use std::time::Instant;

use cvs_core::eos_state::Eos;
use cvs_core::invariants::{self, CheckResult};
use cvs_core::runner::{self, RunConfig};

fn main() {
    let cfg = RunConfig::scenario("perturbed-2d").expect("scenario");
    let eos: Eos = cfg.eos().expect("eos");
    let bg = cfg.background.clone();
    let mut rows: Vec<CheckResult> = Vec::new();
    let mut emit = |r: CheckResult| {
        println!("{}", r.line());
        rows.push(r);
    };

    emit(invariants::symmetry_definiteness(&eos, 11));
    emit(invariants::multiplier_exactness(12));
    emit(invariants::boundary_decoupling(&eos, 13));
    emit(invariants::p_structure(&eos, &bg, 14));
    emit(invariants::linearization_order(&eos, 15));
    emit(invariants::planar_preservation(&eos, &bg));

    let study = invariants::refinement_study(&eos, &bg);
    emit(invariants::refinement_convergence(&study));
    emit(invariants::energy_constant(&eos, &bg));
    emit(invariants::smoothing_constants());

    match runner::build_approx(&runner::bookkeeping_config(&cfg)) {
        Ok(a) => emit(invariants::iteration_bookkeeping(&a, 5)),
        Err(e) => println!("[FAIL] 10 iteration_bookkeeping: {e}"),
    }

    let start = Instant::now();
    match runner::cmd_iterate(&cfg, None, true) {
        Ok(out) => emit(invariants::headline(
            &out.run,
            &cfg.iteration,
            start.elapsed().as_secs_f64(),
        )),
        Err(e) => println!("[FAIL] 11 headline_convergence: {e}"),
    }

    emit(invariants::front_speed_consistency(&study));

    let passed = rows.iter().filter(|r| r.passed).count();
    println!("acceptance: {passed}/12 criteria passed");
    let strict = std::env::var("CVS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < 12 {
        std::process::exit(1);
    }
}
