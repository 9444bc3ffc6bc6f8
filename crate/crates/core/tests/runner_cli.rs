use std::path::PathBuf;

use cvs_core::nash_moser::IterationConfig;
use cvs_core::runner::{self, fit_metrics, MetricTable, RunConfig, SCENARIOS};

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("cvs-mhd-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

#[test]
fn config_round_trip_is_identity() {
    for name in SCENARIOS {
        let c = RunConfig::scenario(name).unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, back, "{name}");
    }
    let mut c = RunConfig::default();
    c.scenario = None;
    c.gamma = 5.0 / 3.0;
    c.time.cfl = 0.1 + 0.2;
    c.iteration.s_list = vec![1, 3, 4];
    let back = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(c, back);
}

#[test]
fn overrides_apply_on_top_of_scenario() {
    let c = RunConfig::parse("scenario = planar\n# comment\ngrid.n1 = 20  # trailing\n").unwrap();
    assert_eq!(c.grid.n1, 20);
    assert_eq!(c.grid.n2, 16);
    assert_eq!(c.perturbation.amplitude, 0.0);
}

#[test]
fn rejects_unknown_and_malformed_keys() {
    let e = RunConfig::parse("grid.nx = 3").unwrap_err().to_string();
    assert!(e.contains("unknown key"), "{e}");
    assert!(RunConfig::parse("grid.n1 3").is_err());
    assert!(RunConfig::parse("grid.n1 = three").is_err());
    assert!(RunConfig::parse("grid.n1 = 3\ngrid.n1 = 4").is_err());
    assert!(RunConfig::parse("scenario = nope").is_err());
}

#[test]
fn rejects_subunit_gamma() {
    let e = RunConfig::parse("eos.gamma = 0.9").unwrap_err().to_string();
    assert!(e.contains("must exceed 1"), "{e}");
}

#[test]
fn rejects_parallel_tangential_fields() {
    // antiparallel to the plus field, same total pressure
    let text = "background.minus = 1, 0, -0.2, 0.1, 0, -1, 0, 0\n";
    let e = RunConfig::parse(text).unwrap_err().to_string();
    assert!(e.contains("nonparallel tangential field"), "{e}");
}

#[test]
fn rejects_non_contact_background() {
    let text = "background.plus = 1, 0.1, 0.2, 0, 0, 1, 0, 0\n";
    let e = RunConfig::parse(text).unwrap_err().to_string();
    assert!(e.contains("normal velocity"), "{e}");
    let text = "background.plus = 1.5, 0, 0.2, 0, 0, 1, 0, 0\n";
    let e = RunConfig::parse(text).unwrap_err().to_string();
    assert!(e.contains("pressure"), "{e}");
}

fn small_config() -> RunConfig {
    RunConfig::parse(
        "scenario = perturbed-2d\ngrid.n1 = 16\ngrid.n2 = 8\ntime.t_final = 0.1\niteration.n_max = 3\n",
    )
    .unwrap()
}

#[test]
fn iterate_is_deterministic() {
    let cfg = small_config();
    let (d1, d2) = (tmpdir("det1"), tmpdir("det2"));
    let a = runner::cmd_iterate(&cfg, Some(&d1), true).unwrap();
    let b = runner::cmd_iterate(&cfg, Some(&d2), true).unwrap();
    assert_eq!(a.records.len(), 3);
    assert_eq!(a.records.iter().map(|r| &r.columns).collect::<Vec<_>>(), b.records.iter().map(|r| &r.columns).collect::<Vec<_>>());
    for f in ["metrics.csv", "summary.json", "residual_vs_theta.dat", "increment_vs_theta.dat"] {
        let x = std::fs::read(d1.join(f)).unwrap();
        let y = std::fs::read(d2.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    assert!(d1.join("timing.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 3);
    assert_eq!(summary["references"][0]["increment"], -7.0);

    // report on the written metrics reproduces the summary fits
    let fits = runner::cmd_report(&[d1.join("metrics.csv")], &cfg, Some(&d1)).unwrap();
    assert!(!fits[0].1.is_empty());
    assert!(d1.join("report.csv").exists());
    let _ = std::fs::remove_dir_all(&d1);
    let _ = std::fs::remove_dir_all(&d2);
}

#[test]
fn planar_background_stays_planar() {
    let mut cfg = RunConfig::scenario("planar").unwrap();
    cfg.grid.n1 = 16;
    cfg.grid.n2 = 8;
    cfg.time.t_final = 0.1;
    cfg.iteration.n_max = 2;
    let out = runner::cmd_iterate(&cfg, None, true).unwrap();
    for r in &out.records {
        for (k, v) in &r.columns {
            if k.starts_with("dv_") || k.starts_with("residual_") {
                assert!(v.abs() < 1e-10, "{k} = {v}");
            }
        }
    }
}

fn synthetic_table(rows: usize) -> String {
    // dv = 3 theta^-5 Delta, residual = 2 theta^-2
    let mut s = String::from("n,theta,delta,dv_s4,residual_s4,modified_gap_s2\n");
    let theta0: f64 = 4.0;
    for n in 0..rows {
        let th = (theta0 * theta0 + n as f64).sqrt();
        let d = (theta0 * theta0 + n as f64 + 1.0).sqrt() - th;
        let _ = std::fmt::Write::write_fmt(
            &mut s,
            format_args!(
                "{n},{th:e},{d:e},{:e},{:e},{:e}\n",
                3.0 * th.powf(-5.0) * d,
                2.0 * th.powf(-2.0),
                0.5 * th.powf(-3.5)
            ),
        );
    }
    s
}

#[test]
fn report_recovers_synthetic_power_laws() {
    let t = MetricTable::parse(&synthetic_table(10)).unwrap();
    let fits = fit_metrics(&t, &IterationConfig::default()).unwrap();
    let get = |q: &str| fits.iter().find(|f| f.quantity == q).unwrap().slope;
    assert!((get("dv") + 5.0).abs() < 1e-6);
    assert!((get("residual") + 2.0).abs() < 1e-6);
    assert!((get("modified_gap") + 3.5).abs() < 1e-6);
}

#[test]
fn report_refuses_single_row() {
    let t = MetricTable::parse(&synthetic_table(1)).unwrap();
    let e = fit_metrics(&t, &IterationConfig::default()).unwrap_err().to_string();
    assert!(e.contains("at least two"), "{e}");
}

#[test]
fn report_rejects_malformed_table() {
    assert!(MetricTable::parse("a,b\n1,2\n").is_err());
    assert!(MetricTable::parse("n,theta,delta\n0,1\n").is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let full = RunConfig::from_file(&dir.join("perturbed-2d.cfg")).unwrap();
    let mut base = RunConfig::scenario("perturbed-2d").unwrap();
    base.output.directory = "out/perturbed-2d".into();
    assert_eq!(full, base);
    RunConfig::from_file(&dir.join("planar-small.cfg")).unwrap();
}
