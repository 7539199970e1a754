use std::fs;
use std::path::PathBuf;

use snapchain::critical_rate::{extension_start, first_snapper, rate_table, NumericOptions};
use snapchain::dynamics::{integrate, ChainState, Direction, IntegrateOptions, RateSchedule, Segment, StopCondition};
use snapchain::io::{load_config, write_time_series_csv};
use snapchain::planner::{build_graph, parse_sequence, plan_schedule, PlannerOptions};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn csv_of(schedule: &RateSchedule) -> Vec<u8> {
    let rc = load_config(config("chain4.json")).unwrap();
    let start = ChainState::at_rest(&rc.chain);
    let tr = integrate(&rc.chain, &start, schedule, &rc.integrate_options()).unwrap();
    let mut out = Vec::new();
    write_time_series_csv(&mut out, rc.chain.len(), &tr).unwrap();
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let schedule = RateSchedule::new(vec![
        Segment::new(30.0, StopCondition::Length { target: 24.0 }),
        Segment::new(
            0.0,
            StopCondition::Settled {
                threshold: 1e-4,
                timeout: 50.0,
            },
        ),
        Segment::new(-5.0, StopCondition::Length { target: 2.0 }),
    ]);
    let a = csv_of(&schedule);
    assert!(a.len() > 1000);
    assert_eq!(a, csv_of(&schedule));
}

#[test]
fn example_pair_has_expected_critical_rate() {
    let rc = load_config(config("pair.json")).unwrap();
    let rows = rate_table(&rc.chain, &NumericOptions::default()).unwrap();
    for row in &rows {
        for v in [row.extend, row.contract] {
            let v = v.unwrap();
            assert!((v - 13.0).abs() < 0.01, "{} gave {v}", row.method);
        }
    }
}

#[test]
fn rate_selects_first_snapper() {
    let rc = load_config(config("pair.json")).unwrap();
    let start = extension_start(&rc.chain).unwrap();
    let opts = IntegrateOptions::without_samples();
    assert_eq!(
        first_snapper(&rc.chain, &start, Direction::Extend, 5.0, &opts).unwrap(),
        Some(1)
    );
    assert_eq!(
        first_snapper(&rc.chain, &start, Direction::Extend, 30.0, &opts).unwrap(),
        Some(2)
    );
}

#[test]
fn pair_plan_through_all_binary_states() {
    let rc = load_config(config("pair.json")).unwrap();
    let seq = parse_sequence("00,10,11,01,00").unwrap();
    let plan = plan_schedule(&rc.chain, &seq, None, &PlannerOptions::default()).unwrap();
    assert!(plan.success, "mismatch at {:?}", plan.mismatch_at);
    assert_eq!(plan.realized, seq);
    assert_eq!(plan.hops.len(), 4);
}

#[test]
fn graph_has_expected_shape() {
    let rc = load_config(config("chain4.json")).unwrap();
    let g = build_graph(&rc.chain, false);
    assert_eq!(g.nodes.len(), 16);
    assert_eq!(g.edges.len(), 16 * 4);
}

#[test]
fn element_files_and_units_are_resolved() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("soft.json"),
        r#"{"kind": "trilinear", "eps_max": 0.004, "f_max": 1.9, "eps_min": 0.007, "f_min": 0.6, "k1": 475}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("run.json"),
        r#"{
            "units": {"length": "m", "damping": "N*s/m"},
            "chain": {"c": 15, "elements": [
                {"file": "soft.json"},
                {"kind": "trilinear", "eps_max": 0.004, "f_max": 2.0, "eps_min": 0.007, "f_min": 0.5, "k1": 500}
            ]}
        }"#,
    )
    .unwrap();
    let rc = load_config(dir.path().join("run.json")).unwrap();
    assert!((rc.chain.c() - 0.015).abs() < 1e-15);
    let cp = rc.chain.element(0).critical_points();
    assert!((cp.eps_max - 4.0).abs() < 1e-12 && (cp.eps_min - 7.0).abs() < 1e-12);
    let (_, _, k1) = rc.chain.element(0).trilinear_stiffnesses().unwrap();
    assert!((k1 - 0.475).abs() < 1e-12);
}
