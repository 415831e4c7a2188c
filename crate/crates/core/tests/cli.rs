use agc_watermark::cli::{main_with_args, EXIT_ALARM, EXIT_CONFIG, EXIT_OK};
use agc_watermark::config::ScenarioFile;
use agc_watermark::sim::Scenario;
use proptest::prelude::*;

fn call(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("agc-watermark").chain(args.iter().copied()))
}

#[test]
fn calibrate_then_run_honest_and_attacked() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("honest.toml");
    std::fs::write(
        &scenario,
        "seed = 4\nduration_steps = 900\ngrid_preset = \"four_area\"\n\
         [detector.calibration]\nmode = \"neyman_pearson\"\ntheta0 = 0.01\nsamples = 5000\n",
    )
    .unwrap();
    let out = dir.path().join("cal");
    let (s, o) = (scenario.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(call(&["calibrate", "--scenario", s, "--out", o]), EXIT_OK);
    assert!(out.join("thresholds.json").exists());
    let calibrated = out.join("calibrated.toml");
    assert!(ScenarioFile::load(&calibrated).unwrap().thresholds.is_some());

    let run_out = dir.path().join("run");
    let code = call(&["run", "--scenario", calibrated.to_str().unwrap(), "--out", run_out.to_str().unwrap()]);
    assert!(code == EXIT_OK || code == EXIT_ALARM);
    for f in ["trace.csv", "blocks.csv", "report.json"] {
        assert!(run_out.join(f).exists(), "{f} missing");
    }
    let trace = std::fs::read_to_string(run_out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 901);

    let mut file = ScenarioFile::load(&calibrated).unwrap();
    file.attack = toml::from_str(
        "kind = \"replay\"\narea = 0\nchannels = \"frequency\"\nrecord_start = 0\nrecord_len = 300\nattack_start = 600\n",
    )
    .unwrap();
    let attacked = dir.path().join("attacked.toml");
    file.save(&attacked).unwrap();
    let code = call(&["run", "--scenario", attacked.to_str().unwrap(), "--out", run_out.to_str().unwrap()]);
    assert_eq!(code, EXIT_ALARM);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nduration_steps = 10\ngrid_preset = \"four_area\"\nunknown = 2\n").unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(call(&["run", "--scenario", bad.to_str().unwrap(), "--out", o]), EXIT_CONFIG);
    assert_eq!(call(&["run", "--scenario", "/nonexistent.toml", "--out", o]), EXIT_CONFIG);
    assert_eq!(call(&["frobnicate"]), EXIT_CONFIG);
}

#[test]
fn calibrate_refuses_attacked_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.toml");
    std::fs::write(
        &path,
        "seed = 1\nduration_steps = 600\ngrid_preset = \"four_area\"\n\
         [attack]\nkind = \"noise_injection\"\narea = 0\nchannels = \"frequency\"\nbound = 1e-4\nattack_start = 300\n",
    )
    .unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(call(&["calibrate", "--scenario", path.to_str().unwrap(), "--out", o]), EXIT_CONFIG);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn scenario_files_round_trip(seed in any::<u64>(), steps in 1usize..100_000, area in 0usize..4, stop in any::<bool>()) {
        let mut s = Scenario::four_area();
        s.seed = seed;
        s.duration_steps = steps;
        s.monitored_area = area;
        s.honor_stop = stop;
        let text = ScenarioFile::from_scenario(&s).to_toml().unwrap();
        prop_assert_eq!(ScenarioFile::parse(&text).unwrap().scenario().unwrap(), s);
    }
}
