use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn nodecert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodecert")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, body: Value) -> String {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        p.to_str().unwrap().to_string()
    }

    fn out(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str], out: &str) -> Output {
        let mut all = args.to_vec();
        all.extend(["--out", out]);
        let o = nodecert(&all);
        eprintln!("{}", String::from_utf8_lossy(&o.stdout));
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
        o
    }
}

fn small(a: Value) -> Value {
    json!({
        "plant": { "model": { "kind": "linear", "a": a } },
        "dataset": { "train_samples": 200, "validation_samples": 200 },
        "training": { "hidden": [3], "epochs": 200 },
        "synthesis": { "s_low_per_decade": 2, "kappa_per_decade": 1, "refine_iterations": 4 },
        "simulation": { "horizon": 10, "step": 0.01, "initial_conditions": [[0.5, -0.5]], "random_starts": 3 }
    })
}

fn stable() -> Value {
    small(json!([[-1, 0.5], [-0.5, -2]]))
}

/// Saddle, controllable through the second state.
fn saddle() -> Value {
    small(json!([[0, 1], [1, 0]]))
}

fn error_code(dir: &str) -> i64 {
    read_json(&Path::new(dir).join("error.json"))["code"].as_i64().unwrap()
}

#[test]
fn certify_stable_linear_toy_exits_0() {
    let w = Work::new();
    let cfg = w.config("c.json", stable());
    let out = w.out("o");
    let o = w.run(&["certify", "--config", &cfg], &out);
    assert_eq!(code(&o), 0);
    let cert = read_json(&w.path("o/certificate.json"));
    assert!(cert["gamma"].as_f64().unwrap() > 0.0);
    let report = read_json(&w.path("o/report.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["stages"]["certification"]["status"], "certified");
    for s in ["synthesis", "simulation", "verification"] {
        assert_eq!(report["stages"][s]["status"], "skipped", "{s}");
    }
    assert!(w.path("o/timing.json").exists());
    assert!(!w.path("o/error.json").exists());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&nodecert(&["frobnicate"])), 1);
    assert_eq!(code(&nodecert(&["repro", "ex3"])), 1);
    assert_eq!(code(&nodecert(&["certify", "--no-such-flag"])), 1);
    assert_eq!(code(&nodecert(&["--help"])), 0);
}

#[test]
fn invalid_config_exits_2() {
    let w = Work::new();
    let out = w.out("o");
    let cfg = w.config("c.json", json!({ "training": { "epoch": 10 } }));
    assert_eq!(code(&w.run(&["certify", "--config", &cfg], &out)), 2);
    assert_eq!(error_code(&out), 2);
    let cfg = w.config("v.json", json!({ "plant": { "model": { "kind": "vehicle", "kappa": 2.0 } } }));
    assert_eq!(code(&w.run(&["gen-data", "--config", &cfg], &out)), 2);
}

#[test]
fn missing_or_malformed_files_exit_3() {
    let w = Work::new();
    let out = w.out("o");
    let missing = w.out("nope.json");
    assert_eq!(code(&w.run(&["bounds", "--model", &missing], &out)), 3);
    assert_eq!(error_code(&out), 3);
    assert_eq!(code(&w.run(&["certify", "--config", &missing], &out)), 3);
    let junk = w.config("junk.json", json!({ "state_dim": 2 }));
    assert_eq!(code(&w.run(&["certify", "--model", &junk], &out)), 3);
}

#[test]
fn diverging_training_exits_4() {
    let w = Work::new();
    let mut cfg = stable();
    cfg["training"] = json!({ "hidden": [3], "epochs": 50, "optimizer": "momentum", "schedule": "constant", "step_size": 1e6 });
    let cfg = w.config("c.json", cfg);
    let out = w.out("o");
    assert_eq!(code(&w.run(&["train", "--config", &cfg], &out)), 4);
    assert_eq!(error_code(&out), 4);
    assert_eq!(read_json(&w.path("o/report.json"))["error"]["stage"], "training");
}

#[test]
fn invalid_sector_bounds_exit_5() {
    let w = Work::new();
    let mut cfg = stable();
    cfg["sector"] = json!({ "layer_scalars": [[1.0, 0.5]] });
    let c1 = w.config("c1.json", cfg.clone());
    let out = w.out("o");
    assert_eq!(code(&w.run(&["bounds", "--config", &c1], &out)), 5);
    cfg["sector"] = json!({ "layer_scalars": [[0.5, 1.0], [0.5, 1.0]] });
    let c2 = w.config("c2.json", cfg);
    assert_eq!(code(&w.run(&["certify", "--config", &c2], &out)), 5);
    assert_eq!(error_code(&out), 5);
}

#[test]
fn infeasible_certificate_exits_6() {
    let w = Work::new();
    let cfg = w.config("c.json", saddle());
    let out = w.out("o");
    assert_eq!(code(&w.run(&["certify", "--config", &cfg], &out)), 6);
    assert_eq!(read_json(&w.path("o/certification.json"))["status"], "infeasible");
    assert_eq!(error_code(&out), 6);
    assert!(!w.path("o/certificate.json").exists());
}

#[test]
fn infeasible_synthesis_exits_7() {
    let w = Work::new();
    // unstable and unactuated first state
    let cfg = w.config("c.json", small(json!([[1, 0], [0, -1]])));
    let out = w.out("o");
    assert_eq!(code(&w.run(&["synthesize", "--config", &cfg], &out)), 7);
    assert_eq!(error_code(&out), 7);
    assert!(w.path("o/synthesis_sweep.json").exists());
}

#[test]
fn diverging_simulation_exits_8() {
    let w = Work::new();
    let cfg = w.config("c.json", saddle());
    let out = w.out("o");
    assert_eq!(code(&w.run(&["synthesize", "--config", &cfg], &out)), 0);
    let mut ctrl = read_json(&w.path("o/controller.json"));
    ctrl["H"] = json!([[0.0, 1000.0]]);
    let bad = w.config("bad.json", ctrl);
    let model = w.out("o/model.json");
    let out2 = w.out("o2");
    assert_eq!(code(&w.run(&["simulate", "--config", &cfg, "--model", &model, "--controller", &bad], &out2)), 8);
    assert_eq!(error_code(&out2), 8);
}

#[test]
fn failed_verification_exits_9() {
    let w = Work::new();
    let cfg = w.config("c.json", stable());
    let out = w.out("o");
    assert_eq!(code(&w.run(&["certify", "--config", &cfg], &out)), 0);
    let model = w.out("o/model.json");
    let good = w.out("o/certificate.json");
    let out2 = w.out("o2");
    assert_eq!(code(&w.run(&["verify", "--config", &cfg, "--model", &model, "--certificate", &good], &out2)), 0);
    assert_eq!(read_json(&w.path("o2/verification.json"))["pass"], true);

    let mut cert = read_json(&w.path("o/certificate.json"));
    cert["gamma"] = json!(cert["gamma"].as_f64().unwrap() * 100.0);
    let bad = w.config("bad.json", cert);
    assert_eq!(code(&w.run(&["verify", "--config", &cfg, "--model", &model, "--certificate", &bad], &out2)), 9);
    assert_eq!(read_json(&w.path("o2/verification.json"))["pass"], false);
    assert_eq!(error_code(&out2), 9);
}

#[test]
fn stages_chain_through_files() {
    let w = Work::new();
    let cfg = w.config("c.json", saddle());
    let out = w.out("o");
    assert_eq!(code(&w.run(&["gen-data", "--config", &cfg], &out)), 0);
    let data = w.out("o/data.json");
    assert_eq!(code(&w.run(&["train", "--config", &cfg, "--data", &data], &out)), 0);
    assert_eq!(read_json(&w.path("o/report.json"))["stages"]["data"]["source"], "file");
    let model = w.out("o/model.json");
    assert_eq!(code(&w.run(&["bounds", "--config", &cfg, "--model", &model], &out)), 0);
    let bounds = w.out("o/bounds.json");
    assert_eq!(code(&w.run(&["synthesize", "--config", &cfg, "--model", &model, "--bounds", &bounds], &out)), 0);
    let ctrl = w.out("o/controller.json");
    let sim = ["simulate", "--config", &cfg, "--model", &model, "--controller", &ctrl];
    assert_eq!(code(&w.run(&sim, &out)), 0);
    let sim_json = read_json(&w.path("o/simulation.json"));
    assert_eq!(sim_json["trajectories"].as_array().unwrap().len(), 4);
    for i in 1..=4 {
        let csv = fs::read_to_string(w.path(&format!("o/traj_{i}.csv"))).unwrap();
        assert!(csv.starts_with("t,x1,x2,u1\n"));
        assert_eq!(csv.lines().count(), 1 + 1001);
    }
    let verify = ["verify", "--config", &cfg, "--model", &model, "--bounds", &bounds, "--controller", &ctrl];
    assert_eq!(code(&w.run(&verify, &out)), 0);
    assert_eq!(read_json(&w.path("o/verification.json"))["artifact"], "controller");

    fs::remove_file(w.path("o/figure.svg")).unwrap();
    let sim_path = w.out("o/simulation.json");
    assert_eq!(code(&w.run(&["plot", "--simulation", &sim_path], &out)), 0);
    let svg = fs::read_to_string(w.path("o/figure.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
    assert_eq!(svg.matches(r#"class="trajectory""#).count(), 8);
    assert_eq!(svg.matches(r#"class="envelope""#).count(), 4);
}

#[test]
fn run_synthesizes_when_certification_fails() {
    let w = Work::new();
    let cfg = w.config("c.json", saddle());
    let out = w.out("o");
    assert_eq!(code(&w.run(&["run", "--config", &cfg], &out)), 0);
    let report = read_json(&w.path("o/report.json"));
    assert_eq!(report["stages"]["certification"]["status"], "infeasible");
    assert_eq!(report["stages"]["synthesis"]["source"], "synthesized");
    assert_eq!(report["checks"]["envelope"]["pass"], true);
    assert_eq!(report["checks"]["controller_verified"]["pass"], true);
    for f in ["data.json", "validation.json", "model.json", "bounds.json", "certification.json", "controller.json",
              "simulation.json", "verification.json", "figure.svg", "report.txt"] {
        assert!(w.path(&format!("o/{f}")).exists(), "{f}");
    }
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let w = Work::new();
    let cfg = w.config("c.json", saddle());
    let (a, b, c) = (w.out("a"), w.out("b"), w.out("c"));
    assert_eq!(code(&w.run(&["run", "--config", &cfg, "--seed", "7"], &a)), 0);
    assert_eq!(code(&w.run(&["run", "--config", &cfg, "--seed", "7"], &b)), 0);
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.contains(&"report.json".to_string()));
    for n in names.iter().filter(|n| *n != "timing.json") {
        let (x, y) = (fs::read(Path::new(&a).join(n)).unwrap(), fs::read(Path::new(&b).join(n)).unwrap());
        assert!(x == y, "{n} differs between runs");
    }
    assert_eq!(code(&w.run(&["gen-data", "--config", &cfg, "--seed", "8"], &c)), 0);
    assert_ne!(fs::read(Path::new(&a).join("data.json")).unwrap(), fs::read(Path::new(&c).join("data.json")).unwrap());
}

#[test]
fn schema_command_prints_the_schema() {
    let o = nodecert(&["schema"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["additionalProperties"], false);
}

#[test]
fn repro_ex1() {
    let w = Work::new();
    let out = w.out("o");
    assert_eq!(code(&w.run(&["repro", "ex1"], &out)), 0);
    let report = read_json(&w.path("o/report.json"));
    assert_eq!(report["pass"], true);
    let values = &report["values"];
    assert!(values["radius"]["computed"].as_f64().unwrap() <= 0.05);
    assert_eq!(values["radius"]["printed"], 0.0239);
    assert_eq!(values["mu"]["printed"], 0.61168);
    assert!(values["gamma"]["computed"].as_f64().unwrap() > 0.0);
    assert_eq!(values["H"]["printed"], json!([[0.2808, -5.233]]));
    let derived = values["H"]["derived"][0].as_array().unwrap();
    assert!((derived[0].as_f64().unwrap() - 0.2808).abs() < 5e-4);
    assert!(values["printed_point_plugin_lambda_max"]["derived"]["coefficient_alpha"].as_f64().unwrap() <= 1e-2);
    assert_eq!(report["checks"]["closed_loop_convergence"]["pass"], true);
    assert_eq!(report["stages"]["training"]["source"], "fixture");
    let svg = fs::read_to_string(w.path("o/figure.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
    assert_eq!(svg.matches(r#"class="trajectory""#).count(), 8);
}

#[test]
fn repro_ex2() {
    let w = Work::new();
    let out = w.out("o");
    let o = w.run(&["repro", "ex2"], &out);
    let report = read_json(&w.path("o/report.json"));
    assert_eq!(report["checks"]["synthesis_feasible"]["pass"], true);
    assert_eq!(report["checks"]["closed_loop_convergence"]["pass"], true);
    assert_eq!(report["stages"]["synthesis"]["form"], "two_layer");
    assert_eq!(report["checks"]["mu_vanishing"]["pass"], true, "{}", report["checks"]["mu_vanishing"]["detail"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn repro_retrain_trains_a_fresh_model() {
    let w = Work::new();
    let cfg = w.config(
        "c.json",
        json!({ "dataset": { "train_samples": 300, "validation_samples": 300 }, "training": { "epochs": 20 } }),
    );
    let out = w.out("o");
    let o = w.run(&["repro", "ex1", "--retrain", "--config", &cfg], &out);
    let report = read_json(&w.path("o/report.json"));
    assert_eq!(report["stages"]["training"]["source"], "trained");
    assert_eq!(report["stages"]["training"]["dims"], json!([2, 5, 2]));
    // 20 epochs cannot reach the residual target
    assert_eq!(report["checks"]["validation_residual"]["pass"], false);
    assert!(report["checks"].get("radius").is_none());
    assert!([7, 8, 9].contains(&code(&o)));
}
