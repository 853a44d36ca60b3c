//! Command-level integration tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rfqmm")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rfqmm-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run_ok(args: &[&str], out: &Path) {
    let status = Command::new(bin())
        .args(args)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success(), "command failed: {args:?}");
}

#[test]
fn validate_bundled_scenarios() {
    for scenario in ["baseline", "two-tier", "two-bond", "asym-toy"] {
        let out = Command::new(bin())
            .args(["validate", "--scenario", scenario])
            .output()
            .unwrap();
        assert!(out.status.success(), "{scenario} should validate");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("scenario ok"), "{text}");
    }
}

#[test]
fn sweep_csv_has_one_data_row_per_value() {
    let dir = tmp("sweep");
    run_ok(
        &[
            "sweep",
            "--scenario",
            "baseline",
            "--axis",
            "kappa",
            "--values",
            "0.1,1",
        ],
        &dir,
    );
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + 2 data rows: {csv}");
    assert!(lines[0].starts_with("axis_value,expected_hit_ratio_clients,objective,pnl,inv_penalty,hr_penalty,terminal_penalty,solve_mode,wall_time_s"));
    assert!(lines[1].starts_with("0.100000000,"));
    assert!(lines[2].starts_with("1.000000000,"));
    assert!(lines[1].contains(",exact,"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn solve_begv_exports_paths_and_stationary_objects() {
    let dir = tmp("begv");
    run_ok(&["solve-begv", "--scenario", "asym-toy"], &dir);
    let csv = std::fs::read_to_string(dir.join("begv_paths.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 202, "header + 201 time nodes");
    assert_eq!(lines[0], "t,a_11,b_1,xi0_clients");
    // B(T) = 0 at the last node, nonzero away from it
    let last: Vec<&str> = lines[201].split(',').collect();
    assert_eq!(last[2], "0.000000000");
    let first: Vec<&str> = lines[1].split(',').collect();
    assert!(first[2].parse::<f64>().unwrap() > 0.0);

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("begv_stationary.json")).unwrap())
            .unwrap();
    assert!(json["a_stationary"][0][0].as_f64().unwrap() > 0.0);
    assert!(json["b_stationary"][0].as_f64().unwrap() > 0.0);
    assert!(
        json["h12"][0][0].as_f64().unwrap() > 0.0,
        "bid-heavy flow gives h12 > 0"
    );
    assert!(
        json["d_corrected"][0][0].as_f64().unwrap() < json["d_diagonal"][0].as_f64().unwrap(),
        "targeted-tier correction lowers the curvature matrix"
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn solve_exact_exports_value_and_policy() {
    let dir = tmp("exact");
    run_ok(
        &["solve-exact", "--scenario", "baseline", "--dt", "0.0002"],
        &dir,
    );
    let policy = std::fs::read_to_string(dir.join("policy.csv")).unwrap();
    let lines: Vec<&str> = policy.lines().collect();
    assert_eq!(
        lines[0],
        "t,q1_m,tier,bond,side,size_m,offset_bp,fill_prob,xi"
    );
    // interior states carry all six rungs; boundary states lose the exiting side
    assert!(lines.len() > 201 * 4);
    let value = std::fs::read_to_string(dir.join("value.csv")).unwrap();
    assert!(value.lines().count() > 201, "at least one full value slice");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve-exact");
    assert_eq!(manifest["outputs"][0], "value.csv");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn quotes_linearized_components_sum_to_totals() {
    let dir = tmp("linearized");
    run_ok(
        &[
            "quotes",
            "--scenario",
            "baseline",
            "--mode",
            "linearized",
            "--q",
            "0",
        ],
        &dir,
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("quotes.json")).unwrap()).unwrap();
    assert_eq!(json["mode"], "linearized");
    let quotes = json["quotes"].as_array().unwrap();
    assert_eq!(quotes.len(), 6);
    for quote in quotes {
        let total = quote["offset_bp"].as_f64().unwrap();
        let sum = quote["riskless"].as_f64().unwrap()
            + quote["inventory_correction"].as_f64().unwrap()
            - quote["hit_ratio_correction"].as_f64().unwrap();
        assert!(
            (total - sum).abs() < 1e-12,
            "decomposition mismatch: {total} vs {sum}"
        );
        assert!(
            quote["hit_ratio_correction"].as_f64().unwrap() > 0.0,
            "targeted tier gets a subsidy here"
        );
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn quotes_two_bond_json_query_off_axis() {
    let dir = tmp("twobond");
    run_ok(
        &[
            "quotes",
            "--scenario",
            "two-bond",
            "--mode",
            "begv_exact_map_xi_q",
            "--q",
            "20,0",
        ],
        &dir,
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("quotes.json")).unwrap()).unwrap();
    assert_eq!(json["q_m"][0], 20.0);
    assert_eq!(json["q_m"][1], 0.0);
    // background long inventory lowers targeted-bond asks vs flat
    let dir2 = tmp("twobond-flat");
    run_ok(
        &[
            "quotes",
            "--scenario",
            "two-bond",
            "--mode",
            "begv_exact_map_xi_q",
            "--q",
            "0,0",
        ],
        &dir2,
    );
    let flat: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir2.join("quotes.json")).unwrap()).unwrap();
    let ask_of = |doc: &serde_json::Value| -> f64 {
        doc["quotes"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["bond"] == "TGT" && r["side"] == "ask" && r["size_m"] == 1.0)
            .unwrap()["offset_bp"]
            .as_f64()
            .unwrap()
    };
    assert!(ask_of(&json) < ask_of(&flat));
    let _ = std::fs::remove_dir_all(&dir);
    let _ = std::fs::remove_dir_all(&dir2);
}

#[test]
fn numerical_failure_exits_3() {
    // an unstable explicit Euler step aborts the solve
    let out = Command::new(bin())
        .args([
            "solve-exact",
            "--scenario",
            "baseline",
            "--dt",
            "0.05",
            "--out",
        ])
        .arg(tmp("unstable"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["code"], 3);
    assert_eq!(err["module"], "hjb_exact");
}

#[test]
fn forward_kpi_json_is_consistent() {
    let dir = tmp("fwd");
    run_ok(
        &[
            "forward",
            "--scenario",
            "two-tier",
            "--mode",
            "begv_exact_map_xi_q",
        ],
        &dir,
    );
    let kpi: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("kpi.json")).unwrap()).unwrap();
    let objective = kpi["objective"].as_f64().unwrap();
    let sum = kpi["pnl"].as_f64().unwrap()
        - kpi["inventory_penalty"].as_f64().unwrap()
        - kpi["hit_ratio_penalty"].as_f64().unwrap()
        - kpi["terminal_penalty"].as_f64().unwrap();
    assert_eq!(objective, sum);
    // law rows renormalize to ~1 at the final time
    let law = std::fs::read_to_string(dir.join("law.csv")).unwrap();
    let mut final_t = String::new();
    let mut mass = 0.0;
    for line in law.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[0] != final_t {
            final_t = cols[0].to_string();
            mass = 0.0;
        }
        mass += cols[2].parse::<f64>().unwrap();
    }
    assert!((mass - 1.0).abs() < 1e-6, "final-slice mass {mass}");
    let _ = std::fs::remove_dir_all(&dir);
}
