//! End-to-end checks of the command-line surface: generate, train, evaluate,
//! baseline, render, verify. Uses throwaway desk-scale configurations.

use std::path::Path;
use std::process::Command;

fn hrmesh() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hrmesh"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn hrmesh");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "command failed\nstdout: {stdout}\nstderr: {stderr}");
    stdout
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    // gen
    run_ok(hrmesh().args([
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--train-count",
        "2",
        "--eval-count",
        "2",
        "--ref-depth",
        "2",
        "--seed",
        "5",
    ]));
    assert!(data.join("dataset.json").exists());
    assert!(data.join("train_000.mesh.txt").exists());
    assert!(data.join("eval_001.ref.txt").exists());

    // Regenerating into a second directory gives identical bytes.
    let data2 = tmp.path().join("data2");
    run_ok(hrmesh().args([
        "gen",
        "--out",
        data2.to_str().unwrap(),
        "--train-count",
        "2",
        "--eval-count",
        "2",
        "--ref-depth",
        "2",
        "--seed",
        "5",
    ]));
    for name in ["train_000.mesh.txt", "train_001.instance.json", "eval_000.ref.txt"] {
        assert_eq!(
            std::fs::read(data.join(name)).unwrap(),
            std::fs::read(data2.join(name)).unwrap(),
            "{name} not reproducible"
        );
    }

    // train (tiny)
    run_ok(hrmesh().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--iterations",
        "1",
        "--phase1-iters",
        "1",
        "--transitions",
        "6",
        "--ref-depth",
        "2",
        "--seed",
        "3",
    ]));
    let checkpoint = run.join("checkpoint_final.json");
    assert!(checkpoint.exists());
    assert!(run.join("metrics.csv").exists());

    // eval
    let pareto = tmp.path().join("pareto.csv");
    run_ok(hrmesh().args([
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pareto.to_str().unwrap(),
        "--ref-depth",
        "2",
        "--alpha-sweep",
        "3",
        "--no-time",
    ]));
    let text = std::fs::read_to_string(&pareto).unwrap();
    assert!(text.starts_with("method,alpha_or_theta,elements,err_rel,time_s,displacement"));
    assert_eq!(text.lines().count(), 1 + 2 * 3); // 2 eval instances x 3 alphas
    assert!(tmp.path().join("pareto_agg.csv").exists());
    assert!(tmp.path().join("pareto.jsonl").exists());

    // eval is byte-reproducible with --no-time
    let pareto2 = tmp.path().join("pareto2.csv");
    run_ok(hrmesh().args([
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pareto2.to_str().unwrap(),
        "--ref-depth",
        "2",
        "--alpha-sweep",
        "3",
        "--no-time",
    ]));
    assert_eq!(std::fs::read(&pareto).unwrap(), std::fs::read(&pareto2).unwrap());

    // baseline
    let base = tmp.path().join("baseline.csv");
    run_ok(hrmesh().args([
        "baseline",
        "--data",
        data.to_str().unwrap(),
        "--out",
        base.to_str().unwrap(),
        "--kind",
        "uniform",
        "--ref-depth",
        "2",
        "--horizon",
        "2",
        "--no-time",
    ]));
    let text = std::fs::read_to_string(&base).unwrap();
    assert!(text.lines().count() > 1);
    assert!(text.lines().nth(1).unwrap().starts_with("uniform,"));

    // render
    let svg = tmp.path().join("mesh.svg");
    run_ok(hrmesh().args([
        "render",
        "--mesh",
        data.join("train_000.mesh.txt").to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
    ]));
    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.contains("<svg"));
    assert!(svg_text.contains("<polygon"));
}

#[test]
fn verify_subcommand_passes() {
    let out = run_ok(hrmesh().args(["verify", "--sweeps", "8"]));
    assert!(out.contains("PASS rgb-conformity"));
    assert!(out.contains("0 failed"));
}

#[test]
fn missing_files_give_machine_readable_errors() {
    let out = hrmesh()
        .args(["eval", "--checkpoint", "/nonexistent.json", "--data", "/nonexistent", "--out", "/tmp/x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with("error: ")).expect("error line");
    let v: serde_json::Value =
        serde_json::from_str(line.strip_prefix("error: ").unwrap()).expect("json error payload");
    assert!(v["message"].is_string());
}

#[test]
fn render_quality_and_field_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let mesh = hrmesh::mesh::generate_domain(&hrmesh::mesh::DomainKind::UnitSquare, 8, 0).unwrap();
    let mesh_path = tmp.path().join("m.txt");
    mesh.save(&mesh_path).unwrap();
    let field = hrmesh::fem::Field {
        values: mesh.coords.iter().map(|p| p[0] * p[1]).collect(),
    };
    let field_path = tmp.path().join("f.txt");
    std::fs::write(&field_path, field.to_text()).unwrap();
    let svg = tmp.path().join("out.svg");
    run_ok(hrmesh().args([
        "render",
        "--mesh",
        mesh_path.to_str().unwrap(),
        "--field",
        field_path.to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
    ]));
    assert!(Path::new(&svg).exists());
    run_ok(hrmesh().args([
        "render",
        "--mesh",
        mesh_path.to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
        "--quality",
    ]));
}
