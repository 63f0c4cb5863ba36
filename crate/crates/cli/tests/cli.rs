use std::path::Path;
use std::process::{Command, Output};

fn gsray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsray")).args(args).env_remove("GSRAY_THREADS").output().expect("spawn gsray")
}

fn gsray_threads(threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsray")).args(args).env("GSRAY_THREADS", threads).output().expect("spawn gsray")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small scene plus two 24x24 cameras in `dir`.
fn fixture(dir: &Path, seed: &str) -> (String, String) {
    let scene = dir.join(format!("scene{seed}.gsx"));
    let cams = dir.join("cams.json");
    ok(&gsray(&[
        "gen", "--kind", "shell", "--count", "80", "--anisotropy", "3", "--seed", seed, "--out", p(&scene), "--cameras",
        p(&cams), "--views", "2", "--width", "24", "--height", "24", "--focal", "24",
    ]));
    (p(&scene).to_string(), p(&cams).to_string())
}

#[test]
fn help_lists_every_subcommand_and_the_thread_variable() {
    let text = ok(&gsray(&["--help"]));
    for cmd in ["render", "bench", "geom-check", "densify-analyze", "gen", "GSRAY_THREADS", "--seed"] {
        assert!(text.contains(cmd), "--help lacks {cmd}");
    }
    for cmd in ["render", "bench", "geom-check", "densify-analyze", "gen"] {
        let text = ok(&gsray(&[cmd, "--help"]));
        assert!(text.contains("--seed") && text.contains("--threads"), "{cmd} --help");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(gsray(&[]).status.code(), Some(2));
    assert_eq!(gsray(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gsray(&["render", "--scene", "a.gsx"]).status.code(), Some(2));
    assert_eq!(gsray(&["render", "--mode", "sideways", "--scene", "a", "--cameras", "b", "--out", "c"]).status.code(), Some(2));
    assert_eq!(gsray(&["geom-check", "--trials", "lots"]).status.code(), Some(2));
    assert_eq!(gsray_threads("0", &["geom-check", "--trials", "10"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = gsray(&["render", "--scene", "/no/such/scene.gsx", "--cameras", "c.json", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/scene.gsx"));

    let (scene, cams) = fixture(dir.path(), "1");
    let bad = gsray(&["bench", "--scene", &scene, "--cameras", &cams, "--pipelines", "warp"]);
    assert_eq!(bad.status.code(), Some(1));
    let garbage = dir.path().join("garbage.gsx");
    std::fs::write(&garbage, b"not a scene").unwrap();
    assert_eq!(gsray(&["render", "--scene", p(&garbage), "--cameras", &cams, "--out", p(dir.path())]).status.code(), Some(1));
    assert_eq!(gsray(&["gen", "--kind", "torus", "--out", p(&dir.path().join("t.gsx"))]).status.code(), Some(1));
}

#[test]
fn gen_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = fixture(dir.path(), "5");
    let b = dir.path().join("again.gsx");
    ok(&gsray(&["gen", "--kind", "shell", "--count", "80", "--anisotropy", "3", "--seed", "5", "--out", p(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (c, _) = fixture(dir.path(), "6");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn render_writes_images_and_stats_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cams) = fixture(dir.path(), "2");
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    ok(&gsray_threads("1", &["render", "--scene", &scene, "--cameras", &cams, "--out", p(&one), "--mode", "adaptive"]));
    ok(&gsray_threads("4", &["render", "--scene", &scene, "--cameras", &cams, "--out", p(&many), "--mode", "adaptive", "--tile-size", "5"]));
    for view in ["view_0000", "view_0001"] {
        for ext in ["png", "pfm"] {
            let a = std::fs::read(one.join(format!("{view}.{ext}"))).unwrap();
            let b = std::fs::read(many.join(format!("{view}.{ext}"))).unwrap();
            assert_eq!(a, b, "{view}.{ext} depends on threads");
        }
    }
    let png = one.join("view_0000.png");
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(one.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["views"].as_array().unwrap().len(), 2);
    assert_eq!(stats["config"]["mode"], "adaptive");
    assert_eq!(stats["total"]["rays"], 2 * 24 * 24);
    assert!(stats["views"][0]["samples_per_ray"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cams) = fixture(dir.path(), "3");
    let csv_path = dir.path().join("bench.csv");
    let common = ["--scene", &scene, "--cameras", &cams, "--pipelines", "uniform,ess,ess+adaptive", "--runs", "1", "--warmup", "0"];
    let mut args = vec!["bench"];
    args.extend(common);
    args.extend(["--out", p(&csv_path)]);
    ok(&gsray(&args));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("pipeline,rays,samples_per_ray,node_visits_per_ray"));
    assert!(lines[1].starts_with("uniform,") && lines[2].starts_with("ess,") && lines[3].starts_with("ess+adaptive,"));
    // ESS row carries its difference from the plain uniform render.
    assert!(lines[2].ends_with(",0e0"), "{}", lines[2]);

    let mut args = vec!["bench"];
    args.extend(common);
    args.push("--json");
    let json: serde_json::Value = serde_json::from_str(&ok(&gsray(&args))).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let spr = |i: usize| rows[i]["samples_per_ray"].as_f64().unwrap();
    assert!(spr(1) < spr(0));
}

#[test]
fn geom_check_reports_no_violation() {
    let text = ok(&gsray(&["geom-check", "--trials", "20000", "--seed", "7"]));
    let line = text.lines().find(|l| l.starts_with("max_violation:")).unwrap();
    let v: f64 = line.split(':').nth(1).unwrap().trim().parse().unwrap();
    assert!(v <= 0.0, "{line}");
    assert!(text.contains("violations: 0"));
    let again = ok(&gsray(&["geom-check", "--trials", "20000", "--seed", "7"]));
    assert_eq!(text, again);
}

#[test]
fn densify_analyze_against_scene_and_image_references() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cams) = fixture(dir.path(), "4");
    let reference = dir.path().join("ref.gsx");
    ok(&gsray(&["gen", "--kind", "shell", "--count", "80", "--anisotropy", "3", "--seed", "9", "--out", p(&reference)]));
    let ply = dir.path().join("density.ply");
    let csv = ok(&gsray(&[
        "densify-analyze", "--scene", &scene, "--cameras", &cams, "--reference", p(&reference), "--ply-out", p(&ply), "--step", "0.02",
    ]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,observations,mean_grad_norm,mean_weighted_grad_norm,mean_radial_fraction,old,new,neighbors");
    assert_eq!(lines.len(), 81);
    let ply_text = std::fs::read_to_string(&ply).unwrap();
    assert!(ply_text.starts_with("ply\n") && ply_text.contains("element vertex 80"));

    // Rendered views of the scene itself give zero loss gradients.
    let imgs = dir.path().join("imgs");
    ok(&gsray(&["render", "--scene", &scene, "--cameras", &cams, "--out", p(&imgs), "--step", "0.02"]));
    let csv = ok(&gsray(&["densify-analyze", "--scene", &scene, "--cameras", &cams, "--reference", p(&imgs), "--step", "0.02"]));
    assert_eq!(csv.lines().count(), 81);
}
