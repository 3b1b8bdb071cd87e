use std::process::{Command, Output};

fn shieldlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shieldlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn shield_check_pure() {
    let o = shieldlab(&["shield-check", "pure", "--pi", "0.6,0.4"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "P(safe | stag) = 1.000000\nP(safe | hare) = 0.000000\nP_pi(safe) = 0.600000\npi+ = 1.000000, 0.000000\n"
    );
}

#[test]
fn shield_check_mixed_with_sensors() {
    let o = shieldlab(&[
        "shield-check",
        "mixed",
        "--pi",
        "0.5,0.5",
        "--sensors",
        "0.2,0.1",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("P(safe | stag) = 0.800000"), "{out}");
    assert!(out.contains("P(safe | hare) = 0.900000"), "{out}");
    assert!(out.contains("P_pi(safe) = 0.850000"), "{out}");
}

#[test]
fn shield_check_reads_files() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/shields/cartsafe.pl");
    let o = shieldlab(&[
        "shield-check",
        path,
        "--pi",
        "0.5,0.5",
        "--sensors",
        "1,0.5,0,1",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("P(safe | right) = 0.500000"));
}

#[test]
fn config_errors_exit_2() {
    for args in [
        vec!["shield-check", "no/such/file.pl", "--pi", "0.5,0.5"],
        vec!["shield-check", "pure", "--pi", "0.7,0.7"],
        vec![
            "shield-check",
            "mixed",
            "--pi",
            "0.5,0.5",
            "--sensors",
            "0.1",
        ],
        vec!["run", "--override", "bogus=1"],
        vec!["run", "no_such_preset"],
        vec!["reproduce", "table9"],
    ] {
        let o = shieldlab(&args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn run_writes_artifacts() {
    let out = std::env::temp_dir().join(format!("shieldlab-cli-{}", std::process::id()));
    let o = shieldlab(&[
        "run",
        "centipede_sippo",
        "--out",
        out.to_str().unwrap(),
        "--override",
        "seeds=[0]",
        "episodes=3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("centipede_sippo");
    for f in ["metrics.csv", "summary.txt", "config.toml", "manifest.toml"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(stdout(&o).contains("last 3 training episodes"));
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn selftest_and_presets() {
    assert!(shieldlab(&["selftest"]).status.success());
    let o = shieldlab(&["presets"]);
    assert!(stdout(&o).lines().any(|l| l == "msh_sippo_strong"));
}
