use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[denoiser]
hidden = 8
time_dim = 4
cond_dim = 4

[pretrain]
steps = 30
batch_size = 4

[finetune]
steps = 3
batch_size = 2
learning_rate = 10.0

[eval]
ddim_steps = [10]
seeds_per_condition = 1

[gradcheck]
points = 1
ddim_steps = 2
"#;

fn vidtune(verb: &str, config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidtune"))
        .args([verb, "--config"])
        .arg(config)
        .args(["--seed", "4", "--out"])
        .arg(out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn every_verb_runs_and_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let cases: [(&str, &[&str]); 6] = [
        ("pretrain", &["train.csv", "checkpoint/manifest.toml"]),
        ("finetune", &["pretrain.csv", "base/manifest.toml", "runs/edit/train.csv", "runs/edit/checkpoint/manifest.toml"]),
        ("eval", &["eval.csv"]),
        ("sample", &["class-7.tnsr", "class-8.pgm"]),
        ("experiment", &["comparison.csv", "plots/mean_reward.svg", "frames/edit.pgm"]),
        ("gradcheck", &["gradcheck.csv"]),
    ];
    for (verb, files) in cases {
        let out = dir.path().join(verb);
        let o = vidtune(verb, &cfg, &out);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(out.join(f).exists(), "{verb}: missing {f}");
        }
    }
    let rows = std::fs::read_to_string(dir.path().join("gradcheck/gradcheck.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn errors_map_to_category_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = write_config(dir.path(), "bad.toml", "[finetune]\nsteps = \"x\"\n");
    let o = vidtune("experiment", &bad, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("finetune.steps"));

    let o = vidtune("pretrain", &dir.path().join("absent.toml"), &out);
    assert_eq!(o.status.code(), Some(3));

    let ck = write_config(dir.path(), "ck.toml", &format!("checkpoint = \"nowhere\"\n{TINY}"));
    assert_eq!(vidtune("eval", &ck, &out).status.code(), Some(3));

    let strict = write_config(dir.path(), "strict.toml", &format!("{TINY}tolerance = 1e-300\n"));
    let o = vidtune("gradcheck", &strict, &out);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    let o = Command::new(env!("CARGO_BIN_EXE_vidtune")).arg("pretrain").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
