use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ota_fl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ota-fl"))
        .args(args)
        .env_remove("MNIST_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Minimal IDX files: 40 train and 10 test images of one bright pixel per class.
fn fake_mnist(dir: &Path) {
    fn idx(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3];
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        let mut labels = vec![0, 0, 8, 1];
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let mut img = vec![0u8; 784];
            img[i % 10] = 255;
            images.extend_from_slice(&img);
            labels.push((i % 10) as u8);
        }
        (images, labels)
    }
    let (ti, tl) = idx(40);
    let (vi, vl) = idx(10);
    std::fs::write(dir.join("train-images-idx3-ubyte"), ti).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), tl).unwrap();
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), vi).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), vl).unwrap();
}

#[test]
fn run_writes_outputs_and_flags_override_file() {
    let data = TempDir::new().unwrap();
    fake_mnist(data.path());
    let work = TempDir::new().unwrap();
    let config = work.path().join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "preset = fig3a\nrounds = 3\ntrials = 2\nclients = 4\nmnist_dir = {}\neta = 0.001\n",
            data.path().display()
        ),
    )
    .unwrap();
    let out = work.path().join("out");
    let o = ota_fl(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--eta",
        "0.05",
        "--antennas=4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trial_0.csv", "trial_1.csv", "mean.csv", "run.meta"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let meta = std::fs::read_to_string(out.join("run.meta")).unwrap();
    assert!(meta.contains("eta = 0.05\n"), "{meta}");
    assert!(meta.contains("antennas = 4\n"));
    assert!(meta.contains("preset = fig3a\n"));
    assert_eq!(std::fs::read_to_string(out.join("mean.csv")).unwrap().lines().count(), 4);
}

#[test]
fn sequential_flag_gives_same_files() {
    let data = TempDir::new().unwrap();
    fake_mnist(data.path());
    let work = TempDir::new().unwrap();
    let dir = data.path().to_str().unwrap();
    let mut outs = Vec::new();
    for extra in [None, Some("--sequential")] {
        let out = work.path().join(if extra.is_some() { "seq" } else { "par" });
        let mut args = vec!["run", "--out", out.to_str().unwrap()];
        args.extend(extra);
        args.extend(["--mnist-dir", dir, "--rounds", "2", "--trials", "2", "--clients", "2", "--antennas", "3"]);
        let o = ota_fl(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(std::fs::read(out.join("mean.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn validation_errors_exit_nonzero() {
    let work = TempDir::new().unwrap();
    let out = work.path().join("o");
    let out = out.to_str().unwrap();

    let o = ota_fl(&["run", "--out", out, "--k-ratio", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("k_ratio"), "{}", stderr(&o));

    let o = ota_fl(&["run", "--out", out, "--selection-rule", "foo"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("agetopk") && stderr(&o).contains("rtopk"));

    let o = ota_fl(&["run", "--out", out, "--etaa", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown key `etaa`"));

    let o = ota_fl(&["run", "--out", out, "--preset", "fig9"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fig3b"));

    // no dataset configured
    let o = ota_fl(&["run", "--out", out]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mnist_dir"), "{}", stderr(&o));

    // dataset path that does not exist: no output directory is created
    let o = ota_fl(&["run", "--out", out, "--mnist-dir", "/definitely/not/here"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("I/O error"), "{}", stderr(&o));
    assert!(!Path::new(out).exists());

    let o = ota_fl(&["run", "--config", "/definitely/not/here.cfg", "--out", out]);
    assert!(!o.status.success());
}

#[test]
fn bound_command_writes_table() {
    let work = TempDir::new().unwrap();
    let config = work.path().join("bound.cfg");
    std::fs::write(&config, "preset=fig1\nrounds=20\nbound_alpha=50\nbound_mu=0.5\n# comment line\n").unwrap();
    let out = work.path().join("nested").join("bound.csv");
    let o = ota_fl(&["bound", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 22);
    assert!(text.starts_with("round,bound,"));

    let o = ota_fl(&["bound", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--bound-alpha", "-1"]);
    assert!(!o.status.success());
}
