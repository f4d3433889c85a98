use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use permutofilt::pipelines::io::save_unaries;
use permutofilt::pipelines::synthetic::{add_gaussian_noise, piecewise_constant};
use permutofilt::pipelines::{box_downsample, ImageBuffer, PointCloudSignal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_permutofilt"));
    for (k, _) in std::env::vars() {
        if k.starts_with("PERMUTOFILT_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene(dir: &Path, name: &str, channels: usize, seed: u64) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = piecewise_constant(16, 16, channels, 4, &mut rng).unwrap();
    let path = dir.join(name);
    img.save(&path).unwrap();
    path
}

#[test]
fn oracle_diff_reports_tiny_error() {
    let o = run(&["oracle-diff", "--n", "30", "--d", "2", "--s", "1", "--seed", "7"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!(v < 1e-10, "{v}");
}

#[test]
fn gradcheck_targets_pass() {
    for target in ["filter", "input", "mf", "inception"] {
        let o = run(&["gradcheck", "--target", target, "--d", "2", "--s", "1"]);
        assert!(o.status.success(), "{target}");
        let v: f64 = stdout(&o).trim().parse().unwrap();
        assert!(v < 1e-5, "{target}: {v}");
    }
}

#[test]
fn filter_writes_an_image_of_the_same_size() {
    let dir = tempfile::tempdir().unwrap();
    let input = scene(dir.path(), "a.png", 3, 1);
    let out = dir.path().join("out.png");
    let o = run(&[
        "filter", "--in", p(&input), "--features", "xyrgb", "--scales", "0.05,0.05,0.04,0.04,0.04",
        "--gauss", "--s", "1", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = ImageBuffer::load(&out).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (16, 16, 3));
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["filter", "--gauss"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--target", "filter", "--n", "0"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let out = dir.path().join("o.png");
    let o = run(&["filter", "--in", p(&missing), "--scales", "1", "--gauss", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("missing.png"));

    let input = scene(dir.path(), "a.png", 1, 2);
    let bad = dir.path().join("bad.pbf1");
    std::fs::write(&bad, b"nope").unwrap();
    let o = run(&["filter", "--in", p(&input), "--features", "xyv", "--scales", "1", "--filter", p(&bad), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in [
        "filter", "upsample", "denoise-train", "denoise-apply", "mesh-denoise", "crf", "bi-filter",
        "gradcheck", "bench", "oracle-diff",
    ] {
        assert!(text.contains(cmd), "{cmd}");
        assert!(run(&[cmd, "--help"]).status.success(), "{cmd}");
    }
}

#[test]
fn seeded_training_is_bit_identical_and_env_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pbf1");
    let b = dir.path().join("b.pbf1");
    let c = dir.path().join("c.pbf1");
    let args = ["denoise-train", "--synthetic", "2", "--size", "16", "--epochs", "2"];
    let o = bin().args(args).args(["--seed", "3", "--out", p(&a)]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(bin().args(args).args(["--seed", "3", "--out", p(&b)]).status().unwrap().success());
    let o = bin()
        .args(args)
        .env("PERMUTOFILT_SEED", "3")
        .env("PERMUTOFILT_OUT", p(&c))
        .output()
        .unwrap();
    assert!(o.status.success());
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"PBF1");
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes, std::fs::read(&c).unwrap());

    // Applying the learned filter reports noisy and learned PSNR.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clean = piecewise_constant(16, 16, 1, 4, &mut rng).unwrap();
    let noisy = add_gaussian_noise(&clean, 0.1, &mut rng).unwrap();
    let (cp, np) = (dir.path().join("clean.png"), dir.path().join("noisy.png"));
    clean.save(&cp).unwrap();
    noisy.save(&np).unwrap();
    let o = run(&["denoise-apply", "--in", p(&np), "--filter", p(&a), "--reference", p(&cp)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,image,psnr");
    assert!(lines[1].starts_with("noisy,noisy,"));
    assert!(lines[2].starts_with("learned,noisy,"));
}

#[test]
fn upsample_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let truth_path = scene(dir.path(), "truth.png", 3, 4);
    let truth = ImageBuffer::load(&truth_path).unwrap();
    let low = box_downsample(&truth, 4).unwrap();
    let low_path = dir.path().join("low.png");
    low.save(&low_path).unwrap();
    let guide_path = dir.path().join("guide.pgm");
    truth.to_gray().save(&guide_path).unwrap();
    let out = dir.path().join("up.ppm");
    let csv = dir.path().join("r.csv");
    let o = run(&[
        "upsample", "--low", p(&low_path), "--guide", p(&guide_path), "--reference", p(&truth_path),
        "--csv", p(&csv), "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let up = ImageBuffer::load(&out).unwrap();
    assert_eq!((up.width(), up.height(), up.channels()), (16, 16, 3));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("method,image,psnr\nbilateral,truth,"));
    assert!(table.contains("\nbicubic,truth,"));
}

#[test]
fn mesh_denoise_round_trips_csv() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40;
    let feats = Array2::from_shape_fn((n, 2), |(i, c)| if c == 0 { (i % 8) as f64 } else { (i / 8) as f64 });
    let values = Array2::from_elem((n, 3), 0.25);
    let input = dir.path().join("in.csv");
    PointCloudSignal::new(values.clone(), feats.clone()).unwrap().save_csv(&input).unwrap();
    let out = dir.path().join("out.csv");
    let o = run(&["mesh-denoise", "--in", p(&input), "--scales", "0.7", "--reference", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("method,image,rmse\nnoisy,in,0.000000\n"));
    let back = PointCloudSignal::load_csv(&out).unwrap();
    assert_eq!(back.features, feats);
    assert!(back.values.iter().all(|v| (v - 0.25).abs() < 1e-9));
}

#[test]
fn crf_writes_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageBuffer::from_fn(8, 4, 3, |x, _, c| if x < 4 { 0.1 * c as f64 } else { 0.9 }).unwrap();
    let img_path = dir.path().join("img.png");
    img.save(&img_path).unwrap();
    // Left half prefers label 0, right half label 1, one flipped pixel each.
    let u = Array2::from_shape_fn((32, 2), |(i, l)| {
        let x = i % 8;
        let want = usize::from(x >= 4) ^ usize::from(i == 9 || i == 14);
        if l == want { 0.0 } else { 0.4 }
    });
    let un = dir.path().join("u.bin");
    save_unaries(&u, &un).unwrap();
    let cfg = dir.path().join("crf.cfg");
    std::fs::write(&cfg, "steps = 5\nkernel.0.features = xyrgb\nkernel.0.scales = 0.2,20\nkernel.0.weight = 30\n").unwrap();
    let out = dir.path().join("labels.csv");
    let o = run(&["crf", "--image", p(&img_path), "--unaries", p(&un), "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels: Vec<usize> = std::fs::read_to_string(&out).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    let expect: Vec<usize> = (0..32).map(|i| usize::from(i % 8 >= 4)).collect();
    assert_eq!(labels, expect);
}

#[test]
fn bi_filter_on_superpixels() {
    let dir = tempfile::tempdir().unwrap();
    let input = scene(dir.path(), "a.png", 3, 5);
    let seg: String = (0..256).map(|i| format!("{}\n", (i % 16) / 4 + 4 * ((i / 16) / 4))).collect();
    let seg_path = dir.path().join("seg.csv");
    std::fs::write(&seg_path, seg).unwrap();
    let out = dir.path().join("b.png");
    let o = run(&["bi-filter", "--in", p(&input), "--scales", "0.2,5", "--segments", p(&seg_path), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ImageBuffer::load(&out).unwrap().len(), 256);
}

#[test]
fn bench_reports_mean_and_spread() {
    let o = run(&["bench", "--n", "500", "--repeat", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for stage in ["build", "splat", "blur", "slice", "backward"] {
        assert!(text.lines().any(|l| l.trim_start().starts_with(stage) && l.contains('±')), "{stage}");
    }
}
