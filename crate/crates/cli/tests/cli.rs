use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppcm_core::dataset::{encode_cifar10, LabeledImages};
use ppcm_core::image::RasterImage;
use ppcm_core::parambudget::{self, BudgetQuery, Policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn ppcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppcm")).args(args).output().expect("spawn ppcm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_set(count: usize, side: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledImages::default();
    for _ in 0..count {
        let data = (0..side * side * 3).map(|_| rng.gen()).collect();
        set.push(RasterImage::new(side, side, data).unwrap(), rng.gen_range(0..10));
    }
    set
}

/// PPM files under their own names, with a nested directory and a manifest.
fn write_named_dir(dir: &Path, set: &LabeledImages) {
    fs::create_dir_all(dir.join("sub")).unwrap();
    let mut manifest = String::new();
    for (i, (img, l)) in set.images.iter().zip(&set.labels).enumerate() {
        let rel = if i % 2 == 0 { format!("img_{i}.ppm") } else { format!("sub/pic{i}.ppm") };
        img.save_ppm(dir.join(&rel)).unwrap();
        manifest.push_str(&format!("{rel} {l}\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest).unwrap();
}

#[test]
fn params_prints_table_counts() {
    let o = ppcm(&["params", "--mode", "convmixer_plain", "--image-size", "224", "--block", "16", "--hidden", "512", "--depth", "16", "--kernel", "9", "--classes", "10"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "5306890\n");
    let o = ppcm(&["params", "--mode", "proposed"]);
    assert_eq!(stdout(&o), "5345306\n");
}

#[test]
fn params_matches_library_call() {
    for (mode, policy) in [("ele_same", Policy::EleSame), ("ele_different", Policy::EleDifferent), ("proposed", Policy::Proposed)] {
        for size in [32u64, 64, 96] {
            let o = ppcm(&["params", "--mode", mode, "--image-size", &size.to_string(), "--block", "4", "--hidden", "64", "--depth", "3", "--kernel", "5", "--classes", "7", "--classifier", "1000"]);
            assert!(o.status.success());
            let q = BudgetQuery { image_size: size, block_size: 4, hidden: 64, depth: 3, kernel: 5, n_classes: 7, n_classifier: Some(1000), policy };
            assert_eq!(stdout(&o).trim(), parambudget::count(&q).unwrap().to_string());
        }
    }
    let o = ppcm(&["params", "--mode", "ele_same", "--image-size", "32", "--block", "4", "--hidden", "256"]);
    assert_eq!(stdout(&o), "29313296\n");
    assert!(String::from_utf8_lossy(&o.stderr).contains("approximate"));
}

#[test]
fn keygen_is_deterministic_with_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.key"), tmp.path().join("b.key"));
    assert!(ppcm(&["keygen", "--seed", "0", "--out", p(&a)]).status.success());
    assert!(ppcm(&["keygen", "--seed", "0", "--out", p(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = tmp.path().join("c.key");
    assert!(ppcm(&["keygen", "--out", p(&c)]).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn directory_round_trip_is_byte_exact() {
    let tmp = TempDir::new().unwrap();
    let (plain, enc, dec) = (tmp.path().join("plain"), tmp.path().join("enc"), tmp.path().join("dec"));
    write_named_dir(&plain, &random_set(6, 8, 1));
    let key = tmp.path().join("k.key");
    assert!(ppcm(&["keygen", "--seed", "abc", "--block", "4", "--out", p(&key)]).status.success());
    for extra in [&[][..], &["--perm-only"][..]] {
        let mut args = vec!["encrypt", "--key", p(&key), "--block", "4", "--in", p(&plain), "--out", p(&enc)];
        args.extend_from_slice(extra);
        assert!(ppcm(&args).status.success());
        let mut args = vec!["decrypt", "--key", p(&key), "--block", "4", "--in", p(&enc), "--out", p(&dec)];
        args.extend_from_slice(extra);
        assert!(ppcm(&args).status.success());
        for rel in ["img_0.ppm", "sub/pic1.ppm", "img_4.ppm", "sub/pic5.ppm", "manifest.txt"] {
            assert_eq!(fs::read(plain.join(rel)).unwrap(), fs::read(dec.join(rel)).unwrap(), "{rel}");
        }
        assert_ne!(fs::read(plain.join("img_0.ppm")).unwrap(), fs::read(enc.join("img_0.ppm")).unwrap());
    }
}

#[test]
fn archive_encrypts_with_resize_and_decrypts_to_resized_plain() {
    let tmp = TempDir::new().unwrap();
    let set = random_set(3, 32, 2);
    let archive = tmp.path().join("batch.bin");
    fs::write(&archive, encode_cifar10(&set).unwrap()).unwrap();
    let key = tmp.path().join("k.key");
    assert!(ppcm(&["keygen", "--seed", "1", "--block", "8", "--out", p(&key)]).status.success());
    let (enc, dec) = (tmp.path().join("enc"), tmp.path().join("dec"));
    let o = ppcm(&["encrypt", "--key", p(&key), "--in", p(&archive), "--out", p(&enc), "--resize", "64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ppcm(&["decrypt", "--key", p(&key), "--in", p(&enc), "--out", p(&dec)]).status.success());
    let back = LabeledImages::load_dir(&dec, Some(10)).unwrap();
    assert_eq!(back, set.resized(64).unwrap());
}

#[test]
fn import_writes_a_loadable_directory() {
    let tmp = TempDir::new().unwrap();
    let set = random_set(5, 32, 3);
    let archive = tmp.path().join("batch.bin");
    fs::write(&archive, encode_cifar10(&set).unwrap()).unwrap();
    let out = tmp.path().join("ppm");
    assert!(ppcm(&["import", "--in", p(&archive), p(&archive), "--out", p(&out), "--limit", "7"]).status.success());
    let back = LabeledImages::load_dir(&out, Some(10)).unwrap();
    assert_eq!(back.len(), 7);
    assert_eq!(back.images[5], set.images[0]);
}

#[test]
fn errors_have_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let key = tmp.path().join("k.key");
    assert!(ppcm(&["keygen", "--seed", "0", "--block", "4", "--out", p(&key)]).status.success());
    let data = tmp.path().join("d");
    write_named_dir(&data, &random_set(2, 8, 4));
    let out = tmp.path().join("o");

    let code = |args: &[&str]| {
        let o = ppcm(args);
        let err = String::from_utf8_lossy(&o.stderr).into_owned();
        assert!(!err.trim().is_empty());
        o.status.code().unwrap()
    };
    let usage = code(&["encrypt", "--bogus"]);
    let io = code(&["encrypt", "--key", "/no/such/key", "--in", p(&data), "--out", p(&out)]);
    let bad_key = tmp.path().join("bad.key");
    fs::write(&bad_key, "master=zz\nblock_size=4\nversion=1\n").unwrap();
    let parse = code(&["encrypt", "--key", p(&bad_key), "--in", p(&data), "--out", p(&out)]);
    let mismatch = code(&["encrypt", "--key", p(&key), "--block", "8", "--in", p(&data), "--out", p(&out)]);
    let invalid = code(&["params", "--mode", "proposed", "--image-size", "30", "--block", "4"]);
    fs::write(data.join("manifest.txt"), "missing.ppm 1\n").unwrap();
    let data_err = code(&["encrypt", "--key", p(&key), "--in", p(&data), "--out", p(&out)]);

    let codes = [usage, io, parse, mismatch, invalid, data_err];
    assert_eq!(codes, [2, 3, 4, 5, 6, 7]);
    // the diagnostic is a single line
    let o = ppcm(&["encrypt", "--key", p(&key), "--block", "8", "--in", p(&data), "--out", p(&out)]);
    assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1);
}

#[test]
fn sweep_writes_csv() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("s.csv");
    assert!(ppcm(&["sweep", "--sizes", "32,64", "--policies", "proposed,ele_different", "--out", p(&csv)]).status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image_size,policy,params");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[2], "32,ele_different,29313296");
}

#[test]
fn train_then_eval_on_tiny_data() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    random_set(16, 8, 5).save_dir(&data).unwrap();
    let key = tmp.path().join("k.key");
    assert!(ppcm(&["keygen", "--seed", "7", "--block", "4", "--out", p(&key)]).status.success());
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "h=4\nd=1\nk=3\nM=4\nimage_size=8\nn_classes=10\nepochs=2\nbatch_size=8\nencryption=on\n").unwrap();
    let out = tmp.path().join("ckpt");

    let o = ppcm(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(6), "encryption without a key");

    let o = ppcm(&["train", "--config", p(&cfg), "--data", p(&data), "--test", p(&data), "--key", p(&key), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,test_acc,penalty_LU");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].split(',').count(), 5);

    let ckpt = out.join("model.ckpt");
    let a = ppcm(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--key", p(&key)]);
    assert!(a.status.success());
    let acc: f64 = stdout(&a).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // deterministic
    let b = ppcm(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--key", p(&key)]);
    assert_eq!(stdout(&a), stdout(&b));
}
