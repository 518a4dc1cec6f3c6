use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capstext"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_manifest() -> PathBuf {
    repo().join("data/toy/manifest")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TOY: &str = "filters = 64
filter_size = 3
capsules = 4
capsule_dim = 8
class_dim = 8
embed_dim = 16
lr = 0.03
batch_size = 4
epochs = 40
dropout = 0
max_len = 10
";

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("toy.cfg");
    fs::write(&p, format!("{TOY}{extra}")).unwrap();
    p
}

fn train(dir: &Path, extra: &str, args: &[&str]) -> (Output, PathBuf) {
    let out = dir.join("run");
    let o = run(bin()
        .arg("train")
        .arg("--config")
        .arg(toy_config(dir, extra))
        .arg("--dataset")
        .arg(toy_manifest())
        .arg("--out")
        .arg(&out)
        .args(args));
    (o, out)
}

#[test]
fn train_then_eval_memorised_toy() {
    let dir = TempDir::new().unwrap();
    let (o, out) = train(dir.path(), "", &["--routing", "static", "--seed", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.ckpt").is_file());
    let csv = fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_acc,lr\n"));
    assert!(csv.lines().last().unwrap().starts_with("# best_epoch="));

    let e = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(out.join("model.ckpt"))
        .arg("--dataset")
        .arg(toy_manifest())
        .args(["--split", "train"]));
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(stdout(&e), "1.0000\n");
}

#[test]
fn dynamic_routing_flags() {
    let dir = TempDir::new().unwrap();
    let (o, out) = train(
        dir.path(),
        "epochs = 2\n",
        &["--routing", "dynamic", "--route-iters", "3"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(csv.contains("routing=dynamic:3"), "{csv}");
}

#[test]
fn identical_flags_give_identical_bytes() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (oa, ra) = train(a.path(), "epochs = 3\ndropout = 0.5\n", &["--seed", "7"]);
    let (ob, rb) = train(b.path(), "epochs = 3\ndropout = 0.5\n", &["--seed", "7"]);
    assert!(oa.status.success() && ob.status.success());
    assert_eq!(oa.stdout, ob.stdout);
    for f in ["model.ckpt", "run.csv"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pretrained_without_vectors_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (o, _) = train(dir.path(), "", &["--pretrained"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("nope.txt");
    let (o, _) = train(
        dir.path(),
        "",
        &["--pretrained", "--embeddings", missing.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn bad_flags_and_config_keys_exit_2() {
    let dir = TempDir::new().unwrap();
    let (o, _) = train(dir.path(), "bogus = 1\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    let (o, _) = train(dir.path(), "", &["--routing", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(bin().arg("train"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let (o, _) = train(dir.path(), "", &["--set", "lr=1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn incompatible_or_corrupt_checkpoint_exits_2() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"NOTACKPT").unwrap();
    let o = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&junk)
        .arg("--dataset")
        .arg(toy_manifest()));
    assert_eq!(o.status.code(), Some(2));

    let (t, out) = train(dir.path(), "epochs = 1\n", &[]);
    assert!(t.status.success());
    let wide = dir.path().join("wide");
    fs::create_dir(&wide).unwrap();
    fs::write(wide.join("train.tsv"), "0\tgood film\n5\tbad film\n").unwrap();
    fs::write(wide.join("manifest"), "train = train.tsv\ntest = train.tsv\n").unwrap();
    let o = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(out.join("model.ckpt"))
        .arg("--dataset")
        .arg(wide.join("manifest")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn neighbors_reconstruct_and_perturb() {
    let dir = TempDir::new().unwrap();
    let (o, out) = train(dir.path(), "epochs = 5\n", &["--reconstruction"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("model.ckpt");

    let n = run(bin()
        .arg("neighbors")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--word", "good", "--k", "5"]));
    assert!(n.status.success());
    let lines: Vec<_> = stdout(&n).lines().map(String::from).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| !l.starts_with("good\t")));

    let r = run(bin().arg("reconstruct").arg("--checkpoint").arg(&ckpt).args([
        "--sentence",
        "good great film",
        "--dim",
        "1",
        "--noise",
        "0.3",
    ]));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    assert_eq!(text.lines().count(), 1);
    let sentence = text.split(": ").nth(1).unwrap();
    assert_eq!(sentence.split_whitespace().count(), 10);

    let r = run(bin()
        .arg("reconstruct")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--sentence", "good", "--dim", "9"]));
    assert_eq!(r.status.code(), Some(2));

    let sample = dir.path().join("sample.tsv");
    fs::write(&sample, "0\tgood great film\n1\tbad awful film\n").unwrap();
    let rewrites = dir.path().join("rewrites.tsv");
    fs::write(
        &rewrites,
        "good great film\tfilm great good\nbad awful film\tfilm awful bad\n",
    )
    .unwrap();
    let tsv = dir.path().join("report.tsv");
    let p = run(bin()
        .arg("perturb-order")
        .arg("--static")
        .arg(&ckpt)
        .arg("--dynamic")
        .arg(&ckpt)
        .arg("--input")
        .arg(&sample)
        .arg("--rewrites")
        .arg(&rewrites)
        .arg("--out")
        .arg(&tsv));
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert!(stdout(&p).contains("static accuracy: "));
    let report = fs::read_to_string(&tsv).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 + 2);
    assert!(report.contains("film great good"));
}

#[test]
fn gradcheck_command_passes() {
    let o = run(bin().args(["gradcheck", "--seeds", "2"]));
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    for name in [
        "elu_gate",
        "primary_capsules",
        "margin_loss",
        "decoder",
        "static_end_to_end",
        "dynamic_end_to_end",
    ] {
        assert!(text.contains(name), "{text}");
    }
}
