use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use audiocomposer::mixer::{read_features, Manifest};
use audiocomposer::tensor::OpKind;

const BIN: &str = env!("CARGO_BIN_EXE_audiocomposer");

/// Short two-class mixtures and a one-block model keep every run quick.
const SMALL: &str = "\
mixer.classes = Hum, Beep
mixer.clips_per_class = 8
mixer.duration_s = 2.0
mixer.max_events = 2
mixer.max_event_s = 1.5
model.num_blocks = 1
model.hidden_dim = 32
model.num_heads = 2
train.batch_size = 2
train.log_every = 10
train.checkpoint_every = 10
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "info")
            .output()
            .unwrap()
    }

    /// Runs with the small config and asserts success.
    fn ok(&self, args: &[&str]) -> String {
        let mut full = vec!["--config", "small.cfg"];
        full.extend_from_slice(args);
        let out = self.run(&full);
        assert!(
            out.status.success(),
            "{args:?}\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Dataset of `n` items with `holdout` held out, and a model trained on it.
    fn trained(&self, n: usize, holdout: usize) {
        self.ok(&[
            "--out",
            "data",
            "--set",
            &format!("mixer.holdout={holdout}"),
            "mix",
            "--n",
            &n.to_string(),
        ]);
        self.ok(&[
            "--out",
            "run",
            "--set",
            "train.steps=10",
            "train",
            "--data",
            "data",
        ]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn mix_is_reproducible_and_summarized() {
    let sb = Sandbox::new();
    let first = sb.ok(&["--seed", "7", "--out", "a", "mix", "--n", "100"]);
    sb.ok(&["--seed", "7", "--out", "b", "mix", "--n", "100"]);
    let read = |d: &str| fs::read(sb.path(d).join("manifest.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    sb.ok(&["--seed", "8", "--out", "c", "mix", "--n", "100"]);
    assert_ne!(read("a"), read("c"));

    // "100 items (0 held out), E events -> ..." then per-category counts
    let events: usize = first.split_whitespace().nth(5).unwrap().parse().unwrap();
    let manifest = Manifest::load(&sb.path("a")).unwrap();
    assert_eq!(manifest.records.len(), 100);
    assert_eq!(
        events,
        manifest
            .records
            .iter()
            .map(|r| r.events.len())
            .sum::<usize>()
    );
    for prefix in ["pitch: ", "energy: "] {
        let line = first.lines().find(|l| l.starts_with(prefix)).unwrap();
        let total: usize = line[prefix.len()..]
            .split(", ")
            .map(|cell| cell.split(' ').nth(1).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, events, "{first}");
    }
}

#[test]
fn holdout_split_shares_the_dataset() {
    let sb = Sandbox::new();
    sb.ok(&["--out", "d", "--set", "mixer.holdout=5", "mix", "--n", "20"]);
    let train = Manifest::load(&sb.path("d")).unwrap();
    let held = Manifest::load(&sb.path("d/heldout.jsonl")).unwrap();
    assert_eq!((train.records.len(), held.records.len()), (15, 5));
    assert_eq!(held.records[0].id, "mix-000015");
    let tsv = fs::read_to_string(sb.path("d/heldout.tsv")).unwrap();
    let first = tsv.lines().next().unwrap();
    assert_eq!(first, format!("mix-000015\t{}", held.records[0].caption));
}

#[test]
fn invalid_input_exits_1_without_output() {
    let sb = Sandbox::new();
    for args in [
        vec!["--out", "x", "mix", "--n", "0"],
        vec!["--out", "x", "--set", "train.lr=0", "mix", "--n", "5"],
        vec!["--out", "x", "--set", "model.depth=3", "mix", "--n", "5"],
        vec!["--out", "x", "--set", "mixer.holdout=5", "mix", "--n", "5"],
        vec!["--out", "x", "mix"],
        vec!["--out", "x", "bogus"],
    ] {
        let out = sb.run(&args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(!sb.path("x").exists(), "{args:?} left output behind");
    }
    fs::write(sb.path("bad.cfg"), "seed = 1\nthis is not a setting\n").unwrap();
    let out = sb.run(&["--config", "bad.cfg", "mix", "--n", "3"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bad.cfg:2"), "{}", stderr(&out));
}

#[test]
fn toy_model_halves_its_loss_in_500_steps() {
    let sb = Sandbox::new();
    // default (toy) model; only the data and step count come from the flags
    let data = [
        "--set",
        "mixer.classes=Hum,Beep",
        "--set",
        "mixer.duration_s=2.0",
        "--set",
        "mixer.max_event_s=1.5",
    ];
    let mut args = data.to_vec();
    args.extend(["--out", "data", "mix", "--n", "200"]);
    assert!(sb.run(&args).status.success());
    let mut args = data.to_vec();
    args.extend([
        "--set",
        "train.steps=500",
        "--set",
        "train.batch_size=2",
        "--out",
        "run",
        "train",
        "--data",
        "data",
    ]);
    let out = sb.run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    // "loss A at step 1 -> B at step 500"
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("loss ")).unwrap();
    let w: Vec<&str> = line.split_whitespace().collect();
    let (initial, last): (f64, f64) = (w[1].parse().unwrap(), w[6].parse().unwrap());
    assert_eq!(w[9], "500");
    assert!(last < 0.5 * initial, "{line}");
    assert_eq!(
        fs::read_to_string(sb.path("run/loss.tsv"))
            .unwrap()
            .lines()
            .count(),
        500
    );
}

#[test]
fn resume_continues_the_same_curve() {
    let sb = Sandbox::new();
    sb.ok(&["--out", "data", "mix", "--n", "12"]);
    sb.ok(&[
        "--out",
        "straight",
        "--set",
        "train.steps=40",
        "train",
        "--data",
        "data",
    ]);
    sb.ok(&[
        "--out",
        "split",
        "--set",
        "train.steps=20",
        "train",
        "--data",
        "data",
    ]);
    // training again into a used directory needs --resume
    let out = sb.run(&[
        "--config",
        "small.cfg",
        "--out",
        "split",
        "--set",
        "train.steps=40",
        "train",
        "--data",
        "data",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    sb.ok(&[
        "--out",
        "split",
        "--set",
        "train.steps=40",
        "train",
        "--data",
        "data",
        "--resume",
    ]);
    for f in ["loss.tsv", "model.acmp", "optimizer.acmp"] {
        assert_eq!(
            fs::read(sb.path("straight").join(f)).unwrap(),
            fs::read(sb.path("split").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_data_is_a_runtime_failure_naming_the_path() {
    let sb = Sandbox::new();
    let out = sb.run(&["--out", "run", "train", "--data", "no-such-dir"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no-such-dir"), "{}", stderr(&out));
    assert!(!sb.path("run").exists());
}

fn all_features(dir: &Path) -> Vec<Vec<f64>> {
    let m = Manifest::load(dir).unwrap();
    m.records
        .iter()
        .map(|r| read_features(&m.features_path(r)).unwrap().data().to_vec())
        .collect()
}

#[test]
fn sample_writes_one_record_per_caption_reproducibly() {
    let sb = Sandbox::new();
    sb.trained(14, 4);
    let heldout = fs::read_to_string(sb.path("data/heldout.tsv")).unwrap();
    let captions: Vec<&str> = heldout
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    // ten plain captions (no ids), with a comment and a blank line mixed in
    let mut text = String::from("# generated\n\n");
    for i in 0..10 {
        text.push_str(captions[i % captions.len()]);
        text.push('\n');
    }
    fs::write(sb.path("ten.txt"), text).unwrap();
    let base = [
        "sample",
        "--checkpoint",
        "run/model.acmp",
        "--captions",
        "ten.txt",
    ];
    let with = |out: &str, extra: &[&str]| {
        let mut a = vec!["--out", out];
        a.extend(extra);
        a.extend(base);
        sb.ok(&a);
    };
    with("g1", &["--seed", "3"]);
    with("g2", &["--seed", "3"]);
    with("g3", &["--seed", "4"]);
    let m = Manifest::load(&sb.path("g1")).unwrap();
    assert_eq!(m.records.len(), 10);
    assert_eq!(m.records[0].id, "gen-000002");
    for r in &m.records {
        assert!(sb.path("g1").join(&r.wav).is_file());
        assert_eq!(r.duration_s, 2.0);
    }
    assert_eq!(all_features(&sb.path("g1")), all_features(&sb.path("g2")));
    assert_ne!(all_features(&sb.path("g1")), all_features(&sb.path("g3")));
    // batching does not change any item
    with("g4", &["--seed", "3", "--set", "sampler.steps=25"]);
    let mut a = vec!["--seed", "3", "--out", "g5"];
    a.extend(base);
    a.extend(["--batch", "3"]);
    sb.ok(&a);
    assert_eq!(all_features(&sb.path("g4")), all_features(&sb.path("g5")));

    with("one", &["--set", "sampler.steps=1"]);
    for f in all_features(&sb.path("one")) {
        assert!(f.iter().all(|v| v.is_finite()));
    }
    // an out-of-vocabulary caption names its line
    fs::write(
        sb.path("bad.txt"),
        format!("{}\nGong, Start at 0.1s\n", captions[0]),
    )
    .unwrap();
    let out = sb.run(&[
        "--out",
        "bad",
        "sample",
        "--checkpoint",
        "run/model.acmp",
        "--captions",
        "bad.txt",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.txt:2"), "{}", stderr(&out));
}

#[test]
fn eval_scores_self_perfectly_and_rejects_disjoint_ids() {
    let sb = Sandbox::new();
    sb.trained(16, 6);
    let table = sb.ok(&[
        "--out",
        "self",
        "eval",
        "--generated",
        "data",
        "--reference",
        "data",
    ]);
    for col in [
        "F1_seg",
        "pitch ACC",
        "pitch MAE",
        "energy ACC",
        "energy MAE",
    ] {
        assert!(table.contains(col), "{table}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sb.path("self/report.json")).unwrap()).unwrap();
    assert_eq!(report["f1_seg"], 1.0);
    assert_eq!(report["f1_event"], 1.0);
    assert_eq!(report["pitch_acc"], 1.0);
    assert_eq!(report["energy_acc"], 1.0);
    assert_eq!(report["energy_mae"], 0.0);

    sb.ok(&[
        "--out",
        "gen",
        "sample",
        "--checkpoint",
        "run/model.acmp",
        "--captions",
        "data/heldout.tsv",
    ]);
    sb.ok(&[
        "eval",
        "--generated",
        "gen",
        "--reference",
        "data/heldout.jsonl",
    ]);
    assert!(sb.path("gen/report.json").is_file());
    // generated ids are the held-out ones, so the training split shares none
    let out = sb.run(&["eval", "--generated", "gen", "--reference", "data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("mix-000010"), "{}", stderr(&out));
}

#[test]
fn gradcheck_lists_every_op_and_fails_on_a_fault() {
    let sb = Sandbox::new();
    let table = sb.ok(&["gradcheck", "--instances", "2"]);
    for kind in OpKind::DIFFERENTIABLE {
        let row = table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(kind.name()))
            .unwrap_or_else(|| panic!("{} missing:\n{table}", kind.name()));
        assert!(row.ends_with("pass"), "{row}");
    }
    assert!(table.contains("cfm end-to-end"));

    let out = sb.run(&["gradcheck", "--instances", "2", "--fault", "softmax"]);
    assert_ne!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let row = stdout.lines().find(|l| l.starts_with("softmax")).unwrap();
    assert!(row.ends_with("FAIL"), "{stdout}");
    assert_eq!(code(&sb.run(&["gradcheck", "--fault", "nope"])), 1);
}
