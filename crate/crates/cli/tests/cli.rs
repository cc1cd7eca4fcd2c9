use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
frame_height = 12
frame_width = 12
glyph_cells = 3
cell_pixels = 3
max_letters = 2
signers = 3

[model]
frame_height = 12
frame_width = 12
backbone_channels = [4, 4, 4]
conv_strides = [2, 1, 1, 1]
feat_channels = 8
attention_hidden = 4
pooled_height = 4
pooled_width = 4
embed_dim = 8
heads = 2
ffn_hidden = 12
context_window = 1

[train]
epochs = 60
lr = 0.01
batch_size = 1
flip_prob = 0.0
mel_weight = 0.0
"#;

fn ctcseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctcseq"))
        .args(args)
        .env_remove("CTCSEQ_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = ctcseq(&["synth", "--seed", "7", "--n-clips", "12", "--out", s(out), "--config", s(&cfg)]);
        assert!(o.status.success(), "{}", stderr_line(&o));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(p, _)| p == Path::new("train.tsv")));
    assert!(fa.iter().any(|(p, _)| p == Path::new("config.toml")));
    assert_eq!(fa, fb);
}

#[test]
fn errors_are_one_line_and_leave_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");

    let o = ctcseq(&["synth", "--seed", "1", "--n-clips", "4", "--out", s(&out), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_line(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\tusage\t"), "{err}");

    let o = ctcseq(&["train", "--data", s(&tmp.path().join("missing")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_line(&o).lines().count(), 1);

    let bad = write_config(tmp.path(), "");
    fs::write(&bad, TINY.replace("flip_prob = 0.0", "flip_prob = 2.0")).unwrap();
    let o = ctcseq(&["synth", "--seed", "1", "--n-clips", "4", "--out", s(&out), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error\tconfig\t"), "{}", stderr_line(&o));

    fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
    let o = ctcseq(&["synth", "--seed", "1", "--n-clips", "4", "--out", s(&out), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));

    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.contains("partial") || n.contains("tmp-"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn lm_train_writes_charlm_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("words.txt");
    fs::write(&corpus, "cat\ncoat\nact\n").unwrap();
    let out = tmp.path().join("words.charlm");
    let o = ctcseq(&["lm-train", "--corpus", s(&corpus), "--order", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("CHARLM v1 order=2 alpha=0.1\n"), "{text}");
    let lm = ctcseq::decoder::CharNGramModel::load(&out).unwrap();
    assert_eq!(lm.alphabet().as_string(), "acot");
    assert!(tmp.path().join("words.charlm.toml").exists());
}

#[test]
fn memorized_clip_decodes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    fs::write(&cfg, TINY.replace("signers = 3", "signers = 1\nsplit = [1.0, 0.0, 0.0]")).unwrap();
    let data = tmp.path().join("data");
    let o = ctcseq(&["synth", "--seed", "3", "--n-clips", "1", "--out", s(&data), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr_line(&o));

    let run = tmp.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_ctcseq"))
        .args(["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)])
        .env("CTCSEQ_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr_line(&o));
    for f in ["model.ckpt", "final.ckpt", "train_log.tsv", "lm.charlm", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 11"), "{echo}");
    assert!(echo.contains("num_classes = 5"), "{echo}");

    let index = fs::read_to_string(data.join("train.tsv")).unwrap();
    let mut fields = index.lines().next().unwrap().split('\t');
    let (clip, target) = (fields.next().unwrap(), fields.next().unwrap());
    let ckpt = run.join("final.ckpt");
    let o = ctcseq(&["decode", "--ckpt", s(&ckpt), "--clip", s(&data.join(clip))]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), target);

    let report = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "train"];
        args.extend_from_slice(extra);
        let o = ctcseq(&args);
        assert!(o.status.success(), "{}", stderr_line(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let greedy = report(&["--decoder", "greedy"]);
    assert_eq!(greedy, report(&["--decoder", "beam", "--beam-width", "1"]));
    assert!(greedy.contains("1.0000"), "{greedy}");
    let lm = run.join("lm.charlm");
    report(&["--decoder", "beam-lm", "--lm", s(&lm), "--alpha", "0.2"]);

    let o = ctcseq(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--decoder", "beam-lm"]);
    assert_eq!(o.status.code(), Some(1));
}
