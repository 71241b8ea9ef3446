#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tattn"))
        .args(args)
        .output()
        .expect("failed to start tattn")
}

/// Runs the command and insists on exit status 0.
pub fn ok(args: &[&str]) -> String {
    let out = tattn(args);
    assert!(
        out.status.success(),
        "tattn {} failed with {:?}\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SRC_WORDS: &[&str] = &[
    "haus", "katze", "hund", "baum", "garten", "stadt", "wasser", "brot", "licht", "strasse", "tisch", "fenster",
];
const TGT_WORDS: &[&str] = &[
    "house", "cat", "dog", "tree", "garden", "city", "water", "bread", "light", "street", "table", "window",
];

/// Word-for-word toy bitext, deterministic in `seed`.
pub fn toy_bitext(seed: u64, n: usize) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut src, mut tgt) = (String::new(), String::new());
    for _ in 0..n {
        let len = rng.gen_range(2..=6);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..SRC_WORDS.len())).collect();
        let s: Vec<&str> = ids.iter().map(|&i| SRC_WORDS[i]).collect();
        let t: Vec<&str> = ids.iter().map(|&i| TGT_WORDS[i]).collect();
        src.push_str(&s.join(" "));
        src.push('\n');
        tgt.push_str(&t.join(" "));
        tgt.push('\n');
    }
    (src, tgt)
}

pub struct Artifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub translations: PathBuf,
    pub report: String,
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// learn-bpe, apply-bpe, build-vocab, train (one epoch), translate, eval.
pub fn run_pipeline(dir: &Path, seed: u64) -> Artifacts {
    for (name, data_seed, n) in [("train", 1, 300), ("dev", 2, 8), ("test", 3, 8)] {
        let (s, t) = toy_bitext(data_seed, n);
        fs::write(dir.join(format!("{name}.src")), s).unwrap();
        fs::write(dir.join(format!("{name}.tgt")), t).unwrap();
    }
    let seed = seed.to_string();
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "# toy run\nemb = 16\nhidden = 16\nbatch_size = 4\noptimizer = sgd\nlr = 1.0\nnum_merges = 40\nbeam = 3\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    for side in ["src", "tgt"] {
        ok(&["learn-bpe", "--config", &cfg, "--input", &p(dir, &format!("train.{side}")), "--output", &p(dir, &format!("{side}.bpe"))]);
        for split in ["train", "dev", "test"] {
            ok(&[
                "apply-bpe",
                "--merges",
                &p(dir, &format!("{side}.bpe")),
                "--input",
                &p(dir, &format!("{split}.{side}")),
                "--output",
                &p(dir, &format!("{split}.bpe.{side}")),
            ]);
        }
        ok(&["build-vocab", "--config", &cfg, "--input", &p(dir, &format!("train.bpe.{side}")), "--output", &p(dir, &format!("{side}.vocab"))]);
    }
    let model_dir = dir.join("model");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        &seed,
        "--variant",
        "temporal",
        "--epochs",
        "1",
        "--train-src",
        &p(dir, "train.bpe.src"),
        "--train-tgt",
        &p(dir, "train.bpe.tgt"),
        "--dev-src",
        &p(dir, "dev.bpe.src"),
        "--dev-tgt",
        &p(dir, "dev.bpe.tgt"),
        "--src-vocab",
        &p(dir, "src.vocab"),
        "--tgt-vocab",
        &p(dir, "tgt.vocab"),
        "--out-dir",
        model_dir.to_str().unwrap(),
    ]);
    let checkpoint = model_dir.join("best.ckpt");
    ok(&[
        "translate",
        "--config",
        &cfg,
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--src-vocab",
        &p(dir, "src.vocab"),
        "--tgt-vocab",
        &p(dir, "tgt.vocab"),
        "--input",
        &p(dir, "test.bpe.src"),
        "--output",
        &p(dir, "test.hyp"),
        "--undo-bpe",
        "--dump-attn",
        &p(dir, "test.attn"),
    ]);
    let report = ok(&["eval", "--hyp", &p(dir, "test.hyp"), "--ref", &p(dir, "test.tgt")]);
    Artifacts {
        dir: dir.to_path_buf(),
        checkpoint,
        train_log: model_dir.join("train.log"),
        translations: dir.join("test.hyp"),
        report,
    }
}
