use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use dprobe_core::corpus::{parse_conllu, write_conllu};
use dprobe_core::embedstore::{BundleHeader, BundleWriter, Pooling, SentenceEmbeddings};
use dprobe_core::probe::{load_checkpoint, save_checkpoint};
use dprobe_core::templates::{read_items_json, write_items_json};
use dprobe_core::{DepSentence, ProbeParams};

const NOUNS: [&str; 6] = ["dog", "cat", "bird", "child", "farmer", "teacher"];
const VERBS: [&str; 4] = ["chased", "saw", "liked", "found"];
const INTRANSITIVE: [&str; 3] = ["slept", "left", "laughed"];

fn sent(id: &str, words: &[&str], heads: &[usize], rels: &[&str]) -> DepSentence {
    DepSentence::new(
        id,
        words.iter().map(|w| w.to_string()).collect(),
        heads.to_vec(),
        rels.iter().map(|r| r.to_string()).collect(),
    )
    .unwrap()
}

/// 50 transitive and 25 intransitive clauses, 3 rare passives and 2
/// sentences carrying a banned relation.
fn treebank() -> Vec<DepSentence> {
    let mut out = Vec::new();
    for i in 0..50 {
        let (a, b, v) = (NOUNS[i % 6], NOUNS[(i / 6 + 1 + i) % 6], VERBS[i % 4]);
        out.push(sent(
            &format!("t{i:03}"),
            &["The", a, v, "the", b, "."],
            &[2, 3, 0, 5, 3, 3],
            &["det", "nsubj", "ROOT", "det", "dobj", "punct"],
        ));
    }
    for i in 0..25 {
        out.push(sent(
            &format!("i{i:03}"),
            &["The", NOUNS[i % 6], INTRANSITIVE[i % 3], "."],
            &[2, 3, 0, 3],
            &["det", "nsubj", "ROOT", "punct"],
        ));
    }
    for i in 0..3 {
        out.push(sent(
            &format!("p{i:03}"),
            &["The", NOUNS[i], "was", "seen"],
            &[2, 4, 4, 0],
            &["det", "nsubjpass", "auxpass", "ROOT"],
        ));
    }
    for i in 0..2 {
        out.push(sent(&format!("x{i:03}"), &["dog", "cat"], &[0, 1], &["ROOT", "dep"]));
    }
    out
}

fn noise(seed: u64) -> f32 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32 - 0.5
}

const DIM: usize = 6;
const LAYERS: usize = 2;

/// Layer 0 is noise; higher layers carry each token's depth and its
/// parent's position, blurred by noise.
fn embed(s: &DepSentence, salt: u64) -> SentenceEmbeddings {
    let depth = |mut t: usize| {
        let mut d = 0;
        while let Some(h) = s.head_of(t) {
            t = h;
            d += 1;
        }
        d as f32
    };
    SentenceEmbeddings::from_fn(LAYERS + 1, s.len(), DIM, |l, t| {
        (0..DIM)
            .map(|k| {
                let n = 0.3 * noise(salt ^ ((l * 1000 + t * 10 + k) as u64) << 8);
                if l == 0 {
                    return n * 3.0;
                }
                let signal = match k {
                    0 => depth(t),
                    1 => s.head_of(t).unwrap_or(t) as f32,
                    2 => t as f32 * 0.5,
                    _ => 0.0,
                };
                signal + n
            })
            .collect()
    })
}

type Embed = fn(&DepSentence, u64) -> SentenceEmbeddings;

fn write_bundle(path: &Path, sentences: &[DepSentence], embed: Embed) {
    let header = BundleHeader { model_name: "toy".into(), num_layers: LAYERS, hidden_dim: DIM, pooling: Pooling::Mean };
    let mut w = BundleWriter::create(path, header).unwrap();
    for (i, s) in sentences.iter().enumerate() {
        w.push(s.id(), &embed(s, i as u64 * 7919)).unwrap();
    }
    w.finish().unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        Fixture::with(embed)
    }

    fn with(embed: Embed) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let tb = treebank();
        let mut buf = Vec::new();
        write_conllu(&tb, &mut buf).unwrap();
        fs::write(root.join("treebank.conllu"), buf).unwrap();
        write_bundle(&root.join("states.bin"), &tb, embed);
        fs::write(root.join("run.toml"), config("")).unwrap();
        Fixture { _dir: dir, root }
    }

    fn cfg(&self) -> PathBuf {
        self.root.join("run.toml")
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn write_config(&self, name: &str, extra: &str) -> PathBuf {
        let p = self.root.join(name);
        fs::write(&p, config(extra)).unwrap();
        p
    }
}

fn config(extra: &str) -> String {
    format!(
        r#"seeds = [0, 1]
workers = 2

[paths]
output_dir = "out"
treebank = "treebank.conllu"
bundle = "states.bin"

[split]
train = 40
dev = 8
test = 20
seed = 3

[train]
lr = 0.01
epochs = 4
batch_size = 8
{extra}
"#
    )
}

fn dprobe(args: &[&str], cfg: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dprobe"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("DPROBE_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_parse_errors() {
    let bin = env!("CARGO_BIN_EXE_dprobe");
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("bogus").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).args(["train"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn validation_failures_exit_1() {
    let f = Fixture::new();
    assert_eq!(code(&dprobe(&["prepare"], &f.root.join("absent.toml"))), 1);

    let bad = f.write_config("bad.toml", "[bogus]\nx = 1\n");
    assert_eq!(code(&dprobe(&["prepare"], &bad)), 1);

    let p = f.root.join("notb.toml");
    fs::write(&p, config("").replace("treebank.conllu", "missing.conllu")).unwrap();
    let o = dprobe(&["prepare"], &p);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.conllu"));

    let big = f.root.join("big.toml");
    fs::write(&big, config("").replace("train = 40", "train = 4000")).unwrap();
    assert_eq!(code(&dprobe(&["prepare"], &big)), 1);

    // Later stages refuse to run before prepare.
    assert_eq!(code(&dprobe(&["train"], &f.cfg())), 1);
    assert_eq!(code(&dprobe(&["evaluate"], &f.cfg())), 1);

    let zero = dprobe(&["prepare", "--workers", "0"], &f.cfg());
    assert_eq!(code(&zero), 1);
}

#[test]
fn prepare_is_deterministic_and_honours_env_override() {
    let f = Fixture::new();
    let stdout = ok(dprobe(&["prepare"], &f.cfg()));
    assert!(stdout.contains("retained dobj+nsubj"), "{stdout}");

    let report = read_json(&f.out().join("prepare/prepare_report.json"));
    assert_eq!(report["parsed_sentences"], 80);
    assert_eq!(report["filter"]["removed_by_rel"]["dep"], 2);
    let keys: Vec<&str> = report["retained_keys"].as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    assert_eq!(keys, ["dobj+nsubj", "nsubj"]);
    assert_eq!(report["retained_sentences"], 75);

    let other = f.root.join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_dprobe"))
        .args(["prepare", "--config"])
        .arg(f.cfg())
        .env("DPROBE_OUTPUT_DIR", &other)
        .output()
        .unwrap();
    ok(o);
    assert_eq!(snapshot(&f.out()), snapshot(&other));

    let manifest = read_json(&f.out().join("manifests/prepare.json"));
    assert_eq!(manifest["command"], "prepare");
    let arts = manifest["artifacts"].as_array().unwrap();
    assert_eq!(arts.len(), 6);
    for a in arts {
        let bytes = fs::read(f.out().join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    let train = parse_conllu(fs::read(f.out().join("prepare/train.conllu")).unwrap().as_slice()).unwrap();
    assert_eq!(train.sentences.len(), 40);
}

#[test]
fn train_evaluate_and_agreement() {
    let f = Fixture::new();
    ok(dprobe(&["prepare"], &f.cfg()));

    let plan = ok(dprobe(&["train", "--dry-run"], &f.cfg()));
    assert_eq!(plan.matches(": train").count(), 6, "{plan}");
    assert!(!f.out().join("probes").exists());

    ok(dprobe(&["train", "--workers", "3"], &f.cfg()));
    let ckpt = f.out().join("probes/seed1/layer2.ckpt");
    assert!(ckpt.is_file());
    assert!(f.out().join("probes/seed0/layer0.history.csv").is_file());
    let trained = snapshot(&f.out().join("probes"));

    // Resuming with unchanged settings keeps every checkpoint.
    let resumed = ok(dprobe(&["train", "--resume"], &f.cfg()));
    assert!(resumed.contains("0 units trained, 6 resumed"), "{resumed}");
    assert_eq!(snapshot(&f.out().join("probes")), trained);

    // A fresh run reproduces the checkpoints exactly.
    ok(dprobe(&["train", "--workers", "1"], &f.cfg()));
    assert_eq!(snapshot(&f.out().join("probes")), trained);

    // Changed training settings: resume refuses, evaluation refuses.
    let changed = f.root.join("changed.toml");
    fs::write(&changed, config("").replace("lr = 0.01", "lr = 0.02")).unwrap();
    let o = dprobe(&["train", "--resume"], &changed);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing to resume"));
    assert_eq!(code(&dprobe(&["evaluate"], &changed)), 1);
    assert_eq!(snapshot(&f.out().join("probes")), trained);

    // Evaluation.
    let eval_cfg = f.write_config(
        "eval.toml",
        "[report]\ntraces = [\"t004\"]\n[evaluate]\nedge_lists = true\ncategories = [\"macro\", \"micro:nsubj\", \"micro:xcomp\"]\n",
    );
    let test = parse_conllu(fs::read(f.out().join("prepare/test.conllu")).unwrap().as_slice()).unwrap().sentences;
    let trace_id = test[0].id().to_string();
    let eval_cfg_text = fs::read_to_string(&eval_cfg).unwrap().replace("t004", &trace_id);
    fs::write(&eval_cfg, eval_cfg_text).unwrap();

    let stdout = ok(dprobe(&["evaluate"], &eval_cfg));
    assert!(stdout.contains("global UUAS by layer"), "{stdout}");
    let ev = f.out().join("evaluate");
    for name in ["global_uuas.csv", "category_uuas.csv", "expected_layers.csv", "expected_layers.json", "expected_layers.svg"] {
        assert!(ev.join(name).is_file(), "{name}");
    }
    assert!(ev.join(format!("traces/{trace_id}.json")).is_file());
    assert!(ev.join(format!("traces/{trace_id}.svg")).is_file());
    assert!(ev.join("predictions/seed0.tsv").is_file());

    let global = fs::read_to_string(ev.join("global_uuas.csv")).unwrap();
    assert_eq!(global.lines().count(), 1 + 2 * 3);
    let rows = read_json(&ev.join("expected_layers.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2 * 3);
    for r in rows {
        if r["category"] == "micro:xcomp" {
            assert!(r["e_mean"].is_null());
            assert!(r["status"].as_str().unwrap().starts_with("invalid"), "{r}");
        }
        let per_seed = r["per_seed"].as_array().unwrap();
        assert_eq!(per_seed.len(), 2);
    }
    let trace = read_json(&ev.join(format!("traces/{trace_id}.json")));
    assert_eq!(trace["layers"].as_array().unwrap().len(), 3);

    let first = snapshot(&ev);
    ok(dprobe(&["evaluate", "--workers", "1"], &eval_cfg));
    assert_eq!(snapshot(&ev), first, "evaluate reruns are byte-identical");

    let manifest = read_json(&f.out().join("manifests/evaluate.json"));
    assert!(manifest["artifacts"].as_array().unwrap().iter().any(|a| a["path"] == "evaluate/expected_layers.csv"));

    agreement(&f);
}

fn agreement(f: &Fixture) {
    let agr_cfg = f.write_config("agr.toml", "[agreement]\ntemplates = { count = 12, seed = 5 }\nbundle = \"agr.bin\"\n");
    let stdout = ok(dprobe(&["agreement"], &agr_cfg));
    assert!(stdout.contains("generated 12 items"), "{stdout}");
    let dir = f.out().join("agreement");
    let tsv = fs::read_to_string(dir.join("sentences.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 24);

    // Items without scores are refused.
    let o = dprobe(&["agreement"], &agr_cfg);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lack pseudo-log-likelihood"));

    let mut items = read_items_json(&dir.join("items.json")).unwrap();
    for (i, it) in items.iter_mut().enumerate() {
        it.pll_gram = Some(-10.0 - i as f64);
        it.pll_ungram = Some(match i % 4 {
            0 => -5.0,
            1 => it.pll_gram.unwrap(),
            _ => -30.0,
        });
    }
    write_items_json(&dir.join("items.json"), &items).unwrap();

    // Missing agreement bundle.
    assert_eq!(code(&dprobe(&["agreement"], &agr_cfg)), 1);

    let gold: Vec<DepSentence> = items.iter().map(|i| i.gold.clone()).collect();
    write_bundle(&f.root.join("agr.bin"), &gold, embed);
    ok(dprobe(&["agreement", "--dry-run"], &agr_cfg));
    assert!(!dir.join("report").exists());

    let stdout = ok(dprobe(&["agreement"], &agr_cfg));
    assert!(stdout.contains("accuracy"), "{stdout}");
    let summary = read_json(&dir.join("report/agreement_summary.json"));
    // i % 4 == 0 fails outright, i % 4 == 1 ties and counts as failure.
    assert_eq!(summary["total"], 12);
    assert_eq!(summary["success"]["n"], 6);
    assert_eq!(summary["failure"]["n"], 6);
    assert_eq!(summary["ties"].as_array().unwrap().len(), 3);
    assert!((summary["accuracy"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    for part in ["success", "failure"] {
        for r in summary[part]["rows"].as_array().unwrap() {
            assert_eq!(r["group"], part);
            assert!(r["n"].as_u64().unwrap() <= 6);
        }
    }
    let traces: Vec<_> = fs::read_dir(dir.join("report/traces")).unwrap().collect();
    assert_eq!(traces.len(), 2 * 2 * 2);
    assert!(dir.join("report/agreement_expected_layers.csv").is_file());

    let excl = f.write_config(
        "agr_excl.toml",
        "[agreement]\ntemplates = { count = 12, seed = 5 }\nbundle = \"agr.bin\"\ntie_policy = \"exclude\"\n",
    );
    ok(dprobe(&["agreement"], &excl));
    let summary = read_json(&dir.join("report/agreement_summary.json"));
    assert_eq!(summary["excluded"], 3);
    assert_eq!(summary["failure"]["n"], 3);
    assert!((summary["accuracy"].as_f64().unwrap() - 6.0 / 9.0).abs() < 1e-12);
}

/// Each token's vector holds the edges on its path from token 0 in `tree`,
/// so distances are square roots of tree distances and the tree is the
/// unique minimum spanning tree.
fn path_vectors(n: usize, tree: &[(usize, usize)]) -> Vec<Vec<f32>> {
    assert_eq!(tree.len(), n - 1);
    let mut vecs: Vec<Option<Vec<f32>>> = vec![None; n];
    vecs[0] = Some(vec![0.0; DIM]);
    while vecs.iter().any(Option::is_none) {
        for (k, &(a, b)) in tree.iter().enumerate() {
            let (from, to) = match (&vecs[a], &vecs[b]) {
                (Some(_), None) => (a, b),
                (None, Some(_)) => (b, a),
                _ => continue,
            };
            let mut v = vecs[from].clone().unwrap();
            v[k] = 1.0;
            vecs[to] = Some(v);
        }
    }
    vecs.into_iter().map(Option::unwrap).collect()
}

/// Layer-by-layer trees for the oracle fixture: transitive clauses get the
/// subject and object phrases right at layer 1 and the rest at layer 2;
/// intransitive ones likewise.
fn staged(s: &DepSentence, _salt: u64) -> SentenceEmbeddings {
    let gold: Vec<(usize, usize)> = s.edges().iter().map(|e| (e.lo(), e.hi())).collect();
    let trees: [Vec<(usize, usize)>; 3] = match s.id().as_bytes()[0] {
        b't' => [
            vec![(1, 4), (0, 4), (0, 3), (3, 5), (2, 5)],
            vec![(0, 1), (3, 4), (1, 3), (3, 5), (2, 3)],
            gold.clone(),
        ],
        b'i' => [vec![(1, 3), (0, 3), (0, 2)], vec![(0, 1), (1, 3), (2, 3)], gold.clone()],
        _ => [gold.clone(), gold.clone(), gold.clone()],
    };
    let layers: Vec<Vec<Vec<f32>>> = trees.iter().map(|t| path_vectors(s.len(), t)).collect();
    SentenceEmbeddings::from_fn(LAYERS + 1, s.len(), DIM, |l, t| layers[l][t].clone())
}

/// Probe for layer `l`: all mixing weight on hidden-state set `l`, identity map.
fn selector(l: usize) -> ProbeParams {
    let mut logits = vec![-1e4f32; l + 1];
    logits[l] = 0.0;
    let mut b = vec![0.0f32; DIM * DIM];
    for i in 0..DIM {
        b[i * DIM + i] = 1.0;
    }
    ProbeParams::new(l, DIM, DIM, logits, 1.0, b).unwrap()
}

#[test]
fn evaluate_matches_hand_computed_tables() {
    let f = Fixture::with(staged);
    ok(dprobe(&["prepare"], &f.cfg()));
    ok(dprobe(&["train"], &f.cfg()));
    for seed in [0, 1] {
        for l in 0..=LAYERS {
            let path = f.out().join(format!("probes/seed{seed}/layer{l}.ckpt"));
            let (meta, _) = load_checkpoint(&path).unwrap();
            save_checkpoint(&path, &selector(l), &meta).unwrap();
        }
    }
    ok(dprobe(&["evaluate"], &f.cfg()));

    let test = parse_conllu(fs::read(f.out().join("prepare/test.conllu")).unwrap().as_slice()).unwrap().sentences;
    let nt = test.iter().filter(|s| s.id().starts_with('t')).count();
    let ni = test.len() - nt;
    assert!(nt > 0 && ni > 0);

    // Global counts: transitive 1/5, 2/5, 5/5; intransitive 0/3, 2/3, 3/3.
    let total = 5 * nt + 3 * ni;
    let correct = [nt, 2 * nt + 2 * ni, total];
    let global = fs::read_to_string(f.out().join("evaluate/global_uuas.csv")).unwrap();
    for line in global.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let l: usize = cols[2].parse().unwrap();
        assert_eq!(cols[4].parse::<usize>().unwrap(), correct[l], "{line}");
        assert_eq!(cols[5].parse::<usize>().unwrap(), total, "{line}");
        let want = correct[l] as f64 / total as f64;
        assert!((cols[3].parse::<f64>().unwrap() - want).abs() < 5e-7, "{line}");
    }

    let rows = read_json(&f.out().join("evaluate/expected_layers.json"));
    let expect = [
        ("dobj+nsubj", "macro", 2.0, nt),
        ("dobj+nsubj", "micro:dobj", 1.0, nt),
        ("dobj+nsubj", "micro:nsubj", 1.0, nt),
        ("nsubj", "macro", 2.0, ni),
        ("nsubj", "micro:nsubj", 1.0, ni),
    ];
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), expect.len());
    for (group, cat, e, n) in expect {
        let r = rows.iter().find(|r| r["group"] == group && r["category"] == cat).unwrap();
        assert_eq!(r["status"], "ok");
        assert_eq!(r["n"].as_u64().unwrap() as usize, n);
        assert!((r["e_mean"].as_f64().unwrap() - e).abs() < 1e-12, "{r}");
        assert_eq!(r["e_std"].as_f64().unwrap(), 0.0);
        assert_eq!(r["valid_seeds"], 2);
    }
}
