use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dprobe_core::corpus::{
    filter_sentences, group_and_prune, parse_conllu, split_dataset, structure_key_with, write_conllu, CorpusError,
    DepSentence, FilterConfig, FilterStats, GroupStat, PruneConfig, StructureSetKey,
};

use super::Options;
use crate::artifacts::{json_bytes, Artifacts};
use crate::config::{RunConfig, SplitConfig};
use crate::invalid;

const SKIPPED_SHOWN: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInfo {
    pub id: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub parsed_sentences: usize,
    pub skipped_sentences: usize,
    pub root_errors: usize,
    /// The first skipped sentences, for inspection.
    pub skipped: Vec<SkippedInfo>,
    pub filter: FilterStats,
    pub groups: Vec<GroupStat>,
    pub retained_keys: Vec<StructureSetKey>,
    pub retained_sentences: usize,
    pub filter_settings: FilterConfig,
    pub prune_settings: PruneConfig,
    pub split_settings: SplitConfig,
}

pub fn read_report(cfg: &RunConfig) -> anyhow::Result<PrepareReport> {
    let path = cfg.output_dir().join("prepare").join("prepare_report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| invalid(format!("{}: {e}; run prepare first", path.display())))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn conllu_bytes(sents: &[DepSentence]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_conllu(sents, &mut buf)?;
    Ok(buf)
}

pub fn run(cfg: &RunConfig, opts: Options) -> anyhow::Result<()> {
    let treebank = cfg.require_file("paths.treebank", cfg.paths.treebank.as_ref())?;
    let out = cfg.output_dir();
    if opts.dry_run {
        println!("prepare: read {}", treebank.display());
        println!(
            "prepare: filter, group (threshold {}{}), split {}/{}/{} with seed {}",
            cfg.prune.threshold,
            if cfg.prune.inclusive { ", inclusive" } else { "" },
            cfg.split.train,
            cfg.split.dev,
            cfg.split.test,
            cfg.split.seed
        );
        println!("prepare: write {}", out.join("prepare").display());
        return Ok(());
    }

    let file = File::open(&treebank).with_context(|| format!("opening {}", treebank.display()))?;
    let parsed = parse_conllu(BufReader::new(file)).with_context(|| format!("reading {}", treebank.display()))?;
    let (filtered, filter_stats) = filter_sentences(&parsed.sentences, &cfg.filter);
    let grouping = match group_and_prune(&filtered, &cfg.prune) {
        Err(CorpusError::EmptyInput) => {
            return Err(invalid(format!("no sentence of {} survives filtering", treebank.display())))
        }
        r => r?,
    };
    let retained_keys: BTreeSet<StructureSetKey> = grouping.groups.keys().cloned().collect();
    let retained: Vec<DepSentence> = filtered
        .iter()
        .filter(|s| retained_keys.contains(&structure_key_with(s, &cfg.prune.key)))
        .cloned()
        .collect();
    let splits = match split_dataset(&retained, cfg.split.sizes(), cfg.split.seed) {
        Err(e @ CorpusError::InsufficientData { .. }) => return Err(invalid(e.to_string())),
        r => r?,
    };

    let report = PrepareReport {
        parsed_sentences: parsed.sentences.len(),
        skipped_sentences: parsed.skipped.len(),
        root_errors: parsed.root_errors(),
        skipped: parsed
            .skipped
            .iter()
            .take(SKIPPED_SHOWN)
            .map(|s| SkippedInfo { id: s.id.clone(), line: s.line, reason: s.reason.clone() })
            .collect(),
        filter: filter_stats,
        groups: grouping.stats.clone(),
        retained_keys: retained_keys.iter().cloned().collect(),
        retained_sentences: retained.len(),
        filter_settings: cfg.filter.clone(),
        prune_settings: cfg.prune.clone(),
        split_settings: cfg.split.clone(),
    };

    let mut art = Artifacts::new(out)?;
    art.write("prepare/train.conllu", &conllu_bytes(&splits.train)?)?;
    art.write("prepare/dev.conllu", &conllu_bytes(&splits.dev)?)?;
    art.write("prepare/test.conllu", &conllu_bytes(&splits.test)?)?;
    let all: Vec<DepSentence> = splits.train.iter().chain(&splits.dev).chain(&splits.test).cloned().collect();
    art.write("prepare/all.conllu", &conllu_bytes(&all)?)?;
    let mut groups = String::from("key,count,fraction,retained\n");
    for g in &grouping.stats {
        let _ = writeln!(groups, "{},{},{:.6},{}", g.key, g.count, g.fraction, g.retained);
    }
    art.write("prepare/groups.csv", groups.as_bytes())?;
    art.write("prepare/prepare_report.json", &json_bytes(&report)?)?;
    art.finish("prepare", &cfg.hash())?;

    println!(
        "prepare: {} parsed ({} skipped, {} root errors), {} after filtering, {} in retained structure sets",
        report.parsed_sentences,
        report.skipped_sentences,
        report.root_errors,
        report.filter.retained,
        report.retained_sentences
    );
    for g in grouping.stats.iter().filter(|g| g.retained) {
        println!("prepare: retained {} ({} sentences, {:.1}%)", g.key, g.count, 100.0 * g.fraction);
    }
    println!(
        "prepare: split {}/{}/{} written to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out.join("prepare").display()
    );
    Ok(())
}
