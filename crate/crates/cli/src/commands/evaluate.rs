use std::fmt::Write as _;

use anyhow::Context;

use dprobe_core::corpus::{categories_for, structure_key_with};
use dprobe_core::mdsviz::{derivation_trace, emit_reports, DerivationTrace, ReportInputs};
use dprobe_core::metrics::{global_curves, layer_scores, structure_set_report_for, SeedDecodes};
use dprobe_core::{Category, DepSentence, LayerScoreSeries, ProbeParams};

use super::prepare::read_report;
use super::{decode_all, load_stacks, max_layer, open_bundle, pool, prepared, read_conllu, train_hash, Options};
use crate::artifacts::Artifacts;
use crate::config::RunConfig;
use crate::invalid;
use crate::source::align;

pub fn trace_categories(sentence: &DepSentence, cfg: &RunConfig) -> Vec<Category> {
    let mut cats = vec![Category::Global];
    cats.extend(categories_for(&structure_key_with(sentence, &cfg.evaluate.score.key)));
    cats
}

pub fn traces(
    reader: &dprobe_core::BundleReader,
    probes: &[ProbeParams],
    sentences: &[(&DepSentence, usize)],
    cfg: &RunConfig,
) -> anyhow::Result<Vec<DerivationTrace>> {
    sentences
        .iter()
        .map(|&(s, pos)| {
            let emb = reader.read_layers(pos, probes.len())?;
            derivation_trace(probes, s, &emb, &trace_categories(s, cfg), &cfg.report.trace)
                .with_context(|| format!("tracing {}", s.id()))
        })
        .collect()
}

pub fn run(cfg: &RunConfig, opts: Options) -> anyhow::Result<()> {
    let bundle = cfg.require_file("paths.bundle", cfg.paths.bundle.as_ref())?;
    let reader = open_bundle(&bundle)?;
    let top = max_layer(cfg, &reader)?;
    let test_path = prepared(cfg, "test")?;
    let report = read_report(cfg)?;
    let out = cfg.output_dir();
    if opts.dry_run {
        println!(
            "evaluate: decode {} with {} seed(s) x {} layers, {} structure set(s)",
            test_path.display(),
            cfg.seeds.len(),
            top + 1,
            report.retained_keys.len()
        );
        println!("evaluate: write {}", out.join("evaluate").display());
        return Ok(());
    }

    let hash = train_hash(cfg, &reader)?;
    let stacks = load_stacks(cfg, top, &hash)?;
    let test = read_conllu(&test_path)?;
    if test.is_empty() {
        return Err(invalid("the test split is empty"));
    }
    let positions = align(&reader, &test)?;
    let workers = pool(opts.workers)?;

    let mut seeds = Vec::with_capacity(stacks.len());
    for (seed, probes) in &stacks {
        let sentences = decode_all(&workers, &reader, &test, &positions, probes)?;
        seeds.push(SeedDecodes { seed: *seed, sentences });
    }
    let score = &cfg.evaluate.score;
    let global = global_curves(&seeds, score)?;

    let mut series: Vec<(u64, LayerScoreSeries)> = Vec::new();
    for key in &report.retained_keys {
        for cat in categories_for(key) {
            for s in &seeds {
                // Sets without test sentences show up as invalid rows below.
                if let Ok(ls) = layer_scores(&s.sentences, &cat, Some(key), score) {
                    series.push((s.seed, ls));
                }
            }
        }
    }
    let rows = structure_set_report_for(&report.retained_keys, cfg.evaluate.categories.as_deref(), &seeds, score);

    let mut wanted = Vec::new();
    for id in &cfg.report.traces {
        let i = test
            .iter()
            .position(|s| s.id() == id)
            .ok_or_else(|| invalid(format!("report.traces: {id} is not a test sentence")))?;
        wanted.push((&test[i], positions[i]));
    }
    let trace_list = match stacks.first() {
        Some((_, probes)) if !wanted.is_empty() => workers.install(|| traces(&reader, probes, &wanted, cfg))?,
        _ => Vec::new(),
    };

    let inputs = ReportInputs {
        model: &reader.manifest().model_name,
        global: &global,
        series: &series,
        expected_layers: &rows,
        agreement: None,
        traces: &trace_list,
        svg: cfg.report.svg,
    };
    let mut art = Artifacts::new(out)?;
    for path in emit_reports(&inputs, &out.join("evaluate"))? {
        art.record(&path)?;
    }
    if cfg.evaluate.edge_lists {
        for s in &seeds {
            let mut body = String::from("sentence_id\tlayer\tedges\n");
            for d in &s.sentences {
                for (l, t) in d.trees.iter().enumerate() {
                    let edges: Vec<String> = t.edges.iter().map(|e| format!("{}-{}", e.lo(), e.hi())).collect();
                    let _ = writeln!(body, "{}\t{l}\t{}", d.sentence.id(), edges.join(" "));
                }
            }
            art.write(&format!("evaluate/predictions/seed{}.tsv", s.seed), body.as_bytes())?;
        }
    }
    art.finish("evaluate", &cfg.hash())?;

    let layers = top + 1;
    let mean: Vec<String> = (0..layers)
        .map(|l| format!("{:.3}", global.iter().map(|(_, g)| g.scores[l]).sum::<f64>() / global.len() as f64))
        .collect();
    println!("evaluate: {} test sentences, global UUAS by layer [{}]", test.len(), mean.join(" "));
    for r in &rows {
        match (r.e_mean, r.e_std) {
            (Some(m), Some(sd)) => println!("evaluate: {} {}: E = {m:.3} +/- {sd:.3} (n = {})", r.group, r.category, r.n),
            _ => println!("evaluate: {} {}: {}", r.group, r.category, r.status),
        }
    }
    println!("evaluate: reports in {}", out.join("evaluate").display());
    Ok(())
}
