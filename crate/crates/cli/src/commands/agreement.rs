use anyhow::Context;

use dprobe_core::mdsviz::{emit_reports, ReportInputs};
use dprobe_core::metrics::{agreement_split_analysis, MetricsError, SeedDecodes, TiePolicy};
use dprobe_core::templates::{generate_agreement_pairs, read_items_json, write_agreement_corpus, AgreementItem, Lexicon};
use dprobe_core::DepSentence;

use super::evaluate::traces;
use super::{decode_all, load_stacks, max_layer, open_bundle, pool, train_hash, Options};
use crate::artifacts::Artifacts;
use crate::config::RunConfig;
use crate::invalid;
use crate::source::align;

fn generate(cfg: &RunConfig, opts: Options) -> anyhow::Result<()> {
    let dir = cfg.output_dir().join("agreement");
    if opts.dry_run {
        println!(
            "agreement: generate {} items (seed {}) into {}",
            cfg.agreement.templates.count,
            cfg.agreement.templates.seed,
            dir.display()
        );
        return Ok(());
    }
    let lexicon = match &cfg.agreement.lexicon_dir {
        Some(d) => Lexicon::from_dir(d).map_err(|e| invalid(format!("lexicon {}: {e}", d.display())))?,
        None => Lexicon::builtin(),
    };
    let items = generate_agreement_pairs(&lexicon, &cfg.agreement.templates).map_err(|e| invalid(e.to_string()))?;
    write_agreement_corpus(&dir, &items)?;
    let mut art = Artifacts::new(cfg.output_dir())?;
    for name in ["sentences.tsv", "gold.conllu", "items.json"] {
        art.record(&dir.join(name))?;
    }
    art.finish("agreement", &cfg.hash())?;
    println!("agreement: generated {} items in {}", items.len(), dir.display());
    println!(
        "agreement: fill pll_gram and pll_ungram in items.json, embed gold.conllu into agreement.bundle, then rerun"
    );
    Ok(())
}

/// Item ids per partition, in item order, under `policy`.
fn partition_ids(items: &[AgreementItem], policy: TiePolicy) -> (Vec<&str>, Vec<&str>) {
    let mut success = Vec::new();
    let mut failure = Vec::new();
    for it in items {
        let (g, u) = (it.pll_gram.unwrap_or(f64::NAN), it.pll_ungram.unwrap_or(f64::NAN));
        let ok = if g == u {
            match policy {
                TiePolicy::Success => true,
                TiePolicy::Failure => false,
                TiePolicy::Exclude => continue,
            }
        } else {
            g > u
        };
        if ok { success.push(it.id.as_str()) } else { failure.push(it.id.as_str()) }
    }
    (success, failure)
}

pub fn run(cfg: &RunConfig, opts: Options) -> anyhow::Result<()> {
    let default_items = cfg.output_dir().join("agreement").join("items.json");
    let items_path = match &cfg.agreement.items {
        Some(p) if !p.is_file() => return Err(invalid(format!("agreement.items {} does not exist", p.display()))),
        Some(p) => p.clone(),
        None if !default_items.is_file() => return generate(cfg, opts),
        None => default_items,
    };

    let items = read_items_json(&items_path).map_err(|e| invalid(format!("{}: {e}", items_path.display())))?;
    if items.is_empty() {
        return Err(invalid(format!("{} lists no items", items_path.display())));
    }
    let missing: Vec<&str> =
        items.iter().filter(|i| i.pll_gram.is_none() || i.pll_ungram.is_none()).map(|i| i.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(invalid(format!(
            "{} of {} items lack pseudo-log-likelihood scores (first: {}); score them before analysis",
            missing.len(),
            items.len(),
            missing.iter().take(5).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    let agr_bundle = cfg.require_file("agreement.bundle", cfg.agreement.bundle.as_ref())?;
    let main_bundle = cfg.require_file("paths.bundle", cfg.paths.bundle.as_ref())?;
    let main = open_bundle(&main_bundle)?;
    let reader = open_bundle(&agr_bundle)?;
    let (a, b) = (main.manifest(), reader.manifest());
    if (a.num_layers, a.hidden_dim) != (b.num_layers, b.hidden_dim) {
        return Err(invalid(format!(
            "agreement bundle has {} layers of width {}, the training bundle {} of width {}",
            b.num_layers, b.hidden_dim, a.num_layers, a.hidden_dim
        )));
    }
    let top = max_layer(cfg, &main)?;
    let report_dir = cfg.output_dir().join("agreement").join("report");
    if opts.dry_run {
        println!(
            "agreement: analyse {} items with {} seed(s) x {} layers, tie policy {:?}",
            items.len(),
            cfg.seeds.len(),
            top + 1,
            cfg.agreement.tie_policy
        );
        println!("agreement: write {}", report_dir.display());
        return Ok(());
    }

    let hash = train_hash(cfg, &main)?;
    let stacks = load_stacks(cfg, top, &hash)?;
    let gold: Vec<DepSentence> = items.iter().map(|i| i.gold.clone()).collect();
    let positions = align(&reader, &gold)?;
    let workers = pool(opts.workers)?;
    let mut seeds = Vec::with_capacity(stacks.len());
    for (seed, probes) in &stacks {
        let sentences = decode_all(&workers, &reader, &gold, &positions, probes)?;
        seeds.push(SeedDecodes { seed: *seed, sentences });
    }
    let analysis = match agreement_split_analysis(&items, &seeds, cfg.agreement.tie_policy, &cfg.evaluate.score) {
        Err(e @ MetricsError::MissingScores(_)) => return Err(invalid(e.to_string())),
        r => r.context("agreement analysis")?,
    };

    let (success, failure) = partition_ids(&items, cfg.agreement.tie_policy);
    let keep = cfg.agreement.traces_per_partition;
    let wanted: Vec<(&DepSentence, usize)> = success
        .iter()
        .take(keep)
        .chain(failure.iter().take(keep))
        .map(|id| {
            let i = items.iter().position(|it| it.id == *id).unwrap();
            (&gold[i], positions[i])
        })
        .collect();
    let trace_list = match stacks.first() {
        Some((_, probes)) if !wanted.is_empty() => workers.install(|| traces(&reader, probes, &wanted, cfg))?,
        _ => Vec::new(),
    };

    let inputs = ReportInputs {
        model: &b.model_name,
        agreement: Some(&analysis),
        traces: &trace_list,
        svg: cfg.report.svg,
        ..Default::default()
    };
    let mut art = Artifacts::new(cfg.output_dir())?;
    for path in emit_reports(&inputs, &report_dir)? {
        art.record(&path)?;
    }
    art.finish("agreement", &cfg.hash())?;

    println!(
        "agreement: {} items, accuracy {:.3} ({} success, {} failure, {} ties, {} excluded)",
        analysis.total,
        analysis.accuracy,
        analysis.success.n,
        analysis.failure.n,
        analysis.ties.len(),
        analysis.excluded
    );
    for r in analysis.success.rows.iter().chain(&analysis.failure.rows) {
        match (r.e_mean, r.e_std) {
            (Some(m), Some(sd)) => println!("agreement: {} {}: E = {m:.3} +/- {sd:.3}", r.group, r.category),
            _ => println!("agreement: {} {}: {}", r.group, r.category, r.status),
        }
    }
    println!("agreement: reports in {}", report_dir.display());
    Ok(())
}
