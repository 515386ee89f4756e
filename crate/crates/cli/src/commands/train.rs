use rayon::prelude::*;

use dprobe_core::probe::{load_checkpoint, save_checkpoint, train_probe, write_history_csv, CheckpointMeta};

use super::{checkpoint_path, max_layer, open_bundle, pool, prepared, read_conllu, train_hash, Options};
use crate::artifacts::{Artifacts, CODE_VERSION};
use crate::config::RunConfig;
use crate::invalid;
use crate::source::{align, gold_all, BundleSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plan {
    Train,
    Done,
}

pub fn run(cfg: &RunConfig, opts: Options) -> anyhow::Result<()> {
    let bundle = cfg.require_file("paths.bundle", cfg.paths.bundle.as_ref())?;
    let reader = open_bundle(&bundle)?;
    let top = max_layer(cfg, &reader)?;
    let hash = train_hash(cfg, &reader)?;
    let out = cfg.output_dir();

    let mut units = Vec::new();
    let mut stale = Vec::new();
    for &seed in &cfg.seeds {
        for layer in 0..=top {
            let path = checkpoint_path(out, seed, layer);
            let plan = if opts.resume && path.is_file() {
                match load_checkpoint(&path) {
                    Ok((meta, _)) if meta.config_hash == hash && meta.seed == seed && meta.layer == layer => Plan::Done,
                    Ok((meta, _)) => {
                        stale.push(format!("{} (config hash {})", path.display(), meta.config_hash));
                        Plan::Train
                    }
                    Err(e) => {
                        stale.push(format!("{} ({e})", path.display()));
                        Plan::Train
                    }
                }
            } else {
                Plan::Train
            };
            units.push((seed, layer, plan));
        }
    }
    if !stale.is_empty() {
        return Err(invalid(format!(
            "refusing to resume: checkpoints do not match the current config hash {hash}:\n  {}",
            stale.join("\n  ")
        )));
    }

    let todo: Vec<(u64, usize)> = units.iter().filter(|u| u.2 == Plan::Train).map(|u| (u.0, u.1)).collect();
    if opts.dry_run {
        for (seed, layer, plan) in &units {
            let what = if *plan == Plan::Train { "train" } else { "skip (checkpoint present)" };
            println!("train: seed {seed} layer {layer}: {what}");
        }
        println!("train: {} of {} units to run with {} workers", todo.len(), units.len(), opts.workers);
        return Ok(());
    }

    let train = read_conllu(&prepared(cfg, "train")?)?;
    let dev = read_conllu(&prepared(cfg, "dev")?)?;
    let train_pos = align(&reader, &train)?;
    let dev_pos = align(&reader, &dev)?;
    let train_gold = gold_all(&train);
    let dev_gold = gold_all(&dev);

    let workers = pool(opts.workers)?;
    let results: Vec<anyhow::Result<()>> = workers.install(|| {
        todo.par_iter()
            .map(|&(seed, layer)| {
                let train_src = BundleSource::new(&reader, &train_pos, &train_gold, layer + 1);
                let dev_src = BundleSource::new(&reader, &dev_pos, &dev_gold, layer + 1);
                let outcome = train_probe(layer, &train_src, &dev_src, &cfg.train.for_seed(seed))?;
                let mut meta = CheckpointMeta::for_params(&outcome.params, seed, &hash, CODE_VERSION);
                meta.best_epoch = outcome.best_epoch;
                meta.dev_loss = Some(outcome.best_dev_loss);
                let path = checkpoint_path(out, seed, layer);
                std::fs::create_dir_all(path.parent().unwrap())?;
                write_history_csv(&path.with_extension("history.csv"), &outcome.history)?;
                save_checkpoint(&path, &outcome.params, &meta)?;
                eprintln!(
                    "train: seed {seed} layer {layer}: best epoch {} dev loss {:.6}",
                    outcome.best_epoch, outcome.best_dev_loss
                );
                Ok(())
            })
            .collect()
    });
    let failures: Vec<String> = results.into_iter().filter_map(|r| r.err().map(|e| format!("{e:#}"))).collect();
    if !failures.is_empty() {
        anyhow::bail!("{} training unit(s) failed:\n  {}", failures.len(), failures.join("\n  "));
    }

    let mut art = Artifacts::new(out)?;
    for (seed, layer, _) in &units {
        let path = checkpoint_path(out, *seed, *layer);
        art.record(&path)?;
        let history = path.with_extension("history.csv");
        if history.is_file() {
            art.record(&history)?;
        }
    }
    art.finish("train", &cfg.hash())?;
    println!(
        "train: {} units trained, {} resumed, checkpoints under {}",
        todo.len(),
        units.len() - todo.len(),
        out.join("probes").display()
    );
    Ok(())
}
