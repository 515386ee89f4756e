use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use rayon::ThreadPool;

use dprobe_core::corpus::{parse_conllu, DepSentence};
use dprobe_core::embedstore::BundleReader;
use dprobe_core::metrics::{check_probe_stack, decode_layers, DecodedSentence};
use dprobe_core::probe::{load_checkpoint, ProbeParams};

use crate::config::{sha256_file, RunConfig};
use crate::invalid;

pub mod agreement;
pub mod evaluate;
pub mod prepare;
pub mod train;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub workers: usize,
    pub resume: bool,
    pub dry_run: bool,
}

pub fn pool(workers: usize) -> anyhow::Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("starting worker pool")
}

pub fn read_conllu(path: &Path) -> anyhow::Result<Vec<DepSentence>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(parse_conllu(BufReader::new(file))?.sentences)
}

pub fn prepared(cfg: &RunConfig, split: &str) -> anyhow::Result<PathBuf> {
    let p = cfg.output_dir().join("prepare").join(format!("{split}.conllu"));
    if !p.is_file() {
        return Err(invalid(format!("{} not found; run prepare first", p.display())));
    }
    Ok(p)
}

pub fn checkpoint_path(out: &Path, seed: u64, layer: usize) -> PathBuf {
    out.join("probes").join(format!("seed{seed}")).join(format!("layer{layer}.ckpt"))
}

pub fn open_bundle(path: &Path) -> anyhow::Result<BundleReader> {
    BundleReader::open(path).with_context(|| format!("opening bundle {}", path.display()))
}

/// Highest probed layer: the configured cap, or the bundle's last layer.
pub fn max_layer(cfg: &RunConfig, reader: &BundleReader) -> anyhow::Result<usize> {
    let last = reader.manifest().num_layers;
    match cfg.train.max_layer {
        Some(m) if m > last => Err(invalid(format!("train.max_layer {m} exceeds the bundle's {last} layers"))),
        Some(m) => Ok(m),
        None => Ok(last),
    }
}

/// Hash stored in every checkpoint: training settings plus the identity of
/// the prepared splits and the bundle.
pub fn train_hash(cfg: &RunConfig, reader: &BundleReader) -> anyhow::Result<String> {
    let m = reader.manifest();
    let inputs = serde_json::json!({
        "train_conllu": sha256_file(&prepared(cfg, "train")?)?,
        "dev_conllu": sha256_file(&prepared(cfg, "dev")?)?,
        "bundle": {
            "model_name": m.model_name,
            "num_layers": m.num_layers,
            "hidden_dim": m.hidden_dim,
            "pooling": m.pooling,
            "payload_bytes": m.payload_bytes(),
        },
    });
    Ok(cfg.train_hash(&inputs))
}

/// Loads the probe stack (layers `0..=max_layer`) of every configured seed,
/// refusing checkpoints trained under different settings.
pub fn load_stacks(cfg: &RunConfig, max_layer: usize, hash: &str) -> anyhow::Result<Vec<(u64, Vec<ProbeParams>)>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let stack = (0..=max_layer)
                .map(|l| {
                    let path = checkpoint_path(cfg.output_dir(), seed, l);
                    if !path.is_file() {
                        return Err(invalid(format!("{} not found; run train first", path.display())));
                    }
                    let (meta, params) =
                        load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
                    if meta.config_hash != hash {
                        return Err(invalid(format!(
                            "{} was trained under config hash {}, current settings hash to {hash}; retrain",
                            path.display(),
                            meta.config_hash
                        )));
                    }
                    Ok(params)
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            check_probe_stack(&stack)?;
            Ok((seed, stack))
        })
        .collect()
}

/// Decodes every sentence with one probe stack, reading hidden states from
/// the bundle in parallel. Output order follows `sentences`.
pub fn decode_all(
    pool: &ThreadPool,
    reader: &BundleReader,
    sentences: &[DepSentence],
    positions: &[usize],
    probes: &[ProbeParams],
) -> anyhow::Result<Vec<DecodedSentence>> {
    let layers = probes.len();
    pool.install(|| {
        sentences
            .par_iter()
            .zip(positions)
            .map(|(s, &pos)| {
                let emb = reader.read_layers(pos, layers)?;
                Ok(decode_layers(probes, s, &emb)?)
            })
            .collect()
    })
}
