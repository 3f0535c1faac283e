//! Grid sweeps: expand a grid file, train each config, append result rows
//! and summarise the best NDCG@10 per logit budget.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use rece_core::data;
use rece_core::train::{self, TrainConfig};
use rece_core::LossKind;
use sha2::{Digest, Sha256};

use crate::{ModelArgs, SweepArgs};

pub const HEADER: [&str; 17] = [
    "config_hash",
    "loss",
    "dim",
    "batch_size",
    "max_len",
    "negatives",
    "n_b",
    "n_c",
    "n_ec",
    "rounds",
    "lr",
    "seed",
    "epochs_run",
    "ndcg@10",
    "hr@10",
    "logit_elements",
    "wall_time_seconds",
];

const KEYS: [&str; 14] = [
    "loss",
    "dim",
    "batch_size",
    "max_len",
    "n_b",
    "n_c",
    "n_ec",
    "rounds",
    "negatives",
    "seed",
    "lr",
    "epochs",
    "patience",
    "include_seen",
];

pub fn parse_shard(s: &str) -> Result<(usize, usize), String> {
    let (i, n) = s.split_once('/').ok_or("expected i/n")?;
    let i: usize = i.trim().parse().map_err(|_| format!("bad shard index {i:?}"))?;
    let n: usize = n.trim().parse().map_err(|_| format!("bad shard count {n:?}"))?;
    if n == 0 || i >= n {
        return Err(format!("shard index must be below the shard count, got {i}/{n}"));
    }
    Ok((i, n))
}

/// Expands a grid file into one key/value map per run, in file order.
pub fn parse_grid(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut runs = Vec::new();
    let mut block: Vec<(String, Vec<String>)> = Vec::new();
    let flush = |block: &mut Vec<(String, Vec<String>)>, runs: &mut Vec<BTreeMap<String, String>>| {
        if block.is_empty() {
            return;
        }
        let mut combos = vec![BTreeMap::new()];
        for (key, values) in block.iter() {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c: BTreeMap<String, String> = c.clone();
                        c.insert(key.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        runs.extend(combos);
        block.clear();
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut block, &mut runs);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("grid line {}: expected key=value", n + 1))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            bail!("grid line {}: unknown key {key:?}", n + 1);
        }
        if block.iter().any(|(k, _)| k == key) {
            bail!("grid line {}: key {key:?} repeated in one block", n + 1);
        }
        let values: Vec<String> = value.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            bail!("grid line {}: no values for {key:?}", n + 1);
        }
        block.push((key.to_owned(), values));
    }
    flush(&mut block, &mut runs);
    Ok(runs)
}

#[derive(Parser)]
#[command(name = "grid")]
struct GridRun {
    #[command(flatten)]
    model: ModelArgs,
}

/// Resolves a grid entry through the same flags and defaults as `train`.
pub fn resolve(entry: &BTreeMap<String, String>, n_items: usize) -> Result<TrainConfig> {
    let mut argv = vec!["grid".to_owned()];
    for (k, v) in entry {
        let flag = format!("--{}", k.replace('_', "-"));
        match k.as_str() {
            "include_seen" => match v.as_str() {
                "true" => argv.push(flag),
                "false" => {}
                other => bail!("include_seen must be true or false, got {other:?}"),
            },
            "epochs" | "patience" | "lr" | "seed" | "loss" | "dim" | "batch_size" | "max_len" | "n_b" | "n_c"
            | "n_ec" | "rounds" | "negatives" => {
                argv.push(flag);
                argv.push(v.clone());
            }
            other => bail!("unknown key {other:?}"),
        }
    }
    let run = GridRun::try_parse_from(&argv).map_err(|e| anyhow::anyhow!("invalid grid entry: {e}"))?;
    run.model.to_config(n_items)
}

pub fn config_hash(config: &TrainConfig) -> String {
    let digest = Sha256::digest(config.to_kv().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn completed_hashes(path: &Path) -> Result<HashSet<String>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(HashSet::new()),
        Some(h) if h == HEADER.join("\t") => {}
        Some(_) => bail!("{} exists with a different header", path.display()),
    }
    Ok(lines.filter_map(|l| l.split('\t').next()).map(str::to_owned).collect())
}

fn row(hash: &str, c: &TrainConfig, epochs: usize, ndcg: f64, hr: f64, logits: usize, secs: f64) -> String {
    let dash = || "-".to_owned();
    let (negatives, n_b, n_c, n_ec, rounds) = match c.loss {
        LossKind::Ce => (dash(), dash(), dash(), dash(), dash()),
        LossKind::BcePlus { negatives } | LossKind::CeSampled { negatives } => {
            (negatives.to_string(), dash(), dash(), dash(), dash())
        }
        LossKind::Rece(p) => (dash(), p.n_b.to_string(), p.n_c.to_string(), p.n_ec.to_string(), p.rounds.to_string()),
    };
    [
        hash.to_owned(),
        c.loss.name().to_owned(),
        c.dim.to_string(),
        c.batch_size.to_string(),
        c.max_len.to_string(),
        negatives,
        n_b,
        n_c,
        n_ec,
        rounds,
        c.lr.to_string(),
        c.seed.to_string(),
        epochs.to_string(),
        format!("{ndcg:.6}"),
        format!("{hr:.6}"),
        logits.to_string(),
        format!("{secs:.3}"),
    ]
    .join("\t")
}

/// Rows with strictly better NDCG@10 than every row at a smaller or equal
/// logit budget, by increasing budget.
pub fn pareto_front(table: &str) -> Vec<(usize, f64, String)> {
    let idx = |name: &str| HEADER.iter().position(|h| *h == name).unwrap();
    let (i_hash, i_ndcg, i_logits) = (idx("config_hash"), idx("ndcg@10"), idx("logit_elements"));
    let mut points: Vec<(usize, f64, String)> = table
        .lines()
        .skip(1)
        .filter_map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            Some((cols.get(i_logits)?.parse().ok()?, cols.get(i_ndcg)?.parse().ok()?, cols.get(i_hash)?.to_string()))
        })
        .collect();
    points.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut best = f64::NEG_INFINITY;
    points.into_iter().filter(|p| p.1 > best && { best = p.1; true }).collect()
}

pub fn pareto_path(out: &Path) -> PathBuf {
    out.with_extension("pareto.tsv")
}

pub fn run(a: SweepArgs) -> Result<()> {
    let grid_text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let entries = parse_grid(&grid_text)?;
    let split = data::read_manifest(&a.data).with_context(|| format!("reading split manifest in {}", a.data.display()))?;
    let configs: Vec<TrainConfig> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| resolve(e, split.n_items()).with_context(|| format!("grid entry {}", i + 1)))
        .collect::<Result<_>>()?;

    let mut done = completed_hashes(&a.out)?;
    if !a.out.exists() || fs::metadata(&a.out)?.len() == 0 {
        fs::write(&a.out, format!("{}\n", HEADER.join("\t")))?;
    }
    for (i, config) in configs.iter().enumerate() {
        if let Some((s, n)) = a.shard {
            if i % n != s {
                continue;
            }
        }
        let hash = config_hash(config);
        if !done.insert(hash.clone()) {
            eprintln!("skip {hash} (already in table)");
            continue;
        }
        let start = Instant::now();
        let out = train::train(&split, config)?;
        let report = train::test_metrics(&out.params, &split, &[10], config.exclude_seen);
        let line = row(
            &hash,
            config,
            out.history.len(),
            report.ndcg_at(10),
            report.hr_at(10),
            out.peak_step_logits(),
            start.elapsed().as_secs_f64(),
        );
        println!("{line}");
        let mut f = OpenOptions::new().append(true).open(&a.out)?;
        writeln!(f, "{line}")?;
    }

    let table = fs::read_to_string(&a.out)?;
    let mut front = String::from("logit_elements\tndcg@10\tconfig_hash\n");
    for (logits, ndcg, hash) in pareto_front(&table) {
        front.push_str(&format!("{logits}\t{ndcg:.6}\t{hash}\n"));
    }
    fs::write(pareto_path(&a.out), front)?;
    Ok(())
}
