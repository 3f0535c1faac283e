use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rece_core::data::{self, SplitBundle};
use rece_core::train::{self, TrainConfig};
use rece_core::{eval, memcost, synth, LossKind, ReceParams};

use crate::{EvalArgs, EvalSplit, LossName, ModelArgs, PrepareArgs, SplitKind, SynthArgs, TrainArgs};

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let log = data::ingest(&a.input, a.format).with_context(|| format!("reading {}", a.input.display()))?;
    let log = data::preprocess(&log, a.min_item_count, a.min_user_count)?;
    let split = match a.split {
        SplitKind::Temporal => data::temporal_split(&log, a.quantile)?,
        SplitKind::Loo => data::leave_one_out_split(&log)?,
    };
    data::write_manifest(&split, &a.out)?;
    let mut stats = log.stats().to_string();
    stats.push('\n');
    stats.push_str(&format!(
        "train_users={}\neval_users={}\n",
        split.train.len(),
        split.test.len()
    ));
    if let Some(ts) = split.threshold_ts {
        stats.push_str(&format!("threshold_ts={ts}\n"));
    }
    fs::write(a.out.join(data::STATS_FILE), &stats)?;
    print!("{stats}");
    Ok(())
}

impl ModelArgs {
    /// Resolves defaults that depend on the catalog size.
    pub fn to_config(&self, n_items: usize) -> Result<TrainConfig> {
        let loss = match self.loss {
            LossName::Ce => LossKind::Ce,
            LossName::BcePlus => LossKind::BcePlus { negatives: self.negatives },
            LossName::CeSampled => LossKind::CeSampled { negatives: self.negatives },
            LossName::Rece => {
                let rows = self.batch_size * self.max_len.saturating_sub(1).max(1);
                let n_b = match self.n_b {
                    Some(n) => n,
                    None => memcost::optimal_n_b(1.0, self.n_ec, n_items, rows)?,
                };
                LossKind::Rece(ReceParams {
                    n_b,
                    n_c: self.n_c.unwrap_or(n_b),
                    n_ec: self.n_ec,
                    rounds: self.rounds,
                    seed: self.seed,
                    ..Default::default()
                })
            }
        };
        let config = TrainConfig {
            loss,
            dim: self.dim,
            batch_size: self.batch_size,
            max_len: self.max_len,
            lr: self.lr,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            exclude_seen: !self.include_seen,
        };
        config.validate()?;
        Ok(config)
    }
}

fn load_split(dir: &std::path::Path) -> Result<SplitBundle> {
    data::read_manifest(dir).with_context(|| format!("reading split manifest in {}", dir.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let split = load_split(&a.data)?;
    let config = a.model.to_config(split.n_items())?;
    eprint!("{}", config.to_kv());
    let out = train::train_with(&split, &config, |h| {
        println!(
            "epoch={} train_loss={:.6} val_ndcg@10={:.6} peak_logits={}",
            h.epoch, h.train_loss, h.val_ndcg10, h.peak_step_logits
        );
    })?;
    train::save_checkpoint(&a.out, &out.params, &config.to_kv())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("best_epoch={} best_val_ndcg@10={:.6}", out.best_epoch, out.best_val_ndcg10());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (params, _) = train::load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let split = load_split(&a.data)?;
    if params.n_items() != split.n_items() {
        bail!(
            "checkpoint has {} items but the split has {}",
            params.n_items(),
            split.n_items()
        );
    }
    if a.k.contains(&0) {
        bail!("K values must be at least 1");
    }
    let cases = match a.on {
        EvalSplit::Test => &split.test,
        EvalSplit::Validation => &split.validation,
    };
    let report = eval::evaluate(&params, cases, &a.k, !a.include_seen);
    let out = a.out.unwrap_or_else(|| {
        let mut p = a.ckpt.clone().into_os_string();
        p.push(".eval.txt");
        PathBuf::from(p)
    });
    fs::write(&out, report.to_string()).with_context(|| format!("writing {}", out.display()))?;
    print!("{report}");
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = synth::MarkovConfig {
        n_items: a.items,
        n_users: a.users,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
        ..Default::default()
    };
    let log = synth::markov_log(&cfg)?;
    let mut text = String::with_capacity(log.len() * 16);
    for r in &log.records {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            log.users[r.user as usize], log.items[r.item as usize], r.timestamp
        ));
    }
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", log.stats());
    println!();
    Ok(())
}
