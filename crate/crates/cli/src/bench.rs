use std::time::Instant;

use anyhow::{bail, Result};
use rece_core::loss;
use rece_core::train::compute_loss;
use rece_core::{memcost, synth, LossKind, ReceParams};

use crate::{BenchArgs, BenchMode};

pub fn run(a: BenchArgs) -> Result<()> {
    if a.m == 0 || a.c < 2 || a.dim == 0 {
        bail!("need m >= 1, c >= 2 and dim >= 1");
    }
    match a.mode {
        BenchMode::Loss => loss_mode(&a),
        BenchMode::Memory => memory_mode(&a),
    }
}

fn grid(a: &BenchArgs) -> Vec<ReceParams> {
    let mut out = Vec::new();
    for &n_c in &a.n_c {
        for &n_ec in &a.n_ec {
            for &rounds in &a.rounds {
                out.push(ReceParams { n_b: a.n_b, n_c, n_ec, rounds, seed: a.seed, ..Default::default() });
            }
        }
    }
    out
}

fn loss_mode(a: &BenchArgs) -> Result<()> {
    let x = synth::random_matrix(a.m, a.dim, 1.0, a.seed);
    let y = synth::random_matrix(a.c, a.dim, 1.0, a.seed.wrapping_add(1));
    let targets = synth::random_targets(a.m, a.c, a.seed.wrapping_add(2));
    let mask = vec![true; a.m];
    let mut kinds = vec![
        LossKind::Ce,
        LossKind::BcePlus { negatives: a.negatives },
        LossKind::CeSampled { negatives: a.negatives },
    ];
    kinds.extend(grid(a).into_iter().map(LossKind::Rece));
    println!("loss\tn_b\tn_c\tn_ec\trounds\tnegatives\tmean_ms\tcomputed_logits");
    for kind in kinds {
        let mut total = 0.0;
        let mut logits = 0;
        for rep in 0..a.reps.max(1) {
            let start = Instant::now();
            let res = compute_loss(&kind, x.view(), y.view(), &targets, &mask, a.seed.wrapping_add(rep as u64))?;
            total += start.elapsed().as_secs_f64();
            logits = res.computed_logits;
        }
        let (nb, nc, nec, r, n) = match kind {
            LossKind::Rece(p) => (p.n_b.to_string(), p.n_c.to_string(), p.n_ec.to_string(), p.rounds.to_string(), "-".into()),
            LossKind::BcePlus { negatives } | LossKind::CeSampled { negatives } => {
                ("-".into(), "-".into(), "-".into(), "-".into(), negatives.to_string())
            }
            LossKind::Ce => ("-".into(), "-".into(), "-".into(), "-".into(), "-".into()),
        };
        println!(
            "{}\t{nb}\t{nc}\t{nec}\t{r}\t{n}\t{:.3}\t{logits}",
            kind.name(),
            1e3 * total / a.reps.max(1) as f64
        );
    }
    Ok(())
}

fn memory_mode(a: &BenchArgs) -> Result<()> {
    let x = synth::random_matrix(a.m, a.dim, 1.0, a.seed);
    let y = synth::random_matrix(a.c, a.dim, 1.0, a.seed.wrapping_add(1));
    let targets = synth::random_targets(a.m, a.c, a.seed.wrapping_add(2));
    let mask = vec![true; a.m];
    println!("n_b\tn_c\tn_ec\trounds\tinstrumented\tmodel_exact\tmodel_interior\tfull\tpeak_model\tinstrumented_over_model\tfull_over_instrumented\tn_b_star");
    for p in grid(a) {
        let est = memcost::peak_elements(&p, a.c, a.m)?;
        let res = loss::rece(x.view(), y.view(), &targets, &p, &mask)?;
        let inst = memcost::instrumented_count(&res);
        println!(
            "{}\t{}\t{}\t{}\t{inst}\t{}\t{}\t{}\t{:.1}\t{:.6}\t{:.6}\t{}",
            p.n_b,
            p.n_c,
            p.n_ec,
            p.rounds,
            est.logit_elements_rece,
            est.logit_elements_rece_interior,
            est.logit_elements_full,
            est.peak_model,
            inst as f64 / est.logit_elements_rece as f64,
            est.logit_elements_full as f64 / inst as f64,
            est.n_b_star,
        );
    }
    Ok(())
}
