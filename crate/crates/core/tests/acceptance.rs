//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Set `RECE_BEER_TSV` to a BeerAdvocate interaction file (user, item,
//! timestamp) to run the dataset statistics check; it is skipped otherwise.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rece_core::data::{self, Format};
use rece_core::eval::{self, PopularityRanker, RandomRanker};
use rece_core::loss::{self, Negatives};
use rece_core::partition::build_multi_round_plan;
use rece_core::synth::{self, ClusterConfig, MarkovConfig};
use rece_core::train::{self, EncoderParams, TrainConfig};
use rece_core::{memcost, oracle, LossKind, ReceParams, RoundSeeding};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<f64> {
    synth::random_matrix(rows, cols, std, seed)
}

fn random_targets(m: usize, c: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..m).map(|_| r.random_range(0..c)).collect()
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let norm = b.mapv(|v| v * v).sum().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn within(t: Instant, limit: Duration) -> (bool, f64) {
    let s = t.elapsed().as_secs_f64();
    (s < limit.as_secs_f64(), s)
}

fn exhaustive_limit() -> Outcome {
    let t = Instant::now();
    let mut r = rng(101);
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let m = r.random_range(16..=256);
        let c = r.random_range(32..=512);
        let d = r.random_range(4..=16);
        let x = gaussian(m, d, 1.0, 1000 + i);
        let y = gaussian(c, d, 1.0, 2000 + i);
        let targets = random_targets(m, c, &mut r);
        let mask: Vec<bool> = (0..m).map(|_| r.random::<f64>() > 0.1).collect();
        if !mask.iter().any(|&v| v) {
            continue;
        }
        let p = ReceParams { n_b: r.random_range(1..=8), n_c: 1, n_ec: 0, rounds: 1, seed: i, ..Default::default() };
        let a = loss::rece(x.view(), y.view(), &targets, &p, &mask).unwrap();
        let b = loss::ce_full(x.view(), y.view(), &targets, &mask).unwrap();
        worst_loss = worst_loss.max((a.loss - b.loss).abs());
        worst_grad = worst_grad
            .max(rel_err(&a.grad_x, &b.grad_x))
            .max(rel_err(&a.grad_y.to_dense(c), &b.grad_y.to_dense(c)));
    }
    let (fast, secs) = within(t, Duration::from_secs(30));
    outcome(
        worst_loss <= 1e-6 && worst_grad <= 1e-6 && fast,
        format!("max |dloss| = {worst_loss:.2e} (<= 1e-6), max grad rel err = {worst_grad:.2e} (<= 1e-6), {secs:.1}s (< 30s)"),
    )
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let step = 1e-5;
    let (m, c, d) = (24, 64, 6);
    let mut r = rng(202);
    let x = gaussian(m, d, 1.0, 1);
    let y = gaussian(c, d, 1.0, 2);
    let targets = random_targets(m, c, &mut r);
    let mut mask = vec![true; m];
    mask[3] = false;
    let negs = Negatives::sample(&targets, &mask, c, 10, &mut rng(5)).unwrap();
    let p = ReceParams { n_b: 4, n_c: 4, n_ec: 1, rounds: 3, seed: 9, ..Default::default() };
    let (plan, counts) = build_multi_round_plan(x.view(), y.view(), &mask, &p).unwrap();

    type LossFn<'a> = Box<dyn Fn(ArrayView2<f64>, ArrayView2<f64>) -> loss::LossResult + 'a>;
    let cases: Vec<(&str, LossFn)> = vec![
        ("ce", Box::new(|x, y| loss::ce_full(x, y, &targets, &mask).unwrap())),
        ("bce+", Box::new(|x, y| loss::bce_plus(x, y, &targets, &negs, &mask).unwrap())),
        ("ce-", Box::new(|x, y| loss::ce_sampled(x, y, &targets, &negs, &mask).unwrap())),
        ("rece", Box::new(|x, y| loss::rece_with_plan(x, y, &targets, &mask, &plan, &counts, true).unwrap())),
    ];
    let mut errs = Vec::new();
    for (name, f) in &cases {
        let res = f(x.view(), y.view());
        let (gx, gy) = oracle::finite_diff_grad(|a, b| f(a, b).loss, x.view(), y.view(), step);
        let e = rel_err(&res.grad_x, &gx).max(rel_err(&res.grad_y.to_dense(c), &gy));
        errs.push((name.to_string(), e));
    }

    // encode followed by each loss, differentiated with respect to every
    // encoder parameter
    let split = data::leave_one_out_split(
        &synth::markov_log(&MarkovConfig { n_items: 40, n_users: 6, min_len: 5, max_len: 9, ..Default::default() }).unwrap(),
    )
    .unwrap();
    let seqs: Vec<&data::UserSequence> = split.train.iter().collect();
    let batch = data::SequenceBatch::from_sequences(&seqs, 8);
    let mut params = EncoderParams::init(split.n_items(), 5, 3);
    params.emb.mapv_inplace(|v| v * 30.0);
    params.proj.mapv_inplace(|v| v * 30.0);
    params.bias.mapv_inplace(|v| v * 30.0);
    let (n, dim) = (params.n_items(), params.dim());
    let flat = |p: &EncoderParams| -> Vec<f64> { p.emb.iter().chain(p.proj.iter()).chain(p.bias.iter()).copied().collect() };
    let unflat = |v: &[f64]| EncoderParams {
        emb: Array2::from_shape_vec((n, dim), v[..n * dim].to_vec()).unwrap(),
        proj: Array2::from_shape_vec((dim, dim), v[n * dim..n * dim + dim * dim].to_vec()).unwrap(),
        bias: Array1::from_vec(v[n * dim + dim * dim..].to_vec()),
    };
    let bt = batch.flat_targets();
    let bm = batch.flat_mask();
    let enc0 = train::encode(&batch, &params);
    let bnegs = Negatives::sample(&bt, &bm, n, 8, &mut rng(6)).unwrap();
    let bp = ReceParams { n_b: 3, n_c: 3, n_ec: 1, rounds: 2, seed: 4, ..Default::default() };
    let (bplan, bcounts) = build_multi_round_plan(enc0.x.view(), params.emb.view(), &bm, &bp).unwrap();
    let kinds = ["ce", "bce+", "ce-", "rece"];
    for kind in kinds {
        let eval_at = |p: &EncoderParams| -> (loss::LossResult, train::Encoded) {
            let enc = train::encode(&batch, p);
            let (xv, yv) = (enc.x.view(), p.emb.view());
            let res = match kind {
                "ce" => loss::ce_full(xv, yv, &bt, &bm),
                "bce+" => loss::bce_plus(xv, yv, &bt, &bnegs, &bm),
                "ce-" => loss::ce_sampled(xv, yv, &bt, &bnegs, &bm),
                _ => loss::rece_with_plan(xv, yv, &bt, &bm, &bplan, &bcounts, true),
            }
            .unwrap();
            (res, enc)
        };
        let (res, enc) = eval_at(&params);
        let g = train::backward(&enc, &res, &params);
        let analytic = flat(&EncoderParams { emb: g.emb, proj: g.proj, bias: g.bias });
        let numeric = oracle::finite_diff_vec(|v| eval_at(&unflat(v)).0.loss, &flat(&params), step);
        errs.push((format!("encode+{kind}"), rel_err_vec(&analytic, &numeric)));
    }

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let (fast, secs) = within(t, Duration::from_secs(120));
    let listing: Vec<String> = errs.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    outcome(worst <= 1e-4 && fast, format!("rel err {} (<= 1e-4), {secs:.1}s (< 120s)", listing.join(" ")))
}

fn subset_bound() -> Outcome {
    let mut r = rng(303);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..100 {
        let m = r.random_range(8..=128);
        let c = r.random_range(8..=256);
        let d = r.random_range(2..=12);
        let x = gaussian(m, d, r.random_range(0.5..2.0), 3000 + i);
        let y = gaussian(c, d, 1.0, 4000 + i);
        let targets = random_targets(m, c, &mut r);
        let mask = vec![true; m];
        let n_c = r.random_range(1..=m.min(8));
        let p = ReceParams {
            n_b: r.random_range(1..=16),
            n_c,
            n_ec: r.random_range(0..=2),
            rounds: r.random_range(1..=4),
            seed: i,
            ..Default::default()
        };
        let a = loss::rece(x.view(), y.view(), &targets, &p, &mask).unwrap();
        let (_, full) = oracle::exact_ce(x.view(), y.view(), &targets, &mask).unwrap();
        for (ra, rf) in a.row_losses.iter().zip(&full) {
            worst = worst.max(ra - rf);
        }
    }
    outcome(worst <= 1e-9, format!("max(rece_row - ce_row) = {worst:.2e} (<= 1e-9) over 100 instances"))
}

fn dedup_identity() -> Outcome {
    let (m, c, d) = (64, 256, 8);
    let x = gaussian(m, d, 1.0, 11);
    let y = gaussian(c, d, 1.0, 12);
    let targets = random_targets(m, c, &mut rng(13));
    let mask = vec![true; m];
    let mut worst = 0.0f64;
    for rounds in [2, 3, 4] {
        let p = ReceParams { n_b: 8, n_c: 8, n_ec: 1, rounds, seed: 21, ..Default::default() };
        let res = loss::rece(x.view(), y.view(), &targets, &p, &mask).unwrap();
        let (plan, _) = build_multi_round_plan(x.view(), y.view(), &mask, &p).unwrap();
        let reference = oracle::pair_set_rece_loss(x.view(), y.view(), &targets, &mask, &plan, true).unwrap();
        worst = worst.max((res.loss - reference).abs());
    }
    let single = ReceParams { n_b: 8, n_c: 8, n_ec: 1, rounds: 1, seed: 21, ..Default::default() };
    let repeated = ReceParams { rounds: 3, round_seeding: RoundSeeding::Identical, ..single };
    let a = loss::rece(x.view(), y.view(), &targets, &single, &mask).unwrap().loss;
    let b = loss::rece(x.view(), y.view(), &targets, &repeated, &mask).unwrap().loss;
    let ident = (a - b).abs();
    outcome(
        worst <= 1e-6 && ident <= 1e-12,
        format!("union reference max |d| = {worst:.2e} (<= 1e-6), identical rounds |d| = {ident:.2e} (<= 1e-12)"),
    )
}

fn memory_exactness() -> Outcome {
    let (m_total, c, d) = (200, 300, 6);
    let x = gaussian(m_total, d, 1.0, 31);
    let y = gaussian(c, d, 1.0, 32);
    let targets = random_targets(m_total, c, &mut rng(33));
    let mask: Vec<bool> = (0..m_total).map(|i| i % 7 != 0).collect();
    let m = mask.iter().filter(|&&v| v).count();
    let mut mismatches = 0;
    let mut cells = 0;
    for n_c in [2, 5, 8] {
        for n_ec in [0, 1, 2] {
            for rounds in [1, 2, 3] {
                let p = ReceParams { n_b: 6, n_c, n_ec, rounds, seed: 7, ..Default::default() };
                let res = loss::rece(x.view(), y.view(), &targets, &p, &mask).unwrap();
                let est = memcost::peak_elements(&p, c, m).unwrap();
                cells += 1;
                if memcost::instrumented_count(&res) != est.logit_elements_rece {
                    mismatches += 1;
                }
            }
        }
    }
    let peak = memcost::peak_model(1, 1.0, 1, 1024, 100_000);
    let direct = (1024.0 * 100_000.0) / peak;
    let formula = memcost::reduction_factor_formula(1, 1.0, 1, 1024, 100_000);
    let rel = (direct / formula - 1.0).abs();
    outcome(
        mismatches == 0 && rel <= 1e-9,
        format!(
            "{cells} grid cells, {mismatches} count mismatches; peak(r=1,a=1,n_ec=1,C=1024,m=1e5) = {peak:.4e}, reduction {direct:.3} rel err {rel:.1e} (<= 1e-9)"
        ),
    )
}

fn hard_negative_recall() -> Outcome {
    let t = Instant::now();
    let (m, c, k) = (512, 4096, 10);
    let p0 = ReceParams { n_b: 16, n_c: 16, n_ec: 1, rounds: 4, ..Default::default() };
    let (mut rece_sum, mut uni_sum) = (0.0, 0.0);
    let seeds = 50;
    for seed in 0..seeds {
        let synth::ClusteredPair { x, y, .. } = synth::clustered_pair(m, c, &ClusterConfig::default(), seed).unwrap();
        let mut r = rng(10_000 + seed);
        let targets = random_targets(m, c, &mut r);
        let mask = vec![true; m];
        let p = ReceParams { seed, ..p0 };
        let (plan, _) = build_multi_round_plan(x.view(), y.view(), &mask, &p).unwrap();
        let rep = oracle::plan_recall(&plan, x.view(), y.view(), &targets, &mask, k).unwrap();
        let budget = plan.logit_count().div_ceil(m).min(c - 1);
        let negs = Negatives::sample(&targets, &mask, c, budget, &mut r).unwrap();
        let cands: Vec<Vec<usize>> = negs
            .ids()
            .rows()
            .into_iter()
            .map(|row| {
                let mut v = row.to_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let topk = oracle::topk_hard_negatives(x.view(), y.view(), &targets, k).unwrap();
        let uni = oracle::candidate_recall(&topk, &cands, &mask, k);
        rece_sum += rep.mean_recall;
        uni_sum += uni.mean_recall;
    }
    let (a, b) = (rece_sum / seeds as f64, uni_sum / seeds as f64);
    let (fast, secs) = within(t, Duration::from_secs(300));
    outcome(
        a - b >= 0.05 && fast,
        format!("rece recall {a:.4}, uniform {b:.4}, margin {:.4} (>= 0.05), {secs:.1}s (< 300s)", a - b),
    )
}

struct SmokeResult {
    outcome: Outcome,
    ndcg1_hr1_equal: bool,
}

fn training_smoke() -> SmokeResult {
    let t = Instant::now();
    let log = synth::markov_log(&MarkovConfig { n_items: 2000, n_users: 5000, seed: 7, ..Default::default() }).unwrap();
    let split = data::leave_one_out_split(&log).unwrap();
    let ks = eval::DEFAULT_KS;
    let pop = eval::evaluate(&PopularityRanker::fit(&split.train, split.n_items()), &split.test, &ks, true);
    let base = TrainConfig { dim: 64, batch_size: 128, max_len: 50, lr: 1e-2, max_epochs: 20, patience: 5, seed: 0, ..Default::default() };
    let rece_params = ReceParams { n_b: 32, n_c: 32, n_ec: 2, rounds: 2, ..Default::default() };
    let ce = train::train(&split, &TrainConfig { loss: LossKind::Ce, ..base.clone() }).unwrap();
    let rece = train::train(&split, &TrainConfig { loss: LossKind::Rece(rece_params), ..base }).unwrap();
    let ce_rep = train::test_metrics(&ce.params, &split, &ks, true);
    let rece_rep = train::test_metrics(&rece.params, &split, &ks, true);
    let (nc, nr, np) = (ce_rep.ndcg_at(10), rece_rep.ndcg_at(10), pop.ndcg_at(10));
    let rel_gap = (nc - nr) / nc;
    let (fast, secs) = within(t, Duration::from_secs(900));
    let pass = rel_gap <= 0.05 && nc >= 2.0 * np && nr >= 2.0 * np && fast;
    let ndcg1_hr1_equal = [&ce_rep, &rece_rep, &pop].iter().all(|r| r.ndcg_at(1) == r.hr_at(1));
    SmokeResult {
        outcome: outcome(
            pass,
            format!(
                "ndcg@10 ce {nc:.4}, rece {nr:.4} (gap {:.2}% <= 5%), popularity {np:.4} (both >= 2x), peak logits/step ce {} rece {}, {secs:.1}s (< 900s)",
                rel_gap * 100.0,
                ce.peak_step_logits(),
                rece.peak_step_logits()
            ),
        ),
        ndcg1_hr1_equal,
    }
}

fn metric_identities(training_runs_equal: bool) -> Outcome {
    let cases: Vec<data::EvalCase> = (0..2000u32)
        .map(|u| data::EvalCase { user: u, prefix: vec![], prefix_timestamps: vec![], target: u % 100, target_timestamp: 0 })
        .collect();
    let rep = eval::evaluate(&RandomRanker { n_items: 100, seed: 42 }, &cases, &eval::DEFAULT_KS, false);
    let hr10 = rep.hr_at(10);
    let equal = training_runs_equal && rep.ndcg_at(1) == rep.hr_at(1);
    outcome(
        equal && (hr10 - 0.1).abs() <= 0.02,
        format!("ndcg@1 == hr@1 on all runs: {equal}; random HR@10 = {hr10:.4} over 2000 users (0.1 +- 0.02)"),
    )
}

fn split_hygiene() -> Outcome {
    let mut leaks = 0;
    let mut overlap = 0;
    for seed in 0..10 {
        let log = synth::random_log(500, 300, 3000, 1_000_000, seed);
        let split = data::temporal_split(&log, 0.95).unwrap();
        let threshold = split.threshold_ts.unwrap();
        leaks += split.train.iter().flat_map(|s| &s.timestamps).filter(|&&ts| ts > threshold).count();
        let test_users: std::collections::HashSet<u32> = split.test.iter().map(|c| c.user).collect();
        overlap += split.train.iter().filter(|s| test_users.contains(&s.user)).count();
    }
    outcome(
        leaks == 0 && overlap == 0,
        format!("10 logs: {leaks} train interactions after threshold, {overlap} overlapping users"),
    )
}

fn beer_advocate() -> Option<Outcome> {
    let path = PathBuf::from(std::env::var_os("RECE_BEER_TSV")?);
    let log = match data::ingest(&path, Format::Tsv) {
        Ok(l) => l,
        Err(e) => return Some(outcome(false, format!("ingest failed: {e}"))),
    };
    let stats = match data::preprocess(&log, 5, 20) {
        Ok(l) => l.stats(),
        Err(e) => return Some(outcome(false, format!("preprocess failed: {e}"))),
    };
    let density = format!("{:.2}%", stats.density());
    Some(outcome(
        stats.users == 7606 && stats.items == 22307 && stats.interactions == 1_409_494 && density == "0.83%",
        format!("users {} items {} interactions {} density {density}", stats.users, stats.items, stats.interactions),
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "exhaustive-limit equivalence", exhaustive_limit());
    report(2, "gradient correctness", gradient_checks());
    report(3, "subset bound", subset_bound());
    report(4, "dedup identity", dedup_identity());
    report(5, "memory-model exactness", memory_exactness());
    report(6, "hard-negative recall", hard_negative_recall());
    let smoke = training_smoke();
    report(7, "training smoke", smoke.outcome);
    report(8, "metric identities", metric_identities(smoke.ndcg1_hr1_equal));
    report(9, "split hygiene", split_hygiene());
    match beer_advocate() {
        Some(o) => report(10, "BeerAdvocate statistics", o),
        None => println!("[SKIP] 10 BeerAdvocate statistics: RECE_BEER_TSV not set"),
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
