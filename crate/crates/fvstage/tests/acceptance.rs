//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so every criterion executes and reports
//! even when an earlier one fails; the process exits non-zero if any fail.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fvstage::pipeline::{run_pipeline, PipelineConfig};
use fvstage::study::{run_planted, PlantedStudy};
use fvstage::synthio::write_blob_dataset;
use fvstage_core::attention::{relu_linear_similarity, softmax_similarity, AttentionParams, DEFAULT_EPS};
use fvstage_core::classifier::loss_from_logits;
use fvstage_core::entropy::value_entropy;
use fvstage_core::fisher::encode;
use fvstage_core::gmm::{fit_em, EmOptions};
use fvstage_core::kl::{kl_gaussian_closed, kl_mc};
use fvstage_core::metrics::{accuracy, auc_binary, pair_counts, roc_curve, trapezoid_area, Labels, TaskKind, TiePolicy};
use fvstage_core::stagecat::SplitPlan;
use fvstage_core::study::{median_kl, StudyConfig};
use fvstage_core::synth::{gen_planted_mixture, BlobImagesSpec, PlantedComponent, PlantedMixtureSpec, SampleCount};
use fvstage_core::{DiagGmm, Matrix};
use oracles::*;
use rand::seq::SliceRandom;
use rand::Rng;

struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self { failures: Vec::new(), notes: Vec::new() }
    }

    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn within(&mut self, elapsed: Duration, limit: Duration) {
        self.expect(elapsed <= limit, format!("runtime {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()));
    }
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "{line}").expect("stderr");
}

fn c1_fisher_oracle(c: &mut Check) {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = r.random_range(1..=4);
        let d = r.random_range(1..=5);
        let t = r.random_range(1..=20);
        let g = random_gmm(&mut r, k, d);
        let x = random_matrix(&mut r, t, d, 3.0);
        let fast = encode(&g, &x).unwrap().values;
        let slow = fisher_naive(&g, &x);
        assert_eq!(fast.len(), slow.len());
        worst = fast.iter().zip(&slow).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    c.expect(worst < 1e-10, format!("max abs diff {worst:.2e} over 1000 instances"));
    c.within(start.elapsed(), Duration::from_secs(30));
}

fn c2_fisher_identity(c: &mut Check) {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for d in 1..=5 {
        let mu: Vec<f64> = (0..d).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
        let var: Vec<f64> = (0..d).map(|_| 0.2 + r.random::<f64>() * 3.0).collect();
        let g = DiagGmm::new(vec![1.0], Matrix::from_vec(1, d, mu.clone()).unwrap(), Matrix::from_vec(1, d, var).unwrap(), 0.0)
            .unwrap();
        let t = 1 + d * 3;
        let x = Matrix::from_fn(t, d, |_, j| mu[j]);
        let v = encode(&g, &x).unwrap().values;
        let mut expected = vec![0.0; 1 + d];
        expected.extend(std::iter::repeat_n(-1.0 / 2f64.sqrt(), d));
        worst = v.iter().zip(&expected).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    c.expect(worst <= 1e-12, format!("G_w=0, G_mu=0, G_sigma=-1/sqrt2 for d=1..5, max dev {worst:.1e}"));
}

fn matched_mean_errors(fitted: &Matrix, planted: &Matrix) -> Vec<f64> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    perms
        .iter()
        .map(|p| (0..3).map(|i| dist(fitted.row(p[i]), planted.row(i))).collect::<Vec<_>>())
        .min_by(|a, b| a.iter().sum::<f64>().partial_cmp(&b.iter().sum::<f64>()).unwrap())
        .unwrap()
}

fn c3_em(c: &mut Check) {
    let mut worst_drop: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let d = r.random_range(1..=3);
        let k = r.random_range(2..=5);
        let x = random_matrix(&mut r, 300, d, 4.0);
        let fit = fit_em(&x, k, &EmOptions { seed, ..EmOptions::default() }).unwrap();
        for w in fit.loglik_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    c.expect(worst_drop <= 1e-8, format!("largest per-iteration loglik drop {worst_drop:.1e} over 100 fits"));

    let comp = |m: [f64; 2]| PlantedComponent { weight: 1.0, mean: m.to_vec(), std: vec![0.5, 0.5] };
    let spec = PlantedMixtureSpec {
        components: vec![comp([0.0, 0.0]), comp([10.0, 0.0]), comp([0.0, 10.0])],
        count: SampleCount::PerComponent(vec![500, 500, 500]),
        seed: 42,
    };
    let s = gen_planted_mixture(&spec).unwrap();
    let fit = fit_em(&s.x, 3, &EmOptions::default()).unwrap();
    let errs = matched_mean_errors(fit.gmm.means(), s.truth.means());
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    c.expect(worst < 0.1 && fit.iterations <= 100, format!("planted recovery error {worst:.4} in {} iterations", fit.iterations));
}

fn gauss(mu: &[f64], var: &[f64]) -> DiagGmm {
    let d = mu.len();
    DiagGmm::new(vec![1.0], Matrix::from_vec(1, d, mu.to_vec()).unwrap(), Matrix::from_vec(1, d, var.to_vec()).unwrap(), 0.0)
        .unwrap()
}

fn c4_kl(c: &mut Check) {
    let start = Instant::now();
    let mut r = rng(41);
    let mut self_ok = true;
    for i in 0..10 {
        let f = random_gmm(&mut r, 3, 2);
        self_ok &= kl_mc(&f, &f, 20_000, i).unwrap().value == 0.0;
    }
    c.expect(self_ok, "(a) kl_mc(f,f) == 0 exactly");

    let mut r = rng(42);
    let mut worst_z: f64 = 0.0;
    for i in 0..100 {
        let d = r.random_range(1..=3);
        let mut draw = |lo: f64, span: f64| -> Vec<f64> { (0..d).map(|_| lo + r.random::<f64>() * span).collect() };
        let (mu_f, mu_g, v_f, v_g) = (draw(-1.0, 2.0), draw(-1.0, 2.0), draw(0.5, 1.0), draw(0.5, 1.0));
        let (f, g) = (gauss(&mu_f, &v_f), gauss(&mu_g, &v_g));
        let e = kl_mc(&f, &g, 100_000, i).unwrap();
        worst_z = worst_z.max((e.value - kl_gaussian_closed(&f, &g).unwrap()).abs() / e.std_error);
    }
    c.expect(worst_z <= 4.0, format!("(b) worst |mc - closed| = {worst_z:.2} SE over 100 pairs"));

    let e = kl_mc(&gauss(&[0.0], &[1.0]), &gauss(&[1.0], &[1.0]), 1_000_000, 0).unwrap();
    let z = (e.value - 0.5).abs() / e.std_error;
    c.expect(z <= 3.0, format!("(c) N(0,1)||N(1,1) = {:.5} ({z:.2} SE from 0.5)", e.value));
    c.within(start.elapsed(), Duration::from_secs(60));
}

fn c5_subsampling(c: &mut Check) {
    let start = Instant::now();
    let study = StudyConfig {
        components: 16,
        em: EmOptions::default(),
        ratios: vec![0.02, 0.1, 0.5, 1.0],
        seeds: (0..10).collect(),
        kl_samples: 1_000_000,
        kl_seed: 0,
    };
    let base_seed = study.em.seed;
    let result = run_planted(&PlantedStudy::desk_scale(study)).unwrap();
    let m: Vec<f64> = [0.02, 0.1, 0.5, 1.0].iter().map(|&r| median_kl(&result.rows, r).unwrap()).collect();
    c.notes.push(format!("medians 0.02:{:.3e} 0.1:{:.3e} 0.5:{:.3e} 1.0:{:.3e}", m[0], m[1], m[2], m[3]));
    c.expect(m[1] <= 2.0 * m[2], format!("median(0.1)/median(0.5) = {:.2} (limit 2)", m[1] / m[2]));
    let same = result.rows.iter().find(|r| r.ratio == 1.0 && r.seed == base_seed).unwrap();
    c.expect(same.kl_to_full == 0.0, format!("ratio 1.0 with the base seed gives KL {}", same.kl_to_full));
    c.within(start.elapsed(), Duration::from_secs(300));
}

fn c6_stagecat(c: &mut Check) {
    let mut r = rng(6);
    let mut exact = 0;
    for _ in 0..1000 {
        let n_stages = r.random_range(1..=4);
        let common = r.random_range(1..=6);
        let dims: Vec<usize> = (0..n_stages).map(|_| common * r.random_range(1..=5)).collect();
        let counts: Vec<usize> = (0..n_stages).map(|_| r.random_range(0..=12)).collect();
        let mats: Vec<Matrix> = dims
            .iter()
            .zip(&counts)
            .map(|(&d, &n)| Matrix::from_fn(n, d, |_, _| f64::from_bits(r.random::<u64>() & 0x7fef_ffff_ffff_ffff)))
            .collect();
        let plan = SplitPlan::new(&dims).unwrap();
        let merged = plan.merge_matrices(&mats.iter().collect::<Vec<_>>()).unwrap();
        let back = plan.unmerge(&merged, &counts, &(0..n_stages).collect::<Vec<_>>()).unwrap();
        let same = back.iter().zip(&mats).all(|(s, m)| {
            s.tokens.rows() == m.rows()
                && s.tokens.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        exact += (same && merged.rows() == plan.merged_rows(&counts)) as usize;
    }
    c.expect(exact == 1000, format!("{exact}/1000 bit-exact round trips"));
    let plan = SplitPlan::new(&[384, 192]).unwrap();
    c.expect(plan.common_dim == 192, format!("plan for {{384,192}} has d={}", plan.common_dim));
}

fn c7_entropy(c: &mut Check) {
    let constant = vec![0.42; 784];
    c.expect(value_entropy(&constant, 256).unwrap() == 0.0, "constant image -> 0");
    let two: Vec<f64> = (0..784).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
    let h = value_entropy(&two, 256).unwrap();
    c.expect((h - 2f64.ln()).abs() < 1e-12, format!("balanced two-level -> {h:.15}"));

    let mut r = rng(7);
    let (mut perm_ok, mut affine_ok) = (0, 0);
    for _ in 0..500 {
        let n = r.random_range(2..200);
        let k = r.random_range(1..300);
        let mut v: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let h = value_entropy(&v, k).unwrap();
        v.shuffle(&mut r);
        perm_ok += (value_entropy(&v, k).unwrap() == h) as usize;
    }
    for _ in 0..500 {
        let n = r.random_range(2..200);
        let k = r.random_range(1..300);
        let v: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let a = 0.1 + r.random::<f64>() * 10.0;
        let b = r.random::<f64>() * 10.0 - 5.0;
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        affine_ok += ((value_entropy(&v, k).unwrap() - value_entropy(&w, k).unwrap()).abs() < 1e-12) as usize;
    }
    c.expect(perm_ok == 500, format!("permutation invariance {perm_ok}/500"));
    c.expect(affine_ok == 500, format!("positive-affine invariance {affine_ok}/500"));
}

fn c8_metrics(c: &mut Check) {
    let mut r = rng(71);
    let (mut exact, mut trap_worst) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = r.random_range(2..60);
        let levels = r.random_range(1..12);
        let mut y: Vec<bool> = (0..n).map(|_| r.random()).collect();
        y[0] = true;
        y[1] = false;
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let pc = pair_counts(&s, &y).unwrap();
        let (less, ties) = auc_pairs_brute(&s, &y);
        let pos = y.iter().filter(|&&b| b).count() as u64;
        let total = pos * (n as u64 - pos);
        let half = auc_binary(&s, &y, TiePolicy::Half).unwrap();
        exact += ((pc.ordered, pc.tied) == (less, ties)
            && auc_binary(&s, &y, TiePolicy::Paper).unwrap() == less as f64 / total as f64
            && half == (2 * less + ties) as f64 / (2 * total) as f64) as usize;
        trap_worst = trap_worst.max((trapezoid_area(&roc_curve(&s, &y).unwrap()) - half).abs());
    }
    c.expect(exact == 1000, format!("fast AUC == brute force on {exact}/1000"));
    c.expect(trap_worst < 1e-10, format!("trapezoid vs half AUC max diff {trap_worst:.1e}"));
    let y = Labels::MultiHot(vec![vec![true, false], vec![false, true]]);
    let z = Labels::MultiHot(vec![vec![true, true], vec![false, true]]);
    let acc = accuracy(&y, &z).unwrap();
    c.expect(acc == 0.75, format!("multilabel hand example accuracy {acc}"));
    let auc = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true], TiePolicy::Half).unwrap();
    c.expect(auc == 0.75, format!("four-score hand example AUC {auc}"));
}

fn c9_gradients(c: &mut Check) {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let task = [TaskKind::Binary, TaskKind::Multiclass, TaskKind::Multilabel][i % 3];
        let (p, x, labels) = tiny_instance(&mut r, task);
        worst = worst.max(grad_check(&p, &x, &labels, task));
    }
    c.expect(worst < 1e-4, format!("max gradient relative error {worst:.1e} over 100 instances"));
    let mut shift: f64 = 0.0;
    for _ in 0..200 {
        let logits = random_matrix(&mut r, 5, 4, 5.0);
        let labels = Labels::Class((0..5).map(|_| r.random_range(0..4)).collect());
        let k: f64 = r.random::<f64>() * 200.0 - 100.0;
        let shifted = Matrix::from_fn(5, 4, |i, j| logits[(i, j)] + k);
        let a = loss_from_logits(&logits, &labels, TaskKind::Multiclass).unwrap().0;
        let b = loss_from_logits(&shifted, &labels, TaskKind::Multiclass).unwrap().0;
        shift = shift.max((a - b).abs());
    }
    c.expect(shift < 1e-10, format!("softmax loss shift deviation {shift:.1e}"));
}

fn c10_end_to_end(c: &mut Check) {
    let dir = tempfile::tempdir().unwrap();
    let spec = BlobImagesSpec::two_class_default(0);
    let data = write_blob_dataset(&spec, &dir.path().join("data")).unwrap();
    let config = |out: &str| {
        let cfg = PipelineConfig::new(data.train.clone(), data.val.clone(), data.test.clone(), dir.path().join(out));
        assert_eq!((cfg.stages, cfg.gmm.components, cfg.sample_cap), (2, 16, 5000));
        cfg
    };
    let start = Instant::now();
    let first = run_pipeline(&config("run-a")).unwrap();
    let elapsed = start.elapsed();
    let m = &first.report.metrics;
    c.expect(m.acc >= 0.9, format!("test accuracy {:.4}", m.acc));
    c.expect(m.auc >= 0.95, format!("test AUC {:.4}", m.auc));
    let second = run_pipeline(&config("run-b")).unwrap();
    let same = std::fs::read(&first.report_path).unwrap() == std::fs::read(&second.report_path).unwrap();
    c.expect(same && second.stages.iter().all(|s| !s.cached), "fresh rerun gives a byte-identical report");
    c.within(elapsed, Duration::from_secs(600));
}

fn c11_attention(c: &mut Check) {
    let mut r = rng(11);
    let (mut naive_worst, mut soft_worst, mut relu_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut relu_rows = 0;
    for t in 0..500 {
        let n = r.random_range(1..=8);
        let f = r.random_range(1..=6);
        let d = r.random_range(1..=5);
        let p = AttentionParams::random(f, d, t);
        let x = random_matrix(&mut r, n, f, 1.0);
        let (q, k, _) = p.project(&x).unwrap();

        let soft = softmax_similarity(&q, &k);
        let (out, sim) = softmax_attention_naive(&x, &p);
        let fast = fvstage_core::attention::softmax_attention(&x, &p).unwrap();
        let relu = relu_linear_similarity(&q, &k, DEFAULT_EPS);
        let (rout, rsim) = relu_attention_naive(&x, &p, DEFAULT_EPS);
        let rfast = fvstage_core::attention::relu_linear_attention(&x, &p, DEFAULT_EPS).unwrap();
        for (a, b) in [(&fast, &out), (&soft, &sim), (&rfast, &rout), (&relu, &rsim)] {
            naive_worst = a.as_slice().iter().zip(b.as_slice()).fold(naive_worst, |w, (u, v)| w.max((u - v).abs()));
        }
        for i in 0..n {
            soft_worst = soft_worst.max((soft.row(i).iter().sum::<f64>() - 1.0).abs());
            let raw: f64 = (0..n)
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a.max(0.0) * b.max(0.0)).sum::<f64>())
                .sum();
            if raw > 10.0 * DEFAULT_EPS {
                relu_rows += 1;
                relu_worst = relu_worst.max((relu.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    c.expect(naive_worst < 1e-12, format!("fast vs naive max diff {naive_worst:.1e}"));
    c.expect(soft_worst < 1e-9, format!("softmax row sums within {soft_worst:.1e} of 1"));
    c.expect(
        relu_worst < 1e-6,
        format!("ReLU row sums within {relu_worst:.1e} of 1 over {relu_rows} rows with denominator > 10 eps"),
    );
}

fn main() {
    let criteria: [(&str, fn(&mut Check)); 11] = [
        ("Fisher Vector oracle equivalence", c1_fisher_oracle),
        ("Fisher Vector trivial identity", c2_fisher_identity),
        ("EM monotonicity and planted recovery", c3_em),
        ("Monte-Carlo KL estimator", c4_kl),
        ("subsampling robustness", c5_subsampling),
        ("lossless concatenation", c6_stagecat),
        ("entropy", c7_entropy),
        ("metrics", c8_metrics),
        ("classifier gradients", c9_gradients),
        ("end-to-end pipeline", c10_end_to_end),
        ("attention", c11_attention),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let mut check = Check::new();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| run(&mut check)));
        if let Err(e) = outcome {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            check.failures.push(format!("panicked: {}", msg.unwrap_or_default()));
        }
        let verdict = if check.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut detail = check.failures.clone();
        detail.extend(check.notes);
        report(&format!("criterion {n:>2} {verdict} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), detail.join("; ")));
        if !check.failures.is_empty() {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        report("acceptance: all 11 criteria pass");
    } else {
        report(&format!("acceptance: criteria {failed:?} fail"));
        std::process::exit(1);
    }
}
