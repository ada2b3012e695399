//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Directional criteria are checked for the default seed and for the mean
//! over the documented seeds 0, 1 and 2. Criteria that mirror the
//! single-speaker table without naming a forget-set size use n_forget = 1;
//! values for the other sizes are printed alongside for context.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sgsp::config::ExperimentConfig;
use sgsp::pipeline::{self, gradcheck, GRADCHECK_TOLERANCE};
use sgsp::{reproduce, Bundle};
use sgsp_core::evaluation::{auc, auc_pairwise, evaluate, EvalReport, Filter, Side};
use sgsp_core::filtering::{similarity_quantile, ForgetRegistry};
use sgsp_core::numerics::{dist_sq, gaussian_vector};
use sgsp_core::poisoning::triplet_loss;
use sgsp_core::{DenseVector, Rng};

const SEEDS: [u64; 3] = [0, 1, 2];
const DEFAULT_SEED: u64 = 0;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, checks: &[(bool, String)]) -> Outcome {
    let passed = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|(ok, s)| if *ok { s.clone() } else { format!("{s} [violated]") })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { id, name, passed, detail }
}

fn check(ok: bool, msg: String) -> (bool, String) {
    (ok, msg)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let results = gradcheck(&ExperimentConfig::default()).expect("gradcheck runs");
    let elapsed = t.elapsed();
    let mut checks: Vec<(bool, String)> = results
        .iter()
        .map(|(name, r)| {
            check(r.max_rel_error < GRADCHECK_TOLERANCE, format!("{name} max rel error {:.2e}", r.max_rel_error))
        })
        .collect();
    checks.push(check(elapsed < Duration::from_secs(5), format!("{:.3} s", elapsed.as_secs_f64())));
    outcome(1, "gradient correctness", &checks)
}

fn random_scores(rng: &mut Rng, n: usize, tied: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.normal();
            if tied {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(2_000);
    let mut worst = 0.0f64;
    let mut tied_instances = 0;
    for i in 0..200 {
        let (n, m) = if i == 0 { (1000, 1000) } else { (1 + rng.index(1000), 1 + rng.index(1000)) };
        let tied = i % 2 == 0;
        tied_instances += tied as usize;
        let a = random_scores(&mut rng, n, tied);
        let b = random_scores(&mut rng, m, tied);
        let diff = (auc(&a, &b).unwrap() - auc_pairwise(&a, &b).unwrap()).abs();
        worst = worst.max(diff);
    }
    let elapsed = t.elapsed();
    outcome(
        2,
        "AUC oracle equivalence",
        &[
            check(
                worst <= 1e-12,
                format!("max |rank - pairwise| {worst:.1e} over 200 instances ({tied_instances} tied)"),
            ),
            check(elapsed < Duration::from_secs(10), format!("{:.2} s", elapsed.as_secs_f64())),
        ],
    )
}

fn criterion_3() -> Outcome {
    let mut rng = Rng::new(3_000);
    let mut disjoint_ok = true;
    let mut identical_ok = true;
    for i in 0..100 {
        let n = 1 + rng.index(200);
        let m = 1 + rng.index(200);
        let low: Vec<f64> = (0..m).map(|_| rng.uniform() - 1.5).collect();
        let high: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        disjoint_ok &= auc(&high, &low).unwrap() == 1.0 && auc_pairwise(&high, &low).unwrap() == 1.0;
        let mut same = random_scores(&mut rng, n, i % 2 == 0);
        let original = same.clone();
        rng.shuffle(&mut same);
        identical_ok &= auc(&original, &same).unwrap() == 0.5 && auc_pairwise(&original, &same).unwrap() == 0.5;
    }
    outcome(
        3,
        "AUC boundary cases",
        &[
            check(disjoint_ok, "disjoint -> 1.0 exactly (100 cases)".into()),
            check(identical_ok, "identical multisets -> 0.5 exactly (100 cases)".into()),
        ],
    )
}

fn criterion_4() -> Outcome {
    let mut rng = Rng::new(4_000);
    let margin = 0.3;
    let (mut tested, mut violations, mut draws) = (0, 0, 0);
    while tested < 10_000 {
        draws += 1;
        let v = |r: &mut Rng| gaussian_vector(r, 24, 0.0, 1.0).unwrap();
        let (x, a, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
        if dist_sq(x.as_slice(), n.as_slice()) < dist_sq(x.as_slice(), a.as_slice()) + margin {
            continue;
        }
        tested += 1;
        let (loss, grad) = triplet_loss(&x, &a, &n, margin).unwrap();
        if loss != 0.0 || grad.as_slice().iter().any(|&g| g != 0.0) {
            violations += 1;
        }
    }
    outcome(
        4,
        "triplet hinge",
        &[check(violations == 0, format!("{violations} nonzero of {tested} inactive triples ({draws} draws)"))],
    )
}

struct Runs {
    bundles: BTreeMap<u64, Bundle>,
    dirs: BTreeMap<u64, PathBuf>,
    _tmp: tempfile::TempDir,
}

fn run_all() -> Runs {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut bundles = BTreeMap::new();
    let mut dirs = BTreeMap::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let dir = tmp.path().join(format!("seed{seed}"));
        let b = reproduce(&cfg, &dir).expect("reproduce runs");
        eprintln!("[acceptance] seed {seed}: reproduce took {:.1} s", b.elapsed.as_secs_f64());
        bundles.insert(seed, b);
        dirs.insert(seed, dir);
    }
    Runs { bundles, dirs, _tmp: tmp }
}

impl Runs {
    fn default(&self) -> &Bundle {
        &self.bundles[&DEFAULT_SEED]
    }

    fn row(&self, seed: u64, n: usize, label: &str) -> &EvalReport {
        self.bundles[&seed]
            .setting(n)
            .and_then(|s| s.report(label))
            .unwrap_or_else(|| panic!("missing {label} at n={n}"))
    }

    fn mean(&self, n: usize, label: &str, f: impl Fn(&EvalReport) -> f64) -> f64 {
        SEEDS.iter().map(|&s| f(self.row(s, n, label))).sum::<f64>() / SEEDS.len() as f64
    }

    /// Value for the default seed and the seed mean.
    fn both(&self, n: usize, label: &str, f: impl Fn(&EvalReport) -> f64 + Copy) -> [(String, f64); 2] {
        [("seed 0".into(), f(self.row(DEFAULT_SEED, n, label))), ("3-seed mean".into(), self.mean(n, label, f))]
    }
}

fn criterion_5(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    for ((who, r), (_, f)) in
        runs.both(1, "PT", |r| r.ssim_retain_mean).into_iter().zip(runs.both(1, "PT", |r| r.ssim_forget_mean))
    {
        checks.push(check(r >= 0.95 && f >= 0.95, format!("{who} SSIM R {r:.3} F {f:.3}")));
        checks.push(check((r - f).abs() <= 0.02, format!("{who} |R - F| {:.4}", (r - f).abs())));
    }
    for (who, a) in runs.both(1, "PT", |r| r.auc) {
        checks.push(check((0.4..=0.6).contains(&a), format!("{who} AUC {a:.3}")));
    }
    let t = runs.bundles.values().map(|b| b.timing("pretrain").unwrap()).max().unwrap();
    checks.push(check(t <= Duration::from_secs(60), format!("pretraining {:.1} s", t.as_secs_f64())));
    let context: Vec<String> = [15, 100]
        .iter()
        .map(|&n| {
            format!("n={n} AUC seed 0 {:.3}, mean {:.3}", runs.row(0, n, "PT").auc, runs.mean(n, "PT", |r| r.auc))
        })
        .collect();
    checks.push(check(true, format!("context: {}", context.join(", "))));
    outcome(5, "pretrained baseline (n=1)", &checks)
}

fn criterion_6(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    for (who, a) in runs.both(1, "PT + GTF", |r| r.auc) {
        checks.push(check(a >= 0.9, format!("{who} AUC {a:.3}")));
    }
    let mut identical = true;
    for &seed in &SEEDS {
        let pt = runs.row(seed, 1, "PT");
        let gtf = runs.row(seed, 1, "PT + GTF");
        let side = |r: &EvalReport| -> Vec<(usize, usize, u64, u64)> {
            r.samples
                .iter()
                .filter(|s| s.side == Side::Retain)
                .map(|s| (s.reference, s.effective_reference, s.ssim.to_bits(), s.content_error.to_bits()))
                .collect()
        };
        let (a, b) = (side(pt), side(gtf));
        identical &= a == b && b.iter().all(|s| s.0 == s.1);
    }
    checks.push(check(identical, "retain-side outputs bit-identical to PT (all seeds)".into()));
    outcome(6, "GTF baseline (n=1)", &checks)
}

/// PT behind a speaker filter whose τ is `pick(probe similarities)`; returns
/// (τ, median, retain SSIM drop, AUC).
fn miscalibrated_sf(
    b: &Bundle,
    n: usize,
    pick: impl Fn(&ForgetRegistry, &[DenseVector]) -> f64,
) -> Result<(f64, f64, f64, f64), String> {
    let cfg = ExperimentConfig { n_forget: n, ..b.config.clone() };
    let s = b.setting(n).unwrap();
    let reg = pipeline::registry(&cfg, &b.world, &s.partition).map_err(|e| e.to_string())?;
    let probes: Vec<DenseVector> = s.partition.retain_test.iter().map(|&u| b.world.embedding(u).clone()).collect();
    let median = similarity_quantile(&reg, &probes, 0.5).unwrap();
    let tau = pick(&reg, &probes);
    let low = reg.with_threshold(tau).map_err(|e| format!("τ {tau:.3}: {e}"))?;
    let report = evaluate(
        &b.pretrained.model,
        &b.world,
        &s.partition,
        Filter::Sf { registry: &low, max_attempts: 1000 },
        &pipeline::eval_config(&cfg),
        "PT + SF (low τ)",
    )
    .map_err(|e| format!("τ {tau:.3}: {e}"))?;
    let pt = s.report("PT").unwrap();
    Ok((tau, median, pt.ssim_retain_mean - report.ssim_retain_mean, report.auc))
}

fn criterion_7(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &SEEDS {
        match miscalibrated_sf(&runs.bundles[&seed], 1, |reg, probes| {
            similarity_quantile(reg, probes, 0.5).unwrap() / 2.0
        }) {
            Ok(v) => per_seed.push(Some(v)),
            Err(e) => {
                checks.push(check(false, format!("seed {seed}: {e}")));
                per_seed.push(None);
            }
        }
    }
    if let Some((tau, median, drop, a)) = per_seed[0] {
        checks.push(check(tau < median, format!("seed 0 τ {tau:.3} below median {median:.3}")));
        checks.push(check(drop >= 0.15, format!("seed 0 retain SSIM drop {drop:.3}")));
        checks.push(check((0.45..=0.55).contains(&a), format!("seed 0 AUC {a:.3}")));
    }
    if per_seed.iter().all(Option::is_some) {
        let k = per_seed.len() as f64;
        let drop = per_seed.iter().map(|v| v.unwrap().2).sum::<f64>() / k;
        let a = per_seed.iter().map(|v| v.unwrap().3).sum::<f64>() / k;
        checks.push(check(drop >= 0.15, format!("3-seed mean retain SSIM drop {drop:.3}")));
        checks.push(check((0.45..=0.55).contains(&a), format!("3-seed mean AUC {a:.3}")));
    }
    let context: Vec<String> = SEEDS
        .iter()
        .map(|&seed| {
            match miscalibrated_sf(&runs.bundles[&seed], 100, |reg, p| similarity_quantile(reg, p, 0.05).unwrap()) {
                Ok((tau, _, drop, a)) => format!("seed {seed} τ {tau:.3} drop {drop:.3} AUC {a:.3}"),
                Err(e) => format!("seed {seed}: {e}"),
            }
        })
        .collect();
    checks.push(check(true, format!("context n=100, τ at 5th percentile: {}", context.join(", "))));
    outcome(7, "SF miscalibration (n=1, τ = median/2)", &checks)
}

fn criterion_8(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    for (who, a) in runs.both(1, "EGP+Trip.", |r| r.auc) {
        checks.push(check(a >= 0.9, format!("{who} AUC {a:.3}")));
    }
    for (who, gap) in runs.both(1, "EGP+Trip.", |r| r.ssim_retain_mean - r.ssim_forget_mean) {
        checks.push(check(gap >= 0.2, format!("{who} SSIM R - F {gap:.3}")));
    }
    let ratio =
        |seed: u64| runs.row(seed, 1, "EGP+Trip.").content_err_retain / runs.row(seed, 1, "PT").content_err_retain;
    let r0 = ratio(DEFAULT_SEED);
    let rm = SEEDS.iter().map(|&s| ratio(s)).sum::<f64>() / SEEDS.len() as f64;
    checks.push(check(r0 <= 2.0, format!("seed 0 retain content error ratio {r0:.3}")));
    checks.push(check(rm <= 2.0, format!("3-seed mean ratio {rm:.3}")));
    let t = runs.bundles.values().map(|b| b.timing("poison n=1 EGP+Trip.").unwrap()).max().unwrap();
    checks.push(check(t <= Duration::from_secs(120), format!("poisoning {:.1} s", t.as_secs_f64())));
    outcome(8, "flagship poisoning (n=1)", &checks)
}

fn criterion_9(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    for ((who, e), (_, t)) in runs.both(1, "EGP", |r| r.auc).into_iter().zip(runs.both(1, "TGP", |r| r.auc)) {
        checks.push(check(e >= t, format!("{who} AUC EGP {e:.4} vs TGP {t:.4}")));
    }
    outcome(9, "method ordering (n=1)", &checks)
}

fn criterion_10(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    let label = "EGP+Trip.";
    let seed0: Vec<f64> = [1, 15, 100].iter().map(|&n| runs.row(DEFAULT_SEED, n, label).auc).collect();
    let mean: Vec<f64> = [1, 15, 100].iter().map(|&n| runs.mean(n, label, |r| r.auc)).collect();
    for (who, v) in [("seed 0", seed0), ("3-seed mean", mean)] {
        checks.push(check(v[0] > v[1] && v[1] > v[2], format!("{who} AUC {:.4} > {:.4} > {:.4}", v[0], v[1], v[2])));
    }
    outcome(10, "scaling collapse", &checks)
}

fn criterion_11(runs: &Runs) -> Outcome {
    let mut checks = Vec::new();
    for label in ["TGP", "TGP+Trip.", "EGP", "EGP+Trip."] {
        for (who, gap) in runs.both(100, label, |r| r.max_fssim - r.avg_fssim) {
            checks.push(check(gap >= 0.1, format!("{label} {who} Max - Avg {gap:.3}")));
        }
        for ((who, max100), (_, f1)) in
            runs.both(100, label, |r| r.max_fssim).into_iter().zip(runs.both(1, label, |r| r.ssim_forget_mean))
        {
            checks.push(check(max100 >= f1, format!("{label} {who} Max(100) {max100:.3} >= SSIM_F(1) {f1:.3}")));
        }
    }
    outcome(11, "worst-case leakage (n=100)", &checks)
}

fn files_except_manifest(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|f| f != "manifest.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn criterion_12(runs: &Runs) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seed: DEFAULT_SEED, ..ExperimentConfig::default() };
    reproduce(&cfg, tmp.path()).expect("second reproduce runs");
    let a = files_except_manifest(&runs.dirs[&DEFAULT_SEED]);
    let b = files_except_manifest(tmp.path());
    let same_names = a.keys().eq(b.keys());
    let differing: Vec<String> =
        a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let bytes: usize = a.values().map(Vec::len).sum();
    outcome(
        12,
        "determinism",
        &[check(
            same_names && differing.is_empty(),
            format!("{} files, {} bytes compared; {} differ {:?}", a.len(), bytes, differing.len(), differing),
        )],
    )
}

fn criterion_13(runs: &Runs) -> Outcome {
    let t = runs.default().elapsed;
    let rows: usize = runs.default().settings.iter().map(|s| s.reports.len()).sum();
    outcome(
        13,
        "desk-scale budget",
        &[
            check(rows == 21, format!("{rows} method rows")),
            check(t < Duration::from_secs(30 * 60), format!("full sweep {:.1} s", t.as_secs_f64())),
        ],
    )
}

fn main() {
    // `cargo test -- --list` and filters from the default harness are accepted
    // and ignored.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let runs = run_all();
    outcomes.push(criterion_5(&runs));
    outcomes.push(criterion_6(&runs));
    outcomes.push(criterion_7(&runs));
    outcomes.push(criterion_8(&runs));
    outcomes.push(criterion_9(&runs));
    outcomes.push(criterion_10(&runs));
    outcomes.push(criterion_11(&runs));
    outcomes.push(criterion_12(&runs));
    outcomes.push(criterion_13(&runs));

    println!();
    for o in &outcomes {
        println!("{} criterion {:>2} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\nacceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
