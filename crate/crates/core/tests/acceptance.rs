//! Acceptance suite: one line per criterion, non-zero exit if any gated
//! criterion fails. Criterion 7 trains the baseline for 15 epochs and takes
//! several minutes.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use capsnet::caps::{ArchitectureSpec, RoutingMethod};
use capsnet::cli::{cmd_cost, cmd_eval, cmd_gradcheck, cmd_train, CostArgs, EvalArgs, EvalDataset, GradcheckArgs, ModelArgs, TrainArgs};
use capsnet::cost::{routing_flops, voting_ratio, voting_volume, FlopMethod, VotingMode};
use capsnet::train::{BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
use common::*;
use num_rational::Ratio;

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_SAMPLES: usize = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const SUM_TOL: f64 = 1e-6;
const INVARIANCE_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-9;
const INSTANCES: u64 = 100;
const SMOKE_ACCURACY: f64 = 0.97;
const SMOKE_BUDGET: Duration = Duration::from_secs(30 * 60);
const AFFNIST_GAP: f64 = 0.05;

enum Outcome {
    Pass(String),
    Fail(String),
    NotGated(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn within(value: usize, target: f64, frac: f64) -> bool {
    (value as f64 - target).abs() <= frac * target
}

fn param_counts() -> Outcome {
    let count = |preset: &str, shortcut: bool| {
        let args = CostArgs {
            model: ModelArgs {
                preset: Some(preset.into()),
                shortcut,
                no_shortcut: !shortcut,
                ..ModelArgs::default()
            },
            ..CostArgs::default()
        };
        cmd_cost(&args).expect("cost report").0.primary.param_count
    };
    let start = Instant::now();
    let (base, expanded, sequential) = (count("baseline", true), count("expanded", true), count("baseline", false));
    let ok = within(base, 23_000.0, 0.05) && within(expanded, 68_000.0, 0.05) && within(sequential, 88_000.0, 0.10);
    check(
        ok,
        format!(
            "baseline shortcut {base} (23k +-5%), expanded shortcut {expanded} (68k +-5%), baseline sequential {sequential} (88k +-10%), {:.1} ms",
            start.elapsed().as_secs_f64() * 1e3
        ),
    )
}

fn flop_model() -> Outcome {
    let spec = ArchitectureSpec::baseline();
    let q = voting_volume(1, &spec, VotingMode::Shortcut).expect("volume");
    let exact = routing_flops(q, FlopMethod::Attention) == 4 * q
        && routing_flops(q, FlopMethod::Fuzzy) == 7 * q
        && routing_flops(q, FlopMethod::EmReference) == 10 * q;
    let report = cmd_cost(&CostArgs::default()).expect("cost report").0.primary;
    let em_fuzzy = report.flop_ratios["em_over_fuzzy"];
    let em_att = report.flop_ratios["em_over_attention"];
    // the published 1.42 is 10/7 cut to two decimals
    let two = |x: f64| (x * 100.0).floor() / 100.0;
    let ok = exact && (em_fuzzy - 10.0 / 7.0).abs() < 1e-12 && em_att == 2.5 && two(em_fuzzy) == 1.42 && two(em_att) == 2.5;
    check(ok, format!("4Q/7Q/10Q exact at Q={q}: {exact}; EM/fuzzy {em_fuzzy:.4}, EM/attention {em_att:.4}"))
}

fn voting_ratio_check() -> Outcome {
    let spec = ArchitectureSpec::baseline();
    let shortcut = voting_volume(1, &spec, VotingMode::Shortcut).expect("volume");
    let sequential = voting_volume(1, &spec, VotingMode::Sequential).expect("volume");
    let ratio = voting_ratio(1, &spec).expect("ratio");
    let report = cmd_cost(&CostArgs::default()).expect("cost report").0.primary;
    let ok = ratio == Ratio::new(10, 144)
        && ratio == Ratio::new(shortcut, sequential)
        && shortcut == 32_000
        && sequential == 460_800
        && report.depths[0].ratio_matches_volumes;
    check(ok, format!("r_voting = {ratio} (10/144), volumes {shortcut} / {sequential}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let args = GradcheckArgs {
        n_params: GRADCHECK_SAMPLES,
        tol: GRADCHECK_TOL,
        ..GradcheckArgs::default()
    };
    let (checks, _) = cmd_gradcheck(&args).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max);
    let all = checks.len() == 4
        && checks.iter().all(|c| c.report.passed() && c.report.samples.len() == GRADCHECK_SAMPLES);
    let labels: Vec<String> = checks.iter().map(|c| c.label()).collect();
    check(
        all && worst <= GRADCHECK_TOL && elapsed <= GRADCHECK_BUDGET,
        format!("{}: max rel error {worst:.2e} <= {GRADCHECK_TOL:e}, {:.1}s", labels.join(", "), elapsed.as_secs_f64()),
    )
}

fn max_dev(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| m.max((x - 1.0).abs()))
}

fn routing_invariants() -> Outcome {
    let (mut att, mut fuzzy_classes, mut fuzzy_sites, mut shift, mut scale) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let mut r = rng(10_000 + seed);
        let case = route_case(&mut r, 2);
        att = att.max(max_dev(&class_sums(&attention_lib(&case.v, &case.g))));
        let (f, rr) = fuzzy_lib(&case.v, &case.g);
        fuzzy_classes = fuzzy_classes.max(max_dev(&class_sums(&f)));
        fuzzy_sites = fuzzy_sites.max(max_dev(&site_sums(&rr, case.groups)));

        let x = uniform(&[2, 5, 3], &mut r);
        let c = rand::Rng::gen_range(&mut r, -50.0..50.0);
        let g = capsnet::Graph::inference();
        let a = g.constant(x.clone()).softmax(1).expect("softmax").value();
        let b = g.constant(x.map(|v| v + c)).softmax(1).expect("softmax").value();
        shift = shift.max(rel_err(a.data(), b.data()));

        let k = rand::Rng::gen_range(&mut r, 0.01..100.0);
        let (fs, rs) = fuzzy_lib(&case.v.map(|v| v * k), &case.g.map(|v| v * k));
        scale = scale.max(rel_err(fs.data(), f.data())).max(rel_err(rs.data(), rr.data()));
    }
    check(
        att <= SUM_TOL && fuzzy_classes <= SUM_TOL && fuzzy_sites <= SUM_TOL && shift <= INVARIANCE_TOL && scale <= INVARIANCE_TOL,
        format!(
            "{INSTANCES} instances: attention class sums {att:.1e}, fuzzy class sums {fuzzy_classes:.1e}, fuzzy site sums {fuzzy_sites:.1e}, softmax shift {shift:.1e}, fuzzy scale {scale:.1e}"
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let (mut locap, mut votes, mut update, mut spread, mut loss) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let mut r = rng(20_000 + seed);
        let case = locap_case(&mut r);
        for squash in [false, true] {
            let (p, next) = locap_lib(&case, squash);
            let (po, nexto) = locap_oracle(&case, squash);
            locap = locap.max(rel_err(p.data(), po.data())).max(rel_err(next.data(), nexto.data()));
        }
        let (p, _) = locap_lib(&case, false);
        let d = p.shape()[2];
        let s = (d as f64).sqrt() as usize;
        let t = uniform(&[3, p.shape()[1], s, s], &mut r);
        votes = votes.max(rel_err(votes_lib(&p, &t).data(), votes_oracle(&p, &t).data()));

        let rc = route_case(&mut r, 1);
        for method in [RoutingMethod::Attention, RoutingMethod::Fuzzy] {
            let (raw, g) = update_lib(&rc, method);
            let (rawo, go) = update_oracle(&rc, method);
            update = update.max(rel_err(raw.data(), rawo.data())).max(rel_err(g.data(), go.data()));
        }
        spread = spread.max(rel_err(spread_lib(&rc).data(), spread_oracle(&rc).data()));

        let (prob, targets, margin) = loss_case(&mut r);
        let (got, want) = (loss_lib(&prob, &targets, margin), loss_oracle(&prob, &targets, margin));
        if got != want {
            loss = loss.max(rel_err(&[got], &[want]));
        }
    }
    let worst = locap.max(votes).max(update).max(spread).max(loss);
    check(
        worst <= ORACLE_TOL,
        format!(
            "{INSTANCES} instances: locapblock {locap:.1e}, glocap_votes {votes:.1e}, update_globals {update:.1e}, sigma^2 {spread:.1e}, spread_loss {loss:.1e}"
        ),
    )
}

fn smoke_training(work: &Path) -> Outcome {
    let out = work.join("smoke");
    let args = TrainArgs {
        data_dir: Some(data_dir()),
        out: Some(out.clone()),
        record_wall_time: true,
        ..TrainArgs::default()
    };
    let start = Instant::now();
    let summary = match cmd_train(&args) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("training failed: {e}")),
    };
    let elapsed = start.elapsed();
    let eval = cmd_eval(&EvalArgs {
        checkpoint: out.join(BEST_CHECKPOINT),
        dataset: EvalDataset::Val,
        config: None,
        data_dir: Some(data_dir()),
        out: None,
        seed: 0,
    });
    let reeval = match eval {
        Ok((r, _)) => r.accuracy,
        Err(e) => return Outcome::Fail(format!("evaluating the best checkpoint failed: {e}")),
    };
    let trace: Vec<String> = summary.metrics.records.iter().map(|r| format!("{:.4}", r.val_accuracy)).collect();
    check(
        summary.epochs == 15 && summary.best_val_accuracy >= SMOKE_ACCURACY && reeval == summary.best_val_accuracy && elapsed <= SMOKE_BUDGET,
        format!(
            "baseline shortcut+fuzzy, 8000/2000 split, 15 epochs: best val {:.4} at epoch {} (>= {SMOKE_ACCURACY}), checkpoint re-eval {reeval:.4}, {:.0}s (<= {}s); per-epoch val [{}]",
            summary.best_val_accuracy,
            summary.best_epoch,
            elapsed.as_secs_f64(),
            SMOKE_BUDGET.as_secs(),
            trace.join(" ")
        ),
    )
}

/// Compares shortcut and sequential checkpoints trained with the long padded
/// profile, when `CAPSNET_AFFNIST_SHORTCUT` and `CAPSNET_AFFNIST_SEQUENTIAL`
/// point at them.
fn affnist_signal() -> Outcome {
    let (Some(a), Some(b)) = (std::env::var_os("CAPSNET_AFFNIST_SHORTCUT"), std::env::var_os("CAPSNET_AFFNIST_SEQUENTIAL")) else {
        return Outcome::NotGated(
            "needs long-profile checkpoints (set CAPSNET_AFFNIST_SHORTCUT and CAPSNET_AFFNIST_SEQUENTIAL)".into(),
        );
    };
    let accuracy = |ckpt: PathBuf| -> Result<f64, String> {
        cmd_eval(&EvalArgs {
            checkpoint: ckpt,
            dataset: EvalDataset::AffnistStyle,
            config: None,
            data_dir: Some(data_dir()),
            out: None,
            seed: 0,
        })
        .map(|(r, _)| r.accuracy)
        .map_err(|e| e.to_string())
    };
    match (accuracy(a.into()), accuracy(b.into())) {
        (Ok(s), Ok(q)) => {
            let detail = format!("affNist-style: shortcut {s:.4}, sequential {q:.4} (gap >= {AFFNIST_GAP})");
            if s - q >= AFFNIST_GAP {
                Outcome::NotGated(format!("signal present; {detail}"))
            } else {
                Outcome::NotGated(format!("signal absent; {detail}"))
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome::NotGated(format!("could not evaluate: {e}")),
    }
}

fn determinism(work: &Path) -> Outcome {
    let run = |name: &str, epochs: usize, resume: bool| {
        let out = work.join(name);
        let args = TrainArgs {
            data_dir: Some(data_dir()),
            out: Some(out.clone()),
            subset_size: Some(1000),
            n_val: Some(200),
            epochs: Some(epochs),
            seed: Some(7),
            resume,
            ..TrainArgs::default()
        };
        cmd_train(&args).map(|_| out)
    };
    let result = (|| -> capsnet::Result<(bool, bool, bool)> {
        let a = run("det-a", 3, false)?;
        let b = run("det-b", 3, false)?;
        let c = run("det-c", 1, false)?;
        run("det-c", 3, true)?;
        let read = |dir: &Path, file: &str| fs::read(dir.join(file)).expect("run output");
        let identical = read(&a, METRICS_FILE) == read(&b, METRICS_FILE);
        let resumed = read(&a, METRICS_FILE) == read(&c, METRICS_FILE);
        let weights = read(&a, LAST_CHECKPOINT) == read(&c, LAST_CHECKPOINT);
        Ok((identical, resumed, weights))
    })();
    match result {
        Ok((identical, resumed, weights)) => check(
            identical && resumed && weights,
            format!(
                "same seed twice: metrics.csv identical {identical}; 1 epoch + resume to 3 vs unbroken 3: metrics.csv identical {resumed}, last checkpoint identical {weights}"
            ),
        ),
        Err(e) => Outcome::Fail(format!("run failed: {e}")),
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("parameter counts", Box::new(param_counts)),
        ("routing FLOP model", Box::new(flop_model)),
        ("voting-tensor ratio", Box::new(voting_ratio_check)),
        ("gradient correctness", Box::new(gradients)),
        ("routing invariants", Box::new(routing_invariants)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("desk-scale training smoke", Box::new(|| smoke_training(work.path()))),
        ("shortcut vs sequential on affNist-style", Box::new(affnist_signal)),
        ("determinism and resume", Box::new(|| determinism(work.path()))),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        let (tag, detail) = match run() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed.push(n);
                ("FAIL", d)
            }
            Outcome::NotGated(d) => ("NOT GATED", d),
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
    }
    if failed.is_empty() {
        println!("acceptance: all gated criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
