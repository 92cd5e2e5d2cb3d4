//! Acceptance criteria 1-10, one pass/fail line each on stderr.

#![allow(clippy::type_complexity, clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use tooluq::config::rng_from_seed;
use tooluq::eval::{auroc, emit_report, run_protocol, ExperimentConfig, ReportFormat, ResultTable};
use tooluq::generators::{Generator, GeneratorRequest, MockBehavior, MockGenerator, Stage};
use tooluq::metrics::{full_predictive_entropy, rag_predictive_entropy, sta_p, EntropyTerms, MetricKind, Mode};
use tooluq::pipeline::{brute_force_joint, brute_force_rag, Prompt, RagToySystem, ToySystem};
use tooluq::posteriors::{batch_loss, mlp_gradient, Batch, Loss, Mlp};
use tooluq::prob::{mc_predictive_entropy, mc_semantic_entropy};
use tooluq::semantics::{cluster, normalize_text, NormalizedMatch};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = rng_from_seed(seed);
        let (na, nz, ny) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=5));
        let sys = ToySystem::random(&mut rng, na, nz, ny);
        let e = brute_force_joint(&sys).map_err(|e| e.to_string())?.terms;
        let t = EntropyTerms {
            h_y_given_zx: e.h_y_given_zx,
            h_c_given_zx: e.h_y_given_zx,
            h_z_given_a: Some(e.h_z_given_a),
            h_a_given_x: Some(e.h_a_given_x),
            h_z_given_ya: Some(e.h_z_given_ya),
            h_a_given_xy: Some(e.h_a_given_xy),
            ..Default::default()
        };
        worst = worst.max((full_predictive_entropy(&t).map_err(|e| e.to_string())? - e.h_y_given_x).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("50 toy systems, max |error| {worst:.2e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = rng_from_seed(seed);
        let ny = rng.random_range(1..=5);
        let sys = RagToySystem::random(&mut rng, 3, ny);
        let e = brute_force_rag(&sys).map_err(|e| e.to_string())?;
        let t = EntropyTerms {
            h_y_given_zx: e.h_y_given_zx,
            h_c_given_zx: e.h_y_given_zx,
            h_z_given_x: Some(e.h_z_given_x),
            h_z_given_yx: Some(e.h_z_given_yx),
            ..Default::default()
        };
        worst = worst.max((rag_predictive_entropy(&t).map_err(|e| e.to_string())? - e.h_y_given_x).abs());
    }
    check(worst <= 1e-9, format!("50 three-document systems, max |error| {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = rng_from_seed(seed);
        let sys = ToySystem::strong_tool(&mut rng, 3, 5, 0.01);
        let e = brute_force_joint(&sys).map_err(|e| e.to_string())?.terms;
        let t = EntropyTerms {
            h_y_given_zx: e.h_y_given_zx,
            h_c_given_zx: e.h_y_given_zx,
            h_z_given_a: Some(e.h_z_given_a),
            ..Default::default()
        };
        worst = worst.max((sta_p(&t).map_err(|e| e.to_string())? - e.h_y_given_x).abs());
    }
    check(worst <= 0.05, format!("20 strong-tool systems, max |STA_P - H(y|x)| {worst:.4} nats"))
}

fn criterion_4() -> Outcome {
    let mut map = BTreeMap::new();
    map.insert("The flower is flower_type_1".to_string(), "purple".to_string());
    let distractors = ["Purple.", "blue", "Blue", "white"].map(String::from).to_vec();
    let gen = MockGenerator::new(MockBehavior::new(map, 0.55, distractors)).map_err(|e| e.to_string())?;
    let context = Prompt::new("Which color is the flower?", vec![]).answer_context("[5.1, 3.5, 1.4, 0.2]", "The flower is flower_type_1");
    let dist = gen.answer_distribution(&context).map_err(|e| e.to_string())?;
    let exact_pred = dist.entropy();
    let mut class_mass: BTreeMap<String, f64> = BTreeMap::new();
    for (label, p) in dist.iter() {
        *class_mass.entry(normalize_text(label)).or_default() += p;
    }
    let exact_sem = -class_mass.values().map(|p| p.ln()).sum::<f64>() / class_mass.len() as f64;
    let (mut worst_pred, mut worst_sem): (f64, f64) = (0.0, 0.0);
    for seed in 0..10 {
        let req = GeneratorRequest::new(Stage::Answer, context.clone(), 10_000).with_seed(seed);
        let samples = gen.generate(&req).map_err(|e| e.to_string())?;
        worst_pred = worst_pred.max((mc_predictive_entropy(&samples).map_err(|e| e.to_string())? - exact_pred).abs());
        let part = cluster(samples, &NormalizedMatch).map_err(|e| e.to_string())?;
        worst_sem = worst_sem.max((mc_semantic_entropy(&part).map_err(|e| e.to_string())? - exact_sem).abs());
    }
    check(
        worst_pred <= 0.05 && worst_sem <= 0.05,
        format!("N = 10000, 10 seeds, max error predictive {worst_pred:.4}, semantic {worst_sem:.4} nats"),
    )
}

fn random_case(seed: u64, regression: bool) -> (Mlp, Batch, Loss) {
    let mut rng = rng_from_seed(1000 + seed);
    let (d_in, hidden, n) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(1..8));
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    if regression {
        let d = rng.random_range(1..4);
        let mut model = Mlp::init(d_in, hidden, 2 * d, seed);
        model.b2.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let values = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let floors = (0..d).map(|_| rng.random_range(0.01..0.3)).collect();
        (model, Batch::values(inputs, values), Loss::GaussianNll { floors })
    } else {
        let k = rng.random_range(2..5);
        let mut model = Mlp::init(d_in, hidden, k, seed);
        model.w2.iter_mut().for_each(|w| *w += rng.random_range(-0.5..0.5));
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        (model, Batch::labels(inputs, labels), Loss::CrossEntropy)
    }
}

fn criterion_5() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (model, batch, loss) = random_case(seed, seed % 2 == 1);
        let g = mlp_gradient(&model, &batch, &loss).map_err(|e| e.to_string())?;
        let tensors: [(fn(&mut Mlp) -> &mut Vec<f64>, &Vec<f64>); 4] =
            [(|m| &mut m.w1, &g.w1), (|m| &mut m.b1, &g.b1), (|m| &mut m.w2, &g.w2), (|m| &mut m.b2, &g.b2)];
        for (get, analytic) in tensors {
            for i in 0..analytic.len() {
                let (mut plus, mut minus) = (model.clone(), model.clone());
                get(&mut plus)[i] += h;
                get(&mut minus)[i] -= h;
                let numeric = (batch_loss(&plus, &batch, &loss).map_err(|e| e.to_string())?
                    - batch_loss(&minus, &batch, &loss).map_err(|e| e.to_string())?)
                    / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic[i] - numeric).abs() / denom);
            }
        }
    }
    check(worst <= 1e-4, format!("20 model/batch pairs, max relative error {worst:.2e}"))
}

fn pair_count(u: &[f64], c: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (ui, ci) in u.iter().zip(c) {
        for (uj, cj) in u.iter().zip(c) {
            if !ci && *cj {
                den += 1.0;
                num += if ui > uj {
                    1.0
                } else if ui == uj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_6() -> Outcome {
    let mut rng = rng_from_seed(6);
    let (mut done, mut with_ties, mut mismatches) = (0, 0, 0);
    while done < 100 {
        let n = rng.random_range(2..=50);
        let u: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8)) / 10.0).collect();
        let c: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if c.iter().all(|x| *x) || c.iter().all(|x| !*x) {
            continue;
        }
        let mut sorted = u.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            with_ties += 1;
        }
        if auroc(&u, &c).map_err(|e| e.to_string())? != pair_count(&u, &c) {
            mismatches += 1;
        }
        done += 1;
    }
    check(mismatches == 0 && with_ties > 0, format!("100 instances ({with_ties} with ties), {mismatches} mismatches"))
}

/// Criterion 7 protocol: defaults are the intended setup.
fn ordering_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..Default::default() }
}

struct SeedSweep {
    tables: Vec<ResultTable>,
    elapsed: Duration,
}

fn sweep() -> &'static Result<SeedSweep, String> {
    static SWEEP: OnceLock<Result<SeedSweep, String>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let tables = (0..5u64)
            .map(|seed| run_protocol(&ordering_config(seed)).map(|o| o.table).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SeedSweep { tables, elapsed: start.elapsed() })
    })
}

fn auroc_of(t: &ResultTable, m: MetricKind) -> f64 {
    t.auroc(m).unwrap_or(f64::NAN)
}

fn criterion_7() -> Outcome {
    let s = sweep().as_ref().map_err(Clone::clone)?;
    let mut wins = 0;
    let mut cells = Vec::new();
    for t in &s.tables {
        let (sta, tool, sem_fa) =
            (auroc_of(t, MetricKind::StaS), auroc_of(t, MetricKind::ToolEntropy), auroc_of(t, MetricKind::SemFa));
        if sta > tool && sta > sem_fa {
            wins += 1;
        }
        cells.push(format!("{sta:.3}/{tool:.3}/{sem_fa:.3}"));
    }
    check(
        wins >= 4 && s.elapsed < Duration::from_secs(120),
        format!(
            "STA_S beats Tool Entropy and Sem. Entropy FA in {wins}/5 seeds (STA_S/Tool/SemFA: {}), {:.1}s",
            cells.join(" "),
            s.elapsed.as_secs_f64()
        ),
    )
}

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn criterion_8() -> Outcome {
    let s = sweep().as_ref().map_err(Clone::clone)?;
    let var = |m| variance(&s.tables.iter().map(|t| auroc_of(t, m)).collect::<Vec<_>>());
    let (v_sta, v_sem, v_pred) = (var(MetricKind::StaS), var(MetricKind::SemFull), var(MetricKind::PredFull));
    check(
        v_sem > v_sta && v_pred > v_sta,
        format!("across-seed AUROC variance STA_S {v_sta:.2e}, Sem. Entropy {v_sem:.2e}, Pred. Entropy {v_pred:.2e}"),
    )
}

fn criterion_9() -> Outcome {
    let d = ExperimentConfig::default();
    let protocol = d.n_answer_samples == 10
        && d.n_runs == 3
        && d.train_size == 30
        && d.eval_size == 120
        && d.few_shot_k == 3
        && d.dataset.n_questions == 150
        && d.tool.top_k == 5
        && d.tool.n_draws == 1
        && d.tool.noisy_fraction == 0.5
        && d.tool.peak_prob == 0.9
        && d.generator.faithfulness == 0.95;
    let columns = MetricKind::for_mode(Mode::Tool).len() == 7 && MetricKind::for_mode(Mode::Rag).len() == 5;
    let http = ExperimentConfig::from_toml_str(
        "[generator]\nkind = \"http\"\n[generator.http]\nendpoint = \"http://localhost:8000/v1/chat/completions\"\nmodel = \"any\"\n",
    )
    .is_ok();
    check(
        protocol && columns && http,
        "protocol defaults (10 samples x 3 runs, 30/120 split, 3-shot, K=5/M=1, 7/5 metric columns) and HTTP endpoint \
         config verified; absolute published AUROCs are not reproducible offline and are not asserted"
            .to_string(),
    )
}

fn criterion_10() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 42,
        n_runs: 2,
        train_size: 15,
        eval_size: 45,
        dataset: tooluq::eval::DatasetSettings { n_questions: 60, ..Default::default() },
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        let out = run_protocol(&cfg).map_err(|e| e.to_string())?;
        for f in [ReportFormat::Csv, ReportFormat::Jsonl, ReportFormat::Text] {
            emit_report(&out.table, f, dir.path().join(format!("report.{}", f.extension()))).map_err(|e| e.to_string())?;
        }
    }
    let mut identical = true;
    for ext in ["csv", "jsonl", "txt"] {
        let a = std::fs::read(dirs[0].path().join(format!("report.{ext}"))).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(format!("report.{ext}"))).map_err(|e| e.to_string())?;
        identical &= a == b;
    }
    check(identical, "two mock runs from one config: csv, jsonl and txt reports byte-identical".to_string())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("decomposition identity", criterion_1),
        ("RAG identity", criterion_2),
        ("STA validity, strong tool", criterion_3),
        ("estimator convergence", criterion_4),
        ("gradient correctness", criterion_5),
        ("AUROC oracle equivalence", criterion_6),
        ("end-to-end synthetic ordering", criterion_7),
        ("posterior-noise reproduction", criterion_8),
        ("non-reproducibility disclosure", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let _ = writeln!(err, "criterion {:>2} [{tag}] {name}: {detail}", i + 1);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed acceptance criteria: {failed:?}");
}
