//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cxr_reward::grpo::{grpo_loss, normalize_group, Group, PolicyLogProbs};
use cxr_reward::metrics::{evaluate_corpus, f1_score, macro_f1, percent, ClassF1, ClassSubset, EvalCase, EvalConfig};
use cxr_reward::reward::{correctness_reward, format_reward, length_reward};
use cxr_reward::toy::{advantages_for, analytic_gradient, log_softmax, sample_indices, softmax};
use cxr_reward::{
    validate_format, ClassId, Completion, LabelSet, Ontology, RewardConfig, RewardEngine, ToyLab, ToyTask,
    TrainConfig, WeightTable, NUM_CLASSES,
};
use cxr_reward_service::{AppState, ScoreResponse, ServiceConfig};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn timed(budget: Duration, started: Instant) -> Check {
    let took = started.elapsed();
    ensure!(took < budget, "took {took:.2?}, budget {budget:?}");
    Ok(format!("{took:.2?}"))
}

fn random_set(rng: &mut ChaCha8Rng) -> LabelSet {
    LabelSet::from_bits(rng.random_range(0..1u16 << NUM_CLASSES))
}

const PIECES: &[&str] = &[
    "<think>", "</think>", "<answer>", "</answer>", " ", "\n", ", ", "the", "heart", "is", "enlarged", "no",
    "effusion", "cardiomegaly", "Edema", "PLEURAL EFFUSION", "No Finding", "lungs clear", "é", "<think", "</",
    "support devices", "atelectasis", "pneumothorax", "\t",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let soup = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..rng.random_range(0..n)).map(|_| *PIECES.choose(rng).unwrap()).collect()
    };
    if rng.random_bool(0.5) {
        let think = (0..rng.random_range(0..600)).map(|_| "word ").collect::<String>();
        let answer = if rng.random_bool(0.8) { random_set(rng).to_answer_string() } else { soup(rng, 8) };
        format!("<think>{think}</think>\n<answer>{answer}</answer>")
    } else {
        soup(rng, 40)
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> RewardConfig {
    let mut weights = [1.0; NUM_CLASSES];
    if rng.random_bool(0.5) {
        for w in &mut weights {
            *w = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..5.0) };
        }
    }
    RewardConfig {
        l_min: if rng.random_bool(0.2) { 0 } else { rng.random_range(1..1000) },
        weights: WeightTable::new(weights).unwrap(),
        token_scheme: if rng.random_bool(0.5) { "whitespace" } else { "chars" }.into(),
        ..RewardConfig::default()
    }
}

fn reward_bounds() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut formatted = 0;
    for i in 0..100_000 {
        let text = random_text(&mut rng);
        let gold = random_set(&mut rng);
        let cfg = random_config(&mut rng);
        let b = RewardEngine::builtin(cfg.clone()).unwrap().score(&text, gold);
        let ctx = || format!("input {i}: {text:?}");
        ensure!((0.0..=1.0).contains(&b.r_cor), "r_cor {} out of range, {}", b.r_cor, ctx());
        ensure!(b.r_fmt <= 1 && b.r_fmt == format_reward(&text), "r_fmt {}, {}", b.r_fmt, ctx());
        ensure!((-1.0..=0.0).contains(&b.r_len), "r_len {} out of range, {}", b.r_len, ctx());
        ensure!(b.r_len == length_reward(b.token_count, cfg.l_min), "r_len mismatch, {}", ctx());
        let identity = b.r_cor * f64::from(b.r_fmt) + b.r_len;
        ensure!((b.reward - identity).abs() <= 1e-12, "identity off by {}, {}", b.reward - identity, ctx());
        ensure!((-1.0..=1.0).contains(&b.reward), "reward {} out of range, {}", b.reward, ctx());
        formatted += usize::from(b.r_fmt);
    }
    let t = timed(Duration::from_secs(30), started)?;
    Ok(format!("100000 inputs ({formatted} well formed) in {t}"))
}

fn iou_oracle() -> Check {
    let sub = [ClassId::ATELECTASIS, ClassId::CARDIOMEGALY, ClassId::EDEMA, ClassId::PLEURAL_EFFUSION];
    let subset_of = |mask: u8| -> (Vec<ClassId>, LabelSet) {
        let classes: Vec<ClassId> = (0..4).filter(|k| mask & (1 << k) != 0).map(|k| sub[k]).collect();
        let set = classes.iter().copied().collect();
        (classes, set)
    };
    // Dyadic weights keep every partial sum exact, so the comparison is exact too.
    let dyadic = WeightTable::from_overrides([("Atelectasis", 2.0), ("Edema", 0.5), ("Pleural Effusion", 4.0)]).unwrap();
    let engine = RewardEngine::builtin(RewardConfig { l_min: 0, ..RewardConfig::default() }).unwrap();
    let mut pairs = 0;
    for a in 0..16u8 {
        for b in 0..16u8 {
            let (pa, pred) = subset_of(a);
            let (ga, gold) = subset_of(b);
            for weights in [WeightTable::equal(), dyadic] {
                let w = |c: &ClassId| weights.get(*c);
                let inter: f64 = pa.iter().filter(|c| ga.contains(c)).map(w).sum();
                let mut union: Vec<ClassId> = pa.clone();
                union.extend(ga.iter().filter(|c| !pa.contains(c)));
                let union: f64 = union.iter().map(w).sum();
                let want = if union == 0.0 { 1.0 } else { inter / union };
                let got = correctness_reward(pred, gold, &weights);
                ensure!(got == want, "{pa:?} vs {ga:?}: got {got}, want {want}");
            }
            let text = format!("<think>x</think><answer>{}</answer>", pred.to_answer_string());
            let via_text = engine.score(&text, gold).r_cor;
            ensure!(via_text == correctness_reward(pred, gold, &WeightTable::equal()), "text path differs for {pa:?}");
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs, equal and dyadic weights, plus the text path"))
}

fn length_anchors() -> Check {
    let cases = [(400, 0.0), (0, -1.0), (200, -0.5), (401, 0.0), (10_000, 0.0), (100, -0.75), (300, -0.25)];
    for (l, want) in cases {
        let got = length_reward(l, 400);
        ensure!(got == want, "L={l}: got {got}, want {want}");
    }
    for l in 0..1000 {
        let r = length_reward(l, 400);
        ensure!((-1.0..=0.0).contains(&r), "L={l}: {r}");
        ensure!(l == 0 || r >= length_reward(l - 1, 400), "not monotone at L={l}");
    }
    let engine = RewardEngine::builtin(RewardConfig::default()).unwrap();
    let body = |n: usize| vec!["w"; n].join(" ");
    ensure!(engine.score(&body(400), LabelSet::empty()).r_len == 0.0, "400 whitespace tokens");
    ensure!(engine.score(&body(200), LabelSet::empty()).r_len == -0.5, "200 whitespace tokens");
    ensure!(engine.score("", LabelSet::empty()).r_len == -1.0, "empty text");
    Ok(format!("{} anchors exact, monotone on 0..1000", cases.len()))
}

fn format_truth_table() -> Check {
    let cases: &[(&str, bool)] = &[
        ("<think>a</think> <answer>No Finding</answer>", true),
        ("<think>a<answer>b</answer>", false),
        ("<think>a</think><answer>b</answer><answer>c</answer>", false),
        ("", false),
        ("<answer>b</answer><think>a</think>", false),
        ("<think>a</think>", false),
        ("<answer>b</answer>", false),
        ("<think>a</think><think>a</think><answer>b</answer>", false),
        ("<think>a<answer>b</answer></think>", false),
        ("<think>a</think><answer>b<think>c</think></answer>", false),
        ("</think>a<think><answer>b</answer>", false),
        ("<think>a</think><answer>b", false),
        ("<think>a</think><answer>b</answer></answer>", false),
        ("<think></think><answer></answer>", true),
        ("  \n<think>a</think>\n\n<answer>b</answer>\n", true),
        ("<think>a</think>extra<answer>b</answer>", false),
        ("prefix <think>a</think><answer>b</answer>", false),
        ("<THINK>a</THINK><answer>b</answer>", false),
        ("<think>a</think><answer>b</answer><think>", false),
        ("<think>a</answer><answer>b</think>", false),
        ("<think>a</think><answer>b</answer> trailing", false),
        ("<think><think>a</think></think><answer>b</answer>", false),
        ("<think>a</think ><answer>b</answer>", false),
    ];
    for (text, want) in cases {
        let got = validate_format(text).ok;
        ensure!(got == *want, "{text:?}: got {got}, want {want}");
        ensure!(format_reward(text) == u8::from(*want), "format_reward disagrees on {text:?}");
    }
    Ok(format!("{} cases (3 anchored, {} adversarial)", cases.len(), cases.len() - 3))
}

fn normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean: f64 = 0.0;
    for _ in 0..2000 {
        let g = rng.random_range(2..=64);
        let r: Vec<f64> = (0..g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = normalize_group(&r, 1e-4).unwrap();
        worst_mean = worst_mean.max((a.iter().sum::<f64>() / g as f64).abs());

        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
        let b = normalize_group(&shifted, 1e-4).unwrap();
        ensure!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9), "shift {shift} moved advantages for {r:?}");

        // Exact equality needs exact arithmetic: dyadic rewards and a power-of-two group size.
        let n = 1usize << rng.random_range(1..=6);
        let grid: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-8..=8)) / 8.0).collect();
        let shift = f64::from(rng.random_range(-64..=64)) / 8.0;
        let shifted: Vec<f64> = grid.iter().map(|x| x + shift).collect();
        let (a, b) = (normalize_group(&grid, 1e-4).unwrap(), normalize_group(&shifted, 1e-4).unwrap());
        ensure!(a == b, "shift {shift} changed advantages for {grid:?}");

        let c = rng.random_range(-1.0..1.0);
        let flat = normalize_group(&vec![c; g], 1e-4).unwrap();
        ensure!(flat.iter().all(|x| *x == 0.0), "all-equal group {c} gave {flat:?}");
    }
    ensure!(worst_mean <= 1e-9, "mean advantage {worst_mean:e}");
    let pair = normalize_group(&[1.0, 0.0], 1e-4).unwrap();
    let want = 0.5 / (0.5 + 1e-4);
    ensure!((pair[0] - want).abs() <= 1e-9 && (pair[1] + want).abs() <= 1e-9, "[1,0] gave {pair:?}");
    ensure!((want - 0.9998000399920016).abs() <= 1e-15, "hand value");
    Ok(format!("2000 groups, worst |mean| {worst_mean:.1e}, [1,0] -> {pair:?}"))
}

fn loss_at(logits: &[f64], temperature: f64, samples: &[usize], advantages: &[f64]) -> f64 {
    let lsm = log_softmax(logits, temperature);
    let completions = samples.iter().map(|k| Completion::new(k.to_string(), "")).collect();
    let mut group = Group::new("p", completions, vec![0.0; samples.len()]).unwrap();
    group.advantages = advantages.to_vec();
    let lp = PolicyLogProbs::new(samples.iter().map(|&k| lsm[k]).collect());
    grpo_loss(&[group], &[lp], 0.0).unwrap()
}

fn gradient_check() -> Check {
    let started = Instant::now();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let k = rng.random_range(2..=8);
        let g = rng.random_range(2..=16);
        let temperature = rng.random_range(0.5..2.0);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rewards: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let samples = sample_indices(&softmax(&logits, temperature), g, &mut rng);
        let adv = advantages_for(&rewards, &samples, 1e-4).unwrap();
        let analytic = analytic_gradient(&logits, temperature, &samples, &adv).unwrap();
        let numeric: Vec<f64> = (0..k)
            .map(|j| {
                let (mut up, mut down) = (logits.clone(), logits.clone());
                up[j] += h;
                down[j] -= h;
                (loss_at(&up, temperature, &samples, &adv) - loss_at(&down, temperature, &samples, &adv)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
        ensure!(rel <= 1e-5, "instance {i}: relative error {rel:e}");
        worst = worst.max(rel);
    }
    let t = timed(Duration::from_secs(10), started)?;
    Ok(format!("100 instances, worst relative error {worst:.1e}, {t}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn convergence() -> Check {
    let started = Instant::now();
    let cfg = TrainConfig::default();
    ensure!((cfg.group_size, cfg.steps, cfg.seed) == (16, 200, 7), "unexpected defaults");
    let lab = ToyLab::new(ToyTask::default_demo(), cfg.reward.clone()).map_err(|e| e.to_string())?;
    let (log, _) = lab.train(&cfg).map_err(|e| e.to_string())?;
    let seed7 = log.final_mean_p_correct();
    ensure!(seed7 >= 0.9, "seed 7 ends at {seed7:.4}");

    let initial = log.records[0].p_correct.clone();
    let mut finals: Vec<Vec<f64>> = vec![Vec::new(); initial.len()];
    for seed in 0..20 {
        let (log, _) = lab.train(&TrainConfig { seed, ..cfg.clone() }).map_err(|e| e.to_string())?;
        for (p, v) in log.last().p_correct.iter().enumerate() {
            finals[p].push(*v);
        }
    }
    let medians: Vec<f64> = finals.into_iter().map(median).collect();
    for (p, (m, i)) in medians.iter().zip(&initial).enumerate() {
        ensure!(m > i, "prompt {p}: median {m:.4} vs initial {i:.4}");
    }
    let t = timed(Duration::from_secs(60), started)?;
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.3}")).collect();
    Ok(format!("seed 7 -> {seed7:.4}; 20-seed medians [{}]; {t}", shown.join(", ")))
}

fn overshort() -> Check {
    let train = |l_min: u32| -> Result<Vec<Vec<f64>>, String> {
        let reward = RewardConfig { l_min, ..RewardConfig::default() };
        let lab = ToyLab::new(ToyTask::overshort_demo(), reward.clone()).map_err(|e| e.to_string())?;
        let (_, policy) = lab.train(&TrainConfig { reward, ..TrainConfig::default() }).map_err(|e| e.to_string())?;
        Ok((0..lab.task().prompts.len()).map(|p| policy.probabilities(p)).collect())
    };
    let penalized = train(400)?;
    for (p, probs) in penalized.iter().enumerate() {
        ensure!(probs[1] >= 0.8, "l_min=400, prompt {p}: long variant at {:.4}", probs[1]);
    }
    let free = train(0)?;
    for (p, probs) in free.iter().enumerate() {
        ensure!((probs[0] - probs[1]).abs() <= 0.15, "l_min=0, prompt {p}: {probs:?}");
    }
    let worst_long = penalized.iter().map(|p| p[1]).fold(1.0, f64::min);
    let worst_gap = free.iter().map(|p| (p[0] - p[1]).abs()).fold(0.0, f64::max);
    Ok(format!("l_min=400 min p(long) {worst_long:.4}; l_min=0 max gap {worst_gap:.4}"))
}

fn metric_fixture() -> Check {
    let values = [67.2, 74.7, 23.5, 66.7, 71.1];
    let per_class: BTreeMap<ClassId, ClassF1> = ClassSubset::five_class()
        .classes
        .iter()
        .zip(values)
        .map(|(c, v)| (*c, ClassF1 { f1: v / 100.0, undefined: false }))
        .collect();
    let m = macro_f1(&per_class, &ClassSubset::five_class(), false).map_err(|e| e.to_string())?;
    ensure!((m * 100.0 - 60.64).abs() <= 1e-9, "macro {m}");
    let shown = percent(m);
    ensure!(shown == "60.6", "rendered {shown}");
    Ok(format!("macro {:.2}, rendered {shown}", m * 100.0))
}

struct Synthetic {
    id: String,
    text: String,
    gold: LabelSet,
    predicted: LabelSet,
}

fn synthetic_corpus(n: usize, seed: u64) -> Vec<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gold = random_set(&mut rng);
            let mut predicted = if rng.random_bool(0.3) { gold } else { random_set(&mut rng) };
            let text = if rng.random_bool(0.1) {
                predicted = LabelSet::empty();
                "<answer>Edema</answer>".to_string()
            } else {
                format!("<think>case {i}</think>\n<answer>{}</answer>", predicted.to_answer_string())
            };
            Synthetic { id: format!("case-{i:03}"), text, gold, predicted }
        })
        .collect()
}

fn eval_oracle() -> Check {
    let mut corpus = synthetic_corpus(200, 21);
    let cases = |c: &[Synthetic]| -> Vec<(String, String, LabelSet)> {
        c.iter().map(|s| (s.id.clone(), s.text.clone(), s.gold)).collect()
    };
    let run = |owned: &[(String, String, LabelSet)]| {
        let items: Vec<EvalCase> = owned.iter().map(|(id, text, gold)| EvalCase { id, text, gold: Some(*gold) }).collect();
        evaluate_corpus(&items, None, Ontology::builtin(), &EvalConfig::default())
    };
    let report = run(&cases(&corpus)).map_err(|e| e.to_string())?;

    let mut oracle = vec![(0u64, 0u64, 0u64); NUM_CLASSES];
    for case in &corpus {
        for k in 0..NUM_CLASSES {
            let c = ClassId::new(k).unwrap();
            match (case.predicted.contains(c), case.gold.contains(c)) {
                (true, true) => oracle[k].0 += 1,
                (true, false) => oracle[k].1 += 1,
                (false, true) => oracle[k].2 += 1,
                _ => {}
            }
        }
    }
    let oracle_f1 = |(tp, fp, fn_): (u64, u64, u64)| {
        if tp + fp + fn_ == 0 {
            0.0
        } else {
            (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    for c in ClassId::all() {
        let k = report.counts.get(c);
        ensure!((k.tp, k.fp, k.fn_) == oracle[c.index()], "{c}: counts differ");
        ensure!(report.per_class_f1[&c].f1 == oracle_f1(oracle[c.index()]), "{c}: F1 differs");
        ensure!(f1_score(k) == report.per_class_f1[&c], "{c}: f1_score differs");
    }
    for (subset, value) in &report.macro_f1 {
        let sum: f64 = subset.classes.iter().map(|c| oracle_f1(oracle[c.index()])).sum();
        ensure!(*value == sum / subset.classes.len() as f64, "{} macro differs", subset.name);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        corpus.shuffle(&mut rng);
        let again = run(&cases(&corpus)).map_err(|e| e.to_string())?;
        ensure!(again.counts == report.counts, "counts changed under permutation");
        ensure!(again.macro_f1 == report.macro_f1, "macro changed under permutation");
        ensure!(again.render_table() == report.render_table(), "table changed under permutation");
    }
    Ok("200 cases match the double-loop oracle; 10 permutations identical".into())
}

fn golden_items() -> Vec<Value> {
    std::fs::read_to_string(fixture("golden_completions.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn service_equivalence() -> Check {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let state = AppState::new(ServiceConfig::default()).map_err(|e| e.to_string())?;
        let listener = cxr_reward_service::bind("127.0.0.1:0".parse().unwrap()).await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        tokio::spawn(cxr_reward_service::serve(listener, state, std::future::pending()));
        let client = reqwest::Client::new();

        let items = golden_items();
        let body = json!({ "items": items, "config": { "l_min": 40 } });
        let resp = client.post(format!("{base}/v1/score")).json(&body).send().await.map_err(|e| e.to_string())?;
        ensure!(resp.status() == 200, "score status {}", resp.status());
        let text = resp.text().await.map_err(|e| e.to_string())?;
        let scored: ScoreResponse = serde_json::from_str(&text).map_err(|e| e.to_string())?;

        let engine = RewardEngine::builtin(RewardConfig { l_min: 40, ..RewardConfig::default() }).unwrap();
        let expected: Value = serde_json::from_str(&std::fs::read_to_string(fixture("golden_expected.json")).unwrap()).unwrap();
        ensure!(scored.records.len() == items.len(), "record count {}", scored.records.len());
        for ((item, rec), want) in items.iter().zip(&scored.records).zip(expected["records"].as_array().unwrap()) {
            let gold: LabelSet = serde_json::from_value(item["gold"].clone()).unwrap();
            let local = engine.score(item["text"].as_str().unwrap(), gold);
            ensure!(rec.id == item["id"].as_str().unwrap(), "order differs at {}", rec.id);
            ensure!(
                rec.reward.to_bits() == local.reward.to_bits()
                    && rec.r_cor.to_bits() == local.r_cor.to_bits()
                    && rec.r_len.to_bits() == local.r_len.to_bits()
                    && rec.r_fmt == local.r_fmt
                    && rec.predicted == local.predicted
                    && rec.token_count == local.token_count,
                "{} differs from the library",
                rec.id
            );
            ensure!(rec.reward.to_bits() == want["reward"].as_f64().unwrap().to_bits(), "{} differs from golden", rec.id);
        }

        let groups = vec![vec![1.0, 0.0], vec![0.25; 4], vec![0.1, 0.7, -0.2, 0.4, 0.9]];
        let resp = client.post(format!("{base}/v1/advantages")).json(&json!({ "groups": groups })).send().await;
        let adv: Value = resp.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
        let got: Vec<Vec<f64>> = serde_json::from_value(adv["advantages"].clone()).map_err(|e| e.to_string())?;
        for (g, a) in groups.iter().zip(&got) {
            let want = normalize_group(g, 1e-4).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure!(bits(a) == bits(&want), "advantages differ for {g:?}");
        }

        let mut bad = items.clone();
        bad[3]["gold"] = json!(["Zebra"]);
        let resp = client.post(format!("{base}/v1/score")).json(&json!({ "items": bad })).send().await.map_err(|e| e.to_string())?;
        let status = resp.status();
        let err: Value = resp.json().await.map_err(|e| e.to_string())?;
        ensure!(status == 422 && err["path"] == "items[3].gold[0]", "unknown label: {status} {err}");

        let mut bad = items.clone();
        bad[5]["text"] = json!(7);
        let resp = client.post(format!("{base}/v1/score")).json(&json!({ "items": bad })).send().await.map_err(|e| e.to_string())?;
        let status = resp.status();
        let err: Value = resp.json().await.map_err(|e| e.to_string())?;
        ensure!(status == 400 && err["path"] == "items[5].text", "wrong type: {status} {err}");

        Ok(format!("{} golden records bit-identical; advantages bit-identical; malformed batches carry paths", items.len()))
    })
}

fn cli(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cxr-reward")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let golden = fixture("golden_completions.jsonl");
    let eval_in = fixture("eval_small.jsonl");
    let eval_gold = fixture("eval_small_gold.csv");
    let (golden, eval_in, eval_gold) = (golden.to_str().unwrap(), eval_in.to_str().unwrap(), eval_gold.to_str().unwrap());
    let read = |p: &str| std::fs::read(p).map_err(|e| e.to_string());

    let mut files: HashMap<&str, Vec<Vec<u8>>> = HashMap::new();
    for run in ["1", "2"] {
        let score = path(&format!("score{run}.jsonl"));
        cli(&["score", golden, "--out", &score])?;
        files.entry("score file").or_default().push(read(&score)?);

        let report = path(&format!("eval{run}.json"));
        let out = cli(&["eval", eval_in, "--gold", eval_gold, "--subset", "five_class", "--subset", "all", "--out", &report])?;
        files.entry("eval table").or_default().push(out.stdout);
        files.entry("eval report").or_default().push(read(&report)?);

        let log = path(&format!("log{run}.csv"));
        cli(&["grpo-demo", "--seed", "7", "--out", &log])?;
        files.entry("train log").or_default().push(read(&log)?);

        let log = path(&format!("short{run}.csv"));
        cli(&["grpo-demo", "--task", "overshort", "--l-min", "400", "--seed", "3", "--out", &log])?;
        files.entry("overshort log").or_default().push(read(&log)?);
    }
    let mut names: Vec<&&str> = files.keys().collect();
    names.sort();
    for name in &names {
        let runs = &files[**name];
        ensure!(!runs[0].is_empty(), "{name} is empty");
        ensure!(runs[0] == runs[1], "{name} differs between identical runs");
    }
    let other = path("log_other.csv");
    cli(&["grpo-demo", "--seed", "8", "--out", &other])?;
    ensure!(read(&other)? != files["train log"][0], "seed has no effect on the train log");
    Ok(format!("{} artifacts byte-identical across runs", names.len()))
}

fn main() {
    let criteria: &[Criterion] = &[
        ("reward bounds and identity (1e5 fuzz)", reward_bounds),
        ("IoU oracle over a 4-class sub-ontology", iou_oracle),
        ("length-penalty anchor points", length_anchors),
        ("format-reward truth table", format_truth_table),
        ("group-normalization invariants", normalization),
        ("GRPO gradient check", gradient_check),
        ("toy GRPO convergence", convergence),
        ("overshort-penalty behavior", overshort),
        ("five-class macro-F1 fixture", metric_fixture),
        ("eval double-loop oracle", eval_oracle),
        ("service equivalence", service_equivalence),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
