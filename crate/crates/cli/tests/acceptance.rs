//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line even when the suite passes.

use mrvg_core::adapter::{infonce_backward, train_adapter, AdapterParams, TrainConfig};
use mrvg_core::chat::{BackendError, ChatBackend, ChatRequest};
use mrvg_core::checkpoint::save_checkpoint;
use mrvg_core::describer::build_description_prompt;
use mrvg_core::detector::{classify_proposals, Proposal};
use mrvg_core::evalkit::{
    acc_at, acc_at_ious, average_precision, iou, macc, GroundTruthBox, ScoredBox, ThresholdRule, MACC_THRESHOLDS,
};
use mrvg_core::featio::{read_tensor, write_tensor, Embedding, Tensor, TensorData};
use mrvg_core::geom::BoundingBox;
use mrvg_core::matcher::{
    match_independent, match_joint, parse_match_response, render_independent_prompt, render_joint_prompt,
    Candidate, Expression, Resolver, Strategy,
};
use mrvg_core::profile::profile_from_value;
use mrvg_core::refdb::ReferenceInstance;
use mrvg_core::synthgen::{gen_bank, gen_scene, noisy_sample, oracle_assignments, synth_profile, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(start: Instant, limit: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    if took > limit {
        Err(format!("{detail}; took {took:.1?}, limit {limit:?}"))
    } else {
        Ok(format!("{detail}; {took:.1?}"))
    }
}

// ---------------------------------------------------------------- gradients

/// Plain scalar re-statement of the adapter and loss, independent of the
/// library's matrix code.
struct ScalarModel {
    dim: usize,
    hidden: usize,
    alpha: f64,
}

impl ScalarModel {
    /// `theta` is laid out as w1 (hidden x dim, row major), b1, w2 (dim x hidden), b2.
    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let (d, h) = (self.dim, self.hidden);
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(d * h);
        let a: Vec<f64> = (0..h)
            .map(|j| (b1[j] + (0..d).map(|i| w1[j * d + i] * x[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..d)
            .map(|i| {
                let o = b2[i] + (0..h).map(|j| w2[i * h + j] * a[j]).sum::<f64>();
                self.alpha * o + (1.0 - self.alpha) * x[i]
            })
            .collect()
    }

    fn loss(&self, theta: &[f64], xs: &[Vec<f64>], labels: &[u32], t: f64) -> f64 {
        let u: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                let z = self.forward(theta, x);
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                z.iter().map(|v| v / n).collect()
            })
            .collect();
        let n = u.len();
        let sim = |a: usize, b: usize| u[a].iter().zip(&u[b]).map(|(p, q)| p * q).sum::<f64>() / t;
        let (mut total, mut pairs) = (0.0, 0usize);
        for a in 0..n {
            let denom: f64 = (0..n).filter(|&k| k != a).map(|k| sim(a, k).exp()).sum();
            for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
                total -= (sim(a, p).exp() / denom).ln();
                pairs += 1;
            }
        }
        total / pairs as f64
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let dim = rng.random_range(2..=8);
        let n = rng.random_range(2..=12);
        let classes = rng.random_range(1..=n.min(4) as u32);
        let t = rng.random_range(0.05..1.0);
        let alpha = rng.random_range(0.1..=1.0);
        let mut params = AdapterParams::init(dim, alpha, &mut rng);
        for v in params.b1.iter_mut().chain(params.b2.iter_mut()) {
            *v = rng.random_range(-0.3..0.3);
        }
        let mut labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        labels[1] = labels[0];
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<(Embedding, u32)> = xs.iter().zip(&labels).map(|(x, &l)| (Embedding::raw(x.clone()), l)).collect();

        let (_, grads) = infonce_backward(&params, &batch, t).map_err(|e| format!("case {case}: {e}"))?;
        let analytic = grads.flatten();
        let model = ScalarModel {
            dim,
            hidden: params.hidden(),
            alpha,
        };
        let theta = params.flatten();
        ensure!(theta.len() == analytic.len(), "case {case}: gradient length {}", analytic.len());
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let fd = (model.loss(&plus, &xs, &labels, t) - model.loss(&minus, &xs, &labels, t)) / (2.0 * h);
            // relative error, floored so exact zeros compare absolutely
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    ensure!(worst <= 1e-4, "max relative error {worst:.3e} > 1e-4");
    within(start, Duration::from_secs(10), format!("50 configs, max relative error {worst:.2e}"))
}

// ----------------------------------------------------------- adapter helps

fn bank_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        n_instances: 20,
        k_views: 14,
        dim: 64,
        cluster_sigma: 0.45,
        seed,
        ..SynthConfig::default()
    }
}

fn held_out_accuracy(proposals: &[Proposal], truth: &[u32], bank: &mrvg_core::TemplateBank, p: &AdapterParams) -> f64 {
    let dets = classify_proposals(proposals, bank, p, -2.0).expect("classify");
    assert_eq!(dets.len(), proposals.len());
    let hits = dets.iter().zip(truth).filter(|(d, &t)| d.instance_id == t).count();
    hits as f64 / truth.len() as f64
}

fn adapter_helps() -> Outcome {
    let start = Instant::now();
    let mut strictly = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let b = gen_bank(&bank_cfg(seed)).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let (mut proposals, mut truth) = (Vec::new(), Vec::new());
        for (i, c) in b.centers.iter().enumerate() {
            for _ in 0..25 {
                proposals.push(Proposal {
                    bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    mask: None,
                    embedding: noisy_sample(c, 0.45, &mut rng),
                    objectness: 1.0,
                });
                truth.push(i as u32 + 1);
            }
        }
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 256,
            seed,
            ..TrainConfig::default()
        };
        let trained = train_adapter(&b.bank, &cfg).map_err(|e| e.to_string())?.params;
        let mut off = trained.clone();
        off.alpha = 0.0;
        let with = held_out_accuracy(&proposals, &truth, &b.bank, &trained);
        let without = held_out_accuracy(&proposals, &truth, &b.bank, &off);
        ensure!(with >= without, "seed {seed}: adapter {with:.3} < alpha=0 {without:.3}");
        strictly += usize::from(with > without);
        rows.push(format!("{without:.3}->{with:.3}"));
    }
    ensure!(strictly >= 4, "strictly better on only {strictly}/5 seeds ({})", rows.join(", "));
    within(
        start,
        Duration::from_secs(120),
        format!("alpha=0 -> trained accuracy {}", rows.join(", ")),
    )
}

// ------------------------------------------------------------- determinism

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn training_determinism() -> Outcome {
    let start = Instant::now();
    let b = gen_bank(&bank_cfg(3)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 256,
        seed: 11,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut dumps = Vec::new();
    for run in ["a", "b"] {
        let out = train_adapter(&b.bank, &cfg).map_err(|e| e.to_string())?;
        let dir = tmp.path().join(run);
        save_checkpoint(&dir, &out.params, &cfg, &out.loss_history).map_err(|e| e.to_string())?;
        dumps.push(dir_bytes(&dir));
    }
    ensure!(dumps[0].len() == 5, "expected 5 checkpoint files, found {}", dumps[0].len());
    ensure!(dumps[0] == dumps[1], "checkpoints differ");
    within(start, Duration::from_secs(60), "two runs, 5 checkpoint files byte-identical".into())
}

// --------------------------------------------------------- metric oracles

fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..110 {
        for x in 0..110 {
            let (pa, pb) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(pa && pb);
            union += u64::from(pa || pb);
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn bx(r: [i64; 4]) -> BoundingBox {
    BoundingBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random_box = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0..60),
            rng.random_range(0..60),
            rng.random_range(1..=50),
            rng.random_range(1..=50),
        ]
    };
    for i in 0..1000 {
        let a = random_box(&mut rng);
        // every third pair is a jittered copy so high overlaps are common
        let b = if i % 3 == 0 {
            [a[0] + rng.random_range(-3..=3), a[1] + rng.random_range(-3..=3), a[2], a[3]].map(|v| v.max(0))
        } else {
            random_box(&mut rng)
        };
        let (got, want) = (iou(&bx(a), &bx(b)), raster_iou(a, b));
        ensure!(got == want, "iou({a:?}, {b:?}) = {got}, raster {want}");
    }

    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let gt = bx([20, 20, 40, 40]);
        let pairs: Vec<(Option<BoundingBox>, BoundingBox)> = (0..n)
            .map(|_| {
                let p = (rng.random_bool(0.9)).then(|| bx(random_box(&mut rng)));
                (p, gt)
            })
            .collect();
        for rule in [ThresholdRule::Strict, ThresholdRule::Inclusive] {
            let mean = MACC_THRESHOLDS.iter().map(|&t| acc_at(&pairs, t, rule)).sum::<f64>() / 9.0;
            let m = macc(&pairs, rule);
            ensure!((m - mean).abs() <= 1e-12, "macc {m} vs mean {mean}");
        }
    }

    let strict = ThresholdRule::Strict;
    let hand = [
        ("acc {0.6,0.4,0.95}@0.5", acc_at_ious(&[0.6, 0.4, 0.95], 0.5, strict), 2.0 / 3.0),
        ("acc iou==tau", acc_at_ious(&[0.5], 0.5, strict), 0.0),
    ];
    for (name, got, want) in hand {
        ensure!((got - want).abs() < 1e-12, "{name}: {got} != {want}");
    }
    // iou 0.72: a 100x100 box against a 100x72 box inside it
    let m = macc(&[(Some(bx([0, 0, 100, 72])), bx([0, 0, 100, 100]))], strict);
    ensure!((m - 5.0 / 9.0).abs() < 1e-12, "macc at iou 0.72 = {m}");

    let gt = |x: i64, cat: u32| GroundTruthBox {
        image: "q",
        category: cat,
        bbox: bx([x, 0, 10, 10]),
    };
    let det = |x: i64, cat: u32, score: f64| ScoredBox {
        image: "q",
        category: cat,
        bbox: bx([x, 0, 10, 10]),
        score,
    };
    // one GT, one detection at iou 0.9 (10x10 against 10x9 inside it)
    let near = ScoredBox {
        bbox: bx([0, 0, 10, 9]),
        ..det(0, 1, 0.5)
    };
    let s = average_precision(&[near], &[gt(0, 1)]);
    ensure!(s.ap50 == 1.0 && s.ap75 == 1.0, "single iou 0.9 detection: {s:?}");
    let s = average_precision(&[], &[gt(0, 1)]);
    ensure!(s.ap == 0.0 && s.ap50 == 0.0 && s.ap75 == 0.0, "no detections: {s:?}");
    let s = average_precision(&[det(0, 1, 0.9), det(50, 1, 0.8)], &[gt(0, 1)]);
    ensure!(s.ap50 == 1.0, "TP 0.9 then FP 0.8: AP50 {}", s.ap50);
    // TP, FP, TP over two GTs: precision 1 up to recall 0.5 (51 points),
    // 2/3 above it (50 points)
    let s = average_precision(&[det(0, 1, 0.9), det(50, 1, 0.8), det(100, 1, 0.7)], &[gt(0, 1), gt(100, 1)]);
    let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    ensure!((s.ap50 - want).abs() < 1e-12, "TP/FP/TP: AP50 {} vs {want}", s.ap50);
    Ok("1000 iou pairs exact, macc = mean of 9 acc_at, AP50 hand fixtures".into())
}

// --------------------------------------------------------- prompt fidelity

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

fn golden(name: &str) -> String {
    let path = golden_dir().join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn reference_scene() -> (Vec<Candidate>, Vec<Expression>) {
    let v: Value = serde_json::from_str(&golden("reference_scene.json")).unwrap();
    let candidates = v["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|it| {
            let bbox: BoundingBox = serde_json::from_value(it["box"].clone()).unwrap();
            Candidate {
                item_id: it["item_id"].as_u64().unwrap() as u32,
                instance_id: it["instance_id"].as_u64().unwrap() as u32,
                profile: profile_from_value(&it["profile"], None).unwrap(),
                position: bbox.top_left(),
                bbox,
                mask: None,
            }
        })
        .collect();
    (candidates, serde_json::from_value(v["inquiries"].clone()).unwrap())
}

fn prompt_fidelity() -> Outcome {
    let (c, e) = reference_scene();
    let joint = render_joint_prompt(&c, &e).map_err(|e| e.to_string())?;
    ensure!(joint.system == golden("joint_system.txt"), "joint system prompt differs");
    ensure!(joint.user == golden("joint_user.txt"), "joint user prompt differs");
    let single = render_independent_prompt(&c, &e[0]).map_err(|e| e.to_string())?;
    ensure!(single.system == golden("independent_system.txt"), "independent system prompt differs");
    ensure!(single.user == golden("independent_user.txt"), "independent user prompt differs");
    let inst = ReferenceInstance {
        instance_id: 2,
        name: "002_coca-cola_soda_diet_pop_bottle".into(),
        templates: vec![],
        detail_image_path: Some(PathBuf::from("detail.png")),
        profile: None,
    };
    let d = build_description_prompt(&inst).map_err(|e| e.to_string())?;
    ensure!(d.system == golden("describe_system.txt"), "description system prompt differs");
    ensure!(d.user == golden("describe_user.txt"), "description user prompt differs");

    let items: BTreeSet<u32> = [5, 6, 7].into();
    let got: BTreeMap<u32, u32> =
        parse_match_response(&golden("joint_output.json"), Strategy::Joint, &items, &[1, 2, 3].into())
            .map_err(|e| e.to_string())?
            .into_iter()
            .collect();
    let want: BTreeMap<u32, u32> = [(1, 6), (2, 5), (3, 7)].into();
    ensure!(got == want, "parsed {got:?}, expected {want:?}");
    Ok("5 prompts byte-equal, joint answer parses to {1->6, 2->5, 3->7}".into())
}

// -------------------------------------------------------------- end to end

fn mrvg(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mrvg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("mrvg {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    mrvg(cwd, &["synth", "--out", "data", "--seed", "1"])?;
    mrvg(cwd, &["train-adapter", "--dataset", "data", "--run-dir", "run"])?;
    mrvg(cwd, &["detect", "--dataset", "data", "--run-dir", "run"])?;
    let mut summary = Vec::new();
    for strategy in ["joint", "independent"] {
        let common = ["--dataset", "data", "--run-dir", "run", "--strategy", strategy];
        mrvg(cwd, &[&["ground", "--backend", "heuristic"][..], &common].concat())?;
        mrvg(cwd, &[&["eval"][..], &common].concat())?;
        let text = std::fs::read_to_string(cwd.join(format!("run/report-{strategy}.json"))).map_err(|e| e.to_string())?;
        let report: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let g = &report["grounding"];
        let (a50, a90, m) = (g["acc"]["0.50"].as_f64(), g["acc"]["0.90"].as_f64(), g["macc"].as_f64());
        ensure!(
            a50 == Some(1.0) && a90 == Some(1.0) && m == Some(1.0),
            "{strategy}: Acc0.5 {a50:?} Acc0.9 {a90:?} mAcc {m:?}"
        );
        let n = g["per_expression"].as_array().map_or(0, Vec::len);
        summary.push(format!("{strategy} {n} expressions"));
    }
    within(
        start,
        Duration::from_secs(60),
        format!("Acc0.5 = Acc0.9 = mAcc = 1.0 ({})", summary.join(", ")),
    )
}

// -------------------------------------------------------- strategy isolation

/// Answers with the oracle assignment except for one target expression.
/// A joint answer keeps its one-to-one shape, so the target's wrong item is
/// swapped with the expression that owned it; an independent answer only
/// sees the target.
struct Corrupting {
    oracle_by_text: BTreeMap<String, u32>,
    target: String,
    wrong_item: u32,
}

impl ChatBackend for Corrupting {
    fn complete(&self, r: &ChatRequest) -> Result<String, BackendError> {
        let user = &r.prompt.user;
        if let Some(rest) = user.split("\n\nInquiries:\n").nth(1) {
            let block = rest.split("\n\n").next().unwrap_or_default();
            let mut pairs: Vec<(u32, String)> = Vec::new();
            for line in block.lines() {
                let (id, text) = line
                    .strip_prefix("Inquiry ID: ")
                    .and_then(|l| l.split_once(", Inquiry Content: "))
                    .ok_or_else(|| BackendError::Protocol(format!("unexpected line {line:?}")))?;
                pairs.push((id.parse().unwrap(), text.to_string()));
            }
            let target_item = self.oracle_by_text[&self.target];
            let matches: Vec<Value> = pairs
                .iter()
                .map(|(id, text)| {
                    let right = self.oracle_by_text[text];
                    let item = if *text == self.target {
                        self.wrong_item
                    } else if right == self.wrong_item {
                        target_item
                    } else {
                        right
                    };
                    serde_json::json!({"inquiry_id": id, "item_id": item})
                })
                .collect();
            return Ok(serde_json::json!({ "matches": matches }).to_string());
        }
        let text = user
            .split("\n\nInquiry:\n")
            .nth(1)
            .and_then(|r| r.split("\n\n").next())
            .ok_or_else(|| BackendError::Protocol("no inquiry".into()))?;
        let item = if text == self.target {
            self.wrong_item
        } else {
            self.oracle_by_text[text]
        };
        Ok(serde_json::json!({ "item_id": item }).to_string())
    }
}

fn strategy_isolation() -> Outcome {
    let cfg = SynthConfig {
        proposals_per_scene: 4,
        seed: 2,
        ..SynthConfig::default()
    };
    let bank = gen_bank(&cfg).map_err(|e| e.to_string())?;
    let scene = gen_scene(&cfg, &bank, 0).map_err(|e| e.to_string())?;
    ensure!(scene.expressions.len() == 4, "fixture has {} expressions", scene.expressions.len());
    let items = scene.items();
    let candidates: Vec<Candidate> = items
        .iter()
        .map(|(item, p)| {
            let id = p.instance_id.unwrap();
            Candidate {
                item_id: *item,
                instance_id: id,
                profile: synth_profile(id),
                position: p.bbox.top_left(),
                bbox: p.bbox,
                mask: None,
            }
        })
        .collect();
    let expressions: Vec<Expression> = scene
        .expressions
        .iter()
        .map(|e| Expression {
            expression_id: e.expression_id,
            text: e.text.clone(),
        })
        .collect();
    let oracle = oracle_assignments(&scene);
    let target = &scene.expressions[0];
    let wrong_item = oracle[&scene.expressions[1].expression_id];
    let mock = Corrupting {
        oracle_by_text: scene.expressions.iter().map(|e| (e.text.clone(), oracle[&e.expression_id])).collect(),
        target: target.text.clone(),
        wrong_item,
    };
    let resolver = Resolver::Llm {
        backend: &mock,
        model: "mock".into(),
        max_inflight: 2,
    };
    let joint = match_joint(&scene.image, &candidates, &expressions, &resolver).map_err(|e| e.to_string())?;
    let indep = match_independent(&scene.image, &candidates, &expressions, &resolver).map_err(|e| e.to_string())?;
    let changed = |rs: &[mrvg_core::matcher::MatchResult]| rs.iter().filter(|m| oracle[&m.expression_id] != m.item_id).count();
    let acc50 = |rs: &[mrvg_core::matcher::MatchResult]| {
        let pairs: Vec<_> = rs
            .iter()
            .map(|m| {
                let inst = scene.expressions.iter().find(|e| e.expression_id == m.expression_id).unwrap().instance_id;
                (Some(m.bbox), scene.gt_box(inst))
            })
            .collect();
        acc_at(&pairs, 0.5, ThresholdRule::Strict)
    };
    let (cj, ci) = (changed(&joint), changed(&indep));
    let (aj, ai) = (acc50(&joint), acc50(&indep));
    ensure!(ci == 1, "independent changed {ci} assignments");
    ensure!(cj >= 1, "joint changed {cj} assignments");
    ensure!(ai >= aj, "independent Acc0.5 {ai} < joint {aj}");
    Ok(format!(
        "independent changed {ci}, joint changed {cj}; Acc0.5 independent {ai:.2} >= joint {aj:.2}"
    ))
}

// ---------------------------------------------------------- tensor round trip

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<u64>) -> Tensor {
    let n: u64 = shape.iter().product();
    let data = if rng.random_bool(0.5) {
        TensorData::F32((0..n).map(|_| f32::from_bits(rng.random())).collect())
    } else {
        TensorData::F64((0..n).map(|_| f64::from_bits(rng.random())).collect())
    };
    Tensor::new(shape, data).expect("shape matches data")
}

fn bits(t: &TensorData) -> Vec<u64> {
    match t {
        TensorData::F32(v) => v.iter().map(|x| u64::from(x.to_bits())).collect(),
        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
    }
}

fn tensor_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tmp = tempfile::tempdir().unwrap();
    let mut shapes: Vec<Vec<u64>> = vec![vec![0], vec![3, 0, 2], vec![1000, 1000]];
    while shapes.len() < 100 {
        let rank = rng.random_range(1..=4);
        shapes.push((0..rank).map(|_| rng.random_range(1..=9)).collect());
    }
    for (i, shape) in shapes.into_iter().enumerate() {
        let t = random_tensor(&mut rng, shape);
        let path = tmp.path().join(format!("t{i}.mrvgt"));
        write_tensor(&path, &t).map_err(|e| e.to_string())?;
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        ensure!(back.shape == t.shape, "tensor {i}: shape {:?} != {:?}", back.shape, t.shape);
        ensure!(
            std::mem::discriminant(&back.data) == std::mem::discriminant(&t.data),
            "tensor {i}: dtype changed"
        );
        ensure!(bits(&back.data) == bits(&t.data), "tensor {i}: payload differs");
        ensure!(std::fs::read(&path).unwrap() == back.to_bytes(), "tensor {i}: re-encoding differs");
    }
    Ok("100 tensors (empty and 1e6-element included) bit-identical".into())
}

// ------------------------------------------------------------------- main

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_check),
        ("adapter helps", adapter_helps),
        ("training determinism", training_determinism),
        ("metric oracle equivalence", metric_oracles),
        ("prompt fidelity", prompt_fidelity),
        ("end-to-end oracle", end_to_end),
        ("strategy isolation", strategy_isolation),
        ("interchange round-trip", tensor_roundtrip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
