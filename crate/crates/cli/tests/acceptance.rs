//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! a gating check fails. Run with `cargo test -p esp-cli --test acceptance`.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use esp_core::diagnostics::{lemma_check, lemma_monte_carlo, lemma_threshold};
use esp_core::engine::{decode, decode_autoregressive, decode_pld, prefill, run_bench, step, EngineConfig, Method};
use esp_core::layout::{advance_layout_efficient, build_layout_naive, AttentionLayout};
use esp_core::probe::{MaskInit, MaskStrategy};
use esp_core::records::toy_corpus;
use esp_core::tree::{
    block_complexity, build_dynamic_tree, build_static_tree, prune, softmax, BranchConfig, DraftTree,
};
use esp_core::{build_random_model, build_successor_model, Exec, FrozenModel, ModelConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean tau of ESP (BC=30, k=1, mean init, lambda 0.1, pruning on, greedy,
/// 64 new tokens) on the bundled corpus with toy model seed 0.
const PINNED_TAU_BC30_K1: f64 = 1.2609727355825013;

struct Line {
    name: String,
    pass: bool,
    gating: bool,
    detail: String,
}

fn line(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        name: name.into(),
        pass,
        gating: true,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_logits(r: &mut ChaCha8Rng, rows: usize, v: usize) -> Vec<Vec<f32>> {
    (0..rows).map(|_| (0..v).map(|_| r.random_range(-4.0f32..4.0)).collect()).collect()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Vec<Line> {
    let start = Instant::now();
    let mut runs = 0usize;
    let mut mismatches = Vec::new();
    for pair in 0..100u64 {
        let model = build_random_model(ModelConfig {
            vocab_size: 64,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            rope_base: 10_000.0,
            seed: 1000 + pair,
        })
        .unwrap();
        let mut r = rng(pair);
        let len = r.random_range(3..=12);
        let prompt: Vec<TokenId> = (0..len).map(|_| r.random_range(0..64)).collect();
        for temp in [0.0f32, 1.0] {
            let ar = decode_autoregressive(&model, &prompt, temp, pair, 24).unwrap();
            for k in [1usize, 2] {
                for bc in [10usize, 30, 60] {
                    // Even pairs use the default branch, odd pairs the dynamic tree.
                    let branch = if pair % 2 == 0 {
                        BranchConfig::default_for(bc, k).unwrap()
                    } else {
                        BranchConfig::dynamic(bc, k).unwrap()
                    };
                    for pruning in [true, false] {
                        let mut cfg = EngineConfig::new(bc, k).unwrap().with_branch(branch.clone());
                        cfg.temperature = temp;
                        cfg.seed = pair;
                        cfg.max_new_tokens = 24;
                        cfg.pruning = pruning;
                        let out = decode(&model, &prompt, &cfg).unwrap();
                        runs += 1;
                        if out.generated != ar {
                            mismatches.push(format!("pair {pair} T={temp} k={k} bc={bc} prune={pruning}"));
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    vec![
        line(
            "1 losslessness",
            mismatches.is_empty(),
            format!("{runs} decodes, {} mismatches {:?}", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
        ),
        line("1 runtime budget", secs < 60.0, format!("{secs:.1}s < 60s")),
    ]
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Vec<Line> {
    let cases: [(usize, &[usize], usize); 5] = [(2, &[15, 4], 60), (2, &[7, 2], 30), (1, &[29], 60), (1, &[14], 30), (1, &[4], 10)];
    let mut bad = Vec::new();
    let mut r = rng(2);
    for (k, widths, expect) in cases {
        let got = block_complexity(k, widths);
        // The flattened block of a real tree has the same length.
        let mut cfg = BranchConfig::fixed(widths.to_vec()).unwrap();
        cfg.k = k;
        let mut tree = build_static_tree(7, &random_logits(&mut r, k, 64), &cfg).unwrap();
        let block = build_layout_naive(&mut tree, 0, 0).unwrap().block_len();
        if got != expect || block != expect {
            bad.push(format!("k={k} {widths:?}: {got}, block {block}, want {expect}"));
        }
    }
    vec![line("2 block-complexity identities", bad.is_empty(), if bad.is_empty() { "5/5 exact".into() } else { bad.join("; ") })]
}

// ---------------------------------------------------------------- 3

/// Every token at every depth, each depth hanging off the previous depth's
/// argmax; the best `budget - 1` by (cum desc, depth, token).
fn exhaustive_dynamic(logits: &[Vec<f32>], budget: usize, k: usize) -> BTreeSet<(usize, Option<TokenId>, TokenId)> {
    let v = logits[0].len();
    let mut all = Vec::new();
    let mut parent: Option<TokenId> = None;
    let mut base = 1.0f64;
    for (d, row) in logits.iter().take(k).enumerate() {
        let p = softmax(row);
        for (t, &pt) in p.iter().enumerate() {
            all.push((base * pt, d + 1, parent, t as TokenId));
        }
        let best = (0..v).fold(0, |b, t| if p[t] > p[b] { t } else { b });
        parent = Some(best as TokenId);
        base *= p[best];
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.3.cmp(&b.3)));
    all.into_iter().take(budget - 1).map(|(_, d, p, t)| (d, p, t)).collect()
}

fn tree_set(tree: &DraftTree) -> BTreeSet<(usize, Option<TokenId>, TokenId)> {
    tree.nodes
        .iter()
        .map(|n| (n.depth, n.parent.map(|p| tree.nodes[p].token), n.token))
        .collect()
}

fn criterion_3() -> Vec<Line> {
    let mut r = rng(3);
    let mut law_fail = 0;
    for _ in 0..1000 {
        let k = r.random_range(1..=3);
        let budget = r.random_range(2..=40);
        let v = r.random_range(budget..=96);
        let logits = random_logits(&mut r, k, v);
        let tree = build_dynamic_tree(0, &logits, budget, k).unwrap();
        let connected = tree.validate().is_ok();
        if tree.len() + 1 != budget || !connected || tree_set(&tree) != exhaustive_dynamic(&logits, budget, k) {
            law_fail += 1;
        }
    }
    let mut oracle_fail = 0;
    for _ in 0..1000 {
        let k = r.random_range(1..=3);
        let v = r.random_range(2..=8);
        let budget = r.random_range(2..=6);
        let logits = random_logits(&mut r, k, v);
        let tree = build_dynamic_tree(0, &logits, budget, k).unwrap();
        if tree_set(&tree) != exhaustive_dynamic(&logits, budget, k) {
            oracle_fail += 1;
        }
    }
    vec![
        line("3 dynamic budget law", law_fail == 0, format!("1000 instances with V >= B, {law_fail} violations")),
        line("3 small-instance oracle", oracle_fail == 0, format!("1000 instances V<=8 B<=6, {oracle_fail} differences")),
    ]
}

// ---------------------------------------------------------------- 4

fn layouts_equal(a: &AttentionLayout, b: &AttentionLayout) -> bool {
    a.mask == b.mask && a.position_ids == b.position_ids && a.slot_map == b.slot_map
}

fn criterion_4(toy: &FrozenModel) -> Vec<Line> {
    let prompts = toy_corpus();
    let mut out = Vec::new();
    for (bc, k, widths) in [(60usize, 2usize, vec![15usize, 4]), (30, 1, vec![14])] {
        let mut cfg = EngineConfig::new(bc, k).unwrap().with_branch({
            let mut b = BranchConfig::fixed(widths.clone()).unwrap();
            b.k = k;
            b
        });
        cfg.efficient_layout = true;
        cfg.max_new_tokens = 200;
        let mut compared = 0;
        let mut diffs = 0;
        let mut state = prefill(toy, &prompts[0].tokens, &cfg).unwrap();
        let mut prev: Option<AttentionLayout> = None;
        while !state.finished {
            let p0 = state.cache.len();
            let mut pending = state.tree.clone().unwrap();
            let naive = build_layout_naive(&mut pending, p0, p0 as u32).unwrap();
            if let Some(prev) = &prev {
                let eff = advance_layout_efficient(prev, p0 - prev.cache_len).unwrap();
                compared += 1;
                diffs += usize::from(!layouts_equal(&eff, &naive));
            }
            step(toy, &mut state, &cfg).unwrap();
            let used = state.layout.clone().unwrap();
            diffs += usize::from(!layouts_equal(&used, &naive));
            prev = Some(used);
        }
        let mut naive_cfg = cfg.clone();
        naive_cfg.efficient_layout = false;
        let same_output = decode(toy, &prompts[0].tokens, &naive_cfg).unwrap().generated == state.generated();
        out.push(line(
            format!("4 efficient layout {widths:?}"),
            compared >= 50 && diffs == 0 && same_output,
            format!("{compared} consecutive steps compared, {diffs} differences, outputs equal: {same_output}"),
        ));
    }
    out
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Vec<Line> {
    let (v, stride) = (64u32, 3u32);
    let model = build_successor_model(v as usize, stride as usize).unwrap();
    let prompt: Vec<TokenId> = (0..8).map(|i| (2 + i * stride) % v).collect();
    let mut cfg = EngineConfig::new(10, 1).unwrap();
    cfg.max_new_tokens = 121;
    cfg.capture_diagnostics = true;
    let res = decode(&model, &prompt, &cfg).unwrap();
    let steps = &res.steps[1..];
    let emitted: usize = steps.iter().map(|s| s.emitted).sum();
    let steady = emitted as f64 / steps.len() as f64;
    let expected: Vec<TokenId> = (0..121).map(|i| (2 + (8 + i) * stride) % v).collect();
    let esp_ok = steady == 2.0 && steps.len() >= 50 && res.generated == expected;

    let model = build_successor_model(16, 1).unwrap();
    let periodic: Vec<TokenId> = (0..40).map(|i| i % 16).collect();
    let pld = decode_pld(&model, &periodic, &{
        let mut c = EngineConfig::new(10, 1).unwrap();
        c.max_new_tokens = 60;
        c
    })
    .unwrap();
    vec![
        line(
            "5 successor steady-state tau",
            esp_ok,
            format!("tau {steady} over {} steps (overall {:.4} incl. prefill)", steps.len(), res.tau()),
        ),
        line("5 prompt lookup on periodic corpus", pld.tau() > 1.5, format!("tau {:.4} > 1.5", pld.tau())),
    ]
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Vec<Line> {
    let mut out = Vec::new();
    for k in [1usize, 4, 8] {
        let r = lemma_monte_carlo(10_000, 16, 64, k, 6, Exec::Parallel).unwrap();
        out.push(line(
            format!("6 lemma Monte Carlo K={k}"),
            r.counterexamples == 0 && r.trials == 10_000,
            format!(
                "{} trials, hypothesis met {}, counterexamples {}",
                r.trials, r.hypothesis_satisfied, r.counterexamples
            ),
        ));
    }
    // Zero margin: K=1, or two identical head columns at K=2.
    let mut r = rng(66);
    let (d, v) = (16, 64);
    let h: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut w: Vec<f64> = (0..d * v).map(|_| r.random_range(-1.0..1.0)).collect();
    let k1 = lemma_threshold(&h, &w, v, 1, None).unwrap();
    let top = k1.i_star;
    let other = (top + 1) % v;
    for i in 0..d {
        w[i * v + other] = w[i * v + top];
    }
    let k2 = lemma_threshold(&h, &w, v, 2, None).unwrap();
    let same = lemma_check(&h, &h, &w, v, 1).unwrap();
    let edge = k1.margin == 0.0 && k1.delta_star == 1.0 && k2.margin == 0.0 && k2.delta_star == 1.0 && same.cos == 1.0 && same.in_topk;
    out.push(line(
        "6 zero-margin edge case",
        edge,
        format!("delta* {} (K=1), {} (tied K=2), identical cos {}", k1.delta_star, k2.delta_star, same.cos),
    ));
    out
}

// ---------------------------------------------------------------- 7

fn criterion_7(bench: &ToyBench) -> Vec<Line> {
    let mut r = rng(7);
    let mut equalities = 0;
    let mut count_changes = 0;
    let mut structure_changes = 0;
    let mut planted = 0;
    for i in 0..1000 {
        let k = r.random_range(1..=2);
        let v = r.random_range(16..=64);
        let logits = random_logits(&mut r, k, v);
        let root = r.random_range(0..v as u32);
        let mut tree = if i % 2 == 0 {
            let widths: Vec<usize> = (0..k).map(|_| r.random_range(1..=6)).collect();
            let mut cfg = BranchConfig::fixed(widths).unwrap();
            cfg.k = k;
            build_static_tree(root, &logits, &cfg).unwrap()
        } else {
            build_dynamic_tree(root, &logits, r.random_range(2..=12), k).unwrap()
        };
        // Plant repeats so the scan has something to find.
        for n in 0..tree.nodes.len() {
            if r.random_bool(0.3) {
                let t = tree.parent_token(n);
                let dup = tree.nodes.iter().any(|m| m.parent == tree.nodes[n].parent && m.token == t);
                if !dup {
                    tree.nodes[n].token = t;
                    planted += 1;
                }
            }
        }
        let pruned = prune(&tree, &logits).unwrap();
        equalities += (0..pruned.nodes.len()).filter(|&n| pruned.nodes[n].token == pruned.parent_token(n)).count();
        count_changes += usize::from(pruned.nodes.len() != tree.nodes.len());
        let shape = |t: &DraftTree| t.nodes.iter().map(|n| (n.parent, n.depth)).collect::<Vec<_>>();
        structure_changes += usize::from(shape(&pruned) != shape(&tree) || pruned.validate().is_err());
    }
    let with = bench.tau(MaskInit::PromptMean, true);
    let without = bench.tau(MaskInit::PromptMean, false);
    let directional = with >= without;
    vec![
        line(
            "7 pruner contract",
            equalities == 0 && count_changes == 0 && structure_changes == 0,
            format!(
                "1000 trees, {planted} planted repeats, {equalities} parent-child equalities, {count_changes} count changes"
            ),
        ),
        Line {
            name: "7 pruning tau direction (toy bench)".into(),
            pass: directional,
            gating: false,
            detail: format!(
                "with pruning {with:.6} vs without {without:.6}; {}",
                if directional { "holds" } else { "does not hold on this model, see decisions ledger" }
            ),
        },
    ]
}

// ---------------------------------------------------------------- 8

struct ToyBench {
    runs: Vec<(MaskInit, bool, f64)>,
}

impl ToyBench {
    fn run(model: &FrozenModel) -> ToyBench {
        let prompts = toy_corpus();
        let mut runs = Vec::new();
        for (init, pruning) in [
            (MaskInit::PromptMean, true),
            (MaskInit::PromptMean, false),
            (MaskInit::GaussianSample, true),
            (MaskInit::LastK, true),
        ] {
            let mut cfg = EngineConfig::new(30, 1).unwrap();
            cfg.mask_strategy = MaskStrategy::new(init);
            cfg.pruning = pruning;
            let report = run_bench(model, &prompts, &[Method::Esp(cfg)], Exec::Parallel, None).unwrap();
            runs.push((init, pruning, report.summary[0].mean_tau));
        }
        ToyBench { runs }
    }

    fn tau(&self, init: MaskInit, pruning: bool) -> f64 {
        self.runs.iter().find(|r| r.0 == init && r.1 == pruning).unwrap().2
    }
}

fn criterion_8(bench: &ToyBench) -> Vec<Line> {
    let tau = bench.tau(MaskInit::PromptMean, true);
    let (mean, sample, last) = (
        tau,
        bench.tau(MaskInit::GaussianSample, true),
        bench.tau(MaskInit::LastK, true),
    );
    let ordered = mean >= sample && sample >= last;
    vec![
        line("8 mean tau exceeds one", tau > 1.0, format!("mean tau {tau:?}")),
        line(
            "8 pinned regression value",
            tau == PINNED_TAU_BC30_K1,
            format!("{tau:?} == {PINNED_TAU_BC30_K1:?}"),
        ),
        Line {
            name: "8 mask-init ordering (reported)".into(),
            pass: ordered,
            gating: false,
            detail: format!("mean {mean:.6}, sample {sample:.6}, last-k {last:.6}"),
        },
    ]
}

// ---------------------------------------------------------------- 9

fn esp(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_esp")).args(args).output().expect("spawn esp");
    assert!(
        out.status.success(),
        "esp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_nanos");
            m.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn normalized(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            strip_timing(&mut v);
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn cli_pass(dir: &Path, model: &str, prompts: &str) -> (Vec<(String, String)>, Vec<u8>) {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let model_path = p(model);
    esp(&["gen-model", "--preset", "toy", "--seed", "0", "--out", &model_path]);
    let mut stdout = String::new();
    stdout += &esp(&["decode", "--model", &model_path, "--prompts", prompts, "--max-tokens", "16", "--out", &p("decode.jsonl")]);
    stdout += &esp(&[
        "decode", "--model", &model_path, "--prompts", prompts, "--bc", "60", "--masks", "2", "--temp", "1", "--seed", "5",
        "--init", "sample", "--max-tokens", "16", "--out", &p("decode.jsonl"),
    ]);
    stdout += &esp(&["baseline", "--model", &model_path, "--prompts", prompts, "--method", "ar", "--max-tokens", "16", "--out", &p("ar.jsonl")]);
    stdout += &esp(&["baseline", "--model", &model_path, "--prompts", prompts, "--method", "pld", "--temp", "1", "--max-tokens", "16", "--out", &p("pld.jsonl")]);
    stdout += &esp(&["bench", "--model", &model_path, "--prompts", prompts, "--max-tokens", "8", "--out", &p("bench")]);
    stdout += &esp(&["diagnose", "--model", &model_path, "--prompts", prompts, "--horizon", "6", "--out", &p("trace.jsonl")]);
    stdout += &esp(&["lemma", "--trials", "600", "--out", &p("lemma.jsonl"), "--samples", &p("samples.jsonl")]);
    let files = ["decode.jsonl", "ar.jsonl", "pld.jsonl", "bench/runs.jsonl", "bench/summary.jsonl", "trace.jsonl", "lemma.jsonl", "samples.jsonl"]
        .iter()
        .map(|f| (f.to_string(), normalized(&dir.join(f))))
        .chain(std::iter::once(("stdout".to_string(), stdout)))
        .collect();
    (files, std::fs::read(model_path).unwrap())
}

fn criterion_9() -> Vec<Line> {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts.jsonl");
    std::fs::write(
        &prompts,
        "{\"id\":\"a\",\"text\":\"the cat sat on the mat\"}\n{\"id\":\"b\",\"text\":\"abcabcabcabc\"}\n{\"id\":\"c\",\"text\":\"hello world\"}\n",
    )
    .unwrap();
    let prompts = prompts.to_string_lossy().into_owned();
    let mut passes = Vec::new();
    for run in ["first", "second"] {
        let sub = dir.path().join(run);
        std::fs::create_dir_all(&sub).unwrap();
        passes.push(cli_pass(&sub, "model.bin", &prompts));
    }
    let (a, b) = (&passes[0], &passes[1]);
    let mut diffs: Vec<String> = a.0.iter().zip(&b.0).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect();
    if a.1 != b.1 {
        diffs.push("model.bin".into());
    }
    vec![line(
        "9 determinism",
        diffs.is_empty(),
        format!("6 commands run twice, {} outputs compared, differing: {diffs:?}", a.0.len() + 1),
    )]
}

fn main() -> ExitCode {
    let toy = build_random_model(ModelConfig::toy(0)).unwrap();
    let bench = ToyBench::run(&toy);
    let sections: Vec<Vec<Line>> = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(&toy),
        criterion_5(),
        criterion_6(),
        criterion_7(&bench),
        criterion_8(&bench),
        criterion_9(),
    ];
    let mut gating_failures = 0;
    println!();
    for l in sections.iter().flatten() {
        let status = if l.pass { "PASS" } else { "FAIL" };
        let note = if l.gating { "" } else { " [reported]" };
        println!("criterion {:<40} {status}{note}  {}", l.name, l.detail);
        if l.gating && !l.pass {
            gating_failures += 1;
        }
    }
    println!();
    if gating_failures > 0 {
        println!("{gating_failures} gating check(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
