use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use esp_core::diagnostics::{cosine_trace, lemma_monte_carlo, lemma_samples, split_means, TraceMask};
use esp_core::engine::{decode_pld, default_suite, run_autoregressive, run_bench, DecodeOutput, EngineConfig};
use esp_core::probe::{MaskInit, MaskStrategy};
use esp_core::records::{append_jsonl, load_prompts, toy_corpus, write_jsonl, PromptRecord, RunRecord};
use esp_core::tree::BranchConfig;
use esp_core::weights::{load_model, save_model};
use esp_core::{build_random_model, build_successor_model, tokenizer, Exec, FrozenModel, ModelConfig, TokenId};

use crate::{
    BaselineArgs, BaselineMethod, BenchArgs, ConfigError, DecodeArgs, DiagnoseArgs, GenModelArgs, InitArg, LemmaArgs,
    Preset, PromptArgs, SamplingArgs,
};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

pub fn gen_model(a: GenModelArgs) -> Result<()> {
    let model = match (a.preset, &a.config) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: ModelConfig =
                serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            build_random_model(cfg)?
        }
        (Some(Preset::Toy) | None, None) => build_random_model(ModelConfig::toy(a.seed))?,
        (Some(Preset::Successor), None) => build_successor_model(a.vocab, a.stride)?,
    };
    save_model(&model, &a.out)?;
    let c = model.config();
    println!(
        "wrote {} (V={} d={} L={} H={} ffn={})",
        a.out.display(),
        c.vocab_size,
        c.model_dim,
        c.num_layers,
        c.num_heads,
        c.ffn_dim
    );
    Ok(())
}

fn read_prompts(p: &PromptArgs) -> Result<Vec<PromptRecord>> {
    if let Some(text) = &p.prompt {
        return Ok(vec![PromptRecord::new("cli", text.clone())]);
    }
    if let Some(tokens) = &p.tokens {
        return Ok(vec![PromptRecord {
            id: "cli".into(),
            text: String::new(),
            tokens: tokens.clone(),
        }]);
    }
    match &p.prompts {
        Some(path) => Ok(load_prompts(path)?),
        None => Err(config_error("one of --prompt, --prompts, or --tokens is required")),
    }
}

fn apply_sampling(c: &mut EngineConfig, s: &SamplingArgs) {
    c.temperature = s.temp;
    c.seed = s.seed;
    c.max_new_tokens = s.max_tokens;
    c.stop_token = s.stop_token;
}

fn engine_config(a: &DecodeArgs) -> Result<EngineConfig> {
    let branch = match &a.branch {
        Some(s) => BranchConfig::parse(s, a.bc, a.k)?,
        None => BranchConfig::default_for(a.bc, a.k)?,
    };
    let mut c = EngineConfig::new(a.bc, a.k)?;
    c.efficient_layout = !a.naive_layout;
    if c.efficient_layout && !branch.is_static() {
        eprintln!("warning: dynamic branch uses the naive layout");
        c.efficient_layout = false;
    }
    c.branch = branch;
    c.mask_strategy = MaskStrategy {
        kind: match a.init {
            InitArg::Mean => MaskInit::PromptMean,
            InitArg::Lastk => MaskInit::LastK,
            InitArg::Sample => MaskInit::GaussianSample,
        },
        sample_scale: a.sample_scale,
        seed: a.sampling.seed,
        pooled_sigma: a.pooled_sigma,
    };
    c.lambda = a.lambda;
    c.pruning = !a.no_prune;
    apply_sampling(&mut c, &a.sampling);
    c.validate()?;
    Ok(c)
}

fn render(tokens: &[TokenId], as_ids: bool) -> String {
    let ids = || tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    if as_ids {
        return ids();
    }
    tokenizer::decode(tokens).unwrap_or_else(|_| ids())
}

fn emit(records: &[RunRecord], out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        append_jsonl(records, path)?;
    }
    Ok(())
}

fn load(path: &Path) -> Result<FrozenModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn run_each(
    prompts: &[PromptRecord],
    as_ids: bool,
    method: &str,
    config: serde_json::Value,
    run: impl Fn(&PromptRecord) -> esp_core::Result<DecodeOutput>,
) -> Result<Vec<RunRecord>> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let mut records = Vec::new();
    for p in prompts {
        let out = run(p)?;
        writeln!(lock, "{}", render(&out.generated, as_ids))?;
        records.push(out.to_record(&p.id, method, config.clone()));
    }
    Ok(records)
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    // Configuration errors surface before any file is read.
    let cfg = engine_config(&a)?;
    let prompts = read_prompts(&a.prompt)?;
    let model = load(&a.model.model)?;
    let label = format!("esp-bc{}-k{}", cfg.block_complexity, cfg.k);
    let records = run_each(&prompts, a.prompt.tokens.is_some(), &label, serde_json::to_value(&cfg)?, |p| {
        esp_core::engine::decode(&model, &p.tokens, &cfg)
    })?;
    emit(&records, a.out.as_deref())
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    let mut cfg = EngineConfig::new(10, 1)?;
    apply_sampling(&mut cfg, &a.sampling);
    cfg.validate()?;
    let prompts = read_prompts(&a.prompt)?;
    let model = load(&a.model.model)?;
    let config = serde_json::json!({
        "temperature": cfg.temperature,
        "seed": cfg.seed,
        "max_new_tokens": cfg.max_new_tokens,
    });
    let records = match a.method {
        BaselineMethod::Ar => run_each(&prompts, a.prompt.tokens.is_some(), "ar", config, |p| run_autoregressive(&model, &p.tokens, &cfg))?,
        BaselineMethod::Pld => run_each(&prompts, a.prompt.tokens.is_some(), "pld", config, |p| decode_pld(&model, &p.tokens, &cfg))?,
    };
    emit(&records, a.out.as_deref())
}

fn corpus(path: Option<&Path>) -> Result<Vec<PromptRecord>> {
    Ok(match path {
        Some(p) => load_prompts(p)?,
        None => toy_corpus(),
    })
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut base = EngineConfig::new(30, 1)?;
    apply_sampling(&mut base, &a.sampling);
    base.validate()?;
    let methods = default_suite(&base)?;
    let prompts = corpus(a.prompts.as_deref())?;
    let model = load(&a.model.model)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let report = run_bench(&model, &prompts, &methods, exec, Some(&a.out.join("runs.jsonl")))?;
    write_jsonl(&report.summary, a.out.join("summary.jsonl"))?;
    println!("{:<14} {:>6} {:>10} {:>12} {:>10}", "method", "runs", "mean_tau", "mean_calls", "reduction");
    for s in &report.summary {
        println!(
            "{:<14} {:>6} {:>10.4} {:>12.2} {:>10}",
            s.method,
            s.runs,
            s.mean_tau,
            s.mean_model_calls,
            s.call_reduction.map_or("-".into(), |r| format!("{:.4}", r))
        );
    }
    Ok(())
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let prompts = corpus(a.prompts.as_deref())?;
    let model = load(&a.model.model)?;
    let mut records = Vec::new();
    for p in &prompts {
        records.extend(cosine_trace(&model, &p.id, &p.tokens, a.horizon, &TraceMask::PromptMean)?);
    }
    write_jsonl(&records, &a.out)?;
    let last = model.num_layers();
    let ((acc, na), (rej, nr)) = split_means(&records, last);
    println!("final-layer cosine: accepted {acc:.4} (n={na}), rejected {rej:.4} (n={nr})");
    Ok(())
}

pub fn lemma(a: LemmaArgs) -> Result<()> {
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let mut reports = Vec::new();
    for &k in &a.topk {
        let r = lemma_monte_carlo(a.trials, a.dim, a.vocab, k, a.seed, exec)?;
        println!(
            "K={k}: trials {} hypothesis {} in_topk {} counterexamples {}",
            r.trials, r.hypothesis_satisfied, r.in_topk, r.counterexamples
        );
        reports.push(serde_json::to_value(r)?);
    }
    write_jsonl(&reports, &a.out)?;
    if let Some(path) = &a.samples {
        let mut all = Vec::new();
        for &k in &a.topk {
            all.extend(lemma_samples(a.trials.min(1000), a.dim, a.vocab, k, a.seed)?);
        }
        write_jsonl(&all, path)?;
    }
    Ok(())
}
