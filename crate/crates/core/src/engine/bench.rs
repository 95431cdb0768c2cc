use std::path::Path;

use serde::Serialize;

use super::{decode, decode_pld, run_autoregressive, EngineConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::lm::FrozenModel;
use crate::records::{write_metrics, PromptRecord, RunRecord};
use crate::tree::BranchConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Autoregressive(EngineConfig),
    PromptLookup(EngineConfig),
    Esp(EngineConfig),
}

impl Method {
    pub fn config(&self) -> &EngineConfig {
        match self {
            Method::Autoregressive(c) | Method::PromptLookup(c) | Method::Esp(c) => c,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Autoregressive(_) => "ar".into(),
            Method::PromptLookup(_) => "pld".into(),
            Method::Esp(c) => format!("esp-bc{}-k{}", c.block_complexity, c.k),
        }
    }

    fn run(&self, model: &FrozenModel, prompt: &PromptRecord) -> Result<RunRecord> {
        let cfg = self.config();
        let out = match self {
            Method::Autoregressive(_) => run_autoregressive(model, &prompt.tokens, cfg)?,
            Method::PromptLookup(_) => decode_pld(model, &prompt.tokens, cfg)?,
            Method::Esp(_) => decode(model, &prompt.tokens, cfg)?,
        };
        let config = match self {
            Method::Esp(c) => serde_json::to_value(c)?,
            _ => serde_json::json!({
                "temperature": cfg.temperature,
                "seed": cfg.seed,
                "max_new_tokens": cfg.max_new_tokens,
            }),
        };
        Ok(out.to_record(&prompt.id, &self.label(), config))
    }
}

/// AR, PLD, and the tree decoder at block complexities 10, 30 (one mask)
/// and 60 (two masks), all sharing `base`'s sampling settings.
pub fn default_suite(base: &EngineConfig) -> Result<Vec<Method>> {
    let mut methods = vec![
        Method::Autoregressive(base.clone()),
        Method::PromptLookup(base.clone()),
    ];
    for (bc, k) in [(10, 1), (30, 1), (60, 2)] {
        let mut c = base.clone();
        c.block_complexity = bc;
        c.k = k;
        c.branch = BranchConfig::default_for(bc, k)?;
        c.efficient_layout = c.branch.is_static();
        c.validate()?;
        methods.push(Method::Esp(c));
    }
    Ok(methods)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_tau: f64,
    pub mean_model_calls: f64,
    /// `1 - calls / calls_ar`, when an AR run is present.
    pub call_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Ordered by prompt, then by method as given.
    pub records: Vec<RunRecord>,
    pub summary: Vec<MethodSummary>,
}

pub fn summarize(records: &[RunRecord], methods: &[String]) -> Vec<MethodSummary> {
    let calls = |m: &str| -> (usize, f64, f64) {
        let rs: Vec<&RunRecord> = records.iter().filter(|r| r.method == m).collect();
        let n = rs.len().max(1) as f64;
        let tau = rs.iter().map(|r| r.tau).sum::<f64>() / n;
        let c = rs.iter().map(|r| r.model_calls as f64).sum::<f64>() / n;
        (rs.len(), tau, c)
    };
    let ar_calls = records
        .iter()
        .any(|r| r.method == "ar")
        .then(|| calls("ar").2);
    methods
        .iter()
        .map(|m| {
            let (runs, mean_tau, mean_model_calls) = calls(m);
            MethodSummary {
                method: m.clone(),
                runs,
                mean_tau,
                mean_model_calls,
                call_reduction: ar_calls.map(|a| 1.0 - mean_model_calls / a),
            }
        })
        .collect()
}

/// Every prompt under every method, fanned out over prompts.
pub fn run_bench(
    model: &FrozenModel,
    prompts: &[PromptRecord],
    methods: &[Method],
    exec: Exec,
    out_path: Option<&Path>,
) -> Result<BenchReport> {
    let per_prompt = exec.map(prompts, |p| methods.iter().map(|m| m.run(model, p)).collect::<Result<Vec<_>>>());
    let mut records = Vec::with_capacity(prompts.len() * methods.len());
    for r in per_prompt {
        records.extend(r?);
    }
    if let Some(path) = out_path {
        write_metrics(&records, path)?;
    }
    let labels: Vec<String> = methods.iter().map(Method::label).collect();
    let summary = summarize(&records, &labels);
    Ok(BenchReport { records, summary })
}
