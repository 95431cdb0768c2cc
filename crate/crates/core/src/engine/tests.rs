use super::*;
use crate::lm::{build_random_model, build_successor_model, ModelConfig};
use crate::probe::MaskInit;

fn small_model(seed: u64) -> FrozenModel {
    build_random_model(ModelConfig {
        vocab_size: 48,
        model_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        rope_base: 10_000.0,
        seed,
    })
    .unwrap()
}

fn prompt(seed: u64, len: usize, v: u32) -> Vec<TokenId> {
    (0..len as u64).map(|i| ((seed * 31 + i * 17 + i * i) % v as u64) as TokenId).collect()
}

fn config(bc: usize, k: usize, max_new: usize) -> EngineConfig {
    let mut c = EngineConfig::new(bc, k).unwrap();
    c.max_new_tokens = max_new;
    c
}

fn chain(start: u32, len: usize, stride: u32, v: u32) -> Vec<TokenId> {
    (0..len as u32).map(|i| (start + i * stride) % v).collect()
}

#[test]
fn prefill_structure() {
    let m = small_model(1);
    let p = prompt(1, 9, 48);
    let cfg = config(10, 1, 8);
    let s = prefill(&m, &p, &cfg).unwrap();
    assert_eq!(s.tokens.len(), 10);
    assert_eq!(s.cache.len(), 9);
    assert_eq!(s.model_calls, 1);
    assert_eq!(s.tree.as_ref().unwrap().len(), 4);

    let req = ForwardRequest::new(m.embed_all(&p).unwrap(), (0..9).collect(), AttentionMask::causal(0, 9));
    let full = m.forward(&req, &mut m.new_cache()).unwrap();
    assert_eq!(s.root(), argmax(full.logits_at(8)));
}

#[test]
fn successor_prefill_oracle() {
    let m = build_successor_model(32, 1).unwrap();
    let p = chain(5, 6, 1, 32);
    let s = prefill(&m, &p, &config(10, 1, 8)).unwrap();
    assert_eq!(s.root(), 11);
    assert_eq!(s.tree.as_ref().unwrap().nodes[0].token, 12);
}

#[test]
fn successor_steady_state_tau_two() {
    let m = build_successor_model(32, 3).unwrap();
    let p = chain(2, 8, 3, 32);
    let mut cfg = config(10, 1, 101);
    cfg.capture_diagnostics = true;
    let out = decode(&m, &p, &cfg).unwrap();
    assert_eq!(out.generated, chain(2 + 8 * 3, 101, 3, 32));
    assert_eq!(out.model_calls, 51);
    assert!(out.steps[1..].iter().all(|s| s.accepted_count == 1 && s.emitted == 2));
}

#[test]
fn single_token_budget_is_one_call() {
    let m = small_model(2);
    let out = decode(&m, &prompt(2, 5, 48), &config(30, 1, 1)).unwrap();
    assert_eq!(out.generated.len(), 1);
    assert_eq!(out.model_calls, 1);
    assert_eq!(out.tau(), 1.0);
}

#[test]
fn lossless_against_autoregressive() {
    for seed in 0..6u64 {
        let m = small_model(seed);
        let p = prompt(seed, 6 + seed as usize, 48);
        for temp in [0.0f32, 1.0] {
            for (bc, k, branch) in [
                (10, 1, "static:[4]"),
                (30, 1, "dynamic"),
                (30, 2, "static:[7,2]"),
                (60, 2, "dynamic"),
            ] {
                for pruning in [true, false] {
                    let mut cfg = config(bc, k, 20);
                    cfg = cfg.with_branch(BranchConfig::parse(branch, bc, k).unwrap());
                    cfg.temperature = temp;
                    cfg.seed = seed + 100;
                    cfg.pruning = pruning;
                    let esp = decode(&m, &p, &cfg).unwrap();
                    let ar = decode_autoregressive(&m, &p, temp, seed + 100, 20).unwrap();
                    assert_eq!(esp.generated, ar, "seed {seed} T {temp} {branch} prune {pruning}");
                    let emitted: u64 = esp.accepted_histogram.iter().map(|(a, n)| (*a as u64 + 1) * n).sum();
                    assert_eq!(emitted, esp.generated.len() as u64);
                    assert_eq!(esp.accepted_histogram.values().sum::<u64>(), esp.model_calls);
                    assert!(esp.tau() >= 1.0);
                }
            }
        }
    }
}

#[test]
fn cache_tracks_committed_history() {
    let m = small_model(3);
    let cfg = config(60, 2, 30);
    let mut s = prefill(&m, &prompt(3, 7, 48), &cfg).unwrap();
    while !s.finished {
        step(&m, &mut s, &cfg).unwrap();
        let n = s.tokens.len() - 1;
        assert_eq!(s.cache.slot_to_position(), (0..n as u32).collect::<Vec<_>>());
    }
}

#[test]
fn efficient_and_naive_layouts_agree() {
    let m = small_model(4);
    let p = prompt(4, 8, 48);
    let mut a = config(60, 2, 25);
    let mut b = a.clone();
    a.efficient_layout = true;
    b.efficient_layout = false;
    assert_eq!(decode(&m, &p, &a).unwrap().generated, decode(&m, &p, &b).unwrap().generated);
}

#[test]
fn efficient_layout_rejected_for_dynamic() {
    let mut c = config(30, 1, 4).with_branch(BranchConfig::dynamic(30, 1).unwrap());
    assert!(!c.efficient_layout);
    c.efficient_layout = true;
    assert!(c.validate().is_err());
}

#[test]
fn mask_strategies_are_lossless() {
    let m = small_model(5);
    let p = prompt(5, 12, 48);
    let ar = decode_autoregressive(&m, &p, 0.0, 0, 16).unwrap();
    for kind in [MaskInit::PromptMean, MaskInit::LastK, MaskInit::GaussianSample] {
        let mut cfg = config(30, 2, 16);
        cfg.mask_strategy = MaskStrategy {
            sample_scale: 5.0,
            ..MaskStrategy::new(kind)
        };
        assert_eq!(decode(&m, &p, &cfg).unwrap().generated, ar, "{kind:?}");
    }
}

#[test]
fn stop_token_ends_decode() {
    let m = build_successor_model(16, 1).unwrap();
    let mut cfg = config(10, 1, 50);
    cfg.stop_token = Some(9);
    let out = decode(&m, &chain(0, 4, 1, 16), &cfg).unwrap();
    assert_eq!(out.generated, vec![4, 5, 6, 7, 8, 9]);
    let ar_cfg = cfg.clone();
    assert_eq!(run_autoregressive(&m, &chain(0, 4, 1, 16), &ar_cfg).unwrap().generated, out.generated);
}

#[test]
fn autoregressive_is_deterministic() {
    let m = small_model(6);
    let p = prompt(6, 5, 48);
    let a = decode_autoregressive(&m, &p, 1.0, 9, 12).unwrap();
    assert_eq!(a, decode_autoregressive(&m, &p, 1.0, 9, 12).unwrap());
    let m = build_successor_model(16, 2).unwrap();
    assert_eq!(decode_autoregressive(&m, &chain(1, 3, 2, 16), 0.0, 0, 4).unwrap(), chain(7, 4, 2, 16));
}

#[test]
fn pld_matches_autoregressive() {
    for seed in 0..4u64 {
        let m = small_model(seed);
        let p: Vec<TokenId> = prompt(seed, 6, 48).repeat(3);
        for temp in [0.0f32, 1.0] {
            let mut cfg = config(10, 1, 24);
            cfg.temperature = temp;
            let pld = decode_pld(&m, &p, &cfg).unwrap();
            assert_eq!(pld.generated, decode_autoregressive(&m, &p, temp, 0, 24).unwrap());
        }
    }
}

#[test]
fn pld_periodic_and_aperiodic() {
    let m = build_successor_model(16, 1).unwrap();
    let out = decode_pld(&m, &chain(0, 40, 1, 16), &config(10, 1, 60)).unwrap();
    assert!(out.tau() > 1.5, "{}", out.tau());
    let m = build_successor_model(256, 1).unwrap();
    let out = decode_pld(&m, &chain(0, 10, 1, 256), &config(10, 1, 30)).unwrap();
    assert_eq!(out.tau(), 1.0);
}

#[test]
fn context_bound_enforced() {
    let m = small_model(7);
    let mut cfg = config(10, 1, 10);
    cfg.max_context = 12;
    assert!(matches!(
        decode(&m, &prompt(7, 8, 48), &cfg),
        Err(EspError::ContextOverflow { .. })
    ));
    assert!(matches!(prefill(&m, &[], &cfg), Err(EspError::EmptyPrompt)));
}
