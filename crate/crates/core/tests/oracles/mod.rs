//! Independent reference computations shared by the core integration tests
//! and the acceptance suite. Nothing here calls the code paths it checks.
#![allow(dead_code)]

use polarity_core::{LanguageModel, ReferenceLm, ReferenceLmBuilder, TokenId};
use rand::Rng;

/// A random table LM keyed on every prefix of length `prompt.len()..prompt.len()+depth`.
pub struct RandomTable {
    pub model: ReferenceLm,
    pub prompt: Vec<TokenId>,
    pub vocab: usize,
}

fn random_distribution<R: Rng>(rng: &mut R, vocab: usize, quantized: bool) -> Vec<f64> {
    if quantized {
        // weights over a power-of-two total give exact, frequently tied probabilities
        loop {
            let w: Vec<u32> = (0..vocab).map(|_| rng.gen_range(0..4)).collect();
            let total: u32 = w.iter().sum();
            if total.is_power_of_two() {
                return w.iter().map(|&x| x as f64 / total as f64).collect();
            }
        }
    }
    let w: Vec<f64> = (0..vocab)
        .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() + 1e-3 })
        .collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        let mut v = vec![0.0; vocab];
        v[0] = 1.0;
        return v;
    }
    let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
    // push the rounding residue onto the largest entry
    let residue = 1.0 - p.iter().sum::<f64>();
    let (imax, _) = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    p[imax] += residue;
    p
}

pub fn random_table<R: Rng>(rng: &mut R, vocab: usize, depth: usize) -> RandomTable {
    let quantized = rng.gen_bool(0.3);
    let names: Vec<String> = (0..vocab).map(|i| format!("<{i}>")).collect();
    let prompt = vec![TokenId(rng.gen_range(0..vocab as u32))];
    let mut builder = ReferenceLmBuilder::new(names)
        .default_dense(random_distribution(rng, vocab, quantized));
    let mut frontier = vec![prompt.clone()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for prefix in frontier {
            builder = builder.entry_dense(prefix.clone(), random_distribution(rng, vocab, quantized));
            for t in 0..vocab as u32 {
                let mut p = prefix.clone();
                p.push(TokenId(t));
                next.push(p);
            }
        }
        frontier = next;
    }
    RandomTable {
        model: builder.build().expect("valid random table"),
        prompt,
        vocab,
    }
}

/// Every `depth`-token sequence with its per-step log-probabilities,
/// scored by querying the model once per prefix.
pub fn enumerate_sequences<M: LanguageModel>(
    model: &M,
    prompt: &[TokenId],
    vocab: usize,
    depth: usize,
) -> Vec<(Vec<TokenId>, Vec<f64>, f64)> {
    let mut out = Vec::new();
    let total = vocab.pow(depth as u32);
    'seq: for code in 0..total {
        let mut tokens = Vec::with_capacity(depth);
        let mut c = code;
        for _ in 0..depth {
            tokens.push(TokenId((c % vocab) as u32));
            c /= vocab;
        }
        tokens.reverse();
        let mut steps = Vec::with_capacity(depth);
        let mut score = 0.0;
        for i in 0..depth {
            let mut prefix = prompt.to_vec();
            prefix.extend_from_slice(&tokens[..i]);
            let dist = model.next_token_logprobs(&prefix, vocab).unwrap();
            match dist.entries.iter().find(|(t, _)| *t == tokens[i]) {
                Some((_, lp)) => {
                    steps.push(*lp);
                    score += *lp;
                }
                // zero-probability path: not a continuation
                None => continue 'seq,
            }
        }
        out.push((tokens, steps, score));
    }
    out
}

/// Brute-force top-`width` by total log-probability, ties by token sequence.
pub fn exhaustive_top<M: LanguageModel>(
    model: &M,
    prompt: &[TokenId],
    vocab: usize,
    depth: usize,
    width: usize,
) -> Vec<(Vec<TokenId>, Vec<f64>, f64)> {
    let mut all = enumerate_sequences(model, prompt, vocab, depth);
    all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(width);
    all
}

/// Δlogprob straight from the definition, with plain summation.
pub fn direct_delta(neg_probs: &[f64], pos_probs: &[f64], smoothing: f64) -> f64 {
    let neg: f64 = neg_probs.iter().sum();
    let pos: f64 = pos_probs.iter().sum();
    (neg + smoothing).ln() - (pos + smoothing).ln()
}
