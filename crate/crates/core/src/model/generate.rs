use super::{LanguageModel, TokenBatch};
use crate::data::TokenId;
use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`. Returns only the new tokens; a stop
/// token is included when it ends generation.
pub fn generate(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    max_new_tokens: usize,
    stops: &[TokenId],
) -> Result<Vec<TokenId>> {
    Ok(generate_batch(model, &[prompt.to_vec()], max_new_tokens, stops)?.remove(0))
}

/// Greedy decoding for many prompts. Prompts of equal length advance in
/// lockstep through one batched forward per step; rows never interact, so
/// results match decoding each prompt alone.
pub fn generate_batch(
    model: &dyn LanguageModel,
    prompts: &[Vec<TokenId>],
    max_new_tokens: usize,
    stops: &[TokenId],
) -> Result<Vec<Vec<TokenId>>> {
    let ctx = model.config().context_len;
    let vocab = model.config().vocab_size;
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::Input("cannot generate from an empty prompt".into()));
    }
    let mut outputs = vec![Vec::new(); prompts.len()];
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.sort_by_key(|&i| prompts[i].len());
    for group in order.chunk_by(|&a, &b| prompts[a].len() == prompts[b].len()) {
        let mut seqs: Vec<Vec<TokenId>> = group.iter().map(|&i| prompts[i].clone()).collect();
        let mut active: Vec<usize> = (0..group.len()).collect();
        for _ in 0..max_new_tokens {
            active.retain(|&j| seqs[j].len() < ctx);
            if active.is_empty() {
                break;
            }
            let refs: Vec<&[TokenId]> = active.iter().map(|&j| seqs[j].as_slice()).collect();
            let batch = TokenBatch::pack(&refs, 0)?;
            let logits = model.logits(&batch)?.to_f64_vec();
            let mut still = Vec::with_capacity(active.len());
            for (row, &j) in active.iter().enumerate() {
                let last = row * batch.seq + batch.seq - 1;
                let next = argmax_lowest(&logits[last * vocab..(last + 1) * vocab]);
                seqs[j].push(next);
                outputs[group[j]].push(next);
                if !stops.contains(&next) {
                    still.push(j);
                }
            }
            active = still;
        }
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TransformerModel};

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn batched_matches_single() {
        let m = TransformerModel::new(ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 9,
            context_len: 12,
            mlp_ratio: 2,
            seed: 3,
        })
        .unwrap();
        let prompts = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8], vec![2]];
        let all = generate_batch(&m, &prompts, 6, &[]).unwrap();
        for (p, out) in prompts.iter().zip(&all) {
            assert_eq!(&generate(&m, p, 6, &[]).unwrap(), out);
            assert_eq!(out.len(), 6);
        }
    }

    #[test]
    fn stops_at_context_limit() {
        let m = TransformerModel::new(ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 9,
            context_len: 5,
            mlp_ratio: 2,
            seed: 3,
        })
        .unwrap();
        assert_eq!(generate(&m, &[1, 2, 3], 10, &[]).unwrap().len(), 2);
    }
}
