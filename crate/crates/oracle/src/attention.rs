//! Three independent routes to `softmax(q K^T / sqrt(d)) V` for a single query.

fn scaled_scores(q: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    keys.iter()
        .map(|k| {
            assert_eq!(k.len(), q.len(), "key length differs from query");
            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect()
}

fn weighted_sum(weights: &[f64], values: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Two-pass softmax attention with explicit max subtraction.
pub fn softmax_attention_ref(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    assert!(!keys.is_empty() && keys.len() == values.len());
    let d = values[0].len();
    let scores = scaled_scores(q, keys);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    weighted_sum(&weights, values, d)
}

/// Softmax attention without max subtraction. Only valid for bounded scores.
pub fn direct_attention_ref(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    assert!(!keys.is_empty() && keys.len() == values.len());
    let d = values[0].len();
    let exps: Vec<f64> = scaled_scores(q, keys).iter().map(|s| s.exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    weighted_sum(&weights, values, d)
}

/// Classic streaming softmax: every token rescales the running sum by
/// `exp(m_old - m_new)`, branch-free.
pub fn online_softmax_ref(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    assert!(!keys.is_empty() && keys.len() == values.len());
    let d = values[0].len();
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut m = f64::NEG_INFINITY;
    let mut l = 0.0;
    let mut acc = vec![0.0; d];
    for (k, v) in keys.iter().zip(values) {
        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
        let m_new = m.max(s);
        let correction = (m - m_new).exp();
        let p = (s - m_new).exp();
        l = l * correction + p;
        for (a, x) in acc.iter_mut().zip(v) {
            *a = *a * correction + p * x;
        }
        m = m_new;
    }
    acc.iter().map(|a| a / l).collect()
}

/// Blockwise two-level online softmax over blocks of `block` tokens.
pub fn flash_decode_ref(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], block: usize) -> Vec<f64> {
    assert!(block >= 1);
    assert!(!keys.is_empty() && keys.len() == values.len());
    let d = values[0].len();
    let mut m = f64::NEG_INFINITY;
    let mut l = 0.0;
    let mut acc = vec![0.0; d];
    for (kb, vb) in keys.chunks(block).zip(values.chunks(block)) {
        let scores = scaled_scores(q, kb);
        let block_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - block_max).exp()).collect();
        let block_sum: f64 = exps.iter().sum();
        let block_acc = weighted_sum(&exps, vb, d);
        let m_new = m.max(block_max);
        let old = (m - m_new).exp();
        let new = (block_max - m_new).exp();
        l = l * old + block_sum * new;
        for (a, b) in acc.iter_mut().zip(&block_acc) {
            *a = *a * old + b * new;
        }
        m = m_new;
    }
    acc.iter().map(|a| a / l).collect()
}
