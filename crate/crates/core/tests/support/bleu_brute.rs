//! Independent BLEU-4 reference: nested scans, no hashing.

/// Occurrences of `gram` in `words`, by scanning every window.
fn occurrences(words: &[&str], gram: &[&str]) -> u64 {
    if gram.len() > words.len() {
        return 0;
    }
    (0..=words.len() - gram.len()).filter(|&i| &words[i..i + gram.len()] == gram).count() as u64
}

/// Reference BLEU-4: clipped matches summed over the corpus, 0.1 substituted
/// for any zero match count (with the total floored at 1), uniform weights.
pub fn brute_force_bleu(hyps: &[&str], refs: &[&str]) -> (f64, [f64; 4], f64) {
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = rf.split_whitespace().collect();
        c += hw.len();
        r += rw.len();
        for n in 1..=4 {
            if hw.len() < n {
                continue;
            }
            totals[n - 1] += (hw.len() - n + 1) as u64;
            // each distinct hypothesis n-gram once, at its first position
            for i in 0..=hw.len() - n {
                let gram = &hw[i..i + n];
                let first = (0..i).all(|j| &hw[j..j + n] != gram);
                if first {
                    matches[n - 1] += occurrences(&hw, gram).min(occurrences(&rw, gram));
                }
            }
        }
    }
    let mut p = [0.0; 4];
    for n in 0..4 {
        let m = if matches[n] == 0 { 0.1 } else { matches[n] as f64 };
        p[n] = m / totals[n].max(1) as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c.max(1) as f64).exp() } else { 1.0 };
    let score = 100.0 * bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
    (score, p, bp)
}
