//! Helpers shared by the integration suites.

use flmgrow_core::rng::Rng;

const WORDS: [&str; 64] = [
    "the", "a", "model", "grows", "wider", "deeper", "layer", "stream", "token", "loss",
    "gradient", "mask", "rises", "slowly", "training", "continues", "from", "where", "it",
    "stopped", "every", "weight", "carries", "over", "new", "structure", "starts", "silent",
    "then", "joins", "function", "stays", "fixed", "at", "growth", "time", "data", "flows",
    "through", "attention", "heads", "read", "context", "feed", "forward", "units", "mix",
    "features", "norms", "keep", "scale", "steady", "steps", "count", "tokens", "budget",
    "shrinks", "desk", "runs", "finish", "fast", "and", "repeat", "often",
];

/// Deterministic word-soup corpus of at least `target_bytes` bytes.
pub fn synth_corpus(target_bytes: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(target_bytes + 128);
    while out.len() < target_bytes {
        let sentence_len = 4 + (rng.next_u64() % 8) as usize;
        for w in 0..sentence_len {
            let word = WORDS[(rng.next_u64() % WORDS.len() as u64) as usize];
            if w == 0 {
                let mut chars = word.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push_str(word);
            }
            if w + 1 < sentence_len {
                out.push(' ');
            }
        }
        if rng.next_u64().is_multiple_of(5) {
            out.push_str(&format!(" {}", rng.next_u64() % 1000));
        }
        out.push('.');
        if rng.next_u64().is_multiple_of(7) {
            out.push('\n');
        } else {
            out.push(' ');
        }
    }
    out
}
