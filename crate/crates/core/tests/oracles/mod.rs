//! Brute-force reference implementations used by the metric tests and the
//! acceptance suite. Deliberately naive: no hashing, no shared code with
//! the library.
#![allow(dead_code)]

/// The n-grams of `tokens`, in order, as owned token lists.
fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences(haystack: &[Vec<String>], needle: &[String]) -> u64 {
    haystack.iter().filter(|g| g.as_slice() == needle).count() as u64
}

pub struct BleuOracle {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
}

/// Corpus BLEU from clipped counts. `smoothing` is "none", "exp" or
/// "floor" (floor value 0.1).
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], smoothing: &str) -> BleuOracle {
    let mut correct = [0u64; 4];
    let mut total = [0u64; 4];
    let mut c = 0u64;
    let mut r = 0u64;
    for k in 0..hyps.len() {
        c += hyps[k].len() as u64;
        r += refs[k].len() as u64;
        for n in 1..=4 {
            let hg = ngrams(&hyps[k], n);
            let rg = ngrams(&refs[k], n);
            total[n - 1] += hg.len() as u64;
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                correct[n - 1] += occurrences(&hg, g).min(occurrences(&rg, g));
            }
        }
    }
    let bp = if c >= r { 1.0 } else if c == 0 { 0.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut p = [0.0f64; 4];
    if correct.iter().sum::<u64>() == 0 {
        return BleuOracle { score: 0.0, precisions: p, brevity_penalty: bp };
    }
    let mut zeros_so_far = 0;
    for n in 0..4 {
        if total[n] == 0 {
            break;
        }
        if correct[n] > 0 {
            p[n] = correct[n] as f64 / total[n] as f64;
        } else if smoothing == "exp" {
            zeros_so_far += 1;
            p[n] = 1.0 / (2f64.powi(zeros_so_far) * total[n] as f64);
        } else if smoothing == "floor" {
            p[n] = 0.1 / total[n] as f64;
        }
    }
    let score = if p.iter().any(|&x| x == 0.0) {
        0.0
    } else {
        100.0 * bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp()
    };
    BleuOracle { score, precisions: p, brevity_penalty: bp }
}

/// (precision, recall, f1) by scanning every cell of the similarity matrix.
pub fn bert(hyp: &[Vec<f64>], reference: &[Vec<f64>]) -> (f64, f64, f64) {
    let dot = |a: &Vec<f64>, b: &Vec<f64>| {
        let mut s = 0.0;
        for d in 0..a.len() {
            s += a[d] * b[d];
        }
        s
    };
    let mut recall = 0.0;
    for rv in reference {
        let mut best = f64::NEG_INFINITY;
        for hv in hyp {
            let s = dot(rv, hv);
            if s > best {
                best = s;
            }
        }
        recall += best;
    }
    recall /= reference.len() as f64;
    let mut precision = 0.0;
    for hv in hyp {
        let mut best = f64::NEG_INFINITY;
        for rv in reference {
            let s = dot(rv, hv);
            if s > best {
                best = s;
            }
        }
        precision += best;
    }
    precision /= hyp.len() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

/// A splitmix-style generator local to the oracles.
pub struct Gen(pub u64);

impl Gen {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

const WORDS: [&str; 6] = ["the", "cat", "sat", "on", "mat", "a"];

/// Up to 5 sentence pairs of up to 10 whitespace-separated tokens drawn
/// from a 6-word vocabulary; some references copy their hypothesis.
pub fn random_corpus(g: &mut Gen) -> (Vec<String>, Vec<String>) {
    let k = 1 + g.below(5) as usize;
    let sentence = |g: &mut Gen| {
        let len = g.below(11) as usize;
        (0..len).map(|_| WORDS[g.below(WORDS.len() as u64) as usize]).collect::<Vec<_>>().join(" ")
    };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..k {
        let h = sentence(g);
        let r = if g.below(5) == 0 { h.clone() } else { sentence(g) };
        hyps.push(h);
        refs.push(r);
    }
    (hyps, refs)
}

pub fn split(s: &[String]) -> Vec<Vec<String>> {
    s.iter().map(|x| x.split_whitespace().map(str::to_owned).collect()).collect()
}

/// Between 1 and 6 unit vectors per side, dimension 2 to 8.
pub fn random_embeddings(g: &mut Gen) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dim = 2 + g.below(7) as usize;
    let side = |g: &mut Gen| {
        let n = 1 + g.below(6) as usize;
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| g.unit() * 2.0 - 1.0).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect::<Vec<_>>()
    };
    let hyp = side(g);
    let reference = side(g);
    (hyp, reference)
}
