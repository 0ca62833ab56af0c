use pbm_core::uncertainty::PredictionEnsemble;
use pbm_core::RandomStream;

/// A valid ensemble whose rows range from near-uniform to exactly one-hot.
pub fn fuzzed_ensemble(rng: &mut RandomStream) -> PredictionEnsemble {
    let c = 2 + rng.below(11);
    fuzzed_with_classes(rng, c)
}

pub fn fuzzed_with_classes(rng: &mut RandomStream, c: usize) -> PredictionEnsemble {
    let n = 1 + rng.below(12);
    let sharpness = [0.1, 1.0, 5.0, 50.0][rng.below(4)];
    let mut probs = Vec::with_capacity(n * c);
    for _ in 0..n {
        if rng.uniform() < 0.1 {
            let hot = rng.below(c);
            probs.extend((0..c).map(|j| (j == hot) as u8 as f64));
            continue;
        }
        let raw: Vec<f64> = (0..c)
            .map(|_| {
                if rng.uniform() < 0.1 {
                    0.0
                } else {
                    (sharpness * rng.normal()).exp()
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            probs.extend(std::iter::repeat_n(1.0 / c as f64, c));
        } else {
            probs.extend(raw.iter().map(|v| v / total));
        }
    }
    PredictionEnsemble::new(n, c, probs).unwrap()
}

/// `−Σ p ln p` with `0 ln 0 = 0`, written out independently.
pub fn plain_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

pub fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}
