//! Objective music metrics computed on piano rolls, plus a fixed feature
//! extractor used for diversity and retrieval.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::{index, SliceRandom};

use crate::codec::{PianoRoll, PITCHES, STEPS_PER_BAR};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

const BAR: usize = STEPS_PER_BAR as usize;
pub const FEATURE_DIM: usize = 32;

const MAJOR: [usize; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [usize; 7] = [0, 2, 3, 5, 7, 8, 10];

/// Onset counts per pitch class.
pub fn pitch_class_counts(roll: &PianoRoll) -> [f64; 12] {
    bar_pitch_class_counts(roll, 0..roll.steps())
}

fn bar_pitch_class_counts(roll: &PianoRoll, steps: std::ops::Range<usize>) -> [f64; 12] {
    let mut h = [0.0; 12];
    for s in steps {
        for p in 0..PITCHES {
            if roll.is_onset(s, p) {
                h[p % 12] += 1.0;
            }
        }
    }
    h
}

fn normalized(h: [f64; 12]) -> [f64; 12] {
    let total: f64 = h.iter().sum();
    if total == 0.0 {
        return h;
    }
    h.map(|v| v / total)
}

/// Pitch-class histogram entropy in bits; 0 for an empty roll.
pub fn pche(roll: &PianoRoll) -> f64 {
    let p = normalized(pitch_class_counts(roll));
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Steps of one bar that carry at least one onset.
pub fn grooving_pattern(roll: &PianoRoll, bar: usize) -> [u8; 16] {
    let mut g = [0u8; 16];
    for (s, slot) in g.iter_mut().enumerate() {
        let step = bar * BAR + s;
        *slot = u8::from((0..PITCHES).any(|p| roll.is_onset(step, p)));
    }
    g
}

/// `1 - hamming / 16`.
pub fn pattern_similarity(a: &[u8; 16], b: &[u8; 16]) -> f64 {
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    1.0 - diff as f64 / 16.0
}

/// Mean pairwise similarity over the given patterns; absent below two.
pub fn gps_patterns(patterns: &[[u8; 16]]) -> Option<f64> {
    let n = patterns.len();
    if n < 2 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += pattern_similarity(&patterns[i], &patterns[j]);
        }
    }
    Some(total / (n * (n - 1) / 2) as f64)
}

/// Grooving pattern similarity over the roll's non-empty bars.
pub fn gps(roll: &PianoRoll) -> Option<f64> {
    let patterns: Vec<[u8; 16]> = (0..roll.bars())
        .map(|b| grooving_pattern(roll, b))
        .filter(|g| g.iter().any(|&v| v != 0))
        .collect();
    gps_patterns(&patterns)
}

fn bar_feature(roll: &PianoRoll, bar: usize) -> Vec<f64> {
    let mut f: Vec<f64> = grooving_pattern(roll, bar).iter().map(|&v| f64::from(v)).collect();
    f.extend(normalized(bar_pitch_class_counts(roll, bar * BAR..(bar + 1) * BAR)));
    f
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

/// Structureness: the best mean cosine similarity between bars `lag` apart,
/// over `lags`. Empty bars are skipped; absent when no pair qualifies.
pub fn si(roll: &PianoRoll, lags: RangeInclusive<usize>) -> Option<f64> {
    let feats: Vec<Vec<f64>> = (0..roll.bars()).map(|b| bar_feature(roll, b)).collect();
    let nonzero: Vec<bool> = feats.iter().map(|f| f.iter().any(|&v| v != 0.0)).collect();
    let mut best: Option<f64> = None;
    for lag in lags.filter(|&l| l >= 1) {
        let sims: Vec<f64> = (0..feats.len().saturating_sub(lag))
            .filter(|&b| nonzero[b] && nonzero[b + lag])
            .map(|b| cosine(&feats[b], &feats[b + lag]))
            .collect();
        if !sims.is_empty() {
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            best = Some(best.map_or(mean, |v: f64| v.max(mean)));
        }
    }
    best
}

/// [`si`] over lags of one to four bars.
pub fn si_default(roll: &PianoRoll) -> Option<f64> {
    si(roll, 1..=4)
}

/// Largest share of onsets inside one major or natural-minor scale; absent
/// for an empty roll.
pub fn sc(roll: &PianoRoll) -> Option<f64> {
    let h = pitch_class_counts(roll);
    let total: f64 = h.iter().sum();
    if total == 0.0 {
        return None;
    }
    let mut best = 0.0f64;
    for root in 0..12 {
        for scale in [MAJOR, MINOR] {
            let inside: f64 = scale.iter().map(|d| h[(root + d) % 12]).sum();
            best = best.max(inside / total);
        }
    }
    Some(best)
}

/// Fixed 32-dimensional description of a roll: pitch-class histogram (12),
/// mean grooving pattern (16) and onsets-per-bar mean, std, min and max,
/// each divided by 64 (4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MusicFeatureVector(pub [f64; FEATURE_DIM]);

impl MusicFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

pub fn extract_feature(roll: &PianoRoll) -> MusicFeatureVector {
    let mut v = [0.0; FEATURE_DIM];
    if roll.is_empty() {
        return MusicFeatureVector(v);
    }
    v[..12].copy_from_slice(&normalized(pitch_class_counts(roll)));
    let bars = roll.bars().max(1);
    let mut per_bar = Vec::with_capacity(bars);
    for b in 0..roll.bars() {
        for (slot, &g) in v[12..28].iter_mut().zip(&grooving_pattern(roll, b)) {
            *slot += f64::from(g) / bars as f64;
        }
        let onsets: f64 = bar_pitch_class_counts(roll, b * BAR..(b + 1) * BAR).iter().sum();
        per_bar.push(onsets);
    }
    if !per_bar.is_empty() {
        let n = per_bar.len() as f64;
        let mean = per_bar.iter().sum::<f64>() / n;
        let var = per_bar.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let min = per_bar.iter().copied().fold(f64::INFINITY, f64::min);
        let max = per_bar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v[28..].copy_from_slice(&[mean / 64.0, var.sqrt() / 64.0, min / 64.0, max / 64.0]);
    }
    MusicFeatureVector(v)
}

/// Mean Euclidean distance between index-aligned pairs.
pub fn diversity(a: &[MusicFeatureVector], b: &[MusicFeatureVector]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "diversity needs two equal non-empty sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.distance(y)).sum::<f64>() / a.len() as f64)
}

/// Shuffles `vectors` with `seed`, splits them into two halves of
/// `floor(n / 2)` and returns their [`diversity`]; absent below two vectors.
pub fn split_diversity(vectors: &[MusicFeatureVector], seed: u64) -> Option<f64> {
    if vectors.len() < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.shuffle(&mut seeded(seed));
    let half = vectors.len() / 2;
    let a: Vec<_> = order[..half].iter().map(|&i| vectors[i]).collect();
    let b: Vec<_> = order[half..2 * half].iter().map(|&i| vectors[i]).collect();
    diversity(&a, &b).ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalConfig {
    /// Candidates per query, ground truth included.
    pub m: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            m: 64,
            ks: vec![5, 10, 20],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ks: Vec<usize>,
    /// Success rate per entry of `ks`, in `[0, 1]`.
    pub precision: Vec<f64>,
    /// 1-based ground-truth rank per query.
    pub ranks: Vec<usize>,
}

impl RetrievalResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.precision[i])
    }
}

/// Ranks each query's ground truth among itself and `m - 1` distractors
/// drawn from the pool, by distance to the query vector. Ties go to the
/// smaller id.
pub fn retrieval_precision(
    generated: &[(MusicFeatureVector, String)],
    pool: &BTreeMap<String, MusicFeatureVector>,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    if cfg.m < 2 || cfg.ks.iter().any(|&k| k == 0 || k >= cfg.m) {
        return Err(Error::Config(format!("need 1 <= K < M, got M={} K={:?}", cfg.m, cfg.ks)));
    }
    if pool.len() < cfg.m {
        return Err(Error::Config(format!("pool of {} is smaller than M={}", pool.len(), cfg.m)));
    }
    let ids: Vec<&String> = pool.keys().collect();
    let mut ranks = Vec::with_capacity(generated.len());
    for (i, (query, gt)) in generated.iter().enumerate() {
        let gt_vec = pool.get(gt).ok_or_else(|| Error::MissingGroundTruth(gt.clone()))?;
        let others: Vec<&String> = ids.iter().copied().filter(|id| *id != gt).collect();
        let mut rng = seeded(derive_seed(cfg.seed, &format!("{i}/{gt}")));
        let gt_dist = query.distance(gt_vec);
        let rank = 1 + index::sample(&mut rng, others.len(), cfg.m - 1)
            .into_iter()
            .map(|j| others[j])
            .filter(|id| {
                let d = query.distance(&pool[*id]);
                d < gt_dist || (d == gt_dist && id.as_str() < gt.as_str())
            })
            .count();
        ranks.push(rank);
    }
    let n = ranks.len().max(1) as f64;
    let precision = cfg
        .ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    Ok(RetrievalResult {
        ks: cfg.ks.clone(),
        precision,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{events_to_roll, NoteEvent};

    fn roll(notes: &[(u8, u32)]) -> PianoRoll {
        let ev: Vec<NoteEvent> = notes.iter().map(|&(p, s)| NoteEvent::new(p, s, 1, 80)).collect();
        events_to_roll(&ev, 0)
    }

    #[test]
    fn pche_examples() {
        assert_eq!(pche(&roll(&[(60, 0), (72, 4), (48, 9)])), 0.0);
        let uniform: Vec<(u8, u32)> = (0..12).map(|i| (60 + i as u8, i * 2)).collect();
        assert!((pche(&roll(&uniform)) - 12f64.log2()).abs() < 1e-12);
        assert_eq!(pche(&PianoRoll::zeros()), 0.0);
    }

    #[test]
    fn gps_examples() {
        let same: Vec<(u8, u32)> = (0..8).flat_map(|b| [(60, b * 16), (64, b * 16 + 4)]).collect();
        assert_eq!(gps(&roll(&same)), Some(1.0));
        assert_eq!(gps_patterns(&[[1; 16], [0; 16]]), Some(0.0));
        assert_eq!(gps(&roll(&[(60, 0), (60, 16), (60, 20)])), Some(0.9375));
        assert_eq!(gps(&roll(&[(60, 0)])), None);
    }

    #[test]
    fn si_examples() {
        let period2: Vec<(u8, u32)> = (0..8)
            .map(|b| if b % 2 == 0 { (60, b * 16) } else { (67, b * 16 + 8) })
            .collect();
        assert_eq!(si_default(&roll(&period2)), Some(1.0));
        // Bars 0 and 1 share nothing: different steps, different classes.
        assert_eq!(si_default(&roll(&[(60, 0), (61, 17)])), Some(0.0));
        assert_eq!(si_default(&PianoRoll::zeros()), None);
    }

    #[test]
    fn sc_examples() {
        let c_major: Vec<(u8, u32)> = MAJOR.iter().enumerate().map(|(i, d)| (60 + *d as u8, i as u32)).collect();
        assert_eq!(sc(&roll(&c_major)), Some(1.0));
        let uniform: Vec<(u8, u32)> = (0..12).map(|i| (60 + i as u8, i * 2)).collect();
        assert!((sc(&roll(&uniform)).unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(sc(&roll(&[(61, 3)])), Some(1.0));
        assert_eq!(sc(&PianoRoll::zeros()), None);
    }

    #[test]
    fn feature_examples() {
        assert_eq!(extract_feature(&PianoRoll::zeros()).0, [0.0; 32]);
        let base = roll(&[(60, 0), (64, 4), (67, 20), (71, 40)]);
        let up = roll(&[(61, 0), (65, 4), (68, 20), (72, 40)]);
        let (a, b) = (extract_feature(&base), extract_feature(&up));
        for c in 0..12 {
            assert_eq!(a.0[c], b.0[(c + 1) % 12]);
        }
        assert_eq!(a.0[12..], b.0[12..]);
        assert!((a.0[..12].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let v = |x: f64, y: f64| {
            let mut a = [0.0; 32];
            a[0] = x;
            a[1] = y;
            MusicFeatureVector(a)
        };
        assert_eq!(diversity(&[v(0.0, 0.0)], &[v(3.0, 4.0)]).unwrap(), 5.0);
        assert_eq!(diversity(&[v(0.0, 0.0), v(1.0, 0.0)], &[v(1.0, 0.0), v(1.0, 3.0)]).unwrap(), 2.0);
        assert_eq!(diversity(&[v(1.0, 2.0)], &[v(1.0, 2.0)]).unwrap(), 0.0);
        assert!(diversity(&[v(1.0, 2.0)], &[]).is_err());
        assert_eq!(split_diversity(&[v(1.0, 1.0)], 0), None);
    }

    #[test]
    fn retrieval_rejects_bad_inputs() {
        let pool: BTreeMap<String, MusicFeatureVector> =
            (0..4).map(|i| (format!("{i}"), MusicFeatureVector([i as f64; 32]))).collect();
        let cfg = RetrievalConfig { m: 4, ks: vec![1, 2], seed: 0 };
        let q = vec![(MusicFeatureVector([0.0; 32]), "9".to_string())];
        assert!(matches!(retrieval_precision(&q, &pool, &cfg), Err(Error::MissingGroundTruth(_))));
        let big = RetrievalConfig { m: 5, ..cfg.clone() };
        assert!(retrieval_precision(&q, &pool, &big).is_err());
        let bad_k = RetrievalConfig { ks: vec![4], ..cfg };
        assert!(retrieval_precision(&q, &pool, &bad_k).is_err());
    }

    #[test]
    fn retrieval_ties_prefer_smaller_id() {
        let pool: BTreeMap<String, MusicFeatureVector> =
            ["a", "b", "c"].iter().map(|id| (id.to_string(), MusicFeatureVector([1.0; 32]))).collect();
        let cfg = RetrievalConfig { m: 3, ks: vec![1, 2], seed: 0 };
        let q = MusicFeatureVector([1.0; 32]);
        let r = retrieval_precision(&[(q, "a".into()), (q, "c".into())], &pool, &cfg).unwrap();
        assert_eq!(r.ranks, vec![1, 3]);
        assert_eq!(r.precision, vec![0.5, 0.5]);
    }
}
