use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fold index per item. Items are grouped by stratum (in key order), shuffled
/// within each stratum, then dealt round-robin with one pointer that carries
/// over from stratum to stratum, so both every stratum and the fold totals
/// differ by at most one across folds.
pub fn stratified_kfold<K: Ord + Clone>(strata: &[K], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if strata.len() < k {
        return Err(Error::invalid(format!("{} items cannot fill {k} folds", strata.len())));
    }
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(s.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; strata.len()];
    let mut next = 0;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

/// Seeded stratified subsample keeping `round(fraction * count)` items of
/// every stratum (at least one). Returned indices are sorted.
pub fn stratified_subsample<K: Ord + Clone>(
    items: &[usize],
    strata: &[K],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("training fraction must be in (0, 1], got {fraction}")));
    }
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for &i in items {
        let s = strata
            .get(i)
            .ok_or_else(|| Error::invalid(format!("item {i} has no stratum")))?;
        groups.entry(s.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let keep = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(folds: &[usize], strata: &[u8], k: usize, s: u8) -> Vec<usize> {
        (0..k)
            .map(|f| folds.iter().zip(strata).filter(|(&g, &t)| g == f && t == s).count())
            .collect()
    }

    #[test]
    fn single_stratum_even_split() {
        let folds = stratified_kfold(&[0u8; 10], 5, 1).unwrap();
        assert_eq!(counts(&folds, &[0; 10], 5, 0), vec![2; 5]);
    }

    #[test]
    fn divisible_two_strata() {
        let strata: Vec<u8> = (0..20).map(|i| u8::from(i < 8)).collect();
        let folds = stratified_kfold(&strata, 4, 2).unwrap();
        assert_eq!(counts(&folds, &strata, 4, 1), vec![2; 4]);
        assert_eq!(counts(&folds, &strata, 4, 0), vec![3; 4]);
    }

    #[test]
    fn picai_shaped_counts() {
        // positives split by malignancy group: 331 intermediate, 84 high
        let mut strata = vec![(0u8, 0u8); 847];
        strata.extend(vec![(1, 0); 331]);
        strata.extend(vec![(1, 1); 84]);
        let folds = stratified_kfold(&strata, 5, 3).unwrap();
        for f in 0..5 {
            let pos = (0..strata.len()).filter(|&i| folds[i] == f && strata[i].0 == 1).count();
            let neg = (0..strata.len()).filter(|&i| folds[i] == f && strata[i].0 == 0).count();
            assert_eq!(pos, 83);
            assert!(neg == 169 || neg == 170);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let strata: Vec<u8> = (0..50).map(|i| (i % 3) as u8).collect();
        let a = stratified_kfold(&strata, 5, 11).unwrap();
        assert_eq!(a, stratified_kfold(&strata, 5, 11).unwrap());
        assert_ne!(a, stratified_kfold(&strata, 5, 12).unwrap());
        assert!(stratified_kfold(&strata, 1, 0).is_err());
    }

    #[test]
    fn subsample_keeps_each_stratum() {
        let strata: Vec<u8> = (0..80).map(|i| u8::from(i % 4 == 0)).collect();
        let items: Vec<usize> = (0..80).collect();
        let s = stratified_subsample(&items, &strata, 0.1, 5).unwrap();
        let pos = s.iter().filter(|&&i| strata[i] == 1).count();
        assert_eq!((s.len(), pos), (8, 2));
        assert_eq!(stratified_subsample(&items, &strata, 1.0, 5).unwrap(), items);
        assert!(stratified_subsample(&items, &strata, 0.0, 5).is_err());
    }
}
