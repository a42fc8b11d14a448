//! Class-stratified train/val/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GraphError, LABEL_FRAUD};

/// Node-id lists, each sorted ascending. Together they cover `0..n`
/// exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws a stratified split where the training set holds `p` percent of the
/// nodes and, separately, `p` percent of each class (both rounded half away
/// from zero). The remainder goes 1:2 to validation and test, again per
/// class. Shuffling runs on a counter-seeded ChaCha stream, so equal seeds
/// give equal masks on every platform.
pub fn split_labels(labels: &[u8], p: f64, seed: u64) -> Result<SplitMasks, GraphError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(GraphError::BadParam { what: format!("training share p = {p} must be in (0, 100]") });
    }
    let n = labels.len();
    let mut fraud: Vec<usize> = (0..n).filter(|&i| labels[i] == LABEL_FRAUD).collect();
    let mut normal: Vec<usize> = (0..n).filter(|&i| labels[i] != LABEL_FRAUD).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fraud.shuffle(&mut rng);
    normal.shuffle(&mut rng);

    let frac = p / 100.0;
    let train_fraud = (frac * fraud.len() as f64).round() as usize;
    let train_total = (frac * n as f64).round() as usize;
    if train_fraud == 0 {
        return Err(GraphError::NoFraudInTrain { p });
    }
    // round() is monotone, so train_total >= train_fraud; the min guards the
    // normal pool against rounding overshoot.
    let train_normal = (train_total - train_fraud).min(normal.len());

    let take = |ids: &[usize], from: usize, count: usize| ids[from..from + count].to_vec();
    let third = |rem: usize| (rem as f64 / 3.0).round() as usize;

    let rem_f = fraud.len() - train_fraud;
    let rem_n = normal.len() - train_normal;
    let val_f = third(rem_f);
    let val_n = third(rem_n);

    let mut train = take(&fraud, 0, train_fraud);
    train.extend(take(&normal, 0, train_normal));
    let mut val = take(&fraud, train_fraud, val_f);
    val.extend(take(&normal, train_normal, val_n));
    let mut test = fraud[train_fraud + val_f..].to_vec();
    test.extend_from_slice(&normal[train_normal + val_n..]);

    for (ids, which) in [(&train, "training"), (&val, "validation"), (&test, "test")] {
        if ids.is_empty() {
            return Err(GraphError::EmptySplit { p, which });
        }
    }

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, frauds: usize) -> Vec<u8> {
        (0..n).map(|i| u8::from(i < frauds)).collect()
    }

    #[test]
    fn masks_partition_the_nodes() {
        let l = labels(100, 10);
        let m = split_labels(&l, 40.0, 7).unwrap();
        let mut all: Vec<usize> = m.train.iter().chain(&m.val).chain(&m.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn class_counts_follow_the_rounding_rules() {
        // 100 nodes, 10 frauds, p = 40: train gets 4 frauds and 36 normals,
        // the remaining 6 frauds split 2/4 and 54 normals split 18/36.
        let l = labels(100, 10);
        let m = split_labels(&l, 40.0, 3).unwrap();
        let count = |ids: &[usize], class: u8| ids.iter().filter(|&&i| l[i] == class).count();
        assert_eq!((count(&m.train, 1), count(&m.train, 0)), (4, 36));
        assert_eq!((count(&m.val, 1), count(&m.val, 0)), (2, 18));
        assert_eq!((count(&m.test, 1), count(&m.test, 0)), (4, 36));
    }

    #[test]
    fn same_seed_same_masks_different_seed_different_masks() {
        let l = labels(200, 30);
        let a = split_labels(&l, 25.0, 11).unwrap();
        let b = split_labels(&l, 25.0, 11).unwrap();
        assert_eq!(a, b);
        let c = split_labels(&l, 25.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn masks_are_sorted() {
        let l = labels(50, 8);
        let m = split_labels(&l, 30.0, 1).unwrap();
        for ids in [&m.train, &m.val, &m.test] {
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn vanishing_fraud_share_is_an_error() {
        // 1 fraud in 1000 nodes at p = 1%: round(0.01) = 0 training frauds.
        let l = labels(1000, 1);
        assert!(matches!(split_labels(&l, 1.0, 0), Err(GraphError::NoFraudInTrain { .. })));
    }

    #[test]
    fn out_of_range_p_is_rejected() {
        let l = labels(10, 2);
        assert!(split_labels(&l, 0.0, 0).is_err());
        assert!(split_labels(&l, 120.0, 0).is_err());
        assert!(split_labels(&l, f64::NAN, 0).is_err());
    }
}
