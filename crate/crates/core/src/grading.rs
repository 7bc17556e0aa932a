//! Potential grading: P40 of the predicted CTR distribution, percentile
//! rank across items, and the stage each rank maps to.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ItemId;
use crate::scalar::Real;

/// Rank cutoffs: below 70 → stage 1, below 90 → stage 2, otherwise stage 3.
pub const STAGE2_RANK: u64 = 70;
pub const STAGE3_RANK: u64 = 90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialGrade {
    pub item_id: ItemId,
    pub ctr_distribution_p40: f64,
    pub rank_percent: f64,
    pub stage: u8,
}

/// 1-based nearest-rank index `ceil(0.4 n)`, computed in integers.
#[inline]
pub fn p40_rank(n: usize) -> usize {
    (2 * n).div_ceil(5)
}

/// 40th percentile by the nearest-rank rule.
pub fn percentile_p40<T: Real>(distribution: &[T]) -> Result<T> {
    if distribution.is_empty() {
        return Err(Error::config("percentile of an empty distribution"));
    }
    if distribution.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in CTR distribution".into()));
    }
    let mut v = distribution.to_vec();
    let k = p40_rank(v.len()) - 1;
    let (_, kth, _) = v.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(*kth)
}

/// Stage from a rank expressed as `count / n` (exact, no rounding).
#[inline]
pub fn stage_for_rank(count: usize, n: usize) -> u8 {
    let scaled = count as u64 * 100;
    let n = n as u64;
    if scaled < STAGE2_RANK * n {
        1
    } else if scaled < STAGE3_RANK * n {
        2
    } else {
        3
    }
}

/// `r_i = |{j : P40_j <= P40_i}| / |I| * 100` and the stage it implies.
pub fn rank_and_grade(p40_all: &BTreeMap<ItemId, f64>) -> Result<BTreeMap<ItemId, PotentialGrade>> {
    let n = p40_all.len();
    if n == 0 {
        return Err(Error::config("grading needs at least one item"));
    }
    if p40_all.values().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN P40".into()));
    }
    let mut sorted: Vec<f64> = p40_all.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let mut out = BTreeMap::new();
    for (&item_id, &p) in p40_all {
        // Number of values <= p.
        let count = sorted.partition_point(|x| *x <= p);
        out.insert(
            item_id,
            PotentialGrade {
                item_id,
                ctr_distribution_p40: p,
                rank_percent: count as f64 / n as f64 * 100.0,
                stage: stage_for_rank(count, n),
            },
        );
    }
    Ok(out)
}
