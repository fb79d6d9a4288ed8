//! Closed-form trainable-parameter counts for the block-wise adaptation
//! network baseline (ELE) and the ConvMixer with and without the adaptive
//! token-permutation matrix.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Classifier size assumed for ELE when none is given (a ShakeDrop network;
/// approximate, known only to two decimals in millions).
pub const DEFAULT_CLASSIFIER_PARAMS: u64 = 28_490_000;

/// ELE hidden size at the reference image size.
pub const ELE_BASE_HIDDEN: u64 = 256;

/// Image side at which `ele_different` uses its base hidden size.
pub const ELE_BASE_IMAGE: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// ELE with the same hidden size at every image size.
    EleSame,
    /// ELE with the hidden size grown linearly with the image side.
    EleDifferent,
    /// ConvMixer plus the `n x n` adaptive matrix.
    Proposed,
    /// ConvMixer alone.
    ConvmixerPlain,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::EleSame, Policy::EleDifferent, Policy::Proposed, Policy::ConvmixerPlain];

    pub fn name(self) -> &'static str {
        match self {
            Policy::EleSame => "ele_same",
            Policy::EleDifferent => "ele_different",
            Policy::Proposed => "proposed",
            Policy::ConvmixerPlain => "convmixer_plain",
        }
    }

    pub fn is_ele(self) -> bool {
        matches!(self, Policy::EleSame | Policy::EleDifferent)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetQuery {
    pub image_size: u64,
    pub block_size: u64,
    pub hidden: u64,
    pub depth: u64,
    pub kernel: u64,
    pub n_classes: u64,
    /// ELE classifier size; `None` means [`DEFAULT_CLASSIFIER_PARAMS`].
    pub n_classifier: Option<u64>,
    pub policy: Policy,
}

impl BudgetQuery {
    /// Full-scale CIFAR-10 configuration: h=512, d=16, k=9, M=16, 10 classes,
    /// 224x224 input.
    pub fn reference_convmixer(policy: Policy) -> Self {
        Self {
            image_size: 224,
            block_size: 16,
            hidden: 512,
            depth: 16,
            kernel: 9,
            n_classes: 10,
            n_classifier: None,
            policy,
        }
    }

    /// Number of blocks (tokens), `(image_size / M)^2`.
    pub fn n_blocks(&self) -> Result<u64> {
        if self.block_size == 0 || self.image_size == 0 {
            return Err(invalid("image size and block size must be positive"));
        }
        if self.image_size % self.block_size != 0 {
            return Err(invalid(format!(
                "image size {} is not divisible by block size {}",
                self.image_size, self.block_size
            )));
        }
        let side = self.image_size / self.block_size;
        mul(side, side)
    }

    pub fn classifier(&self) -> u64 {
        self.n_classifier.unwrap_or(DEFAULT_CLASSIFIER_PARAMS)
    }

    /// Hidden size ELE actually uses under this query's policy.
    pub fn ele_hidden(&self) -> Result<u64> {
        match self.policy {
            Policy::EleDifferent => Ok(mul(self.hidden, self.image_size)?.div_ceil(ELE_BASE_IMAGE)),
            _ => Ok(self.hidden),
        }
    }

    fn check_counts(&self) -> Result<()> {
        if [self.hidden, self.depth, self.kernel, self.n_classes].contains(&0) {
            return Err(invalid("hidden size, depth, kernel size and class count must be >= 1"));
        }
        Ok(())
    }
}

fn overflow() -> Error {
    invalid("parameter count overflows 64 bits")
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b).ok_or_else(overflow)
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or_else(overflow)
}

/// Block-wise sub-networks plus the `n x n` matrix: `n (3 h M^2 + 2 h) + n^2`.
pub fn ele_adaptation_cost(n_blocks: u64, hidden: u64, block_size: u64) -> Result<u64> {
    let per_block = add(mul(mul(3, hidden)?, mul(block_size, block_size)?)?, mul(2, hidden)?)?;
    add(mul(n_blocks, per_block)?, mul(n_blocks, n_blocks)?)
}

/// Adaptation network plus classifier.
pub fn n_ele(q: &BudgetQuery) -> Result<u64> {
    if !q.policy.is_ele() {
        return Err(invalid(format!("n_ele needs an ELE policy, got {}", q.policy)));
    }
    if q.hidden == 0 {
        return Err(invalid("hidden size must be >= 1"));
    }
    let n = q.n_blocks()?;
    add(ele_adaptation_cost(n, q.ele_hidden()?, q.block_size)?, q.classifier())
}

/// `h [d (k^2 + h + 6) + 3 M^2 + n_classes + 3] + n_classes`.
pub fn n_convmixer(q: &BudgetQuery) -> Result<u64> {
    q.check_counts()?;
    q.n_blocks()?;
    let per_layer = add(add(mul(q.kernel, q.kernel)?, q.hidden)?, 6)?;
    let inner = add(add(add(mul(q.depth, per_layer)?, mul(3, mul(q.block_size, q.block_size)?)?)?, q.n_classes)?, 3)?;
    add(mul(q.hidden, inner)?, q.n_classes)
}

/// ConvMixer plus `n^2` for the adaptive matrix.
pub fn n_proposed(q: &BudgetQuery) -> Result<u64> {
    let n = q.n_blocks()?;
    add(n_convmixer(q)?, mul(n, n)?)
}

/// Dispatches on the query's policy.
pub fn count(q: &BudgetQuery) -> Result<u64> {
    match q.policy {
        Policy::EleSame | Policy::EleDifferent => n_ele(q),
        Policy::Proposed => n_proposed(q),
        Policy::ConvmixerPlain => n_convmixer(q),
    }
}

/// Model settings shared by every row of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepConfig {
    pub block_size: u64,
    pub ele_hidden: u64,
    pub convmixer_hidden: u64,
    pub depth: u64,
    pub kernel: u64,
    pub n_classes: u64,
    pub n_classifier: Option<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            block_size: 4,
            ele_hidden: ELE_BASE_HIDDEN,
            convmixer_hidden: 512,
            depth: 16,
            kernel: 9,
            n_classes: 10,
            n_classifier: None,
        }
    }
}

impl SweepConfig {
    pub fn query(&self, image_size: u64, policy: Policy) -> BudgetQuery {
        BudgetQuery {
            image_size,
            block_size: self.block_size,
            hidden: if policy.is_ele() { self.ele_hidden } else { self.convmixer_hidden },
            depth: self.depth,
            kernel: self.kernel,
            n_classes: self.n_classes,
            n_classifier: self.n_classifier,
            policy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRow {
    pub image_size: u64,
    pub policy: Policy,
    pub params: u64,
}

/// One row per `(size, policy)`, sizes outermost, in the given orders.
pub fn sweep_image_sizes(sizes: &[u64], policies: &[Policy], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sizes.len() * policies.len());
    for &image_size in sizes {
        for &policy in policies {
            rows.push(SweepRow { image_size, policy, params: count(&cfg.query(image_size, policy))? });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "image_size,policy,params";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.image_size, r.policy, r.params));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(image_size: u64, block_size: u64, hidden: u64, policy: Policy) -> BudgetQuery {
        BudgetQuery { image_size, block_size, hidden, depth: 1, kernel: 1, n_classes: 1, n_classifier: Some(0), policy }
    }

    #[test]
    fn convmixer_table_config() {
        assert_eq!(n_convmixer(&BudgetQuery::reference_convmixer(Policy::ConvmixerPlain)).unwrap(), 5_306_890);
        assert_eq!(n_proposed(&BudgetQuery::reference_convmixer(Policy::Proposed)).unwrap(), 5_345_306);
        let tq = BudgetQuery::reference_convmixer(Policy::Proposed);
        assert_eq!(n_proposed(&tq).unwrap() - n_convmixer(&tq).unwrap(), 38_416);
    }

    #[test]
    fn minimal_config() {
        assert_eq!(n_convmixer(&q(1, 1, 1, Policy::ConvmixerPlain)).unwrap(), 16);
        assert_eq!(n_proposed(&q(1, 1, 1, Policy::Proposed)).unwrap(), 17);
        assert_eq!(n_ele(&q(1, 1, 1, Policy::EleSame)).unwrap(), 6);
    }

    #[test]
    fn ele_adaptation_cost_reconciles_table() {
        assert_eq!(n_ele(&q(32, 4, 256, Policy::EleSame)).unwrap(), 823_296);
        let total = DEFAULT_CLASSIFIER_PARAMS + 823_296;
        assert!((29_300_000..=29_320_000).contains(&total));
    }

    #[test]
    fn doubling_image_quadruples_blocks() {
        let small = q(32, 4, 16, Policy::EleSame);
        let big = q(64, 4, 16, Policy::EleSame);
        assert_eq!(big.n_blocks().unwrap(), 4 * small.n_blocks().unwrap());
        let sq = |x: u64| x * x;
        assert_eq!(sq(big.n_blocks().unwrap()), 16 * sq(small.n_blocks().unwrap()));
    }

    #[test]
    fn ele_different_scales_hidden() {
        let qq = q(224, 4, 256, Policy::EleDifferent);
        assert_eq!(qq.ele_hidden().unwrap(), 1792);
        assert_eq!(q(32, 4, 256, Policy::EleDifferent).ele_hidden().unwrap(), 256);
    }

    #[test]
    fn invalid_queries() {
        assert!(n_convmixer(&q(30, 4, 1, Policy::ConvmixerPlain)).is_err());
        assert!(n_ele(&q(32, 4, 1, Policy::Proposed)).is_err());
        assert!(n_convmixer(&q(32, 0, 1, Policy::ConvmixerPlain)).is_err());
        let mut huge = q(1 << 20, 1, u64::MAX / 2, Policy::Proposed);
        huge.depth = 100;
        assert!(n_proposed(&huge).is_err());
    }

    #[test]
    fn sweep_shape_and_csv() {
        let cfg = SweepConfig::default();
        let rows = sweep_image_sizes(&[32], &[Policy::EleSame, Policy::EleDifferent, Policy::Proposed], &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("image_size,policy,params\n32,ele_same,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn sweep_ordering_and_monotonicity() {
        let cfg = SweepConfig::default();
        let sizes = [32, 64, 128, 224];
        let get = |p| sweep_image_sizes(&sizes, &[p], &cfg).unwrap().iter().map(|r| r.params).collect::<Vec<_>>();
        let (prop, diff, same) = (get(Policy::Proposed), get(Policy::EleDifferent), get(Policy::EleSame));
        for i in 0..sizes.len() {
            assert!(prop[i] < diff[i]);
        }
        for i in 1..sizes.len() {
            assert!(prop[i] - prop[i - 1] < diff[i] - diff[i - 1]);
            assert!(same[i] >= same[i - 1] && prop[i] >= prop[i - 1]);
        }
    }

    #[test]
    fn proposed_minus_plain_is_n_squared() {
        for image_size in [4u64, 8, 12, 16, 32] {
            for block_size in [1u64, 2, 4] {
                let mut qq = q(image_size, block_size, 3, Policy::Proposed);
                qq.depth = 2;
                qq.kernel = 3;
                let n = qq.n_blocks().unwrap();
                assert_eq!(n_proposed(&qq).unwrap() - n_convmixer(&qq).unwrap(), n * n);
            }
        }
    }

    #[test]
    fn policy_parse() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("ele".parse::<Policy>().is_err());
    }
}
