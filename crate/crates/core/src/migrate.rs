//! Lossless workload migration planning: how many output columns a straggler
//! offloads, virtual renumbering of helpers, and the per-helper column
//! intervals. The sending-collecting dataflow itself is executed by
//! [`crate::exec`].

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{CommPattern, Rank};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MigrateError {
    #[error("no helpers available: cannot migrate from rank {straggler} (e = {e})")]
    NoHelpers { straggler: Rank, e: usize },
    #[error("migration plan does not fit layer: {l_mig} columns requested of width {width}")]
    PlanWidth { l_mig: usize, width: usize },
    #[error("merged collection requested where no all-reduce follows ({ctx})")]
    MergeContext { ctx: &'static str },
}

/// How migrated results return to the straggler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CollectionMode {
    /// Helpers accumulate migrated blocks into their own tensors ahead of the
    /// already-required all-reduce; the standalone reduce is skipped.
    #[default]
    Merged,
    /// A dedicated reduce returns every migrated block to the straggler.
    Explicit,
}

/// Communication primitive family used by the migration dataflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveFamily {
    #[default]
    BroadcastReduce,
    /// Root-serial baseline, for cost comparisons only.
    ScatterGather,
}

impl PrimitiveFamily {
    pub fn send_pattern(&self) -> CommPattern {
        match self {
            PrimitiveFamily::BroadcastReduce => CommPattern::Broadcast,
            PrimitiveFamily::ScatterGather => CommPattern::Scatter,
        }
    }

    pub fn collect_pattern(&self) -> CommPattern {
        match self {
            PrimitiveFamily::BroadcastReduce => CommPattern::Reduce,
            PrimitiveFamily::ScatterGather => CommPattern::Gather,
        }
    }
}

/// Migrated volume, either a fraction of the layer's migratable width or an
/// absolute column count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MigAmount {
    Fraction(f64),
    Columns(usize),
}

impl MigAmount {
    /// Concrete column count for a layer of the given width.
    pub fn resolve(&self, width: usize) -> usize {
        match *self {
            MigAmount::Fraction(f) => ((width as f64 * f) + 0.5).floor() as usize,
            MigAmount::Columns(c) => c,
        }
        .min(width)
    }
}

/// Relabel ranks relative to the straggler: the straggler maps to 0 and
/// helpers to `1..e`, preserving cyclic order.
pub fn virtual_rank(r: Rank, straggler: Rank, e: usize) -> usize {
    (r + e - straggler) % e
}

/// Helper assignment for one straggler's migrated block of one layer.
///
/// Intervals are zero-based within the migrated block, contiguous in
/// virtual-rank order; the first `l_mig mod h` helpers get one extra column.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPlan {
    pub straggler: Rank,
    pub l_mig: usize,
    /// `(helper rank, interval)` in ascending virtual-rank order; empty
    /// intervals are omitted.
    pub assignments: Vec<(Rank, Range<usize>)>,
}

impl MigrationPlan {
    pub fn assignment_for(&self, rank: Rank) -> Option<Range<usize>> {
        self.assignments
            .iter()
            .find(|(r, _)| *r == rank)
            .map(|(_, iv)| iv.clone())
    }
}

/// Distribute `l_mig` columns of the straggler's shard across `helpers`.
///
/// Helpers are ordered by virtual rank; each receives
/// `floor(l_mig / h)` columns and the first `l_mig mod h` (by ascending
/// virtual rank) one extra, as contiguous intervals.
pub fn plan_migration(
    straggler: Rank,
    l_mig: usize,
    helpers: &[Rank],
    e: usize,
) -> Result<MigrationPlan, MigrateError> {
    if helpers.is_empty() || e < 2 {
        return Err(MigrateError::NoHelpers { straggler, e });
    }
    let mut ordered: Vec<Rank> = helpers.to_vec();
    ordered.sort_by_key(|&r| virtual_rank(r, straggler, e));
    let h = ordered.len();
    let base = l_mig / h;
    let extra = l_mig % h;
    let mut assignments = Vec::new();
    let mut at = 0;
    for (i, r) in ordered.into_iter().enumerate() {
        let take = base + usize::from(i < extra);
        if take > 0 {
            assignments.push((r, at..at + take));
            at += take;
        }
    }
    debug_assert_eq!(at, l_mig);
    Ok(MigrationPlan {
        straggler,
        l_mig,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renumbering_matches_worked_example() {
        // e=3, straggler rank 1: task-2 -> (2+3-1)%3 = 1, task-3 -> 2.
        assert_eq!(virtual_rank(2, 1, 3), 1);
        assert_eq!(virtual_rank(3, 1, 3), 2);
        assert_eq!(virtual_rank(1, 1, 3), 0);
    }

    #[test]
    fn renumbering_is_a_bijection_with_straggler_at_zero() {
        for e in 1..=8 {
            for straggler in 1..=e {
                let mut seen: Vec<usize> = (1..=e).map(|r| virtual_rank(r, straggler, e)).collect();
                assert_eq!(virtual_rank(straggler, straggler, e), 0);
                seen.sort_unstable();
                assert_eq!(seen, (0..e).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn fig3_assignment_one_column_each() {
        // e=3, straggler 1, two columns: task-2 takes column 0, task-3
        // column 1.
        let plan = plan_migration(1, 2, &[2, 3], 3).unwrap();
        assert_eq!(plan.assignments, vec![(2, 0..1), (3, 1..2)]);
    }

    #[test]
    fn empty_migration_has_no_assignments() {
        let plan = plan_migration(1, 0, &[2, 3], 3).unwrap();
        assert!(plan.assignments.is_empty());
    }

    #[test]
    fn remainder_goes_to_lowest_virtual_ranks() {
        // e=4, straggler 1, 5 columns over 3 helpers -> loads (2,2,1).
        let plan = plan_migration(1, 5, &[2, 3, 4], 4).unwrap();
        assert_eq!(plan.assignments, vec![(2, 0..2), (3, 2..4), (4, 4..5)]);
    }

    #[test]
    fn assignments_partition_the_block() {
        for e in 2..=8usize {
            for straggler in 1..=e {
                let helpers: Vec<Rank> = (1..=e).filter(|&r| r != straggler).collect();
                for l_mig in 0..=17 {
                    let plan = plan_migration(straggler, l_mig, &helpers, e).unwrap();
                    let mut covered = vec![false; l_mig];
                    for (_, iv) in &plan.assignments {
                        for i in iv.clone() {
                            assert!(!covered[i], "overlap at {i}");
                            covered[i] = true;
                        }
                    }
                    assert!(covered.into_iter().all(|c| c), "gap in coverage");
                }
            }
        }
    }

    #[test]
    fn no_helpers_is_an_error() {
        assert_eq!(
            plan_migration(1, 2, &[], 1).unwrap_err(),
            MigrateError::NoHelpers { straggler: 1, e: 1 }
        );
    }

    #[test]
    fn amounts_resolve_and_clamp() {
        assert_eq!(MigAmount::Fraction(0.5).resolve(16), 8);
        assert_eq!(MigAmount::Fraction(1.0).resolve(16), 16);
        assert_eq!(MigAmount::Columns(99).resolve(16), 16);
        assert_eq!(MigAmount::Fraction(0.33).resolve(3), 1);
    }
}
