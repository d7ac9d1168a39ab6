//! Label fusion over a stack of deformed label volumes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ClassMap, Grid, LabelVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Mvf,
    Median,
}

/// Label volumes sharing one grid and class map.
#[derive(Clone, Debug)]
pub struct LabelStack {
    members: Vec<LabelVolume>,
}

impl LabelStack {
    pub fn new(members: Vec<LabelVolume>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidInput("label stack needs at least one member".into()))?;
        for (i, m) in members.iter().enumerate().skip(1) {
            m.grid()
                .ensure_matches(first.grid(), &format!("stack member {i}"))?;
            if m.class_map() != first.class_map() {
                return Err(Error::InvalidInput(format!(
                    "stack member {i} uses a different class map"
                )));
            }
        }
        Ok(LabelStack { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[LabelVolume] {
        &self.members
    }

    pub fn grid(&self) -> &Grid {
        self.members[0].grid()
    }

    pub fn class_map(&self) -> &ClassMap {
        self.members[0].class_map()
    }

    fn fuse(&self, f: impl Fn(&[u16], &mut Vec<u32>) -> u16 + Sync) -> LabelVolume {
        let n = self.grid().len();
        let kc = self.class_map().len();
        let data: Vec<u16> = (0..n)
            .into_par_iter()
            .map_init(
                || (Vec::with_capacity(self.len()), vec![0u32; kc]),
                |(votes, scratch), v| {
                    votes.clear();
                    votes.extend(self.members.iter().map(|m| m.data()[v]));
                    f(votes, scratch)
                },
            )
            .collect();
        LabelVolume::new(*self.grid(), data, self.class_map().clone()).expect("fused ids are valid")
    }
}

/// Per-voxel most frequent class, lowest id on ties.
///
/// With `exclude_background`, only foreground votes count and a voxel is
/// background only when no member votes foreground there.
pub fn majority_vote(stack: &LabelStack, exclude_background: bool) -> LabelVolume {
    let start = usize::from(exclude_background);
    stack.fuse(|votes, counts| {
        counts.iter_mut().for_each(|c| *c = 0);
        for &l in votes {
            counts[l as usize] += 1;
        }
        let mut best = start;
        for k in start..counts.len() {
            if counts[k] > counts[best] {
                best = k;
            }
        }
        if exclude_background && counts[best] == 0 {
            0
        } else {
            best as u16
        }
    })
}

/// Per-voxel lower median of the raw label codes.
pub fn median_fuse(stack: &LabelStack) -> LabelVolume {
    // Codes increase with id, so ordering ids orders codes.
    stack.fuse(|votes, _| {
        let mut sorted = votes.to_vec();
        sorted.sort_unstable();
        sorted[(sorted.len() - 1) / 2]
    })
}

pub fn fuse(stack: &LabelStack, method: FusionMethod, exclude_background: bool) -> LabelVolume {
    match method {
        FusionMethod::Mvf => majority_vote(stack, exclude_background),
        FusionMethod::Median => median_fuse(stack),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(votes: &[&[u16]]) -> LabelStack {
        let n = votes[0].len();
        LabelStack::new(
            votes
                .iter()
                .map(|v| {
                    LabelVolume::new(Grid::unit([n, 1, 1]), v.to_vec(), ClassMap::whole_heart())
                        .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(
            majority_vote(&stack(&[&[2], &[2], &[5]]), false).data(),
            &[2]
        );
        assert_eq!(majority_vote(&stack(&[&[1], &[2]]), false).data(), &[1]);
        assert_eq!(
            majority_vote(&stack(&[&[0], &[0], &[3]]), false).data(),
            &[0]
        );
        assert_eq!(
            majority_vote(&stack(&[&[0], &[0], &[3]]), true).data(),
            &[3]
        );
        assert_eq!(majority_vote(&stack(&[&[0], &[0]]), true).data(), &[0]);
    }

    #[test]
    fn median_examples() {
        let cm = ClassMap::whole_heart();
        let id = |c| cm.id_of(c).unwrap();
        let s = stack(&[&[id(0)], &[id(205)], &[id(205)]]);
        assert_eq!(median_fuse(&s).codes(), vec![205]);
        let s = stack(&[&[id(205)], &[id(500)]]);
        assert_eq!(median_fuse(&s).codes(), vec![205]);
    }

    #[test]
    fn unanimous_stack_is_fixed_point() {
        let s = stack(&[&[1, 4, 7], &[1, 4, 7], &[1, 4, 7]]);
        assert_eq!(majority_vote(&s, false).data(), &[1, 4, 7]);
        assert_eq!(median_fuse(&s).data(), &[1, 4, 7]);
    }

    #[test]
    fn mismatched_stack_is_rejected() {
        let a = LabelVolume::background(Grid::unit([2, 2, 2]), ClassMap::whole_heart());
        let b = LabelVolume::background(Grid::unit([2, 2, 3]), ClassMap::whole_heart());
        assert!(LabelStack::new(vec![a.clone(), b]).is_err());
        let c = LabelVolume::background(Grid::unit([2, 2, 2]), ClassMap::identity(3));
        assert!(LabelStack::new(vec![a, c]).is_err());
        assert!(LabelStack::new(vec![]).is_err());
    }
}
