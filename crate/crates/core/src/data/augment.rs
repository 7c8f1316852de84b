//! Paired augmentation over the dihedral group of the square.

use std::sync::Arc;

use rand::Rng;

use super::pairs::PatchSpotPair;
use super::slide::{Patch, PATCH_SIZE};
use crate::nn::{FeatureMap, ImageSource};

/// Optional horizontal flip followed by `quarter_turns` clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        flip: false,
    };

    pub const ALL: [Dihedral; 8] = {
        let mut all = [Self::IDENTITY; 8];
        let mut i = 0;
        while i < 8 {
            all[i] = Dihedral {
                quarter_turns: (i % 4) as u8,
                flip: i >= 4,
            };
            i += 1;
        }
        all
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::ALL[rng.random_range(0..8)]
    }

    /// Input pixel shown at output position `(y, x)`.
    fn source(&self, mut y: usize, mut x: usize) -> (usize, usize) {
        let last = PATCH_SIZE - 1;
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (last - x, y);
        }
        if self.flip {
            x = last - x;
        }
        (y, x)
    }

    pub fn apply(&self, patch: &Patch) -> Patch {
        Patch::from_vec(self.transformed(patch)).expect("square patch")
    }

    fn transformed<T: From<f32>>(&self, patch: &Patch) -> Vec<T> {
        if *self == Self::IDENTITY {
            return patch.as_slice().iter().map(|&v| T::from(v)).collect();
        }
        let src = patch.as_slice();
        let mut out = Vec::with_capacity(Patch::LEN);
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                let (sy, sx) = self.source(y, x);
                let i = (sy * PATCH_SIZE + sx) * 3;
                out.extend(src[i..i + 3].iter().map(|&v| T::from(v)));
            }
        }
        out
    }
}

/// A patch viewed through a transform; pixels are produced on demand.
#[derive(Debug, Clone)]
pub struct AugmentedPatch {
    pub patch: Arc<Patch>,
    pub transform: Dihedral,
}

impl ImageSource for AugmentedPatch {
    fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            height: PATCH_SIZE,
            width: PATCH_SIZE,
            channels: 3,
            data: self.transform.transformed(&self.patch),
        }
    }
}

/// Two independently transformed copies; the expression is shared untouched.
pub fn augment_pair(pair: &PatchSpotPair, rng: &mut impl Rng) -> (PatchSpotPair, PatchSpotPair) {
    let mut copy = || PatchSpotPair {
        patch: Arc::new(Dihedral::sample(rng).apply(&pair.patch)),
        ..pair.clone()
    };
    (copy(), copy())
}
