//! Morton (z-order) keys for octree cells.
//!
//! Cell coordinates are interleaved with x in the least significant bit of
//! each 3-bit group, so a key at level `l` fits in `3 * l` bits.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_LEVEL: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub level: u32,
    pub code: u64,
}

impl fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.code)
    }
}

#[inline]
fn split_by_3(x: u64) -> u64 {
    let mut x = x & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact_by_3(x: u64) -> u64 {
    let mut x = x & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

pub fn morton_encode(ix: u32, iy: u32, iz: u32, level: u32) -> Result<VoxelKey> {
    if level > MAX_LEVEL {
        return Err(Error::domain(format!(
            "octree level {level} exceeds the maximum of {MAX_LEVEL}"
        )));
    }
    let n = 1u64 << level;
    if ix as u64 >= n || iy as u64 >= n || iz as u64 >= n {
        return Err(Error::domain(format!(
            "cell ({ix}, {iy}, {iz}) outside a level-{level} grid of {n} cells per axis"
        )));
    }
    let code = split_by_3(ix as u64) | (split_by_3(iy as u64) << 1) | (split_by_3(iz as u64) << 2);
    Ok(VoxelKey { level, code })
}

impl VoxelKey {
    pub fn decode(&self) -> [u32; 3] {
        [
            compact_by_3(self.code) as u32,
            compact_by_3(self.code >> 1) as u32,
            compact_by_3(self.code >> 2) as u32,
        ]
    }

    pub fn parent(&self) -> Option<VoxelKey> {
        (self.level > 0).then(|| VoxelKey {
            level: self.level - 1,
            code: self.code >> 3,
        })
    }

    /// Ancestor at `level`, which must not be finer than `self`.
    pub fn ancestor_at(&self, level: u32) -> VoxelKey {
        debug_assert!(level <= self.level);
        VoxelKey {
            level,
            code: self.code >> (3 * (self.level - level)),
        }
    }

    pub fn is_ancestor_of(&self, other: &VoxelKey) -> bool {
        self.level < other.level && other.ancestor_at(self.level).code == self.code
    }

    /// Half-open code range covering every descendant at `level`.
    pub fn descendant_range(&self, level: u32) -> (u64, u64) {
        debug_assert!(level >= self.level);
        let shift = 3 * (level - self.level);
        (self.code << shift, (self.code + 1) << shift)
    }
}
