//! Z-order linearization over a 21-bit-per-axis grid.

/// Grid resolution per axis.
pub const MORTON_BITS: u32 = 21;
const GRID_MAX: u32 = (1 << MORTON_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Tight box around `points`; all zeros when empty.
    pub fn from_points(points: &[[f64; 3]]) -> Aabb {
        if points.is_empty() {
            return Aabb { min: [0.0; 3], max: [0.0; 3] };
        }
        let mut b = Aabb { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] };
        for p in points {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        b
    }
}

/// Spreads the low 21 bits of `v` so that bit `i` lands on bit `3i`.
fn spread(v: u32) -> u64 {
    let mut x = (v & GRID_MAX) as u64;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Interleaves grid coordinates: x bits at `3i`, y at `3i+1`, z at `3i+2`.
pub fn morton_key(g: [u32; 3]) -> u64 {
    spread(g[0]) | (spread(g[1]) << 1) | (spread(g[2]) << 2)
}

/// `floor((p − lo)/(hi − lo) · (2²¹ − 1))` per axis, clamped to the grid. A
/// degenerate axis maps to 0.
pub fn grid_coords(p: &[f64; 3], aabb: &Aabb) -> [u32; 3] {
    std::array::from_fn(|k| {
        let extent = aabb.max[k] - aabb.min[k];
        if !(extent > 0.0) {
            return 0;
        }
        let t = ((p[k] - aabb.min[k]) / extent).clamp(0.0, 1.0);
        ((t * GRID_MAX as f64).floor() as u32).min(GRID_MAX)
    })
}

/// Permutation sorting `positions` by Morton key, ties by original index.
pub fn morton_order(positions: &[[f64; 3]], aabb: &Aabb) -> Vec<usize> {
    let keys: Vec<u64> = positions.iter().map(|p| morton_key(grid_coords(p, aabb))).collect();
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    order
}
