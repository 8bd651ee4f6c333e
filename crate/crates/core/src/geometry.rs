//! Patch-grid geometry for OCR regions: patch assignment, circle distance,
//! distance buckets and the per-head pairwise attention bias built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Axis-aligned box in fractions of the image width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl NormalizedBBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_axis = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0;
        if ok_axis(self.xmin, self.xmax) && ok_axis(self.ymin, self.ymax) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "bbox ({}, {}, {}, {}) must satisfy 0 <= min < max <= 1 on both axes",
                self.xmin, self.ymin, self.xmax, self.ymax
            )))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self { rows: 11, cols: 11 }
    }
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("patch grid {rows}x{cols} must be at least 1x1")));
        }
        Ok(Self { rows, cols })
    }

    pub fn cells(&self) -> impl Iterator<Item = PatchCoord> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| PatchCoord { row, col }))
    }

    pub fn contains(&self, p: PatchCoord) -> bool {
        p.row < self.rows && p.col < self.cols
    }

    /// Largest bucket index any pair of cells can produce (the two opposite
    /// corners).
    pub fn max_bucket(&self) -> usize {
        let far = PatchCoord {
            row: self.rows - 1,
            col: self.cols - 1,
        };
        bucket_index(circle_distance(PatchCoord { row: 0, col: 0 }, far))
    }

    /// Grid cell index of a coordinate along one axis.
    pub fn cell_along(v: f64, cells: usize) -> usize {
        ((v * cells as f64).floor().max(0.0) as usize).min(cells - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchCoord {
    pub row: usize,
    pub col: usize,
}

/// The grid cell containing the box center. Centers on the far edge fall
/// into the last row/column.
pub fn assign_patch(bbox: &NormalizedBBox, grid: PatchGrid) -> Result<PatchCoord> {
    bbox.validate()?;
    let (cx, cy) = bbox.center();
    Ok(PatchCoord {
        row: PatchGrid::cell_along(cy, grid.rows),
        col: PatchGrid::cell_along(cx, grid.cols),
    })
}

/// Euclidean distance between two cells, in cell units.
pub fn circle_distance(p: PatchCoord, q: PatchCoord) -> f64 {
    let dr = p.row as f64 - q.row as f64;
    let dc = p.col as f64 - q.col as f64;
    (dr * dr + dc * dc).sqrt()
}

/// `trunc(2·dist)` without the table bound check.
pub fn bucket_index(dist: f64) -> usize {
    (dist * 2.0).trunc() as usize
}

/// `trunc(2·dist)`, rejected when it falls outside a table of `num_buckets`
/// rows.
pub fn bucketize(dist: f64, num_buckets: usize) -> Result<usize> {
    if !(dist >= 0.0) || !dist.is_finite() {
        return Err(Error::InvalidInput(format!("distance {dist} must be finite and >= 0")));
    }
    let b = bucket_index(dist);
    if b >= num_buckets {
        return Err(Error::Config(format!(
            "distance bucket {b} does not fit a table of {num_buckets} buckets"
        )));
    }
    Ok(b)
}

/// Learnable `num_buckets × num_heads` table of distance embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub entries: Mat,
}

impl BucketTable {
    pub fn zeros(num_buckets: usize, num_heads: usize) -> Self {
        Self {
            entries: Mat::zeros(num_buckets, num_heads),
        }
    }

    pub fn from_mat(entries: Mat) -> Self {
        Self { entries }
    }

    pub fn num_buckets(&self) -> usize {
        self.entries.rows
    }

    pub fn num_heads(&self) -> usize {
        self.entries.cols
    }

    /// Rejects tables that cannot index every distance on `grid`.
    pub fn check_covers(&self, grid: PatchGrid) -> Result<()> {
        let needed = grid.max_bucket() + 1;
        if self.num_buckets() < needed {
            return Err(Error::Config(format!(
                "a {}x{} grid needs at least {needed} distance buckets, table has {}",
                grid.rows,
                grid.cols,
                self.num_buckets()
            )));
        }
        Ok(())
    }
}

/// `n × n × heads` additive attention bias, stored as `values[i][j][h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasMatrix {
    pub values: Vec<Vec<Vec<f64>>>,
}

impl BiasMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One head's `n × n` slice.
    pub fn head(&self, h: usize) -> Mat {
        let n = self.values.len();
        let mut m = Mat::zeros(n, n);
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, v[h]);
            }
        }
        m
    }
}

/// Row-major `n × n` bucket indices for a list of patches.
pub fn pairwise_buckets(patches: &[PatchCoord], num_buckets: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(patches.len() * patches.len());
    for &p in patches {
        for &q in patches {
            out.push(bucketize(circle_distance(p, q), num_buckets)?);
        }
    }
    Ok(out)
}

pub fn pairwise_bias(patches: &[PatchCoord], table: &BucketTable) -> Result<BiasMatrix> {
    let n = patches.len();
    let buckets = pairwise_buckets(patches, table.num_buckets())?;
    let values = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| table.entries.row(buckets[i * n + j]).to_vec())
                .collect()
        })
        .collect();
    Ok(BiasMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pc(row: usize, col: usize) -> PatchCoord {
        PatchCoord { row, col }
    }

    #[test]
    fn assign_patch_examples() {
        let g = PatchGrid::default();
        let b = |a, b, c, d| NormalizedBBox::new(a, b, c, d).unwrap();
        assert_eq!(assign_patch(&b(0.45, 0.45, 0.55, 0.55), g).unwrap(), pc(5, 5));
        assert_eq!(assign_patch(&b(0.0, 0.0, 0.01, 0.01), g).unwrap(), pc(0, 0));
        assert_eq!(assign_patch(&b(0.98, 0.98, 1.0, 1.0), g).unwrap(), pc(10, 10));
    }

    #[test]
    fn assign_patch_rejects_bad_boxes() {
        let bad = NormalizedBBox {
            xmin: 0.5,
            ymin: 0.1,
            xmax: 0.4,
            ymax: 0.2,
        };
        assert!(matches!(assign_patch(&bad, PatchGrid::default()), Err(Error::InvalidInput(_))));
        assert!(NormalizedBBox::new(0.0, 0.0, 1.1, 0.5).is_err());
        assert!(NormalizedBBox::new(0.2, 0.2, 0.2, 0.5).is_err());
    }

    #[test]
    fn circle_distance_examples() {
        assert_eq!(circle_distance(pc(3, 7), pc(3, 7)), 0.0);
        assert_eq!(circle_distance(pc(0, 0), pc(3, 4)), 5.0);
        assert!((circle_distance(pc(0, 0), pc(10, 10)) - 200f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bucketize_examples() {
        assert_eq!(bucketize(0.0, 32).unwrap(), 0);
        assert_eq!(bucketize(5.0, 32).unwrap(), 10);
        assert_eq!(bucketize(14.142135, 32).unwrap(), 28);
        assert!(matches!(bucketize(14.142135, 28), Err(Error::Config(_))));
        assert!(bucketize(-1.0, 32).is_err());
    }

    #[test]
    fn table_coverage_check() {
        let g = PatchGrid::default();
        assert_eq!(g.max_bucket(), 28);
        assert!(BucketTable::zeros(32, 12).check_covers(g).is_ok());
        assert!(BucketTable::zeros(28, 12).check_covers(g).is_err());
        assert!(BucketTable::zeros(29, 12).check_covers(g).is_ok());
    }

    #[test]
    fn pairwise_bias_examples() {
        let mut entries = Mat::zeros(32, 3);
        for b in 0..32 {
            for h in 0..3 {
                entries.set(b, h, b as f64 + 0.1 * h as f64);
            }
        }
        let table = BucketTable::from_mat(entries);

        let single = pairwise_bias(&[pc(4, 4)], &table).unwrap();
        assert_eq!(single.values, vec![vec![table.entries.row(0).to_vec()]]);

        let zero = pairwise_bias(&[pc(0, 0), pc(1, 2), pc(9, 9)], &BucketTable::zeros(32, 3)).unwrap();
        assert_eq!(zero.len(), 3);
        assert!(zero.values.iter().flatten().flatten().all(|&v| v == 0.0));

        let pair = pairwise_bias(&[pc(0, 0), pc(3, 4)], &table).unwrap();
        assert_eq!(pair.values[0][1], table.entries.row(10).to_vec());
        assert_eq!(pair.values[1][0], table.entries.row(10).to_vec());
    }

    #[test]
    fn exhaustive_default_grid_buckets() {
        let g = PatchGrid::default();
        let mut max = 0;
        for p in g.cells() {
            for q in g.cells() {
                let dr = (p.row as i64 - q.row as i64).pow(2);
                let dc = (p.col as i64 - q.col as i64).pow(2);
                // Largest b with (b/2)² <= dr + dc, in integers: b² <= 4(dr+dc).
                let sq = 4 * (dr + dc);
                let mut expect = 0;
                while (expect + 1) * (expect + 1) <= sq {
                    expect += 1;
                }
                let got = bucketize(circle_distance(p, q), 32).unwrap();
                assert_eq!(got as i64, expect, "{p:?} {q:?}");
                max = max.max(got);
            }
        }
        assert_eq!(max, 28);
    }

    proptest! {
        #[test]
        fn bias_is_symmetric(cells in prop::collection::vec((0usize..11, 0usize..11), 1..12), seed in 0u64..1000) {
            use rand::SeedableRng;
            let patches: Vec<_> = cells.into_iter().map(|(r, c)| pc(r, c)).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table = BucketTable::from_mat(Mat::randn(32, 4, 1.0, &mut rng));
            let bias = pairwise_bias(&patches, &table).unwrap();
            for i in 0..patches.len() {
                for j in 0..patches.len() {
                    prop_assert_eq!(&bias.values[i][j], &bias.values[j][i]);
                }
            }
        }

        #[test]
        fn translation_keeps_bucket(a in (0usize..6, 0usize..6), b in (0usize..6, 0usize..6), shift in (0usize..6, 0usize..6)) {
            let (p, q) = (pc(a.0, a.1), pc(b.0, b.1));
            let (p2, q2) = (pc(a.0 + shift.0, a.1 + shift.1), pc(b.0 + shift.0, b.1 + shift.1));
            prop_assert_eq!(bucketize(circle_distance(p, q), 32).unwrap(), bucketize(circle_distance(p2, q2), 32).unwrap());
        }

        #[test]
        fn triangle_inequality(a in (0usize..11, 0usize..11), b in (0usize..11, 0usize..11), c in (0usize..11, 0usize..11)) {
            let (p, q, r) = (pc(a.0, a.1), pc(b.0, b.1), pc(c.0, c.1));
            prop_assert!(circle_distance(p, r) <= circle_distance(p, q) + circle_distance(q, r) + 1e-12);
        }
    }
}
