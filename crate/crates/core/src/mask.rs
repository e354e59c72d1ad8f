//! Composite region-label maps.
//!
//! User masks may overlap. Every covered pixel is assigned to exactly one
//! region: the covering mask with the highest `order` wins, and equal orders
//! fall back to the later position in the input list. The resulting label map
//! is then pooled down to the latent and attention resolutions a backend
//! works at ([`build_pyramid`]).
//!
//! Pooling keeps two channels per level:
//!
//! - a binary coverage channel (max-pool), so that thin masks never vanish
//!   from the latent blending mask;
//! - a label channel (majority vote, ties to the higher-ranked region), which
//!   decides which prompt a coarse attention cell belongs to.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Grayscale values strictly above this are inside a mask.
pub const MASK_THRESHOLD: u8 = 127;

/// One user mask together with its compositing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// `(height, width)` binary raster, 1 = inside.
    pub raster: Array2<u8>,
    /// Z-order; higher values are drawn on top.
    pub order: i64,
    /// Self-attention group. Masks sharing a group may attend to each other.
    pub group_id: u32,
    /// 1-based index of the prompt this mask belongs to.
    pub prompt_index: usize,
}

impl MaskSpec {
    pub fn new(raster: Array2<u8>, order: i64, group_id: u32, prompt_index: usize) -> Self {
        Self {
            raster,
            order,
            group_id,
            prompt_index,
        }
    }

    /// Axis-aligned rectangle mask, rows `top..bottom`, columns `left..right`.
    pub fn rect(
        (height, width): (usize, usize),
        (top, left, bottom, right): (usize, usize, usize, usize),
        order: i64,
        group_id: u32,
        prompt_index: usize,
    ) -> Self {
        let raster = Array2::from_shape_fn((height, width), |(y, x)| {
            u8::from(y >= top && y < bottom && x >= left && x < right)
        });
        Self::new(raster, order, group_id, prompt_index)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raster.dim()
    }
}

/// Per-region metadata carried alongside the label raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionInfo {
    pub order: i64,
    pub group_id: u32,
    /// Position in the total (order, list index) ordering; higher wins.
    pub rank: usize,
}

/// Order-resolved composite of all user masks.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLabelMap {
    labels: Array2<u32>,
    groups: Array2<u32>,
    regions: Vec<RegionInfo>,
}

impl CompositeLabelMap {
    /// 0 = background, `k` = region of prompt `k`.
    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    /// 0 = background, otherwise the winning mask's group id.
    pub fn groups(&self) -> &Array2<u32> {
        &self.groups
    }

    /// Region metadata, indexed by `prompt_index - 1`.
    pub fn regions(&self) -> &[RegionInfo] {
        &self.regions
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    fn group_of(&self, label: u32) -> u32 {
        if label == 0 {
            0
        } else {
            self.regions[label as usize - 1].group_id
        }
    }
}

/// Resolve overlapping masks into a single label map.
///
/// Every mask must have the same dimensions and a distinct `prompt_index`
/// in `1..=masks.len()`.
pub fn composite(masks: &[MaskSpec]) -> Result<CompositeLabelMap> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("at least one mask is required"))?;
    let dims = first.dims();
    let n = masks.len();
    let mut seen = vec![false; n];
    for (i, m) in masks.iter().enumerate() {
        if m.dims() != dims {
            return Err(Error::invalid(format!(
                "mask {i} has dimensions {:?}, expected {:?}",
                m.dims(),
                dims
            )));
        }
        if m.prompt_index == 0 || m.prompt_index > n {
            return Err(Error::invalid(format!(
                "mask {i} references prompt {} outside 1..={n}",
                m.prompt_index
            )));
        }
        if std::mem::replace(&mut seen[m.prompt_index - 1], true) {
            return Err(Error::invalid(format!(
                "mask {i} reuses prompt index {}",
                m.prompt_index
            )));
        }
        if m.raster.iter().any(|&v| v > 1) {
            return Err(Error::invalid(format!("mask {i} is not binary")));
        }
    }

    // Paint lowest rank first so higher ranks overwrite.
    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.sort_by_key(|&i| (masks[i].order, i));

    let mut regions = vec![
        RegionInfo {
            order: 0,
            group_id: 0,
            rank: 0
        };
        n
    ];
    let mut labels = Array2::<u32>::zeros(dims);
    for (rank, &i) in by_rank.iter().enumerate() {
        let m = &masks[i];
        regions[m.prompt_index - 1] = RegionInfo {
            order: m.order,
            group_id: m.group_id,
            rank,
        };
        ndarray::Zip::from(&mut labels)
            .and(&m.raster)
            .for_each(|l, &v| {
                if v == 1 {
                    *l = m.prompt_index as u32;
                }
            });
    }
    let mut clm = CompositeLabelMap {
        groups: Array2::zeros(dims),
        labels,
        regions,
    };
    clm.groups = clm.labels.mapv(|l| clm.group_of(l));
    Ok(clm)
}

/// One resolution of a [`LabelPyramid`].
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub labels: Array2<u32>,
    pub groups: Array2<u32>,
    /// 1 where any source pixel of the cell is covered by a region.
    pub coverage: Array2<u8>,
}

impl PyramidLevel {
    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// Label maps pooled to each resolution the pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPyramid {
    levels: Vec<PyramidLevel>,
    num_regions: usize,
}

impl LabelPyramid {
    pub fn level(&self, dims: (usize, usize)) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.dims() == dims)
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(PyramidLevel::dims).collect()
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }
}

/// Pool a composite map to each requested `(height, width)`.
///
/// The source resolution is always included as the first level. Each level is
/// pooled directly from the source so results do not depend on the order in
/// which resolutions are listed.
pub fn build_pyramid(
    clm: &CompositeLabelMap,
    resolutions: &[(usize, usize)],
) -> Result<LabelPyramid> {
    let src = clm.dims();
    let mut wanted = vec![src];
    for &r in resolutions {
        if r.0 == 0 || r.1 == 0 || src.0 % r.0 != 0 || src.1 % r.1 != 0 {
            return Err(Error::invalid(format!(
                "resolution {r:?} does not evenly divide source {src:?}"
            )));
        }
        if !wanted.contains(&r) {
            wanted.push(r);
        }
    }
    let levels = wanted.into_iter().map(|r| pool_level(clm, r)).collect();
    Ok(LabelPyramid {
        levels,
        num_regions: clm.num_regions(),
    })
}

fn pool_level(clm: &CompositeLabelMap, (h, w): (usize, usize)) -> PyramidLevel {
    let (sh, sw) = clm.dims();
    let (fy, fx) = (sh / h, sw / w);
    let n = clm.num_regions();
    let mut counts = vec![0usize; n + 1];
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut coverage = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            counts.iter_mut().for_each(|c| *c = 0);
            for sy in y * fy..(y + 1) * fy {
                for sx in x * fx..(x + 1) * fx {
                    counts[clm.labels[[sy, sx]] as usize] += 1;
                }
            }
            coverage[[y, x]] = u8::from(counts[0] < fy * fx);
            // Background ranks below every region.
            let key = |l: usize| {
                let rank = if l == 0 {
                    0
                } else {
                    clm.regions[l - 1].rank + 1
                };
                (counts[l], rank)
            };
            let winner = (0..=n).max_by_key(|&l| key(l)).unwrap_or(0);
            labels[[y, x]] = winner as u32;
        }
    }
    let groups = labels.mapv(|l| clm.group_of(l));
    PyramidLevel {
        labels,
        groups,
        coverage,
    }
}

/// Split a composite map into one disjoint binary raster per region.
pub fn region_rasters(clm: &CompositeLabelMap) -> Vec<Array2<u8>> {
    (1..=clm.num_regions() as u32)
        .map(|k| clm.labels.mapv(|l| u8::from(l == k)))
        .collect()
}

/// Binarize an 8-bit grayscale raster at [`MASK_THRESHOLD`].
pub fn binarize(gray: &image::GrayImage) -> Array2<u8> {
    let (w, h) = gray.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32).0[0] > MASK_THRESHOLD)
    })
}

/// Decode an encoded mask image (PNG or any format `image` reads).
/// Colour inputs are converted to luma before thresholding.
pub fn decode_mask(bytes: &[u8]) -> Result<Array2<u8>> {
    let img = image::load_from_memory(bytes)?;
    Ok(binarize(&img.to_luma8()))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let img = image::open(path)?;
    Ok(binarize(&img.to_luma8()))
}

/// Encode a binary raster as a pure 0/255 grayscale PNG.
pub fn encode_mask_png(raster: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = raster.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if raster[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn brute_force_labels(masks: &[MaskSpec]) -> Array2<u32> {
        let dims = masks[0].dims();
        Array2::from_shape_fn(dims, |p| {
            let mut best: Option<(i64, usize)> = None;
            let mut label = 0;
            for (i, m) in masks.iter().enumerate() {
                if m.raster[p] == 1 && best.is_none_or(|b| (m.order, i) > b) {
                    best = Some((m.order, i));
                    label = m.prompt_index as u32;
                }
            }
            label
        })
    }

    #[test]
    fn higher_order_wins_overlap() {
        let m1 = MaskSpec::new(array![[1, 0], [1, 0]], 1, 1, 1);
        let m2 = MaskSpec::new(array![[0, 0], [1, 1]], 2, 2, 2);
        let clm = composite(&[m1, m2]).unwrap();
        assert_eq!(clm.labels(), &array![[1, 0], [2, 2]]);
        assert_eq!(clm.groups(), &array![[1, 0], [2, 2]]);
    }

    #[test]
    fn full_mask_labels_everything() {
        let m = MaskSpec::new(Array2::ones((3, 5)), 0, 7, 1);
        let clm = composite(&[m]).unwrap();
        assert!(clm.labels().iter().all(|&l| l == 1));
        assert!(clm.groups().iter().all(|&g| g == 7));
    }

    #[test]
    fn equal_orders_fall_back_to_list_index() {
        let m1 = MaskSpec::new(array![[1, 1]], 3, 1, 1);
        let m2 = MaskSpec::new(array![[0, 1]], 3, 2, 2);
        let clm = composite(&[m1, m2]).unwrap();
        assert_eq!(clm.labels(), &array![[1, 2]]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(composite(&[]).unwrap_err().is_invalid_input());
        let a = MaskSpec::new(Array2::ones((2, 2)), 0, 1, 1);
        let b = MaskSpec::new(Array2::ones((2, 3)), 0, 1, 2);
        assert!(composite(&[a.clone(), b]).is_err());
        let dup = MaskSpec::new(Array2::ones((2, 2)), 0, 1, 1);
        assert!(composite(&[a.clone(), dup]).is_err());
        let out_of_range = MaskSpec::new(Array2::ones((2, 2)), 0, 1, 3);
        assert!(composite(&[a.clone(), out_of_range]).is_err());
        let non_binary = MaskSpec::new(Array2::from_elem((2, 2), 2), 0, 1, 1);
        assert!(composite(&[non_binary]).is_err());
    }

    #[test]
    fn empty_map_pools_to_zero() {
        let m = MaskSpec::new(Array2::zeros((8, 8)), 0, 1, 1);
        let clm = composite(&[m]).unwrap();
        let pyr = build_pyramid(&clm, &[(4, 4), (2, 2), (1, 1)]).unwrap();
        for level in pyr.levels() {
            assert!(level.labels.iter().all(|&l| l == 0));
            assert!(level.coverage.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn single_pixel_survives_in_coverage_only() {
        let mut r = Array2::zeros((8, 8));
        r[[3, 5]] = 1;
        let clm = composite(&[MaskSpec::new(r, 0, 1, 1)]).unwrap();
        let pyr = build_pyramid(&clm, &[(1, 1)]).unwrap();
        let lvl = pyr.level((1, 1)).unwrap();
        assert_eq!(lvl.coverage[[0, 0]], 1);
        assert_eq!(lvl.labels[[0, 0]], 0);
    }

    #[test]
    fn majority_tie_goes_to_higher_order() {
        // 2x2 cell split evenly between region 1 (order 5) and region 2 (order 1).
        let m1 = MaskSpec::new(array![[1, 1], [0, 0]], 5, 1, 1);
        let m2 = MaskSpec::new(array![[0, 0], [1, 1]], 1, 2, 2);
        let clm = composite(&[m1, m2]).unwrap();
        let pyr = build_pyramid(&clm, &[(1, 1)]).unwrap();
        assert_eq!(pyr.level((1, 1)).unwrap().labels[[0, 0]], 1);
        // Region beats background on a tie.
        let m = MaskSpec::new(array![[1, 1], [0, 0]], -9, 1, 1);
        let clm = composite(&[m]).unwrap();
        let pyr = build_pyramid(&clm, &[(1, 1)]).unwrap();
        assert_eq!(pyr.level((1, 1)).unwrap().labels[[0, 0]], 1);
    }

    #[test]
    fn non_divisible_resolution_rejected() {
        let clm = composite(&[MaskSpec::new(Array2::ones((8, 8)), 0, 1, 1)]).unwrap();
        assert!(build_pyramid(&clm, &[(3, 3)]).is_err());
        assert!(build_pyramid(&clm, &[(0, 4)]).is_err());
    }

    #[test]
    fn region_rasters_split_labels() {
        let m1 = MaskSpec::new(array![[1, 0], [1, 0]], 1, 1, 1);
        let m2 = MaskSpec::new(array![[0, 0], [1, 1]], 2, 2, 2);
        let clm = composite(&[m1, m2]).unwrap();
        let rs = region_rasters(&clm);
        assert_eq!(rs[0], array![[1, 0], [0, 0]]);
        assert_eq!(rs[1], array![[0, 0], [1, 1]]);

        let empty = composite(&[MaskSpec::new(Array2::zeros((2, 2)), 0, 1, 1)]).unwrap();
        assert!(region_rasters(&empty).iter().all(|r| r.iter().all(|&v| v == 0)));
    }

    #[test]
    fn mask_png_threshold() {
        let gray = image::GrayImage::from_fn(4, 1, |x, _| image::Luma([[0, 127, 128, 255][x as usize]]));
        assert_eq!(binarize(&gray), array![[0, 0, 1, 1]]);
        let r = array![[1, 0, 1], [0, 1, 1]];
        assert_eq!(decode_mask(&encode_mask_png(&r).unwrap()).unwrap(), r);
    }

    fn mask_set(h: usize, w: usize, n: usize) -> impl Strategy<Value = Vec<MaskSpec>> {
        (
            prop::collection::vec(prop::collection::vec(0u8..=1, h * w), n),
            prop::collection::vec(-3i64..4, n),
            prop::collection::vec(1u32..4, n),
            Just(()).prop_perturb(move |_, mut rng| {
                let mut idx: Vec<usize> = (1..=n).collect();
                for i in (1..n).rev() {
                    idx.swap(i, rng.random_range(0..=i));
                }
                idx
            }),
        )
            .prop_map(move |(rasters, orders, groups, prompts)| {
                rasters
                    .into_iter()
                    .zip(orders)
                    .zip(groups)
                    .zip(prompts)
                    .map(|(((r, o), g), p)| {
                        MaskSpec::new(Array2::from_shape_vec((h, w), r).unwrap(), o, g, p)
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn composite_matches_brute_force(masks in (1usize..5).prop_flat_map(|n| mask_set(4, 4, n))) {
            let clm = composite(&masks).unwrap();
            prop_assert_eq!(clm.labels(), &brute_force_labels(&masks));
            for (p, &l) in clm.labels().indexed_iter() {
                if l > 0 {
                    let owner = masks.iter().find(|m| m.prompt_index == l as usize).unwrap();
                    prop_assert_eq!(owner.raster[p], 1);
                    prop_assert_eq!(clm.groups()[p], owner.group_id);
                } else {
                    prop_assert!(masks.iter().all(|m| m.raster[p] == 0));
                }
            }
        }

        #[test]
        fn region_rasters_partition(masks in (1usize..5).prop_flat_map(|n| mask_set(8, 8, n))) {
            let clm = composite(&masks).unwrap();
            let rs = region_rasters(&clm);
            for (p, &l) in clm.labels().indexed_iter() {
                let sum: u8 = rs.iter().map(|r| r[p]).sum();
                prop_assert_eq!(sum, u8::from(l > 0));
            }
        }

        #[test]
        fn adding_a_mask_keeps_coverage(masks in (2usize..5).prop_flat_map(|n| mask_set(4, 4, n))) {
            let n = masks.len();
            let fewer: Vec<MaskSpec> = masks
                .iter()
                .filter(|m| m.prompt_index != n)
                .cloned()
                .collect();
            let before = composite(&fewer).unwrap();
            let after = composite(&masks).unwrap();
            for (p, &l) in before.labels().indexed_iter() {
                if l > 0 {
                    prop_assert!(after.labels()[p] > 0);
                }
            }
        }

        #[test]
        fn permutation_keeps_map_with_distinct_orders(
            masks in (1usize..5).prop_flat_map(|n| mask_set(4, 4, n)),
            seed in any::<u64>(),
        ) {
            let mut masks = masks;
            for (i, m) in masks.iter_mut().enumerate() {
                m.order = i as i64 * 10 + m.order;
            }
            let mut shuffled = masks.clone();
            let len = shuffled.len();
            shuffled.rotate_left(seed as usize % len);
            prop_assert_eq!(composite(&masks).unwrap(), composite(&shuffled).unwrap());
        }
    }
}
