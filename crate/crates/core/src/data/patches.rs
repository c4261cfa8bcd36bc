use rand::Rng;
use serde::{Deserialize, Serialize};

use super::volume::VolumeSample;
use crate::error::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// `count` random patches; even-numbered draws are centered on a
    /// foreground voxel when the volume has one.
    RandomBalanced { count: usize },
    /// Tiles stepping by the patch extent, the last tile flush with the far
    /// edge so the whole volume is covered.
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
    /// Hounsfield values, row-major over `extent`.
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

impl Patch {
    pub fn center(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.origin[a] + self.extent[a] / 2)
    }
}

pub fn check_patch_fits(extent: [usize; 3], dims: [usize; 3]) -> Result<(), DataError> {
    if extent.iter().zip(&dims).any(|(&e, &d)| e == 0 || e > d) {
        return Err(DataError::PatchTooLarge { patch: extent, volume: dims });
    }
    Ok(())
}

/// Copies the `extent` box at `origin` out of a row-major `(D, H, W)` grid.
pub fn crop<T: Copy>(data: &[T], dims: [usize; 3], origin: [usize; 3], extent: [usize; 3]) -> Vec<T> {
    let [_, h, w] = dims;
    let mut out = Vec::with_capacity(extent.iter().product());
    for z in origin[0]..origin[0] + extent[0] {
        for y in origin[1]..origin[1] + extent[1] {
            let row = (z * h + y) * w + origin[2];
            out.extend_from_slice(&data[row..row + extent[2]]);
        }
    }
    out
}

/// Origins along one axis for a covering tiling with step `extent`.
pub fn grid_origins(dim: usize, extent: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * extent)
        .take_while(|o| o + extent <= dim)
        .collect();
    if out.last().is_some_and(|&o| o + extent < dim) {
        out.push(dim - extent);
    }
    out
}

fn unravel(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

pub fn extract_patches<R: Rng + ?Sized>(
    sample: &VolumeSample,
    extent: [usize; 3],
    mode: PatchMode,
    rng: &mut R,
) -> Result<Vec<Patch>, DataError> {
    let dims = sample.dims;
    check_patch_fits(extent, dims)?;
    let make = |origin: [usize; 3]| Patch {
        origin,
        extent,
        image: crop(&sample.image, dims, origin, extent),
        label: crop(&sample.label, dims, origin, extent),
    };
    match mode {
        PatchMode::Grid => {
            let axes: [Vec<usize>; 3] = std::array::from_fn(|a| grid_origins(dims[a], extent[a]));
            let mut out = Vec::new();
            for &z in &axes[0] {
                for &y in &axes[1] {
                    for &x in &axes[2] {
                        out.push(make([z, y, x]));
                    }
                }
            }
            Ok(out)
        }
        PatchMode::RandomBalanced { count } => {
            let foreground: Vec<usize> = (0..sample.label.len()).filter(|&i| sample.label[i] == 1).collect();
            // Voxels that can sit exactly at a patch center.
            let centerable: Vec<usize> = foreground
                .iter()
                .copied()
                .filter(|&i| {
                    let c = unravel(i, dims);
                    (0..3).all(|a| c[a] >= extent[a] / 2 && c[a] - extent[a] / 2 + extent[a] <= dims[a])
                })
                .collect();
            let pool = if centerable.is_empty() { &foreground } else { &centerable };
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                let origin = if i % 2 == 0 && !pool.is_empty() {
                    let c = unravel(pool[rng.random_range(0..pool.len())], dims);
                    std::array::from_fn(|a| c[a].saturating_sub(extent[a] / 2).min(dims[a] - extent[a]))
                } else {
                    std::array::from_fn(|a| rng.random_range(0..=dims[a] - extent[a]))
                };
                out.push(make(origin));
            }
            Ok(out)
        }
    }
}

/// Reassembles per-tile values onto the full grid, averaging overlaps.
pub fn stitch(dims: [usize; 3], tiles: &[([usize; 3], [usize; 3], &[f32])]) -> Result<Vec<f32>, DataError> {
    let n: usize = dims.iter().product();
    let mut sum = vec![0f32; n];
    let mut hits = vec![0u32; n];
    let [_, h, w] = dims;
    for &(origin, extent, values) in tiles {
        check_patch_fits(extent, dims)?;
        if (0..3).any(|a| origin[a] + extent[a] > dims[a]) || values.len() != extent.iter().product::<usize>() {
            return Err(DataError::Dataset(format!(
                "tile at {origin:?} with extent {extent:?} does not fit {dims:?}"
            )));
        }
        let mut k = 0;
        for z in origin[0]..origin[0] + extent[0] {
            for y in origin[1]..origin[1] + extent[1] {
                let row = (z * h + y) * w + origin[2];
                for x in 0..extent[2] {
                    sum[row + x] += values[k];
                    hits[row + x] += 1;
                    k += 1;
                }
            }
        }
    }
    if let Some(i) = hits.iter().position(|&c| c == 0) {
        return Err(DataError::Dataset(format!("voxel {:?} is not covered by any tile", unravel(i, dims))));
    }
    Ok(sum.iter().zip(&hits).map(|(&s, &c)| if c == 1 { s } else { s / c as f32 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(dims: [usize; 3], fg: &[usize]) -> VolumeSample {
        let n = dims.iter().product();
        let mut label = vec![0u8; n];
        for &i in fg {
            label[i] = 1;
        }
        VolumeSample::new("v", dims, [1.0; 3], (0..n).map(|i| i as f32).collect(), label).unwrap()
    }

    #[test]
    fn grid_64_by_32_gives_eight_tiles_and_stitches_back() {
        let v = volume([64, 64, 64], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = extract_patches(&v, [32; 3], PatchMode::Grid, &mut rng).unwrap();
        assert_eq!(p.len(), 8);
        let tiles: Vec<_> = p.iter().map(|t| (t.origin, t.extent, t.image.as_slice())).collect();
        assert_eq!(stitch(v.dims, &tiles).unwrap(), v.image);
    }

    #[test]
    fn grid_origins_cover_with_flush_tail() {
        assert_eq!(grid_origins(64, 32), vec![0, 32]);
        assert_eq!(grid_origins(40, 16), vec![0, 16, 24]);
        assert_eq!(grid_origins(16, 16), vec![0]);
    }

    #[test]
    fn overlapping_stitch_averages() {
        let v = volume([1, 1, 3], &[]);
        let a = [1.0f32, 3.0];
        let b = [5.0f32, 7.0];
        let out = stitch(v.dims, &[([0, 0, 0], [1, 1, 2], &a), ([0, 0, 1], [1, 1, 2], &b)]).unwrap();
        assert_eq!(out, vec![1.0, 4.0, 7.0]);
    }

    #[test]
    fn too_large_patch_rejected() {
        let v = volume([8, 8, 8], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            extract_patches(&v, [16, 8, 8], PatchMode::Grid, &mut rng),
            Err(DataError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn balanced_centers_half_on_foreground() {
        let dims = [16, 16, 16];
        let fg = 8 * 256 + 9 * 16 + 7;
        let v = volume(dims, &[fg]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = extract_patches(&v, [8; 3], PatchMode::RandomBalanced { count: 10 }, &mut rng).unwrap();
        let hits = p.iter().filter(|t| t.center() == [8, 9, 7]).count();
        assert!(hits >= 5, "{hits}");
    }

    #[test]
    fn balanced_without_foreground_is_uniform() {
        let v = volume([8, 8, 8], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = extract_patches(&v, [4; 3], PatchMode::RandomBalanced { count: 6 }, &mut rng).unwrap();
        assert_eq!(p.len(), 6);
    }
}
