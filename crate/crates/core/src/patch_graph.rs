//! Atlas patch grids and per-subject patch graphs.
//!
//! The atlas volume is divided into equally spaced, possibly overlapping s^3
//! patches; the grid keeps every position whose patch touches the mask, in a
//! fixed (z, y, x ascending) order so patch index `j` is meaningful across
//! subjects. Mapping the centers through a subject's inverse transform, then
//! thresholding pairwise center distances, yields that subject's graph.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transform::{dist, SpatialTransform};
use crate::volume::{Volume, BACKGROUND};

#[derive(Clone, Debug)]
pub struct AtlasGrid {
    pub atlas_dims: [usize; 3],
    pub spacing: f32,
    /// Patch edge length in voxels.
    pub patch_size: usize,
    /// Grid step in voxels.
    pub step: usize,
    /// Patch centers in atlas millimeters, z-major ascending order.
    pub centers_mm: Vec<[f32; 3]>,
}

impl AtlasGrid {
    pub fn len(&self) -> usize {
        self.centers_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers_mm.is_empty()
    }

    /// Centers normalized per axis to `[-1, 1]` by the atlas extent; this is
    /// the conditioning vector handed to the patch encoder.
    pub fn centers_normalized(&self) -> Vec<[f32; 3]> {
        let ext = [
            (self.atlas_dims[2] - 1) as f32 * self.spacing,
            (self.atlas_dims[1] - 1) as f32 * self.spacing,
            (self.atlas_dims[0] - 1) as f32 * self.spacing,
        ];
        self.centers_mm
            .iter()
            .map(|c| {
                [
                    2.0 * c[0] / ext[0] - 1.0,
                    2.0 * c[1] / ext[1] - 1.0,
                    2.0 * c[2] / ext[2] - 1.0,
                ]
            })
            .collect()
    }
}

/// Per-subject patch set, mapped centers and adjacency.
#[derive(Clone, Debug)]
pub struct PatientGraph {
    pub subject_id: String,
    /// phi_i^{-1}(p^j) for every atlas center, subject millimeters.
    pub centers_mm: Vec<[f32; 3]>,
    /// One s^3 patch per node, rank-3 `[s, s, s]`.
    pub patches: Vec<Tensor>,
    /// True where the patch needed out-of-bounds padding.
    pub padded: Vec<bool>,
    /// Binary symmetric adjacency with zero diagonal, `[N, N]`.
    pub adjacency: Tensor,
    /// Symmetrically normalized adjacency with self-loops, `[N, N]`.
    pub adjacency_norm: Tensor,
    pub rho_mm: f32,
}

/// Enumerate the atlas grid: positions step voxels apart whose s^3 patch fits
/// the volume, kept when the patch intersects the mask (any voxel > 0.5).
pub fn build_atlas_grid(
    atlas: &Volume,
    mask: &Volume,
    patch_size: usize,
    step: usize,
) -> Result<AtlasGrid> {
    if patch_size == 0 || patch_size > atlas.dims.iter().copied().min().unwrap_or(0) {
        return Err(Error::config(format!(
            "patch size {patch_size} does not fit atlas dims {:?}",
            atlas.dims
        )));
    }
    if step == 0 || step > patch_size {
        return Err(Error::config(format!(
            "step {step} must be in 1..=patch_size ({patch_size})"
        )));
    }
    if mask.dims != atlas.dims {
        return Err(Error::config(format!(
            "mask dims {:?} differ from atlas dims {:?}",
            mask.dims, atlas.dims
        )));
    }
    if !mask.voxels.iter().any(|&v| v > 0.5) {
        return Err(Error::config("mask is empty"));
    }

    let positions = |dim: usize| -> Vec<usize> {
        (0..=(dim - patch_size)).step_by(step).collect()
    };
    let (zs, ys, xs) =
        (positions(atlas.dims[0]), positions(atlas.dims[1]), positions(atlas.dims[2]));

    let mut centers = Vec::new();
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                if patch_touches_mask(mask, [x0, y0, z0], patch_size) {
                    let half = patch_size / 2;
                    centers.push([
                        (x0 + half) as f32 * atlas.spacing,
                        (y0 + half) as f32 * atlas.spacing,
                        (z0 + half) as f32 * atlas.spacing,
                    ]);
                }
            }
        }
    }
    Ok(AtlasGrid {
        atlas_dims: atlas.dims,
        spacing: atlas.spacing,
        patch_size,
        step,
        centers_mm: centers,
    })
}

fn patch_touches_mask(mask: &Volume, start: [usize; 3], s: usize) -> bool {
    for z in start[2]..start[2] + s {
        for y in start[1]..start[1] + s {
            for x in start[0]..start[0] + s {
                if mask.at(x, y, z) > 0.5 {
                    return true;
                }
            }
        }
    }
    false
}

/// Map atlas centers into subject space through the inverse transform
/// (atlas -> subject), preserving order.
pub fn map_centers(grid: &AtlasGrid, atlas_to_subject: &SpatialTransform) -> Result<Vec<[f32; 3]>> {
    if atlas_to_subject.subject_to_atlas {
        return Err(Error::config(
            "map_centers needs the atlas->subject transform; got subject->atlas",
        ));
    }
    Ok(grid.centers_mm.iter().map(|&c| atlas_to_subject.apply(c)).collect())
}

/// Extract the s^3 patch around each center (rounded to the nearest voxel);
/// out-of-bounds voxels take the background intensity -1. Returns the patches
/// and a per-node flag marking any that needed padding.
pub fn extract_patches(
    volume: &Volume,
    centers_mm: &[[f32; 3]],
    patch_size: usize,
) -> Result<(Vec<Tensor>, Vec<bool>)> {
    let s = patch_size;
    let half = (s / 2) as i64;
    let mut patches = Vec::with_capacity(centers_mm.len());
    let mut padded_flags = Vec::with_capacity(centers_mm.len());
    for (j, c) in centers_mm.iter().enumerate() {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate {
                op: "extract_patches",
                detail: format!("center {j} is not finite"),
            });
        }
        let cx = libm::roundf(c[0] / volume.spacing) as i64;
        let cy = libm::roundf(c[1] / volume.spacing) as i64;
        let cz = libm::roundf(c[2] / volume.spacing) as i64;
        let mut data = vec![0.0f32; s * s * s];
        let mut padded = false;
        let mut i = 0;
        for dz in 0..s as i64 {
            let z = cz - half + dz;
            for dy in 0..s as i64 {
                let y = cy - half + dy;
                for dx in 0..s as i64 {
                    let x = cx - half + dx;
                    let v = volume.at_or_background(x, y, z);
                    if v == BACKGROUND
                        && (x < 0
                            || y < 0
                            || z < 0
                            || x >= volume.dims[2] as i64
                            || y >= volume.dims[1] as i64
                            || z >= volume.dims[0] as i64)
                    {
                        padded = true;
                    }
                    data[i] = v;
                    i += 1;
                }
            }
        }
        patches.push(Tensor::new(&[s, s, s], data)?);
        padded_flags.push(padded);
    }
    Ok((patches, padded_flags))
}

/// Binary adjacency: edge iff the Euclidean distance between two mapped
/// centers is strictly below `rho_mm`. Symmetric, zero diagonal.
pub fn build_adjacency(centers_mm: &[[f32; 3]], rho_mm: f32) -> Result<Tensor> {
    if !(rho_mm > 0.0) {
        return Err(Error::config(format!("rho {rho_mm} must be positive")));
    }
    let n = centers_mm.len();
    let mut a = vec![0.0f32; n * n];
    for j in 0..n {
        for k in (j + 1)..n {
            if dist(centers_mm[j], centers_mm[k]) < rho_mm {
                a[j * n + k] = 1.0;
                a[k * n + j] = 1.0;
            }
        }
    }
    Tensor::new(&[n, n], a)
}

/// `D^{-1/2} (A + I) D^{-1/2}` for a binary symmetric zero-diagonal adjacency.
/// The self-loop guarantees every degree is at least one.
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    if adjacency.rank() != 2 || adjacency.dims()[0] != adjacency.dims()[1] {
        return Err(Error::shape(
            "normalize_adjacency",
            format!("expected square matrix, got {:?}", adjacency.dims()),
        ));
    }
    let n = adjacency.dims()[0];
    let a = adjacency.data();
    for j in 0..n {
        if a[j * n + j] != 0.0 {
            return Err(Error::config(format!("adjacency has nonzero diagonal at {j}")));
        }
        for k in 0..n {
            let v = a[j * n + k];
            if v != 0.0 && v != 1.0 {
                return Err(Error::config(format!("adjacency entry ({j},{k}) = {v} not binary")));
            }
            if a[j * n + k] != a[k * n + j] {
                return Err(Error::config(format!("adjacency not symmetric at ({j},{k})")));
            }
        }
    }
    let mut inv_sqrt_deg = vec![0.0f32; n];
    for j in 0..n {
        let deg: f32 = (0..n).map(|k| a[j * n + k]).sum::<f32>() + 1.0;
        inv_sqrt_deg[j] = 1.0 / libm::sqrtf(deg);
    }
    let mut out = vec![0.0f32; n * n];
    for j in 0..n {
        for k in 0..n {
            let ahat = a[j * n + k] + if j == k { 1.0 } else { 0.0 };
            out[j * n + k] = ahat * inv_sqrt_deg[j] * inv_sqrt_deg[k];
        }
    }
    Tensor::new(&[n, n], out)
}

/// Assemble a subject's full graph from its volume and subject->atlas transform.
pub fn build_patient_graph(
    subject_id: &str,
    volume: &Volume,
    subject_to_atlas: &SpatialTransform,
    grid: &AtlasGrid,
    rho_mm: f32,
) -> Result<PatientGraph> {
    let atlas_extent = [
        (grid.atlas_dims[2] - 1) as f32 * grid.spacing,
        (grid.atlas_dims[1] - 1) as f32 * grid.spacing,
        (grid.atlas_dims[0] - 1) as f32 * grid.spacing,
    ];
    let inverse = subject_to_atlas.invert(atlas_extent, grid.spacing)?;
    let centers = map_centers(grid, &inverse)?;
    let (patches, padded) = extract_patches(volume, &centers, grid.patch_size)?;
    let adjacency = build_adjacency(&centers, rho_mm)?;
    let adjacency_norm = normalize_adjacency(&adjacency)?;
    Ok(PatientGraph {
        subject_id: String::from(subject_id),
        centers_mm: centers,
        patches,
        padded,
        adjacency,
        adjacency_norm,
        rho_mm,
    })
}

/// Default edge threshold: 1.1 times the grid step in mm, which connects each
/// interior grid node to its six axis-aligned neighbors.
pub fn default_rho_mm(step_voxels: usize, spacing: f32) -> f32 {
    step_voxels as f32 * spacing * 1.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::transform::Affine3;

    fn full_mask(dims: [usize; 3]) -> Volume {
        Volume::filled(dims, 1.0, 1.0).unwrap()
    }

    #[test]
    fn single_patch_grid_centers_at_sixteen() {
        let atlas = Volume::filled([32; 3], 1.0, 0.0).unwrap();
        let grid = build_atlas_grid(&atlas, &full_mask([32; 3]), 32, 32).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid.centers_mm[0], [16.0, 16.0, 16.0]);
    }

    #[test]
    fn sixty_four_cube_with_half_overlap_gives_27() {
        let atlas = Volume::filled([64; 3], 1.0, 0.0).unwrap();
        let grid = build_atlas_grid(&atlas, &full_mask([64; 3]), 32, 16).unwrap();
        // floor((64-32)/16)+1 = 3 positions per axis
        assert_eq!(grid.len(), 27);
        // deterministic ordering: z, then y, then x ascending
        assert_eq!(grid.centers_mm[0], [16.0, 16.0, 16.0]);
        assert_eq!(grid.centers_mm[1], [32.0, 16.0, 16.0]);
        assert_eq!(grid.centers_mm[3], [16.0, 32.0, 16.0]);
        assert_eq!(grid.centers_mm[9], [16.0, 16.0, 32.0]);
    }

    #[test]
    fn octant_mask_keeps_only_touching_patches() {
        let atlas = Volume::filled([64; 3], 1.0, 0.0).unwrap();
        let mut mask = Volume::filled([64; 3], 1.0, 0.0).unwrap();
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let i = mask.index(x, y, z);
                    mask.voxels[i] = 1.0;
                }
            }
        }
        let grid = build_atlas_grid(&atlas, &mask, 32, 16).unwrap();
        assert!(grid.len() < 27);
        // brute-force cross-check: patch [x0, x0+32) intersects [0, 24) iff x0 < 24
        let expected = (0..3usize)
            .flat_map(|z| (0..3usize).flat_map(move |y| (0..3usize).map(move |x| (x, y, z))))
            .filter(|&(x, y, z)| x * 16 < 24 && y * 16 < 24 && z * 16 < 24)
            .count();
        assert_eq!(grid.len(), expected);
    }

    #[test]
    fn shrinking_the_mask_never_increases_n() {
        let atlas = Volume::filled([48; 3], 1.0, 0.0).unwrap();
        let mut rng = Stream::root(23).derive("mask").rng();
        let mut mask = Volume::filled([48; 3], 1.0, 0.0).unwrap();
        for v in mask.voxels.iter_mut() {
            *v = if rng.uniform_f32() < 0.5 { 1.0 } else { 0.0 };
        }
        let n_before = build_atlas_grid(&atlas, &mask, 16, 8).unwrap().len();
        // clear a slab of the mask
        for z in 0..20 {
            for y in 0..48 {
                for x in 0..48 {
                    let i = mask.index(x, y, z);
                    mask.voxels[i] = 0.0;
                }
            }
        }
        if mask.voxels.iter().any(|&v| v > 0.5) {
            let n_after = build_atlas_grid(&atlas, &mask, 16, 8).unwrap().len();
            assert!(n_after <= n_before);
        }
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        let atlas = Volume::filled([16; 3], 1.0, 0.0).unwrap();
        let empty = Volume::filled([16; 3], 1.0, 0.0).unwrap();
        assert!(build_atlas_grid(&atlas, &empty, 8, 8).is_err()); // empty mask
        assert!(build_atlas_grid(&atlas, &full_mask([16; 3]), 32, 8).is_err()); // patch too large
        assert!(build_atlas_grid(&atlas, &full_mask([16; 3]), 8, 12).is_err()); // step > patch
    }

    #[test]
    fn identity_and_translation_map_centers() {
        let atlas = Volume::filled([32; 3], 1.0, 0.0).unwrap();
        let grid = build_atlas_grid(&atlas, &full_mask([32; 3]), 16, 16).unwrap();
        let ident = SpatialTransform::identity().invert([31.0; 3], 1.0).unwrap();
        let mapped = map_centers(&grid, &ident).unwrap();
        assert_eq!(mapped, grid.centers_mm);

        let shift = SpatialTransform {
            affine: Affine3::translation([-5.0, 0.0, 0.0]),
            displacement: None,
            subject_to_atlas: true,
        };
        let inv = shift.invert([31.0; 3], 1.0).unwrap();
        let mapped = map_centers(&grid, &inv).unwrap();
        for (m, c) in mapped.iter().zip(&grid.centers_mm) {
            assert!((m[0] - (c[0] + 5.0)).abs() < 1e-5);
            assert_eq!(m[1], c[1]);
        }
    }

    #[test]
    fn random_affine_satisfies_correspondence() {
        let atlas = Volume::filled([32; 3], 1.0, 0.0).unwrap();
        let grid = build_atlas_grid(&atlas, &full_mask([32; 3]), 16, 8).unwrap();
        let fwd = SpatialTransform {
            affine: Affine3 {
                m: [[1.04, 0.02, 0.0], [-0.03, 0.97, 0.01], [0.0, 0.02, 1.01]],
                t: [2.0, -1.0, 0.5],
            },
            displacement: None,
            subject_to_atlas: true,
        };
        let inv = fwd.invert([31.0; 3], 1.0).unwrap();
        let mapped = map_centers(&grid, &inv).unwrap();
        for (j, m) in mapped.iter().enumerate() {
            let back = fwd.apply(*m);
            assert!(dist(back, grid.centers_mm[j]) < 1e-3, "node {j}");
        }
    }

    #[test]
    fn constant_volume_extracts_constant_patches() {
        let vol = Volume::filled([16; 3], 1.0, 0.3).unwrap();
        let centers = [[8.0f32, 8.0, 8.0]];
        let (patches, padded) = extract_patches(&vol, &centers, 8).unwrap();
        assert!(patches[0].data().iter().all(|&v| v == 0.3));
        assert!(!padded[0]);
    }

    #[test]
    fn corner_center_pads_with_background() {
        let vol = Volume::filled([8; 3], 1.0, 0.5).unwrap();
        let (patches, padded) = extract_patches(&vol, &[[0.0, 0.0, 0.0]], 4).unwrap();
        assert!(padded[0]);
        let p = &patches[0];
        // voxel offsets below center are out of bounds (-1), the rest in bounds
        let mut i = 0;
        for z in -2i64..2 {
            for y in -2i64..2 {
                for x in -2i64..2 {
                    let expect = if x < 0 || y < 0 || z < 0 { -1.0 } else { 0.5 };
                    assert_eq!(p.data()[i], expect, "offset ({x},{y},{z})");
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn interior_patch_matches_direct_slice() {
        let mut rng = Stream::root(31).derive("vol").rng();
        let vol = Volume::new(
            [16; 3],
            1.0,
            (0..16 * 16 * 16).map(|_| rng.uniform_f32()).collect(),
        )
        .unwrap();
        let (patches, padded) = extract_patches(&vol, &[[8.0, 7.0, 9.0]], 4).unwrap();
        assert!(!padded[0]);
        let p = &patches[0];
        let mut i = 0;
        for z in 0..4usize {
            for y in 0..4usize {
                for x in 0..4usize {
                    assert_eq!(p.data()[i], vol.at(8 - 2 + x, 7 - 2 + y, 9 - 2 + z));
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn adjacency_threshold_behavior() {
        let centers = [[0.0f32, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let a5 = build_adjacency(&centers, 5.0).unwrap();
        assert_eq!(a5.data(), &[0.0, 0.0, 0.0, 0.0]);
        let a11 = build_adjacency(&centers, 11.0).unwrap();
        assert_eq!(a11.data(), &[0.0, 1.0, 1.0, 0.0]);
        // huge rho gives the complete graph minus the diagonal
        let mut rng = Stream::root(7).derive("adj").rng();
        let pts: Vec<[f32; 3]> = (0..5)
            .map(|_| [rng.uniform_f32() * 50.0, rng.uniform_f32() * 50.0, 0.0])
            .collect();
        let big = build_adjacency(&pts, 1e9).unwrap();
        for j in 0..5 {
            for k in 0..5 {
                let expect = if j == k { 0.0 } else { 1.0 };
                assert_eq!(big.data()[j * 5 + k], expect);
            }
        }
    }

    #[test]
    fn grid_graph_has_six_neighbors_inside() {
        // 27 nodes, 16 mm apart; rho 17 connects axis-aligned neighbors only
        let mut centers = Vec::new();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    centers.push([x as f32 * 16.0, y as f32 * 16.0, z as f32 * 16.0]);
                }
            }
        }
        let a = build_adjacency(&centers, 17.0).unwrap();
        let degree = |j: usize| (0..27).map(|k| a.data()[j * 27 + k]).sum::<f32>();
        assert_eq!(degree(13), 6.0); // interior node
        assert_eq!(degree(0), 3.0); // corner
    }

    #[test]
    fn normalized_adjacency_small_cases() {
        let isolated = build_adjacency(&[[0.0, 0.0, 0.0]], 1.0).unwrap();
        let n = normalize_adjacency(&isolated).unwrap();
        assert_eq!(n.data(), &[1.0]);

        let pair = build_adjacency(&[[0.0; 3], [1.0, 0.0, 0.0]], 2.0).unwrap();
        let n = normalize_adjacency(&pair).unwrap();
        for &v in n.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_adjacency_requires_binary_symmetric_zero_diagonal() {
        let bad = Tensor::new(&[2, 2], alloc::vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert!(normalize_adjacency(&bad).is_err());
        let diag = Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(normalize_adjacency(&diag).is_err());
    }

    #[test]
    fn adjacency_is_deterministic() {
        let mut rng = Stream::root(3).derive("det").rng();
        let pts: Vec<[f32; 3]> = (0..12)
            .map(|_| [rng.uniform_f32() * 30.0, rng.uniform_f32() * 30.0, rng.uniform_f32() * 30.0])
            .collect();
        let a = build_adjacency(&pts, 12.0).unwrap();
        let b = build_adjacency(&pts, 12.0).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
