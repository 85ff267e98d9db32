//! Synthetic LiDAR-like scenes, pillar voxelization and the voxel feature
//! encoder.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{LinearVars, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["car", "pedestrian", "cyclist"];
/// Nominal (length, width, height) per class in meters.
pub const CLASS_DIMS: [[f64; 3]; NUM_CLASSES] = [[3.9, 1.6, 1.56], [0.8, 0.6, 1.73], [1.76, 0.6, 1.73]];
/// Per-point input channels of the feature encoder.
pub const POINT_FEATURES: usize = 7;

/// Object surfaces return this many times the ground point density.
const OBJECT_DENSITY_BOOST: f64 = 20.0;
/// A box whose expected point count falls below this cannot be placed.
const MIN_EXPECTED_BOX_POINTS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Extent {
    pub fn square(side: f64) -> Self {
        Extent {
            x_min: 0.0,
            x_max: side,
            y_min: 0.0,
            y_max: side,
            z_min: -3.0,
            z_max: 3.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.x_max > self.x_min && self.y_max > self.y_min && self.z_max > self.z_min)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, p: &[f64; 4]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0])
            && (self.y_min..=self.y_max).contains(&p[1])
            && (self.z_min..=self.z_max).contains(&p[2])
    }
}

impl Default for Extent {
    /// 46.08 m square: a 144×144 map at 0.32 m cells.
    fn default() -> Self {
        Extent::square(46.08)
    }
}

/// Points as `(x, y, z, intensity)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
    pub extent: Extent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLabel {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneLabel {
    pub boxes: Vec<BoxLabel>,
}

/// Knobs that separate the synthetic source and target domains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainParams {
    /// Ground returns per square meter.
    pub density: f64,
    /// Sensor height above ground; the ground plane sits at `-height_offset`.
    pub height_offset: f64,
    pub intensity_bias: f64,
    pub box_scale: f64,
    pub class_mix: [f64; NUM_CLASSES],
}

impl DomainParams {
    pub fn source() -> Self {
        DomainParams {
            density: 4.0,
            height_offset: 1.73,
            intensity_bias: 0.0,
            box_scale: 1.0,
            class_mix: [0.6, 0.2, 0.2],
        }
    }

    /// Sparser, lower-mounted sensor with a different class balance.
    pub fn target() -> Self {
        DomainParams {
            density: 2.5,
            height_offset: 1.45,
            intensity_bias: 0.15,
            box_scale: 0.9,
            class_mix: [0.45, 0.3, 0.25],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.class_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::config(format!(
                "class mix {:?} is not a probability vector",
                self.class_mix
            )));
        }
        if !(self.density > 0.0) || !(self.box_scale > 0.0) {
            return Err(Error::config("density and box scale must be positive"));
        }
        Ok(())
    }
}

/// Deterministic scene for `(seed, params, extent)`.
///
/// Box layout comes from one random stream and point positions from others,
/// and point counts use stochastic rounding of their expectations, so raising
/// the density only appends points to the same sequences.
pub fn gen_scene(seed: u64, params: &DomainParams, extent: &Extent) -> Result<(PointCloud, SceneLabel)> {
    if extent.is_empty() {
        return Err(Error::config("scene extent is empty"));
    }
    params.validate()?;
    let smallest = CLASS_DIMS
        .iter()
        .zip(&params.class_mix)
        .filter(|(_, &p)| p > 0.0)
        .map(|(d, _)| d[0] * d[1] * 0.81 * params.box_scale * params.box_scale)
        .fold(f64::INFINITY, f64::min);
    if params.density * OBJECT_DENSITY_BOOST * smallest < MIN_EXPECTED_BOX_POINTS {
        return Err(Error::Generation(format!(
            "density {} too low to place a box",
            params.density
        )));
    }

    let mut layout = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
    let max_boxes = ((extent.area() / 12.0).round() as usize).clamp(1, 12);
    let count = layout.random_range(1..=max_boxes);
    let margin_x = (0.1 * (extent.x_max - extent.x_min)).min(1.0);
    let margin_y = (0.1 * (extent.y_max - extent.y_min)).min(1.0);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = layout.random();
        let mut class = NUM_CLASSES - 1;
        let mut acc = 0.0;
        for (c, &p) in params.class_mix.iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                class = c;
                break;
            }
        }
        let jitter = layout.random_range(0.9..1.1) * params.box_scale;
        boxes.push(BoxLabel {
            cx: layout.random_range(extent.x_min + margin_x..extent.x_max - margin_x),
            cy: layout.random_range(extent.y_min + margin_y..extent.y_max - margin_y),
            length: CLASS_DIMS[class][0] * jitter,
            width: CLASS_DIMS[class][1] * jitter,
            yaw: layout.random_range(-PI..PI),
            class,
        });
    }

    let ground_z = (-params.height_offset).clamp(extent.z_min, extent.z_max);
    let mut points = Vec::new();
    let mut ground = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let n_ground = stochastic_round(params.density * extent.area(), ground.random());
    for _ in 0..n_ground {
        let x = ground.random_range(extent.x_min..extent.x_max);
        let y = ground.random_range(extent.y_min..extent.y_max);
        let z = ground_z + ground.random_range(-0.05..0.05);
        let i = ground.random_range(0.0..0.3) + params.intensity_bias;
        points.push([x, y, z.clamp(extent.z_min, extent.z_max), i.clamp(0.0, 1.0)]);
    }
    for (b, bx) in boxes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2 + b as u64));
        let height = CLASS_DIMS[bx.class][2] * params.box_scale;
        let expected = params.density * OBJECT_DENSITY_BOOST * bx.length * bx.width;
        let n = stochastic_round(expected, rng.random());
        let (s, c) = bx.yaw.sin_cos();
        for _ in 0..n {
            let u = rng.random_range(-0.5..0.5) * bx.length;
            let v = rng.random_range(-0.5..0.5) * bx.width;
            let h = rng.random_range(0.0..1.0) * height;
            let i = rng.random_range(0.3..0.9) + params.intensity_bias;
            let p = [
                bx.cx + c * u - s * v,
                bx.cy + s * u + c * v,
                (ground_z + h).clamp(extent.z_min, extent.z_max),
                i.clamp(0.0, 1.0),
            ];
            if extent.contains(&p) {
                points.push(p);
            }
        }
    }
    Ok((
        PointCloud {
            points,
            extent: *extent,
        },
        SceneLabel { boxes },
    ))
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn stochastic_round(expected: f64, u: f64) -> usize {
    (expected + u).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSize {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Default for GridSize {
    fn default() -> Self {
        GridSize {
            dx: 0.32,
            dy: 0.32,
            dz: 6.0,
        }
    }
}

impl GridSize {
    /// Cells along x and y covering `extent`.
    pub fn dims(&self, extent: &Extent) -> [usize; 2] {
        let cells = |span: f64, d: f64| ((span / d) - 1e-9).ceil().max(1.0) as usize;
        [
            cells(extent.x_max - extent.x_min, self.dx),
            cells(extent.y_max - extent.y_min, self.dy),
        ]
    }
}

/// Nonzero pillars of a scene, ordered by `(ix, iy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub grid: GridSize,
    pub extent: Extent,
    /// Map size in cells along x and y.
    pub dims: [usize; 2],
    pub coords: Vec<[usize; 2]>,
    /// Retained points per voxel, in input order.
    pub points: Vec<Vec<[f64; 4]>>,
    /// Points that fell into each voxel before truncation.
    pub raw_counts: Vec<usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<[usize; 2]> {
        cell_index(x, y, &self.grid, &self.extent, self.dims)
    }

    /// Center of voxel `(ix, iy)` in meters.
    pub fn center(&self, c: [usize; 2]) -> (f64, f64) {
        (
            self.extent.x_min + (c[0] as f64 + 0.5) * self.grid.dx,
            self.extent.y_min + (c[1] as f64 + 0.5) * self.grid.dy,
        )
    }
}

fn cell_index(x: f64, y: f64, grid: &GridSize, extent: &Extent, dims: [usize; 2]) -> Option<[usize; 2]> {
    let fx = ((x - extent.x_min) / grid.dx).floor();
    let fy = ((y - extent.y_min) / grid.dy).floor();
    if fx < 0.0 || fy < 0.0 || x > extent.x_max || y > extent.y_max {
        return None;
    }
    // points on the far boundary belong to the last cell
    Some([(fx as usize).min(dims[0] - 1), (fy as usize).min(dims[1] - 1)])
}

/// Pillar assignment `ix = floor((x − x_min)/dx)`, likewise for y; each pillar
/// keeps its first `max_points` points.
pub fn voxelize(pc: &PointCloud, grid: &GridSize, max_points: usize) -> Result<VoxelGrid> {
    if !(grid.dx > 0.0 && grid.dy > 0.0 && grid.dz > 0.0) {
        return Err(Error::config(format!("grid size must be positive: {grid:?}")));
    }
    let dims = grid.dims(&pc.extent);
    let mut cells: BTreeMap<[usize; 2], (Vec<[f64; 4]>, usize)> = BTreeMap::new();
    for p in &pc.points {
        let Some(c) = cell_index(p[0], p[1], grid, &pc.extent, dims) else {
            continue;
        };
        let entry = cells.entry(c).or_default();
        entry.1 += 1;
        if entry.0.len() < max_points {
            entry.0.push(*p);
        }
    }
    let mut coords = Vec::with_capacity(cells.len());
    let mut points = Vec::with_capacity(cells.len());
    let mut raw_counts = Vec::with_capacity(cells.len());
    for (c, (pts, n)) in cells {
        coords.push(c);
        points.push(pts);
        raw_counts.push(n);
    }
    Ok(VoxelGrid {
        grid: *grid,
        extent: pc.extent,
        dims,
        coords,
        points,
        raw_counts,
    })
}

/// Encoder inputs: one `POINT_FEATURES`-wide row per retained point
/// `(x, y, z, intensity, x − x_c, y − y_c, z − z_min)`, plus the row ranges
/// belonging to each voxel.
pub fn point_features(vg: &VoxelGrid) -> (Tensor, Vec<Vec<usize>>) {
    let total: usize = vg.points.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(total * POINT_FEATURES);
    let mut segments = Vec::with_capacity(vg.len());
    let mut row = 0;
    for (c, pts) in vg.coords.iter().zip(&vg.points) {
        let (xc, yc) = vg.center(*c);
        segments.push((row..row + pts.len()).collect());
        row += pts.len();
        for p in pts {
            data.extend_from_slice(&[p[0], p[1], p[2], p[3], p[0] - xc, p[1] - yc, p[2] - vg.extent.z_min]);
        }
    }
    let table = Tensor::new(&[total, POINT_FEATURES], data).expect("feature table");
    (table, segments)
}

/// Per-point `linear → ReLU` stack followed by a channelwise max within each
/// voxel, giving `[V × C]`.
pub fn vfe_forward(tape: &mut Tape, vg: &VoxelGrid, layers: &[LinearVars]) -> Result<Var> {
    let last = layers
        .last()
        .ok_or_else(|| Error::config("feature encoder needs at least one layer"))?;
    let channels = tape.value(last.w).shape()[0];
    if vg.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[0, channels])));
    }
    let (table, segments) = point_features(vg);
    let mut h = tape.constant(table);
    for layer in layers {
        h = layer.apply(tape, h)?;
        h = tape.relu(h);
    }
    tape.segment_max(h, &segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 4]>, side: f64) -> PointCloud {
        PointCloud {
            points,
            extent: Extent::square(side),
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let e = Extent::square(7.68);
        let a = gen_scene(11, &DomainParams::source(), &e).unwrap();
        let b = gen_scene(11, &DomainParams::source(), &e).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(12, &DomainParams::source(), &e).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn point_count_scales_with_density() {
        // expected counts are exactly proportional: λ = density·(area + boost·Σ box areas)
        let e = Extent::default();
        let mut lo = DomainParams::source();
        lo.density = 0.1;
        let mut hi = lo;
        hi.density = 10.0;
        let (a, _) = gen_scene(3, &lo, &e).unwrap();
        let (b, _) = gen_scene(3, &hi, &e).unwrap();
        let ratio = b.points.len() as f64 / a.points.len() as f64;
        assert!((80.0..=120.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_class_mix() {
        let mut p = DomainParams::source();
        p.class_mix = [1.0, 0.0, 0.0];
        for seed in 0..10 {
            let (_, labels) = gen_scene(seed, &p, &Extent::default()).unwrap();
            assert!(labels.boxes.iter().all(|b| b.class == 0));
        }
    }

    #[test]
    fn generated_points_and_boxes_respect_invariants() {
        let e = Extent::square(7.68);
        for seed in 0..20 {
            let (pc, labels) = gen_scene(seed, &DomainParams::target(), &e).unwrap();
            assert!(pc.points.iter().all(|p| e.contains(p)));
            for b in &labels.boxes {
                assert!(b.length > 0.0 && b.width > 0.0);
                assert!((-PI..=PI).contains(&b.yaw));
            }
        }
    }

    #[test]
    fn too_sparse_scene_is_rejected() {
        let mut p = DomainParams::source();
        p.density = 1e-4;
        assert!(matches!(
            gen_scene(0, &p, &Extent::default()),
            Err(Error::Generation(_))
        ));
        p.class_mix = [0.5, 0.5, 0.5];
        assert!(matches!(gen_scene(0, &p, &Extent::default()), Err(Error::Config(_))));
    }

    #[test]
    fn density_never_shrinks_voxel_count() {
        let e = Extent::square(7.68);
        for seed in 0..5 {
            let mut last = 0;
            for density in [0.5, 1.0, 2.0, 4.0, 8.0] {
                let mut p = DomainParams::source();
                p.density = density;
                let (pc, _) = gen_scene(seed, &p, &e).unwrap();
                let v = voxelize(&pc, &GridSize::default(), 32).unwrap().len();
                assert!(v >= last, "seed {seed} density {density}: {v} < {last}");
                last = v;
            }
        }
    }

    #[test]
    fn voxelize_examples() {
        let g = GridSize::default();
        let vg = voxelize(&cloud(vec![[0.0, 0.0, 0.0, 0.5]], 7.68), &g, 32).unwrap();
        assert_eq!(vg.coords, vec![[0, 0]]);
        assert_eq!(vg.dims, [24, 24]);

        let vg = voxelize(&cloud(vec![[0.1, 0.1, 0.0, 0.5], [0.2, 0.3, 1.0, 0.1]], 7.68), &g, 32).unwrap();
        assert_eq!(vg.len(), 1);
        assert_eq!(vg.points[0].len(), 2);
    }

    #[test]
    fn uniform_cloud_over_four_cells_counts_every_point() {
        // 100 points spread over a 2×2 cell extent
        let g = GridSize { dx: 1.0, dy: 1.0, dz: 6.0 };
        let pts: Vec<[f64; 4]> = (0..100)
            .map(|i| [(i % 10) as f64 * 0.199 + 0.01, (i / 10) as f64 * 0.199 + 0.01, 0.0, 0.0])
            .collect();
        let vg = voxelize(&cloud(pts, 2.0), &g, 1000).unwrap();
        assert_eq!(vg.len(), 4);
        assert_eq!(vg.raw_counts.iter().sum::<usize>(), 100);
        assert_eq!(vg.points.iter().map(Vec::len).sum::<usize>(), 100);
    }

    #[test]
    fn truncation_keeps_first_points_in_input_order() {
        let g = GridSize::default();
        let pts: Vec<[f64; 4]> = (0..5).map(|i| [0.1, 0.1, 0.0, i as f64 / 10.0]).collect();
        let vg = voxelize(&cloud(pts, 7.68), &g, 3).unwrap();
        assert_eq!(vg.raw_counts, vec![5]);
        assert_eq!(vg.points[0].iter().map(|p| p[3]).collect::<Vec<_>>(), vec![0.0, 0.1, 0.2]);
    }

    #[test]
    fn voxelized_points_map_back_to_their_cell() {
        let e = Extent::square(7.68);
        let (pc, _) = gen_scene(5, &DomainParams::source(), &e).unwrap();
        let vg = voxelize(&pc, &GridSize::default(), 8).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (c, pts) in vg.coords.iter().zip(&vg.points) {
            assert!(seen.insert(*c));
            for p in pts {
                assert_eq!(vg.cell_of(p[0], p[1]), Some(*c));
            }
        }
        assert!(vg.raw_counts.iter().sum::<usize>() == pc.points.len());
        assert!(vg.points.iter().map(Vec::len).sum::<usize>() <= pc.points.len());
    }

    fn encoder(tape: &mut Tape, c: usize) -> LinearVars {
        let w: Vec<f64> = (0..c * POINT_FEATURES).map(|i| ((i as f64) * 0.61).sin() * 0.4).collect();
        let b: Vec<f64> = (0..c).map(|i| 0.05 * i as f64 - 0.1).collect();
        let w = tape.constant(Tensor::new(&[c, POINT_FEATURES], w).unwrap());
        let b = tape.constant(Tensor::vector(&b));
        LinearVars::new(w, Some(b))
    }

    #[test]
    fn vfe_single_point_is_its_encoding() {
        let vg = voxelize(&cloud(vec![[1.0, 2.0, 0.5, 0.3]], 7.68), &GridSize::default(), 32).unwrap();
        let mut tape = Tape::new();
        let layer = encoder(&mut tape, 8);
        let f = vfe_forward(&mut tape, &vg, &[layer]).unwrap();
        let (table, _) = point_features(&vg);
        let x = tape.constant(table);
        let enc = layer.apply(&mut tape, x).unwrap();
        let enc = tape.relu(enc);
        assert_eq!(tape.value(f).data(), tape.value(enc).data());
    }

    #[test]
    fn vfe_ignores_duplicates_and_point_order() {
        let base = vec![[1.0, 2.0, 0.5, 0.3], [1.1, 2.05, -0.2, 0.9], [1.2, 2.1, 1.5, 0.1]];
        let mut dup = base.clone();
        dup.push(base[1]);
        let mut shuffled = base.clone();
        shuffled.reverse();
        let run = |pts: Vec<[f64; 4]>| {
            let vg = voxelize(&cloud(pts, 7.68), &GridSize::default(), 32).unwrap();
            let mut tape = Tape::new();
            let layer = encoder(&mut tape, 8);
            let f = vfe_forward(&mut tape, &vg, &[layer]).unwrap();
            tape.value(f).clone()
        };
        let reference = run(base);
        assert_eq!(run(dup), reference);
        assert_eq!(run(shuffled), reference);
    }

    #[test]
    fn vfe_matches_straight_line_encoder() {
        let pts = vec![
            [0.1, 0.1, 0.0, 0.2],
            [0.2, 0.25, 0.4, 0.7],
            [1.0, 0.1, -1.0, 0.1],
            [5.0, 6.0, 0.3, 0.4],
            [5.05, 6.05, 1.3, 0.6],
        ];
        let vg = voxelize(&cloud(pts, 7.68), &GridSize::default(), 32).unwrap();
        assert_eq!(vg.len(), 3);
        let mut tape = Tape::new();
        let layer = encoder(&mut tape, 8);
        let f = vfe_forward(&mut tape, &vg, &[layer]).unwrap();
        let w = tape.value(layer.w).clone();
        let b = tape.value(layer.b.unwrap()).clone();
        for (v, (c, pts)) in vg.coords.iter().zip(&vg.points).enumerate() {
            let (xc, yc) = vg.center(*c);
            for ch in 0..8 {
                let mut best = f64::NEG_INFINITY;
                for p in pts {
                    let input = [p[0], p[1], p[2], p[3], p[0] - xc, p[1] - yc, p[2] + 3.0];
                    let mut acc = b.data()[ch];
                    for k in 0..POINT_FEATURES {
                        acc += w.at(ch, k) * input[k];
                    }
                    best = best.max(acc.max(0.0));
                }
                assert!((tape.value(f).at(v, ch) - best).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn vfe_on_empty_grid_is_empty_table() {
        let vg = voxelize(&cloud(vec![], 7.68), &GridSize::default(), 32).unwrap();
        let mut tape = Tape::new();
        let layer = encoder(&mut tape, 8);
        let f = vfe_forward(&mut tape, &vg, &[layer]).unwrap();
        assert_eq!(tape.value(f).shape(), &[0, 8]);
    }
}
