//! Window assignment and the rotated X/Y set partitions of nonzero voxels.

use std::collections::BTreeMap;
use std::sync::Arc;


use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// Which window and sort axis every partition uses.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSchedule {
    pub blocks: usize,
    /// Window size `(wx, wy)` per block, cycled when shorter than `blocks`.
    pub windows: Vec<[usize; 2]>,
    /// Set capacity `n_s`.
    pub set_size: usize,
}

impl Default for PartitionSchedule {
    fn default() -> Self {
        PartitionSchedule {
            blocks: 4,
            windows: vec![[12, 12], [24, 24]],
            set_size: 36,
        }
    }
}

/// Placement of one partition `j` (1-based) in the block sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    pub index: usize,
    pub block: usize,
    pub axis: Axis,
    pub window: [usize; 2],
}

impl PartitionSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.set_size == 0 || self.windows.is_empty() {
            return Err(Error::config("schedule needs blocks, windows and n_s ≥ 1"));
        }
        if self.windows.iter().any(|w| w[0] == 0 || w[1] == 0) {
            return Err(Error::config("window extents must be ≥ 1"));
        }
        Ok(())
    }

    pub fn num_partitions(&self) -> usize {
        2 * self.blocks
    }

    pub fn window_for_block(&self, block: usize) -> [usize; 2] {
        self.windows[block % self.windows.len()]
    }

    /// Odd `j` sorts along X, even `j` along Y.
    pub fn spec(&self, j: usize) -> PartitionSpec {
        assert!(j >= 1 && j <= self.num_partitions(), "partition {j} out of range");
        let block = (j - 1) / 2;
        PartitionSpec {
            index: j,
            block,
            axis: if j % 2 == 1 { Axis::X } else { Axis::Y },
            window: self.window_for_block(block),
        }
    }
}

/// Window id `(ix / wx, iy / wy)`, flattened row-major over the window grid.
pub fn window_assign(coords: &[[usize; 2]], dims: [usize; 2], window: [usize; 2]) -> Vec<usize> {
    let windows_y = dims[1].div_ceil(window[1]).max(1);
    coords
        .iter()
        .map(|c| (c[0] / window[0]) * windows_y + c[1] / window[1])
        .collect()
}

/// Fixed-capacity voxel sets `S_j`. Slot `(i, s)` of the flat layout holds the
/// voxel row index at position `i·n_s + s`, or `None` for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetPartition {
    pub index: usize,
    pub axis: Axis,
    pub set_size: usize,
    pub voxel_index: Vec<Option<usize>>,
    /// Window id of each set.
    pub window_ids: Vec<usize>,
}

impl SetPartition {
    pub fn num_sets(&self) -> usize {
        self.window_ids.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.voxel_index.iter().map(Option::is_some).collect()
    }

    pub fn slots(&self, set: usize) -> &[Option<usize>] {
        &self.voxel_index[set * self.set_size..(set + 1) * self.set_size]
    }

    pub fn valid_count(&self, set: usize) -> usize {
        self.slots(set).iter().flatten().count()
    }

    /// Voxel indices of each set's valid slots.
    pub fn members(&self) -> Vec<Vec<usize>> {
        (0..self.num_sets())
            .map(|i| self.slots(i).iter().flatten().copied().collect())
            .collect()
    }

    /// Flat slot holding each voxel; `None` for voxels the partition misses.
    pub fn slot_of_voxel(&self, num_voxels: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; num_voxels];
        for (slot, v) in self.voxel_index.iter().enumerate() {
            if let Some(v) = v {
                map[*v] = Some(slot);
            }
        }
        map
    }

    /// Gather `[V × C]` voxel features into `[N × n_s × C]`, zero-padded.
    pub fn gather(&self, features: &Tensor) -> Tensor {
        let c = features.cols();
        let mut data = vec![0.0; self.voxel_index.len() * c];
        for (dst, src) in data.chunks_mut(c.max(1)).zip(&self.voxel_index) {
            if let Some(v) = src {
                dst.copy_from_slice(features.row(*v));
            }
        }
        Tensor::new(&[self.num_sets(), self.set_size, c], data).expect("gather shape")
    }
}

/// Sort voxels of each window by `(axis coordinate, other coordinate, row)`
/// and cut them into consecutive sets of `n_s`; only the last set of a window
/// is short.
pub fn set_partition(
    coords: &[[usize; 2]],
    dims: [usize; 2],
    window: [usize; 2],
    axis: Axis,
    set_size: usize,
    index: usize,
) -> Result<SetPartition> {
    if set_size == 0 {
        return Err(Error::config("set capacity n_s must be ≥ 1"));
    }
    if window[0] == 0 || window[1] == 0 {
        return Err(Error::config("window extents must be ≥ 1"));
    }
    let ids = window_assign(coords, dims, window);
    let mut windows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, id) in ids.iter().enumerate() {
        windows.entry(*id).or_default().push(row);
    }
    let mut voxel_index = Vec::new();
    let mut window_ids = Vec::new();
    for (id, mut rows) in windows {
        rows.sort_by_key(|&r| {
            let [x, y] = coords[r];
            match axis {
                Axis::X => (x, y, r),
                Axis::Y => (y, x, r),
            }
        });
        for chunk in rows.chunks(set_size) {
            voxel_index.extend(chunk.iter().map(|&r| Some(r)));
            voxel_index.extend(std::iter::repeat_n(None, set_size - chunk.len()));
            window_ids.push(id);
        }
    }
    Ok(SetPartition {
        index,
        axis,
        set_size,
        voxel_index,
        window_ids,
    })
}

/// Inverse of [`SetPartition::gather`]: every voxel takes the row of its slot.
pub fn scatter_back(sp: &SetPartition, set_outputs: &Tensor, num_voxels: usize) -> Result<Tensor> {
    let expected_rows = sp.voxel_index.len();
    if set_outputs.rows() != expected_rows {
        return Err(Error::dim(
            "scatter_back",
            set_outputs.shape(),
            &[sp.num_sets(), sp.set_size],
        ));
    }
    let c = set_outputs.cols();
    let mut out = Tensor::zeros(&[num_voxels, c]);
    for (v, slot) in sp.slot_of_voxel(num_voxels).into_iter().enumerate() {
        let slot = slot.ok_or_else(|| Error::wiring(format!("voxel {v} is not covered")))?;
        out.row_mut(v).copy_from_slice(set_outputs.row(slot));
    }
    Ok(out)
}

/// Tape version of [`scatter_back`] for `[N·n_s × C]` set rows.
pub fn scatter_back_var(tape: &mut Tape, sp: &SetPartition, set_rows: Var, num_voxels: usize) -> Result<Var> {
    if tape.value(set_rows).rows() != sp.voxel_index.len() {
        return Err(Error::dim(
            "scatter_back",
            tape.value(set_rows).shape(),
            &[sp.num_sets(), sp.set_size],
        ));
    }
    let index: Arc<[Option<usize>]> = sp.slot_of_voxel(num_voxels).into();
    if index.iter().any(Option::is_none) {
        return Err(Error::wiring("partition does not cover every voxel"));
    }
    tape.gather_rows(set_rows, index)
}
